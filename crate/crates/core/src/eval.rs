//! Test-time inference, metrics and multi-run aggregation.

use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::materialize;
use crate::cgan::{class_anchors, collapse_probe, synthesize_known};
use crate::config::{EvalMode, ExperimentConfig};
use crate::data::{
    sample_episode, sample_test_episode, ClassSplits, DatasetRegistry, Domain, DomainEpisode, EpisodeSpec, Phase,
    Sample,
};
use crate::error::{DafosError, Result};
use crate::features::{FeatureBatch, Provenance};
use crate::heads::{predict_logits, Head};
use crate::losses::{compute_prototypes, gcdpa_value};
use crate::rng::{rng_for, stream};
use crate::tape::Mat;
use crate::trainer::{Model, SourceBank};

/// One scored query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query: usize,
    pub true_class: String,
    pub true_domain: Domain,
    pub is_known: bool,
    /// `None` means the query was rejected as an outlier.
    pub predicted_class: Option<String>,
    /// Outlier-class probability from the outlier head.
    pub outlier_score: f64,
    pub predicted_domain: Domain,
}

/// Ground truth for one query row.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTruth {
    pub class: String,
    pub domain: Domain,
    pub is_known: bool,
}

/// Which prototypes an inlier is classified against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Episode target prototypes only.
    Target,
    /// The domain head picks the source bank or the target prototypes.
    DomainHead,
    /// Nearest prototype over the source bank and the target prototypes together.
    Merged,
}

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(q: ndarray::ArrayView1<f64>, protos: &Mat) -> (usize, f64) {
    protos
        .outer_iter()
        .enumerate()
        .map(|(k, p)| (k, sq(q, p)))
        .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

/// Distance rows `n × 2K`: the `K` smallest distances to the source bank,
/// then the distances to the `K` target prototypes.
pub fn test_distance_rows(queries: &Mat, bank: &Mat, proto_t: &Mat) -> Result<Mat> {
    let k = proto_t.nrows();
    if bank.nrows() < k {
        return Err(DafosError::InvalidArgument(format!(
            "source bank has {} prototypes, fewer than the {k} ways",
            bank.nrows()
        )));
    }
    if bank.ncols() != queries.ncols() || proto_t.ncols() != queries.ncols() {
        return Err(DafosError::Shape("query and prototype widths differ".into()));
    }
    let mut out = Mat::zeros((queries.nrows(), 2 * k));
    for (i, q) in queries.outer_iter().enumerate() {
        let mut ds: Vec<f64> = bank.outer_iter().map(|p| sq(q, p)).collect();
        ds.sort_by(f64::total_cmp);
        for j in 0..k {
            out[[i, j]] = ds[j];
        }
        for (j, p) in proto_t.outer_iter().enumerate() {
            out[[i, k + j]] = sq(q, p);
        }
    }
    Ok(out)
}

/// Gated inference on embedded queries: the outlier head decides
/// inlier/outlier, inliers go to the nearest prototype chosen by `routing`.
pub fn infer_queries(
    outlier: &Head,
    domain_head: &Head,
    bank: &SourceBank,
    proto_t: &Mat,
    target_classes: &[String],
    queries: &Mat,
    truth: &[QueryTruth],
    routing: Routing,
) -> Result<Vec<PredictionRecord>> {
    if truth.len() != queries.nrows() || target_classes.len() != proto_t.nrows() {
        return Err(DafosError::Shape("one truth row per query and one class per prototype".into()));
    }
    let dist = test_distance_rows(queries, &bank.prototypes, proto_t)?;
    let out = predict_logits(&outlier.logits(&dist)?)?;
    let dom = predict_logits(&domain_head.logits(&dist)?)?;
    let mut records = Vec::with_capacity(truth.len());
    for (i, t) in truth.iter().enumerate() {
        let q = queries.row(i);
        let predicted_domain = if dom[i].1 == 0 { Domain::Source } else { Domain::Target };
        let predicted_class = if out[i].1 == 1 {
            None
        } else {
            let from_target = |q| target_classes[nearest(q, proto_t).0].clone();
            let from_bank = |q| bank.classes[nearest(q, &bank.prototypes).0].clone();
            Some(match routing {
                Routing::Target => from_target(q),
                Routing::DomainHead => match predicted_domain {
                    Domain::Source => from_bank(q),
                    Domain::Target => from_target(q),
                },
                Routing::Merged => {
                    let (ks, ds) = nearest(q, &bank.prototypes);
                    let (kt, dt) = nearest(q, proto_t);
                    if ds < dt {
                        bank.classes[ks].clone()
                    } else {
                        target_classes[kt].clone()
                    }
                }
            })
        };
        records.push(PredictionRecord {
            query: i,
            true_class: t.class.clone(),
            true_domain: t.domain,
            is_known: t.is_known,
            predicted_class,
            outlier_score: out[i].0[1],
            predicted_domain,
        });
    }
    Ok(records)
}

/// Percentage of known queries assigned their true class.
pub fn closed_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    let known: Vec<&PredictionRecord> = records.iter().filter(|r| r.is_known).collect();
    if known.is_empty() {
        return Err(DafosError::InvalidArgument("closed accuracy needs at least one known query".into()));
    }
    let correct = known
        .iter()
        .filter(|r| r.predicted_class.as_deref() == Some(r.true_class.as_str()))
        .count();
    Ok(100.0 * correct as f64 / known.len() as f64)
}

/// Probability that a random outlier outscores a random known query, ties ½.
pub fn auroc(scores: &[f64], is_outlier: &[bool]) -> Result<f64> {
    if scores.len() != is_outlier.len() {
        return Err(DafosError::Shape("auroc: one label per score".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DafosError::InvalidArgument("auroc: NaN score".into()));
    }
    let n1 = is_outlier.iter().filter(|&&o| o).count();
    let n0 = scores.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(DafosError::InvalidArgument("auroc needs both outliers and known queries".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from midranks: each tie group shares its average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| is_outlier[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 * n0) as f64)
}

/// `KL(N_real ‖ N_synth)` between diagonal Gaussian fits (population
/// variances floored at `1e-6`).
pub fn kl_divergence_gaussian(real: &Mat, synth: &Mat) -> Result<f64> {
    if real.nrows() < 2 || synth.nrows() < 2 {
        return Err(DafosError::InsufficientSamples("KL fit needs at least two rows per side".into()));
    }
    if real.ncols() != synth.ncols() {
        return Err(DafosError::Shape("KL: feature widths differ".into()));
    }
    const FLOOR: f64 = 1e-6;
    let fit = |m: &Mat| {
        let mu = m.mean_axis(Axis(0)).expect("rows");
        let var = m.var_axis(Axis(0), 0.0).mapv(|v| v.max(FLOOR));
        (mu, var)
    };
    let (mr, vr) = fit(real);
    let (ms, vs) = fit(synth);
    let kl = (0..real.ncols())
        .map(|j| 0.5 * ((vs[j] / vr[j]).ln() + (vr[j] + (mr[j] - ms[j]).powi(2)) / vs[j] - 1.0))
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Scores for one test episode; percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub run: usize,
    pub episode: usize,
    pub acc: f64,
    pub auroc: f64,
    pub acc_source: Option<f64>,
    pub acc_target: Option<f64>,
    /// Generalized mode only: accuracy with a single merged prototype bank.
    pub merged_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub acc_mean: f64,
    /// Population std over every scored episode.
    pub acc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    /// Population std of the per-run means.
    pub acc_run_std: f64,
    pub auroc_run_std: f64,
    pub episodes: usize,
    pub runs: usize,
    pub fingerprint: String,
    pub acc_source_mean: Option<f64>,
    pub acc_target_mean: Option<f64>,
    pub merged_acc_mean: Option<f64>,
}

/// Mean and population std.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn optional_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

pub fn aggregate(per_episode: &[EpisodeMetrics], mode: EvalMode, fingerprint: &str) -> Result<MetricsReport> {
    if per_episode.is_empty() {
        return Err(DafosError::InvalidArgument("aggregate: no episodes".into()));
    }
    let acc: Vec<f64> = per_episode.iter().map(|m| m.acc).collect();
    let au: Vec<f64> = per_episode.iter().map(|m| m.auroc).collect();
    let mut runs: Vec<usize> = per_episode.iter().map(|m| m.run).collect();
    runs.sort_unstable();
    runs.dedup();
    let run_means = |f: fn(&EpisodeMetrics) -> f64| -> Vec<f64> {
        runs.iter()
            .map(|&r| {
                let v: Vec<f64> = per_episode.iter().filter(|m| m.run == r).map(f).collect();
                mean_std(&v).0
            })
            .collect()
    };
    let (acc_mean, acc_std) = mean_std(&acc);
    let (auroc_mean, auroc_std) = mean_std(&au);
    Ok(MetricsReport {
        mode,
        acc_mean,
        acc_std,
        auroc_mean,
        auroc_std,
        acc_run_std: mean_std(&run_means(|m| m.acc)).1,
        auroc_run_std: mean_std(&run_means(|m| m.auroc)).1,
        episodes: per_episode.len(),
        runs: runs.len(),
        fingerprint: fingerprint.to_string(),
        acc_source_mean: optional_mean(per_episode.iter().map(|m| m.acc_source)),
        acc_target_mean: optional_mean(per_episode.iter().map(|m| m.acc_target)),
        merged_acc_mean: optional_mean(per_episode.iter().map(|m| m.merged_acc)),
    })
}

impl MetricsReport {
    /// Plain-text `mean ± std` summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "mode: {:?}\nepisodes: {} over {} run(s)\nAcc: {:.2} ± {:.2}\nAUROC: {:.2} ± {:.2}\n",
            self.mode, self.episodes, self.runs, self.acc_mean, self.acc_std, self.auroc_mean, self.auroc_std
        );
        for (name, v) in [
            ("Acc (source queries)", self.acc_source_mean),
            ("Acc (target queries)", self.acc_target_mean),
            ("Acc (merged bank)", self.merged_acc_mean),
        ] {
            if let Some(v) = v {
                s.push_str(&format!("{name}: {v:.2}\n"));
            }
        }
        s.push_str(&format!("config: {}\n", self.fingerprint));
        s
    }
}

fn load_domain(
    de: &DomainEpisode,
    registry: &DatasetRegistry,
    cfg: &ExperimentConfig,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let load = |refs: &[crate::data::LabeledRef]| {
        refs.iter()
            .map(|r| materialize(&r.sample, registry.synthetic.as_ref(), cfg.backbone.input))
            .collect::<Result<Vec<_>>>()
    };
    Ok((load(&de.support)?, load(&de.query)?))
}

/// Target prototypes for a test support set, optionally augmented with
/// low-branch synthetic features.
pub fn test_prototypes(
    model: &Model,
    support: &FeatureBatch,
    ways: usize,
    cfg: &ExperimentConfig,
    augment: bool,
    rng: &mut crate::rng::DetRng,
) -> Result<Mat> {
    let synth = if augment {
        let anchors = class_anchors(support, ways)?;
        Some(synthesize_known(&model.gans, &anchors, support.domain, cfg.eval_synth_per_class(), &cfg.gan.noise(), rng)?)
    } else {
        None
    };
    Ok(compute_prototypes(support, synth.as_ref().map(|s| &s.batch), ways)?.rows)
}

/// Result of one test episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub records: Vec<PredictionRecord>,
    pub metrics: EpisodeMetrics,
}

/// Samples, embeds and scores test episode `(run, episode)`.
pub fn evaluate_episode(
    model: &Model,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    run: usize,
    episode: usize,
) -> Result<EpisodeResult> {
    let bank = model
        .source_bank
        .as_ref()
        .ok_or_else(|| DafosError::MissingSegment("source prototype bank".into()))?;
    let opts = &cfg.eval;
    let spec = opts.episode_spec();
    let mut rng = rng_for(cfg.seed, &[stream::TEST_EPISODE, run as u64, episode as u64]);
    let ep = sample_test_episode(registry, splits, &spec, &mut rng)?;
    let ways = spec.ways;

    let (t_support, t_query) = load_domain(&ep.target, registry, cfg)?;
    let support_feats = model.backbone.embed(&t_support, Domain::Target)?;
    let support = FeatureBatch::new(
        support_feats,
        ep.target.support.iter().map(|r| r.label).collect(),
        Domain::Target,
        Provenance::Real,
    );
    let mut synth_rng = rng_for(cfg.seed, &[stream::EVAL_STEP, run as u64, episode as u64]);
    let proto_t = test_prototypes(model, &support, ways, cfg, opts.test_augment, &mut synth_rng)?;

    let mut queries = model.backbone.embed(&t_query, Domain::Target)?;
    let mut truth: Vec<QueryTruth> = ep
        .target
        .query
        .iter()
        .map(|r| QueryTruth {
            class: r.class.clone(),
            domain: Domain::Target,
            is_known: r.label < ways,
        })
        .collect();
    if !ep.source.query.is_empty() {
        let (_, s_query) = load_domain(&ep.source, registry, cfg)?;
        let sq = model.backbone.embed(&s_query, Domain::Source)?;
        queries = ndarray::concatenate(Axis(0), &[queries.view(), sq.view()]).expect("same width");
        truth.extend(ep.source.query.iter().map(|r| QueryTruth {
            class: r.class.clone(),
            domain: Domain::Source,
            is_known: true,
        }));
    }

    let routing = match opts.mode {
        EvalMode::Standard => Routing::Target,
        EvalMode::Generalized => Routing::DomainHead,
    };
    let classes = &ep.target.known;
    let records = infer_queries(&model.outlier, &model.domain, bank, &proto_t, classes, &queries, &truth, routing)?;
    let scores: Vec<f64> = records.iter().map(|r| r.outlier_score).collect();
    let labels: Vec<bool> = records.iter().map(|r| !r.is_known).collect();
    let by_domain = |d: Domain| {
        let sub: Vec<PredictionRecord> = records.iter().filter(|r| r.true_domain == d).cloned().collect();
        closed_accuracy(&sub).ok()
    };
    let (acc_source, acc_target, merged_acc) = if opts.mode == EvalMode::Generalized {
        let merged = infer_queries(
            &model.outlier,
            &model.domain,
            bank,
            &proto_t,
            classes,
            &queries,
            &truth,
            Routing::Merged,
        )?;
        (by_domain(Domain::Source), by_domain(Domain::Target), Some(closed_accuracy(&merged)?))
    } else {
        (None, None, None)
    };
    let metrics = EpisodeMetrics {
        run,
        episode,
        acc: closed_accuracy(&records)?,
        auroc: 100.0 * auroc(&scores, &labels)?,
        acc_source,
        acc_target,
        merged_acc,
    };
    Ok(EpisodeResult { records, metrics })
}

/// Per-episode metrics and the aggregated report.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub episodes: Vec<EpisodeMetrics>,
    pub report: MetricsReport,
}

/// Scores `cfg.eval.runs × cfg.eval.episodes` test episodes. Episodes run in
/// parallel on `cfg.eval.workers` threads and are reduced in fixed order.
pub fn evaluate(
    model: &Model,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
) -> Result<Evaluation> {
    let opts = &cfg.eval;
    let jobs: Vec<(usize, usize)> = (0..opts.runs)
        .flat_map(|r| (0..opts.episodes).map(move |e| (r, e)))
        .collect();
    let score = |&(r, e): &(usize, usize)| evaluate_episode(model, registry, splits, cfg, r, e).map(|x| x.metrics);
    let episodes: Vec<EpisodeMetrics> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| DafosError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(score).collect::<Result<_>>())?
    } else {
        jobs.iter().map(score).collect::<Result<_>>()?
    };
    let report = aggregate(&episodes, opts.mode, &cfg.fingerprint()?)?;
    Ok(Evaluation { episodes, report })
}

/// Writes `episodes.csv` and `report.json` / `report.txt` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DafosError::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("episodes.csv"))?;
    for m in &eval.episodes {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| DafosError::io(dir.join("episodes.csv"), e))?;
    let json = serde_json::to_string_pretty(&eval.report)?;
    std::fs::write(dir.join("report.json"), json).map_err(|e| DafosError::io(dir.join("report.json"), e))?;
    std::fs::write(dir.join("report.txt"), eval.report.summary()).map_err(|e| DafosError::io(dir.join("report.txt"), e))
}

/// Mean GCDPA gap over `episodes` training episodes, using eval-mode
/// features and real support prototypes only.
pub fn alignment_gap(
    model: &Model,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    episodes: usize,
) -> Result<f64> {
    if episodes == 0 {
        return Err(DafosError::InvalidArgument("alignment_gap: no episodes".into()));
    }
    let spec = EpisodeSpec {
        phase: Phase::Train,
        ..cfg.episode
    };
    let ways = spec.ways;
    let dsbn = &model.backbone.dsbn;
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = rng_for(cfg.seed, &[stream::DIAGNOSTIC, 0, e as u64]);
        let ep = sample_episode(registry, splits, &spec, &mut rng)?;
        let mut protos = Vec::with_capacity(2);
        for d in Domain::BOTH {
            let de = ep.domain(d);
            let (support, _) = load_domain(de, registry, cfg)?;
            let feats = model.backbone.embed(&support, d)?;
            let batch = FeatureBatch::new(feats, de.support.iter().map(|r| r.label).collect(), d, Provenance::Real);
            protos.push(compute_prototypes(&batch, None, ways)?.rows);
        }
        total += gcdpa_value(
            &protos[0],
            &protos[1],
            [
                dsbn.gamma(Domain::Source),
                dsbn.beta(Domain::Source),
                dsbn.gamma(Domain::Target),
                dsbn.beta(Domain::Target),
            ],
        )?;
    }
    Ok(total / episodes as f64)
}

/// Mean KL between real target features of the known test classes and
/// low-branch synthetic features conditioned on the 1-shot support.
pub fn synthetic_kl(
    model: &Model,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    episodes: usize,
) -> Result<f64> {
    if episodes == 0 {
        return Err(DafosError::InvalidArgument("synthetic_kl: no episodes".into()));
    }
    let spec = EpisodeSpec {
        generalized: false,
        ..cfg.eval.episode_spec()
    };
    let ways = spec.ways;
    let mut total = 0.0;
    for e in 0..episodes {
        let mut rng = rng_for(cfg.seed, &[stream::DIAGNOSTIC, 1, e as u64]);
        let ep = sample_test_episode(registry, splits, &spec, &mut rng)?;
        let (support, query) = load_domain(&ep.target, registry, cfg)?;
        let labels: Vec<usize> = ep.target.support.iter().map(|r| r.label).collect();
        let batch = FeatureBatch::new(model.backbone.embed(&support, Domain::Target)?, labels, Domain::Target, Provenance::Real);
        let known: Vec<usize> = (0..query.len()).filter(|&i| ep.target.query[i].label < ways).collect();
        let real = model.backbone.embed(&query, Domain::Target)?.select(Axis(0), &known);
        let anchors = class_anchors(&batch, ways)?;
        let per_class = spec.queries;
        let synth = synthesize_known(&model.gans, &anchors, Domain::Target, per_class, &cfg.gan.noise(), &mut rng)?;
        total += kl_divergence_gaussian(&real, &synth.batch.features)?;
    }
    Ok(total / episodes as f64)
}

/// Mean `cos(s_l, s_h)` over noise pairs with `cos(z_l, z_h) > threshold`,
/// conditioned on 1-shot target support anchors of `episodes` test episodes.
pub fn collapse_diagnostic(
    model: &Model,
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    episodes: usize,
    draws: usize,
    threshold: f64,
) -> Result<f64> {
    let spec = EpisodeSpec {
        generalized: false,
        ..cfg.eval.episode_spec()
    };
    let (mut sum, mut count) = (0.0, 0usize);
    for e in 0..episodes {
        let mut rng = rng_for(cfg.seed, &[stream::DIAGNOSTIC, 2, e as u64]);
        let ep = sample_test_episode(registry, splits, &spec, &mut rng)?;
        let (support, _) = load_domain(&ep.target, registry, cfg)?;
        let labels: Vec<usize> = ep.target.support.iter().map(|r| r.label).collect();
        let batch = FeatureBatch::new(model.backbone.embed(&support, Domain::Target)?, labels, Domain::Target, Provenance::Real);
        let anchors = class_anchors(&batch, spec.ways)?;
        let (mean, n) = collapse_probe(&model.gans, &anchors, Domain::Target, draws, threshold, &cfg.gan.noise(), &mut rng)?;
        sum += mean * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(DafosError::InsufficientSamples("collapse diagnostic: no qualifying noise pairs".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadConfig, HeadKind};
    use crate::nn::Parameterized;
    use crate::rng::DetRng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rec(class: &str, known: bool, pred: Option<&str>) -> PredictionRecord {
        PredictionRecord {
            query: 0,
            true_class: class.into(),
            true_domain: Domain::Target,
            is_known: known,
            predicted_class: pred.map(String::from),
            outlier_score: 0.0,
            predicted_domain: Domain::Target,
        }
    }

    #[test]
    fn accuracy_examples() {
        let all = vec![rec("a", true, Some("a")), rec("b", true, Some("b"))];
        assert_eq!(closed_accuracy(&all).unwrap(), 100.0);
        let three = vec![
            rec("a", true, Some("a")),
            rec("b", true, Some("b")),
            rec("c", true, Some("c")),
            rec("d", true, None),
            rec("u", false, Some("a")),
        ];
        assert_eq!(closed_accuracy(&three).unwrap(), 75.0);
        assert!(closed_accuracy(&[rec("u", false, None)]).is_err());
    }

    fn brute_auroc(known: &[f64], out: &[f64]) -> f64 {
        let mut s = 0.0;
        for &o in out {
            for &k in known {
                s += if o > k {
                    1.0
                } else if o == k {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (known.len() * out.len()) as f64
    }

    fn split(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
        let k = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
        let o = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
        (k, o)
    }

    #[test]
    fn auroc_examples() {
        let a = auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(a, 1.0);
        let b = auroc(&[0.1, 0.7, 0.5, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(b, 0.75);
        let c = auroc(&[0.3; 5], &[false, true, false, true, true]).unwrap();
        assert_eq!(c, 0.5);
        assert!(auroc(&[0.1, 0.2], &[false, false]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(
            pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let (k, o) = split(&scores, &labels);
            prop_assume!(!k.is_empty() && !o.is_empty());
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), brute_auroc(&k, &o));
        }

        #[test]
        fn auroc_flip_sums_to_one_without_ties(
            raw in prop::collection::btree_set(0u32..10_000, 2..100),
            mask in prop::collection::vec(any::<bool>(), 100)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let labels: Vec<bool> = mask[..scores.len()].to_vec();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let s = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(
            a in prop::collection::vec(-3.0f64..3.0, 6..40),
            b in prop::collection::vec(-3.0f64..3.0, 6..40)
        ) {
            let ra = Mat::from_shape_vec((a.len() / 2, 2), a[..a.len() / 2 * 2].to_vec()).unwrap();
            let rb = Mat::from_shape_vec((b.len() / 2, 2), b[..b.len() / 2 * 2].to_vec()).unwrap();
            prop_assert!(kl_divergence_gaussian(&ra, &rb).unwrap() >= 0.0);
            prop_assert!(kl_divergence_gaussian(&ra, &ra).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let a = array![[-1.0], [1.0]];
        assert_eq!(kl_divergence_gaussian(&a, &a).unwrap(), 0.0);
        // Fits N(0, 1) and N(1, 1).
        let b = array![[0.0], [2.0]];
        assert!((kl_divergence_gaussian(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(kl_divergence_gaussian(&array![[1.0]], &b).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let m = |run, acc, auroc| EpisodeMetrics {
            run,
            episode: 0,
            acc,
            auroc,
            acc_source: None,
            acc_target: None,
            merged_acc: None,
        };
        let single = aggregate(&[m(0, 70.0, 80.0)], EvalMode::Standard, "x").unwrap();
        assert_eq!((single.acc_mean, single.acc_std), (70.0, 0.0));
        let two = aggregate(&[m(0, 50.0, 50.0), m(1, 60.0, 50.0)], EvalMode::Standard, "x").unwrap();
        assert_eq!((two.acc_mean, two.acc_std), (55.0, 5.0));
        assert_eq!((two.runs, two.episodes), (2, 2));
        assert!(aggregate(&[], EvalMode::Standard, "x").is_err());
    }

    /// Heads forced to a fixed decision through the output bias.
    fn forced(kind: HeadKind, choice: usize) -> Head {
        let mut h = Head::new(kind, 2, &HeadConfig::default(), &mut DetRng::seed_from_u64(3));
        for p in h.params_mut() {
            p.fill(0.0);
        }
        let last = h.mlp.layers.last_mut().unwrap();
        last.bias[[0, choice]] = 5.0;
        h
    }

    fn toy() -> (SourceBank, Mat, Vec<String>) {
        let bank = SourceBank {
            classes: vec!["s0".into(), "s1".into(), "s2".into()],
            prototypes: array![[10.0, 0.0], [10.0, 5.0], [10.0, 10.0]],
        };
        (bank, array![[0.0, 0.0], [0.0, 3.0]], vec!["t0".into(), "t1".into()])
    }

    fn truth(class: &str, domain: Domain, known: bool) -> QueryTruth {
        QueryTruth {
            class: class.into(),
            domain,
            is_known: known,
        }
    }

    #[test]
    fn inlier_at_prototype_gets_its_class() {
        let (bank, pt, classes) = toy();
        let inlier = forced(HeadKind::Outlier, 0);
        let dom = forced(HeadKind::Domain, 1);
        let q = array![[0.0, 3.0]];
        let r = infer_queries(&inlier, &dom, &bank, &pt, &classes, &q, &[truth("t1", Domain::Target, true)], Routing::Target)
            .unwrap();
        assert_eq!(r[0].predicted_class.as_deref(), Some("t1"));
        assert!(r[0].outlier_score < 0.5);
    }

    #[test]
    fn outlier_decision_overrides_distances() {
        let (bank, pt, classes) = toy();
        let outlier = forced(HeadKind::Outlier, 1);
        let dom = forced(HeadKind::Domain, 1);
        let q = array![[0.0, 0.0]];
        let r = infer_queries(&outlier, &dom, &bank, &pt, &classes, &q, &[truth("t0", Domain::Target, true)], Routing::Target)
            .unwrap();
        assert_eq!(r[0].predicted_class, None);
        assert_eq!(closed_accuracy(&r).unwrap(), 0.0);
    }

    #[test]
    fn domain_head_routes_the_bank() {
        let (bank, pt, classes) = toy();
        let inlier = forced(HeadKind::Outlier, 0);
        let q = array![[9.0, 5.0]];
        let t = [truth("s1", Domain::Source, true)];
        let to_source = forced(HeadKind::Domain, 0);
        let r = infer_queries(&inlier, &to_source, &bank, &pt, &classes, &q, &t, Routing::DomainHead).unwrap();
        assert_eq!(r[0].predicted_class.as_deref(), Some("s1"));
        assert_eq!(r[0].predicted_domain, Domain::Source);
        // A wrong domain decision restricts the query to the wrong bank.
        let to_target = forced(HeadKind::Domain, 1);
        let r = infer_queries(&inlier, &to_target, &bank, &pt, &classes, &q, &t, Routing::DomainHead).unwrap();
        assert_eq!(r[0].predicted_class.as_deref(), Some("t1"));
        assert_eq!(closed_accuracy(&r).unwrap(), 0.0);
        let r = infer_queries(&inlier, &to_target, &bank, &pt, &classes, &q, &t, Routing::Merged).unwrap();
        assert_eq!(r[0].predicted_class.as_deref(), Some("s1"));
    }

    #[test]
    fn source_block_keeps_the_nearest_bank_entries() {
        let (bank, pt, _) = toy();
        let d = test_distance_rows(&array![[10.0, 1.0]], &bank.prototypes, &pt).unwrap();
        assert_eq!(d.row(0).to_vec(), vec![1.0, 16.0, 101.0, 104.0]);
    }
}
