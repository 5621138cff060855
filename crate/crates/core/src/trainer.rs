//! Episodic training: per episode the generator pairs are trained on frozen
//! features, then the feature extractor, DSBN and both heads take a gradient
//! step on the weighted sum of the five episode losses.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{augment, materialize, AugmentPolicy, Backbone, ForwardStats};
use crate::cgan::{train_cgans_on_episode, DomainReal, DualGan, GanStats};
use crate::config::ExperimentConfig;
use crate::data::{sample_episode, ClassSplits, DatasetRegistry, Domain, LabeledRef, Sample};
use crate::error::{DafosError, Result};
use crate::features::{FeatureBatch, Provenance};
use crate::heads::{balance_weights, distance_rows, head_loss, Head, HeadKind};
use crate::losses::{
    compactness_loss, gcdpa_loss, prototype_diversification_loss, prototypes_on_tape, CompactGroup, DiversifyGroup,
    LossWeights,
};
use crate::nn::{clip_global_norm, collect_grads, global_norm, Adam, Parameterized};
use crate::rng::{rng_for, stream};
use crate::tape::{Mat, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Frozen per-class source prototypes over every source-train class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceBank {
    pub classes: Vec<String>,
    pub prototypes: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub gans: DualGan,
    pub outlier: Head,
    pub domain: Head,
    pub source_bank: Option<SourceBank>,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let init = |i: u64| rng_for(cfg.seed, &[stream::INIT, i]);
        let backbone = Backbone::new(cfg.backbone.clone(), &mut init(0))?;
        let e = backbone.embed_dim();
        let ways = cfg.episode.ways;
        Ok(Self {
            gans: DualGan::new(e, &cfg.gan, &mut init(1)),
            outlier: Head::new(HeadKind::Outlier, ways, &cfg.heads, &mut init(2)),
            domain: Head::new(HeadKind::Domain, ways, &cfg.heads, &mut init(3)),
            backbone,
            source_bank: None,
        })
    }

    /// Parameters updated by the feature-extractor step, in gradient order.
    pub fn trainable(&self) -> Vec<&Mat> {
        let mut p = self.backbone.params();
        p.extend(self.outlier.params());
        p.extend(self.domain.params());
        p
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.backbone.params_mut();
        p.extend(self.outlier.params_mut());
        p.extend(self.domain.params_mut());
        p
    }

    /// Embeds up to `bank_samples_per_class` unaugmented samples of every
    /// source-train class in eval mode and averages them.
    pub fn build_source_bank(
        &self,
        registry: &DatasetRegistry,
        splits: &ClassSplits,
        cfg: &ExperimentConfig,
    ) -> Result<SourceBank> {
        let e = self.backbone.embed_dim();
        let mut prototypes = Mat::zeros((splits.source_train.len(), e));
        for (k, class) in splits.source_train.iter().enumerate() {
            let refs = registry
                .samples(Domain::Source, class)
                .ok_or_else(|| DafosError::Data(format!("source class {class} is missing from the dataset")))?;
            let take = refs.len().min(cfg.train.bank_samples_per_class);
            if take == 0 {
                return Err(DafosError::InsufficientSamples(format!("source class {class} has no samples")));
            }
            let samples = refs[..take]
                .iter()
                .map(|r| materialize(r, registry.synthetic.as_ref(), cfg.backbone.input))
                .collect::<Result<Vec<_>>>()?;
            let emb = self.backbone.embed(&samples, Domain::Source)?;
            prototypes.row_mut(k).assign(&emb.mean_axis(Axis(0)).expect("non-empty"));
        }
        Ok(SourceBank {
            classes: splits.source_train.clone(),
            prototypes,
        })
    }
}

/// Per-episode observability record; one CSV row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// 1-based episode number.
    pub episode: usize,
    pub l_c: f64,
    pub l_pd: f64,
    pub l_align: f64,
    pub l_out: f64,
    pub l_dc: f64,
    pub total: f64,
    pub gen_low: f64,
    pub disc_low: f64,
    pub gen_high: f64,
    pub disc_high: f64,
    pub aocmc: f64,
    /// Norm of this episode's feature-extractor gradient.
    pub grad_norm: f64,
    /// Whether the optimizer stepped after this episode.
    pub stepped: bool,
}

impl EpisodeStats {
    fn values(&self) -> [f64; 12] {
        [
            self.l_c,
            self.l_pd,
            self.l_align,
            self.l_out,
            self.l_dc,
            self.total,
            self.gen_low,
            self.disc_low,
            self.gen_high,
            self.disc_high,
            self.aocmc,
            self.grad_norm,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// `λ1·L_C + λ2·L_PD + λ3·L_Align + λ4·L_OUT + λ5·L_DC`.
pub fn total_loss(components: [f64; 5], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if let Some(c) = components.iter().find(|c| !c.is_finite()) {
        return Err(DafosError::Numeric {
            message: "non-finite loss component".into(),
            dump: format!("{components:?} (offending value {c})"),
        });
    }
    Ok(components.iter().zip(weights.lambdas()).map(|(c, l)| c * l).sum())
}

/// Tape form of [`total_loss`].
pub fn total_loss_on_tape(tape: &mut Tape, components: [Var; 5], weights: &LossWeights) -> Var {
    let terms: Vec<Var> = components
        .iter()
        .zip(weights.lambdas())
        .map(|(&c, l)| tape.scale(c, l))
        .collect();
    let stacked = tape.concat_rows(&terms);
    tape.sum(stacked)
}

/// One domain of a materialized, augmented episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDomain {
    pub domain: Domain,
    pub support: Vec<Sample>,
    pub support_labels: Vec<usize>,
    pub query: Vec<Sample>,
    /// Known queries carry `0..ways`; pseudo-unknowns carry `ways..`.
    pub query_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEpisode {
    /// 0-based episode index.
    pub index: usize,
    pub source: PreparedDomain,
    pub target: PreparedDomain,
}

fn load_refs<R: rand::Rng + ?Sized>(
    refs: &[LabeledRef],
    registry: &DatasetRegistry,
    cfg: &ExperimentConfig,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<Sample>, Vec<usize>)> {
    let mut samples = Vec::with_capacity(refs.len());
    for r in refs {
        let s = materialize(&r.sample, registry.synthetic.as_ref(), cfg.backbone.input)?;
        samples.push(augment(&s, policy, rng)?);
    }
    Ok((samples, refs.iter().map(|r| r.label).collect()))
}

/// Samples episode `index` and loads its augmented inputs. Pure in
/// `(cfg.seed, index)`, so episodes can be prepared in any order.
pub fn prepare_episode(
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    index: usize,
) -> Result<PreparedEpisode> {
    let mut rng = rng_for(cfg.seed, &[stream::TRAIN_EPISODE, index as u64]);
    let ep = sample_episode(registry, splits, &cfg.episode, &mut rng)?;
    let support_policy = cfg.augment.for_support();
    let mut load = |d: Domain| -> Result<PreparedDomain> {
        let de = ep.domain(d);
        let (support, support_labels) = load_refs(&de.support, registry, cfg, &support_policy, &mut rng)?;
        let (query, query_labels) = load_refs(&de.query, registry, cfg, &cfg.augment, &mut rng)?;
        Ok(PreparedDomain {
            domain: d,
            support,
            support_labels,
            query,
            query_labels,
        })
    };
    let source = load(Domain::Source)?;
    let target = load(Domain::Target)?;
    Ok(PreparedEpisode { index, source, target })
}

fn pick_rows(m: &Mat, rows: &[usize]) -> Mat {
    m.select(Axis(0), rows)
}

struct DomainPass {
    support: Var,
    query: Var,
    support_batch: FeatureBatch,
    open_batch: FeatureBatch,
    stats: ForwardStats,
}

/// Gradients and stats of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    /// One gradient per [`Model::trainable`] parameter.
    pub grads: Vec<Mat>,
    pub stats: EpisodeStats,
}

/// Runs one episode. Step A trains and meta-merges the generator pairs on the
/// current feature values (and mutates only `model.gans`); step B treats the
/// synthetic features as constants and returns the gradient of the weighted
/// episode loss for [`Model::trainable`]. Running normalization statistics are
/// folded in on success; learnable parameters are left to the caller.
pub fn run_episode(model: &mut Model, prepared: &PreparedEpisode, cfg: &ExperimentConfig) -> Result<EpisodeOutcome> {
    let ways = cfg.episode.ways;
    let mut tape = Tape::new();
    let bb_vars = model.backbone.bind(&mut tape);

    let mut passes = Vec::with_capacity(2);
    for p in [&prepared.source, &prepared.target] {
        let samples: Vec<Sample> = p.support.iter().chain(&p.query).cloned().collect();
        let (feats, stats) = model.backbone.forward(&mut tape, &bb_vars, &samples, p.domain, true)?;
        let ns = p.support.len();
        let sup_idx: Vec<usize> = (0..ns).collect();
        let qry_idx: Vec<usize> = (ns..samples.len()).collect();
        let support = tape.select_rows(feats, &sup_idx);
        let query = tape.select_rows(feats, &qry_idx);
        let values = tape.value(feats);
        let open: Vec<usize> = (0..p.query.len()).filter(|&i| p.query_labels[i] >= ways).collect();
        let open_rows: Vec<usize> = open.iter().map(|i| ns + i).collect();
        passes.push(DomainPass {
            support,
            query,
            support_batch: FeatureBatch::new(
                pick_rows(values, &sup_idx),
                p.support_labels.clone(),
                p.domain,
                Provenance::Real,
            ),
            open_batch: FeatureBatch::new(
                pick_rows(values, &open_rows),
                open.iter().map(|&i| p.query_labels[i]).collect(),
                p.domain,
                Provenance::Real,
            ),
            stats,
        });
    }

    // Step A: generator pairs on frozen features.
    let reals: Vec<DomainReal> = passes
        .iter()
        .map(|p| DomainReal {
            domain: p.support_batch.domain,
            ways,
            support: &p.support_batch,
            open_queries: &p.open_batch,
        })
        .collect();
    let per_class = cfg.train_synth_per_class();
    let mut synth = Vec::new();
    let mut gstats = GanStats::default();
    for round in 0..cfg.train.gan_rounds {
        let mut rng = rng_for(cfg.seed, &[stream::TRAIN_STEP, prepared.index as u64, round as u64]);
        let (s, st) = train_cgans_on_episode(&mut model.gans, &reals, &cfg.gan, per_class, &mut rng)?;
        synth = s;
        gstats = st;
    }

    // Step B: feature extractor, DSBN and heads with the cGANs frozen.
    let prepared_domains = [&prepared.source, &prepared.target];
    let mut protos = Vec::with_capacity(2);
    struct Parts {
        compact_feats: Var,
        compact_labels: Vec<usize>,
        known_q: Var,
        known_labels: Vec<usize>,
        unknown_q: Var,
        s_high: Var,
    }
    let mut parts = Vec::with_capacity(2);
    for (i, p) in passes.iter().enumerate() {
        let pd = prepared_domains[i];
        let known = &synth[i].known.batch;
        let s_low = tape.constant(known.features.clone());
        let s_high = tape.constant(synth[i].unknown.batch.features.clone());
        let proto_in = tape.concat_rows(&[p.support, s_low]);
        let mut proto_labels = pd.support_labels.clone();
        proto_labels.extend(&known.labels);
        protos.push(prototypes_on_tape(&mut tape, proto_in, &proto_labels, ways)?);

        let kq: Vec<usize> = (0..pd.query.len()).filter(|&j| pd.query_labels[j] < ways).collect();
        let uq: Vec<usize> = (0..pd.query.len()).filter(|&j| pd.query_labels[j] >= ways).collect();
        let known_labels: Vec<usize> = kq.iter().map(|&j| pd.query_labels[j]).collect();
        let known_q = tape.select_rows(p.query, &kq);
        let unknown_q = tape.select_rows(p.query, &uq);
        let compact_feats = tape.concat_rows(&[p.support, known_q, s_low]);
        let mut compact_labels = pd.support_labels.clone();
        compact_labels.extend(&known_labels);
        compact_labels.extend(&known.labels);
        parts.push(Parts {
            compact_feats,
            compact_labels,
            known_q,
            known_labels,
            unknown_q,
            s_high,
        });
    }

    let groups: Vec<CompactGroup> = parts
        .iter()
        .zip(&protos)
        .map(|(p, &proto)| CompactGroup {
            features: p.compact_feats,
            labels: &p.compact_labels,
            prototypes: proto,
        })
        .collect();
    let l_c = compactness_loss(&mut tape, &groups)?;

    let mut negatives = Vec::with_capacity(2);
    for (i, p) in parts.iter().enumerate() {
        negatives.push(tape.concat_rows(&[p.unknown_q, p.s_high, protos[1 - i]]));
    }
    let div: Vec<DiversifyGroup> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| DiversifyGroup {
            prototypes: protos[i],
            positives: p.known_q,
            positive_labels: &p.known_labels,
            negatives: negatives[i],
        })
        .collect();
    let l_pd = prototype_diversification_loss(&mut tape, &div, cfg.loss.alpha, cfg.loss.pd_mining)?;

    let affine = &bb_vars[bb_vars.len() - 4..];
    let l_align = gcdpa_loss(&mut tape, protos[0], protos[1], affine)?;

    let mut dist_parts = Vec::with_capacity(2);
    let mut out_targets = Vec::new();
    let mut dom_targets = Vec::new();
    for (i, p) in passes.iter().enumerate() {
        let pd = prepared_domains[i];
        let rows = tape.concat_rows(&[p.query, parts[i].s_high]);
        dist_parts.push(distance_rows(&mut tape, rows, protos[0], protos[1]));
        out_targets.extend(pd.query_labels.iter().map(|&l| usize::from(l >= ways)));
        let n_high = synth[i].unknown.len();
        out_targets.extend(std::iter::repeat_n(1, n_high));
        dom_targets.extend(std::iter::repeat_n(pd.domain.index(), pd.query.len() + n_high));
    }
    let dist = tape.concat_rows(&dist_parts);
    let head_vars_out = model.outlier.bind(&mut tape);
    let head_vars_dom = model.domain.bind(&mut tape);
    let logits_out = model.outlier.forward(&mut tape, &head_vars_out, dist)?;
    let logits_dom = model.domain.forward(&mut tape, &head_vars_dom, dist)?;
    let (w_out, w_dom) = if cfg.heads.balance_loss {
        (Some(balance_weights(&out_targets)), Some(balance_weights(&dom_targets)))
    } else {
        (None, None)
    };
    let l_out = head_loss(&mut tape, logits_out, &out_targets, w_out.as_deref())?;
    let l_dc = head_loss(&mut tape, logits_dom, &dom_targets, w_dom.as_deref())?;

    let total = total_loss_on_tape(&mut tape, [l_c, l_pd, l_align, l_out, l_dc], &cfg.loss);
    let mut stats = EpisodeStats {
        episode: prepared.index + 1,
        l_c: tape.scalar(l_c),
        l_pd: tape.scalar(l_pd),
        l_align: tape.scalar(l_align),
        l_out: tape.scalar(l_out),
        l_dc: tape.scalar(l_dc),
        total: tape.scalar(total),
        gen_low: gstats.gen_low,
        disc_low: gstats.disc_low,
        gen_high: gstats.gen_high,
        disc_high: gstats.disc_high,
        aocmc: gstats.aocmc,
        grad_norm: 0.0,
        stepped: false,
    };
    if !stats.total.is_finite() {
        return Err(numeric_failure("non-finite episode loss", &stats));
    }

    let grads = tape.backward(total);
    let mut vars = bb_vars;
    vars.extend(head_vars_out);
    vars.extend(head_vars_dom);
    let grads = collect_grads(&grads, &vars, &model.trainable());
    stats.grad_norm = global_norm(&grads);
    if !stats.is_finite() {
        return Err(numeric_failure("non-finite episode statistics", &stats));
    }
    for p in &passes {
        model.backbone.absorb(&p.stats);
    }
    Ok(EpisodeOutcome { grads, stats })
}

fn numeric_failure(message: &str, stats: &EpisodeStats) -> DafosError {
    // serde_json refuses NaN, so the dump uses the Debug form.
    DafosError::Numeric {
        message: format!("{message} at episode {}", stats.episode),
        dump: format!("{stats:?}"),
    }
}

/// Optimizer and accumulation state that must survive a resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Episodes completed so far.
    pub episode: usize,
    pub optimizer: Adam,
    pub accum: Vec<Mat>,
    pub accum_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub episode: usize,
    pub fingerprint: String,
    pub ways: usize,
    pub embed_dim: usize,
}

/// Everything a checkpoint directory holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: ExperimentConfig,
    pub splits: ClassSplits,
    pub model: Model,
    pub state: TrainState,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string(value)?;
    fs::write(&path, text).map_err(|e| DafosError::io(&path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(DafosError::MissingSegment(format!("{} (in {})", name, dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| DafosError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Checkpoint layout (format version 1), one file per segment:
/// `meta.json`, `config.toml`, `splits.json`, `backbone.json`,
/// `cgan_low.json`, `cgan_high.json`, `head_outlier.json`, `head_domain.json`,
/// `source_bank.json` (optional until training ends) and `optimizer.json`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DafosError::io(dir, e))?;
    write_json(dir, "meta.json", &ckpt.meta)?;
    ckpt.config.save(&dir.join("config.toml"))?;
    ckpt.splits.save(&dir.join("splits.json"))?;
    write_json(dir, "backbone.json", &ckpt.model.backbone)?;
    write_json(dir, "cgan_low.json", &ckpt.model.gans.low)?;
    write_json(dir, "cgan_high.json", &ckpt.model.gans.high)?;
    write_json(dir, "head_outlier.json", &ckpt.model.outlier)?;
    write_json(dir, "head_domain.json", &ckpt.model.domain)?;
    if let Some(bank) = &ckpt.model.source_bank {
        write_json(dir, "source_bank.json", bank)?;
    }
    write_json(dir, "optimizer.json", &ckpt.state)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(DafosError::MissingSegment(format!("checkpoint directory {}", dir.display())));
    }
    let meta: CheckpointMeta = read_json(dir, "meta.json")?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(DafosError::Data(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.version
        )));
    }
    let config_path = dir.join("config.toml");
    if !config_path.exists() {
        return Err(DafosError::MissingSegment("config.toml".into()));
    }
    let config = crate::config::load_config(&config_path)?;
    let splits_path = dir.join("splits.json");
    if !splits_path.exists() {
        return Err(DafosError::MissingSegment("splits.json".into()));
    }
    let splits = ClassSplits::load(&splits_path)?;
    let bank_path = dir.join("source_bank.json");
    let source_bank = if bank_path.exists() {
        Some(read_json(dir, "source_bank.json")?)
    } else {
        None
    };
    let model = Model {
        backbone: read_json(dir, "backbone.json")?,
        gans: DualGan {
            low: read_json(dir, "cgan_low.json")?,
            high: read_json(dir, "cgan_high.json")?,
        },
        outlier: read_json(dir, "head_outlier.json")?,
        domain: read_json(dir, "head_domain.json")?,
        source_bank,
    };
    let state = read_json(dir, "optimizer.json")?;
    Ok(Checkpoint {
        meta,
        config,
        splits,
        model,
        state,
    })
}

/// Owns all mutable training state.
pub struct Trainer<'a> {
    pub cfg: ExperimentConfig,
    pub registry: &'a DatasetRegistry,
    pub splits: ClassSplits,
    pub model: Model,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: ExperimentConfig, registry: &'a DatasetRegistry, splits: ClassSplits) -> Result<Self> {
        cfg.validate()?;
        splits.validate()?;
        let model = Model::new(&cfg)?;
        let params = model.trainable();
        let state = TrainState {
            episode: 0,
            optimizer: Adam::new(cfg.train.adam(), &params),
            accum: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            accum_count: 0,
        };
        Ok(Self {
            cfg,
            registry,
            splits,
            model,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, registry: &'a DatasetRegistry) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            cfg: ckpt.config,
            registry,
            splits: ckpt.splits,
            model: ckpt.model,
            state: ckpt.state,
        })
    }

    pub fn prepare(&self, index: usize) -> Result<PreparedEpisode> {
        prepare_episode(self.registry, &self.splits, &self.cfg, index)
    }

    /// Runs the next episode and steps the optimizer when the accumulation
    /// window is full or the final episode was reached.
    pub fn step_prepared(&mut self, prepared: &PreparedEpisode) -> Result<EpisodeStats> {
        if prepared.index != self.state.episode {
            return Err(DafosError::InvalidArgument(format!(
                "expected episode {}, got {}",
                self.state.episode, prepared.index
            )));
        }
        let outcome = run_episode(&mut self.model, prepared, &self.cfg)?;
        for (a, g) in self.state.accum.iter_mut().zip(&outcome.grads) {
            *a += g;
        }
        self.state.accum_count += 1;
        self.state.episode += 1;
        let mut stats = outcome.stats;
        let full = self.state.accum_count >= self.cfg.train.episodes_per_step;
        if full || self.state.episode >= self.cfg.train.episodes {
            self.apply_step()?;
            stats.stepped = true;
        }
        Ok(stats)
    }

    pub fn step(&mut self) -> Result<EpisodeStats> {
        let prepared = self.prepare(self.state.episode)?;
        self.step_prepared(&prepared)
    }

    fn apply_step(&mut self) -> Result<()> {
        let n = self.state.accum_count.max(1) as f64;
        let mut grads: Vec<Mat> = self.state.accum.iter().map(|a| a / n).collect();
        if self.cfg.train.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.cfg.train.grad_clip);
        }
        self.state.optimizer.update(self.model.trainable_mut(), &grads)?;
        for a in &mut self.state.accum {
            a.fill(0.0);
        }
        self.state.accum_count = 0;
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Result<Checkpoint> {
        let bank = self.model.build_source_bank(self.registry, &self.splits, &self.cfg)?;
        self.model.source_bank = Some(bank);
        Ok(Checkpoint {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                episode: self.state.episode,
                fingerprint: self.cfg.fingerprint()?,
                ways: self.cfg.episode.ways,
                embed_dim: self.model.backbone.embed_dim(),
            },
            config: self.cfg.clone(),
            splits: self.splits.clone(),
            model: self.model.clone(),
            state: self.state.clone(),
        })
    }

    /// Trains until `cfg.train.episodes` episodes are complete. With `out`,
    /// appends to `stats.csv` / `timing.csv` and writes `checkpoint/`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<EpisodeStats>> {
        let total = self.cfg.train.episodes;
        let workers = self.cfg.train.workers;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| DafosError::InvalidArgument(format!("thread pool: {e}")))?;
        let mut logs = match out {
            Some(dir) => Some(RunLogs::open(dir)?),
            None => None,
        };
        let mut all = Vec::new();
        while self.state.episode < total {
            let start = self.state.episode;
            let end = (start + 2 * workers).min(total);
            let prepared: Vec<PreparedEpisode> = if workers > 1 {
                pool.install(|| (start..end).into_par_iter().map(|i| self.prepare(i)).collect::<Result<_>>())?
            } else {
                (start..end).map(|i| self.prepare(i)).collect::<Result<_>>()?
            };
            for p in &prepared {
                let t0 = Instant::now();
                let stats = self.step_prepared(p)?;
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                if let Some(l) = logs.as_mut() {
                    l.append(&stats, ms)?;
                }
                if stats.episode % 50 == 0 || stats.episode == total {
                    log::info!(
                        "episode {}/{total}: total {:.4} L_C {:.4} L_PD {:.4} L_Align {:.4} L_OUT {:.4} L_DC {:.4}",
                        stats.episode,
                        stats.total,
                        stats.l_c,
                        stats.l_pd,
                        stats.l_align,
                        stats.l_out,
                        stats.l_dc
                    );
                }
                all.push(stats);
                let every = self.cfg.train.checkpoint_every;
                if let Some(dir) = out {
                    if every > 0 && self.state.episode.is_multiple_of(every) && self.state.episode < total {
                        save_checkpoint(&dir.join("checkpoint"), &self.checkpoint()?)?;
                    }
                }
            }
        }
        let ckpt = self.checkpoint()?;
        if let Some(dir) = out {
            save_checkpoint(&dir.join("checkpoint"), &ckpt)?;
        }
        Ok(all)
    }
}

struct RunLogs {
    stats: csv::Writer<fs::File>,
    timing: fs::File,
    timing_path: PathBuf,
}

impl RunLogs {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| DafosError::io(dir, e))?;
        let stats_path = dir.join("stats.csv");
        let timing_path = dir.join("timing.csv");
        let fresh = !stats_path.exists();
        let open = |p: &Path| {
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| DafosError::io(p, e))
        };
        let stats = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(open(&stats_path)?);
        let mut timing = open(&timing_path)?;
        if fresh {
            writeln!(timing, "episode,wall_ms").map_err(|e| DafosError::io(&timing_path, e))?;
        }
        Ok(Self {
            stats,
            timing,
            timing_path,
        })
    }

    fn append(&mut self, stats: &EpisodeStats, wall_ms: f64) -> Result<()> {
        self.stats.serialize(stats)?;
        self.stats.flush().map_err(|e| DafosError::io("stats.csv", e))?;
        writeln!(self.timing, "{},{wall_ms:.3}", stats.episode).map_err(|e| DafosError::io(&self.timing_path, e))
    }
}

/// Fresh training run. Writes the config echo, splits, stats logs and the
/// final checkpoint into `out` when given.
pub fn train(
    registry: &DatasetRegistry,
    splits: &ClassSplits,
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<(Model, Vec<EpisodeStats>)> {
    let mut trainer = Trainer::new(cfg.clone(), registry, splits.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| DafosError::io(dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
        splits.save(&dir.join("splits.json"))?;
    }
    let stats = trainer.run(out)?;
    Ok((trainer.model, stats))
}

/// Continues a run from `out/checkpoint` up to the episode count of the
/// stored config (optionally raised to `episodes`).
pub fn resume(
    registry: &DatasetRegistry,
    out: &Path,
    episodes: Option<usize>,
) -> Result<(Model, Vec<EpisodeStats>)> {
    let mut ckpt = load_checkpoint(&out.join("checkpoint"))?;
    if let Some(n) = episodes {
        ckpt.config.train.episodes = n;
    }
    let mut trainer = Trainer::from_checkpoint(ckpt, registry)?;
    let stats = trainer.run(Some(out))?;
    Ok((trainer.model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_registry, make_class_splits};

    fn setup(episodes: usize) -> (ExperimentConfig, DatasetRegistry, ClassSplits) {
        let mut cfg = ExperimentConfig::default();
        cfg.train.episodes = episodes;
        cfg.train.episodes_per_step = 2;
        cfg.episode.queries = 2;
        cfg.gan.inner_steps = 2;
        let registry = load_registry(None, &cfg.dataset).unwrap();
        let splits = make_class_splits(&registry, &cfg.splits).unwrap();
        (cfg, registry, splits)
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_loss([1.0, 2.0, 3.0, 4.0, 5.0], &w).unwrap(), 15.0);
        let only_c = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            ..w
        };
        assert_eq!(total_loss([1.5, 2.0, 3.0, 4.0, 5.0], &only_c).unwrap(), 1.5);
        let neg = LossWeights { lambda3: -1.0, ..w };
        assert!(total_loss([1.0; 5], &neg).is_err());
        assert!(total_loss([f64::NAN, 0.0, 0.0, 0.0, 0.0], &w).is_err());

        let lam = LossWeights {
            lambda1: 0.5,
            lambda2: 2.0,
            lambda3: 0.0,
            lambda4: 1.5,
            lambda5: 3.0,
            ..w
        };
        let mut tape = Tape::new();
        let c: Vec<Var> = (1..=5).map(|i| tape.param(Mat::from_elem((1, 1), i as f64))).collect();
        let out = total_loss_on_tape(&mut tape, [c[0], c[1], c[2], c[3], c[4]], &lam);
        let g = tape.backward(out);
        for (v, l) in c.iter().zip(lam.lambdas()) {
            assert_eq!(g.get_or_zeros(*v, (1, 1))[[0, 0]], l);
        }
    }

    #[test]
    fn episode_phases_touch_disjoint_parameters() {
        let (cfg, registry, splits) = setup(1);
        let mut model = Model::new(&cfg).unwrap();
        let prepared = prepare_episode(&registry, &splits, &cfg, 0).unwrap();
        let trainable_before: Vec<Mat> = model.trainable().into_iter().cloned().collect();
        let gans_before = model.gans.clone();
        let out = run_episode(&mut model, &prepared, &cfg).unwrap();
        let trainable_after: Vec<Mat> = model.trainable().into_iter().cloned().collect();
        assert_eq!(trainable_before, trainable_after);
        assert_ne!(gans_before, model.gans);
        assert_eq!(out.grads.len(), trainable_after.len());
        assert!(out.stats.grad_norm > 0.0);
        assert!(out.stats.is_finite());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (mut cfg, registry, splits) = setup(1);
        cfg.train.episodes_per_step = 1;
        let mut trainer = Trainer::new(cfg, &registry, splits).unwrap();
        trainer.state.optimizer.config.lr = 0.0;
        let before: Vec<Mat> = trainer.model.trainable().into_iter().cloned().collect();
        let stats = trainer.step().unwrap();
        let after: Vec<Mat> = trainer.model.trainable().into_iter().cloned().collect();
        assert_eq!(before, after);
        assert!(stats.stepped && stats.total > 0.0 && stats.l_c > 0.0);
    }

    #[test]
    fn optimizer_steps_on_window_boundaries() {
        let (cfg, registry, splits) = setup(3);
        let mut trainer = Trainer::new(cfg, &registry, splits).unwrap();
        let stepped: Vec<bool> = (0..3).map(|_| trainer.step().unwrap().stepped).collect();
        assert_eq!(stepped, vec![false, true, true]);
        assert_eq!(trainer.state.optimizer.step, 2);
    }

    #[test]
    fn nan_weights_abort_with_dump() {
        let (cfg, registry, splits) = setup(1);
        let mut model = Model::new(&cfg).unwrap();
        model.outlier.params_mut()[0].fill(f64::NAN);
        let prepared = prepare_episode(&registry, &splits, &cfg, 0).unwrap();
        match run_episode(&mut model, &prepared, &cfg) {
            Err(DafosError::Numeric { dump, .. }) => assert!(dump.contains("l_out")),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let (mut cfg, registry, splits) = setup(5);
        let straight = tempfile::tempdir().unwrap();
        let (m1, s1) = train(&registry, &splits, &cfg, Some(straight.path())).unwrap();

        let split = tempfile::tempdir().unwrap();
        cfg.train.episodes = 3;
        let (_, first) = train(&registry, &splits, &cfg, Some(split.path())).unwrap();
        let (m2, rest) = resume(&registry, split.path(), Some(5)).unwrap();
        assert_eq!(rest[0].episode, 4);
        let joined: Vec<EpisodeStats> = first.into_iter().chain(rest).collect();
        // The 3-episode run steps at its final episode; the straight run
        // only on even boundaries, so trajectories agree up to episode 2.
        assert_eq!(&joined[..2], &s1[..2]);
        assert_eq!(joined.len(), 5);
        assert_eq!(m1.backbone.embed_dim(), m2.backbone.embed_dim());
        let text = fs::read_to_string(split.path().join("stats.csv")).unwrap();
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn resume_on_window_boundary_is_exact() {
        let (mut cfg, registry, splits) = setup(4);
        let a = tempfile::tempdir().unwrap();
        let (m1, s1) = train(&registry, &splits, &cfg, Some(a.path())).unwrap();
        let b = tempfile::tempdir().unwrap();
        cfg.train.episodes = 2;
        let (_, first) = train(&registry, &splits, &cfg, Some(b.path())).unwrap();
        let (m2, rest) = resume(&registry, b.path(), Some(4)).unwrap();
        let joined: Vec<EpisodeStats> = first.into_iter().chain(rest).collect();
        assert_eq!(joined, s1);
        assert_eq!(m1.trainable(), m2.trainable());
        assert_eq!(m1.gans, m2.gans);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (cfg, registry, splits) = setup(2);
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = train(&registry, &splits, &cfg, Some(dir.path())).unwrap();
        let ckpt = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(ckpt.model, model);
        assert_eq!(ckpt.config, cfg);
        assert_eq!(ckpt.meta.episode, 2);
        assert!(ckpt.model.source_bank.is_some());
        fs::remove_file(dir.path().join("checkpoint/head_domain.json")).unwrap();
        assert!(matches!(
            load_checkpoint(&dir.path().join("checkpoint")),
            Err(DafosError::MissingSegment(_))
        ));
    }

    #[test]
    fn parallel_preparation_matches_serial() {
        let (mut cfg, registry, splits) = setup(4);
        let (_, serial) = train(&registry, &splits, &cfg, None).unwrap();
        cfg.train.workers = 3;
        let (_, parallel) = train(&registry, &splits, &cfg, None).unwrap();
        assert_eq!(serial, parallel);
    }
}
