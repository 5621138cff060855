//! Prototypes and the metric objectives built on them.
//!
//! All distances are squared Euclidean.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{DafosError, Result};
use crate::features::FeatureBatch;
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMining {
    /// Average over every (positive, negative) combination.
    Mean,
    /// Farthest positive against nearest negative.
    Hardest,
}

/// Weights of the total objective and the diversification margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Compactness.
    pub lambda1: f64,
    /// Prototype diversification.
    pub lambda2: f64,
    /// Cross-domain prototype alignment.
    pub lambda3: f64,
    /// Outlier head.
    pub lambda4: f64,
    /// Domain head.
    pub lambda5: f64,
    pub alpha: f64,
    pub pd_mining: PdMining,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            alpha: 0.5,
            pd_mining: PdMining::Mean,
        }
    }
}

impl LossWeights {
    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.lambdas().iter().enumerate() {
            if !(*l >= 0.0 && l.is_finite()) {
                return Err(DafosError::config(format!("loss.lambda{}", i + 1), "must be a nonnegative number"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DafosError::config("loss.alpha", "must be a nonnegative number"));
        }
        Ok(())
    }
}

/// Prototype rows of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub domain: Domain,
    /// `K × e`, row `k` is class `k`.
    pub rows: Mat,
    /// Number of features averaged into each row.
    pub counts: Vec<usize>,
}

/// `K × n` matrix whose product with the stacked features yields per-class means.
fn averaging_matrix(labels: &[usize], ways: usize) -> Result<(Mat, Vec<usize>)> {
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            return Err(DafosError::InvalidArgument(format!("label {l} outside 0..{ways}")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(DafosError::InsufficientSamples(format!("class {k} has no support feature")));
    }
    let a = Mat::from_shape_fn((ways, labels.len()), |(k, i)| {
        if labels[i] == k {
            1.0 / counts[k] as f64
        } else {
            0.0
        }
    });
    Ok((a, counts))
}

/// Per-class mean over real support features and synthetic known features.
pub fn compute_prototypes(
    real_support: &FeatureBatch,
    synth_known: Option<&FeatureBatch>,
    ways: usize,
) -> Result<PrototypeSet> {
    let mut labels = real_support.labels.clone();
    let mut feats = real_support.features.clone();
    if let Some(s) = synth_known {
        if s.dim() != real_support.dim() {
            return Err(DafosError::Shape("synthetic and real feature widths differ".into()));
        }
        labels.extend(&s.labels);
        feats = ndarray::concatenate(ndarray::Axis(0), &[feats.view(), s.features.view()]).expect("same width");
    }
    let (_, counts) = averaging_matrix(&labels, ways)?;
    // Row-ordered sums then one division, so the result does not depend on
    // how a matrix product would block the reduction.
    let mut rows = Mat::zeros((ways, feats.ncols()));
    for (&l, f) in labels.iter().zip(feats.outer_iter()) {
        let mut r = rows.row_mut(l);
        r += &f;
    }
    for (mut r, &c) in rows.outer_iter_mut().zip(&counts) {
        r.mapv_inplace(|v| v / c as f64);
    }
    Ok(PrototypeSet {
        domain: real_support.domain,
        rows,
        counts,
    })
}

/// Tape form: prototypes of the rows in `features` grouped by `labels`.
pub fn prototypes_on_tape(tape: &mut Tape, features: Var, labels: &[usize], ways: usize) -> Result<Var> {
    if tape.value(features).nrows() != labels.len() {
        return Err(DafosError::Shape("one label per feature row required".into()));
    }
    let (a, _) = averaging_matrix(labels, ways)?;
    let av = tape.constant(a);
    Ok(tape.matmul(av, features))
}

/// `‖mean_k(γ_S⊙P_S^k + β_S) − mean_k(γ_T⊙P_T^k + β_T)‖₂`.
/// `affine` = `[γ_S, β_S, γ_T, β_T]`.
pub fn gcdpa_loss(tape: &mut Tape, proto_s: Var, proto_t: Var, affine: &[Var]) -> Result<Var> {
    let (ps, pt) = (tape.value(proto_s).ncols(), tape.value(proto_t).ncols());
    if ps != pt || affine.len() != 4 || tape.value(affine[0]).ncols() != ps {
        return Err(DafosError::Shape("gcdpa: prototype and affine widths must agree".into()));
    }
    let side = |tape: &mut Tape, p: Var, g: Var, b: Var| {
        let scaled = tape.mul_row(p, g);
        let shifted = tape.add_row(scaled, b);
        tape.mean_rows(shifted)
    };
    let ms = side(tape, proto_s, affine[0], affine[1]);
    let mt = side(tape, proto_t, affine[2], affine[3]);
    let diff = tape.sub(ms, mt);
    Ok(tape.norm(diff))
}

/// One domain's compactness inputs.
#[derive(Clone, Copy, Debug)]
pub struct CompactGroup<'a> {
    pub features: Var,
    pub labels: &'a [usize],
    pub prototypes: Var,
}

/// Mean of `−log softmax(−d(x, P))[label]` over every row of every group.
pub fn compactness_loss(tape: &mut Tape, groups: &[CompactGroup]) -> Result<Var> {
    let mut parts = Vec::new();
    for g in groups {
        let (n, k) = (tape.value(g.features).nrows(), tape.value(g.prototypes).nrows());
        if n != g.labels.len() {
            return Err(DafosError::Shape("compactness: one label per row required".into()));
        }
        if let Some(l) = g.labels.iter().find(|&&l| l >= k) {
            return Err(DafosError::InvalidArgument(format!("compactness: no prototype for label {l}")));
        }
        if n == 0 {
            continue;
        }
        let d = tape.sq_dist(g.features, g.prototypes);
        let neg = tape.scale(d, -1.0);
        let ls = tape.log_softmax_rows(neg);
        let picked = tape.pick(ls, g.labels);
        parts.push(picked);
    }
    if parts.is_empty() {
        return Err(DafosError::InvalidArgument("compactness: no samples".into()));
    }
    let all = tape.concat_rows(&parts);
    let m = tape.mean(all);
    Ok(tape.scale(m, -1.0))
}

/// One domain's diversification inputs.
#[derive(Clone, Copy, Debug)]
pub struct DiversifyGroup<'a> {
    /// Anchor prototypes, `K × e`.
    pub prototypes: Var,
    /// Real known-class queries.
    pub positives: Var,
    pub positive_labels: &'a [usize],
    /// Every negative row for every anchor of this domain.
    pub negatives: Var,
}

/// `Σ_domains Σ_k agg_{(p, n)} [‖P^k − p‖² − ‖P^k − n‖² + α]₊`.
pub fn prototype_diversification_loss(
    tape: &mut Tape,
    groups: &[DiversifyGroup],
    alpha: f64,
    mining: PdMining,
) -> Result<Var> {
    let mut parts = Vec::new();
    for g in groups {
        let k = tape.value(g.prototypes).nrows();
        let npos = tape.value(g.positives).nrows();
        let nneg = tape.value(g.negatives).nrows();
        if npos != g.positive_labels.len() {
            return Err(DafosError::Shape("diversification: one label per positive required".into()));
        }
        if nneg == 0 {
            return Err(DafosError::InvalidArgument("diversification: empty negative set".into()));
        }
        let pos_of: Vec<Vec<usize>> = (0..k)
            .map(|c| (0..npos).filter(|&i| g.positive_labels[i] == c).collect())
            .collect();
        if let Some(c) = pos_of.iter().position(Vec::is_empty) {
            return Err(DafosError::InvalidArgument(format!(
                "diversification: anchor {c} has no positive"
            )));
        }
        let dp = tape.sq_dist(g.prototypes, g.positives);
        let dn = tape.sq_dist(g.prototypes, g.negatives);
        let mut pos_idx = Vec::new();
        let mut neg_idx = Vec::new();
        let mut weights = Vec::new();
        match mining {
            PdMining::Mean => {
                for (c, ps) in pos_of.iter().enumerate() {
                    let w = 1.0 / (ps.len() * nneg) as f64;
                    for &p in ps {
                        for n in 0..nneg {
                            pos_idx.push(Some(c * npos + p));
                            neg_idx.push(Some(c * nneg + n));
                            weights.push(w);
                        }
                    }
                }
            }
            PdMining::Hardest => {
                let (dpv, dnv) = (tape.value(dp), tape.value(dn));
                for (c, ps) in pos_of.iter().enumerate() {
                    let p = *ps
                        .iter()
                        .max_by(|&&a, &&b| dpv[[c, a]].total_cmp(&dpv[[c, b]]))
                        .expect("non-empty");
                    let n = (0..nneg)
                        .min_by(|&a, &b| dnv[[c, a]].total_cmp(&dnv[[c, b]]))
                        .expect("non-empty");
                    pos_idx.push(Some(c * npos + p));
                    neg_idx.push(Some(c * nneg + n));
                    weights.push(1.0);
                }
            }
        }
        let m = weights.len();
        let gp = tape.gather(dp, pos_idx, (m, 1));
        let gn = tape.gather(dn, neg_idx, (m, 1));
        let diff = tape.sub(gp, gn);
        let shifted = tape.add_scalar(diff, alpha);
        let hinge = tape.relu(shifted);
        let w = tape.constant(Mat::from_shape_vec((m, 1), weights).expect("shape"));
        let weighted = tape.mul(hinge, w);
        parts.push(tape.sum(weighted));
    }
    if parts.is_empty() {
        return Err(DafosError::InvalidArgument("diversification: no anchors".into()));
    }
    let stacked = tape.concat_rows(&parts);
    Ok(tape.sum(stacked))
}

/// Value form of [`gcdpa_loss`] on plain matrices.
pub fn gcdpa_value(proto_s: &Mat, proto_t: &Mat, affine: [&Mat; 4]) -> Result<f64> {
    let mut tape = Tape::new();
    let ps = tape.constant(proto_s.clone());
    let pt = tape.constant(proto_t.clone());
    let a: Vec<Var> = affine.iter().map(|m| tape.constant((*m).clone())).collect();
    let out = gcdpa_loss(&mut tape, ps, pt, &a)?;
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Provenance;
    use ndarray::array;

    fn batch(m: Mat, labels: Vec<usize>) -> FeatureBatch {
        FeatureBatch::new(m, labels, Domain::Source, Provenance::Real)
    }

    #[test]
    fn prototype_examples() {
        let one = compute_prototypes(&batch(array![[1.5, -2.0]], vec![0]), None, 1).unwrap();
        assert_eq!(one.rows, array![[1.5, -2.0]]);
        let two = compute_prototypes(&batch(array![[1.0, 3.0], [3.0, 5.0]], vec![0, 0]), None, 1).unwrap();
        assert_eq!(two.rows, array![[2.0, 4.0]]);
        let synth = FeatureBatch::new(array![[5.0, 5.0]], vec![0], Domain::Source, Provenance::SyntheticKnown);
        let three = compute_prototypes(&batch(array![[1.0, 3.0], [3.0, 5.0]], vec![0, 0]), Some(&synth), 1).unwrap();
        assert_eq!(three.rows, array![[3.0, 13.0 / 3.0]]);
        assert_eq!(three.counts, vec![3]);
        assert!(compute_prototypes(&batch(array![[1.0]], vec![0]), None, 2).is_err());
    }

    #[test]
    fn gcdpa_examples() {
        let ones = Mat::ones((1, 2));
        let zeros = Mat::zeros((1, 2));
        let ps = array![[1.0, 1.0], [1.0, 1.0]];
        let pt = array![[0.0, 0.0], [0.0, 0.0]];
        let v = gcdpa_value(&ps, &pt, [&ones, &zeros, &ones, &zeros]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(gcdpa_value(&ps, &ps, [&ones, &zeros, &ones, &zeros]).unwrap(), 0.0);
    }

    #[test]
    fn gcdpa_symmetric_under_domain_swap() {
        let ps = array![[1.0, 2.0], [0.5, -1.0]];
        let pt = array![[0.0, 3.0], [2.0, 1.0]];
        let (gs, bs) = (array![[1.5, 0.5]], array![[0.1, -0.2]]);
        let (gt, bt) = (array![[0.7, 2.0]], array![[1.0, 0.0]]);
        let a = gcdpa_value(&ps, &pt, [&gs, &bs, &gt, &bt]).unwrap();
        let b = gcdpa_value(&pt, &ps, [&gt, &bt, &gs, &bs]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn compact(q: Mat, p: Mat, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let pv = tape.constant(p);
        let out = compactness_loss(
            &mut tape,
            &[CompactGroup {
                features: qv,
                labels,
                prototypes: pv,
            }],
        )
        .unwrap();
        tape.scalar(out)
    }

    #[test]
    fn compactness_examples() {
        let v = compact(array![[0.5, 0.0]], array![[0.0, 0.0], [1.0, 0.0]], &[0]);
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = compact(array![[0.0, 0.0]], array![[0.0, 0.0], [1.0, 0.0]], &[0]);
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.3133).abs() < 1e-4);
        let far = compact(array![[0.0, 0.0]], array![[0.0, 0.0], [30.0, 0.0]], &[0]);
        assert!(far < 1e-12);
    }

    fn pd(anchor: Mat, pos: Mat, neg: Mat, alpha: f64, mining: PdMining) -> f64 {
        let mut tape = Tape::new();
        let labels = vec![0; pos.nrows()];
        let (a, p, n) = (tape.constant(anchor), tape.constant(pos), tape.constant(neg));
        let out = prototype_diversification_loss(
            &mut tape,
            &[DiversifyGroup {
                prototypes: a,
                positives: p,
                positive_labels: &labels,
                negatives: n,
            }],
            alpha,
            mining,
        )
        .unwrap();
        tape.scalar(out)
    }

    #[test]
    fn diversification_examples() {
        let o = array![[0.0, 0.0]];
        assert_eq!(pd(o.clone(), array![[1.0, 0.0]], array![[3.0, 0.0]], 0.5, PdMining::Mean), 0.0);
        assert!((pd(o.clone(), array![[2.0, 0.0]], array![[1.0, 0.0]], 0.5, PdMining::Mean) - 3.5).abs() < 1e-12);
        let v = pd(
            o.clone(),
            array![[0.1f64.sqrt(), 0.0]],
            array![[0.0, 0.2f64.sqrt()]],
            0.5,
            PdMining::Mean,
        );
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hardest_mining_picks_extremes() {
        let o = array![[0.0, 0.0]];
        let pos = array![[1.0, 0.0], [2.0, 0.0]];
        let neg = array![[3.0, 0.0], [1.5, 0.0]];
        // farthest positive d²=4, nearest negative d²=2.25
        let v = pd(o.clone(), pos.clone(), neg.clone(), 0.5, PdMining::Hardest);
        assert!((v - 2.25).abs() < 1e-12);
        let mean = pd(o, pos, neg, 0.5, PdMining::Mean);
        assert!(mean <= v);
    }

    #[test]
    fn empty_negatives_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[0.0]]);
        let p = tape.constant(array![[1.0]]);
        let n = tape.constant(Mat::zeros((0, 1)));
        let r = prototype_diversification_loss(
            &mut tape,
            &[DiversifyGroup {
                prototypes: a,
                positives: p,
                positive_labels: &[0],
                negatives: n,
            }],
            0.5,
            PdMining::Mean,
        );
        assert!(r.is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda3: -1.0,
            ..Default::default()
        };
        assert!(w.validate().unwrap_err().to_string().contains("loss.lambda3"));
    }
}
