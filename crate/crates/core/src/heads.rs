//! Distance vectors and the two binary heads (outlier and domain).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DafosError, Result};
use crate::nn::{Activation, Mlp, Parameterized};
use crate::tape::{Mat, Tape, Var};

/// Squared distances from one query to `K` source then `K` target prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceVector {
    pub values: Vec<f64>,
}

impl DistanceVector {
    pub fn ways(&self) -> usize {
        self.values.len() / 2
    }
}

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn query_distances(query: &[f64], proto_s: &Mat, proto_t: &Mat) -> Result<DistanceVector> {
    if proto_s.nrows() == 0 || proto_t.nrows() == 0 {
        return Err(DafosError::InvalidArgument("query_distances: both prototype blocks are required".into()));
    }
    if proto_s.ncols() != query.len() || proto_t.ncols() != query.len() {
        return Err(DafosError::Shape(format!(
            "query_distances: query has dim {}, prototypes {} / {}",
            query.len(),
            proto_s.ncols(),
            proto_t.ncols()
        )));
    }
    let q = ndarray::ArrayView1::from(query);
    let values = proto_s
        .outer_iter()
        .chain(proto_t.outer_iter())
        .map(|p| sq(q, p))
        .collect();
    Ok(DistanceVector { values })
}

/// Tape form for a batch of queries: `n × 2K`.
pub fn distance_rows(tape: &mut Tape, queries: Var, proto_s: Var, proto_t: Var) -> Var {
    let ds = tape.sq_dist(queries, proto_s);
    let dt = tape.sq_dist(queries, proto_t);
    tape.concat_cols(&[ds, dt])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Outlier,
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_sizes: Vec<usize>,
    /// Inverse-frequency weighting of the two targets.
    pub balance_loss: bool,
    /// Sort distances within each block so the head sees class-order-free input.
    pub sort_blocks: bool,
    /// Feed `ln(1 + d)` instead of `d`.
    pub log_distances: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![32, 32, 32],
            balance_loss: true,
            sort_blocks: true,
            log_distances: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(DafosError::config("heads.hidden_sizes", "sizes must be positive"));
        }
        Ok(())
    }
}

/// A distance-vector classifier with two output logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub ways: usize,
    pub sort_blocks: bool,
    pub log_distances: bool,
    pub mlp: Mlp,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(kind: HeadKind, ways: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        let mut sizes = vec![2 * ways];
        sizes.extend(&cfg.hidden_sizes);
        sizes.push(2);
        Self {
            kind,
            ways,
            sort_blocks: cfg.sort_blocks,
            log_distances: cfg.log_distances,
            mlp: Mlp::new(&sizes, Activation::Relu, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        2 * self.ways
    }

    fn transform(&self, tape: &mut Tape, dist: Var) -> Var {
        let mut x = dist;
        if self.sort_blocks {
            let m = tape.value(x);
            let (n, w) = m.dim();
            let k = self.ways;
            let mut index = Vec::with_capacity(n * w);
            for r in 0..n {
                for block in 0..2 {
                    let mut cols: Vec<usize> = (block * k..(block + 1) * k).collect();
                    cols.sort_by(|&a, &b| m[[r, a]].total_cmp(&m[[r, b]]));
                    index.extend(cols.into_iter().map(|c| Some(r * w + c)));
                }
            }
            x = tape.gather(x, index, (n, w));
        }
        if self.log_distances {
            let shifted = tape.add_scalar(x, 1.0);
            x = tape.log(shifted);
        }
        x
    }

    /// Logits (`n × 2`) for distance rows (`n × 2K`).
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], dist: Var) -> Result<Var> {
        let w = tape.value(dist).ncols();
        if w != self.input_width() {
            return Err(DafosError::Shape(format!(
                "head expects {} distances per query, got {w}",
                self.input_width()
            )));
        }
        let x = self.transform(tape, dist);
        Ok(self.mlp.forward(tape, vars, x))
    }

    pub fn logits(&self, dist: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let d = tape.constant(dist.clone());
        let out = self.forward(&mut tape, &vars, d)?;
        Ok(tape.value(out).clone())
    }
}

impl Parameterized for Head {
    fn params(&self) -> Vec<&Mat> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.mlp.params_mut()
    }
}

/// Inverse-frequency weights averaging to one.
pub fn balance_weights(targets: &[usize]) -> Vec<f64> {
    let n = targets.len() as f64;
    let mut counts = [0usize; 2];
    for &t in targets {
        counts[t.min(1)] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    targets.iter().map(|&t| n / (present * counts[t.min(1)] as f64)).collect()
}

/// Mean two-way softmax cross-entropy, optionally weighted per row.
pub fn head_loss(tape: &mut Tape, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
    let (n, c) = tape.value(logits).dim();
    if n == 0 {
        return Err(DafosError::InvalidArgument("head_loss: empty batch".into()));
    }
    if c != 2 || targets.len() != n {
        return Err(DafosError::Shape("head_loss: expected n×2 logits and n targets".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t > 1) {
        return Err(DafosError::InvalidArgument(format!("head_loss: target {t} outside {{0, 1}}")));
    }
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.pick(ls, targets);
    let picked = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(DafosError::Shape("head_loss: one weight per row required".into()));
            }
            let wv = tape.constant(Mat::from_shape_vec((n, 1), w.to_vec()).expect("shape"));
            tape.mul(picked, wv)
        }
        None => picked,
    };
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Softmax probabilities and argmax label per row of `logits`.
pub fn predict_logits(logits: &Mat) -> Result<Vec<([f64; 2], usize)>> {
    logits
        .outer_iter()
        .map(|r| {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(DafosError::Numeric {
                    message: "non-finite head logit".into(),
                    dump: format!("{r:?}"),
                });
            }
            let m = r[0].max(r[1]);
            let (a, b) = ((r[0] - m).exp(), (r[1] - m).exp());
            let p = [a / (a + b), b / (a + b)];
            Ok((p, usize::from(r[1] > r[0])))
        })
        .collect()
}

/// Runs `head` on distance rows and returns probabilities plus the argmax decision.
pub fn predict(head: &Head, dist: &Mat) -> Result<Vec<([f64; 2], usize)>> {
    predict_logits(&head.logits(dist)?)
}
