//! Batch normalization with a shared slot and a domain-specific variant.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{DafosError, Result};
use crate::tape::{Mat, Tape, Var};

pub const DEFAULT_VAR_FLOOR: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// One normalization slot: affine pair plus running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Mat,
    pub beta: Mat,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::ones((1, dim)),
            beta: Mat::zeros((1, dim)),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x` (rows are samples) and applies `gamma`/`beta` bound on
    /// `tape`. Training mode uses batch statistics and returns them for
    /// [`BatchNorm::absorb`]; eval mode uses the running estimates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        gamma: Var,
        beta: Var,
        x: Var,
        training: bool,
        floor: f64,
    ) -> (Var, Option<BatchStats>) {
        let (normed, stats) = if training {
            let (n, mean, var) = tape.normalize_cols(x, floor);
            (n, Some(BatchStats { mean, var }))
        } else {
            let neg_mean = Mat::from_shape_fn((1, self.dim()), |(_, j)| -self.running_mean[j]);
            let inv_std =
                Mat::from_shape_fn((1, self.dim()), |(_, j)| 1.0 / (self.running_var[j] + floor).sqrt());
            let (m, s) = (tape.constant(neg_mean), tape.constant(inv_std));
            let centered = tape.add_row(x, m);
            (tape.mul_row(centered, s), None)
        };
        let scaled = tape.mul_row(normed, gamma);
        (tape.add_row(scaled, beta), stats)
    }

    /// Folds batch statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats, momentum: f64, floor: f64) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - momentum) * *r + momentum * v).max(floor);
        }
    }
}

/// Per-column batch mean and population variance from a training pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Final-position normalization with one slot per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsbnParams {
    pub slots: [BatchNorm; 2],
    pub momentum: f64,
    pub var_floor: f64,
}

impl DsbnParams {
    pub fn new(dim: usize, momentum: f64, var_floor: f64) -> Result<Self> {
        if dim == 0 {
            return Err(DafosError::config("backbone.embed_dim", "must be positive"));
        }
        if var_floor <= 0.0 {
            return Err(DafosError::config("backbone.var_floor", "must be positive"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(DafosError::config("backbone.momentum", "must lie in [0, 1]"));
        }
        Ok(Self {
            slots: [BatchNorm::new(dim), BatchNorm::new(dim)],
            momentum,
            var_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.slots[0].dim()
    }

    pub fn slot(&self, d: Domain) -> &BatchNorm {
        &self.slots[d.index()]
    }

    pub fn slot_mut(&mut self, d: Domain) -> &mut BatchNorm {
        &mut self.slots[d.index()]
    }

    pub fn gamma(&self, d: Domain) -> &Mat {
        &self.slot(d).gamma
    }

    pub fn beta(&self, d: Domain) -> &Mat {
        &self.slot(d).beta
    }

    /// `vars` holds `[γ_S, β_S, γ_T, β_T]` as bound on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        domain: Domain,
        training: bool,
    ) -> (Var, Option<BatchStats>) {
        let (g, b) = affine_vars(vars, domain);
        self.slot(domain).forward(tape, g, b, x, training, self.var_floor)
    }

    /// Updates the running statistics of `domain` only.
    pub fn absorb(&mut self, domain: Domain, stats: &BatchStats) {
        let (momentum, floor) = (self.momentum, self.var_floor);
        self.slot_mut(domain).absorb(stats, momentum, floor);
    }
}

/// Picks `(γ_d, β_d)` out of `[γ_S, β_S, γ_T, β_T]`.
pub fn affine_vars(vars: &[Var], domain: Domain) -> (Var, Var) {
    assert_eq!(vars.len(), 4, "expected [γ_S, β_S, γ_T, β_T]");
    let i = 2 * domain.index();
    (vars[i], vars[i + 1])
}

/// `γ_d ⊙ v + β_d`.
pub fn dsbn_affine(v: &[f64], domain: Domain, dsbn: &DsbnParams) -> Result<Vec<f64>> {
    if v.len() != dsbn.dim() {
        return Err(DafosError::Shape(format!(
            "dsbn_affine: vector has length {}, expected {}",
            v.len(),
            dsbn.dim()
        )));
    }
    let (g, b) = (dsbn.gamma(domain), dsbn.beta(domain));
    Ok(v.iter().enumerate().map(|(j, x)| g[[0, j]] * x + b[[0, j]]).collect())
}

/// Tape form of [`dsbn_affine`] applied to every row of `rows`.
pub fn dsbn_affine_rows(tape: &mut Tape, rows: Var, gamma: Var, beta: Var) -> Var {
    let scaled = tape.mul_row(rows, gamma);
    tape.add_row(scaled, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn affine_examples() {
        let mut d = DsbnParams::new(1, 0.1, 1e-5).unwrap();
        assert_eq!(dsbn_affine(&[0.5], Domain::Source, &d).unwrap(), vec![0.5]);
        d.slots[1].gamma = array![[2.0]];
        d.slots[1].beta = array![[1.0]];
        assert_eq!(dsbn_affine(&[0.5], Domain::Target, &d).unwrap(), vec![2.0]);
        assert!(dsbn_affine(&[0.5, 1.0], Domain::Target, &d).is_err());
    }

    #[test]
    fn gamma_gradient_is_input() {
        let mut tape = Tape::new();
        let v = tape.constant(array![[3.0]]);
        let g = tape.param(array![[1.5]]);
        let b = tape.param(array![[0.0]]);
        let y = dsbn_affine_rows(&mut tape, v, g, b);
        let out = tape.sum(y);
        let grads = tape.backward(out);
        assert_eq!(grads.get(g).unwrap()[[0, 0]], 3.0);
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn training_updates_only_tagged_slot() {
        let mut d = DsbnParams::new(2, 0.5, 1e-5).unwrap();
        let before = d.slot(Domain::Source).clone();
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&d.slots[0].gamma, &d.slots[0].beta, &d.slots[1].gamma, &d.slots[1].beta]
            .into_iter()
            .map(|m| tape.param(m.clone()))
            .collect();
        let x = tape.constant(array![[1.0, 2.0], [3.0, 6.0]]);
        let (_, stats) = d.forward(&mut tape, &vars, x, Domain::Target, true);
        d.absorb(Domain::Target, &stats.unwrap());
        assert_eq!(d.slot(Domain::Source), &before);
        assert_eq!(d.slot(Domain::Target).running_mean, vec![1.0, 2.0]);
        assert_eq!(d.slot(Domain::Target).running_var, vec![1.0, 2.5]);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0];
        let mut tape = Tape::new();
        let g = tape.constant(bn.gamma.clone());
        let b = tape.constant(bn.beta.clone());
        let x = tape.constant(array![[6.0]]);
        let (y, stats) = bn.forward(&mut tape, g, b, x, false, 0.0);
        assert_eq!(tape.value(y)[[0, 0]], 2.0);
        assert!(stats.is_none());
    }
}
