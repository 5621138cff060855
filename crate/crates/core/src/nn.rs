//! Dense layers, MLPs and an Adam optimizer on top of [`crate::tape`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DafosError, Result};
use crate::tape::{Gradients, Mat, Tape, Var};

/// Anything that owns an ordered list of trainable matrices.
pub trait Parameterized {
    fn params(&self) -> Vec<&Mat>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Pushes every parameter onto `tape` as a trainable leaf.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Pushes every parameter onto `tape` as a constant.
    fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect()
    }

    fn snapshot(&self) -> Vec<Mat> {
        self.params().into_iter().cloned().collect()
    }
}

/// Collects gradients for `vars` in parameter order; missing gradients are zero.
pub fn collect_grads(grads: &Gradients, vars: &[Var], params: &[&Mat]) -> Vec<Mat> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.dim()))
        .collect()
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    /// No nonlinearity; the stack stays affine.
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.2),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Mat,
}

impl Linear {
    /// Fan-in scaled Gaussian init (He-style, std = sqrt(2 / fan_in)).
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::with_std(input, output, (2.0 / input as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((input, output), |_| normal.sample(rng)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, vars[0]);
        tape.add_row(y, vars[1])
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Mat> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of [`Linear`] layers with an activation between them (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    /// Scales the final layer's weights, e.g. to start a residual generator near zero.
    pub fn scale_output_layer(&mut self, k: f64) {
        if let Some(last) = self.layers.last_mut() {
            last.weight *= k;
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &vars[2 * i..2 * i + 2], h);
            if i + 1 < n {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    /// Value-only forward pass on a private tape.
    pub fn eval(&self, x: &Mat) -> Mat {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &vars, xv);
        tape.value(y).clone()
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one ordered parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Mat]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.dim())).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Mat>, grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(DafosError::Shape(format!(
                "adam: {} params, {} grads, {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.dim() != g.dim() {
                return Err(DafosError::Shape(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Global L2 norm over a list of gradients.
pub fn global_norm(grads: &[Mat]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= k;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut w = Mat::from_elem((1, 2), 3.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &[&w],
        );
        for _ in 0..500 {
            let g = w.mapv(|x| 2.0 * (x - 1.0));
            opt.update(vec![&mut w], &[g]).unwrap();
        }
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-2), "{w:?}");
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut w = Mat::from_elem((2, 2), 0.5);
        let before = w.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            &[&w],
        );
        opt.update(vec![&mut w], &[Mat::ones((2, 2))]).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn mlp_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[6, 8, 8, 2], Activation::Relu, &mut rng);
        assert_eq!(mlp.params().len(), 6);
        let y = mlp.eval(&Mat::zeros((3, 6)));
        assert_eq!(y.dim(), (3, 2));
    }

    #[test]
    fn clip_rescales_to_bound() {
        let mut g = vec![Mat::from_elem((1, 1), 30.0), Mat::from_elem((1, 1), 40.0)];
        let before = clip_global_norm(&mut g, 10.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
    }
}
