//! Feature extractor with a domain-specific batch norm at its output.

pub mod augment;
pub mod conv;
pub mod dsbn;

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, strong_magnitude, AugmentMode, AugmentPolicy, STRONG_MAGNITUDE_LIMIT};
pub use conv::{ConvArch, ConvNet, Geometry};
pub use dsbn::{dsbn_affine, dsbn_affine_rows, BatchNorm, BatchStats, DsbnParams};

use crate::data::{Domain, ImageTensor, Sample, SampleRef, SyntheticTask, IMAGE_SIDE};
use crate::error::{DafosError, Result};
use crate::features::{FeatureBatch, Provenance};
use crate::nn::{Activation, Linear, Mlp, Parameterized};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputKind {
    Image { side: usize },
    Vector { dim: usize },
}

impl InputKind {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputKind::Image { side } => 3 * side * side,
            InputKind::Vector { dim } => dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    SmallConv,
    Resnet18Like,
    /// Stack of affine layers, identity-initialized where square.
    IdentityMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input: InputKind,
    pub embed_dim: usize,
    pub preset: Preset,
    /// Affine layers of the identity-mlp preset.
    pub layers: usize,
    /// Base channel width of the convolutional presets.
    pub width: usize,
    pub pretrained: Option<PathBuf>,
    pub var_floor: f64,
    pub momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input: InputKind::Vector { dim: 8 },
            embed_dim: 8,
            preset: Preset::IdentityMlp,
            layers: 1,
            width: 16,
            pretrained: None,
            var_floor: dsbn::DEFAULT_VAR_FLOOR,
            momentum: dsbn::DEFAULT_MOMENTUM,
        }
    }
}

impl BackboneConfig {
    pub fn image(preset: Preset) -> Self {
        Self {
            input: InputKind::Image { side: IMAGE_SIDE },
            embed_dim: 64,
            preset,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(DafosError::config("backbone.embed_dim", "must be positive"));
        }
        match (self.preset, self.input) {
            (Preset::IdentityMlp, InputKind::Vector { dim }) if dim > 0 => {}
            (Preset::IdentityMlp, _) => {
                return Err(DafosError::config(
                    "backbone.preset",
                    "identity_mlp needs a vector input with positive dimension",
                ))
            }
            (_, InputKind::Image { side }) if side >= 8 => {}
            (_, _) => {
                return Err(DafosError::config(
                    "backbone.preset",
                    "convolutional presets need an image input of side at least 8",
                ))
            }
        }
        if self.preset == Preset::IdentityMlp && self.layers == 0 {
            return Err(DafosError::config("backbone.layers", "must be at least 1"));
        }
        if self.width == 0 {
            return Err(DafosError::config("backbone.width", "must be positive"));
        }
        if self.var_floor <= 0.0 {
            return Err(DafosError::config("backbone.var_floor", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(DafosError::config("backbone.momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Affine(Mlp),
    Conv(ConvNet),
}

impl Network {
    fn params(&self) -> Vec<&Mat> {
        match self {
            Network::Affine(m) => m.params(),
            Network::Conv(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            Network::Affine(m) => m.params_mut(),
            Network::Conv(c) => c.params_mut(),
        }
    }
}

/// Running statistics gathered by a training-mode forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub internal: Vec<BatchStats>,
    pub dsbn: Option<(Domain, BatchStats)>,
}

/// `f_φ` followed by DSBN. Parameter order: network, then `γ_S, β_S, γ_T, β_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub net: Network,
    pub dsbn: DsbnParams,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let net = match config.preset {
            Preset::IdentityMlp => {
                let mut layers = Vec::with_capacity(config.layers);
                let mut input = config.input.flat_len();
                for _ in 0..config.layers {
                    layers.push(if input == e {
                        Linear::identity(e)
                    } else {
                        Linear::new(input, e, rng)
                    });
                    input = e;
                }
                Network::Affine(Mlp {
                    layers,
                    activation: Activation::Identity,
                })
            }
            Preset::SmallConv | Preset::Resnet18Like => {
                let arch = if config.preset == Preset::SmallConv {
                    ConvArch::SmallConv
                } else {
                    ConvArch::Resnet18Like
                };
                Network::Conv(ConvNet::new(arch, 3, config.width, e, rng))
            }
        };
        let net = match &config.pretrained {
            Some(path) => load_pretrained(path, &net)?,
            None => net,
        };
        let dsbn = DsbnParams::new(e, config.momentum, config.var_floor)?;
        Ok(Self { config, net, dsbn })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Number of network parameter tensors (excluding DSBN).
    pub fn net_param_count(&self) -> usize {
        self.net.params().len()
    }

    /// Lays out `samples` as the network's input matrix.
    pub fn input_matrix(&self, samples: &[Sample]) -> Result<(Mat, Option<Geometry>)> {
        if samples.is_empty() {
            return Err(DafosError::Shape("empty batch".into()));
        }
        let expect = self.config.input.flat_len();
        for s in samples {
            if s.flat_len() != expect {
                return Err(DafosError::Shape(format!(
                    "sample has {} values, backbone input expects {expect}",
                    s.flat_len()
                )));
            }
        }
        match (&self.net, self.config.input) {
            (Network::Affine(_), _) => {
                let m = Mat::from_shape_fn((samples.len(), expect), |(i, j)| samples[i].as_slice()[j]);
                Ok((m, None))
            }
            (Network::Conv(_), InputKind::Image { side }) => {
                let g = Geometry {
                    images: samples.len(),
                    height: side,
                    width: side,
                };
                let mut m = Mat::zeros((g.rows(), 3));
                for (b, s) in samples.iter().enumerate() {
                    let Sample::Image(img) = s else {
                        return Err(DafosError::Shape("convolutional backbone expects images".into()));
                    };
                    for y in 0..side {
                        for x in 0..side {
                            for c in 0..3 {
                                m[[(b * side + y) * side + x, c]] = img.get(c, y, x);
                            }
                        }
                    }
                }
                Ok((m, Some(g)))
            }
            (Network::Conv(_), InputKind::Vector { .. }) => {
                Err(DafosError::Shape("convolutional backbone expects images".into()))
            }
        }
    }

    /// Tape forward pass. `vars` comes from [`Parameterized::bind`] (or
    /// `bind_frozen`). Only the `domain` DSBN slot is used.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        samples: &[Sample],
        domain: Domain,
        training: bool,
    ) -> Result<(Var, ForwardStats)> {
        let (input, geometry) = self.input_matrix(samples)?;
        let k = self.net_param_count();
        let (net_vars, dsbn_vars) = vars.split_at(k);
        let x = tape.constant(input);
        let (h, internal) = match &self.net {
            Network::Affine(m) => (m.forward(tape, net_vars, x), Vec::new()),
            Network::Conv(c) => c.forward(
                tape,
                net_vars,
                x,
                geometry.expect("conv input geometry"),
                training,
                self.config.var_floor,
            ),
        };
        let (out, stats) = self.dsbn.forward(tape, dsbn_vars, h, domain, training);
        Ok((
            out,
            ForwardStats {
                internal,
                dsbn: stats.map(|s| (domain, s)),
            },
        ))
    }

    /// Folds training-mode statistics into the running estimates.
    pub fn absorb(&mut self, stats: &ForwardStats) {
        let (momentum, floor) = (self.config.momentum, self.config.var_floor);
        if let Network::Conv(c) = &mut self.net {
            c.absorb(&stats.internal, momentum, floor);
        }
        if let Some((d, s)) = &stats.dsbn {
            self.dsbn.absorb(*d, s);
        }
    }

    /// Embeds one domain's batch. Training mode normalizes with batch
    /// statistics and updates the tagged domain's running estimates only.
    pub fn extract(
        &mut self,
        samples: &[Sample],
        labels: Vec<usize>,
        domain: Domain,
        training: bool,
    ) -> Result<FeatureBatch> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let (out, stats) = self.forward(&mut tape, &vars, samples, domain, training)?;
        self.absorb(&stats);
        Ok(FeatureBatch::new(tape.value(out).clone(), labels, domain, Provenance::Real))
    }

    /// Eval-mode embedding; never touches the running statistics.
    pub fn embed(&self, samples: &[Sample], domain: Domain) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let (out, _) = self.forward(&mut tape, &vars, samples, domain, false)?;
        Ok(tape.value(out).clone())
    }
}

impl Parameterized for Backbone {
    fn params(&self) -> Vec<&Mat> {
        let mut p = self.net.params();
        for slot in &self.dsbn.slots {
            p.push(&slot.gamma);
            p.push(&slot.beta);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.net.params_mut();
        for slot in &mut self.dsbn.slots {
            p.push(&mut slot.gamma);
            p.push(&mut slot.beta);
        }
        p
    }
}

fn load_pretrained(path: &std::path::Path, like: &Network) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| DafosError::io(path, e))?;
    let net: Network = serde_json::from_str(&text)?;
    let shapes = |n: &Network| n.params().iter().map(|p| p.dim()).collect::<Vec<_>>();
    if shapes(&net) != shapes(like) {
        return Err(DafosError::Shape(format!(
            "pretrained weights in {} do not match the configured preset",
            path.display()
        )));
    }
    Ok(net)
}

/// Loads the sample behind `r` in the layout `input` expects.
pub fn materialize(r: &SampleRef, synthetic: Option<&SyntheticTask>, input: InputKind) -> Result<Sample> {
    match (r, input) {
        (SampleRef::File(path), InputKind::Image { side }) => Ok(Sample::Image(ImageTensor::load(path, side)?)),
        (SampleRef::Synthetic { domain, class, index }, InputKind::Vector { dim }) => {
            let task = synthetic.ok_or_else(|| DafosError::Data("synthetic sample without a task".into()))?;
            if task.dim != dim {
                return Err(DafosError::Shape(format!(
                    "synthetic task has dim {}, backbone input expects {dim}",
                    task.dim
                )));
            }
            Ok(Sample::Vector(task.sample(*domain, *class, *index)))
        }
        (SampleRef::File(p), InputKind::Vector { .. }) => Err(DafosError::Data(format!(
            "{} is an image file but the backbone expects vectors",
            p.display()
        ))),
        (SampleRef::Synthetic { .. }, InputKind::Image { .. }) => {
            Err(DafosError::Data("synthetic samples are vectors; configure a vector input".into()))
        }
    }
}
