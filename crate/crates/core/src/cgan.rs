//! Class- and domain-conditional feature generators.
//!
//! Two generator/discriminator pairs work in embedding space. The low-noise
//! pair hallucinates known-class features; the high-noise pair hallucinates
//! open-space features and is pushed away from the low-noise outputs by the
//! anti-collapse term [`aocmc_loss`]. Both are trained per episode and merged
//! into their slow weights with a first-order meta update.
//!
//! Conditioning is `(domain embedding, class anchor)`, where the anchor is the
//! mean real support feature of the class in the current episode. Generator
//! outputs are residual: `s = anchor + G(z, domain, anchor)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{DafosError, Result};
use crate::features::{FeatureBatch, Provenance};
use crate::nn::{collect_grads, Activation, Adam, AdamConfig, Mlp, Parameterized};
use crate::tape::{Mat, Tape, Var};

/// Width of the learned domain embedding fed to both networks.
pub const DOMAIN_EMBED_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub eps: f64,
    pub noise_dim: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_low: 0.3,
            sigma_high: 0.9,
            eps: 1e-7,
            noise_dim: 8,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_low > 0.0) {
            return Err(DafosError::config("gan.sigma_low", "must be positive"));
        }
        if self.sigma_low >= self.sigma_high {
            return Err(DafosError::config("gan.sigma_low", "must be smaller than gan.sigma_high"));
        }
        if !(self.eps > 0.0) {
            return Err(DafosError::config("gan.eps", "must be positive"));
        }
        if self.noise_dim == 0 {
            return Err(DafosError::config("gan.noise_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn sigma(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Low => self.sigma_low,
            Branch::High => self.sigma_high,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Low,
    High,
}

impl Branch {
    pub fn provenance(self) -> Provenance {
        match self {
            Branch::Low => Provenance::SyntheticKnown,
            Branch::High => Provenance::SyntheticUnknown,
        }
    }
}

/// Training knobs for the generator pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub eps: f64,
    pub noise_dim: usize,
    pub hidden: usize,
    pub inner_steps: usize,
    pub meta_step: f64,
    pub inner_lr: f64,
    /// Synthetic features per known class and domain; defaults to the source shots.
    pub synth_per_class: Option<usize>,
    pub aocmc: bool,
    pub aocmc_weight: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        let n = NoiseConfig::default();
        Self {
            sigma_low: n.sigma_low,
            sigma_high: n.sigma_high,
            eps: n.eps,
            noise_dim: n.noise_dim,
            hidden: 32,
            inner_steps: 5,
            meta_step: 0.5,
            inner_lr: 1e-3,
            synth_per_class: None,
            aocmc: true,
            aocmc_weight: 1.0,
        }
    }
}

impl GanConfig {
    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_low: self.sigma_low,
            sigma_high: self.sigma_high,
            eps: self.eps,
            noise_dim: self.noise_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise().validate()?;
        if self.hidden == 0 {
            return Err(DafosError::config("gan.hidden", "must be positive"));
        }
        if !(self.meta_step > 0.0 && self.meta_step <= 1.0) {
            return Err(DafosError::config("gan.meta_step", "must lie in (0, 1]"));
        }
        if !(self.inner_lr >= 0.0) {
            return Err(DafosError::config("gan.inner_lr", "must be nonnegative"));
        }
        if self.synth_per_class == Some(0) {
            return Err(DafosError::config("gan.synth_per_class", "must be at least 1"));
        }
        if !(self.aocmc_weight >= 0.0) {
            return Err(DafosError::config("gan.aocmc_weight", "must be nonnegative"));
        }
        Ok(())
    }
}

/// One conditional generator/discriminator pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondGan {
    pub branch: Branch,
    pub generator: Mlp,
    /// `2 × DOMAIN_EMBED_DIM` table indexed by domain.
    pub gen_domain: Mat,
    pub discriminator: Mlp,
    pub disc_domain: Mat,
    pub embed_dim: usize,
    pub noise_dim: usize,
}

impl CondGan {
    /// Four linear layers per network; the generator's last layer starts small
    /// so initial outputs stay close to their anchors.
    pub fn new<R: Rng + ?Sized>(branch: Branch, embed_dim: usize, noise_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let g_in = noise_dim + DOMAIN_EMBED_DIM + embed_dim;
        let d_in = embed_dim + DOMAIN_EMBED_DIM + embed_dim;
        let mut generator = Mlp::new(&[g_in, hidden, hidden, hidden, embed_dim], Activation::LeakyRelu, rng);
        generator.scale_output_layer(0.1);
        let discriminator = Mlp::new(&[d_in, hidden, hidden, hidden, 1], Activation::LeakyRelu, rng);
        let table = |rng: &mut R| {
            let normal = rand_distr::Normal::new(0.0, 0.5).expect("finite std");
            Mat::from_shape_fn((2, DOMAIN_EMBED_DIM), |_| normal.sample(rng))
        };
        let gen_domain = table(rng);
        let disc_domain = table(rng);
        Self {
            branch,
            generator,
            gen_domain,
            discriminator,
            disc_domain,
            embed_dim,
            noise_dim,
        }
    }

    pub fn gen_params(&self) -> Vec<&Mat> {
        let mut p = self.generator.params();
        p.push(&self.gen_domain);
        p
    }

    pub fn gen_params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.generator.params_mut();
        p.push(&mut self.gen_domain);
        p
    }

    pub fn disc_params(&self) -> Vec<&Mat> {
        let mut p = self.discriminator.params();
        p.push(&self.disc_domain);
        p
    }

    pub fn disc_params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.discriminator.params_mut();
        p.push(&mut self.disc_domain);
        p
    }

    fn bind_group(tape: &mut Tape, params: Vec<&Mat>, trainable: bool) -> Vec<Var> {
        params
            .into_iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Generator output `anchor + G(z, domain, anchor)` on `tape`.
    /// `vars` = generator params then the domain table.
    pub fn generate(&self, tape: &mut Tape, vars: &[Var], z: &Mat, domains: &[Domain], anchors: &Mat) -> Var {
        let (net, table) = vars.split_at(vars.len() - 1);
        let emb = domain_embedding(tape, table[0], domains);
        let z = tape.constant(z.clone());
        let a = tape.constant(anchors.clone());
        let input = tape.concat_cols(&[z, emb, a]);
        let delta = self.generator.forward(tape, net, input);
        tape.add(a, delta)
    }

    /// Discriminator logits (`n×1`) for features `s` under the given conditioning.
    pub fn discriminate(&self, tape: &mut Tape, vars: &[Var], s: Var, domains: &[Domain], anchors: &Mat) -> Var {
        let (net, table) = vars.split_at(vars.len() - 1);
        let emb = domain_embedding(tape, table[0], domains);
        let a = tape.constant(anchors.clone());
        let input = tape.concat_cols(&[s, emb, a]);
        self.discriminator.forward(tape, net, input)
    }

    /// Value-only generator pass.
    pub fn generate_values(&self, z: &Mat, domains: &[Domain], anchors: &Mat) -> Mat {
        let mut tape = Tape::new();
        let vars = Self::bind_group(&mut tape, self.gen_params(), false);
        let out = self.generate(&mut tape, &vars, z, domains, anchors);
        tape.value(out).clone()
    }

    /// Value-only discriminator pass.
    pub fn disc_values(&self, s: &Mat, domains: &[Domain], anchors: &Mat) -> Mat {
        let mut tape = Tape::new();
        let vars = Self::bind_group(&mut tape, self.disc_params(), false);
        let sv = tape.constant(s.clone());
        let out = self.discriminate(&mut tape, &vars, sv, domains, anchors);
        tape.value(out).clone()
    }

    /// All parameters, generator group first.
    pub fn all_params(&self) -> Vec<&Mat> {
        let mut p = self.gen_params();
        p.extend(self.disc_params());
        p
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.generator.params_mut();
        p.push(&mut self.gen_domain);
        p.extend(self.discriminator.params_mut());
        p.push(&mut self.disc_domain);
        p
    }
}

impl Parameterized for CondGan {
    fn params(&self) -> Vec<&Mat> {
        self.all_params()
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.all_params_mut()
    }
}

fn domain_embedding(tape: &mut Tape, table: Var, domains: &[Domain]) -> Var {
    let onehot = Mat::from_shape_fn((domains.len(), 2), |(i, j)| if domains[i].index() == j { 1.0 } else { 0.0 });
    let oh = tape.constant(onehot);
    tape.matmul(oh, table)
}

/// Synthetic features with the noise that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBatch {
    pub batch: FeatureBatch,
    pub noise: Mat,
}

impl SynthBatch {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }
}

/// Draws `n × dim` i.i.d. `N(0, σ²)` noise.
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, dim: usize, sigma: f64, rng: &mut R) -> Mat {
    Mat::from_shape_fn((n, dim), |_| {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    })
}

/// Draws index-aligned noise pairs: `z_l = σL·u` and
/// `z_h = σH·(ρu + sqrt(1-ρ²)v)` with `ρ ~ U[0,1]` per row. Each marginal is an
/// isotropic Gaussian with the branch's standard deviation.
pub fn paired_noise<R: Rng + ?Sized>(n: usize, noise: &NoiseConfig, rng: &mut R) -> (Mat, Mat) {
    let d = noise.noise_dim;
    let u = gaussian_noise(n, d, 1.0, rng);
    let v = gaussian_noise(n, d, 1.0, rng);
    let mut zl = Mat::zeros((n, d));
    let mut zh = Mat::zeros((n, d));
    for i in 0..n {
        let rho: f64 = rng.random();
        let w = (1.0 - rho * rho).sqrt();
        for j in 0..d {
            zl[[i, j]] = noise.sigma_low * u[[i, j]];
            zh[[i, j]] = noise.sigma_high * (rho * u[[i, j]] + w * v[[i, j]]);
        }
    }
    (zl, zh)
}

/// Generates `count` features of class `class` (a row of `anchors`) in `domain`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<R: Rng + ?Sized>(
    gan: &CondGan,
    branch: Branch,
    anchors: &Mat,
    class: usize,
    domain: Domain,
    count: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<SynthBatch> {
    if count == 0 {
        return Err(DafosError::InvalidArgument("synthesize: count must be positive".into()));
    }
    if class >= anchors.nrows() {
        return Err(DafosError::InvalidArgument(format!(
            "synthesize: no conditioning anchor for class {class} ({} available)",
            anchors.nrows()
        )));
    }
    let z = gaussian_noise(count, gan.noise_dim, noise.sigma(branch), rng);
    let a = repeat_row(anchors, class, count);
    let features = gan.generate_values(&z, &vec![domain; count], &a);
    Ok(SynthBatch {
        batch: FeatureBatch::new(features, vec![class; count], domain, branch.provenance()),
        noise: z,
    })
}

fn repeat_row(m: &Mat, row: usize, n: usize) -> Mat {
    Mat::from_shape_fn((n, m.ncols()), |(_, j)| m[[row, j]])
}

/// Discriminator loss `-E[log D(real)] - E[log(1 - D(fake))]` and the
/// non-saturating generator loss `-E[log D(fake)]`, with `D = sigmoid(logit)`.
pub fn adversarial_losses(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<(Var, Var)> {
    if tape.value(real_logits).is_empty() || tape.value(fake_logits).is_empty() {
        return Err(DafosError::InvalidArgument("adversarial_losses: empty batch".into()));
    }
    if !tape.value(real_logits).iter().chain(tape.value(fake_logits).iter()).all(|x| x.is_finite()) {
        return Err(DafosError::Numeric {
            message: "non-finite discriminator logit".into(),
            dump: String::new(),
        });
    }
    let neg_real = tape.scale(real_logits, -1.0);
    let lr = tape.softplus(neg_real);
    let real_term = tape.mean(lr);
    let lf = tape.softplus(fake_logits);
    let fake_term = tape.mean(lf);
    let disc = tape.add(real_term, fake_term);
    let neg_fake = tape.scale(fake_logits, -1.0);
    let lg = tape.softplus(neg_fake);
    let gen = tape.mean(lg);
    Ok((gen, disc))
}

/// Value form of [`adversarial_losses`].
pub fn adversarial_loss_values(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let r = tape.constant(Mat::from_shape_vec((real_logits.len(), 1), real_logits.to_vec()).expect("shape"));
    let f = tape.constant(Mat::from_shape_vec((fake_logits.len(), 1), fake_logits.to_vec()).expect("shape"));
    let (g, d) = adversarial_losses(&mut tape, r, f)?;
    Ok((tape.scalar(g), tape.scalar(d)))
}

/// `1 + ln[(1 - cz + ε) / (1 - cs + ε)]` for one pair of cosines.
pub fn aocmc_term(cos_z: f64, cos_s: f64, eps: f64) -> f64 {
    1.0 + ((1.0 - cos_z + eps) / (1.0 - cos_s + eps)).ln()
}

fn row_cosines(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    (0..a.nrows())
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            let (nx, ny) = (x.dot(&x).sqrt(), y.dot(&y).sqrt());
            if nx == 0.0 || ny == 0.0 {
                Err(DafosError::InvalidArgument(format!("aocmc: zero-norm vector in pair {i}")))
            } else {
                Ok(x.dot(&y) / (nx * ny))
            }
        })
        .collect()
}

/// Anti open/close mode-collapse regularizer averaged over aligned pairs.
/// `s_l` enters as a constant; gradients reach `s_h` only.
pub fn aocmc_loss(tape: &mut Tape, z_l: &Mat, z_h: &Mat, s_l: &Mat, s_h: Var, eps: f64) -> Result<Var> {
    let n = z_l.nrows();
    if n == 0 || z_h.dim() != z_l.dim() || s_l.dim() != tape.value(s_h).dim() || s_l.nrows() != n {
        return Err(DafosError::Shape("aocmc: pair batches must be non-empty and aligned".into()));
    }
    let cz = row_cosines(z_l, z_h)?;
    row_cosines(s_l, tape.value(s_h))?;
    let num: f64 = cz.iter().map(|c| (1.0 - c + eps).ln()).sum::<f64>() / n as f64;
    let sl = tape.constant(s_l.clone());
    let cs = tape.cosine_rows(sl, s_h);
    let neg = tape.scale(cs, -1.0);
    let shifted = tape.add_scalar(neg, 1.0 + eps);
    let logs = tape.log(shifted);
    let den = tape.mean(logs);
    let neg_den = tape.scale(den, -1.0);
    Ok(tape.add_scalar(neg_den, 1.0 + num))
}

/// Value form of [`aocmc_loss`].
pub fn aocmc_value(z_l: &Mat, z_h: &Mat, s_l: &Mat, s_h: &Mat, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let sh = tape.constant(s_h.clone());
    let out = aocmc_loss(&mut tape, z_l, z_h, s_l, sh, eps)?;
    Ok(tape.scalar(out))
}

/// `slow + meta_step · (fast - slow)`, tensor by tensor.
pub fn first_order_meta_update(slow: &[Mat], fast: &[Mat], meta_step: f64) -> Result<Vec<Mat>> {
    if !(meta_step > 0.0 && meta_step <= 1.0) {
        return Err(DafosError::InvalidArgument("meta_step must lie in (0, 1]".into()));
    }
    if slow.len() != fast.len() {
        return Err(DafosError::Shape(format!(
            "meta update: {} slow tensors vs {} fast tensors",
            slow.len(),
            fast.len()
        )));
    }
    slow.iter()
        .zip(fast)
        .map(|(s, f)| {
            if s.dim() != f.dim() {
                Err(DafosError::Shape(format!("meta update: shape {:?} vs {:?}", s.dim(), f.dim())))
            } else {
                Ok(s + &((f - s) * meta_step))
            }
        })
        .collect()
}

/// The low- and high-noise pairs sharing one conditioning scheme across domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualGan {
    pub low: CondGan,
    pub high: CondGan,
}

impl DualGan {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, cfg: &GanConfig, rng: &mut R) -> Self {
        Self {
            low: CondGan::new(Branch::Low, embed_dim, cfg.noise_dim, cfg.hidden, rng),
            high: CondGan::new(Branch::High, embed_dim, cfg.noise_dim, cfg.hidden, rng),
        }
    }

    pub fn branch(&self, b: Branch) -> &CondGan {
        match b {
            Branch::Low => &self.low,
            Branch::High => &self.high,
        }
    }
}

/// Real features of one domain in an episode.
#[derive(Clone, Copy, Debug)]
pub struct DomainReal<'a> {
    pub domain: Domain,
    pub ways: usize,
    /// Known-class support features, labels `0..ways`.
    pub support: &'a FeatureBatch,
    /// Pseudo-unknown query features.
    pub open_queries: &'a FeatureBatch,
}

/// Synthetic output for one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSynth {
    pub known: SynthBatch,
    pub unknown: SynthBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanStats {
    pub disc_low: f64,
    pub gen_low: f64,
    pub disc_high: f64,
    pub gen_high: f64,
    pub aocmc: f64,
}

/// Mean real support feature per known class (`ways × e`).
pub fn class_anchors(support: &FeatureBatch, ways: usize) -> Result<Mat> {
    let mut out = Mat::zeros((ways, support.dim()));
    let mut counts = vec![0usize; ways];
    for (i, &l) in support.labels.iter().enumerate() {
        if l >= ways {
            return Err(DafosError::InvalidArgument(format!("support label {l} outside 0..{ways}")));
        }
        let mut row = out.row_mut(l);
        row += &support.features.row(i);
        counts[l] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(DafosError::InsufficientSamples(format!("no real support feature for class {k}")));
        }
        out.row_mut(k).mapv_inplace(|v| v / c as f64);
    }
    Ok(out)
}

/// Conditioning layout of one fake batch: `per_class` rows for each class of
/// each domain, in domain-then-class order.
struct FakeLayout {
    domains: Vec<Domain>,
    anchors: Mat,
    labels: Vec<usize>,
}

fn fake_layout(anchors: &[(Domain, Mat)], per_class: usize) -> FakeLayout {
    let e = anchors[0].1.ncols();
    let rows: usize = anchors.iter().map(|(_, a)| a.nrows() * per_class).sum();
    let mut out = FakeLayout {
        domains: Vec::with_capacity(rows),
        anchors: Mat::zeros((rows, e)),
        labels: Vec::with_capacity(rows),
    };
    let mut r = 0;
    for (d, a) in anchors {
        for k in 0..a.nrows() {
            for _ in 0..per_class {
                out.anchors.row_mut(r).assign(&a.row(k));
                out.domains.push(*d);
                out.labels.push(k);
                r += 1;
            }
        }
    }
    out
}

struct RealSet {
    features: Mat,
    domains: Vec<Domain>,
    anchors: Mat,
}

fn real_set(reals: &[DomainReal], anchors: &[(Domain, Mat)], open: bool) -> RealSet {
    let e = anchors[0].1.ncols();
    let mut rows = Vec::new();
    for (r, (_, a)) in reals.iter().zip(anchors) {
        let batch = if open { r.open_queries } else { r.support };
        for i in 0..batch.len() {
            // Open-space reals carry no known class; cycle through the anchors.
            let k = if open { i % a.nrows() } else { batch.labels[i] };
            rows.push((r.domain, batch.features.row(i).to_owned(), a.row(k).to_owned()));
        }
    }
    let n = rows.len();
    let mut features = Mat::zeros((n, e));
    let mut anc = Mat::zeros((n, e));
    let mut domains = Vec::with_capacity(n);
    for (i, (d, f, a)) in rows.into_iter().enumerate() {
        features.row_mut(i).assign(&f);
        anc.row_mut(i).assign(&a);
        domains.push(d);
    }
    RealSet {
        features,
        domains,
        anchors: anc,
    }
}

/// One discriminator step followed by one generator step on a fast copy.
#[allow(clippy::too_many_arguments)]
fn adversarial_step(
    gan: &mut CondGan,
    d_opt: &mut Adam,
    g_opt: &mut Adam,
    real: &RealSet,
    fake: &FakeLayout,
    z: &Mat,
    aocmc: Option<(&Mat, &Mat, &Mat, f64, f64)>,
) -> Result<(f64, f64, f64)> {
    // Discriminator update on frozen generator output.
    let fake_values = gan.generate_values(z, &fake.domains, &fake.anchors);
    let mut tape = Tape::new();
    let dv = CondGan::bind_group(&mut tape, gan.disc_params(), true);
    let rf = tape.constant(real.features.clone());
    let rl = gan.discriminate(&mut tape, &dv, rf, &real.domains, &real.anchors);
    let ff = tape.constant(fake_values);
    let fl = gan.discriminate(&mut tape, &dv, ff, &fake.domains, &fake.anchors);
    let (_, d_loss) = adversarial_losses(&mut tape, rl, fl)?;
    let d_value = tape.scalar(d_loss);
    let grads = tape.backward(d_loss);
    let g = collect_grads(&grads, &dv, &gan.disc_params());
    d_opt.update(gan.disc_params_mut(), &g)?;

    // Generator update against the refreshed discriminator.
    let mut tape = Tape::new();
    let gv = CondGan::bind_group(&mut tape, gan.gen_params(), true);
    let dv = CondGan::bind_group(&mut tape, gan.disc_params(), false);
    let s = gan.generate(&mut tape, &gv, z, &fake.domains, &fake.anchors);
    let fl = gan.discriminate(&mut tape, &dv, s, &fake.domains, &fake.anchors);
    let rf = tape.constant(real.features.clone());
    let rl = gan.discriminate(&mut tape, &dv, rf, &real.domains, &real.anchors);
    let (g_loss, _) = adversarial_losses(&mut tape, rl, fl)?;
    let g_value = tape.scalar(g_loss);
    let mut a_value = 0.0;
    let objective = match aocmc {
        Some((z_l, z_h, s_l, eps, weight)) => {
            let a = aocmc_loss(&mut tape, z_l, z_h, s_l, s, eps)?;
            a_value = tape.scalar(a);
            let wa = tape.scale(a, weight);
            tape.add(g_loss, wa)
        }
        None => g_loss,
    };
    let grads = tape.backward(objective);
    let g = collect_grads(&grads, &gv, &gan.gen_params());
    g_opt.update(gan.gen_params_mut(), &g)?;
    Ok((d_value, g_value, a_value))
}

/// Trains both pairs on one episode's real features, applies the first-order
/// meta update and returns fresh synthetic batches from the updated weights.
///
/// Closed-space reals are the known support features; open-space reals are
/// the pseudo-unknown queries. `per_class` synthetic rows are produced for
/// every known class of every domain on both branches; row `i` of a domain's
/// unknown batch shares its anchor with row `i` of the known batch.
pub fn train_cgans_on_episode<R: Rng + ?Sized>(
    gans: &mut DualGan,
    reals: &[DomainReal],
    cfg: &GanConfig,
    per_class: usize,
    rng: &mut R,
) -> Result<(Vec<DomainSynth>, GanStats)> {
    cfg.validate()?;
    if reals.is_empty() || per_class == 0 {
        return Err(DafosError::InvalidArgument("train_cgans_on_episode: nothing to train on".into()));
    }
    let noise = cfg.noise();
    let anchors: Vec<(Domain, Mat)> = reals
        .iter()
        .map(|r| Ok((r.domain, class_anchors(r.support, r.ways)?)))
        .collect::<Result<_>>()?;
    for r in reals {
        if r.open_queries.is_empty() {
            return Err(DafosError::InsufficientSamples(format!(
                "no open-space real features in the {} domain",
                r.domain
            )));
        }
    }
    let fake = fake_layout(&anchors, per_class);
    let closed = real_set(reals, &anchors, false);
    let open = real_set(reals, &anchors, true);
    let n_fake = fake.labels.len();

    let mut stats = GanStats::default();
    if cfg.inner_steps > 0 {
        let adam = AdamConfig {
            lr: cfg.inner_lr,
            ..Default::default()
        };
        let mut low = gans.low.clone();
        let mut high = gans.high.clone();
        let mut opts = [
            Adam::new(adam, &low.disc_params()),
            Adam::new(adam, &low.gen_params()),
            Adam::new(adam, &high.disc_params()),
            Adam::new(adam, &high.gen_params()),
        ];
        for _ in 0..cfg.inner_steps {
            let (z_l, z_h) = paired_noise(n_fake, &noise, rng);
            let [dl, gl, dh, gh] = &mut opts;
            let (d_low, g_low, _) = adversarial_step(&mut low, dl, gl, &closed, &fake, &z_l, None)?;
            let s_l = low.generate_values(&z_l, &fake.domains, &fake.anchors);
            let reg = cfg.aocmc.then_some((&z_l, &z_h, &s_l, cfg.eps, cfg.aocmc_weight));
            let (d_high, g_high, a) = adversarial_step(&mut high, dh, gh, &open, &fake, &z_h, reg)?;
            let a = if cfg.aocmc {
                a
            } else {
                let s_h = high.generate_values(&z_h, &fake.domains, &fake.anchors);
                aocmc_value(&z_l, &z_h, &s_l, &s_h, cfg.eps)?
            };
            stats = GanStats {
                disc_low: d_low,
                gen_low: g_low,
                disc_high: d_high,
                gen_high: g_high,
                aocmc: a,
            };
        }
        meta_merge(&mut gans.low, &low, cfg.meta_step)?;
        meta_merge(&mut gans.high, &high, cfg.meta_step)?;
    }

    let (z_l, z_h) = paired_noise(n_fake, &noise, rng);
    let s_l = gans.low.generate_values(&z_l, &fake.domains, &fake.anchors);
    let s_h = gans.high.generate_values(&z_h, &fake.domains, &fake.anchors);
    let mut out = Vec::with_capacity(reals.len());
    let mut start = 0;
    for (d, a) in &anchors {
        let rows: Vec<usize> = (start..start + a.nrows() * per_class).collect();
        start += rows.len();
        let pick = |m: &Mat| Mat::from_shape_fn((rows.len(), m.ncols()), |(i, j)| m[[rows[i], j]]);
        let labels: Vec<usize> = rows.iter().map(|&r| fake.labels[r]).collect();
        out.push(DomainSynth {
            known: SynthBatch {
                batch: FeatureBatch::new(pick(&s_l), labels.clone(), *d, Provenance::SyntheticKnown),
                noise: pick(&z_l),
            },
            unknown: SynthBatch {
                batch: FeatureBatch::new(pick(&s_h), labels, *d, Provenance::SyntheticUnknown),
                noise: pick(&z_h),
            },
        });
    }
    Ok((out, stats))
}

fn meta_merge(slow: &mut CondGan, fast: &CondGan, step: f64) -> Result<()> {
    let merged = first_order_meta_update(&slow.snapshot(), &fast.snapshot(), step)?;
    for (p, m) in slow.params_mut().into_iter().zip(merged) {
        *p = m;
    }
    Ok(())
}

/// Low-branch features for every class of `anchors` in one domain, used to
/// augment test-time support sets.
pub fn synthesize_known<R: Rng + ?Sized>(
    gans: &DualGan,
    anchors: &Mat,
    domain: Domain,
    per_class: usize,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<SynthBatch> {
    let layout = fake_layout(&[(domain, anchors.clone())], per_class);
    let (z_l, _) = paired_noise(layout.labels.len(), noise, rng);
    let s = gans.low.generate_values(&z_l, &layout.domains, &layout.anchors);
    Ok(SynthBatch {
        batch: FeatureBatch::new(s, layout.labels, domain, Provenance::SyntheticKnown),
        noise: z_l,
    })
}

/// Mean `cos(s_l, s_h)` over freshly drawn noise pairs with
/// `cos(z_l, z_h) > threshold`, conditioned on `anchors` in `domain`.
/// Returns `(mean cosine, number of qualifying pairs)`.
pub fn collapse_probe<R: Rng + ?Sized>(
    gans: &DualGan,
    anchors: &Mat,
    domain: Domain,
    draws: usize,
    threshold: f64,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let layout = fake_layout(&[(domain, anchors.clone())], draws);
    let (z_l, z_h) = paired_noise(layout.labels.len(), noise, rng);
    let s_l = gans.low.generate_values(&z_l, &layout.domains, &layout.anchors);
    let s_h = gans.high.generate_values(&z_h, &layout.domains, &layout.anchors);
    let cz = row_cosines(&z_l, &z_h)?;
    let cs = row_cosines(&s_l, &s_h)?;
    let picked: Vec<f64> = cz
        .iter()
        .zip(&cs)
        .filter(|(z, _)| **z > threshold)
        .map(|(_, s)| *s)
        .collect();
    if picked.is_empty() {
        return Err(DafosError::InsufficientSamples("no noise pair passed the cosine threshold".into()));
    }
    Ok((picked.iter().sum::<f64>() / picked.len() as f64, picked.len()))
}
