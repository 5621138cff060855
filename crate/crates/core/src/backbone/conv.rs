//! Convolutional feature extractors built on gather-based im2col.
//!
//! Feature maps live on the tape as matrices whose rows enumerate
//! `(image, y, x)` in row-major order and whose columns are channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dsbn::{BatchNorm, BatchStats};
use crate::nn::Linear;
use crate::tape::{Mat, Tape, Var};

/// Spatial geometry of a feature map batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub images: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.images * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(k·k·c_in) × c_out`, rows ordered `(ky, kx, c_in)`.
    pub weight: Mat,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            weight: Linear::new(fan_in, out_channels, rng).weight,
            kernel,
            stride,
            padding: kernel / 2,
            in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_geometry(&self, g: Geometry) -> Geometry {
        let out = |s: usize| (s + 2 * self.padding - self.kernel) / self.stride + 1;
        Geometry {
            images: g.images,
            height: out(g.height),
            width: out(g.width),
        }
    }

    /// im2col gather index into the row-major element order of the input.
    fn patch_index(&self, g: Geometry) -> (Vec<Option<usize>>, Geometry) {
        let og = self.output_geometry(g);
        let (k, c) = (self.kernel, self.in_channels);
        let mut index = Vec::with_capacity(og.rows() * k * k * c);
        for b in 0..g.images {
            for oy in 0..og.height {
                for ox in 0..og.width {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            let inside =
                                iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width;
                            for ch in 0..c {
                                index.push(inside.then(|| {
                                    ((b * g.height + iy as usize) * g.width + ix as usize) * c + ch
                                }));
                            }
                        }
                    }
                }
            }
        }
        (index, og)
    }

    pub fn forward(&self, tape: &mut Tape, weight: Var, x: Var, g: Geometry) -> (Var, Geometry) {
        let (index, og) = self.patch_index(g);
        let cols = self.kernel * self.kernel * self.in_channels;
        let patches = tape.gather(x, index, (og.rows(), cols));
        (tape.matmul(patches, weight), og)
    }
}

/// Convolution followed by shared batch norm, optionally ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, rng),
            bn: BatchNorm::new(cout),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        vec![&self.conv.weight, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn forward(&self, tape: &mut Tape, cur: &mut Cursor, x: Var, g: Geometry, ctx: &mut Ctx, relu: bool) -> (Var, Geometry) {
        let (w, gamma, beta) = (cur.next(), cur.next(), cur.next());
        let (y, og) = self.conv.forward(tape, w, x, g);
        let (y, stats) = self.bn.forward(tape, gamma, beta, y, ctx.training, ctx.floor);
        ctx.stats.extend(stats);
        (if relu { tape.relu(y) } else { y }, og)
    }
}

/// Two 3×3 conv-bn layers with an identity or projected shortcut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub first: ConvBn,
    pub second: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBn::new(cin, cout, 3, stride, rng),
            second: ConvBn::new(cout, cout, 3, 1, rng),
            shortcut: (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng)),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.first.params_mut();
        p.extend(self.second.params_mut());
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }

    fn forward(&self, tape: &mut Tape, cur: &mut Cursor, x: Var, g: Geometry, ctx: &mut Ctx) -> (Var, Geometry) {
        let (h, og) = self.first.forward(tape, cur, x, g, ctx, true);
        let (h, _) = self.second.forward(tape, cur, h, og, ctx, false);
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, cur, x, g, ctx, false).0,
            None => x,
        };
        let sum = tape.add(h, skip);
        (tape.relu(sum), og)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvArch {
    /// Three stride-2 conv-bn-relu layers and a stride-2 output convolution.
    SmallConv,
    /// Stem plus four stages of two residual blocks each.
    Resnet18Like,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub arch: ConvArch,
    pub in_channels: usize,
    pub stem: Vec<ConvBn>,
    pub blocks: Vec<BasicBlock>,
    pub head: Option<Conv2d>,
}

struct Ctx {
    training: bool,
    floor: f64,
    stats: Vec<BatchStats>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl ConvNet {
    pub fn new<R: Rng + ?Sized>(arch: ConvArch, in_channels: usize, width: usize, embed: usize, rng: &mut R) -> Self {
        let w = width.max(1);
        match arch {
            ConvArch::SmallConv => {
                let widths = [w, 2 * w, 4 * w];
                let mut stem = Vec::new();
                let mut cin = in_channels;
                for &c in &widths {
                    stem.push(ConvBn::new(cin, c, 3, 2, rng));
                    cin = c;
                }
                Self {
                    arch,
                    in_channels,
                    stem,
                    blocks: Vec::new(),
                    head: Some(Conv2d::new(cin, embed, 3, 2, rng)),
                }
            }
            ConvArch::Resnet18Like => {
                let stem = vec![ConvBn::new(in_channels, w, 3, 2, rng)];
                let widths = [w, 2 * w, 4 * w, embed];
                let mut blocks = Vec::new();
                let mut cin = w;
                for (stage, &c) in widths.iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    blocks.push(BasicBlock::new(cin, c, stride, rng));
                    blocks.push(BasicBlock::new(c, c, 1, rng));
                    cin = c;
                }
                Self {
                    arch,
                    in_channels,
                    stem,
                    blocks,
                    head: None,
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut p: Vec<&Mat> = self.stem.iter().flat_map(ConvBn::params).collect();
        p.extend(self.blocks.iter().flat_map(BasicBlock::params));
        if let Some(h) = &self.head {
            p.push(&h.weight);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p: Vec<&mut Mat> = self.stem.iter_mut().flat_map(ConvBn::params_mut).collect();
        p.extend(self.blocks.iter_mut().flat_map(BasicBlock::params_mut));
        if let Some(h) = &mut self.head {
            p.push(&mut h.weight);
        }
        p
    }

    /// Internal batch norms in forward order.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out: Vec<&mut BatchNorm> = self.stem.iter_mut().map(|l| &mut l.bn).collect();
        for b in &mut self.blocks {
            out.push(&mut b.first.bn);
            out.push(&mut b.second.bn);
            if let Some(s) = &mut b.shortcut {
                out.push(&mut s.bn);
            }
        }
        out
    }

    /// Runs the network on `x` (rows `(image, y, x)`, columns channels) and
    /// global-average-pools to one row per image. In training mode the batch
    /// statistics of every internal norm are returned in forward order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        g: Geometry,
        training: bool,
        floor: f64,
    ) -> (Var, Vec<BatchStats>) {
        let mut ctx = Ctx {
            training,
            floor,
            stats: Vec::new(),
        };
        let mut cur = Cursor { vars, pos: 0 };
        let (mut h, mut geo) = (x, g);
        for layer in &self.stem {
            (h, geo) = layer.forward(tape, &mut cur, h, geo, &mut ctx, true);
        }
        for block in &self.blocks {
            (h, geo) = block.forward(tape, &mut cur, h, geo, &mut ctx);
        }
        if let Some(head) = &self.head {
            let w = cur.next();
            (h, geo) = head.forward(tape, w, h, geo);
        }
        debug_assert_eq!(cur.pos, vars.len(), "conv parameters not fully consumed");
        (tape.mean_row_groups(h, geo.height * geo.width), ctx.stats)
    }

    pub fn absorb(&mut self, stats: &[BatchStats], momentum: f64, floor: f64) {
        for (bn, s) in self.batch_norms_mut().into_iter().zip(stats) {
            bn.absorb(s, momentum, floor);
        }
    }
}
