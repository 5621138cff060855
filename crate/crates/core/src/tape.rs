//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Scalars are `1×1`. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node list
//! is a valid topological traversal.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MeanRowGroups(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<Option<usize>>),
    SqDist(Var, Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Normalize { x: Var, inv_std: Mat },
    CosineRows(Var, Var),
    Norm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or a zero matrix of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn scalar(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×c row");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `a (n×c) ⊙ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "mul_row expects a 1×c row");
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = scalar(m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Column means: `n×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Averages consecutive blocks of `group` rows: `(n·group)×c → n×c`.
    pub fn mean_row_groups(&mut self, a: Var, group: usize) -> Var {
        let m = self.value(a);
        assert!(group > 0 && m.nrows().is_multiple_of(group), "rows not divisible by group");
        let n = m.nrows() / group;
        let mut v = Mat::zeros((n, m.ncols()));
        for i in 0..n {
            let block = m.slice(s![i * group..(i + 1) * group, ..]);
            v.row_mut(i).assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        let rg = self.rg(a);
        self.push(v, Op::MeanRowGroups(a, group), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Builds a `rows×cols` matrix whose entry `r*cols + c` is the row-major
    /// element `index[r*cols + c]` of `src`, or zero for `None`.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather index/shape mismatch");
        let flat: Vec<f64> = {
            let m = self.value(src);
            let cols = m.ncols();
            index
                .iter()
                .map(|i| i.map_or(0.0, |i| m[[i / cols, i % cols]]))
                .collect()
        };
        let v = Mat::from_shape_vec(shape, flat).expect("gather shape");
        let rg = self.rg(src);
        self.push(v, Op::Gather(src, index), rg)
    }

    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let cols = self.value(src).ncols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c)))
            .collect();
        self.gather(src, index, (rows.len(), cols))
    }

    /// Pairwise squared Euclidean distances: `a (n×d), b (m×d) → n×m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.ncols(), bm.ncols(), "sq_dist dimension mismatch");
        let mut v = Mat::zeros((am.nrows(), bm.nrows()));
        for (i, ar) in am.outer_iter().enumerate() {
            for (j, br) in bm.outer_iter().enumerate() {
                v[[i, j]] = ar
                    .iter()
                    .zip(br.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::SqDist(a, b), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.outer_iter_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Picks column `cols[i]` of row `i`: `n×c → n×1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.nrows(), cols.len(), "pick expects one column per row");
        let v = Mat::from_shape_fn((cols.len(), 1), |(i, _)| m[[i, cols[i]]]);
        let rg = self.rg(a);
        self.push(v, Op::Pick(a, cols.to_vec()), rg)
    }

    /// Column-wise standardization with batch statistics:
    /// `(x - mean) / sqrt(var + floor)`, population variance.
    /// Returns the normalized node together with the batch mean and variance.
    pub fn normalize_cols(&mut self, x: Var, floor: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let m = self.value(x);
        let n = m.nrows() as f64;
        let mean = m.mean_axis(Axis(0)).expect("normalize_cols on empty batch");
        let centered = m - &mean;
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + floor).sqrt());
        let v = &centered * &inv_std;
        let rg = self.rg(x);
        let node = self.push(
            v,
            Op::Normalize {
                x,
                inv_std: inv_std.clone().insert_axis(Axis(0)),
            },
            rg,
        );
        (node, mean.to_vec(), var.to_vec())
    }

    /// Row-wise cosine similarity of two equally shaped matrices: `n×d → n×1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.dim(), bm.dim(), "cosine_rows shape mismatch");
        let v = Mat::from_shape_fn((am.nrows(), 1), |(i, _)| {
            let (ar, br) = (am.row(i), bm.row(i));
            ar.dot(&br) / (ar.dot(&ar).sqrt() * br.dot(&br).sqrt())
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::CosineRows(a, b), rg)
    }

    /// Frobenius norm `→ 1×1`. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).mapv(|x| x * x).sum().sqrt());
        let rg = self.rg(a);
        self.push(v, Op::Norm(a), rg)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    if self.rg(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    Zip::from(&mut ga).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => acc(&mut grads, *a, &g * &val.mapv(|t| 1.0 - t * t)),
                Op::Softplus(a) => acc(&mut grads, *a, &g * &self.value(*a).mapv(sigmoid)),
                Op::Log(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Sum(a) => {
                    let shape = self.value(*a).dim();
                    acc(&mut grads, *a, Mat::from_elem(shape, g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let m = self.value(*a);
                    acc(&mut grads, *a, Mat::from_elem(m.dim(), g[[0, 0]] / m.len() as f64));
                }
                Op::MeanRows(a) => {
                    let m = self.value(*a);
                    let n = m.nrows() as f64;
                    let mut ga = Mat::zeros(m.dim());
                    ga.assign(&(&g / n));
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRowGroups(a, group) => {
                    let m = self.value(*a);
                    let mut ga = Mat::zeros(m.dim());
                    for (r, mut row) in ga.outer_iter_mut().enumerate() {
                        row.assign(&(&g.row(r / group) / *group as f64));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                        }
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).ncols();
                        if self.rg(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + c]).to_owned());
                        }
                        start += c;
                    }
                }
                Op::Gather(src, index) => {
                    let m = self.value(*src);
                    let cols = m.ncols();
                    let mut gs = Mat::zeros(m.dim());
                    for (gv, i) in g.iter().zip(index) {
                        if let Some(i) = i {
                            gs[[i / cols, i % cols]] += gv;
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::SqDist(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let ga = (am * &row_sum - g.dot(bm)) * 2.0;
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                        let gb = (bm * &col_sum - g.t().dot(am)) * 2.0;
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let soft = val.mapv(f64::exp);
                    let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(&soft * &row_sum));
                }
                Op::Pick(a, cols) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (i, &c) in cols.iter().enumerate() {
                        ga[[i, c]] = g[[i, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Normalize { x, inv_std } => {
                    // val holds x̂; dx = inv/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                    let n = val.nrows() as f64;
                    let sum_g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let sum_gx = (&g * val).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gx = (&g * n - &sum_g - &(val * &sum_gx)) * inv_std / n;
                    acc(&mut grads, *x, gx);
                }
                Op::CosineRows(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut ga = Mat::zeros(am.dim());
                    let mut gb = Mat::zeros(bm.dim());
                    for i in 0..am.nrows() {
                        let (ar, br) = (am.row(i), bm.row(i));
                        let (na, nb) = (ar.dot(&ar).sqrt(), br.dot(&br).sqrt());
                        let c = val[[i, 0]];
                        let gi = g[[i, 0]];
                        let da = (&br / (na * nb) - &(&ar * (c / (na * na)))) * gi;
                        let db = (&ar / (na * nb) - &(&br * (c / (nb * nb)))) * gi;
                        ga.row_mut(i).assign(&da);
                        gb.row_mut(i).assign(&db);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Norm(a) => {
                    let nrm = val[[0, 0]];
                    let x = self.value(*a);
                    let ga = if nrm > 0.0 {
                        x * (g[[0, 0]] / nrm)
                    } else {
                        Mat::zeros(x.dim())
                    };
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}
