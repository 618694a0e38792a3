//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every primitive applied to its variables. Scalars are
//! `1×1` matrices and vectors are single rows or columns. Apart from the
//! row-bias add and row tiling, shapes must match exactly; there is no
//! implicit broadcasting.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr { rows, cols, indptr, indices, values }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// `blocks` copies of this matrix along the diagonal.
    pub fn block_diag(&self, blocks: usize) -> Csr {
        let nnz = self.nnz();
        let mut indptr = Vec::with_capacity(self.rows * blocks + 1);
        let mut indices = Vec::with_capacity(nnz * blocks);
        let mut values = Vec::with_capacity(nnz * blocks);
        indptr.push(0);
        for b in 0..blocks {
            for r in 0..self.rows {
                for (c, v) in self.row(r) {
                    indices.push(c + b * self.cols);
                    values.push(v);
                }
                indptr.push(indices.len());
            }
        }
        Csr { rows: self.rows * blocks, cols: self.cols * blocks, indptr, indices, values }
    }

    /// `self · x`
    pub fn matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.cols, x.nrows(), "sparse matmul shape");
        let k = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.rows * k];
        for (r, o) in out.chunks_exact_mut(k.max(1)).enumerate().take(self.rows) {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[idx], self.values[idx]);
                for (o, x) in o.iter_mut().zip(&xs[c * k..(c + 1) * k]) {
                    *o += v * x;
                }
            }
        }
        Matrix::from_shape_vec((self.rows, k), out).expect("sized above")
    }

    /// `selfᵀ · g`
    pub fn t_matmul(&self, g: &Matrix) -> Matrix {
        assert_eq!(self.rows, g.nrows(), "sparse transpose matmul shape");
        let k = g.ncols();
        let g = g.as_standard_layout();
        let gs = g.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.cols * k];
        for r in 0..self.rows {
            let g_row = &gs[r * k..(r + 1) * k];
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[idx], self.values[idx]);
                for (o, x) in out[c * k..(c + 1) * k].iter_mut().zip(g_row) {
                    *o += v * x;
                }
            }
        }
        Matrix::from_shape_vec((self.cols, k), out).expect("sized above")
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddTiled(Var, Var),
    TileRows(Var, usize),
    ConcatCols(Var, Var),
    Scale(Var, f64),
    Mean(Var),
    Sum(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    L1(Var),
    Dropout(Var, Matrix),
    SpMM(Arc<Csr>, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded variable that
/// requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Sign pattern (input > 0) of every recorded ReLU, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Scalar value of a `1×1` variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).as_standard_layout().into_owned();
        value += self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut value = self.value(a).as_standard_layout().into_owned();
        let brow = self.value(bias).row(0).to_vec();
        for row in value.as_slice_mut().expect("standard layout").chunks_exact_mut(brow.len().max(1)) {
            for (x, y) in row.iter_mut().zip(&brow) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    /// `a + tile_rows(b, rows(a)/rows(b))` without materialising the tiling.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 == 0 || sa.1 != sb.1 || sa.0 % sb.0 != 0 {
            return Err(shape_err("add_tiled", sa, sb));
        }
        let mut value = self.value(a).as_standard_layout().into_owned();
        let bv = self.value(b).as_standard_layout();
        let bs = bv.as_slice().expect("standard layout");
        for chunk in value.as_slice_mut().expect("standard layout").chunks_exact_mut(bs.len().max(1)) {
            for (x, y) in chunk.iter_mut().zip(bs) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddTiled(a, b), rg))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Dimension("tile_rows: zero copies".into()));
        }
        if times == 1 {
            return Ok(a);
        }
        let src = self.value(a);
        let views: Vec<_> = (0..times).map(|_| src.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("identical widths");
        let rg = self.rg(a);
        Ok(self.push(value, Op::TileRows(a, times), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(shape_err("concat", sa, sb));
        }
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("rows checked");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_elem((1, 1), m.sum() / m.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, crate::scm::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, crate::scm::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Σ|a|.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).iter().map(|x| x.abs()).sum());
        let rg = self.rg(a);
        self.push(value, Op::L1(a), rg)
    }

    /// Inverted dropout: each entry is zeroed with probability `rate` and
    /// survivors are scaled by `1/(1−rate)`. `rate == 0` returns `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(a);
        let mask = Matrix::from_shape_simple_fn(shape, || if rng.gen::<f64>() < rate { 0.0 } else { keep });
        Ok(self.dropout_with_mask(a, mask))
    }

    /// Applies a precomputed multiplicative mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Matrix) -> Var {
        debug_assert_eq!(mask.dim(), self.shape(a));
        let mut value = self.value(a).as_standard_layout().into_owned();
        value *= &mask;
        let rg = self.rg(a);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// `sparse · a` with a constant sparse left operand.
    pub fn spmm(&mut self, sparse: Arc<Csr>, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sparse.cols != sa.0 {
            return Err(shape_err("spmm", sparse.shape(), sa));
        }
        let value = sparse.matmul(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(value, Op::SpMM(sparse, a), rg))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss variable is not on this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        if !self.rg(loss) {
            return Err(Error::Usage("loss does not depend on any variable that requires gradients".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Matrix>>, v: Var, contrib: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, -&g);
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        send(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        send(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(&mut grads, *a, g);
                }
                Op::TileRows(a, times) => {
                    let rows = self.shape(*a).0;
                    let mut acc = Matrix::zeros(self.shape(*a));
                    for t in 0..*times {
                        acc += &g.slice(ndarray::s![t * rows..(t + 1) * rows, ..]);
                    }
                    send(&mut grads, *a, acc);
                }
                Op::AddTiled(a, b) => {
                    if self.rg(*b) {
                        let rows = self.shape(*b).0;
                        let mut acc = Matrix::zeros(self.shape(*b));
                        for t in 0..g.nrows() / rows {
                            acc += &g.slice(ndarray::s![t * rows..(t + 1) * rows, ..]);
                        }
                        send(&mut grads, *b, acc);
                    }
                    send(&mut grads, *a, g);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(*a).1;
                    send(&mut grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                    send(&mut grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
                }
                Op::Scale(a, c) => send(&mut grads, *a, g * *c),
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    send(&mut grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
                Op::Sum(a) => send(&mut grads, *a, Matrix::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(&mut grads, *a, Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = g;
                    Zip::from(&mut g).and(x).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    send(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, Zip::from(&g).and(x).map_collect(|&g, &x| g * crate::scm::sigmoid(x)));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, Zip::from(&g).and(x).map_collect(|&g, &x| 2.0 * g * x));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    send(&mut grads, *a, Zip::from(&g).and(y).map_collect(|&g, &y| g * 0.5 / y));
                }
                Op::L1(a) => {
                    let x = self.value(*a);
                    let g0 = g[[0, 0]];
                    send(&mut grads, *a, x.mapv(|x| g0 * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
                }
                Op::Dropout(a, mask) => {
                    let mut g = g;
                    g *= mask;
                    send(&mut grads, *a, g)
                }
                Op::SpMM(sparse, a) => send(&mut grads, *a, sparse.t_matmul(&g)),
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            config,
            step: 0,
            first: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.dim() != m.dim() || g.dim() != m.dim() {
                return Err(shape_err("adam", p.dim(), g.dim()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            Zip::from(&mut **p).and(*g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    #[test]
    fn primitive_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros((1, 1)));
        let s = t.sigmoid(z);
        let sp = t.softplus(z);
        assert_eq!(t.scalar(s), 0.5);
        assert_abs_diff_eq!(t.scalar(sp), 0.693147, epsilon = 1e-6);
        let x = t.constant(array![[1.0, -2.0]]);
        let mut r = rng::stream(0, "t", &[]);
        assert_eq!(t.dropout(x, 0.0, &mut r).unwrap(), x);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(array![[1.0, 2.0]]);
        let sq = t.square(x);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros((1, 1)));
        let one = t.constant(Matrix::ones((1, 1)));
        let wx = t.matmul(w, one).unwrap();
        let loss = t.sigmoid(wx);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::ones((1, 1)));
        assert!(matches!(t.backward(c), Err(Error::Usage(_))));
        let p = t.param(Matrix::ones((2, 1)));
        assert!(matches!(t.backward(p), Err(Error::Usage(_))));
        assert!(matches!(t.backward(Var(99)), Err(Error::Usage(_))));
        assert!(matches!(t.add(c, p), Err(Error::Dimension(_))));
        assert!(matches!(t.matmul(p, p), Err(Error::Dimension(_))));
    }

    /// Builds a random composition of every primitive and returns (tape, loss, leaves).
    fn composite(tape: &mut Tape, inputs: &[Matrix], mask_seed: u64) -> Var {
        let x = tape.param(inputs[0].clone()); // 4x3
        let w = tape.param(inputs[1].clone()); // 3x5
        let b = tape.param(inputs[2].clone()); // 1x5
        let s = tape.param(inputs[3].clone()); // 4x1
        let sparse = Arc::new(Csr::from_triplets(
            3,
            4,
            vec![(0, 0, 0.5), (0, 1, 0.5), (1, 1, 1.0), (2, 2, 0.3), (2, 3, 0.7), (1, 3, -0.2)],
        ));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add_row(h, b).unwrap();
        let h = tape.relu(h);
        let mut r = rng::stream(mask_seed, "mask", &[]);
        let h = tape.dropout(h, 0.3, &mut r).unwrap();
        let hs = tape.concat_cols(h, s).unwrap(); // 4x6
        let p = tape.spmm(sparse, hs).unwrap(); // 3x6
        let q = tape.softplus(p);
        let q2 = tape.sigmoid(p);
        let q = tape.mul(q, q2).unwrap();
        let tiled = tape.tile_rows(q, 2).unwrap();
        let tiled = tape.add_tiled(tiled, q).unwrap();
        let sq = tape.square(tiled);
        let m = tape.mean(sq);
        let l1 = tape.l1_norm(s);
        let l1 = tape.scale(l1, 0.1);
        let total = tape.add(m, l1).unwrap();
        let sum_q = tape.sum(q);
        let sum_q = tape.square(sum_q);
        let eps = tape.constant(Matrix::from_elem((1, 1), 1.0));
        let root_in = tape.add(sum_q, eps).unwrap();
        let root = tape.sqrt(root_in);
        tape.sub(total, root).unwrap()
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let shapes = [(4, 3), (3, 5), (1, 5), (4, 1)];
        for trial in 0..100u64 {
            let mut r = rng::stream(trial, "fd", &[]);
            // keep |s| away from zero so the l1 kink is not crossed
            let mut inputs: Vec<Matrix> = shapes.iter().map(|&(a, b)| randn(a, b, &mut r)).collect();
            inputs[3].mapv_inplace(|v| if v.abs() < 0.05 { 0.5 } else { v });
            let mut tape = Tape::new();
            let loss = composite(&mut tape, &inputs, trial);
            let grads = tape.backward(loss).unwrap();
            let h = 1e-4;
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for (k, input) in inputs.iter().enumerate() {
                let g = grads.get(Var(k)).unwrap();
                for idx in 0..input.len() {
                    let eval = |delta: f64| {
                        let mut pert = inputs.clone();
                        pert[k].as_slice_mut().unwrap()[idx] += delta;
                        let mut t = Tape::new();
                        let l = composite(&mut t, &pert, trial);
                        t.scalar(l)
                    };
                    num.push((eval(h) - eval(-h)) / (2.0 * h));
                    ana.push(g.as_slice().unwrap()[idx]);
                }
            }
            let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff / scale.max(1e-12) < 1e-4, "trial {trial}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut r = rng::stream(1, "lin", &[]);
        let x0 = randn(3, 2, &mut r);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let f = t.softplus(x);
            let f = t.sum(f);
            let g = t.square(x);
            let g = t.mean(g);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            let l = t.add(fa, gb).unwrap();
            t.backward(l).unwrap().take(x).unwrap()
        };
        let combo = grad_of(2.0, -3.0);
        let sep = grad_of(1.0, 0.0) * 2.0 + grad_of(0.0, 1.0) * -3.0;
        for (a, b) in combo.iter().zip(sep.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_is_reproducible_and_unbiased() {
        let x = Matrix::from_elem((1, 200), 2.0);
        let run = |seed: u64| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let mut r = rng::stream(seed, "drop", &[]);
            let d = t.dropout(v, 0.3, &mut r).unwrap();
            t.value(d).clone()
        };
        assert_eq!(run(4), run(4));
        let mean: f64 = (0..400).map(|s| run(s).mean().unwrap()).sum::<f64>() / 400.0;
        assert_abs_diff_eq!(mean, 2.0, epsilon = 0.02);
    }

    #[test]
    fn csr_dense_agreement() {
        let a = Csr::from_triplets(2, 3, vec![(0, 2, 1.5), (1, 0, -1.0), (0, 2, 0.5)]);
        assert_eq!(a.to_dense(), array![[0.0, 0.0, 2.0], [-1.0, 0.0, 0.0]]);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(a.matmul(&x), a.to_dense().dot(&x));
        let g = array![[1.0, 0.5], [2.0, -1.0]];
        assert_eq!(a.t_matmul(&g), a.to_dense().t().dot(&g));
        let bd = a.block_diag(2).to_dense();
        assert_eq!(bd.dim(), (4, 6));
        assert_eq!(bd[[2, 5]], 2.0);
        assert_eq!(bd[[0, 5]], 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_counts_steps() {
        let mut p = array![[0.5, -1.0]];
        let g = Matrix::zeros((1, 2));
        let mut st = AdamState::new(AdamConfig::default(), &[(1, 2)]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, array![[0.5, -1.0]]);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut p = array![[0.0]];
        let mut st = AdamState::new(AdamConfig::default(), &[(1, 1)]);
        st.step(&mut [&mut p], &[&array![[1.0]]]).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], -0.001 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_weight_decay_enters_gradient() {
        let mut p = array![[2.0]];
        let cfg = AdamConfig { weight_decay: 0.5, ..AdamConfig::default() };
        let mut st = AdamState::new(cfg, &[(1, 1)]);
        st.step(&mut [&mut p], &[&array![[0.0]]]).unwrap();
        assert!(p[[0, 0]] < 2.0);
    }
}
