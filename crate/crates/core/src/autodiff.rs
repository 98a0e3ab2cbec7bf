//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array. Batched quantities are stored with
//! one sample per row. The tape is rebuilt for every forward pass, which keeps
//! evaluation a pure function of its inputs.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a strided 2-D convolution without padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Reshape(Var),
    /// `X = E (I - A)^{-1}`; carries the precomputed inverse.
    SolveRight(Var, Var, Array2<f64>),
    /// `tr(exp(A ∘ A)) - d`; carries `exp(A ∘ A)`.
    TraceExpHadamard(Var, Array2<f64>),
    Conv2d(Var, Var, Var, ConvShape),
}

/// A single-use computation tape.
pub struct Graph {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].dot(&self.values[b.0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.values[a.0] + &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.values[a.0] - &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.values[a.0] * &self.values[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: shape mismatch");
        let value = &self.values[a.0] + &self.values[row.0];
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a ∘ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: shape mismatch");
        let value = &self.values[a.0] * &self.values[row.0];
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a ∘ col` with `col` broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col: shape mismatch");
        let value = &self.values[a.0] * &self.values[col.0];
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.values[a.0] + c;
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::ln);
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    /// `max(0, c - a)` elementwise.
    pub fn hinge(&mut self, a: Var, c: f64) -> Var {
        let neg = self.scale(a, -1.0);
        let shifted = self.add_scalar(neg, c);
        self.relu(shifted)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.values[a.0].sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::MeanAll(a), ng)
    }

    /// Per-row sum, producing an `n × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Per-row squared Euclidean norm of `a - b`, as an `n × 1` column.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.row_sum(sq)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for &p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.nrows(), rows, "concat_cols: row mismatch");
            value
                .slice_mut(s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.values[a.0].slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.values[a.0];
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Sums row `r` of `a` into output row `idx[r]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.nrows(), idx.len(), "scatter_add_rows: index length");
        let mut value = Array2::zeros((n_out, src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut row = value.row_mut(i);
            row += &src.row(r);
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterAddRows(a, idx.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// `E (I - A)^{-1}` given a precomputed `(I - A)^{-1}`.
    ///
    /// With samples as rows this is the linear structural pass
    /// `x = (I - Aᵀ)^{-1} e` applied to every sample.
    pub fn solve_right(&mut self, e: Var, a: Var, inv: Array2<f64>) -> Var {
        let value = self.values[e.0].dot(&inv);
        let ng = self.ng(e) || self.ng(a);
        self.push(value, Op::SolveRight(e, a, inv), ng)
    }

    /// `tr(exp(A ∘ A)) - d` as a `1 × 1` value.
    pub fn trace_exp_hadamard(&mut self, a: Var) -> Var {
        let av = &self.values[a.0];
        let d = av.nrows();
        let e = crate::linalg::expm(&av.mapv(|x| x * x));
        let tr: f64 = (0..d).map(|i| e[[i, i]]).sum();
        let value = Array2::from_elem((1, 1), tr - d as f64);
        let ng = self.ng(a);
        self.push(value, Op::TraceExpHadamard(a, e), ng)
    }

    /// Strided convolution. `x` is `B × (C·H·W)` laid out channel-major,
    /// `w` is `O × (C·k·k)`, `b` is `1 × O`; output is `B × (O·Ho·Wo)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Var {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let bv = &self.values[b.0];
        let (ho, wo) = (shape.out_height(), shape.out_width());
        let positions = ho * wo;
        let batch = xv.nrows();
        let mut out = Array2::zeros((batch, shape.out_channels * positions));
        for n in 0..batch {
            let patches = im2col(xv.row(n).as_slice().expect("contiguous"), &shape);
            let res = patches.dot(&wv.t()); // positions × O
            let mut row = out.row_mut(n);
            for o in 0..shape.out_channels {
                for p in 0..positions {
                    row[o * positions + p] = res[[p, o]] + bv[[0, o]];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Conv2d(x, w, b, shape), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let n = self.values.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.values[v.0];
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.needs_grad[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * val(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    acc(*a, g * val(*row));
                }
                if self.ng(*row) {
                    acc(*row, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.ng(*a) {
                    acc(*a, g * val(*col));
                }
                if self.ng(*col) {
                    acc(*col, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                acc(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                acc(*a, g * &y.mapv(|t| t * (1.0 - t)));
            }
            Op::Exp(a) => acc(*a, g * &self.values[i]),
            Op::Log(a) => acc(*a, g / &self.values[a.0]),
            Op::Square(a) => acc(*a, g * &(val(*a) * 2.0)),
            Op::SumAll(a) => {
                let gs = g[[0, 0]];
                acc(*a, Array2::from_elem(val(*a).dim(), gs));
            }
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                let gs = g[[0, 0]] / n;
                acc(*a, Array2::from_elem(val(*a).dim(), gs));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).dim();
                let mut d = Array2::zeros((r, c));
                for (mut row, gv) in d.rows_mut().into_iter().zip(g.column(0).iter()) {
                    row.fill(*gv);
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).ncols();
                    if self.ng(p) {
                        acc(p, g.slice(s![.., offset..offset + c]).to_owned());
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                let c = g.ncols();
                d.slice_mut(s![.., *start..*start + c]).assign(g);
                acc(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(r);
                }
                acc(*a, d);
            }
            Op::ScatterAddRows(a, idx) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (r, &dst) in idx.iter().enumerate() {
                    d.row_mut(r).assign(&g.row(dst));
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let d = Array2::from_shape_vec(val(*a).dim(), flat).expect("reshape grad");
                acc(*a, d);
            }
            Op::SolveRight(e, a, inv) => {
                let ge = g.dot(&inv.t());
                if self.ng(*a) {
                    let x = &self.values[i];
                    acc(*a, x.t().dot(&ge));
                }
                if self.ng(*e) {
                    acc(*e, ge);
                }
            }
            Op::TraceExpHadamard(a, e) => {
                let gs = g[[0, 0]];
                let d = &e.t() * &(val(*a) * (2.0 * gs));
                acc(*a, d);
            }
            Op::Conv2d(x, w, b, shape) => {
                let positions = shape.out_height() * shape.out_width();
                let xv = val(*x);
                let wv = val(*w);
                let batch = xv.nrows();
                let mut gw = Array2::zeros(wv.dim());
                let mut gb = Array2::zeros((1, shape.out_channels));
                let mut gx = Array2::zeros(xv.dim());
                for n in 0..batch {
                    // positions × O view of this sample's output gradient
                    let mut go = Array2::zeros((positions, shape.out_channels));
                    for o in 0..shape.out_channels {
                        for p in 0..positions {
                            go[[p, o]] = g[[n, o * positions + p]];
                        }
                    }
                    if self.ng(*b) {
                        gb += &go.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                    if self.ng(*w) {
                        let patches =
                            im2col(xv.row(n).as_slice().expect("contiguous"), shape);
                        gw += &go.t().dot(&patches);
                    }
                    if self.ng(*x) {
                        let gp = go.dot(wv);
                        col2im_add(&gp, shape, gx.row_mut(n).as_slice_mut().expect("contiguous"));
                    }
                }
                if self.ng(*w) {
                    acc(*w, gw);
                }
                if self.ng(*b) {
                    acc(*b, gb);
                }
                if self.ng(*x) {
                    acc(*x, gx);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], sh: &ConvShape) -> Array2<f64> {
    let (ho, wo) = (sh.out_height(), sh.out_width());
    let k = sh.kernel;
    let mut patches = Array2::zeros((ho * wo, sh.patch_len()));
    for oy in 0..ho {
        for ox in 0..wo {
            let p = oy * wo + ox;
            let mut col = 0;
            for c in 0..sh.in_channels {
                let base = c * sh.height * sh.width;
                for ky in 0..k {
                    let row_off = base + (oy * sh.stride + ky) * sh.width + ox * sh.stride;
                    for kx in 0..k {
                        patches[[p, col]] = x[row_off + kx];
                        col += 1;
                    }
                }
            }
        }
    }
    patches
}

fn col2im_add(gp: &Array2<f64>, sh: &ConvShape, out: &mut [f64]) {
    let (ho, wo) = (sh.out_height(), sh.out_width());
    let k = sh.kernel;
    for oy in 0..ho {
        for ox in 0..wo {
            let p = oy * wo + ox;
            let mut col = 0;
            for c in 0..sh.in_channels {
                let base = c * sh.height * sh.width;
                for ky in 0..k {
                    let row_off = base + (oy * sh.stride + ky) * sh.width + ox * sh.stride;
                    for kx in 0..k {
                        out[row_off + kx] += gp[[p, col]];
                        col += 1;
                    }
                }
            }
        }
    }
}
