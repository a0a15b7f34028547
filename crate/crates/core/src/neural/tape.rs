//! Dense matrices and a reverse-mode tape over them.

use serde::{Deserialize, Serialize};

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

/// `A * B`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (ov, bv) in o.iter_mut().zip(b.row(k)) {
                *ov += aik * bv;
            }
        }
    }
    out
}

/// `A * B^T`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A^T * B`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, bv) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn block(m: &Mat, g: usize, n: usize) -> Mat {
    Mat::from_vec(n, m.cols, m.data[g * n * m.cols..(g + 1) * n * m.cols].to_vec())
}

fn put_block(dst: &mut Mat, g: usize, n: usize, src: &Mat) {
    dst.data[g * n * dst.cols..(g + 1) * n * dst.cols].copy_from_slice(&src.data);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    GroupMatMulNt(Var, Var, usize),
    GroupMatMul(Var, Var, usize),
    GroupMeanRows(Var, usize),
    Mae(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shape");
        let mut v = x.clone();
        for chunk in v.data.chunks_mut(x.cols) {
            for (c, b) in chunk.iter_mut().zip(&r.data) {
                *c += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape");
        let mut v = x.clone();
        for chunk in v.data.chunks_mut(x.cols) {
            for (c, g) in chunk.iter_mut().zip(&r.data) {
                *c *= g;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows * width);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let v = Mat::from_vec(x.rows, width, data);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows, "concat_cols rows");
                data.extend_from_slice(m.row(r));
            }
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for chunk in v.data.chunks_mut(cols) {
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in chunk.iter_mut() {
                *c = (*c - max).exp();
                sum += *c;
            }
            for c in chunk.iter_mut() {
                *c /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Zero-mean, unit-variance rows (no gain or bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        let mut inv_std = Vec::with_capacity(v.rows);
        for chunk in v.data.chunks_mut(cols) {
            let mean = chunk.iter().sum::<f64>() / cols as f64;
            let var = chunk.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in chunk.iter_mut() {
                *c = (*c - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(v, Op::LayerNorm { x: a, inv_std })
    }

    /// Per group of `n` rows: `A_g * B_g^T`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, n: usize) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.rows == y.rows && x.rows % n == 0 && x.cols == y.cols, "group_matmul_nt shape");
        let groups = x.rows / n;
        let mut out = Mat::zeros(x.rows, n);
        for g in 0..groups {
            put_block(&mut out, g, n, &matmul_nt(&block(x, g, n), &block(y, g, n)));
        }
        self.push(out, Op::GroupMatMulNt(a, b, n))
    }

    /// Per group of `n` rows: `A_g * B_g`, with `A_g` square.
    pub fn group_matmul(&mut self, a: Var, b: Var, n: usize) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.rows == y.rows && x.rows % n == 0 && x.cols == n, "group_matmul shape");
        let groups = x.rows / n;
        let mut out = Mat::zeros(x.rows, y.cols);
        for g in 0..groups {
            put_block(&mut out, g, n, &matmul(&block(x, g, n), &block(y, g, n)));
        }
        self.push(out, Op::GroupMatMul(a, b, n))
    }

    /// Mean of each group of `n` consecutive rows.
    pub fn group_mean_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert!(x.rows % n == 0, "group_mean_rows shape");
        let groups = x.rows / n;
        let mut out = Mat::zeros(groups, x.cols);
        for r in 0..x.rows {
            let g = r / n;
            for (o, v) in out.data[g * x.cols..(g + 1) * x.cols].iter_mut().zip(x.row(r)) {
                *o += v / n as f64;
            }
        }
        self.push(out, Op::GroupMeanRows(a, n))
    }

    /// Mean absolute error against a constant target, as a `1 x 1` value.
    pub fn mae(&mut self, pred: Var, target: Mat) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mae shape");
        let loss = p.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.data.len() as f64;
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::Mae(pred, target))
    }

    /// Gradients of the scalar `out` with respect to every recorded value.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let seed = self.value(out);
        grads[out.0] = Some(Mat::filled(seed.rows, seed.cols, 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, matmul_nt(&g, self.value(*b)));
                    acc(*b, matmul_tn(self.value(*a), &g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_with(self.value(*b), |d, y| d * y));
                    acc(*b, g.zip_with(self.value(*a), |d, x| d * x));
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.col_sums());
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut da = g.clone();
                    for chunk in da.data.chunks_mut(g.cols) {
                        for (c, w) in chunk.iter_mut().zip(&r.data) {
                            *c *= w;
                        }
                    }
                    acc(*row, g.zip_with(x, |d, v| d * v).col_sums());
                    acc(*a, da);
                }
                Op::Scale(a, s) => acc(*a, g.map(|d| d * s)),
                Op::Sigmoid(a) => acc(*a, g.zip_with(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Tanh(a) => acc(*a, g.zip_with(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, g.zip_with(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        da.data[r * src.cols + start..r * src.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut data = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*p, Mat::from_vec(g.rows, w, data));
                        offset += w;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for c in 0..y.cols {
                            da.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(*a, da);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let n = xhat.cols as f64;
                    let mut dx = Mat::zeros(xhat.rows, xhat.cols);
                    for r in 0..xhat.rows {
                        let (xr, gr) = (xhat.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = gr.iter().zip(xr).map(|(d, v)| d * v).sum::<f64>() / n;
                        for c in 0..xhat.cols {
                            dx.data[r * xhat.cols + c] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    acc(*x, dx);
                }
                Op::GroupMatMulNt(a, b, n) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(x.rows, x.cols);
                    let mut db = Mat::zeros(y.rows, y.cols);
                    for grp in 0..x.rows / n {
                        let gb = block(&g, grp, *n);
                        put_block(&mut da, grp, *n, &matmul(&gb, &block(y, grp, *n)));
                        put_block(&mut db, grp, *n, &matmul_tn(&gb, &block(x, grp, *n)));
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::GroupMatMul(a, b, n) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let mut da = Mat::zeros(x.rows, x.cols);
                    let mut db = Mat::zeros(y.rows, y.cols);
                    for grp in 0..x.rows / n {
                        let gb = block(&g, grp, *n);
                        put_block(&mut da, grp, *n, &matmul_nt(&gb, &block(y, grp, *n)));
                        put_block(&mut db, grp, *n, &matmul_tn(&block(x, grp, *n), &gb));
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::GroupMeanRows(a, n) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        for (d, v) in da.data[r * src.cols..(r + 1) * src.cols].iter_mut().zip(g.row(r / n)) {
                            *d = v / *n as f64;
                        }
                    }
                    acc(*a, da);
                }
                Op::Mae(pred, target) => {
                    let p = self.value(*pred);
                    let scale = g.data[0] / p.data.len() as f64;
                    let d = p.zip_with(target, |a, b| {
                        let r = a - b;
                        if r > 0.0 {
                            scale
                        } else if r < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    acc(*pred, d);
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}
