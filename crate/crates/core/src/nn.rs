//! Minimal reverse-mode autodiff over small dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`] instead of copying them, so a
//! forward pass costs only its activations.

use serde::{Deserialize, Serialize};

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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, o: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, bv) in o.iter_mut().zip(b.row(k)) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt {}x{} · ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows);
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: vec![], values: vec![] }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(m);
        self.values.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
}

enum Value {
    Owned(Mat),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients from one backward pass.
pub struct Grads {
    nodes: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_nodes: vec![None; params.values.len()] }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params.values[*i],
        }
    }

    fn push(&mut self, m: Mat, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(m), op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_nodes[idx] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(idx), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        v
    }

    pub fn named(&mut self, name: &str) -> Var {
        let idx = self.params.index(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = matmul(self.value(a), self.value(b));
        self.push(m, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let m = matmul_bt(self.value(a), self.value(b));
        self.push(m, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        self.push(m, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, self.value(a).cols), "add_row shape");
        let mut m = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..m.rows {
            for (x, b) in m.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(m, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).data.clone();
        assert_eq!(r.len(), self.value(a).cols, "mul_row shape");
        let mut m = self.value(a).clone();
        for i in 0..m.rows {
            for (x, g) in m.row_mut(i).iter_mut().zip(&r) {
                *x *= g;
            }
        }
        self.push(m, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        for (x, y) in m.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        self.push(m, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x *= s);
        self.push(m, Op::Scale(a, s))
    }

    /// `a + c` for a constant `c` (no gradient to `c`).
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(c);
        self.push(m, Op::AddConst(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x = gelu(*x));
        self.push(m, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        m.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(m, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for i in 0..m.rows {
            let r = m.row_mut(i);
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in r.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            r.iter_mut().for_each(|x| *x /= s);
        }
        self.push(m, Op::SoftmaxRows(a))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        let c = m.cols as f64;
        for i in 0..m.rows {
            let r = m.row_mut(i);
            let mean = r.iter().sum::<f64>() / c;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            r.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        self.push(m, Op::LayerNorm(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols);
        let mut m = Mat::zeros(src.rows, len);
        for i in 0..src.rows {
            m.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(m, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                assert_eq!(v.rows, rows, "concat_cols rows");
                m.row_mut(i)[off..off + v.cols].copy_from_slice(v.row(i));
                off += v.cols;
            }
        }
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols, cols, "concat_rows cols");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut m = Mat::zeros(1, src.cols);
        for i in 0..src.rows {
            for (o, x) in m.data.iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        let n = src.rows.max(1) as f64;
        m.data.iter_mut().for_each(|x| *x /= n);
        self.push(m, Op::MeanRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut m = Mat::zeros(idx.len(), src.cols);
        for (k, &i) in idx.iter().enumerate() {
            m.row_mut(k).copy_from_slice(src.row(i));
        }
        self.push(m, Op::GatherRows(a, idx.to_vec()))
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows, 1);
        let data = src.data.repeat(n);
        let cols = src.cols;
        self.push(Mat::from_vec(n, cols, data), Op::BroadcastRows(a))
    }

    /// `x · W + b` with parameters `{name}.w` and `{name}.b`.
    pub fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.named(&format!("{name}.w"));
        let b = self.named(&format!("{name}.b"));
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Backpropagates `seed` from `out`.
    pub fn backward(&self, out: Var, seed: Mat) -> Grads {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!((seed.rows, seed.cols), (self.value(out).rows, self.value(out).cols), "seed shape");
        g[out.0] = Some(seed);
        fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut g[v.0] {
                Some(m) => m.add_assign(&d),
                slot => *slot = Some(d),
            }
        }
        for n in (0..=out.0).rev() {
            let Some(dy) = g[n].take() else { continue };
            match &self.nodes[n].op {
                Op::Leaf | Op::Param => {
                    g[n] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_bt(&dy, self.value(*b));
                    let db = matmul_at(self.value(*a), &dy);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = matmul(&dy, self.value(*b));
                    let db = matmul_at(&dy, self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::AddRow(a, r) => {
                    let mut dr = Mat::zeros(1, dy.cols);
                    for i in 0..dy.rows {
                        for (o, x) in dr.data.iter_mut().zip(dy.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut g, *r, dr);
                    acc(&mut g, *a, dy);
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let rv = &self.value(*r).data;
                    let mut dr = Mat::zeros(1, dy.cols);
                    let mut da = dy.clone();
                    for i in 0..dy.rows {
                        for c in 0..dy.cols {
                            dr.data[c] += dy.at(i, c) * av.at(i, c);
                            da.data[i * dy.cols + c] *= rv[c];
                        }
                    }
                    acc(&mut g, *r, dr);
                    acc(&mut g, *a, da);
                }
                Op::Mul(a, b) => {
                    let mut da = dy.clone();
                    let mut db = dy;
                    for (x, y) in da.data.iter_mut().zip(&self.value(*b).data) {
                        *x *= y;
                    }
                    for (x, y) in db.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= y;
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, s) => {
                    let mut d = dy;
                    d.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut g, *a, d);
                }
                Op::AddConst(a) => acc(&mut g, *a, dy),
                Op::Gelu(a) => {
                    let mut d = dy;
                    for (x, v) in d.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= gelu_grad(*v);
                    }
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(n));
                    let mut d = dy;
                    for (x, t) in d.data.iter_mut().zip(&y.data) {
                        *x *= 1.0 - t * t;
                    }
                    acc(&mut g, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(n));
                    let mut d = dy;
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let dr = d.row_mut(i);
                        let dot: f64 = yr.iter().zip(dr.iter()).map(|(p, q)| p * q).sum();
                        for (dv, yv) in dr.iter_mut().zip(yr) {
                            *dv = yv * (*dv - dot);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = self.value(Var(n));
                    let c = x.cols as f64;
                    let mut d = dy;
                    for i in 0..x.rows {
                        let xr = x.row(i);
                        let mean = xr.iter().sum::<f64>() / c;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let yr = y.row(i);
                        let dr = d.row_mut(i);
                        let mdy = dr.iter().sum::<f64>() / c;
                        let mdyy = dr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c;
                        for (dv, yv) in dr.iter_mut().zip(yr) {
                            *dv = inv * (*dv - mdy - yv * mdyy);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for i in 0..src.rows {
                        d.row_mut(i)[*start..*start + dy.cols].copy_from_slice(dy.row(i));
                    }
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        let mut d = Mat::zeros(dy.rows, cols);
                        for i in 0..dy.rows {
                            d.row_mut(i).copy_from_slice(&dy.row(i)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut g, *p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let v = self.value(*p);
                        let len = v.rows * v.cols;
                        let d = Mat::from_vec(v.rows, v.cols, dy.data[off..off + len].to_vec());
                        off += len;
                        acc(&mut g, *p, d);
                    }
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let inv = 1.0 / src.rows.max(1) as f64;
                    let row: Vec<f64> = dy.data.iter().map(|x| x * inv).collect();
                    acc(&mut g, *a, Mat::from_vec(src.rows, src.cols, row.repeat(src.rows)));
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, x) in d.row_mut(i).iter_mut().zip(dy.row(k)) {
                            *o += x;
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::BroadcastRows(a) => {
                    let mut d = Mat::zeros(1, dy.cols);
                    for i in 0..dy.rows {
                        for (o, x) in d.data.iter_mut().zip(dy.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut g, *a, d);
                }
            }
        }
        Grads { nodes: g }
    }

    /// Parameter gradients from `grads`, zero for unused parameters.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Mat> {
        let mut out = self.params.zeros_like();
        self.add_param_grads(grads, &mut out);
        out
    }

    /// Accumulates parameter gradients from `grads` into `out`.
    pub fn add_param_grads(&self, grads: &Grads, out: &mut [Mat]) {
        for (idx, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if let Some(gm) = grads.get(*v) {
                    out[idx].add_assign(gm);
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention. `q` is `n × d`; `k`, `v` are
/// `m × d`; `mask` (`n × m`, additive) restricts which keys each query sees.
pub fn attention(t: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mat>) -> Var {
    let d = t.value(q).cols;
    assert_eq!(d % heads, 0, "d_model must divide by heads");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * hd, hd);
        let kh = t.slice_cols(k, h * hd, hd);
        let vh = t.slice_cols(v, h * hd, hd);
        let s = t.matmul_bt(qh, kh);
        let s = t.scale(s, scale);
        let s = match mask {
            Some(m) => t.add_const(s, m),
            None => s,
        };
        let p = t.softmax_rows(s);
        outs.push(t.matmul(p, vh));
    }
    t.concat_cols(&outs)
}
