//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. Nodes are therefore already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter a graph
//! through [`Graph::param`], which creates at most one leaf per parameter so
//! that every use of a shared weight accumulates into the same gradient.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{broadcast_map, broadcast_shape, numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Silu(Var),
    Sqrt(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Glu(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    MaskedMean { x: Var, mask: Vec<bool>, count: usize },
    LogSumExp { x: Var, axis: usize, beta: f64, mean: bool },
    Dropout { x: Var, scale: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Computation graph with a recorded tape.
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + kk] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

struct MatMulDims {
    out_shape: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let batch_full = if batch.is_empty() { vec![1] } else { batch.clone() };
    let pad = |s: &[usize]| if s.is_empty() { vec![1] } else { s.to_vec() };
    let a_map = broadcast_map(&pad(ba), &batch_full);
    let b_map = broadcast_map(&pad(bb), &batch_full);
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatMulDims {
        out_shape,
        a_map,
        b_map,
        m,
        k,
        n,
    })
}

impl Graph {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Graph in training mode with dropout masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} (node {})", self.nodes.len())));
        }
        self.values.push(value);
        self.nodes.push(Node { op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.nodes.push(Node {
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.nodes.push(Node {
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter into the graph. Repeated calls with the same
    /// id return the same variable.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.values.push(store.value(id).clone());
        self.nodes.push(Node {
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
            return Ok((Tensor::new(sa, data)?, rg));
        }
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let ma = broadcast_map(&sa, &out);
        let mb = broadcast_map(&sb, &out);
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
        Ok((Tensor::new(out, data)?, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v += c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg, "add_scalar")
    }

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&d.out_shape)];
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for (bi, (&ia, &ib)) in d.a_map.iter().zip(&d.b_map).enumerate() {
            gemm_acc(
                &va[ia * sa..(ia + 1) * sa],
                &vb[ib * sb..(ib + 1) * sb],
                &mut out[bi * sc..(bi + 1) * sc],
                d.m,
                d.k,
                d.n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(d.out_shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s) / (r * c);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Transpose(x), rg, "transpose")
    }

    /// `x @ w + b` for `x: [.., In]`, `w: [In, Out]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn unary(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(x);
        self.push(t, op, rg, name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Silu(x), "silu", |v| v * sigmoid(v))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::pre("sqrt", "negative input"));
        }
        self.unary(x, Op::Sqrt(x), "sqrt", libm::sqrt)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::pre("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = libm::exp(src[at(i)] - m);
                    out[at(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[at(i)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, out)?, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Softmax over the last axis where entries with `mask == false` get
    /// exactly zero weight. `mask` covers either all of `x` or its last two
    /// axes (repeated over leading axes).
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        let total = numel(&s);
        if mask.is_empty() || total % mask.len() != 0 || mask.len() % n != 0 {
            return Err(Error::dim("masked_softmax", &s, &[mask.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; total];
        for r in 0..total / n {
            let row = &src[r * n..(r + 1) * n];
            let mrow = &mask[(r * n) % mask.len()..(r * n) % mask.len() + n];
            let m = row
                .iter()
                .zip(mrow)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::pre("masked_softmax", format!("row {r} is fully masked")));
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for ((o, v), &keep) in orow.iter_mut().zip(row).zip(mrow) {
                if keep {
                    *o = libm::exp(v - m);
                    z += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(s, out)?, Op::MaskedSoftmax { x }, rg, "masked_softmax")
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &s, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::pre("layer_norm", "eps must be positive"));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Splits the last axis in half and returns `first * sigmoid(second)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d2 = *s.last().unwrap();
        if d2 % 2 != 0 {
            return Err(Error::dim("glu", &s, &[d2 / 2]));
        }
        let d = d2 / 2;
        let src = self.value(x).data();
        let rows = src.len() / d2;
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &src[r * d2..(r + 1) * d2];
            for i in 0..d {
                out.push(row[i] * sigmoid(row[d + i]));
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = d;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Glu(x), rg, "glu")
    }

    /// Dilated 1-D convolution with zero SAME padding and stride 1.
    ///
    /// `x: [T, Cin]`, `w: [K, Cin, Cout]` with odd `K`, `b: [Cout]`. Tap `k`
    /// reads input frame `t + (k - K/2) * dilation`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(Error::dim("conv1d_dilated", &sx, &sw));
        }
        let (t_len, cin) = (sx[0], sx[1]);
        let (k, cout) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be at least 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv1d_dilated bias", self.shape(b), &[cout]));
            }
        }
        let mut out = vec![0.0; t_len * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for tap in 0..k {
            let (t0, t1, shift) = conv_tap_range(t_len, k, tap, dilation);
            if t0 >= t1 {
                continue;
            }
            let src0 = (t0 as isize + shift) as usize;
            gemm_acc(
                &xv[src0 * cin..(src0 + t1 - t0) * cin],
                &wv[tap * cin * cout..(tap + 1) * cin * cout],
                &mut out[t0 * cout..t1 * cout],
                t1 - t0,
                cin,
                cout,
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new([t_len, cout], out)?,
            Op::Conv1d { x, w, b, dilation },
            rg,
            "conv1d_dilated",
        )
    }

    /// Mean over the rows of `x: [T, D]` whose mask entry is true.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || mask.len() != s[0] {
            return Err(Error::dim("masked_mean", &s, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::pre("masked_mean", "every position is masked"));
        }
        let d = s[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; d];
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(&src[t * d..(t + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let rg = self.rg(x);
        self.push(
            Tensor::new([d], out)?,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            rg,
            "masked_mean",
        )
    }

    /// `(1/beta) * ln(sum(exp(beta * x)))` along `axis`, max-shifted.
    pub fn logsumexp(&mut self, x: Var, axis: usize, beta: f64) -> Result<Var> {
        self.soft_max_reduce(x, axis, beta, false)
    }

    /// `(1/beta) * ln(mean(exp(beta * x)))` along `axis`. Equal inputs come
    /// back unchanged.
    pub fn logmeanexp(&mut self, x: Var, axis: usize, beta: f64) -> Result<Var> {
        self.soft_max_reduce(x, axis, beta, true)
    }

    fn soft_max_reduce(&mut self, x: Var, axis: usize, beta: f64, mean: bool) -> Result<Var> {
        let name = if mean { "logmeanexp" } else { "logsumexp" };
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::pre(name, format!("axis {axis} out of range for {s:?}")));
        }
        if !(beta > 0.0) {
            return Err(Error::pre(name, "beta must be positive"));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let m = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z: f64 = (0..n).map(|i| libm::exp(beta * (src[at(i)] - m))).sum();
                if mean {
                    z /= n as f64;
                }
                out[o * inner + j] = m + libm::log(z) / beta;
            }
        }
        let shape = reduced_shape(&s, axis);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::LogSumExp { x, axis, beta, mean }, rg, name)
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::pre("dropout", format!("p must lie in [0,1), got {p}")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, scale }, rg, "dropout")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::pre("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::pre("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in xs {
            let n = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
            offset += n;
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Stacks `[D]` vectors into a `[N, D]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let d = self.value(r).numel();
            reshaped.push(self.reshape(r, [1, d])?);
        }
        self.concat(&reshaped, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        if shape == self.shape(x) {
            return Ok(x);
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::pre("slice", format!("range {start}+{len} on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Row `i` of a `[N, D]` matrix as a `[D]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let d = self.value(x).last_dim();
        let r = self.slice(x, 0, i, 1)?;
        self.reshape(r, [d])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg, "mean")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::pre("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += src[o * n * inner + i * inner + j];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(reduced_shape(&s, axis), out)?, Op::SumAxis { x, axis }, rg, "sum_axis")
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::pre("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::pre("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout)?;
            if gout.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {idx}")));
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter used in this graph into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let dst = store.get_mut(id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Tensor])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.values[v.0].numel();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, &self.values);
        self.grads[v.0] = Some(g);
    }

    fn acc_broadcast(&mut self, v: Var, out_shape: &[usize], gout: &[f64], sign: f64) {
        let src_shape = self.shape(v).to_vec();
        self.acc(v, |g, _| {
            if src_shape == out_shape {
                for (a, b) in g.iter_mut().zip(gout) {
                    *a += sign * b;
                }
            } else {
                for (o, &i) in broadcast_map(&src_shape, out_shape).iter().enumerate() {
                    g[i] += sign * gout[o];
                }
            }
        });
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) -> Result<()> {
        let out_shape = self.values[idx].shape().to_vec();
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = core::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, &out_shape, gout, 1.0);
                self.acc_broadcast(*b, &out_shape, gout, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, &out_shape, gout, 1.0);
                self.acc_broadcast(*b, &out_shape, gout, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (target, other) in [(a, b), (b, a)] {
                    let ts = self.shape(target).to_vec();
                    let os = self.shape(other).to_vec();
                    let mt = broadcast_map(&ts, &out_shape);
                    let mo = broadcast_map(&os, &out_shape);
                    self.acc(target, |g, vals| {
                        let ov = vals[other.0].data();
                        for o in 0..gout.len() {
                            g[mt[o]] += gout[o] * ov[mo[o]];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |g, _| g.iter_mut().zip(gout).for_each(|(a, b)| *a += c * b));
            }
            Op::AddScalar(x) => {
                self.acc(*x, |g, _| g.iter_mut().zip(gout).for_each(|(a, b)| *a += b));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let d = matmul_dims(self.shape(a), self.shape(b))?;
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                self.acc(a, |g, vals| {
                    let vb = vals[b.0].data();
                    for (bi, (&ia, &ib)) in d.a_map.iter().zip(&d.b_map).enumerate() {
                        gemm_nt_acc(
                            &gout[bi * sc..(bi + 1) * sc],
                            &vb[ib * sb..(ib + 1) * sb],
                            &mut g[ia * sa..(ia + 1) * sa],
                            d.m,
                            d.n,
                            d.k,
                        );
                    }
                });
                self.acc(b, |g, vals| {
                    let va = vals[a.0].data();
                    for (bi, (&ia, &ib)) in d.a_map.iter().zip(&d.b_map).enumerate() {
                        gemm_tn_acc(
                            &va[ia * sa..(ia + 1) * sa],
                            &gout[bi * sc..(bi + 1) * sc],
                            &mut g[ib * sb..(ib + 1) * sb],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let n = out_shape.len();
                let (r, c) = (out_shape[n - 1], out_shape[n - 2]);
                let batch = gout.len() / (r * c);
                self.acc(*x, |g, _| {
                    for b in 0..batch {
                        let o = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                g[o + i * c + j] += gout[o + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(*x, |g, vals| {
                    let y = vals[idx].data();
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let x = *x;
                self.acc(x, |g, vals| {
                    let xv = vals[x.0].data();
                    for i in 0..g.len() {
                        let s = sigmoid(xv[i]);
                        g[i] += gout[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                });
            }
            Op::Sqrt(x) => {
                self.acc(*x, |g, vals| {
                    let y = vals[idx].data();
                    for i in 0..g.len() {
                        g[i] += gout[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&out_shape, *axis);
                self.acc(*x, |g, vals| {
                    let y = vals[idx].data();
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * n * inner + i * inner + j;
                            let dot: f64 = (0..n).map(|i| gout[at(i)] * y[at(i)]).sum();
                            for i in 0..n {
                                g[at(i)] += y[at(i)] * (gout[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let n = *out_shape.last().unwrap();
                self.acc(*x, |g, vals| {
                    let y = vals[idx].data();
                    for r in 0..gout.len() / n {
                        let rs = r * n..(r + 1) * n;
                        let dot: f64 = gout[rs.clone()].iter().zip(&y[rs.clone()]).map(|(a, b)| a * b).sum();
                        for i in rs {
                            g[i] += y[i] * (gout[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = gout.len() / d;
                let gain = *gain;
                self.acc(*x, |g, vals| {
                    let gv = vals[gain.0].data();
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = gout[r * d + i] * gv[i];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for i in 0..d {
                            g[r * d + i] += k * (d as f64 * dxhat[i] - s1 - h[i] * s2);
                        }
                    }
                });
                self.acc(gain, |g, _| {
                    for r in 0..rows {
                        for i in 0..d {
                            g[i] += gout[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
                self.acc(*bias, |g, _| {
                    for r in 0..rows {
                        for i in 0..d {
                            g[i] += gout[r * d + i];
                        }
                    }
                });
            }
            Op::Glu(x) => {
                let x = *x;
                let d = *out_shape.last().unwrap();
                self.acc(x, |g, vals| {
                    let xv = vals[x.0].data();
                    for r in 0..gout.len() / d {
                        for i in 0..d {
                            let a = xv[r * 2 * d + i];
                            let s = sigmoid(xv[r * 2 * d + d + i]);
                            let go = gout[r * d + i];
                            g[r * 2 * d + i] += go * s;
                            g[r * 2 * d + d + i] += go * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (x, w, dilation) = (*x, *w, *dilation);
                let (t_len, cin) = (self.shape(x)[0], self.shape(x)[1]);
                let (k, cout) = (self.shape(w)[0], self.shape(w)[2]);
                self.acc(x, |g, vals| {
                    let wv = vals[w.0].data();
                    for tap in 0..k {
                        let (t0, t1, shift) = conv_tap_range(t_len, k, tap, dilation);
                        if t0 >= t1 {
                            continue;
                        }
                        let src0 = (t0 as isize + shift) as usize;
                        gemm_nt_acc(
                            &gout[t0 * cout..t1 * cout],
                            &wv[tap * cin * cout..(tap + 1) * cin * cout],
                            &mut g[src0 * cin..(src0 + t1 - t0) * cin],
                            t1 - t0,
                            cout,
                            cin,
                        );
                    }
                });
                self.acc(w, |g, vals| {
                    let xv = vals[x.0].data();
                    for tap in 0..k {
                        let (t0, t1, shift) = conv_tap_range(t_len, k, tap, dilation);
                        if t0 >= t1 {
                            continue;
                        }
                        let src0 = (t0 as isize + shift) as usize;
                        gemm_tn_acc(
                            &xv[src0 * cin..(src0 + t1 - t0) * cin],
                            &gout[t0 * cout..t1 * cout],
                            &mut g[tap * cin * cout..(tap + 1) * cin * cout],
                            t1 - t0,
                            cin,
                            cout,
                        );
                    }
                });
                if let Some(b) = *b {
                    self.acc(b, |g, _| {
                        for row in gout.chunks(cout) {
                            g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    });
                }
            }
            Op::MaskedMean { x, mask, count } => {
                let d = out_shape[0];
                let inv = 1.0 / *count as f64;
                self.acc(*x, |g, _| {
                    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for i in 0..d {
                            g[t * d + i] += gout[i] * inv;
                        }
                    }
                });
            }
            Op::LogSumExp { x, axis, beta, mean } => {
                let (x, axis, beta) = (*x, *axis, *beta);
                let in_shape = self.shape(x).to_vec();
                let (outer, n, inner) = split_axis(&in_shape, axis);
                let w = if *mean { 1.0 / n as f64 } else { 1.0 };
                self.acc(x, |g, vals| {
                    let xv = vals[x.0].data();
                    let y = vals[idx].data();
                    for o in 0..outer {
                        for j in 0..inner {
                            let yo = y[o * inner + j];
                            for i in 0..n {
                                let at = o * n * inner + i * inner + j;
                                g[at] += gout[o * inner + j] * w * libm::exp(beta * (xv[at] - yo));
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, scale } => {
                self.acc(*x, |g, _| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * scale[i];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let total = out_shape[*axis];
                let (outer, _, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    self.acc(v, |g, _| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (a, b) in g[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&gout[src..src + n * inner])
                            {
                                *a += b;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Reshape(x) => {
                self.acc(*x, |g, _| g.iter_mut().zip(gout).for_each(|(a, b)| *a += b));
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let in_shape = self.shape(x).to_vec();
                let (outer, n, inner) = split_axis(&in_shape, axis);
                let len = out_shape[axis];
                self.acc(x, |g, _| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        for (a, b) in g[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gout[o * len * inner..(o + 1) * len * inner])
                        {
                            *a += b;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let go = gout[0];
                self.acc(*x, |g, _| g.iter_mut().for_each(|a| *a += go));
            }
            Op::MeanAll(x) => {
                let x = *x;
                let go = gout[0] / self.value(x).numel() as f64;
                self.acc(x, |g, _| g.iter_mut().for_each(|a| *a += go));
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let in_shape = self.shape(x).to_vec();
                let (outer, n, inner) = split_axis(&in_shape, axis);
                self.acc(x, |g, _| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                g[o * n * inner + i * inner + j] += gout[o * inner + j];
                            }
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

/// Output rows `[t0, t1)` that read in-bounds input for `tap`, and the input
/// offset `shift` such that output row `t` reads input row `t + shift`.
fn conv_tap_range(t_len: usize, k: usize, tap: usize, dilation: usize) -> (usize, usize, isize) {
    let shift = (tap as isize - (k / 2) as isize) * dilation as isize;
    let t0 = (-shift).max(0) as usize;
    let t1 = (t_len as isize - shift.max(0)).max(0) as usize;
    (t0.min(t_len), t1.min(t_len), shift)
}

fn reduced_shape(s: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = s.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, &e)| e).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}
