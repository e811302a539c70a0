//! Reverse-mode tape over [`DiffArray`] values.
//!
//! Every op appends a node; nodes only reference earlier nodes, so the
//! backward sweep is a single reverse pass over the node list. Gradients are
//! only materialised for nodes that transitively depend on a node created
//! with `requires_grad`.

use std::sync::Arc;

use num_complex::Complex64;

use super::array::{dot, gemm_nn, gemm_nt, gemm_tn, norm, DiffArray};
use super::fft;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside whatever store bound it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

struct ConvSaved {
    u_spec: Vec<Vec<Complex64>>,
    k_spec: Vec<Vec<Complex64>>,
}

enum Op {
    Leaf { param: Option<ParamId> },
    Reshape(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Square(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    GatherRows { table: Var, rows: Vec<usize> },
    Gather { src: Var, index: Vec<usize> },
    MaskRows { x: Var, mask: Vec<f64> },
    AddRowBias { x: Var, bias: Var },
    ChannelConv { u: Var, k: Var, saved: Option<Box<ConvSaved>> },
    ShortConv { u: Var, w: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Monarch { x: Var, left: Var, right: Var, blocks: usize, mid: Vec<f64> },
    MaskedMean { x: Var, weights: Vec<f64>, count: f64 },
    Normalize { x: Var, norm: f64 },
    Dot(Var, Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    Stack(Vec<Var>),
    SoftmaxCe { scores: Var, target: usize, probs: Vec<f64> },
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(log Σ exp(s), softmax(s))`, max-shifted.
/// `(−log softmax(s)[t], softmax(s))`, written as `(m − s_t) + ln(1 + rest)`
/// so a confident prediction keeps full relative precision.
fn softmax_nll(s: &[f64], t: usize) -> (f64, Vec<f64>) {
    let (am, m) = s
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let mut p: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let rest: f64 = p.iter().enumerate().filter(|&(i, _)| i != am).map(|(_, v)| v).sum();
    let z = 1.0 + rest;
    p.iter_mut().for_each(|v| *v /= z);
    ((m - s[t]) + rest.ln_1p(), p)
}

/// Transposes a b×b grid stored in `src` into `dst` (the perfect shuffle).
#[inline]
pub(crate) fn shuffle(src: &[f64], dst: &mut [f64], b: usize) {
    for a in 0..b {
        for c in 0..b {
            dst[c * b + a] = src[a * b + c];
        }
    }
}

/// `dst = BD(blocks)·src` for `b` blocks of b×b.
#[inline]
pub(crate) fn block_diag_apply(blocks: &[f64], src: &[f64], dst: &mut [f64], b: usize) {
    for k in 0..b {
        let blk = &blocks[k * b * b..(k + 1) * b * b];
        let xs = &src[k * b..(k + 1) * b];
        for i in 0..b {
            dst[k * b + i] = dot(&blk[i * b..(i + 1) * b], xs);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(shape, Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_array(&self, v: Var) -> DiffArray {
        let n = &self.nodes[v.0];
        DiffArray::new(&n.shape, n.value.to_vec()).expect("node shapes are valid")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Binds a parameter. Gradients flow to it when it is trainable.
    pub fn param(&mut self, id: ParamId, array: &DiffArray) -> Var {
        self.push_shared(
            array.shape().to_vec(),
            array.shared_values(),
            Op::Leaf { param: Some(id) },
            array.is_trainable(),
        )
    }

    /// Binds a parameter without tracking gradients (frozen / inference).
    pub fn frozen(&mut self, array: &DiffArray) -> Var {
        self.push_shared(array.shape().to_vec(), array.shared_values(), Op::Leaf { param: None }, false)
    }

    pub fn constant(&mut self, array: &DiffArray) -> Var {
        self.frozen(array)
    }

    /// A free leaf that receives gradients (used by tests and grad checks).
    pub fn variable(&mut self, array: &DiffArray) -> Var {
        self.push_shared(array.shape().to_vec(), array.shared_values(), Op::Leaf { param: None }, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = Arc::clone(&self.nodes[x.0].value);
        let rg = self.rg(x);
        Ok(self.push_shared(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddConst(x), |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Sum of scalar (or equal-shape) nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::EmptyInput("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Row lookup: `out[r] = table[rows[r]]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (nr, d) = self.dims2(table)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= nr) {
            return Err(Error::Index(format!("row {bad} of table with {nr} rows")));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather of zero rows".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&tv[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Flat gather into a new shape: `out[i] = src[index[i]]`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).len();
        if index.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != index.len() {
            return Err(Error::Index("gather index out of range or shape mismatch".into()));
        }
        let sv = self.value(src);
        let out = index.iter().map(|&i| sv[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(shape.to_vec(), out, Op::Gather { src, index }, rg))
    }

    /// Scales row `r` of a matrix by `mask[r]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (r, d) = self.dims2(x)?;
        if mask.len() != r {
            return Err(Error::dim(format!("mask of {} for {r} rows", mask.len())));
        }
        let xv = self.value(x);
        let mut out = xv.to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m != 1.0 {
                out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= m);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, d], out, Op::MaskRows { x, mask: mask.to_vec() }, rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.dims2(x)?;
        if self.value(bias).len() != d {
            return Err(Error::dim(format!("bias of {} for {d} columns", self.value(bias).len())));
        }
        let mut out = self.value(x).to_vec();
        let bv = self.value(bias);
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, d], out, Op::AddRowBias { x, bias }, rg))
    }

    /// Per-channel circular convolution over the row axis:
    /// `u` is L×d (positions × channels), `k` is d×L (one kernel per channel).
    pub fn channel_conv(&mut self, u: Var, k: Var) -> Result<Var> {
        let (l, d) = self.dims2(u)?;
        let (d2, l2) = self.dims2(k)?;
        if d != d2 || l != l2 {
            return Err(Error::dim(format!("channel conv of {l}x{d} with kernel {d2}x{l2}")));
        }
        let plan = fft::plan(l)?;
        let uv = self.value(u);
        let kv = self.value(k);
        let rg = self.rg(u) || self.rg(k);

        let mut out = vec![0.0; l * d];
        let mut u_spec = vec![vec![Complex64::default(); l]; d];
        let mut k_spec = vec![vec![Complex64::default(); l]; d];
        let mut col_a = vec![0.0; l];
        let mut col_b = vec![0.0; l];
        let mut y_a = vec![0.0; l];
        let mut y_b = vec![0.0; l];
        let mut c = 0;
        while c < d {
            let pair = c + 1 < d;
            for i in 0..l {
                col_a[i] = uv[i * d + c];
                if pair {
                    col_b[i] = uv[i * d + c + 1];
                }
            }
            let (ua, ub) = u_spec.split_at_mut(c + 1);
            let (ka, kb) = k_spec.split_at_mut(c + 1);
            let mut scratch = vec![Complex64::default(); l];
            let ub_dst: &mut [Complex64] = if pair { &mut ub[0] } else { &mut scratch };
            plan.forward_real_pair(&col_a, pair.then_some(&col_b[..]), &mut ua[c], ub_dst);
            let mut scratch2 = vec![Complex64::default(); l];
            let kb_dst: &mut [Complex64] = if pair { &mut kb[0] } else { &mut scratch2 };
            plan.forward_real_pair(
                &kv[c * l..(c + 1) * l],
                pair.then(|| &kv[(c + 1) * l..(c + 2) * l]),
                &mut ka[c],
                kb_dst,
            );
            let prod_a: Vec<Complex64> = u_spec[c].iter().zip(&k_spec[c]).map(|(x, y)| x * y).collect();
            if pair {
                let prod_b: Vec<Complex64> =
                    u_spec[c + 1].iter().zip(&k_spec[c + 1]).map(|(x, y)| x * y).collect();
                plan.inverse_real_pair(&prod_a, Some(&prod_b), &mut y_a, Some(&mut y_b));
            } else {
                plan.inverse_real_pair(&prod_a, None, &mut y_a, None);
            }
            for i in 0..l {
                out[i * d + c] = y_a[i];
                if pair {
                    out[i * d + c + 1] = y_b[i];
                }
            }
            c += 2;
        }
        let saved = rg.then(|| Box::new(ConvSaved { u_spec, k_spec }));
        Ok(self.push(vec![l, d], out, Op::ChannelConv { u, k, saved }, rg))
    }

    /// 1-D circular convolution `y[i] = Σ_j u[j]·k[(i−j) mod L]`.
    pub fn circular_conv_fft(&mut self, u: Var, k: Var) -> Result<Var> {
        let (lu, lk) = (self.value(u).len(), self.value(k).len());
        if self.shape(u).len() != 1 || self.shape(k).len() != 1 || lu != lk {
            return Err(Error::dim(format!(
                "circular conv of {:?} and {:?}",
                self.shape(u),
                self.shape(k)
            )));
        }
        let uc = self.reshape(u, &[lu, 1])?;
        let kr = self.reshape(k, &[1, lk])?;
        let y = self.channel_conv(uc, kr)?;
        self.reshape(y, &[lu])
    }

    /// Centered depthwise convolution with zero boundary: `u` is L×d, `w` d×W.
    pub fn short_conv(&mut self, u: Var, w: Var) -> Result<Var> {
        let (l, d) = self.dims2(u)?;
        let (d2, width) = self.dims2(w)?;
        if d != d2 {
            return Err(Error::dim(format!("short conv of {l}x{d} with {d2}x{width}")));
        }
        let off = (width - 1) / 2;
        let uv = self.value(u);
        let wv = self.value(w);
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for t in 0..width {
                let Some(src) = (i + t).checked_sub(off).filter(|&s| s < l) else {
                    continue;
                };
                let orow = &mut out[i * d..(i + 1) * d];
                let urow = &uv[src * d..(src + 1) * d];
                for c in 0..d {
                    orow[c] += wv[c * width + t] * urow[c];
                }
            }
        }
        let rg = self.rg(u) || self.rg(w);
        Ok(self.push(vec![l, d], out, Op::ShortConv { u, w }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
        }
        let (r, d) = self.dims2(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layer norm affine parameters must match row width"));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            vec![r, d],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Applies a square order-2 Monarch matrix to every row of `x` (L×n).
    /// `left`/`right` hold `b` blocks of b×b each, shaped [b, b, b].
    pub fn monarch_rows(&mut self, x: Var, left: Var, right: Var) -> Result<Var> {
        let (l, n) = self.dims2(x)?;
        let b = match self.shape(left) {
            [b0, b1, b2] if b0 == b1 && b1 == b2 => *b0,
            s => return Err(Error::dim(format!("monarch factor of shape {s:?}"))),
        };
        if self.shape(right) != self.shape(left) || b * b != n {
            return Err(Error::dim(format!("monarch with b={b} applied to width {n}")));
        }
        let xv = self.value(x);
        let lv = self.value(left);
        let rv = self.value(right);
        let rg = self.rg(x) || self.rg(left) || self.rg(right);
        let mut out = vec![0.0; l * n];
        let mut mid = if rg { vec![0.0; l * n] } else { Vec::new() };
        let mut y = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..l {
            block_diag_apply(rv, &xv[i * n..(i + 1) * n], &mut y, b);
            shuffle(&y, &mut z, b);
            block_diag_apply(lv, &z, &mut w, b);
            shuffle(&w, &mut out[i * n..(i + 1) * n], b);
            if rg {
                mid[i * n..(i + 1) * n].copy_from_slice(&z);
            }
        }
        Ok(self.push(
            vec![l, n],
            out,
            Op::Monarch {
                x,
                left,
                right,
                blocks: b,
                mid,
            },
            rg,
        ))
    }

    /// Weighted mean over rows: `out = Σ_r w_r·x[r] / Σ_r w_r`.
    pub fn masked_mean_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (r, d) = self.dims2(x)?;
        if weights.len() != r {
            return Err(Error::dim(format!("{} pooling weights for {r} rows", weights.len())));
        }
        let count: f64 = weights.iter().sum();
        if count <= 0.0 {
            return Err(Error::EmptyInput("pooling over zero positions".into()));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for (i, &wt) in weights.iter().enumerate() {
            if wt != 0.0 {
                for (o, v) in out.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                    *o += wt * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        let rg = self.rg(x);
        Ok(self.push(
            vec![d],
            out,
            Op::MaskedMean {
                x,
                weights: weights.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// L2 normalisation of a vector.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let nrm = norm(self.value(x));
        if nrm == 0.0 || !nrm.is_finite() {
            return Err(Error::DegenerateVector(format!("cannot normalise vector of norm {nrm}")));
        }
        let out = self.value(x).iter().map(|v| v / nrm).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Normalize { x, norm: nrm }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::dim("dot of unequal lengths"));
        }
        let v = dot(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b), rg))
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::dim("cosine of unequal lengths"));
        }
        let na = norm(self.value(a));
        let nb = norm(self.value(b));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cosine similarity with a zero vector".into()));
        }
        let c = (dot(self.value(a), self.value(b)) / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![c], Op::Cosine { a, b, na, nb }, rg))
    }

    /// Concatenates scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::EmptyInput("stack of no scalars".into()));
        }
        if let Some(v) = scalars.iter().find(|&&v| self.value(v).len() != 1) {
            return Err(Error::dim(format!("stack expects scalars, got {:?}", self.shape(*v))));
        }
        let out = scalars.iter().map(|&v| self.value(v)[0]).collect();
        let rg = scalars.iter().any(|&v| self.rg(v));
        Ok(self.push(vec![scalars.len()], out, Op::Stack(scalars.to_vec()), rg))
    }

    /// `−log softmax(scores)[target]`.
    pub fn softmax_cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let n = self.value(scores).len();
        if target >= n {
            return Err(Error::Index(format!("target {target} of {n} classes")));
        }
        let (loss, probs) = softmax_nll(self.value(scores), target);
        let rg = self.rg(scores);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCe { scores, target, probs }, rg))
    }

    /// Mean cross-entropy over the rows of an n×V logit matrix.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.dims2(logits)?;
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {t} of {v} classes")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(r * v);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            let (nll, p) = softmax_nll(row, t);
            total += nll;
            probs.extend(p);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![total / r as f64],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradients of trainable parameters bound with [`Graph::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| match (&n.op, g) {
            (Op::Leaf { param: Some(id) }, Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    fn backward_node(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Gradient buffer of a parent, allocated on first use.
        fn slot<'a>(local: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            let n = nodes[v.0].value.len();
            local[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Reshape(x) => {
                let gx = slot(local, nodes, *x);
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(*a) {
                    gemm_nt(g, val(*b), slot(local, nodes, *a), m, k, n);
                }
                if wants(*b) {
                    gemm_tn(val(*a), g, slot(local, nodes, *b), m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    slot(local, nodes, *a).iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    slot(local, nodes, *b).iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(local, nodes, *a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(local, nodes, *b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                slot(local, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            Op::AddConst(x) => {
                slot(local, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Square(x) => {
                let xv = val(*x);
                let gx = slot(local, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += 2.0 * xv[j] * g[j];
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = slot(local, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let gx = slot(local, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xv[j]);
                }
            }
            Op::Sum(x) => {
                slot(local, nodes, *x).iter_mut().for_each(|a| *a += g[0]);
            }
            Op::GatherRows { table, rows } => {
                let d = nodes[table.0].shape[1];
                let gt = slot(local, nodes, *table);
                for (r, &src) in rows.iter().enumerate() {
                    let dst = &mut gt[src * d..(src + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather { src, index } => {
                let gs = slot(local, nodes, *src);
                for (j, &ix) in index.iter().enumerate() {
                    gs[ix] += g[j];
                }
            }
            Op::MaskRows { x, mask } => {
                let d = node.shape[1];
                let gx = slot(local, nodes, *x);
                for (r, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        for j in r * d..(r + 1) * d {
                            gx[j] += m * g[j];
                        }
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                let d = node.shape[1];
                if wants(*x) {
                    slot(local, nodes, *x).iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if wants(*bias) {
                    let gb = slot(local, nodes, *bias);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ChannelConv { u, k, saved } => {
                let saved = saved.as_ref().expect("conv spectra saved when grad required");
                let (l, d) = (node.shape[0], node.shape[1]);
                let plan = fft::plan(l).expect("plan built in forward");
                let mut gu = if wants(*u) { vec![0.0; l * d] } else { Vec::new() };
                let mut gk = if wants(*k) { vec![0.0; l * d] } else { Vec::new() };
                let mut ga = vec![0.0; l];
                let mut gb = vec![0.0; l];
                let mut sa = vec![Complex64::default(); l];
                let mut sb = vec![Complex64::default(); l];
                let mut oa = vec![0.0; l];
                let mut ob = vec![0.0; l];
                let mut c = 0;
                while c < d {
                    let pair = c + 1 < d;
                    for t in 0..l {
                        ga[t] = g[t * d + c];
                        if pair {
                            gb[t] = g[t * d + c + 1];
                        }
                    }
                    plan.forward_real_pair(&ga, pair.then_some(&gb[..]), &mut sa, &mut sb);
                    let chans: &[usize] = if pair { &[0, 1] } else { &[0] };
                    if wants(*u) {
                        let pa: Vec<Complex64> =
                            sa.iter().zip(&saved.k_spec[c]).map(|(x, y)| x * y.conj()).collect();
                        let pb: Option<Vec<Complex64>> = pair.then(|| {
                            sb.iter().zip(&saved.k_spec[c + 1]).map(|(x, y)| x * y.conj()).collect()
                        });
                        plan.inverse_real_pair(&pa, pb.as_deref(), &mut oa, pair.then_some(&mut ob[..]));
                        for &off in chans {
                            let src = if off == 0 { &oa } else { &ob };
                            for t in 0..l {
                                gu[t * d + c + off] += src[t];
                            }
                        }
                    }
                    if wants(*k) {
                        let pa: Vec<Complex64> =
                            sa.iter().zip(&saved.u_spec[c]).map(|(x, y)| x * y.conj()).collect();
                        let pb: Option<Vec<Complex64>> = pair.then(|| {
                            sb.iter().zip(&saved.u_spec[c + 1]).map(|(x, y)| x * y.conj()).collect()
                        });
                        plan.inverse_real_pair(&pa, pb.as_deref(), &mut oa, pair.then_some(&mut ob[..]));
                        for &off in chans {
                            let src = if off == 0 { &oa } else { &ob };
                            gk[(c + off) * l..(c + off + 1) * l]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    c += 2;
                }
                if wants(*u) {
                    slot(local, nodes, *u).iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
                }
                if wants(*k) {
                    slot(local, nodes, *k).iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
                }
            }
            Op::ShortConv { u, w } => {
                let (l, d) = (node.shape[0], node.shape[1]);
                let width = nodes[w.0].shape[1];
                let off = (width - 1) / 2;
                let uv = val(*u);
                let wv = val(*w);
                let mut gu = if wants(*u) { vec![0.0; l * d] } else { Vec::new() };
                let mut gw = if wants(*w) { vec![0.0; d * width] } else { Vec::new() };
                for i in 0..l {
                    for t in 0..width {
                        let Some(src) = (i + t).checked_sub(off).filter(|&s| s < l) else {
                            continue;
                        };
                        for c in 0..d {
                            let gi = g[i * d + c];
                            if !gu.is_empty() {
                                gu[src * d + c] += wv[c * width + t] * gi;
                            }
                            if !gw.is_empty() {
                                gw[c * width + t] += gi * uv[src * d + c];
                            }
                        }
                    }
                }
                if wants(*u) {
                    slot(local, nodes, *u).iter_mut().zip(&gu).for_each(|(a, b)| *a += b);
                }
                if wants(*w) {
                    slot(local, nodes, *w).iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, d) = (node.shape[0], node.shape[1]);
                let gv = val(*gamma);
                if wants(*gamma) {
                    let gg = slot(local, nodes, *gamma);
                    for i in 0..r * d {
                        gg[i % d] += g[i] * xhat[i];
                    }
                }
                if wants(*beta) {
                    let gbt = slot(local, nodes, *beta);
                    for i in 0..r * d {
                        gbt[i % d] += g[i];
                    }
                }
                if wants(*x) {
                    let gx = slot(local, nodes, *x);
                    let mut gh = vec![0.0; d];
                    for i in 0..r {
                        let base = i * d;
                        for j in 0..d {
                            gh[j] = g[base + j] * gv[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx =
                            gh.iter().zip(&xhat[base..base + d]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[base + j] += rstd[i] * (gh[j] - mean_gh - xhat[base + j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Monarch {
                x,
                left,
                right,
                blocks: b,
                mid,
            } => {
                let b = *b;
                let (l, n) = (node.shape[0], node.shape[1]);
                let xv = val(*x);
                let lv = val(*left);
                let rv = val(*right);
                let mut gl = vec![0.0; b * b * b];
                let mut gr = vec![0.0; b * b * b];
                let mut gx = if wants(*x) { vec![0.0; l * n] } else { Vec::new() };
                let mut gw = vec![0.0; n];
                let mut gz = vec![0.0; n];
                let mut gy = vec![0.0; n];
                for row in 0..l {
                    shuffle(&g[row * n..(row + 1) * n], &mut gw, b);
                    let z = &mid[row * n..(row + 1) * n];
                    gz.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..b {
                        for i in 0..b {
                            let gwi = gw[k * b + i];
                            let base = k * b * b + i * b;
                            for j in 0..b {
                                gl[base + j] += gwi * z[k * b + j];
                                gz[k * b + j] += lv[base + j] * gwi;
                            }
                        }
                    }
                    shuffle(&gz, &mut gy, b);
                    let xr = &xv[row * n..(row + 1) * n];
                    for k in 0..b {
                        for i in 0..b {
                            let gyi = gy[k * b + i];
                            let base = k * b * b + i * b;
                            for j in 0..b {
                                gr[base + j] += gyi * xr[k * b + j];
                                if !gx.is_empty() {
                                    gx[row * n + k * b + j] += rv[base + j] * gyi;
                                }
                            }
                        }
                    }
                }
                if wants(*left) {
                    slot(local, nodes, *left).iter_mut().zip(&gl).for_each(|(a, v)| *a += v);
                }
                if wants(*right) {
                    slot(local, nodes, *right).iter_mut().zip(&gr).for_each(|(a, v)| *a += v);
                }
                if wants(*x) {
                    slot(local, nodes, *x).iter_mut().zip(&gx).for_each(|(a, v)| *a += v);
                }
            }
            Op::MaskedMean { x, weights, count } => {
                let d = node.shape[0];
                let gx = slot(local, nodes, *x);
                for (r, &wt) in weights.iter().enumerate() {
                    if wt != 0.0 {
                        let s = wt / count;
                        for j in 0..d {
                            gx[r * d + j] += s * g[j];
                        }
                    }
                }
            }
            Op::Normalize { x, norm: nrm } => {
                let y = &node.value;
                let yg = dot(y, g);
                let gx = slot(local, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += (g[j] - y[j] * yg) / nrm;
                }
            }
            Op::Dot(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    slot(local, nodes, *a).iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y);
                }
                if wants(*b) {
                    let av = val(*a);
                    slot(local, nodes, *b).iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y);
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let c = node.value[0];
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = slot(local, nodes, *a);
                    for j in 0..av.len() {
                        ga[j] += g[0] * (bv[j] / (na * nb) - c * av[j] / (na * na));
                    }
                }
                if wants(*b) {
                    let gb = slot(local, nodes, *b);
                    for j in 0..bv.len() {
                        gb[j] += g[0] * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                    }
                }
            }
            Op::Stack(vars) => {
                for (j, &v) in vars.iter().enumerate() {
                    if wants(v) {
                        slot(local, nodes, v)[0] += g[j];
                    }
                }
            }
            Op::SoftmaxCe { scores, target, probs } => {
                let gs = slot(local, nodes, *scores);
                for j in 0..probs.len() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    gs[j] += g[0] * (probs[j] - onehot);
                }
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let v = nodes[logits.0].shape[1];
                let s = g[0] / targets.len() as f64;
                let gl = slot(local, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * v + j] += s * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}
