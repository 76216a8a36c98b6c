//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value; node indices are
//! assigned in creation order, so parents always precede children and a
//! reverse sweep over the node list is a reverse topological order.
//!
//! ```
//! use depthfusion_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One weighted row transfer `out[dst] += weight * src[src]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowEntry {
    pub dst: u32,
    pub src: u32,
    pub weight: f64,
}

impl RowEntry {
    pub fn new(dst: usize, src: usize, weight: f64) -> Self {
        Self {
            dst: dst as u32,
            src: src as u32,
            weight,
        }
    }
}

/// Which keys each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScope {
    /// Every query sees every key.
    Full,
    /// Query `i` sees only key `i` (requires equal query/key counts).
    Diagonal,
}

/// Sentinel for "this (pixel, bin) lands outside the grid".
pub const NO_TARGET: u32 = u32::MAX;

const ATTN_BLOCK: usize = 64;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    ConcatLast { a: Var, b: Var, ca: usize, cb: usize },
    SliceLast { x: Var, start: usize, width: usize },
    SoftmaxLast(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    ScatterRows { base: Option<Var>, src: Var, entries: Vec<RowEntry> },
    Splat { feat: Var, prob: Var, targets: Vec<u32> },
    SegmentMax { x: Var, fallback: Option<Var>, argmax: Vec<usize> },
    SelectRows { x: Var, fallback: Var, mask: Vec<bool> },
    Attention { q: Var, k: Var, v: Var, heads: usize, scope: AttentionScope, lse: Vec<f64> },
    FocalLoss { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64, norm: f64 },
    SmoothL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records ops and their values for one forward pass. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], keyed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that keeps the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    /// Leaf that is always differentiated.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if let Err(Error::Numeric(msg)) = value.check_finite() {
            return Err(Error::Numeric(format!("{name}: {msg}")));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Dimension,
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// Rank-2 matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul: cannot multiply {:?} by {:?}", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Position-wise affine map `x[...×in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            bail!(Dimension, "linear: input {:?} incompatible with weight {:?}", sx, sw);
        }
        let (inp, out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                bail!(Dimension, "linear: bias {:?} must be [{out}]", self.shape(b));
            }
        }
        let rows = self.value(x).numel() / inp.max(1);
        let mut data = vec![0.0; rows * out];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in 0..rows {
                data[r * out..(r + 1) * out].copy_from_slice(bias);
            }
        }
        matmul_acc(self.data(x), self.data(w), &mut data, rows, inp, out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::from_parts(shape, data);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", value, Op::Linear { x, w, b, rows, inp, out }, &parents)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// Smooth rectifier (tanh-form GELU).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?.with_requires_grad(false);
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            bail!(Dimension, "concat_last: {:?} and {:?} are incompatible", sa, sb);
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).rows();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let value = Tensor::from_parts(shape, data);
        self.push("concat_last", value, Op::ConcatLast { a, b, ca, cb }, &[a, b])
    }

    /// Trailing-axis slice `[start, start + len)`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let width = *sx.last().unwrap_or(&0);
        if sx.is_empty() || start + len > width {
            bail!(Dimension, "slice_last: [{start}, {}) out of trailing extent {width}", start + len);
        }
        let rows = self.value(x).rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data(x)[r * width + start..r * width + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_parts(shape, data);
        self.push("slice_last", value, Op::SliceLast { x, start, width }, &[x])
    }

    // ---- normalisation --------------------------------------------------

    /// Max-stabilised softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || s[s.len() - 1] == 0 {
            bail!(Dimension, "softmax_last: empty trailing axis in {:?}", s);
        }
        let n = s[s.len() - 1];
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(s.to_vec(), data);
        self.push("softmax_last", value, Op::SoftmaxLast(x), &[x])
    }

    /// Per-row normalisation to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap_or(&0);
        if s.is_empty() || c < 2 {
            bail!(Dimension, "layer_norm: trailing extent must be >= 2, got {:?}", s);
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            bail!(
                Dimension,
                "layer_norm: gain {:?} / bias {:?} must be [{c}]",
                self.shape(gain),
                self.shape(bias)
            );
        }
        let rows = self.value(x).rows();
        let (g, b) = (self.data(gain), self.data(bias));
        let mut data = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.data(x)[r * c..(r + 1) * c];
            let (mean, inv) = row_stats(row);
            rstd[r] = inv;
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(s, data);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, rstd }, &[x, gain, bias])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::from_parts(vec![], vec![self.value(x).sum()]);
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            bail!(Dimension, "mean: empty tensor");
        }
        let value = Tensor::from_parts(vec![], vec![self.value(x).sum() / n as f64]);
        self.push("mean", value, Op::Mean(x), &[x])
    }

    // ---- sparse row movement ---------------------------------------------

    /// `out = base (or zeros[n_out×C]); out[e.dst] += e.weight * src[e.src]` for each entry,
    /// applied in entry order.
    pub fn scatter_rows(
        &mut self,
        base: Option<Var>,
        src: Var,
        entries: Vec<RowEntry>,
        n_out: usize,
    ) -> Result<Var> {
        let ss = self.shape(src);
        if ss.len() != 2 {
            bail!(Dimension, "scatter_rows: source must be rank 2, got {:?}", ss);
        }
        let (n_src, c) = (ss[0], ss[1]);
        let mut data = match base {
            Some(b) => {
                if self.shape(b) != [n_out, c] {
                    bail!(Dimension, "scatter_rows: base {:?} must be [{n_out}, {c}]", self.shape(b));
                }
                self.data(b).to_vec()
            }
            None => vec![0.0; n_out * c],
        };
        let src_data = self.data(src);
        for e in &entries {
            let (d, s) = (e.dst as usize, e.src as usize);
            if d >= n_out || s >= n_src {
                bail!(Bounds, "scatter_rows: entry {:?} outside {n_out}x{n_src}", e);
            }
            let from = &src_data[s * c..(s + 1) * c];
            for (o, &v) in data[d * c..(d + 1) * c].iter_mut().zip(from) {
                *o += e.weight * v;
            }
        }
        let value = Tensor::from_parts(vec![n_out, c], data);
        let mut parents = vec![src];
        parents.extend(base);
        self.push("scatter_rows", value, Op::ScatterRows { base, src, entries }, &parents)
    }

    /// Bilinear splat: `out[targets[p*B+b]] += prob[p,b] * feat[p]`; [`NO_TARGET`] entries are dropped.
    pub fn splat(&mut self, feat: Var, prob: Var, targets: Vec<u32>, n_out: usize) -> Result<Var> {
        let (sf, sp) = (self.shape(feat), self.shape(prob));
        if sf.len() != 2 || sp.len() != 2 || sf[0] != sp[0] || targets.len() != sp[0] * sp[1] {
            bail!(
                Dimension,
                "splat: feat {:?}, prob {:?}, {} targets are inconsistent",
                sf,
                sp,
                targets.len()
            );
        }
        let (p_count, c, bins) = (sf[0], sf[1], sp[1]);
        let mut data = vec![0.0; n_out * c];
        let (fd, pd) = (self.data(feat), self.data(prob));
        for p in 0..p_count {
            let f = &fd[p * c..(p + 1) * c];
            for b in 0..bins {
                let t = targets[p * bins + b];
                if t == NO_TARGET {
                    continue;
                }
                let t = t as usize;
                if t >= n_out {
                    bail!(Bounds, "splat: target {t} outside {n_out} cells");
                }
                let w = pd[p * bins + b];
                for (o, &v) in data[t * c..(t + 1) * c].iter_mut().zip(f) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::from_parts(vec![n_out, c], data);
        self.push("splat", value, Op::Splat { feat, prob, targets }, &[feat, prob])
    }

    /// Channel-wise max over each row group. Empty groups take the `fallback` row
    /// (or zeros when `fallback` is `None`).
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>], fallback: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            bail!(Dimension, "segment_max: input must be rank 2, got {:?}", sx);
        }
        let (n, c) = (sx[0], sx[1]);
        if let Some(f) = fallback {
            if self.shape(f) != [c] {
                bail!(Dimension, "segment_max: fallback {:?} must be [{c}]", self.shape(f));
            }
        }
        let xd = self.data(x);
        let mut data = vec![0.0; groups.len() * c];
        let mut argmax = vec![usize::MAX; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                if let Some(f) = fallback {
                    data[g * c..(g + 1) * c].copy_from_slice(self.data(f));
                }
                continue;
            }
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_row = usize::MAX;
                for &r in rows {
                    if r >= n {
                        bail!(Bounds, "segment_max: row {r} outside {n}");
                    }
                    let v = xd[r * c + j];
                    if v > best {
                        best = v;
                        best_row = r;
                    }
                }
                data[g * c + j] = best;
                argmax[g * c + j] = best_row;
            }
        }
        let value = Tensor::from_parts(vec![groups.len(), c], data);
        let mut parents = vec![x];
        parents.extend(fallback);
        self.push("segment_max", value, Op::SegmentMax { x, fallback, argmax }, &parents)
    }

    /// Replaces rows where `mask` is set with the `fallback` row.
    pub fn select_rows(&mut self, x: Var, mask: Vec<bool>, fallback: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || mask.len() != sx[0] || self.shape(fallback) != [sx[1]] {
            bail!(
                Dimension,
                "select_rows: x {:?}, mask {}, fallback {:?} are inconsistent",
                sx,
                mask.len(),
                self.shape(fallback)
            );
        }
        let c = sx[1];
        let mut data = self.data(x).to_vec();
        let f = self.data(fallback).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * c..(r + 1) * c].copy_from_slice(&f);
            }
        }
        let value = Tensor::from_parts(sx, data);
        self.push("select_rows", value, Op::SelectRows { x, fallback, mask }, &[x, fallback])
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention on pre-projected tokens.
    ///
    /// `q[n×C]`, `k[m×C]`, `v[m×C]`; head `h` uses channel slice
    /// `[h·C/H, (h+1)·C/H)` and scale `1/√(C/H)`. Scores are evaluated in
    /// query blocks so memory stays `O((n + m)·C)`; the backward pass
    /// recomputes probabilities from the stored per-row log-sum-exp.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scope: AttentionScope) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            bail!(Dimension, "attention: q {:?}, k {:?}, v {:?} are inconsistent", sq, sk, sv);
        }
        let (n, m, c) = (sq[0], sk[0], sq[1]);
        if heads == 0 || c % heads != 0 {
            bail!(Dimension, "attention: {c} channels not divisible by {heads} heads");
        }
        if m == 0 {
            bail!(Dimension, "attention: no keys");
        }
        if scope == AttentionScope::Diagonal && n != m {
            bail!(Dimension, "attention: diagonal scope needs n == m, got {n} vs {m}");
        }
        let (out, lse) = attention_forward(self.data(q), self.data(k), self.data(v), n, m, c, heads, scope);
        let value = Tensor::from_parts(vec![n, c], out);
        self.push("attention", value, Op::Attention { q, k, v, heads, scope, lse }, &[q, k, v])
    }

    // ---- losses -----------------------------------------------------------

    /// Sigmoid focal loss summed over all logits and divided by `norm`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        if targets.len() != self.value(logits).numel() {
            bail!(Dimension, "focal_loss: {} targets for {:?}", targets.len(), self.shape(logits));
        }
        if norm <= 0.0 {
            bail!(Usage, "focal_loss: normaliser must be positive");
        }
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| focal_term(z, y, alpha, gamma).0)
            .sum();
        let value = Tensor::from_parts(vec![], vec![total / norm]);
        self.push("focal_loss", value, Op::FocalLoss { logits, targets, alpha, gamma, norm }, &[logits])
    }

    /// Smooth-L1 over rows where `mask` is set, summed and divided by `norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>, mask: Vec<bool>, beta: f64, norm: f64) -> Result<Var> {
        let t = self.value(pred);
        if target.len() != t.numel() || mask.len() != t.rows() {
            bail!(
                Dimension,
                "smooth_l1: target {} / mask {} inconsistent with {:?}",
                target.len(),
                mask.len(),
                t.shape()
            );
        }
        if beta <= 0.0 || norm <= 0.0 {
            bail!(Usage, "smooth_l1: beta and normaliser must be positive");
        }
        let c = t.last_dim();
        let mut total = 0.0;
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            for j in 0..c {
                total += smooth_l1_term(t.data()[r * c + j] - target[r * c + j], beta).0;
            }
        }
        let value = Tensor::from_parts(vec![], vec![total / norm]);
        self.push("smooth_l1", value, Op::SmoothL1 { pred, target, mask, beta, norm }, &[pred])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; every node is visited at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            bail!(Usage, "backward: loss is not on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward: loss must be scalar, got shape {:?}", self.shape(loss));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| matmul_bt_acc(g, bd, ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_acc(ad, g, gb, m, k, n));
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |gx| matmul_bt_acc(g, wd, gx, rows, out, inp));
                self.accumulate(grads, *w, |gw| matmul_at_acc(xd, g, gw, rows, inp, out));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for r in 0..rows {
                            for (o, &v) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += v * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &v), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v * s;
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &v), &x) in ga.iter_mut().zip(g).zip(ad) {
                        *o += v * gelu_grad(x);
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::ConcatLast { a, b, ca, cb } => {
                let (ca, cb) = (*ca, *cb);
                let w = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for (r, row) in ga.chunks_mut(ca).enumerate() {
                        add_into(row, &g[r * w..r * w + ca]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (r, row) in gb.chunks_mut(cb).enumerate() {
                        add_into(row, &g[r * w + ca..(r + 1) * w]);
                    }
                });
            }
            Op::SliceLast { x, start, width } => {
                let (start, width) = (*start, *width);
                let len = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (r, src) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * width + start..r * width + start + len], src);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let inner = dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let c = node.value.last_dim();
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let rows = rstd.len();
                let mut xhat = vec![0.0; rows * c];
                for r in 0..rows {
                    let row = &xd[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[r * c + j] = (row[j] - mean) * rstd[r];
                    }
                }
                self.accumulate(grads, *x, |gx| {
                    let mut dxh = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = g[r * c + j] * gd[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxh, xh) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ScatterRows { base, src, entries } => {
                let c = node.value.last_dim();
                if let Some(b) = base {
                    self.accumulate(grads, *b, |gb| add_into(gb, g));
                }
                self.accumulate(grads, *src, |gs| {
                    for e in entries {
                        let (d, s) = (e.dst as usize, e.src as usize);
                        for j in 0..c {
                            gs[s * c + j] += e.weight * g[d * c + j];
                        }
                    }
                });
            }
            Op::Splat { feat, prob, targets } => {
                let c = node.value.last_dim();
                let bins = self.value(*prob).last_dim();
                let (fd, pd) = (self.data(*feat), self.data(*prob));
                self.accumulate(grads, *feat, |gf| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == NO_TARGET {
                            continue;
                        }
                        let (p, t) = (i / bins, t as usize);
                        let w = pd[i];
                        for j in 0..c {
                            gf[p * c + j] += w * g[t * c + j];
                        }
                    }
                });
                self.accumulate(grads, *prob, |gp| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == NO_TARGET {
                            continue;
                        }
                        let (p, t) = (i / bins, t as usize);
                        gp[i] += dot(&fd[p * c..(p + 1) * c], &g[t * c..(t + 1) * c]);
                    }
                });
            }
            Op::SegmentMax { x, fallback, argmax } => {
                let c = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            gx[r * c + i % c] += g[i];
                        }
                    }
                });
                if let Some(f) = fallback {
                    self.accumulate(grads, *f, |gf| {
                        for (gi, row) in g.chunks(c).enumerate() {
                            if argmax[gi * c] == usize::MAX {
                                add_into(gf, row);
                            }
                        }
                    });
                }
            }
            Op::SelectRows { x, fallback, mask } => {
                let c = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut gx[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                });
                self.accumulate(grads, *fallback, |gf| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(gf, &g[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, scope, lse } => {
                let (n, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                let m = self.shape(*k)[0];
                let (dq, dk, dv) = attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    node.value.data(),
                    lse,
                    g,
                    n,
                    m,
                    c,
                    *heads,
                    *scope,
                );
                self.accumulate(grads, *q, |gq| add_into(gq, &dq));
                self.accumulate(grads, *k, |gk| add_into(gk, &dk));
                self.accumulate(grads, *v, |gv| add_into(gv, &dv));
            }
            Op::FocalLoss { logits, targets, alpha, gamma, norm } => {
                let zd = self.data(*logits);
                self.accumulate(grads, *logits, |gz| {
                    for ((o, &z), &y) in gz.iter_mut().zip(zd).zip(targets) {
                        *o += g[0] * focal_term(z, y, *alpha, *gamma).1 / norm;
                    }
                });
            }
            Op::SmoothL1 { pred, target, mask, beta, norm } => {
                let pd = self.data(*pred);
                let c = self.value(*pred).last_dim();
                self.accumulate(grads, *pred, |gp| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..c {
                            let i = r * c + j;
                            gp[i] += g[0] * smooth_l1_term(pd[i] - target[i], *beta).1 / norm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// In-place max-subtracted softmax; returns the log-sum-exp of the input row.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + math::ln(total)
}

/// Mean and reciprocal standard deviation (epsilon 1e-5) of one row.
pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / math::sqrt(var + LAYER_NORM_EPS))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_K * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_K * (x + GELU_C * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + math::ln_1p(math::exp(-x))
    } else {
        math::ln_1p(math::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Focal loss value and its derivative w.r.t. the logit, for a soft target `y ∈ [0, 1]`.
fn focal_term(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let q = 1.0 - p;
    let pos_loss = -alpha * math::powf(q, gamma) * log_p;
    let pos_grad = alpha * math::powf(q, gamma) * (gamma * p * log_p - q);
    let neg_loss = -(1.0 - alpha) * math::powf(p, gamma) * log_q;
    let neg_grad = (1.0 - alpha) * math::powf(p, gamma) * (p - gamma * q * log_q);
    (
        y * pos_loss + (1.0 - y) * neg_loss,
        y * pos_grad + (1.0 - y) * neg_grad,
    )
}

fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Copies head `h`'s channel slice of `x[rows×c]` into a contiguous `[rows×dh]` buffer.
fn head_slice(x: &[f64], rows: usize, c: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * c + h * dh..r * c + (h + 1) * dh]);
    }
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Fills `scores[b×m]` with `scale · q_blk · kᵀ` for one head.
fn block_scores(q_blk: &[f64], kt: &[f64], b: usize, m: usize, dh: usize, scale: f64, scores: &mut [f64]) {
    scores[..b * m].iter_mut().for_each(|s| *s = 0.0);
    matmul_acc(q_blk, kt, &mut scores[..b * m], b, dh, m);
    scores[..b * m].iter_mut().for_each(|s| *s *= scale);
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
    scope: AttentionScope,
) -> (Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut out = vec![0.0; n * c];
    let mut lse = vec![0.0; heads * n];
    if scope == AttentionScope::Diagonal {
        // Softmax over a single key is exactly 1.
        out.copy_from_slice(v);
        for h in 0..heads {
            for i in 0..n {
                let s = dot(&q[i * c + h * dh..i * c + (h + 1) * dh], &k[i * c + h * dh..i * c + (h + 1) * dh]);
                lse[h * n + i] = s * scale;
            }
        }
        return (out, lse);
    }
    let mut scores = vec![0.0; ATTN_BLOCK * m];
    let mut o_blk = vec![0.0; ATTN_BLOCK * dh];
    for h in 0..heads {
        let kt = transpose(&head_slice(k, m, c, h, dh), m, dh);
        let vh = head_slice(v, m, c, h, dh);
        let qh = head_slice(q, n, c, h, dh);
        for start in (0..n).step_by(ATTN_BLOCK) {
            let b = ATTN_BLOCK.min(n - start);
            block_scores(&qh[start * dh..(start + b) * dh], &kt, b, m, dh, scale, &mut scores);
            for r in 0..b {
                lse[h * n + start + r] = softmax_in_place(&mut scores[r * m..(r + 1) * m]);
            }
            o_blk[..b * dh].iter_mut().for_each(|x| *x = 0.0);
            matmul_acc(&scores[..b * m], &vh, &mut o_blk[..b * dh], b, m, dh);
            for r in 0..b {
                let i = start + r;
                out[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(&o_blk[r * dh..(r + 1) * dh]);
            }
        }
    }
    (out, lse)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    g: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
    scope: AttentionScope,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; m * c];
    let mut dv = vec![0.0; m * c];
    if scope == AttentionScope::Diagonal {
        dv.copy_from_slice(g);
        return (dq, dk, dv);
    }
    let mut p = vec![0.0; ATTN_BLOCK * m];
    let mut dp = vec![0.0; ATTN_BLOCK * m];
    for h in 0..heads {
        let kh = head_slice(k, m, c, h, dh);
        let kt = transpose(&kh, m, dh);
        let vh = head_slice(v, m, c, h, dh);
        let qh = head_slice(q, n, c, h, dh);
        let gh = head_slice(g, n, c, h, dh);
        let oh = head_slice(out, n, c, h, dh);
        let mut dkh = vec![0.0; m * dh];
        let mut dvh = vec![0.0; m * dh];
        let mut dqh = vec![0.0; n * dh];
        for start in (0..n).step_by(ATTN_BLOCK) {
            let b = ATTN_BLOCK.min(n - start);
            let q_blk = &qh[start * dh..(start + b) * dh];
            let g_blk = &gh[start * dh..(start + b) * dh];
            block_scores(q_blk, &kt, b, m, dh, scale, &mut p);
            for r in 0..b {
                let l = lse[h * n + start + r];
                p[r * m..(r + 1) * m].iter_mut().for_each(|s| *s = math::exp(*s - l));
            }
            matmul_at_acc(&p[..b * m], g_blk, &mut dvh, b, m, dh);
            dp[..b * m].iter_mut().for_each(|x| *x = 0.0);
            matmul_bt_acc(g_blk, &vh, &mut dp[..b * m], b, dh, m);
            for r in 0..b {
                let i = start + r;
                let delta = dot(&gh[i * dh..(i + 1) * dh], &oh[i * dh..(i + 1) * dh]);
                for j in 0..m {
                    dp[r * m + j] = p[r * m + j] * (dp[r * m + j] - delta) * scale;
                }
            }
            matmul_acc(&dp[..b * m], &kh, &mut dqh[start * dh..(start + b) * dh], b, m, dh);
            matmul_at_acc(&dp[..b * m], q_blk, &mut dkh, b, m, dh);
        }
        for i in 0..n {
            dq[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
        }
        for j in 0..m {
            dk[j * c + h * dh..j * c + (h + 1) * dh].copy_from_slice(&dkh[j * dh..(j + 1) * dh]);
            dv[j * c + h * dh..j * c + (h + 1) * dh].copy_from_slice(&dvh[j * dh..(j + 1) * dh]);
        }
    }
    (dq, dk, dv)
}

/// Attention probabilities `[heads][n×m]` for analysis; materialises the full matrix.
pub fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    scope: AttentionScope,
) -> Result<Vec<Tensor>> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || heads == 0 || sq[1] % heads != 0 {
        bail!(Dimension, "attention_probs: q {:?} / k {:?} / {heads} heads", sq, sk);
    }
    let (n, m, c) = (sq[0], sk[0], sq[1]);
    let dh = c / heads;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut result = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut probs = vec![0.0; n * m];
        match scope {
            AttentionScope::Diagonal => {
                if n != m {
                    bail!(Dimension, "attention_probs: diagonal scope needs n == m");
                }
                for i in 0..n {
                    probs[i * m + i] = 1.0;
                }
            }
            AttentionScope::Full => {
                let kt = transpose(&head_slice(k.data(), m, c, h, dh), m, dh);
                let qh = head_slice(q.data(), n, c, h, dh);
                block_scores(&qh, &kt, n, m, dh, scale, &mut probs);
                for row in probs.chunks_mut(m) {
                    softmax_in_place(row);
                }
            }
        }
        result.push(Tensor::from_parts(vec![n, m], probs));
    }
    Ok(result)
}

/// Human-readable op label for a node, used in diagnostics.
pub fn describe(tape: &Tape, v: Var) -> String {
    let name = match &tape.nodes[v.0].op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Reshape(_) => "reshape",
        Op::ConcatLast { .. } => "concat_last",
        Op::SliceLast { .. } => "slice_last",
        Op::SoftmaxLast(_) => "softmax_last",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::Splat { .. } => "splat",
        Op::SegmentMax { .. } => "segment_max",
        Op::SelectRows { .. } => "select_rows",
        Op::Attention { .. } => "attention",
        Op::FocalLoss { .. } => "focal_loss",
        Op::SmoothL1 { .. } => "smooth_l1",
    };
    format!("{name}#{} {:?}", v.0, tape.shape(v))
}
