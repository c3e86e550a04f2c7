use std::cell::Cell;
use std::sync::Arc;

use super::kernels::gemm;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed-attention pattern for windowed attention: `[windows, t, t]`,
/// `true` where query `i` may attend to key `j`. Window `w` of the input
/// uses pattern `w % windows`, so one pattern serves a whole batch.
pub type Mask = Arc<Vec<bool>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    LayerNorm,
    Softmax,
    Gelu,
    Attention,
    GatherRows,
    Reshape,
    Mse,
    Sum,
    NormalizePower,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Gelu,
        OpKind::Attention,
        OpKind::GatherRows,
        OpKind::Reshape,
        OpKind::Mse,
        OpKind::Sum,
        OpKind::NormalizePower,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Attention => "attention",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reshape => "reshape",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::NormalizePower => "normalize_power",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hook: while set, the backward rule of `kind` on this thread scales
/// its incoming gradient by 1.5. Used to prove the gradient checker catches
/// a broken rule.
#[doc(hidden)]
pub fn set_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

fn backward_fault() -> Option<OpKind> {
    BACKWARD_FAULT.with(Cell::get)
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub(crate) const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        window: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: usize,
        index: Arc<Vec<usize>>,
        width: usize,
    },
    Reshape {
        x: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    NormalizePower {
        x: usize,
        width: usize,
        norms: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Attention { .. } => OpKind::Attention,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Mse { .. } => OpKind::Mse,
            Op::Sum { .. } => OpKind::Sum,
            Op::NormalizePower { .. } => OpKind::NormalizePower,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumer. [`Tape::backward`] may run once; gradients then stay readable
/// through [`Tape::grad`].
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    grads: Option<Vec<Option<Vec<f64>>>>,
    flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            grads: None,
            flops: 0,
        }
    }

    /// A tape that never records backward state; every node is constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of the matmul and attention nodes so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn item(&self, v: Var) -> Option<f64> {
        let value = self.value(v);
        (value.len() == 1).then(|| value[0])
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Registers `t` as an input. It participates in differentiation when
    /// `t.requires_grad` is set and the tape records gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            requires_grad: self.grad_enabled && t.requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape,
            value: t.data,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, inputs: &[usize]) -> bool {
        self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.kind().name() });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn last_dim(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v).last() {
            Some(&d) => Ok(d),
            None => Err(Error::shape(op, "scalar input where rows were expected")),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a[.., k] · b[k, n]`. Leading extents of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.last_dim(a, "matmul")?;
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k || self.shape(a).len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let n = bs[1];
        let rows = self.value(a).len() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        self.flops += (rows * k * n) as u64;
        let rg = self.tracks(&[a.0, b.0]);
        self.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                rows,
                k,
                n,
            },
        )
    }

    /// Adds `bias[d]` to every row of `x[.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim(x, "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let rg = self.tracks(&[x.0, bias.0]);
        self.push(self.shape(x).to_vec(), out, rg, Op::AddBias { x: x.0, bias: bias.0 })
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.tracks(&[a.0, b.0]);
        self.push(self.shape(a).to_vec(), out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.tracks(&[x.0]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x: x.0, factor })
    }

    /// Normalizes each row of `x[.., d]` to zero mean and unit variance
    /// (population variance plus `eps`), then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.last_dim(x, "layer_norm")?;
        if d == 0 || !(eps > 0.0) {
            return Err(Error::shape("layer_norm", "needs d > 0 and eps > 0"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for rows of {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rg = self.tracks(&[x.0, gamma.0, beta.0]);
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = if rg { vec![0.0; xs.len()] } else { Vec::new() };
        let mut inv_std = if rg { vec![0.0; rows] } else { Vec::new() };
        for (r, row) in xs.chunks_exact(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let h = (row[j] - mean) * is;
                out[r * d + j] = g[j] * h + b[j];
                if rg {
                    xhat[r * d + j] = h;
                }
            }
            if rg {
                inv_std[r] = is;
            }
        }
        self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim(x, "softmax")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.tracks(&[x.0]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Softmax { x: x.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.tracks(&[x.0]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Gelu { x: x.0 })
    }

    /// Multi-head self-attention over a single sequence `[t, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let t = match self.shape(q) {
            [t, _] => *t,
            s => return Err(Error::shape("attention", format!("expected [t, d], got {s:?}"))),
        };
        self.window_attention(q, k, v, heads, t, None)
    }

    /// Multi-head attention applied independently to consecutive groups of
    /// `window` rows of `q`, `k`, `v` (all `[.., d]`). Per head of width
    /// `dh = d/heads` the output is `softmax(q·kᵀ/√dh)·v`; heads are
    /// concatenated along the feature axis.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        mask: Option<Mask>,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let d = self.last_dim(q, "attention")?;
        let n = self.value(q).len() / d;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("dim {d} not divisible by {heads} heads"),
            ));
        }
        if window == 0 || n % window != 0 {
            return Err(Error::shape(
                "attention",
                format!("{n} tokens not divisible into windows of {window}"),
            ));
        }
        if let Some(m) = &mask {
            if m.is_empty() || m.len() % (window * window) != 0 {
                return Err(Error::shape("attention", "mask length is not a multiple of t·t"));
            }
        }
        let rg = self.tracks(&[q.0, k.0, v.0]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let windows = n / window;
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; n * d];
        let mut probs = if rg {
            vec![0.0; windows * heads * window * window]
        } else {
            Vec::new()
        };
        let mut p = vec![0.0; window * window];
        for w in 0..windows {
            let allowed = mask.as_ref().map(|m| {
                let patterns = m.len() / (window * window);
                let base = (w % patterns) * window * window;
                &m[base..base + window * window]
            });
            for h in 0..heads {
                let col = h * dh;
                for i in 0..window {
                    let qi = &qs[(w * window + i) * d + col..][..dh];
                    let row = &mut p[i * window..(i + 1) * window];
                    for j in 0..window {
                        if allowed.is_some_and(|a| !a[i * window + j]) {
                            row[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &ks[(w * window + j) * d + col..][..dh];
                        row[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(w * window + i) * d + col..][..dh];
                    for j in 0..window {
                        let pij = row[j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vs[(w * window + j) * d + col..][..dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                if rg {
                    let base = (w * heads + h) * window * window;
                    probs[base..base + window * window].copy_from_slice(&p);
                }
            }
        }
        self.flops += (2 * n * window * d) as u64;
        self.push(
            self.shape(q).to_vec(),
            out,
            rg,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                window,
                probs,
            },
        )
    }

    /// Row gather over the last axis: output row `r` is input row `index[r]`.
    /// The result is laid out as `out_shape`, whose element count must be
    /// `index.len()·width` with `width` the last extent of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
        let width = self.last_dim(x, "gather_rows")?;
        let rows = self.value(x).len() / width;
        if numel(&out_shape) != index.len() * width {
            return Err(Error::shape(
                "gather_rows",
                format!("{} rows of {width} do not fill {out_shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index.iter() {
            out.extend_from_slice(&xs[i * width..(i + 1) * width]);
        }
        let rg = self.tracks(&[x.0]);
        self.push(out_shape, out, rg, Op::GatherRows { x: x.0, index, width })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.tracks(&[x.0]);
        self.push(shape, out, rg, Op::Reshape { x: x.0 })
    }

    /// Splits `x[h, w, d]` into non-overlapping `win×win` tiles, giving
    /// `[h/win · w/win, win², d]`. Tiles and the tokens inside a tile are
    /// both in row-major order.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Result<Var> {
        let (h, w, d) = match *self.shape(x) {
            [h, w, d] => (h, w, d),
            ref s => {
                return Err(Error::shape(
                    "window_partition",
                    format!("expected [h, w, d], got {s:?}"),
                ))
            }
        };
        let index = window_partition_index(1, h, w, win, 0)?;
        self.gather_rows(x, Arc::new(index), vec![(h / win) * (w / win), win * win, d])
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (nw, t, d) = match *self.shape(x) {
            [nw, t, d] => (nw, t, d),
            ref s => return Err(Error::shape("window_merge", format!("expected [nw, t, d], got {s:?}"))),
        };
        let win = (t as f64).sqrt().round() as usize;
        if win * win != t || h % win.max(1) != 0 || w % win.max(1) != 0 || nw * t != h * w {
            return Err(Error::shape("window_merge", format!("[{nw}, {t}, {d}] into {h}×{w}")));
        }
        let index = window_merge_index(1, h, w, win, 0)?;
        self.gather_rows(x, Arc::new(index), vec![h, w, d])
    }

    /// Mean of squared differences, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len() as f64;
        let total: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.tracks(&[a.0, b.0]);
        self.push(Vec::new(), vec![total / n], rg, Op::Mse { a: a.0, b: b.0 })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        let rg = self.tracks(&[x.0]);
        self.push(Vec::new(), vec![total], rg, Op::Sum { x: x.0 })
    }

    /// Rescales each row of `x[.., n]` to unit mean square: `x·√n/‖x‖₂`.
    pub fn normalize_power(&mut self, x: Var) -> Result<Var> {
        let width = self.last_dim(x, "normalize_power")?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / width);
        for (r, row) in out.chunks_exact_mut(width).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroSignal(r));
            }
            let factor = (width as f64).sqrt() / norm;
            row.iter_mut().for_each(|v| *v *= factor);
            norms.push(norm);
        }
        let rg = self.tracks(&[x.0]);
        self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::NormalizePower { x: x.0, width, norms },
        )
    }

    /// Reverse pass from a one-element `loss`. Gradients accumulate into
    /// every node that requires them and stay readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let fault = backward_fault();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if fault == Some(self.nodes[i].op.kind()) {
                let corrupted: Vec<f64> = g.iter().map(|v| v * 1.5).collect();
                self.propagate(i, &corrupted, &mut grads);
            } else {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let len = self.nodes[idx].value.len();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl Fn(usize) -> f64) {
        if let Some(slot) = self.slot(grads, idx) {
            for (j, s) in slot.iter_mut().enumerate() {
                *s += f(j);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(rows, n, k, g, false, &self.nodes[b].value, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, rows, n, &self.nodes[a].value, true, g, false, gb, 1.0);
                }
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, |j| g[j]);
                if let Some(gb) = self.slot(grads, bias) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, |j| g[j]);
                self.accumulate(grads, b, |j| g[j]);
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, |j| g[j]);
                self.accumulate(grads, b, |j| -g[j]);
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                self.accumulate(grads, a, |j| g[j] * bv[j]);
                self.accumulate(grads, b, |j| g[j] * av[j]);
            }
            &Op::Scale { x, factor } => self.accumulate(grads, x, |j| g[j] * factor),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[*gamma].value.len();
                let gam = &self.nodes[*gamma].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += is * (gr[j] * gam[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (row, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row in g.chunks_exact(d) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(gx) = self.slot(grads, x) {
                    for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = &self.nodes[x].value;
                self.accumulate(grads, x, |j| g[j] * gelu_derivative(xv[j]));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                window,
                probs,
                ..
            } => {
                let (gq, gk, gv) = self.attention_backward(node, *q, *k, *v, *heads, *window, probs, g);
                self.accumulate(grads, *q, |j| gq[j]);
                self.accumulate(grads, *k, |j| gk[j]);
                self.accumulate(grads, *v, |j| gv[j]);
            }
            Op::GatherRows { x, index, width } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut gx[src * width..(src + 1) * width];
                        for (s, v) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *s += v;
                        }
                    }
                }
            }
            &Op::Reshape { x } => self.accumulate(grads, x, |j| g[j]),
            &Op::Mse { a, b } => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let c = 2.0 * g[0] / av.len() as f64;
                self.accumulate(grads, a, |j| c * (av[j] - bv[j]));
                self.accumulate(grads, b, |j| -c * (av[j] - bv[j]));
            }
            &Op::Sum { x } => self.accumulate(grads, x, |_| g[0]),
            Op::NormalizePower { x, width, norms } => {
                let xv = &self.nodes[*x].value;
                if let Some(gx) = self.slot(grads, *x) {
                    let s = (*width as f64).sqrt();
                    for (r, &norm) in norms.iter().enumerate() {
                        let xr = &xv[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let c = s / norm;
                        let n2 = norm * norm;
                        for j in 0..*width {
                            gx[r * width + j] += c * (gr[j] - xr[j] * dot / n2);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        window: usize,
        probs: &[f64],
        g: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = *node.shape.last().unwrap();
        let n = node.value.len() / d;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let t = window;
        let mut ds = vec![0.0; t * t];
        for w in 0..n / t {
            for h in 0..heads {
                let col = h * dh;
                let p = &probs[(w * heads + h) * t * t..][..t * t];
                let row = |i: usize| (w * t + i) * d + col;
                for i in 0..t {
                    let gi = &g[row(i)..][..dh];
                    let mut weighted = 0.0;
                    for j in 0..t {
                        let vj = &vs[row(j)..][..dh];
                        let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[i * t + j] = dp;
                        weighted += p[i * t + j] * dp;
                        let pij = p[i * t + j];
                        if pij != 0.0 {
                            for (s, gg) in gv[row(j)..][..dh].iter_mut().zip(gi) {
                                *s += pij * gg;
                            }
                        }
                    }
                    for j in 0..t {
                        ds[i * t + j] = p[i * t + j] * (ds[i * t + j] - weighted) * scale;
                    }
                }
                for i in 0..t {
                    for j in 0..t {
                        let s = ds[i * t + j];
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[row(i) + c] += s * ks[row(j) + c];
                            gk[row(j) + c] += s * qs[row(i) + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Gather index turning `batch` row-major `h×w` token grids into
/// `win×win` windows, after a cyclic shift of `shift` tokens toward the
/// origin on both axes.
pub fn window_partition_index(batch: usize, h: usize, w: usize, win: usize, shift: usize) -> Result<Vec<usize>> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("{h}×{w} grid not divisible by window {win}"),
        ));
    }
    let mut index = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for wr in 0..h / win {
            for wc in 0..w / win {
                for i in 0..win {
                    for j in 0..win {
                        let r = (wr * win + i + shift) % h;
                        let c = (wc * win + j + shift) % w;
                        index.push(b * h * w + r * w + c);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Inverse permutation of [`window_partition_index`].
pub fn window_merge_index(batch: usize, h: usize, w: usize, win: usize, shift: usize) -> Result<Vec<usize>> {
    let forward = window_partition_index(batch, h, w, win, shift)?;
    let mut inverse = vec![0; forward.len()];
    for (pos, &src) in forward.iter().enumerate() {
        inverse[src] = pos;
    }
    Ok(inverse)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1, 4], 3.5));
        let g = tape.leaf(&Tensor::full(vec![4], 1.0));
        let b = tape.leaf(&Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let x = tape.leaf(&t(&[1, 2], &[1.0, -1.0]));
        let g = tape.leaf(&Tensor::full(vec![2], 1.0));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        for (got, want) in tape.value(y).iter().zip([1.0, -1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2]));
        let g = tape.leaf(&Tensor::zeros(vec![2]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.leaf(&t(&[3], &[-7.25, -7.25, -7.25]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut tape = Tape::new();
        let q = tape.leaf(&t(&[1, 4], &[0.3, -1.0, 2.0, 0.1]));
        let k = tape.leaf(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.leaf(&t(&[1, 4], &[5.0, 6.0, 7.0, 8.0]));
        let o = tape.attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(o), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn attention_zero_query_averages_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::zeros(vec![3, 2]));
        let k = tape.leaf(&t(&[3, 2], &[1.0, -2.0, 0.5, 3.0, 2.0, 1.0]));
        let v = tape.leaf(&t(&[3, 2], &[1.0, 4.0, 2.0, 5.0, 3.0, 9.0]));
        let o = tape.attention(q, k, v, 1).unwrap();
        for row in tape.value(o).chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-12);
            assert!((row[1] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_head_divisibility() {
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::zeros(vec![2, 3]));
        assert!(tape.attention(q, q, q, 2).is_err());
    }

    #[test]
    fn masked_attention_ignores_disallowed_keys() {
        let mut tape = Tape::new();
        let q = tape.leaf(&t(&[2, 1], &[1.0, 1.0]));
        let v = tape.leaf(&t(&[2, 1], &[10.0, 20.0]));
        let mask: Mask = Arc::new(vec![true, false, false, true]);
        let o = tape.window_attention(q, q, v, 1, 2, Some(mask)).unwrap();
        assert_eq!(tape.value(o), &[10.0, 20.0]);
    }

    #[test]
    fn window_partition_single_window_and_placement() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.leaf(&t(&[4, 4, 1], &data));
        let one = tape.window_partition(x, 4).unwrap();
        assert_eq!(tape.shape(one), &[1, 16, 1]);
        assert_eq!(tape.value(one), &data[..]);

        let four = tape.window_partition(x, 2).unwrap();
        assert_eq!(tape.shape(four), &[4, 4, 1]);
        // token (0, 3) has value 3: window 1, position 1
        assert_eq!(tape.value(four)[4 + 1], 3.0);
    }

    #[test]
    fn window_merge_rejects_bad_grid() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![4, 4, 1]));
        assert!(tape.window_merge(x, 4, 8).is_err());
        let y = tape.leaf(&Tensor::zeros(vec![3, 3, 1]));
        assert!(tape.window_partition(y, 2).is_err());
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let b = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let m = tape.mse(a, b).unwrap();
        assert_eq!(tape.item(m), Some(1.0));
        let m = tape.mse(a, a).unwrap();
        assert_eq!(tape.item(m), Some(0.0));
        let c = tape.leaf(&Tensor::zeros(vec![3]));
        assert!(tape.mse(a, c).is_err());
    }

    #[test]
    fn mse_gradient_of_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.75).with_grad());
        let z = tape.constant(Tensor::scalar(0.0));
        let loss = tape.mse(x, z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x), Some(&[3.5][..]));
    }

    #[test]
    fn sum_of_matmul_gradient_is_column_sums() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let b = tape.leaf(&t(&[3, 2], &[1.0, -1.0, 0.5, 2.0, -3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        let want = [0.0, 2.5, 1.0];
        for row in ga.chunks(3) {
            assert_eq!(row, want);
        }
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2], 1.0).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![1], 1e300));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn normalize_power_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4], &[1.0; 4]));
        let y = tape.normalize_power(x).unwrap();
        assert_eq!(tape.value(y), &[1.0; 4]);
        let x = tape.leaf(&t(&[1, 2], &[2.0, 0.0]));
        let y = tape.normalize_power(x).unwrap();
        assert!((tape.value(y)[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(tape.value(y)[1], 0.0);
        let z = tape.leaf(&Tensor::zeros(vec![1, 3]));
        assert!(matches!(tape.normalize_power(z), Err(Error::ZeroSignal(0))));
    }

    #[test]
    fn no_grad_tape_has_no_gradients() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(&Tensor::full(vec![2], 1.0).with_grad());
        let s = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(s));
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn op_names_round_trip() {
        for kind in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(kind.name()), Some(kind));
        }
    }
}
