//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs. Nodes are only ever appended, so the tape is in topological
//! order by construction and `backward` is a single reverse sweep.
//!
//! Feature maps use the layout `[c, 1, w]` for a single sample or
//! `[b, c, 1, w]` for a batch; the height-1 axis is kept so shapes line up
//! with 1x3 kernels stored as `[c_out, 3, 1, c_in]`.

use std::cell::Cell;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable that turns on NaN/Inf assertions for every op output.
pub const CHECK_NUMERICS_ENV: &str = "CKSP_CHECK_NUMERICS";

/// Whether [`CHECK_NUMERICS_ENV`] is set to a non-empty value other than `0`.
pub fn check_numerics() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        std::env::var(CHECK_NUMERICS_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false)
    })
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operator kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv1x3,
    MatMul,
    Reshape,
    Add,
    AddN,
    Mul,
    Scale,
    Relu,
    Tanh,
    MaxPool1d,
    GlobalAvgPool,
    FullyConnected,
    LogSoftmax,
    BatchNormTrain,
    BatchNormFrozen,
    SliceBatch,
    ConcatBatch,
    Sum,
    Mean,
    FocalNll,
}

#[doc(hidden)]
pub mod fault {
    //! Test hook that negates the input gradient of one operator kind so
    //! gradient checks can be shown to catch a broken backward rule.
    use super::*;

    thread_local! {
        pub(super) static FLIP: Cell<Option<OpKind>> = const { Cell::new(None) };
    }

    pub fn inject_sign_flip(kind: Option<OpKind>) {
        FLIP.with(|f| f.set(kind));
    }

    pub(super) fn flipped(kind: OpKind) -> bool {
        FLIP.with(|f| f.get() == Some(kind))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1x3 {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        width: usize,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    LogSoftmax {
        input: Var,
        k: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    BatchNormFrozen {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    SliceBatch {
        input: Var,
        offset: usize,
    },
    ConcatBatch(Vec<Var>),
    Sum(Var),
    Mean(Var),
    FocalNll {
        logp: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        gamma: f64,
        k: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv1x3 { .. } => OpKind::Conv1x3,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::AddN(_) => OpKind::AddN,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::MaxPool1d { .. } => OpKind::MaxPool1d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormFrozen { .. } => OpKind::BatchNormFrozen,
            Op::SliceBatch { .. } => OpKind::SliceBatch,
            Op::ConcatBatch(_) => OpKind::ConcatBatch,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::FocalNll { .. } => OpKind::FocalNll,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    w_in: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Output positions `j` for kernel tap `k` that read inside the input.
    fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi_pos = self.w_in + self.padding - 1;
        let hi = if hi_pos < k {
            0
        } else {
            ((hi_pos - k) / self.stride + 1).min(self.w_out)
        };
        lo..hi.max(lo)
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

/// Statistics computed by a training-mode batch norm, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Splits a feature-map shape into `(batch, channels, width)`.
fn feature_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match shape {
        [c, 1, w] => Ok((1, *c, *w, false)),
        [b, c, 1, w] => Ok((*b, *c, *w, true)),
        _ => Err(Error::shape(
            op,
            format!("expected [c,1,w] or [b,c,1,w], got {shape:?}"),
        )),
    }
}

fn feature_shape(batched: bool, b: usize, c: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![b, c, 1, w]
    } else {
        vec![c, 1, w]
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if check_numerics() {
            assert!(
                value.all_finite(),
                "non-finite output from {:?} (node {})",
                op.kind(),
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data_of(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records `t` as an input; it takes part in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter identified by `id`.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        value.set_requires_grad(true);
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// 1x3 cross-correlation along the temporal axis.
    ///
    /// `input` is `[c,1,w]` or `[b,c,1,w]`, `weight` is `[c',3,1,c]`, `bias`
    /// is `[c']`. Output width is `(w + 2*padding - 3) / stride + 1`.
    pub fn conv1x3(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (b, c, w, batched) = feature_dims("conv1x3", self.shape_of(input))?;
        let ws = self.shape_of(weight);
        let c_out = match ws {
            [o, 3, 1, ci] if *ci == c => *o,
            _ => {
                return Err(Error::shape(
                    "conv1x3",
                    format!("weight {ws:?} incompatible with {c} input channels (want [c',3,1,{c}])"),
                ))
            }
        };
        if let Some(bv) = bias {
            if self.shape_of(bv) != [c_out] {
                return Err(Error::shape(
                    "conv1x3",
                    format!("bias {:?} must be [{c_out}]", self.shape_of(bv)),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::shape("conv1x3", "stride must be positive"));
        }
        if w + 2 * padding < 3 {
            return Err(Error::shape(
                "conv1x3",
                format!("width {w} with padding {padding} is shorter than the kernel"),
            ));
        }
        let w_out = (w + 2 * padding - 3) / stride + 1;
        let geom = ConvGeom {
            batch: b,
            c_in: c,
            c_out,
            w_in: w,
            w_out,
            stride,
            padding,
        };
        let x = self.data_of(input);
        let wt = self.data_of(weight);
        let mut y = vec![0.0; b * c_out * w_out];
        for bi in 0..b {
            for o in 0..c_out {
                let out = &mut y[(bi * c_out + o) * w_out..][..w_out];
                if let Some(bv) = bias {
                    out.fill(self.nodes[bv.0].value.data()[o]);
                }
                for k in 0..3 {
                    let range = geom.valid_range(k);
                    for ci in 0..c {
                        let wv = wt[(o * 3 + k) * c + ci];
                        let row = &x[(bi * c + ci) * w..][..w];
                        for j in range.clone() {
                            out[j] += wv * row[j * stride + k - padding];
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new(&feature_shape(batched, b, c_out, w_out), y)?;
        Ok(self.push(
            value,
            Op::Conv1x3 {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape_of(a), self.shape_of(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let ad = self.data_of(a);
        let bd = self.data_of(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..][..n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..][..n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("add_n", "no operands"))?;
        let mut acc = self.data_of(first).to_vec();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            acc.iter_mut().zip(self.data_of(x)).for_each(|(a, v)| *a += v);
        }
        let value = Tensor::new(self.shape_of(first), acc)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::AddN(xs.to_vec()), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape_of(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data_of(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape_of(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data_of(x).iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape_of(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data_of(x).iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.shape_of(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Max pooling along time. Ties go to the lowest index.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (b, c, w, batched) = feature_dims("maxpool1d", self.shape_of(input))?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("maxpool1d", "window and stride must be positive"));
        }
        if window > w {
            return Err(Error::shape("maxpool1d", format!("window {window} exceeds width {w}")));
        }
        let w_out = (w - window) / stride + 1;
        let x = self.data_of(input);
        let mut out = Vec::with_capacity(b * c * w_out);
        let mut argmax = Vec::with_capacity(b * c * w_out);
        for row in 0..b * c {
            let base = row * w;
            for j in 0..w_out {
                let start = base + j * stride;
                let mut best = start;
                for idx in start + 1..start + window {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(&feature_shape(batched, b, c, w_out), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool1d { input, argmax }, rg))
    }

    /// Mean over the temporal axis: `[c,1,w] -> [c]`, `[b,c,1,w] -> [b,c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, w, batched) = feature_dims("global_avg_pool", self.shape_of(input))?;
        let x = self.data_of(input);
        let out: Vec<f64> = x
            .chunks_exact(w)
            .map(|row| row.iter().sum::<f64>() / w as f64)
            .collect();
        let shape = if batched { vec![b, c] } else { vec![c] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool { input, width: w }, rg))
    }

    /// Affine map `weight · input + bias` for `[n]` or row-wise for `[b,n]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, n, batched) = match self.shape_of(input) {
            [n] => (1, *n, false),
            [b, n] => (*b, *n, true),
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("input must be [n] or [b,n], got {s:?}"),
                ))
            }
        };
        let m = match self.shape_of(weight) {
            [m, n2] if *n2 == n => *m,
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("weight {s:?} incompatible with input width {n}"),
                ))
            }
        };
        if self.shape_of(bias) != [m] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias {:?} must be [{m}]", self.shape_of(bias)),
            ));
        }
        let x = self.data_of(input);
        let wt = self.data_of(weight);
        let bs = self.data_of(bias);
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let xr = &x[r * n..][..n];
            for o in 0..m {
                let wr = &wt[o * n..][..n];
                let dot: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
                out.push(dot + bs[o]);
            }
        }
        let shape = if batched { vec![rows, m] } else { vec![m] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            Op::FullyConnected {
                input,
                weight,
                bias,
                rows,
                n_in: n,
                n_out: m,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis of `[k]` or `[b,k]`.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let k = match self.shape_of(input) {
            [k] | [_, k] => *k,
            s => return Err(Error::shape("log_softmax", format!("expected [k] or [b,k], got {s:?}"))),
        };
        let x = self.data_of(input);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(self.shape_of(input), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::LogSoftmax { input, k }, rg))
    }

    fn norm_dims(&self, op: &'static str, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (b, c, w) = match self.shape_of(input) {
            [b, c] => (*b, *c, 1),
            [b, c, 1, w] => (*b, *c, *w),
            s => return Err(Error::shape(op, format!("expected [b,c] or [b,c,1,w], got {s:?}"))),
        };
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "affine params {:?}/{:?} must be [{c}]",
                    self.shape_of(gamma),
                    self.shape_of(beta)
                ),
            ));
        }
        Ok((b, c, w))
    }

    /// Training-mode batch normalization: per-channel statistics over batch
    /// and width, then `gamma * xhat + beta`. Returns the batch statistics so
    /// the caller can update running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, w) = self.norm_dims("batch_norm", input, gamma, beta)?;
        let x = self.data_of(input);
        let g = self.data_of(gamma);
        let be = self.data_of(beta);
        let count = b * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                mean[ci] += x[(bi * c + ci) * w..][..w].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for bi in 0..b {
            for ci in 0..c {
                var[ci] += x[(bi * c + ci) * w..][..w]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * w;
                for j in off..off + w {
                    xhat[j] = (x[j] - mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + be[ci];
                }
            }
        }
        let value = Tensor::new(self.shape_of(input), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, w),
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, w) = self.norm_dims("batch_norm", input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length mismatch"));
        }
        let x = self.data_of(input);
        let g = self.data_of(gamma);
        let be = self.data_of(beta);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * w;
                for j in off..off + w {
                    xhat[j] = (x[j] - mean[ci]) * inv_std[ci];
                    out[j] = g[ci] * xhat[j] + be[ci];
                }
            }
        }
        let value = Tensor::new(self.shape_of(input), out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNormFrozen {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (b, c, w),
            },
            rg,
        ))
    }

    /// Rows `offset..offset+len` along the leading axis.
    pub fn slice_batch(&mut self, input: Var, offset: usize, len: usize) -> Result<Var> {
        let shape = self.shape_of(input).to_vec();
        if len == 0 || shape.len() < 2 || offset + len > shape[0] {
            return Err(Error::shape(
                "slice_batch",
                format!("rows {offset}..{} of {shape:?}", offset + len),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data_of(input)[offset * row..(offset + len) * row].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let value = Tensor::new(&new_shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::SliceBatch { input, offset }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_batch", "no operands"))?;
        let tail = self.shape_of(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape_of(x);
            if s.len() < 2 || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("{s:?} does not match trailing dims {tail:?}"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.data_of(x));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::ConcatBatch(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data_of(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data_of(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `w[y] * (1 - p_y)^gamma * (-log p_y)` where
    /// `log p` is given as `logp` (`[k]` or `[b,k]`).
    pub fn focal_nll(&mut self, logp: Var, labels: &[usize], class_weights: &[f64], gamma: f64) -> Result<Var> {
        let (rows, k) = match self.shape_of(logp) {
            [k] => (1, *k),
            [b, k] => (*b, *k),
            s => return Err(Error::shape("focal_nll", format!("expected [k] or [b,k], got {s:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::shape(
                "focal_nll",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if class_weights.len() != k {
            return Err(Error::shape(
                "focal_nll",
                format!("{} class weights for {k} classes", class_weights.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let lp = self.data_of(logp);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let l = lp[r * k + y];
            let p = l.exp();
            total += -class_weights[y] * (1.0 - p).max(0.0).powf(gamma) * l;
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(logp);
        Ok(self.push(
            value,
            Op::FocalNll {
                logp,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                gamma,
                k,
            },
            rg,
        ))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires one. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let shape = self.shape_of(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        let sign = if fault::flipped(node.op.kind()) { -1.0 } else { 1.0 };
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1x3 {
                input,
                weight,
                bias,
                geom,
            } => {
                let g = *geom;
                let x = self.data_of(*input);
                let wt = self.data_of(*weight);
                let want_x = self.rg(*input);
                let want_w = self.rg(*weight);
                let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0; wt.len()] } else { Vec::new() };
                for bi in 0..g.batch {
                    for o in 0..g.c_out {
                        let go = &gout[(bi * g.c_out + o) * g.w_out..][..g.w_out];
                        for k in 0..3 {
                            let range = g.valid_range(k);
                            for ci in 0..g.c_in {
                                let widx = (o * 3 + k) * g.c_in + ci;
                                let xoff = (bi * g.c_in + ci) * g.w_in;
                                if want_x {
                                    let wv = wt[widx];
                                    for j in range.clone() {
                                        dx[xoff + j * g.stride + k - g.padding] += wv * go[j];
                                    }
                                }
                                if want_w {
                                    let mut acc = 0.0;
                                    for j in range.clone() {
                                        acc += x[xoff + j * g.stride + k - g.padding] * go[j];
                                    }
                                    dw[widx] += acc;
                                }
                            }
                        }
                    }
                }
                if want_x {
                    pending.push((*input, dx));
                }
                if want_w {
                    pending.push((*weight, dw));
                }
                if let Some(bv) = bias {
                    let mut db = vec![0.0; g.c_out];
                    for bi in 0..g.batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gout[(bi * g.c_out + o) * g.w_out..][..g.w_out].iter().sum::<f64>();
                        }
                    }
                    pending.push((*bv, db));
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.data_of(*a);
                let bd = self.data_of(*b);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| gout[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    pending.push((*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            db[p * n + j] = (0..m).map(|i| ad[i * k + p] * gout[i * n + j]).sum();
                        }
                    }
                    pending.push((*b, db));
                }
            }
            Op::Reshape(x) => pending.push((*x, gout.to_vec())),
            Op::Add(a, b) => {
                pending.push((*a, gout.to_vec()));
                pending.push((*b, gout.to_vec()));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    pending.push((x, gout.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                let ad = self.data_of(*a);
                let bd = self.data_of(*b);
                pending.push((*a, gout.iter().zip(bd).map(|(g, v)| g * v).collect()));
                pending.push((*b, gout.iter().zip(ad).map(|(g, v)| g * v).collect()));
            }
            Op::Scale(x, f) => pending.push((*x, gout.iter().map(|g| g * f).collect())),
            Op::Relu(x) => {
                let xd = self.data_of(*x);
                pending.push((
                    *x,
                    gout.iter()
                        .zip(xd)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Tanh(x) => {
                let yd = node.value.data();
                pending.push((*x, gout.iter().zip(yd).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::MaxPool1d { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (g, &src) in gout.iter().zip(argmax) {
                    dx[src] += g;
                }
                pending.push((*input, dx));
            }
            Op::GlobalAvgPool { input, width } => {
                let w = *width;
                let mut dx = Vec::with_capacity(gout.len() * w);
                for g in gout {
                    dx.extend(std::iter::repeat_n(g / w as f64, w));
                }
                pending.push((*input, dx));
            }
            Op::FullyConnected {
                input,
                weight,
                bias,
                rows,
                n_in,
                n_out,
            } => {
                let (rows, n, m) = (*rows, *n_in, *n_out);
                let x = self.data_of(*input);
                let wt = self.data_of(*weight);
                if self.rg(*input) {
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        for o in 0..m {
                            let go = gout[r * m + o];
                            let wr = &wt[o * n..][..n];
                            dx[r * n..][..n].iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                        }
                    }
                    pending.push((*input, dx));
                }
                if self.rg(*weight) {
                    let mut dw = vec![0.0; m * n];
                    for r in 0..rows {
                        let xr = &x[r * n..][..n];
                        for o in 0..m {
                            let go = gout[r * m + o];
                            dw[o * n..][..n].iter_mut().zip(xr).for_each(|(d, xv)| *d += go * xv);
                        }
                    }
                    pending.push((*weight, dw));
                }
                let mut db = vec![0.0; m];
                for r in 0..rows {
                    db.iter_mut().zip(&gout[r * m..][..m]).for_each(|(d, g)| *d += g);
                }
                pending.push((*bias, db));
            }
            Op::LogSoftmax { input, k } => {
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(*k).zip(gout.chunks_exact(*k)) {
                    let gsum: f64 = gr.iter().sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, g)| g - yv.exp() * gsum));
                }
                pending.push((*input, dx));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
            } => {
                let (b, c, w) = *dims;
                let g = self.data_of(*gamma);
                let count = (b * w) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * w;
                        for j in off..off + w {
                            dgamma[ci] += gout[j] * xhat[j];
                            dbeta[ci] += gout[j];
                        }
                    }
                }
                if self.rg(*input) {
                    // dxhat = gout * gamma; sums below are over the channel.
                    let mut dx = vec![0.0; xhat.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * w;
                            let sum_d = dbeta[ci] * g[ci];
                            let sum_dx = dgamma[ci] * g[ci];
                            for j in off..off + w {
                                let dxhat = gout[j] * g[ci];
                                dx[j] = inv_std[ci] / count * (count * dxhat - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    }
                    pending.push((*input, dx));
                }
                pending.push((*gamma, dgamma));
                pending.push((*beta, dbeta));
            }
            Op::BatchNormFrozen {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                dims,
            } => {
                let (b, c, w) = *dims;
                let g = self.data_of(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xhat.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * w;
                        for j in off..off + w {
                            dgamma[ci] += gout[j] * xhat[j];
                            dbeta[ci] += gout[j];
                            dx[j] = gout[j] * g[ci] * inv_std[ci];
                        }
                    }
                }
                pending.push((*input, dx));
                pending.push((*gamma, dgamma));
                pending.push((*beta, dbeta));
            }
            Op::SliceBatch { input, offset } => {
                let src = self.value(*input);
                let row: usize = src.shape()[1..].iter().product();
                let mut dx = vec![0.0; src.numel()];
                dx[offset * row..offset * row + gout.len()].copy_from_slice(gout);
                pending.push((*input, dx));
            }
            Op::ConcatBatch(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    pending.push((x, gout[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                pending.push((*x, vec![gout[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                pending.push((*x, vec![gout[0] / n as f64; n]));
            }
            Op::FocalNll {
                logp,
                labels,
                weights,
                gamma,
                k,
            } => {
                let lp = self.data_of(*logp);
                let rows = labels.len();
                let scale = gout[0] / rows as f64;
                let mut dl = vec![0.0; lp.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let l = lp[r * k + y];
                    let p = l.exp();
                    let q = (1.0 - p).max(0.0);
                    // d/dl of -w (1-p)^g l with p = e^l
                    let mut d = -q.powf(*gamma);
                    if *gamma != 0.0 && q > 0.0 {
                        d += gamma * p * l * q.powf(gamma - 1.0);
                    }
                    dl[r * k + y] = scale * weights[y] * d;
                }
                pending.push((*logp, dl));
            }
        }
        for (v, mut g) in pending {
            if sign < 0.0 {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.accumulate(v, g);
        }
    }

    /// Gradients of every registered parameter, keyed by parameter id. The
    /// same id may appear more than once if it was registered repeatedly.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }
}
