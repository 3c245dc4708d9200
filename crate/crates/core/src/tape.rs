//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node holding the output value plus whatever the backward rule
//! needs, and return a [`Var`] handle. The tape is rebuilt per forward pass;
//! nothing is cached across passes, so variable graph sizes per batch are
//! free. [`Tape::backward`] replays nodes in exact reverse execution order
//! and accumulates gradients for every node on a parameter path.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Mask, Tensor};
use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Running statistics of one batch-norm layer. Updated in training mode,
/// read in inference mode. Not trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(features: usize) -> Self {
        BnRunning {
            mean: Tensor::zeros([features]),
            var: Tensor::filled([features], T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

struct BatchNormRecord<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mask: Arc<Mask>,
    /// Masked normalized input, same shape as x; zeros at padded positions.
    xhat: Tensor<T>,
    /// Per-feature 1/sqrt(var + eps) actually used by this pass.
    inv_std: Vec<T>,
    /// Valid (batch, node) positions.
    count: usize,
    training: bool,
}

enum Op<T> {
    Leaf,
    /// a: [..., K] with leading dims folded, b: [K, N]
    Matmul { a: Var, b: Var },
    /// a: [B, M, K], b: [B, K, N]
    Bmm { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: T },
    /// bias broadcast over the last axis
    AddBias { x: Var, bias: Var },
    Activation { x: Var, kind: Activation },
    MaskedSoftmax { x: Var, mask: Arc<Mask>, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    /// keep[i] is 0 or 1/(1-rate)
    Dropout { x: Var, keep: Arc<[T]> },
    BatchNorm(Box<BatchNormRecord<T>>),
    /// argmax[b*F + f] = flat index into x of the max element
    MaskedMaxPool { x: Var, argmax: Arc<[usize]> },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Arc<[usize]>,
    },
    Sum { x: Var },
    /// Row softmax over contiguous segments, per column.
    SegmentSoftmax {
        x: Var,
        segments: Arc<[(usize, usize)]>,
    },
    /// out[b, i, j] = weights[p, column] for pairs[p] = (b, i, j)
    ScatterAdjacency {
        weights: Var,
        column: usize,
        pairs: Arc<[(usize, usize, usize)]>,
    },
    /// Y = D^{-1/2} (A + I) D^{-1/2} per batch item, degrees saved.
    NormalizeAdjacency { a: Var, degrees: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input that never needs gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product. `a` may carry extra leading axes which are folded
    /// into rows; `b` must be a matrix. `[..., K] x [K, N] -> [..., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() < 2 || bsh.len() != 2 {
            return Err(mismatch());
        }
        let k = ash[ash.len() - 1];
        if bsh[0] != k {
            return Err(mismatch());
        }
        let m: usize = ash[..ash.len() - 1].iter().product();
        let n = bsh[1];
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Matmul { a, b }, requires))
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        let mismatch = || Error::Shape {
            op: "bmm",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        };
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(mismatch());
        }
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            matmul_nn(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new([bt, m, n], out)?, Op::Bmm { a, b }, requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, requires))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "sub",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub { a, b }, requires))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let requires = self.requires(x);
        self.push(out, Op::Scale { x, factor }, requires)
    }

    /// Add a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xsh, bsh) = (self.value(x).shape(), self.value(bias).shape());
        if bsh.len() != 1 || xsh.is_empty() || xsh[xsh.len() - 1] != bsh[0] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xsh.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let f = bsh[0];
        let mut out = self.value(x).clone();
        let b = self.nodes[bias.0].value.data();
        for chunk in out.data_mut().chunks_exact_mut(f) {
            for (o, &bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let requires = self.requires(x) || self.requires(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, requires))
    }

    /// Elementwise nonlinearity.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Tanh => self.value(x).map(|v| v.tanh()),
        };
        let requires = self.requires(x);
        self.push(out, Op::Activation { x, kind }, requires)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax over `axis` restricted to unmasked entries; masked positions
    /// output exactly 0. Every slice must keep at least one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask, axis: usize) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if mask.shape() != xsh.as_slice() {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: xsh,
                rhs: mask.shape().to_vec(),
            });
        }
        if axis >= xsh.len() {
            return Err(Error::Usage(alloc::format!(
                "softmax axis {axis} out of range for shape {xsh:?}"
            )));
        }
        let extent = xsh[axis];
        let inner: usize = xsh[axis + 1..].iter().product();
        let outer: usize = xsh[..axis].iter().product();
        let data = self.value(x).data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = T::neg_infinity();
                let mut any = false;
                for e in 0..extent {
                    let idx = base + e * inner;
                    if mask.data()[idx] {
                        any = true;
                        if data[idx] > max {
                            max = data[idx];
                        }
                    }
                }
                if !any {
                    return Err(Error::Degenerate(alloc::format!(
                        "masked_softmax: slice (outer {o}, inner {i}) is fully masked"
                    )));
                }
                let mut sum = T::zero();
                for e in 0..extent {
                    let idx = base + e * inner;
                    if mask.data()[idx] {
                        let v = (data[idx] - max).exp();
                        out[idx] = v;
                        sum += v;
                    }
                }
                for e in 0..extent {
                    let idx = base + e * inner;
                    if mask.data()[idx] {
                        out[idx] /= sum;
                    }
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor::new(self.value(x).shape().to_vec(), out)?,
            Op::MaskedSoftmax {
                x,
                mask: Arc::new(mask.clone()),
                axis,
            },
            requires,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Usage(alloc::format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total = 0usize;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != first.len()
                || sh
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sh.to_vec(),
                });
            }
            total += sh[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let sh = self.value(p).shape();
            let e = sh[axis];
            let data = self.value(p).data();
            for o in 0..outer {
                let src = &data[o * e * inner..(o + 1) * e * inner];
                let dst_base = o * total * inner + offset * inner;
                out[dst_base..dst_base + e * inner].copy_from_slice(src);
            }
            offset += e;
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            requires,
        ))
    }

    /// Inverted dropout. In training each entry is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1-rate); in inference this is
    /// the identity (the input var is returned unchanged).
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(alloc::format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.next_f64() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let requires = self.requires(x);
        Ok(self.push(
            Tensor::new(self.value(x).shape().to_vec(), data)?,
            Op::Dropout {
                x,
                keep: keep.into(),
            },
            requires,
        ))
    }

    /// Batch normalization over valid (batch, node) positions of `x`
    /// ([B, N, F], mask [B, N]). Statistics are computed per feature over
    /// valid positions only; padded outputs stay exactly zero. In training
    /// mode `running` is updated with momentum (unbiased variance, PyTorch
    /// convention); inference normalizes with the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        mask: &Mask,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning<T>,
        training: bool,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 {
            return Err(Error::Usage(alloc::format!(
                "batch_norm expects [B, N, F] input, got {xsh:?}"
            )));
        }
        let (b, n, f) = (xsh[0], xsh[1], xsh[2]);
        if mask.shape() != [b, n] {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: xsh,
                rhs: mask.shape().to_vec(),
            });
        }
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: vec![f],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let count = mask.count_valid();
        if count == 0 {
            return Err(Error::Degenerate(
                "batch_norm: no valid positions in batch".into(),
            ));
        }
        let data = self.value(x).data();
        let eps = T::from_f64(cfg.eps);

        let (mean, inv_std) = if training {
            let mut mean = vec![T::zero(); f];
            for (pos, &valid) in mask.data().iter().enumerate() {
                if valid {
                    let row = &data[pos * f..(pos + 1) * f];
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
            }
            let cnt = T::from_f64(count as f64);
            for m in &mut mean {
                *m /= cnt;
            }
            let mut var = vec![T::zero(); f];
            for (pos, &valid) in mask.data().iter().enumerate() {
                if valid {
                    let row = &data[pos * f..(pos + 1) * f];
                    for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *vv += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= cnt;
            }
            // running update: unbiased variance when possible
            let mom = T::from_f64(cfg.momentum);
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ((rm, &m), (rv, &v)) in running
                .mean
                .data_mut()
                .iter_mut()
                .zip(&mean)
                .zip(running.var.data_mut().iter_mut().zip(&var))
            {
                *rm = (T::one() - mom) * *rm + mom * m;
                *rv = (T::one() - mom) * *rv + mom * v * unbias;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let mean = running.mean.data().to_vec();
            let inv_std: Vec<T> = running
                .var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (mean, inv_std)
        };

        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (pos, &valid) in mask.data().iter().enumerate() {
            if valid {
                let row = &data[pos * f..(pos + 1) * f];
                for j in 0..f {
                    let h = (row[j] - mean[j]) * inv_std[j];
                    xhat[pos * f + j] = h;
                    out[pos * f + j] = g[j] * h + be[j];
                }
            }
        }
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let record = BatchNormRecord {
            x,
            gamma,
            beta,
            mask: Arc::new(mask.clone()),
            xhat: Tensor::new([b, n, f], xhat)?,
            inv_std,
            count,
            training,
        };
        Ok(self.push(
            Tensor::new([b, n, f], out)?,
            Op::BatchNorm(Box::new(record)),
            requires,
        ))
    }

    /// Per-feature maximum over valid nodes: [B, N, F] -> [B, F]. The
    /// gradient flows to exactly one argmax node per (item, feature); ties
    /// break toward the lowest node index.
    pub fn masked_max_pool(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 {
            return Err(Error::Usage(alloc::format!(
                "masked_max_pool expects [B, N, F] input, got {xsh:?}"
            )));
        }
        let (b, n, f) = (xsh[0], xsh[1], xsh[2]);
        if mask.shape() != [b, n] {
            return Err(Error::Shape {
                op: "masked_max_pool",
                lhs: xsh,
                rhs: mask.shape().to_vec(),
            });
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); b * f];
        let mut argmax = vec![0usize; b * f];
        for bi in 0..b {
            let mut seen = false;
            for j in 0..f {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ni in 0..n {
                    if mask.data()[bi * n + ni] {
                        let idx = (bi * n + ni) * f + j;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                if best_idx != usize::MAX {
                    seen = true;
                    out[bi * f + j] = best;
                    argmax[bi * f + j] = best_idx;
                }
            }
            if !seen {
                return Err(Error::Degenerate(alloc::format!(
                    "masked_max_pool: batch item {bi} has no valid nodes"
                )));
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor::new([b, f], out)?,
            Op::MaskedMaxPool {
                x,
                argmax: argmax.into(),
            },
            requires,
        ))
    }

    /// Mean over the batch of -log softmax(logits)[label], max-shifted for
    /// stability. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lsh = self.value(logits).shape().to_vec();
        if lsh.len() != 2 {
            return Err(Error::Usage(alloc::format!(
                "softmax_cross_entropy expects [B, C] logits, got {lsh:?}"
            )));
        }
        let (b, c) = (lsh[0], lsh[1]);
        if labels.len() != b {
            return Err(Error::Usage(alloc::format!(
                "got {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for bi in 0..b {
            let row = &data[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[bi * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[bi * c + j] /= sum;
            }
            // -log p = log(sum) - (x - max)
            loss += sum.ln() - (row[labels[bi]] - max);
        }
        loss /= T::from_f64(b as f64);
        let requires = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs: Tensor::new([b, c], probs)?,
                labels: labels.to_vec().into(),
            },
            requires,
        ))
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let requires = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, requires)
    }

    /// Softmax along rows of `x` ([P, L]) within each contiguous segment,
    /// independently per column. Segments must tile 0..P in order.
    pub fn segment_softmax(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 2 {
            return Err(Error::Usage(alloc::format!(
                "segment_softmax expects [P, L] input, got {xsh:?}"
            )));
        }
        let (p, l) = (xsh[0], xsh[1]);
        let mut cursor = 0usize;
        for &(start, len) in segments {
            if start != cursor || len == 0 {
                return Err(Error::Usage("segments must tile rows in order".into()));
            }
            cursor += len;
        }
        if cursor != p {
            return Err(Error::Usage(alloc::format!(
                "segments cover {cursor} rows of {p}"
            )));
        }
        let data = self.value(x).data();
        let mut out = vec![T::zero(); p * l];
        for &(start, len) in segments {
            for col in 0..l {
                let mut max = T::neg_infinity();
                for r in start..start + len {
                    if data[r * l + col] > max {
                        max = data[r * l + col];
                    }
                }
                let mut sum = T::zero();
                for r in start..start + len {
                    let e = (data[r * l + col] - max).exp();
                    out[r * l + col] = e;
                    sum += e;
                }
                for r in start..start + len {
                    out[r * l + col] /= sum;
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(
            Tensor::new([p, l], out)?,
            Op::SegmentSoftmax {
                x,
                segments: segments.to_vec().into(),
            },
            requires,
        ))
    }

    /// Build a dense [B, N, N] adjacency by scattering column `column` of
    /// `weights` ([P, L]) to positions `pairs[p] = (b, i, j)`. Unlisted
    /// positions are exactly zero. Pair positions must be distinct.
    pub fn scatter_adjacency(
        &mut self,
        weights: Var,
        column: usize,
        pairs: &Arc<[(usize, usize, usize)]>,
        batch: usize,
        nodes: usize,
    ) -> Result<Var> {
        let wsh = self.value(weights).shape().to_vec();
        if wsh.len() != 2 || wsh[0] != pairs.len() || column >= wsh[1] {
            return Err(Error::Usage(alloc::format!(
                "scatter_adjacency: weights {wsh:?}, {} pairs, column {column}",
                pairs.len()
            )));
        }
        let data = self.value(weights).data();
        let l = wsh[1];
        let mut out = vec![T::zero(); batch * nodes * nodes];
        for (p, &(b, i, j)) in pairs.iter().enumerate() {
            if b >= batch || i >= nodes || j >= nodes {
                return Err(Error::Usage(alloc::format!(
                    "scatter_adjacency: pair ({b}, {i}, {j}) out of bounds"
                )));
            }
            out[(b * nodes + i) * nodes + j] = data[p * l + column];
        }
        let requires = self.requires(weights);
        Ok(self.push(
            Tensor::new([batch, nodes, nodes], out)?,
            Op::ScatterAdjacency {
                weights,
                column,
                pairs: Arc::clone(pairs),
            },
            requires,
        ))
    }

    /// Differentiable symmetric normalization with self-loops applied per
    /// batch item: Y = D^{-1/2} (A + I) D^{-1/2}, D_ii = 1 + sum_j A_ij.
    pub fn normalize_adjacency(&mut self, a: Var) -> Result<Var> {
        let ash = self.value(a).shape().to_vec();
        if ash.len() != 3 || ash[1] != ash[2] {
            return Err(Error::Usage(alloc::format!(
                "normalize_adjacency expects [B, N, N] input, got {ash:?}"
            )));
        }
        let (b, n) = (ash[0], ash[1]);
        let data = self.value(a).data();
        let mut degrees = vec![T::zero(); b * n];
        for bi in 0..b {
            for i in 0..n {
                let row = &data[(bi * n + i) * n..(bi * n + i + 1) * n];
                let mut d = T::one();
                for &v in row {
                    d += v;
                }
                degrees[bi * n + i] = d;
            }
        }
        let mut out = vec![T::zero(); b * n * n];
        for bi in 0..b {
            let d = &degrees[bi * n..(bi + 1) * n];
            for i in 0..n {
                let di = T::one() / d[i].sqrt();
                for j in 0..n {
                    let mut v = data[(bi * n + i) * n + j];
                    if i == j {
                        v += T::one();
                    }
                    out[(bi * n + i) * n + j] = v * di / d[j].sqrt();
                }
            }
        }
        let requires = self.requires(a);
        Ok(self.push(
            Tensor::new([b, n, n], out)?,
            Op::NormalizeAdjacency {
                a,
                degrees: Tensor::new([b, n], degrees)?,
            },
            requires,
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node on
    /// a parameter path; parameters the loss never touched yield `None`
    /// (callers materialize zeros, see [`Gradients::get`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(
            self.value(loss).shape().to_vec(),
            T::one(),
        ));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        v: Var,
    ) -> &'g mut Tensor<T> {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape().to_vec()));
        }
        slot.as_mut().unwrap()
    }

    fn backprop_node(
        &self,
        idx: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ash = self.value(*a).shape();
                let k = ash[ash.len() - 1];
                let m: usize = ash[..ash.len() - 1].iter().product();
                let n = self.value(*b).shape()[1];
                if self.requires(*a) {
                    // dA = dY * B^T; B is stored [K, N], so this is the nt kernel
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(gy.data(), self.value(*b).data(), m, n, k, &mut da);
                    acc_slice(self.grad_slot(grads, *a), &da);
                }
                if self.requires(*b) {
                    // dB = A^T * dY
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(self.value(*a).data(), gy.data(), m, k, n, &mut db);
                    acc_slice(self.grad_slot(grads, *b), &db);
                }
            }
            Op::Bmm { a, b } => {
                let ash = self.value(*a).shape();
                let bsh = self.value(*b).shape();
                let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
                if self.requires(*a) {
                    let bdat = self.value(*b).data();
                    let mut da = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        let btr = transpose(&bdat[i * k * n..(i + 1) * k * n], k, n);
                        matmul_nn(
                            &gy.data()[i * m * n..(i + 1) * m * n],
                            &btr,
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc_slice(self.grad_slot(grads, *a), &da);
                }
                if self.requires(*b) {
                    let adat = self.value(*a).data();
                    let mut db = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        matmul_tn(
                            &adat[i * m * k..(i + 1) * m * k],
                            &gy.data()[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    acc_slice(self.grad_slot(grads, *b), &db);
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    acc_slice(self.grad_slot(grads, *a), gy.data());
                }
                if self.requires(*b) {
                    acc_slice(self.grad_slot(grads, *b), gy.data());
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    acc_slice(self.grad_slot(grads, *a), gy.data());
                }
                if self.requires(*b) {
                    let slot = self.grad_slot(grads, *b);
                    for (g, &v) in slot.data_mut().iter_mut().zip(gy.data()) {
                        *g -= v;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.requires(*x) {
                    let slot = self.grad_slot(grads, *x);
                    for (g, &v) in slot.data_mut().iter_mut().zip(gy.data()) {
                        *g += v * *factor;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.requires(*x) {
                    acc_slice(self.grad_slot(grads, *x), gy.data());
                }
                if self.requires(*bias) {
                    let f = self.value(*bias).len();
                    let slot = self.grad_slot(grads, *bias);
                    for chunk in gy.data().chunks_exact(f) {
                        for (g, &v) in slot.data_mut().iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                if self.requires(*x) {
                    let xv = self.value(*x).data();
                    let yv = self.nodes[idx].value.data();
                    let slot = self.grad_slot(grads, *x);
                    match kind {
                        Activation::Relu => {
                            for ((g, &gyv), &xin) in
                                slot.data_mut().iter_mut().zip(gy.data()).zip(xv)
                            {
                                if xin > T::zero() {
                                    *g += gyv;
                                }
                            }
                        }
                        Activation::Tanh => {
                            for ((g, &gyv), &y) in
                                slot.data_mut().iter_mut().zip(gy.data()).zip(yv)
                            {
                                *g += gyv * (T::one() - y * y);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask, axis } => {
                if self.requires(*x) {
                    let y = self.nodes[idx].value.data();
                    let sh = self.nodes[idx].value.shape();
                    let extent = sh[*axis];
                    let inner: usize = sh[*axis + 1..].iter().product();
                    let outer: usize = sh[..*axis].iter().product();
                    let slot = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * extent * inner + i;
                            let mut dot = T::zero();
                            for e in 0..extent {
                                let p = base + e * inner;
                                dot += y[p] * gy.data()[p];
                            }
                            for e in 0..extent {
                                let p = base + e * inner;
                                if mask.data()[p] {
                                    slot.data_mut()[p] += y[p] * (gy.data()[p] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let sh = self.nodes[idx].value.shape();
                let inner: usize = sh[*axis + 1..].iter().product();
                let outer: usize = sh[..*axis].iter().product();
                let total = sh[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let e = self.value(p).shape()[*axis];
                    if self.requires(p) {
                        let slot = self.grad_slot(grads, p);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * e * inner;
                            for q in 0..e * inner {
                                slot.data_mut()[dst + q] += gy.data()[src + q];
                            }
                        }
                    }
                    offset += e;
                }
            }
            Op::Dropout { x, keep } => {
                if self.requires(*x) {
                    let slot = self.grad_slot(grads, *x);
                    for ((g, &gyv), &k) in slot.data_mut().iter_mut().zip(gy.data()).zip(keep.iter())
                    {
                        *g += gyv * k;
                    }
                }
            }
            Op::BatchNorm(rec) => {
                self.backprop_batch_norm(rec, gy, grads)?;
            }
            Op::MaskedMaxPool { x, argmax } => {
                if self.requires(*x) {
                    let slot = self.grad_slot(grads, *x);
                    for (&src, &gyv) in argmax.iter().zip(gy.data()) {
                        slot.data_mut()[src] += gyv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                if self.requires(*logits) {
                    let (b, c) = (probs.shape()[0], probs.shape()[1]);
                    let scale = gy.data()[0] / T::from_f64(b as f64);
                    let slot = self.grad_slot(grads, *logits);
                    for bi in 0..b {
                        for j in 0..c {
                            let mut g = probs.data()[bi * c + j];
                            if labels[bi] == j {
                                g -= T::one();
                            }
                            slot.data_mut()[bi * c + j] += g * scale;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    let g = gy.data()[0];
                    let slot = self.grad_slot(grads, *x);
                    for s in slot.data_mut() {
                        *s += g;
                    }
                }
            }
            Op::SegmentSoftmax { x, segments } => {
                if self.requires(*x) {
                    let y = self.nodes[idx].value.data();
                    let l = self.nodes[idx].value.shape()[1];
                    let slot = self.grad_slot(grads, *x);
                    for &(start, len) in segments.iter() {
                        for col in 0..l {
                            let mut dot = T::zero();
                            for r in start..start + len {
                                dot += y[r * l + col] * gy.data()[r * l + col];
                            }
                            for r in start..start + len {
                                slot.data_mut()[r * l + col] +=
                                    y[r * l + col] * (gy.data()[r * l + col] - dot);
                            }
                        }
                    }
                }
            }
            Op::ScatterAdjacency {
                weights,
                column,
                pairs,
            } => {
                if self.requires(*weights) {
                    let n = self.nodes[idx].value.shape()[1];
                    let l = self.value(*weights).shape()[1];
                    let slot = self.grad_slot(grads, *weights);
                    for (p, &(b, i, j)) in pairs.iter().enumerate() {
                        slot.data_mut()[p * l + column] += gy.data()[(b * n + i) * n + j];
                    }
                }
            }
            Op::NormalizeAdjacency { a, degrees } => {
                if self.requires(*a) {
                    let y = self.nodes[idx].value.data();
                    let sh = self.nodes[idx].value.shape();
                    let (b, n) = (sh[0], sh[1]);
                    let slot = self.grad_slot(grads, *a);
                    for bi in 0..b {
                        let d = &degrees.data()[bi * n..(bi + 1) * n];
                        // c_k = (sum_j gy[k,j] y[k,j] + sum_i gy[i,k] y[i,k]) / (2 d_k)
                        let mut c = vec![T::zero(); n];
                        for i in 0..n {
                            for j in 0..n {
                                let g = gy.data()[(bi * n + i) * n + j]
                                    * y[(bi * n + i) * n + j];
                                c[i] += g;
                                c[j] += g;
                            }
                        }
                        for (ck, &dk) in c.iter_mut().zip(d) {
                            *ck /= T::from_f64(2.0) * dk;
                        }
                        for i in 0..n {
                            let di = T::one() / d[i].sqrt();
                            for j in 0..n {
                                let s = di / d[j].sqrt();
                                slot.data_mut()[(bi * n + i) * n + j] +=
                                    gy.data()[(bi * n + i) * n + j] * s - c[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_batch_norm(
        &self,
        rec: &BatchNormRecord<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let f = self.value(rec.gamma).len();
        let g = self.value(rec.gamma).data().to_vec();

        if self.requires(rec.gamma) {
            let slot = self.grad_slot(grads, rec.gamma);
            for (pos, &valid) in rec.mask.data().iter().enumerate() {
                if valid {
                    for j in 0..f {
                        slot.data_mut()[j] +=
                            gy.data()[pos * f + j] * rec.xhat.data()[pos * f + j];
                    }
                }
            }
        }
        if self.requires(rec.beta) {
            let slot = self.grad_slot(grads, rec.beta);
            for (pos, &valid) in rec.mask.data().iter().enumerate() {
                if valid {
                    for j in 0..f {
                        slot.data_mut()[j] += gy.data()[pos * f + j];
                    }
                }
            }
        }
        if self.requires(rec.x) {
            if rec.training {
                // dxhat = gy * gamma; dx = inv_std/M * (M*dxhat - sum(dxhat)
                //         - xhat * sum(dxhat * xhat)) over valid positions
                let m = T::from_f64(rec.count as f64);
                let mut sum_dxhat = vec![T::zero(); f];
                let mut sum_dxhat_xhat = vec![T::zero(); f];
                for (pos, &valid) in rec.mask.data().iter().enumerate() {
                    if valid {
                        for j in 0..f {
                            let dxh = gy.data()[pos * f + j] * g[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * rec.xhat.data()[pos * f + j];
                        }
                    }
                }
                let slot = self.grad_slot(grads, rec.x);
                for (pos, &valid) in rec.mask.data().iter().enumerate() {
                    if valid {
                        for j in 0..f {
                            let dxh = gy.data()[pos * f + j] * g[j];
                            let v = rec.inv_std[j] / m
                                * (m * dxh
                                    - sum_dxhat[j]
                                    - rec.xhat.data()[pos * f + j] * sum_dxhat_xhat[j]);
                            slot.data_mut()[pos * f + j] += v;
                        }
                    }
                }
            } else {
                let slot = self.grad_slot(grads, rec.x);
                for (pos, &valid) in rec.mask.data().iter().enumerate() {
                    if valid {
                        for j in 0..f {
                            slot.data_mut()[pos * f + j] +=
                                gy.data()[pos * f + j] * g[j] * rec.inv_std[j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by tape var, produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` was reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materializing zeros of `shape` when the loss never
    /// reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn acc_slice<T: Scalar>(slot: &mut Tensor<T>, delta: &[T]) {
    for (g, &d) in slot.data_mut().iter_mut().zip(delta) {
        *g += d;
    }
}
