//! The reverse-mode tape.
//!
//! Every differentiable value lives as a node in an append-only arena and is
//! referred to by its [`TensorId`] index.  Forward methods validate shapes,
//! compute the value eagerly and record whatever the backward pass will need
//! (pooling argmaxes, dropout masks, batch statistics, softmax
//! probabilities).  [`Tape::backward`] then walks the arena once in reverse,
//! accumulating gradients only into nodes that can reach a gradient-tracking
//! leaf.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::conv::{self, ConvDims};
use super::{dense, norm, pool, softmax};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Index of a value on a [`Tape`].  Only meaningful for the tape that issued
/// it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op<F> {
    Leaf,
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        dims: ConvDims,
    },
    MaxPool2d {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Maxout {
        input: TensorId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<F>,
        inv_std: Vec<F>,
        /// Statistics are a function of the batch (training mode) or fixed
        /// running values (inference mode); the backward pass differs.
        batch_stats: bool,
    },
    Dropout {
        input: TensorId,
        mask: Vec<F>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<u32>,
        probs: Vec<F>,
    },
    Softmax {
        logits: TensorId,
    },
    ConcatChannels {
        parts: Vec<TensorId>,
    },
    SliceChannels {
        input: TensorId,
        start: usize,
    },
    Flatten {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: F,
    },
    Sum {
        input: TensorId,
    },
    SumSq {
        input: TensorId,
    },
    ChannelMean {
        input: TensorId,
        channel: usize,
    },
    L2Penalty {
        params: Vec<TensorId>,
        lambda: F,
    },
}

struct Node<F> {
    op: Op<F>,
    shape: Vec<usize>,
    value: Vec<F>,
    needs_grad: bool,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(Error::UnknownTensor(id.0))
        }
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, value: Vec<F>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { op, shape, value, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Copy a tensor onto the tape.  Gradient tracking follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<F>) -> TensorId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.tracks_grad())
    }

    /// Move raw parts onto the tape without an intermediate `Tensor`.
    pub fn leaf_parts(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} implies {} elements, buffer has {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, requires_grad))
    }

    pub fn value(&self, id: TensorId) -> Result<&[F]> {
        Ok(&self.nodes[self.check(id)?].value)
    }

    pub fn shape(&self, id: TensorId) -> Result<&[usize]> {
        Ok(&self.nodes[self.check(id)?].shape)
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: TensorId) -> Result<&[F]> {
        let i = self.check(id)?;
        self.grads
            .get(i)
            .and_then(|g| g.as_deref())
            .ok_or(Error::GradMissing(i))
    }

    /// Class probabilities held by a softmax or fused softmax/cross-entropy
    /// node.
    pub fn softmax_probs(&self, id: TensorId) -> Result<&[F]> {
        let i = self.check(id)?;
        match &self.nodes[i].op {
            Op::SoftmaxCrossEntropy { probs, .. } => Ok(probs),
            Op::Softmax { .. } => Ok(&self.nodes[i].value),
            _ => Err(Error::invalid("softmax_probs", "node is not a softmax output")),
        }
    }

    // ---- forward ops -----------------------------------------------------

    /// 2-D convolution; `padding` in pixels on all four sides.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        self.check(input)?;
        self.check(kernel)?;
        self.check(bias)?;
        let dims = conv::conv_dims(
            &self.nodes[input.0].shape,
            &self.nodes[kernel.0].shape,
            self.nodes[bias.0].value.len(),
            stride,
            padding,
        )?;
        let value = conv::forward(
            &dims,
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d { input, kernel, bias, dims },
            vec![dims.n, dims.f, dims.oh, dims.ow],
            value,
            needs,
        ))
    }

    /// Max pooling with stride equal to the window size.
    pub fn maxpool2d(&mut self, input: TensorId, window: usize) -> Result<TensorId> {
        self.check(input)?;
        let (n, c, h, w) = match self.nodes[input.0].shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            other => {
                return Err(Error::invalid(
                    "maxpool2d",
                    format!("expected rank-4 input, got {:?}", other),
                ))
            }
        };
        let out = pool::forward(&self.nodes[input.0].value, n, c, h, w, window)?;
        let needs = self.needs(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax: out.argmax },
            vec![n, c, out.oh, out.ow],
            out.value,
            needs,
        ))
    }

    pub fn dense(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (n, d) = match self.nodes[input.0].shape.as_slice() {
            &[n, d] => (n, d),
            other => {
                return Err(Error::invalid("dense", format!("expected rank-2 input, got {:?}", other)))
            }
        };
        let (wd, k) = match self.nodes[weight.0].shape.as_slice() {
            &[wd, k] => (wd, k),
            other => {
                return Err(Error::invalid("dense", format!("expected rank-2 weight, got {:?}", other)))
            }
        };
        if wd != d {
            return Err(Error::shapes("dense", &[d, k], &[wd, k]));
        }
        if self.nodes[bias.0].value.len() != k {
            return Err(Error::invalid(
                "dense",
                format!("bias has {} entries for {} units", self.nodes[bias.0].value.len(), k),
            ));
        }
        let value = dense::forward(
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
            n,
            d,
            k,
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(Op::Dense { input, weight, bias }, vec![n, k], value, needs))
    }

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        self.check(input)?;
        let value: Vec<F> = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        Ok(self.push(Op::Relu { input }, shape, value, needs))
    }

    /// Feature-wise max over `pieces` consecutive channels.  Channel `c` of
    /// the output takes the max of input channels `[c*pieces, (c+1)*pieces)`.
    pub fn maxout(&mut self, input: TensorId, pieces: usize) -> Result<TensorId> {
        self.check(input)?;
        if pieces == 0 {
            return Err(Error::invalid("maxout", "pieces must be positive"));
        }
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::invalid(
                "maxout",
                format!("expected rank >= 2, got shape {:?}", shape),
            ));
        }
        let (n, c_in) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if c_in % pieces != 0 {
            return Err(Error::invalid(
                "maxout",
                format!("{c_in} channels do not split into groups of {pieces}"),
            ));
        }
        let c_out = c_in / pieces;
        let x = &self.nodes[input.0].value;
        let mut value = vec![F::zero(); n * c_out * s];
        let mut argmax = vec![0u32; value.len()];
        for i in 0..n {
            for oc in 0..c_out {
                for p in 0..s {
                    let mut best_at = (i * c_in + oc * pieces) * s + p;
                    let mut best = x[best_at];
                    for piece in 1..pieces {
                        let at = (i * c_in + oc * pieces + piece) * s + p;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                    let o = (i * c_out + oc) * s + p;
                    value[o] = best;
                    argmax[o] = best_at as u32;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = c_out;
        let needs = self.needs(input);
        Ok(self.push(Op::Maxout { input, argmax }, out_shape, value, needs))
    }

    /// Batch normalisation using this batch's statistics.  Returns the node
    /// plus the biased batch mean/variance so the caller can maintain running
    /// statistics.
    pub fn batchnorm_train(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<F>, Vec<F>)> {
        let (n, c, s) = self.bn_geometry(input, gamma, beta)?;
        if n * s < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("need at least 2 values per channel to take statistics, got {}", n * s),
            ));
        }
        let (mean, var) = norm::batch_stats(&self.nodes[input.0].value, n, c, s);
        let epsf = F::from_f64(eps);
        let inv_std: Vec<F> = var.iter().map(|&v| (v + epsf).sqrt().recip()).collect();
        let value = norm::normalize(
            &self.nodes[input.0].value,
            n,
            c,
            s,
            &mean,
            &inv_std,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            shape,
            value,
            needs,
        );
        Ok((id, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<TensorId> {
        let (n, c, s) = self.bn_geometry(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(
                "batchnorm",
                format!(
                    "running stats cover {} / {} channels, input has {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let epsf = F::from_f64(eps);
        let inv_std: Vec<F> = running_var.iter().map(|&v| (v + epsf).sqrt().recip()).collect();
        let value = norm::normalize(
            &self.nodes[input.0].value,
            n,
            c,
            s,
            running_mean,
            &inv_std,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            shape,
            value,
            needs,
        ))
    }

    fn bn_geometry(&self, input: TensorId, gamma: TensorId, beta: TensorId) -> Result<(usize, usize, usize)> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let shape = &self.nodes[input.0].shape;
        if shape.len() < 2 {
            return Err(Error::invalid(
                "batchnorm",
                format!("expected rank >= 2, got shape {:?}", shape),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let got = self.nodes[id.0].value.len();
            if got != c {
                return Err(Error::invalid(
                    "batchnorm",
                    format!("{name} has {got} entries for {c} channels"),
                ));
            }
        }
        Ok((n, c, s))
    }

    /// Inverted dropout: surviving elements are scaled by `1/(1-rate)` so
    /// inference needs no rescaling.  `rate == 0` is the identity and records
    /// nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let scale = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[input.0].value.len())
            .map(|_| {
                if F::sample_unit_f64(rng) < rate {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        self.dropout_mask(input, mask)
    }

    /// Dropout with a caller-supplied mask; the deterministic building block
    /// the random version delegates to, and what gradient checks use.
    pub fn dropout_mask(&mut self, input: TensorId, mask: Vec<F>) -> Result<TensorId> {
        self.check(input)?;
        let x = &self.nodes[input.0].value;
        if mask.len() != x.len() {
            return Err(Error::invalid(
                "dropout",
                format!("mask has {} elements, input has {}", mask.len(), x.len()),
            ));
        }
        let value: Vec<F> = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        Ok(self.push(Op::Dropout { input, mask }, shape, value, needs))
    }

    /// Fused softmax + mean cross-entropy over a `[N, K]` logit matrix.
    /// Produces a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[u32]) -> Result<TensorId> {
        self.check(logits)?;
        let (n, k) = match self.nodes[logits.0].shape.as_slice() {
            &[n, k] => (n, k),
            other => {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("expected rank-2 logits, got {:?}", other),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let (loss, probs) = softmax::softmax_cross_entropy(&self.nodes[logits.0].value, n, k, labels);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            Vec::new(),
            vec![loss],
            needs,
        ))
    }

    /// Row-wise softmax of a `[N, K]` matrix.
    pub fn softmax(&mut self, logits: TensorId) -> Result<TensorId> {
        self.check(logits)?;
        let (n, k) = match self.nodes[logits.0].shape.as_slice() {
            &[n, k] => (n, k),
            other => {
                return Err(Error::invalid("softmax", format!("expected rank-2 logits, got {:?}", other)))
            }
        };
        let value = softmax::softmax_rows(&self.nodes[logits.0].value, n, k);
        let needs = self.needs(logits);
        Ok(self.push(Op::Softmax { logits }, vec![n, k], value, needs))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let mut geom: Option<(usize, usize, usize)> = None;
        let mut c_total = 0;
        for &p in parts {
            self.check(p)?;
            let (n, c, h, w) = match self.nodes[p.0].shape.as_slice() {
                &[n, c, h, w] => (n, c, h, w),
                other => {
                    return Err(Error::invalid(
                        "concat",
                        format!("expected rank-4 inputs, got {:?}", other),
                    ))
                }
            };
            match geom {
                None => geom = Some((n, h, w)),
                Some(g) if g == (n, h, w) => {}
                Some((gn, gh, gw)) => {
                    return Err(Error::shapes("concat", &[gn, 0, gh, gw], &[n, c, h, w]));
                }
            }
            c_total += c;
        }
        let (n, h, w) = geom.unwrap();
        let hw = h * w;
        let mut value = vec![F::zero(); n * c_total * hw];
        for i in 0..n {
            let mut at = i * c_total * hw;
            for &p in parts {
                let c = self.nodes[p.0].shape[1];
                let src = &self.nodes[p.0].value[i * c * hw..(i + 1) * c * hw];
                value[at..at + c * hw].copy_from_slice(src);
                at += c * hw;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatChannels { parts: parts.to_vec() },
            vec![n, c_total, h, w],
            value,
            needs,
        ))
    }

    /// Channels `[start, start+len)` of a rank-4 tensor.
    pub fn slice_channels(&mut self, input: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check(input)?;
        let (n, c, h, w) = match self.nodes[input.0].shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            other => {
                return Err(Error::invalid(
                    "slice_channels",
                    format!("expected rank-4 input, got {:?}", other),
                ))
            }
        };
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels [{start}, {}) out of range for {c}", start + len),
            ));
        }
        let hw = h * w;
        let mut value = vec![F::zero(); n * len * hw];
        for i in 0..n {
            let src = &self.nodes[input.0].value[(i * c + start) * hw..(i * c + start + len) * hw];
            value[i * len * hw..(i + 1) * len * hw].copy_from_slice(src);
        }
        let needs = self.needs(input);
        Ok(self.push(Op::SliceChannels { input, start }, vec![n, len, h, w], value, needs))
    }

    /// `[N, C, H, W] -> [N, C*H*W]`.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        self.check(input)?;
        let (n, c, h, w) = match self.nodes[input.0].shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            other => {
                return Err(Error::invalid("flatten", format!("expected rank-4 input, got {:?}", other)))
            }
        };
        let value = self.nodes[input.0].value.clone();
        let needs = self.needs(input);
        Ok(self.push(Op::Flatten { input }, vec![n, c * h * w], value, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shapes("add", &self.nodes[a.0].shape.clone(), &self.nodes[b.0].shape.clone()));
        }
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, value, needs))
    }

    pub fn scale(&mut self, input: TensorId, factor: F) -> Result<TensorId> {
        self.check(input)?;
        let value: Vec<F> = self.nodes[input.0].value.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(input);
        Ok(self.push(Op::Scale { input, factor }, shape, value, needs))
    }

    /// Sum of all elements; a scalar.
    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        self.check(input)?;
        let mut s = F::zero();
        for &v in &self.nodes[input.0].value {
            s += v;
        }
        let needs = self.needs(input);
        Ok(self.push(Op::Sum { input }, Vec::new(), vec![s], needs))
    }

    /// Sum of squared elements; a scalar.
    pub fn sum_sq(&mut self, input: TensorId) -> Result<TensorId> {
        self.check(input)?;
        let mut s = F::zero();
        for &v in &self.nodes[input.0].value {
            s = v.mul_add(v, s);
        }
        let needs = self.needs(input);
        Ok(self.push(Op::SumSq { input }, Vec::new(), vec![s], needs))
    }

    /// Mean over batch and spatial positions of one channel; a scalar.
    pub fn channel_mean(&mut self, input: TensorId, channel: usize) -> Result<TensorId> {
        self.check(input)?;
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::invalid(
                "channel_mean",
                format!("expected rank >= 2, got shape {:?}", shape),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if channel >= c {
            return Err(Error::invalid(
                "channel_mean",
                format!("channel {channel} out of range for {c}"),
            ));
        }
        let x = &self.nodes[input.0].value;
        let mut acc = F::zero();
        for i in 0..n {
            let at = (i * c + channel) * s;
            for &v in &x[at..at + s] {
                acc += v;
            }
        }
        let mean = acc / F::from_f64((n * s) as f64);
        let needs = self.needs(input);
        Ok(self.push(Op::ChannelMean { input, channel }, Vec::new(), vec![mean], needs))
    }

    /// `lambda * sum of squares` over a set of tensors; a scalar.  The weight
    /// decay term of the training loss.
    pub fn l2_penalty(&mut self, params: &[TensorId], lambda: F) -> Result<TensorId> {
        let mut s = F::zero();
        let mut needs = false;
        for &p in params {
            self.check(p)?;
            needs |= self.needs(p);
            for &v in &self.nodes[p.0].value {
                s = v.mul_add(v, s);
            }
        }
        Ok(self.push(
            Op::L2Penalty { params: params.to_vec(), lambda },
            Vec::new(),
            vec![s * lambda],
            needs,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss.  Gradients are retained on the tape
    /// and read back with [`Tape::grad`]; calling `backward` again replaces
    /// them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let idx = self.check(loss)?;
        if !self.nodes[idx].shape.is_empty() {
            return Err(Error::NotScalar {
                op: "backward",
                got: self.nodes[idx].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[idx] = Some(vec![F::one()]);
        for i in (0..=idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], id: TensorId, contrib: &[F]) {
        if !self.needs(id) {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![F::zero(); self.nodes[id.0].value.len()]);
        debug_assert_eq!(buf.len(), contrib.len());
        for (x, &g) in buf.iter_mut().zip(contrib) {
            *x += g;
        }
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims } => {
                let out = conv::backward(
                    dims,
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    g,
                    self.needs(*input),
                    self.needs(*kernel),
                    self.needs(*bias),
                );
                if let Some(di) = out.input {
                    self.accum(grads, *input, &di);
                }
                if let Some(dk) = out.kernel {
                    self.accum(grads, *kernel, &dk);
                }
                if let Some(db) = out.bias {
                    self.accum(grads, *bias, &db);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let din = pool::backward(g, argmax, self.nodes[input.0].value.len());
                self.accum(grads, *input, &din);
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                let k = self.nodes[i].shape[1];
                let out = dense::backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    n,
                    d,
                    k,
                    self.needs(*input),
                    self.needs(*weight),
                    self.needs(*bias),
                );
                if let Some(dx) = out.input {
                    self.accum(grads, *input, &dx);
                }
                if let Some(dw) = out.weight {
                    self.accum(grads, *weight, &dw);
                }
                if let Some(db) = out.bias {
                    self.accum(grads, *bias, &db);
                }
            }
            Op::Relu { input } => {
                // Subgradient 0 at exactly 0.
                let din: Vec<F> = self.nodes[input.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &go)| if x > F::zero() { go } else { F::zero() })
                    .collect();
                self.accum(grads, *input, &din);
            }
            Op::Maxout { input, argmax } => {
                let mut din = vec![F::zero(); self.nodes[input.0].value.len()];
                for (&go, &at) in g.iter().zip(argmax) {
                    din[at as usize] += go;
                }
                self.accum(grads, *input, &din);
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, batch_stats } => {
                let shape = &self.nodes[input.0].shape;
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let x = &self.nodes[input.0].value;
                let gm = &self.nodes[gamma.0].value;
                let out = if *batch_stats {
                    norm::backward_train(
                        x, g, n, c, s, mean, inv_std, gm,
                        self.needs(*input), self.needs(*gamma), self.needs(*beta),
                    )
                } else {
                    norm::backward_infer(
                        x, g, n, c, s, mean, inv_std, gm,
                        self.needs(*input), self.needs(*gamma), self.needs(*beta),
                    )
                };
                if let Some(di) = out.input {
                    self.accum(grads, *input, &di);
                }
                if let Some(dg) = out.gamma {
                    self.accum(grads, *gamma, &dg);
                }
                if let Some(db) = out.beta {
                    self.accum(grads, *beta, &db);
                }
            }
            Op::Dropout { input, mask } => {
                let din: Vec<F> = g.iter().zip(mask).map(|(&go, &m)| go * m).collect();
                self.accum(grads, *input, &din);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let dz = softmax::cross_entropy_backward(probs, n, k, labels, g[0]);
                self.accum(grads, *logits, &dz);
            }
            Op::Softmax { logits } => {
                let k = self.nodes[i].shape[1];
                let dz = softmax::softmax_backward(&self.nodes[i].value, g, k);
                self.accum(grads, *logits, &dz);
            }
            Op::ConcatChannels { parts } => {
                let out_shape = &self.nodes[i].shape;
                let (n, c_total) = (out_shape[0], out_shape[1]);
                let hw = out_shape[2] * out_shape[3];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    if self.needs(p) {
                        let mut dp = vec![F::zero(); n * c * hw];
                        for img in 0..n {
                            let src = &g[(img * c_total + offset) * hw..(img * c_total + offset + c) * hw];
                            dp[img * c * hw..(img + 1) * c * hw].copy_from_slice(src);
                        }
                        self.accum(grads, p, &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let in_shape = &self.nodes[input.0].shape;
                let (n, c) = (in_shape[0], in_shape[1]);
                let hw = in_shape[2] * in_shape[3];
                let len = self.nodes[i].shape[1];
                let mut din = vec![F::zero(); self.nodes[input.0].value.len()];
                for img in 0..n {
                    let dst = &mut din[(img * c + start) * hw..(img * c + start + len) * hw];
                    dst.copy_from_slice(&g[img * len * hw..(img + 1) * len * hw]);
                }
                self.accum(grads, *input, &din);
            }
            Op::Flatten { input } => {
                self.accum(grads, *input, g);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Scale { input, factor } => {
                let din: Vec<F> = g.iter().map(|&go| go * *factor).collect();
                self.accum(grads, *input, &din);
            }
            Op::Sum { input } => {
                let din = vec![g[0]; self.nodes[input.0].value.len()];
                self.accum(grads, *input, &din);
            }
            Op::SumSq { input } => {
                let two = F::from_f64(2.0);
                let din: Vec<F> = self.nodes[input.0].value.iter().map(|&x| two * x * g[0]).collect();
                self.accum(grads, *input, &din);
            }
            Op::ChannelMean { input, channel } => {
                let shape = &self.nodes[input.0].shape;
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let each = g[0] / F::from_f64((n * s) as f64);
                let mut din = vec![F::zero(); self.nodes[input.0].value.len()];
                for img in 0..n {
                    let at = (img * c + channel) * s;
                    for v in din[at..at + s].iter_mut() {
                        *v = each;
                    }
                }
                self.accum(grads, *input, &din);
            }
            Op::L2Penalty { params, lambda } => {
                let two_l = F::from_f64(2.0) * *lambda * g[0];
                for &p in params {
                    if self.needs(p) {
                        let dp: Vec<F> = self.nodes[p.0].value.iter().map(|&w| two_l * w).collect();
                        self.accum(grads, p, &dp);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[3], &[1.0, -2.0, 0.5]).requires_grad(true));
        let loss = tape.sum_sq(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        assert_eq!(tape.value(loss).unwrap(), &[5.25]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // loss = sum(x) + sum(x) => dloss/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[4], &[1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let a = tape.sum(x).unwrap();
        let b = tape.sum(x).unwrap();
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.grad(x), Err(Error::GradMissing(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]).requires_grad(true));
        let y = tape.scale(x, 3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn foreign_ids_are_rejected() {
        let mut long = Tape::<f64>::new();
        let mut ids = Vec::new();
        for _ in 0..5 {
            ids.push(long.leaf(&tensor(&[1], &[0.0])));
        }
        let short = Tape::<f64>::new();
        assert!(matches!(short.value(ids[4]), Err(Error::UnknownTensor(4))));
    }

    #[test]
    fn relu_masks_negative_gradient_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[4], &[-1.0, 0.0, 2.0, -3.0]).requires_grad(true));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap(), &[0.0, 0.0, 2.0, 0.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn maxout_takes_contiguous_groups() {
        // [N=1, C=4, S=2], pieces=2: channels {0,1} -> out 0, {2,3} -> out 1.
        let mut tape = Tape::new();
        let x = tape.leaf(
            &tensor(&[1, 4, 2], &[1.0, 8.0, 2.0, 7.0, -5.0, 0.0, -1.0, -2.0]).requires_grad(true),
        );
        let y = tape.maxout(x, 2).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[1, 2, 2]);
        // Elementwise max of channels {0,1} and of {2,3}.
        assert_eq!(tape.value(y).unwrap(), &[2.0, 8.0, -1.0, 0.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maxout_one_piece_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 3, 2], &[1.0, -1.0, 0.5, 2.0, -0.5, 3.0]));
        let y = tape.maxout(x, 1).unwrap();
        assert_eq!(tape.value(y).unwrap(), tape.value(x).unwrap());
    }

    #[test]
    fn dropout_rate_zero_is_the_same_node() {
        let mut tape = Tape::new();
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Dropout, 0, 0);
        let x = tape.leaf(&tensor(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn dropout_mask_values_are_zero_or_scale() {
        let mut tape = Tape::new();
        let mut rng = crate::rng::stream_rng(7, crate::rng::Stream::Dropout, 0, 0);
        let n = 10_000;
        let x = tape.leaf(&tensor(&[n], &vec![1.0; n]));
        let y = tape.dropout(x, 0.25, &mut rng).unwrap();
        let vals = tape.value(y).unwrap();
        let scale = 1.0 / 0.75;
        let mut kept = 0usize;
        for &v in vals {
            assert!(v == 0.0 || (v - scale).abs() < 1e-12);
            if v != 0.0 {
                kept += 1;
            }
        }
        // Survival rate concentrates near 75%.
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.75).abs() < 0.02, "kept {rate}");
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let b = tape.leaf(&tensor(&[1, 1, 1, 2], &[9.0, 8.0]).requires_grad(true));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat).unwrap(), &[1, 3, 1, 2]);
        assert_eq!(tape.value(cat).unwrap(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
        let back = tape.slice_channels(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back).unwrap(), &[9.0, 8.0]);
        let loss = tape.sum(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0]);
        // `a` feeds only the unused channels, so its gradient is all zeros.
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn concat_spatial_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.leaf(&Tensor::zeros(&[1, 2, 2, 2]));
        let err = tape.concat_channels(&[a, b]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "concat", .. }));
    }

    #[test]
    fn l2_penalty_value_and_gradient() {
        let mut tape = Tape::new();
        let w1 = tape.leaf(&tensor(&[2], &[3.0, 4.0]).requires_grad(true));
        let w2 = tape.leaf(&tensor(&[1], &[2.0]).requires_grad(true));
        let pen = tape.l2_penalty(&[w1, w2], 0.1).unwrap();
        // 0.1 * (9 + 16 + 4) = 2.9
        assert!((tape.value(pen).unwrap()[0] - 2.9).abs() < 1e-12);
        tape.backward(pen).unwrap();
        // d/dw = 2 * lambda * w
        for (g, want) in tape.grad(w1).unwrap().iter().zip([0.6, 0.8]) {
            assert!((g - want).abs() < 1e-12);
        }
        assert!((tape.grad(w2).unwrap()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn channel_mean_averages_one_channel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 2, 2], &[1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]).requires_grad(true));
        let m = tape.channel_mean(x, 1).unwrap();
        assert_eq!(tape.value(m).unwrap(), &[25.0]);
        tape.backward(m).unwrap();
        assert_eq!(
            tape.grad(x).unwrap(),
            &[0.0, 0.0, 0.25, 0.25, 0.0, 0.0, 0.25, 0.25]
        );
    }

    #[test]
    fn softmax_cross_entropy_gradient_sums_to_zero_per_row() {
        let mut tape = Tape::new();
        let z = tape.leaf(&tensor(&[2, 4], &[2.0, 1.0, 0.1, 0.1, -1.0, 0.0, 1.0, 2.0]).requires_grad(true));
        let loss = tape.softmax_cross_entropy(z, &[0, 3]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        for row in g.chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12);
        }
        // True-label slots move down, others up.
        assert!(g[0] < 0.0 && g[7] < 0.0);
        assert!(g[1] > 0.0 && g[4] > 0.0);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.leaf(&tensor(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(tape.softmax_cross_entropy(z, &[3]).is_err());
        assert!(tape.softmax_cross_entropy(z, &[0, 1]).is_err());
    }

    #[test]
    fn flatten_keeps_values_in_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = tape.flatten(x).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[2, 4]);
        assert_eq!(tape.value(y).unwrap(), tape.value(x).unwrap());
    }

    #[test]
    fn batchnorm_train_returns_batch_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.leaf(&tensor(&[1], &[1.0]));
        let beta = tape.leaf(&tensor(&[1], &[0.0]));
        let (_, mean, var) = tape.batchnorm_train(x, gamma, beta, 1e-5).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_single_value_per_channel_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[1, 2, 1], &[1.0, 2.0]));
        let gamma = tape.leaf(&tensor(&[2], &[1.0, 1.0]));
        let beta = tape.leaf(&tensor(&[2], &[0.0, 0.0]));
        assert!(tape.batchnorm_train(x, gamma, beta, 1e-5).is_err());
    }
}
