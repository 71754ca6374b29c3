//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends one node to the [`Tape`]. Nodes only reference earlier
//! nodes, so the append order is a topological order and the backward pass
//! is a single reverse sweep over the node list.

use rand::Rng;

use super::conv::{Conv2d, ConvTranspose2d};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::rng::rng_from_seed;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How batch normalization obtains its statistics.
#[derive(Debug, Clone)]
pub enum BnMode<T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with externally supplied running statistics.
    Running { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel statistics of one batch, returned by train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the quantity used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        k: usize,
    },
    ConvTranspose2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        k: usize,
        pad: usize,
        out_pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Elu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scalar {
        x: Var,
        grad: Vec<T>,
    },
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).unwrap())
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn any_requires(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.requires[v.0])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let [b, cin, h, w] = self.values[x.0].dims4("conv2d input")?;
        let [cout, kcin, kh, kw] = self.values[kernel.0].dims4("conv2d kernel")?;
        if kcin != cin {
            return Err(shape_err!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be square and odd, got {kh}x{kw}"));
        }
        if let Some(bv) = bias {
            if self.values[bv.0].shape() != [cout] {
                return Err(shape_err!(
                    "conv2d bias shape {:?} does not match {cout} output channels",
                    self.values[bv.0].shape()
                ));
            }
        }
        let conv = Conv2d { batch: b, cin, cout, h, w, k: kh };
        let out = conv.forward(
            self.values[x.0].data(),
            self.values[kernel.0].data(),
            bias.map(|v| self.values[v.0].data()),
        );
        let requires = self.any_requires(&[Some(x), Some(kernel), bias]);
        let value = Tensor::new(vec![b, cout, h, w], out)?;
        Ok(self.push(value, requires, Op::Conv2d { x, kernel, bias, k: kh }))
    }

    /// Stride-2 transposed convolution. Output extent is `2(n-1) + k + out_pad - 2 pad`
    /// per spatial axis; `(k, pad, out_pad) = (2, 0, 0)` or `(3, 1, 1)` give exact doubling.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [b, cin, h, w] = self.values[x.0].dims4("conv_transpose2d input")?;
        let [kcin, cout, kh, kw] = self.values[kernel.0].dims4("conv_transpose2d kernel")?;
        if kcin != cin {
            return Err(shape_err!(
                "conv_transpose2d kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        if kh != kw || 2 * pad >= kh + out_pad || out_pad >= ConvTranspose2d::STRIDE {
            return Err(shape_err!(
                "unsupported transposed kernel {kh}x{kw} with pad {pad}, output pad {out_pad}"
            ));
        }
        if let Some(bv) = bias {
            if self.values[bv.0].shape() != [cout] {
                return Err(shape_err!("conv_transpose2d bias must have {cout} entries"));
            }
        }
        let op = ConvTranspose2d { batch: b, cin, cout, h, w, k: kh, pad, out_pad };
        let (oh, ow) = op.out_dims();
        let out = op.forward(
            self.values[x.0].data(),
            self.values[kernel.0].data(),
            bias.map(|v| self.values[v.0].data()),
        );
        let requires = self.any_requires(&[Some(x), Some(kernel), bias]);
        let value = Tensor::new(vec![b, cout, oh, ow], out)?;
        Ok(self.push(
            value,
            requires,
            Op::ConvTranspose2d { x, kernel, bias, k: kh, pad, out_pad },
        ))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.values[x.0].dims4("maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let requires = self.requires[x.0];
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(value, requires, Op::MaxPool2 { x, argmax }))
    }

    /// Per-channel batch normalization followed by the `gamma`/`beta` affine map.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [b, c, h, w] = self.values[x.0].dims4("batchnorm input")?;
        if self.values[gamma.0].shape() != [c] || self.values[beta.0].shape() != [c] {
            return Err(shape_err!("batchnorm affine parameters must have {c} entries"));
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::lit(BN_EPSILON);
        let src = self.values[x.0].data();
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch normalization over {count} value(s) per channel"
                    )));
                }
                let n = T::lit(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let start = (bi * c + ch) * plane;
                        s += src[start..start + plane].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut v = T::zero();
                    for bi in 0..b {
                        let start = (bi * c + ch) * plane;
                        v += src[start..start + plane]
                            .iter()
                            .map(|&x| (x - m) * (x - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = v / n;
                }
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            BnMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("running statistics must have {c} entries"));
                }
                (mean, var, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let start = (bi * c + ch) * plane;
                for i in start..start + plane {
                    let xn = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xn;
                    out[i] = g[ch] * xn + bt[ch];
                }
            }
        }
        let requires = self.any_requires(&[Some(x), Some(gamma), Some(beta)]);
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let batch_stats = stats.is_some();
        let var_out = self.push(
            value,
            requires,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
        );
        Ok((var_out, stats))
    }

    /// ELU with alpha 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(|v| if v > T::zero() { v } else { v.exp_m1() });
        let requires = self.requires[x.0];
        self.push(value, requires, Op::Elu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.values[x.0].map(sigmoid_scalar);
        let requires = self.requires[x.0];
        self.push(value, requires, Op::Sigmoid { x })
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mut rng = rng_from_seed(seed);
        let n = self.values[x.0].numel();
        let scale: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = &self.values[x.0];
        let data = src.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let requires = self.requires[x.0];
        Ok(self.push(value, requires, Op::Dropout { x, scale }))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.values[a.0].dims4("concat lhs")?;
        let [bb, cb, hb, wb] = self.values[b.0].dims4("concat rhs")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(shape_err!(
                "concat needs matching batch and spatial dims, got [{ba},_,{ha},{wa}] and [{bb},_,{hb},{wb}]"
            ));
        }
        let plane = ha * wa;
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let requires = self.any_requires(&[Some(a), Some(b)]);
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, requires, Op::Concat { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.values[x.0].sum());
        let requires = self.requires[x.0];
        self.push(value, requires, Op::Sum { x })
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err!("mul shapes differ: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.any_requires(&[Some(a), Some(b)]);
        Ok(self.push(value, requires, Op::Mul { a, b }))
    }

    /// Records a scalar function of `x` whose value and gradient were computed elsewhere.
    pub fn scalar_fn(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.values[x.0].numel() {
            return Err(shape_err!(
                "scalar_fn gradient has {} entries, input has {}",
                grad.len(),
                self.values[x.0].numel()
            ));
        }
        let requires = self.requires[x.0];
        Ok(self.push(Tensor::scalar(value), requires, Op::Scalar { x, grad }))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar `loss`, populating gradients of every node
    /// that requires them and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) -> Result<()> {
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        let result = self.backward_op(i, &op, dy);
        self.ops[i] = op;
        result
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, dy: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, bias, k } => {
                let [b, cin, h, w] = self.values[x.0].dims4("conv2d input")?;
                let cout = self.values[kernel.0].shape()[0];
                let conv = Conv2d { batch: b, cin, cout, h, w, k };
                let (dx, dk, db) =
                    conv.backward(self.values[x.0].data(), self.values[kernel.0].data(), dy);
                self.accumulate(x, dx);
                self.accumulate(kernel, dk);
                if let Some(bv) = bias {
                    self.accumulate(bv, db);
                }
            }
            Op::ConvTranspose2d { x, kernel, bias, k, pad, out_pad } => {
                let [b, cin, h, w] = self.values[x.0].dims4("conv_transpose2d input")?;
                let cout = self.values[kernel.0].shape()[1];
                let op = ConvTranspose2d { batch: b, cin, cout, h, w, k, pad, out_pad };
                let (dx, dk, db) =
                    op.backward(self.values[x.0].data(), self.values[kernel.0].data(), dy);
                self.accumulate(x, dx);
                self.accumulate(kernel, dk);
                if let Some(bv) = bias {
                    self.accumulate(bv, db);
                }
            }
            Op::MaxPool2 { x, ref argmax } => {
                let mut dx = vec![T::zero(); self.values[x.0].numel()];
                for (&src, &g) in argmax.iter().zip(dy) {
                    dx[src] += g;
                }
                self.accumulate(x, dx);
            }
            Op::BatchNorm { x, gamma, beta, ref xhat, ref inv_std, batch_stats } => {
                let [b, c, h, w] = self.values[x.0].dims4("batchnorm input")?;
                let plane = h * w;
                let g = self.values[gamma.0].data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        for j in start..start + plane {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); dy.len()];
                let n = T::lit((b * plane) as f64);
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        let scale = g[ch] * inv_std[ch];
                        for j in start..start + plane {
                            dx[j] = if batch_stats {
                                // d/dx of gamma * (x - mean) / std with batch mean and variance
                                scale * (dy[j] - dbeta[ch] / n - xhat[j] * dgamma[ch] / n)
                            } else {
                                scale * dy[j]
                            };
                        }
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Elu { x } => {
                let src = self.values[x.0].data();
                let out = self.values[i].data();
                let dx = src
                    .iter()
                    .zip(out)
                    .zip(dy)
                    .map(|((&xv, &yv), &g)| if xv >= T::zero() { g } else { g * (yv + T::one()) })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = self.values[i]
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Dropout { x, ref scale } => {
                let dx = dy.iter().zip(scale).map(|(&g, &s)| g * s).collect();
                self.accumulate(x, dx);
            }
            Op::Concat { a, b } => {
                let [bs, ca, h, w] = self.values[a.0].dims4("concat lhs")?;
                let cb = self.values[b.0].shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(bs * ca * plane);
                let mut db = Vec::with_capacity(bs * cb * plane);
                for bi in 0..bs {
                    let base = bi * (ca + cb) * plane;
                    da.extend_from_slice(&dy[base..base + ca * plane]);
                    db.extend_from_slice(&dy[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Sum { x } => {
                let n = self.values[x.0].numel();
                self.accumulate(x, vec![dy[0]; n]);
            }
            Op::Mul { a, b } => {
                let da = dy.iter().zip(self.values[b.0].data()).map(|(&g, &v)| g * v).collect();
                let db = dy.iter().zip(self.values[a.0].data()).map(|(&g, &v)| g * v).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scalar { x, ref grad } => {
                let dx = grad.iter().map(|&g| g * dy[0]).collect();
                self.accumulate(x, dx);
            }
        }
        Ok(())
    }
}

/// Logistic function kept inside the open interval (0, 1) even where the
/// exact value rounds to an endpoint.
#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    let p = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / T::lit(2.0);
    p.max(T::min_positive_value()).min(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.7 - 3.0).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &vals));
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), vals.as_slice());
    }

    #[test]
    fn ones_kernel_sums_padded_window() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).data(), &[10., 10., 10., 10.]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, None), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_replicates_into_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv_transpose2d(x, k, None, 0, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [1., 1., 2., 2.,
                    1., 1., 2., 2.,
                    3., 3., 4., 4.,
                    3., 3., 4., 4.];
        assert_eq!(tape.value(y).data(), &want);
    }

    #[test]
    fn transpose_doubles_odd_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 7, 9]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let y = tape.conv_transpose2d(x, k, None, 0, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 14, 18]);
        let k3 = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y3 = tape.conv_transpose2d(x, k3, None, 1, 1).unwrap();
        assert_eq!(tape.value(y3).shape(), &[1, 1, 14, 18]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 4], 5.0));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 5.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_data(x).unwrap(), &[1., 0., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.5));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, stats) = tape.batchnorm2d(x, g, b, BnMode::Batch).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![3.5]);
    }

    #[test]
    fn batchnorm_two_values_and_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, _) = tape.batchnorm2d(x, g, b, BnMode::Batch).unwrap();
        let mag = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = tape.value(y).data();
        assert!((out[0] + mag).abs() < 1e-15 && (out[1] - mag).abs() < 1e-15);

        let g2 = tape.constant(t(&[1], &[2.0]));
        let b2 = tape.constant(t(&[1], &[5.0]));
        let running = BnMode::Running { mean: vec![0.0], var: vec![1.0 - 1e-5] };
        let z = tape.constant(t(&[1, 1, 1, 2], &[-1.0, 1.0]));
        let (y2, stats) = tape.batchnorm2d(z, g2, b2, running).unwrap();
        assert!(stats.is_none());
        let out = tape.value(y2).data();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_value() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.batchnorm2d(x, g, b, BnMode::Batch),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, 1.0, -1.0]));
        let y = tape.elu(x);
        let out = tape.value(y).data().to_vec();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!((out[2] - (-0.632_120_558_828_557_7)).abs() < 1e-15);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // derivative at exactly zero takes the positive-branch value
        assert_eq!(tape.grad_data(x).unwrap()[0], 1.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut tape = Tape::new();
        let vals = [0.0, 0.3, -2.0, 7.5, -30.0];
        let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
        let x = tape.constant(t(&[5], &vals));
        let xn = tape.constant(t(&[5], &neg));
        let (a, b) = (tape.sigmoid(x), tape.sigmoid(xn));
        assert_eq!(tape.value(a).data()[0], 0.5);
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p + q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[1., 2., 3., 4.]));
        assert_eq!(tape.dropout(x, 0.0, true, 1).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, false, 1).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_statistics() {
        let n = 200_000;
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let x = tape.constant(t(&[n], &vals));
        let y = tape.dropout(x, 0.5, true, 99).unwrap();
        let out = tape.value(y).data();
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((survivors / n as f64 - 0.5).abs() < 3.0 * se);
        // mean of output vs input, standard error from the per-element variance
        let mean_in: f64 = vals.iter().sum::<f64>() / n as f64;
        let mean_out: f64 = out.iter().sum::<f64>() / n as f64;
        let var_out: f64 = out.iter().map(|v| (v - mean_out).powi(2)).sum::<f64>() / n as f64;
        assert!((mean_out - mean_in).abs() < 3.0 * (var_out / n as f64).sqrt());
        // deterministic for a fixed seed
        let y2 = tape.dropout(x, 0.5, true, 99).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(y2).data());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let av: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let bv: Vec<f64> = (0..48).map(|i| -(i as f64)).collect();
        let a = tape.constant(t(&[1, 2, 4, 4], &av));
        let b = tape.constant(t(&[1, 3, 4, 4], &bv));
        let c = tape.concat_channels(a, b).unwrap();
        let out = tape.value(c);
        assert_eq!(out.shape(), &[1, 5, 4, 4]);
        assert_eq!(out.slice_channels(0, 2).unwrap().data(), av.as_slice());
        assert_eq!(out.slice_channels(2, 5).unwrap().data(), bv.as_slice());
        let bad = tape.constant(Tensor::zeros(&[1, 1, 4, 2]));
        assert!(tape.concat_channels(a, bad).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_data(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad_data(x).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad_data(c).is_none());
    }
}
