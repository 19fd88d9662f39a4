//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Forward calls on [`Tape`] compute values eagerly and append a node with
//! enough saved state to replay the chain rule. [`Tape::backward`] walks the
//! nodes in reverse recording order exactly once. All reductions accumulate
//! sequentially in row-major order, so forward values and gradients are
//! bitwise reproducible.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(pub usize);

enum Op<T> {
    Add,
    Mul,
    Scale(T),
    SumAll,
    Relu,
    LeakyRelu(T),
    BiasAdd,
    Dense,
    Conv2d { kh: usize, kw: usize },
    Depthwise { kh: usize, kw: usize },
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool,
    Reshape,
    Softmax,
    CrossEntropyMean { labels: Vec<usize>, clamp: T },
    BatchNormTrain { mean: Vec<T>, inv_std: Vec<T> },
    BatchNormInfer { mean: Vec<T>, inv_std: Vec<T> },
    Slice { r0: usize, rl: usize, c0: usize, cl: usize },
}

struct Node<T> {
    inputs: Vec<Id>,
    output: Id,
    op: Op<T>,
}

/// Gradients of the loss with respect to every `requires_grad` leaf.
pub struct GradMap<T> {
    grads: HashMap<Id, Tensor<T>>,
}

impl<T: Element> GradMap<T> {
    pub fn get(&self, id: Id) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: Id) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T: Element> {
    vals: Vec<Tensor<T>>,
    needs_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn idx4(w: usize, c: usize, n: usize, y: usize, x: usize, ch: usize, h: usize) -> usize {
    (((n * h + y) * w + x) * c) + ch
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), needs_grad: Vec::new(), is_leaf: Vec::new(), nodes: Vec::new() }
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Id {
        self.vals.push(t);
        self.needs_grad.push(requires_grad);
        self.is_leaf.push(true);
        Id(self.vals.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Id {
        self.leaf(t, false)
    }

    pub fn value(&self, id: Id) -> &Tensor<T> {
        &self.vals[id.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn check(&self, id: Id) -> Result<()> {
        if id.0 >= self.vals.len() {
            return Err(Error::InvalidArgument(format!("tensor id {} not on tape", id.0)));
        }
        Ok(())
    }

    fn record(&mut self, inputs: Vec<Id>, out: Tensor<T>, op: Op<T>) -> Id {
        debug_assert!(out.all_finite(), "non-finite forward output");
        let needs = inputs.iter().any(|i| self.needs_grad[i.0]);
        self.vals.push(out);
        self.needs_grad.push(needs);
        self.is_leaf.push(false);
        let output = Id(self.vals.len() - 1);
        self.nodes.push(Node { inputs, output, op });
        output
    }

    // ── elementwise and reduction ops ──────────────────────────────────

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(vec![a, b], out, Op::Add))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(vec![a, b], out, Op::Mul))
    }

    pub fn scale(&mut self, a: Id, factor: T) -> Result<Id> {
        self.check(a)?;
        let out = self.vals[a.0].map(|x| x * factor);
        Ok(self.record(vec![a], out, Op::Scale(factor)))
    }

    pub fn sum_all(&mut self, a: Id) -> Result<Id> {
        self.check(a)?;
        let mut acc = T::zero();
        for &x in self.vals[a.0].data() {
            acc += x;
        }
        Ok(self.record(vec![a], Tensor::scalar(acc), Op::SumAll))
    }

    pub fn relu(&mut self, a: Id) -> Result<Id> {
        self.check(a)?;
        let out = self.vals[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.record(vec![a], out, Op::Relu))
    }

    pub fn leaky_relu(&mut self, a: Id, alpha: T) -> Result<Id> {
        self.check(a)?;
        let out = self.vals[a.0].map(|x| if x > T::zero() { x } else { alpha * x });
        Ok(self.record(vec![a], out, Op::LeakyRelu(alpha)))
    }

    /// Add a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Id, b: Id) -> Result<Id> {
        self.check(x)?;
        self.check(b)?;
        let (tx, tb) = (&self.vals[x.0], &self.vals[b.0]);
        let c = *tx.shape().last().ok_or_else(|| {
            Error::ShapeMismatch("bias_add: input has no axes".into())
        })?;
        if tb.shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "bias_add: bias {:?} does not match channel count {}",
                tb.shape(),
                c
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.record(vec![x, b], out, Op::BiasAdd))
    }

    pub fn reshape(&mut self, x: Id, shape: Vec<usize>) -> Result<Id> {
        self.check(x)?;
        let out = self.vals[x.0].clone().reshaped(shape)?;
        Ok(self.record(vec![x], out, Op::Reshape))
    }

    // ── dense ──────────────────────────────────────────────────────────

    /// Affine map of a batch of row vectors: `[n, d_in] × [d_in, d_out] + [d_out]`.
    pub fn dense(&mut self, x: Id, w: Id, b: Id) -> Result<Id> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (tx, tw, tb) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        if tx.shape().len() != 2 || tw.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "dense: x {:?}, w {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, di) = (tx.shape()[0], tx.shape()[1]);
        let (wi, wo) = (tw.shape()[0], tw.shape()[1]);
        if di != wi || tb.shape() != [wo] {
            return Err(Error::ShapeMismatch(format!(
                "dense: x {:?}, w {:?}, b {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![T::zero(); n * wo];
        for i in 0..n {
            let row = &tx.data()[i * di..(i + 1) * di];
            let o = &mut out[i * wo..(i + 1) * wo];
            o.copy_from_slice(tb.data());
            for (k, &xv) in row.iter().enumerate() {
                let wrow = &tw.data()[k * wo..(k + 1) * wo];
                for (ov, &wv) in o.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        let out = Tensor::new(vec![n, wo], out)?;
        Ok(self.record(vec![x, w, b], out, Op::Dense))
    }

    // ── convolutions ───────────────────────────────────────────────────

    /// Same-padded stride-1 cross-correlation.
    /// `x: [n,h,w,c_in]`, `k: [kh,kw,c_in,c_out]` with odd `kh`, `kw`.
    pub fn conv2d(&mut self, x: Id, k: Id) -> Result<Id> {
        self.check(x)?;
        self.check(k)?;
        let (tx, tk) = (&self.vals[x.0], &self.vals[k.0]);
        if tx.shape().len() != 4 || tk.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: x {:?}, k {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let [n, h, w, ci] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [kh, kw, kci, co] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
        if ci != kci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {ci} channels, kernel expects {kci}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d: kernel dims must be odd, got {kh}x{kw}")));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![T::zero(); n * h * w * co];
        let xd = tx.data();
        let kd = tk.data();
        for ni in 0..n {
            for y in 0..h {
                for xpos in 0..w {
                    let o = &mut out[idx4(w, co, ni, y, xpos, 0, h)..idx4(w, co, ni, y, xpos, 0, h) + co];
                    for ky in 0..kh {
                        let iy = y + ky;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..kw {
                            let ix = xpos + kx;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let ix = ix - pw;
                            let xrow = &xd[idx4(w, ci, ni, iy, ix, 0, h)..idx4(w, ci, ni, iy, ix, 0, h) + ci];
                            let kbase = ((ky * kw) + kx) * ci * co;
                            for (cii, &xv) in xrow.iter().enumerate() {
                                let krow = &kd[kbase + cii * co..kbase + (cii + 1) * co];
                                for (ov, &kv) in o.iter_mut().zip(krow) {
                                    *ov += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, h, w, co], out)?;
        Ok(self.record(vec![x, k], out, Op::Conv2d { kh, kw }))
    }

    /// Same-padded per-channel spatial convolution.
    /// `x: [n,h,w,c]`, `k: [kh,kw,c]`.
    pub fn depthwise_conv2d(&mut self, x: Id, k: Id) -> Result<Id> {
        self.check(x)?;
        self.check(k)?;
        let (tx, tk) = (&self.vals[x.0], &self.vals[k.0]);
        if tx.shape().len() != 4 || tk.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "depthwise_conv2d: x {:?}, k {:?}",
                tx.shape(),
                tk.shape()
            )));
        }
        let [n, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [kh, kw, kc] = [tk.shape()[0], tk.shape()[1], tk.shape()[2]];
        if c != kc {
            return Err(Error::ShapeMismatch(format!(
                "depthwise_conv2d: input has {c} channels, kernel expects {kc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "depthwise_conv2d: kernel dims must be odd, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![T::zero(); n * h * w * c];
        let xd = tx.data();
        let kd = tk.data();
        for ni in 0..n {
            for y in 0..h {
                for xpos in 0..w {
                    let base = idx4(w, c, ni, y, xpos, 0, h);
                    for ky in 0..kh {
                        let iy = y + ky;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for kx in 0..kw {
                            let ix = xpos + kx;
                            if ix < pw || ix - pw >= w {
                                continue;
                            }
                            let ix = ix - pw;
                            let xrow = &xd[idx4(w, c, ni, iy, ix, 0, h)..idx4(w, c, ni, iy, ix, 0, h) + c];
                            let krow = &kd[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                            let o = &mut out[base..base + c];
                            for ((ov, &xv), &kv) in o.iter_mut().zip(xrow).zip(krow) {
                                *ov += xv * kv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, h, w, c], out)?;
        Ok(self.record(vec![x, k], out, Op::Depthwise { kh, kw }))
    }

    // ── pooling ────────────────────────────────────────────────────────

    /// Non-overlapping k×k max pooling. Gradient routes to the first
    /// occurrence of the maximum within each window.
    pub fn maxpool(&mut self, x: Id, k: usize) -> Result<Id> {
        self.check(x)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("maxpool: x {:?}", tx.shape())));
        }
        let [n, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "maxpool: window {k} does not divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![T::zero(); n * oh * ow * c];
        let mut argmax = vec![0usize; n * oh * ow * c];
        let xd = tx.data();
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = idx4(w, c, ni, oy * k + dy, ox * k + dx, ch, h);
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        let oi = idx4(ow, c, ni, oy, ox, ch, oh);
                        out[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.record(vec![x], out, Op::MaxPool { argmax }))
    }

    /// Per-channel spatial mean: `[n,h,w,c] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: Id) -> Result<Id> {
        self.check(x)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("global_avg_pool: x {:?}", tx.shape())));
        }
        let [n, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let m = T::from_usize(h * w).unwrap();
        let mut out = vec![T::zero(); n * c];
        for (i, &v) in tx.data().iter().enumerate() {
            let ch = i % c;
            let ni = i / (h * w * c);
            out[ni * c + ch] += v;
        }
        for v in out.iter_mut() {
            *v = *v / m;
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.record(vec![x], out, Op::GlobalAvgPool))
    }

    // ── normalization and classification ───────────────────────────────

    /// Train-mode batch normalization over `[n,h,w,c]` with per-channel
    /// batch statistics. Returns the output id plus the batch mean and
    /// (biased) variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        eps: T,
    ) -> Result<(Id, Vec<T>, Vec<T>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("batch_norm: x {:?}", tx.shape())));
        }
        let [n, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let m = n * h * w;
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm train mode needs n*h*w >= 2, got {m}"
            )));
        }
        if self.vals[gamma.0].shape() != [c] || self.vals[beta.0].shape() != [c] {
            return Err(Error::ShapeMismatch("batch_norm: gamma/beta must be [c]".into()));
        }
        let xd = tx.data();
        let mut mean = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            mean[i % c] += v;
        }
        let mf = T::from_usize(m).unwrap();
        for v in mean.iter_mut() {
            *v = *v / mf;
        }
        let mut var = vec![T::zero(); c];
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        for v in var.iter_mut() {
            *v = *v / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.vals[gamma.0].data().to_vec();
        let bd = self.vals[beta.0].data().to_vec();
        let out: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gd[ch] * (v - mean[ch]) * inv_std[ch] + bd[ch]
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let id = self.record(
            vec![x, gamma, beta],
            out,
            Op::BatchNormTrain { mean: mean.clone(), inv_std },
        );
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Id> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("batch_norm: x {:?}", tx.shape())));
        }
        let c = tx.shape()[3];
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch("batch_norm: running stats must be [c]".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.vals[gamma.0].data().to_vec();
        let bd = self.vals[beta.0].data().to_vec();
        let out: Vec<T> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = i % c;
                gd[ch] * (v - running_mean[ch]) * inv_std[ch] + bd[ch]
            })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.record(
            vec![x, gamma, beta],
            out,
            Op::BatchNormInfer { mean: running_mean.to_vec(), inv_std },
        ))
    }

    /// Row-wise softmax with max subtraction: `[n,k] -> [n,k]`.
    pub fn softmax(&mut self, x: Id) -> Result<Id> {
        self.check(x)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("softmax: x {:?}", tx.shape())));
        }
        let [n, k] = [tx.shape()[0], tx.shape()[1]];
        let mut out = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &tx.data()[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let o = &mut out[i * k..(i + 1) * k];
            let mut sum = T::zero();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mx).exp();
                sum += *ov;
            }
            for ov in o.iter_mut() {
                *ov = *ov / sum;
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        Ok(self.record(vec![x], out, Op::Softmax))
    }

    /// Mean over the batch of `-log(probs[i, label_i])`, probabilities
    /// clamped from below at 1e-12.
    pub fn cross_entropy_mean(&mut self, probs: Id, labels: &[usize]) -> Result<Id> {
        self.check(probs)?;
        let tp = &self.vals[probs.0];
        if tp.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!("cross_entropy: probs {:?}", tp.shape())));
        }
        let [n, k] = [tp.shape()[0], tp.shape()[1]];
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} labels for batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let clamp = T::of_f64(1e-12);
        let mut acc = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let p = tp.data()[i * k + l].max(clamp);
            acc += -p.ln();
        }
        let loss = acc / T::from_usize(n).unwrap();
        Ok(self.record(
            vec![probs],
            Tensor::scalar(loss),
            Op::CrossEntropyMean { labels: labels.to_vec(), clamp },
        ))
    }

    /// Spatial crop of `[n,h,w,c]` rows `[r0, r0+rl)` and cols `[c0, c0+cl)`.
    pub fn slice_spatial(&mut self, x: Id, r0: usize, rl: usize, c0: usize, cl: usize) -> Result<Id> {
        self.check(x)?;
        let tx = &self.vals[x.0];
        if tx.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!("slice_spatial: x {:?}", tx.shape())));
        }
        let [n, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        if rl == 0 || cl == 0 || r0 + rl > h || c0 + cl > w {
            return Err(Error::InvalidArgument(format!(
                "slice_spatial: block ({r0},{rl})x({c0},{cl}) out of bounds for {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); n * rl * cl * c];
        let xd = tx.data();
        for ni in 0..n {
            for y in 0..rl {
                let src = idx4(w, c, ni, r0 + y, c0, 0, h);
                let dst = idx4(cl, c, ni, y, 0, 0, rl);
                out[dst..dst + cl * c].copy_from_slice(&xd[src..src + cl * c]);
            }
        }
        let out = Tensor::new(vec![n, rl, cl, c], out)?;
        Ok(self.record(vec![x], out, Op::Slice { r0, rl, c0, cl }))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Walk the tape in reverse recording order, seeding d(loss)/d(loss)=1,
    /// and return gradients for every `requires_grad` leaf.
    pub fn backward(&self, loss: Id) -> Result<GradMap<T>> {
        self.check(loss)?;
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for node in self.nodes.iter().rev() {
            if !self.needs_grad[node.output.0] {
                continue;
            }
            let dy = match grads[node.output.0].take() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            self.backprop_node(node, &dy, &mut grads);
        }

        let mut map = HashMap::new();
        for (i, val) in self.vals.iter().enumerate() {
            if self.is_leaf[i] && self.needs_grad[i] {
                let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); val.numel()]);
                map.insert(Id(i), Tensor::new(val.shape().to_vec(), g)?);
            }
        }
        Ok(GradMap { grads: map })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: Id, delta: &[T]) {
        if !self.needs_grad[id.0] {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gv, &d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn accum_owned(&self, grads: &mut [Option<Vec<T>>], id: Id, delta: Vec<T>) {
        if !self.needs_grad[id.0] {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gv, d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let inp = |i: usize| &self.vals[node.inputs[i].0];
        match &node.op {
            Op::Add => {
                self.accum(grads, node.inputs[0], dy);
                self.accum(grads, node.inputs[1], dy);
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let da: Vec<T> = dy.iter().zip(b.data()).map(|(&d, &bv)| d * bv).collect();
                let db: Vec<T> = dy.iter().zip(a.data()).map(|(&d, &av)| d * av).collect();
                self.accum_owned(grads, node.inputs[0], da);
                self.accum_owned(grads, node.inputs[1], db);
            }
            Op::Scale(f) => {
                let da: Vec<T> = dy.iter().map(|&d| d * *f).collect();
                self.accum_owned(grads, node.inputs[0], da);
            }
            Op::SumAll => {
                let da = vec![dy[0]; inp(0).numel()];
                self.accum_owned(grads, node.inputs[0], da);
            }
            Op::Relu => {
                let da: Vec<T> = inp(0)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                self.accum_owned(grads, node.inputs[0], da);
            }
            Op::LeakyRelu(alpha) => {
                let da: Vec<T> = inp(0)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > T::zero() { d } else { *alpha * d })
                    .collect();
                self.accum_owned(grads, node.inputs[0], da);
            }
            Op::BiasAdd => {
                let c = inp(1).numel();
                self.accum(grads, node.inputs[0], dy);
                let mut db = vec![T::zero(); c];
                for (i, &d) in dy.iter().enumerate() {
                    db[i % c] += d;
                }
                self.accum_owned(grads, node.inputs[1], db);
            }
            Op::Dense => {
                let (x, w) = (inp(0), inp(1));
                let (n, di) = (x.shape()[0], x.shape()[1]);
                let wo = w.shape()[1];
                let mut dx = vec![T::zero(); n * di];
                let mut dw = vec![T::zero(); di * wo];
                let mut db = vec![T::zero(); wo];
                for i in 0..n {
                    let drow = &dy[i * wo..(i + 1) * wo];
                    let xrow = &x.data()[i * di..(i + 1) * di];
                    for (k, dxv) in dx[i * di..(i + 1) * di].iter_mut().enumerate() {
                        let wrow = &w.data()[k * wo..(k + 1) * wo];
                        let mut acc = T::zero();
                        for (&dv, &wv) in drow.iter().zip(wrow) {
                            acc += dv * wv;
                        }
                        *dxv = acc;
                        let dwrow = &mut dw[k * wo..(k + 1) * wo];
                        let xv = xrow[k];
                        for (dwv, &dv) in dwrow.iter_mut().zip(drow) {
                            *dwv += xv * dv;
                        }
                    }
                    for (dbv, &dv) in db.iter_mut().zip(drow) {
                        *dbv += dv;
                    }
                }
                self.accum_owned(grads, node.inputs[0], dx);
                self.accum_owned(grads, node.inputs[1], dw);
                self.accum_owned(grads, node.inputs[2], db);
            }
            Op::Conv2d { kh, kw } => {
                let (x, k) = (inp(0), inp(1));
                let [n, h, w, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let co = k.shape()[3];
                let (ph, pw) = (kh / 2, kw / 2);
                let mut dx = vec![T::zero(); x.numel()];
                let mut dk = vec![T::zero(); k.numel()];
                let xd = x.data();
                let kd = k.data();
                for ni in 0..n {
                    for y in 0..h {
                        for xpos in 0..w {
                            let dout = &dy[idx4(w, co, ni, y, xpos, 0, h)
                                ..idx4(w, co, ni, y, xpos, 0, h) + co];
                            for ky in 0..*kh {
                                let iy = y + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..*kw {
                                    let ix = xpos + kx;
                                    if ix < pw || ix - pw >= w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let xbase = idx4(w, ci, ni, iy, ix, 0, h);
                                    let kbase = ((ky * kw) + kx) * ci * co;
                                    for cii in 0..ci {
                                        let krow = &kd[kbase + cii * co..kbase + (cii + 1) * co];
                                        let mut acc = T::zero();
                                        for (&dv, &kv) in dout.iter().zip(krow) {
                                            acc += dv * kv;
                                        }
                                        dx[xbase + cii] += acc;
                                        let xv = xd[xbase + cii];
                                        let dkrow =
                                            &mut dk[kbase + cii * co..kbase + (cii + 1) * co];
                                        for (dkv, &dv) in dkrow.iter_mut().zip(dout) {
                                            *dkv += xv * dv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum_owned(grads, node.inputs[0], dx);
                self.accum_owned(grads, node.inputs[1], dk);
            }
            Op::Depthwise { kh, kw } => {
                let (x, k) = (inp(0), inp(1));
                let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let (ph, pw) = (kh / 2, kw / 2);
                let mut dx = vec![T::zero(); x.numel()];
                let mut dk = vec![T::zero(); k.numel()];
                let xd = x.data();
                let kd = k.data();
                for ni in 0..n {
                    for y in 0..h {
                        for xpos in 0..w {
                            let obase = idx4(w, c, ni, y, xpos, 0, h);
                            let dout = &dy[obase..obase + c];
                            for ky in 0..*kh {
                                let iy = y + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..*kw {
                                    let ix = xpos + kx;
                                    if ix < pw || ix - pw >= w {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let xbase = idx4(w, c, ni, iy, ix, 0, h);
                                    let kbase = (ky * kw + kx) * c;
                                    for ch in 0..c {
                                        dx[xbase + ch] += dout[ch] * kd[kbase + ch];
                                        dk[kbase + ch] += dout[ch] * xd[xbase + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum_owned(grads, node.inputs[0], dx);
                self.accum_owned(grads, node.inputs[1], dk);
            }
            Op::MaxPool { argmax } => {
                let mut dx = vec![T::zero(); inp(0).numel()];
                for (oi, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[oi];
                }
                self.accum_owned(grads, node.inputs[0], dx);
            }
            Op::GlobalAvgPool => {
                let x = inp(0);
                let [_, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let m = T::from_usize(h * w).unwrap();
                let mut dx = vec![T::zero(); x.numel()];
                for (i, dxv) in dx.iter_mut().enumerate() {
                    let ch = i % c;
                    let ni = i / (h * w * c);
                    *dxv = dy[ni * c + ch] / m;
                }
                self.accum_owned(grads, node.inputs[0], dx);
            }
            Op::Reshape => {
                self.accum(grads, node.inputs[0], dy);
            }
            Op::Softmax => {
                let p = &self.vals[node.output.0];
                let [n, k] = [p.shape()[0], p.shape()[1]];
                let mut dx = vec![T::zero(); n * k];
                for i in 0..n {
                    let prow = &p.data()[i * k..(i + 1) * k];
                    let drow = &dy[i * k..(i + 1) * k];
                    let mut dot = T::zero();
                    for (&pv, &dv) in prow.iter().zip(drow) {
                        dot += pv * dv;
                    }
                    for (j, dxv) in dx[i * k..(i + 1) * k].iter_mut().enumerate() {
                        *dxv = prow[j] * (drow[j] - dot);
                    }
                }
                self.accum_owned(grads, node.inputs[0], dx);
            }
            Op::CrossEntropyMean { labels, clamp } => {
                let p = inp(0);
                let k = p.shape()[1];
                let nf = T::from_usize(labels.len()).unwrap();
                let mut dp = vec![T::zero(); p.numel()];
                for (i, &l) in labels.iter().enumerate() {
                    let pv = p.data()[i * k + l];
                    if pv > *clamp {
                        dp[i * k + l] = -(dy[0] / (nf * pv));
                    }
                }
                self.accum_owned(grads, node.inputs[0], dp);
            }
            Op::BatchNormTrain { mean, inv_std } => {
                let x = inp(0);
                let gamma = inp(1);
                let c = x.shape()[3];
                let m = x.numel() / c;
                let mf = T::from_usize(m).unwrap();
                let xd = x.data();
                // per-channel sums of dy and dy*xhat
                let mut s1 = vec![T::zero(); c];
                let mut s2 = vec![T::zero(); c];
                for (i, &d) in dy.iter().enumerate() {
                    let ch = i % c;
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    s1[ch] += d;
                    s2[ch] += d * xhat;
                }
                let mut dx = vec![T::zero(); x.numel()];
                for (i, dxv) in dx.iter_mut().enumerate() {
                    let ch = i % c;
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    *dxv = gamma.data()[ch] * inv_std[ch]
                        * (dy[i] - s1[ch] / mf - xhat * s2[ch] / mf);
                }
                self.accum_owned(grads, node.inputs[0], dx);
                self.accum_owned(grads, node.inputs[1], s2);
                self.accum_owned(grads, node.inputs[2], s1);
            }
            Op::BatchNormInfer { mean, inv_std } => {
                let x = inp(0);
                let gamma = inp(1);
                let c = x.shape()[3];
                let xd = x.data();
                let mut dx = vec![T::zero(); x.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &d) in dy.iter().enumerate() {
                    let ch = i % c;
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    dx[i] = d * gamma.data()[ch] * inv_std[ch];
                    dgamma[ch] += d * xhat;
                    dbeta[ch] += d;
                }
                self.accum_owned(grads, node.inputs[0], dx);
                self.accum_owned(grads, node.inputs[1], dgamma);
                self.accum_owned(grads, node.inputs[2], dbeta);
            }
            Op::Slice { r0, rl, c0, cl } => {
                let x = inp(0);
                let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let mut dx = vec![T::zero(); x.numel()];
                for ni in 0..n {
                    for y in 0..*rl {
                        let dst = idx4(w, c, ni, r0 + y, *c0, 0, h);
                        let src = idx4(*cl, c, ni, y, 0, 0, *rl);
                        for off in 0..cl * c {
                            dx[dst + off] += dy[src + off];
                        }
                    }
                }
                self.accum_owned(grads, node.inputs[0], dx);
            }
        }
    }

    /// Test hook: corrupt the backward rule of the most recent Scale node.
    #[cfg(test)]
    fn corrupt_last_scale(&mut self) {
        for node in self.nodes.iter_mut().rev() {
            if let Op::Scale(f) = &mut node.op {
                *f = *f + T::one();
                return;
            }
        }
        panic!("no Scale node to corrupt");
    }
}

// ── gradient checking ──────────────────────────────────────────────────

/// Per-input maximum relative error between tape gradients and central
/// finite differences.
#[derive(Debug)]
pub struct GradCheckReport {
    pub per_input_max_err: Vec<f64>,
    pub max_err: f64,
    pub pass: bool,
}

/// Compare tape gradients of `f` against central finite differences
/// (step 1e-5, f64). Per-element error is the hybrid
/// `|a - n| / (1 + max(|a|, |n|))`: absolute for small gradients, relative
/// for large ones, so cancellation noise in the numeric oracle does not
/// dominate near-zero gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Id]) -> Id,
{
    let step = 1e-5;
    let eval = |perturb: Option<(usize, usize, f64)>| -> (f64, Option<GradMap<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<Id> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if let Some((pi, pe, d)) = perturb {
                    if pi == i {
                        t.data_mut()[pe] += d;
                    }
                }
                tape.leaf(t, true)
            })
            .collect();
        let loss = f(&mut tape, &ids);
        assert!(tape.value(loss).is_scalar(), "grad_check: op under test must produce a scalar");
        let v = tape.value(loss).data()[0];
        if perturb.is_none() {
            let g = tape.backward(loss).expect("backward failed in grad_check");
            (v, Some(g))
        } else {
            (v, None)
        }
    };

    let (_, grads) = eval(None);
    let grads = grads.unwrap();

    // leaf ids are assigned 0..inputs.len() in order
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_err: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(Id(i)).expect("missing gradient for input");
        let mut worst: f64 = 0.0;
        for e in 0..t.numel() {
            let (fp, _) = eval(Some((i, e, step)));
            let (fm, _) = eval(Some((i, e, -step)));
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            worst = worst.max(err);
        }
        per_input.push(worst);
        max_err = max_err.max(worst);
    }
    GradCheckReport { per_input_max_err: per_input, max_err, pass: max_err <= tolerance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::he_normal_init;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_flat_region_gradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.0f64), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0f64), true);
        let y = tape.leaky_relu(x, 0.1).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!((g.get(x).unwrap().data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constant_input_absent_from_grad_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let c = tape.leaf(Tensor::scalar(5.0f64), false);
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.contains(x));
        assert!(!g.contains(c));
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let unused = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn random_composition_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let a = he_normal_init::<f64>(&mut rng, vec![6], 3).unwrap();
        let b = he_normal_init::<f64>(&mut rng, vec![6], 3).unwrap();
        let report = grad_check(
            |tape, ids| {
                let m = tape.mul(ids[0], ids[1]).unwrap();
                let r = tape.leaky_relu(m, 0.1).unwrap();
                tape.sum_all(r).unwrap()
            },
            &[a, b],
            1e-4,
        );
        assert!(report.pass, "max err {}", report.max_err);
    }

    #[test]
    fn grad_check_identity_is_exact() {
        let x = t(vec![4], vec![0.5, -0.25, 2.0, 1.0]);
        let report = grad_check(|tape, ids| tape.sum_all(ids[0]).unwrap(), &[x], 1e-9);
        assert!(report.pass);
        assert_eq!(report.per_input_max_err.len(), 1);
    }

    #[test]
    fn grad_check_softmax() {
        let mut rng = Rng::new(5);
        let logits = he_normal_init::<f64>(&mut rng, vec![1, 5], 2).unwrap();
        // scalarize with a fixed random linear functional
        let wdata: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let report = grad_check(
            move |tape, ids| {
                let p = tape.softmax(ids[0]).unwrap();
                let w = tape.constant(Tensor::new(vec![1, 5], wdata.clone()).unwrap());
                let m = tape.mul(p, w).unwrap();
                tape.sum_all(m).unwrap()
            },
            &[logits],
            1e-4,
        );
        assert!(report.pass, "max err {}", report.max_err);
    }

    #[test]
    fn corrupted_backward_rule_fails_grad_check() {
        let x = t(vec![3], vec![1.0, -2.0, 0.5]);
        let report = grad_check(
            |tape, ids| {
                let y = tape.scale(ids[0], 2.0).unwrap();
                let s = tape.sum_all(y).unwrap();
                tape.corrupt_last_scale();
                s
            },
            &[x],
            1e-4,
        );
        assert!(!report.pass, "corrupted rule must fail, max err {}", report.max_err);
    }

    #[test]
    fn backward_linearity() {
        // backward(a*f + b*g) == a*backward(f) + b*backward(g)
        let mut rng = Rng::new(21);
        let x = he_normal_init::<f64>(&mut rng, vec![5], 2).unwrap();
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));

        let grad_of = |weight_f: f64, weight_g: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), true);
            let f = tape.mul(xid, xid).unwrap();
            let fs = tape.sum_all(f).unwrap();
            let g = tape.relu(xid).unwrap();
            let gs = tape.sum_all(g).unwrap();
            let fs = tape.scale(fs, weight_f).unwrap();
            let gs = tape.scale(gs, weight_g).unwrap();
            let total = tape.add(fs, gs).unwrap();
            tape.backward(total).unwrap().get(xid).unwrap().data().to_vec()
        };

        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn determinism_bitwise() {
        let run = || -> (Vec<f32>, Vec<f32>) {
            let mut rng = Rng::new(99);
            let x = he_normal_init::<f32>(&mut rng, vec![1, 4, 4, 2], 8).unwrap();
            let k = he_normal_init::<f32>(&mut rng, vec![3, 3, 2, 3], 18).unwrap();
            let mut tape = Tape::new();
            let xid = tape.leaf(x, true);
            let kid = tape.leaf(k, true);
            let y = tape.conv2d(xid, kid).unwrap();
            let r = tape.relu(y).unwrap();
            let s = tape.sum_all(r).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(y).data().to_vec(), g.get(kid).unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
