//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid topological order.

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Float, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Float> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Scale(Var, T),
    WeightedSum(Vec<(Var, T)>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    AdaIn {
        content: Var,
        style: Var,
        xhat: Vec<T>,
        content_std: Vec<T>,
        style_mean: Vec<T>,
        style_std: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1Mean {
        x: Var,
        target: Tensor<T>,
    },
    TripletMargin {
        anchor: Var,
        positive: Var,
        negative: Var,
        margin: T,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Graph {
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked and retrievable after [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id))
    }

    /// Queue a new value for a non-trainable buffer (applied by the caller after the step).
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, cin_g, k, k2) = self.value(w).dims4()?;
        if k != k2 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
            return Err(shape_err(format!(
                "conv weight {:?} incompatible with input {:?} (groups {groups})",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!("conv kernel {k} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            groups,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::from_vec(&[n, c_out, geom.h_out(), geom.w_out()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batch normalization using the statistics of the current batch.
    /// Returns the output together with the batch mean and population variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let m = T::from_usize(n * hw).expect("count");
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                mean[ci] += plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                var[ci] += plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.affine_normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn affine_normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c || mean.len() != c {
            return Err(shape_err(format!("batch-norm affine params do not match {c} channels")));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let v = (xs[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = v;
                    out[i] = gs[ci] * v + bs[ci];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (iy, block) in dst.chunks_exact_mut(factor * wo).enumerate() {
                let (first, rest) = block.split_at_mut(wo);
                for (chunk, &v) in first.chunks_exact_mut(factor).zip(&src[iy * w..(iy + 1) * w]) {
                    chunk.fill(v);
                }
                for row in rest.chunks_exact_mut(wo) {
                    row.copy_from_slice(first);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err("weighted_sum expects scalar terms".into()));
            }
            total += w * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = T::from_usize(h * w).expect("count");
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let value = Tensor::from_vec(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `x [n, in] * w^T [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.value(x).dims2()?;
        let (d_out, w_in) = self.value(w).dims2()?;
        if d_in != w_in || self.value(b).len() != d_out {
            return Err(shape_err(format!(
                "linear weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = vec![T::zero(); n * d_out];
        gemm(
            MatRef::new(self.value(x).data(), n, d_in),
            MatRef::new(self.value(w).data(), d_out, d_in).t(),
            T::zero(),
            &mut out,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(d_out) {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        }
        let value = Tensor::from_vec(&[n, d_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Channels `[start, start + len)` of an `[n, c, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 || start + len > shape[1] {
            return Err(shape_err(format!("channel slice {start}..{} out of {shape:?}", start + len)));
        }
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        for ni in 0..shape[0] {
            data.extend_from_slice(&xs[(ni * c + start) * inner..(ni * c + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s[0] != n || s[2..] != first[2..] {
                return Err(shape_err(format!("cannot concat channels of {first:?} and {s:?}")));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let value = Tensor::from_vec(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Gather leading-axis entries (repeats allowed).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("row index {bad} out of range for {n} rows")));
        }
        let value = self.value(x).select_rows(indices);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::stack_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Adaptive instance normalization: re-standardize each `(sample, channel)` plane of
    /// `content` to the mean and standard deviation of the matching plane of `style`.
    /// Spatial sizes of the two operands may differ.
    pub fn adain(&mut self, content: Var, style: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.value(content).dims4()?;
        let (sn, sc, sh, sw) = self.value(style).dims4()?;
        if n != sn || c != sc {
            return Err(shape_err(format!(
                "adain content {:?} and fingerprint {:?} differ in batch or channels",
                self.value(content).shape(),
                self.value(style).shape()
            )));
        }
        let (hw, shw) = (h * w, sh * sw);
        let cs = self.value(content).data();
        let ss = self.value(style).data();
        let mut xhat = vec![T::zero(); cs.len()];
        let mut out = vec![T::zero(); cs.len()];
        let mut content_std = Vec::with_capacity(n * c);
        let mut style_mean = Vec::with_capacity(n * c);
        let mut style_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let plane = &cs[p * hw..(p + 1) * hw];
            let (mc, sdc) = kernels::moments(plane, eps);
            let (mf, sdf) = kernels::moments(&ss[p * shw..(p + 1) * shw], eps);
            for (i, &v) in plane.iter().enumerate() {
                let z = (v - mc) / sdc;
                xhat[p * hw + i] = z;
                out[p * hw + i] = sdf * z + mf;
            }
            content_std.push(sdc);
            style_mean.push(mf);
            style_std.push(sdf);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(content) || self.rg(style);
        Ok(self.push(
            value,
            Op::AdaIn {
                content,
                style,
                xhat,
                content_std,
                style_mean,
                style_std,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(shape_err(format!("{} labels for {n} logit rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation("labels", format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, row) in self.value(logits).data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
            total += denom.ln() + max - row[labels[i]];
        }
        let loss = if n == 0 {
            T::zero()
        } else {
            total / T::from_usize(n).expect("count")
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != target.shape() {
            return Err(shape_err(format!(
                "l1 operand {:?} vs target {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let m = T::from_usize(target.len().max(1)).expect("count");
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / m;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Mean {
                x,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean over rows of `max(|a - p|_2 - |a - n|_2 + margin, 0)`; zero for empty inputs.
    pub fn triplet_margin(&mut self, anchor: Var, positive: Var, negative: Var, margin: T) -> Result<Var> {
        let shape = self.value(anchor).shape().to_vec();
        if self.value(positive).shape() != shape.as_slice() || self.value(negative).shape() != shape.as_slice() {
            return Err(shape_err("triplet operands must share one shape".into()));
        }
        let t = shape[0];
        let mut total = T::zero();
        if t > 0 {
            let d = self.value(anchor).row_len();
            let (a, p, n) = (
                self.value(anchor).data(),
                self.value(positive).data(),
                self.value(negative).data(),
            );
            for i in 0..t {
                let r = i * d..(i + 1) * d;
                let dap = euclid(&a[r.clone()], &p[r.clone()]);
                let dan = euclid(&a[r.clone()], &n[r]);
                total += (dap - dan + margin).max(T::zero());
            }
            total = total / T::from_usize(t).expect("count");
        }
        let rg = self.rg(anchor) || self.rg(positive) || self.rg(negative);
        Ok(self.push(
            Tensor::scalar(total),
            Op::TripletMargin {
                anchor,
                positive,
                negative,
                margin,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                _ => self.backprop_node(node, &g, &mut grads)?,
            }
        }
        let mut params = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut gw = Tensor::zeros(self.value(*w).shape());
                let mut gb = b.map(|b| Tensor::zeros(self.value(b).shape()));
                let gx = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    gw.data_mut(),
                    gb.as_mut().map(|t| t.data_mut()),
                    self.rg(*x),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), gx)?);
                }
                self.accumulate(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let gs = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for i in off..off + hw {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::from_usize(n * hw).expect("count");
                    for ci in 0..c {
                        // dgamma/dbeta above are exactly sum(dy * xhat) and sum(dy).
                        let (s1, s2) = (dbeta[ci] * gs[ci], dgamma[ci] * gs[ci]);
                        for ni in 0..n {
                            let off = (ni * c + ci) * hw;
                            for i in off..off + hw {
                                let dxh = gd[i] * gs[ci];
                                dx[i] = if *batch_stats {
                                    inv_std[ci] / m * (m * dxh - s1 - xhat[i] * s2)
                                } else {
                                    dxh * inv_std[ci]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Relu(x) => {
                let out = node.value.data();
                let dx: Vec<T> = gd
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx)?);
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                let dx: Vec<T> = gd.iter().zip(out).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx)?);
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for oy in 0..ho {
                        let drow = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
                        for (d, chunk) in drow.iter_mut().zip(src[oy * wo..(oy + 1) * wo].chunks_exact(*factor)) {
                            *d += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.map(|v| v * *s));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gd[0] * w));
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::one() / T::from_usize(hw).expect("count");
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &v in gd {
                    dx.extend(std::iter::repeat_n(v * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&shape, dx)?);
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = self.value(*x).dims2()?;
                let (d_out, _) = self.value(*w).dims2()?;
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    gemm(
                        MatRef::new(gd, n, d_out),
                        MatRef::new(self.value(*w).data(), d_out, d_in),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, d_in], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    gemm(
                        MatRef::new(gd, n, d_out).t(),
                        MatRef::new(self.value(*x).data(), n, d_in),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[d_out, d_in], dw)?);
                }
                let mut db = vec![T::zero(); d_out];
                for row in gd.chunks(d_out) {
                    db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                self.accumulate(grads, *b, Tensor::from_vec(&[d_out], db)?);
            }
            Op::SliceChannels { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let c = shape[1];
                let len = node.value.shape()[1];
                let inner: usize = shape[2..].iter().product();
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for ni in 0..shape[0] {
                    dd[(ni * c + start) * inner..(ni * c + start + len) * inner]
                        .copy_from_slice(&gd[ni * len * inner..(ni + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(parts) => {
                let shape = node.value.shape();
                let (n, total_c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let c = ps[1];
                    let mut dp = Vec::with_capacity(n * c * inner);
                    for ni in 0..n {
                        let base = (ni * total_c + offset) * inner;
                        dp.extend_from_slice(&gd[base..base + c * inner]);
                    }
                    offset += c;
                    self.accumulate(grads, p, Tensor::from_vec(&ps, dp)?);
                }
            }
            Op::SelectRows { x, indices } => {
                let shape = self.value(*x).shape().to_vec();
                let r = self.value(*x).row_len();
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for (j, &i) in indices.iter().enumerate() {
                    dd[i * r..(i + 1) * r]
                        .iter_mut()
                        .zip(&gd[j * r..(j + 1) * r])
                        .for_each(|(d, &v)| *d += v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let dp = Tensor::from_vec(self.value(p).shape(), gd[offset..offset + len].to_vec())?;
                    offset += len;
                    self.accumulate(grads, p, dp);
                }
            }
            Op::AdaIn {
                content,
                style,
                xhat,
                content_std,
                style_mean,
                style_std,
            } => {
                let (n, c, h, w) = self.value(*content).dims4()?;
                let (_, _, sh, sw) = self.value(*style).dims4()?;
                let (hw, shw) = (h * w, sh * sw);
                let hw_t = T::from_usize(hw).expect("count");
                let shw_t = T::from_usize(shw).expect("count");
                let mut dc = vec![T::zero(); n * c * hw];
                let mut ds = vec![T::zero(); n * c * shw];
                let sv = self.value(*style).data();
                for p in 0..n * c {
                    let gp = &gd[p * hw..(p + 1) * hw];
                    let xp = &xhat[p * hw..(p + 1) * hw];
                    let d_mean_s: T = gp.iter().copied().sum();
                    let d_std_s: T = gp.iter().zip(xp).map(|(&g, &x)| g * x).sum();
                    // Normalization backward with dxhat = g * style_std.
                    let sdf = style_std[p];
                    let mean_dxh = d_mean_s * sdf / hw_t;
                    let mean_dxh_x = d_std_s * sdf / hw_t;
                    for i in 0..hw {
                        dc[p * hw + i] = (gp[i] * sdf - mean_dxh - xp[i] * mean_dxh_x) / content_std[p];
                    }
                    let mf = style_mean[p];
                    for i in 0..shw {
                        let s = sv[p * shw + i];
                        ds[p * shw + i] = d_mean_s / shw_t + d_std_s * (s - mf) / (shw_t * sdf);
                    }
                }
                self.accumulate(grads, *content, Tensor::from_vec(&[n, c, h, w], dc)?);
                self.accumulate(grads, *style, Tensor::from_vec(&[n, c, sh, sw], ds)?);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let (n, k) = self.value(*logits).dims2()?;
                let scale = gd[0] / T::from_usize(n.max(1)).expect("count");
                let mut dl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * k + l] -= T::one();
                }
                dl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], dl)?);
            }
            Op::L1Mean { x, target } => {
                let scale = gd[0] / T::from_usize(target.len().max(1)).expect("count");
                let dx: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(target.shape(), dx)?);
            }
            Op::TripletMargin {
                anchor,
                positive,
                negative,
                margin,
            } => {
                let shape = self.value(*anchor).shape().to_vec();
                let t = shape[0];
                if t == 0 {
                    return Ok(());
                }
                let d = self.value(*anchor).row_len();
                let (a, p, n) = (
                    self.value(*anchor).data(),
                    self.value(*positive).data(),
                    self.value(*negative).data(),
                );
                let scale = gd[0] / T::from_usize(t).expect("count");
                let mut da = vec![T::zero(); a.len()];
                let mut dp = vec![T::zero(); a.len()];
                let mut dn = vec![T::zero(); a.len()];
                for i in 0..t {
                    let r = i * d..(i + 1) * d;
                    let dap = euclid(&a[r.clone()], &p[r.clone()]);
                    let dan = euclid(&a[r.clone()], &n[r.clone()]);
                    if dap - dan + *margin <= T::zero() {
                        continue;
                    }
                    for k in r {
                        // d|v|/dv = v/|v|, taken as 0 at v = 0.
                        if dap > T::zero() {
                            let u = (a[k] - p[k]) / dap * scale;
                            da[k] += u;
                            dp[k] -= u;
                        }
                        if dan > T::zero() {
                            let u = (a[k] - n[k]) / dan * scale;
                            da[k] -= u;
                            dn[k] += u;
                        }
                    }
                }
                self.accumulate(grads, *anchor, Tensor::from_vec(&shape, da)?);
                self.accumulate(grads, *positive, Tensor::from_vec(&shape, dp)?);
                self.accumulate(grads, *negative, Tensor::from_vec(&shape, dn)?);
            }
        }
        Ok(())
    }
}

fn euclid<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Float> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to an input or parameter node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed when a parameter was used more than once.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut merged: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (id, g) in &self.params {
            match merged.iter_mut().find(|(m, _)| m == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => merged.push((*id, g.clone())),
            }
        }
        merged.sort_by_key(|(id, _)| *id);
        merged
    }
}
