use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::{col2im, gemm, im2col, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Sum { x: usize },
    Mean { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool { x: usize },
    MaskedMean { x: usize, weights: Vec<T> },
    Reshape { x: usize },
    GridToRows { x: usize },
    RepeatRows { x: usize, times: usize },
    CosineRows { a: usize, b: usize, eps: T },
    Linear { x: usize, w: usize, b: Option<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Inputs always precede outputs,
/// so reverse index order is a valid reverse topological order.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for leaves that were unreachable, constant, or behind a stop-gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: a new constant leaf carrying the same value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.idx(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.val(xi).shape();
        let ws = self.val(wi).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d expects NCHW input and OIKK weight, got {xs:?} and {ws:?}")));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d kernel must be square, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!("input has {} channels, weight expects {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (n, out_c) = (xs[0], ws[0]);
        if let Some(bi) = bi {
            if self.val(bi).shape() != [out_c] {
                return Err(Error::shape(format!("bias shape {:?}, expected [{out_c}]", self.val(bi).shape())));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, padding).ok_or_else(|| {
            Error::shape(format!("kernel {} does not fit input {xs:?} with padding {padding}", ws[2]))
        })?;
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_sz = geom.channels * geom.height * geom.width;
        let xd = self.val(xi).data();
        let wd = self.val(wi).data();
        let mut out = vec![T::zero(); n * out_c * cols];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        for s in 0..n {
            let img = &xd[s * in_sz..(s + 1) * in_sz];
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut col);
                &col
            };
            gemm(out_c, rows, cols, wd, false, src, false, &mut out[s * out_c * cols..(s + 1) * out_c * cols], false);
        }
        if let Some(bi) = bi {
            let bd = self.val(bi).data();
            for (chunk_idx, chunk) in out.chunks_mut(cols).enumerate() {
                let bv = bd[chunk_idx % out_c];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::from_parts(vec![n, out_c, geom.out_h, geom.out_w], out);
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, geom }, &inputs))
    }

    /// Normalize per channel. Train mode returns the batch mean and the
    /// unbiased batch variance for running-statistic updates.
    pub(crate) fn batch_norm_raw(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.val(xi).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(format!("batch norm expects N×C[×…], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.val(gi).shape() != [c] || self.val(bi).shape() != [c] {
            return Err(Error::shape(format!(
                "gamma/beta shapes {:?}/{:?} do not match {c} channels",
                self.val(gi).shape(),
                self.val(bi).shape()
            )));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("batch norm eps must be positive"));
        }
        let m = n * spatial;
        let xd = self.val(xi).data();
        let at = |s: usize, ch: usize, p: usize| (s * c + ch) * spatial + p;
        let (mean, var, batch_stats) = match stats {
            Some((mu, v)) => {
                if mu.len() != c || v.len() != c {
                    return Err(Error::shape("running statistics do not match channel count"));
                }
                (mu.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_m = T::one() / T::of(m as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        for p in 0..spatial {
                            acc = acc + xd[at(s, ch, p)];
                        }
                    }
                    let mu = acc * inv_m;
                    let mut sq = T::zero();
                    for s in 0..n {
                        for p in 0..spatial {
                            let d = xd[at(s, ch, p)] - mu;
                            sq = sq + d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq * inv_m;
                }
                let unbiased = if m > 1 {
                    let k = T::of(m as f64 / (m - 1) as f64);
                    var.iter().map(|&v| v * k).collect()
                } else {
                    var.clone()
                };
                let batch = (mean.clone(), unbiased);
                (mean, var, Some(batch))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.val(gi).data();
        let bd = self.val(bi).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..spatial {
                    let k = at(s, ch, p);
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = gd[ch] * h + bd[ch];
                }
            }
        }
        let train = batch_stats.is_some();
        let value = Tensor::from_parts(xs, out);
        let var_out = self.push(value, Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, train }, &[xi, gi, bi]);
        Ok((var_out, batch_stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(value, Op::Relu { x: xi }, &[xi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(ai).zip_map(self.val(bi), |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(ai).zip_map(self.val(bi), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).map(|v| v * c);
        Ok(self.push(value, Op::Scale { x: xi, c }, &[xi]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = Tensor::scalar(self.val(xi).sum());
        Ok(self.push(value, Op::Sum { x: xi }, &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.val(xi);
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        Ok(self.push(value, Op::Mean { x: xi }, &[xi]))
    }

    fn nchw(&self, i: usize, what: &str) -> Result<[usize; 4]> {
        let s = self.val(i).shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("{what} expects NCHW input, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nchw(xi, "max_pool")?;
        if padding >= kernel && kernel > 0 {
            return Err(Error::invalid("max pool padding must be smaller than the kernel"));
        }
        let geom = ConvGeom::new(c, h, w, kernel, stride, padding)
            .ok_or_else(|| Error::invalid(format!("pool kernel {kernel} stride {stride} larger than input {h}×{w}")))?;
        let xd = self.val(xi).data();
        let (oh, ow) = (geom.out_h, geom.out_w);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let k = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xd[k] > best {
                                best = xd[k];
                                best_i = k;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::MaxPool { x: xi, argmax }, &[xi]))
    }

    /// Windowed mean; padded positions count as zeros.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nchw(xi, "avg_pool")?;
        let geom = ConvGeom::new(c, h, w, kernel, stride, padding)
            .ok_or_else(|| Error::invalid(format!("pool kernel {kernel} stride {stride} larger than input {h}×{w}")))?;
        let xd = self.val(xi).data();
        let (oh, ow) = (geom.out_h, geom.out_w);
        let inv = T::one() / T::of((kernel * kernel) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                acc = acc + xd[base + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, Op::AvgPool { x: xi, kernel, stride, padding }, &[xi]))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nchw(xi, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out = self.val(xi).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x: xi }, &[xi]))
    }

    /// `N×C×H×W → N×C` weighted spatial mean with per-image cell weights
    /// (`N×H·W`, constant). Each image's weights must have a positive sum.
    pub fn masked_mean(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nchw(xi, "masked_mean")?;
        let hw = h * w;
        if weights.len() != n * hw {
            return Err(Error::shape(format!("mask has {} weights, expected {}", weights.len(), n * hw)));
        }
        let mut normalized = weights.to_vec();
        for img in normalized.chunks_mut(hw) {
            let total: T = img.iter().copied().sum();
            if total <= T::zero() {
                return Err(Error::invalid("mask keeps no cell for some image"));
            }
            img.iter_mut().for_each(|v| *v = *v / total);
        }
        let xd = self.val(xi).data();
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            let wrow = &normalized[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let plane = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                out[s * c + ch] = plane.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
            }
        }
        let value = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(value, Op::MaskedMean { x: xi, weights: normalized }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: xi }, &[xi]))
    }

    /// `N×C×H×W → (N·H·W)×C`, rows ordered by image then row-major cell.
    pub fn grid_to_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nchw(xi, "grid_to_rows")?;
        let hw = h * w;
        let xd = self.val(xi).data();
        let mut out = vec![T::zero(); n * hw * c];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * hw + p) * c + ch] = xd[(s * c + ch) * hw + p];
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n * hw, c], out), Op::GridToRows { x: xi }, &[xi]))
    }

    /// `R×D → (R·times)×D`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).shape();
        if s.len() != 2 || times == 0 {
            return Err(Error::shape(format!("repeat_rows expects R×D and times ≥ 1, got {s:?}, {times}")));
        }
        let (r, d) = (s[0], s[1]);
        let xd = self.val(xi).data();
        let mut out = Vec::with_capacity(r * times * d);
        for row in xd.chunks(d) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r * times, d], out), Op::RepeatRows { x: xi, times }, &[xi]))
    }

    /// Row-wise `dot(a,b) / ((‖a‖+eps)(‖b‖+eps))`, shape `[R]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.val(ai).shape(), self.val(bi).shape());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape(format!("cosine expects equal R×D operands, got {sa:?} and {sb:?}")));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("cosine eps must be positive"));
        }
        let d = sa[1];
        let out = self
            .val(ai)
            .data()
            .chunks(d)
            .zip(self.val(bi).data().chunks(d))
            .map(|(ra, rb)| {
                let (dot, na, nb) = row_stats(ra, rb);
                dot / ((na + eps) * (nb + eps))
            })
            .collect::<Vec<_>>();
        let value = Tensor::from_parts(vec![sa[0]], out);
        Ok(self.push(value, Op::CosineRows { a: ai, b: bi, eps }, &[ai, bi]))
    }

    /// `x (N×I) · wᵀ (I×O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (xs, ws) = (self.val(xi).shape(), self.val(wi).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear expects N×I input and O×I weight, got {xs:?} and {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(n, i, o, self.val(xi).data(), false, self.val(wi).data(), true, &mut out, false);
        if let Some(bi) = bi {
            let bd = self.val(bi).data();
            if bd.len() != o {
                return Err(Error::shape(format!("bias has {} entries, expected {o}", bd.len())));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let mut inputs = vec![xi, wi];
        inputs.extend(bi);
        Ok(self.push(Tensor::from_parts(vec![n, o], out), Op::Linear { x: xi, w: wi, b: bi }, &inputs))
    }

    /// Mean softmax cross-entropy of `N×K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let s = self.val(li).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!("cross entropy: logits {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(self.val(li).numel());
        let mut loss = T::zero();
        for (row, &y) in self.val(li).data().chunks(k).zip(labels) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss = loss + lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(loss / T::of(labels.len() as f64));
        Ok(self.push(value, Op::CrossEntropy { logits: li, labels: labels.to_vec(), probs }, &[li]))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(li + 1, || None);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::new();
        leaf_grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[li].requires_grad {
            return Ok(Gradients { tape: self.id, grads: leaf_grads });
        }
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads: leaf_grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, contrib: Vec<T>) {
        match &mut grads[i] {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let (n, out_c) = (xv.shape()[0], wv.shape()[0]);
                let (rows, cols) = (geom.rows(), geom.cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = if want_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wv.numel()] } else { Vec::new() };
                let mut col = vec![T::zero(); rows * cols];
                let mut dcol = vec![T::zero(); rows * cols];
                for s in 0..n {
                    let gs = &g[s * out_c * cols..(s + 1) * out_c * cols];
                    let img = &xv.data()[s * in_sz..(s + 1) * in_sz];
                    if want_w {
                        let src: &[T] = if geom.is_pointwise() {
                            img
                        } else {
                            im2col(img, geom, &mut col);
                            &col
                        };
                        gemm(out_c, cols, rows, gs, false, src, true, &mut dw, true);
                    }
                    if want_x {
                        let dst = &mut dx[s * in_sz..(s + 1) * in_sz];
                        if geom.is_pointwise() {
                            gemm(rows, out_c, cols, wv.data(), true, gs, false, dst, false);
                        } else {
                            gemm(rows, out_c, cols, wv.data(), true, gs, false, &mut dcol, false);
                            col2im(&dcol, geom, dst);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, dx);
                }
                if want_w {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); out_c];
                        for (chunk_idx, chunk) in g.chunks(cols).enumerate() {
                            db[chunk_idx % out_c] = db[chunk_idx % out_c] + chunk.iter().copied().sum();
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.val(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = T::of((n * spatial) as f64);
                let gd = self.val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for p in 0..spatial {
                            sum_dy[ch] = sum_dy[ch] + g[base + p];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + g[base + p] * xhat[base + p];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * spatial;
                            let k = gd[ch] * inv_std[ch];
                            for p in 0..spatial {
                                dx[base + p] = if *train {
                                    k / m * (m * g[base + p] - sum_dy[ch] - xhat[base + p] * sum_dy_xhat[ch])
                                } else {
                                    k * g[base + p]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, sum_dy_xhat);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, sum_dy);
                }
            }
            Op::Relu { x } => {
                let dx = self.val(*x).data().iter().zip(g).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let da = self.val(*b).data().iter().zip(g).map(|(&v, &d)| v * d).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = self.val(*a).data().iter().zip(g).map(|(&v, &d)| v * d).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|&d| d * *c).collect());
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![g[0]; self.val(*x).numel()]);
            }
            Op::Mean { x } => {
                let numel = self.val(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::of(numel as f64); numel]);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).numel()];
                for (&k, &d) in argmax.iter().zip(g) {
                    dx[k] = dx[k] + d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, kernel, stride, padding } => {
                let s = self.val(*x).shape();
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let inv = T::one() / T::of((kernel * kernel) as f64);
                let mut dx = vec![T::zero(); self.val(*x).numel()];
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = g[(plane * oh + oy) * ow + ox] * inv;
                            for ky in 0..*kernel {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..*kernel {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix >= 0 && ix < w as isize {
                                        let k = plane * h * w + iy as usize * w + ix as usize;
                                        dx[k] = dx[k] + d;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.val(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(self.val(*x).numel());
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedMean { x, weights } => {
                let s = self.val(*x).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = Vec::with_capacity(n * c * hw);
                for smp in 0..n {
                    let wrow = &weights[smp * hw..(smp + 1) * hw];
                    for ch in 0..c {
                        let d = g[smp * c + ch];
                        dx.extend(wrow.iter().map(|&wt| wt * d));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::GridToRows { x } => {
                let s = self.val(*x).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![T::zero(); n * c * hw];
                for smp in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(smp * c + ch) * hw + p] = g[(smp * hw + p) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatRows { x, times } => {
                let d = self.val(*x).shape()[1];
                let mut dx = Vec::with_capacity(self.val(*x).numel());
                for block in g.chunks(d * times) {
                    let mut acc = vec![T::zero(); d];
                    for row in block.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    dx.extend(acc);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CosineRows { a, b, eps } => {
                let d = self.val(*a).shape()[1];
                let ad = self.val(*a).data();
                let bd = self.val(*b).data();
                let (want_a, want_b) = (self.wants(*a), self.wants(*b));
                let mut da = if want_a { vec![T::zero(); ad.len()] } else { Vec::new() };
                let mut db = if want_b { vec![T::zero(); bd.len()] } else { Vec::new() };
                for (r, &gr) in g.iter().enumerate() {
                    let ra = &ad[r * d..(r + 1) * d];
                    let rb = &bd[r * d..(r + 1) * d];
                    let (dot, na, nb) = row_stats(ra, rb);
                    let (pa, pb) = (na + *eps, nb + *eps);
                    let denom = pa * pb;
                    if want_a {
                        let k = if na > T::zero() { dot / (pa * denom * na) } else { T::zero() };
                        for j in 0..d {
                            da[r * d + j] = gr * (rb[j] / denom - k * ra[j]);
                        }
                    }
                    if want_b {
                        let k = if nb > T::zero() { dot / (pb * denom * nb) } else { T::zero() };
                        for j in 0..d {
                            db[r * d + j] = gr * (ra[j] / denom - k * rb[j]);
                        }
                    }
                }
                if want_a {
                    self.accumulate(grads, *a, da);
                }
                if want_b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (n, i_dim, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * i_dim];
                    gemm(n, o, i_dim, g, false, wv.data(), false, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * i_dim];
                    gemm(o, n, i_dim, g, true, xv.data(), false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.val(*logits).shape()[1];
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * k + y] = dl[r * k + y] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn row_stats<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut sa = T::zero();
    let mut sb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        sa = sa + x * x;
        sb = sb + y * y;
    }
    (dot, sa.sqrt(), sb.sqrt())
}
