//! Differentiable kernels recorded on a [`Graph`].
//!
//! Layouts: images are `N×C×H×W`, feature vectors `N×F`, all row-major.
//! Multi-view batches are sample-major: image `b·V + v` is view `v` of
//! sample `b`.

use std::hash::Hasher;

use crate::autograd::{Backward, Graph, Var};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::{mismatch, Tensor, TensorError};

type Res = Result<Var, TensorError>;

fn dims4(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(mismatch(op, "rank 4 (N, C, H, W)", t.shape())),
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<[usize; 2], TensorError> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        _ => Err(mismatch(op, "rank 2 (N, F)", t.shape())),
    }
}

// ---------------------------------------------------------------- elementwise

struct AddOp;

impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct ReluOp;

impl<T: Scalar> Backward<T> for ReluOp {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = grad.data().iter().zip(out.data()).map(|(&g, &o)| if o > T::zero() { g } else { T::zero() }).collect();
        vec![Some(Tensor::from_vec(grad.shape(), data).expect("same shape"))]
    }

    fn branches(&self, out: &Tensor<T>, h: &mut dyn Hasher) {
        for chunk in out.data().chunks(64) {
            let mask = chunk.iter().enumerate().fold(0u64, |m, (i, &o)| m | (((o > T::zero()) as u64) << i));
            h.write_u64(mask);
        }
    }
}

struct ReshapeOp(Vec<usize>);

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshape(&self.0).expect("same element count"))]
    }
}

struct DotConstOp<T: Scalar>(Tensor<T>);

impl<T: Scalar> Backward<T> for DotConstOp<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        vec![Some(self.0.map(|c| c * g))]
    }
}

// ---------------------------------------------------------------- conv2d

/// Convolution geometry. Work is split into chunks of whole samples whose
/// patch matrix stays cache-sized; patches are rebuilt in backward rather
/// than stored.
#[derive(Clone, Copy)]
struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Target patch-matrix size per chunk, in elements.
const CONV_CHUNK_ELEMS: usize = 1 << 18;

impl ConvShape {
    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn chunk(&self) -> usize {
        (CONV_CHUNK_ELEMS / (self.ckk() * self.l()).max(1)).clamp(1, self.n)
    }

    fn cols<T: Scalar>(&self, x: &[T], n0: usize, nc: usize) -> Vec<T> {
        let plane = self.c * self.h * self.w;
        im2col(&x[n0 * plane..(n0 + nc) * plane], nc, self.c, self.h, self.w, self.k, self.stride, self.pad, self.ho, self.wo)
    }
}

struct Conv2dOp {
    shape: ConvShape,
    has_bias: bool,
}

/// Input positions `[lo, hi)` covered by pooling window `o`, clipped to
/// the input.
fn window(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    (start.max(0) as usize, ((start + k as isize) as usize).min(len))
}

/// Output columns `[lo, hi)` whose tap at kernel offset `kk` lands inside
/// an input axis of length `len`.
fn valid_range(kk: usize, s: usize, p: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
    let hi = if len + p > kk { ((len - 1 + p - kk) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// `(C·K·K) × (N·Ho·Wo)` patch matrix, written strictly in order.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut cols = Vec::with_capacity(c * k * k * n * ho * wo);
    for ci in 0..c {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ki, s, p, h, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(kj, s, p, w, wo);
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    cols.resize(cols.len() + oh_lo * wo, T::zero());
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + ki - p;
                        let src = &plane[ih * w..(ih + 1) * w];
                        cols.resize(cols.len() + ow_lo, T::zero());
                        let first = ow_lo * s + kj - p;
                        if s == 1 {
                            cols.extend_from_slice(&src[first..first + (ow_hi - ow_lo)]);
                        } else {
                            cols.extend(src[first..].iter().step_by(s).take(ow_hi - ow_lo).copied());
                        }
                        cols.resize(cols.len() + wo - ow_hi, T::zero());
                    }
                    cols.resize(cols.len() + (ho - oh_hi) * wo, T::zero());
                }
            }
        }
    }
    cols
}

/// Scatter-adds a chunk's patch gradients back onto its input planes.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(dcols: &[T], x: &mut [T], n: usize, c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) {
    let l = ho * wo;
    let cols_w = n * l;
    for ci in 0..c {
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(ki, s, p, h, ho);
            for kj in 0..k {
                let (ow_lo, ow_hi) = valid_range(kj, s, p, w, wo);
                let row = (ci * k + ki) * k + kj;
                let src_row = &dcols[row * cols_w..(row + 1) * cols_w];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + ki - p;
                        let dst = &mut x[base + ih * w..base + (ih + 1) * w];
                        let src = &src_row[ni * l + oh * wo + ow_lo..ni * l + oh * wo + ow_hi];
                        let first = ow_lo * s + kj - p;
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let sh = self.shape;
        let (x, weight) = (inputs[0].data(), inputs[1]);
        let (o, ckk, l) = (sh.o, sh.ckk(), sh.l());
        let mut dx = needs[0].then(|| Tensor::zeros(&[sh.n, sh.c, sh.h, sh.w]));
        let mut dw = needs[1].then(|| Tensor::zeros(weight.shape()));
        let plane = sh.c * sh.h * sh.w;
        let step = sh.chunk();
        let mut n0 = 0;
        while n0 < sh.n {
            let nc = step.min(sh.n - n0);
            let cols_w = nc * l;
            // dY of the chunk as O × (nc·L)
            let mut dy = Vec::with_capacity(o * cols_w);
            for oi in 0..o {
                for ni in n0..n0 + nc {
                    dy.extend_from_slice(&grad.data()[(ni * o + oi) * l..(ni * o + oi + 1) * l]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                let cols = sh.cols(x, n0, nc);
                gemm(Trans::No, Trans::Yes, o, cols_w, ckk, &dy, &cols, T::one(), dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcols = vec![T::zero(); ckk * cols_w];
                gemm(Trans::Yes, Trans::No, ckk, o, cols_w, weight.data(), &dy, T::zero(), &mut dcols);
                let out = &mut dx.data_mut()[n0 * plane..(n0 + nc) * plane];
                col2im(&dcols, out, nc, sh.c, sh.h, sh.w, sh.k, sh.stride, sh.pad, sh.ho, sh.wo);
            }
            n0 += nc;
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = vec![T::zero(); o];
                for (i, v) in grad.data().iter().enumerate() {
                    db[(i / l) % o] += *v;
                }
                Tensor::from_vec(&[o], db).expect("bias length")
            }));
        }
        out
    }
}

/// Sum with eight independent accumulators so the loop is not bound by
/// add latency. The combination order is fixed, so results are
/// reproducible.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(usize, T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.len() / 8;
    for c in 0..chunks {
        for (lane, a) in acc.iter_mut().enumerate() {
            let i = c * 8 + lane;
            *a += f(i, xs[i]);
        }
    }
    let mut tail = T::zero();
    for (i, &x) in xs.iter().enumerate().skip(chunks * 8) {
        tail += f(i, x);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// ---------------------------------------------------------------- batch norm

/// Training or inference behaviour of normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divided by the count).
    pub var: Vec<T>,
    pub count: usize,
}

struct BatchNormOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    s: usize,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let gamma = inputs[1].data();
        let (n, c, s) = (self.n, self.c, self.s);
        let g = grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let xh = &self.xhat[base..base + s];
                dgamma[ci] += lane_sum(&g[base..base + s], |j, v| v * xh[j]);
                dbeta[ci] += lane_sum(&g[base..base + s], |_, v| v);
            }
        }
        let dx = needs[0].then(|| {
            let mut d = Vec::with_capacity(g.len());
            let count = T::from_usize(n * s).expect("count");
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * s;
                    let scale = gamma[ci] * self.inv_std[ci];
                    let gs = &g[base..base + s];
                    if self.train {
                        let mean_g = dbeta[ci] / count;
                        let mean_gx = dgamma[ci] / count;
                        d.extend(gs.iter().zip(&self.xhat[base..base + s]).map(|(&gv, &xh)| scale * (gv - mean_g - xh * mean_gx)));
                    } else {
                        d.extend(gs.iter().map(|&gv| scale * gv));
                    }
                }
            }
            Tensor::from_vec(inputs[0].shape(), d).expect("same shape")
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dgamma).expect("len")),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta).expect("len")),
        ]
    }
}

// ---------------------------------------------------------------- pooling

/// Gradient router for every max-type reduction: output element `i` came
/// from input element `src[i]`.
struct GatherMaxOp {
    src: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherMaxOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&s, &g) in self.src.iter().zip(grad.data()) {
            d[s] += g;
        }
        vec![Some(dx)]
    }

    fn branches(&self, _: &Tensor<T>, h: &mut dyn Hasher) {
        self.src.iter().for_each(|&s| h.write_usize(s));
    }
}

struct GlobalAvgOp {
    s: usize,
}

impl<T: Scalar> Backward<T> for GlobalAvgOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::from_usize(self.s).expect("size");
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (chunk, &g) in dx.data_mut().chunks_mut(self.s).zip(grad.data()) {
            chunk.iter_mut().for_each(|v| *v = g * inv);
        }
        vec![Some(dx)]
    }
}

struct ViewMeanOp {
    views: usize,
}

impl<T: Scalar> Backward<T> for ViewMeanOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::from_usize(self.views).expect("views");
        let per_sample_out = inputs[0].len() / inputs[0].shape()[0];
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (b, gs) in grad.data().chunks(per_sample_out).enumerate() {
            for v in 0..self.views {
                let dst = &mut d[(b * self.views + v) * per_sample_out..(b * self.views + v + 1) * per_sample_out];
                for (x, &g) in dst.iter_mut().zip(gs) {
                    *x = g * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------- dense

struct LinearOp {
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for LinearOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            gemm(Trans::No, Trans::No, n, o, i, grad.data(), w.data(), T::zero(), dx.data_mut());
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            gemm(Trans::Yes, Trans::No, o, n, i, grad.data(), x.data(), T::zero(), dw.data_mut());
            dw
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut db = Tensor::zeros(&[o]);
                for row in grad.data().chunks(o) {
                    for (d, &g) in db.data_mut().iter_mut().zip(row) {
                        *d += g;
                    }
                }
                db
            }));
        }
        out
    }
}

struct GroupedLinearOp {
    groups: usize,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Scalar> Backward<T> for GroupedLinearOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (p, i, o) = (self.groups, self.in_dim, self.out_dim);
        let n = x.shape()[0];
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        let mut db = Tensor::zeros(&[p, o]);
        for b in 0..n {
            for g in 0..p {
                let xin = &x.data()[(b * p + g) * i..(b * p + g + 1) * i];
                let gout = &grad.data()[(b * p + g) * o..(b * p + g + 1) * o];
                let wg = &w.data()[g * o * i..(g + 1) * o * i];
                for (oi, &gv) in gout.iter().enumerate() {
                    db.data_mut()[g * o + oi] += gv;
                    let wrow = &wg[oi * i..(oi + 1) * i];
                    let dwrow = &mut dw.data_mut()[(g * o + oi) * i..(g * o + oi + 1) * i];
                    for ((dwv, &xv), (dxv, &wv)) in dwrow
                        .iter_mut()
                        .zip(xin)
                        .zip(dx.data_mut()[(b * p + g) * i..(b * p + g + 1) * i].iter_mut().zip(wrow))
                    {
                        *dwv += gv * xv;
                        *dxv += gv * wv;
                    }
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dw), needs[2].then_some(db)]
    }
}

struct CrossEntropyOp<T> {
    probs: Vec<T>,
    targets: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let b = self.targets.len();
        let scale = grad.item() / T::from_usize(b).expect("batch");
        let mut dx = Tensor::from_vec(inputs[0].shape(), self.probs.clone()).expect("shape");
        for (row, &t) in dx.data_mut().chunks_mut(self.classes).zip(&self.targets) {
            row[t] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        vec![Some(dx)]
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

// ---------------------------------------------------------------- graph API

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, vec![a, b], Some(Box::new(AddOp)), false))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, vec![x], Some(Box::new(ScaleOp(factor))), false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push(v, vec![x], Some(Box::new(ReluOp)), false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res {
        let old = self.shape(x).to_vec();
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, vec![x], Some(Box::new(ReshapeOp(old))), false))
    }

    /// `Σ x ⊙ weights` as a scalar; used to build test objectives.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Res {
        if self.shape(x) != weights.shape() {
            return Err(mismatch("dot_const", format!("{:?}", weights.shape()), self.shape(x)));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), vec![x], Some(Box::new(DotConstOp(weights))), false))
    }

    /// 2-D cross-correlation. `weight` is `O×C×K×K`, `bias` is `O`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Res {
        let [n, c, h, w] = dims4("conv2d", self.value(x))?;
        let [o, wc, k, k2] = dims4("conv2d weight", self.value(weight))?;
        if wc != c || k != k2 {
            return Err(mismatch("conv2d weight", format!("[O, {c}, K, K]"), self.shape(weight)));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch("conv2d", format!("input at least {k}x{k} after padding, stride >= 1"), self.shape(x)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(mismatch("conv2d bias", format!("[{o}]"), self.shape(b)));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let l = ho * wo;
        let sh = ConvShape { n, c, h, w, o, k, stride, pad, ho, wo };
        let ckk = sh.ckk();
        let bias_v = bias.map(|b| self.value(b).data().to_vec());
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut od = Vec::with_capacity(o * n * l);
        let step = sh.chunk();
        let mut y = Vec::new();
        let mut n0 = 0;
        while n0 < n {
            let nc = step.min(n - n0);
            let cols = sh.cols(xd, n0, nc);
            y.resize(o * nc * l, T::zero());
            gemm(Trans::No, Trans::No, o, ckk, nc * l, wd, &cols, T::zero(), &mut y);
            for ni in 0..nc {
                for oi in 0..o {
                    let src = &y[oi * nc * l + ni * l..oi * nc * l + (ni + 1) * l];
                    match &bias_v {
                        Some(bv) => od.extend(src.iter().map(|&v| v + bv[oi])),
                        None => od.extend_from_slice(src),
                    }
                }
            }
            n0 += nc;
        }
        let out = Tensor::from_vec(&[n, o, ho, wo], od)?;
        let op = Conv2dOp { shape: sh, has_bias: bias.is_some() };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Some(Box::new(op)), false))
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// In [`Mode::Train`] the batch statistics are returned so the caller can
    /// update its running averages; in [`Mode::Eval`] `running` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[T], &[T]),
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("batch_norm", "rank >= 2", &shape));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm affine", format!("[{c}]"), self.shape(gamma)));
        }
        let data = self.value(x).data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let count = n * s;
                if count < 2 {
                    return Err(TensorError::BatchTooSmall(count));
                }
                let cnt = T::from_usize(count).expect("count");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        mean[ci] += lane_sum(&data[base..base + s], |_, v| v);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        let m = mean[ci];
                        var[ci] += lane_sum(&data[base..base + s], |_, v| (v - m) * (v - m));
                    }
                }
                var.iter_mut().for_each(|v| *v /= cnt);
                let stats = BatchStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(mismatch("batch_norm running stats", format!("[{c}]"), &[running.0.len()]));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(data.len());
        let mut od = Vec::with_capacity(data.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                let (m, is, gc, bc) = (mean[ci], inv_std[ci], g[ci], b[ci]);
                xhat.extend(data[base..base + s].iter().map(|&v| (v - m) * is));
                od.extend(xhat[base..base + s].iter().map(|&xh| gc * xh + bc));
            }
        }
        let out = Tensor::from_vec(&shape, od)?;
        let op = BatchNormOp { xhat, inv_std, n, c, s, train: mode == Mode::Train };
        Ok((self.push(out, vec![x, gamma, beta], Some(Box::new(op)), false), stats))
    }

    /// Max pooling with implicit `-inf` padding. Ties go to the lowest
    /// input index.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Res {
        let [n, c, h, w] = dims4("maxpool2d", self.value(x))?;
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch("maxpool2d", format!("window {k}, stride {stride}, pad {pad} fitting the input"), &[n, c, h, w]));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let data = self.value(x).data();
        let mut od = Vec::with_capacity(n * c * ho * wo);
        let mut src = Vec::with_capacity(n * c * ho * wo);
        let rows: Vec<(usize, usize)> = (0..ho).map(|oh| window(oh, stride, pad, k, h)).collect();
        let cols: Vec<(usize, usize)> = (0..wo).map(|ow| window(ow, stride, pad, k, w)).collect();
        for plane in 0..n * c {
            let base = plane * h * w;
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut idx = base + r0 * w + c0;
                    let mut v = data[idx];
                    for ih in r0..r1 {
                        let row = base + ih * w;
                        for (j, &cand) in data[row + c0..row + c1].iter().enumerate() {
                            if cand > v {
                                v = cand;
                                idx = row + c0 + j;
                            }
                        }
                    }
                    od.push(v);
                    src.push(idx);
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], od)?;
        Ok(self.push(out, vec![x], Some(Box::new(GatherMaxOp { src })), false))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Res {
        let [n, c, h, w] = dims4("global_avg_pool", self.value(x))?;
        let s = h * w;
        let inv = T::one() / T::from_usize(s).expect("size");
        let out = Tensor::from_fn(&[n, c], |i| self.value(x).data()[i * s..(i + 1) * s].iter().copied().sum::<T>() * inv);
        Ok(self.push(out, vec![x], Some(Box::new(GlobalAvgOp { s })), false))
    }

    /// `x·Wᵀ + b` with `x: N×I`, `W: O×I`, `b: O`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Res {
        let [n, i] = dims2("linear", self.value(x))?;
        let [o, wi] = dims2("linear weight", self.value(weight))?;
        if wi != i {
            return Err(mismatch("linear weight", format!("[O, {i}]"), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(mismatch("linear bias", format!("[{o}]"), self.shape(b)));
            }
        }
        let mut out = Tensor::zeros(&[n, o]);
        gemm(Trans::No, Trans::Yes, n, i, o, self.value(x).data(), self.value(weight).data(), T::zero(), out.data_mut());
        if let Some(b) = bias {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(o) {
                row.iter_mut().zip(&bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, inputs, Some(Box::new(LinearOp { has_bias: bias.is_some() })), false))
    }

    /// Independent dense maps per group: `x: N×(P·I)`, `W: P×O×I`, `b: P×O`,
    /// output `N×(P·O)`.
    pub fn grouped_linear(&mut self, x: Var, weight: Var, bias: Var) -> Res {
        let [n, pi] = dims2("grouped_linear", self.value(x))?;
        let (p, o, i) = match *self.shape(weight) {
            [p, o, i] => (p, o, i),
            _ => return Err(mismatch("grouped_linear weight", "[P, O, I]", self.shape(weight))),
        };
        if p * i != pi {
            return Err(mismatch("grouped_linear", format!("[N, {}]", p * i), &[n, pi]));
        }
        if self.shape(bias) != [p, o] {
            return Err(mismatch("grouped_linear bias", format!("[{p}, {o}]"), self.shape(bias)));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = Tensor::zeros(&[n, p * o]);
        let od = out.data_mut();
        for b in 0..n {
            for g in 0..p {
                let xin = &xv[(b * p + g) * i..(b * p + g + 1) * i];
                for oi in 0..o {
                    let wrow = &wv[(g * o + oi) * i..(g * o + oi + 1) * i];
                    od[(b * p + g) * o + oi] = bv[g * o + oi] + xin.iter().zip(wrow).map(|(&a, &c)| a * c).sum::<T>();
                }
            }
        }
        let op = GroupedLinearOp { groups: p, in_dim: i, out_dim: o };
        Ok(self.push(out, vec![x, weight, bias], Some(Box::new(op)), false))
    }

    /// Mean softmax cross-entropy of `logits: B×N` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Res {
        let [b, classes] = dims2("cross_entropy", self.value(logits))?;
        if b != targets.len() || b == 0 {
            return Err(mismatch("cross_entropy", format!("{} rows", targets.len()), &[b, classes]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::BadTarget { target: t, classes });
        }
        let probs = softmax_rows(self.value(logits).data(), classes);
        let data = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &t) in data.chunks(classes).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss /= T::from_usize(b).expect("batch");
        let op = CrossEntropyOp { probs, targets: targets.to_vec(), classes };
        Ok(self.push(Tensor::scalar(loss), vec![logits], Some(Box::new(op)), false))
    }

    /// Element-wise max over groups of views, groups concatenated along
    /// channels: `(B·V)×C×H×W → B×(G·C)×H×W`. Ties go to the lowest view
    /// index within the group.
    pub fn view_group_max(&mut self, x: Var, views: usize, groups: &[Vec<usize>]) -> Res {
        let [bv, c, h, w] = dims4("view_group_max", self.value(x))?;
        if views == 0 || bv % views != 0 {
            return Err(mismatch("view_group_max", format!("leading dim divisible by {views} views"), &[bv, c, h, w]));
        }
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&v| v >= views)) {
            return Err(TensorError::BadConfig(format!("view groups {groups:?} invalid for {views} views")));
        }
        let b = bv / views;
        let per = c * h * w;
        let data = self.value(x).data();
        let mut out = Tensor::zeros(&[b, groups.len() * c, h, w]);
        let mut src = vec![0usize; out.len()];
        let od = out.data_mut();
        for bi in 0..b {
            for (gi, group) in groups.iter().enumerate() {
                let mut sorted = group.clone();
                sorted.sort_unstable();
                let dst = (bi * groups.len() + gi) * per;
                for e in 0..per {
                    let mut best_idx = (bi * views + sorted[0]) * per + e;
                    for &v in &sorted[1..] {
                        let idx = (bi * views + v) * per + e;
                        if data[idx] > data[best_idx] {
                            best_idx = idx;
                        }
                    }
                    od[dst + e] = data[best_idx];
                    src[dst + e] = best_idx;
                }
            }
        }
        Ok(self.push(out, vec![x], Some(Box::new(GatherMaxOp { src })), false))
    }

    /// Element-wise mean over views: `(B·V)×C×H×W → B×C×H×W`.
    pub fn view_mean(&mut self, x: Var, views: usize) -> Res {
        let [bv, c, h, w] = dims4("view_mean", self.value(x))?;
        if views == 0 || bv % views != 0 {
            return Err(mismatch("view_mean", format!("leading dim divisible by {views} views"), &[bv, c, h, w]));
        }
        let b = bv / views;
        let per = c * h * w;
        let inv = T::one() / T::from_usize(views).expect("views");
        let data = self.value(x).data();
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for (bi, dst) in out.data_mut().chunks_mut(per).enumerate() {
            for v in 0..views {
                let src = &data[(bi * views + v) * per..(bi * views + v + 1) * per];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok(self.push(out, vec![x], Some(Box::new(ViewMeanOp { views })), false))
    }

    /// Horizontal strip maxima at several scales: `B×C×H×W → B×(P·C)` with
    /// `P = Σ scales`, scale-major, top strip first, channels innermost.
    pub fn strip_max(&mut self, x: Var, scales: &[usize]) -> Res {
        let [b, c, h, w] = dims4("strip_max", self.value(x))?;
        let bad: Vec<usize> = scales.iter().copied().filter(|&n| n == 0 || h % n != 0).collect();
        if scales.is_empty() || !bad.is_empty() {
            return Err(TensorError::BadScale(bad, h));
        }
        let p: usize = scales.iter().sum();
        let data = self.value(x).data();
        let mut out = Tensor::zeros(&[b, p * c]);
        let mut src = vec![0usize; out.len()];
        let od = out.data_mut();
        for bi in 0..b {
            let mut strip = 0;
            for &n in scales {
                let rows = h / n;
                for s in 0..n {
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        let first = plane + s * rows * w;
                        let mut best = first;
                        for idx in first..first + rows * w {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                        let o = (bi * p + strip) * c + ci;
                        od[o] = data[best];
                        src[o] = best;
                    }
                    strip += 1;
                }
            }
        }
        Ok(self.push(out, vec![x], Some(Box::new(GatherMaxOp { src })), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_ones_counts_overlaps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[4], 9.0);
        assert_eq!([v[0], v[2], v[6], v[8]], [4.0; 4]);
        assert_eq!([v[1], v[3], v[5], v[7]], [6.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let xv = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &xv);
    }

    #[test]
    fn conv_output_size() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 64, 64]));
        let w = g.constant(Tensor::zeros(&[4, 1, 7, 7]));
        let y = g.conv2d(x, w, None, 2, 3).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 32, 32]);
        let bad = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, bad, None, 1, 1), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.maxpool2d(x, 2, 2, 0).unwrap();
        let s = g.dot_const(y, t(&[1, 1, 1, 1], &[1.0])).unwrap();
        g.backward(s);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_of_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
        let y = g.global_avg_pool(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn batch_norm_constant_input_gives_shift() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 3, 3], 7.0));
        let gamma = g.constant(t(&[2], &[1.5, 2.0]));
        let beta = g.constant(t(&[2], &[0.25, -1.0]));
        let (y, stats) = g.batch_norm(x, gamma, beta, Mode::Train, (&[], &[]), 1e-5).unwrap();
        let v = g.value(y).data();
        assert!(v[..9].iter().all(|&e| e == 0.25));
        assert!(v[9..18].iter().all(|&e| e == -1.0));
        assert_eq!(stats.unwrap().var, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[8, 3], |i| ((i * 37 % 11) as f64).sin() * 4.0 + 2.0));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, _) = g.batch_norm(x, gamma, beta, Mode::Train, (&[], &[]), 1e-5).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..8).map(|r| g.value(y).data()[r * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_rejects_single_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2], 7.0));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert_eq!(
            g.batch_norm(x, gamma, beta, Mode::Train, (&[], &[]), 1e-5).unwrap_err(),
            TensorError::BatchTooSmall(1)
        );
        let (y, s) = g.batch_norm(x, gamma, beta, Mode::Eval, (&[7.0, 7.0], &[1.0, 1.0]), 0.0).unwrap();
        assert!(s.is_none());
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 10], 0.3));
        let l = g.cross_entropy(x, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(g.cross_entropy(x, &[0, 10, 1]).unwrap_err(), TensorError::BadTarget { target: 10, classes: 10 });
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let mut g = Graph::new();
            let mut logits = vec![0.0; 5];
            logits[2] = margin;
            let x = g.constant(t(&[1, 5], &logits));
            let v = g.cross_entropy(x, &[2]).unwrap();
            let l = g.value(v).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-11);
    }

    #[test]
    fn view_group_max_small() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2, 2], &[1.0, 2.0, 3.0, 0.0, 0.0, 5.0, 1.0, 1.0]));
        let y = g.view_group_max(x, 2, &[vec![0, 1]]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 5.0, 3.0, 1.0]);
        let m = g.view_mean(x, 2).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 3.5, 2.0, 0.5]);
    }

    #[test]
    fn strip_max_rejects_bad_scale() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 6, 4]));
        assert_eq!(g.strip_max(x, &[1, 2, 4]).unwrap_err(), TensorError::BadScale(vec![4], 6));
        let y = g.strip_max(x, &[1, 2, 3, 6]).unwrap();
        assert_eq!(g.shape(y), &[1, 24]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0f64, 2.0, 3.0, 1000.0, 1000.0, 1000.0], 3);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
