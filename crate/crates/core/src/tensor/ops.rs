//! Forward kernels and their vector-Jacobian products on plain tensors.
//!
//! The tape in [`super::Var`] wraps these; the bench harness calls them
//! directly so component timings carry no recording overhead.

use super::{Element, MatView, Tensor};
use crate::error::{LevitError, Result};
use crate::Mode;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(LevitError::config("stride", "must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(LevitError::shape("conv2d", format!("padded extent >= kernel {kernel}"), padded));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Multiply-accumulates of a convolution over the whole batch.
pub fn conv2d_macs(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<u64> {
    let (b, h, w) = (input[0], input[2], input[3]);
    let (cout, cin, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    let ho = conv_out_extent(h, kh, stride, padding)?;
    let wo = conv_out_extent(w, kw, stride, padding)?;
    Ok((b * cout * ho * wo * cin * kh * kw) as u64)
}

/// Multiply-accumulates of `(.., m, k) x (.., k, n)`, per batch slice times slices.
pub fn matmul_macs(batch: usize, m: usize, k: usize, n: usize) -> u64 {
    (batch * m * k * n) as u64
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, cin, h, w] = input[..] else {
            return Err(LevitError::shape("conv2d", "BCHW input", format!("{input:?}")));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(LevitError::shape("conv2d", "(Cout, Cin, kh, kw) weight", format!("{weight:?}")));
        };
        if wcin != cin {
            return Err(LevitError::shape("conv2d", format!("{wcin} input channels"), cin));
        }
        let ho = conv_out_extent(h, kh, stride, padding)?;
        let wo = conv_out_extent(w, kw, stride, padding)?;
        Ok(Self { batch, cin, h, w, cout, kh, kw, ho, wo, stride, padding })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_sites(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image into rows of `col`; row `r` starts at `r * stride`.
    fn im2col<E: Element>(&self, x: &[E], col: &mut [E], stride: usize) {
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &mut col[((c * self.kh + ki) * self.kw + kj) * stride..];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                        let dst = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = E::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                            *d = if iw < 0 || iw >= self.w as isize { E::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates rows of `col` back into one image.
    fn col2im<E: Element>(&self, col: &[E], dx: &mut [E], stride: usize) {
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = &col[((c * self.kh + ki) * self.kw + kj) * stride..];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.padding as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] = dst[iw as usize] + row[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }

    /// The whole batch unfolded into a `(taps, B * sites)` matrix.
    fn unfold<E: Element>(&self, input: &[E]) -> Vec<E> {
        let in_plane = self.cin * self.h * self.w;
        let sites = self.out_sites();
        if self.pointwise() {
            return to_channel_major(input, self.batch, self.cin, sites);
        }
        let width = self.batch * sites;
        let mut col = vec![E::zero(); self.taps() * width];
        for b in 0..self.batch {
            self.im2col(&input[b * in_plane..(b + 1) * in_plane], &mut col[b * sites..], width);
        }
        col
    }
}

/// `(B, C, S)` to `(C, B * S)`.
fn to_channel_major<E: Element>(x: &[E], b: usize, c: usize, s: usize) -> Vec<E> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![E::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * s..][..s].copy_from_slice(&x[(bi * c + ci) * s..][..s]);
        }
    }
    out
}

/// `(C, B * S)` to `(B, C, S)`.
fn from_channel_major<E: Element>(x: &[E], b: usize, c: usize, s: usize) -> Vec<E> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![E::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * s..][..s].copy_from_slice(&x[(ci * b + bi) * s..][..s]);
        }
    }
    out
}

/// 2-D cross-correlation over a BCHW input, as one GEMM of the weights
/// against the im2col unfolding of the whole batch.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let (taps, sites) = (g.taps(), g.out_sites());
    let width = g.batch * sites;
    let col = g.unfold(input.data());
    let mut out = vec![E::zero(); g.cout * width];
    E::gemm_raw(
        weight.data(),
        MatView { rows: g.cout, cols: taps, transposed: false },
        &col,
        MatView { rows: taps, cols: width, transposed: false },
        &mut out,
        E::zero(),
    );
    let out = Tensor::new(&[g.batch, g.cout, g.ho, g.wo], from_channel_major(&out, g.batch, g.cout, sites))?;
    match bias {
        Some(bias) => add_channel_bias(&out, bias),
        None => Ok(out),
    }
}

/// Gradients of [`conv2d`] (without bias) w.r.t. input and weight.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    let (taps, sites) = (g.taps(), g.out_sites());
    let width = g.batch * sites;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return Err(LevitError::shape(
            "conv2d_backward",
            format!("{:?}", [g.batch, g.cout, g.ho, g.wo]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let col = g.unfold(input.data());
    let go = to_channel_major(grad_out.data(), g.batch, g.cout, sites);
    let gov = MatView { rows: g.cout, cols: width, transposed: false };
    // dW = dY * col^T
    let mut dw = vec![E::zero(); weight.numel()];
    E::gemm_raw(&go, gov, &col, MatView { rows: taps, cols: width, transposed: true }, &mut dw, E::zero());
    // dcol = W^T * dY
    let mut dcol = vec![E::zero(); taps * width];
    E::gemm_raw(weight.data(), MatView { rows: g.cout, cols: taps, transposed: true }, &go, gov, &mut dcol, E::zero());
    let dx = if g.pointwise() {
        from_channel_major(&dcol, g.batch, g.cin, sites)
    } else {
        let in_plane = g.cin * g.h * g.w;
        let mut dx = vec![E::zero(); input.numel()];
        for b in 0..g.batch {
            g.col2im(&dcol[b * sites..], &mut dx[b * in_plane..(b + 1) * in_plane], width);
        }
        dx
    };
    Ok((Tensor::new(input.shape(), dx)?, Tensor::new(weight.shape(), dw)?))
}

/// (batch, channels, sites) view of a tensor with at least two axes.
fn channel_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(LevitError::shape(op, "at least (B, C)", format!("{shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_channels<E: Element>(t: &Tensor<E>, channels: usize, op: &'static str, what: &str) -> Result<()> {
    if t.shape() != [channels] {
        return Err(LevitError::shape(op, format!("{what} of shape [{channels}]"), format!("{:?}", t.shape())));
    }
    Ok(())
}

/// Adds `bias[c]` to every element of channel `c` (axis 1).
pub fn add_channel_bias<E: Element>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, c, s) = channel_view(x.shape(), "add_channel_bias")?;
    check_channels(bias, c, "add_channel_bias", "bias")?;
    let bd = bias.data();
    Ok(per_channel(x, c, s, |ch, v| v + bd[ch]))
}

/// Applies `f(channel, value)` elementwise, walking whole channel planes.
fn per_channel<E: Element>(x: &Tensor<E>, c: usize, s: usize, f: impl Fn(usize, E) -> E) -> Tensor<E> {
    let mut out = x.data().to_vec();
    for (i, plane) in out.chunks_mut(s.max(1)).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = f(ch, *v));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Sum over every axis except 1; the gradient of [`add_channel_bias`] w.r.t. the bias.
pub fn channel_sum<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, c, s) = channel_view(x.shape(), "channel_sum")?;
    let mut out = vec![E::zero(); c];
    for (i, chunk) in x.data().chunks(s).enumerate() {
        out[i % c] = out[i % c] + chunk.iter().copied().sum();
    }
    Tensor::new(&[c], out)
}

/// Per-channel affine map `x * scale[c] + shift[c]`.
pub fn channel_affine<E: Element>(x: &Tensor<E>, scale: &[E], shift: &[E]) -> Result<Tensor<E>> {
    let (_, c, s) = channel_view(x.shape(), "channel_affine")?;
    if scale.len() != c || shift.len() != c {
        return Err(LevitError::shape("channel_affine", c, scale.len()));
    }
    Ok(per_channel(x, c, s, |ch, v| v * scale[ch] + shift[ch]))
}

/// Batch statistics and the normalized activations kept for backward.
pub struct BatchNormTrace<E: Element> {
    pub output: Tensor<E>,
    pub normalized: Tensor<E>,
    pub mean: Vec<E>,
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Train-mode batch normalization over batch and spatial axes, biased variance.
pub fn batchnorm_train<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<BatchNormTrace<E>> {
    let (b, c, s) = channel_view(x.shape(), "batchnorm")?;
    check_channels(gamma, c, "batchnorm", "gamma")?;
    check_channels(beta, c, "batchnorm", "beta")?;
    let count = E::from_f64((b * s) as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for (i, chunk) in x.data().chunks(s).enumerate() {
        mean[i % c] = mean[i % c] + chunk.iter().copied().sum();
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for (i, chunk) in x.data().chunks(s).enumerate() {
        let m = mean[i % c];
        var[i % c] = var[i % c] + chunk.iter().map(|&v| (v - m) * (v - m)).sum();
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
    let normalized = per_channel(x, c, s, |ch, v| (v - mean[ch]) * inv_std[ch]);
    let output = channel_affine(&normalized, gamma.data(), beta.data())?;
    Ok(BatchNormTrace { output, normalized, mean, var, inv_std })
}

/// Gradient of train-mode batch norm w.r.t. (input, gamma, beta).
pub fn batchnorm_train_backward<E: Element>(
    grad_out: &Tensor<E>,
    normalized: &Tensor<E>,
    gamma: &Tensor<E>,
    inv_std: &[E],
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (b, c, s) = channel_view(grad_out.shape(), "batchnorm_backward")?;
    let count = E::from_f64((b * s) as f64);
    let mut dbeta = vec![E::zero(); c];
    let mut dgamma = vec![E::zero(); c];
    for (i, (gchunk, nchunk)) in grad_out.data().chunks(s).zip(normalized.data().chunks(s)).enumerate() {
        let ch = i % c;
        for (&g, &n) in gchunk.iter().zip(nchunk) {
            dbeta[ch] = dbeta[ch] + g;
            dgamma[ch] = dgamma[ch] + g * n;
        }
    }
    let gd = gamma.data();
    let mut dx = grad_out.data().to_vec();
    for (i, (plane, nplane)) in dx.chunks_mut(s.max(1)).zip(normalized.data().chunks(s.max(1))).enumerate() {
        let ch = i % c;
        let k = gd[ch] * inv_std[ch] / count;
        for (g, &n) in plane.iter_mut().zip(nplane) {
            *g = k * (count * *g - dbeta[ch] - n * dgamma[ch]);
        }
    }
    let dx = Tensor::new(grad_out.shape(), dx)?;
    Ok((dx, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Eval-mode normalization as a per-channel (scale, shift) pair.
pub fn batchnorm_eval_coefficients<E: Element>(
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    eps: E,
) -> (Vec<E>, Vec<E>) {
    let scale: Vec<E> = gamma.data().iter().zip(var.data()).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let shift = beta.data().iter().zip(mean.data()).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
    (scale, shift)
}

/// Batch normalization with running statistics.
///
/// Train mode normalizes with the batch mean and biased variance and folds them
/// into the running statistics with `running = (1 - momentum) * running + momentum * batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &mut Tensor<E>,
    running_var: &mut Tensor<E>,
    mode: Mode,
    momentum: E,
    eps: E,
) -> Result<Tensor<E>> {
    let (_, c, _) = channel_view(input.shape(), "batchnorm")?;
    check_channels(running_mean, c, "batchnorm", "running_mean")?;
    check_channels(running_var, c, "batchnorm", "running_var")?;
    match mode {
        Mode::Eval => {
            check_channels(gamma, c, "batchnorm", "gamma")?;
            check_channels(beta, c, "batchnorm", "beta")?;
            let (scale, shift) = batchnorm_eval_coefficients(gamma, beta, running_mean, running_var, eps);
            channel_affine(input, &scale, &shift)
        }
        Mode::Train => {
            let trace = batchnorm_train(input, gamma, beta, eps)?;
            update_running(running_mean, &trace.mean, momentum);
            update_running(running_var, &trace.var, momentum);
            Ok(trace.output)
        }
    }
}

pub(crate) fn update_running<E: Element>(running: &mut Tensor<E>, batch: &[E], momentum: E) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (E::one() - momentum) * *r + momentum * b;
    }
}

/// Layer normalization across channels (axis 1) independently at every site.
pub struct LayerNormTrace<E: Element> {
    pub output: Tensor<E>,
    pub normalized: Tensor<E>,
    pub inv_std: Vec<E>,
}

pub fn layer_norm_channels<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<LayerNormTrace<E>> {
    let (b, c, s) = channel_view(x.shape(), "layer_norm")?;
    check_channels(gamma, c, "layer_norm", "gamma")?;
    check_channels(beta, c, "layer_norm", "beta")?;
    let cf = E::from_f64((c) as f64);
    let xd = x.data();
    let mut normalized = vec![E::zero(); x.numel()];
    let mut inv_std = vec![E::zero(); b * s];
    for bi in 0..b {
        for si in 0..s {
            let at = |ch: usize| (bi * c + ch) * s + si;
            let mean = (0..c).map(|ch| xd[at(ch)]).sum::<E>() / cf;
            let var = (0..c).map(|ch| (xd[at(ch)] - mean) * (xd[at(ch)] - mean)).sum::<E>() / cf;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[bi * s + si] = istd;
            for ch in 0..c {
                normalized[at(ch)] = (xd[at(ch)] - mean) * istd;
            }
        }
    }
    let normalized = Tensor::new(x.shape(), normalized)?;
    let output = channel_affine(&normalized, gamma.data(), beta.data())?;
    Ok(LayerNormTrace { output, normalized, inv_std })
}

pub fn layer_norm_channels_backward<E: Element>(
    grad_out: &Tensor<E>,
    normalized: &Tensor<E>,
    gamma: &Tensor<E>,
    inv_std: &[E],
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (b, c, s) = channel_view(grad_out.shape(), "layer_norm_backward")?;
    let cf = E::from_f64((c) as f64);
    let (g, n, gam) = (grad_out.data(), normalized.data(), gamma.data());
    let mut dx = vec![E::zero(); grad_out.numel()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for bi in 0..b {
        for si in 0..s {
            let at = |ch: usize| (bi * c + ch) * s + si;
            let mut sum_dn = E::zero();
            let mut sum_dn_n = E::zero();
            for ch in 0..c {
                let i = at(ch);
                let dn = g[i] * gam[ch];
                sum_dn = sum_dn + dn;
                sum_dn_n = sum_dn_n + dn * n[i];
                dgamma[ch] = dgamma[ch] + g[i] * n[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
            let istd = inv_std[bi * s + si];
            for (ch, &gc) in gam.iter().enumerate() {
                let i = at(ch);
                dx[i] = istd / cf * (cf * g[i] * gc - sum_dn - n[i] * sum_dn_n);
            }
        }
    }
    Ok((Tensor::new(grad_out.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// `x * clamp(x + 3, 0, 6) / 6`.
pub fn hardswish_scalar<E: Element>(x: E) -> E {
    let three = E::from_f64(3.0);
    let six = E::from_f64(6.0);
    x * (x + three).max(E::zero()).min(six) / six
}

/// Derivative of hardswish; 0 at x = -3 and 1 at x = 3.
pub fn hardswish_grad_scalar<E: Element>(x: E) -> E {
    let three = E::from_f64(3.0);
    if x <= -three {
        E::zero()
    } else if x >= three {
        E::one()
    } else {
        (x + x + three) / E::from_f64(6.0)
    }
}

pub fn hardswish<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(hardswish_scalar)
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = *x.shape().last().ok_or_else(|| LevitError::shape("softmax", "at least one axis", "scalar"))?;
    if n == 0 {
        return Err(LevitError::shape("softmax", "last extent >= 1", 0));
    }
    let mut out = x.clone().into_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut total = E::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::new(x.shape(), out)
}

/// VJP of softmax given its output `y`: `y * (g - sum(g * y))` per row.
pub fn softmax_backward<E: Element>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    let n = *y.shape().last().unwrap_or(&1);
    let mut out = vec![E::zero(); y.numel()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(grad_out.data().chunks(n)) {
        let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

/// Broadcast plan for the leading (batch) axes of a matmul.
struct BatchPlan {
    shape: Vec<usize>,
    a_index: Vec<usize>,
    b_index: Vec<usize>,
}

fn batch_plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    let nd = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut shape = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(LevitError::shape("matmul", format!("broadcastable batch {a:?}"), format!("{b:?}")));
        }
        shape.push(x.max(y));
    }
    let total: usize = shape.iter().product();
    let linear = |dims: &[usize], coords: &[usize]| -> usize {
        dims.iter().zip(coords).fold(0, |acc, (&d, &c)| acc * d + if d == 1 { 0 } else { c })
    };
    let mut a_index = Vec::with_capacity(total);
    let mut b_index = Vec::with_capacity(total);
    let mut coords = vec![0; nd];
    for _ in 0..total {
        a_index.push(linear(&pa, &coords));
        b_index.push(linear(&pb, &coords));
        for axis in (0..nd).rev() {
            coords[axis] += 1;
            if coords[axis] < shape[axis] {
                break;
            }
            coords[axis] = 0;
        }
    }
    Ok(BatchPlan { shape, a_index, b_index })
}

fn mat_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [.., r, c] => Ok((*r, *c)),
        _ => Err(LevitError::shape(op, "at least two axes", format!("{shape:?}"))),
    }
}

/// Batched `op(a) * op(b)` where `op` optionally transposes the trailing two
/// axes. Leading axes broadcast numpy-style.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>, trans_a: bool, trans_b: bool) -> Result<Tensor<E>> {
    let (ar, ac) = mat_dims(a.shape(), "matmul")?;
    let (br, bc) = mat_dims(b.shape(), "matmul")?;
    let av = MatView { rows: ar, cols: ac, transposed: trans_a };
    let bv = MatView { rows: br, cols: bc, transposed: trans_b };
    let (m, k) = av.logical();
    let (k2, n) = bv.logical();
    if k != k2 {
        return Err(LevitError::shape("matmul", format!("inner extent {k}"), k2));
    }
    let plan = batch_plan(&a.shape()[..a.ndim() - 2], &b.shape()[..b.ndim() - 2])?;
    let mut out = vec![E::zero(); plan.a_index.len() * m * n];
    for (slot, (&ai, &bi)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
        E::gemm_raw(
            &a.data()[ai * ar * ac..(ai + 1) * ar * ac],
            av,
            &b.data()[bi * br * bc..(bi + 1) * br * bc],
            bv,
            &mut out[slot * m * n..(slot + 1) * m * n],
            E::zero(),
        );
    }
    let mut shape = plan.shape;
    shape.extend_from_slice(&[m, n]);
    Tensor::new(&shape, out)
}

/// Gradients of [`matmul`] w.r.t. both operands, reduced over broadcast axes.
pub fn matmul_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    trans_a: bool,
    trans_b: bool,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (ar, ac) = mat_dims(a.shape(), "matmul_backward")?;
    let (br, bc) = mat_dims(b.shape(), "matmul_backward")?;
    let (m, n) = mat_dims(grad_out.shape(), "matmul_backward")?;
    let plan = batch_plan(&a.shape()[..a.ndim() - 2], &b.shape()[..b.ndim() - 2])?;
    let mut da = vec![E::zero(); a.numel()];
    let mut db = vec![E::zero(); b.numel()];
    let g = |t: bool| MatView { rows: m, cols: n, transposed: t };
    let va = |t: bool| MatView { rows: ar, cols: ac, transposed: t };
    let vb = |t: bool| MatView { rows: br, cols: bc, transposed: t };
    for (slot, (&ai, &bi)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
        let gs = &grad_out.data()[slot * m * n..(slot + 1) * m * n];
        let asl = &a.data()[ai * ar * ac..(ai + 1) * ar * ac];
        let bsl = &b.data()[bi * br * bc..(bi + 1) * br * bc];
        let dasl = &mut da[ai * ar * ac..(ai + 1) * ar * ac];
        if trans_a {
            E::gemm_raw(bsl, vb(trans_b), gs, g(true), dasl, E::one());
        } else {
            E::gemm_raw(gs, g(false), bsl, vb(!trans_b), dasl, E::one());
        }
        let dbsl = &mut db[bi * br * bc..(bi + 1) * br * bc];
        if trans_b {
            E::gemm_raw(gs, g(true), asl, va(trans_a), dbsl, E::one());
        } else {
            E::gemm_raw(asl, va(!trans_a), gs, g(false), dbsl, E::one());
        }
    }
    Ok((Tensor::new(a.shape(), da)?, Tensor::new(b.shape(), db)?))
}

/// Per-channel mean over all spatial sites: (B, C, H, W) -> (B, C).
pub fn avgpool_global<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4()?;
    let sites = h * w;
    if sites == 0 {
        return Err(LevitError::shape("avgpool_global", "H*W >= 1", 0));
    }
    let denom = E::from_f64((sites) as f64);
    let out = x.data().chunks(sites).map(|s| s.iter().copied().sum::<E>() / denom).collect();
    Tensor::new(&[b, c], out)
}

pub fn avgpool_global_backward<E: Element>(input_shape: &[usize], grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    let sites: usize = input_shape[2..].iter().product();
    let denom = E::from_f64((sites) as f64);
    Ok(Tensor::from_fn(input_shape, |i| grad_out.data()[i / sites] / denom))
}

/// Keeps sites `(stride*i, stride*j)`; output extents are `ceil(H / stride)`.
pub fn subsample<E: Element>(x: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let xd = x.data();
    Ok(Tensor::from_fn(&[b, c, ho, wo], |i| {
        let (plane, rem) = (i / (ho * wo), i % (ho * wo));
        let (oi, oj) = (rem / wo, rem % wo);
        xd[plane * h * w + oi * stride * w + oj * stride]
    }))
}

pub fn subsample_backward<E: Element>(input_shape: &[usize], grad_out: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = grad_out.dims4()?;
    let mut dx = vec![E::zero(); input_shape.iter().product()];
    for (i, &g) in grad_out.data().iter().enumerate() {
        let (plane, rem) = (i / (ho * wo), i % (ho * wo));
        let (oi, oj) = (rem / wo, rem % wo);
        dx[plane * h * w + oi * stride * w + oj * stride] = g;
    }
    Tensor::new(input_shape, dx)
}

/// `out[i] = table[index[i]]`, reshaped to `shape`.
pub fn gather<E: Element>(table: &Tensor<E>, index: &[usize], shape: &[usize]) -> Result<Tensor<E>> {
    if let Some(&bad) = index.iter().find(|&&i| i >= table.numel()) {
        return Err(LevitError::shape("gather", format!("index < {}", table.numel()), bad));
    }
    let td = table.data();
    Tensor::new(shape, index.iter().map(|&i| td[i]).collect())
}

pub fn scatter_add<E: Element>(table_shape: &[usize], index: &[usize], grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    let mut out = vec![E::zero(); table_shape.iter().product()];
    for (&i, &g) in index.iter().zip(grad_out.data()) {
        out[i] = out[i] + g;
    }
    Tensor::new(table_shape, out)
}

/// `x + y` where `y` has a leading extent of 1 and is repeated over x's batch.
pub fn add_batch_broadcast<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<Tensor<E>> {
    if y.ndim() != x.ndim() || y.shape()[0] != 1 || y.shape()[1..] != x.shape()[1..] {
        return Err(LevitError::shape(
            "add_batch_broadcast",
            format!("[1, {:?}]", &x.shape()[1..]),
            format!("{:?}", y.shape()),
        ));
    }
    let per = y.numel();
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i % per]))
}

pub fn sum_over_batch<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let per = x.numel() / x.shape()[0].max(1);
    let mut out = vec![E::zero(); per];
    for chunk in x.data().chunks(per) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Tensor::new(&shape, out)
}

/// Multiplies every element of batch item `b` by `factors[b]`.
pub fn scale_per_sample<E: Element>(x: &Tensor<E>, factors: &[E]) -> Result<Tensor<E>> {
    if factors.len() != x.shape()[0] {
        return Err(LevitError::shape("scale_per_sample", x.shape()[0], factors.len()));
    }
    let per = x.numel() / factors.len().max(1);
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * factors[i / per]))
}

/// Mean cross entropy of (B, K) logits against integer labels, plus the
/// softmax probabilities needed for backward.
pub fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<(E, Tensor<E>)> {
    let [b, k] = logits.shape()[..] else {
        return Err(LevitError::shape("cross_entropy", "(B, K) logits", format!("{:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(LevitError::shape("cross_entropy", format!("{b} labels"), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(LevitError::LabelOutOfRange { label, classes: k });
    }
    let probs = softmax_lastdim(logits)?;
    let mut total = E::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<E>().ln();
        total = total + lse - row[label];
    }
    Ok((total / E::from_f64((b) as f64), probs))
}

pub fn cross_entropy_backward<E: Element>(probs: &Tensor<E>, labels: &[usize], grad: E) -> Result<Tensor<E>> {
    let k = probs.shape()[1];
    let scale = grad / E::from_f64(labels.len() as f64);
    Ok(Tensor::from_fn(probs.shape(), |i| {
        let target = if labels[i / k] == i % k { E::one() } else { E::zero() };
        (probs.data()[i] - target) * scale
    }))
}
