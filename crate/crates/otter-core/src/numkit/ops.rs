//! Forward and backward kernels for every primitive the network composes.
//!
//! All kernels are pure functions on [`Tensor`]s. Parallel sections split
//! work over disjoint output planes, so results are bitwise independent of
//! the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::tensor::{Scalar, Tensor};

/// Pooling / reduction flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Silu,
    /// Slope 0.1 on the negative side.
    LeakyRelu,
    Relu,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

/// Numerically stable logistic function, clamped into the open unit interval.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let s = if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    s.maximum(T::TINY_POS).minimum(T::ONE_MINUS_EPS)
}

/// tanh clamped strictly inside (-1, 1).
pub fn tanh_scalar<T: Scalar>(x: T) -> T {
    x.tanh()
        .maximum(-T::ONE_MINUS_EPS)
        .minimum(T::ONE_MINUS_EPS)
}

pub const LEAKY_SLOPE: f64 = 0.1;

fn apply_activation<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Sigmoid => sigmoid_scalar(x),
        Activation::Tanh => tanh_scalar(x),
        Activation::Silu => x * sigmoid_scalar(x),
        Activation::LeakyRelu => {
            if x.to_f64() > 0.0 {
                x
            } else {
                x * T::from_f64(LEAKY_SLOPE)
            }
        }
        Activation::Relu => x.maximum(T::ZERO),
    }
}

fn activation_derivative<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Sigmoid => {
            let s = sigmoid_scalar(x);
            s * (T::ONE - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            T::ONE - t * t
        }
        Activation::Silu => {
            let s = sigmoid_scalar(x);
            s + x * s * (T::ONE - s)
        }
        Activation::LeakyRelu => {
            if x.to_f64() > 0.0 {
                T::ONE
            } else {
                T::from_f64(LEAKY_SLOPE)
            }
        }
        Activation::Relu => {
            if x.to_f64() > 0.0 {
                T::ONE
            } else {
                T::ZERO
            }
        }
    }
}

pub fn activation_forward<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| apply_activation(kind, v))
}

pub fn activation_backward<T: Scalar>(
    input: &Tensor<T>,
    kind: Activation,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad = Tensor::zeros(input.shape());
    for ((g, &go), &x) in grad
        .data_mut()
        .iter_mut()
        .zip(grad_out.data())
        .zip(input.data())
    {
        *g = go * activation_derivative(kind, x);
    }
    grad
}

/// Output length of a strided window sweep.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - k) / stride + 1
}

/// Valid [lo, hi) output positions for which `out*stride + k_off - pad` lands
/// inside `[0, len_in)`.
fn valid_out_range(
    len_in: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
    len_out: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    if len_in + pad <= k_off {
        return (0, 0);
    }
    let hi = ((len_in - 1 + pad - k_off) / stride + 1).min(len_out);
    (lo, hi.max(lo))
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4("conv2d")?;
    let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {cout} output channels",
                    bias.shape()
                ),
            ));
        }
    }
    Ok((b, cin, h, w, cout, kh, kw))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, cin, h, w, cout, kh, kw) = check_conv_shapes(input, kernel, bias, stride, padding)?;
    let oh = conv_out_extent(h, kh, stride, padding);
    let ow = conv_out_extent(w, kw, stride, padding);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let x = input.data();
    let k = kernel.data();
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(plane_idx, out_plane)| {
            let bi = plane_idx / cout;
            let co = plane_idx % cout;
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                out_plane.iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..cin {
                let x_plane = &x[(bi * cin + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(h, khi, padding, stride, oh);
                    for kwi in 0..kw {
                        let wv = k[((co * cin + ci) * kh + khi) * kw + kwi];
                        if wv == T::ZERO {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_out_range(w, kwi, padding, stride, ow);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            let x_row = &x_plane[ih * w..][..w];
                            let o_row = &mut out_plane[ohi * ow..][..ow];
                            if stride == 1 {
                                let iw0 = ow_lo + kwi - padding;
                                let xs = &x_row[iw0..iw0 + (ow_hi - ow_lo)];
                                for (o, &xv) in o_row[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for owi in ow_lo..ow_hi {
                                    o_row[owi] += wv * x_row[owi * stride + kwi - padding];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients with respect to (input, kernel, bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, cin, h, w) = input.dims4("conv2d_backward")?;
    let (cout, _, kh, kw) = kernel.dims4("conv2d_backward")?;
    let (_, _, oh, ow) = grad_out.dims4("conv2d_backward")?;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    // d input
    let mut grad_input = Tensor::zeros(&[b, cin, h, w]);
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, gi_plane)| {
            let bi = plane_idx / cin;
            let ci = plane_idx % cin;
            for co in 0..cout {
                let go_plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(h, khi, padding, stride, oh);
                    for kwi in 0..kw {
                        let wv = k[((co * cin + ci) * kh + khi) * kw + kwi];
                        if wv == T::ZERO {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_out_range(w, kwi, padding, stride, ow);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            let gi_row = &mut gi_plane[ih * w..][..w];
                            let go_row = &go_plane[ohi * ow..][..ow];
                            if stride == 1 {
                                let iw0 = ow_lo + kwi - padding;
                                for (gi, &g) in gi_row[iw0..iw0 + (ow_hi - ow_lo)]
                                    .iter_mut()
                                    .zip(&go_row[ow_lo..ow_hi])
                                {
                                    *gi += wv * g;
                                }
                            } else {
                                for owi in ow_lo..ow_hi {
                                    gi_row[owi * stride + kwi - padding] += wv * go_row[owi];
                                }
                            }
                        }
                    }
                }
            }
        });

    // d kernel
    let mut grad_kernel = Tensor::zeros(&[cout, cin, kh, kw]);
    grad_kernel
        .data_mut()
        .par_chunks_mut(kh * kw)
        .enumerate()
        .for_each(|(pair_idx, gk)| {
            let co = pair_idx / cin;
            let ci = pair_idx % cin;
            for bi in 0..b {
                let x_plane = &x[(bi * cin + ci) * h * w..][..h * w];
                let go_plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = valid_out_range(h, khi, padding, stride, oh);
                    for kwi in 0..kw {
                        let (ow_lo, ow_hi) = valid_out_range(w, kwi, padding, stride, ow);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for ohi in oh_lo..oh_hi {
                            let ih = ohi * stride + khi - padding;
                            let x_row = &x_plane[ih * w..][..w];
                            let go_row = &go_plane[ohi * ow..][..ow];
                            if stride == 1 {
                                let iw0 = ow_lo + kwi - padding;
                                for (&xv, &g) in x_row[iw0..iw0 + (ow_hi - ow_lo)]
                                    .iter()
                                    .zip(&go_row[ow_lo..ow_hi])
                                {
                                    acc += xv * g;
                                }
                            } else {
                                for owi in ow_lo..ow_hi {
                                    acc += x_row[owi * stride + kwi - padding] * go_row[owi];
                                }
                            }
                        }
                        gk[khi * kw + kwi] += acc;
                    }
                }
            }
        });

    // d bias
    let grad_bias = if has_bias {
        let mut gb = Tensor::zeros(&[cout]);
        for bi in 0..b {
            for co in 0..cout {
                let go_plane = &go[(bi * cout + co) * oh * ow..][..oh * ow];
                let mut acc = T::ZERO;
                for &g in go_plane {
                    acc += g;
                }
                gb.data_mut()[co] += acc;
            }
        }
        Some(gb)
    } else {
        None
    };

    Ok((grad_input, grad_kernel, grad_bias))
}

pub fn pool2d_forward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("pool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "pool2d",
            format!("window {window} exceeds spatial extent {h}x{w}"),
        ));
    }
    let oh = conv_out_extent(h, window, stride, 0);
    let ow = conv_out_extent(w, window, stride, 0);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let x = input.data();
    let inv_area = T::from_f64(1.0 / (window * window) as f64);
    for plane_idx in 0..b * c {
        let x_plane = &x[plane_idx * h * w..][..h * w];
        let out_plane = &mut out.data_mut()[plane_idx * oh * ow..][..oh * ow];
        for ohi in 0..oh {
            for owi in 0..ow {
                let ih0 = ohi * stride;
                let iw0 = owi * stride;
                let v = match mode {
                    PoolMode::Max => {
                        let mut best = x_plane[ih0 * w + iw0];
                        for dy in 0..window {
                            for dx in 0..window {
                                let v = x_plane[(ih0 + dy) * w + iw0 + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                    PoolMode::Avg => {
                        let mut acc = T::ZERO;
                        for dy in 0..window {
                            for dx in 0..window {
                                acc += x_plane[(ih0 + dy) * w + iw0 + dx];
                            }
                        }
                        acc * inv_area
                    }
                };
                out_plane[ohi * ow + owi] = v;
            }
        }
    }
    Ok(out)
}

pub fn pool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("pool2d_backward")?;
    let (_, _, oh, ow) = grad_out.dims4("pool2d_backward")?;
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    let x = input.data();
    let go = grad_out.data();
    let inv_area = T::from_f64(1.0 / (window * window) as f64);
    for plane_idx in 0..b * c {
        let x_plane = &x[plane_idx * h * w..][..h * w];
        let go_plane = &go[plane_idx * oh * ow..][..oh * ow];
        let g_plane = &mut grad.data_mut()[plane_idx * h * w..][..h * w];
        for ohi in 0..oh {
            for owi in 0..ow {
                let g = go_plane[ohi * ow + owi];
                let ih0 = ohi * stride;
                let iw0 = owi * stride;
                match mode {
                    PoolMode::Max => {
                        // first occurrence in row-major order wins on ties
                        let mut best = x_plane[ih0 * w + iw0];
                        let mut best_at = ih0 * w + iw0;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = (ih0 + dy) * w + iw0 + dx;
                                if x_plane[idx] > best {
                                    best = x_plane[idx];
                                    best_at = idx;
                                }
                            }
                        }
                        g_plane[best_at] += g;
                    }
                    PoolMode::Avg => {
                        let share = g * inv_area;
                        for dy in 0..window {
                            for dx in 0..window {
                                g_plane[(ih0 + dy) * w + iw0 + dx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub fn global_pool_forward<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("global_pool")?;
    let mut out = Tensor::zeros(&[b, c, 1, 1]);
    let x = input.data();
    let inv_area = T::from_f64(1.0 / (h * w) as f64);
    for plane_idx in 0..b * c {
        let x_plane = &x[plane_idx * h * w..][..h * w];
        out.data_mut()[plane_idx] = match mode {
            PoolMode::Max => {
                let mut best = x_plane[0];
                for &v in &x_plane[1..] {
                    if v > best {
                        best = v;
                    }
                }
                best
            }
            PoolMode::Avg => {
                let mut acc = T::ZERO;
                for &v in x_plane {
                    acc += v;
                }
                acc * inv_area
            }
        };
    }
    Ok(out)
}

pub fn global_pool_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("global_pool_backward")?;
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    let x = input.data();
    let inv_area = T::from_f64(1.0 / (h * w) as f64);
    for plane_idx in 0..b * c {
        let g = grad_out.data()[plane_idx];
        let x_plane = &x[plane_idx * h * w..][..h * w];
        let g_plane = &mut grad.data_mut()[plane_idx * h * w..][..h * w];
        match mode {
            PoolMode::Max => {
                let mut best = x_plane[0];
                let mut best_at = 0;
                for (i, &v) in x_plane.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_at = i;
                    }
                }
                g_plane[best_at] += g;
            }
            PoolMode::Avg => {
                let share = g * inv_area;
                g_plane.iter_mut().for_each(|v| *v += share);
            }
        }
    }
    Ok(grad)
}

pub fn channel_reduce_forward<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("channel_reduce")?;
    let mut out = Tensor::zeros(&[b, 1, h, w]);
    let x = input.data();
    let inv_c = T::from_f64(1.0 / c as f64);
    let hw = h * w;
    for bi in 0..b {
        let out_plane = &mut out.data_mut()[bi * hw..][..hw];
        for ci in 0..c {
            let x_plane = &x[(bi * c + ci) * hw..][..hw];
            if ci == 0 {
                out_plane.copy_from_slice(x_plane);
            } else {
                match mode {
                    PoolMode::Max => {
                        for (o, &v) in out_plane.iter_mut().zip(x_plane) {
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                    PoolMode::Avg => {
                        for (o, &v) in out_plane.iter_mut().zip(x_plane) {
                            *o += v;
                        }
                    }
                }
            }
        }
        if mode == PoolMode::Avg {
            out_plane.iter_mut().for_each(|v| *v *= inv_c);
        }
    }
    Ok(out)
}

pub fn channel_reduce_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("channel_reduce_backward")?;
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    let x = input.data();
    let go = grad_out.data();
    let inv_c = T::from_f64(1.0 / c as f64);
    let hw = h * w;
    for bi in 0..b {
        let go_plane = &go[bi * hw..][..hw];
        match mode {
            PoolMode::Avg => {
                for ci in 0..c {
                    let g_plane = &mut grad.data_mut()[(bi * c + ci) * hw..][..hw];
                    for (g, &gv) in g_plane.iter_mut().zip(go_plane) {
                        *g += gv * inv_c;
                    }
                }
            }
            PoolMode::Max => {
                // first channel with the max value takes the gradient
                for pos in 0..hw {
                    let mut best = x[bi * c * hw + pos];
                    let mut best_c = 0;
                    for ci in 1..c {
                        let v = x[(bi * c + ci) * hw + pos];
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    grad.data_mut()[(bi * c + best_c) * hw + pos] += go_plane[pos];
                }
            }
        }
    }
    Ok(grad)
}

pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, cin) = input.dims2("linear")?;
    let (cout, wcin) = weight.dims2("linear")?;
    if wcin != cin {
        return Err(Error::shape(
            "linear",
            format!("weight expects {wcin} inputs, input has {cin}"),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} vs {cout} outputs", bias.shape()),
            ));
        }
    }
    let mut out = Tensor::zeros(&[b, cout]);
    let x = input.data();
    let w = weight.data();
    for bi in 0..b {
        let x_row = &x[bi * cin..][..cin];
        let o_row = &mut out.data_mut()[bi * cout..][..cout];
        for (o, w_row) in o_row.iter_mut().zip(w.chunks_exact(cin)) {
            let mut acc = T::ZERO;
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            *o = acc;
        }
        if let Some(bias) = bias {
            for (o, &bv) in o_row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, cin) = input.dims2("linear_backward")?;
    let (cout, _) = weight.dims2("linear_backward")?;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();

    let mut grad_input = Tensor::zeros(&[b, cin]);
    let mut grad_weight = Tensor::zeros(&[cout, cin]);
    for bi in 0..b {
        let x_row = &x[bi * cin..][..cin];
        let go_row = &go[bi * cout..][..cout];
        let gi_row = &mut grad_input.data_mut()[bi * cin..][..cin];
        for (co, &g) in go_row.iter().enumerate() {
            let w_row = &w[co * cin..][..cin];
            for (gi, &wv) in gi_row.iter_mut().zip(w_row) {
                *gi += g * wv;
            }
            let gw_row = &mut grad_weight.data_mut()[co * cin..][..cin];
            for (gw, &xv) in gw_row.iter_mut().zip(x_row) {
                *gw += g * xv;
            }
        }
    }
    let grad_bias = if has_bias {
        let mut gb = Tensor::zeros(&[cout]);
        for bi in 0..b {
            for co in 0..cout {
                gb.data_mut()[co] += go[bi * cout + co];
            }
        }
        Some(gb)
    } else {
        None
    };
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn upsample_nearest2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("upsample_nearest2")?;
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let x = input.data();
    for plane_idx in 0..b * c {
        let x_plane = &x[plane_idx * h * w..][..h * w];
        let o_plane = &mut out.data_mut()[plane_idx * 4 * h * w..][..4 * h * w];
        for y in 0..2 * h {
            let src_row = &x_plane[(y / 2) * w..][..w];
            let dst_row = &mut o_plane[y * 2 * w..][..2 * w];
            for (xq, &v) in dst_row.chunks_exact_mut(2).zip(src_row) {
                xq[0] = v;
                xq[1] = v;
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("upsample_nearest2_backward")?;
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    let go = grad_out.data();
    for plane_idx in 0..b * c {
        let go_plane = &go[plane_idx * 4 * h * w..][..4 * h * w];
        let g_plane = &mut grad.data_mut()[plane_idx * h * w..][..h * w];
        for y in 0..2 * h {
            let go_row = &go_plane[y * 2 * w..][..2 * w];
            let g_row = &mut g_plane[(y / 2) * w..][..w];
            for (g, pair) in g_row.iter_mut().zip(go_row.chunks_exact(2)) {
                *g += pair[0] + pair[1];
            }
        }
    }
    Ok(grad)
}

pub fn concat_channels_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4("concat_channels")?;
    let (bb, cb, hb, wb) = b.dims4("concat_channels")?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
    let hw = ha * wa;
    for bi in 0..ba {
        let dst = &mut out.data_mut()[bi * (ca + cb) * hw..][..(ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[bi * ca * hw..][..ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[bi * cb * hw..][..cb * hw]);
    }
    Ok(out)
}

pub fn concat_channels_backward<T: Scalar>(
    ca: usize,
    cb: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = grad_out.dims4("concat_channels_backward")?;
    debug_assert_eq!(c, ca + cb);
    let hw = h * w;
    let mut ga = Tensor::zeros(&[b, ca, h, w]);
    let mut gb = Tensor::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src = &grad_out.data()[bi * c * hw..][..c * hw];
        ga.data_mut()[bi * ca * hw..][..ca * hw].copy_from_slice(&src[..ca * hw]);
        gb.data_mut()[bi * cb * hw..][..cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    Ok((ga, gb))
}

/// How a secondary operand lines up against a [B, C, H, W] primary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastKind {
    /// Identical shapes.
    Same,
    /// Secondary is [B, C, 1, 1], expanded over H and W.
    PerChannel,
    /// Secondary is [B, 1, H, W], expanded over C.
    PerPosition,
}

pub fn broadcast_kind<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<BroadcastKind> {
    if a.shape() == b.shape() {
        return Ok(BroadcastKind::Same);
    }
    let (ba, ca, ha, wa) = a.dims4("broadcast")?;
    let (bb, cb, hb, wb) = b.dims4("broadcast")?;
    if ba == bb && ca == cb && hb == 1 && wb == 1 {
        Ok(BroadcastKind::PerChannel)
    } else if ba == bb && cb == 1 && ha == hb && wa == wb {
        Ok(BroadcastKind::PerPosition)
    } else {
        Err(Error::shape(
            "broadcast",
            format!(
                "{:?} vs {:?}: only singleton channel/spatial axes broadcast",
                a.shape(),
                b.shape()
            ),
        ))
    }
}

/// b's value at the position matching flat index `i` of the primary tensor.
fn broadcast_index(kind: BroadcastKind, i: usize, c: usize, hw: usize) -> usize {
    match kind {
        BroadcastKind::Same => i,
        BroadcastKind::PerChannel => i / hw,
        BroadcastKind::PerPosition => {
            let bi = i / (c * hw);
            bi * hw + i % hw
        }
    }
}

pub fn mul_broadcast_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind(a, b)?;
    if kind == BroadcastKind::Same {
        let mut out = a.clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
            *o *= bv;
        }
        return Ok(out);
    }
    let (_, c, h, w) = a.dims4("mul_broadcast")?;
    let hw = h * w;
    let mut out = a.clone();
    let bd = b.data();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o *= bd[broadcast_index(kind, i, c, hw)];
    }
    Ok(out)
}

pub fn mul_broadcast_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let kind = broadcast_kind(a, b)?;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    if kind == BroadcastKind::Same {
        for i in 0..a.len() {
            ga.data_mut()[i] = grad_out.data()[i] * b.data()[i];
            gb.data_mut()[i] = grad_out.data()[i] * a.data()[i];
        }
        return Ok((ga, gb));
    }
    let (_, c, h, w) = a.dims4("mul_broadcast")?;
    let hw = h * w;
    for i in 0..a.len() {
        let j = broadcast_index(kind, i, c, hw);
        ga.data_mut()[i] = grad_out.data()[i] * b.data()[j];
        gb.data_mut()[j] += grad_out.data()[i] * a.data()[i];
    }
    Ok((ga, gb))
}

pub fn add_broadcast_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind(a, b)?;
    if kind == BroadcastKind::Same {
        let mut out = a.clone();
        out.add_assign(b);
        return Ok(out);
    }
    let (_, c, h, w) = a.dims4("add_broadcast")?;
    let hw = h * w;
    let mut out = a.clone();
    let bd = b.data();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o += bd[broadcast_index(kind, i, c, hw)];
    }
    Ok(out)
}

pub fn add_broadcast_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let kind = broadcast_kind(a, b)?;
    let ga = grad_out.clone();
    let mut gb = Tensor::zeros(b.shape());
    if kind == BroadcastKind::Same {
        gb.add_assign(grad_out);
        return Ok((ga, gb));
    }
    let (_, c, h, w) = a.dims4("add_broadcast")?;
    let hw = h * w;
    for i in 0..a.len() {
        gb.data_mut()[broadcast_index(kind, i, c, hw)] += grad_out.data()[i];
    }
    Ok((ga, gb))
}
