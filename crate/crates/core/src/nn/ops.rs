//! Per-layer kernels. Convolutions are direct loops over NCHW buffers.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::layers::Conv2dSpec;

/// `out[i, t] = chunk[i, t + 1] - chunk[i, t]` over a `[n, F, H, W]` chunk.
pub fn frame_diff<T: Element>(chunk: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = chunk.dims();
    if dims.len() != 4 {
        return Err(Error::Dims(format!(
            "frame_diff expects [n, F, H, W], got {dims:?}"
        )));
    }
    let (n, f, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if f < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "frame_diff needs at least 2 frames, got {f}"
        )));
    }
    let plane = h * w;
    let src = chunk.data();
    let mut out = Vec::with_capacity(n * (f - 1) * plane);
    for i in 0..n {
        let sample = &src[i * f * plane..(i + 1) * f * plane];
        for t in 0..f - 1 {
            let cur = &sample[t * plane..(t + 1) * plane];
            let next = &sample[(t + 1) * plane..(t + 2) * plane];
            out.extend(next.iter().zip(cur).map(|(&b, &a)| b - a));
        }
    }
    Tensor::new(vec![n, f - 1, h, w], out)
}

/// Range of output positions whose input index `o * stride + k - pad` lands
/// inside `[0, extent)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // o * stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_forward<T: Element>(
    spec: &Conv2dSpec,
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let pad = spec.padding;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for oc in 0..spec.out_channels {
        let o = &mut out[oc * out_plane..(oc + 1) * out_plane];
        o.fill(bias[oc]);
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_plane..(ic + 1) * in_plane];
            let wbase = (oc * spec.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad.top, sh, g.h, g.oh);
                for kx in 0..kw {
                    let wv = weight[wbase + ky * kw + kx];
                    let (ox0, ox1) = valid_range(kx, pad.left, sw, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - pad.top;
                        let xrow = &x[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * sw + kx - pad.left];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `dinput` is given, the input
/// gradient for one sample.
pub(crate) fn conv_backward<T: Element>(
    spec: &Conv2dSpec,
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let pad = spec.padding;
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for oc in 0..spec.out_channels {
        let d = &dout[oc * out_plane..(oc + 1) * out_plane];
        dbias[oc] += d.iter().copied().sum::<T>();
        for ic in 0..spec.in_channels {
            let x = &input[ic * in_plane..(ic + 1) * in_plane];
            let wbase = (oc * spec.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, pad.top, sh, g.h, g.oh);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(kx, pad.left, sw, g.w, g.ow);
                    let mut acc = T::ZERO;
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - pad.top;
                        let xrow = &x[iy * g.w..(iy + 1) * g.w];
                        let drow = &d[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            acc += drow[ox] * xrow[ox * sw + kx - pad.left];
                        }
                    }
                    dweight[wbase + ky * kw + kx] += acc;
                    if let Some(dx) = dinput.as_deref_mut() {
                        let wv = weight[wbase + ky * kw + kx];
                        let dxp = &mut dx[ic * in_plane..(ic + 1) * in_plane];
                        for oy in oy0..oy1 {
                            let iy = oy * sh + ky - pad.top;
                            let drow = &d[oy * g.ow..(oy + 1) * g.ow];
                            let dxrow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                            for ox in ox0..ox1 {
                                dxrow[ox * sw + kx - pad.left] += wv * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out = W x + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward<T: Element>(x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, (y, &b)) in out.iter_mut().zip(bias).enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut acc = b;
        for (&wv, &xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *y = acc;
    }
}

pub(crate) fn dense_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let n_in = x.len();
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for (dw, &xv) in drow.iter_mut().zip(x) {
            *dw += d * xv;
        }
    }
    if let Some(dx) = dinput {
        for (o, &d) in dout.iter().enumerate() {
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (dxv, &wv) in dx.iter_mut().zip(row) {
                *dxv += wv * d;
            }
        }
    }
}
