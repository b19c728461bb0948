//! Direct 2-D convolution kernels (forward and the three backward passes).
//!
//! Plain nested loops, row-major NCHW. No im2col: at desk scale the direct
//! form is fast enough and keeps the reduction order fixed, which makes runs
//! bit-reproducible.

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::tensor::Tensor;

fn check_conv_inputs<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, w_in) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let expect_w = [
        spec.out_channels,
        spec.in_channels / spec.groups,
        spec.kernel,
        spec.kernel,
    ];
    if w.shape() != expect_w {
        return Err(Error::shapes("conv2d weight", w.shape(), &expect_w));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shapes("conv2d bias", b.shape(), &[spec.out_channels]));
        }
    }
    Ok((n, c, h, w_in))
}

pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let (n, _, h, wd) = check_conv_inputs(x, w, b, spec)?;
    let (oh, ow) = spec.output_hw(h, wd)?;
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![E::ZERO; n * spec.out_channels * oh * ow];

    for ni in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            let bias = b.map_or(E::ZERO, |b| b.data()[oc]);
            let w_base = oc * cin_g * k * k;
            let o_base = (ni * spec.out_channels + oc) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                for ox in 0..ow {
                    let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let mut acc = bias;
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        let x_base = (ni * spec.in_channels + ic) * h * wd;
                        let wk_base = w_base + icg * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * wd;
                            let w_row = wk_base + ky * k;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xs[x_row + ix as usize] * ws[w_row + kx];
                            }
                        }
                    }
                    out[o_base + oy * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, spec.out_channels, oh, ow], out)
}

/// Gradient w.r.t. the input.
pub fn conv2d_backward_x<E: Element>(
    go: &Tensor<E>,
    w: &Tensor<E>,
    spec: &ConvSpec,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<E>> {
    let (n, _, oh, ow) = go.dims4()?;
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;

    let gs = go.data();
    let ws = w.data();
    let mut dx = vec![E::ZERO; n * spec.in_channels * in_h * in_w];

    for ni in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            let w_base = oc * cin_g * k * k;
            let o_base = (ni * spec.out_channels + oc) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                for ox in 0..ow {
                    let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let gv = gs[o_base + oy * ow + ox];
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        let x_base = (ni * spec.in_channels + ic) * in_h * in_w;
                        let wk_base = w_base + icg * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * in_w;
                            let w_row = wk_base + ky * k;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                dx[x_row + ix as usize] += gv * ws[w_row + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, spec.in_channels, in_h, in_w], dx)
}

/// Gradient w.r.t. the weight.
pub fn conv2d_backward_w<E: Element>(
    go: &Tensor<E>,
    x: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    let (n, _, h, wd) = x.dims4()?;
    let (_, _, oh, ow) = go.dims4()?;
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;

    let gs = go.data();
    let xs = x.data();
    let mut dw = vec![E::ZERO; spec.out_channels * cin_g * k * k];

    for oc in 0..spec.out_channels {
        let g = oc / cout_g;
        let w_base = oc * cin_g * k * k;
        for ni in 0..n {
            let o_base = (ni * spec.out_channels + oc) * oh * ow;
            for oy in 0..oh {
                let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                for ox in 0..ow {
                    let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                    let gv = gs[o_base + oy * ow + ox];
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        let x_base = (ni * spec.in_channels + ic) * h * wd;
                        let wk_base = w_base + icg * k * k;
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * wd;
                            let w_row = wk_base + ky * k;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                dw[w_row + kx] += gv * xs[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.out_channels, cin_g, k, k], dw)
}

/// Gradient w.r.t. the bias: sum of `go` over batch and spatial dims.
pub fn conv2d_backward_b<E: Element>(go: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, oh, ow) = go.dims4()?;
    let gs = go.data();
    let mut db = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * oh * ow;
            for i in 0..oh * ow {
                db[ci] += gs[base + i];
            }
        }
    }
    Tensor::new(vec![c], db)
}
