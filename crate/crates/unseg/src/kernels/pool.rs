//! 2x2 max pooling and x2 upsampling (nearest / bilinear, align_corners=false).

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 stride-2 max pool. Returns the pooled tensor and the flat input index
/// of each selected maximum (needed by the backward pass).
pub fn maxpool2_forward<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDim { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = in_base + (2 * oy) * w + 2 * ox;
                let mut best_idx = i00;
                let mut best = xs[i00];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > best {
                        best = xs[idx];
                        best_idx = idx;
                    }
                }
                out[out_base + oy * ow + ox] = best;
                argmax[out_base + oy * ow + ox] = best_idx as u32;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward_x<E: Element>(
    go: &Tensor<E>,
    argmax: &[u32],
    in_shape: &[usize],
) -> Result<Tensor<E>> {
    let mut dx = vec![E::ZERO; in_shape.iter().product()];
    for (g, &idx) in go.data().iter().zip(argmax.iter()) {
        dx[idx as usize] += *g;
    }
    Tensor::new(in_shape.to_vec(), dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

pub fn upsample2_forward<E: Element>(x: &Tensor<E>, mode: UpsampleMode) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![E::ZERO; n * c * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for nc in 0..n * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for oy in 0..oh {
                    let iy = oy / 2;
                    for ox in 0..ow {
                        out[ob + oy * ow + ox] = xs[ib + iy * w + ox / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let taps = bilinear_taps(h, oh);
            let taps_x = bilinear_taps(w, ow);
            for nc in 0..n * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, fy) = taps[oy];
                    for ox in 0..ow {
                        let (x0, x1, fx) = taps_x[ox];
                        let v00 = xs[ib + y0 * w + x0].to_f64();
                        let v01 = xs[ib + y0 * w + x1].to_f64();
                        let v10 = xs[ib + y1 * w + x0].to_f64();
                        let v11 = xs[ib + y1 * w + x1].to_f64();
                        let top = v00 * (1.0 - fx) + v01 * fx;
                        let bot = v10 * (1.0 - fx) + v11 * fx;
                        out[ob + oy * ow + ox] = E::from_f64(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample2_backward_x<E: Element>(
    go: &Tensor<E>,
    mode: UpsampleMode,
    in_shape: &[usize],
) -> Result<Tensor<E>> {
    let (n, c, oh, ow) = go.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let gs = go.data();
    let mut dx = vec![E::ZERO; in_shape.iter().product()];
    match mode {
        UpsampleMode::Nearest => {
            for nc in 0..n * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for oy in 0..oh {
                    let iy = oy / 2;
                    for ox in 0..ow {
                        dx[ib + iy * w + ox / 2] += gs[ob + oy * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let taps = bilinear_taps(h, oh);
            let taps_x = bilinear_taps(w, ow);
            for nc in 0..n * c {
                let ib = nc * h * w;
                let ob = nc * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, fy) = taps[oy];
                    for ox in 0..ow {
                        let (x0, x1, fx) = taps_x[ox];
                        let g = gs[ob + oy * ow + ox].to_f64();
                        dx[ib + y0 * w + x0] += E::from_f64(g * (1.0 - fy) * (1.0 - fx));
                        dx[ib + y0 * w + x1] += E::from_f64(g * (1.0 - fy) * fx);
                        dx[ib + y1 * w + x0] += E::from_f64(g * fy * (1.0 - fx));
                        dx[ib + y1 * w + x1] += E::from_f64(g * fy * fx);
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Source taps for align_corners=false interpolation: for each output index,
/// the two source rows/cols and the fractional weight of the second one.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
