//! Reflection padding and cropping on NCHW tensors.
//!
//! Used by the U-Net when the configured input size is not divisible by 32:
//! the input is reflect-padded up to the next multiple and the logits are
//! cropped back. Reflection excludes the edge pixel (`abcb` style), so the
//! pad amount must be smaller than the spatial extent.

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad2 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2 {
    pub fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let mut i = i;
    let last = (len - 1) as isize;
    if i < 0 {
        i = -i;
    }
    if i > last {
        i = 2 * last - i;
    }
    i as usize
}

pub fn reflect_pad_forward<E: Element>(x: &Tensor<E>, pad: Pad2) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    if pad.top >= h || pad.bottom >= h || pad.left >= w || pad.right >= w {
        return Err(Error::BadSpatialDims {
            h,
            w,
            reason: format!("reflection pad {pad:?} exceeds tensor extent"),
        });
    }
    let (oh, ow) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
    let xs = x.data();
    let mut out = vec![E::ZERO; n * c * oh * ow];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            let sy = reflect(oy as isize - pad.top as isize, h);
            for ox in 0..ow {
                let sx = reflect(ox as isize - pad.left as isize, w);
                out[ob + oy * ow + ox] = xs[ib + sy * w + sx];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn reflect_pad_backward_x<E: Element>(
    go: &Tensor<E>,
    pad: Pad2,
    in_shape: &[usize],
) -> Result<Tensor<E>> {
    let (n, c, oh, ow) = go.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let gs = go.data();
    let mut dx = vec![E::ZERO; in_shape.iter().product()];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            let sy = reflect(oy as isize - pad.top as isize, h);
            for ox in 0..ow {
                let sx = reflect(ox as isize - pad.left as isize, w);
                dx[ib + sy * w + sx] += gs[ob + oy * ow + ox];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

pub fn crop_forward<E: Element>(
    x: &Tensor<E>,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = x.dims4()?;
    if top + out_h > h || left + out_w > w {
        return Err(Error::BadSpatialDims {
            h,
            w,
            reason: format!("crop {top},{left} + {out_h}x{out_w} out of bounds"),
        });
    }
    let xs = x.data();
    let mut out = vec![E::ZERO; n * c * out_h * out_w];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * out_h * out_w;
        for oy in 0..out_h {
            let src = ib + (oy + top) * w + left;
            let dst = ob + oy * out_w;
            out[dst..dst + out_w].copy_from_slice(&xs[src..src + out_w]);
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn crop_backward_x<E: Element>(
    go: &Tensor<E>,
    top: usize,
    left: usize,
    in_shape: &[usize],
) -> Result<Tensor<E>> {
    let (n, c, oh, ow) = go.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let gs = go.data();
    let mut dx = vec![E::ZERO; in_shape.iter().product()];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * oh * ow;
        for oy in 0..oh {
            let dst = ib + (oy + top) * w + left;
            let src = ob + oy * ow;
            for i in 0..ow {
                dx[dst + i] += gs[src + i];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}
