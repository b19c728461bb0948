//! Exact geometric transforms plus the affine shift/scale/rotate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{warp_sample, ImageBuf, MaskBuf, Sample, Transform};

pub struct HorizontalFlip;

impl Transform for HorizontalFlip {
    fn name(&self) -> &'static str {
        "horizontal_flip"
    }
    fn probability(&self) -> f64 {
        0.25
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, _rng: &mut ChaCha8Rng) {
        let (w, h) = (sample.image.width, sample.image.height);
        let mut image = ImageBuf::new(w, h);
        let mut mask = MaskBuf::new(w, h);
        for y in 0..h {
            for x in 0..w {
                image.put(x, y, sample.image.get(w - 1 - x, y));
                mask.put(x, y, sample.mask.get(w - 1 - x, y));
            }
        }
        sample.image = image;
        sample.mask = mask;
    }
}

pub struct RandomRotate90;

impl Transform for RandomRotate90 {
    fn name(&self) -> &'static str {
        "random_rotate90"
    }
    fn probability(&self) -> f64 {
        0.25
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let k: u32 = rng.random_range(0..4);
        for _ in 0..k {
            rotate90_once(sample);
        }
    }
}

/// Counter-clockwise quarter turn; (x, y) -> (y, W-1-x) in source terms.
fn rotate90_once(sample: &mut Sample) {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut image = ImageBuf::new(h, w);
    let mut mask = MaskBuf::new(h, w);
    for y in 0..w {
        for x in 0..h {
            image.put(x, y, sample.image.get(w - 1 - y, x));
            mask.put(x, y, sample.mask.get(w - 1 - y, x));
        }
    }
    sample.image = image;
    sample.mask = mask;
}

pub struct Transpose;

impl Transform for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn probability(&self) -> f64 {
        0.25
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, _rng: &mut ChaCha8Rng) {
        let (w, h) = (sample.image.width, sample.image.height);
        let mut image = ImageBuf::new(h, w);
        let mut mask = MaskBuf::new(h, w);
        for y in 0..w {
            for x in 0..h {
                image.put(x, y, sample.image.get(y, x));
                mask.put(x, y, sample.mask.get(y, x));
            }
        }
        sample.image = image;
        sample.mask = mask;
    }
}

/// Random affine: shift up to 6.25% of each side, scale in [0.9, 1.1],
/// rotation in [-45, 45] degrees, all about the image center. Bilinear
/// image sampling, nearest mask sampling, reflection border.
pub struct ShiftScaleRotate {
    pub shift_limit: f64,
    pub scale_limit: f64,
    pub rotate_limit_deg: f64,
}

impl Default for ShiftScaleRotate {
    fn default() -> Self {
        Self {
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit_deg: 45.0,
        }
    }
}

impl Transform for ShiftScaleRotate {
    fn name(&self) -> &'static str {
        "shift_scale_rotate"
    }
    fn probability(&self) -> f64 {
        0.25
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let angle = rng
            .random_range(-self.rotate_limit_deg..=self.rotate_limit_deg)
            .to_radians();
        let scale = 1.0 + rng.random_range(-self.scale_limit..=self.scale_limit);
        let dx = rng.random_range(-self.shift_limit..=self.shift_limit) * sample.image.width as f64;
        let dy =
            rng.random_range(-self.shift_limit..=self.shift_limit) * sample.image.height as f64;

        let cx = (sample.image.width as f64 - 1.0) / 2.0;
        let cy = (sample.image.height as f64 - 1.0) / 2.0;
        let (sin, cos) = angle.sin_cos();
        // Inverse map: undo shift, then rotate by -angle and divide by scale
        // about the center.
        warp_sample(sample, |x, y| {
            let px = x - dx - cx;
            let py = y - dy - cy;
            let sx = (px * cos + py * sin) / scale + cx;
            let sy = (-px * sin + py * cos) / scale + cy;
            (sx, sy)
        });
    }
}
