//! Joint image+mask augmentation.
//!
//! Every transform implements [`Transform`] and is registered by name in
//! [`pipeline_transforms`], in the order the stochastic pipeline applies
//! them. Geometric and distortion transforms move image and mask through
//! the same coordinate map (bilinear for the image, nearest for the mask,
//! which keeps masks strictly binary); photometric transforms and blur leave
//! the mask untouched.

mod distort;
mod geometric;
mod photometric;

pub use distort::{Blur, ElasticTransform, GridDistortion, OpticalDistortion};
pub use geometric::{HorizontalFlip, RandomRotate90, ShiftScaleRotate, Transpose};
pub use photometric::{Clahe, HueSaturationValue};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.put(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }
}

/// Binary mask; values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn ones_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64
    }
}

/// A paired image + crack mask with its dataset stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: ImageBuf,
    pub mask: MaskBuf,
    pub stem: String,
}

impl Sample {
    pub fn dims_match(&self) -> bool {
        self.image.width == self.mask.width && self.image.height == self.mask.height
    }
}

/// One augmentation strategy. Implementations draw their own parameters from
/// the provided rng, so a pipeline run consumes a deterministic stream of
/// draws for a fixed seed.
pub trait Transform: Send + Sync {
    /// CLI-visible name, e.g. `shift_scale_rotate`.
    fn name(&self) -> &'static str;
    /// Branch probability inside the full pipeline.
    fn probability(&self) -> f64;
    /// True if the transform moves pixels (and therefore the mask with them).
    fn alters_mask(&self) -> bool;
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng);
}

/// The full pipeline, in application order: geometric branch at p = 0.25
/// per transform, distortion branch at p = 0.1, photometric branch at
/// p = 0.1.
pub fn pipeline_transforms() -> Vec<Box<dyn Transform>> {
    vec![
        Box::new(HorizontalFlip),
        Box::new(RandomRotate90),
        Box::new(Transpose),
        Box::new(ShiftScaleRotate::default()),
        Box::new(Blur::default()),
        Box::new(ElasticTransform::default()),
        Box::new(GridDistortion::default()),
        Box::new(OpticalDistortion::default()),
        Box::new(HueSaturationValue::default()),
        Box::new(Clahe::default()),
    ]
}

pub fn transform_names() -> Vec<&'static str> {
    pipeline_transforms().iter().map(|t| t.name()).collect()
}

pub fn transform_by_name(name: &str) -> Option<Box<dyn Transform>> {
    pipeline_transforms().into_iter().find(|t| t.name() == name)
}

/// What the augmentation stage does per training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    None,
    FullPipeline,
    /// One named transform, fired at its own branch probability, or always
    /// when `force` is set.
    Single { name: String, force: bool },
}

/// Augmentation policy plus the seed its rng streams derive from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            mode: AugmentMode::None,
            seed: 0,
        }
    }

    pub fn full(seed: u64) -> Self {
        Self {
            mode: AugmentMode::FullPipeline,
            seed,
        }
    }

    pub fn single(name: impl Into<String>, force: bool, seed: u64) -> Self {
        Self {
            mode: AugmentMode::Single {
                name: name.into(),
                force,
            },
            seed,
        }
    }

    /// Parse a CLI augment argument: `none`, `full`, or `single:<name>`.
    pub fn parse(arg: &str, force: bool, seed: u64) -> Option<Self> {
        match arg {
            "none" => Some(Self::none()),
            "full" => Some(Self::full(seed)),
            _ => {
                let name = arg.strip_prefix("single:")?;
                transform_by_name(name)?;
                Some(Self::single(name, force, seed))
            }
        }
    }
}

/// Apply the configured augmentation; returns the names of the transforms
/// that fired, in order.
pub fn apply_pipeline(
    sample: &mut Sample,
    spec: &AugmentSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<&'static str> {
    let mut fired = Vec::new();
    match &spec.mode {
        AugmentMode::None => {}
        AugmentMode::FullPipeline => {
            for t in pipeline_transforms() {
                if rng.random_bool(t.probability()) {
                    t.apply(sample, rng);
                    fired.push(t.name());
                }
            }
        }
        AugmentMode::Single { name, force } => {
            if let Some(t) = transform_by_name(name) {
                let p = if *force { 1.0 } else { t.probability() };
                if rng.random_bool(p) {
                    t.apply(sample, rng);
                    fired.push(t.name());
                }
            }
        }
    }
    fired
}

/// Per-sample rng stream derived from (spec seed, epoch, sample index); the
/// same derivation regardless of worker layout, so loader parallelism can
/// never change the draws a sample sees.
pub fn sample_rng(seed: u64, epoch: usize, sample_index: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mixed = splitmix(seed ^ splitmix(epoch as u64 ^ splitmix(sample_index as u64)));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---- shared sampling helpers used by the warping transforms ----

/// Reflect an out-of-range coordinate back into [0, len), excluding the
/// edge pixel from duplication.
pub(crate) fn reflect_coord(i: isize, len: usize) -> usize {
    let last = (len - 1) as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

/// Bilinear image sample at a real-valued source coordinate with reflection
/// border handling.
pub(crate) fn sample_image_bilinear(img: &ImageBuf, sx: f64, sy: f64) -> [u8; 3] {
    let x0 = sx.floor() as isize;
    let y0 = sy.floor() as isize;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let mut out = [0u8; 3];
    let (x0r, x1r) = (
        reflect_coord(x0, img.width),
        reflect_coord(x0 + 1, img.width),
    );
    let (y0r, y1r) = (
        reflect_coord(y0, img.height),
        reflect_coord(y0 + 1, img.height),
    );
    for c in 0..3 {
        let v00 = img.get(x0r, y0r)[c] as f64;
        let v01 = img.get(x1r, y0r)[c] as f64;
        let v10 = img.get(x0r, y1r)[c] as f64;
        let v11 = img.get(x1r, y1r)[c] as f64;
        let top = v00 * (1.0 - fx) + v01 * fx;
        let bot = v10 * (1.0 - fx) + v11 * fx;
        out[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Nearest-neighbor mask sample with reflection border handling. Nearest
/// sampling is what keeps masks binary through every warp.
pub(crate) fn sample_mask_nearest(mask: &MaskBuf, sx: f64, sy: f64) -> u8 {
    let x = reflect_coord(sx.round() as isize, mask.width);
    let y = reflect_coord(sy.round() as isize, mask.height);
    mask.get(x, y)
}

/// Apply an inverse coordinate map (`dst -> src`) jointly to image and mask.
pub(crate) fn warp_sample(sample: &mut Sample, map: impl Fn(f64, f64) -> (f64, f64)) {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut image = ImageBuf::new(w, h);
    let mut mask = MaskBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            image.put(x, y, sample_image_bilinear(&sample.image, sx, sy));
            mask.put(x, y, sample_mask_nearest(&sample.mask, sx, sy));
        }
    }
    sample.image = image;
    sample.mask = mask;
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;

    pub(crate) fn random_sample(w: usize, h: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = ImageBuf::from_fn(w, h, |_, _| {
            [rng.random(), rng.random(), rng.random()]
        });
        let mut mask = MaskBuf::new(w, h);
        for v in mask.data.iter_mut() {
            *v = u8::from(rng.random_bool(0.2));
        }
        Sample {
            image,
            mask,
            stem: "test".into(),
        }
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut s = random_sample(3, 2, 1);
        let orig = s.clone();
        Transpose.apply(&mut s, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s.image.width, 2);
        assert_eq!(s.image.height, 3);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(orig.image.get(x, y), s.image.get(y, x));
                assert_eq!(orig.mask.get(x, y), s.mask.get(y, x));
            }
        }
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let mut s = random_sample(7, 5, 2);
        let orig = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        HorizontalFlip.apply(&mut s, &mut rng);
        assert_ne!(s, orig);
        HorizontalFlip.apply(&mut s, &mut rng);
        assert_eq!(s, orig);
    }

    #[test]
    fn clahe_keeps_constant_images_constant() {
        let mut s = random_sample(32, 32, 3);
        for px in s.image.data.iter_mut() {
            *px = 140;
        }
        let mask_before = s.mask.clone();
        Clahe::default().apply(&mut s, &mut ChaCha8Rng::seed_from_u64(0));
        let first = s.image.get(0, 0);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(s.image.get(x, y), first);
            }
        }
        assert_eq!(s.mask, mask_before);
    }

    #[test]
    fn photometric_and_blur_leave_masks_untouched() {
        for t in pipeline_transforms() {
            if t.alters_mask() {
                continue;
            }
            let mut s = random_sample(24, 16, 4);
            let mask_before = s.mask.clone();
            t.apply(&mut s, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(s.mask, mask_before, "{} altered the mask", t.name());
        }
    }

    #[test]
    fn every_transform_preserves_mask_binarity() {
        for t in pipeline_transforms() {
            for seed in 0..20 {
                let mut s = random_sample(20, 20, seed);
                t.apply(&mut s, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
                assert!(s.mask.is_binary(), "{} broke binarity", t.name());
                assert!(s.dims_match(), "{} desynced dims", t.name());
            }
        }
    }

    #[test]
    fn identity_draw_leaves_sample_unchanged() {
        // Find a seed where no branch fires, then demand byte identity.
        let spec = AugmentSpec::full(0);
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_sample(16, 16, 9);
            let orig = s.clone();
            let fired = apply_pipeline(&mut s, &spec, &mut rng);
            if fired.is_empty() {
                assert_eq!(s, orig);
                return;
            }
        }
        panic!("no identity draw found in 200 seeds");
    }

    #[test]
    fn pipeline_is_reproducible_for_fixed_seed() {
        let spec = AugmentSpec::full(0);
        let run = || {
            let mut rng = sample_rng(42, 3, 17);
            let mut s = random_sample(16, 16, 10);
            let fired = apply_pipeline(&mut s, &spec, &mut rng);
            (s, fired)
        };
        let (s1, f1) = run();
        let (s2, f2) = run();
        assert_eq!(s1, s2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn single_mode_fires_only_the_named_transform() {
        let spec = AugmentSpec::single("transpose", true, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = random_sample(8, 6, 11);
        let fired = apply_pipeline(&mut s, &spec, &mut rng);
        assert_eq!(fired, vec!["transpose"]);
        assert_eq!(s.image.width, 6);
    }

    #[test]
    fn augment_spec_parses_cli_strings() {
        assert_eq!(AugmentSpec::parse("none", false, 0), Some(AugmentSpec::none()));
        assert_eq!(AugmentSpec::parse("full", false, 7), Some(AugmentSpec::full(7)));
        assert!(AugmentSpec::parse("single:blur", false, 0).is_some());
        assert!(AugmentSpec::parse("single:nonsense", false, 0).is_none());
        assert!(AugmentSpec::parse("sometimes", false, 0).is_none());
    }

    #[test]
    fn registry_lists_the_ten_transforms() {
        assert_eq!(
            transform_names(),
            vec![
                "horizontal_flip",
                "random_rotate90",
                "transpose",
                "shift_scale_rotate",
                "blur",
                "elastic",
                "grid_distortion",
                "optical_distortion",
                "hue_saturation_value",
                "clahe",
            ]
        );
    }
}
