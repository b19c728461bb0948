//! Dataset manifests, image/mask I/O, batching, and tensor conversion.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   images/<stem>.png        8-bit RGB
//!   masks/<stem>.png         8-bit grayscale, binarized at >= 128 on load
//!   splits/{train,valid,test}.txt   one stem per line, LF, UTF-8
//! ```
//!
//! PNG keeps masks lossless, which metric exactness depends on.

pub mod synth;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_pipeline, sample_rng, AugmentMode, AugmentSpec, ImageBuf, MaskBuf, Sample};
use crate::elem::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalization constants applied after scaling to [0, 1].
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Grayscale threshold above which a mask pixel counts as crack (inclusive).
pub const MASK_THRESHOLD: u8 = 128;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// A dataset root with resolved split listings.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    /// Load and validate a manifest: split files must parse, every stem must
    /// resolve to exactly one image and one mask, and splits must be
    /// disjoint.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let read_split = |name: &str| -> Result<Vec<String>> {
            let path = root.join("splits").join(format!("{name}.txt"));
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let text = std::fs::read_to_string(&path)?;
            Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect())
        };
        let manifest = Self {
            train: read_split("train")?,
            valid: read_split("valid")?,
            test: read_split("test")?,
            root,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        for (a, b, na, nb) in [
            (&self.train, &self.valid, "train", "valid"),
            (&self.train, &self.test, "train", "test"),
            (&self.valid, &self.test, "valid", "test"),
        ] {
            for stem in a {
                if b.contains(stem) {
                    return Err(Error::SplitOverlap {
                        stem: stem.clone(),
                        a: na.into(),
                        b: nb.into(),
                    });
                }
            }
        }
        for stem in self.train.iter().chain(&self.valid).chain(&self.test) {
            for path in [self.image_path(stem), self.mask_path(stem)] {
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
            }
        }
        Ok(())
    }

    pub fn image_path(&self, stem: &str) -> PathBuf {
        self.root.join("images").join(format!("{stem}.png"))
    }

    pub fn mask_path(&self, stem: &str) -> PathBuf {
        self.root.join("masks").join(format!("{stem}.png"))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::EmptySplit(other.to_string())),
        }
    }
}

fn decode_error(path: &Path, err: impl std::fmt::Display) -> Error {
    Error::DecodeError {
        path: path.to_path_buf(),
        reason: err.to_string(),
    }
}

/// Decode any supported image file to an RGB buffer.
pub fn load_image_rgb(path: &Path) -> Result<ImageBuf> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_rgb8();
    Ok(ImageBuf {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Decode a grayscale mask file and binarize at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<MaskBuf> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_luma8();
    let data = img.iter().map(|&v| u8::from(v >= MASK_THRESHOLD)).collect();
    Ok(MaskBuf {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    })
}

/// Load a sample at native resolution.
pub fn load_sample_native(manifest: &DatasetManifest, stem: &str) -> Result<Sample> {
    let image = load_image_rgb(&manifest.image_path(stem))?;
    let mask = load_mask(&manifest.mask_path(stem))?;
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::SizeMismatch {
            stem: stem.to_string(),
            img_h: image.height,
            img_w: image.width,
            mask_h: mask.height,
            mask_w: mask.width,
        });
    }
    Ok(Sample {
        image,
        mask,
        stem: stem.to_string(),
    })
}

/// Load a sample resized to `target` (height, width): bilinear for the
/// image, nearest for the mask.
pub fn load_sample(
    manifest: &DatasetManifest,
    stem: &str,
    target: (usize, usize),
) -> Result<Sample> {
    let sample = load_sample_native(manifest, stem)?;
    Ok(resize_sample(&sample, target))
}

pub fn resize_sample(sample: &Sample, target: (usize, usize)) -> Sample {
    Sample {
        image: resize_image_bilinear(&sample.image, target.1, target.0),
        mask: resize_mask_nearest(&sample.mask, target.1, target.0),
        stem: sample.stem.clone(),
    }
}

pub fn resize_image_bilinear(img: &ImageBuf, width: usize, height: usize) -> ImageBuf {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let src = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer matches dims");
    let resized = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    ImageBuf {
        width,
        height,
        data: resized.into_raw(),
    }
}

/// Nearest-neighbor mask resize; preserves binarity exactly.
pub fn resize_mask_nearest(mask: &MaskBuf, width: usize, height: usize) -> MaskBuf {
    if mask.width == width && mask.height == height {
        return mask.clone();
    }
    let mut out = MaskBuf::new(width, height);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64) as usize;
        let sy = sy.min(mask.height - 1);
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64) as usize;
            let sx = sx.min(mask.width - 1);
            out.put(x, y, mask.get(sx, sy));
        }
    }
    out
}

/// Standardize an RGB image into a 3 x H x W tensor slab (scale to [0, 1],
/// subtract [`CHANNEL_MEAN`], divide by [`CHANNEL_STD`]).
pub fn image_to_tensor_slab<E: Element>(img: &ImageBuf, out: &mut [E]) {
    let hw = img.width * img.height;
    for c in 0..3 {
        for i in 0..hw {
            let v = img.data[i * 3 + c] as f64 / 255.0;
            out[c * hw + i] = E::from_f64((v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]);
        }
    }
}

/// One training batch in tensor form plus its provenance.
pub struct Batch<E: Element> {
    /// N x 3 x H x W standardized images.
    pub images: Tensor<E>,
    /// N x 1 x H x W binary targets.
    pub masks: Tensor<E>,
    pub stems: Vec<String>,
}

pub fn samples_to_batch<E: Element>(samples: &[Sample]) -> Result<Batch<E>> {
    let n = samples.len();
    let (h, w) = (samples[0].image.height, samples[0].image.width);
    let hw = h * w;
    let mut images = vec![E::ZERO; n * 3 * hw];
    let mut masks = vec![E::ZERO; n * hw];
    for (i, s) in samples.iter().enumerate() {
        if s.image.height != h || s.image.width != w {
            return Err(Error::ShapeMismatch(format!(
                "batch sample '{}' has size {}x{}, expected {h}x{w}",
                s.stem, s.image.height, s.image.width
            )));
        }
        image_to_tensor_slab(&s.image, &mut images[i * 3 * hw..(i + 1) * 3 * hw]);
        for (j, &m) in s.mask.data.iter().enumerate() {
            masks[i * hw + j] = E::from_f64(m as f64);
        }
    }
    Ok(Batch {
        images: Tensor::new(vec![n, 3, h, w], images)?,
        masks: Tensor::new(vec![n, 1, h, w], masks)?,
        stems: samples.iter().map(|s| s.stem.clone()).collect(),
    })
}

/// Deterministic batch stream over one split.
///
/// Samples are preloaded once at native resolution; each epoch shuffles the
/// order with an rng derived from (seed, epoch), augments (train-style
/// streams keyed by sample index), resizes to the target, and yields fixed
/// `batch_size` chunks with the final short batch kept.
pub struct BatchLoader {
    samples: Vec<Sample>,
    target: (usize, usize),
    batch_size: usize,
    augment: AugmentSpec,
    seed: u64,
}

impl BatchLoader {
    pub fn new(
        manifest: &DatasetManifest,
        split: &str,
        target: (usize, usize),
        batch_size: usize,
        augment: AugmentSpec,
        seed: u64,
    ) -> Result<Self> {
        let stems = manifest.split(split)?;
        if stems.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let samples = stems
            .iter()
            .map(|stem| load_sample_native(manifest, stem))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            target,
            batch_size: batch_size.max(1),
            augment,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// The shuffled sample order for an epoch, fixed by (seed, epoch).
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        order
    }

    /// Materialize every batch of one epoch, in order.
    pub fn epoch_batches<E: Element>(&self, epoch: usize) -> Result<Vec<Batch<E>>> {
        let order = self.epoch_order(epoch);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.batch_size) {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut s = self.samples[idx].clone();
                if !matches!(self.augment.mode, AugmentMode::None) {
                    let mut rng = sample_rng(self.augment.seed ^ self.seed, epoch, idx);
                    apply_pipeline(&mut s, &self.augment, &mut rng);
                }
                prepared.push(resize_sample(&s, self.target));
            }
            batches.push(samples_to_batch(&prepared)?);
        }
        Ok(batches)
    }

    /// Samples resized to the target without augmentation, manifest order;
    /// the evaluation path.
    pub fn plain_samples(&self) -> Vec<Sample> {
        self.samples
            .iter()
            .map(|s| resize_sample(s, self.target))
            .collect()
    }

    /// Native-resolution samples, manifest order.
    pub fn native_samples(&self) -> &[Sample] {
        &self.samples
    }
}

/// Write a sample back to disk as PNG files (used by the synthesizer).
pub fn save_image_png(path: &Path, img: &ImageBuf) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| decode_error(path, e))
}

pub fn save_mask_png(path: &Path, mask: &MaskBuf) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, data)
        .expect("buffer matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| decode_error(path, e))
}
