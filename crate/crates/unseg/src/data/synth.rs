//! Synthetic crack dataset generator.
//!
//! Each sample is a procedurally textured background with a handful of
//! random-walk polyline cracks stroked onto it: crack pixels are darkened by
//! 40-80% and the mask marks exactly the stroked pixels, so ground truth is
//! pixel-exact by construction. Everything derives from the spec seed, so
//! the same spec writes byte-identical trees.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_image_png, save_mask_png, DatasetManifest};
use crate::augment::{ImageBuf, MaskBuf};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    Noise,
    MarbleVeins,
    Plain,
}

impl TextureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(Self::Noise),
            "marble_veins" => Some(Self::MarbleVeins),
            "plain" => Some(Self::Plain),
            _ => None,
        }
    }
}

/// Generator parameters.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub size: usize,
    pub cracks_per_image: (usize, usize),
    /// Stroke width range in pixels.
    pub crack_width: (usize, usize),
    pub texture: TextureKind,
    pub seed: u64,
}

impl SynthSpec {
    /// Split a total sample budget 70/15/15: the valid and test shares round
    /// half-up, the remainder trains. 24 samples -> 16 / 4 / 4.
    pub fn with_total(total: usize, size: usize, seed: u64) -> Self {
        let side = ((total as f64) * 0.15).round() as usize;
        let side = side.max(1).min(total / 3);
        Self {
            n_train: total - 2 * side,
            n_valid: side,
            n_test: side,
            size,
            cracks_per_image: (1, 3),
            crack_width: (1, 2),
            texture: TextureKind::MarbleVeins,
            seed,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::with_total(24, 64, 0)
    }
}

/// Generate the dataset under `root` and return its manifest.
pub fn generate_synthetic(spec: &SynthSpec, root: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    std::fs::create_dir_all(root.join("splits"))?;

    let counts = [
        ("train", spec.n_train),
        ("valid", spec.n_valid),
        ("test", spec.n_test),
    ];
    let mut index = 0usize;
    for (split, count) in counts {
        let mut stems = String::new();
        for _ in 0..count {
            let stem = format!("synth-{index:05}");
            let (image, mask) = generate_sample(spec, index as u64);
            save_image_png(&root.join("images").join(format!("{stem}.png")), &image)?;
            save_mask_png(&root.join("masks").join(format!("{stem}.png")), &mask)?;
            stems.push_str(&stem);
            stems.push('\n');
            index += 1;
        }
        std::fs::write(root.join("splits").join(format!("{split}.txt")), stems)?;
    }
    DatasetManifest::load(root)
}

/// One (image, mask) pair; deterministic in (spec.seed, index).
pub fn generate_sample(spec: &SynthSpec, index: u64) -> (ImageBuf, MaskBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let size = spec.size;
    let mut image = render_texture(spec.texture, size, &mut rng);
    let mut mask = MaskBuf::new(size, size);

    let n_cracks = rng.random_range(spec.cracks_per_image.0..=spec.cracks_per_image.1);
    for _ in 0..n_cracks {
        let width = rng.random_range(spec.crack_width.0..=spec.crack_width.1);
        let darkening = rng.random_range(0.2..0.6); // keep 20-60% of brightness
        stroke_crack(&mut image, &mut mask, width, darkening, &mut rng);
    }
    (image, mask)
}

/// Random-walk polyline: steps of 2-5 px with heading perturbed by up to
/// 30 degrees per step. Stroked pixels darken the image and set the mask.
fn stroke_crack(
    image: &mut ImageBuf,
    mask: &mut MaskBuf,
    width: usize,
    darkening: f64,
    rng: &mut ChaCha8Rng,
) {
    let size = image.width as f64;
    let mut x = rng.random_range(0.1 * size..0.9 * size);
    let mut y = rng.random_range(0.1 * size..0.9 * size);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let steps = rng.random_range(10..25);
    let radius = width as f64 / 2.0;

    for _ in 0..steps {
        let step = rng.random_range(2.0..5.0);
        heading += rng.random_range(-0.5236..0.5236); // +/- 30 degrees
        let nx = x + step * heading.cos();
        let ny = y + step * heading.sin();
        stroke_segment(image, mask, (x, y), (nx, ny), radius, darkening);
        x = nx.clamp(0.0, size - 1.0);
        y = ny.clamp(0.0, size - 1.0);
        if nx != x || ny != y {
            // Bounced off the border: turn back toward the interior.
            heading += std::f64::consts::FRAC_PI_2;
        }
    }
}

/// Mark and darken every pixel within `radius` of the segment.
fn stroke_segment(
    image: &mut ImageBuf,
    mask: &mut MaskBuf,
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    darkening: f64,
) {
    let (w, h) = (image.width, image.height);
    let pad = radius.ceil() as isize + 1;
    let x0 = ((a.0.min(b.0)) as isize - pad).max(0) as usize;
    let x1 = (((a.0.max(b.0)) as isize + pad) as usize).min(w - 1);
    let y0 = ((a.1.min(b.1)) as isize - pad).max(0) as usize;
    let y1 = (((a.1.max(b.1)) as isize + pad) as usize).min(h - 1);

    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len_sq == 0.0 {
                0.0
            } else {
                (((px - a.0) * dx + (py - a.1) * dy) / len_sq).clamp(0.0, 1.0)
            };
            let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if dist <= radius.max(0.5) {
                if mask.get(x, y) == 0 {
                    let px_val = image.get(x, y);
                    image.put(
                        x,
                        y,
                        [
                            (px_val[0] as f64 * darkening) as u8,
                            (px_val[1] as f64 * darkening) as u8,
                            (px_val[2] as f64 * darkening) as u8,
                        ],
                    );
                }
                mask.put(x, y, 1);
            }
        }
    }
}

fn render_texture(kind: TextureKind, size: usize, rng: &mut ChaCha8Rng) -> ImageBuf {
    match kind {
        TextureKind::Plain => {
            let base: u8 = rng.random_range(150..210);
            let tint = [
                base,
                base.saturating_sub(rng.random_range(0..8)),
                base.saturating_sub(rng.random_range(0..12)),
            ];
            ImageBuf::from_fn(size, size, |_, _| tint)
        }
        TextureKind::Noise => {
            let field = value_noise(size, 8, rng);
            let base = rng.random_range(150.0..200.0);
            ImageBuf::from_fn(size, size, |x, y| {
                let v = (base + 40.0 * field[y * size + x]).clamp(0.0, 255.0) as u8;
                [v, v.saturating_sub(3), v.saturating_sub(6)]
            })
        }
        TextureKind::MarbleVeins => {
            // Classic marble: a sine stripe warped by smooth turbulence.
            let turb = value_noise(size, 6, rng);
            let freq = rng.random_range(2.0..4.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let base = rng.random_range(170.0..215.0);
            ImageBuf::from_fn(size, size, |x, y| {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                let t = turb[y * size + x];
                let vein = ((u + v) * freq * std::f64::consts::PI + phase + 4.0 * t).sin();
                // Veins darken gently; far less than a crack's 40-80%.
                let shade = base - 18.0 * vein.abs().powf(0.7) - 10.0 * t;
                let g = shade.clamp(0.0, 255.0) as u8;
                [g, g.saturating_sub(2), g.saturating_sub(5)]
            })
        }
    }
}

/// Smooth value noise in [-1, 1]: a coarse random grid, bilinearly sampled.
fn value_noise(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / size as f64 * cells as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 / size as f64 * cells as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let idx = |cx: usize, cy: usize| grid[cy * (cells + 1) + cx];
            let top = idx(x0, y0) * (1.0 - fx) + idx(x0 + 1, y0) * fx;
            let bot = idx(x0, y0 + 1) * (1.0 - fx) + idx(x0 + 1, y0 + 1) * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}
