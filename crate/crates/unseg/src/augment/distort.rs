//! Moderate distortions: blur, elastic, grid, and optical distortion.
//!
//! Displacement and distortion intensities are deliberately small; the
//! defaults below are the fixed, documented values the pipeline uses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{reflect_coord, warp_sample, ImageBuf, Sample, Transform};

/// Box blur with kernel size drawn from {3, 5, 7}. Image only.
pub struct Blur {
    pub max_kernel: usize,
}

impl Default for Blur {
    fn default() -> Self {
        Self { max_kernel: 7 }
    }
}

impl Transform for Blur {
    fn name(&self) -> &'static str {
        "blur"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        false
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let choices: Vec<usize> = (3..=self.max_kernel).step_by(2).collect();
        let k = choices[rng.random_range(0..choices.len())];
        let r = (k / 2) as isize;
        let (w, h) = (sample.image.width, sample.image.height);
        let norm = (k * k) as u32;
        let mut out = ImageBuf::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0u32; 3];
                for dy in -r..=r {
                    let sy = reflect_coord(y as isize + dy, h);
                    for dx in -r..=r {
                        let sx = reflect_coord(x as isize + dx, w);
                        let px = sample.image.get(sx, sy);
                        for c in 0..3 {
                            acc[c] += px[c] as u32;
                        }
                    }
                }
                out.put(
                    x,
                    y,
                    [
                        ((acc[0] + norm / 2) / norm) as u8,
                        ((acc[1] + norm / 2) / norm) as u8,
                        ((acc[2] + norm / 2) / norm) as u8,
                    ],
                );
            }
        }
        sample.image = out;
    }
}

/// Elastic deformation: per-pixel uniform noise smoothed by a Gaussian of
/// sigma pixels, scaled by alpha.
pub struct ElasticTransform {
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for ElasticTransform {
    fn default() -> Self {
        Self {
            alpha: 30.0,
            sigma: 5.0,
        }
    }
}

impl Transform for ElasticTransform {
    fn name(&self) -> &'static str {
        "elastic"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let (w, h) = (sample.image.width, sample.image.height);
        let mut dx = vec![0f64; w * h];
        let mut dy = vec![0f64; w * h];
        for v in dx.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in dy.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        gaussian_smooth(&mut dx, w, h, self.sigma);
        gaussian_smooth(&mut dy, w, h, self.sigma);
        for v in dx.iter_mut() {
            *v *= self.alpha;
        }
        for v in dy.iter_mut() {
            *v *= self.alpha;
        }
        warp_sample(sample, |x, y| {
            let i = y as usize * w + x as usize;
            (x + dx[i], y + dy[i])
        });
    }
}

/// Separable Gaussian smoothing with reflected borders.
fn gaussian_smooth(field: &mut [f64], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect_coord(x as isize + ki as isize - radius, w);
                acc += field[y * w + sx] * kv;
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect_coord(y as isize + ki as isize - radius, h);
                acc += tmp[sy * w + x] * kv;
            }
            field[y * w + x] = acc;
        }
    }
}

/// Piecewise-linear grid distortion: the image is divided into
/// `num_steps` cells per axis and each cell's extent is stretched or
/// compressed by up to `distort_limit`.
pub struct GridDistortion {
    pub num_steps: usize,
    pub distort_limit: f64,
}

impl Default for GridDistortion {
    fn default() -> Self {
        Self {
            num_steps: 5,
            distort_limit: 0.3,
        }
    }
}

impl GridDistortion {
    /// Cumulative source coordinate for every destination index along one
    /// axis of length `len`.
    fn axis_map(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let step = len / self.num_steps;
        let mut map = vec![0f64; len];
        let mut prev = 0f64;
        let mut start = 0usize;
        let mut idx = 0usize;
        while start < len {
            let end = (start + step.max(1)).min(len);
            let scale = 1.0 + rng.random_range(-self.distort_limit..=self.distort_limit);
            let cur = prev + (end - start) as f64 * scale;
            let span = (end - start) as f64;
            for (i, m) in map[start..end].iter_mut().enumerate() {
                *m = prev + (cur - prev) * (i as f64 / span);
            }
            prev = cur;
            start = end;
            idx += 1;
            if idx > self.num_steps + 2 {
                break;
            }
        }
        map
    }
}

impl Transform for GridDistortion {
    fn name(&self) -> &'static str {
        "grid_distortion"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let (w, h) = (sample.image.width, sample.image.height);
        let map_x = self.axis_map(w, rng);
        let map_y = self.axis_map(h, rng);
        warp_sample(sample, |x, y| {
            (map_x[x as usize], map_y[y as usize])
        });
    }
}

/// Radial (barrel/pincushion) distortion with a small random center shift.
pub struct OpticalDistortion {
    pub distort_limit: f64,
    pub shift_limit: f64,
}

impl Default for OpticalDistortion {
    fn default() -> Self {
        Self {
            distort_limit: 0.05,
            shift_limit: 0.05,
        }
    }
}

impl Transform for OpticalDistortion {
    fn name(&self) -> &'static str {
        "optical_distortion"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        true
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let k = rng.random_range(-self.distort_limit..=self.distort_limit);
        let sx = rng.random_range(-self.shift_limit..=self.shift_limit);
        let sy = rng.random_range(-self.shift_limit..=self.shift_limit);
        let (w, h) = (sample.image.width as f64, sample.image.height as f64);
        let cx = (w - 1.0) / 2.0 + sx * w;
        let cy = (h - 1.0) / 2.0 + sy * h;
        let r_norm = 0.5 * (w * w + h * h).sqrt();
        warp_sample(sample, |x, y| {
            let px = x - cx;
            let py = y - cy;
            let r2 = (px * px + py * py) / (r_norm * r_norm);
            let f = 1.0 + k * r2;
            (cx + px * f, cy + py * f)
        });
    }
}
