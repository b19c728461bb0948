//! Photometric transforms: HSV jitter and CLAHE. Image only; masks pass
//! through byte-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Sample, Transform};

/// Random hue/saturation/value shift in HSV space.
/// Hue in degrees; saturation and value in 8-bit units.
pub struct HueSaturationValue {
    pub hue_limit_deg: f64,
    pub sat_limit: f64,
    pub val_limit: f64,
}

impl Default for HueSaturationValue {
    fn default() -> Self {
        Self {
            hue_limit_deg: 10.0,
            sat_limit: 15.0,
            val_limit: 10.0,
        }
    }
}

impl Transform for HueSaturationValue {
    fn name(&self) -> &'static str {
        "hue_saturation_value"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        false
    }
    fn apply(&self, sample: &mut Sample, rng: &mut ChaCha8Rng) {
        let dh = rng.random_range(-self.hue_limit_deg..=self.hue_limit_deg);
        let ds = rng.random_range(-self.sat_limit..=self.sat_limit);
        let dv = rng.random_range(-self.val_limit..=self.val_limit);
        for i in (0..sample.image.data.len()).step_by(3) {
            let px = [
                sample.image.data[i],
                sample.image.data[i + 1],
                sample.image.data[i + 2],
            ];
            let (mut h, mut s, mut v) = rgb_to_hsv(px);
            h = (h + dh).rem_euclid(360.0);
            s = (s + ds / 255.0).clamp(0.0, 1.0);
            v = (v + dv / 255.0).clamp(0.0, 1.0);
            let out = hsv_to_rgb(h, s, v);
            sample.image.data[i..i + 3].copy_from_slice(&out);
        }
    }
}

fn rgb_to_hsv(px: [u8; 3]) -> (f64, f64, f64) {
    let r = px[0] as f64 / 255.0;
    let g = px[1] as f64 / 255.0;
    let b = px[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((g + m) * 255.0).round().clamp(0.0, 255.0) as u8,
        ((b + m) * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// Contrast-limited adaptive histogram equalization on the luminance
/// channel: per-tile clipped histograms with bilinear blending of the four
/// surrounding tile mappings.
pub struct Clahe {
    pub clip_limit: f64,
    pub tiles: usize,
}

impl Default for Clahe {
    fn default() -> Self {
        Self {
            clip_limit: 4.0,
            tiles: 8,
        }
    }
}

impl Transform for Clahe {
    fn name(&self) -> &'static str {
        "clahe"
    }
    fn probability(&self) -> f64 {
        0.1
    }
    fn alters_mask(&self) -> bool {
        false
    }
    fn apply(&self, sample: &mut Sample, _rng: &mut ChaCha8Rng) {
        let (w, h) = (sample.image.width, sample.image.height);
        // Luma (BT.601) plus chroma so the equalized luminance can be
        // recombined without touching hue.
        let mut y_ch = vec![0u8; w * h];
        let mut cb = vec![0f64; w * h];
        let mut cr = vec![0f64; w * h];
        for i in 0..w * h {
            let px = [
                sample.image.data[3 * i],
                sample.image.data[3 * i + 1],
                sample.image.data[3 * i + 2],
            ];
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            y_ch[i] = y.round().clamp(0.0, 255.0) as u8;
            cb[i] = (b - y) * 0.564;
            cr[i] = (r - y) * 0.713;
        }

        let eq = clahe_luma(&y_ch, w, h, self.tiles, self.clip_limit);

        for i in 0..w * h {
            let y = eq[i] as f64;
            let r = y + cr[i] / 0.713;
            let b = y + cb[i] / 0.564;
            let g = (y - 0.299 * r - 0.114 * b) / 0.587;
            sample.image.data[3 * i] = r.round().clamp(0.0, 255.0) as u8;
            sample.image.data[3 * i + 1] = g.round().clamp(0.0, 255.0) as u8;
            sample.image.data[3 * i + 2] = b.round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn clahe_luma(luma: &[u8], w: usize, h: usize, tiles: usize, clip_limit: f64) -> Vec<u8> {
    let tw = w.div_ceil(tiles);
    let th = h.div_ceil(tiles);
    let tx_count = w.div_ceil(tw);
    let ty_count = h.div_ceil(th);

    // Per-tile clipped-histogram lookup tables.
    let mut luts = vec![[0u8; 256]; tx_count * ty_count];
    for ty in 0..ty_count {
        for tx in 0..tx_count {
            let x0 = tx * tw;
            let y0 = ty * th;
            let x1 = (x0 + tw).min(w);
            let y1 = (y0 + th).min(h);
            let area = (x1 - x0) * (y1 - y0);

            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[luma[y * w + x] as usize] += 1;
                }
            }
            // Clip and redistribute the excess uniformly.
            let clip = ((clip_limit * area as f64 / 256.0).max(1.0)) as u32;
            let mut excess = 0u32;
            for b in hist.iter_mut() {
                if *b > clip {
                    excess += *b - clip;
                    *b = clip;
                }
            }
            let bonus = excess / 256;
            let leftover = (excess % 256) as usize;
            for (i, b) in hist.iter_mut().enumerate() {
                *b += bonus + u32::from(i < leftover);
            }

            let lut = &mut luts[ty * tx_count + tx];
            let mut cdf = 0u32;
            for v in 0..256 {
                cdf += hist[v];
                lut[v] = ((cdf as f64) * 255.0 / area as f64).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Bilinear blend of the four nearest tile mappings per pixel.
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let gy = (y as f64 - th as f64 / 2.0) / th as f64;
        let ty0 = gy.floor().max(0.0) as usize;
        let ty1 = (ty0 + 1).min(ty_count - 1);
        let fy = (gy - gy.floor()).clamp(0.0, 1.0);
        let fy = if gy < 0.0 { 0.0 } else { fy };
        for x in 0..w {
            let gx = (x as f64 - tw as f64 / 2.0) / tw as f64;
            let tx0 = gx.floor().max(0.0) as usize;
            let tx1 = (tx0 + 1).min(tx_count - 1);
            let fx = (gx - gx.floor()).clamp(0.0, 1.0);
            let fx = if gx < 0.0 { 0.0 } else { fx };

            let v = luma[y * w + x] as usize;
            let v00 = luts[ty0 * tx_count + tx0][v] as f64;
            let v01 = luts[ty0 * tx_count + tx1][v] as f64;
            let v10 = luts[ty1 * tx_count + tx0][v] as f64;
            let v11 = luts[ty1 * tx_count + tx1][v] as f64;
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bot = v10 * (1.0 - fx) + v11 * fx;
            out[y * w + x] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
