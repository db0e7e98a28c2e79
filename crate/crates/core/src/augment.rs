//! Stochastic augmentation `T(x)`.
//!
//! Steps run in a fixed order: channel shuffle (colour only), random
//! crop-and-resize, horizontal flip, colour jitter. Images stay in the
//! `[-1, 1]` value range and keep their size.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub enabled: bool,
    /// Fraction of the image area kept by the crop.
    pub crop_area_range: (f64, f64),
    /// Width / height of the crop.
    pub crop_aspect_range: (f64, f64),
    pub hflip_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    /// Multiplicative factor on hue (in turns), wrapped modulo 1.
    pub hue_range: (f64, f64),
    /// Permute RGB channels. Ignored for single-channel images.
    pub channel_shuffle: bool,
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, (lo, hi)) in [
            ("crop_area_range", self.crop_area_range),
            ("crop_aspect_range", self.crop_aspect_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
            ("hue_range", self.hue_range),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(format!("{name}: need low <= high, got ({lo}, {hi})"));
            }
            if lo < 0.0 {
                return Err(format!("{name}: negative bound {lo}"));
            }
        }
        let (alo, ahi) = self.crop_area_range;
        if alo <= 0.0 || ahi > 1.0 {
            return Err(format!("crop_area_range must lie in (0, 1], got ({alo}, {ahi})"));
        }
        if self.crop_aspect_range.0 <= 0.0 {
            return Err("crop_aspect_range must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(format!("hflip_prob must lie in [0, 1], got {}", self.hflip_prob));
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_area_range: (0.40, 1.00),
            crop_aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
            brightness_range: (0.6, 1.4),
            contrast_range: (0.6, 1.4),
            saturation_range: (0.6, 1.4),
            hue_range: (0.875, 1.125),
            channel_shuffle: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        (self.height * self.width) as f64 / (height * width) as f64
    }
}

const CROP_ATTEMPTS: usize = 10;

/// Draws a crop whose realised area fraction and aspect ratio fall inside the
/// configured ranges; falls back to the full image after repeated misses.
pub fn sample_crop(height: usize, width: usize, spec: &AugmentSpec, rng: &mut Rng) -> CropBox {
    let area = (height * width) as f64;
    let (alo, ahi) = spec.crop_area_range;
    let (rlo, rhi) = spec.crop_aspect_range;
    for _ in 0..CROP_ATTEMPTS {
        let frac = uniform(rng, alo, ahi);
        let aspect = uniform(rng, rlo, rhi);
        let cw = (frac * area * aspect).sqrt().round() as usize;
        let ch = (frac * area / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > width || ch > height {
            continue;
        }
        let realised = (cw * ch) as f64 / area;
        if realised < alo || realised > ahi {
            continue;
        }
        let top = rng.random_range(0..=height - ch);
        let left = rng.random_range(0..=width - cw);
        return CropBox {
            top,
            left,
            height: ch,
            width: cw,
        };
    }
    CropBox::full(height, width)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Applies `T` to one image. The same `rng` state always yields the same output.
pub fn augment(image: &Image, spec: &AugmentSpec, rng: &mut Rng) -> Image {
    if !spec.enabled {
        return image.clone();
    }
    let mut img = image.clone();
    if img.channels == 3 && spec.channel_shuffle {
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        img = shuffle_channels(&img, order);
    }
    let crop = sample_crop(img.height, img.width, spec, rng);
    if crop != CropBox::full(img.height, img.width) {
        img = crop_resize(&img, crop, img.height, img.width);
    }
    if rng.random_bool(spec.hflip_prob) {
        img = hflip(&img);
    }
    let jitter = Jitter {
        brightness: uniform(rng, spec.brightness_range.0, spec.brightness_range.1),
        contrast: uniform(rng, spec.contrast_range.0, spec.contrast_range.1),
        saturation: uniform(rng, spec.saturation_range.0, spec.saturation_range.1),
        hue: uniform(rng, spec.hue_range.0, spec.hue_range.1),
    };
    color_jitter(&img, jitter)
}

pub fn shuffle_channels(img: &Image, order: [usize; 3]) -> Image {
    let plane = img.height * img.width;
    let mut data = Vec::with_capacity(img.data.len());
    for &c in &order {
        data.extend_from_slice(&img.data[c * plane..(c + 1) * plane]);
    }
    Image { data, ..img.clone() }
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    out
}

/// Crops `crop` and resamples it bilinearly to `out_h x out_w`.
pub fn crop_resize(img: &Image, crop: CropBox, out_h: usize, out_w: usize) -> Image {
    let plane = img.height * img.width;
    let sy = crop.height as f64 / out_h as f64;
    let sx = crop.width as f64 / out_w as f64;
    let mut data = vec![0.0f32; img.channels * out_h * out_w];
    for c in 0..img.channels {
        let src = &img.data[c * plane..(c + 1) * plane];
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (crop.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(crop.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (crop.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(crop.width - 1);
                let wx = fx - x0 as f64;
                let at = |yy: usize, xx: usize| src[(crop.top + yy) * img.width + crop.left + xx] as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x1))
                    + wy * ((1.0 - wx) * at(y1, x0) + wx * at(y1, x1));
                data[(c * out_h + y) * out_w + x] = v as f32;
            }
        }
    }
    Image {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Brightness, contrast, saturation, hue, in that order, computed in `[0, 1]`
/// intensity space. Saturation and hue only touch colour images.
pub fn color_jitter(img: &Image, j: Jitter) -> Image {
    let plane = img.height * img.width;
    let mut px: Vec<f64> = img.data.iter().map(|&v| (v as f64 + 1.0) / 2.0).collect();
    for v in px.iter_mut() {
        *v = (*v * j.brightness).clamp(0.0, 1.0);
    }
    let gray_of = |px: &[f64], i: usize| -> f64 {
        if img.channels == 3 {
            crate::data::luminance(px[i], px[plane + i], px[2 * plane + i])
        } else {
            px[i]
        }
    };
    let mean = (0..plane).map(|i| gray_of(&px, i)).sum::<f64>() / plane as f64;
    for v in px.iter_mut() {
        *v = ((*v - mean) * j.contrast + mean).clamp(0.0, 1.0);
    }
    if img.channels == 3 {
        for i in 0..plane {
            let g = gray_of(&px, i);
            for c in 0..3 {
                let v = &mut px[c * plane + i];
                *v = ((*v - g) * j.saturation + g).clamp(0.0, 1.0);
            }
            let (h, s, v) = rgb_to_hsv(px[i], px[plane + i], px[2 * plane + i]);
            let (r, g2, b) = hsv_to_rgb((h * j.hue).rem_euclid(1.0), s, v);
            px[i] = r;
            px[plane + i] = g2;
            px[2 * plane + i] = b;
        }
    }
    Image {
        data: px.iter().map(|&v| (v * 2.0 - 1.0) as f32).collect(),
        ..img.clone()
    }
}

/// Hue in turns `[0, 1)`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
