use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Strengths of the color jitter applied with probability `prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Augmentation distributions for the two views. Index 0 of `blur_prob` and
/// `solarize_prob` belongs to the first view, index 1 to the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub c_min: f64,
    pub flip_prob: f64,
    pub jitter: ColorJitter,
    pub grayscale_prob: f64,
    pub blur_prob: [f64; 2],
    pub solarize_prob: [f64; 2],
    pub output_size: usize,
}

impl AugmentationPolicy {
    /// BYOL-style recipe at 224 pixels with `c_min = 0.2`.
    pub fn full_scale() -> Self {
        AugmentationPolicy {
            c_min: 0.2,
            flip_prob: 0.5,
            jitter: ColorJitter { prob: 0.8, brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 },
            grayscale_prob: 0.2,
            blur_prob: [1.0, 0.1],
            solarize_prob: [0.0, 0.2],
            output_size: 224,
        }
    }

    /// Same recipe at 32 pixels, without blur.
    pub fn desk_scale() -> Self {
        AugmentationPolicy { blur_prob: [0.0, 0.0], output_size: 32, ..Self::full_scale() }
    }

    /// Whole-image crop, no photometric change.
    pub fn identity(output_size: usize) -> Self {
        AugmentationPolicy {
            c_min: 1.0,
            flip_prob: 0.0,
            jitter: ColorJitter { prob: 0.0, brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 },
            grayscale_prob: 0.0,
            blur_prob: [0.0, 0.0],
            solarize_prob: [0.0, 0.0],
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_min > 0.0 && self.c_min <= 1.0) {
            return Err(Error::config("aug.c_min", format!("c_min must lie in (0, 1], got {}", self.c_min)));
        }
        let probs = [
            ("aug.flip_prob", self.flip_prob),
            ("aug.jitter_prob", self.jitter.prob),
            ("aug.grayscale_prob", self.grayscale_prob),
            ("aug.blur_prob", self.blur_prob[0]),
            ("aug.blur_prob_prime", self.blur_prob[1]),
            ("aug.solarize_prob", self.solarize_prob[0]),
            ("aug.solarize_prob_prime", self.solarize_prob[1]),
        ];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("probability must lie in [0, 1], got {p}")));
            }
        }
        if self.output_size == 0 {
            return Err(Error::config("aug.output_size", "output size must be positive"));
        }
        Ok(())
    }
}

/// Crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Random resized crop: area fraction uniform in `[c_min, 1]`, log-uniform
/// aspect ratio in `[3/4, 4/3]`, ten attempts, then the whole image.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, c_min: f64, rng: &mut R) -> CropBox {
    let area = (height * width) as f64;
    let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(c_min..=1.0);
        let ratio = rng.random_range(lo..=hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height && (w * h) as f64 >= c_min * area {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox { top, left, height: h, width: w };
        }
    }
    CropBox { top: 0, left: 0, height, width }
}

/// Bilinear resize of a crop of a C×H×W image to C×size×size, half-pixel
/// centres. A full-image crop at the native size is an exact copy.
pub fn resize_crop(image: &Tensor<f32>, crop: CropBox, size: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let sy = crop.height as f64 / size as f64;
    let sx = crop.width as f64 / size as f64;
    let axis = |o: usize, scale: f64, start: usize, len: usize, limit: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let f = (p - i0 as f64) as f32;
        ((start + i0).min(limit - 1), (start + i1).min(limit - 1), f)
    };
    let rows: Vec<_> = (0..size).map(|o| axis(o, sy, crop.top, crop.height, h)).collect();
    let cols: Vec<_> = (0..size).map(|o| axis(o, sx, crop.left, crop.width, w)).collect();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, size, size], out).expect("resize preserves element count")
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// In-place photometric ops on a C×S×S buffer (RGB when C = 3).
struct Pixels<'a> {
    data: &'a mut [f32],
    channels: usize,
    plane: usize,
}

impl Pixels<'_> {
    fn for_each_rgb(&mut self, mut f: impl FnMut(f32, f32, f32) -> (f32, f32, f32)) {
        let p = self.plane;
        for i in 0..p {
            let (r, g, b) = f(self.data[i], self.data[p + i], self.data[2 * p + i]);
            self.data[i] = r;
            self.data[p + i] = g;
            self.data[2 * p + i] = b;
        }
    }

    fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    fn brightness(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
        self.clamp();
    }

    fn mean_luma(&self) -> f32 {
        if self.channels != 3 {
            return self.data.iter().sum::<f32>() / self.data.len() as f32;
        }
        let p = self.plane;
        (0..p).map(|i| luma(self.data[i], self.data[p + i], self.data[2 * p + i])).sum::<f32>() / p as f32
    }

    fn contrast(&mut self, factor: f32) {
        let m = self.mean_luma();
        self.data.iter_mut().for_each(|v| *v = m + factor * (*v - m));
        self.clamp();
    }

    fn saturation(&mut self, factor: f32) {
        if self.channels == 3 {
            self.for_each_rgb(|r, g, b| {
                let y = luma(r, g, b);
                (y + factor * (r - y), y + factor * (g - y), y + factor * (b - y))
            });
            self.clamp();
        }
    }

    fn hue(&mut self, shift: f32) {
        if self.channels == 3 {
            self.for_each_rgb(|r, g, b| {
                let (h, s, v) = rgb_to_hsv(r, g, b);
                hsv_to_rgb(h + shift, s, v)
            });
        }
    }

    fn grayscale(&mut self) {
        if self.channels == 3 {
            self.for_each_rgb(|r, g, b| {
                let y = luma(r, g, b);
                (y, y, y)
            });
        }
    }

    fn solarize(&mut self) {
        self.data.iter_mut().for_each(|v| {
            if *v >= 0.5 {
                *v = 1.0 - *v
            }
        });
    }

    /// Separable Gaussian blur with a kernel a tenth of the side (odd, ≥ 3).
    fn blur(&mut self, side: usize, sigma: f32) {
        let mut k = (side / 10).max(3);
        if k.is_multiple_of(2) {
            k += 1;
        }
        let r = (k / 2) as isize;
        let weights: Vec<f32> = (-r..=r).map(|d| (-((d * d) as f32) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f32 = weights.iter().sum();
        let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
        let s = side as isize;
        for plane in self.data.chunks_mut(self.plane) {
            let mut tmp = vec![0.0f32; plane.len()];
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    for (j, w) in weights.iter().enumerate() {
                        let xx = (x + j as isize - r).clamp(0, s - 1);
                        acc += w * plane[(y * s + xx) as usize];
                    }
                    tmp[(y * s + x) as usize] = acc;
                }
            }
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    for (j, w) in weights.iter().enumerate() {
                        let yy = (y + j as isize - r).clamp(0, s - 1);
                        acc += w * tmp[(yy * s + x) as usize];
                    }
                    plane[(y * s + x) as usize] = acc;
                }
            }
        }
    }
}

fn factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f32 {
    if strength > 0.0 {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
    } else {
        1.0
    }
}

/// One view drawn from pipeline `which` (0 or 1).
pub fn augment_view<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    policy: &AugmentationPolicy,
    which: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if image.ndim() != 3 {
        return Err(Error::shape(format!("expected a C×H×W image, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let crop = sample_crop(h, w, policy.c_min, rng);
    let size = policy.output_size;
    let mut out = resize_crop(image, crop, size).to_vec();
    let mut px = Pixels { data: &mut out, channels: c, plane: size * size };

    if rng.random_bool(policy.flip_prob) {
        for row in px.data.chunks_mut(size) {
            row.reverse();
        }
    }
    if rng.random_bool(policy.jitter.prob) {
        let j = &policy.jitter;
        px.brightness(factor(j.brightness, rng));
        px.contrast(factor(j.contrast, rng));
        px.saturation(factor(j.saturation, rng));
        if j.hue > 0.0 {
            px.hue(rng.random_range(-j.hue..=j.hue) as f32);
        }
    }
    if rng.random_bool(policy.grayscale_prob) {
        px.grayscale();
    }
    if rng.random_bool(policy.blur_prob[which]) {
        px.blur(size, rng.random_range(0.1..=2.0));
    }
    if rng.random_bool(policy.solarize_prob[which]) {
        px.solarize();
    }
    Tensor::new(&[c, size, size], out)
}

/// Two independently augmented views of one C×H×W image with values in [0, 1].
pub fn augment_pair<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    policy.validate()?;
    let v = augment_view(image, policy, 0, rng)?;
    let v_prime = augment_view(image, policy, 1, rng)?;
    Ok((v, v_prime))
}

/// Augment every image of a batch and stack the views into N×C×S×S tensors.
pub fn augment_batch<R: Rng + ?Sized>(
    images: &[Tensor<f32>],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if images.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut shape = Vec::new();
    for img in images {
        let (v, v2) = augment_pair(img, policy, rng)?;
        shape = v.shape().to_vec();
        a.extend_from_slice(v.data());
        b.extend_from_slice(v2.data());
    }
    let full = [&[images.len()][..], &shape].concat();
    Ok((Tensor::new(&full, a)?, Tensor::new(&full, b)?))
}
