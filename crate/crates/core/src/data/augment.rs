//! Photometric and geometric patch augmentation.
//!
//! Transforms run in a fixed order: flip, color jitter (brightness,
//! contrast, saturation, hue), grayscale, gaussian blur, solarize. Each one
//! draws its gate and parameters from its own substream of the patch RNG.

use serde::{Deserialize, Serialize};

use super::{Image, NormStats, PatchView, Rng, CHANNELS, LUMA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
    pub solarize_threshold: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.2,
            grayscale_p: 0.2,
            blur_p: 0.1,
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.1,
            solarize_threshold: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// No transform ever fires.
    pub fn none() -> Self {
        Self {
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("{name} must be in [0, 1], got {s}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(format!("hue must be in [0, 0.5], got {}", self.hue));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(format!("blur_sigma must satisfy 0 < lo <= hi, got {:?}", self.blur_sigma));
        }
        Ok(())
    }
}

/// Substream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Transform {
    Crop = 0,
    Flip = 1,
    Jitter = 2,
    Grayscale = 3,
    Blur = 4,
    Solarize = 5,
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

fn flip_horizontal(img: &mut Image) {
    let w = img.width();
    for row in img.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
}

fn luminance(img: &Image, i: usize) -> f64 {
    let plane = img.height() * img.width();
    let d = img.data();
    LUMA[0] * d[i] as f64 + LUMA[1] * d[plane + i] as f64 + LUMA[2] * d[2 * plane + i] as f64
}

fn brightness(img: &mut Image, factor: f64) {
    img.data_mut().iter_mut().for_each(|v| *v = clamp01(*v as f64 * factor));
}

fn contrast(img: &mut Image, factor: f64) {
    let plane = img.height() * img.width();
    let mean = (0..plane).map(|i| luminance(img, i)).sum::<f64>() / plane as f64;
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = clamp01(mean + factor * (*v as f64 - mean)));
}

fn saturation(img: &mut Image, factor: f64) {
    let plane = img.height() * img.width();
    let luma: Vec<f64> = (0..plane).map(|i| luminance(img, i)).collect();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let l = luma[i % plane];
        *v = clamp01(l + factor * (*v as f64 - l));
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
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

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
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

fn hue_shift(img: &mut Image, shift: f64) {
    let plane = img.height() * img.width();
    let d = img.data_mut();
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        d[i] = clamp01(r);
        d[plane + i] = clamp01(g);
        d[2 * plane + i] = clamp01(b);
    }
}

fn grayscale(img: &mut Image) {
    let plane = img.height() * img.width();
    let luma: Vec<f32> = (0..plane).map(|i| clamp01(luminance(img, i))).collect();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = luma[i % plane];
    }
}

/// Normalized 1-D gaussian taps for radius `ceil(2σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..CHANNELS {
        let plane = &mut img.data_mut()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - r, w);
                    acc += kv * plane[y * w + xx] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = clamp01(acc);
            }
        }
    }
}

fn solarize(img: &mut Image, threshold: f64) {
    img.data_mut().iter_mut().for_each(|v| {
        if *v as f64 >= threshold {
            *v = 1.0 - *v;
        }
    });
}

/// Applies the policy to a `[0, 1]` image; the result stays in `[0, 1]`.
pub fn augment(img: &Image, policy: &AugmentPolicy, rng: &Rng) -> Image {
    let mut out = img.clone();
    let mut r = rng.derive(Transform::Flip as u64);
    if r.bernoulli(policy.flip_p) {
        flip_horizontal(&mut out);
    }
    let mut r = rng.derive(Transform::Jitter as u64);
    if r.bernoulli(policy.jitter_p) {
        let b = r.uniform_range(1.0 - policy.brightness, 1.0 + policy.brightness);
        let c = r.uniform_range(1.0 - policy.contrast, 1.0 + policy.contrast);
        let s = r.uniform_range(1.0 - policy.saturation, 1.0 + policy.saturation);
        let h = r.uniform_range(-policy.hue, policy.hue);
        brightness(&mut out, b);
        contrast(&mut out, c);
        saturation(&mut out, s);
        hue_shift(&mut out, h);
    }
    let mut r = rng.derive(Transform::Grayscale as u64);
    if r.bernoulli(policy.grayscale_p) {
        grayscale(&mut out);
    }
    let mut r = rng.derive(Transform::Blur as u64);
    if r.bernoulli(policy.blur_p) {
        let sigma = r.uniform_range(policy.blur_sigma.0, policy.blur_sigma.1);
        gaussian_blur(&mut out, sigma);
    }
    let mut r = rng.derive(Transform::Solarize as u64);
    if r.bernoulli(policy.solarize_p) {
        solarize(&mut out, policy.solarize_threshold);
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Augments then standardizes.
pub fn augment_patch(img: &Image, policy: &AugmentPolicy, stats: &NormStats, rng: &Rng) -> PatchView {
    PatchView::standardize(&augment(img, policy, rng), stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(size: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let data = (0..CHANNELS * size * size).map(|_| rng.uniform() as f32).collect();
        Image::new(size, size, data).unwrap()
    }

    fn only(policy: impl FnOnce(&mut AugmentPolicy)) -> AugmentPolicy {
        let mut p = AugmentPolicy::none();
        policy(&mut p);
        p
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = random_image(8, 1);
        for seed in 0..20 {
            assert_eq!(augment(&img, &AugmentPolicy::none(), &Rng::new(seed)), img);
        }
        let stats = NormStats::identity();
        let view = augment_patch(&img, &AugmentPolicy::none(), &stats, &Rng::new(0));
        assert!(view.data().iter().zip(img.data()).all(|(a, &b)| *a == b as f64));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = random_image(6, 2);
        let p = only(|p| p.flip_p = 1.0);
        let once = augment(&img, &p, &Rng::new(3));
        assert_ne!(once, img);
        assert_eq!(once.get(0, 0, 0), img.get(0, 0, 5));
        assert_eq!(augment(&once, &p, &Rng::new(4)), img);
    }

    #[test]
    fn grayscale_of_pure_red() {
        let img = Image::filled(2, 2, [1.0, 0.0, 0.0]);
        let out = augment(&img, &only(|p| p.grayscale_p = 1.0), &Rng::new(0));
        assert!(out.data().iter().all(|&v| (v - 0.299).abs() < 1e-7));
    }

    #[test]
    fn solarize_inverts_bright_pixels() {
        let img = Image::new(1, 2, vec![0.2, 0.5, 0.7, 0.49, 1.0, 0.0]).unwrap();
        let out = augment(&img, &only(|p| p.solarize_p = 1.0), &Rng::new(0));
        let expected = [0.2, 0.5, 1.0 - 0.7f32, 0.49, 0.0, 0.0];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for sigma in [0.1, 0.37, 1.0, 1.5, 2.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (2.0 * sigma as f64).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(k.windows(2).take(k.len() / 2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn blur_preserves_constant_and_smooths() {
        let img = Image::filled(5, 5, [0.25, 0.5, 0.75]);
        let p = only(|p| p.blur_p = 1.0);
        let out = augment(&img, &p, &Rng::new(1));
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let noisy = random_image(8, 5);
        let out = augment(&noisy, &p, &Rng::new(2));
        let var = |im: &Image| {
            let m = im.data().iter().map(|&v| v as f64).sum::<f64>() / im.data().len() as f64;
            im.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        assert!(var(&out) < var(&noisy));
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(4, 1), 0);
    }

    #[test]
    fn hsv_roundtrip_and_hue_rotation() {
        let mut rng = Rng::new(7);
        for _ in 0..1000 {
            let (r, g, b) = (rng.uniform(), rng.uniform(), rng.uniform());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
        // a third of the circle maps red to green
        let (r, g, b) = hsv_to_rgb(rgb_to_hsv(1.0, 0.0, 0.0).0 + 1.0 / 3.0, 1.0, 1.0);
        assert!((r - 0.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn jitter_with_unit_factors_is_identity() {
        let img = random_image(6, 9);
        let p = only(|p| {
            p.jitter_p = 1.0;
            p.brightness = 0.0;
            p.contrast = 0.0;
            p.saturation = 0.0;
            p.hue = 0.0;
        });
        let out = augment(&img, &p, &Rng::new(3));
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_policy_stays_in_unit_interval() {
        let p = AugmentPolicy {
            flip_p: 1.0,
            jitter_p: 1.0,
            grayscale_p: 0.5,
            blur_p: 1.0,
            solarize_p: 0.5,
            ..Default::default()
        };
        for seed in 0..50 {
            let out = augment(&random_image(8, seed), &p, &Rng::new(seed));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy { flip_p: 1.5, ..Default::default() };
        assert!(bad.validate().unwrap_err().contains("flip_p"));
    }
}
