//! Procedural texture classes used as a small stand-in for natural images.
//!
//! Class `c` of `C` is an oriented sinusoidal grating at angle `πc/C` with a
//! class-specific spatial frequency. Every image overlays a distractor
//! grating of random orientation and frequency, and draws its own color
//! tint, phase, contrast, brightness and pixel noise. Class evidence is
//! therefore mostly in local texture; a weak class-dependent brightness
//! shift keeps the classes separable from global color statistics as well.

use serde::{Deserialize, Serialize};

use super::{hsv_to_rgb, DataError, Image, LabeledDataset, Result, Rng, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

const NOISE: f64 = 0.12;

fn render(class: usize, classes: usize, size: usize, rng: &mut Rng) -> Image {
    use std::f64::consts::PI;
    let theta = PI * class as f64 / classes as f64 + rng.uniform_range(-0.4, 0.4) * PI / classes as f64;
    // cycles across the image: 2.5, 3.25, 4 repeating
    let cycles = 2.5 + 0.75 * (class % 3) as f64;
    let omega = 2.0 * PI * cycles / size as f64;
    let phase = rng.uniform_range(0.0, 2.0 * PI);
    let amplitude = rng.uniform_range(0.15, 0.3);
    let d_theta = rng.uniform_range(0.0, PI);
    let d_omega = 2.0 * PI * rng.uniform_range(1.5, 6.0) / size as f64;
    let d_phase = rng.uniform_range(0.0, 2.0 * PI);
    let d_amplitude = rng.uniform_range(0.1, 0.3);
    let offset = rng.uniform_range(-0.12, 0.12) + 0.06 * (class as f64 / classes as f64 - 0.5);
    let (tr, tg, tb) = hsv_to_rgb(rng.uniform(), rng.uniform_range(0.0, 0.5), 1.0);
    let tint = [tr, tg, tb];
    let (ct, st) = (theta.cos(), theta.sin());
    let (dc, ds) = (d_theta.cos(), d_theta.sin());
    let plane = size * size;
    let mut data = vec![0.0f32; CHANNELS * plane];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let u = omega * (xf * ct + yf * st) + phase;
            let v = d_omega * (xf * dc + yf * ds) + d_phase;
            let base = 0.5 + offset + amplitude * u.sin() + d_amplitude * v.sin();
            for (c, t) in tint.iter().enumerate() {
                let px = base * (0.6 + 0.4 * t) + NOISE * rng.normal();
                data[c * plane + y * size + x] = px.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(size, size, data).expect("sizes consistent")
}

/// Images are interleaved by class (`label = i % classes`) so any prefix is
/// close to balanced.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.size < 16 {
        return Err(DataError::Invalid(format!("synthetic size must be >= 16, got {}", spec.size)));
    }
    if spec.classes == 0 {
        return Err(DataError::Invalid("synthetic class count must be >= 1".into()));
    }
    let total = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % spec.classes;
        let mut rng = Rng::from_key(spec.seed, &[class as u64, (i / spec.classes) as u64]);
        images.push(render(class, spec.classes, spec.size, &mut rng));
        labels.push(class);
    }
    LabeledDataset::new(images, labels, spec.classes)
}
