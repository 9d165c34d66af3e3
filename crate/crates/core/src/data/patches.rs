use super::{DataError, Image, Result, Rng, CHANNELS};

/// Square crop with top-left corner `(top, left)`.
pub fn crop(img: &Image, top: usize, left: usize, size: usize) -> Image {
    assert!(top + size <= img.height() && left + size <= img.width());
    let mut data = Vec::with_capacity(CHANNELS * size * size);
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for y in top..top + size {
            data.extend_from_slice(&plane[y * img.width() + left..y * img.width() + left + size]);
        }
    }
    Image::new(size, size, data).expect("sizes consistent")
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // exact when a == b
    a + t * (b - a)
}

/// Source sample positions for half-pixel-center resampling: for output
/// index `i` the source coordinate is `(i + 0.5) / scale - 0.5`, clamped to
/// the valid range. Returns `(lower index, upper index, weight)`.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = dst as f64 / src as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) / scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize to `out_h × out_w`.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height() && out_w == img.width() {
        return img.clone();
    }
    let ys = sample_positions(img.height(), out_h);
    let xs = sample_positions(img.width(), out_w);
    let mut data = Vec::with_capacity(CHANNELS * out_h * out_w);
    let w = img.width();
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    Image::new(out_h, out_w, data).expect("sizes consistent")
}

/// `n` random `patch × patch` crops, each resized to `out × out`. Top-left
/// corners are uniform over all valid positions, so crops may overlap.
pub fn extract_patches(img: &Image, n: usize, patch: usize, out: usize, rng: &mut Rng) -> Result<Vec<Image>> {
    if patch == 0 || out == 0 {
        return Err(DataError::Invalid("patch and output sizes must be >= 1".into()));
    }
    if patch > img.height() || patch > img.width() {
        return Err(DataError::PatchTooLarge {
            patch,
            height: img.height(),
            width: img.width(),
        });
    }
    Ok((0..n)
        .map(|_| {
            let top = rng.below(img.height() - patch + 1);
            let left = rng.below(img.width() - patch + 1);
            bilinear_resize(&crop(img, top, left, patch), out, out)
        })
        .collect())
}
