use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{augment_patch, extract_patches, AugmentPolicy, DataError, LabeledDataset, NormStats, Result, Rng, Transform, CHANNELS};
use crate::nn::{Shape, Tensor};

/// Identifies one optimizer step's worth of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl BatchKey {
    /// Substream for patch `patch` of dataset image `image`.
    pub fn patch_rng(&self, image: usize, patch: usize) -> Rng {
        Rng::from_key(self.seed, &[self.epoch, self.step, image as u64, patch as u64])
    }
}

/// `n` crops of `patch` pixels, each resized to `out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub n: usize,
    pub patch: usize,
    pub out: usize,
}

fn assemble(
    ds: &LabeledDataset,
    indices: &[usize],
    geom: PatchGeometry,
    policy: &AugmentPolicy,
    norm: &NormStats,
    key: BatchKey,
) -> Result<Vec<Tensor>> {
    if geom.n == 0 {
        return Err(DataError::Invalid("patch count must be >= 1".into()));
    }
    if indices.is_empty() {
        return Err(DataError::Invalid("batch must contain at least one image".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(DataError::Invalid(format!("index {bad} out of range for {} images", ds.len())));
    }
    let b = indices.len();
    let per = CHANNELS * geom.out * geom.out;
    // (patch, sample) order so each patch tensor is one contiguous chunk
    let views = (0..geom.n * b)
        .into_par_iter()
        .map(|k| {
            let (j, s) = (k / b, k % b);
            let image = indices[s];
            let rng = key.patch_rng(image, j);
            let mut crop_rng = rng.derive(Transform::Crop as u64);
            let crop = extract_patches(&ds.images[image], 1, geom.patch, geom.out, &mut crop_rng)?
                .pop()
                .expect("one crop");
            Ok(augment_patch(&crop, policy, norm, &rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = Shape::Image {
        channels: CHANNELS,
        height: geom.out,
        width: geom.out,
    };
    Ok(views
        .chunks(b)
        .map(|chunk| {
            let mut data = Vec::with_capacity(b * per);
            for v in chunk {
                data.extend_from_slice(v.data());
            }
            Tensor::new(b, shape, data).expect("patch sizes consistent")
        })
        .collect())
}

/// Builds the `n` augmented patch tensors (each `b × 3 × out × out`) for the
/// images at `indices`. Pure in `(ds, indices, geom, policy, norm, key)`.
pub fn make_batch(
    ds: &LabeledDataset,
    indices: &[usize],
    geom: PatchGeometry,
    policy: &AugmentPolicy,
    norm: &NormStats,
    key: BatchKey,
) -> Result<Vec<Tensor>> {
    assemble(ds, indices, geom, policy, norm, key)
}

/// Random crops without photometric augmentation, for evaluation.
pub fn eval_views(
    ds: &LabeledDataset,
    indices: &[usize],
    geom: PatchGeometry,
    norm: &NormStats,
    key: BatchKey,
) -> Result<Vec<Tensor>> {
    assemble(ds, indices, geom, &AugmentPolicy::none(), norm, key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn dataset(count: usize, size: usize) -> LabeledDataset {
        let mut rng = Rng::new(11);
        let images = (0..count)
            .map(|_| {
                let data = (0..CHANNELS * size * size).map(|_| rng.uniform() as f32).collect();
                Image::new(size, size, data).unwrap()
            })
            .collect();
        LabeledDataset::new(images, vec![0; count], 1).unwrap()
    }

    fn key(step: u64) -> BatchKey {
        BatchKey { seed: 5, epoch: 0, step }
    }

    #[test]
    fn shapes() {
        let ds = dataset(4, 16);
        let geom = PatchGeometry { n: 3, patch: 8, out: 12 };
        let out = make_batch(&ds, &[1, 3], geom, &AugmentPolicy::default(), &NormStats::identity(), key(0)).unwrap();
        assert_eq!(out.len(), 3);
        for t in &out {
            assert_eq!(t.batch(), 2);
            assert_eq!(t.shape().dims(), vec![3, 12, 12]);
            assert!(t.is_finite());
        }
    }

    #[test]
    fn same_key_is_deterministic_and_steps_differ() {
        let ds = dataset(4, 16);
        let geom = PatchGeometry { n: 2, patch: 8, out: 8 };
        let p = AugmentPolicy::default();
        let norm = ds.channel_stats();
        let a = make_batch(&ds, &[0, 1, 2], geom, &p, &norm, key(3)).unwrap();
        let b = make_batch(&ds, &[0, 1, 2], geom, &p, &norm, key(3)).unwrap();
        assert_eq!(a, b);
        let c = make_batch(&ds, &[0, 1, 2], geom, &p, &norm, key(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn item_randomness_independent_of_batch_position() {
        let ds = dataset(4, 16);
        let geom = PatchGeometry { n: 2, patch: 8, out: 8 };
        let p = AugmentPolicy::default();
        let norm = NormStats::identity();
        let a = make_batch(&ds, &[2, 0], geom, &p, &norm, key(1)).unwrap();
        let b = make_batch(&ds, &[0, 2], geom, &p, &norm, key(1)).unwrap();
        for j in 0..2 {
            assert_eq!(a[j].sample(0), b[j].sample(1));
            assert_eq!(a[j].sample(1), b[j].sample(0));
        }
    }

    #[test]
    fn disjoint_keys_are_decorrelated() {
        let ds = dataset(1, 16);
        let geom = PatchGeometry { n: 2, patch: 8, out: 8 };
        let p = AugmentPolicy::default();
        let norm = NormStats::identity();
        let draws = 1000;
        let probe = [0usize, 27, 63, 64 + 18, 128 + 45, 191];
        let mut xs = vec![Vec::with_capacity(draws); probe.len()];
        let mut ys = vec![Vec::with_capacity(draws); probe.len()];
        for step in 0..draws as u64 {
            let t = make_batch(&ds, &[0], geom, &p, &norm, key(step)).unwrap();
            for (k, &px) in probe.iter().enumerate() {
                xs[k].push(t[0].data()[px]);
                ys[k].push(t[1].data()[px]);
            }
        }
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
            cov / (va * vb).sqrt()
        };
        let mean_abs: f64 =
            probe.iter().enumerate().map(|(k, _)| corr(&xs[k], &ys[k]).abs()).sum::<f64>() / probe.len() as f64;
        assert!(mean_abs < 0.1, "mean |corr| = {mean_abs}");
    }

    #[test]
    fn eval_views_skip_photometric_transforms() {
        let ds = LabeledDataset::new(vec![Image::filled(16, 16, [0.2, 0.4, 0.6])], vec![0], 1).unwrap();
        let geom = PatchGeometry { n: 4, patch: 8, out: 16 };
        let views = eval_views(&ds, &[0], geom, &NormStats::identity(), key(0)).unwrap();
        for v in views {
            assert!(v.data()[..256].iter().all(|&x| (x - 0.2f32 as f64).abs() < 1e-12));
        }
    }

    #[test]
    fn bad_index_and_oversized_patch() {
        let ds = dataset(2, 16);
        let geom = PatchGeometry { n: 1, patch: 8, out: 8 };
        let norm = NormStats::identity();
        assert!(make_batch(&ds, &[2], geom, &AugmentPolicy::none(), &norm, key(0)).is_err());
        let big = PatchGeometry { patch: 17, ..geom };
        assert!(matches!(
            make_batch(&ds, &[0], big, &AugmentPolicy::none(), &norm, key(0)),
            Err(DataError::PatchTooLarge { .. })
        ));
    }
}
