//! Representation quality: bag-of-features vectors, linear probe, KNN,
//! effective rank, transfer between datasets and embedding export.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{extract_patches, DataError, Image, LabeledDataset, NormStats, PatchView, CHANNELS};
use crate::encoder::{Encoder, EncoderError};
use crate::linalg::{symmetric_eigenvalues, LinalgError, Matrix};
use crate::nn::{Mode, Shape, Tensor};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("effective rank of a zero matrix is undefined")]
    ZeroMatrix,
    #[error("encoder must be in eval mode")]
    NotEvalMode,
    #[error("invalid feature table: {0}")]
    InvalidTable(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub checkpoint: String,
    pub dataset: String,
    pub m_eval: usize,
    pub seed: u64,
}

/// `N × D` feature rows with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    vectors: Matrix,
    labels: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureTable {
    pub fn new(vectors: Matrix, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(EvalError::InvalidTable("table has no rows".into()));
        }
        if vectors.rows() != labels.len() {
            return Err(EvalError::InvalidTable(format!(
                "{} rows but {} labels",
                vectors.rows(),
                labels.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(EvalError::InvalidTable("non-finite feature value".into()));
        }
        Ok(Self {
            vectors,
            labels,
            provenance,
        })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Crop geometry and count for evaluation patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPatches {
    pub m_eval: usize,
    pub patch: usize,
    pub out: usize,
}

fn patches_tensor(crops: &[Image], norm: &NormStats) -> Tensor {
    let out = crops[0].height();
    let mut data = Vec::with_capacity(crops.len() * CHANNELS * out * out);
    for c in crops {
        data.extend_from_slice(PatchView::standardize(c, norm).data());
    }
    let shape = Shape::Image {
        channels: CHANNELS,
        height: out,
        width: out,
    };
    Tensor::new(crops.len(), shape, data).expect("crop sizes consistent")
}

/// Mean embedding over `m_eval` random crops (crop and resize only).
pub fn bag_of_features(enc: &Encoder, img: &Image, geom: EvalPatches, norm: &NormStats, rng: &Rng) -> Result<Vec<f64>> {
    if enc.network().mode() != Mode::Eval {
        return Err(EvalError::NotEvalMode);
    }
    if geom.m_eval == 0 {
        return Err(EvalError::Invalid("m_eval must be >= 1".into()));
    }
    let mut r = rng.clone();
    let crops = extract_patches(img, geom.m_eval, geom.patch, geom.out, &mut r)?;
    let h = enc.embed_h(&patches_tensor(&crops, norm))?;
    Ok((0..h.rows())
        .map(|i| h.row(i).iter().sum::<f64>() / geom.m_eval as f64)
        .collect())
}

/// Bag-of-features for every image. Image `i` uses crop stream
/// `(seed, i)`, so a table is reproducible and independent of thread count.
pub fn extract_features(
    enc: &Encoder,
    ds: &LabeledDataset,
    geom: EvalPatches,
    norm: &NormStats,
    seed: u64,
    provenance: Provenance,
) -> Result<FeatureTable> {
    let mut frozen = enc.clone();
    frozen.network_mut().set_mode(Mode::Eval);
    let rows = (0..ds.len())
        .into_par_iter()
        .map(|i| bag_of_features(&frozen, &ds.images[i], geom, norm, &Rng::from_key(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let dim = frozen.embed_dim();
    let vectors = Matrix::from_vec(rows.len(), dim, rows.into_iter().flatten().collect())?;
    FeatureTable::new(vectors, ds.labels.clone(), provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// z-score features with training-set statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            epochs: 100,
            momentum: 0.9,
            batch_size: 100,
            weight_decay: 0.0,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Softmax regression trained with minibatch SGD.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    weights: Matrix,
    bias: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(train: &FeatureTable, num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(EvalError::Invalid("probe needs batch_size >= 1 and lr > 0".into()));
        }
        let (n, dim) = (train.len(), train.dim());
        let (shift, scale) = if cfg.standardize {
            column_stats(train.vectors())
        } else {
            (vec![0.0; dim], vec![1.0; dim])
        };
        let mut probe = Self {
            weights: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
            shift,
            scale,
        };
        let x: Vec<Vec<f64>> = (0..n).map(|i| probe.transform(train.vectors().row(i))).collect();
        let mut vel_w = vec![0.0; num_classes * dim];
        let mut vel_b = vec![0.0; num_classes];
        let mut rng = Rng::new(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut grad_w = vec![0.0; num_classes * dim];
        let mut grad_b = vec![0.0; num_classes];
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size) {
                grad_w.iter_mut().for_each(|g| *g = 0.0);
                grad_b.iter_mut().for_each(|g| *g = 0.0);
                for &i in chunk {
                    let p = probe.softmax(&x[i]);
                    for (c, pc) in p.iter().enumerate() {
                        let e = pc - if c == train.labels()[i] { 1.0 } else { 0.0 };
                        grad_b[c] += e;
                        for (g, xv) in grad_w[c * dim..(c + 1) * dim].iter_mut().zip(&x[i]) {
                            *g += e * xv;
                        }
                    }
                }
                let inv = 1.0 / chunk.len() as f64;
                let w = probe.weights.as_mut_slice();
                for ((wv, g), v) in w.iter_mut().zip(&grad_w).zip(vel_w.iter_mut()) {
                    *v = cfg.momentum * *v + g * inv + cfg.weight_decay * *wv;
                    *wv -= cfg.lr * *v;
                }
                for ((bv, g), v) in probe.bias.iter_mut().zip(&grad_b).zip(vel_b.iter_mut()) {
                    *v = cfg.momentum * *v + g * inv;
                    *bv -= cfg.lr * *v;
                }
            }
        }
        Ok(probe)
    }

    fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.bias.len())
            .map(|c| self.bias[c] + self.weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        argmax(&self.logits(&self.transform(row)))
    }

    pub fn accuracy(&self, table: &FeatureTable) -> Result<f64> {
        if table.dim() != self.weights.cols() {
            return Err(EvalError::DimensionMismatch {
                expected: self.weights.cols(),
                got: table.dim(),
            });
        }
        let hits = (0..table.len())
            .filter(|&i| self.predict(table.vectors().row(i)) == table.labels()[i])
            .count();
        Ok(hits as f64 / table.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn column_stats(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mut mean = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, v) in mean.iter_mut().zip(m.row(i)) {
            *a += v / n;
        }
    }
    let mut var = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for ((a, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *a += (v - mu) * (v - mu) / n;
        }
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    (mean, std)
}

/// Trains on `train` and reports accuracy on both splits.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    let classes = train.num_classes().max(test.num_classes());
    let probe = LinearProbe::fit(train, classes, cfg)?;
    Ok(ProbeResult {
        train_accuracy: probe.accuracy(train)?,
        test_accuracy: probe.accuracy(test)?,
    })
}

fn unit_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

/// Predicted label from `(label, similarity)` neighbors: majority vote,
/// ties broken by summed similarity, then by the smaller label.
pub fn vote(neighbors: &[(usize, f64)]) -> usize {
    let classes = neighbors.iter().map(|n| n.0 + 1).max().unwrap_or(0);
    let mut count = vec![0usize; classes];
    let mut weight = vec![0.0; classes];
    for &(label, sim) in neighbors {
        count[label] += 1;
        weight[label] += sim;
    }
    let mut best = 0;
    for c in 1..classes {
        if count[c] > count[best] || (count[c] == count[best] && weight[c] > weight[best]) {
            best = c;
        }
    }
    best
}

/// Cosine-similarity k-nearest-neighbor accuracy. Neighbors with equal
/// similarity are ranked by training index.
pub fn knn_eval(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: train.dim(),
            got: test.dim(),
        });
    }
    if k == 0 || k > train.len() {
        return Err(EvalError::Invalid(format!("k must be in 1..={}, got {k}", train.len())));
    }
    let tr = unit_rows(train.vectors());
    let te = unit_rows(test.vectors());
    let hits: usize = te
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut sims: Vec<(f64, usize)> = tr
                .iter()
                .enumerate()
                .map(|(j, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let nb: Vec<(usize, f64)> = sims[..k].iter().map(|&(s, j)| (train.labels()[j], s)).collect();
            usize::from(vote(&nb) == test.labels()[i])
        })
        .sum();
    Ok(hits as f64 / test.len() as f64)
}

/// `exp(H(p))` where `p` is the L1-normalized singular-value vector of `z`.
pub fn effective_rank(z: &Matrix) -> Result<f64> {
    let gram = if z.rows() <= z.cols() { z.gram_rows() } else { z.gram_cols() };
    let sigma: Vec<f64> = symmetric_eigenvalues(&gram)?
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(EvalError::ZeroMatrix);
    }
    let entropy: f64 = sigma
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Train/test pair of one dataset.
#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub name: String,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub in_domain: f64,
    pub out_of_domain: f64,
}

/// Probes the frozen encoder on the source and on the target dataset.
pub fn transfer_eval(
    enc: &Encoder,
    source: &Split,
    target: &Split,
    geom: EvalPatches,
    norm: &NormStats,
    seed: u64,
    probe: &ProbeConfig,
) -> Result<TransferResult> {
    let acc = |s: &Split| -> Result<f64> {
        let prov = |split: &str| Provenance {
            dataset: format!("{}/{split}", s.name),
            m_eval: geom.m_eval,
            seed,
            ..Default::default()
        };
        let train = extract_features(enc, s.train, geom, norm, seed, prov("train"))?;
        let test = extract_features(enc, s.test, geom, norm, seed ^ 0x7e57, prov("test"))?;
        Ok(linear_probe(&train, &test, probe)?.test_accuracy)
    };
    Ok(TransferResult {
        in_domain: acc(source)?,
        out_of_domain: acc(target)?,
    })
}

/// Result record written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub checkpoint: String,
    pub protocol: String,
    pub accuracy: f64,
    pub k_or_probe_params: serde_json::Value,
    pub seed: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// CSV with header `label,f0,..,f{D-1}`; values in 9 significant digits.
pub fn export_embeddings(table: &FeatureTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("label");
    for j in 0..table.dim() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}").map_err(io_err(path))?;
    for i in 0..table.len() {
        let mut line = table.labels()[i].to_string();
        for v in table.vectors().row(i) {
            line.push_str(&format!(",{v:.8e}"));
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_embeddings(path: &Path) -> Result<FeatureTable> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, msg: String| EvalError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(io_err(path))?;
    let dim = header.split(',').count() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(idx + 2, format!("expected {} fields, got {}", dim + 1, fields.len())));
        }
        labels.push(fields[0].parse().map_err(|e| parse_err(idx + 2, format!("label: {e}")))?);
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|e| parse_err(idx + 2, format!("value: {e}")))?);
        }
    }
    FeatureTable::new(Matrix::from_vec(labels.len(), dim, data)?, labels, Provenance::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn table(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureTable {
        FeatureTable::new(Matrix::from_rows(&rows).unwrap(), labels, Provenance::default()).unwrap()
    }

    fn eval_encoder() -> Encoder {
        let mut enc = Encoder::build(&EncoderConfig::toy(), 16, 2).unwrap();
        enc.network_mut().set_mode(Mode::Eval);
        enc
    }

    fn noise_image(size: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(size, size, (0..CHANNELS * size * size).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&Matrix::identity(6)).unwrap() - 6.0).abs() < 1e-12);
        let col = [0.3, -1.2, 0.5];
        let rank1 = Matrix::from_fn(3, 7, |i, _| col[i]);
        assert!((effective_rank(&rank1).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(effective_rank(&Matrix::zeros(3, 4)), Err(EvalError::ZeroMatrix)));
    }

    #[test]
    fn effective_rank_bounds_on_random_inputs() {
        let mut rng = Rng::new(4);
        for (d, b) in [(4, 9), (9, 4), (5, 5), (16, 3)] {
            let z = Matrix::from_fn(d, b, |_, _| rng.normal());
            let r = effective_rank(&z).unwrap();
            assert!((1.0..=d.min(b) as f64 + 1e-9).contains(&r), "{r}");
        }
    }

    #[test]
    fn bag_of_one_patch_is_that_patch() {
        let enc = eval_encoder();
        let img = noise_image(16, 1);
        let geom = EvalPatches { m_eval: 1, patch: 8, out: 16 };
        let norm = NormStats::identity();
        let rng = Rng::new(3);
        let v = bag_of_features(&enc, &img, geom, &norm, &rng).unwrap();
        let crop = extract_patches(&img, 1, 8, 16, &mut rng.clone()).unwrap();
        let h = enc.embed_h(&patches_tensor(&crop, &norm)).unwrap();
        assert_eq!(v, h.column(0));
    }

    #[test]
    fn bag_of_constant_image_equals_single_patch() {
        let enc = eval_encoder();
        let img = Image::filled(16, 16, [0.1, 0.5, 0.9]);
        let norm = NormStats::cifar10();
        let one = bag_of_features(&enc, &img, EvalPatches { m_eval: 1, patch: 8, out: 16 }, &norm, &Rng::new(0)).unwrap();
        let many = bag_of_features(&enc, &img, EvalPatches { m_eval: 12, patch: 8, out: 16 }, &norm, &Rng::new(5)).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bag_is_mean_of_individual_embeddings_in_any_order() {
        let img = noise_image(16, 8);
        let norm = NormStats::identity();
        let geom = EvalPatches { m_eval: 128, patch: 8, out: 8 };
        let rng = Rng::new(6);
        let mut enc8 = Encoder::build(&EncoderConfig::toy(), 8, 2).unwrap();
        enc8.network_mut().set_mode(Mode::Eval);
        let bag = bag_of_features(&enc8, &img, geom, &norm, &rng).unwrap();
        let mut crops = extract_patches(&img, 128, 8, 8, &mut rng.clone()).unwrap();
        crops.reverse();
        let mut mean = vec![0.0; enc8.embed_dim()];
        for c in &crops {
            let h = enc8.embed_h(&patches_tensor(std::slice::from_ref(c), &norm)).unwrap();
            for (m, v) in mean.iter_mut().zip(h.column(0)) {
                *m += v / 128.0;
            }
        }
        for (a, b) in bag.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            bag_of_features(&Encoder::build(&EncoderConfig::toy(), 16, 2).unwrap(), &img, geom, &norm, &rng),
            Err(EvalError::NotEvalMode)
        ));
    }

    #[test]
    fn knn_self_match_and_one_hot() {
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let t = table(rows, labels);
        assert_eq!(knn_eval(&t, &t, 1).unwrap(), 1.0);
        let rows: Vec<Vec<f64>> = (0..12).map(|i| (0..3).map(|c| f64::from(u8::from(c == i % 3))).collect()).collect();
        let t = table(rows, (0..12).map(|i| i % 3).collect());
        for k in 1..=4 {
            assert_eq!(knn_eval(&t, &t, k).unwrap(), 1.0);
        }
        assert!(knn_eval(&t, &t, 13).is_err());
    }

    #[test]
    fn vote_tie_breaks_on_similarity() {
        assert_eq!(vote(&[(0, 0.9), (1, 0.5), (1, 0.45)]), 1);
        assert_eq!(vote(&[(0, 0.9), (1, 0.95)]), 1);
        assert_eq!(vote(&[(2, 0.9), (0, 0.1), (2, 0.1), (0, 0.95)]), 0);
    }

    #[test]
    fn probe_separable_and_memorization() {
        let mut rng = Rng::new(2);
        let mk = |rng: &mut Rng, n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let c = i % 2;
                let sign = if c == 0 { -1.0 } else { 1.0 };
                rows.push(vec![sign * (1.0 + rng.uniform()), rng.normal()]);
                labels.push(c);
            }
            table(rows, labels)
        };
        let (train, test) = (mk(&mut rng, 200), mk(&mut rng, 200));
        let r = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!(r.test_accuracy >= 0.99, "{r:?}");
        let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.1 }).collect()).collect();
        let t = table(rows, (0..6).collect());
        let r = linear_probe(&t, &t, &ProbeConfig { batch_size: 6, ..Default::default() }).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn probe_dimension_mismatch() {
        let a = table(vec![vec![1.0, 2.0]], vec![0]);
        let b = table(vec![vec![1.0, 2.0, 3.0]], vec![0]);
        assert!(matches!(linear_probe(&a, &b, &ProbeConfig::default()), Err(EvalError::DimensionMismatch { .. })));
    }

    #[test]
    fn embeddings_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let t = table(vec![vec![0.123456789012, -3.0e-7]], vec![4]);
        export_embeddings(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("label,f0,f1"));
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 3);
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.labels(), &[4]);
        for (a, b) in back.vectors().as_slice().iter().zip(t.vectors().as_slice()) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1e-9));
        }
    }
}
