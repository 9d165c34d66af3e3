//! Multi-patch training loop.
//!
//! Each step draws `n` augmented patch tensors for one minibatch, runs them
//! through the shared encoder, evaluates the objective on the `n` projection
//! matrices, accumulates parameter gradients over all patches and applies a
//! single LARS update under a cosine learning-rate schedule.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batch, AugmentPolicy, BatchKey, DataError, LabeledDataset, NormStats, PatchGeometry};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::eval::{effective_rank, EvalError};
use crate::linalg::Matrix;
use crate::losses::{emp_objective, LossError, PatchProjections, TcrParams};
use crate::nn::{
    grad_check_with, CheckpointError, ForwardCache, ForwardOptions, GradCheckOptions, GradCheckReport, Network, NnError,
    ParamGrads, Precision, Tensor,
};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("network error: {0}")]
    Nn(NnError),
    #[error("non-finite {what} at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFinite {
        what: String,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}

impl TrainError {
    /// True when the run aborted on a non-finite value.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Nn(NnError::NonFiniteActivation { .. })
                | TrainError::Encoder(EncoderError::Nn(NnError::NonFiniteActivation { .. }))
                | TrainError::Loss(LossError::NonFinite)
        )
    }
}

/// `0.5 · lr0 · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LarsConfig {
    pub eta: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            eta: 0.005,
            weight_decay: 1e-4,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LarsState {
    pub velocity: Vec<Vec<f64>>,
    pub step: u64,
}

impl LarsState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: net.params().map(|p| vec![0.0; p.data.len()]).collect(),
            step: 0,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One LARS update. Weight blocks get weight decay and the trust ratio
/// `eta·‖w‖/‖g‖`; biases and batchnorm parameters use ratio 1 and no decay.
/// On a non-finite result the network is left unchanged.
pub fn lars_step(net: &mut Network, grads: &ParamGrads, state: &mut LarsState, lr: f64, cfg: &LarsConfig) -> Result<()> {
    let step = state.step as usize;
    let non_finite = |what: &str| TrainError::NonFinite {
        what: what.to_string(),
        step,
        last_checkpoint: None,
    };
    if !grads.is_finite() {
        return Err(non_finite("gradient"));
    }
    let mut updates = Vec::with_capacity(grads.blocks.len());
    for ((p, g), v) in net.params().zip(&grads.blocks).zip(&state.velocity) {
        let decayed: Vec<f64> = if p.role.is_weight() {
            g.iter().zip(&p.data).map(|(g, w)| g + cfg.weight_decay * w).collect()
        } else {
            g.clone()
        };
        let tau = if p.role.is_weight() {
            let (wn, gn) = (norm(&p.data), norm(&decayed));
            if wn > 0.0 && gn > 0.0 {
                cfg.eta * wn / gn
            } else {
                1.0
            }
        } else {
            1.0
        };
        let nv: Vec<f64> = v
            .iter()
            .zip(&decayed)
            .map(|(v, g)| cfg.momentum * v + lr * tau * g)
            .collect();
        let nw: Vec<f64> = p.data.iter().zip(&nv).map(|(w, v)| w - v).collect();
        if !nw.iter().all(|x| x.is_finite()) {
            return Err(non_finite("parameter update"));
        }
        updates.push((nw, nv));
    }
    for ((p, v), (nw, nv)) in net.params_mut().zip(state.velocity.iter_mut()).zip(updates) {
        p.data = nw;
        *v = nv;
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_patches: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed iteration count; overrides `epochs` for the schedule length.
    pub steps: Option<usize>,
    pub lr0: f64,
    pub lars: LarsConfig,
    pub loss: TcrParams,
    /// Crop side in source pixels.
    pub patch_size: usize,
    /// Side after resizing; the encoder input size.
    pub out_size: usize,
    pub augment: AugmentPolicy,
    /// Overrides the encoder's precision when set.
    pub precision: Option<Precision>,
    pub seed: u64,
    pub deterministic: bool,
    /// Keep forward caches for all patches when they fit in this many MiB;
    /// otherwise recompute each patch's forward pass during backward.
    pub cache_budget_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_patches: 200,
            batch_size: 100,
            epochs: 1,
            steps: None,
            lr0: 0.3,
            lars: LarsConfig::default(),
            loss: TcrParams::default(),
            patch_size: 16,
            out_size: 32,
            augment: AugmentPolicy::default(),
            precision: None,
            seed: 0,
            deterministic: false,
            cache_budget_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_patches < 2 {
            return Err(format!("n_patches must be >= 2, got {}", self.n_patches));
        }
        if self.batch_size < 2 {
            return Err(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err("epochs must be >= 1".into());
        }
        if self.steps == Some(0) {
            return Err("steps must be >= 1".into());
        }
        if self.patch_size == 0 || self.out_size == 0 {
            return Err("patch_size and out_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.lars.momentum) || self.lars.eta <= 0.0 || self.lars.weight_decay < 0.0 {
            return Err("lars needs eta > 0, weight_decay >= 0, momentum in [0, 1)".into());
        }
        self.loss.validate().map_err(|e| e.to_string())?;
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps
            .unwrap_or(self.epochs * self.steps_per_epoch(dataset_len))
    }
}

pub const METRICS_HEADER: &str = "step,epoch,lr,tcr_term,invariance_term,total_loss,effective_rank,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub tcr_term: f64,
    pub invariance_term: f64,
    pub total_loss: f64,
    pub effective_rank: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.tcr_term,
            self.invariance_term,
            self.total_loss,
            self.effective_rank,
            self.wall_ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            lr: f[2].parse().ok()?,
            tcr_term: f[3].parse().ok()?,
            invariance_term: f[4].parse().ok()?,
            total_loss: f[5].parse().ok()?,
            effective_rank: f[6].parse().ok()?,
            wall_ms: f[7].parse().ok()?,
        })
    }
}

/// Everything produced by one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: MetricsRecord,
    /// The `n` projection matrices the loss was evaluated on.
    pub projections: Vec<Matrix>,
}

/// Training state over a borrowed dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    encoder: Encoder,
    lars: LarsState,
    ds: &'a LabeledDataset,
    norm: NormStats,
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
    order: Vec<usize>,
    order_epoch: Option<usize>,
}

const PERMUTATION_TAG: u64 = u64::MAX;

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, enc_cfg: &EncoderConfig, ds: &'a LabeledDataset, norm: NormStats) -> Result<Self> {
        cfg.validate().map_err(TrainError::Config)?;
        if ds.is_empty() {
            return Err(TrainError::Config("dataset is empty".into()));
        }
        if cfg.batch_size > ds.len() {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds dataset size {}",
                cfg.batch_size,
                ds.len()
            )));
        }
        let mut enc_cfg = enc_cfg.clone();
        if let Some(p) = cfg.precision {
            enc_cfg.precision = p;
        }
        let encoder = Encoder::build(&enc_cfg, cfg.out_size, cfg.seed)?;
        Ok(Self {
            lars: LarsState::new(encoder.network()),
            encoder,
            cfg: cfg.clone(),
            ds,
            norm,
            step: 0,
            total_steps: cfg.total_steps(ds.len()),
            steps_per_epoch: cfg.steps_per_epoch(ds.len()),
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Dataset indices for a step. Each epoch is a seeded permutation; a
    /// short final batch is topped up from the start of the permutation.
    fn batch_indices(&mut self, epoch: usize, within: usize) -> Vec<usize> {
        if self.order_epoch != Some(epoch) {
            self.order = (0..self.ds.len()).collect();
            Rng::from_key(self.cfg.seed, &[epoch as u64, PERMUTATION_TAG]).shuffle(&mut self.order);
            self.order_epoch = Some(epoch);
        }
        let n = self.order.len();
        (0..self.cfg.batch_size)
            .map(|k| self.order[(within * self.cfg.batch_size + k) % n])
            .collect()
    }

    fn non_finite(&self, what: &str) -> TrainError {
        TrainError::NonFinite {
            what: what.into(),
            step: self.step,
            last_checkpoint: None,
        }
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepOutput> {
        let started = Instant::now();
        let epoch = self.step / self.steps_per_epoch;
        let within = self.step % self.steps_per_epoch;
        let indices = self.batch_indices(epoch, within);
        let geom = PatchGeometry {
            n: self.cfg.n_patches,
            patch: self.cfg.patch_size,
            out: self.cfg.out_size,
        };
        let key = BatchKey {
            seed: self.cfg.seed,
            epoch: epoch as u64,
            step: within as u64,
        };
        let patches = make_batch(self.ds, &indices, geom, &self.cfg.augment, &self.norm, key)?;

        // First pass: projections, batchnorm statistics, and caches while
        // they fit in the budget.
        let budget = self.cfg.cache_budget_mb * (1 << 20) / std::mem::size_of::<f64>();
        let mut caches: Vec<ForwardCache> = Vec::new();
        let mut cached_values = 0usize;
        let mut keep_caches = true;
        let mut zs = Vec::with_capacity(patches.len());
        for x in &patches {
            let (z, cache) = self.encoder.forward_train(x, true).map_err(|e| self.map_forward(e))?;
            if keep_caches {
                cached_values += cache.num_values();
                if cached_values * patches.len() / (caches.len() + 1) > budget {
                    keep_caches = false;
                    caches.clear();
                } else {
                    caches.push(cache);
                }
            }
            zs.push(z);
        }

        let projections = PatchProjections::from_matrices(zs.clone())?;
        let loss = emp_objective(&projections, &self.cfg.loss)?;
        if !loss.loss.is_finite() {
            return Err(self.non_finite("loss"));
        }

        let mut grads = ParamGrads::zeros_like(self.encoder.network());
        for (j, (x, gz)) in patches.iter().zip(&loss.grads).enumerate() {
            let g = Tensor::from_columns(gz);
            if keep_caches {
                self.encoder.network().backward_accumulate(&caches[j], &g, &mut grads)?;
            } else {
                // Train-mode outputs do not depend on running statistics, so
                // this replays the first pass exactly.
                let (_, cache) = self.encoder.forward_train(x, false).map_err(|e| self.map_forward(e))?;
                self.encoder.network().backward_accumulate(&cache, &g, &mut grads)?;
            }
        }
        drop(caches);

        let lr = cosine_lr(self.step, self.total_steps, self.cfg.lr0);
        lars_step(self.encoder.network_mut(), &grads, &mut self.lars, lr, &self.cfg.lars).map_err(|e| match e {
            TrainError::NonFinite { what, .. } => self.non_finite(&what),
            other => other,
        })?;

        let rank = effective_rank(&projections.concatenated())?;
        let record = MetricsRecord {
            step: self.step,
            epoch,
            lr,
            tcr_term: loss.tcr_term,
            invariance_term: loss.invariance_term,
            total_loss: loss.loss,
            effective_rank: rank,
            wall_ms: if self.cfg.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        self.step += 1;
        Ok(StepOutput { record, projections: zs })
    }

    fn map_forward(&self, e: EncoderError) -> TrainError {
        match e {
            EncoderError::Nn(NnError::NonFiniteActivation { layer }) => {
                self.non_finite(&format!("activation at layer {layer}"))
            }
            other => other.into(),
        }
    }
}

/// Where and what to persist during [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run directory for `metrics.csv` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    /// Text written next to each checkpoint (the resolved run config).
    pub sidecar: Option<String>,
    /// Keep every step's projection matrices in memory.
    pub record_projections: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub projections: Vec<Vec<Matrix>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_checkpoint(dir: &Path, stem: &str, enc: &Encoder, sidecar: Option<&str>) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.emps"));
    enc.network().save_checkpoint(&path)?;
    if let Some(text) = sidecar {
        let side = dir.join(format!("{stem}.toml"));
        std::fs::write(&side, text).map_err(io_err(&side))?;
    }
    Ok(path)
}

/// Full training run. Checkpoints are written after the last step of each
/// epoch and at the end; on a non-finite abort the files already on disk are
/// left as they are and the error names the last one.
pub fn train(
    cfg: &TrainConfig,
    ds: &LabeledDataset,
    enc_cfg: &EncoderConfig,
    norm: NormStats,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, enc_cfg, ds, norm)?;
    let mut metrics_file = None;
    let mut ckpt_dir = None;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let cdir = dir.join("checkpoints");
        std::fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        ckpt_dir = Some(cdir);
        let path = dir.join("metrics.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(io_err(&path))?);
        writeln!(f, "{METRICS_HEADER}").map_err(io_err(&path))?;
        metrics_file = Some((f, path));
    }
    let mut metrics = Vec::new();
    let mut checkpoints: Vec<PathBuf> = Vec::new();
    let mut projections = Vec::new();
    while !trainer.is_done() {
        let out = trainer.step().map_err(|e| match e {
            TrainError::NonFinite { what, step, .. } => TrainError::NonFinite {
                what,
                step,
                last_checkpoint: checkpoints.last().cloned(),
            },
            other => other,
        })?;
        if let Some((f, path)) = &mut metrics_file {
            writeln!(f, "{}", out.record.csv_row()).map_err(io_err(path))?;
            f.flush().map_err(io_err(path))?;
        }
        if opts.record_projections {
            projections.push(out.projections);
        }
        metrics.push(out.record);
        let done = trainer.step_index();
        if let Some(dir) = &ckpt_dir {
            if done % trainer.steps_per_epoch() == 0 {
                let stem = format!("epoch_{:04}", done / trainer.steps_per_epoch());
                checkpoints.push(write_checkpoint(dir, &stem, trainer.encoder(), opts.sidecar.as_deref())?);
            }
            if trainer.is_done() {
                checkpoints.push(write_checkpoint(dir, "final", trainer.encoder(), opts.sidecar.as_deref())?);
            }
        }
    }
    Ok(TrainOutcome {
        encoder: trainer.into_encoder(),
        metrics,
        checkpoints,
        projections,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub n_patches: usize,
    pub batch_size: usize,
    /// Input side in pixels.
    pub size: usize,
    /// Entries sampled per parameter block; `None` checks all of them.
    pub max_per_block: Option<usize>,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n_patches: 3,
            batch_size: 4,
            size: 16,
            max_per_block: Some(24),
            // at 1e-5 some first-layer perturbations move desk-encoder
            // pre-activations across a relu kink
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Checks the encoder's parameter gradients of the full multi-patch
/// objective against central differences, in double precision, on random
/// inputs. Batchnorm uses batch statistics, as in training.
pub fn emp_grad_check(enc_cfg: &EncoderConfig, loss: &TcrParams, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.n_patches < 2 || cfg.batch_size < 2 {
        return Err(TrainError::Config("gradcheck needs n_patches >= 2 and batch_size >= 2".into()));
    }
    let mut enc_cfg = enc_cfg.clone();
    enc_cfg.precision = Precision::Double;
    let mut enc = Encoder::build(&enc_cfg, cfg.size, cfg.seed)?;
    let mut rng = Rng::from_key(cfg.seed, &[PERMUTATION_TAG - 1]);
    let shape = enc.network().input_shape();
    let inputs: Vec<Tensor> = (0..cfg.n_patches)
        .map(|_| {
            let data = (0..cfg.batch_size * shape.numel()).map(|_| rng.normal()).collect();
            Tensor::new(cfg.batch_size, shape, data)
        })
        .collect::<std::result::Result<_, _>>()?;
    let with_cache = ForwardOptions {
        cache: true,
        ..Default::default()
    };
    let net = enc.network();
    let mut zs = Vec::new();
    let mut caches = Vec::new();
    for x in &inputs {
        let out = net.infer_with(x, with_cache)?;
        zs.push(out.output.to_columns());
        caches.push(out.cache.expect("cache requested"));
    }
    let objective = emp_objective(&PatchProjections::from_matrices(zs)?, loss)?;
    let mut analytic = ParamGrads::zeros_like(net);
    for (cache, g) in caches.iter().zip(&objective.grads) {
        net.backward_accumulate(cache, &Tensor::from_columns(g), &mut analytic)?;
    }
    let opts = GradCheckOptions {
        step: cfg.step,
        max_per_block: cfg.max_per_block,
        seed: cfg.seed,
    };
    let report = grad_check_with(
        enc.network_mut(),
        &analytic,
        |n| {
            let zs = inputs
                .iter()
                .map(|x| Ok(n.infer(x)?.to_columns()))
                .collect::<std::result::Result<Vec<_>, NnError>>()?;
            let projections = PatchProjections::from_matrices(zs)
                .map_err(|e| NnError::InvalidSpec(format!("objective: {e}")))?;
            emp_objective(&projections, loss)
                .map(|l| l.loss)
                .map_err(|e| NnError::InvalidSpec(format!("objective: {e}")))
        },
        &opts,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::nn::{LayerSpec, Shape};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=10).map(|s| cosine_lr(s, 10, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn scalar_net(w: f64) -> Network {
        let mut net = Network::new(Shape::Flat(1), &[LayerSpec::Linear { out_dim: 1 }], 0).unwrap();
        net.params_mut().next().unwrap().data = vec![w];
        net
    }

    #[test]
    fn lars_scalar_example() {
        let mut net = scalar_net(2.0);
        let grads = ParamGrads {
            blocks: vec![vec![1.0], vec![0.0]],
        };
        let mut state = LarsState::new(&net);
        let cfg = LarsConfig {
            eta: 0.005,
            weight_decay: 0.0,
            momentum: 0.0,
        };
        lars_step(&mut net, &grads, &mut state, 1.0, &cfg).unwrap();
        assert!((net.params().next().unwrap().data[0] - 1.99).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn lars_zero_gradient_is_no_op() {
        let mut net = scalar_net(0.7);
        let before = net.params().map(|p| p.data.clone()).collect::<Vec<_>>();
        let grads = ParamGrads::zeros_like(&net);
        let mut state = LarsState::new(&net);
        let cfg = LarsConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..Default::default()
        };
        lars_step(&mut net, &grads, &mut state, 0.3, &cfg).unwrap();
        assert_eq!(net.params().map(|p| p.data.clone()).collect::<Vec<_>>(), before);
    }

    #[test]
    fn lars_update_scales_with_block() {
        let cfg = LarsConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut rng = Rng::new(3);
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let update = |c: f64| {
            let mut net = Network::new(Shape::Flat(3), &[LayerSpec::Linear { out_dim: 2 }], 0).unwrap();
            net.params_mut().next().unwrap().data = w.iter().map(|v| v * c).collect();
            let grads = ParamGrads {
                blocks: vec![g.iter().map(|v| v * c).collect(), vec![0.0; 2]],
            };
            let mut state = LarsState::new(&net);
            lars_step(&mut net, &grads, &mut state, 0.3, &cfg).unwrap();
            let after = &net.params().next().unwrap().data;
            after.iter().zip(&w).map(|(a, b)| b * c - a).collect::<Vec<_>>()
        };
        let (u1, u3) = (update(1.0), update(3.0));
        for (a, b) in u1.iter().zip(&u3) {
            assert!((3.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lars_rejects_non_finite() {
        let mut net = scalar_net(1.0);
        let grads = ParamGrads {
            blocks: vec![vec![f64::NAN], vec![0.0]],
        };
        let mut state = LarsState::new(&net);
        let err = lars_step(&mut net, &grads, &mut state, 1.0, &LarsConfig::default()).unwrap_err();
        assert!(err.is_non_finite());
        assert_eq!(net.params().next().unwrap().data, vec![1.0]);
    }

    #[test]
    fn bias_and_batchnorm_skip_trust_ratio_and_decay() {
        let mut net = Network::new(Shape::Flat(2), &[LayerSpec::Linear { out_dim: 2 }, LayerSpec::BatchNorm], 0).unwrap();
        let grads = ParamGrads {
            blocks: vec![vec![0.0; 4], vec![1.0, -1.0], vec![0.5, 0.5], vec![2.0, 0.0]],
        };
        let mut state = LarsState::new(&net);
        let cfg = LarsConfig {
            momentum: 0.0,
            ..Default::default()
        };
        lars_step(&mut net, &grads, &mut state, 0.1, &cfg).unwrap();
        let p: Vec<_> = net.params().map(|p| p.data.clone()).collect();
        assert_eq!(p[1], vec![-0.1, 0.1]);
        assert_eq!(p[2], vec![0.95, 0.95]);
        assert_eq!(p[3], vec![-0.2, 0.0]);
    }

    fn tiny_setup() -> (LabeledDataset, TrainConfig) {
        let ds = gen_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 3,
            size: 16,
            seed: 1,
        })
        .unwrap();
        let cfg = TrainConfig {
            n_patches: 2,
            batch_size: 2,
            steps: Some(3),
            patch_size: 8,
            out_size: 8,
            seed: 4,
            deterministic: true,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn cached_and_recomputed_backward_agree_bitwise() {
        let (ds, cfg) = tiny_setup();
        let norm = ds.channel_stats();
        let a = train(&cfg, &ds, &EncoderConfig::toy(), norm, &TrainOptions::default()).unwrap();
        let low = TrainConfig {
            cache_budget_mb: 0,
            ..cfg
        };
        let b = train(&low, &ds, &EncoderConfig::toy(), norm, &TrainOptions::default()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.encoder.network().checkpoint_bytes(), b.encoder.network().checkpoint_bytes());
    }

    #[test]
    fn schedule_length_and_partial_batches() {
        let (ds, mut cfg) = tiny_setup();
        cfg.steps = None;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        assert_eq!(cfg.total_steps(ds.len()), 4);
        let out = train(&cfg, &ds, &EncoderConfig::toy(), ds.channel_stats(), &TrainOptions::default()).unwrap();
        let epochs: Vec<usize> = out.metrics.iter().map(|m| m.epoch).collect();
        assert_eq!(epochs, vec![0, 0, 1, 1]);
        assert_eq!(out.metrics[0].lr, 0.3);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            n_patches: 1,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().contains("n_patches"));
        let bad = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().contains("batch_size"));
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn toy_encoder_passes_emp_grad_check() {
        let cfg = GradCheckConfig {
            size: 8,
            max_per_block: Some(6),
            ..Default::default()
        };
        let report = emp_grad_check(&EncoderConfig::toy(), &TcrParams::default(), &cfg).unwrap();
        assert_eq!(report.blocks.len(), 12);
        assert!(report.max_rel_error() <= 1e-4, "{}", report.render());
    }

    #[test]
    fn metrics_row_roundtrip() {
        let r = MetricsRecord {
            step: 3,
            epoch: 1,
            lr: 0.1234,
            tcr_term: 5.5,
            invariance_term: 0.25,
            total_loss: -55.5,
            effective_rank: 7.125,
            wall_ms: 12,
        };
        assert_eq!(MetricsRecord::parse_csv_row(&r.csv_row()), Some(r));
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }
}
