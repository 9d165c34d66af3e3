//! Layered forward/backward engine over a fixed set of operations.
//!
//! A [`Network`] is an ordered stack of [`LayerSpec`]s. `forward` optionally
//! records a [`ForwardCache`], and `backward` turns an output gradient into
//! the input gradient plus one gradient block per parameter.

mod checkpoint;
mod gradcheck;
mod layers;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_tensors, encode_tensors, CheckpointError, NamedTensor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, grad_check_with, rel_error, BlockError, GradCheckOptions, GradCheckReport};
pub use tensor::{Shape, Tensor};

use layers::{ConvGeom, BN_EPS, BN_MOMENTUM};

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One operation in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { out_dim: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    BatchNorm,
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    L2Normalize,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::L2Normalize => "l2_normalize",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::InvalidSpec(format!("{}: {m}", self.name())));
        match *self {
            LayerSpec::Linear { out_dim } if out_dim == 0 => bad("out_dim must be >= 1"),
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
            } if out_channels == 0 || kernel == 0 || stride == 0 => {
                bad("out_channels, kernel and stride must be >= 1")
            }
            LayerSpec::MaxPool { kernel, stride } if kernel == 0 || stride == 0 => {
                bad("kernel and stride must be >= 1")
            }
            _ => Ok(()),
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        let need_image = || NnError::ShapeMismatch {
            expected: format!("image input for {}", self.name()),
            got: format!("{input:?}"),
        };
        match (*self, input) {
            (LayerSpec::Linear { out_dim }, Shape::Flat(_)) => Ok(Shape::Flat(out_dim)),
            (LayerSpec::Linear { .. }, _) => Err(NnError::ShapeMismatch {
                expected: "flat input for linear".into(),
                got: format!("{input:?}"),
            }),
            (
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                },
                Shape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                let g = ConvGeom::new(channels, height, width, out_channels, kernel, stride)
                    .ok_or_else(|| NnError::ShapeMismatch {
                        expected: format!("spatial size >= kernel {kernel}"),
                        got: format!("{height}x{width}"),
                    })?;
                Ok(Shape::Image {
                    channels: out_channels,
                    height: g.out_h,
                    width: g.out_w,
                })
            }
            (
                LayerSpec::MaxPool { kernel, stride },
                Shape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                if height < kernel || width < kernel {
                    return Err(NnError::ShapeMismatch {
                        expected: format!("spatial size >= pool kernel {kernel}"),
                        got: format!("{height}x{width}"),
                    });
                }
                Ok(Shape::Image {
                    channels,
                    height: (height - kernel) / stride + 1,
                    width: (width - kernel) / stride + 1,
                })
            }
            (LayerSpec::GlobalAvgPool, Shape::Image { channels, .. }) => Ok(Shape::Flat(channels)),
            (LayerSpec::Conv2d { .. } | LayerSpec::MaxPool { .. } | LayerSpec::GlobalAvgPool, _) => {
                Err(need_image())
            }
            (LayerSpec::L2Normalize, Shape::Flat(n)) => Ok(Shape::Flat(n)),
            (LayerSpec::L2Normalize, _) => Err(NnError::ShapeMismatch {
                expected: "flat input for l2_normalize".into(),
                got: format!("{input:?}"),
            }),
            (LayerSpec::BatchNorm | LayerSpec::Relu, s) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamRole {
    /// Weights get weight decay and trust-ratio scaling; biases and
    /// batchnorm affine parameters do not.
    pub fn is_weight(&self) -> bool {
        matches!(self, ParamRole::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    input_shape: Shape,
    output_shape: Shape,
    params: Vec<Param>,
    running: Option<RunningStats>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }
}

#[derive(Debug, Clone)]
enum CacheEntry {
    Linear { input: Vec<f64> },
    Conv { input: Vec<f64> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { output: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool,
    L2Normalize { output: Vec<f64>, norms: Vec<f64> },
}

/// Saved activations from one forward pass, one entry per layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    batch: usize,
    entries: Vec<CacheEntry>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of stored scalars, for memory budgeting.
    pub fn num_values(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                CacheEntry::Linear { input } | CacheEntry::Conv { input } => input.len(),
                CacheEntry::BatchNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
                CacheEntry::Relu { output } => output.len(),
                CacheEntry::MaxPool { argmax } => argmax.len(),
                CacheEntry::GlobalAvgPool => 0,
                CacheEntry::L2Normalize { output, norms } => output.len() + norms.len(),
            })
            .sum()
    }
}

/// Parameter gradients, one block per [`Param`] in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            blocks: net.params().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamGrads) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .zip(other.blocks.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record a cache for `backward`.
    pub cache: bool,
    /// Fold batch statistics into batchnorm running statistics (train mode).
    pub update_running_stats: bool,
    /// Also return the activation after this layer index.
    pub tap: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub cache: Option<ForwardCache>,
    pub tapped: Option<Tensor>,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, PartialEq)]
pub struct Network {
    id: u64,
    version: u64,
    input_shape: Shape,
    layers: Vec<Layer>,
    mode: Mode,
    precision: Precision,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            version: self.version,
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            mode: self.mode,
            precision: self.precision,
        }
    }
}

impl Network {
    /// Builds and initializes a network. Conv/linear weights are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases are zero, batchnorm scale
    /// is one and shift zero.
    pub fn new(input_shape: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        for (idx, spec) in specs.iter().enumerate() {
            let out = spec.output_shape(shape).map_err(|e| match e {
                NnError::ShapeMismatch { expected, got } => NnError::ShapeMismatch {
                    expected: format!("layer {idx}: {expected}"),
                    got,
                },
                other => other,
            })?;
            let mut rng = Rng::from_key(seed, &[idx as u64]);
            let prefix = format!("{idx}.{}", spec.name());
            let mut params = Vec::new();
            let mut running = None;
            match *spec {
                LayerSpec::Linear { out_dim } => {
                    let fan_in = shape.numel();
                    params.push(init_weight(&prefix, vec![out_dim, fan_in], fan_in, &mut rng));
                    params.push(zero_param(&prefix, "bias", ParamRole::Bias, vec![out_dim], 0.0));
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let (in_c, _) = shape.channel_split();
                    let fan_in = in_c * kernel * kernel;
                    params.push(init_weight(
                        &prefix,
                        vec![out_channels, in_c, kernel, kernel],
                        fan_in,
                        &mut rng,
                    ));
                    params.push(zero_param(&prefix, "bias", ParamRole::Bias, vec![out_channels], 0.0));
                }
                LayerSpec::BatchNorm => {
                    let (c, _) = shape.channel_split();
                    params.push(zero_param(&prefix, "weight", ParamRole::BnScale, vec![c], 1.0));
                    params.push(zero_param(&prefix, "bias", ParamRole::BnShift, vec![c], 0.0));
                    running = Some(RunningStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    });
                }
                _ => {}
            }
            layers.push(Layer {
                spec: *spec,
                input_shape: shape,
                output_shape: out,
                params,
                running,
            });
            shape = out;
        }
        Ok(Self {
            id: fresh_id(),
            version: 0,
            input_shape,
            layers,
            mode: Mode::Train,
            precision: Precision::Double,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input_shape, |l| l.output_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// In single precision every layer output is rounded to `f32`.
    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.version += 1;
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.data.len()).sum()
    }

    /// Batchnorm running statistics as `(name, values)` pairs.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (idx, l) in self.layers.iter().enumerate() {
            if let Some(rs) = &l.running {
                let prefix = format!("{idx}.{}", l.spec.name());
                out.push((format!("{prefix}.running_mean"), rs.mean.as_slice()));
                out.push((format!("{prefix}.running_var"), rs.var.as_slice()));
            }
        }
        out
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        for (idx, l) in self.layers.iter_mut().enumerate() {
            let prefix = format!("{idx}.{}", l.spec.name());
            if let Some(rs) = &mut l.running {
                if name == format!("{prefix}.running_mean") {
                    return Some(&mut rs.mean);
                }
                if name == format!("{prefix}.running_var") {
                    return Some(&mut rs.var);
                }
            }
        }
        None
    }

    /// Train-mode forward with cache; folds batch statistics into the
    /// running statistics.
    pub fn forward(&mut self, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let out = self.forward_with(
            input,
            ForwardOptions {
                cache: true,
                update_running_stats: true,
                tap: None,
            },
        )?;
        Ok((out.output, out.cache.expect("cache requested")))
    }

    pub fn forward_with(&mut self, input: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let (out, stats) = self.run(input, opts)?;
        if opts.update_running_stats && self.mode == Mode::Train {
            for (layer, st) in self.layers.iter_mut().zip(stats) {
                if let (Some(rs), Some((mean, var, count))) = (&mut layer.running, st) {
                    let unbias = if count > 1 {
                        count as f64 / (count as f64 - 1.0)
                    } else {
                        1.0
                    };
                    for c in 0..mean.len() {
                        rs.mean[c] = (1.0 - BN_MOMENTUM) * rs.mean[c] + BN_MOMENTUM * mean[c];
                        rs.var[c] = (1.0 - BN_MOMENTUM) * rs.var[c] + BN_MOMENTUM * var[c] * unbias;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward pass that leaves the network untouched.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.run(input, ForwardOptions::default())?.0.output)
    }

    /// Non-mutating forward with explicit options; running statistics are
    /// never updated.
    pub fn infer_with(&self, input: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        Ok(self.run(input, opts)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: &Tensor,
        opts: ForwardOptions,
    ) -> Result<(ForwardOutput, Vec<Option<(Vec<f64>, Vec<f64>, usize)>>)> {
        if input.shape() != self.input_shape {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", self.input_shape),
                got: format!("{:?}", input.shape()),
            });
        }
        let batch = input.batch();
        let mut x = input.data().to_vec();
        let mut entries = Vec::with_capacity(if opts.cache { self.layers.len() } else { 0 });
        let mut stats = Vec::with_capacity(self.layers.len());
        let mut tapped = None;
        let train = self.mode == Mode::Train;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (y, entry, st) = forward_layer(layer, batch, x, train, opts.cache);
            x = y;
            if self.precision == Precision::Single {
                x.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFiniteActivation { layer: idx });
            }
            if let Some(e) = entry {
                entries.push(e);
            }
            stats.push(st);
            if opts.tap == Some(idx) {
                tapped = Some(Tensor::new(batch, layer.output_shape, x.clone())?);
            }
        }
        let output = Tensor::new(batch, self.output_shape(), x)?;
        let cache = opts.cache.then(|| ForwardCache {
            net_id: self.id,
            version: self.version,
            batch,
            entries,
        });
        Ok((
            ForwardOutput {
                output,
                cache,
                tapped,
            },
            stats,
        ))
    }

    /// Reverse pass: returns the input gradient and fresh parameter gradients.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Tensor) -> Result<(Tensor, ParamGrads)> {
        let mut grads = ParamGrads::zeros_like(self);
        let gi = self.backward_accumulate(cache, grad_output, &mut grads)?;
        Ok((gi, grads))
    }

    /// Reverse pass that adds parameter gradients into `grads`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        grad_output: &Tensor,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(NnError::CacheMismatch(
                "cache was produced by a different network or parameter version".into(),
            ));
        }
        if cache.entries.len() != self.layers.len() {
            return Err(NnError::CacheMismatch(format!(
                "cache has {} entries, network has {} layers",
                cache.entries.len(),
                self.layers.len()
            )));
        }
        if grad_output.shape() != self.output_shape() || grad_output.batch() != cache.batch {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} x {:?}", cache.batch, self.output_shape()),
                got: format!("{} x {:?}", grad_output.batch(), grad_output.shape()),
            });
        }
        let expected_blocks = self.layers.iter().map(|l| l.params.len()).sum::<usize>();
        if grads.blocks.len() != expected_blocks {
            return Err(NnError::ShapeMismatch {
                expected: format!("{expected_blocks} gradient blocks"),
                got: format!("{}", grads.blocks.len()),
            });
        }
        let batch = cache.batch;
        let mut block_end = grads.blocks.len();
        let mut dy = grad_output.data().to_vec();
        for (layer, entry) in self.layers.iter().zip(&cache.entries).rev() {
            let start = block_end - layer.params.len();
            let blocks = &mut grads.blocks[start..block_end];
            dy = backward_layer(layer, batch, entry, &dy, blocks)?;
            block_end = start;
        }
        Tensor::new(batch, self.input_shape, dy)
    }
}

fn init_weight(prefix: &str, dims: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Param {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    Param {
        name: format!("{prefix}.weight"),
        role: ParamRole::Weight,
        data: (0..n).map(|_| rng.uniform_range(-bound, bound)).collect(),
        dims,
    }
}

fn zero_param(prefix: &str, suffix: &str, role: ParamRole, dims: Vec<usize>, fill: f64) -> Param {
    let n = dims.iter().product();
    Param {
        name: format!("{prefix}.{suffix}"),
        role,
        dims,
        data: vec![fill; n],
    }
}

#[allow(clippy::type_complexity)]
fn forward_layer(
    layer: &Layer,
    batch: usize,
    x: Vec<f64>,
    train: bool,
    keep: bool,
) -> (Vec<f64>, Option<CacheEntry>, Option<(Vec<f64>, Vec<f64>, usize)>) {
    match layer.spec {
        LayerSpec::Linear { out_dim } => {
            let in_dim = layer.input_shape.numel();
            let y = layers::linear_forward(
                batch,
                in_dim,
                out_dim,
                &x,
                &layer.params[0].data,
                &layer.params[1].data,
            );
            (y, keep.then(|| CacheEntry::Linear { input: x }), None)
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
        } => {
            let g = conv_geom(layer.input_shape, out_channels, kernel, stride);
            let y = layers::conv_forward(&g, batch, &x, &layer.params[0].data, &layer.params[1].data);
            (y, keep.then(|| CacheEntry::Conv { input: x }), None)
        }
        LayerSpec::BatchNorm => {
            let (channels, spatial) = layer.input_shape.channel_split();
            let rs = layer.running.as_ref().expect("batchnorm has running stats");
            let (mean, var, st) = if train {
                let (m, v, count) = layers::channel_stats(batch, channels, spatial, &x);
                (m.clone(), v.clone(), Some((m, v, count)))
            } else {
                (rs.mean.clone(), rs.var.clone(), None)
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let (y, xhat) = layers::bn_apply(
                batch,
                channels,
                spatial,
                &x,
                &mean,
                &inv_std,
                &layer.params[0].data,
                &layer.params[1].data,
            );
            let entry = keep.then_some(CacheEntry::BatchNorm {
                xhat,
                inv_std,
                batch_stats: train,
            });
            (y, entry, st)
        }
        LayerSpec::Relu => {
            let y: Vec<f64> = x.into_iter().map(|v| v.max(0.0)).collect();
            let entry = keep.then(|| CacheEntry::Relu { output: y.clone() });
            (y, entry, None)
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let (channels, height, width) = image_dims(layer.input_shape);
            let (y, argmax) = layers::maxpool_forward(batch, channels, height, width, kernel, stride, &x);
            (y, keep.then_some(CacheEntry::MaxPool { argmax }), None)
        }
        LayerSpec::GlobalAvgPool => {
            let (channels, spatial) = layer.input_shape.channel_split();
            let y = x
                .chunks_exact(spatial)
                .map(|plane| plane.iter().sum::<f64>() / spatial as f64)
                .collect::<Vec<_>>();
            debug_assert_eq!(y.len(), batch * channels);
            (y, keep.then_some(CacheEntry::GlobalAvgPool), None)
        }
        LayerSpec::L2Normalize => {
            let features = layer.input_shape.numel();
            let (y, norms) = layers::l2_normalize_forward(batch, features, &x);
            let entry = keep.then(|| CacheEntry::L2Normalize {
                output: y.clone(),
                norms,
            });
            (y, entry, None)
        }
    }
}

fn backward_layer(
    layer: &Layer,
    batch: usize,
    entry: &CacheEntry,
    dy: &[f64],
    blocks: &mut [Vec<f64>],
) -> Result<Vec<f64>> {
    let mismatch = || {
        NnError::CacheMismatch(format!(
            "cache entry {entry_kind} does not match layer {}",
            layer.spec.name(),
            entry_kind = entry_name(entry)
        ))
    };
    Ok(match (layer.spec, entry) {
        (LayerSpec::Linear { out_dim }, CacheEntry::Linear { input }) => {
            let in_dim = layer.input_shape.numel();
            let (dw, rest) = blocks.split_at_mut(1);
            layers::linear_backward(
                batch,
                in_dim,
                out_dim,
                input,
                &layer.params[0].data,
                dy,
                &mut dw[0],
                &mut rest[0],
            )
        }
        (
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
            },
            CacheEntry::Conv { input },
        ) => {
            let g = conv_geom(layer.input_shape, out_channels, kernel, stride);
            let (dw, rest) = blocks.split_at_mut(1);
            layers::conv_backward(&g, batch, input, &layer.params[0].data, dy, &mut dw[0], &mut rest[0])
        }
        (
            LayerSpec::BatchNorm,
            CacheEntry::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let (channels, spatial) = layer.input_shape.channel_split();
            let (dg, rest) = blocks.split_at_mut(1);
            layers::bn_backward(
                batch,
                channels,
                spatial,
                xhat,
                inv_std,
                &layer.params[0].data,
                dy,
                *batch_stats,
                &mut dg[0],
                &mut rest[0],
            )
        }
        (LayerSpec::Relu, CacheEntry::Relu { output }) => dy
            .iter()
            .zip(output)
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect(),
        (LayerSpec::MaxPool { .. }, CacheEntry::MaxPool { argmax }) => {
            let mut dx = vec![0.0; batch * layer.input_shape.numel()];
            for (g, &i) in dy.iter().zip(argmax) {
                dx[i] += g;
            }
            dx
        }
        (LayerSpec::GlobalAvgPool, CacheEntry::GlobalAvgPool) => {
            let (_, spatial) = layer.input_shape.channel_split();
            let inv = 1.0 / spatial as f64;
            dy.iter()
                .flat_map(|g| std::iter::repeat(g * inv).take(spatial))
                .collect()
        }
        (LayerSpec::L2Normalize, CacheEntry::L2Normalize { output, norms }) => {
            layers::l2_normalize_backward(layer.input_shape.numel(), output, norms, dy)
        }
        _ => return Err(mismatch()),
    })
}

fn entry_name(e: &CacheEntry) -> &'static str {
    match e {
        CacheEntry::Linear { .. } => "linear",
        CacheEntry::Conv { .. } => "conv2d",
        CacheEntry::BatchNorm { .. } => "batch_norm",
        CacheEntry::Relu { .. } => "relu",
        CacheEntry::MaxPool { .. } => "max_pool",
        CacheEntry::GlobalAvgPool => "global_avg_pool",
        CacheEntry::L2Normalize { .. } => "l2_normalize",
    }
}

fn image_dims(shape: Shape) -> (usize, usize, usize) {
    match shape {
        Shape::Image {
            channels,
            height,
            width,
        } => (channels, height, width),
        Shape::Flat(_) => unreachable!("validated at construction"),
    }
}

fn conv_geom(input: Shape, out_channels: usize, kernel: usize, stride: usize) -> ConvGeom {
    let (c, h, w) = image_dims(input);
    ConvGeom::new(c, h, w, out_channels, kernel, stride).expect("validated at construction")
}
