//! Encoder `F = g ∘ f`: a convolutional backbone `f` whose pooled output is
//! the embedding `h`, followed by a two-layer projector `g` and unit
//! normalization giving the projection `z`.
//!
//! Both halves live in one [`Network`]; the embedding is read from a tap at
//! the last backbone layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CHANNELS;
use crate::linalg::Matrix;
use crate::nn::{ForwardCache, ForwardOptions, LayerSpec, Network, NnError, Precision, Shape, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("unknown encoder preset {0:?} (known: desk, paper-resnet18-projector, toy)")]
    UnknownPreset(String),
    #[error("invalid encoder config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSpec {
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Vec<LayerSpec>,
    pub projector: ProjectorSpec,
    #[serde(default)]
    pub precision: Precision,
}

fn conv_bn_relu(out_channels: usize, stride: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::Conv2d {
            out_channels,
            kernel: 3,
            stride,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
    ]
}

impl EncoderConfig {
    /// Three conv-bn-relu stages (32, 64, 128 channels) and global average
    /// pooling; projector 128 → 512 → 128.
    pub fn desk() -> Self {
        let mut backbone = Vec::new();
        backbone.extend(conv_bn_relu(32, 1));
        backbone.extend(conv_bn_relu(64, 2));
        backbone.extend(conv_bn_relu(128, 2));
        backbone.push(LayerSpec::GlobalAvgPool);
        Self {
            backbone,
            projector: ProjectorSpec {
                hidden: 512,
                output: 128,
            },
            precision: Precision::Double,
        }
    }

    /// Desk backbone with the 4096-hidden, 512-output projector.
    pub fn paper_projector() -> Self {
        Self {
            projector: ProjectorSpec {
                hidden: 4096,
                output: 512,
            },
            ..Self::desk()
        }
    }

    /// Small network for quick CPU experiments: 16 → 32 channels, projector
    /// 32 → 64 → 32.
    pub fn toy() -> Self {
        let mut backbone = Vec::new();
        backbone.extend(conv_bn_relu(16, 2));
        backbone.extend(conv_bn_relu(32, 2));
        backbone.push(LayerSpec::GlobalAvgPool);
        Self {
            backbone,
            projector: ProjectorSpec {
                hidden: 64,
                output: 32,
            },
            precision: Precision::Double,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-resnet18-projector" => Ok(Self::paper_projector()),
            "toy" => Ok(Self::toy()),
            other => Err(EncoderError::UnknownPreset(other.to_string())),
        }
    }

    /// Full layer stack: backbone, then linear-relu-linear and l2 normalize.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = self.backbone.clone();
        layers.extend([
            LayerSpec::Linear {
                out_dim: self.projector.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                out_dim: self.projector.output,
            },
            LayerSpec::L2Normalize,
        ]);
        layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() {
            return Err(EncoderError::Invalid("backbone must have at least one layer".into()));
        }
        if self.projector.output < 2 {
            return Err(EncoderError::Invalid(format!(
                "projector output width must be >= 2, got {}",
                self.projector.output
            )));
        }
        if self.projector.hidden == 0 {
            return Err(EncoderError::Invalid("projector hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// Embedding width for square `size`-pixel inputs.
    pub fn embed_dim(&self, size: usize) -> Result<usize> {
        let mut shape = input_shape(size);
        for spec in &self.backbone {
            shape = spec.output_shape(shape)?;
        }
        match shape {
            Shape::Flat(n) => Ok(n),
            other => Err(EncoderError::Invalid(format!(
                "backbone must end in a flat embedding (e.g. global_avg_pool), got {other:?}"
            ))),
        }
    }
}

fn input_shape(size: usize) -> Shape {
    Shape::Image {
        channels: CHANNELS,
        height: size,
        width: size,
    }
}

/// A built encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    net: Network,
    config: EncoderConfig,
    input_size: usize,
    embed_dim: usize,
}

/// Output of an encoder pass: `H` is `embed_dim × b`, `Z` is `d × b`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub h: Matrix,
    pub z: Matrix,
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, input_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let embed_dim = cfg.embed_dim(input_size)?;
        let mut net = Network::new(input_shape(input_size), &cfg.layers(), seed)?;
        net.set_precision(cfg.precision);
        Ok(Self {
            net,
            config: cfg.clone(),
            input_size,
            embed_dim,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.config.projector.output
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn tap(&self) -> usize {
        self.config.backbone.len() - 1
    }

    /// Non-mutating pass in the network's current mode.
    pub fn embed(&self, x: &Tensor) -> Result<Embedding> {
        let out = self.net.infer_with(
            x,
            ForwardOptions {
                tap: Some(self.tap()),
                ..Default::default()
            },
        )?;
        Ok(Embedding {
            h: out.tapped.expect("tap requested").to_columns(),
            z: out.output.to_columns(),
        })
    }

    /// Embeddings only.
    pub fn embed_h(&self, x: &Tensor) -> Result<Matrix> {
        Ok(self.embed(x)?.h)
    }

    /// Train-step forward: returns `Z` and the cache for backward.
    /// `update_running_stats` folds batch statistics into batchnorm buffers.
    pub fn forward_train(&mut self, x: &Tensor, update_running_stats: bool) -> Result<(Matrix, ForwardCache)> {
        let out = self.net.forward_with(
            x,
            ForwardOptions {
                cache: true,
                update_running_stats,
                tap: None,
            },
        )?;
        Ok((out.output.to_columns(), out.cache.expect("cache requested")))
    }
}
