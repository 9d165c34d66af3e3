//! Total coding rate, multi-patch invariance and their closed-form gradients.
//!
//! Projections are `d × b` matrices: one unit-norm column per image in the
//! batch, one matrix per patch index. The training objective is minimized:
//!
//! ```text
//! L = -(w/n) Σᵢ R(Zᵢ) - λ · (1/n) Σᵢ Tr(Zᵢᵀ Z̄),   R(Z) = ½ log det(I + d/(b·ε²) Z Zᵀ)
//! ```
//! where `w` is the coding-rate weight (1 for the standard objective).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid loss parameters: {0}")]
    InvalidParams(String),
    #[error("column {col} has norm {norm}, expected 0 or 1")]
    NotUnitNorm { col: usize, norm: f64 },
    #[error("non-finite projection entries")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Column norms must be 0 or within this distance of 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// A `d × b` matrix whose columns are unit-norm (or exactly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(Matrix);

impl ProjectionMatrix {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(LossError::ShapeMismatch("projection must be at least 1x1".into()));
        }
        if !z.is_finite() {
            return Err(LossError::NonFinite);
        }
        for c in 0..z.cols() {
            let norm = (0..z.rows()).map(|r| z.get(r, c).powi(2)).sum::<f64>().sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(LossError::NotUnitNorm { col: c, norm });
            }
        }
        Ok(Self(z))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl std::ops::Deref for ProjectionMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcrParams {
    /// Squared distortion ε².
    #[serde(default = "default_eps2")]
    pub eps2: f64,
    /// Invariance weight λ.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Weight on the coding-rate term; 0 trains on invariance alone.
    #[serde(default = "default_tcr_weight")]
    pub tcr_weight: f64,
}

fn default_eps2() -> f64 {
    0.2
}
fn default_lambda() -> f64 {
    200.0
}
fn default_tcr_weight() -> f64 {
    1.0
}

impl Default for TcrParams {
    fn default() -> Self {
        Self {
            eps2: default_eps2(),
            lambda: default_lambda(),
            tcr_weight: default_tcr_weight(),
        }
    }
}

impl TcrParams {
    /// λ at which the largest possible invariance value, `λ·b`, equals the
    /// coding rate of a batch spread evenly over all `d` directions,
    /// `(d/2)·ln(1 + 1/ε²)`.
    pub fn balanced_lambda(d: usize, b: usize, eps2: f64) -> f64 {
        d as f64 * (1.0 + 1.0 / eps2).ln() / (2.0 * b as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps2 > 0.0 && self.eps2.is_finite()) {
            return Err(LossError::InvalidParams(format!("eps2 must be > 0, got {}", self.eps2)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidParams(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tcr_weight >= 0.0 && self.tcr_weight.is_finite()) {
            return Err(LossError::InvalidParams(format!(
                "tcr_weight must be >= 0, got {}",
                self.tcr_weight
            )));
        }
        Ok(())
    }
}

/// `n ≥ 2` projection matrices of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProjections {
    mats: Vec<Matrix>,
}

impl PatchProjections {
    pub fn new(zs: Vec<ProjectionMatrix>) -> Result<Self> {
        Self::from_matrices(zs.into_iter().map(ProjectionMatrix::into_matrix).collect())
    }

    /// Shape-checked only; columns need not be normalized. Used when probing
    /// the loss off the unit sphere, e.g. for finite differences.
    pub fn from_matrices(mats: Vec<Matrix>) -> Result<Self> {
        if mats.len() < 2 {
            return Err(LossError::ShapeMismatch(format!("need at least 2 patches, got {}", mats.len())));
        }
        let shape = mats[0].shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(LossError::ShapeMismatch("projection must be at least 1x1".into()));
        }
        if let Some(m) = mats.iter().find(|m| m.shape() != shape) {
            return Err(LossError::ShapeMismatch(format!(
                "patch projections must share shape {:?}, found {:?}",
                shape,
                m.shape()
            )));
        }
        Ok(Self { mats })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.mats
    }

    /// `Z̄ = (1/n) Σ Zᵢ`, summed in patch order.
    pub fn mean(&self) -> Matrix {
        let mut acc = Matrix::zeros(self.mats[0].rows(), self.mats[0].cols());
        for z in &self.mats {
            acc.add_scaled(z, 1.0).expect("shapes checked");
        }
        acc.scale_in_place(1.0 / self.mats.len() as f64);
        acc
    }

    /// `[Z₁, …, Zₙ]` as one `d × (n·b)` matrix.
    pub fn concatenated(&self) -> Matrix {
        let (d, b) = self.mats[0].shape();
        let n = self.mats.len();
        Matrix::from_fn(d, n * b, |r, c| self.mats[c / b].get(r, c % b))
    }
}

/// Which Gram matrix feeds the log-determinant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// `I_d + α Z Zᵀ`
    Feature,
    /// `I_b + α Zᵀ Z`
    Sample,
    /// Whichever is smaller.
    Smaller,
}

fn alpha(z: &Matrix, eps2: f64) -> f64 {
    z.rows() as f64 / (z.cols() as f64 * eps2)
}

fn check_input(z: &Matrix, eps2: f64) -> Result<()> {
    if !(eps2 > 0.0) {
        return Err(LossError::InvalidParams(format!("eps2 must be > 0, got {eps2}")));
    }
    if z.rows() == 0 || z.cols() == 0 {
        return Err(LossError::ShapeMismatch("projection must be at least 1x1".into()));
    }
    Ok(())
}

fn regularized_gram(z: &Matrix, a: f64, side: GramSide) -> Result<(Matrix, bool)> {
    let feature = match side {
        GramSide::Feature => true,
        GramSide::Sample => false,
        GramSide::Smaller => z.rows() <= z.cols(),
    };
    let gram = if feature { z.gram_rows() } else { z.gram_cols() };
    let mut m = gram.symmetrized()?;
    m.scale_in_place(a);
    m.add_to_diagonal(1.0);
    Ok((m, feature))
}

/// Coding rate computed through the chosen Gram matrix.
pub fn tcr_via(z: &Matrix, eps2: f64, side: GramSide) -> Result<f64> {
    check_input(z, eps2)?;
    let (m, _) = regularized_gram(z, alpha(z, eps2), side)?;
    Ok(0.5 * cholesky(&m)?.logdet())
}

/// Total coding rate `R(Z) = ½ log det(I + d/(b·ε²) Z Zᵀ)`.
pub fn tcr(z: &Matrix, eps2: f64) -> Result<f64> {
    tcr_via(z, eps2, GramSide::Smaller)
}

/// `∂R/∂Z = α (I_d + α Z Zᵀ)⁻¹ Z`, evaluated through the smaller Gram.
pub fn tcr_grad(z: &Matrix, eps2: f64) -> Result<Matrix> {
    Ok(tcr_with_grad(z, eps2)?.1)
}

/// Coding rate and its gradient from one factorization.
pub fn tcr_with_grad(z: &Matrix, eps2: f64) -> Result<(f64, Matrix)> {
    check_input(z, eps2)?;
    let a = alpha(z, eps2);
    let (m, feature) = regularized_gram(z, a, GramSide::Smaller)?;
    let chol = cholesky(&m)?;
    let rate = 0.5 * chol.logdet();
    let mut grad = if feature {
        chol.solve(z)?
    } else {
        // (I_d + αZZᵀ)⁻¹Z = Z(I_b + αZᵀZ)⁻¹
        chol.solve(&z.transpose())?.transpose()
    };
    grad.scale_in_place(a);
    Ok((rate, grad))
}

/// `(1/n) Σᵢ Tr(Zᵢᵀ Z̄)`, which equals `‖Z̄‖²_F`.
pub fn invariance(zs: &PatchProjections) -> f64 {
    let mean = zs.mean();
    let n = zs.len() as f64;
    zs.mats.iter().map(|z| z.dot(&mean).expect("shapes checked")).sum::<f64>() / n
}

/// Gradient of [`invariance`] with respect to each `Zⱼ`, differentiating
/// through the mean: `(2/n) Z̄` for every patch.
pub fn invariance_grad(zs: &PatchProjections) -> Vec<Matrix> {
    let g = zs.mean().scale(2.0 / zs.len() as f64);
    vec![g; zs.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpLoss {
    pub loss: f64,
    /// Mean coding rate `(1/n) Σ R(Zᵢ)`.
    pub tcr_term: f64,
    pub invariance_term: f64,
    /// `∂L/∂Zᵢ` for each patch.
    pub grads: Vec<Matrix>,
}

/// The minimized multi-patch objective and its gradients.
pub fn emp_objective(zs: &PatchProjections, p: &TcrParams) -> Result<EmpLoss> {
    p.validate()?;
    let n = zs.len() as f64;
    // Per-patch terms are independent; collecting preserves patch order so
    // the reduction below is identical for any thread count.
    let per_patch: Vec<(f64, Matrix)> = zs
        .mats
        .par_iter()
        .map(|z| tcr_with_grad(z, p.eps2))
        .collect::<Result<_>>()?;
    let tcr_term = per_patch.iter().map(|(r, _)| r).sum::<f64>() / n;
    let inv = invariance(zs);
    let mean = zs.mean();
    let grads = per_patch
        .into_iter()
        .map(|(_, g)| {
            let mut out = g.scale(-p.tcr_weight / n);
            out.add_scaled(&mean, -p.lambda * 2.0 / n).expect("shapes checked");
            out
        })
        .collect();
    Ok(EmpLoss {
        loss: -p.tcr_weight * tcr_term - p.lambda * inv,
        tcr_term,
        invariance_term: inv,
        grads,
    })
}
