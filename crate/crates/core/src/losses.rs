//! Cosine-softmax loss family with hand-derived gradients.
//!
//! All three classification losses share one kernel: logits
//! `z_ik = s·cos θ_ik − s·margin_k·[k = y_i]` followed by cross entropy.
//! The margin is 0 for the normalized softmax, `m` for CosFace and `β_y·m`
//! for the domain balancing margin. Features and prototypes are normalized
//! inside the graph, so the returned gradients are with respect to the raw
//! (unnormalized) rows that were passed in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

/// Rows flagged as normalized must be unit norm within this tolerance.
pub const FEATURE_NORM_TOL: f64 = 1e-6;

/// Embedding rows with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Rows claim to be unit norm.
    pub normalized: bool,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<usize>, normalized: bool) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: features.rows(),
                right: labels.len(),
            });
        }
        Ok(FeatureBatch {
            features,
            labels,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Cosface,
    Dbm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub scale_s: f64,
    pub margin_m: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Dbm,
            scale_s: 30.0,
            margin_m: 0.35,
            lambda: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_s > 0.0) || !(self.margin_m >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss requires scale_s > 0, margin_m >= 0, lambda >= 0 (got {}, {}, {})",
                self.scale_s, self.margin_m, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Batch mean of `per_sample`.
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_prototypes: Matrix,
    pub per_sample: Vec<f64>,
}

/// Cross entropy of one logit row and its gradient `p − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let lse = log_sum_exp(logits)?;
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((lse - logits[label], grad))
}

/// Gradient of `v̂ = v/‖v‖` pulled back to `v`: `(g − (g·v̂)v̂) / ‖v‖`.
pub(crate) fn normalize_backward(raw: &Matrix, unit: &Matrix, grad_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let n = crate::tensor::norm(raw.row(i));
        let u = unit.row(i);
        let g = grad_unit.row(i);
        let proj = crate::tensor::dot(g, u);
        for ((o, &gj), &uj) in out.row_mut(i).iter_mut().zip(g).zip(u) {
            *o = (gj - proj * uj) / n;
        }
    }
    out
}

/// Shared kernel: per-class additive cosine margins on the target logit.
pub fn margin_softmax(
    batch: &FeatureBatch,
    prototypes: &Matrix,
    margins: &[f64],
    scale_s: f64,
) -> Result<LossOutput> {
    let classes = prototypes.rows();
    if batch.features.cols() != prototypes.cols() {
        return Err(Error::DimMismatch {
            op: "margin_softmax",
            left: batch.features.shape(),
            right: prototypes.shape(),
        });
    }
    if margins.len() != classes {
        return Err(Error::LengthMismatch {
            left: margins.len(),
            right: classes,
        });
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    if batch.normalized {
        batch.features.check_unit_rows(FEATURE_NORM_TOL)?;
    }
    for &y in &batch.labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }

    let fhat = batch.features.l2_normalize_rows()?;
    let what = prototypes.l2_normalize_rows()?;
    let cos = fhat.matmul_bt(&what)?.map(|c| c.clamp(-1.0, 1.0));

    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let mut per_sample = Vec::with_capacity(b);
    // dL/dcos, already scaled by s/B
    let mut grad_cos = Matrix::zeros(b, classes);
    let mut logits = vec![0.0; classes];
    for i in 0..b {
        let y = batch.labels[i];
        for (k, z) in logits.iter_mut().enumerate() {
            *z = scale_s * cos.get(i, k);
        }
        logits[y] -= scale_s * margins[y];
        let (loss, g) = softmax_cross_entropy(&logits, y)?;
        per_sample.push(loss);
        for (k, gk) in g.into_iter().enumerate() {
            grad_cos.set(i, k, scale_s * gk * inv_b);
        }
    }
    let value = per_sample.iter().sum::<f64>() * inv_b;

    let grad_fhat = grad_cos.matmul(&what)?;
    let grad_what = grad_cos.matmul_at(&fhat)?;
    let grad_features = normalize_backward(&batch.features, &fhat, &grad_fhat);
    let grad_prototypes = normalize_backward(prototypes, &what, &grad_what);
    if !value.is_finite() || !grad_features.is_finite() || !grad_prototypes.is_finite() {
        return Err(Error::NonFinite("margin_softmax"));
    }
    Ok(LossOutput {
        value,
        grad_features,
        grad_prototypes,
        per_sample,
    })
}

/// Domain balancing margin: CosFace with the margin of class `y` scaled by
/// `beta[y]`. `beta` is treated as a constant (no gradient).
pub fn dbm_forward(
    batch: &FeatureBatch,
    prototypes: &Matrix,
    beta: &[f64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if beta.len() != prototypes.rows() {
        return Err(Error::LengthMismatch {
            left: beta.len(),
            right: prototypes.rows(),
        });
    }
    if let Some((class, &b)) = beta.iter().enumerate().find(|(_, b)| !(**b >= 0.0)) {
        return Err(Error::NegativeBeta { class, beta: b });
    }
    let margins: Vec<f64> = beta.iter().map(|b| b * cfg.margin_m).collect();
    margin_softmax(batch, prototypes, &margins, cfg.scale_s)
}

pub fn cosface_forward(
    batch: &FeatureBatch,
    prototypes: &Matrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    margin_softmax(
        batch,
        prototypes,
        &vec![cfg.margin_m; prototypes.rows()],
        cfg.scale_s,
    )
}

pub fn softmax_forward(
    batch: &FeatureBatch,
    prototypes: &Matrix,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    margin_softmax(
        batch,
        prototypes,
        &vec![0.0; prototypes.rows()],
        cfg.scale_s,
    )
}

/// Dispatches on `cfg.kind`; `beta` is only read for [`LossKind::Dbm`].
pub fn classification_forward(
    batch: &FeatureBatch,
    prototypes: &Matrix,
    beta: &[f64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Softmax => softmax_forward(batch, prototypes, cfg),
        LossKind::Cosface => cosface_forward(batch, prototypes, cfg),
        LossKind::Dbm => dbm_forward(batch, prototypes, beta, cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RrmOutput {
    pub value: f64,
    pub grad_gate: Vec<f64>,
}

/// Gate regression: mean of `(f(x) − β_y)²`; targets get no gradient.
pub fn rrm_loss(gate_out: &[f64], beta_targets: &[f64]) -> Result<RrmOutput> {
    if gate_out.len() != beta_targets.len() {
        return Err(Error::LengthMismatch {
            left: gate_out.len(),
            right: beta_targets.len(),
        });
    }
    if gate_out.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = gate_out.len() as f64;
    let value = gate_out
        .iter()
        .zip(beta_targets)
        .map(|(f, t)| (f - t) * (f - t))
        .sum::<f64>()
        / n;
    let grad_gate = gate_out
        .iter()
        .zip(beta_targets)
        .map(|(f, t)| 2.0 * (f - t) / n)
        .collect();
    Ok(RrmOutput { value, grad_gate })
}

/// `L = L_cls + λ·L_rrm`.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub classification: LossOutput,
    pub rrm_value: Option<f64>,
    /// λ-weighted gate gradient; zeros when no regression term is present.
    pub grad_gate: Vec<f64>,
}

pub fn combined_loss(
    classification: LossOutput,
    rrm: Option<&RrmOutput>,
    lambda: f64,
) -> CombinedLoss {
    let b = classification.per_sample.len();
    match rrm {
        Some(r) => CombinedLoss {
            value: classification.value + lambda * r.value,
            rrm_value: Some(r.value),
            grad_gate: r.grad_gate.iter().map(|g| lambda * g).collect(),
            classification,
        },
        None => CombinedLoss {
            value: classification.value,
            rrm_value: None,
            grad_gate: vec![0.0; b],
            classification,
        },
    }
}
