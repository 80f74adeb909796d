//! The measured diagnostics: feature/weight change ratios, alignment
//! metrics, stable ranks, and the no-cancellation / activation-scale /
//! batch-averaging checks.
//!
//! Every metric is a pure function of its snapshot inputs. Metric ids are
//! stable public identifiers written into CSV headers; layer-indexed metrics
//! carry an `.l<ℓ>` suffix (preactivation layer 2 is the canonical choice
//! for feature- and weight-change metrics, configurable in sweeps).

use crate::linalg::{
    spectral_norm_est, DensityTag, LinalgError, Matrix, Vector, DEFAULT_SPECTRAL_MAX_ITERS,
    DEFAULT_SPECTRAL_TOL,
};
use crate::model::{ActivationRecord, MlpState};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("records must be nonempty and of equal length")]
    BadRecords,
    #[error("norm in denominator is zero")]
    ZeroDenominator,
    #[error("power iteration did not converge (last estimate {value})")]
    NonConvergence { value: f64 },
}

/// Spectral norm with the shared tolerance. Metric values never silently
/// absorb a non-converged estimate; the error carries the last value.
fn spec_norm(m: &Matrix) -> Result<f64, MetricError> {
    let est = spectral_norm_est(m, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITERS);
    if est.converged {
        Ok(est.value)
    } else {
        Err(MetricError::NonConvergence { value: est.value })
    }
}

fn spec_stable_rank(m: &Matrix) -> Result<f64, MetricError> {
    if m.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    let s = spec_norm(m)?;
    Ok((m.frobenius_norm() / s).powi(2))
}

/// Stable metric identifiers. Layer-indexed ids are produced by
/// [`layer_metric_id`].
pub mod metric_id {
    pub const LOSS_FINAL: &str = "loss_final";
    pub const FEATURE_CHANGE_RATIO: &str = "feature_change_ratio";
    pub const WEIGHT_CHANGE_SPECTRAL: &str = "weight_change_spectral";
    pub const WEIGHT_CHANGE_FROBENIUS: &str = "weight_change_frobenius";
    pub const FINAL_LAYER_ALIGNMENT: &str = "final_layer_alignment";
    pub const FINAL_LAYER_ALIGNMENT_INIT: &str = "final_layer_alignment_init";
    pub const UPDATE_ALIGNMENT: &str = "update_alignment";
    pub const UPDATE_STABLE_RANK: &str = "update_stable_rank";
    pub const SRANK_H: &str = "srank_H";
    pub const SRANK_G: &str = "srank_G";
    pub const ASSUMPTION1_W: &str = "assumption1_w";
    pub const ASSUMPTION1_H: &str = "assumption1_h";
    pub const ASSUMPTION2: &str = "assumption2";
    pub const ASSUMPTION3: &str = "assumption3";
    pub const ASSUMPTION3_TRAINED: &str = "assumption3_trained";
    pub const UPDATE_GRAD_ALIGNMENT: &str = "update_grad_alignment";
    pub const NATURAL_SPECTRAL_W: &str = "natural_spectral_W";
    pub const NATURAL_SPECTRAL_DW: &str = "natural_spectral_dW";

    /// Ids that appear bare (no layer suffix) in sweep output.
    pub const BARE: &[&str] = &[
        LOSS_FINAL,
        FINAL_LAYER_ALIGNMENT,
        FINAL_LAYER_ALIGNMENT_INIT,
        UPDATE_ALIGNMENT,
        UPDATE_STABLE_RANK,
        SRANK_H,
        SRANK_G,
        ASSUMPTION1_W,
        ASSUMPTION1_H,
        ASSUMPTION2,
        ASSUMPTION3,
        ASSUMPTION3_TRAINED,
        UPDATE_GRAD_ALIGNMENT,
    ];

    /// Ids that appear with a layer suffix in sweep output.
    pub const LAYERED: &[&str] = &[
        FEATURE_CHANGE_RATIO,
        WEIGHT_CHANGE_SPECTRAL,
        WEIGHT_CHANGE_FROBENIUS,
        NATURAL_SPECTRAL_W,
        NATURAL_SPECTRAL_DW,
    ];
}

/// `"<base>.l<layer>"`, e.g. `feature_change_ratio.l2`.
pub fn layer_metric_id(base: &str, layer: usize) -> String {
    format!("{base}.l{layer}")
}

/// All spectral diagnostics for one (width, seed, step) cell.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub width: usize,
    pub seed: u64,
    pub step: usize,
    /// Metric values by id. Non-finite entries are explained in `flags`.
    pub values: BTreeMap<String, f64>,
    /// Anomalies, e.g. `diverged@step` or `<metric>:unavailable(<reason>)`.
    pub flags: Vec<String>,
}

impl MetricRecord {
    pub fn diverged(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("diverged@"))
    }
}

/// `E_x ‖h_ℓ(x) − h⁰_ℓ(x)‖₂ / ‖h⁰_ℓ(x)‖₂` over paired records.
pub fn feature_change_ratio(
    rec0: &[ActivationRecord],
    rec_t: &[ActivationRecord],
    layer: usize,
) -> Result<f64, MetricError> {
    if rec0.is_empty() || rec0.len() != rec_t.len() {
        return Err(MetricError::BadRecords);
    }
    let mut sum = 0.0;
    for (r0, rt) in rec0.iter().zip(rec_t) {
        let h0 = r0.preact(layer);
        let ht = rt.preact(layer);
        let denom = h0.l2_norm();
        if denom == 0.0 {
            return Err(MetricError::Linalg(LinalgError::ZeroVector));
        }
        sum += ht.sub(h0)?.l2_norm() / denom;
    }
    Ok(sum / rec0.len() as f64)
}

/// `‖W − W⁰‖_* / ‖W⁰‖_*`.
pub fn weight_change_spectral(w0: &Matrix, w: &Matrix) -> Result<f64, MetricError> {
    if w0.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    Ok(spec_norm(&w.sub(w0)?)? / spec_norm(w0)?)
}

/// `‖W − W⁰‖_F / ‖W⁰‖_F`.
pub fn weight_change_frobenius(w0: &Matrix, w: &Matrix) -> Result<f64, MetricError> {
    if w0.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    Ok(w.sub(w0)?.frobenius_norm() / w0.frobenius_norm())
}

/// `E_x ‖W_L h′_{L-1}(x)‖₂ / (‖W_L‖_* ‖h′_{L-1}(x)‖₂)` for the current
/// readout weights.
pub fn final_layer_alignment(
    state: &MlpState,
    records: &[ActivationRecord],
) -> Result<f64, MetricError> {
    let last = state.layer_count();
    matrix_vector_alignment(state.weight(last), records, last)
}

/// Same as [`final_layer_alignment`] but for the readout weights at
/// initialization, paired with records taken at initialization.
pub fn final_layer_alignment_init(
    state: &MlpState,
    records_init: &[ActivationRecord],
) -> Result<f64, MetricError> {
    let last = state.layer_count();
    matrix_vector_alignment(state.init_weight(last), records_init, last)
}

/// `E_x ‖M h′_{ℓ-1}(x)‖₂ / (‖M‖_* ‖h′_{ℓ-1}(x)‖₂)`: how strongly `M` acts on
/// the vectors feeding layer `ℓ`, relative to the most it could.
pub fn matrix_vector_alignment(
    m: &Matrix,
    records: &[ActivationRecord],
    layer: usize,
) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::BadRecords);
    }
    if m.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    let norm = spec_norm(m)?;
    let mut sum = 0.0;
    for rec in records {
        let input = rec.layer_input(layer);
        let denom = norm * input.l2_norm();
        if denom == 0.0 {
            return Err(MetricError::ZeroDenominator);
        }
        sum += m.matvec(input)?.l2_norm() / denom;
    }
    Ok(sum / records.len() as f64)
}

/// Alignment of a weight update with the vectors that induced it:
/// `E_x ‖ΔW h′(x)‖₂ / (‖ΔW‖_* ‖h′(x)‖₂)`. Exactly 1 for a batch-1 step.
pub fn update_alignment(
    dw: &Matrix,
    records: &[ActivationRecord],
    layer: usize,
) -> Result<f64, MetricError> {
    matrix_vector_alignment(dw, records, layer)
}

/// Stable rank of a weight update.
pub fn update_stable_rank(dw: &Matrix) -> Result<f64, MetricError> {
    spec_stable_rank(dw)
}

/// Stable ranks of the stacked forward features `H′ = [h′_{ℓ-1}(x₁) … ]` and
/// stacked backward gradients `G = [g_ℓ(x₁) … ]` feeding layer `ℓ`.
pub fn forward_backward_sranks(
    records: &[ActivationRecord],
    example_preact_grads: &[Vec<Vector>],
    layer: usize,
) -> Result<(f64, f64), MetricError> {
    if records.is_empty() || records.len() != example_preact_grads.len() {
        return Err(MetricError::BadRecords);
    }
    let b = records.len();
    let d_in = records[0].layer_input(layer).dim();
    let d_out = example_preact_grads[0][layer - 1].dim();
    let mut h = Matrix::zeros(d_in, b);
    let mut g = Matrix::zeros(d_out, b);
    for (col, (rec, grads)) in records.iter().zip(example_preact_grads).enumerate() {
        for (i, &v) in rec.layer_input(layer).as_slice().iter().enumerate() {
            h.set(i, col, v);
        }
        for (i, &v) in grads[layer - 1].as_slice().iter().enumerate() {
            g.set(i, col, v);
        }
    }
    Ok((spec_stable_rank(&h)?, spec_stable_rank(&g)?))
}

/// No-cancellation ratio for weights:
/// `‖W⁰ + ΔW‖_* / (‖W⁰‖_* + ‖ΔW‖_*)`, with `ΔW = W − W⁰` cumulative.
pub fn assumption1_weights(state: &MlpState, layer: usize) -> Result<f64, MetricError> {
    let w0 = state.init_weight(layer);
    if w0.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    let dw = state.weight_delta(layer);
    let denom = spec_norm(w0)? + spec_norm(&dw)?;
    Ok(spec_norm(state.weight(layer))? / denom)
}

/// No-cancellation ratio for features:
/// `E_x ‖h⁰_ℓ + Δh_ℓ‖₂ / (‖h⁰_ℓ‖₂ + ‖Δh_ℓ‖₂)`.
pub fn assumption1_features(
    rec0: &[ActivationRecord],
    rec_t: &[ActivationRecord],
    layer: usize,
) -> Result<f64, MetricError> {
    if rec0.is_empty() || rec0.len() != rec_t.len() {
        return Err(MetricError::BadRecords);
    }
    let mut sum = 0.0;
    for (r0, rt) in rec0.iter().zip(rec_t) {
        let h0 = r0.preact(layer);
        let ht = rt.preact(layer);
        let denom = h0.l2_norm() + ht.sub(h0)?.l2_norm();
        if denom == 0.0 {
            return Err(MetricError::ZeroDenominator);
        }
        sum += ht.l2_norm() / denom;
    }
    Ok(sum / rec0.len() as f64)
}

/// Activation-scale ratio `E_x ‖h′_ℓ(x)‖₂ / ‖h_ℓ(x)‖₂`. Near `1/√2` for ReLU
/// on roughly centered preactivations; near 1 for tanh on small inputs.
pub fn assumption2_activation_ratio(
    records: &[ActivationRecord],
    layer: usize,
) -> Result<f64, MetricError> {
    if records.is_empty() {
        return Err(MetricError::BadRecords);
    }
    let mut sum = 0.0;
    for rec in records {
        let denom = rec.preact(layer).l2_norm();
        if denom == 0.0 {
            return Err(MetricError::ZeroDenominator);
        }
        sum += rec.postact(layer).l2_norm() / denom;
    }
    Ok(sum / records.len() as f64)
}

/// Batch-averaging ratio
/// `E_i ‖(1/B) ΔW^{(i)} h_ℓ(x_i)‖₂ / ‖ΔW h_ℓ(x_i)‖₂`,
/// where `ΔW^{(i)}` is the single-example update and `ΔW` their average.
/// Learning rates cancel; the ratio is computed from gradients.
///
/// The probe vector is the same-layer preactivation `h_ℓ(x_i)` (requires a
/// square layer): against it the example's own rank-one term is one of `B`
/// comparable contributions, so quasi-random signs put the ratio near
/// `1/√B`, and it stays `Θ(1)` in width.
pub fn assumption3_batch_ratio(
    mean_weight_grad: &Matrix,
    records: &[ActivationRecord],
    example_preact_grads: &[Vec<Vector>],
    layer: usize,
) -> Result<f64, MetricError> {
    if records.is_empty() || records.len() != example_preact_grads.len() {
        return Err(MetricError::BadRecords);
    }
    if records[0].preact(layer).dim() != mean_weight_grad.cols() {
        return Err(MetricError::Linalg(LinalgError::ShapeMismatch {
            expected: format!("square layer of fan-in {}", mean_weight_grad.cols()),
            got: format!("preactivation dim {}", records[0].preact(layer).dim()),
        }));
    }
    let b = records.len() as f64;
    let mut sum = 0.0;
    for (rec, grads) in records.iter().zip(example_preact_grads) {
        let probe = rec.preact(layer);
        // ΔW^{(i)} ∝ g_i h′_{ℓ-1}(x_i)ᵀ, so ΔW^{(i)}·p = (h′_{ℓ-1}(x_i)·p) g_i.
        let g_i = &grads[layer - 1];
        let overlap = rec.layer_input(layer).dot(probe)?;
        let numer = g_i.l2_norm() * overlap.abs() / b;
        let denom = mean_weight_grad.matvec(probe)?.l2_norm();
        if denom == 0.0 {
            return Err(MetricError::ZeroDenominator);
        }
        sum += numer / denom;
    }
    Ok(sum / records.len() as f64)
}

/// Cosine-style alignment `|g · Δh| / (‖g‖₂ ‖Δh‖₂)` between a preactivation
/// gradient and the realized feature update at the same layer.
pub fn update_grad_alignment(g: &Vector, dh: &Vector) -> Result<f64, MetricError> {
    let denom = g.l2_norm() * dh.l2_norm();
    if denom == 0.0 {
        return Err(MetricError::ZeroDenominator);
    }
    Ok(g.dot(dh)?.abs() / denom)
}

/// Natural operator norm of a weight matrix given the density of the space
/// feeding it (the output side of a layer is always dense here).
pub fn natural_weight_norm(w: &Matrix, in_density: DensityTag) -> Result<f64, MetricError> {
    if w.is_zero() {
        return Err(MetricError::Linalg(LinalgError::ZeroMatrix));
    }
    let in_factor = match in_density {
        DensityTag::Dense => (w.cols() as f64).sqrt(),
        DensityTag::Sparse => 1.0,
    };
    Ok(spec_norm(w)? * in_factor / (w.rows() as f64).sqrt())
}
