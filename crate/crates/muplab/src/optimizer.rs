//! Weight-update rules and the full-batch training loop.
//!
//! Five update rules are supported:
//! - `LayerwiseSgd`: `ΔW_ℓ = −η_ℓ ∇_{W_ℓ}L` with per-layer rates.
//! - `SpectralNormalized`: the gradient is normalized by its spectral norm
//!   and rescaled so `‖ΔW_ℓ‖_* = eta0 · √(fan_out/fan_in)` exactly.
//! - `FrobeniusApprox`: same, with the (cheaper) Frobenius norm standing in
//!   for the spectral norm — exact for rank-one gradients.
//! - `WidthCorrectedFrobenius`: `‖ΔW_ℓ‖_F = eta0 · ‖W_ℓ‖_F / √min(fan)`:
//!   the Frobenius-proportional rule corrected for the stable-rank gap
//!   between weights and updates.
//! - `SignSgd`: `ΔW_ℓ = −η_ℓ · sign(∇)` entrywise, with sign(0) = 0; the
//!   momentum-free entrywise optimizer.
//!
//! `apply_update` returns the *effective* per-layer deltas, i.e. the exact
//! floating-point change applied to each weight, so that subtracting a delta
//! restores the previous weights bitwise.

use crate::data::Batch;
use crate::linalg::{spectral_norm_est, Matrix, Vector};
use crate::model::{
    batch_forward_backward, BatchPass, GradientRecord, LossKind, MlpConfig, MlpState, ModelError,
};
use crate::linalg::DensityTag;
use crate::parametrization::{
    hyperparams_for_config, hyperparams_for_config_with_density, GlobalPrefactors, PznKind,
};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("rule carries {expected} layer rates but network has {got} layers")]
    RateCount { expected: usize, got: usize },
}

/// Tolerance used when spectrally normalizing gradients. Gradients have low
/// stable rank, so power iteration converges fast; a tight tolerance keeps
/// the realized update norm within ~1e-9 of its target.
const GRAD_NORM_TOL: f64 = 1e-10;
const GRAD_NORM_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRule {
    LayerwiseSgd {
        etas: Vec<f64>,
        bias_etas: Option<Vec<f64>>,
    },
    SpectralNormalized {
        eta0: f64,
    },
    FrobeniusApprox {
        eta0: f64,
    },
    WidthCorrectedFrobenius {
        eta0: f64,
    },
    SignSgd {
        etas: Vec<f64>,
        bias_etas: Option<Vec<f64>>,
    },
}

impl UpdateRule {
    /// Layerwise SGD with rates from a scaling rule (dense inputs).
    pub fn layerwise_sgd(config: &MlpConfig, kind: PznKind, pref: &GlobalPrefactors) -> Self {
        let hyper = hyperparams_for_config(config, kind, pref);
        UpdateRule::LayerwiseSgd {
            etas: hyper.iter().map(|h| h.eta).collect(),
            bias_etas: config
                .use_bias
                .then(|| hyper.iter().map(|h| h.eta_b).collect()),
        }
    }

    /// Layerwise SGD with the input space's density taken into account.
    pub fn layerwise_sgd_with_density(
        config: &MlpConfig,
        kind: PznKind,
        pref: &GlobalPrefactors,
        input_density: DensityTag,
    ) -> Self {
        let hyper = hyperparams_for_config_with_density(config, kind, pref, input_density);
        UpdateRule::LayerwiseSgd {
            etas: hyper.iter().map(|h| h.eta).collect(),
            bias_etas: config
                .use_bias
                .then(|| hyper.iter().map(|h| h.eta_b).collect()),
        }
    }

    /// SignSGD with rates from a scaling rule (dense inputs).
    pub fn sign_sgd(config: &MlpConfig, kind: PznKind, pref: &GlobalPrefactors) -> Self {
        let hyper = hyperparams_for_config(config, kind, pref);
        UpdateRule::SignSgd {
            etas: hyper.iter().map(|h| h.eta).collect(),
            bias_etas: config
                .use_bias
                .then(|| hyper.iter().map(|h| h.eta_b).collect()),
        }
    }

    /// SignSGD with the input space's density taken into account.
    pub fn sign_sgd_with_density(
        config: &MlpConfig,
        kind: PznKind,
        pref: &GlobalPrefactors,
        input_density: DensityTag,
    ) -> Self {
        let hyper = hyperparams_for_config_with_density(config, kind, pref, input_density);
        UpdateRule::SignSgd {
            etas: hyper.iter().map(|h| h.eta).collect(),
            bias_etas: config
                .use_bias
                .then(|| hyper.iter().map(|h| h.eta_b).collect()),
        }
    }

    fn check_rates(&self, layers: usize) -> Result<(), OptError> {
        let count = match self {
            UpdateRule::LayerwiseSgd { etas, .. } | UpdateRule::SignSgd { etas, .. } => etas.len(),
            _ => layers,
        };
        if count != layers {
            return Err(OptError::RateCount {
                expected: count,
                got: layers,
            });
        }
        Ok(())
    }
}

/// Outcome of one `apply_update` call.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    /// Effective per-layer weight deltas, exactly as applied.
    pub deltas: Vec<Matrix>,
    /// Layers whose step was skipped because the gradient norm was zero
    /// (normalized rules only). Their delta is the zero matrix.
    pub skipped_layers: Vec<usize>,
    /// Weights (and biases) as they were before the step, for exact reverts.
    /// Floating-point subtraction of a delta cannot restore a weight bitwise
    /// in general, so reverts go through this bookkeeping instead.
    previous_weights: Vec<Matrix>,
    previous_biases: Option<Vec<Vector>>,
}

/// Undo an update, restoring the exact pre-step weights and biases.
pub fn revert_update(state: &mut MlpState, outcome: &UpdateOutcome) {
    for (layer, w) in outcome.previous_weights.iter().enumerate() {
        *state.weight_mut(layer + 1) = w.clone();
    }
    if let Some(prev) = &outcome.previous_biases {
        for (layer, b) in prev.iter().enumerate() {
            if let Some(cur) = state.bias_mut(layer + 1) {
                *cur = b.clone();
            }
        }
    }
}

/// Apply one update to every layer in place and return the applied deltas.
pub fn apply_update(
    state: &mut MlpState,
    grads: &GradientRecord,
    rule: &UpdateRule,
) -> Result<UpdateOutcome, OptError> {
    apply_update_impl(state, grads, rule, true)
}

/// Hot-path form: when `materialize` is false, neither per-layer deltas nor
/// the revert snapshot are built, and the returned outcome is empty apart
/// from `skipped_layers`. The training loop uses this when no recorder is
/// attached.
fn apply_update_impl(
    state: &mut MlpState,
    grads: &GradientRecord,
    rule: &UpdateRule,
    materialize: bool,
) -> Result<UpdateOutcome, OptError> {
    let layers = state.layer_count();
    rule.check_rates(layers)?;
    if grads.weight_grads.len() != layers {
        return Err(OptError::Model(ModelError::ShapeMismatch {
            expected: format!("{layers} weight gradients"),
            got: format!("{}", grads.weight_grads.len()),
        }));
    }

    let previous_weights: Vec<Matrix> = if materialize {
        (1..=layers).map(|l| state.weight(l).clone()).collect()
    } else {
        Vec::new()
    };
    let previous_biases: Option<Vec<Vector>> = if materialize {
        state.bias(1).is_some().then(|| {
            (1..=layers)
                .map(|l| state.bias(l).expect("biases present").clone())
                .collect()
        })
    } else {
        None
    };
    let mut deltas = Vec::with_capacity(if materialize { layers } else { 0 });
    let mut skipped_layers = Vec::new();
    for layer in 1..=layers {
        let grad = grads.weight_grad(layer);
        let (fan_in, fan_out) = state.config().fan(layer);
        let shape_factor = (fan_out as f64 / fan_in as f64).sqrt();

        enum Step {
            Scale(f64),
            Sign(f64),
            Skip,
        }
        let step = match rule {
            UpdateRule::LayerwiseSgd { etas, .. } => Step::Scale(-etas[layer - 1]),
            UpdateRule::SpectralNormalized { eta0 } => {
                let norm = spectral_norm_est(grad, GRAD_NORM_TOL, GRAD_NORM_MAX_ITERS).value;
                if norm == 0.0 {
                    Step::Skip
                } else {
                    Step::Scale(-eta0 * shape_factor / norm)
                }
            }
            UpdateRule::FrobeniusApprox { eta0 } => {
                let norm = grad.frobenius_norm();
                if norm == 0.0 {
                    Step::Skip
                } else {
                    Step::Scale(-eta0 * shape_factor / norm)
                }
            }
            UpdateRule::WidthCorrectedFrobenius { eta0 } => {
                let norm = grad.frobenius_norm();
                if norm == 0.0 {
                    Step::Skip
                } else {
                    let target =
                        eta0 * state.weight(layer).frobenius_norm() / (fan_in.min(fan_out) as f64).sqrt();
                    Step::Scale(-target / norm)
                }
            }
            UpdateRule::SignSgd { etas, .. } => Step::Sign(-etas[layer - 1]),
        };

        if materialize {
            let delta = match step {
                Step::Skip => {
                    skipped_layers.push(layer);
                    Matrix::zeros(fan_out, fan_in)
                }
                Step::Scale(alpha) => {
                    let w = state.weight_mut(layer);
                    let mut delta = Matrix::zeros(fan_out, fan_in);
                    for ((wi, gi), di) in w
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .zip(delta.as_mut_slice())
                    {
                        let old = *wi;
                        let new = old + alpha * gi;
                        *wi = new;
                        *di = new - old;
                    }
                    delta
                }
                Step::Sign(alpha) => {
                    let w = state.weight_mut(layer);
                    let mut delta = Matrix::zeros(fan_out, fan_in);
                    for ((wi, gi), di) in w
                        .as_mut_slice()
                        .iter_mut()
                        .zip(grad.as_slice())
                        .zip(delta.as_mut_slice())
                    {
                        let old = *wi;
                        let new = old + alpha * signum0(*gi);
                        *wi = new;
                        *di = new - old;
                    }
                    delta
                }
            };
            deltas.push(delta);
        } else {
            match step {
                Step::Skip => skipped_layers.push(layer),
                Step::Scale(alpha) => {
                    let w = state.weight_mut(layer);
                    for (wi, gi) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *wi = gi.mul_add(alpha, *wi);
                    }
                }
                Step::Sign(alpha) => {
                    let w = state.weight_mut(layer);
                    for (wi, gi) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                        *wi += alpha * signum0(*gi);
                    }
                }
            }
        }
    }

    // Bias steps: plain SGD with the bias rates, for the rules that carry them.
    let bias_etas = match rule {
        UpdateRule::LayerwiseSgd { bias_etas, .. } | UpdateRule::SignSgd { bias_etas, .. } => {
            bias_etas.as_ref()
        }
        _ => None,
    };
    if let (Some(bias_etas), Some(bias_grads)) = (bias_etas, grads.bias_grads.as_ref()) {
        let sign_rule = matches!(rule, UpdateRule::SignSgd { .. });
        for layer in 1..=layers {
            let eta_b = bias_etas[layer - 1];
            let g = &bias_grads[layer - 1];
            if let Some(b) = state.bias_mut(layer) {
                for (bi, gi) in b.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    let step = if sign_rule { signum0(*gi) } else { *gi };
                    *bi -= eta_b * step;
                }
            }
        }
    }

    Ok(UpdateOutcome {
        deltas,
        skipped_layers,
        previous_weights,
        previous_biases,
    })
}

#[inline]
fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Hook invoked after every training step.
pub trait Recorder {
    /// `pass` holds the activations and gradients that produced this step's
    /// update; `deltas` are the weight changes just applied to `state`.
    fn on_step(&mut self, step: usize, state: &MlpState, pass: &BatchPass, deltas: &[Matrix]);
}

/// Result of a training run. `diverged_at` carries the step index at which
/// the loss became non-finite; the trajectory is truncated at that step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Full-batch gradient descent for `steps` steps. The loss trajectory holds
/// the pre-update loss of each completed step. Divergence (non-finite loss)
/// is a first-class outcome, not an error.
pub fn train(
    state: &mut MlpState,
    data: &Batch,
    rule: &UpdateRule,
    steps: usize,
    loss_kind: LossKind,
    mut recorder: Option<&mut dyn Recorder>,
) -> Result<TrainOutcome, OptError> {
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let pass = batch_forward_backward(state, &data.inputs, &data.targets, loss_kind)?;
        if !pass.mean_loss.is_finite() {
            return Ok(TrainOutcome {
                losses,
                diverged_at: Some(step),
            });
        }
        losses.push(pass.mean_loss);
        let outcome = apply_update_impl(state, &pass.grads, rule, recorder.is_some())?;
        if let Some(rec) = recorder.as_deref_mut() {
            rec.on_step(step, state, &pass, &outcome.deltas);
        }
    }
    Ok(TrainOutcome {
        losses,
        diverged_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_gaussian;
    use crate::linalg::{outer, sample_gaussian_vector, spectral_norm_est, stable_rank, Vector};
    use crate::model::Activation;
    use crate::parametrization::{init_mlp, InitStyle};

    fn small_net(seed: u64) -> MlpState {
        let cfg = MlpConfig::new(vec![8, 16, 16, 1], Activation::Relu, false).unwrap();
        init_mlp(
            &cfg,
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
            InitStyle::Gaussian,
            seed,
        )
        .unwrap()
    }

    fn grads_for(state: &MlpState, data: &Batch) -> BatchPass {
        batch_forward_backward(state, &data.inputs, &data.targets, LossKind::SquaredError).unwrap()
    }

    #[test]
    fn zero_rate_leaves_state_unchanged() {
        let mut state = small_net(1);
        let data = synthetic_gaussian(4, 8, 1);
        let pass = grads_for(&state, &data);
        let before: Vec<Matrix> = (1..=3).map(|l| state.weight(l).clone()).collect();
        let rule = UpdateRule::LayerwiseSgd {
            etas: vec![0.0; 3],
            bias_etas: None,
        };
        let outcome = apply_update(&mut state, &pass.grads, &rule).unwrap();
        for (l, w) in before.iter().enumerate() {
            assert_eq!(state.weight(l + 1), w);
            assert!(outcome.deltas[l].is_zero());
        }
    }

    #[test]
    fn spectral_normalized_step_has_target_norm() {
        let mut state = small_net(2);
        let data = synthetic_gaussian(4, 8, 2);
        let pass = grads_for(&state, &data);
        let rule = UpdateRule::SpectralNormalized { eta0: 0.2 };
        let outcome = apply_update(&mut state, &pass.grads, &rule).unwrap();
        for layer in 1..=3 {
            let (fan_in, fan_out) = state.config().fan(layer);
            let target = 0.2 * (fan_out as f64 / fan_in as f64).sqrt();
            let measured = spectral_norm_est(&outcome.deltas[layer - 1], 1e-12, 100_000).value;
            assert!(
                (measured - target).abs() <= 1e-5 * target,
                "layer {layer}: {measured} vs {target}"
            );
        }
    }

    #[test]
    fn sign_sgd_factorizes_over_rank_one() {
        let u = sample_gaussian_vector(6, 1.0, 3);
        let v = sample_gaussian_vector(9, 1.0, 4);
        let grad = outer(&u, &v);
        let cfg = MlpConfig::new(vec![9, 6], Activation::Linear, false).unwrap();
        let w0 = crate::linalg::Matrix::zeros(6, 9);
        let mut state = MlpState::new(cfg, vec![w0], None).unwrap();
        let rule = UpdateRule::SignSgd {
            etas: vec![0.5],
            bias_etas: None,
        };
        let grads = GradientRecord {
            preact_grads: vec![Vector::zeros(6)],
            weight_grads: vec![grad],
            bias_grads: None,
        };
        let outcome = apply_update(&mut state, &grads, &rule).unwrap();
        let su = Vector::from_fn(6, |i| signum0(u.as_slice()[i]));
        let sv = Vector::from_fn(9, |i| signum0(v.as_slice()[i]));
        let expected = outer(&su, &sv).scale(-0.5);
        assert_eq!(outcome.deltas[0], expected);
        assert!((stable_rank(&outcome.deltas[0]).unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn frobenius_approx_matches_spectral_on_rank_one_gradient() {
        // Batch-1 gradients are rank one, where ‖·‖_F = ‖·‖_*.
        let data = synthetic_gaussian(1, 8, 5);
        let state0 = small_net(5);
        let pass = grads_for(&state0, &data);

        let mut s1 = state0.clone();
        let o1 = apply_update(&mut s1, &pass.grads, &UpdateRule::SpectralNormalized { eta0: 0.1 })
            .unwrap();
        let mut s2 = state0.clone();
        let o2 =
            apply_update(&mut s2, &pass.grads, &UpdateRule::FrobeniusApprox { eta0: 0.1 }).unwrap();
        for (a, b) in o1.deltas.iter().zip(&o2.deltas) {
            let scale = a.frobenius_norm().max(1e-30);
            let diff = a.sub(b).unwrap().frobenius_norm();
            assert!(diff <= 1e-8 * scale, "diff {diff} vs scale {scale}");
        }
    }

    #[test]
    fn width_corrected_frobenius_hits_target() {
        let mut state = small_net(6);
        let data = synthetic_gaussian(4, 8, 6);
        let pass = grads_for(&state, &data);
        let weight_frobs: Vec<f64> = (1..=3).map(|l| state.weight(l).frobenius_norm()).collect();
        let rule = UpdateRule::WidthCorrectedFrobenius { eta0: 0.3 };
        let outcome = apply_update(&mut state, &pass.grads, &rule).unwrap();
        for layer in 1..=3 {
            let (fan_in, fan_out) = state.config().fan(layer);
            let target = 0.3 * weight_frobs[layer - 1] / (fan_in.min(fan_out) as f64).sqrt();
            let measured = outcome.deltas[layer - 1].frobenius_norm();
            assert!(
                (measured - target).abs() <= 1e-10 * target,
                "layer {layer}: {measured} vs {target}"
            );
        }
    }

    #[test]
    fn normalized_rule_skips_zero_gradient_layers() {
        let cfg = MlpConfig::new(vec![4, 4], Activation::Linear, false).unwrap();
        let w = crate::linalg::sample_gaussian(4, 4, 1.0, 7);
        let mut state = MlpState::new(cfg, vec![w.clone()], None).unwrap();
        let grads = GradientRecord {
            preact_grads: vec![Vector::zeros(4)],
            weight_grads: vec![Matrix::zeros(4, 4)],
            bias_grads: None,
        };
        let outcome =
            apply_update(&mut state, &grads, &UpdateRule::SpectralNormalized { eta0: 0.1 })
                .unwrap();
        assert_eq!(outcome.skipped_layers, vec![1]);
        assert_eq!(state.weight(1), &w);
    }

    #[test]
    fn revert_restores_weights_bitwise() {
        let mut state = small_net(8);
        let data = synthetic_gaussian(8, 8, 8);
        let pass = grads_for(&state, &data);
        let before: Vec<Matrix> = (1..=3).map(|l| state.weight(l).clone()).collect();
        let rule = UpdateRule::layerwise_sgd(
            state.config(),
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
        );
        let outcome = apply_update(&mut state, &pass.grads, &rule).unwrap();
        // The applied deltas really are the realized weight changes (up to
        // the one rounding of the addition)...
        for layer in 1..=3 {
            let recon = before[layer - 1].add(&outcome.deltas[layer - 1]).unwrap();
            for (a, b) in recon.as_slice().iter().zip(state.weight(layer).as_slice()) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300), "layer {layer}");
            }
        }
        // ...and the revert bookkeeping restores the pre-step weights bitwise.
        revert_update(&mut state, &outcome);
        for layer in 1..=3 {
            assert_eq!(state.weight(layer), &before[layer - 1], "layer {layer} not restored");
        }
    }

    #[test]
    fn zero_steps_gives_empty_trajectory() {
        let mut state = small_net(9);
        let snapshot: Vec<Matrix> = (1..=3).map(|l| state.weight(l).clone()).collect();
        let data = synthetic_gaussian(4, 8, 9);
        let rule = UpdateRule::layerwise_sgd(
            state.config(),
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
        );
        let outcome = train(&mut state, &data, &rule, 0, LossKind::SquaredError, None).unwrap();
        assert!(outcome.losses.is_empty());
        assert!(!outcome.diverged());
        for (l, w) in snapshot.iter().enumerate() {
            assert_eq!(state.weight(l + 1), w);
        }
    }

    #[test]
    fn mup_loss_monotone_over_first_steps() {
        // Engineering sanity check at the default rate, not a theorem.
        let cfg = MlpConfig::new(vec![16, 64, 64, 1], Activation::Relu, false).unwrap();
        let mut state = init_mlp(
            &cfg,
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
            InitStyle::Gaussian,
            10,
        )
        .unwrap();
        let data = synthetic_gaussian(32, 16, 10);
        let rule = UpdateRule::layerwise_sgd(
            state.config(),
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
        );
        let outcome = train(&mut state, &data, &rule, 10, LossKind::SquaredError, None).unwrap();
        assert!(!outcome.diverged());
        for pair in outcome.losses.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-12),
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn claim_two_exactness_batch_one() {
        // One batch-1 SGD step: ‖ΔW h′‖ = ‖ΔW‖_* ‖h′‖ exactly.
        let mut state = small_net(11);
        let data = synthetic_gaussian(1, 8, 11);
        let pass = grads_for(&state, &data);
        let rule = UpdateRule::layerwise_sgd(
            state.config(),
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
        );
        let outcome = apply_update(&mut state, &pass.grads, &rule).unwrap();
        let rec = &pass.records[0];
        for layer in 1..=3 {
            let delta = &outcome.deltas[layer - 1];
            if delta.is_zero() {
                continue;
            }
            let input = rec.layer_input(layer);
            let lhs = delta.matvec(input).unwrap().l2_norm();
            let rhs = spectral_norm_est(delta, 1e-13, 100_000).value * input.l2_norm();
            assert!(
                (lhs - rhs).abs() <= 1e-8 * rhs.max(1e-300),
                "layer {layer}: {lhs} vs {rhs}"
            );
        }
    }
}
