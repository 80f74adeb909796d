//! Layerwise initialization scales and learning rates for each scaling rule,
//! plus direct spectral re-normalization of initial weights.
//!
//! Each rule maps a layer's (fan_in, fan_out) to an init standard deviation
//! `σ_ℓ` and learning rate `η_ℓ`, up to width-independent prefactors
//! `(sigma0, eta0)`:
//!
//! - `SpectralMuP`: `σ = sigma0 · fan_in^{-1/2} · min(1, √(fan_out/fan_in))`,
//!   `η = eta0 · fan_out/fan_in`. Targets spectral norms
//!   `‖W‖_* = Θ(√(fan_out/fan_in))` for both weights and updates at every
//!   layer, which is what preserves feature learning at large width.
//! - `Sp`: the ubiquitous fan-in init with a layer-independent rate.
//! - `Ntp`: same init as SP, rate `eta0 / fan_in`.
//! - `PaperExperimentMuP`: the common three-role µP table (input / hidden /
//!   readout) used in width-sweep demonstrations. Coincides with
//!   `SpectralMuP` except at an input layer whose fan-out is below its
//!   fan-in, where the general formula shrinks σ and this preset does not.
//!
//! All rules coincide at fan_in = fan_out = 1, so each can be read as a
//! width-scaling prescription applied to the same base network.

use crate::linalg::{sample_gaussian, sample_semi_orthogonal, spectral_norm_est, DensityTag, LinalgError, Matrix, Vector};
use crate::model::{MlpConfig, MlpState, ModelError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PznError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scaling rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PznKind {
    SpectralMuP,
    Sp,
    Ntp,
    PaperExperimentMuP,
}

impl PznKind {
    pub const ALL: [PznKind; 4] = [
        PznKind::SpectralMuP,
        PznKind::Sp,
        PznKind::Ntp,
        PznKind::PaperExperimentMuP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PznKind::SpectralMuP => "spectral_mu_p",
            PznKind::Sp => "sp",
            PznKind::Ntp => "ntp",
            PznKind::PaperExperimentMuP => "paper_experiment_mu_p",
        }
    }
}

/// Positional role of a layer inside the network. Only `PaperExperimentMuP`
/// distinguishes roles; the other rules are functions of fan-in/fan-out alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Input,
    Hidden,
    Readout,
}

impl LayerRole {
    /// Role of 1-based layer `ℓ` in an `L`-layer network.
    pub fn of(layer: usize, layer_count: usize) -> Self {
        if layer == 1 {
            LayerRole::Input
        } else if layer == layer_count {
            LayerRole::Readout
        } else {
            LayerRole::Hidden
        }
    }
}

/// Width-independent prefactors. `sigma0 = √2` matches common practice for
/// ReLU networks; `eta0 = 0.1` is a sensible global rate for the sweeps here.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GlobalPrefactors {
    pub sigma0: f64,
    pub eta0: f64,
    /// Bias init scale. Zero by default; set to Θ(1) to initialize biases.
    pub bias_sigma0: f64,
}

impl Default for GlobalPrefactors {
    fn default() -> Self {
        Self {
            sigma0: std::f64::consts::SQRT_2,
            eta0: 0.1,
            bias_sigma0: 0.0,
        }
    }
}

impl GlobalPrefactors {
    pub fn new(sigma0: f64, eta0: f64) -> Self {
        assert!(sigma0 > 0.0 && eta0 > 0.0, "prefactors must be positive");
        Self {
            sigma0,
            eta0,
            bias_sigma0: 0.0,
        }
    }
}

/// Per-layer hyperparameters produced by a scaling rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerHyperparams {
    /// Weight init standard deviation σ_ℓ.
    pub sigma: f64,
    /// Layer learning rate η_ℓ.
    pub eta: f64,
    /// Bias init standard deviation.
    pub sigma_b: f64,
    /// Bias learning rate. Treating a bias as a fan-in-1 column gives
    /// `η_b = eta0 · fan_out` for the µP rules.
    pub eta_b: f64,
}

/// Hyperparameters for one layer under `kind`. `role` only matters for
/// `PaperExperimentMuP`.
pub fn layer_hyperparams(
    kind: PznKind,
    role: LayerRole,
    fan_in: usize,
    fan_out: usize,
    pref: &GlobalPrefactors,
) -> LayerHyperparams {
    assert!(fan_in >= 1 && fan_out >= 1);
    let n_in = fan_in as f64;
    let n_out = fan_out as f64;
    let (sigma, eta) = match kind {
        PznKind::SpectralMuP => {
            let sigma = pref.sigma0 / n_in.sqrt() * (n_out / n_in).sqrt().min(1.0);
            let eta = pref.eta0 * n_out / n_in;
            (sigma, eta)
        }
        PznKind::Sp => (pref.sigma0 / n_in.sqrt(), pref.eta0),
        PznKind::Ntp => (pref.sigma0 / n_in.sqrt(), pref.eta0 / n_in),
        PznKind::PaperExperimentMuP => match role {
            LayerRole::Input => (pref.sigma0 / n_in.sqrt(), pref.eta0 * n_out / n_in),
            LayerRole::Hidden => (pref.sigma0 / n_in.sqrt(), pref.eta0),
            LayerRole::Readout => (pref.sigma0 / n_in, pref.eta0 / n_in),
        },
    };
    // Bias scalings, viewing the bias as a fan-in-1 weight column.
    let (sigma_b, eta_b) = match kind {
        PznKind::SpectralMuP | PznKind::PaperExperimentMuP => {
            (pref.bias_sigma0, pref.eta0 * n_out)
        }
        PznKind::Sp => (pref.bias_sigma0, pref.eta0),
        PznKind::Ntp => (pref.bias_sigma0, pref.eta0),
    };
    LayerHyperparams {
        sigma,
        eta,
        sigma_b,
        eta_b,
    }
}

/// Hyperparameters for every layer of `config`, for dense inputs.
pub fn hyperparams_for_config(
    config: &MlpConfig,
    kind: PznKind,
    pref: &GlobalPrefactors,
) -> Vec<LayerHyperparams> {
    hyperparams_for_config_with_density(config, kind, pref, DensityTag::Dense)
}

/// Hyperparameters for every layer, with the input space's density taken
/// into account.
///
/// The spectral rules assume dense inputs, `‖x‖₂ = Θ(√fan_in)`. A sparse
/// (one-hot) input space has `‖x‖₂ = 1` instead, which turns the first layer
/// into an embedding: keeping features and feature updates at `Θ(√d₁)` then
/// requires `‖W₁‖_* = Θ(√fan_out)` and `‖ΔW₁‖_* = Θ(√fan_out)` — the same
/// `Θ(1)` natural norms as every other layer, under the sparse input
/// convention. Via the Gaussian edge law and the rank-one update norm this
/// gives `σ₁ = sigma0·√fan_out/(√fan_in + √fan_out)` and
/// `η₁ = eta0·fan_out`. Only the spectral/µP kinds adjust; SP and NTP are
/// defined by their fan-in init convention and keep it.
pub fn hyperparams_for_config_with_density(
    config: &MlpConfig,
    kind: PznKind,
    pref: &GlobalPrefactors,
    input_density: DensityTag,
) -> Vec<LayerHyperparams> {
    let layers = config.layer_count();
    (1..=layers)
        .map(|l| {
            let (fan_in, fan_out) = config.fan(l);
            let mut h = layer_hyperparams(kind, LayerRole::of(l, layers), fan_in, fan_out, pref);
            let mup = matches!(kind, PznKind::SpectralMuP | PznKind::PaperExperimentMuP);
            if l == 1 && input_density == DensityTag::Sparse && mup {
                let (n_in, n_out) = (fan_in as f64, fan_out as f64);
                h.sigma = pref.sigma0 * n_out.sqrt() / (n_in.sqrt() + n_out.sqrt());
                h.eta = pref.eta0 * n_out;
            }
            h
        })
        .collect()
}

/// Weight init style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStyle {
    Gaussian,
    SemiOrthogonal,
}

/// Initialize an MLP under the given rule, for dense inputs. Gaussian layers
/// are sampled with std `σ_ℓ`; semi-orthogonal layers get an exact spectral
/// norm of `sigma0 · √(fan_out/fan_in)` for the µP rules and
/// `σ_ℓ(√fan_in + √fan_out)` (the Gaussian spectral-norm scale) for SP/NTP.
pub fn init_mlp(
    config: &MlpConfig,
    kind: PznKind,
    pref: &GlobalPrefactors,
    init_style: InitStyle,
    seed: u64,
) -> Result<MlpState, PznError> {
    init_mlp_with_density(config, kind, pref, init_style, seed, DensityTag::Dense)
}

/// [`init_mlp`] with the input space's density taken into account; see
/// [`hyperparams_for_config_with_density`].
pub fn init_mlp_with_density(
    config: &MlpConfig,
    kind: PznKind,
    pref: &GlobalPrefactors,
    init_style: InitStyle,
    seed: u64,
    input_density: DensityTag,
) -> Result<MlpState, PznError> {
    let layers = config.layer_count();
    let hyper = hyperparams_for_config_with_density(config, kind, pref, input_density);
    let mut weights = Vec::with_capacity(layers);
    for l in 1..=layers {
        let (fan_in, fan_out) = config.fan(l);
        let layer_seed = derive_seed(seed, l as u64);
        let w = match init_style {
            InitStyle::Gaussian => sample_gaussian(fan_out, fan_in, hyper[l - 1].sigma, layer_seed),
            InitStyle::SemiOrthogonal => {
                let base = sample_semi_orthogonal(fan_out, fan_in, layer_seed);
                let mup = matches!(kind, PznKind::SpectralMuP | PznKind::PaperExperimentMuP);
                let scale = if mup && l == 1 && input_density == DensityTag::Sparse {
                    // Sparse-input embedding target: ‖W₁‖_* = sigma0·√fan_out.
                    pref.sigma0 * (fan_out as f64).sqrt()
                } else if mup {
                    pref.sigma0 * (fan_out as f64 / fan_in as f64).sqrt()
                } else {
                    hyper[l - 1].sigma * ((fan_in as f64).sqrt() + (fan_out as f64).sqrt())
                };
                base.scale(scale)
            }
        };
        weights.push(w);
    }
    let biases = config.use_bias.then(|| {
        (1..=layers)
            .map(|l| {
                let (_, fan_out) = config.fan(l);
                let sigma_b = hyper[l - 1].sigma_b;
                if sigma_b == 0.0 {
                    Vector::zeros(fan_out)
                } else {
                    crate::linalg::sample_gaussian_vector(
                        fan_out,
                        sigma_b,
                        derive_seed(seed, 1000 + l as u64),
                    )
                }
            })
            .collect()
    });
    Ok(MlpState::new(config.clone(), weights, biases)?)
}

/// Rescale `M` so its spectral norm is exactly `sigma0 · √(fan_out/fan_in)`:
/// `W = sigma0 √(fan_out/fan_in) · M / ‖M‖_*`.
pub fn spectral_renormalize(
    m: &Matrix,
    fan_in: usize,
    fan_out: usize,
    sigma0: f64,
) -> Result<Matrix, PznError> {
    if m.is_zero() {
        return Err(PznError::Linalg(LinalgError::ZeroMatrix));
    }
    let norm = spectral_norm_est(m, 1e-9, 50_000).value;
    let target = sigma0 * (fan_out as f64 / fan_in as f64).sqrt();
    Ok(m.scale(target / norm))
}

/// Layers at which `PaperExperimentMuP` and `SpectralMuP` disagree for the
/// given widths (relative difference above 1e-12 on σ or η). Nonempty exactly
/// when some non-readout layer has fan-out below fan-in.
pub fn preset_mismatches(widths: &[usize], pref: &GlobalPrefactors) -> Vec<usize> {
    let layers = widths.len() - 1;
    let mut out = Vec::new();
    for l in 1..=layers {
        let (fan_in, fan_out) = (widths[l - 1], widths[l]);
        let role = LayerRole::of(l, layers);
        let a = layer_hyperparams(PznKind::PaperExperimentMuP, role, fan_in, fan_out, pref);
        let b = layer_hyperparams(PznKind::SpectralMuP, role, fan_in, fan_out, pref);
        let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
        if rel(a.sigma, b.sigma) > 1e-12 || rel(a.eta, b.eta) > 1e-12 {
            out.push(l);
        }
    }
    out
}

pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 step over base ⊕ rotated salt.
    let mut z = base ^ salt.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, spectral_norm, spectral_norm_est};
    use crate::model::Activation;

    const SQRT_2: f64 = std::f64::consts::SQRT_2;

    fn pref() -> GlobalPrefactors {
        GlobalPrefactors::default()
    }

    #[test]
    fn mup_square_layer() {
        let d = 512;
        let h = layer_hyperparams(PznKind::SpectralMuP, LayerRole::Hidden, d, d, &pref());
        assert!((h.sigma - (2.0 / d as f64).sqrt()).abs() < 1e-15);
        assert!((h.eta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mup_readout_layer() {
        let d = 512;
        let h = layer_hyperparams(PznKind::SpectralMuP, LayerRole::Readout, d, 1, &pref());
        assert!((h.sigma - SQRT_2 / d as f64).abs() < 1e-15);
        assert!((h.eta - 0.1 / d as f64).abs() < 1e-15);
    }

    #[test]
    fn ntp_layer() {
        let d = 512;
        let h = layer_hyperparams(PznKind::Ntp, LayerRole::Hidden, d, d, &pref());
        assert!((h.sigma - (2.0 / d as f64).sqrt()).abs() < 1e-15);
        assert!((h.eta - 0.1 / d as f64).abs() < 1e-15);
    }

    #[test]
    fn all_kinds_coincide_at_base_width() {
        let roles = [LayerRole::Input, LayerRole::Hidden, LayerRole::Readout];
        for kind in PznKind::ALL {
            for role in roles {
                let h = layer_hyperparams(kind, role, 1, 1, &pref());
                assert_eq!(h.sigma, SQRT_2, "{kind:?} {role:?}");
                assert_eq!(h.eta, 0.1, "{kind:?} {role:?}");
            }
        }
    }

    #[test]
    fn sp_and_ntp_share_sigma() {
        for (fan_in, fan_out) in [(64, 256), (256, 64), (100, 100)] {
            let sp = layer_hyperparams(PznKind::Sp, LayerRole::Hidden, fan_in, fan_out, &pref());
            let ntp = layer_hyperparams(PznKind::Ntp, LayerRole::Hidden, fan_in, fan_out, &pref());
            assert_eq!(sp.sigma, ntp.sigma);
            assert!(ntp.eta < sp.eta);
        }
    }

    #[test]
    fn mup_sigma_tracks_spectral_target() {
        // σ(√fan_in + √fan_out) should be Θ(√(fan_out/fan_in)).
        for (fan_in, fan_out) in [(64, 64), (64, 512), (512, 64), (256, 1024), (4096, 128)] {
            let h = layer_hyperparams(
                PznKind::SpectralMuP,
                LayerRole::Hidden,
                fan_in,
                fan_out,
                &pref(),
            );
            let lhs = h.sigma * ((fan_in as f64).sqrt() + (fan_out as f64).sqrt());
            let rhs = (fan_out as f64 / fan_in as f64).sqrt();
            let ratio = lhs / rhs;
            assert!(
                (1.0 / 3.0..=3.0).contains(&ratio),
                "ratio {ratio} at ({fan_in},{fan_out})"
            );
        }
    }

    #[test]
    fn preset_mismatch_only_at_narrow_first_layer() {
        // Hidden width below input dim: the general formula shrinks σ₁.
        assert_eq!(preset_mismatches(&[256, 64, 64, 1], &pref()), vec![1]);
        // Hidden width at or above input dim: identical everywhere.
        assert_eq!(preset_mismatches(&[256, 512, 512, 1], &pref()), Vec::<usize>::new());
    }

    #[test]
    fn init_spectral_norms_match_condition() {
        let cfg = MlpConfig::new(vec![3072, 512, 512, 1], Activation::Relu, false).unwrap();
        let state = init_mlp(&cfg, PznKind::SpectralMuP, &pref(), InitStyle::Gaussian, 7).unwrap();
        for l in 1..=3 {
            let (fan_in, fan_out) = cfg.fan(l);
            let target = (fan_out as f64 / fan_in as f64).sqrt();
            let measured = spectral_norm(state.weight(l));
            assert!(
                measured >= 0.3 * target && measured <= 3.0 * target,
                "layer {l}: ‖W‖={measured}, target Θ({target})"
            );
        }
    }

    #[test]
    fn init_semi_orthogonal_square_exact_norm() {
        let cfg = MlpConfig::new(vec![64, 64, 1], Activation::Relu, false).unwrap();
        let state = init_mlp(
            &cfg,
            PznKind::SpectralMuP,
            &pref(),
            InitStyle::SemiOrthogonal,
            8,
        )
        .unwrap();
        let measured = spectral_norm_est(state.weight(1), 1e-12, 10_000).value;
        assert!((measured - SQRT_2).abs() <= 1e-8, "measured {measured}");
    }

    #[test]
    fn ntp_readout_init_is_sqrt_d_larger_than_mup() {
        let d = 1024;
        let cfg = MlpConfig::new(vec![256, d, d, 1], Activation::Relu, false).unwrap();
        let ntp = init_mlp(&cfg, PznKind::Ntp, &pref(), InitStyle::Gaussian, 9).unwrap();
        let measured = spectral_norm(ntp.weight(3));
        // NTP readout: σ√d = sigma0, against µP's sigma0/√d.
        assert!(
            (measured - SQRT_2).abs() <= 0.3 * SQRT_2,
            "‖W_L‖ = {measured}, expected ≈ √2"
        );
        let mup = init_mlp(&cfg, PznKind::SpectralMuP, &pref(), InitStyle::Gaussian, 9).unwrap();
        let ratio = measured / spectral_norm(mup.weight(3));
        let expected = (d as f64).sqrt();
        assert!(
            ratio >= 0.3 * expected && ratio <= 3.0 * expected,
            "ratio {ratio}, expected Θ(√d) = {expected}"
        );
    }

    #[test]
    fn renormalize_hits_target() {
        let m = sample_gaussian(256, 1024, 1.0, 10);
        let r = spectral_renormalize(&m, 1024, 256, SQRT_2).unwrap();
        let target = SQRT_2 * 0.5;
        let measured = spectral_norm_est(&r, 1e-12, 10_000).value;
        assert!(
            (measured - target).abs() <= 1e-6 * target,
            "measured {measured}, target {target}"
        );
    }

    #[test]
    fn renormalize_square_unit() {
        let m = sample_gaussian(32, 32, 3.0, 11);
        let r = spectral_renormalize(&m, 32, 32, 1.0).unwrap();
        let measured = spectral_norm_est(&r, 1e-12, 10_000).value;
        assert!((measured - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn renormalize_preserves_rank_one() {
        let u = crate::linalg::sample_gaussian_vector(6, 1.0, 12);
        let v = crate::linalg::sample_gaussian_vector(4, 1.0, 13);
        let m = crate::linalg::outer(&u, &v);
        let r = spectral_renormalize(&m, 4, 6, 1.0).unwrap();
        let sr = crate::linalg::stable_rank(&r).unwrap();
        assert!((sr - 1.0).abs() <= 1e-10);
        let target = (6.0f64 / 4.0).sqrt();
        assert!((spectral_norm_est(&r, 1e-12, 1000).value - target).abs() <= 1e-8);
    }

    #[test]
    fn renormalize_zero_matrix_errors() {
        let z = Matrix::zeros(4, 4);
        assert!(matches!(
            spectral_renormalize(&z, 4, 4, 1.0),
            Err(PznError::Linalg(LinalgError::ZeroMatrix))
        ));
    }

    #[test]
    fn sparse_input_first_layer_is_an_embedding() {
        let cfg = MlpConfig::new(vec![256, 512, 512, 1], Activation::Relu, false).unwrap();
        let hyper =
            hyperparams_for_config_with_density(&cfg, PznKind::SpectralMuP, &pref(), DensityTag::Sparse);
        // First layer targets ‖W₁‖_* = sigma0·√fan_out with η₁ = eta0·fan_out.
        let expected_sigma = SQRT_2 * 512f64.sqrt() / (256f64.sqrt() + 512f64.sqrt());
        assert!((hyper[0].sigma - expected_sigma).abs() < 1e-15);
        assert!((hyper[0].eta - 0.1 * 512.0).abs() < 1e-12);
        // Later layers are untouched.
        let dense = hyperparams_for_config(&cfg, PznKind::SpectralMuP, &pref());
        assert_eq!(hyper[1], dense[1]);
        assert_eq!(hyper[2], dense[2]);
        // SP/NTP keep their fan-in convention everywhere.
        for kind in [PznKind::Sp, PznKind::Ntp] {
            let sparse = hyperparams_for_config_with_density(&cfg, kind, &pref(), DensityTag::Sparse);
            let dense = hyperparams_for_config(&cfg, kind, &pref());
            assert_eq!(sparse, dense);
        }
    }

    #[test]
    fn sparse_embedding_init_keeps_features_order_one() {
        // One-hot inputs have ‖x‖₂ = 1; the embedding first layer must still
        // produce Θ(1)-sized feature entries.
        let cfg = MlpConfig::new(vec![256, 512, 512, 1], Activation::Relu, false).unwrap();
        let state = init_mlp_with_density(
            &cfg,
            PznKind::SpectralMuP,
            &pref(),
            InitStyle::Gaussian,
            15,
            DensityTag::Sparse,
        )
        .unwrap();
        for token in [0usize, 31, 255] {
            let x = crate::linalg::Vector::one_hot(256, token);
            let rec = crate::model::forward(&state, &x).unwrap();
            for layer in 1..=2 {
                let rms = rec.preact(layer).rms_norm();
                assert!(
                    (0.2..=5.0).contains(&rms),
                    "layer {layer} rms {rms} (token {token})"
                );
            }
        }
    }

    #[test]
    fn mup_relu_forward_scale_is_order_one() {
        let cfg = MlpConfig::new(vec![3072, 512, 512, 1], Activation::Relu, false).unwrap();
        let state = init_mlp(&cfg, PznKind::SpectralMuP, &pref(), InitStyle::Gaussian, 14).unwrap();
        for seed in 0..100 {
            let x = crate::linalg::sample_gaussian_vector(3072, 1.0, 5000 + seed);
            let rec = crate::model::forward(&state, &x).unwrap();
            for layer in 1..=2 {
                let rms = rec.preact(layer).rms_norm();
                assert!(
                    (0.2..=5.0).contains(&rms),
                    "layer {layer} rms {rms} out of range (seed {seed})"
                );
            }
        }
    }
}
