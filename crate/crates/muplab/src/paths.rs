//! Pathwise decomposition of deep linear networks.
//!
//! Writing each trained weight as `W_ℓ = W⁰_ℓ + ΔW_ℓ`, the output of a
//! linear network expands into `2^L` products, one per subset `B ⊆ {1..L}`
//! of layers taken at their update rather than their initialization:
//!
//! `f_B(x) = M_L ⋯ M_1 x` with `M_ℓ = ΔW_ℓ` if `ℓ ∈ B` else `W⁰_ℓ`.
//!
//! These contributions sum to the trained network output. Their width
//! scaling separates parametrizations: under NTP only the `|B| ≤ 1` terms
//! survive at large width (training is effectively linear in the weights),
//! while a feature-learning rule keeps every `|B| ≥ 1` class at leading
//! order. A path is *maximal* when its contribution saturates the product of
//! its factors' spectral norms up to a constant.
//!
//! For nonlinear networks the same contributions are defined through an
//! inclusion-exclusion sum over forward passes; see
//! [`path_contribution_incl_excl`].

use crate::data::synthetic_gaussian;
use crate::linalg::{spectral_norm, Matrix, Vector};
use crate::model::{forward, Activation, MlpConfig, MlpState, LossKind};
use crate::optimizer::{train, UpdateRule};
use crate::parametrization::{derive_seed, init_mlp, GlobalPrefactors, InitStyle, PznKind};
use crate::sweep::{fit_slope, SlopeFit};
use thiserror::Error;

/// Enumeration bound on depth: subsets are enumerated exhaustively.
pub const MAX_PATH_LAYERS: usize = 20;

#[derive(Debug, Error)]
pub enum PathsError {
    #[error("pathwise decomposition requires a linear activation")]
    NonlinearModel,
    #[error("network depth {0} exceeds the enumeration bound {MAX_PATH_LAYERS}")]
    TooDeep(usize),
    #[error("slope undefined: need at least two widths")]
    SlopeUndefined,
    #[error("training failed: {0}")]
    Train(#[from] crate::optimizer::OptError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("fit error: {0}")]
    Fit(#[from] crate::sweep::SweepError),
}

/// A subset of layers, as a bitmask with bit `ℓ-1` for layer `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathId(pub u32);

impl PathId {
    pub fn contains(self, layer: usize) -> bool {
        self.0 & (1 << (layer - 1)) != 0
    }

    pub fn cardinality(self) -> u32 {
        self.0.count_ones()
    }

    /// All `2^L` subsets for an `L`-layer network, in mask order.
    pub fn enumerate(layer_count: usize) -> impl Iterator<Item = PathId> {
        (0u32..(1 << layer_count)).map(PathId)
    }
}

fn require_linear(state: &MlpState) -> Result<(), PathsError> {
    if state.config().activation != Activation::Linear {
        return Err(PathsError::NonlinearModel);
    }
    if state.layer_count() > MAX_PATH_LAYERS {
        return Err(PathsError::TooDeep(state.layer_count()));
    }
    Ok(())
}

/// The contribution `f_B(x)` of one path through a trained linear network,
/// via the closed product form. Cumulative updates are taken against the
/// state's construction snapshot.
pub fn path_contribution(
    state: &MlpState,
    x: &Vector,
    subset: PathId,
) -> Result<Vector, PathsError> {
    require_linear(state)?;
    let mut v = x.clone();
    for layer in 1..=state.layer_count() {
        let m = if subset.contains(layer) {
            state.weight_delta(layer)
        } else {
            state.init_weight(layer).clone()
        };
        v = m.matvec(&v).map_err(|_| PathsError::NonlinearModel)?;
    }
    Ok(v)
}

/// The same contribution computed by inclusion-exclusion over forward passes
/// with mixed weights `W⁰_ℓ + 1[ℓ ∈ B′] ΔW_ℓ`. Defined for any activation;
/// only in the linear case does it provably reduce to the product form.
/// Costs `2^|B|` forward passes.
pub fn path_contribution_incl_excl(
    state: &MlpState,
    x: &Vector,
    subset: PathId,
) -> Result<Vector, PathsError> {
    if state.layer_count() > MAX_PATH_LAYERS {
        return Err(PathsError::TooDeep(state.layer_count()));
    }
    let layers = state.layer_count();
    let members: Vec<usize> = (1..=layers).filter(|&l| subset.contains(l)).collect();
    let mut total = Vector::zeros(state.config().output_dim());
    for pick in 0u32..(1 << members.len()) {
        let mut sub_mask = 0u32;
        for (bit, &layer) in members.iter().enumerate() {
            if pick & (1 << bit) != 0 {
                sub_mask |= 1 << (layer - 1);
            }
        }
        let parity = (members.len() as u32 - pick.count_ones()) % 2;
        let sign = if parity == 0 { 1.0 } else { -1.0 };
        let out = partial_update_output(state, x, PathId(sub_mask))?;
        total = total.add(&out.scale(sign)).expect("output dims agree");
    }
    Ok(total)
}

/// Forward output with only the layers in `subset` moved to their trained
/// values (`f̃_B` in the decomposition).
fn partial_update_output(
    state: &MlpState,
    x: &Vector,
    subset: PathId,
) -> Result<Vector, PathsError> {
    let layers = state.layer_count();
    let weights: Vec<Matrix> = (1..=layers)
        .map(|l| {
            if subset.contains(l) {
                state.weight(l).clone()
            } else {
                state.init_weight(l).clone()
            }
        })
        .collect();
    let mixed = MlpState::new(state.config().clone(), weights, None)?;
    Ok(forward(&mixed, x)?.output().clone())
}

/// `‖f_B(x)‖ / (Π_ℓ ‖M_ℓ‖_* · ‖x‖₂)` with `M_ℓ` the path's factors: 1 when
/// every factor acts maximally on the signal passing through it.
pub fn path_bound_ratio(
    state: &MlpState,
    x: &Vector,
    subset: PathId,
) -> Result<f64, PathsError> {
    require_linear(state)?;
    let contribution = path_contribution(state, x, subset)?.l2_norm();
    let mut bound = x.l2_norm();
    for layer in 1..=state.layer_count() {
        let norm = if subset.contains(layer) {
            spectral_norm(&state.weight_delta(layer))
        } else {
            spectral_norm(state.init_weight(layer))
        };
        bound *= norm;
    }
    if bound == 0.0 {
        return Ok(0.0);
    }
    Ok(contribution / bound)
}

/// Whether the path saturates the spectral-norm product bound:
/// `‖f_B(x)‖ ≥ c · Π_ℓ ‖M_ℓ‖_* · ‖x‖₂` with `M_ℓ` the path's factors.
pub fn path_maximality(
    state: &MlpState,
    x: &Vector,
    subset: PathId,
    c: f64,
) -> Result<bool, PathsError> {
    Ok(path_bound_ratio(state, x, subset)? >= c)
}

/// Configuration of a pathwise width sweep over trained deep linear nets.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PathSweepConfig {
    /// Hidden widths to sweep, strictly increasing.
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pzn: PznKind,
    /// Input dimension (fixed across the sweep).
    pub input_dim: usize,
    /// Number of hidden layers; the net has `hidden_layers + 1` weight layers.
    pub hidden_layers: usize,
    pub batch: usize,
    pub steps: usize,
    pub sigma0: f64,
    pub eta0: f64,
    /// Slope above which a cardinality class counts as leading-order.
    pub leading_order_slope: f64,
    /// Constant in the maximality test.
    pub maximality_constant: f64,
}

impl Default for PathSweepConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512],
            seeds: vec![0, 1, 2],
            pzn: PznKind::PaperExperimentMuP,
            input_dim: 256,
            hidden_layers: 2,
            batch: 128,
            steps: 300,
            sigma0: std::f64::consts::SQRT_2,
            eta0: 0.1,
            leading_order_slope: -0.15,
            maximality_constant: 0.02,
        }
    }
}

/// One row of the sweep report: a (width, subset) cell averaged over seeds
/// and batch inputs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PathRow {
    pub width: usize,
    pub subset: u32,
    pub cardinality: u32,
    /// `E_x ‖f_B(x)‖₂`, averaged over seeds.
    pub norm: f64,
    /// `E_x ‖f_B(x)‖₂ / (Π_ℓ ‖M_ℓ‖_* · ‖x‖₂)`: how close the path comes to
    /// its spectral-norm product bound.
    pub mean_ratio: f64,
    /// Classification of this subset's cardinality class.
    pub leading_order: bool,
    /// Fraction of (seed, input) pairs at which the path was maximal.
    pub maximal_fraction: f64,
    /// Aggregate classification: the mean bound ratio clears the threshold.
    pub maximal: bool,
}

/// Cardinality classes used in the scaling report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum CardinalityClass {
    Empty,
    Single,
    Multi,
}

impl CardinalityClass {
    pub fn of(cardinality: u32) -> Self {
        match cardinality {
            0 => CardinalityClass::Empty,
            1 => CardinalityClass::Single,
            _ => CardinalityClass::Multi,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CardinalityClass::Empty => "|B|=0",
            CardinalityClass::Single => "|B|=1",
            CardinalityClass::Multi => "|B|>1",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassSlope {
    pub class: CardinalityClass,
    pub fit: SlopeFit,
    pub leading_order: bool,
}

/// Full report of a pathwise width sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PathReport {
    pub rows: Vec<PathRow>,
    pub class_slopes: Vec<ClassSlope>,
    /// Largest inclusion-exclusion residual `‖Σ_B f_B − f‖` seen, relative
    /// to `‖f‖`, across all (width, seed, input) triples.
    pub max_decomposition_residual: f64,
}

/// Train deep linear networks across widths and decompose their outputs into
/// path contributions, fitting a log-log slope per cardinality class.
pub fn path_scaling_sweep(cfg: &PathSweepConfig) -> Result<PathReport, PathsError> {
    if cfg.widths.len() < 2 {
        return Err(PathsError::SlopeUndefined);
    }
    let layers = cfg.hidden_layers + 1;
    if layers > MAX_PATH_LAYERS {
        return Err(PathsError::TooDeep(layers));
    }
    let pref = GlobalPrefactors {
        sigma0: cfg.sigma0,
        eta0: cfg.eta0,
        bias_sigma0: 0.0,
    };
    let n_subsets = 1usize << layers;
    // norms[width_idx][subset] accumulated over seeds.
    let mut norms = vec![vec![0.0f64; n_subsets]; cfg.widths.len()];
    let mut ratios = vec![vec![0.0f64; n_subsets]; cfg.widths.len()];
    let mut maximal_counts = vec![vec![0usize; n_subsets]; cfg.widths.len()];
    let mut probe_counts = vec![0usize; cfg.widths.len()];
    let mut max_residual = 0.0f64;

    for (wi, &width) in cfg.widths.iter().enumerate() {
        for &seed in &cfg.seeds {
            let mut widths = vec![cfg.input_dim];
            widths.extend(std::iter::repeat_n(width, cfg.hidden_layers));
            widths.push(1);
            let net_cfg = MlpConfig::new(widths, Activation::Linear, false)?;
            let mut state = init_mlp(
                &net_cfg,
                cfg.pzn,
                &pref,
                InitStyle::Gaussian,
                derive_seed(seed, width as u64),
            )
            .map_err(|e| match e {
                crate::parametrization::PznError::Model(m) => PathsError::Model(m),
                crate::parametrization::PznError::Linalg(_) => PathsError::NonlinearModel,
            })?;
            let data = synthetic_gaussian(cfg.batch, cfg.input_dim, derive_seed(seed, 0xda7a));
            let rule = UpdateRule::layerwise_sgd(state.config(), cfg.pzn, &pref);
            train(&mut state, &data, &rule, cfg.steps, LossKind::SquaredError, None)?;

            // Probe on a subset of the batch; contributions are averaged.
            let probes = data.inputs.iter().take(16).collect::<Vec<_>>();
            for x in &probes {
                let mut total = Vector::zeros(1);
                for subset in PathId::enumerate(layers) {
                    let f_b = path_contribution(&state, x, subset)?;
                    norms[wi][subset.0 as usize] += f_b.l2_norm();
                    let ratio = path_bound_ratio(&state, x, subset)?;
                    ratios[wi][subset.0 as usize] += ratio;
                    if ratio >= cfg.maximality_constant {
                        maximal_counts[wi][subset.0 as usize] += 1;
                    }
                    total = total.add(&f_b).expect("output dims agree");
                }
                let full = forward(&state, x)?.output().clone();
                let residual = total.sub(&full).expect("dims").l2_norm()
                    / full.l2_norm().max(f64::MIN_POSITIVE);
                max_residual = max_residual.max(residual);
            }
            probe_counts[wi] += probes.len();
        }
    }

    for (wi, row) in norms.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= probe_counts[wi] as f64;
        }
        for v in ratios[wi].iter_mut() {
            *v /= probe_counts[wi] as f64;
        }
    }

    // Class slopes: mean norm over the subsets of each class, fit vs width.
    let mut class_slopes = Vec::new();
    for class in [
        CardinalityClass::Empty,
        CardinalityClass::Single,
        CardinalityClass::Multi,
    ] {
        let points: Vec<(f64, f64)> = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(wi, &w)| {
                let members: Vec<usize> = (0..n_subsets)
                    .filter(|&s| CardinalityClass::of((s as u32).count_ones()) == class)
                    .collect();
                let mean =
                    members.iter().map(|&s| norms[wi][s]).sum::<f64>() / members.len() as f64;
                (w as f64, mean)
            })
            .collect();
        let fit = fit_slope(&points)?;
        class_slopes.push(ClassSlope {
            class,
            leading_order: fit.slope >= cfg.leading_order_slope,
            fit,
        });
    }

    let class_leading = |card: u32| {
        class_slopes
            .iter()
            .find(|c| c.class == CardinalityClass::of(card))
            .map(|c| c.leading_order)
            .unwrap_or(false)
    };

    let mut rows = Vec::new();
    for (wi, &width) in cfg.widths.iter().enumerate() {
        for subset in 0..n_subsets {
            let cardinality = (subset as u32).count_ones();
            let maximal_fraction = maximal_counts[wi][subset] as f64 / probe_counts[wi] as f64;
            rows.push(PathRow {
                width,
                subset: subset as u32,
                cardinality,
                norm: norms[wi][subset],
                mean_ratio: ratios[wi][subset],
                leading_order: class_leading(cardinality),
                maximal_fraction,
                maximal: ratios[wi][subset] >= cfg.maximality_constant,
            });
        }
    }

    Ok(PathReport {
        rows,
        class_slopes,
        max_decomposition_residual: max_residual,
    })
}

/// Write a path report as CSV: one row per (width, subset).
pub fn write_path_report_csv<W: std::io::Write>(
    report: &PathReport,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "width",
        "subset",
        "cardinality",
        "norm",
        "mean_ratio",
        "leading_order",
        "maximal",
        "maximal_fraction",
    ])?;
    for row in &report.rows {
        w.write_record([
            row.width.to_string(),
            format!("{:#b}", row.subset),
            row.cardinality.to_string(),
            format!("{}", row.norm),
            format!("{}", row.mean_ratio),
            row.leading_order.to_string(),
            row.maximal.to_string(),
            format!("{}", row.maximal_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_gaussian_vector;

    fn trained_linear_net(width: usize, seed: u64, steps: usize) -> (MlpState, Vector) {
        let cfg = MlpConfig::new(vec![32, width, width, 1], Activation::Linear, false).unwrap();
        let pref = GlobalPrefactors::default();
        let mut state = init_mlp(
            &cfg,
            PznKind::PaperExperimentMuP,
            &pref,
            InitStyle::Gaussian,
            seed,
        )
        .unwrap();
        let data = synthetic_gaussian(16, 32, seed);
        let rule = UpdateRule::layerwise_sgd(state.config(), PznKind::PaperExperimentMuP, &pref);
        train(&mut state, &data, &rule, steps, LossKind::SquaredError, None).unwrap();
        (state, data.inputs[0].clone())
    }

    #[test]
    fn empty_subset_is_function_at_init() {
        let (state, x) = trained_linear_net(24, 1, 50);
        let f_empty = path_contribution(&state, &x, PathId(0)).unwrap();
        let mut init = state.clone();
        init.restore_snapshot();
        let expected = forward(&init, &x).unwrap().output().clone();
        for (a, b) in f_empty.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn full_subset_zero_when_untrained() {
        let (state, x) = trained_linear_net(24, 2, 0);
        let f_full = path_contribution(&state, &x, PathId(0b111)).unwrap();
        assert!(f_full.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contributions_sum_to_trained_output() {
        let (state, x) = trained_linear_net(24, 3, 80);
        let mut total = Vector::zeros(1);
        for subset in PathId::enumerate(3) {
            total = total
                .add(&path_contribution(&state, &x, subset).unwrap())
                .unwrap();
        }
        let full = forward(&state, &x).unwrap().output().clone();
        let res = total.sub(&full).unwrap().l2_norm();
        assert!(res <= 1e-8 * full.l2_norm().max(1.0), "residual {res}");
    }

    #[test]
    fn product_form_matches_inclusion_exclusion() {
        let (state, x) = trained_linear_net(16, 4, 60);
        for subset in PathId::enumerate(3) {
            let a = path_contribution(&state, &x, subset).unwrap();
            let b = path_contribution_incl_excl(&state, &x, subset).unwrap();
            let diff = a.sub(&b).unwrap().l2_norm();
            let scale = a.l2_norm().max(1e-9);
            assert!(diff <= 1e-8 * scale, "subset {:#b}: diff {diff}", subset.0);
        }
    }

    #[test]
    fn nonlinear_model_rejected() {
        let cfg = MlpConfig::new(vec![8, 8, 1], Activation::Relu, false).unwrap();
        let state = init_mlp(
            &cfg,
            PznKind::PaperExperimentMuP,
            &GlobalPrefactors::default(),
            InitStyle::Gaussian,
            5,
        )
        .unwrap();
        let x = sample_gaussian_vector(8, 1.0, 5);
        assert!(matches!(
            path_contribution(&state, &x, PathId(0)),
            Err(PathsError::NonlinearModel)
        ));
    }

    #[test]
    fn single_layer_update_path_is_maximal() {
        // For an L=1 net the {1} path is the update itself, which aligns
        // exactly with the input that produced it.
        let cfg = MlpConfig::new(vec![16, 1], Activation::Linear, false).unwrap();
        let pref = GlobalPrefactors::default();
        let mut state = init_mlp(
            &cfg,
            PznKind::PaperExperimentMuP,
            &pref,
            InitStyle::Gaussian,
            6,
        )
        .unwrap();
        let data = synthetic_gaussian(1, 16, 6);
        let rule = UpdateRule::layerwise_sgd(state.config(), PznKind::PaperExperimentMuP, &pref);
        train(&mut state, &data, &rule, 1, LossKind::SquaredError, None).unwrap();
        assert!(path_maximality(&state, &data.inputs[0], PathId(0b1), 0.05).unwrap());
    }

    #[test]
    fn sweep_needs_two_widths() {
        let cfg = PathSweepConfig {
            widths: vec![64],
            ..Default::default()
        };
        assert!(matches!(
            path_scaling_sweep(&cfg),
            Err(PathsError::SlopeUndefined)
        ));
    }
}
