//! Maximality classification of paths through trained deep linear networks.
//!
//! A path is maximal when its contribution saturates the product of its
//! factors' spectral norms up to the configured constant. Judged on the
//! bound ratio averaged over probe inputs: per-input ratios fluctuate, the
//! mean separates the classes cleanly.

use muplab::data::synthetic_gaussian;
use muplab::linalg::Vector;
use muplab::model::{Activation, LossKind, MlpConfig, MlpState};
use muplab::optimizer::{train, UpdateRule};
use muplab::parametrization::{init_mlp, GlobalPrefactors, InitStyle, PznKind};
use muplab::paths::{path_bound_ratio, path_maximality, PathId, PathSweepConfig};

fn maximality_c() -> f64 {
    PathSweepConfig::default().maximality_constant
}

fn trained_linear(pzn: PznKind, width: usize, steps: usize, seed: u64) -> (MlpState, Vec<Vector>) {
    let cfg = MlpConfig::new(vec![256, width, width, 1], Activation::Linear, false).unwrap();
    let pref = GlobalPrefactors::default();
    let mut state = init_mlp(&cfg, pzn, &pref, InitStyle::Gaussian, seed).unwrap();
    let data = synthetic_gaussian(128, 256, seed);
    let rule = UpdateRule::layerwise_sgd(&cfg, pzn, &pref);
    let outcome = train(&mut state, &data, &rule, steps, LossKind::SquaredError, None).unwrap();
    assert!(!outcome.diverged());
    (state, data.inputs.into_iter().take(16).collect())
}

fn mean_ratio(state: &MlpState, probes: &[Vector], subset: PathId) -> f64 {
    probes
        .iter()
        .map(|x| path_bound_ratio(state, x, subset).unwrap())
        .sum::<f64>()
        / probes.len() as f64
}

#[test]
fn degree_zero_path_is_never_maximal_at_large_width() {
    for pzn in [PznKind::PaperExperimentMuP, PznKind::Ntp] {
        let (state, probes) = trained_linear(pzn, 1024, 300, 11);
        let ratio = mean_ratio(&state, &probes, PathId(0));
        assert!(
            ratio < maximality_c(),
            "{pzn:?}: untrained path ratio {ratio:.4} clears the threshold"
        );
    }
}

#[test]
fn feature_learning_makes_all_update_paths_maximal() {
    // Full maximality table at width 1024: every |B| ≥ 1 path maximal under
    // the feature-learning rule.
    let (state, probes) = trained_linear(PznKind::PaperExperimentMuP, 1024, 300, 12);
    for subset in PathId::enumerate(3).skip(1) {
        let ratio = mean_ratio(&state, &probes, subset);
        assert!(
            ratio >= maximality_c(),
            "subset {:#05b}: mean ratio {ratio:.4} below threshold",
            subset.0
        );
    }
}

#[test]
fn mup_full_interaction_path_maximal_at_width_512() {
    let (state, probes) = trained_linear(PznKind::PaperExperimentMuP, 512, 300, 13);
    let ratio = mean_ratio(&state, &probes, PathId(0b111));
    assert!(
        ratio >= maximality_c(),
        "all-updates path mean ratio {ratio:.4} below threshold"
    );
}

#[test]
fn lazy_training_keeps_only_single_update_paths_maximal() {
    let (state, probes) = trained_linear(PznKind::Ntp, 1024, 300, 14);
    let c = maximality_c();
    for layer in 1..=3u32 {
        let single = PathId(1 << (layer - 1));
        let ratio = mean_ratio(&state, &probes, single);
        assert!(
            ratio >= c,
            "single-update path {:#05b} mean ratio {ratio:.4} below threshold",
            single.0
        );
    }
    for subset in PathId::enumerate(3).filter(|s| s.cardinality() >= 2) {
        let ratio = mean_ratio(&state, &probes, subset);
        assert!(
            ratio < c,
            "multi-update path {:#05b} mean ratio {ratio:.4} clears the threshold under lazy training",
            subset.0
        );
    }
}

#[test]
fn per_input_maximality_matches_ratio_threshold() {
    let (state, probes) = trained_linear(PznKind::PaperExperimentMuP, 128, 100, 15);
    for subset in PathId::enumerate(3) {
        for x in &probes {
            let ratio = path_bound_ratio(&state, x, subset).unwrap();
            assert_eq!(
                path_maximality(&state, x, subset, 0.03).unwrap(),
                ratio >= 0.03
            );
        }
    }
}
