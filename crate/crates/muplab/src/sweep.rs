//! Width-sweep orchestration: train one network per (width, seed) cell,
//! record the spectral diagnostics at the final step, and fit log-log
//! power-law slopes per metric.
//!
//! Cells execute concurrently but results are merged in (width, seed) order,
//! so identical configurations produce byte-identical output tables.

use crate::data::{load_cifar10_binary, one_hot_batch, synthetic_gaussian, Batch, DataError};
use crate::instrumentation::{self as metrics, layer_metric_id, metric_id, MetricRecord};
use crate::linalg::DensityTag;
use crate::model::{
    batch_forward_backward, forward, ActivationRecord, Activation, LossKind, MlpConfig, MlpState,
};
use crate::optimizer::{apply_update, train, OptError, UpdateRule};
use crate::parametrization::{derive_seed, init_mlp_with_density, GlobalPrefactors, InitStyle, PznKind};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown metric id: {0}")]
    UnknownMetric(String),
    #[error("slope fit needs at least two points")]
    DegenerateFit,
    #[error("slope fit needs positive finite values, got {0}")]
    NonPositiveValue(f64),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optimizer(#[from] OptError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Data source for a sweep. The batch size stays fixed across widths.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic { batch: usize, input_dim: usize },
    OneHot { batch: usize, vocab: usize },
    Cifar10 {
        path: PathBuf,
        classes: (u8, u8),
        batch: usize,
    },
}

impl DataSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            DataSpec::Synthetic { input_dim, .. } => *input_dim,
            DataSpec::OneHot { vocab, .. } => *vocab,
            DataSpec::Cifar10 { .. } => crate::data::CIFAR_PIXELS,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            DataSpec::Synthetic { batch, .. }
            | DataSpec::OneHot { batch, .. }
            | DataSpec::Cifar10 { batch, .. } => *batch,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Batch, DataError> {
        match self {
            DataSpec::Synthetic { batch, input_dim } => {
                Ok(synthetic_gaussian(*batch, *input_dim, seed))
            }
            DataSpec::OneHot { batch, vocab } => Ok(one_hot_batch(*batch, *vocab, seed)),
            DataSpec::Cifar10 {
                path,
                classes,
                batch,
            } => load_cifar10_binary(path, *classes, *batch, seed),
        }
    }
}

/// Update rule selector; layerwise rates come from the sweep's scaling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSpec {
    LayerwiseSgd,
    SignSgd,
    SpectralNormalized,
    FrobeniusApprox,
    WidthCorrectedFrobenius,
}

impl RuleSpec {
    pub fn build(
        self,
        config: &MlpConfig,
        pzn: PznKind,
        pref: &GlobalPrefactors,
        input_density: DensityTag,
    ) -> UpdateRule {
        match self {
            RuleSpec::LayerwiseSgd => {
                UpdateRule::layerwise_sgd_with_density(config, pzn, pref, input_density)
            }
            RuleSpec::SignSgd => UpdateRule::sign_sgd_with_density(config, pzn, pref, input_density),
            RuleSpec::SpectralNormalized => UpdateRule::SpectralNormalized { eta0: pref.eta0 },
            RuleSpec::FrobeniusApprox => UpdateRule::FrobeniusApprox { eta0: pref.eta0 },
            RuleSpec::WidthCorrectedFrobenius => {
                UpdateRule::WidthCorrectedFrobenius { eta0: pref.eta0 }
            }
        }
    }
}

fn default_hidden_layers() -> usize {
    2
}
fn default_sigma0() -> f64 {
    std::f64::consts::SQRT_2
}
fn default_eta0() -> f64 {
    0.1
}
fn default_metric_layer() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_rule() -> RuleSpec {
    RuleSpec::LayerwiseSgd
}

/// Full description of a width sweep. JSON configs mirror these field names.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepConfig {
    /// Hidden widths, strictly increasing.
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub pzn: PznKind,
    #[serde(default = "default_rule")]
    pub rule: RuleSpec,
    pub steps: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub use_bias: bool,
    /// Number of hidden layers of the swept width; the readout is width 1.
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    pub data: DataSpec,
    /// Canonical layer for feature- and weight-change metrics (1-based; must
    /// be a hidden layer).
    #[serde(default = "default_metric_layer")]
    pub metric_layer: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.widths.is_empty() {
            return Err(SweepError::InvalidConfig("widths must be nonempty".into()));
        }
        if !self.widths.windows(2).all(|w| w[0] < w[1]) {
            return Err(SweepError::InvalidConfig(
                "widths must be strictly increasing".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.hidden_layers == 0 {
            return Err(SweepError::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.metric_layer == 0 || self.metric_layer > self.hidden_layers {
            return Err(SweepError::InvalidConfig(format!(
                "metric_layer {} must name a hidden layer (1..={})",
                self.metric_layer, self.hidden_layers
            )));
        }
        if !(self.sigma0 > 0.0 && self.eta0 > 0.0) {
            return Err(SweepError::InvalidConfig(
                "sigma0 and eta0 must be positive".into(),
            ));
        }
        if self.data.batch() == 0 {
            return Err(SweepError::InvalidConfig("batch must be nonzero".into()));
        }
        Ok(())
    }

    pub fn prefactors(&self) -> GlobalPrefactors {
        GlobalPrefactors {
            sigma0: self.sigma0,
            eta0: self.eta0,
            bias_sigma0: 0.0,
        }
    }

    /// Network widths for one swept hidden width.
    pub fn net_widths(&self, width: usize) -> Vec<usize> {
        let mut widths = vec![self.data.input_dim()];
        widths.extend(std::iter::repeat_n(width, self.hidden_layers));
        widths.push(1);
        widths
    }
}

// ---------------------------------------------------------------------------
// Cell execution
// ---------------------------------------------------------------------------

const DATA_SALT: u64 = 0xda7a;

/// Run every (width, seed) cell of the sweep. Cells run concurrently; the
/// output is sorted by (width, seed). Diverged runs come back as flagged
/// rows with NaN metric values, not as errors.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<MetricRecord>, SweepError> {
    cfg.validate()?;
    let mut cells: Vec<(usize, u64)> = Vec::new();
    for &w in &cfg.widths {
        for &s in &cfg.seeds {
            cells.push((w, s));
        }
    }
    let mut records = cells
        .into_par_iter()
        .map(|(width, seed)| run_cell(cfg, width, seed))
        .collect::<Result<Vec<_>, SweepError>>()?;
    records.sort_by_key(|r| (r.width, r.seed));
    Ok(records)
}

fn run_cell(cfg: &SweepConfig, width: usize, seed: u64) -> Result<MetricRecord, SweepError> {
    let pref = cfg.prefactors();
    let net_cfg = MlpConfig::new(cfg.net_widths(width), cfg.activation, cfg.use_bias)?;
    let data = cfg.data.build(derive_seed(seed, DATA_SALT))?;
    let mut state = init_mlp_with_density(
        &net_cfg,
        cfg.pzn,
        &pref,
        InitStyle::Gaussian,
        derive_seed(seed, width as u64),
        data.density,
    )
    .map_err(|e| SweepError::InvalidConfig(e.to_string()))?;
    let rule = cfg.rule.build(&net_cfg, cfg.pzn, &pref, data.density);

    // One batch pass at initialization: its records are the feature
    // snapshot, and its gradients drive the init-state batch-averaging
    // diagnostic. The batch-averaging ratio is only meaningful while the
    // batch gradient is statistically non-degenerate, which at desk scale
    // means before the run interpolates the training set.
    let init_pass =
        batch_forward_backward(&state, &data.inputs, &data.targets, LossKind::SquaredError)?;
    let mut values = BTreeMap::new();
    let mut flags = Vec::new();
    match metrics::assumption3_batch_ratio(
        init_pass.grads.weight_grad(cfg.metric_layer),
        &init_pass.records,
        &init_pass.example_preact_grads,
        cfg.metric_layer,
    ) {
        Ok(v) => {
            values.insert(metric_id::ASSUMPTION3.to_string(), v);
        }
        Err(e) => {
            flags.push(format!("{}:unavailable({e})", metric_id::ASSUMPTION3));
            values.insert(metric_id::ASSUMPTION3.to_string(), f64::NAN);
        }
    }
    let rec0: Vec<ActivationRecord> = init_pass.records;

    let outcome = train(
        &mut state,
        &data,
        &rule,
        cfg.steps,
        LossKind::SquaredError,
        None,
    )?;
    if let Some(step) = outcome.diverged_at {
        flags.push(format!("diverged@{step}"));
        values.insert(metric_id::LOSS_FINAL.to_string(), f64::NAN);
        return Ok(MetricRecord {
            width,
            seed,
            step: outcome.losses.len(),
            values,
            flags,
        });
    }
    values.insert(
        metric_id::LOSS_FINAL.to_string(),
        outcome.final_loss().unwrap_or(f64::NAN),
    );

    compute_cell_metrics(cfg, &state, &data, &rec0, &rule, &mut values, &mut flags)?;

    Ok(MetricRecord {
        width,
        seed,
        step: cfg.steps,
        values,
        flags,
    })
}

/// Final-state diagnostics plus a probe step for the update metrics. The
/// probe applies one extra update to a clone, leaving `state` untouched.
fn compute_cell_metrics(
    cfg: &SweepConfig,
    state: &MlpState,
    data: &Batch,
    rec0: &[ActivationRecord],
    rule: &UpdateRule,
    values: &mut BTreeMap<String, f64>,
    flags: &mut Vec<String>,
) -> Result<(), SweepError> {
    let layer = cfg.metric_layer;
    fn put(
        values: &mut BTreeMap<String, f64>,
        flags: &mut Vec<String>,
        key: String,
        result: Result<f64, metrics::MetricError>,
    ) {
        match result {
            Ok(v) => {
                values.insert(key, v);
            }
            Err(e) => {
                flags.push(format!("{key}:unavailable({e})"));
                values.insert(key, f64::NAN);
            }
        }
    }

    // One batch pass at the final state supplies the final-state records,
    // the probe gradients, and the per-example gradients.
    let pass = batch_forward_backward(state, &data.inputs, &data.targets, LossKind::SquaredError)?;
    let rec_t = &pass.records;

    put(
        values,
        flags,
        layer_metric_id(metric_id::FEATURE_CHANGE_RATIO, layer),
        metrics::feature_change_ratio(rec0, rec_t, layer),
    );
    put(
        values,
        flags,
        layer_metric_id(metric_id::WEIGHT_CHANGE_SPECTRAL, layer),
        metrics::weight_change_spectral(state.init_weight(layer), state.weight(layer)),
    );
    put(
        values,
        flags,
        layer_metric_id(metric_id::WEIGHT_CHANGE_FROBENIUS, layer),
        metrics::weight_change_frobenius(state.init_weight(layer), state.weight(layer)),
    );
    put(
        values,
        flags,
        metric_id::FINAL_LAYER_ALIGNMENT.to_string(),
        metrics::final_layer_alignment(state, rec_t),
    );
    put(
        values,
        flags,
        metric_id::FINAL_LAYER_ALIGNMENT_INIT.to_string(),
        metrics::final_layer_alignment_init(state, rec0),
    );
    put(
        values,
        flags,
        metric_id::ASSUMPTION1_W.to_string(),
        metrics::assumption1_weights(state, layer),
    );
    put(
        values,
        flags,
        metric_id::ASSUMPTION1_H.to_string(),
        metrics::assumption1_features(rec0, rec_t, layer),
    );
    put(
        values,
        flags,
        metric_id::ASSUMPTION2.to_string(),
        metrics::assumption2_activation_ratio(rec_t, layer),
    );

    // Natural operator norms at the canonical layer (dense→dense) and at the
    // input layer, whose input space density comes from the data.
    put(
        values,
        flags,
        layer_metric_id(metric_id::NATURAL_SPECTRAL_W, layer),
        metrics::natural_weight_norm(state.weight(layer), DensityTag::Dense),
    );
    put(
        values,
        flags,
        layer_metric_id(metric_id::NATURAL_SPECTRAL_DW, layer),
        metrics::natural_weight_norm(&state.weight_delta(layer), DensityTag::Dense),
    );
    put(
        values,
        flags,
        layer_metric_id(metric_id::NATURAL_SPECTRAL_W, 1),
        metrics::natural_weight_norm(state.weight(1), data.density),
    );
    put(
        values,
        flags,
        layer_metric_id(metric_id::NATURAL_SPECTRAL_DW, 1),
        metrics::natural_weight_norm(&state.weight_delta(1), data.density),
    );

    // Probe step for the update metrics.
    if pass.grads.weight_grad(layer).is_zero() {
        for id in [
            metric_id::UPDATE_ALIGNMENT,
            metric_id::UPDATE_STABLE_RANK,
            metric_id::SRANK_H,
            metric_id::SRANK_G,
            metric_id::ASSUMPTION3,
            metric_id::UPDATE_GRAD_ALIGNMENT,
        ] {
            flags.push(format!("{id}:unavailable(zero probe gradient)"));
            values.insert(id.to_string(), f64::NAN);
        }
        return Ok(());
    }
    let mut probed = state.clone();
    let outcome = apply_update(&mut probed, &pass.grads, rule)?;
    let dw = &outcome.deltas[layer - 1];

    put(
        values,
        flags,
        metric_id::UPDATE_ALIGNMENT.to_string(),
        metrics::update_alignment(dw, rec_t, layer),
    );
    put(
        values,
        flags,
        metric_id::UPDATE_STABLE_RANK.to_string(),
        metrics::update_stable_rank(dw),
    );
    match metrics::forward_backward_sranks(rec_t, &pass.example_preact_grads, layer) {
        Ok((srank_h, srank_g)) => {
            values.insert(metric_id::SRANK_H.to_string(), srank_h);
            values.insert(metric_id::SRANK_G.to_string(), srank_g);
        }
        Err(e) => {
            for id in [metric_id::SRANK_H, metric_id::SRANK_G] {
                flags.push(format!("{id}:unavailable({e})"));
                values.insert(id.to_string(), f64::NAN);
            }
        }
    }
    put(
        values,
        flags,
        metric_id::ASSUMPTION3_TRAINED.to_string(),
        metrics::assumption3_batch_ratio(
            pass.grads.weight_grad(layer),
            rec_t,
            &pass.example_preact_grads,
            layer,
        ),
    );

    // Feature update realized by the probe step, against its own gradient.
    let mut align_sum = 0.0;
    let mut align_n = 0usize;
    for (rec, grads) in rec_t.iter().zip(&pass.example_preact_grads) {
        let after = forward(&probed, &rec.input)?;
        let dh = after.preact(layer).sub(rec.preact(layer)).expect("dims");
        if let Ok(a) = metrics::update_grad_alignment(&grads[layer - 1], &dh) {
            align_sum += a;
            align_n += 1;
        }
    }
    if align_n > 0 {
        values.insert(
            metric_id::UPDATE_GRAD_ALIGNMENT.to_string(),
            align_sum / align_n as f64,
        );
    } else {
        flags.push(format!(
            "{}:unavailable(no example with nonzero gradient and update)",
            metric_id::UPDATE_GRAD_ALIGNMENT
        ));
        values.insert(metric_id::UPDATE_GRAD_ALIGNMENT.to_string(), f64::NAN);
    }
    Ok(())
}

/// Mean absolute output change over the batch after a single update step
/// from initialization. Grows with width under scalings whose readout is
/// oversized; the primary signal in blowup checks.
pub fn output_change_after_first_step(
    cfg: &SweepConfig,
    width: usize,
    seed: u64,
) -> Result<f64, SweepError> {
    let pref = cfg.prefactors();
    let net_cfg = MlpConfig::new(cfg.net_widths(width), cfg.activation, cfg.use_bias)?;
    let data = cfg.data.build(derive_seed(seed, DATA_SALT))?;
    let mut state = init_mlp_with_density(
        &net_cfg,
        cfg.pzn,
        &pref,
        InitStyle::Gaussian,
        derive_seed(seed, width as u64),
        data.density,
    )
    .map_err(|e| SweepError::InvalidConfig(e.to_string()))?;
    let rule = cfg.rule.build(&net_cfg, cfg.pzn, &pref, data.density);
    let pass = batch_forward_backward(&state, &data.inputs, &data.targets, LossKind::SquaredError)?;
    let before: Vec<f64> = pass.records.iter().map(|r| r.output().as_slice()[0]).collect();
    apply_update(&mut state, &pass.grads, &rule)?;
    let mut sum = 0.0;
    for (x, b) in data.inputs.iter().zip(&before) {
        let after = forward(&state, x)?.output().as_slice()[0];
        sum += (after - b).abs();
    }
    Ok(sum / data.inputs.len() as f64)
}

// ---------------------------------------------------------------------------
// Slope fits and aggregation
// ---------------------------------------------------------------------------

/// Ordinary least squares on `(log width, log value)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Fit `value ≈ exp(intercept) · width^slope` by OLS in log-log space.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<SlopeFit, SweepError> {
    if points.len() < 2 {
        return Err(SweepError::DegenerateFit);
    }
    for &(x, y) in points {
        if !(x > 0.0 && x.is_finite()) || !(y > 0.0 && y.is_finite()) {
            return Err(SweepError::NonPositiveValue(y));
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(SweepError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = logs
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
    })
}

/// Per-width mean and sample standard deviation (n−1) of one metric.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WidthStats {
    pub width: usize,
    pub mean: f64,
    pub std: f64,
    /// Number of finite samples at this width.
    pub n: usize,
}

/// Aggregate a metric over seeds, per width. Non-finite values (flagged
/// rows) are excluded from the statistics but still counted in `records`.
pub fn aggregate(records: &[MetricRecord], metric: &str) -> Result<Vec<WidthStats>, SweepError> {
    if !records.iter().any(|r| r.values.contains_key(metric)) {
        return Err(SweepError::UnknownMetric(metric.to_string()));
    }
    let mut by_width: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for rec in records {
        if let Some(&v) = rec.values.get(metric) {
            if v.is_finite() {
                by_width.entry(rec.width).or_default().push(v);
            } else {
                by_width.entry(rec.width).or_default();
            }
        }
    }
    Ok(by_width
        .into_iter()
        .map(|(width, vals)| {
            let n = vals.len();
            if n == 0 {
                return WidthStats {
                    width,
                    mean: f64::NAN,
                    std: f64::NAN,
                    n,
                };
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n < 2 {
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            WidthStats {
                width,
                mean,
                std,
                n,
            }
        })
        .collect())
}

/// Fit the per-width seed means of one metric against width.
pub fn fit_metric_slope(records: &[MetricRecord], metric: &str) -> Result<SlopeFit, SweepError> {
    let stats = aggregate(records, metric)?;
    let points: Vec<(f64, f64)> = stats
        .iter()
        .filter(|s| s.n > 0 && s.mean.is_finite())
        .map(|s| (s.width as f64, s.mean))
        .collect();
    fit_slope(&points)
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Write records as CSV: fixed columns, then metric ids in sorted order.
pub fn write_records_csv<W: std::io::Write>(
    records: &[MetricRecord],
    out: W,
) -> Result<(), csv::Error> {
    let mut columns: Vec<String> = records
        .iter()
        .flat_map(|r| r.values.keys().cloned())
        .collect();
    columns.sort();
    columns.dedup();

    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "width".to_string(),
        "seed".to_string(),
        "step".to_string(),
        "diverged".to_string(),
        "flags".to_string(),
    ];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for rec in records {
        let mut row = vec![
            rec.width.to_string(),
            rec.seed.to_string(),
            rec.step.to_string(),
            (rec.diverged() as u8).to_string(),
            rec.flags.join(";"),
        ];
        for col in &columns {
            row.push(match rec.values.get(col) {
                Some(v) if v.is_finite() => format!("{v}"),
                Some(_) => "NaN".to_string(),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Slope fits per metric plus bookkeeping, for the JSON summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepSummary {
    pub total_cells: usize,
    pub diverged_cells: usize,
    pub slopes: BTreeMap<String, SlopeFit>,
    /// Metrics whose slope fit was impossible (all-NaN, nonpositive, …).
    pub fit_errors: BTreeMap<String, String>,
}

pub fn summarize(records: &[MetricRecord]) -> SweepSummary {
    let mut ids: Vec<String> = records
        .iter()
        .flat_map(|r| r.values.keys().cloned())
        .collect();
    ids.sort();
    ids.dedup();
    let mut slopes = BTreeMap::new();
    let mut fit_errors = BTreeMap::new();
    for id in ids {
        match fit_metric_slope(records, &id) {
            Ok(fit) => {
                slopes.insert(id, fit);
            }
            Err(e) => {
                fit_errors.insert(id, e.to_string());
            }
        }
    }
    SweepSummary {
        total_cells: records.len(),
        diverged_cells: records.iter().filter(|r| r.diverged()).count(),
        slopes,
        fit_errors,
    }
}
