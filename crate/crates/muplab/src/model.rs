//! MLP definition, forward propagation, manual backpropagation, and the
//! squared-error loss.
//!
//! Width conventions: a network with widths `d₀..d_L` has `L` weight matrices
//! `W_ℓ` of shape `d_ℓ × d_{ℓ-1}` (fan-out × fan-in). Layers are indexed
//! 1-based throughout the public API, matching the notation `h_ℓ`, `W_ℓ`.
//!
//! The forward recursion is `h_ℓ = W_ℓ h′_{ℓ-1} (+ b_ℓ)` with
//! `h′_ℓ = φ(h_ℓ)` at hidden layers and `h′_0 = x`; the output is the
//! preactivation `h_L` (no activation on the readout).
//!
//! Gradients are stored at preactivations: `g_ℓ = ∇_{h_ℓ} L`, with the
//! activation derivative folded into the backward recursion
//! `g_ℓ = φ′(h_ℓ) ⊙ (W_{ℓ+1}ᵀ g_{ℓ+1})`. A batch-1 weight gradient is the
//! rank-one outer product `g_ℓ h′_{ℓ-1}ᵀ`.

use crate::linalg::{kernels, outer, Matrix, Vector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("batch must contain at least one example")]
    EmptyBatch,
    #[error("network must have at least one layer, all widths at least 1")]
    BadConfig,
}

/// Entrywise activation. All kinds map 0 to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`. ReLU uses the convention φ′(0) = 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Network shape: widths `d₀..d_L`, activation for hidden layers, bias flag.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, activation: Activation, use_bias: bool) -> Result<Self, ModelError> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(ModelError::BadConfig);
        }
        Ok(Self {
            widths,
            activation,
            use_bias,
        })
    }

    /// Number of weight layers `L`.
    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// (fan_in, fan_out) of layer `ℓ` (1-based).
    pub fn fan(&self, layer: usize) -> (usize, usize) {
        (self.widths[layer - 1], self.widths[layer])
    }
}

/// Weights and optional biases, plus an immutable snapshot of their values at
/// construction for update tracking.
#[derive(Debug, Clone)]
pub struct MlpState {
    config: MlpConfig,
    weights: Vec<Matrix>,
    biases: Option<Vec<Vector>>,
    init_weights: Vec<Matrix>,
    init_biases: Option<Vec<Vector>>,
}

impl MlpState {
    pub fn new(
        config: MlpConfig,
        weights: Vec<Matrix>,
        biases: Option<Vec<Vector>>,
    ) -> Result<Self, ModelError> {
        if weights.len() != config.layer_count() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} weight matrices", config.layer_count()),
                got: format!("{}", weights.len()),
            });
        }
        for (idx, w) in weights.iter().enumerate() {
            let (fan_in, fan_out) = config.fan(idx + 1);
            if w.rows() != fan_out || w.cols() != fan_in {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("layer {} shape {}x{}", idx + 1, fan_out, fan_in),
                    got: format!("{}x{}", w.rows(), w.cols()),
                });
            }
        }
        if config.use_bias != biases.is_some() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("biases present: {}", config.use_bias),
                got: format!("biases present: {}", biases.is_some()),
            });
        }
        if let Some(bs) = &biases {
            if bs.len() != config.layer_count()
                || bs.iter().enumerate().any(|(i, b)| b.dim() != config.widths[i + 1])
            {
                return Err(ModelError::ShapeMismatch {
                    expected: "bias dims matching layer widths".into(),
                    got: "inconsistent bias dims".into(),
                });
            }
        }
        let init_weights = weights.clone();
        let init_biases = biases.clone();
        Ok(Self {
            config,
            weights,
            biases,
            init_weights,
            init_biases,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count()
    }

    /// Weight matrix of layer `ℓ` (1-based).
    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer - 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer - 1]
    }

    /// Snapshot `W⁰_ℓ` taken at construction.
    pub fn init_weight(&self, layer: usize) -> &Matrix {
        &self.init_weights[layer - 1]
    }

    pub fn bias(&self, layer: usize) -> Option<&Vector> {
        self.biases.as_ref().map(|bs| &bs[layer - 1])
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut Vector> {
        self.biases.as_mut().map(|bs| &mut bs[layer - 1])
    }

    pub fn init_bias(&self, layer: usize) -> Option<&Vector> {
        self.init_biases.as_ref().map(|bs| &bs[layer - 1])
    }

    /// Cumulative weight update `W_ℓ − W⁰_ℓ`.
    pub fn weight_delta(&self, layer: usize) -> Matrix {
        self.weight(layer)
            .sub(self.init_weight(layer))
            .expect("snapshot shape matches by construction")
    }

    /// Reset weights (and biases) to the construction snapshot.
    pub fn restore_snapshot(&mut self) {
        self.weights = self.init_weights.clone();
        self.biases = self.init_biases.clone();
    }
}

/// Per-input activations from one forward pass: preactivations `h_ℓ` for
/// `ℓ = 1..L` and postactivations `h′_ℓ` for hidden layers `ℓ = 1..L-1`.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub input: Vector,
    pub preacts: Vec<Vector>,
    pub postacts: Vec<Vector>,
}

impl ActivationRecord {
    /// Preactivation `h_ℓ`, 1-based.
    pub fn preact(&self, layer: usize) -> &Vector {
        &self.preacts[layer - 1]
    }

    /// Postactivation `h′_ℓ`, 1-based, defined for hidden layers.
    pub fn postact(&self, layer: usize) -> &Vector {
        &self.postacts[layer - 1]
    }

    /// The vector feeding layer `ℓ`: the input for ℓ = 1, else `h′_{ℓ-1}`.
    pub fn layer_input(&self, layer: usize) -> &Vector {
        if layer == 1 {
            &self.input
        } else {
            self.postact(layer - 1)
        }
    }

    /// Network output `h_L`.
    pub fn output(&self) -> &Vector {
        self.preacts.last().unwrap()
    }
}

/// Gradients from one backward pass. `preact_grads[ℓ-1] = g_ℓ = ∇_{h_ℓ}L`.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub preact_grads: Vec<Vector>,
    pub weight_grads: Vec<Matrix>,
    pub bias_grads: Option<Vec<Vector>>,
}

impl GradientRecord {
    pub fn preact_grad(&self, layer: usize) -> &Vector {
        &self.preact_grads[layer - 1]
    }

    pub fn weight_grad(&self, layer: usize) -> &Matrix {
        &self.weight_grads[layer - 1]
    }
}

/// Forward pass recording all layer activations.
pub fn forward(state: &MlpState, x: &Vector) -> Result<ActivationRecord, ModelError> {
    let cfg = state.config();
    if x.dim() != cfg.input_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("input dim {}", cfg.input_dim()),
            got: format!("{}", x.dim()),
        });
    }
    let layers = cfg.layer_count();
    let mut preacts = Vec::with_capacity(layers);
    let mut postacts: Vec<Vector> = Vec::with_capacity(layers.saturating_sub(1));
    for layer in 1..=layers {
        let w = state.weight(layer);
        let mut h = Vector::zeros(w.rows());
        {
            let input = if layer == 1 { x } else { &postacts[layer - 2] };
            for i in 0..w.rows() {
                h.as_mut_slice()[i] = kernels::dot(w.row(i), input.as_slice());
            }
        }
        if let Some(b) = state.bias(layer) {
            kernels::axpy(h.as_mut_slice(), 1.0, b.as_slice());
        }
        if layer < layers {
            let act = cfg.activation;
            postacts.push(Vector::from_fn(h.dim(), |i| act.apply(h.as_slice()[i])));
        }
        preacts.push(h);
    }
    Ok(ActivationRecord {
        input: x.clone(),
        preacts,
        postacts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SquaredError,
}

/// Squared-error loss `½‖output − target‖₂²` and its gradient w.r.t. output.
pub fn loss_and_grad(
    output: &Vector,
    target: &Vector,
    kind: LossKind,
) -> Result<(f64, Vector), ModelError> {
    if output.dim() != target.dim() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("target dim {}", output.dim()),
            got: format!("{}", target.dim()),
        });
    }
    match kind {
        LossKind::SquaredError => {
            let grad = output.sub(target).expect("dims checked");
            let loss = 0.5 * grad.as_slice().iter().map(|g| g * g).sum::<f64>();
            Ok((loss, grad))
        }
    }
}

/// Backward pass for a single example. `rec` must come from `forward` on the
/// same `state`; `out_grad` is `∇_{h_L}L`.
pub fn backward(
    state: &MlpState,
    rec: &ActivationRecord,
    out_grad: &Vector,
) -> Result<GradientRecord, ModelError> {
    let cfg = state.config();
    let layers = cfg.layer_count();
    if out_grad.dim() != cfg.output_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("output dim {}", cfg.output_dim()),
            got: format!("{}", out_grad.dim()),
        });
    }
    if rec.preacts.len() != layers || rec.input.dim() != cfg.input_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: "record from this network".into(),
            got: "record with different layer structure".into(),
        });
    }

    let mut preact_grads = vec![Vector::zeros(1); layers];
    preact_grads[layers - 1] = out_grad.clone();
    for layer in (1..layers).rev() {
        // g_ℓ = φ′(h_ℓ) ⊙ (W_{ℓ+1}ᵀ g_{ℓ+1})
        let w_next = state.weight(layer + 1);
        let upstream = &preact_grads[layer]; // g_{ℓ+1}
        let mut g = Vector::zeros(w_next.cols());
        for i in 0..w_next.rows() {
            kernels::axpy(g.as_mut_slice(), upstream.as_slice()[i], w_next.row(i));
        }
        let act = cfg.activation;
        let h = rec.preact(layer);
        for (gi, hi) in g.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *gi *= act.derivative(*hi);
        }
        preact_grads[layer - 1] = g;
    }

    let mut weight_grads = Vec::with_capacity(layers);
    for layer in 1..=layers {
        weight_grads.push(outer(&preact_grads[layer - 1], rec.layer_input(layer)));
    }
    let bias_grads = if cfg.use_bias {
        Some(preact_grads.clone())
    } else {
        None
    };
    Ok(GradientRecord {
        preact_grads,
        weight_grads,
        bias_grads,
    })
}

/// Everything produced by one full-batch forward/backward pass.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub mean_loss: f64,
    /// Gradients averaged over the batch.
    pub grads: GradientRecord,
    /// Per-example activations, in input order.
    pub records: Vec<ActivationRecord>,
    /// Per-example preactivation gradients `g_ℓ(x_i)`, in input order.
    pub example_preact_grads: Vec<Vec<Vector>>,
}

/// Examples per batch block. Each block's activations live in lane-major
/// scratch (one row of 16 lanes per unit), which turns the three matrix
/// products of a step into register-tiled kernels and keeps every weight row
/// streaming through cache once per block instead of once per example.
const LANES: usize = 16;

/// Lane-major scratch: `rows` rows of `LANES` f64 values. Row `j`, lane `e`
/// holds unit `j` of example `e`. Unused lanes stay zero.
struct LaneBuf {
    rows: usize,
    data: Vec<f64>,
}

impl LaneBuf {
    fn zeros(rows: usize) -> Self {
        Self {
            rows,
            data: vec![0.0; rows * LANES],
        }
    }

    #[inline]
    fn row(&self, j: usize) -> &[f64; LANES] {
        self.data[j * LANES..(j + 1) * LANES].try_into().unwrap()
    }

    #[inline]
    fn row_mut(&mut self, j: usize) -> &mut [f64; LANES] {
        (&mut self.data[j * LANES..(j + 1) * LANES]).try_into().unwrap()
    }

    fn fill_from_vectors(&mut self, vecs: &[Vector]) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
        for (e, v) in vecs.iter().enumerate() {
            for (j, &x) in v.as_slice().iter().enumerate() {
                self.data[j * LANES + e] = x;
            }
        }
    }

    fn extract_column(&self, e: usize) -> Vector {
        Vector::from_fn(self.rows, |j| self.data[j * LANES + e])
    }
}

/// `out = A · x` with `A` an `m×k` row-major matrix and `x`, `out` lane
/// buffers of `k` and `m` rows. Four A-rows per pass keep eight accumulator
/// vectors live while `x` streams.
fn matmul_lanes(a: &Matrix, x: &LaneBuf, out: &mut LaneBuf) {
    let (m, k) = (a.rows(), a.cols());
    debug_assert_eq!(x.rows, k);
    debug_assert_eq!(out.rows, m);
    let mut i = 0;
    while i + 4 <= m {
        let mut acc = [[0.0f64; LANES]; 4];
        let rows = [a.row(i), a.row(i + 1), a.row(i + 2), a.row(i + 3)];
        for j in 0..k {
            let xr = x.row(j);
            for (r, accr) in rows.iter().zip(acc.iter_mut()) {
                let b = r[j];
                for l in 0..LANES {
                    accr[l] = xr[l].mul_add(b, accr[l]);
                }
            }
        }
        for (d, accr) in acc.iter().enumerate() {
            *out.row_mut(i + d) = *accr;
        }
        i += 4;
    }
    while i < m {
        let mut acc = [0.0f64; LANES];
        let row = a.row(i);
        for j in 0..k {
            let xr = x.row(j);
            let b = row[j];
            for l in 0..LANES {
                acc[l] = xr[l].mul_add(b, acc[l]);
            }
        }
        *out.row_mut(i) = acc;
        i += 1;
    }
}

// Four-wide register chunks. One `[f64; 4]` maps to a single SIMD register,
// which keeps these temporaries out of stack spills.
#[inline(always)]
fn load4(s: &[f64], at: usize) -> [f64; 4] {
    s[at..at + 4].try_into().unwrap()
}

#[inline(always)]
fn mul4(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2], a[3] * b[3]]
}

#[inline(always)]
fn fma4(a: [f64; 4], b: [f64; 4], c: [f64; 4]) -> [f64; 4] {
    [
        a[0].mul_add(b[0], c[0]),
        a[1].mul_add(b[1], c[1]),
        a[2].mul_add(b[2], c[2]),
        a[3].mul_add(b[3], c[3]),
    ]
}

#[inline(always)]
fn hsum4(a: [f64; 4]) -> f64 {
    (a[0] + a[2]) + (a[1] + a[3])
}

#[inline(always)]
fn load_lane_chunks(s: &[f64], row: usize) -> [[f64; 4]; 4] {
    let at = row * LANES;
    [
        load4(s, at),
        load4(s, at + 4),
        load4(s, at + 8),
        load4(s, at + 12),
    ]
}

/// Lane dot of two preloaded rows.
#[inline(always)]
fn lane_dot(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> f64 {
    let mut acc = mul4(a[0], b[0]);
    for c in 1..4 {
        acc = fma4(a[c], b[c], acc);
    }
    hsum4(acc)
}

/// `dw[i][j] += Σ_lanes g[i][lane] · h[j][lane]`: the blockwise sum of
/// per-example outer products. Zero padding lanes contribute nothing.
fn accumulate_outer_lanes(g: &LaneBuf, h: &LaneBuf, dw: &mut Matrix) {
    let (m, k) = (dw.rows(), dw.cols());
    debug_assert_eq!(g.rows, m);
    debug_assert_eq!(h.rows, k);
    let mut i = 0;
    while i + 2 <= m {
        let g0 = load_lane_chunks(&g.data, i);
        let g1 = load_lane_chunks(&g.data, i + 1);
        let mut j = 0;
        while j + 2 <= k {
            let h0 = load_lane_chunks(&h.data, j);
            let h1 = load_lane_chunks(&h.data, j + 1);
            let mut a00 = mul4(g0[0], h0[0]);
            let mut a01 = mul4(g0[0], h1[0]);
            let mut a10 = mul4(g1[0], h0[0]);
            let mut a11 = mul4(g1[0], h1[0]);
            for c in 1..4 {
                a00 = fma4(g0[c], h0[c], a00);
                a01 = fma4(g0[c], h1[c], a01);
                a10 = fma4(g1[c], h0[c], a10);
                a11 = fma4(g1[c], h1[c], a11);
            }
            let base0 = i * k + j;
            let base1 = (i + 1) * k + j;
            dw.as_mut_slice()[base0] += hsum4(a00);
            dw.as_mut_slice()[base0 + 1] += hsum4(a01);
            dw.as_mut_slice()[base1] += hsum4(a10);
            dw.as_mut_slice()[base1 + 1] += hsum4(a11);
            j += 2;
        }
        while j < k {
            let hr = load_lane_chunks(&h.data, j);
            dw.as_mut_slice()[i * k + j] += lane_dot(&g0, &hr);
            dw.as_mut_slice()[(i + 1) * k + j] += lane_dot(&g1, &hr);
            j += 1;
        }
        i += 2;
    }
    while i < m {
        let gr = load_lane_chunks(&g.data, i);
        for j in 0..k {
            let hr = load_lane_chunks(&h.data, j);
            dw.as_mut_slice()[i * k + j] += lane_dot(&gr, &hr);
        }
        i += 1;
    }
}

/// Forward-only batch pass producing the same records as
/// [`batch_forward_backward`] (identical summation order, so activations
/// match bitwise between the two).
pub fn batch_records(
    state: &MlpState,
    inputs: &[Vector],
) -> Result<Vec<ActivationRecord>, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let cfg = state.config();
    let layers = cfg.layer_count();
    let act = cfg.activation;
    for x in inputs {
        if x.dim() != cfg.input_dim() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("input dim {}", cfg.input_dim()),
                got: format!("{}", x.dim()),
            });
        }
    }
    let mut records = Vec::with_capacity(inputs.len());
    let mut x_t = LaneBuf::zeros(cfg.input_dim());
    let mut pre_t: Vec<LaneBuf> = (1..=layers).map(|l| LaneBuf::zeros(cfg.widths[l])).collect();
    let mut post_t: Vec<LaneBuf> = (1..layers).map(|l| LaneBuf::zeros(cfg.widths[l])).collect();
    for block_x in inputs.chunks(LANES) {
        let n = block_x.len();
        x_t.fill_from_vectors(block_x);
        for layer in 1..=layers {
            let input_t = if layer == 1 { &x_t } else { &post_t[layer - 2] };
            matmul_lanes(state.weight(layer), input_t, &mut pre_t[layer - 1]);
            if let Some(b) = state.bias(layer) {
                for (j, &bj) in b.as_slice().iter().enumerate() {
                    for v in pre_t[layer - 1].row_mut(j) {
                        *v += bj;
                    }
                }
            }
            if layer < layers {
                let pre = &pre_t[layer - 1];
                let post = &mut post_t[layer - 1];
                for (p, q) in pre.data.iter().zip(post.data.iter_mut()) {
                    *q = act.apply(*p);
                }
            }
        }
        for e in 0..n {
            records.push(ActivationRecord {
                input: block_x[e].clone(),
                preacts: pre_t.iter().map(|b| b.extract_column(e)).collect(),
                postacts: post_t.iter().map(|b| b.extract_column(e)).collect(),
            });
        }
    }
    Ok(records)
}

/// Full-batch forward + backward. Gradients are the arithmetic mean over
/// examples (accumulated in input order, so results are deterministic);
/// per-example records and preactivation gradients are retained for
/// instrumentation.
pub fn batch_forward_backward(
    state: &MlpState,
    inputs: &[Vector],
    targets: &[Vector],
    loss_kind: LossKind,
) -> Result<BatchPass, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if inputs.len() != targets.len() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{} targets", inputs.len()),
            got: format!("{}", targets.len()),
        });
    }
    let cfg = state.config();
    let layers = cfg.layer_count();
    let batch = inputs.len() as f64;
    let act = cfg.activation;
    for x in inputs {
        if x.dim() != cfg.input_dim() {
            return Err(ModelError::ShapeMismatch {
                expected: format!("input dim {}", cfg.input_dim()),
                got: format!("{}", x.dim()),
            });
        }
    }

    // The backward pass multiplies by transposes; pack them once per call.
    let packed_transposes: Vec<Matrix> =
        (2..=layers).map(|l| state.weight(l).transpose()).collect();

    let mut acc_weight: Vec<Matrix> = (1..=layers)
        .map(|l| {
            let (fan_in, fan_out) = cfg.fan(l);
            Matrix::zeros(fan_out, fan_in)
        })
        .collect();
    let mut acc_bias: Option<Vec<Vector>> = cfg
        .use_bias
        .then(|| (1..=layers).map(|l| Vector::zeros(cfg.widths[l])).collect());

    let mut records = Vec::with_capacity(inputs.len());
    let mut example_preact_grads = Vec::with_capacity(inputs.len());
    let mut loss_sum = 0.0;

    let mut x_t = LaneBuf::zeros(cfg.input_dim());
    let mut pre_t: Vec<LaneBuf> = (1..=layers).map(|l| LaneBuf::zeros(cfg.widths[l])).collect();
    let mut post_t: Vec<LaneBuf> = (1..layers).map(|l| LaneBuf::zeros(cfg.widths[l])).collect();
    let mut g_t: Vec<LaneBuf> = (1..=layers).map(|l| LaneBuf::zeros(cfg.widths[l])).collect();

    for (block_x, block_y) in inputs.chunks(LANES).zip(targets.chunks(LANES)) {
        let n = block_x.len();
        x_t.fill_from_vectors(block_x);

        // Forward.
        for layer in 1..=layers {
            let input_t = if layer == 1 { &x_t } else { &post_t[layer - 2] };
            let w = state.weight(layer);
            matmul_lanes(w, input_t, &mut pre_t[layer - 1]);
            if let Some(b) = state.bias(layer) {
                for (j, &bj) in b.as_slice().iter().enumerate() {
                    for v in pre_t[layer - 1].row_mut(j) {
                        *v += bj;
                    }
                }
            }
            if layer < layers {
                let pre = &pre_t[layer - 1];
                let post = &mut post_t[layer - 1];
                for (p, q) in pre.data.iter().zip(post.data.iter_mut()) {
                    *q = act.apply(*p);
                }
            }
        }

        // Loss and output gradients; padding lanes of g stay zero.
        let out_rows = cfg.output_dim();
        let g_out = &mut g_t[layers - 1];
        g_out.data.iter_mut().for_each(|v| *v = 0.0);
        for e in 0..n {
            let output = Vector::from_fn(out_rows, |j| pre_t[layers - 1].row(j)[e]);
            let (loss, og) = loss_and_grad(&output, &block_y[e], loss_kind)?;
            loss_sum += loss;
            for (j, &gj) in og.as_slice().iter().enumerate() {
                g_out.row_mut(j)[e] = gj;
            }
        }

        // Backward with the activation derivative folded in at each layer.
        for layer in (1..layers).rev() {
            let (head, tail) = g_t.split_at_mut(layer);
            matmul_lanes(&packed_transposes[layer - 1], &tail[0], &mut head[layer - 1]);
            let g = &mut head[layer - 1];
            for (gv, pv) in g.data.iter_mut().zip(pre_t[layer - 1].data.iter()) {
                *gv *= act.derivative(*pv);
            }
        }

        // Accumulate weight-gradient contributions.
        for layer in 1..=layers {
            let input_t = if layer == 1 { &x_t } else { &post_t[layer - 2] };
            accumulate_outer_lanes(&g_t[layer - 1], input_t, &mut acc_weight[layer - 1]);
        }
        if let Some(acc_b) = &mut acc_bias {
            for layer in 1..=layers {
                let g = &g_t[layer - 1];
                for (j, a) in acc_b[layer - 1].as_mut_slice().iter_mut().enumerate() {
                    *a += g.row(j).iter().sum::<f64>();
                }
            }
        }

        // Per-example records, extracted from the lane buffers.
        for e in 0..n {
            records.push(ActivationRecord {
                input: block_x[e].clone(),
                preacts: pre_t.iter().map(|b| b.extract_column(e)).collect(),
                postacts: post_t.iter().map(|b| b.extract_column(e)).collect(),
            });
            example_preact_grads
                .push(g_t.iter().map(|b| b.extract_column(e)).collect::<Vec<Vector>>());
        }
    }

    let inv_b = 1.0 / batch;
    for m in &mut acc_weight {
        kernels::scale(m.as_mut_slice(), inv_b);
    }
    if let Some(acc_b) = &mut acc_bias {
        for b in acc_b.iter_mut() {
            kernels::scale(b.as_mut_slice(), inv_b);
        }
    }
    let mean_preact_grads: Vec<Vector> = (0..layers)
        .map(|l| {
            let mut g = Vector::zeros(cfg.widths[l + 1]);
            for per_example in &example_preact_grads {
                kernels::axpy(g.as_mut_slice(), inv_b, per_example[l].as_slice());
            }
            g
        })
        .collect();

    Ok(BatchPass {
        mean_loss: loss_sum * inv_b,
        grads: GradientRecord {
            preact_grads: mean_preact_grads,
            weight_grads: acc_weight,
            bias_grads: acc_bias,
        },
        records,
        example_preact_grads,
    })
}
