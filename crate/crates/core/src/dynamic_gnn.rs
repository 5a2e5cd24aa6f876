//! Dynamic GNN: node embeddings over a graph sequence, the self-supervised
//! future-position loss, and its gradient.
//!
//! Embedding recursion for node `v` at frame `t`, layer `i = 1..n`:
//!
//! ```text
//! v_0(t) = σ(M · x(v, t))
//! v_i(t) = σ(α · B_i · agg + β · W_i · v_{i-1}(t-1) + (1-α-β) · v_{i-1}(t))
//! ```
//!
//! where `agg` is the mean of the neighbors' layer `i-1` embeddings in frame
//! `t-1`, weighted by `1 / max(e, ε)` and renormalized to sum to one. The first
//! frame of a sequence uses `v_i(1) = σ(v_{i-1}(1))`. A node absent from frame
//! `t-1` uses its own frame-`t` embedding in the `β` term, and its frame-`t`
//! position to weigh neighbors.
//!
//! The loss is `Σ_t Σ_v ‖p(t+Δt, v) − A · v_n(t)‖²` over `t = 2..T-Δt` and
//! nodes present at both `t` and `t+Δt`, in normalized coordinates.
//!
//! Parameters live in one flat vector, laid out as `M` (row-major), then
//! `B_1..B_n`, `W_1..W_n`, then `A`. Gradients use the same layout.

use crate::graph_model::{neighbor_importance, edge_weight, GraphSequence, ObjectNode, Position, DEFAULT_MIN_EDGE_WEIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("delta_t must be at least 1")]
    InvalidDeltaT,
    #[error("loss window is empty: {0}")]
    EmptyLossWindow(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    /// σ'(z) expressed through y = σ(z).
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which frame the `α` term aggregates neighbors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborFrame {
    #[default]
    Previous,
    Current,
}

fn default_min_edge_weight() -> f64 {
    DEFAULT_MIN_EDGE_WEIGHT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub activation: Activation,
    #[serde(default)]
    pub neighbor_frame: NeighborFrame,
    #[serde(default = "default_min_edge_weight")]
    pub min_edge_weight: f64,
}

impl Hyperparams {
    pub fn new(d: usize, k: usize, n: usize, alpha: f64, beta: f64, activation: Activation) -> Self {
        Self {
            d,
            k,
            n,
            alpha,
            beta,
            activation,
            neighbor_frame: NeighborFrame::Previous,
            min_edge_weight: DEFAULT_MIN_EDGE_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidHyperparams(m));
        if self.d == 0 {
            return bad("d must be at least 1".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("alpha = {} and beta = {} must lie in [0, 1]", self.alpha, self.beta));
        }
        if self.alpha + self.beta > 1.0 {
            return bad(format!(
                "alpha + beta = {} exceeds 1, so the residual weight 1 - alpha - beta is negative",
                self.alpha + self.beta
            ));
        }
        if self.min_edge_weight.is_nan() || self.min_edge_weight <= 0.0 {
            return bad("min_edge_weight must be positive".into());
        }
        Ok(())
    }

    /// Raw input width `k + 2`.
    pub fn input_dim(&self) -> usize {
        self.k + 2
    }

    /// `d(k+2) + 2nd² + 2d`.
    pub fn param_count(&self) -> usize {
        self.d * self.input_dim() + 2 * self.n * self.d * self.d + 2 * self.d
    }

    fn m_range(&self) -> std::ops::Range<usize> {
        0..self.d * self.input_dim()
    }

    fn b_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.d * self.input_dim() + (layer - 1) * self.d * self.d;
        start..start + self.d * self.d
    }

    fn w_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.d * self.input_dim() + (self.n + layer - 1) * self.d * self.d;
        start..start + self.d * self.d
    }

    fn a_range(&self) -> std::ops::Range<usize> {
        let start = self.d * self.input_dim() + 2 * self.n * self.d * self.d;
        start..start + 2 * self.d
    }
}

/// Flat gradient (or any parameter-shaped vector) in the documented layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &GradientVector) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Model parameters Θ plus their hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn from_flat(hyper: Hyperparams, values: Vec<f64>) -> Result<Self> {
        hyper.validate()?;
        if values.len() != hyper.param_count() {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{} parameters", hyper.param_count()),
                found: format!("{} parameters", values.len()),
            });
        }
        Ok(Self { hyper, values })
    }

    pub fn zeros(hyper: Hyperparams) -> Result<Self> {
        Self::from_flat(hyper, vec![0.0; hyper.param_count()])
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `M`, `d × (k+2)` row-major.
    pub fn m(&self) -> &[f64] {
        &self.values[self.hyper.m_range()]
    }

    pub fn m_mut(&mut self) -> &mut [f64] {
        let r = self.hyper.m_range();
        &mut self.values[r]
    }

    /// `B_layer` for `layer` in `1..=n`.
    pub fn b(&self, layer: usize) -> &[f64] {
        &self.values[self.hyper.b_range(layer)]
    }

    pub fn b_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.hyper.b_range(layer);
        &mut self.values[r]
    }

    /// `W_layer` for `layer` in `1..=n`.
    pub fn w(&self, layer: usize) -> &[f64] {
        &self.values[self.hyper.w_range(layer)]
    }

    pub fn w_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.hyper.w_range(layer);
        &mut self.values[r]
    }

    /// `A`, `2 × d` row-major.
    pub fn a(&self) -> &[f64] {
        &self.values[self.hyper.a_range()]
    }

    pub fn a_mut(&mut self) -> &mut [f64] {
        let r = self.hyper.a_range();
        &mut self.values[r]
    }

    /// `Θ ← Θ − η · g`.
    pub fn descend(&mut self, eta: f64, grad: &GradientVector) {
        assert_eq!(self.values.len(), grad.len(), "gradient length mismatch");
        for (p, g) in self.values.iter_mut().zip(&grad.0) {
            *p -= eta * g;
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Glorot-uniform initialization, deterministic in `seed`.
pub fn init_params(hyper: Hyperparams, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(hyper)?;
    let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for x in slice {
            *x = rng.gen_range(-s..=s);
        }
    };
    let (d, k_in) = (hyper.d, hyper.input_dim());
    fill(params.m_mut(), k_in, d);
    for layer in 1..=hyper.n {
        fill(params.b_mut(layer), d, d);
    }
    for layer in 1..=hyper.n {
        fill(params.w_mut(layer), d, d);
    }
    fill(params.a_mut(), d, 2);
    Ok(params)
}

/// Maps raw pixel inputs into the unit scale the model works in: positions and
/// box sizes are divided by the frame size, colors by 255.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub width: f64,
    pub height: f64,
}

impl Normalizer {
    pub fn for_sequence(seq: &GraphSequence) -> Self {
        Self {
            width: seq.frame_width,
            height: seq.frame_height,
        }
    }

    pub fn position(&self, p: Position) -> [f64; 2] {
        [p.x / self.width, p.y / self.height]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> Position {
        Position::new(p[0] * self.width, p[1] * self.height)
    }

    /// `[p_x, p_y, g_1 .. g_k]`, normalized.
    pub fn input(&self, node: &ObjectNode) -> Vec<f64> {
        let mut x = Vec::with_capacity(node.features.len() + 2);
        x.extend_from_slice(&self.position(node.position));
        for (j, &f) in node.features.iter().enumerate() {
            x.push(match j {
                0 => f / self.width,
                1 => f / self.height,
                _ => f / 255.0,
            });
        }
        x
    }
}

// out = M x, M is rows × cols row-major.
#[inline]
fn matvec(m: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

// out += s · Mᵀ y
#[inline]
fn matvec_t_acc(m: &[f64], cols: usize, y: &[f64], s: f64, out: &mut [f64]) {
    for (&yr, row) in y.iter().zip(m.chunks_exact(cols)) {
        let c = s * yr;
        if c != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += c * a;
            }
        }
    }
}

// grad += s · y xᵀ
#[inline]
fn outer_acc(grad: &mut [f64], cols: usize, y: &[f64], x: &[f64], s: f64) {
    for (&yr, row) in y.iter().zip(grad.chunks_exact_mut(cols)) {
        let c = s * yr;
        if c != 0.0 {
            for (g, xc) in row.iter_mut().zip(x) {
                *g += c * xc;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct FramePlan {
    track_ids: Vec<u64>,
    /// Normalized inputs, `len × (k+2)`.
    inputs: Vec<f64>,
    /// Index of each node in the previous frame.
    prev_index: Vec<Option<usize>>,
    /// Per node: neighbor indices in the aggregation frame and their renormalized weights.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl FramePlan {
    fn len(&self) -> usize {
        self.track_ids.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LossTerm {
    t: usize,
    v: usize,
    target: [f64; 2],
    current: [f64; 2],
}

/// A sequence with its per-frame neighbor weights and loss terms resolved, so
/// repeated forward/backward passes only touch parameters.
#[derive(Debug, Clone)]
pub struct PreparedSequence {
    frames: Vec<FramePlan>,
    terms: Vec<LossTerm>,
    normalizer: Normalizer,
    neighbor_frame: NeighborFrame,
    k: usize,
}

impl PreparedSequence {
    /// Resolves neighbors for `hyper`. With `delta_t`, also resolves the loss
    /// terms and fails if there are none.
    pub fn new(seq: &GraphSequence, hyper: &Hyperparams, delta_t: Option<usize>) -> Result<Self> {
        hyper.validate()?;
        if seq.feature_len != hyper.k {
            return Err(ModelError::DimensionMismatch {
                expected: format!("k = {}", hyper.k),
                found: format!("sequence with k = {}", seq.feature_len),
            });
        }
        let normalizer = Normalizer::for_sequence(seq);
        let mut frames: Vec<FramePlan> = Vec::with_capacity(seq.len());
        for (t, g) in seq.graphs.iter().enumerate() {
            let mut inputs = Vec::with_capacity(g.len() * hyper.input_dim());
            for node in &g.nodes {
                if node.features.len() != hyper.k {
                    return Err(ModelError::DimensionMismatch {
                        expected: format!("{} features", hyper.k),
                        found: format!(
                            "{} features for track {} at frame {}",
                            node.features.len(),
                            node.track_id,
                            g.frame_index
                        ),
                    });
                }
                inputs.extend(normalizer.input(node));
            }
            let prev = (t > 0).then(|| &seq.graphs[t - 1]);
            let prev_index: Vec<Option<usize>> = g
                .nodes
                .iter()
                .map(|n| prev.and_then(|p| p.index_of(n.track_id)))
                .collect();
            let neighbors = match (prev, hyper.neighbor_frame) {
                (None, _) => vec![Vec::new(); g.len()],
                (Some(p), NeighborFrame::Previous) => g
                    .nodes
                    .iter()
                    .zip(&prev_index)
                    .map(|(node, &pi)| {
                        let anchor = pi.map_or(node.position, |i| p.nodes[i].position);
                        weights(
                            p.nodes
                                .iter()
                                .enumerate()
                                .filter(|(_, u)| u.track_id != node.track_id)
                                .map(|(ui, u)| (ui, edge_weight(u.position, anchor))),
                            hyper.min_edge_weight,
                        )
                    })
                    .collect(),
                (Some(_), NeighborFrame::Current) => g
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(vi, node)| {
                        weights(
                            g.nodes
                                .iter()
                                .enumerate()
                                .filter(|&(ui, _)| ui != vi)
                                .map(|(ui, u)| (ui, edge_weight(u.position, node.position))),
                            hyper.min_edge_weight,
                        )
                    })
                    .collect(),
            };
            frames.push(FramePlan {
                track_ids: g.nodes.iter().map(|n| n.track_id).collect(),
                inputs,
                prev_index,
                neighbors,
            });
        }

        let terms = match delta_t {
            None => Vec::new(),
            Some(dt) => loss_terms(seq, &normalizer, dt)?,
        };
        Ok(Self {
            frames,
            terms,
            normalizer,
            neighbor_frame: hyper.neighbor_frame,
            k: hyper.k,
        })
    }

    /// Number of loss terms, i.e. the sample count `N_j` this sequence contributes.
    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if params.hyper.k != self.k || params.hyper.neighbor_frame != self.neighbor_frame {
            return Err(ModelError::DimensionMismatch {
                expected: format!("k = {}, {:?} aggregation", self.k, self.neighbor_frame),
                found: format!("k = {}, {:?} aggregation", params.hyper.k, params.hyper.neighbor_frame),
            });
        }
        Ok(())
    }

    fn forward(&self, params: &ModelParams) -> Forward {
        let hp = &params.hyper;
        let (d, k_in, act) = (hp.d, hp.input_dim(), hp.activation);
        let gamma = 1.0 - hp.alpha - hp.beta;
        let mut h: Vec<Vec<Vec<f64>>> = Vec::with_capacity(hp.n + 1);
        let mut agg_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(hp.n);

        let layer0: Vec<Vec<f64>> = self
            .frames
            .iter()
            .map(|f| {
                let mut out = vec![0.0; f.len() * d];
                for (x, o) in f.inputs.chunks_exact(k_in).zip(out.chunks_exact_mut(d)) {
                    matvec(params.m(), k_in, x, o);
                    o.iter_mut().for_each(|z| *z = act.apply(*z));
                }
                out
            })
            .collect();
        h.push(layer0);

        let mut z_buf = vec![0.0; d];
        for layer in 1..=hp.n {
            let below = &h[layer - 1];
            let (b, w) = (params.b(layer), params.w(layer));
            let mut layer_h = Vec::with_capacity(self.frames.len());
            let mut layer_agg = Vec::with_capacity(self.frames.len());
            for (t, f) in self.frames.iter().enumerate() {
                let cur = &below[t];
                let mut out = vec![0.0; f.len() * d];
                let mut aggs = vec![0.0; f.len() * d];
                if t == 0 {
                    for (o, c) in out.iter_mut().zip(cur) {
                        *o = act.apply(*c);
                    }
                } else {
                    let prev = &below[t - 1];
                    let src = match self.neighbor_frame {
                        NeighborFrame::Previous => prev,
                        NeighborFrame::Current => cur,
                    };
                    for v in 0..f.len() {
                        let agg = &mut aggs[v * d..(v + 1) * d];
                        for &(u, wt) in &f.neighbors[v] {
                            for (a, s) in agg.iter_mut().zip(&src[u * d..(u + 1) * d]) {
                                *a += wt * s;
                            }
                        }
                        let self_prev = match f.prev_index[v] {
                            Some(pi) => &prev[pi * d..(pi + 1) * d],
                            None => &cur[v * d..(v + 1) * d],
                        };
                        let o = &mut out[v * d..(v + 1) * d];
                        matvec(b, d, agg, o);
                        matvec(w, d, self_prev, &mut z_buf);
                        for (j, oj) in o.iter_mut().enumerate() {
                            let z = hp.alpha * *oj + hp.beta * z_buf[j] + gamma * cur[v * d + j];
                            *oj = act.apply(z);
                        }
                    }
                }
                layer_h.push(out);
                layer_agg.push(aggs);
            }
            h.push(layer_h);
            agg_all.push(layer_agg);
        }
        Forward { h, agg: agg_all }
    }

    fn predict(params: &ModelParams, v_hat: &[f64]) -> [f64; 2] {
        let mut p = [0.0; 2];
        matvec(params.a(), params.hyper.d, v_hat, &mut p);
        p
    }

    fn require_terms(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(ModelError::EmptyLossWindow(
                "no node is present at both t and t + delta_t".into(),
            ));
        }
        Ok(())
    }

    /// Sum of squared normalized errors over the loss terms.
    pub fn loss(&self, params: &ModelParams) -> Result<f64> {
        self.check(params)?;
        self.require_terms()?;
        let fwd = self.forward(params);
        Ok(self.loss_from(&fwd, params))
    }

    fn loss_from(&self, fwd: &Forward, params: &ModelParams) -> f64 {
        let d = params.hyper.d;
        let top = &fwd.h[params.hyper.n];
        self.terms
            .iter()
            .map(|term| {
                let p = Self::predict(params, &top[term.t][term.v * d..(term.v + 1) * d]);
                let (rx, ry) = (p[0] - term.target[0], p[1] - term.target[1]);
                rx * rx + ry * ry
            })
            .sum()
    }

    /// Loss and its exact gradient by reverse-mode differentiation through the
    /// unrolled recursion.
    pub fn loss_and_gradient(&self, params: &ModelParams) -> Result<(f64, GradientVector)> {
        self.check(params)?;
        self.require_terms()?;
        let hp = &params.hyper;
        let (d, k_in, act, n) = (hp.d, hp.input_dim(), hp.activation, hp.n);
        let gamma = 1.0 - hp.alpha - hp.beta;
        let fwd = self.forward(params);

        let mut grad = GradientVector::zeros(params.len());
        let mut dh: Vec<Vec<f64>> = fwd.h[n].iter().map(|f| vec![0.0; f.len()]).collect();

        // readout
        let mut loss = 0.0;
        {
            let a_range = hp.a_range();
            for term in &self.terms {
                let v_hat = &fwd.h[n][term.t][term.v * d..(term.v + 1) * d];
                let p = Self::predict(params, v_hat);
                let r = [p[0] - term.target[0], p[1] - term.target[1]];
                loss += r[0] * r[0] + r[1] * r[1];
                outer_acc(&mut grad.0[a_range.clone()], d, &r, v_hat, 2.0);
                matvec_t_acc(params.a(), d, &r, 2.0, &mut dh[term.t][term.v * d..(term.v + 1) * d]);
            }
        }

        let mut dz = vec![0.0; d];
        for layer in (1..=n).rev() {
            let out = &fwd.h[layer];
            let below = &fwd.h[layer - 1];
            let aggs = &fwd.agg[layer - 1];
            let mut dbelow: Vec<Vec<f64>> = below.iter().map(|f| vec![0.0; f.len()]).collect();
            let (b_range, w_range) = (hp.b_range(layer), hp.w_range(layer));
            for (t, f) in self.frames.iter().enumerate() {
                for v in 0..f.len() {
                    let span = v * d..(v + 1) * d;
                    for ((z, g), y) in dz.iter_mut().zip(&dh[t][span.clone()]).zip(&out[t][span.clone()]) {
                        *z = g * act.derivative_from_output(*y);
                    }
                    if t == 0 {
                        for (db, z) in dbelow[t][span.clone()].iter_mut().zip(&dz) {
                            *db += z;
                        }
                        continue;
                    }
                    let agg = &aggs[t][span.clone()];
                    outer_acc(&mut grad.0[b_range.clone()], d, &dz, agg, hp.alpha);
                    let (self_prev_t, self_prev_i) = match f.prev_index[v] {
                        Some(pi) => (t - 1, pi),
                        None => (t, v),
                    };
                    let self_prev = &below[self_prev_t][self_prev_i * d..(self_prev_i + 1) * d];
                    outer_acc(&mut grad.0[w_range.clone()], d, &dz, self_prev, hp.beta);

                    // residual
                    for (db, z) in dbelow[t][span.clone()].iter_mut().zip(&dz) {
                        *db += gamma * z;
                    }
                    // β term
                    matvec_t_acc(
                        params.w(layer),
                        d,
                        &dz,
                        hp.beta,
                        &mut dbelow[self_prev_t][self_prev_i * d..(self_prev_i + 1) * d],
                    );
                    // α term, routed through the neighbor weights
                    if !f.neighbors[v].is_empty() {
                        let mut dagg = vec![0.0; d];
                        matvec_t_acc(params.b(layer), d, &dz, hp.alpha, &mut dagg);
                        let src_t = match self.neighbor_frame {
                            NeighborFrame::Previous => t - 1,
                            NeighborFrame::Current => t,
                        };
                        for &(u, wt) in &f.neighbors[v] {
                            for (db, g) in dbelow[src_t][u * d..(u + 1) * d].iter_mut().zip(&dagg) {
                                *db += wt * g;
                            }
                        }
                    }
                }
            }
            dh = dbelow;
        }

        let m_range = hp.m_range();
        for (t, f) in self.frames.iter().enumerate() {
            for v in 0..f.len() {
                let span = v * d..(v + 1) * d;
                for ((z, g), y) in dz.iter_mut().zip(&dh[t][span.clone()]).zip(&fwd.h[0][t][span]) {
                    *z = g * act.derivative_from_output(*y);
                }
                let x = &f.inputs[v * k_in..(v + 1) * k_in];
                outer_acc(&mut grad.0[m_range.clone()], k_in, &dz, x, 1.0);
            }
        }
        Ok((loss, grad))
    }

    /// Squared pixel errors summed per axis, with the term count.
    pub fn squared_errors(&self, params: &ModelParams) -> Result<ErrorSums> {
        self.check(params)?;
        self.require_terms()?;
        let fwd = self.forward(params);
        let d = params.hyper.d;
        let top = &fwd.h[params.hyper.n];
        let mut sums = ErrorSums::default();
        for term in &self.terms {
            let p = Self::predict(params, &top[term.t][term.v * d..(term.v + 1) * d]);
            sums.add(&self.normalizer, p, term.target);
        }
        Ok(sums)
    }

    /// Same as [`squared_errors`](Self::squared_errors) for the predictor that
    /// echoes the current position.
    pub fn baseline_squared_errors(&self) -> Result<ErrorSums> {
        self.require_terms()?;
        let mut sums = ErrorSums::default();
        for term in &self.terms {
            sums.add(&self.normalizer, term.current, term.target);
        }
        Ok(sums)
    }

    pub fn embed(&self, params: &ModelParams) -> Result<EmbeddingTable> {
        self.check(params)?;
        let fwd = self.forward(params);
        let d = params.hyper.d;
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| FrameEmbeddings {
                track_ids: f.track_ids.clone(),
                layers: fwd.h.iter().map(|layer| layer[t].clone()).collect(),
            })
            .collect();
        Ok(EmbeddingTable { d, frames })
    }
}

/// Renormalized `1/max(e, floor)` weights.
fn weights(edges: impl Iterator<Item = (usize, f64)>, floor: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = edges.map(|(u, e)| (u, neighbor_importance(e, floor))).collect();
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    if total > 0.0 {
        out.iter_mut().for_each(|(_, w)| *w /= total);
    }
    out
}

fn loss_terms(seq: &GraphSequence, normalizer: &Normalizer, delta_t: usize) -> Result<Vec<LossTerm>> {
    if delta_t == 0 {
        return Err(ModelError::InvalidDeltaT);
    }
    let big_t = seq.len();
    if big_t < delta_t + 2 {
        return Err(ModelError::EmptyLossWindow(format!(
            "sequence has {big_t} frames, delta_t = {delta_t} needs at least {}",
            delta_t + 2
        )));
    }
    let mut terms = Vec::new();
    // 1-based t = 2..=T-Δt
    for t in 1..big_t - delta_t {
        let future = &seq.graphs[t + delta_t];
        for (v, node) in seq.graphs[t].nodes.iter().enumerate() {
            if let Some(target) = future.node(node.track_id) {
                terms.push(LossTerm {
                    t,
                    v,
                    target: normalizer.position(target.position),
                    current: normalizer.position(node.position),
                });
            }
        }
    }
    Ok(terms)
}

struct Forward {
    /// `[layer][frame]`, each `len × d`.
    h: Vec<Vec<Vec<f64>>>,
    /// Weighted neighbor means feeding layers `1..=n`.
    agg: Vec<Vec<Vec<f64>>>,
}

/// Per-axis sums of squared pixel errors.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub sq_x: f64,
    pub sq_y: f64,
    pub count: usize,
}

impl ErrorSums {
    fn add(&mut self, norm: &Normalizer, pred: [f64; 2], target: [f64; 2]) {
        let ex = (pred[0] - target[0]) * norm.width;
        let ey = (pred[1] - target[1]) * norm.height;
        self.sq_x += ex * ex;
        self.sq_y += ey * ey;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.sq_x += other.sq_x;
        self.sq_y += other.sq_y;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Rmse {
        let n = self.count.max(1) as f64;
        Rmse {
            x: (self.sq_x / n).sqrt(),
            y: (self.sq_y / n).sqrt(),
        }
    }
}

/// Per-axis root mean square error in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub track_ids: Vec<u64>,
    /// `layers[i]` holds layer-`i` embeddings, `len × d`.
    pub layers: Vec<Vec<f64>>,
}

/// Embeddings for every node of every frame at every layer `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub d: usize,
    /// Indexed by position in the sequence.
    pub frames: Vec<FrameEmbeddings>,
}

impl EmbeddingTable {
    pub fn get(&self, t: usize, track_id: u64, layer: usize) -> Option<&[f64]> {
        let f = self.frames.get(t)?;
        let v = f.track_ids.iter().position(|&id| id == track_id)?;
        f.layers.get(layer).map(|l| &l[v * self.d..(v + 1) * self.d])
    }

    /// `v̂(t)`, the last layer.
    pub fn final_embedding(&self, t: usize, track_id: u64) -> Option<&[f64]> {
        let last = self.frames.get(t)?.layers.len().checked_sub(1)?;
        self.get(t, track_id, last)
    }

    pub fn layer_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.layers.len())
    }
}

/// `σ(M · x)` for one node.
pub fn initial_embedding(node: &ObjectNode, normalizer: &Normalizer, params: &ModelParams) -> Vec<f64> {
    let x = normalizer.input(node);
    let mut out = vec![0.0; params.hyper.d];
    matvec(params.m(), params.hyper.input_dim(), &x, &mut out);
    out.iter_mut().for_each(|z| *z = params.hyper.activation.apply(*z));
    out
}

/// Layer `i` embeddings at frame position `t`, computed from layer `i − 1` of
/// `table`, in the node order of frame `t`. Follows the same boundary rules as
/// [`embed_sequence`].
pub fn layer_step(
    t: usize,
    layer: usize,
    seq: &GraphSequence,
    table: &EmbeddingTable,
    params: &ModelParams,
) -> Vec<Vec<f64>> {
    let hp = &params.hyper;
    let (d, act) = (hp.d, hp.activation);
    let gamma = 1.0 - hp.alpha - hp.beta;
    let g = &seq.graphs[t];
    let below = |frame: usize, id: u64| table.get(frame, id, layer - 1).expect("layer below present");
    let mut outputs = Vec::with_capacity(g.len());
    for node in &g.nodes {
        let cur = below(t, node.track_id);
        if t == 0 {
            outputs.push(cur.iter().map(|&c| act.apply(c)).collect());
            continue;
        }
        let prev_graph = &seq.graphs[t - 1];
        let in_prev = prev_graph.node(node.track_id);
        let (src_t, src_graph, anchor) = match hp.neighbor_frame {
            NeighborFrame::Previous => (t - 1, prev_graph, in_prev.map_or(node.position, |n| n.position)),
            NeighborFrame::Current => (t, g, node.position),
        };
        let nbrs = weights(
            src_graph
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, u)| u.track_id != node.track_id)
                .map(|(ui, u)| (ui, edge_weight(u.position, anchor))),
            hp.min_edge_weight,
        );
        let mut agg = vec![0.0; d];
        for (u, wt) in nbrs {
            for (a, s) in agg.iter_mut().zip(below(src_t, src_graph.nodes[u].track_id)) {
                *a += wt * s;
            }
        }
        let self_prev = match in_prev {
            Some(_) => below(t - 1, node.track_id),
            None => cur,
        };
        let mut bz = vec![0.0; d];
        let mut wz = vec![0.0; d];
        matvec(params.b(layer), d, &agg, &mut bz);
        matvec(params.w(layer), d, self_prev, &mut wz);
        outputs.push(
            (0..d)
                .map(|j| act.apply(hp.alpha * bz[j] + hp.beta * wz[j] + gamma * cur[j]))
                .collect(),
        );
    }
    outputs
}

pub fn embed_sequence(seq: &GraphSequence, params: &ModelParams) -> Result<EmbeddingTable> {
    PreparedSequence::new(seq, &params.hyper, None)?.embed(params)
}

/// `A · v̂` in normalized coordinates.
pub fn predict_normalized(v_hat: &[f64], params: &ModelParams) -> [f64; 2] {
    PreparedSequence::predict(params, v_hat)
}

/// `A · v̂` mapped back to pixels.
pub fn predict_position(v_hat: &[f64], params: &ModelParams, normalizer: &Normalizer) -> Position {
    normalizer.denormalize(predict_normalized(v_hat, params))
}

pub fn loss(seq: &GraphSequence, params: &ModelParams, delta_t: usize) -> Result<f64> {
    PreparedSequence::new(seq, &params.hyper, Some(delta_t))?.loss(params)
}

/// Loss summed over several sequences.
pub fn loss_many(seqs: &[GraphSequence], params: &ModelParams, delta_t: usize) -> Result<f64> {
    seqs.iter().map(|s| loss(s, params, delta_t)).sum()
}

pub fn gradient(seq: &GraphSequence, params: &ModelParams, delta_t: usize) -> Result<GradientVector> {
    Ok(PreparedSequence::new(seq, &params.hyper, Some(delta_t))?
        .loss_and_gradient(params)?
        .1)
}

/// Central differences `(L(θ+h) − L(θ−h)) / 2h`, one coordinate at a time.
pub fn finite_difference_gradient(
    seq: &GraphSequence,
    params: &ModelParams,
    delta_t: usize,
    h: f64,
) -> Result<GradientVector> {
    assert!(h > 0.0, "step must be positive");
    let prepared = PreparedSequence::new(seq, &params.hyper, Some(delta_t))?;
    prepared.loss(params)?;
    let mut probe = params.clone();
    let mut grad = GradientVector::zeros(params.len());
    for i in 0..params.len() {
        let orig = params.values[i];
        probe.values[i] = orig + h;
        let plus = prepared.loss(&probe)?;
        probe.values[i] = orig - h;
        let minus = prepared.loss(&probe)?;
        probe.values[i] = orig;
        grad.0[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

pub fn evaluate_rmse(seq: &GraphSequence, params: &ModelParams, delta_t: usize) -> Result<Rmse> {
    Ok(PreparedSequence::new(seq, &params.hyper, Some(delta_t))?
        .squared_errors(params)?
        .rmse())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(flatten)]
    hyper: Hyperparams,
    len: usize,
}

/// Squared pixel errors of the predictor `p(t+Δt) = p(t)` over the loss terms.
pub fn constant_position_errors(seq: &GraphSequence, delta_t: usize) -> Result<ErrorSums> {
    let normalizer = Normalizer::for_sequence(seq);
    let terms = loss_terms(seq, &normalizer, delta_t)?;
    if terms.is_empty() {
        return Err(ModelError::EmptyLossWindow(
            "no node is present at both t and t + delta_t".into(),
        ));
    }
    let mut sums = ErrorSums::default();
    for term in &terms {
        sums.add(&normalizer, term.current, term.target);
    }
    Ok(sums)
}

/// Writes a JSON header line with the hyperparameters, then one parameter per
/// line with 17 significant digits (exact f64 round trip).
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        hyper: params.hyper,
        len: params.len(),
    };
    let line = serde_json::to_string(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    writeln!(out, "{line}")?;
    for v in params.as_flat() {
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<ModelParams> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| ModelError::Checkpoint("empty checkpoint".into()))??;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let mut values = Vec::with_capacity(header.len);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|_| ModelError::Checkpoint(format!("line {}: not a number", i + 2)))?,
        );
    }
    if values.len() != header.len {
        return Err(ModelError::Checkpoint(format!(
            "header declares {} values, found {}",
            header.len,
            values.len()
        )));
    }
    ModelParams::from_flat(header.hyper, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_model::AttributedGraph;
    use crate::ingest::{synth_scene, Motion, SynthConfig};

    fn hyper(d: usize, n: usize, act: Activation) -> Hyperparams {
        Hyperparams::new(d, 17, n, 0.1, 0.1, act)
    }

    fn node(id: u64, x: f64, y: f64) -> ObjectNode {
        ObjectNode::new(id, Position::new(x, y), vec![0.0; 17])
    }

    fn small_scene(seed: u64, n_objects: usize, n_frames: usize) -> GraphSequence {
        synth_scene(&SynthConfig {
            n_objects,
            n_frames,
            seed,
            motion: Motion::Linear,
            speed_min: 5.0,
            speed_max: 20.0,
            frame_width: 200.0,
            frame_height: 150.0,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let h = Hyperparams::new(2, 17, 2, 0.1, 0.1, Activation::Tanh);
        assert_eq!(init_params(h, 7).unwrap(), init_params(h, 7).unwrap());
        assert_ne!(init_params(h, 7).unwrap(), init_params(h, 8).unwrap());
        let bad = Hyperparams::new(2, 17, 2, 0.6, 0.6, Activation::Tanh);
        assert!(matches!(init_params(bad, 7), Err(ModelError::InvalidHyperparams(_))));
        assert_eq!(hyper(32, 2, Activation::Tanh).param_count(), 4768);
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let h = hyper(8, 2, Activation::Tanh);
        let p = init_params(h, 1).unwrap();
        let s_m = (6.0f64 / (19.0 + 8.0)).sqrt();
        let s_a = (6.0f64 / 10.0).sqrt();
        assert!(p.m().iter().all(|x| x.abs() <= s_m));
        assert!(p.a().iter().all(|x| x.abs() <= s_a));
    }

    #[test]
    fn initial_embedding_examples() {
        let norm = Normalizer {
            width: 100.0,
            height: 100.0,
        };
        let n = node(0, 50.0, 20.0);
        let zero = ModelParams::zeros(hyper(3, 1, Activation::Tanh)).unwrap();
        assert_eq!(initial_embedding(&n, &norm, &zero), vec![0.0; 3]);

        let mut p = ModelParams::zeros(hyper(1, 1, Activation::Tanh)).unwrap();
        p.m_mut()[0] = 1.0;
        let e = initial_embedding(&n, &norm, &p);
        assert!((e[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((e[0] - 0.4621).abs() < 1e-4);

        let mut p = ModelParams::zeros(hyper(4, 1, Activation::Relu)).unwrap();
        p.m_mut().iter_mut().for_each(|x| *x = -1.0);
        assert_eq!(initial_embedding(&n, &norm, &p), vec![0.0; 4]);
    }

    fn seq_of(graphs: Vec<AttributedGraph>) -> GraphSequence {
        GraphSequence::new(graphs, 30.0, 100.0, 100.0, 17)
    }

    #[test]
    fn layer_step_without_neighbors_drops_alpha_term() {
        let seq = seq_of(vec![
            AttributedGraph::new(1, vec![node(0, 10.0, 10.0)]),
            AttributedGraph::new(2, vec![node(0, 20.0, 10.0)]),
        ]);
        let h = hyper(3, 1, Activation::Tanh);
        let p = init_params(h, 3).unwrap();
        let table = embed_sequence(&seq, &p).unwrap();
        let v_prev = table.get(0, 0, 0).unwrap();
        let v_cur = table.get(1, 0, 0).unwrap();
        let mut wz = vec![0.0; 3];
        matvec(p.w(1), 3, v_prev, &mut wz);
        for j in 0..3 {
            let expected = (0.1 * wz[j] + 0.8 * v_cur[j]).tanh();
            assert!((table.get(1, 0, 1).unwrap()[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_alpha_beta_is_pure_residual() {
        let seq = small_scene(1, 3, 6);
        let mut h = hyper(4, 2, Activation::Tanh);
        h.alpha = 0.0;
        h.beta = 0.0;
        let p = init_params(h, 5).unwrap();
        let table = embed_sequence(&seq, &p).unwrap();
        for t in 0..seq.len() {
            for id in 0..3 {
                let below = table.get(t, id, 1).unwrap();
                let above = table.get(t, id, 2).unwrap();
                for (b, a) in below.iter().zip(above) {
                    assert!((b.tanh() - a).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn equidistant_neighbors_get_equal_weights() {
        // node 0 at the center, neighbors 1 and 2 at distance 10 on either side
        let frame = |f| {
            AttributedGraph::new(f, vec![node(0, 50.0, 50.0), node(1, 40.0, 50.0), node(2, 60.0, 50.0)])
        };
        let seq = seq_of(vec![frame(1), frame(2)]);
        let mut h = hyper(3, 1, Activation::Tanh);
        h.alpha = 1.0;
        h.beta = 0.0;
        let mut p = init_params(h, 11).unwrap();
        // B = I so the layer output is tanh(AGG)
        p.b_mut(1).iter_mut().enumerate().for_each(|(i, x)| *x = if i % 4 == 0 { 1.0 } else { 0.0 });
        let table = embed_sequence(&seq, &p).unwrap();
        let u1 = table.get(0, 1, 0).unwrap();
        let u2 = table.get(0, 2, 0).unwrap();
        let out = table.get(1, 0, 1).unwrap();
        for j in 0..3 {
            let mean = 0.5 * (u1[j] + u2[j]);
            assert!((out[j] - mean.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_step_matches_embed_sequence() {
        for neighbor_frame in [NeighborFrame::Previous, NeighborFrame::Current] {
            let mut seq = small_scene(4, 4, 8);
            // a node that appears late and one that leaves
            seq.graphs[3].nodes.retain(|n| n.track_id != 2);
            seq.graphs[5].nodes.retain(|n| n.track_id != 1);
            let mut h = hyper(5, 2, Activation::Sigmoid);
            h.neighbor_frame = neighbor_frame;
            let p = init_params(h, 9).unwrap();
            let table = embed_sequence(&seq, &p).unwrap();
            for t in 0..seq.len() {
                for layer in 1..=2 {
                    let step = layer_step(t, layer, &seq, &table, &p);
                    for (node, out) in seq.graphs[t].nodes.iter().zip(step) {
                        let got = table.get(t, node.track_id, layer).unwrap();
                        for (a, b) in got.iter().zip(&out) {
                            assert!((a - b).abs() < 1e-14, "t={t} layer={layer}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_frame_reduces_to_bootstrap() {
        let seq = seq_of(vec![AttributedGraph::new(1, vec![node(0, 1.0, 1.0), node(1, 3.0, 1.0)])]);
        let p = init_params(hyper(3, 2, Activation::Tanh), 2).unwrap();
        let table = embed_sequence(&seq, &p).unwrap();
        assert_eq!(table.frames.len(), 1);
        assert_eq!(table.layer_count(), 3);
        let v0 = table.get(0, 1, 0).unwrap();
        let v2 = table.get(0, 1, 2).unwrap();
        for (a, b) in v0.iter().zip(v2) {
            assert!((a.tanh().tanh() - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embeddings_are_causal() {
        let seq = small_scene(8, 4, 10);
        let p = init_params(hyper(4, 2, Activation::Tanh), 1).unwrap();
        let base = embed_sequence(&seq, &p).unwrap();
        let t = 5;
        // future frame
        let mut future = seq.clone();
        future.graphs[t + 1].nodes[0].features[3] = 200.0;
        future.graphs[t + 1].nodes[1].position.x += 7.0;
        // frame t - n - 1
        let mut past = seq.clone();
        past.graphs[t - 3].nodes[0].features[5] = 17.0;
        past.graphs[t - 3].nodes[2].position.y += 9.0;
        // frame t - n is inside the window and must matter
        let mut inside = seq.clone();
        inside.graphs[t - 2].nodes[0].features[5] = 17.0;
        for (alt, same) in [(&future, true), (&past, true), (&inside, false)] {
            let other = embed_sequence(alt, &p).unwrap();
            let equal = (0..4).all(|id| base.final_embedding(t, id) == other.final_embedding(t, id));
            assert_eq!(equal, same);
        }
    }

    #[test]
    fn prediction_examples() {
        let mut p = ModelParams::zeros(hyper(1, 1, Activation::Tanh)).unwrap();
        let norm = Normalizer {
            width: 640.0,
            height: 480.0,
        };
        assert_eq!(predict_normalized(&[0.3], &p), [0.0, 0.0]);
        assert_eq!(predict_position(&[0.3], &p, &norm), Position::new(0.0, 0.0));
        p.a_mut().copy_from_slice(&[2.0, 3.0]);
        assert_eq!(predict_normalized(&[0.5], &p), [1.0, 1.5]);
        assert_eq!(predict_position(&[0.5], &p, &norm), Position::new(640.0, 720.0));

        let mut p = ModelParams::zeros(hyper(3, 1, Activation::Tanh)).unwrap();
        p.a_mut().copy_from_slice(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(predict_normalized(&[0.1, 0.2, 0.3], &p), [0.2, 0.3]);
    }

    /// Params whose readout reproduces the current normalized position exactly:
    /// relu passes the (positive) coordinates through every layer.
    fn echo_params(alpha_beta_zero: bool) -> ModelParams {
        let mut h = Hyperparams::new(2, 17, 2, 0.0, 0.0, Activation::Relu);
        if !alpha_beta_zero {
            h.alpha = 0.1;
        }
        let mut p = ModelParams::zeros(h).unwrap();
        p.m_mut()[0] = 1.0;
        p.m_mut()[19 + 1] = 1.0;
        p.a_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p
    }

    #[test]
    fn loss_examples() {
        // A·v̂ equals every target: a stationary scene with the echo model
        let still: Vec<_> = (1..=6)
            .map(|f| AttributedGraph::new(f, vec![node(0, 20.0, 30.0), node(1, 70.0, 10.0)]))
            .collect();
        let seq = seq_of(still);
        let p = echo_params(true);
        assert_eq!(loss(&seq, &p, 2).unwrap(), 0.0);
        assert_eq!(gradient(&seq, &p, 2).unwrap().max_abs(), 0.0);
        let fd = finite_difference_gradient(&seq, &p, 2, 1e-5).unwrap();
        assert!(fd.max_abs() < 1e-8);

        // one term: target (0.5, 0.5), prediction (0.5, 0.7)
        let seq = seq_of(vec![
            AttributedGraph::new(1, vec![node(0, 1.0, 1.0)]),
            AttributedGraph::new(2, vec![node(0, 50.0, 70.0)]),
            AttributedGraph::new(3, vec![node(0, 50.0, 50.0)]),
        ]);
        let l = loss(&seq, &p, 1).unwrap();
        assert!((l - 0.04).abs() < 1e-15, "{l}");
    }

    #[test]
    fn loss_window_errors() {
        let seq = small_scene(1, 2, 5);
        let p = init_params(hyper(2, 1, Activation::Tanh), 0).unwrap();
        assert!(matches!(loss(&seq, &p, 0), Err(ModelError::InvalidDeltaT)));
        assert!(matches!(loss(&seq, &p, 4), Err(ModelError::EmptyLossWindow(_))));
        assert!(loss(&seq, &p, 3).is_ok());
        // the only node vanishes at t + Δt
        let seq = seq_of(vec![
            AttributedGraph::new(1, vec![node(0, 1.0, 1.0)]),
            AttributedGraph::new(2, vec![node(0, 1.0, 1.0)]),
            AttributedGraph::new(3, vec![node(1, 1.0, 1.0)]),
        ]);
        assert!(matches!(loss(&seq, &p, 1), Err(ModelError::EmptyLossWindow(_))));
    }

    #[test]
    fn loss_is_additive_over_sequences() {
        let a = small_scene(1, 3, 12);
        let b = small_scene(2, 4, 15);
        let p = init_params(hyper(4, 2, Activation::Tanh), 3).unwrap();
        let sum = loss(&a, &p, 3).unwrap() + loss(&b, &p, 3).unwrap();
        assert!((loss_many(&[a, b], &p, 3).unwrap() - sum).abs() < 1e-12 * sum);
    }

    #[test]
    fn readout_gradient_matches_closed_form() {
        let seq = small_scene(3, 3, 9);
        let mut p = init_params(hyper(4, 2, Activation::Tanh), 4).unwrap();
        p.a_mut().iter_mut().for_each(|x| *x = 0.0);
        let g = gradient(&seq, &p, 2).unwrap();
        // ∂L/∂A = −2 Σ (p − A v̂) v̂ᵀ with A = 0
        let table = embed_sequence(&seq, &p).unwrap();
        let norm = Normalizer::for_sequence(&seq);
        let mut expected = [0.0; 8];
        for t in 1..seq.len() - 2 {
            for node in &seq.graphs[t].nodes {
                let Some(target) = seq.graphs[t + 2].node(node.track_id) else { continue };
                let v_hat = table.final_embedding(t, node.track_id).unwrap();
                let tgt = norm.position(target.position);
                for r in 0..2 {
                    for c in 0..4 {
                        expected[r * 4 + c] -= 2.0 * tgt[r] * v_hat[c];
                    }
                }
            }
        }
        let a_grad = &g.as_slice()[p.len() - 8..];
        for (got, want) in a_grad.iter().zip(expected) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            assert!(want != 0.0);
        }
        let fd = finite_difference_gradient(&seq, &p, 2, 1e-5).unwrap();
        for (got, want) in fd.as_slice()[p.len() - 8..].iter().zip(expected) {
            assert!((got - want).abs() <= 1e-6 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn finite_difference_step_sizes_agree() {
        let seq = small_scene(5, 3, 8);
        let p = init_params(hyper(3, 2, Activation::Tanh), 6).unwrap();
        let g5 = finite_difference_gradient(&seq, &p, 2, 1e-5).unwrap();
        let g6 = finite_difference_gradient(&seq, &p, 2, 1e-6).unwrap();
        for (a, b) in g5.as_slice().iter().zip(g6.as_slice()) {
            if a.abs() > 1e-4 {
                assert!((a - b).abs() <= 1e-3 * a.abs(), "{a} vs {b}");
            }
        }
    }

    fn assert_gradient_matches(seq: &GraphSequence, p: &ModelParams, dt: usize) {
        let g = gradient(seq, p, dt).unwrap();
        let fd = finite_difference_gradient(seq, p, dt, 1e-5).unwrap();
        for (i, (a, b)) in g.as_slice().iter().zip(fd.as_slice()).enumerate() {
            if a.abs() > 1e-8 {
                let rel = (a - b).abs() / a.abs().max(b.abs());
                assert!(rel < 1e-4 || (a - b).abs() < 1e-9, "coord {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_for_each_activation() {
        let mut seq = small_scene(12, 4, 10);
        seq.graphs[4].nodes.retain(|n| n.track_id != 3);
        seq.graphs[6].nodes.retain(|n| n.track_id != 0);
        for act in [Activation::Tanh, Activation::Sigmoid] {
            for nf in [NeighborFrame::Previous, NeighborFrame::Current] {
                let mut h = Hyperparams::new(5, 17, 2, 0.3, 0.25, act);
                h.neighbor_frame = nf;
                let p = init_params(h, 21).unwrap();
                assert_gradient_matches(&seq, &p, 3);
            }
        }
    }

    #[test]
    fn small_descent_step_does_not_increase_loss() {
        let seq = small_scene(13, 5, 12);
        for act in [Activation::Tanh, Activation::Sigmoid] {
            let mut p = init_params(hyper(6, 2, act), 2).unwrap();
            let (l0, g) = PreparedSequence::new(&seq, &p.hyper, Some(3))
                .unwrap()
                .loss_and_gradient(&p)
                .unwrap();
            p.descend(1e-4, &g);
            assert!(loss(&seq, &p, 3).unwrap() <= l0);
        }
    }

    #[test]
    fn relabeling_tracks_keeps_the_loss() {
        let seq = small_scene(14, 5, 12);
        let p = init_params(hyper(4, 2, Activation::Tanh), 8).unwrap();
        let mut relabeled = seq.clone();
        for g in &mut relabeled.graphs {
            let nodes = g
                .nodes
                .iter()
                .map(|n| ObjectNode::new(100 - n.track_id * 7, n.position, n.features.clone()))
                .collect();
            *g = AttributedGraph::new(g.frame_index, nodes);
        }
        let a = loss(&seq, &p, 3).unwrap();
        let b = loss(&relabeled, &p, 3).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn rmse_examples() {
        let p = echo_params(true);
        let still: Vec<_> = (1..=6).map(|f| AttributedGraph::new(f, vec![node(0, 20.0, 30.0)])).collect();
        assert_eq!(evaluate_rmse(&seq_of(still), &p, 2).unwrap(), Rmse { x: 0.0, y: 0.0 });

        // echo predictor on motion (+3, −4) per frame with Δt = 1
        let moving: Vec<_> = (0..6)
            .map(|i| AttributedGraph::new(i + 1, vec![node(0, 10.0 + 3.0 * i as f64, 60.0 - 4.0 * i as f64)]))
            .collect();
        let r = evaluate_rmse(&seq_of(moving), &p, 1).unwrap();
        assert!((r.x - 3.0).abs() < 1e-12 && (r.y - 4.0).abs() < 1e-12, "{r:?}");

        let single = seq_of(vec![
            AttributedGraph::new(1, vec![node(0, 0.0, 0.0)]),
            AttributedGraph::new(2, vec![node(0, 10.0, 20.0)]),
            AttributedGraph::new(3, vec![node(0, 16.0, 28.0)]),
        ]);
        let r = evaluate_rmse(&single, &p, 1).unwrap();
        assert!((r.x - 6.0).abs() < 1e-12 && (r.y - 8.0).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn echo_model_matches_baseline() {
        let seq = small_scene(30, 4, 40);
        let prepared = PreparedSequence::new(&seq, &echo_params(true).hyper, Some(10)).unwrap();
        let model = prepared.squared_errors(&echo_params(true)).unwrap().rmse();
        let base = prepared.baseline_squared_errors().unwrap().rmse();
        assert!((model.x - base.x).abs() < 1e-9 && (model.y - base.y).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = init_params(hyper(6, 2, Activation::Sigmoid), 77).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains('e'));
    }

    #[test]
    fn mismatched_sequence_is_rejected() {
        let mut seq = small_scene(1, 2, 6);
        seq.feature_len = 5;
        let p = init_params(hyper(2, 1, Activation::Tanh), 0).unwrap();
        assert!(matches!(loss(&seq, &p, 1), Err(ModelError::DimensionMismatch { .. })));
    }

    #[test]
    fn embedding_runtime_grows_at_most_linearly() {
        let p = init_params(hyper(16, 2, Activation::Tanh), 0).unwrap();
        let time = |frames: usize| {
            let seq = small_scene(2, 6, frames);
            let prepared = PreparedSequence::new(&seq, &p.hyper, None).unwrap();
            let start = std::time::Instant::now();
            for _ in 0..5 {
                std::hint::black_box(prepared.embed(&p).unwrap());
            }
            start.elapsed().as_secs_f64()
        };
        time(50);
        let (t1, t2, t4) = (time(200), time(400), time(800));
        // slack for timer noise; quadratic growth would give 16x
        assert!(t4 < 8.0 * t1, "{t1} {t2} {t4}");
        assert!(t2 < 4.0 * t1, "{t1} {t2}");
    }
}
