//! Personalized reward model built from a mixture of low-rank experts.
//!
//! A small frozen feed-forward network scores response features. Every layer
//! `W0` is adapted per user:
//!
//! ```text
//! W_u = W0 + A_s B_s + w_k A_k B_k,   k = argmax z,  w_k = softmax(z / τ)_k
//! ```
//!
//! where `z` comes from that layer's own gating MLP applied to the user
//! embedding. The user embedding reaches the reward only through the gates.
//!
//! Training treats the routed index `k` as constant within a step; gradients
//! reach the gate through the surviving softmax value `w_k`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoplError, Result};
use crate::json::matrix;
use crate::math::{argmax, glorot_uniform, pair_loss, pair_loss_grad, softmax};
use crate::optim::{cosine_with_warmup, AdamW, AdamWConfig};
use crate::prefdata::{PreferencePair, ResponseFeatures};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoleConfig {
    /// Width of every adapted layer.
    pub hidden: usize,
    /// Number of adapted layers.
    pub depth: usize,
    pub num_experts: usize,
    /// Rank of every expert (clamped to the layer's smaller side).
    pub rank: usize,
    pub gate_hidden: usize,
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for MoleConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 4,
            num_experts: 8,
            rank: 8,
            gate_hidden: 256,
            temperature: 1.0,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub rng_seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 32,
            warmup_ratio: 0.03,
            rng_seed: 0,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 || !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(CoplError::invalid(
                "reward training needs lr > 0, batch_size >= 1, warmup_ratio in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// `A (d_out × n) · B (n × d_in)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    #[serde(with = "matrix")]
    pub a: Array2<f64>,
    #[serde(with = "matrix")]
    pub b: Array2<f64>,
}

impl LowRank {
    /// Up-projection starts at zero so the delta starts at zero.
    fn init<R: Rng>(d_out: usize, d_in: usize, rank: usize, rng: &mut R) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        Self {
            a: Array2::zeros((d_out, rank)),
            b: Array2::from_shape_simple_fn((rank, d_in), || rng.gen_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn product(&self) -> Array2<f64> {
        self.a.dot(&self.b)
    }
}

/// Two-layer gating perceptron: `z = W2 relu(W1 e + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    #[serde(with = "matrix")]
    pub w1: Array2<f64>,
    #[serde(with = "matrix")]
    pub b1: Array2<f64>,
    #[serde(with = "matrix")]
    pub w2: Array2<f64>,
    #[serde(with = "matrix")]
    pub b2: Array2<f64>,
}

impl Gate {
    fn init<R: Rng>(input: usize, hidden: usize, experts: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot_uniform(hidden, input, input, hidden, rng),
            b1: Array2::zeros((1, hidden)),
            w2: glorot_uniform(experts, hidden, hidden, experts, rng),
            b2: Array2::zeros((1, experts)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array2::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array2::zeros(self.b2.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// Returns (hidden pre-activation, logits).
    fn forward(&self, e: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let pre = self.w1.dot(&e) + self.b1.row(0);
        let hidden = pre.mapv(|x| x.max(0.0));
        let logits = self.w2.dot(&hidden) + self.b2.row(0);
        (pre, logits)
    }

    pub fn logits(&self, e: ArrayView1<f64>) -> Array1<f64> {
        self.forward(e).1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleLayer {
    /// Frozen base weight.
    #[serde(with = "matrix")]
    pub w0: Array2<f64>,
    pub shared: LowRank,
    pub experts: Vec<LowRank>,
    pub gate: Gate,
    pub temperature: f64,
}

/// Top-1 gate weights from logits: the argmax (lowest index on ties) keeps
/// its full-softmax probability, every other expert gets zero.
pub fn top1_weights(logits: &[f64], temperature: f64) -> Vec<f64> {
    let probs = softmax(logits, temperature);
    let k = argmax(logits);
    let mut w = vec![0.0; logits.len()];
    w[k] = probs[k];
    w
}

impl MoleLayer {
    pub fn d_in(&self) -> usize {
        self.w0.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.nrows()
    }

    pub fn rank(&self) -> usize {
        self.shared.b.nrows()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn gate_weights(&self, e_u: ArrayView1<f64>) -> Result<Vec<f64>> {
        self.check_gate_input(e_u)?;
        Ok(top1_weights(
            self.gate.logits(e_u).as_slice().unwrap(),
            self.temperature,
        ))
    }

    /// `W0 + A_s B_s + Σ w_i A_i B_i` for the given user.
    pub fn adapted_matrix(&self, e_u: ArrayView1<f64>) -> Result<Array2<f64>> {
        let w = self.gate_weights(e_u)?;
        let mut m = &self.w0 + &self.shared.product();
        for (wi, ex) in w.iter().zip(&self.experts) {
            if *wi != 0.0 {
                m.scaled_add(*wi, &ex.product());
            }
        }
        Ok(m)
    }

    fn check_gate_input(&self, e_u: ArrayView1<f64>) -> Result<()> {
        if e_u.len() != self.gate.input_dim() {
            return Err(CoplError::DimensionMismatch(format!(
                "gate expects a {}-dim user embedding, got {}",
                self.gate.input_dim(),
                e_u.len()
            )));
        }
        Ok(())
    }

    fn route(&self, e_u: ArrayView1<f64>) -> Route {
        let (gate_pre, logits) = self.gate.forward(e_u);
        let logits = logits.to_vec();
        let probs = softmax(&logits, self.temperature);
        let expert = argmax(&logits);
        Route {
            expert,
            weight: probs[expert],
            probs,
            gate_pre,
        }
    }
}

#[derive(Debug, Clone)]
struct Route {
    expert: usize,
    weight: f64,
    probs: Vec<f64>,
    gate_pre: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleRewardModel {
    pub input_dim: usize,
    pub layers: Vec<MoleLayer>,
    #[serde(with = "matrix")]
    pub head: Array2<f64>,
    #[serde(with = "matrix")]
    pub head_bias: Array2<f64>,
}

struct LayerTrace {
    input: Array1<f64>,
    pre: Array1<f64>,
    shared_low: Array1<f64>,
    expert_low: Array1<f64>,
    expert_out: Array1<f64>,
}

struct ResponseTrace {
    layers: Vec<LayerTrace>,
    output: Array1<f64>,
    reward: f64,
}

impl MoleRewardModel {
    /// Random frozen base and gates; all expert deltas start at zero.
    pub fn new(input_dim: usize, user_dim: usize, cfg: &MoleConfig) -> Result<Self> {
        if input_dim == 0 || user_dim == 0 || cfg.hidden == 0 || cfg.depth == 0 {
            return Err(CoplError::invalid("reward model dimensions must be >= 1"));
        }
        if cfg.num_experts == 0 || cfg.rank == 0 || cfg.gate_hidden == 0 {
            return Err(CoplError::invalid(
                "reward model needs >= 1 expert, rank >= 1, gate width >= 1",
            ));
        }
        if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
            return Err(CoplError::invalid("gate temperature must be > 0"));
        }
        let mut rng = rng_from(cfg.rng_seed);
        let mut layers = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let d_in = if l == 0 { input_dim } else { cfg.hidden };
            let d_out = cfg.hidden;
            let rank = cfg.rank.min(d_in).min(d_out);
            let bound = (6.0 / d_in as f64).sqrt();
            let w0 = Array2::from_shape_simple_fn((d_out, d_in), || rng.gen_range(-bound..bound));
            let shared = LowRank::init(d_out, d_in, rank, &mut rng);
            let experts = (0..cfg.num_experts)
                .map(|_| LowRank::init(d_out, d_in, rank, &mut rng))
                .collect();
            let gate = Gate::init(user_dim, cfg.gate_hidden, cfg.num_experts, &mut rng);
            layers.push(MoleLayer {
                w0,
                shared,
                experts,
                gate,
                temperature: cfg.temperature,
            });
        }
        let head = glorot_uniform(1, cfg.hidden, cfg.hidden, 1, &mut rng);
        Ok(Self {
            input_dim,
            layers,
            head,
            head_bias: Array2::zeros((1, 1)),
        })
    }

    pub fn user_dim(&self) -> usize {
        self.layers[0].gate.input_dim()
    }

    pub fn num_experts(&self) -> usize {
        self.layers[0].num_experts()
    }

    fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| MoleLayer {
                    w0: Array2::zeros((0, 0)),
                    shared: l.shared.zeros_like(),
                    experts: l.experts.iter().map(LowRank::zeros_like).collect(),
                    gate: l.gate.zeros_like(),
                    temperature: l.temperature,
                })
                .collect(),
            head: Array2::zeros(self.head.raw_dim()),
            head_bias: Array2::zeros((1, 1)),
        }
    }

    /// Trainable tensors in a fixed order; `W0` is never included.
    pub fn trainable(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.shared.a);
            out.push(&l.shared.b);
            for e in &l.experts {
                out.push(&e.a);
                out.push(&e.b);
            }
            out.extend([&l.gate.w1, &l.gate.b1, &l.gate.w2, &l.gate.b2]);
        }
        out.push(&self.head);
        out.push(&self.head_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.shared.a);
            out.push(&mut l.shared.b);
            for e in &mut l.experts {
                out.push(&mut e.a);
                out.push(&mut e.b);
            }
            out.push(&mut l.gate.w1);
            out.push(&mut l.gate.b1);
            out.push(&mut l.gate.w2);
            out.push(&mut l.gate.b2);
        }
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    fn check_features(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(CoplError::DimensionMismatch(format!(
                "reward model expects {} response features, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    fn routes(&self, e_u: ArrayView1<f64>) -> Result<Vec<Route>> {
        self.layers[0].check_gate_input(e_u)?;
        Ok(self.layers.iter().map(|l| l.route(e_u)).collect())
    }

    fn forward_response(&self, routes: &[Route], x: ArrayView1<f64>) -> ResponseTrace {
        let mut h = x.to_owned();
        let mut traces = Vec::with_capacity(self.layers.len());
        for (layer, route) in self.layers.iter().zip(routes) {
            let shared_low = layer.shared.b.dot(&h);
            let ex = &layer.experts[route.expert];
            let expert_low = ex.b.dot(&h);
            let expert_out = ex.a.dot(&expert_low);
            let mut pre = layer.w0.dot(&h);
            pre += &layer.shared.a.dot(&shared_low);
            pre.scaled_add(route.weight, &expert_out);
            let next = pre.mapv(|v| v.max(0.0));
            traces.push(LayerTrace {
                input: h,
                pre,
                shared_low,
                expert_low,
                expert_out,
            });
            h = next;
        }
        let reward = self.head.row(0).dot(&h) + self.head_bias[[0, 0]];
        ResponseTrace {
            layers: traces,
            output: h,
            reward,
        }
    }

    /// Accumulates `d_reward · ∂reward/∂θ` into `grads`; returns per-layer
    /// gradients with respect to the surviving gate weight.
    fn backward_response(&self, routes: &[Route], trace: &ResponseTrace, d_reward: f64, grads: &mut Self) -> Vec<f64> {
        grads.head.row_mut(0).scaled_add(d_reward, &trace.output);
        grads.head_bias[[0, 0]] += d_reward;
        let mut g_h = self.head.row(0).mapv(|w| w * d_reward);
        let mut g_weight = vec![0.0; self.layers.len()];
        for (l, (layer, route)) in self.layers.iter().zip(routes).enumerate().rev() {
            let t = &trace.layers[l];
            let g_pre: Array1<f64> = ndarray::Zip::from(&g_h)
                .and(&t.pre)
                .map_collect(|g, &p| if p > 0.0 { *g } else { 0.0 });
            let k = route.expert;
            let w = route.weight;
            let gl = &mut grads.layers[l];

            // shared path: pre += A_s (B_s h)
            let g_shared_low = layer.shared.a.t().dot(&g_pre);
            outer_add(&mut gl.shared.a, 1.0, &g_pre, &t.shared_low);
            outer_add(&mut gl.shared.b, 1.0, &g_shared_low, &t.input);

            // routed path: pre += w A_k (B_k h)
            let ex = &layer.experts[k];
            let g_expert_low = ex.a.t().dot(&g_pre) * w;
            outer_add(&mut gl.experts[k].a, w, &g_pre, &t.expert_low);
            outer_add(&mut gl.experts[k].b, 1.0, &g_expert_low, &t.input);
            g_weight[l] = g_pre.dot(&t.expert_out);

            let mut g_in = layer.w0.t().dot(&g_pre);
            g_in += &layer.shared.b.t().dot(&g_shared_low);
            g_in += &ex.b.t().dot(&g_expert_low);
            g_h = g_in;
        }
        g_weight
    }

    /// Backpropagates per-layer surviving-weight gradients into the gates.
    fn backward_gates(&self, routes: &[Route], e_u: ArrayView1<f64>, g_weight: &[f64], grads: &mut Self) {
        for (l, (layer, route)) in self.layers.iter().zip(routes).enumerate() {
            if g_weight[l] == 0.0 {
                continue;
            }
            let k = route.expert;
            let tau = layer.temperature;
            // ∂w_k/∂z_j = w_k (δ_kj − p_j) / τ
            let g_logits: Array1<f64> = route
                .probs
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    g_weight[l] * route.weight * (delta - p) / tau
                })
                .collect();
            let hidden = route.gate_pre.mapv(|x| x.max(0.0));
            let gg = &mut grads.layers[l].gate;
            outer_add(&mut gg.w2, 1.0, &g_logits, &hidden);
            gg.b2.row_mut(0).scaled_add(1.0, &g_logits);
            let g_hidden = layer.gate.w2.t().dot(&g_logits);
            let g_pre = ndarray::Zip::from(&g_hidden)
                .and(&route.gate_pre)
                .map_collect(|g, &p| if p > 0.0 { *g } else { 0.0 });
            outer_add(&mut gg.w1, 1.0, &g_pre, &e_u.to_owned());
            gg.b1.row_mut(0).scaled_add(1.0, &g_pre);
        }
    }

    /// Scalar reward of a response (feature vector) for a user embedding.
    pub fn reward(&self, e_u: ArrayView1<f64>, features: ArrayView1<f64>) -> Result<f64> {
        self.check_features(features)?;
        let routes = self.routes(e_u)?;
        Ok(self.forward_response(&routes, features).reward)
    }

    /// `f(u, a) − f(u, b)`, routing the user once.
    pub fn pair_margin(&self, e_u: ArrayView1<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        self.check_features(a)?;
        self.check_features(b)?;
        let routes = self.routes(e_u)?;
        Ok(self.forward_response(&routes, a).reward - self.forward_response(&routes, b).reward)
    }

    /// `−ln σ(f(u, preferred) − f(u, rejected))`.
    pub fn pair_loss(
        &self,
        e_u: ArrayView1<f64>,
        preferred: ArrayView1<f64>,
        rejected: ArrayView1<f64>,
    ) -> Result<f64> {
        Ok(pair_loss(self.reward(e_u, preferred)? - self.reward(e_u, rejected)?))
    }

    /// Pair loss and its gradient over trainable tensors (same layout as
    /// [`Self::trainable`]) with the routed expert held fixed.
    pub fn pair_loss_and_grad(
        &self,
        e_u: ArrayView1<f64>,
        preferred: ArrayView1<f64>,
        rejected: ArrayView1<f64>,
    ) -> Result<(f64, MoleRewardModel)> {
        let mut grads = self.zeros_like();
        let loss = self.accumulate_pair(e_u, preferred, rejected, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_pair(
        &self,
        e_u: ArrayView1<f64>,
        preferred: ArrayView1<f64>,
        rejected: ArrayView1<f64>,
        scale: f64,
        grads: &mut Self,
    ) -> Result<f64> {
        self.check_features(preferred)?;
        self.check_features(rejected)?;
        let routes = self.routes(e_u)?;
        let ta = self.forward_response(&routes, preferred);
        let tb = self.forward_response(&routes, rejected);
        let margin = ta.reward - tb.reward;
        let g = scale * pair_loss_grad(margin);
        let ga = self.backward_response(&routes, &ta, g, grads);
        let gb = self.backward_response(&routes, &tb, -g, grads);
        let g_weight: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| a + b).collect();
        self.backward_gates(&routes, e_u, &g_weight, grads);
        Ok(pair_loss(margin))
    }

    /// Routed expert per layer for one user.
    pub fn allocation(&self, e_u: ArrayView1<f64>) -> Result<Vec<usize>> {
        Ok(self.routes(e_u)?.iter().map(|r| r.expert).collect())
    }
}

fn outer_add(target: &mut Array2<f64>, scale: f64, left: &Array1<f64>, right: &Array1<f64>) {
    for (i, mut row) in target.axis_iter_mut(Axis(0)).enumerate() {
        let c = scale * left[i];
        if c != 0.0 {
            row.scaled_add(c, right);
        }
    }
}

/// Response features as a dense `num_responses × D` matrix.
pub fn feature_matrix(responses: &[ResponseFeatures]) -> Array2<f64> {
    let d = responses.first().map_or(0, |r| r.attributes.len());
    let mut m = Array2::zeros((responses.len(), d));
    for (i, r) in responses.iter().enumerate() {
        for (j, x) in r.attributes.iter().enumerate() {
            m[[i, j]] = *x;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct RewardTrainOutput {
    pub model: MoleRewardModel,
    /// Mean per-pair loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains expert factors, gates and head on BTL pairs. `W0` and the user
/// embeddings stay frozen. `user_embeddings` rows are indexed by user id.
pub fn train_reward(
    model: &MoleRewardModel,
    user_embeddings: &Array2<f64>,
    features: &Array2<f64>,
    pairs: &[PreferencePair],
    cfg: &RewardTrainConfig,
) -> Result<RewardTrainOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(CoplError::invalid("train_reward needs at least one pair"));
    }
    if user_embeddings.ncols() != model.user_dim() {
        return Err(CoplError::DimensionMismatch(format!(
            "user embeddings are {}-dim, gates expect {}",
            user_embeddings.ncols(),
            model.user_dim()
        )));
    }
    for p in pairs {
        if p.user >= user_embeddings.nrows() {
            return Err(CoplError::invalid(format!("training user {} has no embedding", p.user)));
        }
        if p.preferred.max(p.rejected) >= features.nrows() {
            return Err(CoplError::IndexOutOfRange {
                what: "response",
                index: p.preferred.max(p.rejected),
                len: features.nrows(),
            });
        }
    }
    let mut model = model.clone();
    let mut rng = rng_from(cfg.rng_seed);
    let n = pairs.len();
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_ratio * total as f64).round() as usize;
    let shapes: Vec<_> = model.trainable().iter().map(|t| t.dim()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &shapes,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = model.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let p = pairs[i];
                epoch_loss += model.accumulate_pair(
                    user_embeddings.row(p.user),
                    features.row(p.preferred),
                    features.row(p.rejected),
                    scale,
                    &mut grads,
                )?;
            }
            if !epoch_loss.is_finite() {
                trace.push(epoch_loss);
                return Err(CoplError::Divergence {
                    stage: "train_reward",
                    epoch,
                    trace,
                });
            }
            let lr = cfg.lr * cosine_with_warmup(step, total, warmup);
            let g = grads.trainable();
            opt.step(lr, &mut model.trainable_mut(), &g);
            step += 1;
        }
        let mean = epoch_loss / n as f64;
        log::debug!("reward epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(RewardTrainOutput {
        model,
        loss_trace: trace,
    })
}

/// Per layer, the routed expert of every listed user (same order as `users`).
pub fn expert_allocation(
    model: &MoleRewardModel,
    user_embeddings: &Array2<f64>,
    users: &[usize],
) -> Result<Vec<BTreeMap<usize, usize>>> {
    let mut per_layer = vec![BTreeMap::new(); model.layers.len()];
    for &u in users {
        if u >= user_embeddings.nrows() {
            return Err(CoplError::IndexOutOfRange {
                what: "user",
                index: u,
                len: user_embeddings.nrows(),
            });
        }
        for (l, k) in model.allocation(user_embeddings.row(u))?.into_iter().enumerate() {
            per_layer[l].insert(u, k);
        }
    }
    Ok(per_layer)
}

/// Fraction of users whose expert's majority group is their own group.
pub fn allocation_purity(
    allocation: &BTreeMap<usize, usize>,
    group_of: impl Fn(usize) -> Option<usize>,
) -> Option<f64> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&u, &k) in allocation {
        *counts.entry(k).or_default().entry(group_of(u)?).or_default() += 1;
    }
    let total: usize = counts.values().flat_map(|m| m.values()).sum();
    if total == 0 {
        return None;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Some(majority as f64 / total as f64)
}
