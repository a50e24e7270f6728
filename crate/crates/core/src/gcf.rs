//! Signed graph collaborative filtering.
//!
//! Each layer updates user and response embeddings at once from the previous
//! layer:
//!
//! ```text
//! m_u = W_self e_u
//!     + Σ_{r ∈ N⁺(u)} α_ur (W_pos e_r + W_pos_x (e_r ⊙ e_u))
//!     + Σ_{r ∈ N⁻(u)} β_ur (W_neg e_r + W_neg_x (e_r ⊙ e_u))
//! e_u' = ψ(m_u)
//! ```
//!
//! and symmetrically for responses with their own matrices. Because `e_u` is
//! fixed inside the sums, `Σ α (e_r ⊙ e_u) = (Σ α e_r) ⊙ e_u`, so each layer
//! costs one sparse aggregation per sign plus five dense products per side.
//!
//! Scores are inner products of final-layer embeddings; training minimizes
//! the summed BTL loss plus `λ‖θ‖²` with AdamW. Gradients are computed by a
//! hand-written reverse pass over the cached forward activations.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoplError, Result};
use crate::graph::{edge_norm, Sign, SignedBipartiteGraph};
use crate::json::matrix;
use crate::math::{glorot_uniform, pair_loss, pair_loss_grad, squared_norm, Activation};
use crate::optim::{cosine_with_warmup, AdamW, AdamWConfig};
use crate::prefdata::{Choice, PreferencePair};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcfHyperparams {
    /// Message-passing layers.
    pub layers: usize,
    /// Embedding width.
    pub dim: usize,
    /// L2 coefficient on all trainable parameters.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub activation: Activation,
    pub use_negative_edges: bool,
    /// When false every propagation matrix is the identity and ψ is the identity.
    pub use_transform: bool,
    pub rng_seed: u64,
}

impl Default for GcfHyperparams {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 32,
            lambda: 1e-4,
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 512,
            warmup_ratio: 0.1,
            activation: Activation::default(),
            use_negative_edges: true,
            use_transform: true,
            rng_seed: 0,
        }
    }
}

impl GcfHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(CoplError::invalid("gcf dim must be >= 1"));
        }
        if self.lambda.is_nan()
            || self.lambda < 0.0
            || self.lr.is_nan()
            || self.lr <= 0.0
            || !(0.0..=1.0).contains(&self.warmup_ratio)
        {
            return Err(CoplError::invalid(
                "gcf needs lambda >= 0, lr > 0, warmup_ratio in [0, 1]",
            ));
        }
        if self.batch_size == 0 {
            return Err(CoplError::invalid("gcf batch_size must be >= 1"));
        }
        Ok(())
    }

    fn effective_activation(&self) -> Activation {
        if self.use_transform {
            self.activation
        } else {
            Activation::Identity
        }
    }
}

/// The five `d×d` matrices acting on one node side in one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideWeights {
    #[serde(with = "matrix")]
    pub w_self: Array2<f64>,
    #[serde(with = "matrix")]
    pub w_pos: Array2<f64>,
    #[serde(with = "matrix")]
    pub w_pos_x: Array2<f64>,
    #[serde(with = "matrix")]
    pub w_neg: Array2<f64>,
    #[serde(with = "matrix")]
    pub w_neg_x: Array2<f64>,
}

impl SideWeights {
    fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        let mut m = || glorot_uniform(d, d, d, d, rng);
        Self {
            w_self: m(),
            w_pos: m(),
            w_pos_x: m(),
            w_neg: m(),
            w_neg_x: m(),
        }
    }

    fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self {
            w_self: eye.clone(),
            w_pos: eye.clone(),
            w_pos_x: eye.clone(),
            w_neg: eye.clone(),
            w_neg_x: eye,
        }
    }

    fn zeros(d: usize) -> Self {
        let z = Array2::zeros((d, d));
        Self {
            w_self: z.clone(),
            w_pos: z.clone(),
            w_pos_x: z.clone(),
            w_neg: z.clone(),
            w_neg_x: z,
        }
    }

    fn tensors(&self) -> [&Array2<f64>; 5] {
        [&self.w_self, &self.w_pos, &self.w_pos_x, &self.w_neg, &self.w_neg_x]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 5] {
        [
            &mut self.w_self,
            &mut self.w_pos,
            &mut self.w_pos_x,
            &mut self.w_neg,
            &mut self.w_neg_x,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcfLayer {
    pub user: SideWeights,
    pub response: SideWeights,
}

/// Trainable state: per-layer matrices plus the layer-0 embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcfParams {
    pub layers: Vec<GcfLayer>,
    #[serde(with = "matrix")]
    pub user_embeddings: Array2<f64>,
    #[serde(with = "matrix")]
    pub response_embeddings: Array2<f64>,
}

impl GcfParams {
    pub fn random<R: Rng>(num_users: usize, num_responses: usize, layers: usize, dim: usize, rng: &mut R) -> Self {
        let layers = (0..layers)
            .map(|_| GcfLayer {
                user: SideWeights::random(dim, rng),
                response: SideWeights::random(dim, rng),
            })
            .collect();
        let user_embeddings = glorot_uniform(num_users, dim, dim, dim, rng);
        let response_embeddings = glorot_uniform(num_responses, dim, dim, dim, rng);
        Self {
            layers,
            user_embeddings,
            response_embeddings,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        Self {
            layers: self
                .layers
                .iter()
                .map(|_| GcfLayer {
                    user: SideWeights::zeros(d),
                    response: SideWeights::zeros(d),
                })
                .collect(),
            user_embeddings: Array2::zeros(self.user_embeddings.raw_dim()),
            response_embeddings: Array2::zeros(self.response_embeddings.raw_dim()),
        }
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Trainable tensors in a fixed order. Propagation matrices are included
    /// only when the model uses them.
    pub fn tensors(&self, with_transform: bool) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        if with_transform {
            for l in &self.layers {
                out.extend(l.user.tensors());
                out.extend(l.response.tensors());
            }
        }
        out.push(&self.user_embeddings);
        out.push(&self.response_embeddings);
        out
    }

    pub fn tensors_mut(&mut self, with_transform: bool) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        if with_transform {
            for l in &mut self.layers {
                out.extend(l.user.tensors_mut());
                out.extend(l.response.tensors_mut());
            }
        }
        out.push(&mut self.user_embeddings);
        out.push(&mut self.response_embeddings);
        out
    }

    /// ‖θ‖² over the trainable tensors.
    pub fn squared_norm(&self, with_transform: bool) -> f64 {
        self.tensors(with_transform).into_iter().map(squared_norm).sum()
    }

    fn check_shapes(&self, graph: &SignedBipartiteGraph) -> Result<()> {
        let d = self.dim();
        if self.user_embeddings.nrows() != graph.num_users()
            || self.response_embeddings.nrows() != graph.num_responses()
        {
            return Err(CoplError::DimensionMismatch(format!(
                "embeddings are {}/{} rows, graph has {} users and {} responses",
                self.user_embeddings.nrows(),
                self.response_embeddings.nrows(),
                graph.num_users(),
                graph.num_responses()
            )));
        }
        if self.response_embeddings.ncols() != d
            || self
                .layers
                .iter()
                .flat_map(|l| l.user.tensors().into_iter().chain(l.response.tensors()))
                .any(|w| w.dim() != (d, d))
        {
            return Err(CoplError::DimensionMismatch(format!("all matrices must be {d}x{d}")));
        }
        Ok(())
    }
}

/// Final-layer embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    #[serde(with = "matrix")]
    pub user_embeddings: Array2<f64>,
    #[serde(with = "matrix")]
    pub response_embeddings: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.user_embeddings.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.user_embeddings.nrows()
    }

    pub fn num_responses(&self) -> usize {
        self.response_embeddings.nrows()
    }
}

/// Serialized GCF model: hyperparameters plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcfModel {
    pub hyper: GcfHyperparams,
    pub params: GcfParams,
}

/// `out[u] = Σ_{r ∈ N(u)} norm(u, r) · x[r]`
fn gather_to_users(graph: &SignedBipartiteGraph, sign: Sign, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((graph.num_users(), x.ncols()));
    for (u, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nbrs = graph.user_neighbors(sign, u);
        for &r in nbrs {
            let w = edge_norm(nbrs.len(), graph.response_degree(sign, r));
            row.scaled_add(w, &x.row(r));
        }
    }
    out
}

/// `out[r] = Σ_{u ∈ N(r)} norm(u, r) · x[u]`
fn gather_to_responses(graph: &SignedBipartiteGraph, sign: Sign, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((graph.num_responses(), x.ncols()));
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let nbrs = graph.response_neighbors(sign, r);
        for &u in nbrs {
            let w = edge_norm(graph.user_degree(sign, u), nbrs.len());
            row.scaled_add(w, &x.row(u));
        }
    }
    out
}

/// Cached quantities for one node side of one layer.
struct SideCache {
    input: Array2<f64>,
    pos: Array2<f64>,
    neg: Option<Array2<f64>>,
    pre: Array2<f64>,
}

fn side_forward(input: &Array2<f64>, pos: Array2<f64>, neg: Option<Array2<f64>>, w: &SideWeights) -> SideCache {
    let mut pre = input.dot(&w.w_self.t());
    pre += &pos.dot(&w.w_pos.t());
    pre += &(&pos * input).dot(&w.w_pos_x.t());
    if let Some(neg) = &neg {
        pre += &neg.dot(&w.w_neg.t());
        pre += &(neg * input).dot(&w.w_neg_x.t());
    }
    SideCache {
        input: input.clone(),
        pos,
        neg,
        pre,
    }
}

/// Gradients w.r.t. one side's input and aggregated neighbor sums, and
/// accumulates the side's weight gradients. `g_pre` is ∂L/∂m.
fn side_backward(
    cache: &SideCache,
    g_pre: &Array2<f64>,
    w: &SideWeights,
    grad_w: &mut SideWeights,
) -> (Array2<f64>, Array2<f64>, Option<Array2<f64>>) {
    let gt = g_pre.t();
    grad_w.w_self += &gt.dot(&cache.input);
    grad_w.w_pos += &gt.dot(&cache.pos);
    grad_w.w_pos_x += &gt.dot(&(&cache.pos * &cache.input));

    let g_pos_x = g_pre.dot(&w.w_pos_x);
    let mut g_input = g_pre.dot(&w.w_self);
    g_input += &(&g_pos_x * &cache.pos);
    let g_pos = g_pre.dot(&w.w_pos) + &g_pos_x * &cache.input;

    let g_neg = cache.neg.as_ref().map(|neg| {
        grad_w.w_neg += &gt.dot(neg);
        grad_w.w_neg_x += &gt.dot(&(neg * &cache.input));
        let g_neg_x = g_pre.dot(&w.w_neg_x);
        g_input += &(&g_neg_x * neg);
        g_pre.dot(&w.w_neg) + &g_neg_x * &cache.input
    });
    (g_input, g_pos, g_neg)
}

struct LayerCache {
    user: SideCache,
    response: SideCache,
}

struct Forward {
    caches: Vec<LayerCache>,
    output: EmbeddingTable,
}

fn forward(
    graph: &SignedBipartiteGraph,
    params: &GcfParams,
    hyper: &GcfHyperparams,
    keep_cache: bool,
) -> Result<Forward> {
    params.check_shapes(graph)?;
    let act = hyper.effective_activation();
    let identity = (!hyper.use_transform).then(|| SideWeights::identity(params.dim()));
    let mut eu = params.user_embeddings.clone();
    let mut er = params.response_embeddings.clone();
    let mut caches = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let (wu, wr) = match &identity {
            Some(eye) => (eye, eye),
            None => (&layer.user, &layer.response),
        };
        let neg = hyper.use_negative_edges;
        let user = side_forward(
            &eu,
            gather_to_users(graph, Sign::Positive, er.view()),
            neg.then(|| gather_to_users(graph, Sign::Negative, er.view())),
            wu,
        );
        let response = side_forward(
            &er,
            gather_to_responses(graph, Sign::Positive, eu.view()),
            neg.then(|| gather_to_responses(graph, Sign::Negative, eu.view())),
            wr,
        );
        eu = user.pre.mapv(|x| act.apply(x));
        er = response.pre.mapv(|x| act.apply(x));
        if eu.iter().chain(er.iter()).any(|x| !x.is_finite()) {
            return Err(CoplError::NonFinite {
                stage: "propagate",
                layer: l,
            });
        }
        if keep_cache {
            caches.push(LayerCache { user, response });
        }
    }
    Ok(Forward {
        caches,
        output: EmbeddingTable {
            user_embeddings: eu,
            response_embeddings: er,
        },
    })
}

/// Runs all message-passing layers and returns final-layer embeddings.
pub fn propagate(graph: &SignedBipartiteGraph, params: &GcfParams, hyper: &GcfHyperparams) -> Result<EmbeddingTable> {
    forward(graph, params, hyper, false).map(|f| f.output)
}

fn check_user(embeddings: &EmbeddingTable, u: usize) -> Result<()> {
    if u >= embeddings.num_users() {
        return Err(CoplError::IndexOutOfRange {
            what: "user",
            index: u,
            len: embeddings.num_users(),
        });
    }
    Ok(())
}

fn check_response(embeddings: &EmbeddingTable, r: usize) -> Result<()> {
    if r >= embeddings.num_responses() {
        return Err(CoplError::IndexOutOfRange {
            what: "response",
            index: r,
            len: embeddings.num_responses(),
        });
    }
    Ok(())
}

/// `⟨e_u, e_r⟩` on final-layer embeddings.
pub fn score(embeddings: &EmbeddingTable, u: usize, r: usize) -> Result<f64> {
    check_user(embeddings, u)?;
    check_response(embeddings, r)?;
    Ok(embeddings
        .user_embeddings
        .row(u)
        .dot(&embeddings.response_embeddings.row(r)))
}

/// BTL argmax: A iff `s(u, a) >= s(u, b)`.
pub fn predict_pair(embeddings: &EmbeddingTable, u: usize, a: usize, b: usize) -> Result<Choice> {
    Ok(if score(embeddings, u, a)? >= score(embeddings, u, b)? {
        Choice::A
    } else {
        Choice::B
    })
}

/// Summed pairwise loss over `pairs` plus `λ‖θ‖²`.
pub fn gcf_loss(
    embeddings: &EmbeddingTable,
    params: &GcfParams,
    hyper: &GcfHyperparams,
    pairs: &[PreferencePair],
    lambda: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for p in pairs {
        loss += pair_loss(score(embeddings, p.user, p.preferred)? - score(embeddings, p.user, p.rejected)?);
    }
    Ok(loss + lambda * params.squared_norm(hyper.use_transform))
}

/// Loss and gradient of `scale · Σ pair losses + λ‖θ‖²`.
pub fn gcf_loss_and_grad(
    graph: &SignedBipartiteGraph,
    params: &GcfParams,
    hyper: &GcfHyperparams,
    pairs: &[PreferencePair],
    lambda: f64,
    scale: f64,
) -> Result<(f64, GcfParams)> {
    let fwd = forward(graph, params, hyper, true)?;
    let out = &fwd.output;
    let mut g_eu = Array2::zeros(out.user_embeddings.raw_dim());
    let mut g_er = Array2::zeros(out.response_embeddings.raw_dim());
    let mut data_loss = 0.0;
    for p in pairs {
        let eu = out.user_embeddings.row(p.user);
        let ea = out.response_embeddings.row(p.preferred);
        let eb = out.response_embeddings.row(p.rejected);
        let margin = eu.dot(&ea) - eu.dot(&eb);
        data_loss += pair_loss(margin);
        let g = scale * pair_loss_grad(margin);
        g_eu.row_mut(p.user).scaled_add(g, &(&ea - &eb));
        g_er.row_mut(p.preferred).scaled_add(g, &eu);
        g_er.row_mut(p.rejected).scaled_add(-g, &eu);
    }

    let act = hyper.effective_activation();
    let identity = (!hyper.use_transform).then(|| SideWeights::identity(params.dim()));
    let mut grads = params.zeros_like();
    for (l, cache) in fwd.caches.iter().enumerate().rev() {
        let layer = &params.layers[l];
        let (wu, wr) = match &identity {
            Some(eye) => (eye, eye),
            None => (&layer.user, &layer.response),
        };
        let mut gm_u = g_eu;
        Zip::from(&mut gm_u)
            .and(&cache.user.pre)
            .for_each(|g, &x| *g *= act.derivative(x));
        let mut gm_r = g_er;
        Zip::from(&mut gm_r)
            .and(&cache.response.pre)
            .for_each(|g, &x| *g *= act.derivative(x));

        let grad_layer = &mut grads.layers[l];
        let (mut next_eu, g_pos_u, g_neg_u) = side_backward(&cache.user, &gm_u, wu, &mut grad_layer.user);
        let (mut next_er, g_pos_r, g_neg_r) = side_backward(&cache.response, &gm_r, wr, &mut grad_layer.response);
        // user-side aggregation read response embeddings and vice versa
        next_er += &gather_to_responses(graph, Sign::Positive, g_pos_u.view());
        next_eu += &gather_to_users(graph, Sign::Positive, g_pos_r.view());
        if let (Some(gn_u), Some(gn_r)) = (g_neg_u, g_neg_r) {
            next_er += &gather_to_responses(graph, Sign::Negative, gn_u.view());
            next_eu += &gather_to_users(graph, Sign::Negative, gn_r.view());
        }
        g_eu = next_eu;
        g_er = next_er;
    }
    grads.user_embeddings = g_eu;
    grads.response_embeddings = g_er;
    if !hyper.use_transform {
        for l in &mut grads.layers {
            l.user = SideWeights::zeros(params.dim());
            l.response = SideWeights::zeros(params.dim());
        }
    }

    if lambda > 0.0 {
        let with_t = hyper.use_transform;
        for (g, p) in grads.tensors_mut(with_t).into_iter().zip(params.tensors(with_t)) {
            g.scaled_add(2.0 * lambda, p);
        }
    }
    let loss = scale * data_loss + lambda * params.squared_norm(hyper.use_transform);
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct GcfTrainOutput {
    pub params: GcfParams,
    pub embeddings: EmbeddingTable,
    /// Mean step objective per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains from a fresh random initialization seeded by `hyper.rng_seed`.
pub fn train_gcf(
    graph: &SignedBipartiteGraph,
    train_pairs: &[PreferencePair],
    hyper: &GcfHyperparams,
) -> Result<GcfTrainOutput> {
    hyper.validate()?;
    if train_pairs.is_empty() {
        return Err(CoplError::invalid("train_gcf needs at least one training pair"));
    }
    let mut rng = rng_from(hyper.rng_seed);
    let mut params = GcfParams::random(
        graph.num_users(),
        graph.num_responses(),
        hyper.layers,
        hyper.dim,
        &mut rng,
    );

    let n = train_pairs.len();
    let batch = hyper.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * hyper.epochs;
    let warmup = (hyper.warmup_ratio * total_steps as f64).round() as usize;
    let shapes: Vec<_> = params.tensors(hyper.use_transform).iter().map(|t| t.dim()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: hyper.weight_decay,
            ..Default::default()
        },
        &shapes,
    );

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let pairs: Vec<PreferencePair> = chunk.iter().map(|&i| train_pairs[i]).collect();
            let scale = n as f64 / pairs.len() as f64;
            let (loss, grads) = gcf_loss_and_grad(graph, &params, hyper, &pairs, hyper.lambda, scale)?;
            if !loss.is_finite() {
                trace.push(loss);
                return Err(CoplError::Divergence {
                    stage: "train_gcf",
                    epoch,
                    trace,
                });
            }
            epoch_loss += loss;
            let lr = hyper.lr * cosine_with_warmup(step, total_steps, warmup);
            let grad_refs = grads.tensors(hyper.use_transform);
            opt.step(lr, &mut params.tensors_mut(hyper.use_transform), &grad_refs);
            step += 1;
        }
        let mean = epoch_loss / steps_per_epoch as f64;
        log::debug!("gcf epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    let embeddings = propagate(graph, &params, hyper)?;
    Ok(GcfTrainOutput {
        params,
        embeddings,
        loss_trace: trace,
    })
}
