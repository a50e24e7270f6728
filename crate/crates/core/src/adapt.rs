//! Embeddings for users who were not in the training graph.
//!
//! An unseen user's preferred responses link it, through positive edges only,
//! to seen users. Every seen user within `k` hops is scored by how well its
//! own predicted preferences agree with the unseen user's annotations, and
//! the unseen embedding is the softmax(γ/κ)-weighted mean of theirs.

use std::collections::BTreeSet;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{CoplError, Result};
use crate::gcf::EmbeddingTable;
use crate::graph::{Sign, SignedBipartiteGraph};
use crate::math::{log_sigmoid, sigmoid, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Mean of all seen user embeddings.
    GlobalMean,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Hop count, even and at least 2.
    pub k: usize,
    /// Softmax temperature on alignment scores.
    pub kappa: f64,
    pub fallback: Fallback,
    /// Gradient steps and step size for the optimization baseline.
    pub opt_steps: usize,
    pub opt_lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: 2,
            kappa: 0.07,
            fallback: Fallback::GlobalMean,
            opt_steps: 50,
            opt_lr: 0.05,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        if self.kappa.is_nan() || self.kappa <= 0.0 {
            return Err(CoplError::invalid(format!("kappa must be > 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 || k % 2 == 1 {
        return Err(CoplError::invalid(format!("hop count must be even and >= 2, got {k}")));
    }
    Ok(())
}

/// A user outside the graph, known only by `(preferred, rejected)` response pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnseenUser {
    pub annotations: Vec<(usize, usize)>,
}

impl UnseenUser {
    pub fn new(annotations: Vec<(usize, usize)>) -> Self {
        Self { annotations }
    }

    fn validate(&self, num_responses: usize) -> Result<()> {
        if self.annotations.is_empty() {
            return Err(CoplError::invalid("unseen user has no annotations"));
        }
        for &(a, b) in &self.annotations {
            if a.max(b) >= num_responses {
                return Err(CoplError::IndexOutOfRange {
                    what: "response",
                    index: a.max(b),
                    len: num_responses,
                });
            }
        }
        Ok(())
    }
}

/// Seen users reachable from the unseen user within `k` hops over positive
/// edges, sorted by id.
pub fn khop_positive_users(graph: &SignedBipartiteGraph, unseen: &UnseenUser, k: usize) -> Result<Vec<usize>> {
    check_k(k)?;
    unseen.validate(graph.num_responses())?;
    let mut seen_responses: BTreeSet<usize> = unseen.annotations.iter().map(|&(a, _)| a).collect();
    let mut frontier: Vec<usize> = seen_responses.iter().copied().collect();
    let mut users = BTreeSet::new();
    for _ in (2..=k).step_by(2) {
        let mut new_users = BTreeSet::new();
        for &r in &frontier {
            for &u in graph.response_neighbors(Sign::Positive, r) {
                if !users.contains(&u) {
                    new_users.insert(u);
                }
            }
        }
        let mut next = BTreeSet::new();
        for &u in &new_users {
            for &r in graph.user_neighbors(Sign::Positive, u) {
                if seen_responses.insert(r) {
                    next.insert(r);
                }
            }
        }
        users.extend(new_users);
        frontier = next.into_iter().collect();
        if frontier.is_empty() {
            break;
        }
    }
    Ok(users.into_iter().collect())
}

/// γ = Σ ln σ(s(u, a) − s(u, b)) over the unseen user's pairs; always ≤ 0.
pub fn alignment_score(embeddings: &EmbeddingTable, user: usize, annotations: &[(usize, usize)]) -> Result<f64> {
    if user >= embeddings.num_users() {
        return Err(CoplError::IndexOutOfRange {
            what: "user",
            index: user,
            len: embeddings.num_users(),
        });
    }
    let e_u = embeddings.user_embeddings.row(user);
    let mut gamma = 0.0;
    for &(a, b) in annotations {
        if a.max(b) >= embeddings.num_responses() {
            return Err(CoplError::IndexOutOfRange {
                what: "response",
                index: a.max(b),
                len: embeddings.num_responses(),
            });
        }
        let margin = e_u.dot(&embeddings.response_embeddings.row(a)) - e_u.dot(&embeddings.response_embeddings.row(b));
        gamma += log_sigmoid(margin);
    }
    Ok(gamma)
}

/// Weighted neighbor combination: returns the embedding and the weights
/// (aligned with the sorted, de-duplicated neighbor ids).
pub fn adapt_from_neighbors(
    embeddings: &EmbeddingTable,
    neighbors: &[usize],
    unseen: &UnseenUser,
    kappa: f64,
) -> Result<(Array1<f64>, Vec<usize>, Vec<f64>)> {
    let ids: Vec<usize> = neighbors.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.is_empty() {
        return Err(CoplError::EmptyNeighborhood);
    }
    let gammas = ids
        .iter()
        .map(|&u| alignment_score(embeddings, u, &unseen.annotations))
        .collect::<Result<Vec<_>>>()?;
    let weights = softmax(&gammas, kappa);
    let e = weighted_sum(embeddings, &ids, &weights);
    Ok((e, ids, weights))
}

fn weighted_sum(embeddings: &EmbeddingTable, ids: &[usize], weights: &[f64]) -> Array1<f64> {
    let mut e = Array1::zeros(embeddings.dim());
    for (&u, &w) in ids.iter().zip(weights) {
        e.scaled_add(w, &embeddings.user_embeddings.row(u));
    }
    e
}

/// Embedding used when an unseen user has no positive neighbors.
pub fn fallback_embedding(embeddings: &EmbeddingTable, policy: Fallback) -> Result<Array1<f64>> {
    match policy {
        Fallback::Error => Err(CoplError::EmptyNeighborhood),
        Fallback::GlobalMean => {
            if embeddings.num_users() == 0 {
                return Err(CoplError::EmptyNeighborhood);
            }
            Ok(embeddings
                .user_embeddings
                .mean_axis(ndarray::Axis(0))
                .expect("non-empty"))
        }
    }
}

/// Optimization-free estimate of an unseen user's embedding.
pub fn adapt_embedding(
    graph: &SignedBipartiteGraph,
    embeddings: &EmbeddingTable,
    unseen: &UnseenUser,
    cfg: &AdaptConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    let neighbors = khop_positive_users(graph, unseen, cfg.k)?;
    if neighbors.is_empty() {
        return fallback_embedding(embeddings, cfg.fallback);
    }
    adapt_from_neighbors(embeddings, &neighbors, unseen, cfg.kappa).map(|(e, _, _)| e)
}

/// Unweighted mean of the k-hop positive neighbors.
pub fn naive_average(
    graph: &SignedBipartiteGraph,
    embeddings: &EmbeddingTable,
    unseen: &UnseenUser,
    k: usize,
    policy: Fallback,
) -> Result<Array1<f64>> {
    let neighbors = khop_positive_users(graph, unseen, k)?;
    if neighbors.is_empty() {
        return fallback_embedding(embeddings, policy);
    }
    let w = vec![1.0 / neighbors.len() as f64; neighbors.len()];
    Ok(weighted_sum(embeddings, &neighbors, &w))
}

fn user_objective(e: ArrayView1<f64>, embeddings: &EmbeddingTable, annotations: &[(usize, usize)]) -> f64 {
    annotations
        .iter()
        .map(|&(a, b)| {
            let m = e.dot(&embeddings.response_embeddings.row(a)) - e.dot(&embeddings.response_embeddings.row(b));
            log_sigmoid(m)
        })
        .sum()
}

/// Gradient ascent on Σ ln σ(⟨e, e_a⟩ − ⟨e, e_b⟩) from `e = 0` with response
/// embeddings frozen. Returns the embedding and the objective after each step.
pub fn user_opt_with_trace(
    embeddings: &EmbeddingTable,
    unseen: &UnseenUser,
    steps: usize,
    lr: f64,
) -> Result<(Array1<f64>, Vec<f64>)> {
    if steps == 0 {
        return Err(CoplError::invalid("user_opt needs at least one step"));
    }
    unseen.validate(embeddings.num_responses())?;
    let mut e = Array1::zeros(embeddings.dim());
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grad = Array1::zeros(embeddings.dim());
        for &(a, b) in &unseen.annotations {
            let diff = &embeddings.response_embeddings.row(a) - &embeddings.response_embeddings.row(b);
            let m = e.dot(&diff);
            grad.scaled_add(sigmoid(-m), &diff);
        }
        e.scaled_add(lr, &grad);
        let obj = user_objective(e.view(), embeddings, &unseen.annotations);
        if !obj.is_finite() || e.iter().any(|x| !x.is_finite()) {
            trace.push(obj);
            return Err(CoplError::Divergence {
                stage: "user_opt",
                epoch: step,
                trace,
            });
        }
        trace.push(obj);
    }
    Ok((e, trace))
}

pub fn user_opt(embeddings: &EmbeddingTable, unseen: &UnseenUser, steps: usize, lr: f64) -> Result<Array1<f64>> {
    user_opt_with_trace(embeddings, unseen, steps, lr).map(|(e, _)| e)
}
