//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use copl_core::gcf::{GcfHyperparams, GcfParams};
use copl_core::math::Activation;
use copl_core::mole::{MoleConfig, MoleRewardModel};
use copl_core::prefdata::PreferencePair;
use copl_core::rng::rng_from;
use copl_core::SignedBipartiteGraph;
use ndarray::{Array1, Array2};
use rand::Rng;

/// Dense 0/1 adjacency straight from the pair list (duplicates collapse).
pub fn dense_adjacency(num_users: usize, num_responses: usize, pairs: &[PreferencePair]) -> (Array2<f64>, Array2<f64>) {
    let mut pos = Array2::zeros((num_users, num_responses));
    let mut neg = Array2::zeros((num_users, num_responses));
    for p in pairs {
        pos[[p.user, p.preferred]] = 1.0;
        neg[[p.user, p.rejected]] = 1.0;
    }
    (pos, neg)
}

fn matvec(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows())
        .map(|i| (0..w.ncols()).map(|j| w[[i, j]] * x[j]).sum())
        .collect()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Identity => x,
        Activation::LeakyRelu { slope } => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
    }
}

/// Literal per-edge evaluation of the message-passing equations on dense
/// adjacency matrices: no aggregation trick, no sparse indices.
pub fn dense_propagate(
    num_users: usize,
    num_responses: usize,
    pairs: &[PreferencePair],
    params: &GcfParams,
    hyper: &GcfHyperparams,
) -> (Array2<f64>, Array2<f64>) {
    let (pos, neg) = dense_adjacency(num_users, num_responses, pairs);
    let d = params.dim();
    let eye = Array2::<f64>::eye(d);
    let psi = if hyper.use_transform {
        hyper.activation
    } else {
        Activation::Identity
    };
    let mut eu = params.user_embeddings.clone();
    let mut er = params.response_embeddings.clone();
    for layer in &params.layers {
        let pick = |w: &Array2<f64>| if hyper.use_transform { w.clone() } else { eye.clone() };
        let (u1, u2, u3, u4, us) = (
            pick(&layer.user.w_pos),
            pick(&layer.user.w_pos_x),
            pick(&layer.user.w_neg),
            pick(&layer.user.w_neg_x),
            pick(&layer.user.w_self),
        );
        let (r1, r2, r3, r4, rs) = (
            pick(&layer.response.w_pos),
            pick(&layer.response.w_pos_x),
            pick(&layer.response.w_neg),
            pick(&layer.response.w_neg_x),
            pick(&layer.response.w_self),
        );
        let mut next_u = Array2::zeros((num_users, d));
        let mut next_r = Array2::zeros((num_responses, d));
        for u in 0..num_users {
            let e_u: Vec<f64> = eu.row(u).to_vec();
            let mut m = matvec(&us, &e_u);
            for r in 0..num_responses {
                let e_r: Vec<f64> = er.row(r).to_vec();
                let had: Vec<f64> = e_r.iter().zip(&e_u).map(|(a, b)| a * b).collect();
                if pos[[u, r]] == 1.0 {
                    let alpha = 1.0 / (pos.row(u).sum() * pos.column(r).sum()).sqrt();
                    let t1 = matvec(&u1, &e_r);
                    let t2 = matvec(&u2, &had);
                    for k in 0..d {
                        m[k] += alpha * (t1[k] + t2[k]);
                    }
                }
                if hyper.use_negative_edges && neg[[u, r]] == 1.0 {
                    let beta = 1.0 / (neg.row(u).sum() * neg.column(r).sum()).sqrt();
                    let t3 = matvec(&u3, &e_r);
                    let t4 = matvec(&u4, &had);
                    for k in 0..d {
                        m[k] += beta * (t3[k] + t4[k]);
                    }
                }
            }
            for k in 0..d {
                next_u[[u, k]] = act(psi, m[k]);
            }
        }
        for r in 0..num_responses {
            let e_r: Vec<f64> = er.row(r).to_vec();
            let mut m = matvec(&rs, &e_r);
            for u in 0..num_users {
                let e_u: Vec<f64> = eu.row(u).to_vec();
                let had: Vec<f64> = e_u.iter().zip(&e_r).map(|(a, b)| a * b).collect();
                if pos[[u, r]] == 1.0 {
                    let alpha = 1.0 / (pos.row(u).sum() * pos.column(r).sum()).sqrt();
                    let t1 = matvec(&r1, &e_u);
                    let t2 = matvec(&r2, &had);
                    for k in 0..d {
                        m[k] += alpha * (t1[k] + t2[k]);
                    }
                }
                if hyper.use_negative_edges && neg[[u, r]] == 1.0 {
                    let beta = 1.0 / (neg.row(u).sum() * neg.column(r).sum()).sqrt();
                    let t3 = matvec(&r3, &e_u);
                    let t4 = matvec(&r4, &had);
                    for k in 0..d {
                        m[k] += beta * (t3[k] + t4[k]);
                    }
                }
            }
            for k in 0..d {
                next_r[[r, k]] = act(psi, m[k]);
            }
        }
        eu = next_u;
        er = next_r;
    }
    (eu, er)
}

pub struct GraphInstance {
    pub num_users: usize,
    pub num_responses: usize,
    pub pairs: Vec<PreferencePair>,
    pub graph: SignedBipartiteGraph,
    pub params: GcfParams,
    pub hyper: GcfHyperparams,
}

/// A random small instance. Sizes are inclusive upper bounds.
pub fn random_instance(
    seed: u64,
    max_users: usize,
    max_responses: usize,
    max_pairs: usize,
    max_layers: usize,
    max_dim: usize,
) -> GraphInstance {
    let mut rng = rng_from(seed);
    let num_users = rng.gen_range(1..=max_users);
    let num_responses = rng.gen_range(2..=max_responses);
    let num_pairs = rng.gen_range(0..=max_pairs);
    let pairs: Vec<PreferencePair> = (0..num_pairs)
        .map(|_| {
            let a = rng.gen_range(0..num_responses);
            let mut b = rng.gen_range(0..num_responses - 1);
            if b >= a {
                b += 1;
            }
            PreferencePair {
                user: rng.gen_range(0..num_users),
                preferred: a,
                rejected: b,
            }
        })
        .collect();
    let layers = rng.gen_range(0..=max_layers);
    let dim = rng.gen_range(1..=max_dim);
    let hyper = GcfHyperparams {
        layers,
        dim,
        activation: if rng.gen_bool(0.5) {
            Activation::LeakyRelu { slope: 0.01 }
        } else {
            Activation::Identity
        },
        use_negative_edges: rng.gen_bool(0.75),
        use_transform: rng.gen_bool(0.75),
        ..Default::default()
    };
    let params = GcfParams::random(num_users, num_responses, layers, dim, &mut rng);
    let graph = SignedBipartiteGraph::from_pairs(num_users, num_responses, &pairs).unwrap();
    GraphInstance {
        num_users,
        num_responses,
        pairs,
        graph,
        params,
        hyper,
    }
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a small absolute floor so exact-zero gradients do
/// not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` with respect to a scalar, step `h`.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// A tiny reward model with every trainable tensor moved off its init, plus
/// a user embedding and two response feature vectors.
pub fn random_model(seed: u64) -> (MoleRewardModel, Array1<f64>, Array1<f64>, Array1<f64>) {
    let mut rng = rng_from(seed);
    let input = rng.gen_range(1..=4);
    let user = rng.gen_range(1..=4);
    let cfg = MoleConfig {
        hidden: rng.gen_range(2..=5),
        depth: rng.gen_range(1..=3),
        num_experts: rng.gen_range(1..=4),
        rank: rng.gen_range(1..=2),
        gate_hidden: rng.gen_range(2..=5),
        temperature: rng.gen_range(0.5..2.0),
        rng_seed: seed,
    };
    let mut model = MoleRewardModel::new(input, user, &cfg).unwrap();
    // move the up-projections off zero so every factor has a gradient
    for t in model.trainable_mut() {
        t.mapv_inplace(|x| x + rng.gen_range(-0.5..0.5));
    }
    let mut vec = |n: usize| Array1::from_shape_simple_fn(n, || rng.gen_range(-1.5..1.5));
    let e_u = vec(user);
    let a = vec(input);
    let b = vec(input);
    (model, e_u, a, b)
}

/// Smallest gap between the two largest gate logits over all layers.
pub fn top_two_gap(model: &MoleRewardModel, e_u: &Array1<f64>) -> f64 {
    model
        .layers
        .iter()
        .map(|l| {
            let mut z = l.gate.logits(e_u.view()).to_vec();
            if z.len() < 2 {
                return f64::INFINITY;
            }
            z.sort_by(|a, b| b.total_cmp(a));
            z[0] - z[1]
        })
        .fold(f64::INFINITY, f64::min)
}
