//! Signed bipartite user–response graph.
//!
//! A training annotation `(u, a ≻ b)` becomes a positive edge `u–a` and a
//! negative edge `u–b`. Identical `(u, r, sign)` edges are stored once; the
//! same `(u, r)` may carry both signs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CoplError, Result};
use crate::prefdata::{PreferenceDataset, PreferencePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

/// Adjacency lists in both directions, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedBipartiteGraph {
    num_users: usize,
    num_responses: usize,
    user_pos: Vec<Vec<usize>>,
    user_neg: Vec<Vec<usize>>,
    resp_pos: Vec<Vec<usize>>,
    resp_neg: Vec<Vec<usize>>,
}

impl SignedBipartiteGraph {
    /// Builds the graph from resolved preference pairs.
    pub fn from_pairs(num_users: usize, num_responses: usize, pairs: &[PreferencePair]) -> Result<Self> {
        let mut pos = BTreeSet::new();
        let mut neg = BTreeSet::new();
        for p in pairs {
            if p.user >= num_users {
                return Err(CoplError::Graph(format!(
                    "annotation references missing user {}",
                    p.user
                )));
            }
            for r in [p.preferred, p.rejected] {
                if r >= num_responses {
                    return Err(CoplError::Graph(format!("annotation references missing response {r}")));
                }
            }
            pos.insert((p.user, p.preferred));
            neg.insert((p.user, p.rejected));
        }
        let mut g = Self {
            num_users,
            num_responses,
            user_pos: vec![Vec::new(); num_users],
            user_neg: vec![Vec::new(); num_users],
            resp_pos: vec![Vec::new(); num_responses],
            resp_neg: vec![Vec::new(); num_responses],
        };
        // BTreeSet iteration is (user, response)-ordered, so user lists come
        // out sorted; response lists are filled in user order, also sorted.
        for &(u, r) in &pos {
            g.user_pos[u].push(r);
            g.resp_pos[r].push(u);
        }
        for &(u, r) in &neg {
            g.user_neg[u].push(r);
            g.resp_neg[r].push(u);
        }
        Ok(g)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn user_neighbors(&self, sign: Sign, u: usize) -> &[usize] {
        match sign {
            Sign::Positive => &self.user_pos[u],
            Sign::Negative => &self.user_neg[u],
        }
    }

    pub fn response_neighbors(&self, sign: Sign, r: usize) -> &[usize] {
        match sign {
            Sign::Positive => &self.resp_pos[r],
            Sign::Negative => &self.resp_neg[r],
        }
    }

    pub fn user_degree(&self, sign: Sign, u: usize) -> usize {
        self.user_neighbors(sign, u).len()
    }

    pub fn response_degree(&self, sign: Sign, r: usize) -> usize {
        self.response_neighbors(sign, r).len()
    }

    pub fn num_edges(&self, sign: Sign) -> usize {
        match sign {
            Sign::Positive => self.user_pos.iter().map(Vec::len).sum(),
            Sign::Negative => self.user_neg.iter().map(Vec::len).sum(),
        }
    }

    pub fn has_edge(&self, sign: Sign, u: usize, r: usize) -> bool {
        u < self.num_users && self.user_neighbors(sign, u).binary_search(&r).is_ok()
    }

    /// `1 / sqrt(|N_u| |N_r|)` over the edges of the given sign.
    ///
    /// Only defined on existing edges, where both degrees are at least one.
    pub fn norm_factor(&self, sign: Sign, u: usize, r: usize) -> Result<f64> {
        if !self.has_edge(sign, u, r) {
            return Err(CoplError::Graph(format!(
                "no {sign:?} edge between user {u} and response {r}"
            )));
        }
        Ok(edge_norm(self.user_degree(sign, u), self.response_degree(sign, r)))
    }
}

#[inline]
pub(crate) fn edge_norm(user_degree: usize, response_degree: usize) -> f64 {
    1.0 / ((user_degree * response_degree) as f64).sqrt()
}

/// Graph over a dataset's training annotations. Test annotations never enter.
pub fn build_graph(dataset: &PreferenceDataset) -> Result<SignedBipartiteGraph> {
    let pairs = dataset.train_pairs()?;
    SignedBipartiteGraph::from_pairs(dataset.users.len(), dataset.responses.len(), &pairs)
}
