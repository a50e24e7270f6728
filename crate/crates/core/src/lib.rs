//! Collaborative preference learning from sparse pairwise annotations.
//!
//! The pipeline: synthetic preference data ([`prefdata`]) becomes a signed
//! user–response graph ([`graph`]); signed message passing ([`gcf`]) learns
//! user embeddings; a reward model with user-routed low-rank experts
//! ([`mole`]) consumes them; unseen users get embeddings without any
//! optimization ([`adapt`]); [`harness`] runs and scores experiments.

pub mod adapt;
pub mod error;
pub mod export;
pub mod gcf;
pub mod graph;
pub mod harness;
pub mod json;
pub mod math;
pub mod mole;
pub mod optim;
pub mod prefdata;
pub mod rng;

pub use adapt::{AdaptConfig, Fallback, UnseenUser};
pub use error::{CoplError, Result};
pub use gcf::{EmbeddingTable, GcfHyperparams, GcfModel, GcfParams};
pub use graph::{build_graph, Sign, SignedBipartiteGraph};
pub use harness::{run_experiment, ExperimentConfig, MetricsReport};
pub use math::Activation;
pub use mole::{MoleConfig, MoleRewardModel, RewardTrainConfig};
pub use prefdata::{
    Annotation, Choice, GeneratorConfig, PairTag, PreferenceDataset, PreferencePair, ProfileSpec, Regime, UnseenCohort,
};
