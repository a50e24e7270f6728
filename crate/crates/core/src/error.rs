use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoplError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoplError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("index out of range: {what} {index} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {stage} at layer {layer}")]
    NonFinite { stage: &'static str, layer: usize },

    #[error("{stage} diverged at epoch {epoch} (loss trace: {trace:?})")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        trace: Vec<f64>,
    },

    #[error("empty positive neighborhood for unseen user")]
    EmptyNeighborhood,

    #[error("dataset has no group labels")]
    MissingGroups,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoplError>,
    },

    #[error("missing artifact: {}", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("could not parse {}: {source}", path.display())]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoplError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoplError::InvalidInput(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CoplError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
