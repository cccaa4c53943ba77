use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("layer index {layer} out of range 1..={depth}")]
    LayerIndex { layer: usize, depth: usize },
    #[error("teacher layer {layer} too crowded: no separated column after {attempts} attempts")]
    TeacherCrowded { layer: usize, attempts: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("degenerate dataset: all samples identical")]
    DegenerateData,
    #[error("dataset has no labels")]
    Unlabeled,
    #[error("augmented dataset of {requested} samples exceeds budget of {budget}")]
    Budget { requested: usize, budget: usize },
    #[error("weight direction is zero")]
    ZeroDirection,
    #[error("directions are co-linear")]
    CoLinear,
    #[error("pruning would remove every hidden node")]
    PruneAll,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("path construction: {0}")]
    Path(String),
    #[error("unsupported snapshot version {0}")]
    SnapshotVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
