use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autodiff(#[from] lfnet_autodiff::Error),

    #[error("location {id}: coordinate out of range (lat {lat}, lon {lon})")]
    BadCoordinate { id: String, lat: f64, lon: f64 },
    #[error("location {id}: population must be positive, got {value}")]
    BadPopulation { id: String, value: f64 },
    #[error("duplicate location id {0}")]
    DuplicateLocation(String),
    #[error("unknown location id {0}")]
    UnknownLocation(String),
    #[error("graph hyperparameter: {0}")]
    BadGraphParam(String),

    #[error("{file}: {msg}")]
    BadSchema { file: String, msg: String },
    #[error(
        "location {id} week {target_week}: revision received in week {received_week}, before the week it targets"
    )]
    RevisionFromPast {
        id: String,
        target_week: usize,
        received_week: usize,
    },
    #[error("split: {0}")]
    BadSplit(String),
    #[error("synthetic generator: {0}")]
    Synth(String),

    #[error("model: {0}")]
    Model(String),
    #[error("non-finite activation at timestep {step} in {stage}")]
    NonFiniteStep { step: usize, stage: &'static str },
    #[error(
        "checkpoint has no alignment maps (trained with the alignment loss disabled); retrain without no-align to use warm-start initialization"
    )]
    MissingAlignmentMaps,
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
