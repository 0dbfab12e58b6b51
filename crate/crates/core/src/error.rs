use autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("{stage}: non-finite value at step {step} ({source})")]
    Diverged {
        stage: &'static str,
        step: usize,
        #[source]
        source: AutodiffError,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("{0} requires a non-empty data set")]
    EmptyDataset(&'static str),

    #[error("hyperparameters are {found} but the run expects {expected}")]
    ModeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("model parameter norm {norm:e} is too small to invert")]
    DegenerateParameter { norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attaches the failing step to a numerical error.
    pub(crate) fn at_step(stage: &'static str, step: usize) -> impl FnOnce(AutodiffError) -> Error {
        move |source| Error::Diverged {
            stage,
            step,
            source,
        }
    }
}
