use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The bytes do not follow the declared file layout.
    #[error("format error: {0}")]
    Format(String),

    /// The layout is fine but a value violates the raster invariants.
    #[error("data error: {0}")]
    Data(String),

    /// Shapes or parameters that must agree do not.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no pixels left to evaluate")]
    EmptyEvaluation,

    #[error("insufficient support: requested {requested}, available {available}")]
    InsufficientSupport { requested: usize, available: usize },

    #[error("scale fit has no co-valid support")]
    NoSupport,

    #[error("scale fit support is degenerate (relative depth is zero on every seed)")]
    DegenerateSupport,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
