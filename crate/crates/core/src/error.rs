use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid label {label}: expected a class in 0..{num_classes}")]
    Label { label: usize, num_classes: usize },

    #[error("degenerate class counts: {0}")]
    DegenerateCounts(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("session {session} ({stage}): {inner}")]
    Stage {
        session: usize,
        stage: &'static str,
        inner: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn at(self, session: usize, stage: &'static str) -> Error {
        Error::Stage {
            session,
            stage,
            inner: Box::new(self),
        }
    }
}

pub(crate) fn shape_check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}
