use thiserror::Error;

/// Errors returned across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("record {0} has no image; supply a placeholder before encoding")]
    MissingImage(String),
    #[error("Cohen's kappa is undefined: chance agreement is 1 but observed agreement is {observed}")]
    UndefinedKappa { observed: f64 },
    #[error("incompatible data: {0}")]
    Incompatible(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable snake_case identifier of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::MissingImage(_) => "missing_image",
            Error::UndefinedKappa { .. } => "undefined_kappa",
            Error::Incompatible(_) => "incompatible",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// True for errors caused by bad data or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidInput(_)
                | Error::Shape(_)
                | Error::TokenOutOfRange { .. }
                | Error::MissingImage(_)
                | Error::UndefinedKappa { .. }
                | Error::Incompatible(_)
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
