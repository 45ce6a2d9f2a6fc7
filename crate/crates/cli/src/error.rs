use renalct::backend::BackendError;
use renalct::extract::ExtractError;
use renalct::ingest::IngestError;
use renalct::phantom::PhantomError;
use renalct::predictor::PredictionError;
use renalct::preprocess::PreprocessError;
use renalct::prompt::PromptError;
use renalct::schema::ManifestError;
use renalct::split::SplitError;
use thiserror::Error;

/// Process exit status classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
    NotComputable,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Backend => 4,
            ErrorKind::NotComputable => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Backend => "backend",
            ErrorKind::NotComputable => "not_computable",
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    /// The single stderr line printed before exiting, e.g.
    /// `error code=3 kind=data: manifest.jsonl line 4: ...`.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error code={} kind={}: {}", self.kind.code(), self.kind.name(), flat.join(" "))
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}

data_errors!(std::io::Error, ManifestError, IngestError, PredictionError);

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidWindow(_) => CliError::config(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<SplitError> for CliError {
    fn from(e: SplitError) -> Self {
        match e {
            SplitError::KTooSmall(_) | SplitError::KTooLarge { .. } => CliError::config(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Config(_) | PhantomError::Marginals(_) => CliError::config(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::MissingInput { .. } | PromptError::UnknownModality(_) => CliError::config(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) => CliError::config(e.to_string()),
            other => CliError::new(ErrorKind::Backend, other.to_string()),
        }
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Backend(b) => b.into(),
            ExtractError::Prompt(p) => p.into(),
            other => CliError::new(ErrorKind::Backend, other.to_string()),
        }
    }
}
