use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] neurograd::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 usage or config, 2 data, 3 anything else.
    pub fn exit_code(&self) -> i32 {
        use neurograd::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::Io(_) | CliError::Json(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidSpec(_) | E::StrictMismatch(_) | E::InvalidClass { .. } => 1,
                E::BadMagic(_)
                | E::TruncatedFile(_)
                | E::DuplicateName(_)
                | E::UnsupportedDatatype(_)
                | E::AllBackground
                | E::DegenerateBBox(_)
                | E::TooFewSubjects { .. }
                | E::InvalidData(_)
                | E::InvalidTarget { .. }
                | E::Io(_)
                | E::Json(_) => 2,
                _ => 3,
            },
        }
    }
}
