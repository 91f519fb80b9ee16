use rollscale::ErrorFamily;

/// Process exit codes, one per error family.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const MISSING_DATA: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const FIT: u8 = 6;
    pub const VERIFY: u8 = 7;
    pub const INVALID_INPUT: u8 = 8;
    pub const DECOMPOSITION: u8 = 9;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Core(#[from] rollscale::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => exit::USAGE,
            CliError::Verify(_) => exit::VERIFY,
            CliError::Core(e) => match e.family() {
                ErrorFamily::InvalidInput => exit::INVALID_INPUT,
                ErrorFamily::Io => exit::IO,
                ErrorFamily::MissingData => exit::MISSING_DATA,
                ErrorFamily::Diverged => exit::DIVERGED,
                ErrorFamily::Fit => exit::FIT,
                ErrorFamily::Decomposition => exit::DECOMPOSITION,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
