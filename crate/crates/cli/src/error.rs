use std::fmt;

/// Exit 2: usage, configuration or input-data problems. Exit 3: failures
/// while running (divergence, numerical trouble).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(longctx::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use longctx::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Format { .. }
                | E::Data(_)
                | E::Extension(_)
                | E::Checkpoint(_)
                | E::Io(_)
                | E::Json(_)
                | E::Vocabulary { .. }
                | E::Length { .. }
                | E::UndefinedQuery(_)
                | E::Bounds(_)
                | E::EmptyInput(_) => 2,
                _ => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<longctx::Error> for CliError {
    fn from(e: longctx::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
