use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ideolens::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Config(_) => EXIT_VALIDATION,
            Self::Core(e) if e.is_validation() => EXIT_VALIDATION,
            Self::Core(_) | Self::Io { .. } => EXIT_RUNTIME,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Core(e) => e.code(),
            Self::Io { .. } => "io",
        }
    }

    /// `error: code=<code> exit=<status> message=<JSON string>` on one line.
    pub fn reason_line(&self) -> String {
        let message = serde_json::to_string(&self.to_string()).unwrap_or_else(|_| "\"\"".into());
        format!("error: code={} exit={} message={}", self.code(), self.exit_code(), message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reason_is_one_parseable_line() {
        let e = CliError::Config("bad\nvalue \"x\"".into());
        let line = e.reason_line();
        assert!(!line.contains('\n'));
        let msg = line.split_once("message=").unwrap().1;
        assert_eq!(serde_json::from_str::<String>(msg).unwrap(), "bad\nvalue \"x\"");
        assert_eq!(e.exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn core_errors_split_by_kind() {
        assert_eq!(CliError::from(ideolens::Error::Incompatible("x".into())).exit_code(), EXIT_VALIDATION);
        assert_eq!(CliError::from(ideolens::Error::Diverged("x".into())).exit_code(), EXIT_RUNTIME);
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_USAGE);
    }
}
