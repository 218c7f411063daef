use thiserror::Error;

pub type Result<T> = std::result::Result<T, MftpError>;

/// One violation found while validating tabular input.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// 1-based data row (header excluded).
    pub row: usize,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "row {} field `{}`: {}", self.row, self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum MftpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid policy: {0}")]
    Policy(String),

    #[error("renormalization undefined: integral of modified curve is {0:e}")]
    RenormalizationUndefined(f64),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("estimate undefined: {0}")]
    UndefinedEstimate(String),

    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<MftpError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl MftpError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        MftpError::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MftpError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Machine-readable category, used by the CLI for its exit status.
    pub fn category(&self) -> &'static str {
        match self {
            MftpError::Dimension(_) | MftpError::Grid(_) | MftpError::Validation(_) => "input",
            MftpError::Csv(_) => "input",
            MftpError::InsufficientData(_) => "input",
            MftpError::Numeric(_) | MftpError::Fit(_) => "numeric",
            MftpError::Policy(_) | MftpError::RenormalizationUndefined(_) => "policy",
            MftpError::UndefinedEstimate(_) | MftpError::DiagnosticUnavailable(_) => "estimate",
            MftpError::Config { .. } => "config",
            MftpError::Simulation(_) => "simulation",
            MftpError::Fold { source, .. } => source.category(),
            MftpError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "input" => 3,
            "numeric" => 4,
            "policy" => 5,
            "estimate" => 6,
            "simulation" => 7,
            "io" => 8,
            _ => 1,
        }
    }
}
