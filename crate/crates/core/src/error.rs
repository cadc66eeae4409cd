use std::fmt;

use thiserror::Error;

/// Where inside a model a numeric failure surfaced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub layer: Option<usize>,
    pub what: String,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {i} ({})", self.what),
            None => f.write_str(&self.what),
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure at {site}: {detail}")]
    Numeric { site: Site, detail: String },

    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FlowError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        FlowError::Dimension { op, detail: detail.into() }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        FlowError::Usage(msg.into())
    }

    pub fn numeric(layer: Option<usize>, what: impl Into<String>, detail: impl Into<String>) -> Self {
        FlowError::Numeric {
            site: Site { layer, what: what.into() },
            detail: detail.into(),
        }
    }

    /// Attach a layer index to a numeric error that does not carry one yet.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            FlowError::Numeric { site: Site { layer: None, what }, detail } => FlowError::Numeric {
                site: Site { layer: Some(index), what },
                detail,
            },
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, FlowError::Numeric { .. })
    }
}

pub type Result<T> = std::result::Result<T, FlowError>;
