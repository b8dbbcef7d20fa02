use std::path::PathBuf;

use thiserror::Error;

/// Token class expected at a sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Coordinate,
    Binding,
    Start,
    End,
    Pad,
}

impl std::fmt::Display for TokenClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            TokenClass::Coordinate => "coordinate",
            TokenClass::Binding => "binding",
            TokenClass::Start => "start",
            TokenClass::End => "end",
            TokenClass::Pad => "pad",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate triangle (area {area:e})")]
    DegenerateTriangle { area: f64 },

    #[error("binding {binding} out of range for {faces} faces")]
    BindingOutOfRange { binding: usize, faces: usize },

    #[error("token {token} out of range (limit {limit})")]
    TokenOutOfRange { token: u32, limit: u32 },

    #[error("grammar violation at token {position}: expected {expected}, found {found}")]
    GrammarViolation {
        position: usize,
        expected: TokenClass,
        found: u32,
    },

    #[error("context overflow: {len} tokens exceeds window {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("image shape {height}x{width} not divisible by patch {patch}")]
    BadImageShape {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image too small for SSIM window: {height}x{width}")]
    ImageTooSmall { height: usize, width: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
