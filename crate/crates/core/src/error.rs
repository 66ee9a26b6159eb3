use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine and analyses.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: ce={ce}, spatial={spatial}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        ce: f64,
        spatial: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn input(detail: impl Into<String>) -> Self {
        Error::Input(detail.into())
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    use core::fmt::Write;
    let mut s = String::from("[");
    let parts: Vec<String> = shape.iter().map(|d| alloc::format!("{d}")).collect();
    let _ = write!(s, "{}]", parts.join(","));
    s
}
