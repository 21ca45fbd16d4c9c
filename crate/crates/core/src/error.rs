use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes:
/// validation/shape -> 2, numerical -> 3, everything else -> 1.
#[derive(Error, Debug)]
pub enum FpdError {
    #[error("shape mismatch in {op}: {lhs_name} has shape {lhs_shape:?}, {rhs_name} has shape {rhs_shape:?}")]
    Shape {
        op: String,
        lhs_name: String,
        lhs_shape: Vec<usize>,
        rhs_name: String,
        rhs_shape: Vec<usize>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, FpdError>;

impl FpdError {
    pub fn shape(
        op: &str,
        lhs_name: &str,
        lhs_shape: &[usize],
        rhs_name: &str,
        rhs_shape: &[usize],
    ) -> Self {
        FpdError::Shape {
            op: op.to_string(),
            lhs_name: lhs_name.to_string(),
            lhs_shape: lhs_shape.to_vec(),
            rhs_name: rhs_name.to_string(),
            rhs_shape: rhs_shape.to_vec(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        FpdError::Validation(msg.into())
    }

    /// Exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpdError::Shape { .. } | FpdError::Validation(_) => 2,
            FpdError::Numerical(_) => 3,
            FpdError::Io(_) | FpdError::Format(_) => 1,
        }
    }
}
