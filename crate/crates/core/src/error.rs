use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    Shape(String),
    InvalidInput(String),
    NonFinite(String),
    Config(String),
    NotEnoughData(String),
    NonDeterministic(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape mismatch: {m}"),
            CoreError::InvalidInput(m) => write!(f, "invalid input: {m}"),
            CoreError::NonFinite(m) => write!(f, "non-finite value: {m}"),
            CoreError::Config(m) => write!(f, "invalid config: {m}"),
            CoreError::NotEnoughData(m) => write!(f, "not enough data: {m}"),
            CoreError::NonDeterministic(m) => write!(f, "non-deterministic evaluation: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::CoreError::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
