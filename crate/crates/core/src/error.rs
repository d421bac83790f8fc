use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("explicit scheme unstable: dt = {dt:e} exceeds bound {bound:e}")]
    Stability { dt: f64, bound: f64 },

    #[error("non-finite value in {kind} surface at time level {level}")]
    NonFinite { kind: &'static str, level: usize },

    #[error("surface kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("need at least {needed} paths, got {got}")]
    InsufficientPaths { needed: usize, got: usize },

    #[error("paths mix sampled and exploratory regimes")]
    MixedRegimes,

    #[error("path {path} diverged at t = {t}: {detail}")]
    PathDiverged { path: u64, t: f64, detail: String },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
