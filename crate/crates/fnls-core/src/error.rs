use thiserror::Error;

/// Errors raised by the solver, samplers and audits.
///
/// Variants split into configuration problems (bad parameters, bad files)
/// and numerical failures (blow-up, non-convergence, degenerate ensembles);
/// see [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid of {gridsize} points cannot dealias band limit {kmax}; need at least {required}")]
    Dealiasing {
        gridsize: usize,
        kmax: usize,
        required: usize,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("axis mismatch: {0}")]
    AxisMismatch(String),

    #[error("pairing violation: {0}")]
    Pairing(String),

    #[error("size guard: estimated cost {estimated_cost} exceeds limit {limit}")]
    SizeGuard { estimated_cost: u128, limit: u128 },

    #[error("unknown lemma id {0:?}")]
    UnknownLemma(String),

    #[error("solution left the finite range after t = {last_finite_time}")]
    BlowUp { last_finite_time: f64 },

    #[error("kernel evolution unstable at t = {time}: unitarity defect {defect:e}")]
    Instability { time: f64, defect: f64 },

    #[error("power iteration did not converge after {iterations} iterations; norm in [{lower:e}, {upper:e}]")]
    NonConvergence {
        lower: f64,
        upper: f64,
        iterations: usize,
    },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::Instability { .. }
                | Error::NonConvergence { .. }
                | Error::DegenerateEnsemble(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
