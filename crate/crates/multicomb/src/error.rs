//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("frequency {frequency} of comb {comb} (tooth {tooth}) is not an integer multiple of the grid step {step}")]
    Incommensurate {
        comb: usize,
        tooth: i64,
        frequency: f64,
        step: f64,
    },

    #[error("time grid too coarse: {got} samples, need at least {required} to separate repetition-rate sidebands from the beat band")]
    NyquistViolation { got: usize, required: usize },

    #[error("shot modulation frequency {frequency} exceeds the per-shot Nyquist limit {limit}")]
    ShotNyquist { frequency: f64, limit: f64 },

    #[error("lock-in window {window} is shorter than {required} (5 tau); truncated tail retains {shortfall:.2e} of the exponential weight")]
    WindowTooShort {
        window: f64,
        required: f64,
        shortfall: f64,
    },

    #[error("low-pass cutoff {cutoff} must lie in (0, {limit}) to stay below every repetition spacing")]
    BadCutoff { cutoff: f64, limit: f64 },

    #[error("exactly vanishing resonance denominator at cumulative frequency {frequency} for coherence ({a},{b}); give the involved populations a nonzero decay rate")]
    DegenerateResonance { a: usize, b: usize, frequency: f64 },

    #[error("tooth-combination budget exceeded: {terms} terms requested, cap is {cap}; tighten the index budget or raise the tooth floor")]
    BudgetExceeded { terms: usize, cap: usize },

    #[error("least-squares system is rank deficient ({rank} of {unknowns} unknowns constrained) with lambda = 0; add runs with different offsets or set lambda > 0")]
    RankDeficient { rank: usize, unknowns: usize },

    #[error("spike at grid index {index} has {terms} contributing terms; inversion needs a one-to-one spike-to-tooth map")]
    AmbiguousSpike { index: i64, terms: usize },

    #[error("density-matrix trace drifted by {drift:.3e} at t = {t:.6}; reduce the step size (currently {dt:.3e})")]
    TraceDrift { t: f64, drift: f64, dt: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
