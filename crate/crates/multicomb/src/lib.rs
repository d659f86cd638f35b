//! Simulation and analysis toolkit for multi-frequency-comb and
//! AOM-modulated nonlinear spectroscopy.
//!
//! The crate synthesizes comb and pulse-train fields, evaluates linear and
//! third-order responses of few-level systems, down-converts optical
//! responses onto radio-frequency beat grids, extracts interaction pathways
//! by lock-in demodulation, checks everything against a nonperturbative
//! density-matrix propagation, and inverts down-converted spectra back to
//! susceptibility samples.
//!
//! Units are natural: frequencies and rates in radians per arbitrary time
//! unit, dipoles and field amplitudes in arbitrary units with unit
//! prefactors throughout.
//!
//! Start with the runnable examples (`cargo run --example dual_comb_linear`)
//! or the `multicomb` binary for config-driven runs.

pub mod aom;
pub mod comb;
pub mod config;
pub mod error;
pub mod inversion;
pub mod lockin;
pub mod material;
pub mod oracle;
pub mod signals;
pub mod spectrum;

pub use comb::{
    enumerate_teeth, eval_field_freq, eval_field_time, AomPulseTrainSpec, CombSpec, CombTooth,
    FrequencyGrid, GaussianEnvelope, PulseEnvelope,
};
pub use error::{Error, Result};
pub use material::{chi1, chi3, projection_sum_check, LevelSystem, Projection};
pub use signals::{
    dual_comb_third_order, dual_comb_two_by_two, linear_signal_freq, linear_signal_time,
    quad_comb_signal, SpikeSelection, TimeGrid,
};
pub use spectrum::{Spectrum, SpikeTerm, TimeSeries};
