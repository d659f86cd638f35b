//! Digital lock-in amplifier: reference waveforms, exponentially weighted
//! demodulation, and the monochromator down-shift map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference-waveform parameters of the two lock-in channels.
///
/// `phi21` and `phi43` are the AOM frequency differences of the pulse pairs,
/// `omega21` and `omega43` the monochromator-derived reference frequencies
/// that downshift the delay-axis oscillations, `theta` selects in-phase (0)
/// or quadrature (pi/2), and `tau` is the low-pass time constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockInConfig {
    pub phi21: f64,
    pub phi43: f64,
    pub omega21: f64,
    pub omega43: f64,
    pub theta: f64,
    pub tau: f64,
}

impl LockInConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidInput(format!(
                "lock-in time constant must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Values of theta other than 0 and pi/2 work but are worth flagging.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let frac = self.theta.rem_euclid(std::f64::consts::PI);
        if frac.min((frac - std::f64::consts::FRAC_PI_2).abs()) > 1e-12
            && (frac - std::f64::consts::PI).abs() > 1e-12
        {
            w.push(format!(
                "theta = {} is neither 0 nor pi/2; channels will mix quadratures",
                self.theta
            ));
        }
        w
    }

    pub fn with_theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }
}

/// Sign of the reference channel: `Plus` beats at `phi43 + phi21`, `Minus`
/// at `phi43 - phi21`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceSign {
    Plus,
    Minus,
}

/// Reference waveform
/// `cos(omega43 t3 +/- omega21 t1 - (phi43 +/- phi21) t' - theta)`.
pub fn reference_waveform(
    cfg: &LockInConfig,
    sign: ReferenceSign,
    t3: f64,
    t1: f64,
    t_shot: f64,
) -> f64 {
    let s = match sign {
        ReferenceSign::Plus => 1.0,
        ReferenceSign::Minus => -1.0,
    };
    (cfg.omega43 * t3 + s * cfg.omega21 * t1 - (cfg.phi43 + s * cfg.phi21) * t_shot - cfg.theta)
        .cos()
}

/// Beat frequency a reference channel demodulates at.
pub fn reference_frequency(cfg: &LockInConfig, sign: ReferenceSign) -> f64 {
    match sign {
        ReferenceSign::Plus => cfg.phi43 + cfg.phi21,
        ReferenceSign::Minus => cfg.phi43 - cfg.phi21,
    }
}

fn window_check(window: f64, tau: f64) -> Result<()> {
    let required = 5.0 * tau;
    if window < required {
        return Err(Error::WindowTooShort {
            window,
            required,
            shortfall: (-window / tau).exp(),
        });
    }
    Ok(())
}

/// Exponentially weighted demodulation
/// `(1/tau) integral S(t') R(t') exp(-t'/tau) dt'`
/// by the trapezoidal rule over the sampled window. The window must cover at
/// least five time constants.
pub fn lockin_demodulate(signal: &[f64], reference: &[f64], dt: f64, tau: f64) -> Result<f64> {
    if signal.len() != reference.len() || signal.len() < 2 {
        return Err(Error::InvalidInput(
            "signal and reference must share a grid with at least two samples".into(),
        ));
    }
    if !(dt > 0.0) || !(tau > 0.0) {
        return Err(Error::InvalidInput("dt and tau must be positive".into()));
    }
    window_check(dt * (signal.len() - 1) as f64, tau)?;
    let mut acc = 0.0;
    let mut prev = signal[0] * reference[0];
    for m in 1..signal.len() {
        let cur = signal[m] * reference[m] * (-(m as f64) * dt / tau).exp();
        acc += 0.5 * (prev + cur) * dt;
        prev = cur;
    }
    Ok(acc / tau)
}

/// Demodulate a signal that is exactly periodic over the supplied record.
///
/// The record is one period; the effective window is `tiles` copies of it
/// with the exponential weight carried across tiles. For a `W`-periodic
/// product the trapezoidal sum over tile `k` equals the tile-0 sum scaled by
/// `exp(-k W / tau)`, so the full-window quadrature reduces to one tile and
/// a geometric factor.
pub fn lockin_demodulate_tiled(
    signal: &[f64],
    reference: &[f64],
    dt: f64,
    tau: f64,
    tiles: usize,
) -> Result<f64> {
    if signal.len() != reference.len() || signal.is_empty() {
        return Err(Error::InvalidInput(
            "signal and reference must share a nonempty grid".into(),
        ));
    }
    if !(dt > 0.0) || !(tau > 0.0) || tiles == 0 {
        return Err(Error::InvalidInput(
            "dt, tau and tile count must be positive".into(),
        ));
    }
    let period = dt * signal.len() as f64;
    window_check(period * tiles as f64, tau)?;
    // trapezoid over one tile, closed with the periodic continuation
    let mut tile = 0.0;
    let n = signal.len();
    for m in 0..n {
        let here = signal[m] * reference[m] * (-(m as f64) * dt / tau).exp();
        let next_idx = (m + 1) % n;
        let next = signal[next_idx] * reference[next_idx] * (-((m + 1) as f64) * dt / tau).exp();
        tile += 0.5 * (here + next) * dt;
    }
    let ratio = (-period / tau).exp();
    let geometric: f64 = if ratio == 1.0 {
        tiles as f64
    } else {
        (1.0 - ratio.powi(tiles as i32)) / (1.0 - ratio)
    };
    Ok(tile * geometric / tau)
}

/// Monochromator down-shift: material frequency minus reference frequency.
pub fn downshift_map(material: f64, reference: f64) -> f64 {
    material - reference
}
