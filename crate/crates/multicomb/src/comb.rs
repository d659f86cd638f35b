//! Frequency-comb and AOM pulse-train field construction.
//!
//! A comb is registered on a uniform frequency grid: the repetition spacing,
//! offset and carrier-envelope shift are integer multiples of the grid step,
//! so every tooth position and every beat between teeth is exact in `i64`
//! arithmetic. Physics quantities (envelope weights, susceptibility
//! arguments) are materialized as `index * step` floats only at evaluation
//! time.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::spectrum::{Spectrum, SpikeTerm};

/// Uniform frequency grid; all comb frequencies are integer multiples of `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub step: f64,
}

impl FrequencyGrid {
    pub fn new(step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidInput(format!(
                "grid step must be positive and finite, got {step}"
            )));
        }
        Ok(Self { step })
    }
}

/// Gaussian spectral envelope `A exp(-x^2 / (2 sigma^2))`, centered on the
/// carrier by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnvelope {
    pub amplitude: f64,
    pub sigma: f64,
}

impl GaussianEnvelope {
    pub fn new(amplitude: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "envelope sigma must be positive, got {sigma}"
            )));
        }
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidInput(format!(
                "envelope amplitude must be nonnegative, got {amplitude}"
            )));
        }
        Ok(Self { amplitude, sigma })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (-x * x / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Half-width (in frequency units) of the region where the envelope is at
    /// least `floor * amplitude`.
    pub fn support_half_width(&self, floor: f64) -> f64 {
        self.sigma * (2.0 * (1.0 / floor).ln()).sqrt()
    }
}

/// One pulse train / frequency comb.
///
/// Teeth sit at `n * (rep_multiple + offset_multiple) * step + ce_multiple *
/// step`. The comb with `offset_multiple = 0` is the reference; offsets are
/// measured against the shared base spacing `rep_multiple * step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombSpec {
    pub grid: FrequencyGrid,
    /// Base repetition spacing in grid units (shared across a comb set).
    pub rep_multiple: i64,
    /// Spacing offset relative to the base, in grid units.
    pub offset_multiple: i64,
    /// Carrier-envelope offset in grid units.
    pub ce_multiple: i64,
    /// Envelope center frequency.
    pub carrier: f64,
    /// Overall phase of the train.
    pub global_phase: f64,
    pub envelope: GaussianEnvelope,
    /// Relative amplitude below which teeth are truncated.
    pub tooth_floor: f64,
}

impl CombSpec {
    pub fn new(
        grid: FrequencyGrid,
        rep_multiple: i64,
        offset_multiple: i64,
        carrier: f64,
        envelope: GaussianEnvelope,
        tooth_floor: f64,
    ) -> Result<Self> {
        let comb = Self {
            grid,
            rep_multiple,
            offset_multiple,
            ce_multiple: 0,
            carrier,
            global_phase: 0.0,
            envelope,
            tooth_floor,
        };
        comb.validate()?;
        Ok(comb)
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.global_phase = phase;
        self
    }

    pub fn with_ce_multiple(mut self, ce: i64) -> Result<Self> {
        self.ce_multiple = ce;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rep_multiple <= 0 {
            return Err(Error::InvalidInput(format!(
                "repetition multiple must be positive, got {}",
                self.rep_multiple
            )));
        }
        if self.rep_multiple + self.offset_multiple <= 0 {
            return Err(Error::InvalidInput(format!(
                "total spacing multiple must be positive, got {} + {}",
                self.rep_multiple, self.offset_multiple
            )));
        }
        if !(self.tooth_floor > 0.0 && self.tooth_floor < 1.0) {
            return Err(Error::InvalidInput(format!(
                "tooth floor must lie in (0, 1), got {}",
                self.tooth_floor
            )));
        }
        if !self.carrier.is_finite() || !self.global_phase.is_finite() {
            return Err(Error::InvalidInput(
                "carrier and phase must be finite".into(),
            ));
        }
        Ok(())
    }

    /// Validation notes that do not reject the comb.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let ratio = self.offset_multiple.unsigned_abs() as f64 / self.rep_multiple as f64;
        if ratio > 0.05 {
            w.push(format!(
                "offset / spacing ratio {ratio:.3} is outside the intended regime (|offset| << spacing)"
            ));
        }
        w
    }

    /// Repetition spacing (base), `rep_multiple * step`.
    pub fn base_spacing(&self) -> f64 {
        self.rep_multiple as f64 * self.grid.step
    }

    /// Actual tooth spacing of this comb, `(rep_multiple + offset_multiple) * step`.
    pub fn spacing(&self) -> f64 {
        self.spacing_multiple() as f64 * self.grid.step
    }

    pub fn spacing_multiple(&self) -> i64 {
        self.rep_multiple + self.offset_multiple
    }

    /// Offset relative to the reference comb, `offset_multiple * step`.
    pub fn offset(&self) -> f64 {
        self.offset_multiple as f64 * self.grid.step
    }

    /// Grid index of tooth `n`.
    pub fn tooth_grid_index(&self, n: i64) -> i64 {
        n * self.spacing_multiple() + self.ce_multiple
    }

    /// Frequency of tooth `n`.
    pub fn tooth_frequency(&self, n: i64) -> f64 {
        self.tooth_grid_index(n) as f64 * self.grid.step
    }

    /// Tooth index whose frequency is exactly `grid_index * step`, if any.
    pub fn tooth_from_grid_index(&self, grid_index: i64) -> Option<i64> {
        let shifted = grid_index - self.ce_multiple;
        (shifted % self.spacing_multiple() == 0).then(|| shifted / self.spacing_multiple())
    }

    /// Complex amplitude of tooth `n` in the analytic (positive-carrier) train.
    pub fn tooth_amplitude(&self, n: i64) -> Complex64 {
        let env = self.envelope.eval(self.tooth_frequency(n) - self.carrier);
        Complex64::from_polar(env, self.global_phase)
    }
}

/// One comb tooth of the analytic train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombTooth {
    pub index: i64,
    pub grid_index: i64,
    pub frequency: f64,
    pub amplitude: Complex64,
}

/// All teeth whose envelope weight clears the floor, sorted by index.
///
/// Returns only the analytic-train teeth (envelope hump at `+carrier`); the
/// negative-frequency mirror needed for a real field is added by
/// [`field_teeth`] and [`eval_field_freq`]. An empty result means the envelope
/// and carrier leave no tooth above the floor.
pub fn enumerate_teeth(comb: &CombSpec) -> Result<Vec<CombTooth>> {
    comb.validate()?;
    if comb.envelope.amplitude == 0.0 {
        return Ok(Vec::new());
    }
    let floor = comb.tooth_floor * comb.envelope.amplitude;
    let hw = comb.envelope.support_half_width(comb.tooth_floor);
    let spacing = comb.spacing();
    let lo = ((comb.carrier - hw) / spacing).floor() as i64 - 2;
    let hi = ((comb.carrier + hw) / spacing).ceil() as i64 + 2;
    let mut teeth = Vec::new();
    for n in lo..=hi {
        let amp = comb.tooth_amplitude(n);
        if amp.norm() >= floor {
            teeth.push(CombTooth {
                index: n,
                grid_index: comb.tooth_grid_index(n),
                frequency: comb.tooth_frequency(n),
                amplitude: amp,
            });
        }
    }
    Ok(teeth)
}

/// A spectral line of the full (real-valued) field of one comb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldTooth {
    /// Tooth index; mirror lines carry the negated index of their partner.
    pub tooth: i64,
    pub grid_index: i64,
    pub amplitude: Complex64,
}

/// Spectral lines of the real field of one comb: the analytic teeth plus
/// their conjugate mirror at negated frequency. Lines landing on the same
/// grid position are merged.
pub fn field_teeth(comb: &CombSpec) -> Result<Vec<FieldTooth>> {
    let analytic = enumerate_teeth(comb)?;
    let mut merged: BTreeMap<i64, (i64, Complex64)> = BTreeMap::new();
    for t in &analytic {
        let e = merged.entry(t.grid_index).or_insert((t.index, Complex64::ZERO));
        e.1 += t.amplitude;
    }
    for t in &analytic {
        let e = merged.entry(-t.grid_index).or_insert((-t.index, Complex64::ZERO));
        e.1 += t.amplitude.conj();
    }
    Ok(merged
        .into_iter()
        .map(|(g, (n, a))| FieldTooth {
            tooth: n,
            grid_index: g,
            amplitude: a,
        })
        .collect())
}

/// Kronecker-spike field spectrum of a comb set on the shared grid, with the
/// negative-frequency mirror included so the time-domain field is real.
pub fn eval_field_freq(combs: &[CombSpec]) -> Result<Spectrum> {
    let step = shared_step(combs)?;
    let mut spectrum = Spectrum::new(step);
    spectrum.set_min_spacing(combs.iter().map(|c| c.spacing()).fold(f64::INFINITY, f64::min));
    for (ci, comb) in combs.iter().enumerate() {
        for line in field_teeth(comb)? {
            spectrum.accumulate(
                line.grid_index,
                line.amplitude,
                SpikeTerm::FieldTooth {
                    comb: ci,
                    tooth: line.tooth,
                },
            );
        }
    }
    Ok(spectrum)
}

/// Shared grid step of a comb set; empty sets default to 1.
pub fn shared_step(combs: &[CombSpec]) -> Result<f64> {
    let Some(first) = combs.first() else {
        return Ok(1.0);
    };
    for c in combs {
        if c.grid.step != first.grid.step {
            return Err(Error::InvalidInput(format!(
                "combs must share one grid step, got {} and {}",
                first.grid.step, c.grid.step
            )));
        }
    }
    Ok(first.grid.step)
}

/// Register a comb from raw frequencies, snapping them onto the grid.
///
/// Frequencies must be integer multiples of the step to within `1e-9`
/// relative; otherwise the offending quantity is reported.
pub fn comb_from_frequencies(
    grid: FrequencyGrid,
    comb_id: usize,
    rep_spacing: f64,
    offset: f64,
    carrier: f64,
    envelope: GaussianEnvelope,
    tooth_floor: f64,
) -> Result<CombSpec> {
    let rep = snap_multiple(grid.step, rep_spacing - offset).ok_or(Error::Incommensurate {
        comb: comb_id,
        tooth: 1,
        frequency: rep_spacing,
        step: grid.step,
    })?;
    let off = snap_multiple(grid.step, offset).ok_or(Error::Incommensurate {
        comb: comb_id,
        tooth: 1,
        frequency: offset,
        step: grid.step,
    })?;
    CombSpec::new(grid, rep, off, carrier, envelope, tooth_floor)
}

fn snap_multiple(step: f64, value: f64) -> Option<i64> {
    let ratio = value / step;
    let rounded = ratio.round();
    let tol = 1e-9 * ratio.abs().max(1.0);
    ((ratio - rounded).abs() <= tol).then_some(rounded as i64)
}

/// Pulse envelope of an AOM-modulated train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PulseEnvelope {
    Gaussian { amplitude: f64, sigma_t: f64 },
    /// Dirac-delta envelope: downstream signal math uses the impulsive limit.
    /// Pointwise evaluation returns `amplitude` at the exact center, else 0.
    Impulsive { amplitude: f64 },
}

impl PulseEnvelope {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            PulseEnvelope::Gaussian { amplitude, sigma_t } => {
                amplitude * (-t * t / (2.0 * sigma_t * sigma_t)).exp()
            }
            PulseEnvelope::Impulsive { amplitude } => {
                if t == 0.0 {
                    amplitude
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_impulsive(&self) -> bool {
        matches!(self, PulseEnvelope::Impulsive { .. })
    }
}

/// One AOM-shifted pulse train: pulse `n` arrives at `delay + n * rep_period`
/// and carries the per-shot phase `aom_freq * n * rep_period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AomPulseTrainSpec {
    pub delay: f64,
    pub rep_period: f64,
    /// AOM frequency (rad/time); the phase advances by `aom_freq * rep_period` per shot.
    pub aom_freq: f64,
    pub carrier: f64,
    pub envelope: PulseEnvelope,
    pub pulse_count: usize,
}

impl AomPulseTrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rep_period > 0.0) {
            return Err(Error::InvalidInput(format!(
                "repetition period must be positive, got {}",
                self.rep_period
            )));
        }
        if self.pulse_count == 0 {
            return Err(Error::InvalidInput("pulse count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Complex field amplitude of an AOM pulse train at time `t`: the sum over
/// pulses of envelope x carrier x per-shot AOM phase.
pub fn eval_field_time(spec: &AomPulseTrainSpec, t: f64) -> Result<Complex64> {
    spec.validate()?;
    let mut total = Complex64::ZERO;
    for n in 0..spec.pulse_count {
        let tn = t - spec.delay - n as f64 * spec.rep_period;
        let env = spec.envelope.eval(tn);
        if env == 0.0 {
            continue;
        }
        let phase = spec.carrier * tn + spec.aom_freq * n as f64 * spec.rep_period;
        total += env * Complex64::from_polar(1.0, phase);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn desk_comb() -> CombSpec {
        let grid = FrequencyGrid::new(1.0).unwrap();
        CombSpec::new(
            grid,
            1,
            0,
            100.0,
            GaussianEnvelope::new(1.0, 20.0).unwrap(),
            1e-8,
        )
        .unwrap()
    }

    #[test]
    fn envelope_peak_sits_on_the_carrier_tooth() {
        let teeth = enumerate_teeth(&desk_comb()).unwrap();
        let peak = teeth.iter().find(|t| t.index == 100).unwrap();
        assert_eq!(peak.amplitude, Complex64::new(1.0, 0.0));
    }

    #[test]
    fn tooth_count_matches_analytic_support() {
        // Teeth satisfy |n - 100| <= sigma * sqrt(2 ln(1/floor)) = 121.39...,
        // i.e. n in [-21, 221]: 243 teeth. Confirmed by the scan below.
        let comb = desk_comb();
        let teeth = enumerate_teeth(&comb).unwrap();
        let hw = 20.0 * (2.0 * (1e8f64).ln()).sqrt();
        let expected = 2 * hw.floor() as i64 + 1;
        assert_eq!(expected, 243);
        assert_eq!(teeth.len() as i64, expected);
        let brute: i64 = (-1000..1200)
            .filter(|&n| comb.tooth_amplitude(n).norm() >= 1e-8)
            .count() as i64;
        assert_eq!(brute, expected);
        assert!(teeth.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn zero_amplitude_is_degenerate() {
        let mut comb = desk_comb();
        comb.envelope.amplitude = 0.0;
        assert!(enumerate_teeth(&comb).unwrap().is_empty());
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        assert!(GaussianEnvelope::new(1.0, 0.0).is_err());
        assert!(GaussianEnvelope::new(1.0, -2.0).is_err());
    }

    #[test]
    fn tooth_index_bijection() {
        let comb = desk_comb();
        for t in enumerate_teeth(&comb).unwrap() {
            assert_eq!(comb.tooth_from_grid_index(t.grid_index), Some(t.index));
            assert_eq!(comb.tooth_frequency(t.index), t.frequency);
        }
    }

    #[test]
    fn lowering_the_floor_never_removes_a_tooth() {
        let mut comb = desk_comb();
        comb.tooth_floor = 1e-4;
        let coarse: Vec<i64> = enumerate_teeth(&comb).unwrap().iter().map(|t| t.index).collect();
        comb.tooth_floor = 1e-10;
        let fine: Vec<i64> = enumerate_teeth(&comb).unwrap().iter().map(|t| t.index).collect();
        for n in &coarse {
            assert!(fine.contains(n));
        }
        assert!(fine.len() > coarse.len());
    }

    #[test]
    fn dual_comb_grid_indices_are_exact() {
        let grid = FrequencyGrid::new(0.001).unwrap();
        let env = GaussianEnvelope::new(1.0, 20.0).unwrap();
        let c1 = CombSpec::new(grid, 1000, 0, 100.0, env, 1e-8).unwrap();
        let c2 = CombSpec::new(grid, 1000, 1, 100.0, env, 1e-8).unwrap();
        for n in [-3i64, 1, 57, 100] {
            assert_eq!(c1.tooth_grid_index(n), 1000 * n);
            assert_eq!(c2.tooth_grid_index(n), 1001 * n);
            // pairwise difference at equal index reduces to n * (offset difference)
            assert_eq!(
                c2.tooth_grid_index(n) - c1.tooth_grid_index(n),
                n * (c2.offset_multiple - c1.offset_multiple)
            );
        }
    }

    #[test]
    fn field_spectrum_satisfies_reality() {
        let grid = FrequencyGrid::new(0.001).unwrap();
        let env = GaussianEnvelope::new(1.0, 20.0).unwrap();
        let c1 = CombSpec::new(grid, 1000, 0, 100.0, env, 1e-8)
            .unwrap()
            .with_phase(0.3);
        let c2 = CombSpec::new(grid, 1000, 1, 100.0, env, 1e-8).unwrap();
        let spectrum = eval_field_freq(&[c1, c2]).unwrap();
        assert!(spectrum.spike_count() > 0);
        for (i, amp) in spectrum.iter_amplitudes() {
            let mirror = spectrum.amplitude(-i);
            assert!((mirror - amp.conj()).norm() < 1e-15);
        }
    }

    #[test]
    fn empty_comb_list_gives_zero_spectrum() {
        let spectrum = eval_field_freq(&[]).unwrap();
        assert_eq!(spectrum.spike_count(), 0);
    }

    #[test]
    fn incommensurate_frequencies_are_rejected_with_the_comb_named() {
        let grid = FrequencyGrid::new(0.001).unwrap();
        let env = GaussianEnvelope::new(1.0, 20.0).unwrap();
        let err = comb_from_frequencies(grid, 2, 1.0, 0.00057e-1, 100.0, env, 1e-8).unwrap_err();
        match err {
            Error::Incommensurate { comb, .. } => assert_eq!(comb, 2),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(comb_from_frequencies(grid, 2, 1.001, 0.001, 100.0, env, 1e-8).is_ok());
    }

    #[test]
    fn pulse_train_center_amplitudes() {
        let spec = AomPulseTrainSpec {
            delay: 2.0,
            rep_period: 4.0,
            aom_freq: 0.0,
            carrier: 50.0,
            envelope: PulseEnvelope::Gaussian {
                amplitude: 0.7,
                sigma_t: 0.1,
            },
            pulse_count: 3,
        };
        let v = eval_field_time(&spec, 2.0).unwrap();
        assert!((v.re - 0.7).abs() < 1e-9);

        // phase advance of pi per shot flips the second pulse
        let mut flipped = spec;
        flipped.aom_freq = PI / flipped.rep_period;
        let v1 = eval_field_time(&flipped, 2.0 + 4.0).unwrap();
        assert!((v1.re + 0.7).abs() < 1e-9);
    }

    #[test]
    fn accepts_reference_aom_parameters() {
        // 1.25 us repetition with kHz-scale AOM differences
        let spec = AomPulseTrainSpec {
            delay: 0.0,
            rep_period: 1.25e-6,
            aom_freq: 2.0 * PI * 5.0e3,
            carrier: 2.0 * PI * 384.0e12,
            envelope: PulseEnvelope::Impulsive { amplitude: 1.0 },
            pulse_count: 4096,
        };
        assert!(spec.validate().is_ok());
        let other = AomPulseTrainSpec {
            aom_freq: 2.0 * PI * 8.0e3,
            ..spec
        };
        assert!(other.validate().is_ok());
    }

    #[test]
    fn warns_outside_small_offset_regime() {
        let grid = FrequencyGrid::new(0.1).unwrap();
        let env = GaussianEnvelope::new(1.0, 5.0).unwrap();
        let comb = CombSpec::new(grid, 10, 3, 10.0, env, 1e-6).unwrap();
        assert!(!comb.warnings().is_empty());
        let tame = CombSpec::new(grid, 1000, 1, 10.0, env, 1e-6).unwrap();
        assert!(tame.warnings().is_empty());
    }
}
