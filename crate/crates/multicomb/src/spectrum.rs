//! Sampled signals: spike spectra on an exact integer grid and real time
//! series, with conversions between them.
//!
//! Spike amplitudes follow the synthesis convention `S(t) = sum_i c_i
//! exp(-i w_i t)`: the coefficient of a real signal at `+w` is the complex
//! conjugate of the one at `-w`. The real part of a beat coefficient is the
//! dissipation-rate spike; the imaginary part carries the quadrature needed
//! to recover complex susceptibilities.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};

/// Provenance of one additive contribution to a spike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpikeTerm {
    /// A bare field tooth (field spectra).
    FieldTooth { comb: usize, tooth: i64 },
    /// One (detect tooth, material tooth) pair of a first-order signal.
    /// `weight` multiplies the susceptibility sample at `material_grid * step`.
    LinearPair {
        detect_comb: usize,
        material_comb: usize,
        detect_grid: i64,
        material_grid: i64,
        weight: Complex64,
    },
    /// One tooth triple of a third-order signal. `key` is the sorted grid-index
    /// triple identifying the (symmetrized) susceptibility sample; `weight`
    /// multiplies that sample.
    TriplePath {
        slot_combs: [usize; 3],
        indices: [i64; 3],
        grids: [i64; 3],
        key: [i64; 3],
        weight: Complex64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Spike {
    pub amplitude: Complex64,
    pub terms: Vec<SpikeTerm>,
}

/// Complex spike amplitudes on a uniform frequency grid, keyed by integer
/// grid position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub step: f64,
    spikes: BTreeMap<i64, Spike>,
    /// Smallest repetition spacing of the combs that produced this spectrum,
    /// used to validate low-pass cutoffs.
    min_spacing: Option<f64>,
}

impl Spectrum {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            spikes: BTreeMap::new(),
            min_spacing: None,
        }
    }

    pub fn set_min_spacing(&mut self, spacing: f64) {
        self.min_spacing = Some(spacing);
    }

    pub fn min_spacing(&self) -> Option<f64> {
        self.min_spacing
    }

    pub fn accumulate(&mut self, index: i64, amplitude: Complex64, term: SpikeTerm) {
        let spike = self.spikes.entry(index).or_default();
        spike.amplitude += amplitude;
        spike.terms.push(term);
    }

    pub fn insert_amplitude(&mut self, index: i64, amplitude: Complex64) {
        let spike = self.spikes.entry(index).or_default();
        spike.amplitude += amplitude;
    }

    pub fn amplitude(&self, index: i64) -> Complex64 {
        self.spikes
            .get(&index)
            .map(|s| s.amplitude)
            .unwrap_or(Complex64::ZERO)
    }

    pub fn spike(&self, index: i64) -> Option<&Spike> {
        self.spikes.get(&index)
    }

    pub fn spike_count(&self) -> usize {
        self.spikes.len()
    }

    pub fn frequency(&self, index: i64) -> f64 {
        index as f64 * self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &Spike)> {
        self.spikes.iter().map(|(&i, s)| (i, s))
    }

    pub fn iter_amplitudes(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        self.spikes.iter().map(|(&i, s)| (i, s.amplitude))
    }

    pub fn indices(&self) -> Vec<i64> {
        self.spikes.keys().copied().collect()
    }

    pub fn norm_inf(&self) -> f64 {
        self.spikes
            .values()
            .map(|s| s.amplitude.norm())
            .fold(0.0, f64::max)
    }

    /// Drop spikes with amplitude below `floor` (cleanup for display/tests).
    pub fn pruned(&self, floor: f64) -> Spectrum {
        let mut out = self.clone();
        out.spikes.retain(|_, s| s.amplitude.norm() >= floor);
        out
    }

    /// Brick-wall low pass: zero every spike with `|frequency| > cutoff`.
    /// Idempotent. The cutoff must stay below the smallest comb spacing so no
    /// repetition-rate sideband can pass.
    pub fn lowpass(&self, cutoff: f64) -> Result<Spectrum> {
        let limit = self.min_spacing.unwrap_or(f64::INFINITY);
        if !(cutoff > 0.0) || cutoff >= limit {
            return Err(Error::BadCutoff { cutoff, limit });
        }
        let mut out = self.clone();
        out.spikes
            .retain(|&i, _| (i as f64 * self.step).abs() <= cutoff);
        Ok(out)
    }

    /// CSV rows: index, frequency, real, imaginary, contributing-term count.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,frequency,re,im,terms")?;
        for (i, s) in self.iter() {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{}",
                i,
                self.frequency(i),
                s.amplitude.re,
                s.amplitude.im,
                s.terms.len()
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Real samples on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub dt: f64,
    pub samples: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dt: f64, samples: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { dt, samples })
    }

    pub fn window(&self) -> f64 {
        self.dt * self.samples.len() as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Frequency resolution of the series' DFT.
    pub fn grid_step(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.window()
    }

    /// Synthesis-convention DFT: returns coefficients `c_k` with `s(t_m) =
    /// sum_k c_k exp(-i w_k t_m)`, keeping only `|index| <= band`.
    pub fn dft_band(&self, band: i64) -> Spectrum {
        let n = self.samples.len();
        let mut buf: Vec<Complex64> = self
            .samples
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_inverse(n).process(&mut buf);
        let mut out = Spectrum::new(self.grid_step());
        let half = (n / 2) as i64;
        let band = band.min(half);
        for idx in -band..=band {
            let k = idx.rem_euclid(n as i64) as usize;
            out.insert_amplitude(idx, buf[k] / n as f64);
        }
        out
    }

    /// Ideal brick-wall low pass via a transform round trip.
    pub fn lowpass(&self, cutoff: f64) -> Result<TimeSeries> {
        if !(cutoff > 0.0) {
            return Err(Error::BadCutoff {
                cutoff,
                limit: f64::INFINITY,
            });
        }
        let n = self.samples.len();
        let mut buf: Vec<Complex64> = self
            .samples
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        let step = self.grid_step();
        for k in 0..n {
            let idx = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
            if (idx as f64 * step).abs() > cutoff {
                buf[k] = Complex64::ZERO;
            }
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        let samples = buf.iter().map(|c| c.re / n as f64).collect();
        TimeSeries::new(self.dt, samples)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,time,value")?;
        for (i, &x) in self.samples.iter().enumerate() {
            writeln!(w, "{},{:.16e},{:.16e}", i, self.time(i), x)?;
        }
        Ok(())
    }
}

/// Max relative deviation between two spectra over the union of their spikes,
/// normalized by the larger infinity norm.
pub fn max_relative_deviation(a: &Spectrum, b: &Spectrum) -> f64 {
    let scale = a.norm_inf().max(b.norm_inf());
    if scale == 0.0 {
        return 0.0;
    }
    let mut indices: Vec<i64> = a.indices();
    indices.extend(b.indices());
    indices.sort_unstable();
    indices.dedup();
    indices
        .iter()
        .map(|&i| (a.amplitude(i) - b.amplitude(i)).norm() / scale)
        .fold(0.0, f64::max)
}
