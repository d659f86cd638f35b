//! Linear and third-order comb signals in frequency and time domain.
//!
//! Frequency-domain pipelines pair comb teeth directly: every retained term
//! is one choice of one tooth per interacting field, the spike lands at the
//! exact integer grid position of the tooth-frequency sum, and the material
//! response enters at the exact tooth frequencies. The beat-band selection
//! keeps only combinations whose total frequency is below half the smallest
//! repetition spacing, which reproduces an ideal low-pass after detection.
//!
//! The time-domain pipeline synthesizes the detected derivative field and the
//! driven dipole as explicit tooth sums, multiplies them per sample, and
//! leaves spike extraction to a DFT. With the sample count locked to an
//! integer multiple of the repetition multiple, every repetition-rate
//! sideband aliases onto a nonzero multiple of the spacing and the beat band
//! stays clean, so both routes agree to rounding error.

use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};

use crate::comb::{field_teeth, shared_step, CombSpec, FieldTooth};
use crate::error::{Error, Result};
use crate::material::{chi1, chi3, LevelSystem, Projection};
use crate::spectrum::{Spectrum, SpikeTerm, TimeSeries};

/// Which tooth combinations a frequency-domain pipeline keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeSelection {
    /// Keep only combinations whose spike lies in the beat band
    /// `|w| < min spacing / 2` (analytic low-pass selection).
    BeatBand,
    /// Keep every combination, including repetition-rate sidebands. Feed the
    /// result through [`Spectrum::lowpass`] to recover the beat band.
    FullSpectrum,
}

const TERM_CAP: usize = 20_000_000;

fn validate_comb_set(combs: &[CombSpec]) -> Result<(f64, i64)> {
    if combs.is_empty() {
        return Err(Error::InvalidInput("need at least one comb".into()));
    }
    let step = shared_step(combs)?;
    let base = combs[0].rep_multiple;
    for c in combs {
        c.validate()?;
        if c.rep_multiple != base {
            return Err(Error::InvalidInput(format!(
                "combs must share the base repetition multiple, got {} and {}",
                base, c.rep_multiple
            )));
        }
    }
    Ok((step, base))
}

/// Largest grid index strictly inside the beat band.
fn beat_band_limit(combs: &[CombSpec]) -> i64 {
    let min_spacing = combs
        .iter()
        .map(|c| c.spacing_multiple())
        .min()
        .unwrap_or(1);
    (min_spacing - 1) / 2
}

fn detect_indices(combs: &[CombSpec], detect: Option<usize>) -> Result<Vec<usize>> {
    match detect {
        None => Ok((0..combs.len()).collect()),
        Some(j) => {
            if j >= combs.len() {
                Err(Error::InvalidInput(format!(
                    "detect comb index {j} out of range ({} combs)",
                    combs.len()
                )))
            } else {
                Ok(vec![j])
            }
        }
    }
}

/// First-order signal spectrum of a comb set.
///
/// Each spike collects terms `i * w_det * A_det(-tooth) * A_mat(tooth) *
/// chi1(tooth frequency)`, where the detect factor comes from the field
/// derivative of the heterodyne comb and the material factor from the comb
/// driving the dipole. `detect = Some(j)` restricts the derivative side to
/// comb `j`; the material side always runs over the full set.
pub fn linear_signal_freq(
    combs: &[CombSpec],
    system: &LevelSystem,
    detect: Option<usize>,
    projection: Projection,
    selection: SpikeSelection,
) -> Result<Spectrum> {
    let (step, _) = validate_comb_set(combs)?;
    let detect_set = detect_indices(combs, detect)?;
    let band = beat_band_limit(combs);

    let tables: Vec<Vec<FieldTooth>> = combs
        .iter()
        .map(field_teeth)
        .collect::<Result<_>>()?;

    // material response per distinct tooth frequency
    let mut chi_cache: BTreeMap<i64, Complex64> = BTreeMap::new();
    for table in &tables {
        for t in table {
            if let std::collections::btree_map::Entry::Vacant(e) = chi_cache.entry(t.grid_index) {
                e.insert(chi1(system, t.grid_index as f64 * step, projection)?);
            }
        }
    }

    let mut out = Spectrum::new(step);
    out.set_min_spacing(combs.iter().map(|c| c.spacing()).fold(f64::INFINITY, f64::min));
    for &j in &detect_set {
        for (k, material_table) in tables.iter().enumerate() {
            for td in &tables[j] {
                let w_det = td.grid_index as f64 * step;
                let det_factor = Complex64::new(0.0, 1.0) * w_det * td.amplitude;
                for tm in material_table {
                    let spike = td.grid_index + tm.grid_index;
                    if selection == SpikeSelection::BeatBand && spike.abs() > band {
                        continue;
                    }
                    let weight = det_factor * tm.amplitude;
                    let amp = weight * chi_cache[&tm.grid_index];
                    out.accumulate(
                        spike,
                        amp,
                        SpikeTerm::LinearPair {
                            detect_comb: j,
                            material_comb: k,
                            detect_grid: td.grid_index,
                            material_grid: tm.grid_index,
                            weight,
                        },
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Uniform sampling grid for the time-domain pipeline. Construct with
/// [`TimeGrid::spanning`] so the window covers exactly one period of the
/// beat grid and every spike lands on a DFT bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn spanning(grid_step: f64, len: usize) -> Result<Self> {
        if len == 0 || !(grid_step > 0.0) {
            return Err(Error::InvalidInput("empty time grid".into()));
        }
        Ok(Self {
            dt: 2.0 * std::f64::consts::PI / (len as f64 * grid_step),
            len,
        })
    }

    /// Smallest alias-safe grid for a linear measurement on `combs`:
    /// the sample count is `M * rep_multiple` with `M` exceeding the largest
    /// possible tooth-pair sum in units of the repetition spacing.
    pub fn for_linear(combs: &[CombSpec]) -> Result<Self> {
        let (step, base) = validate_comb_set(combs)?;
        let max_index = combs
            .iter()
            .map(|c| {
                field_teeth(c).map(|teeth| {
                    teeth
                        .iter()
                        .map(|t| t.grid_index.abs())
                        .max()
                        .unwrap_or(0)
                })
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        let m_required = 2 * max_index / base + 2;
        Ok(Self::spanning(step, (m_required * base) as usize)?)
    }
}

fn synthesize(teeth: &[(i64, Complex64)], n: usize) -> Vec<Complex64> {
    // phase of tooth g at sample m is exactly -2 pi g m / n
    let chunk = 8192usize;
    let mut out = vec![Complex64::ZERO; n];
    out.par_chunks_mut(chunk).enumerate().for_each(|(ci, slice)| {
        let m0 = ci * chunk;
        for &(g, w) in teeth {
            let rot = Complex64::from_polar(
                1.0,
                -2.0 * std::f64::consts::PI * g as f64 / n as f64,
            );
            let start = (g as i128 * m0 as i128).rem_euclid(n as i128) as f64;
            let mut z = Complex64::from_polar(
                1.0,
                -2.0 * std::f64::consts::PI * start / n as f64,
            );
            for s in slice.iter_mut() {
                *s += w * z;
                z *= rot;
            }
        }
    });
    out
}

/// First-order signal sampled in time: the product of the detected field
/// derivative and the driven dipole, both built as explicit tooth sums.
pub fn linear_signal_time(
    combs: &[CombSpec],
    system: &LevelSystem,
    detect: Option<usize>,
    projection: Projection,
    grid: &TimeGrid,
) -> Result<TimeSeries> {
    let (step, base) = validate_comb_set(combs)?;
    let detect_set = detect_indices(combs, detect)?;
    let n = grid.len;
    let expected_dt = 2.0 * std::f64::consts::PI / (n as f64 * step);
    if ((grid.dt - expected_dt) / expected_dt).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "time grid must span one beat-grid period: dt {} vs required {}",
            grid.dt, expected_dt
        )));
    }
    let reference = TimeGrid::for_linear(combs)?;
    if n % base as usize != 0 || n < reference.len {
        return Err(Error::NyquistViolation {
            got: n,
            required: reference.len,
        });
    }

    let tables: Vec<Vec<FieldTooth>> = combs
        .iter()
        .map(field_teeth)
        .collect::<Result<_>>()?;

    let mut derivative_teeth: Vec<(i64, Complex64)> = Vec::new();
    for &j in &detect_set {
        for t in &tables[j] {
            let w = t.grid_index as f64 * step;
            derivative_teeth.push((t.grid_index, Complex64::new(0.0, -w) * t.amplitude));
        }
    }
    let mut dipole_teeth: Vec<(i64, Complex64)> = Vec::new();
    for table in &tables {
        for t in table {
            let chi = chi1(system, t.grid_index as f64 * step, projection)?;
            dipole_teeth.push((t.grid_index, chi * t.amplitude));
        }
    }

    let e_dot = synthesize(&derivative_teeth, n);
    let dipole = synthesize(&dipole_teeth, n);
    let mut samples = Vec::with_capacity(n);
    let mut imag_leak = 0.0f64;
    for m in 0..n {
        let v = -(e_dot[m] * dipole[m]);
        imag_leak = imag_leak.max(v.im.abs());
        samples.push(v.re);
    }
    let scale = samples.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale > 0.0 && imag_leak > 1e-9 * scale {
        return Err(Error::InvalidInput(format!(
            "time series failed the reality check: imaginary residue {imag_leak:.3e} vs scale {scale:.3e}"
        )));
    }
    TimeSeries::new(grid.dt, samples)
}

/// One third-order tooth combination kept by the pipeline.
struct TripleTerm {
    spike: i64,
    weight: Complex64,
    key: [i64; 3],
    term: SpikeTerm,
}

/// Third-order pipeline: one detection comb supplies the derivative tooth,
/// three interaction slots supply one tooth each from their assigned comb.
pub struct ThirdOrderRequest<'a> {
    pub combs: &'a [CombSpec],
    pub system: &'a LevelSystem,
    /// Comb supplying the detection (derivative) tooth.
    pub detect: usize,
    /// Comb index feeding each of the three interaction slots.
    pub slots: [usize; 3],
    /// Cap on |tooth index| in every slot and the detection comb.
    pub budget: Option<i64>,
    pub projection: Projection,
    pub selection: SpikeSelection,
}

fn budget_filter(table: Vec<FieldTooth>, budget: Option<i64>) -> Vec<FieldTooth> {
    match budget {
        None => table,
        Some(b) => table.into_iter().filter(|t| t.tooth.abs() <= b).collect(),
    }
}

pub fn third_order_signal(req: &ThirdOrderRequest) -> Result<Spectrum> {
    let (step, _) = validate_comb_set(req.combs)?;
    for &s in req.slots.iter().chain([req.detect].iter()) {
        if s >= req.combs.len() {
            return Err(Error::InvalidInput(format!(
                "comb index {s} out of range ({} combs)",
                req.combs.len()
            )));
        }
    }
    let band = beat_band_limit(req.combs);

    let slot_tables: Vec<Vec<FieldTooth>> = req
        .slots
        .iter()
        .map(|&s| Ok(budget_filter(field_teeth(&req.combs[s])?, req.budget)))
        .collect::<Result<_>>()?;
    let detect_comb = &req.combs[req.detect];
    let detect_table: BTreeMap<i64, Complex64> = budget_filter(field_teeth(detect_comb)?, req.budget)
        .into_iter()
        .map(|t| (t.tooth, t.amplitude))
        .collect();

    let terms_estimate = slot_tables
        .iter()
        .map(|t| t.len().max(1))
        .product::<usize>()
        .saturating_mul(match req.selection {
            SpikeSelection::BeatBand => 1,
            SpikeSelection::FullSpectrum => detect_table.len().max(1),
        });
    if terms_estimate > TERM_CAP {
        return Err(Error::BudgetExceeded {
            terms: terms_estimate,
            cap: TERM_CAP,
        });
    }

    // enumerate retained combinations first, then evaluate the response once
    // per distinct frequency multiset
    let mut raw: Vec<TripleTerm> = Vec::new();
    for t2 in &slot_tables[0] {
        for t3 in &slot_tables[1] {
            for t4 in &slot_tables[2] {
                let tooth_sum = t2.tooth + t3.tooth + t4.tooth;
                let grids = [t2.grid_index, t3.grid_index, t4.grid_index];
                let mut key = grids;
                key.sort_unstable();
                let slot_amp = t2.amplitude * t3.amplitude * t4.amplitude;
                let mut push = |detect_tooth: i64, detect_amp: Complex64| {
                    let detect_grid = detect_comb.tooth_grid_index(detect_tooth);
                    let spike = detect_grid + grids[0] + grids[1] + grids[2];
                    if req.selection == SpikeSelection::BeatBand && spike.abs() > band {
                        return;
                    }
                    let w_det = detect_grid as f64 * step;
                    let weight = Complex64::new(0.0, 1.0) * w_det * detect_amp * slot_amp;
                    raw.push(TripleTerm {
                        spike,
                        weight,
                        key,
                        term: SpikeTerm::TriplePath {
                            slot_combs: req.slots,
                            indices: [t2.tooth, t3.tooth, t4.tooth],
                            grids,
                            key,
                            weight,
                        },
                    });
                };
                match req.selection {
                    SpikeSelection::BeatBand => {
                        if let Some(&amp) = detect_table.get(&(-tooth_sum)) {
                            push(-tooth_sum, amp);
                        }
                    }
                    SpikeSelection::FullSpectrum => {
                        for (&tooth, &amp) in &detect_table {
                            push(tooth, amp);
                        }
                    }
                }
            }
        }
    }

    let mut keys: Vec<[i64; 3]> = raw.iter().map(|t| t.key).collect();
    keys.sort_unstable();
    keys.dedup();
    let chi_values: HashMap<[i64; 3], Complex64> = keys
        .par_iter()
        .map(|&key| {
            let value = chi3(
                req.system,
                key[0] as f64 * step,
                key[1] as f64 * step,
                key[2] as f64 * step,
                req.projection,
            )?;
            Ok((key, value))
        })
        .collect::<Result<_>>()?;

    let mut out = Spectrum::new(step);
    out.set_min_spacing(
        req.combs
            .iter()
            .map(|c| c.spacing())
            .fold(f64::INFINITY, f64::min),
    );
    for t in raw {
        out.accumulate(t.spike, t.weight * chi_values[&t.key], t.term);
    }
    Ok(out)
}

/// Four-comb third-order signal: detection on comb 0, one interaction with
/// each of combs 1, 2, 3. Spikes land at `m d1 + p d2 + q d3` in offset units
/// and the metadata records every contributing tooth triple.
pub fn quad_comb_signal(
    combs: &[CombSpec],
    system: &LevelSystem,
    budget: Option<i64>,
    projection: Projection,
    selection: SpikeSelection,
) -> Result<Spectrum> {
    if combs.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "quad-comb signal needs exactly 4 combs, got {}",
            combs.len()
        )));
    }
    third_order_signal(&ThirdOrderRequest {
        combs,
        system,
        detect: 0,
        slots: [1, 2, 3],
        budget,
        projection,
        selection,
    })
}

/// Dual-comb third-order special case: all three interactions with comb 1,
/// detection on comb 0. Spikes collapse onto `(m + p + q)` times the offset.
pub fn dual_comb_third_order(
    combs: &[CombSpec],
    system: &LevelSystem,
    budget: Option<i64>,
    projection: Projection,
) -> Result<Spectrum> {
    if combs.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "dual-comb third order needs exactly 2 combs, got {}",
            combs.len()
        )));
    }
    third_order_signal(&ThirdOrderRequest {
        combs,
        system,
        detect: 0,
        slots: [1, 1, 1],
        budget,
        projection,
        selection: SpikeSelection::BeatBand,
    })
}

/// Dual-comb third order with two interactions on comb 1 and one on comb 0,
/// summed over the three assignments of the comb-0 interaction. Spikes sit at
/// `p' = p + q` times the offset, so each spike fixes the sum of one pair of
/// response arguments; two-photon and Raman-type resonances show up as
/// enhanced `p'` classes.
pub fn dual_comb_two_by_two(
    combs: &[CombSpec],
    system: &LevelSystem,
    budget: Option<i64>,
    projection: Projection,
) -> Result<Spectrum> {
    if combs.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "two-by-two dual comb needs exactly 2 combs, got {}",
            combs.len()
        )));
    }
    let mut merged: Option<Spectrum> = None;
    for slots in [[0, 1, 1], [1, 0, 1], [1, 1, 0]] {
        let part = third_order_signal(&ThirdOrderRequest {
            combs,
            system,
            detect: 0,
            slots,
            budget,
            projection,
            selection: SpikeSelection::BeatBand,
        })?;
        merged = Some(match merged {
            None => part,
            Some(mut acc) => {
                for (i, spike) in part.iter() {
                    for term in &spike.terms {
                        acc.accumulate(i, Complex64::ZERO, term.clone());
                    }
                    acc.insert_amplitude(i, spike.amplitude);
                }
                acc
            }
        });
    }
    Ok(merged.unwrap())
}

/// First-order response of a sampled field: the dipole follows from the
/// susceptibility applied bin-by-bin in the discrete frequency domain, the
/// signal is the negative product of the field derivative and the dipole.
pub struct SampledLinearResponse {
    pub dipole: Vec<f64>,
    pub signal: Vec<f64>,
}

pub fn linear_signal_sampled(
    system: &LevelSystem,
    field: &[f64],
    dt: f64,
    projection: Projection,
) -> Result<SampledLinearResponse> {
    use rustfft::FftPlanner;
    let n = field.len();
    if n == 0 || !(dt > 0.0) {
        return Err(Error::InvalidInput("empty sampled field".into()));
    }
    let mut planner = FftPlanner::new();
    let mut coeffs: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    planner.plan_fft_inverse(n).process(&mut coeffs);
    for c in coeffs.iter_mut() {
        *c /= n as f64;
    }
    let dw = 2.0 * std::f64::consts::PI / (n as f64 * dt);
    let signed = |k: usize| -> f64 {
        let idx = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
        idx as f64 * dw
    };
    let mut dipole_bins = vec![Complex64::ZERO; n];
    let mut derivative_bins = vec![Complex64::ZERO; n];
    for k in 0..n {
        let w = signed(k);
        dipole_bins[k] = coeffs[k] * chi1(system, w, projection)?;
        derivative_bins[k] = coeffs[k] * Complex64::new(0.0, -w);
    }
    planner.plan_fft_forward(n).process(&mut dipole_bins);
    planner.plan_fft_forward(n).process(&mut derivative_bins);
    let dipole: Vec<f64> = dipole_bins.iter().map(|c| c.re).collect();
    let signal: Vec<f64> = dipole
        .iter()
        .zip(derivative_bins.iter())
        .map(|(&v, d)| -d.re * v)
        .collect();
    Ok(SampledLinearResponse { dipole, signal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::{FrequencyGrid, GaussianEnvelope};
    use crate::spectrum::max_relative_deviation;

    fn small_pair(k2: i64) -> Vec<CombSpec> {
        let grid = FrequencyGrid::new(0.01).unwrap();
        let env = GaussianEnvelope::new(1.0, 3.0).unwrap();
        let c1 = CombSpec::new(grid, 100, 0, 10.0, env, 1e-6).unwrap();
        let c2 = CombSpec::new(grid, 100, k2, 10.0, env, 1e-6).unwrap();
        vec![c1, c2]
    }

    fn probe_system() -> LevelSystem {
        LevelSystem::two_level(10.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn single_comb_contributes_only_at_dc() {
        let combs = vec![small_pair(1)[0].clone()];
        let sys = probe_system();
        let s = linear_signal_freq(&combs, &sys, None, Projection::Full, SpikeSelection::BeatBand)
            .unwrap();
        let nonzero: Vec<i64> = s
            .iter()
            .filter(|(_, sp)| sp.amplitude.norm() > 1e-14)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![0]);
    }

    #[test]
    fn dual_comb_spikes_match_independent_term_evaluation() {
        let combs = small_pair(1);
        let sys = probe_system();
        let s = linear_signal_freq(
            &combs,
            &sys,
            Some(0),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let step = 0.01;
        let env = |x: f64| {
            let v = (-x * x / (2.0 * 9.0)).exp();
            if v >= 1e-6 {
                v
            } else {
                0.0
            }
        };
        let weight = |g: i64| env(g as f64 * step - 10.0) + env(g as f64 * step + 10.0);
        let mut checked = 0;
        for m in -25i64..=25 {
            if m == 0 {
                continue;
            }
            // detect tooth -m of comb 0 against material tooth m of comb 1
            let g_det = -m * 100;
            let g_mat = m * 101;
            let w1 = weight(g_det);
            let w2 = weight(g_mat);
            if w1 < 1e-6 || w2 < 1e-6 {
                continue;
            }
            let chi = chi1(&sys, g_mat as f64 * step, Projection::Full).unwrap();
            let expected = Complex64::new(0.0, 1.0) * (g_det as f64 * step) * w1 * w2 * chi;
            let got = s.amplitude(g_det + g_mat);
            assert!(
                (got - expected).norm() <= 1e-12 * expected.norm(),
                "m = {m}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn cross_terms_overlap_at_opposite_spikes_without_detect_restriction() {
        let combs = small_pair(1);
        let sys = probe_system();
        let s = linear_signal_freq(&combs, &sys, None, Projection::Full, SpikeSelection::BeatBand)
            .unwrap();
        let spike = s.spike(5).expect("spike at +5 offsets");
        let mut pairs: Vec<(usize, usize)> = spike
            .terms
            .iter()
            .map(|t| match t {
                SpikeTerm::LinearPair {
                    detect_comb,
                    material_comb,
                    ..
                } => (*detect_comb, *material_comb),
                _ => unreachable!(),
            })
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert!(s.spike(-5).is_some());
    }

    #[test]
    fn brick_wall_filter_reproduces_the_analytic_selection() {
        let combs = small_pair(1);
        let sys = probe_system();
        let analytic = linear_signal_freq(
            &combs,
            &sys,
            None,
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let full = linear_signal_freq(
            &combs,
            &sys,
            None,
            Projection::Full,
            SpikeSelection::FullSpectrum,
        )
        .unwrap();
        assert!(full.spike_count() > analytic.spike_count());
        let filtered = full.lowpass(49.5 * 0.01).unwrap();
        assert!(max_relative_deviation(&filtered, &analytic) < 1e-13);
    }

    #[test]
    fn time_and_frequency_routes_agree() {
        let combs = small_pair(1);
        let sys = probe_system();
        for detect in [None, Some(0)] {
            let freq = linear_signal_freq(
                &combs,
                &sys,
                detect,
                Projection::Full,
                SpikeSelection::BeatBand,
            )
            .unwrap();
            let grid = TimeGrid::for_linear(&combs).unwrap();
            let ts = linear_signal_time(&combs, &sys, detect, Projection::Full, &grid).unwrap();
            let band = 49;
            let dft = ts.dft_band(band);
            let dev = max_relative_deviation(&dft, &freq);
            assert!(dev < 1e-9, "detect {detect:?}: deviation {dev:.3e}");
        }
    }

    #[test]
    fn rejects_undersampled_time_grids() {
        let combs = small_pair(1);
        let sys = probe_system();
        let grid = TimeGrid::spanning(0.01, 300).unwrap();
        let err =
            linear_signal_time(&combs, &sys, None, Projection::Full, &grid).unwrap_err();
        assert!(matches!(err, Error::NyquistViolation { .. }));
    }

    #[test]
    fn far_detuned_system_yields_a_suppressed_signal() {
        // With gamma = 1e-3 and the transition at 1000 while the envelope
        // covers teeth up to ~26, the biggest retained response sample is
        // bounded by 2 w_eg / (w_eg^2 - 26^2) ~ 2e-3 against the resonant
        // peak 1/gamma = 1000, and the detect prefactor shrinks by another
        // ~40x, so the amplitude ratio sits well under 1e-6.
        let grid = FrequencyGrid::new(0.01).unwrap();
        let env = GaussianEnvelope::new(1.0, 3.0).unwrap();
        let sys = LevelSystem::two_level(1000.0, 1e-3, 1.0).unwrap();
        let amp = |carrier: f64| {
            let combs = vec![
                CombSpec::new(grid, 100, 0, carrier, env, 1e-6).unwrap(),
                CombSpec::new(grid, 100, 1, carrier, env, 1e-6).unwrap(),
            ];
            let tg = TimeGrid::for_linear(&combs).unwrap();
            linear_signal_time(&combs, &sys, Some(0), Projection::Full, &tg)
                .unwrap()
                .samples
                .iter()
                .fold(0.0f64, |a, &b| a.max(b.abs()))
        };
        let resonant = amp(1000.0);
        let detuned = amp(10.0);
        assert!(
            detuned < 1e-6 * resonant,
            "ratio {:.3e}",
            detuned / resonant
        );
    }

    #[test]
    fn zero_field_gives_zero_everywhere() {
        let grid = FrequencyGrid::new(0.01).unwrap();
        let env = GaussianEnvelope::new(0.0, 3.0).unwrap();
        let combs = vec![
            CombSpec::new(grid, 100, 0, 10.0, env, 1e-6).unwrap(),
            CombSpec::new(grid, 100, 1, 10.0, env, 1e-6).unwrap(),
        ];
        let sys = probe_system();
        let s = linear_signal_freq(&combs, &sys, None, Projection::Full, SpikeSelection::BeatBand)
            .unwrap();
        assert_eq!(s.spike_count(), 0);
        let tg = TimeGrid::spanning(0.01, 400).unwrap();
        let ts = linear_signal_time(&combs, &sys, None, Projection::Full, &tg).unwrap();
        assert!(ts.samples.iter().all(|&x| x == 0.0));
    }

    fn quad_set(offsets: [i64; 3], carrier: f64, sigma: f64, floor: f64) -> Vec<CombSpec> {
        let grid = FrequencyGrid::new(1e-4).unwrap();
        let env = GaussianEnvelope::new(1.0, sigma).unwrap();
        let mut combs = vec![CombSpec::new(grid, 10_000, 0, carrier, env, floor).unwrap()];
        for k in offsets {
            combs.push(CombSpec::new(grid, 10_000, k, carrier, env, floor).unwrap());
        }
        combs
    }

    #[test]
    fn degenerate_offsets_fold_every_spike_onto_dc() {
        let combs = quad_set([0, 0, 0], 8.0, 2.0, 1e-3);
        let sys = LevelSystem::two_level(2.0, 0.1, 1.0)
            .unwrap()
            .with_pop_decay(vec![0.01, 0.02])
            .unwrap();
        let s = quad_comb_signal(&combs, &sys, Some(3), Projection::Full, SpikeSelection::BeatBand)
            .unwrap();
        let nonzero: Vec<i64> = s.indices();
        assert_eq!(nonzero, vec![0]);
    }

    #[test]
    fn folded_spike_positions_match_integer_enumeration() {
        let combs = quad_set([3, 7, 13], 8.0, 2.0, 1e-3);
        let sys = LevelSystem::two_level(2.0, 0.1, 1.0).unwrap();
        let budget = 5i64;
        let s = quad_comb_signal(
            &combs,
            &sys,
            Some(budget),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        // independent enumeration over the effective index ranges
        let support = |comb: &CombSpec, n: i64| comb.tooth_amplitude(n).norm() >= 1e-3;
        let in_slot = |comb: &CombSpec, n: i64| {
            n.abs() <= budget && (support(comb, n) || support(comb, -n))
        };
        let mut expected: Vec<i64> = Vec::new();
        for m in -budget..=budget {
            for p in -budget..=budget {
                for q in -budget..=budget {
                    if !in_slot(&combs[1], m) || !in_slot(&combs[2], p) || !in_slot(&combs[3], q) {
                        continue;
                    }
                    let d = -(m + p + q);
                    if d.abs() > budget || !(support(&combs[0], d) || support(&combs[0], -d)) {
                        continue;
                    }
                    expected.push(3 * m + 7 * p + 13 * q);
                }
            }
        }
        expected.sort_unstable();
        expected.dedup();
        assert_eq!(s.indices(), expected);
    }

    #[test]
    fn dual_comb_third_order_spikes_are_confined_to_the_index_sum() {
        let grid = FrequencyGrid::new(1e-3).unwrap();
        let env = GaussianEnvelope::new(1.0, 2.0).unwrap();
        let combs = vec![
            CombSpec::new(grid, 1000, 0, 8.0, env, 1e-3).unwrap(),
            CombSpec::new(grid, 1000, 1, 8.0, env, 1e-3).unwrap(),
        ];
        let sys = LevelSystem::two_level(2.0, 0.1, 1.0)
            .unwrap()
            .with_pop_decay(vec![0.01, 0.05])
            .unwrap();
        let s = dual_comb_third_order(&combs, &sys, Some(8), Projection::Full).unwrap();
        assert!(s.spike_count() > 3);
        for (i, spike) in s.iter() {
            for t in &spike.terms {
                match t {
                    SpikeTerm::TriplePath { indices, .. } => {
                        assert_eq!(indices[0] + indices[1] + indices[2], i);
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn two_by_two_shows_the_two_photon_class_maximum() {
        let grid = FrequencyGrid::new(1e-3).unwrap();
        let env = GaussianEnvelope::new(1.0, 1.2).unwrap();
        let combs = vec![
            CombSpec::new(grid, 1000, 0, 3.0, env, 1e-3).unwrap(),
            CombSpec::new(grid, 1000, 1, 3.0, env, 1e-3).unwrap(),
        ];
        // two-photon state at 6 units = p' = 6 spacings
        let sys = LevelSystem::ladder(2.8, 6.0, 0.05, 1.0, 1.0)
            .unwrap()
            .with_pop_decay(vec![0.01, 0.02, 0.02])
            .unwrap();
        let s = dual_comb_two_by_two(&combs, &sys, Some(7), Projection::Full).unwrap();
        let class = |p: i64| s.amplitude(p).norm();
        assert!(class(6) > class(5), "6: {} vs 5: {}", class(6), class(5));
        assert!(class(6) > class(7), "6: {} vs 7: {}", class(6), class(7));
    }

    #[test]
    fn raman_class_dominates_for_a_two_level_system() {
        let grid = FrequencyGrid::new(1e-3).unwrap();
        let env = GaussianEnvelope::new(1.0, 1.5).unwrap();
        let combs = vec![
            CombSpec::new(grid, 1000, 0, 10.0, env, 1e-3).unwrap(),
            CombSpec::new(grid, 1000, 1, 10.0, env, 1e-3).unwrap(),
        ];
        let sys = LevelSystem::two_level(10.0, 0.3, 1.0)
            .unwrap()
            .with_pop_decay(vec![0.02, 0.05])
            .unwrap();
        let s = dual_comb_two_by_two(&combs, &sys, Some(14), Projection::Full).unwrap();
        let zero = s.amplitude(0).norm();
        for p in 3..10i64 {
            assert!(zero > s.amplitude(p).norm());
        }
    }

    #[test]
    fn zero_dipole_zeroes_third_order_spectra() {
        let combs = quad_set([3, 7, 13], 8.0, 2.0, 1e-3);
        let sys = LevelSystem::new(
            vec![0.0, 2.0],
            vec![0.0; 4],
            vec![0.0, 0.1, 0.1, 0.0],
            vec![0.0, 0.0],
            None,
        )
        .unwrap();
        let s = quad_comb_signal(&combs, &sys, Some(3), Projection::Full, SpikeSelection::BeatBand)
            .unwrap();
        assert!(s.norm_inf() == 0.0);
    }

    #[test]
    fn projections_split_the_coherent_signal() {
        let combs = small_pair(1);
        let sys = LevelSystem::ladder(10.0, 21.0, 0.4, 1.0, 0.8).unwrap();
        let run = |p: Projection| {
            linear_signal_freq(&combs, &sys, Some(0), p, SpikeSelection::BeatBand).unwrap()
        };
        let full = run(Projection::Full);
        let ground = run(Projection::Ground);
        let e1 = run(Projection::Excited(1));
        let e2 = run(Projection::Excited(2));
        let emitting = run(Projection::Emitting);
        for (i, spike) in full.iter() {
            let rebuilt = ground.amplitude(i) + e1.amplitude(i) + e2.amplitude(i);
            assert!((rebuilt - spike.amplitude).norm() <= 1e-12 * spike.amplitude.norm().max(1e-30));
            let fluor = e1.amplitude(i) + e2.amplitude(i);
            assert!((fluor - emitting.amplitude(i)).norm() <= 1e-14 * fluor.norm().max(1e-30));
        }
    }
}
