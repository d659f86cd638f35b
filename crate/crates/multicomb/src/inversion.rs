//! Recover susceptibility samples from down-converted spectra.
//!
//! Linear dual-comb spectra invert tooth by tooth: each beat spike is one
//! susceptibility sample divided by known field weights. Folded third-order
//! spectra become a linear system whose unknowns are the symmetrized
//! response samples keyed by the exact tooth-frequency multiset; spikes with
//! several contributing triples turn into joint constraints, and runs with
//! permuted comb offsets share unknowns while folding them differently,
//! which is what makes the system solvable.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::BTreeMap;

use crate::comb::{field_teeth, CombSpec};
use crate::error::{Error, Result};
use crate::spectrum::{Spectrum, SpikeTerm};

/// One recovered susceptibility sample on the tooth grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSample {
    pub tooth: i64,
    pub frequency: f64,
    pub value: Complex64,
    pub weight_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSample {
    pub tooth: i64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LinearInversion {
    pub samples: Vec<ChiSample>,
    pub skipped: Vec<SkippedSample>,
    /// Smallest and largest weight magnitude among recovered samples.
    pub weight_range: (f64, f64),
}

/// Invert a first-order dual-comb spectrum back to susceptibility samples on
/// the material comb's tooth grid.
///
/// The spectrum must come from a detect-restricted run so each nonzero beat
/// spike maps to exactly one material tooth. Teeth whose envelope weight was
/// truncated never produced a spike; they are reported as skipped rather
/// than extrapolated.
pub fn invert_linear(spectrum: &Spectrum, combs: &[CombSpec]) -> Result<LinearInversion> {
    if combs.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "linear inversion expects 2 combs, got {}",
            combs.len()
        )));
    }
    // independent weight reconstruction from the comb set
    let tables: Vec<BTreeMap<i64, Complex64>> = combs
        .iter()
        .map(|c| {
            field_teeth(c).map(|teeth| {
                teeth
                    .into_iter()
                    .map(|t| (t.grid_index, t.amplitude))
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let step = spectrum.step;

    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut weight_range = (f64::INFINITY, 0.0f64);
    for (index, spike) in spectrum.iter() {
        let pairs: Vec<_> = spike
            .terms
            .iter()
            .filter_map(|t| match t {
                SpikeTerm::LinearPair {
                    detect_comb,
                    material_comb,
                    detect_grid,
                    material_grid,
                    weight,
                } => Some((
                    *detect_comb,
                    *material_comb,
                    *detect_grid,
                    *material_grid,
                    *weight,
                )),
                _ => None,
            })
            .collect();
        if pairs.is_empty() {
            continue;
        }
        if index == 0 {
            skipped.push(SkippedSample {
                tooth: 0,
                reason: "zero-frequency spike mixes the static terms".into(),
            });
            continue;
        }
        if pairs.len() > 1 {
            return Err(Error::AmbiguousSpike {
                index,
                terms: pairs.len(),
            });
        }
        let (detect_comb, material_comb, detect_grid, material_grid, weight) = pairs[0];
        let material = &combs[material_comb];
        let spacing = material.spacing_multiple();
        if (material_grid - material.ce_multiple) % spacing != 0 {
            return Err(Error::InvalidInput(format!(
                "material grid index {material_grid} does not sit on comb {material_comb}'s tooth grid"
            )));
        }
        let tooth = (material_grid - material.ce_multiple) / spacing;
        // cross-check the recorded weight against the comb set
        let recomputed = Complex64::new(0.0, 1.0)
            * (detect_grid as f64 * step)
            * tables[detect_comb]
                .get(&detect_grid)
                .copied()
                .unwrap_or(Complex64::ZERO)
            * tables[material_comb]
                .get(&material_grid)
                .copied()
                .unwrap_or(Complex64::ZERO);
        if (recomputed - weight).norm() > 1e-9 * weight.norm().max(1e-300) {
            return Err(Error::InvalidInput(format!(
                "spike metadata at index {index} disagrees with the supplied combs"
            )));
        }
        if weight.norm() == 0.0 {
            skipped.push(SkippedSample {
                tooth,
                reason: "vanishing field weight".into(),
            });
            continue;
        }
        weight_range = (
            weight_range.0.min(weight.norm()),
            weight_range.1.max(weight.norm()),
        );
        samples.push(ChiSample {
            tooth,
            frequency: material_grid as f64 * step,
            value: spike.amplitude / weight,
            weight_norm: weight.norm(),
        });
    }
    samples.sort_by_key(|s| s.tooth);

    // teeth inside the recovered span with no spike were below the floor
    if let (Some(first), Some(last)) = (samples.first(), samples.last()) {
        let have: std::collections::BTreeSet<i64> = samples.iter().map(|s| s.tooth).collect();
        for m in first.tooth..=last.tooth {
            if !have.contains(&m) && m != 0 {
                skipped.push(SkippedSample {
                    tooth: m,
                    reason: "tooth truncated below the envelope floor".into(),
                });
            }
        }
    }
    Ok(LinearInversion {
        samples,
        skipped,
        weight_range,
    })
}

/// Stacked linear system for the folded third-order inversion.
#[derive(Debug, Clone)]
pub struct FoldingSystem {
    pub step: f64,
    /// Sorted tooth-frequency multisets (grid units) identifying each unknown.
    pub keys: Vec<[i64; 3]>,
    pub rows: Vec<FoldingRow>,
    /// Ridge weight.
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct FoldingRow {
    /// Which input spectrum the row came from.
    pub source: usize,
    /// Spike grid index within that spectrum.
    pub spike: i64,
    /// Column index and complex weight per contributing unknown.
    pub entries: Vec<(usize, Complex64)>,
    pub rhs: Complex64,
}

/// Assemble the folded system from one or more third-order spectra.
/// Unknowns are merged across spectra by their exact frequency multisets.
pub fn build_folding_system(spectra: &[Spectrum], lambda: f64) -> Result<FoldingSystem> {
    if spectra.is_empty() {
        return Err(Error::InvalidInput("need at least one spectrum".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be nonnegative".into()));
    }
    let step = spectra[0].step;
    for s in spectra {
        if s.step != step {
            return Err(Error::InvalidInput(
                "spectra must share one grid step".into(),
            ));
        }
    }
    let mut columns: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for (source, spectrum) in spectra.iter().enumerate() {
        for (spike, data) in spectrum.iter() {
            let mut entries: BTreeMap<[i64; 3], Complex64> = BTreeMap::new();
            let mut triples = 0usize;
            for term in &data.terms {
                if let SpikeTerm::TriplePath { key, weight, .. } = term {
                    *entries.entry(*key).or_insert(Complex64::ZERO) += weight;
                    triples += 1;
                }
            }
            if triples == 0 {
                return Err(Error::InvalidInput(format!(
                    "spike at index {spike} of spectrum {source} carries no tooth-triple metadata"
                )));
            }
            let entries = entries
                .into_iter()
                .map(|(key, w)| {
                    let next = columns.len();
                    let col = *columns.entry(key).or_insert(next);
                    (col, w)
                })
                .collect();
            rows.push(FoldingRow {
                source,
                spike,
                entries,
                rhs: data.amplitude,
            });
        }
    }
    let mut keys = vec![[0i64; 3]; columns.len()];
    for (key, col) in columns {
        keys[col] = key;
    }
    Ok(FoldingSystem {
        step,
        keys,
        rows,
        lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePolicy {
    /// Error out when the data leave unknowns unconstrained and lambda is 0.
    Strict,
    /// Return the minimum-norm solution and per-unknown constrained flags.
    MinimumNorm,
}

#[derive(Debug, Clone)]
pub struct FoldingSolution {
    pub values: Vec<Complex64>,
    /// Whether the data pin each unknown (no null-space component).
    pub constrained: Vec<bool>,
    /// Rank over the complex unknowns.
    pub rank: usize,
    pub condition: f64,
    pub row_residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Ridge-regularized least squares `min |Ax - b|^2 + lambda |x|^2` via the
/// singular value decomposition of the real embedding.
pub fn solve_folding(system: &FoldingSystem, policy: SolvePolicy) -> Result<FoldingSolution> {
    let unknowns = system.keys.len();
    let rows = system.rows.len();
    if unknowns == 0 || rows == 0 {
        return Err(Error::InvalidInput("empty folding system".into()));
    }
    let mut a = DMatrix::<f64>::zeros(2 * rows, 2 * unknowns);
    let mut b = DVector::<f64>::zeros(2 * rows);
    for (i, row) in system.rows.iter().enumerate() {
        b[2 * i] = row.rhs.re;
        b[2 * i + 1] = row.rhs.im;
        for &(col, w) in &row.entries {
            a[(2 * i, 2 * col)] += w.re;
            a[(2 * i, 2 * col + 1)] -= w.im;
            a[(2 * i + 1, 2 * col)] += w.im;
            a[(2 * i + 1, 2 * col + 1)] += w.re;
        }
    }
    // column equilibration tames the envelope-weight spread; only for the
    // pseudo-inverse path, since ridge is defined in the unscaled metric
    let mut col_scale = vec![1.0f64; unknowns];
    if system.lambda == 0.0 {
        for j in 0..unknowns {
            let norm = (0..2 * rows)
                .map(|i| a[(i, 2 * j)].powi(2) + a[(i, 2 * j + 1)].powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                col_scale[j] = 1.0 / norm;
                for i in 0..2 * rows {
                    a[(i, 2 * j)] *= col_scale[j];
                    a[(i, 2 * j + 1)] *= col_scale[j];
                }
            }
        }
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().fold(0.0f64, |acc, &s| acc.max(s));
    let tol = sigma_max * 1e-10;
    let real_rank = sigma.iter().filter(|&&s| s > tol).count();
    let rank = real_rank / 2;
    if system.lambda == 0.0 && policy == SolvePolicy::Strict && real_rank < 2 * unknowns {
        return Err(Error::RankDeficient { rank, unknowns });
    }

    // x = V f(S) U^T b with ridge filter factors
    let utb = u.transpose() * &b;
    let mut scaled = DVector::<f64>::zeros(sigma.len());
    for (k, &s) in sigma.iter().enumerate() {
        let f = if system.lambda > 0.0 {
            s / (s * s + system.lambda)
        } else if s > tol {
            1.0 / s
        } else {
            0.0
        };
        scaled[k] = utb[k] * f;
    }
    let mut x = v_t.transpose() * scaled;
    for j in 0..unknowns {
        x[2 * j] *= col_scale[j];
        x[2 * j + 1] *= col_scale[j];
    }

    // an unknown is pinned when the retained singular directions carry its
    // entire basis vector
    let mut constrained = vec![false; unknowns];
    for j in 0..unknowns {
        let mut projector_re = 0.0;
        let mut projector_im = 0.0;
        for (k, &s) in sigma.iter().enumerate() {
            if s > tol {
                projector_re += v_t[(k, 2 * j)].powi(2);
                projector_im += v_t[(k, 2 * j + 1)].powi(2);
            }
        }
        constrained[j] = (projector_re - 1.0).abs() < 1e-8 && (projector_im - 1.0).abs() < 1e-8;
    }

    let mut row_residuals = Vec::with_capacity(rows);
    let mut max_residual = 0.0f64;
    for row in &system.rows {
        let mut lhs = Complex64::ZERO;
        for &(col, w) in &row.entries {
            lhs += w * Complex64::new(x[2 * col], x[2 * col + 1]);
        }
        let r = (lhs - row.rhs).norm();
        row_residuals.push(r);
        max_residual = max_residual.max(r);
    }
    let sigma_min = sigma
        .iter()
        .filter(|&&s| s > tol)
        .fold(f64::INFINITY, |acc, &s| acc.min(s));
    let values = (0..unknowns)
        .map(|j| Complex64::new(x[2 * j], x[2 * j + 1]))
        .collect();
    Ok(FoldingSolution {
        values,
        constrained,
        rank,
        condition: sigma_max / sigma_min,
        row_residuals,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::{FrequencyGrid, GaussianEnvelope};
    use crate::material::{chi1, chi3, LevelSystem, Projection};
    use crate::signals::{linear_signal_freq, quad_comb_signal, SpikeSelection};

    fn dual_pair() -> Vec<CombSpec> {
        let grid = FrequencyGrid::new(0.01).unwrap();
        let env = GaussianEnvelope::new(1.0, 3.0).unwrap();
        vec![
            CombSpec::new(grid, 100, 0, 10.0, env, 1e-6).unwrap(),
            CombSpec::new(grid, 100, 1, 10.0, env, 1e-6).unwrap(),
        ]
    }

    #[test]
    fn linear_round_trip_recovers_the_susceptibility() {
        let combs = dual_pair();
        let sys = LevelSystem::two_level(10.0, 0.5, 1.0).unwrap();
        let spectrum = linear_signal_freq(
            &combs,
            &sys,
            Some(0),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let inversion = invert_linear(&spectrum, &combs).unwrap();
        assert!(inversion.samples.len() > 20);
        let mut peak = (0i64, 0.0f64);
        for s in &inversion.samples {
            let truth = chi1(&sys, s.frequency, Projection::Full).unwrap();
            let rel = (s.value - truth).norm() / truth.norm();
            assert!(rel <= 1e-9, "tooth {}: rel {rel:.3e}", s.tooth);
            if s.value.im > peak.1 {
                peak = (s.tooth, s.value.im);
            }
        }
        // strongest absorption at the tooth nearest the transition
        assert_eq!(peak.0, 10);
        // the static spike is reported, not inverted
        assert!(inversion.skipped.iter().any(|s| s.tooth == 0));
    }

    fn quad_set(offsets: [i64; 3]) -> Vec<CombSpec> {
        let grid = FrequencyGrid::new(1e-4).unwrap();
        let env = GaussianEnvelope::new(1.0, 2.0).unwrap();
        let mut combs = vec![CombSpec::new(grid, 10_000, 0, 8.0, env, 1e-3).unwrap()];
        for k in offsets {
            combs.push(CombSpec::new(grid, 10_000, k, 8.0, env, 1e-3).unwrap());
        }
        combs
    }

    fn quad_system() -> LevelSystem {
        LevelSystem::ladder(2.8, 6.0, 0.1, 1.0, 0.9)
            .unwrap()
            .with_pop_decay(vec![0.01, 0.02, 0.02])
            .unwrap()
    }

    #[test]
    fn folding_rank_equals_the_distinct_spike_count_for_one_run() {
        let combs = quad_set([3, 7, 13]);
        let sys = quad_system();
        let spectrum = quad_comb_signal(
            &combs,
            &sys,
            Some(2),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let system = build_folding_system(std::slice::from_ref(&spectrum), 0.0).unwrap();
        let solution = solve_folding(&system, SolvePolicy::MinimumNorm).unwrap();
        // rows touch disjoint unknown sets, so every distinct spike adds rank
        assert_eq!(solution.rank, spectrum.spike_count());
        assert!(solution.rank < system.keys.len());
    }

    #[test]
    fn extra_runs_never_reduce_the_rank() {
        let sys = quad_system();
        let run = |offsets: [i64; 3]| {
            quad_comb_signal(
                &quad_set(offsets),
                &sys,
                Some(2),
                Projection::Full,
                SpikeSelection::BeatBand,
            )
            .unwrap()
        };
        let first = run([3, 7, 13]);
        let second = run([13, 3, 7]);
        let one = solve_folding(
            &build_folding_system(std::slice::from_ref(&first), 0.0).unwrap(),
            SolvePolicy::MinimumNorm,
        )
        .unwrap();
        let two = solve_folding(
            &build_folding_system(&[first, second], 0.0).unwrap(),
            SolvePolicy::MinimumNorm,
        )
        .unwrap();
        assert!(two.rank >= one.rank);
    }

    #[test]
    fn permuted_offset_runs_recover_constrained_samples() {
        let sys = quad_system();
        let run = |offsets: [i64; 3]| {
            quad_comb_signal(
                &quad_set(offsets),
                &sys,
                Some(2),
                Projection::Full,
                SpikeSelection::BeatBand,
            )
            .unwrap()
        };
        let spectra = [run([3, 7, 13]), run([13, 3, 7])];
        let scale = spectra.iter().map(|s| s.norm_inf()).fold(0.0, f64::max);
        let system = build_folding_system(&spectra, 0.0).unwrap();
        let solution = solve_folding(&system, SolvePolicy::MinimumNorm).unwrap();
        let constrained_count = solution.constrained.iter().filter(|&&c| c).count();
        assert!(constrained_count > 0, "no unknown was pinned");
        let mut checked = 0;
        for (j, key) in system.keys.iter().enumerate() {
            if !solution.constrained[j] {
                continue;
            }
            let truth = chi3(
                &sys,
                key[0] as f64 * system.step,
                key[1] as f64 * system.step,
                key[2] as f64 * system.step,
                Projection::Full,
            )
            .unwrap();
            let rel = (solution.values[j] - truth).norm() / truth.norm().max(1e-300);
            assert!(rel <= 1e-6, "key {key:?}: rel {rel:.3e}");
            checked += 1;
        }
        assert!(checked > 10);
        assert!(solution.max_residual <= 1e-10 * scale);
    }

    #[test]
    fn strict_policy_reports_rank_deficiency() {
        let combs = quad_set([3, 7, 13]);
        let sys = quad_system();
        let spectrum = quad_comb_signal(
            &combs,
            &sys,
            Some(2),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let system = build_folding_system(&[spectrum], 0.0).unwrap();
        let err = solve_folding(&system, SolvePolicy::Strict).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn ridge_shrinks_the_solution_toward_zero() {
        let combs = quad_set([3, 7, 13]);
        let sys = quad_system();
        let spectrum = quad_comb_signal(
            &combs,
            &sys,
            Some(2),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let norm = |lambda: f64| {
            let system = build_folding_system(std::slice::from_ref(&spectrum), lambda).unwrap();
            let sol = solve_folding(&system, SolvePolicy::MinimumNorm).unwrap();
            sol.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
        };
        let gentle = norm(1e-12);
        let heavy = norm(1e6);
        assert!(heavy < 1e-6 * gentle);
    }

    #[test]
    fn duplicate_runs_leave_the_solution_unchanged() {
        let combs = quad_set([3, 7, 13]);
        let sys = quad_system();
        let spectrum = quad_comb_signal(
            &combs,
            &sys,
            Some(2),
            Projection::Full,
            SpikeSelection::BeatBand,
        )
        .unwrap();
        let single = solve_folding(
            &build_folding_system(std::slice::from_ref(&spectrum), 0.0).unwrap(),
            SolvePolicy::MinimumNorm,
        )
        .unwrap();
        let doubled = solve_folding(
            &build_folding_system(&[spectrum.clone(), spectrum], 0.0).unwrap(),
            SolvePolicy::MinimumNorm,
        )
        .unwrap();
        let scale = single
            .values
            .iter()
            .map(|v| v.norm())
            .fold(0.0f64, f64::max);
        for (j, (a, b)) in single.values.iter().zip(doubled.values.iter()).enumerate() {
            // data-pinned unknowns must agree tightly; minimum-norm
            // components of unconstrained ones track the numerical null
            // space and get a looser sanity bound
            let tol = if single.constrained[j] { 1e-12 } else { 1e-8 };
            assert!(
                (a - b).norm() <= tol * scale,
                "unknown {j}: {:.3e} vs tol {tol:.0e}",
                (a - b).norm() / scale
            );
        }
    }
}
