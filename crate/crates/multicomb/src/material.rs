//! Few-level quantum systems and sum-over-states susceptibilities.
//!
//! Susceptibilities are evaluated by walking the perturbative chain in
//! Liouville space: starting from the ground-state density matrix, each
//! interaction applies a dipole commutator followed by an elementwise
//! resolvent `1 / (W - w_ab + i g_ab)` at the cumulative drive frequency `W`.
//! The final trace is either full (coherent detection) or restricted to a
//! population (fluorescence detection). Both rotating and counter-rotating
//! terms are kept, conventions carry unit prefactors, and the third-order
//! kernel is symmetrized over its argument orderings so it is invariant
//! under simultaneous permutation of the drive frequencies.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Which part of the final trace a susceptibility keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    /// Full trace: coherent (transmission) detection.
    Full,
    /// Population of one state after the last interaction.
    Excited(usize),
    /// Probability of returning to the ground state; never fluoresces.
    Ground,
    /// Sum over the system's emitting set: fluorescence detection.
    Emitting,
}

/// A few-level system: energies, real symmetric dipole matrix, coherence
/// dephasing rates and optional population decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSystem {
    energies: Vec<f64>,
    /// Row-major n x n dipole matrix.
    dipole: Vec<f64>,
    /// Row-major n x n dephasing rates; diagonal ignored.
    dephasing: Vec<f64>,
    /// Decay rate of population deviations per level. Default zero; pipelines
    /// that drive population gratings at exactly zero frequency need nonzero
    /// rates here (including the ground state) to stay off the static pole.
    pop_decay: Vec<f64>,
    ground: usize,
    emitting: BTreeSet<usize>,
}

impl LevelSystem {
    pub fn new(
        energies: Vec<f64>,
        dipole: Vec<f64>,
        dephasing: Vec<f64>,
        pop_decay: Vec<f64>,
        emitting: Option<BTreeSet<usize>>,
    ) -> Result<Self> {
        let n = energies.len();
        if n < 2 {
            return Err(Error::InvalidInput("need at least two levels".into()));
        }
        if dipole.len() != n * n || dephasing.len() != n * n || pop_decay.len() != n {
            return Err(Error::InvalidInput(
                "dipole/dephasing must be n x n and pop_decay length n".into(),
            ));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidInput("energies must be finite".into()));
        }
        let ground = energies
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        for a in 0..n {
            for b in 0..n {
                if (dipole[a * n + b] - dipole[b * n + a]).abs() > 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "dipole matrix must be symmetric, mismatch at ({a},{b})"
                    )));
                }
                if a != b {
                    if (dephasing[a * n + b] - dephasing[b * n + a]).abs() > 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "dephasing must be symmetric, mismatch at ({a},{b})"
                        )));
                    }
                    if !(dephasing[a * n + b] > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "dephasing rate ({a},{b}) must be positive"
                        )));
                    }
                }
            }
        }
        if pop_decay.iter().any(|&g| g < 0.0) {
            return Err(Error::InvalidInput("population decay must be >= 0".into()));
        }
        let emitting = emitting.unwrap_or_else(|| (0..n).filter(|&i| i != ground).collect());
        if emitting.contains(&ground) {
            return Err(Error::InvalidInput(
                "emitting set must not contain the ground state".into(),
            ));
        }
        if emitting.is_empty() {
            return Err(Error::InvalidInput("emitting set must not be empty".into()));
        }
        Ok(Self {
            energies,
            dipole,
            dephasing,
            pop_decay,
            ground,
            emitting,
        })
    }

    /// Two levels split by `omega`, dipole `mu`, dephasing `gamma`.
    pub fn two_level(omega: f64, gamma: f64, mu: f64) -> Result<Self> {
        Self::new(
            vec![0.0, omega],
            vec![0.0, mu, mu, 0.0],
            vec![0.0, gamma, gamma, 0.0],
            vec![0.0, 0.0],
            None,
        )
    }

    /// Ground-e-f ladder with dipole coupling only on adjacent rungs.
    pub fn ladder(
        omega_eg: f64,
        omega_fg: f64,
        gamma: f64,
        mu_eg: f64,
        mu_fe: f64,
    ) -> Result<Self> {
        Self::new(
            vec![0.0, omega_eg, omega_fg],
            vec![0.0, mu_eg, 0.0, mu_eg, 0.0, mu_fe, 0.0, mu_fe, 0.0],
            vec![0.0, gamma, gamma, gamma, 0.0, gamma, gamma, gamma, 0.0],
            vec![0.0, 0.0, 0.0],
            None,
        )
    }

    pub fn with_pop_decay(mut self, pop_decay: Vec<f64>) -> Result<Self> {
        if pop_decay.len() != self.len() || pop_decay.iter().any(|&g| g < 0.0) {
            return Err(Error::InvalidInput("bad population decay vector".into()));
        }
        self.pop_decay = pop_decay;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ground(&self) -> usize {
        self.ground
    }

    pub fn emitting(&self) -> &BTreeSet<usize> {
        &self.emitting
    }

    pub fn energy(&self, a: usize) -> f64 {
        self.energies[a]
    }

    pub fn dipole(&self, a: usize, b: usize) -> f64 {
        self.dipole[a * self.len() + b]
    }

    /// Transition frequency `e_a - e_b`.
    pub fn bohr(&self, a: usize, b: usize) -> f64 {
        self.energies[a] - self.energies[b]
    }

    /// Decay rate of the (a, b) density-matrix element: the stated dephasing
    /// plus lifetime broadening for coherences, the population decay on the
    /// diagonal.
    pub fn decay(&self, a: usize, b: usize) -> f64 {
        if a == b {
            self.pop_decay[a]
        } else {
            self.dephasing[a * self.len() + b] + 0.5 * (self.pop_decay[a] + self.pop_decay[b])
        }
    }

    pub fn pop_decay(&self, a: usize) -> f64 {
        self.pop_decay[a]
    }

    /// States dipole-coupled to the ground state.
    pub fn single_excitation_states(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&a| a != self.ground && self.dipole(a, self.ground) != 0.0)
            .collect()
    }

    /// States reachable from the single-excitation manifold but not from the
    /// ground state (two-quantum manifold).
    pub fn double_excitation_states(&self) -> Vec<usize> {
        let singles = self.single_excitation_states();
        (0..self.len())
            .filter(|&f| {
                f != self.ground
                    && !singles.contains(&f)
                    && singles.iter().any(|&e| self.dipole(f, e) != 0.0)
            })
            .collect()
    }
}

fn commutator_with_dipole(sys: &LevelSystem, x: &[Complex64]) -> Vec<Complex64> {
    let n = sys.len();
    let mut out = vec![Complex64::ZERO; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = Complex64::ZERO;
            for c in 0..n {
                acc += sys.dipole(a, c) * x[c * n + b] - x[a * n + c] * sys.dipole(c, b);
            }
            out[a * n + b] = acc;
        }
    }
    out
}

/// Susceptibility of order `freqs.len()` with interactions applied in the
/// given order (first drive frequency first). Most callers want the
/// symmetrized wrappers [`chi1`] and [`chi3`].
pub fn chi_ordered(sys: &LevelSystem, freqs: &[f64], projection: Projection) -> Result<Complex64> {
    if freqs.iter().any(|f| !f.is_finite()) {
        return Err(Error::InvalidInput("drive frequency must be finite".into()));
    }
    let n = sys.len();
    let mut x = vec![Complex64::ZERO; n * n];
    x[sys.ground() * n + sys.ground()] = Complex64::new(1.0, 0.0);
    let mut cumulative = 0.0;
    for &w in freqs {
        cumulative += w;
        x = commutator_with_dipole(sys, &x);
        for a in 0..n {
            for b in 0..n {
                let v = x[a * n + b];
                if v == Complex64::ZERO {
                    continue;
                }
                let den = Complex64::new(cumulative - sys.bohr(a, b), sys.decay(a, b));
                if den == Complex64::ZERO {
                    return Err(Error::DegenerateResonance {
                        a,
                        b,
                        frequency: cumulative,
                    });
                }
                x[a * n + b] = v / den;
            }
        }
    }
    let y = {
        // final dipole acting from the left
        let mut y = vec![Complex64::ZERO; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = Complex64::ZERO;
                for c in 0..n {
                    acc += sys.dipole(a, c) * x[c * n + b];
                }
                y[a * n + b] = acc;
            }
        }
        y
    };
    let extract = |state: usize| y[state * n + state];
    let value = match projection {
        Projection::Full => (0..n).map(extract).sum(),
        Projection::Ground => extract(sys.ground()),
        Projection::Excited(e) => {
            if e >= n || e == sys.ground() {
                return Err(Error::InvalidInput(format!(
                    "projection state {e} is not an excited level"
                )));
            }
            extract(e)
        }
        Projection::Emitting => sys.emitting().iter().map(|&e| extract(e)).sum(),
    };
    let sign = if freqs.len() % 2 == 1 { -1.0 } else { 1.0 };
    Ok(sign * value)
}

/// Linear susceptibility at drive frequency `w`.
pub fn chi1(sys: &LevelSystem, w: f64, projection: Projection) -> Result<Complex64> {
    chi_ordered(sys, &[w], projection)
}

/// Third-order susceptibility for drives `(w3, w2, w1)`, `w1` acting first;
/// the emitted frequency is `w1 + w2 + w3`. Symmetrized over the six argument
/// orderings.
pub fn chi3(sys: &LevelSystem, w3: f64, w2: f64, w1: f64, projection: Projection) -> Result<Complex64> {
    const ORDERINGS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let args = [w1, w2, w3];
    let mut total = Complex64::ZERO;
    for ord in ORDERINGS {
        total += chi_ordered(sys, &[args[ord[0]], args[ord[1]], args[ord[2]]], projection)?;
    }
    Ok(total / 6.0)
}

/// Residual of the projection completeness identity: the excited-state
/// projections plus the ground projection must rebuild the full trace.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionResidual {
    pub residual: f64,
    pub magnitude: f64,
}

pub fn projection_sum_check(
    sys: &LevelSystem,
    freqs: &[f64],
) -> Result<ProjectionResidual> {
    let full = chi_ordered(sys, freqs, Projection::Full)?;
    let mut sum = chi_ordered(sys, freqs, Projection::Ground)?;
    for a in 0..sys.len() {
        if a != sys.ground() {
            sum += chi_ordered(sys, freqs, Projection::Excited(a))?;
        }
    }
    Ok(ProjectionResidual {
        residual: (sum - full).norm(),
        magnitude: full.norm(),
    })
}
