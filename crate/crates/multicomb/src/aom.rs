//! Four-pulse-train fluorescence simulation with AOM phase tagging.
//!
//! In the impulsive limit each laser shot excites the system with four
//! delta-like pulses whose carrier phases advance shot-to-shot at the AOM
//! frequencies. Every fourth-order interaction pathway therefore rides a
//! distinct slow modulation `sum_j s_j phi_j` of the fluorescence record,
//! and lock-in demodulation against the pair-difference references pulls out
//! pathway groups.
//!
//! Diagram catalog (time runs left to right; K = ket, B = bra, +/- = the
//! AOM sign of the interaction; intervals list the density-matrix element
//! during t1, t2, t3; a, b range over the single-excitation manifold, f over
//! the two-quantum manifold):
//!
//! | id | label   | arrows            | signs | intervals            | ends |
//! |----|---------|-------------------|-------|----------------------|------|
//! | 1  | ese-nr  | K+ B+ B- B+       | -+-+  | (a,g) (a,b) (a,g)    | a    |
//! | 2  | ese-r   | B+ K+ B- B+       | +--+  | (g,b) (a,b) (a,g)    | a    |
//! | 3  | gsb-r   | B+ B- K+ B+       | +--+  | (g,b) (g,g) (a,g)    | a    |
//! | 4  | gsb-nr  | K+ K- K+ B+       | -+-+  | (a,g) (g,g) (b,g)    | b    |
//! | 5  | esa-nr  | K+ B+ K+ B+       | -+-+  | (a,g) (a,b) (f,b)    | f    |
//! | 6  | esa-r   | B+ K+ K+ B+       | +--+  | (g,b) (a,b) (f,b)    | f    |
//! | 7  | dq-esa  | K+ K+ B+ B+       | --++  | (a,g) (f,g) (f,b)    | f    |
//! | 8  | dq-gsb  | K+ K+ K- B+       | --++  | (a,g) (f,g) (b,g)    | b    |
//! | 9  | dq-ese  | K+ K+ B+ K-       | --++  | (a,g) (f,g) (f,b)    | b    |
//! | 10 | esa-return-nr | K+ B+ K+ K- | -+-+  | (a,g) (a,b) (f,b)    | b    |
//! | 11 | esa-return-r  | K+ B+ B+ B- | -++-  | (a,g) (a,b) (a,f)    | a    |
//!
//! Sign rule: a raising arrow on the bra or a lowering arrow on the ket adds
//! `+phi_j`; the conjugate actions add `-phi_j`. Each listed diagram stands
//! for itself plus its arrow-flipped conjugate; records carry `2 Re(...)`.
//! The catalog is generated by an exhaustive walk over interaction
//! sequences, so level structures beyond the ladder pick up every pathway
//! their dipole pattern allows; the table above names the recurring
//! families. Rows 9-11 only arise once a two-quantum manifold exists.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comb::AomPulseTrainSpec;
use crate::error::{Error, Result};
use crate::lockin::{
    lockin_demodulate_tiled, reference_frequency, reference_waveform, LockInConfig, ReferenceSign,
};
use crate::material::LevelSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Ket,
    Bra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub side: Side,
    pub raising: bool,
}

impl Interaction {
    /// AOM modulation sign of this interaction.
    pub fn sign(&self) -> i8 {
        match (self.side, self.raising) {
            (Side::Ket, true) | (Side::Bra, false) => -1,
            (Side::Ket, false) | (Side::Bra, true) => 1,
        }
    }

    pub fn flipped(&self) -> Interaction {
        Interaction {
            side: match self.side {
                Side::Ket => Side::Bra,
                Side::Bra => Side::Ket,
            },
            raising: self.raising,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagramClass {
    StimulatedEmission,
    GroundStateBleach,
    ExcitedStateAbsorption,
    DoubleQuantum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detection {
    Fluorescence,
    /// Heterodyne technique catalogs are bookkeeping only: signatures of the
    /// coherent third-order variants, with the fourth slot standing for the
    /// reference pulse.
    HeterodyneKI,
    HeterodyneKII,
    HeterodyneKIII,
}

/// One interaction pathway with its AOM phase signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwaySignature {
    /// Template id (1..8, matching the catalog table).
    pub id: usize,
    pub label: String,
    pub class: DiagramClass,
    pub rephasing: bool,
    pub detection: Detection,
    pub interactions: [Interaction; 4],
    pub signs: [i8; 4],
    /// Density-matrix element occupied during t1, t2, t3.
    pub intervals: [(usize, usize); 3],
    pub final_state: usize,
    pub dipole_product: f64,
    pub uses_double_manifold: bool,
}

impl PathwaySignature {
    /// Net shot-to-shot modulation frequency `sum_j s_j phi_j`.
    pub fn net_modulation(&self, aom_freqs: &[f64; 4]) -> f64 {
        self.signs
            .iter()
            .zip(aom_freqs.iter())
            .map(|(&s, &p)| s as f64 * p)
            .sum()
    }

    /// Arrow-flipped conjugate pathway: signs negate, intervals transpose.
    pub fn conjugate(&self) -> PathwaySignature {
        let mut out = self.clone();
        out.label = format!("{}*", self.label);
        for (i, it) in self.interactions.iter().enumerate() {
            out.interactions[i] = it.flipped();
            out.signs[i] = -self.signs[i];
        }
        for (i, &(a, b)) in self.intervals.iter().enumerate() {
            out.intervals[i] = (b, a);
        }
        out
    }

    fn bra_count(&self) -> usize {
        self.interactions
            .iter()
            .filter(|i| i.side == Side::Bra)
            .count()
    }
}

const K_RAISE: Interaction = Interaction {
    side: Side::Ket,
    raising: true,
};
const K_LOWER: Interaction = Interaction {
    side: Side::Ket,
    raising: false,
};
const B_RAISE: Interaction = Interaction {
    side: Side::Bra,
    raising: true,
};
const B_LOWER: Interaction = Interaction {
    side: Side::Bra,
    raising: false,
};

/// Canonical interaction patterns of the familiar diagram families; the
/// walk below discovers these plus whatever else the level structure allows.
fn named_patterns() -> Vec<(usize, &'static str, [Interaction; 4])> {
    vec![
        (1, "ese-nr", [K_RAISE, B_RAISE, B_LOWER, B_RAISE]),
        (2, "ese-r", [K_RAISE, B_RAISE, K_LOWER, K_RAISE]),
        (3, "gsb-r", [K_RAISE, K_LOWER, B_RAISE, K_RAISE]),
        (4, "gsb-nr", [K_RAISE, K_LOWER, K_RAISE, B_RAISE]),
        (5, "esa-nr", [K_RAISE, B_RAISE, K_RAISE, B_RAISE]),
        (6, "esa-r", [K_RAISE, B_RAISE, B_RAISE, K_RAISE]),
        (7, "dq-esa", [K_RAISE, K_RAISE, B_RAISE, B_RAISE]),
        (8, "dq-gsb", [K_RAISE, K_RAISE, K_LOWER, B_RAISE]),
        (9, "dq-ese", [K_RAISE, K_RAISE, B_RAISE, K_LOWER]),
        (10, "esa-return-nr", [K_RAISE, B_RAISE, K_RAISE, K_LOWER]),
        (11, "esa-return-r", [K_RAISE, B_RAISE, B_RAISE, B_LOWER]),
    ]
}

fn interaction_rank(it: &Interaction) -> u8 {
    match (it.side, it.raising) {
        (Side::Ket, true) => 0,
        (Side::Ket, false) => 1,
        (Side::Bra, true) => 2,
        (Side::Bra, false) => 3,
    }
}

/// Exhaustive walk over every fourth-order interaction sequence that takes
/// the ground state to an excited population. Each conjugate pair is
/// represented once, by its lexicographically smaller (ket-first) member.
fn fluorescence_catalog(sys: &LevelSystem) -> Vec<PathwaySignature> {
    let g = sys.ground();
    let n = sys.len();
    let doubles = sys.double_excitation_states();

    struct Walk {
        interactions: Vec<Interaction>,
        states: Vec<(usize, usize)>,
        dipoles: f64,
    }
    let mut finished: Vec<(Vec<Interaction>, Vec<(usize, usize)>, f64)> = Vec::new();
    let mut stack = vec![Walk {
        interactions: Vec::new(),
        states: vec![(g, g)],
        dipoles: 1.0,
    }];
    while let Some(walk) = stack.pop() {
        if walk.interactions.len() == 4 {
            let &(k, b) = walk.states.last().unwrap();
            if k == b && k != g {
                finished.push((walk.interactions, walk.states, walk.dipoles));
            }
            continue;
        }
        let &(k, b) = walk.states.last().unwrap();
        for side in [Side::Ket, Side::Bra] {
            let from = match side {
                Side::Ket => k,
                Side::Bra => b,
            };
            for to in 0..n {
                let mu = sys.dipole(to, from);
                if mu == 0.0 || sys.energy(to) == sys.energy(from) {
                    continue;
                }
                let raising = sys.energy(to) > sys.energy(from);
                let next = match side {
                    Side::Ket => (to, b),
                    Side::Bra => (k, to),
                };
                let mut interactions = walk.interactions.clone();
                interactions.push(Interaction { side, raising });
                let mut states = walk.states.clone();
                states.push(next);
                stack.push(Walk {
                    interactions,
                    states,
                    dipoles: walk.dipoles * mu,
                });
            }
        }
    }

    let named = named_patterns();
    let mut out: Vec<PathwaySignature> = Vec::new();
    for (interactions, states, dipole_product) in finished {
        // keep the ket-first member of each conjugate pair
        let ranks: Vec<u8> = interactions.iter().map(interaction_rank).collect();
        let flipped: Vec<u8> = interactions
            .iter()
            .map(|it| interaction_rank(&it.flipped()))
            .collect();
        if ranks > flipped {
            continue;
        }
        let arr = [
            interactions[0],
            interactions[1],
            interactions[2],
            interactions[3],
        ];
        let intervals = [states[1], states[2], states[3]];
        let final_state = states[4].0;
        let touches_doubles = |s: (usize, usize)| doubles.contains(&s.0) || doubles.contains(&s.1);
        let two_quantum_coherence = {
            let (a, b) = intervals[1];
            (doubles.contains(&a) && b == g) || (doubles.contains(&b) && a == g)
        };
        let class = if two_quantum_coherence {
            DiagramClass::DoubleQuantum
        } else if doubles.contains(&final_state) || touches_doubles(intervals[2]) {
            DiagramClass::ExcitedStateAbsorption
        } else if intervals[1] == (g, g) {
            DiagramClass::GroundStateBleach
        } else {
            DiagramClass::StimulatedEmission
        };
        let rephasing = sys.bohr(intervals[0].0, intervals[0].1)
            * sys.bohr(intervals[2].0, intervals[2].1)
            < 0.0;
        let (id, base) = named
            .iter()
            .find(|(_, _, pattern)| *pattern == arr)
            .map(|&(id, name, _)| (id, name))
            .unwrap_or((0, "pathway"));
        let state_tag: Vec<String> = states[1..]
            .iter()
            .map(|&(a, b)| format!("{a}{b}"))
            .collect();
        let mut signs = [0i8; 4];
        for (sg, it) in signs.iter_mut().zip(arr.iter()) {
            *sg = it.sign();
        }
        out.push(PathwaySignature {
            id,
            label: format!("{base}[{}]", state_tag.join("-")),
            class,
            rephasing,
            detection: Detection::Fluorescence,
            interactions: arr,
            signs,
            intervals,
            final_state,
            dipole_product,
            uses_double_manifold: states.iter().any(|&s| touches_doubles(s)),
        });
    }
    out.sort_by(|a, b| {
        let key = |p: &PathwaySignature| {
            (
                if p.id == 0 { usize::MAX } else { p.id },
                p.interactions.iter().map(interaction_rank).collect::<Vec<_>>(),
                p.intervals,
            )
        };
        key(a).cmp(&key(b))
    });
    out
}

/// Enumerate the interaction pathways for the requested detection scheme.
///
/// Fluorescence returns the simulatable fourth-order population pathways.
/// The heterodyne variants return the conjugated signatures of the matching
/// coherent techniques as inert metadata.
pub fn enumerate_pathways(sys: &LevelSystem, detection: Detection) -> Vec<PathwaySignature> {
    let fluorescence = fluorescence_catalog(sys);
    match detection {
        Detection::Fluorescence => fluorescence,
        // conventional sign patterns: the first interaction is conjugated in
        // the rephasing set, so those representatives transfer as-is while
        // the other techniques take the arrow-flipped member
        Detection::HeterodyneKI => fluorescence
            .iter()
            .filter(|p| matches!(p.id, 2 | 3 | 6))
            .map(|p| heterodyne_variant(p, Detection::HeterodyneKI, false))
            .collect(),
        Detection::HeterodyneKII => fluorescence
            .iter()
            .filter(|p| matches!(p.id, 1 | 4 | 5))
            .map(|p| heterodyne_variant(p, Detection::HeterodyneKII, true))
            .collect(),
        Detection::HeterodyneKIII => fluorescence
            .iter()
            .filter(|p| matches!(p.id, 7 | 8))
            .map(|p| heterodyne_variant(p, Detection::HeterodyneKIII, true))
            .collect(),
    }
}

fn heterodyne_variant(p: &PathwaySignature, detection: Detection, flip: bool) -> PathwaySignature {
    let mut out = if flip { p.conjugate() } else { p.clone() };
    out.detection = detection;
    out.label = format!("{}-het", p.label.trim_end_matches('*'));
    out
}

/// Stable hash of the diagram catalog, for run manifests.
pub fn diagram_table_hash(pathways: &[PathwaySignature]) -> String {
    let json = serde_json::to_string(pathways).unwrap_or_default();
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Impulsive-limit pathway amplitude: the signed dipole product times the
/// free-evolution factor of each interval coherence.
pub fn impulsive_response(
    sys: &LevelSystem,
    pathway: &PathwaySignature,
    t3: f64,
    t2: f64,
    t1: f64,
) -> Result<Complex64> {
    if t1 < 0.0 || t2 < 0.0 || t3 < 0.0 {
        return Err(Error::InvalidInput("delays must be nonnegative".into()));
    }
    let sign = if pathway.bra_count() % 2 == 1 { -1.0 } else { 1.0 };
    let mut value = Complex64::new(sign * pathway.dipole_product, 0.0);
    for (&(a, b), t) in pathway.intervals.iter().zip([t1, t2, t3]) {
        let z = Complex64::new(-sys.decay(a, b), -sys.bohr(a, b)) * t;
        value *= z.exp();
    }
    Ok(value)
}

/// Delay scan for the fluorescence maps: `t1` and `t3` axes, fixed `t2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub t1: Vec<f64>,
    pub t2: f64,
    pub t3: Vec<f64>,
}

impl DelayGrid {
    pub fn scan(t1_max: f64, n1: usize, t2: f64, t3_max: f64, n3: usize) -> Result<Self> {
        if n1 < 2 || n3 < 2 || !(t1_max > 0.0) || !(t3_max > 0.0) || t2 < 0.0 {
            return Err(Error::InvalidInput("bad delay scan".into()));
        }
        let axis = |max: f64, n: usize| -> Vec<f64> {
            (0..n).map(|i| i as f64 * max / (n - 1) as f64).collect()
        };
        Ok(Self {
            t1: axis(t1_max, n1),
            t2,
            t3: axis(t3_max, n3),
        })
    }
}

fn bound_pathways(
    sys: &LevelSystem,
    trains: &[AomPulseTrainSpec; 4],
) -> Result<(Vec<PathwaySignature>, [f64; 4], f64)> {
    let t_rep = trains[0].rep_period;
    for tr in trains {
        tr.validate()?;
        if !tr.envelope.is_impulsive() {
            return Err(Error::InvalidInput(
                "shot synthesis needs impulsive pulse envelopes".into(),
            ));
        }
        if (tr.rep_period - t_rep).abs() > 1e-12 * t_rep {
            return Err(Error::InvalidInput(
                "all four trains must share the repetition period".into(),
            ));
        }
    }
    let freqs = [
        trains[0].aom_freq,
        trains[1].aom_freq,
        trains[2].aom_freq,
        trains[3].aom_freq,
    ];
    let pathways = enumerate_pathways(sys, Detection::Fluorescence);
    let limit = std::f64::consts::PI / t_rep;
    for p in &pathways {
        let f = p.net_modulation(&freqs).abs();
        if f >= limit {
            return Err(Error::ShotNyquist {
                frequency: f,
                limit,
            });
        }
    }
    Ok((pathways, freqs, t_rep))
}

/// Per-shot fluorescence record at one delay point:
/// `sum_i 2 Re[R_i(t3, t2, t1) exp(i (sum_j s_j phi_j) m T)]`.
pub fn shot_sequence(
    sys: &LevelSystem,
    trains: &[AomPulseTrainSpec; 4],
    t3: f64,
    t2: f64,
    t1: f64,
    shots: usize,
) -> Result<Vec<f64>> {
    let (pathways, freqs, t_rep) = bound_pathways(sys, trains)?;
    if shots == 0 {
        return Err(Error::InvalidInput("need at least one shot".into()));
    }
    let mut record = vec![0.0f64; shots];
    for p in &pathways {
        let amp = impulsive_response(sys, p, t3, t2, t1)?;
        let f = p.net_modulation(&freqs);
        let rot = Complex64::from_polar(1.0, f * t_rep);
        let mut z = amp;
        for (m, sample) in record.iter_mut().enumerate() {
            if m % 4096 == 0 {
                z = amp * Complex64::from_polar(1.0, f * t_rep * m as f64);
            }
            *sample += 2.0 * z.re;
            z *= rot;
        }
    }
    Ok(record)
}

/// Smallest shot count for which every pathway modulation completes an
/// integer number of cycles, so a record of that length tiles exactly.
pub fn periodic_shot_count(
    sys: &LevelSystem,
    trains: &[AomPulseTrainSpec; 4],
    cap: usize,
) -> Result<usize> {
    let (pathways, freqs, t_rep) = bound_pathways(sys, trains)?;
    let mut cycles: Vec<f64> = pathways
        .iter()
        .map(|p| p.net_modulation(&freqs).abs() * t_rep / (2.0 * std::f64::consts::PI))
        .filter(|c| *c > 0.0)
        .collect();
    cycles.sort_by(f64::total_cmp);
    cycles.dedup();
    if cycles.is_empty() {
        return Ok(1);
    }
    'outer: for n in 1..=cap {
        for c in &cycles {
            let turns = c * n as f64;
            if (turns - turns.round()).abs() > 1e-6 {
                continue 'outer;
            }
        }
        return Ok(n);
    }
    Err(Error::InvalidInput(format!(
        "no shot count up to {cap} makes every pathway modulation periodic; adjust the AOM frequencies"
    )))
}

/// Demodulated pathway-group amplitudes at one delay point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAmplitudes {
    /// Channel referenced at `phi43 + phi21`.
    pub plus: Complex64,
    /// Channel referenced at `phi43 - phi21`.
    pub minus: Complex64,
}

/// Demodulate one periodic shot record into the plus/minus pathway groups.
/// In-phase and quadrature demodulations form the complex amplitudes.
pub fn extract_pathway_groups(
    record: &[f64],
    rep_period: f64,
    t3: f64,
    t1: f64,
    cfg: &LockInConfig,
    tiles: usize,
) -> Result<GroupAmplitudes> {
    cfg.validate()?;
    let demod = |sign: ReferenceSign, theta: f64| -> Result<f64> {
        let c = cfg.with_theta(theta);
        let reference: Vec<f64> = (0..record.len())
            .map(|m| reference_waveform(&c, sign, t3, t1, m as f64 * rep_period))
            .collect();
        lockin_demodulate_tiled(record, &reference, rep_period, cfg.tau, tiles)
    };
    let plus = Complex64::new(
        demod(ReferenceSign::Plus, 0.0)?,
        demod(ReferenceSign::Plus, std::f64::consts::FRAC_PI_2)?,
    );
    let minus = Complex64::new(
        demod(ReferenceSign::Minus, 0.0)?,
        demod(ReferenceSign::Minus, std::f64::consts::FRAC_PI_2)?,
    );
    Ok(GroupAmplitudes { plus, minus })
}

/// Check that the lock-in reference frequencies actually match the beats in
/// a record; returns a warning per missing channel.
pub fn reference_mismatch_warnings(
    record: &[f64],
    rep_period: f64,
    cfg: &LockInConfig,
) -> Vec<String> {
    let n = record.len();
    let power = |f: f64| -> f64 {
        let mut acc = Complex64::ZERO;
        for (m, &s) in record.iter().enumerate() {
            acc += s * Complex64::from_polar(1.0, -f * m as f64 * rep_period);
        }
        (acc / n as f64).norm()
    };
    let total_rms = (record.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    if total_rms == 0.0 {
        return Vec::new();
    }
    let mut warnings = Vec::new();
    for sign in [ReferenceSign::Plus, ReferenceSign::Minus] {
        let f = reference_frequency(cfg, sign);
        if power(f) < 1e-3 * total_rms {
            // scan the record's strongest beat for the message
            let mut best = (0.0f64, 0.0f64);
            for k in 1..n / 2 {
                let fk = 2.0 * std::f64::consts::PI * k as f64 / (n as f64 * rep_period);
                let p = power(fk);
                if p > best.1 {
                    best = (fk, p);
                }
            }
            warnings.push(format!(
                "lock-in {sign:?} reference at {f:.6e} rad/time finds no beat; record is strongest near {:.6e}",
                best.0
            ));
        }
    }
    warnings
}

/// Full fluorescence delay map: per point, synthesize the periodic shot
/// record and demodulate both channels.
pub struct AomRun<'a> {
    pub system: &'a LevelSystem,
    pub trains: &'a [AomPulseTrainSpec; 4],
    pub delays: &'a DelayGrid,
    pub lockin: LockInConfig,
    /// Shots per record; use [`periodic_shot_count`] (or a multiple).
    pub shots: usize,
    /// Number of record tiles making up the lock-in window.
    pub tiles: usize,
}

pub struct AomMaps {
    pub t1: Vec<f64>,
    pub t2: f64,
    pub t3: Vec<f64>,
    /// Row-major over (t1, t3).
    pub plus: Vec<Complex64>,
    pub minus: Vec<Complex64>,
    pub warnings: Vec<String>,
    pub table_hash: String,
}

pub fn run_fluorescence_map(run: &AomRun) -> Result<AomMaps> {
    let (pathways, _, t_rep) = bound_pathways(run.system, run.trains)?;
    let points: Vec<(usize, usize)> = (0..run.delays.t1.len())
        .flat_map(|i| (0..run.delays.t3.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<GroupAmplitudes> = points
        .par_iter()
        .map(|&(i, j)| {
            let record = shot_sequence(
                run.system,
                run.trains,
                run.delays.t3[j],
                run.delays.t2,
                run.delays.t1[i],
                run.shots,
            )?;
            extract_pathway_groups(
                &record,
                t_rep,
                run.delays.t3[j],
                run.delays.t1[i],
                &run.lockin,
                run.tiles,
            )
        })
        .collect::<Result<_>>()?;
    let probe = shot_sequence(run.system, run.trains, 0.0, run.delays.t2, 0.0, run.shots)?;
    let warnings = reference_mismatch_warnings(&probe, t_rep, &run.lockin);
    Ok(AomMaps {
        t1: run.delays.t1.clone(),
        t2: run.delays.t2,
        t3: run.delays.t3.clone(),
        plus: results.iter().map(|g| g.plus).collect(),
        minus: results.iter().map(|g| g.minus).collect(),
        warnings,
        table_hash: diagram_table_hash(&pathways),
    })
}

/// Least-squares single-frequency fit of a complex oscillation `z_k ~
/// exp(-i w k dt)`: the amplitude-weighted mean phase advance per step.
pub fn fit_oscillation_frequency(values: &[Complex64], dt: f64) -> Option<f64> {
    if values.len() < 2 || !(dt > 0.0) {
        return None;
    }
    let mut acc = Complex64::ZERO;
    for pair in values.windows(2) {
        acc += pair[1] * pair[0].conj();
    }
    if acc.norm() == 0.0 {
        return None;
    }
    Some(-acc.arg() / dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comb::PulseEnvelope;
    use crate::oracle::{free_evolve, rwa_kick};
    use std::f64::consts::PI;

    fn two_level() -> LevelSystem {
        LevelSystem::two_level(50.0, 0.4, 1.0).unwrap()
    }

    fn ladder() -> LevelSystem {
        LevelSystem::ladder(50.0, 96.0, 0.4, 1.0, 0.8).unwrap()
    }

    fn trains(phis_hz: [f64; 4]) -> [AomPulseTrainSpec; 4] {
        phis_hz.map(|f| AomPulseTrainSpec {
            delay: 0.0,
            rep_period: 1.25e-6,
            aom_freq: 2.0 * PI * f,
            carrier: 50.0,
            envelope: PulseEnvelope::Impulsive { amplitude: 1.0 },
            pulse_count: 1,
        })
    }

    const PHIS_HZ: [f64; 4] = [1.0e3, 6.0e3, 2.0e3, 10.0e3]; // phi21 = 5 kHz, phi43 = 8 kHz

    #[test]
    fn two_level_catalog_has_no_double_manifold_diagrams() {
        let paths = enumerate_pathways(&two_level(), Detection::Fluorescence);
        assert_eq!(paths.len(), 4);
        assert!(paths.iter().all(|p| !p.uses_double_manifold));
        let ladder_paths = enumerate_pathways(&ladder(), Detection::Fluorescence);
        // ids 1..8 plus the dq-ese and the two esa-return families
        assert_eq!(ladder_paths.len(), 11);
        let mut ids: Vec<usize> = ladder_paths.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn exactly_two_diagrams_carry_the_sum_modulation_for_two_levels() {
        let paths = enumerate_pathways(&two_level(), Detection::Fluorescence);
        let phis = [1.0, 2.0, 4.0, 8.0];
        let target = -phis[0] + phis[1] - phis[2] + phis[3];
        let hits: Vec<&PathwaySignature> = paths
            .iter()
            .filter(|p| (p.net_modulation(&phis) - target).abs() < 1e-12)
            .collect();
        assert_eq!(hits.len(), 2);
        let mut ids: Vec<usize> = hits.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![1, 4]);
    }

    #[test]
    fn arrow_flip_conjugates_the_signature() {
        for p in enumerate_pathways(&ladder(), Detection::Fluorescence) {
            let c = p.conjugate();
            for k in 0..4 {
                assert_eq!(c.signs[k], -p.signs[k]);
            }
            let phis = [0.3, 0.7, 1.1, 1.9];
            assert!((c.net_modulation(&phis) + p.net_modulation(&phis)).abs() < 1e-15);
        }
    }

    #[test]
    fn signature_arithmetic_recomputes_from_arrows() {
        let phis = [0.2, 0.9, 1.4, 2.3];
        for p in enumerate_pathways(&ladder(), Detection::Fluorescence) {
            let manual: f64 = p
                .interactions
                .iter()
                .zip(phis.iter())
                .map(|(it, &phi)| it.sign() as f64 * phi)
                .sum();
            assert_eq!(manual, p.net_modulation(&phis));
        }
    }

    #[test]
    fn heterodyne_catalogs_are_metadata_only_and_partition_by_technique() {
        let sys = ladder();
        let ki = enumerate_pathways(&sys, Detection::HeterodyneKI);
        let kii = enumerate_pathways(&sys, Detection::HeterodyneKII);
        let kiii = enumerate_pathways(&sys, Detection::HeterodyneKIII);
        assert_eq!(ki.len(), 3);
        assert_eq!(kii.len(), 3);
        assert_eq!(kiii.len(), 2);
        // rephasing set carries -phi1 + phi2 + phi3 - phi4 after conjugation
        for p in &ki {
            assert_eq!(p.signs[0], -1);
        }
    }

    #[test]
    fn zero_delay_response_is_the_dipole_product() {
        let sys = two_level();
        for p in enumerate_pathways(&sys, Detection::Fluorescence) {
            let r = impulsive_response(&sys, &p, 0.0, 0.0, 0.0).unwrap();
            assert!((r.norm() - 1.0).abs() < 1e-14); // mu = 1 throughout
            assert!((r.re.abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn stimulated_emission_pathway_decays_only_during_coherence_intervals() {
        let sys = two_level();
        let paths = enumerate_pathways(&sys, Detection::Fluorescence);
        let ese = paths.iter().find(|p| p.id == 1).unwrap();
        let r0 = impulsive_response(&sys, ese, 0.0, 0.0, 0.0).unwrap();
        let r = impulsive_response(&sys, ese, 1.5, 0.0, 0.5).unwrap();
        let expected = (0.4f64 * 2.0).exp().recip();
        assert!((r.norm() / r0.norm() - expected).abs() < 1e-12);
        // population interval is free of decay at zero population rate
        let r_t2 = impulsive_response(&sys, ese, 1.5, 7.0, 0.5).unwrap();
        assert!((r_t2.norm() - r.norm()).abs() < 1e-14);
    }

    #[test]
    fn conjugate_pair_sums_to_a_real_record_sample() {
        let sys = two_level();
        let p = &enumerate_pathways(&sys, Detection::Fluorescence)[0];
        let c = p.conjugate();
        let r = impulsive_response(&sys, p, 0.9, 0.1, 0.3).unwrap();
        let rc = impulsive_response(&sys, &c, 0.9, 0.1, 0.3).unwrap();
        assert!((rc - r.conj()).norm() < 1e-14);
        assert!(((r + rc).im).abs() < 1e-14);
    }

    #[test]
    fn unmodulated_trains_give_a_static_record() {
        let sys = two_level();
        let tr = trains([0.0, 0.0, 0.0, 0.0]);
        let record = shot_sequence(&sys, &tr, 0.4, 0.0, 0.2, 64).unwrap();
        for s in &record {
            assert!((s - record[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn record_beats_only_at_the_two_group_frequencies() {
        let sys = two_level();
        let tr = trains(PHIS_HZ);
        let shots = periodic_shot_count(&sys, &tr, 1_000_000).unwrap();
        assert_eq!(shots, 800); // 1 kHz base grid at 1.25 us per shot
        let record = shot_sequence(&sys, &tr, 0.3, 0.0, 0.1, shots).unwrap();
        // DFT of the periodic record: content only at +-13 kHz and +-3 kHz
        let n = record.len();
        let mut hot = Vec::new();
        for k in 1..n / 2 {
            let mut acc = Complex64::ZERO;
            for (m, &s) in record.iter().enumerate() {
                acc += s * Complex64::from_polar(1.0, -2.0 * PI * (k * m) as f64 / n as f64);
            }
            if acc.norm() / n as f64 > 1e-9 {
                let f_hz = k as f64 / (n as f64 * 1.25e-6);
                hot.push(f_hz.round() as i64);
            }
        }
        hot.sort_unstable();
        assert_eq!(hot, vec![3000, 13000]);
    }

    #[test]
    fn forced_single_pathway_is_a_pure_tone() {
        let sys = two_level();
        let tr = trains(PHIS_HZ);
        let paths = enumerate_pathways(&sys, Detection::Fluorescence);
        let p = paths.iter().find(|p| p.id == 2).unwrap();
        let freqs = [tr[0].aom_freq, tr[1].aom_freq, tr[2].aom_freq, tr[3].aom_freq];
        let f = p.net_modulation(&freqs);
        let amp = impulsive_response(&sys, p, 0.2, 0.0, 0.1).unwrap();
        let t_rep = 1.25e-6;
        for m in [0usize, 13, 77, 400] {
            let sample = 2.0 * (amp * Complex64::from_polar(1.0, f * t_rep * m as f64)).re;
            let expected = 2.0 * amp.norm() * (f * t_rep * m as f64 + amp.arg()).cos();
            assert!((sample - expected).abs() < 1e-12);
        }
        assert!((f.abs() / (2.0 * PI) - 3000.0).abs() < 1e-6);
    }

    #[test]
    fn shot_nyquist_violations_are_rejected() {
        let sys = two_level();
        let tr = trains([0.0, 0.0, 0.0, 500_000.0]);
        let err = shot_sequence(&sys, &tr, 0.1, 0.0, 0.1, 16).unwrap_err();
        assert!(matches!(err, Error::ShotNyquist { .. }));
    }

    #[test]
    fn fourth_order_kick_propagation_reproduces_the_catalog() {
        // Independent route: exact impulsive kicks with finite strength,
        // mixed fourth derivative extracted by sign flips plus Richardson in
        // the kick area. Checked per final state against the catalog sum.
        let sys = LevelSystem::ladder(50.0, 96.0, 0.4, 1.0, 0.8).unwrap();
        let phases = [0.3, 1.1, -0.7, 0.4];
        let (t1, t2, t3) = (0.08, 0.05, 0.11);
        let populations = |theta: f64, signs: [f64; 4]| -> Vec<f64> {
            let n = sys.len();
            let mut rho = vec![Complex64::ZERO; n * n];
            rho[sys.ground() * n + sys.ground()] = Complex64::new(1.0, 0.0);
            for (j, &dt) in [t1, t2, t3, 0.0].iter().enumerate() {
                rho = rwa_kick(&sys, &rho, signs[j] * theta, phases[j]);
                if dt > 0.0 {
                    rho = free_evolve(&sys, &rho, dt);
                }
            }
            (0..n).map(|a| rho[a * n + a].re).collect()
        };
        let mixed_derivative = |theta: f64| -> Vec<f64> {
            let n = sys.len();
            let mut acc = vec![0.0; n];
            for mask in 0..16u32 {
                let signs = [
                    if mask & 1 == 0 { 1.0 } else { -1.0 },
                    if mask & 2 == 0 { 1.0 } else { -1.0 },
                    if mask & 4 == 0 { 1.0 } else { -1.0 },
                    if mask & 8 == 0 { 1.0 } else { -1.0 },
                ];
                let parity = signs.iter().product::<f64>();
                let pops = populations(theta, signs);
                for (a, p) in pops.iter().enumerate() {
                    acc[a] += parity * p;
                }
            }
            let scale = (2.0 * theta).powi(4);
            acc.iter().map(|x| x / scale).collect()
        };
        let theta = 1.2e-2;
        let coarse = mixed_derivative(2.0 * theta);
        let fine = mixed_derivative(theta);
        // the sign-flip difference has even error terms; one Richardson step
        // removes the theta^2 piece
        let extrapolated: Vec<f64> = fine
            .iter()
            .zip(coarse.iter())
            .map(|(f, c)| (4.0 * f - c) / 3.0)
            .collect();

        let paths = enumerate_pathways(&sys, Detection::Fluorescence);
        let mut catalog = vec![0.0; sys.len()];
        for p in &paths {
            let r = impulsive_response(&sys, p, t3, t2, t1).unwrap();
            let phase: f64 = p
                .signs
                .iter()
                .zip(phases.iter())
                .map(|(&s, &ph)| s as f64 * ph)
                .sum();
            catalog[p.final_state] += 2.0 * (r * Complex64::from_polar(1.0, phase)).re;
        }
        let scale = catalog.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        for a in 0..sys.len() {
            if a == sys.ground() {
                continue;
            }
            assert!(
                (extrapolated[a] - catalog[a]).abs() <= 1e-6 * scale,
                "state {a}: kicks {:.9e} vs catalog {:.9e}",
                extrapolated[a],
                catalog[a]
            );
        }
    }

    #[test]
    fn lockin_channels_separate_the_pathway_groups() {
        let sys = two_level();
        let tr = trains(PHIS_HZ);
        let shots = periodic_shot_count(&sys, &tr, 1_000_000).unwrap();
        let cfg = LockInConfig {
            phi21: 2.0 * PI * 5.0e3,
            phi43: 2.0 * PI * 8.0e3,
            omega21: 0.0,
            omega43: 0.0,
            theta: 0.0,
            tau: 0.2,
        };
        let tiles = 1200; // 1.2 s window
        let (t1, t2, t3) = (0.05, 0.0, 0.12);
        let record = shot_sequence(&sys, &tr, t3, t2, t1, shots).unwrap();
        let groups = extract_pathway_groups(&record, 1.25e-6, t3, t1, &cfg, tiles).unwrap();

        // analytic expectation: the demodulated complex amplitude equals the
        // group pathway sum, attenuated by the finite exponential window
        let paths = enumerate_pathways(&sys, Detection::Fluorescence);
        let freqs = [tr[0].aom_freq, tr[1].aom_freq, tr[2].aom_freq, tr[3].aom_freq];
        let group_sum = |target: f64| -> Complex64 {
            let mut acc = Complex64::ZERO;
            for p in &paths {
                let f = p.net_modulation(&freqs);
                let r = impulsive_response(&sys, p, t3, t2, t1).unwrap();
                if (f - target).abs() < 1.0 {
                    acc += r;
                } else if (f + target).abs() < 1.0 {
                    acc += r.conj();
                }
            }
            acc
        };
        let plus_expected = group_sum(2.0 * PI * 13.0e3);
        let minus_expected = group_sum(2.0 * PI * 3.0e3);
        let window = tiles as f64 * shots as f64 * 1.25e-6;
        let attenuation = 1.0 - (-window / cfg.tau).exp();
        let check = |got: Complex64, expected: Complex64| {
            let rel = (got - attenuation * expected).norm() / expected.norm();
            assert!(rel < 1e-3, "group mismatch: {got} vs {expected}, rel {rel:.3e}");
        };
        check(groups.plus, plus_expected);
        check(groups.minus, minus_expected);

        // cross-talk: a record with only the plus group leaks under 1% into minus
        let mut plus_only = vec![0.0; shots];
        for p in paths
            .iter()
            .filter(|p| (p.net_modulation(&freqs).abs() - 2.0 * PI * 13.0e3).abs() < 1.0)
        {
            // representative sign is irrelevant: 2 Re covers both rotations

            let amp = impulsive_response(&sys, p, t3, t2, t1).unwrap();
            let f = p.net_modulation(&freqs);
            for (m, s) in plus_only.iter_mut().enumerate() {
                *s += 2.0 * (amp * Complex64::from_polar(1.0, f * 1.25e-6 * m as f64)).re;
            }
        }
        let leak = extract_pathway_groups(&plus_only, 1.25e-6, t3, t1, &cfg, tiles).unwrap();
        assert!(leak.minus.norm() < 0.01 * leak.plus.norm());
    }

    #[test]
    fn zero_record_demodulates_to_zero() {
        let cfg = LockInConfig {
            phi21: 2.0 * PI * 5.0e3,
            phi43: 2.0 * PI * 8.0e3,
            omega21: 0.0,
            omega43: 0.0,
            theta: 0.0,
            tau: 0.2,
        };
        let record = vec![0.0; 800];
        let g = extract_pathway_groups(&record, 1.25e-6, 0.0, 0.0, &cfg, 1200).unwrap();
        assert_eq!(g.plus, Complex64::ZERO);
        assert_eq!(g.minus, Complex64::ZERO);
    }

    #[test]
    fn mismatched_references_are_flagged() {
        let sys = two_level();
        let tr = trains(PHIS_HZ);
        let record = shot_sequence(&sys, &tr, 0.3, 0.0, 0.1, 800).unwrap();
        let good = LockInConfig {
            phi21: 2.0 * PI * 5.0e3,
            phi43: 2.0 * PI * 8.0e3,
            omega21: 0.0,
            omega43: 0.0,
            theta: 0.0,
            tau: 0.2,
        };
        assert!(reference_mismatch_warnings(&record, 1.25e-6, &good).is_empty());
        let bad = LockInConfig {
            phi21: 2.0 * PI * 1.0e3,
            ..good
        };
        let warnings = reference_mismatch_warnings(&record, 1.25e-6, &bad);
        assert!(!warnings.is_empty());
    }
}
