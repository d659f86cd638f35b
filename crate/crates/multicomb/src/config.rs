//! Config ingestion, experiment orchestration and artifact export.
//!
//! Experiments are described by a sectioned TOML file; validation walks the
//! whole document and reports every violation (unknown keys included) rather
//! than stopping at the first. Outputs are deterministic: byte-identical
//! CSV/JSON for identical configs, floats at full round-trip precision, and
//! a manifest recording the verbatim config, its hash, and every tolerance
//! the run used.

use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aom::{
    diagram_table_hash, enumerate_pathways, fit_oscillation_frequency, periodic_shot_count,
    run_fluorescence_map, AomRun, DelayGrid, Detection,
};
use crate::comb::{comb_from_frequencies, AomPulseTrainSpec, CombSpec, FrequencyGrid, GaussianEnvelope, PulseEnvelope};
use crate::error::{Error, Result};
use crate::inversion::{build_folding_system, invert_linear, solve_folding, SolvePolicy};
use crate::lockin::LockInConfig;
use crate::material::{LevelSystem, Projection};
use crate::oracle::{integrate_samples, population_flux_check, propagate, OracleField, PropagationRun};
use crate::signals::{
    dual_comb_third_order, linear_signal_freq, linear_signal_time, quad_comb_signal,
    SpikeSelection, TimeGrid,
};
use crate::spectrum::{max_relative_deviation, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExperimentKind {
    DualLinear,
    QuadThird,
    DualThird,
    AomFluorescence,
    OracleCheck,
}

#[derive(Debug, Clone)]
pub struct AomSection {
    pub rep_period: f64,
    pub carrier: f64,
    pub aom_freqs: [f64; 4],
    /// 0 requests the automatic periodic shot count.
    pub shots: usize,
    /// 0 derives the tile count from the lock-in window requirement.
    pub tiles: usize,
}

#[derive(Debug, Clone)]
pub struct OracleSection {
    pub amplitude: f64,
    pub sigma_t: f64,
    pub carrier: f64,
    pub rep_period: f64,
    pub pulses: usize,
    pub dt: f64,
    pub store_every: usize,
    pub tail: f64,
}

/// Fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub grid_step: f64,
    pub system: LevelSystem,
    pub combs: Vec<CombSpec>,
    pub detect: Option<usize>,
    pub budget: Option<i64>,
    pub projection: Projection,
    pub lowpass_cutoff: Option<f64>,
    pub time_domain: bool,
    pub invert: bool,
    pub second_offsets: Option<Vec<i64>>,
    pub lambda: f64,
    pub lockin: Option<LockInConfig>,
    pub aom: Option<AomSection>,
    pub delays: Option<DelayGrid>,
    pub oracle: Option<OracleSection>,
    pub out_dir: PathBuf,
    pub raw_text: String,
    pub warnings: Vec<String>,
}

struct Walker<'a> {
    issues: &'a mut Vec<String>,
}

impl<'a> Walker<'a> {
    fn table<'v>(
        &mut self,
        value: &'v toml::Value,
        path: &str,
        allowed: &[&str],
    ) -> Option<&'v toml::map::Map<String, toml::Value>> {
        match value.as_table() {
            Some(t) => {
                for key in t.keys() {
                    if !allowed.contains(&key.as_str()) {
                        self.issues.push(format!("{path}: unknown key `{key}`"));
                    }
                }
                Some(t)
            }
            None => {
                self.issues.push(format!("{path}: expected a table"));
                None
            }
        }
    }

    fn float(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<f64> {
        match t.get(key) {
            None => None,
            Some(v) => match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
                Some(f) if f.is_finite() => Some(f),
                _ => {
                    self.issues.push(format!("{path}.{key}: expected a finite number"));
                    None
                }
            },
        }
    }

    fn require_float(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<f64> {
        let v = self.float(t, path, key);
        if v.is_none() && !t.contains_key(key) {
            self.issues.push(format!("{path}.{key}: missing required key"));
        }
        v
    }

    fn integer(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<i64> {
        match t.get(key) {
            None => None,
            Some(v) => match v.as_integer() {
                Some(i) => Some(i),
                None => {
                    self.issues.push(format!("{path}.{key}: expected an integer"));
                    None
                }
            },
        }
    }

    fn boolean(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<bool> {
        match t.get(key) {
            None => None,
            Some(v) => match v.as_bool() {
                Some(b) => Some(b),
                None => {
                    self.issues.push(format!("{path}.{key}: expected a boolean"));
                    None
                }
            },
        }
    }

    fn string(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<String> {
        match t.get(key) {
            None => None,
            Some(v) => match v.as_str() {
                Some(s) => Some(s.to_string()),
                None => {
                    self.issues.push(format!("{path}.{key}: expected a string"));
                    None
                }
            },
        }
    }

    fn float_array(&mut self, t: &toml::map::Map<String, toml::Value>, path: &str, key: &str) -> Option<Vec<f64>> {
        let v = t.get(key)?;
        let arr = match v.as_array() {
            Some(a) => a,
            None => {
                self.issues.push(format!("{path}.{key}: expected an array"));
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for (i, item) in arr.iter().enumerate() {
            match item.as_float().or_else(|| item.as_integer().map(|x| x as f64)) {
                Some(f) if f.is_finite() => out.push(f),
                _ => {
                    self.issues.push(format!("{path}.{key}[{i}]: expected a finite number"));
                    return None;
                }
            }
        }
        Some(out)
    }
}

fn parse_matrix_entries(
    w: &mut Walker,
    t: &toml::map::Map<String, toml::Value>,
    path: &str,
    key: &str,
    n: usize,
) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    let Some(v) = t.get(key) else {
        return out;
    };
    let Some(arr) = v.as_array() else {
        w.issues.push(format!("{path}.{key}: expected an array of [i, j, value] triples"));
        return out;
    };
    for (k, item) in arr.iter().enumerate() {
        let entry = item.as_array().filter(|a| a.len() == 3);
        let Some(entry) = entry else {
            w.issues.push(format!("{path}.{key}[{k}]: expected [i, j, value]"));
            continue;
        };
        let i = entry[0].as_integer();
        let j = entry[1].as_integer();
        let value = entry[2]
            .as_float()
            .or_else(|| entry[2].as_integer().map(|x| x as f64));
        match (i, j, value) {
            (Some(i), Some(j), Some(value))
                if i >= 0 && j >= 0 && (i as usize) < n && (j as usize) < n =>
            {
                out.push((i as usize, j as usize, value));
            }
            _ => w.issues.push(format!(
                "{path}.{key}[{k}]: indices must address the {n} declared levels"
            )),
        }
    }
    out
}

/// Parse and validate a config document, returning either the full config or
/// the complete list of violations.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let mut issues = Vec::new();
    let doc: toml::Value = match toml::from_str(text) {
        Ok(v) => v,
        Err(e) => return Err(vec![format!("toml syntax: {e}")]),
    };
    let mut w = Walker { issues: &mut issues };
    let root = w.table(
        &doc,
        "root",
        &[
            "experiment", "grid", "system", "comb", "lockin", "aom", "delays", "oracle", "output",
        ],
    );
    let Some(root) = root else {
        return Err(issues);
    };
    let root = root.clone();

    // [experiment]
    let mut kind = None;
    let mut detect = None;
    let mut budget = None;
    let mut projection = Projection::Full;
    let mut lowpass_cutoff = None;
    let mut time_domain = false;
    let mut invert = false;
    let mut second_offsets = None;
    let mut lambda = 0.0;
    match root.get("experiment") {
        None => issues.push("experiment: missing section".into()),
        Some(v) => {
            let mut w = Walker { issues: &mut issues };
            if let Some(t) = w.table(
                v,
                "experiment",
                &[
                    "kind",
                    "detect",
                    "budget",
                    "projection",
                    "lowpass_cutoff",
                    "time_domain",
                    "invert",
                    "second_offsets",
                    "lambda",
                ],
            ) {
                match w.string(t, "experiment", "kind").as_deref() {
                    Some("dual_linear") => kind = Some(ExperimentKind::DualLinear),
                    Some("quad_third") => kind = Some(ExperimentKind::QuadThird),
                    Some("dual_third") => kind = Some(ExperimentKind::DualThird),
                    Some("aom_fluorescence") => kind = Some(ExperimentKind::AomFluorescence),
                    Some("oracle_check") => kind = Some(ExperimentKind::OracleCheck),
                    Some(other) => w.issues.push(format!("experiment.kind: unknown kind `{other}`")),
                    None => w.issues.push("experiment.kind: missing required key".into()),
                }
                detect = w.integer(t, "experiment", "detect").map(|i| i as usize);
                budget = w.integer(t, "experiment", "budget");
                if let Some(b) = budget {
                    if b < 0 {
                        w.issues.push("experiment.budget: must be nonnegative".into());
                    }
                }
                if let Some(p) = w.string(t, "experiment", "projection") {
                    projection = match p.as_str() {
                        "full" => Projection::Full,
                        "ground" => Projection::Ground,
                        "emitting" => Projection::Emitting,
                        other => match other.strip_prefix("excited:").and_then(|s| s.parse().ok()) {
                            Some(i) => Projection::Excited(i),
                            None => {
                                w.issues.push(format!(
                                    "experiment.projection: `{other}` is not full/ground/emitting/excited:N"
                                ));
                                Projection::Full
                            }
                        },
                    };
                }
                lowpass_cutoff = w.float(t, "experiment", "lowpass_cutoff");
                time_domain = w.boolean(t, "experiment", "time_domain").unwrap_or(false);
                invert = w.boolean(t, "experiment", "invert").unwrap_or(false);
                if let Some(arr) = w.float_array(t, "experiment", "second_offsets") {
                    second_offsets = Some(arr.iter().map(|&f| f as i64).collect::<Vec<i64>>());
                }
                lambda = w.float(t, "experiment", "lambda").unwrap_or(0.0);
                if lambda < 0.0 {
                    w.issues.push("experiment.lambda: must be nonnegative".into());
                }
            }
        }
    }

    // [grid]
    let mut grid_step = None;
    if let Some(v) = root.get("grid") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(v, "grid", &["step"]) {
            grid_step = w.require_float(t, "grid", "step");
            if let Some(s) = grid_step {
                if !(s > 0.0) {
                    w.issues.push("grid.step: must be positive".into());
                }
            }
        }
    }

    // [system]
    let mut system = None;
    match root.get("system") {
        None => issues.push("system: missing section".into()),
        Some(v) => {
            let mut w = Walker { issues: &mut issues };
            if let Some(t) = w.table(
                v,
                "system",
                &["energies", "dipoles", "gamma_default", "gammas", "pop_decay", "emitting"],
            ) {
                let energies = w.float_array(t, "system", "energies").unwrap_or_default();
                if energies.len() < 2 {
                    w.issues.push("system.energies: need at least two levels".into());
                } else {
                    let n = energies.len();
                    let dipole_entries = parse_matrix_entries(&mut w, t, "system", "dipoles", n);
                    if dipole_entries.is_empty() {
                        w.issues.push("system.dipoles: at least one entry required".into());
                    }
                    let gamma_default = w.float(t, "system", "gamma_default").unwrap_or(1.0);
                    let gamma_entries = parse_matrix_entries(&mut w, t, "system", "gammas", n);
                    let pop_decay = w
                        .float_array(t, "system", "pop_decay")
                        .unwrap_or_else(|| vec![0.0; n]);
                    let emitting = w.float_array(t, "system", "emitting").map(|v| {
                        v.iter().map(|&f| f as usize).collect::<std::collections::BTreeSet<_>>()
                    });
                    let mut dipole = vec![0.0; n * n];
                    for &(i, j, value) in &dipole_entries {
                        dipole[i * n + j] = value;
                        dipole[j * n + i] = value;
                    }
                    let mut gammas = vec![0.0; n * n];
                    for a in 0..n {
                        for b in 0..n {
                            if a != b {
                                gammas[a * n + b] = gamma_default;
                            }
                        }
                    }
                    for &(i, j, value) in &gamma_entries {
                        gammas[i * n + j] = value;
                        gammas[j * n + i] = value;
                    }
                    if pop_decay.len() != n {
                        w.issues.push(format!(
                            "system.pop_decay: expected {n} entries, got {}",
                            pop_decay.len()
                        ));
                    } else {
                        match LevelSystem::new(energies, dipole, gammas, pop_decay, emitting) {
                            Ok(sys) => system = Some(sys),
                            Err(e) => w.issues.push(format!("system: {e}")),
                        }
                    }
                }
            }
        }
    }

    // [comb.N]
    let mut combs = Vec::new();
    let mut comb_warnings = Vec::new();
    if let Some(v) = root.get("comb") {
        match v.as_table() {
            None => issues.push("comb: expected numbered sub-tables like [comb.1]".into()),
            Some(t) => {
                let mut ids: Vec<(usize, &toml::Value)> = Vec::new();
                for (key, sub) in t {
                    match key.parse::<usize>() {
                        Ok(i) if i >= 1 => ids.push((i, sub)),
                        _ => issues.push(format!("comb.{key}: comb sections must be numbered from 1")),
                    }
                }
                ids.sort_by_key(|&(i, _)| i);
                for (pos, &(id, sub)) in ids.iter().enumerate() {
                    if id != pos + 1 {
                        issues.push(format!("comb.{id}: comb numbers must be contiguous from 1"));
                    }
                    let mut w = Walker { issues: &mut issues };
                    let path = format!("comb.{id}");
                    if let Some(t) = w.table(
                        sub,
                        &path,
                        &[
                            "rep_multiple",
                            "offset_multiple",
                            "rep_spacing",
                            "offset",
                            "ce_multiple",
                            "carrier",
                            "sigma",
                            "amplitude",
                            "phase",
                            "tooth_floor",
                        ],
                    ) {
                        let carrier = w.require_float(t, &path, "carrier").unwrap_or(0.0);
                        let sigma = w.require_float(t, &path, "sigma").unwrap_or(1.0);
                        let amplitude = w.float(t, &path, "amplitude").unwrap_or(1.0);
                        let tooth_floor = w.float(t, &path, "tooth_floor").unwrap_or(1e-8);
                        let phase = w.float(t, &path, "phase").unwrap_or(0.0);
                        let ce = w.integer(t, &path, "ce_multiple").unwrap_or(0);
                        let step = grid_step.unwrap_or(1.0);
                        let envelope = match GaussianEnvelope::new(amplitude, sigma) {
                            Ok(e) => e,
                            Err(e) => {
                                w.issues.push(format!("{path}: {e}"));
                                continue;
                            }
                        };
                        let grid = match FrequencyGrid::new(step) {
                            Ok(g) => g,
                            Err(_) => continue,
                        };
                        let built = match (
                            w.integer(t, &path, "rep_multiple"),
                            w.float(t, &path, "rep_spacing"),
                        ) {
                            (Some(rep), None) => {
                                let offset = w.integer(t, &path, "offset_multiple").unwrap_or(0);
                                CombSpec::new(grid, rep, offset, carrier, envelope, tooth_floor)
                            }
                            (None, Some(spacing)) => {
                                let offset = w.float(t, &path, "offset").unwrap_or(0.0);
                                comb_from_frequencies(
                                    grid,
                                    id,
                                    spacing,
                                    offset,
                                    carrier,
                                    envelope,
                                    tooth_floor,
                                )
                            }
                            (Some(_), Some(_)) => {
                                w.issues.push(format!(
                                    "{path}: give either rep_multiple or rep_spacing, not both"
                                ));
                                continue;
                            }
                            (None, None) => {
                                w.issues.push(format!(
                                    "{path}: one of rep_multiple or rep_spacing is required"
                                ));
                                continue;
                            }
                        };
                        match built {
                            Ok(comb) => {
                                let comb = match comb.with_ce_multiple(ce) {
                                    Ok(c) => c.with_phase(phase),
                                    Err(e) => {
                                        w.issues.push(format!("{path}: {e}"));
                                        continue;
                                    }
                                };
                                for warning in comb.warnings() {
                                    comb_warnings.push(format!("{path}: {warning}"));
                                }
                                combs.push(comb);
                            }
                            Err(e) => w.issues.push(format!("{path}: {e}")),
                        }
                    }
                }
            }
        }
    }

    // [lockin]
    let mut lockin = None;
    if let Some(v) = root.get("lockin") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(v, "lockin", &["phi21", "phi43", "omega21", "omega43", "theta", "tau"]) {
            let cfg = LockInConfig {
                phi21: w.require_float(t, "lockin", "phi21").unwrap_or(0.0),
                phi43: w.require_float(t, "lockin", "phi43").unwrap_or(0.0),
                omega21: w.float(t, "lockin", "omega21").unwrap_or(0.0),
                omega43: w.float(t, "lockin", "omega43").unwrap_or(0.0),
                theta: w.float(t, "lockin", "theta").unwrap_or(0.0),
                tau: w.float(t, "lockin", "tau").unwrap_or(0.2),
            };
            match cfg.validate() {
                Ok(()) => {
                    comb_warnings.extend(cfg.warnings().into_iter().map(|s| format!("lockin: {s}")));
                    lockin = Some(cfg);
                }
                Err(e) => w.issues.push(format!("lockin: {e}")),
            }
        }
    }

    // [aom]
    let mut aom = None;
    if let Some(v) = root.get("aom") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(v, "aom", &["rep_period", "carrier", "aom_freqs", "shots", "tiles"]) {
            let rep_period = w.require_float(t, "aom", "rep_period").unwrap_or(1.0);
            let carrier = w.float(t, "aom", "carrier").unwrap_or(0.0);
            let freqs = w.float_array(t, "aom", "aom_freqs").unwrap_or_default();
            if freqs.len() != 4 {
                w.issues.push(format!("aom.aom_freqs: expected 4 entries, got {}", freqs.len()));
            } else {
                aom = Some(AomSection {
                    rep_period,
                    carrier,
                    aom_freqs: [freqs[0], freqs[1], freqs[2], freqs[3]],
                    shots: w.integer(t, "aom", "shots").unwrap_or(0).max(0) as usize,
                    tiles: w.integer(t, "aom", "tiles").unwrap_or(0).max(0) as usize,
                });
            }
        }
    }

    // [delays]
    let mut delays = None;
    if let Some(v) = root.get("delays") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(v, "delays", &["t1_max", "t1_steps", "t2", "t3_max", "t3_steps"]) {
            let t1_max = w.require_float(t, "delays", "t1_max").unwrap_or(1.0);
            let t3_max = w.require_float(t, "delays", "t3_max").unwrap_or(1.0);
            let n1 = w.integer(t, "delays", "t1_steps").unwrap_or(64).max(2) as usize;
            let n3 = w.integer(t, "delays", "t3_steps").unwrap_or(64).max(2) as usize;
            let t2 = w.float(t, "delays", "t2").unwrap_or(0.0);
            match DelayGrid::scan(t1_max, n1, t2, t3_max, n3) {
                Ok(g) => delays = Some(g),
                Err(e) => w.issues.push(format!("delays: {e}")),
            }
        }
    }

    // [oracle]
    let mut oracle = None;
    if let Some(v) = root.get("oracle") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(
            v,
            "oracle",
            &["amplitude", "sigma_t", "carrier", "rep_period", "pulses", "dt", "store_every", "tail"],
        ) {
            oracle = Some(OracleSection {
                amplitude: w.require_float(t, "oracle", "amplitude").unwrap_or(0.0),
                sigma_t: w.require_float(t, "oracle", "sigma_t").unwrap_or(1.0),
                carrier: w.require_float(t, "oracle", "carrier").unwrap_or(1.0),
                rep_period: w.require_float(t, "oracle", "rep_period").unwrap_or(1.0),
                pulses: w.integer(t, "oracle", "pulses").unwrap_or(1).max(1) as usize,
                dt: w.require_float(t, "oracle", "dt").unwrap_or(1e-3),
                store_every: w.integer(t, "oracle", "store_every").unwrap_or(1).max(1) as usize,
                tail: w.float(t, "oracle", "tail").unwrap_or(0.0),
            });
        }
    }

    // [output]
    let mut out_dir = PathBuf::from("out");
    if let Some(v) = root.get("output") {
        let mut w = Walker { issues: &mut issues };
        if let Some(t) = w.table(v, "output", &["dir"]) {
            if let Some(d) = w.string(t, "output", "dir") {
                out_dir = PathBuf::from(d);
            }
        }
    }
    if let Ok(env_dir) = std::env::var("MULTICOMB_OUT_DIR") {
        out_dir = PathBuf::from(env_dir);
    }

    // kind-specific cross checks
    if let Some(kind) = kind {
        let need_combs = |issues: &mut Vec<String>, n: usize, combs: &[CombSpec], name: &str| {
            if combs.len() != n {
                issues.push(format!("{name} requires exactly {n} combs, got {}", combs.len()));
            }
        };
        match kind {
            ExperimentKind::DualLinear => {
                if grid_step.is_none() {
                    issues.push("grid: missing section".into());
                }
                need_combs(&mut issues, 2, &combs, "dual_linear");
            }
            ExperimentKind::QuadThird => {
                if grid_step.is_none() {
                    issues.push("grid: missing section".into());
                }
                need_combs(&mut issues, 4, &combs, "quad_third");
            }
            ExperimentKind::DualThird => {
                if grid_step.is_none() {
                    issues.push("grid: missing section".into());
                }
                need_combs(&mut issues, 2, &combs, "dual_third");
            }
            ExperimentKind::AomFluorescence => {
                if lockin.is_none() {
                    issues.push("lockin: section required for aom_fluorescence".into());
                }
                if aom.is_none() {
                    issues.push("aom: section required for aom_fluorescence".into());
                }
                if delays.is_none() {
                    issues.push("delays: section required for aom_fluorescence".into());
                }
            }
            ExperimentKind::OracleCheck => {
                if oracle.is_none() {
                    issues.push("oracle: section required for oracle_check".into());
                }
            }
        }
        if let Some(d) = detect {
            if !combs.is_empty() && d >= combs.len() {
                issues.push(format!("experiment.detect: comb index {d} out of range"));
            }
        }
        if let (Some(offsets), ExperimentKind::QuadThird) = (&second_offsets, kind) {
            if offsets.len() != 3 {
                issues.push("experiment.second_offsets: expected 3 offsets".into());
            }
        }
    }

    if !issues.is_empty() {
        return Err(issues);
    }
    Ok(ExperimentConfig {
        kind: kind.unwrap(),
        grid_step: grid_step.unwrap_or(1.0),
        system: system.unwrap(),
        combs,
        detect,
        budget,
        projection,
        lowpass_cutoff,
        time_domain,
        invert,
        second_offsets,
        lambda,
        lockin,
        aom,
        delays,
        oracle,
        out_dir,
        raw_text: text.to_string(),
        warnings: comb_warnings,
    })
}

/// Read and validate a config file.
pub fn validate_config(path: &Path) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    parse_config(&text)
}

fn format_complex_csv(header: &str, rows: &[(i64, f64, Complex64, usize)]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for &(index, x, value, terms) in rows {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{}",
            index, x, value.re, value.im, terms
        );
    }
    out
}

fn spectrum_csv(spectrum: &Spectrum) -> String {
    let rows: Vec<(i64, f64, Complex64, usize)> = spectrum
        .iter()
        .map(|(i, s)| (i, spectrum.frequency(i), s.amplitude, s.terms.len()))
        .collect();
    format_complex_csv("index,frequency,re,im,terms", &rows)
}

/// In-memory artifact bundle; files are written only after the whole run
/// succeeds.
#[derive(Debug, Default)]
pub struct ArtifactBundle {
    pub files: BTreeMap<String, String>,
    pub summary: serde_json::Value,
}

fn tolerances(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut t = serde_json::Map::new();
    for (i, comb) in cfg.combs.iter().enumerate() {
        t.insert(format!("comb_{}_tooth_floor", i + 1), json!(comb.tooth_floor));
    }
    if let Some(c) = cfg.lowpass_cutoff {
        t.insert("lowpass_cutoff".into(), json!(c));
    }
    if let Some(b) = cfg.budget {
        t.insert("tooth_index_budget".into(), json!(b));
    }
    if let Some(l) = &cfg.lockin {
        t.insert("lockin_tau".into(), json!(l.tau));
        t.insert("lockin_window_time_constants".into(), json!(5.0));
    }
    t.insert("solver_singular_value_cutoff".into(), json!(1e-10));
    t.insert("ridge_lambda".into(), json!(cfg.lambda));
    t.insert("trace_drift_abort".into(), json!(1e-8));
    json!(t)
}

fn manifest(cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
    let hash: String = Sha256::digest(cfg.raw_text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    json!({
        "tool": "multicomb",
        "version": env!("CARGO_PKG_VERSION"),
        "kind": cfg.kind,
        "config_sha256": hash,
        "config_text": cfg.raw_text,
        "warnings": cfg.warnings,
        "tolerances": tolerances(cfg),
        "results": extra,
    })
}

fn effective_cutoff(cfg: &ExperimentConfig) -> f64 {
    cfg.lowpass_cutoff.unwrap_or_else(|| {
        let min_spacing = cfg
            .combs
            .iter()
            .map(|c| c.spacing())
            .fold(f64::INFINITY, f64::min);
        0.499 * min_spacing
    })
}

/// Execute a validated experiment, returning the artifact bundle.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ArtifactBundle> {
    let mut bundle = ArtifactBundle::default();
    let results = match cfg.kind {
        ExperimentKind::DualLinear => run_dual_linear(cfg, &mut bundle)?,
        ExperimentKind::QuadThird => run_quad_third(cfg, &mut bundle)?,
        ExperimentKind::DualThird => run_dual_third(cfg, &mut bundle)?,
        ExperimentKind::AomFluorescence => run_aom(cfg, &mut bundle)?,
        ExperimentKind::OracleCheck => run_oracle(cfg, &mut bundle)?,
    };
    bundle.summary = manifest(cfg, results);
    bundle
        .files
        .insert("manifest.json".into(), serde_json::to_string_pretty(&bundle.summary)? + "\n");
    Ok(bundle)
}

fn run_dual_linear(cfg: &ExperimentConfig, bundle: &mut ArtifactBundle) -> Result<serde_json::Value> {
    let spectrum = linear_signal_freq(
        &cfg.combs,
        &cfg.system,
        cfg.detect,
        cfg.projection,
        SpikeSelection::BeatBand,
    )?;
    let filtered = spectrum.lowpass(effective_cutoff(cfg))?;
    bundle.files.insert("spikes.csv".into(), spectrum_csv(&filtered));
    bundle
        .files
        .insert("spectrum.json".into(), filtered.to_json()? + "\n");

    let mut results = serde_json::Map::new();
    results.insert("spike_count".into(), json!(filtered.spike_count()));

    if cfg.time_domain {
        let grid = TimeGrid::for_linear(&cfg.combs)?;
        let series = linear_signal_time(&cfg.combs, &cfg.system, cfg.detect, cfg.projection, &grid)?;
        let mut csv = String::new();
        series.write_csv(unsafe { csv.as_mut_vec() })?;
        bundle.files.insert("timeseries.csv".into(), csv);
        let band = (effective_cutoff(cfg) / cfg.grid_step).floor() as i64;
        let dft = series.dft_band(band);
        bundle.files.insert("time_spectrum.csv".into(), spectrum_csv(&dft.pruned(1e-14 * dft.norm_inf())));
        results.insert(
            "time_vs_frequency_deviation".into(),
            json!(max_relative_deviation(&dft, &filtered)),
        );
    }

    if cfg.invert {
        let inversion = invert_linear(&filtered, &cfg.combs)?;
        let rows: Vec<(i64, f64, Complex64, usize)> = inversion
            .samples
            .iter()
            .map(|s| (s.tooth, s.frequency, s.value, 1))
            .collect();
        bundle.files.insert(
            "chi1_recovered.csv".into(),
            format_complex_csv("tooth,frequency,re,im,constraints", &rows),
        );
        let skipped: Vec<_> = inversion
            .skipped
            .iter()
            .map(|s| json!({"tooth": s.tooth, "reason": s.reason}))
            .collect();
        results.insert("recovered_samples".into(), json!(inversion.samples.len()));
        results.insert("skipped_samples".into(), json!(skipped));
        results.insert(
            "weight_range".into(),
            json!([inversion.weight_range.0, inversion.weight_range.1]),
        );
    }
    Ok(json!(results))
}

fn quad_with_offsets(cfg: &ExperimentConfig, offsets: &[i64]) -> Result<(Vec<CombSpec>, Spectrum)> {
    let mut combs = cfg.combs.clone();
    for (comb, &k) in combs.iter_mut().skip(1).zip(offsets.iter()) {
        comb.offset_multiple = k;
        comb.validate()?;
    }
    let spectrum = quad_comb_signal(
        &combs,
        &cfg.system,
        cfg.budget,
        cfg.projection,
        SpikeSelection::BeatBand,
    )?;
    Ok((combs, spectrum))
}

fn run_quad_third(cfg: &ExperimentConfig, bundle: &mut ArtifactBundle) -> Result<serde_json::Value> {
    let spectrum = quad_comb_signal(
        &cfg.combs,
        &cfg.system,
        cfg.budget,
        cfg.projection,
        SpikeSelection::BeatBand,
    )?;
    bundle.files.insert("spikes.csv".into(), spectrum_csv(&spectrum));
    bundle.files.insert("spectrum.json".into(), spectrum.to_json()? + "\n");
    let mut results = serde_json::Map::new();
    results.insert("spike_count".into(), json!(spectrum.spike_count()));

    let mut spectra = vec![spectrum];
    if let Some(offsets) = &cfg.second_offsets {
        let (_, second) = quad_with_offsets(cfg, offsets)?;
        bundle
            .files
            .insert("spectrum_run2.json".into(), second.to_json()? + "\n");
        bundle.files.insert("spikes_run2.csv".into(), spectrum_csv(&second));
        spectra.push(second);
    }

    if cfg.invert {
        let system = build_folding_system(&spectra, cfg.lambda)?;
        let solution = solve_folding(&system, SolvePolicy::MinimumNorm)?;
        let rows: Vec<String> = system
            .keys
            .iter()
            .zip(solution.values.iter())
            .zip(solution.constrained.iter())
            .map(|((key, value), constrained)| {
                format!(
                    "{},{},{},{:.16e},{:.16e},{}",
                    key[0], key[1], key[2], value.re, value.im, constrained
                )
            })
            .collect();
        bundle.files.insert(
            "chi3_recovered.csv".into(),
            format!("g1,g2,g3,re,im,constrained\n{}\n", rows.join("\n")),
        );
        results.insert(
            "folding".into(),
            json!({
                "unknowns": system.keys.len(),
                "rows": system.rows.len(),
                "rank": solution.rank,
                "constrained": solution.constrained.iter().filter(|&&c| c).count(),
                "condition": solution.condition,
                "max_residual": solution.max_residual,
            }),
        );
    }
    Ok(json!(results))
}

fn run_dual_third(cfg: &ExperimentConfig, bundle: &mut ArtifactBundle) -> Result<serde_json::Value> {
    let spectrum = dual_comb_third_order(&cfg.combs, &cfg.system, cfg.budget, cfg.projection)?;
    bundle.files.insert("spikes.csv".into(), spectrum_csv(&spectrum));
    bundle.files.insert("spectrum.json".into(), spectrum.to_json()? + "\n");
    let system = build_folding_system(std::slice::from_ref(&spectrum), cfg.lambda)?;
    let solution = solve_folding(&system, SolvePolicy::MinimumNorm)?;
    Ok(json!({
        "spike_count": spectrum.spike_count(),
        "rank_report": {
            "unknowns": system.keys.len(),
            "rank": solution.rank,
            "constrained": solution.constrained.iter().filter(|&&c| c).count(),
            "underdetermined": solution.rank < system.keys.len(),
        }
    }))
}

fn run_aom(cfg: &ExperimentConfig, bundle: &mut ArtifactBundle) -> Result<serde_json::Value> {
    let aom = cfg.aom.as_ref().expect("validated");
    let lockin = cfg.lockin.as_ref().expect("validated");
    let delays = cfg.delays.as_ref().expect("validated");
    let trains: [AomPulseTrainSpec; 4] = aom.aom_freqs.map(|f| AomPulseTrainSpec {
        delay: 0.0,
        rep_period: aom.rep_period,
        aom_freq: f,
        carrier: aom.carrier,
        envelope: PulseEnvelope::Impulsive { amplitude: 1.0 },
        pulse_count: 1,
    });
    let base = periodic_shot_count(&cfg.system, &trains, 1_000_000)?;
    let shots = if aom.shots == 0 {
        base
    } else {
        aom.shots.div_ceil(base) * base
    };
    let tiles = if aom.tiles == 0 {
        ((5.0 * lockin.tau) / (shots as f64 * aom.rep_period)).ceil() as usize + 1
    } else {
        aom.tiles
    };
    let run = AomRun {
        system: &cfg.system,
        trains: &trains,
        delays,
        lockin: *lockin,
        shots,
        tiles,
    };
    let maps = run_fluorescence_map(&run)?;

    let mut write_map = |name: &str, data: &[Complex64]| {
        let mut out = String::from("t1,t3,re,im\n");
        for (i, &t1) in maps.t1.iter().enumerate() {
            for (j, &t3) in maps.t3.iter().enumerate() {
                let z = data[i * maps.t3.len() + j];
                let _ = writeln!(out, "{t1:.16e},{t3:.16e},{:.16e},{:.16e}", z.re, z.im);
            }
        }
        bundle.files.insert(name.into(), out);
    };
    write_map("map_plus.csv", &maps.plus);
    write_map("map_minus.csv", &maps.minus);

    // downshifted oscillation frequency along t3 at the first t1 row
    let first_row: Vec<Complex64> = maps.plus[..maps.t3.len()].to_vec();
    let dt3 = maps.t3[1] - maps.t3[0];
    let fitted = fit_oscillation_frequency(&first_row, dt3);
    let pathways = enumerate_pathways(&cfg.system, Detection::Fluorescence);
    Ok(json!({
        "shots_per_record": shots,
        "tiles": tiles,
        "window": shots as f64 * aom.rep_period * tiles as f64,
        "phi21": lockin.phi21,
        "phi43": lockin.phi43,
        "omega21": lockin.omega21,
        "omega43": lockin.omega43,
        "tau": lockin.tau,
        "pathway_count": pathways.len(),
        "diagram_table_hash": maps.table_hash,
        "fitted_t3_frequency": fitted,
        "map_warnings": maps.warnings,
    }))
}

fn run_oracle(cfg: &ExperimentConfig, bundle: &mut ArtifactBundle) -> Result<serde_json::Value> {
    let o = cfg.oracle.as_ref().expect("validated");
    let first_center = 4.0 * o.sigma_t;
    let span = first_center + (o.pulses.saturating_sub(1)) as f64 * o.rep_period + 4.0 * o.sigma_t + o.tail;
    let run = PropagationRun {
        system: &cfg.system,
        field: OracleField::PulseTrain {
            amplitude: o.amplitude,
            sigma_t: o.sigma_t,
            carrier: o.carrier,
            rep_period: o.rep_period,
            pulse_count: o.pulses,
            first_center,
            support_sigmas: 8.0,
        },
        t_start: 0.0,
        t_end: span,
        dt: o.dt,
        store_every: o.store_every,
    };
    let traj = propagate(&run)?;
    let mut csv = String::from("time,field,dipole,signal,emitting_population\n");
    for k in 0..traj.times.len() {
        let _ = writeln!(
            csv,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            traj.times[k], traj.field[k], traj.dipole[k], traj.signal[k], traj.emitting_population[k]
        );
    }
    bundle.files.insert("trajectories.csv".into(), csv);

    let flux = population_flux_check(&cfg.system, &traj);
    let absorbed = integrate_samples(&traj.signal, o.dt * o.store_every as f64);
    let delta_h0 = traj.h0_final - traj.h0_initial;
    Ok(json!({
        "trace_error": traj.trace_error,
        "hermiticity_error": traj.hermiticity_error,
        "population_excursion": traj.population_excursion,
        "energy_integral": absorbed,
        "energy_change": delta_h0,
        "energy_residual": (absorbed - delta_h0).abs(),
        "flux_residual_relative": flux.relative(),
        "flux_identity_modified": flux.identity_modified,
    }))
}

/// Write a bundle into a directory. The directory is probed for writability
/// first; on any failure nothing is left behind beyond what already existed.
pub fn write_bundle(bundle: &ArtifactBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"probe")?;
    std::fs::remove_file(&probe)?;
    let mut written = Vec::new();
    for (name, contents) in &bundle.files {
        let path = dir.join(name);
        std::fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}

/// Convenience wrapper: run an experiment and write its artifacts.
pub fn run_to_directory(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let bundle = run_experiment(cfg)?;
    let target = dir.unwrap_or(&cfg.out_dir);
    write_bundle(&bundle, target)
}

/// Re-run only the inversion stage against spectra stored by a prior run.
pub fn invert_from_directory(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let load = |name: &str| -> Result<Spectrum> {
        let text = std::fs::read_to_string(dir.join(name))?;
        Ok(serde_json::from_str(&text)?)
    };
    let mut bundle = ArtifactBundle::default();
    let results = match cfg.kind {
        ExperimentKind::DualLinear => {
            let spectrum = load("spectrum.json")?;
            let inversion = invert_linear(&spectrum, &cfg.combs)?;
            let rows: Vec<(i64, f64, Complex64, usize)> = inversion
                .samples
                .iter()
                .map(|s| (s.tooth, s.frequency, s.value, 1))
                .collect();
            bundle.files.insert(
                "chi1_recovered.csv".into(),
                format_complex_csv("tooth,frequency,re,im,constraints", &rows),
            );
            json!({"recovered_samples": inversion.samples.len()})
        }
        ExperimentKind::QuadThird | ExperimentKind::DualThird => {
            let mut spectra = vec![load("spectrum.json")?];
            if dir.join("spectrum_run2.json").exists() {
                spectra.push(load("spectrum_run2.json")?);
            }
            let system = build_folding_system(&spectra, cfg.lambda)?;
            let solution = solve_folding(&system, SolvePolicy::MinimumNorm)?;
            let rows: Vec<String> = system
                .keys
                .iter()
                .zip(solution.values.iter())
                .zip(solution.constrained.iter())
                .map(|((key, value), constrained)| {
                    format!(
                        "{},{},{},{:.16e},{:.16e},{}",
                        key[0], key[1], key[2], value.re, value.im, constrained
                    )
                })
                .collect();
            bundle.files.insert(
                "chi3_recovered.csv".into(),
                format!("g1,g2,g3,re,im,constrained\n{}\n", rows.join("\n")),
            );
            json!({
                "rank": solution.rank,
                "unknowns": system.keys.len(),
            })
        }
        _ => {
            return Err(Error::InvalidInput(
                "inversion applies to dual_linear, quad_third or dual_third runs".into(),
            ))
        }
    };
    bundle.summary = manifest(cfg, results);
    bundle
        .files
        .insert("invert_manifest.json".into(), serde_json::to_string_pretty(&bundle.summary)? + "\n");
    write_bundle(&bundle, dir)
}
