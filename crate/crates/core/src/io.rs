//! Run configuration (JSON) and CSV/manifest output.
//!
//! Floats are written with 17 significant digits (`{:.16e}`) so that
//! re-reading a file recovers the exact `f64`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dense::{integrate_me, DenseDensityMatrix};
use crate::ensemble::{
    self, ChannelOrder, ChoiceRow, EnsembleOutput, Observable, TrajectoryConfig, TrajectoryRecord, UnravellingPolicy,
};
use crate::linalg::{self, CMat};
use crate::models::{self, ModelSpec, RbcParams};
use crate::mps::TruncationPolicy;
use crate::propagators::PropagatorChoice;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Bell {
        gamma: f64,
    },
    Rbc {
        n: usize,
        alpha: f64,
        gamma: f64,
        #[serde(default = "yes")]
        includes_identity_term: bool,
    },
    Ising {
        n: usize,
        h: f64,
        g: f64,
        j: f64,
        gamma: f64,
    },
    Eit {
        n: usize,
        omega1: f64,
        omega2: f64,
        v: f64,
        gamma: f64,
    },
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    fn numbers(&self) -> Vec<(&'static str, f64)> {
        match *self {
            ModelConfig::Bell { gamma } => vec![("gamma", gamma)],
            ModelConfig::Rbc { alpha, gamma, .. } => vec![("alpha", alpha), ("gamma", gamma)],
            ModelConfig::Ising { h, g, j, gamma, .. } => vec![("h", h), ("g", g), ("j", j), ("gamma", gamma)],
            ModelConfig::Eit { omega1, omega2, v, gamma, .. } => {
                vec![("omega1", omega1), ("omega2", omega2), ("v", v), ("gamma", gamma)]
            }
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        for (name, x) in self.numbers() {
            if !x.is_finite() {
                return Err(Error::Config(format!("model.params.{name}: must be finite, got {x}")));
            }
        }
        match *self {
            ModelConfig::Bell { gamma } => models::bell_model(gamma),
            ModelConfig::Rbc { n, alpha, gamma, includes_identity_term } => {
                models::rbc_model(n, RbcParams { alpha, gamma, includes_identity_term })
            }
            ModelConfig::Ising { n, h, g, j, gamma } => models::ising_model(h, g, j, gamma, n),
            ModelConfig::Eit { n, omega1, omega2, v, gamma } => models::eit_model(omega1, omega2, v, gamma, n),
        }
        .map_err(|e| Error::Config(format!("model: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyConfig {
    Number,
    /// Either one `phase` for every channel or a `phases` list.
    Homodyne {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<f64>>,
    },
    Eoqt {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cut: Option<usize>,
    },
}

impl PolicyConfig {
    pub fn build(&self, n_channels: usize) -> Result<UnravellingPolicy> {
        match self {
            PolicyConfig::Number => Ok(UnravellingPolicy::FixedNumber),
            PolicyConfig::Homodyne { phase, phases } => {
                let p = match (phase, phases) {
                    (Some(x), None) => vec![*x; n_channels],
                    (None, Some(v)) => v.clone(),
                    (None, None) => vec![0.0; n_channels],
                    (Some(_), Some(_)) => {
                        return Err(Error::Config("policy: give either `phase` or `phases`, not both".into()))
                    }
                };
                if p.len() != n_channels {
                    return Err(Error::Config(format!(
                        "policy.phases: {} phases for {n_channels} channels",
                        p.len()
                    )));
                }
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config("policy.phases: must be finite".into()));
                }
                Ok(UnravellingPolicy::FixedHomodyne(p))
            }
            PolicyConfig::Eoqt { cut } => Ok(UnravellingPolicy::Eoqt(*cut)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorConfig {
    pub site: usize,
    /// See [`named_operator`].
    pub op: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableConfig {
    pub name: String,
    pub factors: Vec<FactorConfig>,
}

/// Single-site operators by name: `x`, `y`, `z` (qubits), `p<k>` for the
/// projector `|k⟩⟨k|`, `lower` for `|0⟩⟨1|`, `eit_z1` (qutrits).
pub fn named_operator(name: &str, d: usize) -> Result<CMat> {
    let bad = || Error::Config(format!("unknown operator `{name}` for local dimension {d}"));
    match name {
        "x" if d == 2 => Ok(linalg::pauli_x()),
        "y" if d == 2 => Ok(linalg::pauli_y()),
        "z" if d == 2 => Ok(linalg::pauli_z()),
        "lower" => Ok(linalg::ket_bra(d, 0, 1)),
        "eit_z1" if d == 3 => Ok(models::eit_sigma_z1()),
        _ => {
            let k: usize = name.strip_prefix('p').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if k >= d {
                return Err(bad());
            }
            Ok(linalg::ket_bra(d, k, k))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelOrderConfig {
    #[default]
    Ascending,
    RandomPermutation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_z")]
    pub z_threshold: f64,
    /// Multiplies the trajectory-side rates only (negative controls).
    #[serde(default = "one")]
    pub trajectory_rate_scale: f64,
    /// RK4 step of the master equation (defaults to `dt`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub me_dt: Option<f64>,
}

fn default_z() -> f64 {
    5.0
}

fn one() -> f64 {
    1.0
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { z_threshold: 5.0, trajectory_rate_scale: 1.0, me_dt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub dt: f64,
    pub t_final: f64,
    pub trajectories: usize,
    #[serde(default = "default_chi")]
    pub chi_max: usize,
    #[serde(default = "default_trunc")]
    pub trunc_threshold: f64,
    /// Cuts whose entropy is recorded (empty = all).
    #[serde(default)]
    pub cuts: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Thread count (defaults to the number of available cores).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub observables: Vec<ObservableConfig>,
    #[serde(default)]
    pub frozen_circuit: bool,
    #[serde(default)]
    pub channel_order: ChannelOrderConfig,
    #[serde(default)]
    pub log_decisions: bool,
    #[serde(default)]
    pub log_jumps: bool,
    #[serde(default)]
    pub write_trajectories: bool,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_chi() -> usize {
    64
}

fn default_trunc() -> f64 {
    TruncationPolicy::default().trunc_threshold
}

fn default_samples() -> usize {
    50
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Everything needed to call [`ensemble::run_ensemble`].
pub struct Prepared {
    pub model: ModelSpec,
    pub policy: UnravellingPolicy,
    pub trajectory: TrajectoryConfig,
    pub workers: usize,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let is_manifest = serde_json::from_str::<serde_json::Value>(text)
            .ok()
            .and_then(|v| v.get("manifest_version").cloned())
            .is_some();
        if is_manifest {
            Ok(parse_with_path::<Manifest>(text)?.config)
        } else {
            parse_with_path(text)
        }
    }

    /// Reads a config file; a `manifest.json` from an earlier run is accepted too.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
            .max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    /// Validates the config and builds the engine inputs.
    pub fn prepare(&self) -> Result<Prepared> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return cfg_err(format!("dt: must be positive and finite, got {}", self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return cfg_err(format!("t_final: must be positive and finite, got {}", self.t_final));
        }
        if self.trajectories == 0 {
            return cfg_err("trajectories: must be at least 1".into());
        }
        if self.chi_max == 0 {
            return cfg_err("chi_max: must be at least 1".into());
        }
        if !(self.trunc_threshold >= 0.0 && self.trunc_threshold.is_finite()) {
            return cfg_err("trunc_threshold: must be finite and non-negative".into());
        }
        if self.samples == 0 {
            return cfg_err("samples: must be at least 1".into());
        }
        if self.workers == Some(0) {
            return cfg_err("workers: must be at least 1".into());
        }
        let o = &self.oracle;
        if !(o.z_threshold > 0.0) || !(o.trajectory_rate_scale >= 0.0 && o.trajectory_rate_scale.is_finite()) {
            return cfg_err("oracle: z_threshold must be positive, trajectory_rate_scale finite and ≥ 0".into());
        }
        if let Some(h) = o.me_dt {
            if !(h > 0.0 && h.is_finite()) {
                return cfg_err("oracle.me_dt: must be positive".into());
            }
        }
        let model = self.model.build()?;
        if model.channels.iter().any(|c| c.rate < 0.0) {
            return cfg_err("model.params.gamma: must be non-negative".into());
        }
        let gdt = model.max_rate() * self.dt * o.trajectory_rate_scale.max(1.0);
        if gdt > 0.1 {
            return cfg_err(format!("dt: gamma*dt = {gdt} exceeds 0.1"));
        }
        for (i, &b) in self.cuts.iter().enumerate() {
            if b == 0 || b >= model.n {
                return cfg_err(format!("cuts[{i}]: cut {b} outside 1..{}", model.n));
            }
        }
        let policy = self.policy.build(model.channels.len())?;
        if let UnravellingPolicy::Eoqt(Some(b)) = policy {
            if b == 0 || b >= model.n {
                return cfg_err(format!("policy.cut: cut {b} outside 1..{}", model.n));
            }
        }
        let observables = self.build_observables(&model)?;
        let mut t = TrajectoryConfig::new(self.dt, self.t_final, self.chi_max, self.master_seed);
        t.truncation.trunc_threshold = self.trunc_threshold;
        t.record.samples = self.samples;
        t.record.cuts = self.cuts.clone();
        t.record.observables = observables;
        t.record.log_decisions = self.log_decisions;
        t.record.log_jumps = self.log_jumps;
        t.channel_order = match self.channel_order {
            ChannelOrderConfig::Ascending => ChannelOrder::Ascending,
            ChannelOrderConfig::RandomPermutation => ChannelOrder::RandomPermutation,
        };
        t.frozen_circuit = self.frozen_circuit;
        Ok(Prepared { model, policy, trajectory: t, workers: self.workers() })
    }

    fn build_observables(&self, model: &ModelSpec) -> Result<Vec<Observable>> {
        let mut out = Vec::new();
        for (i, o) in self.observables.iter().enumerate() {
            if o.factors.is_empty() {
                return Err(Error::Config(format!("observables[{i}].factors: empty")));
            }
            if o.name.is_empty() || o.name.contains([',', '"', '\n']) {
                return Err(Error::Config(format!("observables[{i}].name: must be non-empty plain text")));
            }
            let mut factors = Vec::new();
            for (k, f) in o.factors.iter().enumerate() {
                if f.site >= model.n {
                    return Err(Error::Config(format!(
                        "observables[{i}].factors[{k}].site: {} outside chain of {}",
                        f.site, model.n
                    )));
                }
                let op = named_operator(&f.op, model.d)
                    .map_err(|e| Error::Config(format!("observables[{i}].factors[{k}].op: {e}")))?;
                factors.push((f.site, op));
            }
            out.push(Observable::product(&o.name, factors));
        }
        Ok(out)
    }
}

fn parse_with_path<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureEntry {
    pub trajectory_id: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub config: RunConfig,
    pub git_revision: String,
    pub wall_time_s: f64,
    pub trajectories_completed: usize,
    pub failures: Vec<FailureEntry>,
    pub package_version: String,
}

/// `git rev-parse HEAD` of the working directory, or `"unknown"`.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_manifest(dir: &Path, config: &RunConfig, wall_time_s: f64, out: Option<&EnsembleOutput>) -> Result<()> {
    let m = Manifest {
        manifest_version: 1,
        config: config.clone(),
        git_revision: git_revision(),
        wall_time_s,
        trajectories_completed: out.map(|o| o.records.len()).unwrap_or(0),
        failures: out
            .map(|o| {
                o.failures
                    .iter()
                    .map(|(id, e)| FailureEntry { trajectory_id: *id, error: e.clone() })
                    .collect()
            })
            .unwrap_or_default(),
        package_version: env!("CARGO_PKG_VERSION").into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

/// `t,quantity,cut_or_site,mean,stderr,N`.
pub fn write_ensemble_csv(path: &Path, stats: &ensemble::EnsembleStats) -> Result<()> {
    let mut w = writer(path, &["t", "quantity", "cut_or_site", "mean", "stderr", "N"])?;
    for r in &stats.rows {
        w.write_record([
            fmt_f64(r.t),
            r.quantity.clone(),
            r.cut_or_site.to_string(),
            fmt_f64(r.mean),
            fmt_f64(r.stderr),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `t,channel,frac_number,frac_homodyne,mean_phase`.
pub fn write_choices_csv(path: &Path, rows: &[ChoiceRow]) -> Result<()> {
    let mut w = writer(path, &["t", "channel", "frac_number", "frac_homodyne", "mean_phase"])?;
    for r in rows {
        w.write_record([
            fmt_f64(r.t),
            r.channel.to_string(),
            fmt_f64(r.frac_number),
            fmt_f64(r.frac_homodyne),
            fmt_f64(r.mean_phase),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One trajectory as `t,quantity,cut_or_site,value`.
pub fn write_trajectory_csv(path: &Path, rec: &TrajectoryRecord, observables: &[Observable]) -> Result<()> {
    let mut w = writer(path, &["t", "quantity", "cut_or_site", "value"])?;
    for (ti, &t) in rec.times.iter().enumerate() {
        for (ci, b) in rec.cuts.iter().enumerate() {
            w.write_record([fmt_f64(t), "ee".into(), b.to_string(), fmt_f64(rec.ee[ti][ci])])?;
        }
        for (oi, o) in observables.iter().enumerate() {
            w.write_record([fmt_f64(t), o.name.clone(), o.site().to_string(), fmt_f64(rec.observables[ti][oi])])?;
        }
        w.write_record([fmt_f64(t), "max_bond".into(), "-1".into(), fmt_f64(rec.max_bond[ti] as f64)])?;
        w.write_record([fmt_f64(t), "discarded_weight".into(), "-1".into(), fmt_f64(rec.discarded_weight[ti])])?;
    }
    w.flush()?;
    Ok(())
}

fn choice_fields(c: PropagatorChoice) -> (&'static str, f64) {
    match c {
        PropagatorChoice::Number => ("number", f64::NAN),
        PropagatorChoice::Homodyne(phi) => ("homodyne", phi),
    }
}

/// `t,trajectory_id,channel,choice,phase,predicted_rate`.
pub fn write_decision_log(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = writer(path, &["t", "trajectory_id", "channel", "choice", "phase", "predicted_rate"])?;
    for r in records {
        for d in &r.decisions {
            let (kind, phase) = choice_fields(d.choice);
            w.write_record([
                fmt_f64(d.t),
                r.trajectory_id.to_string(),
                d.channel.to_string(),
                kind.into(),
                fmt_f64(phase),
                fmt_f64(d.predicted_rate),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `t,trajectory_id,channel,branch` with branch `jump` or `no_jump`.
pub fn write_jump_log(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = writer(path, &["t", "trajectory_id", "channel", "branch"])?;
    for r in records {
        for j in &r.jumps {
            let branch = if j.jumped { "jump" } else { "no_jump" };
            w.write_record([fmt_f64(j.t), r.trajectory_id.to_string(), j.channel.to_string(), branch.into()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRow {
    pub t: f64,
    pub observable: String,
    pub value: f64,
}

/// `t,observable_name,value`.
pub fn write_reference_csv(path: &Path, rows: &[ReferenceRow]) -> Result<()> {
    let mut w = writer(path, &["t", "observable_name", "value"])?;
    for r in rows {
        w.write_record([fmt_f64(r.t), r.observable.clone(), fmt_f64(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleRow {
    pub t: f64,
    pub observable: String,
    pub reference: f64,
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
    pub n: usize,
}

/// `t,observable_name,reference,mean,stderr,z,N`.
pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> Result<()> {
    let mut w = writer(path, &["t", "observable_name", "reference", "mean", "stderr", "z", "N"])?;
    for r in rows {
        w.write_record([
            fmt_f64(r.t),
            r.observable.clone(),
            fmt_f64(r.reference),
            fmt_f64(r.mean),
            fmt_f64(r.stderr),
            fmt_f64(r.z),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(mean − reference)/stderr`; with zero spread the score is 0 for exact
/// agreement (to 1e−9) and infinite otherwise.
pub fn z_score(mean: f64, stderr: f64, reference: f64) -> f64 {
    let diff = mean - reference;
    if stderr > 0.0 {
        diff / stderr
    } else if diff.abs() <= 1e-9 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

pub fn create_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("output_dir {}: {e}", dir.display())))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::Config(format!("output_dir {} not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

#[derive(Debug)]
pub struct RunReport {
    pub output: EnsembleOutput,
    pub wall_time_s: f64,
}

/// Runs the configured ensemble and writes `ensemble.csv`, `choices.csv`,
/// `manifest.json` and any requested logs into `output_dir`.
pub fn execute_run(config: &RunConfig) -> Result<RunReport> {
    let p = config.prepare()?;
    let dir = &config.output_dir;
    create_output_dir(dir)?;
    let start = Instant::now();
    let out = ensemble::run_ensemble(&p.model, &p.policy, &p.trajectory, config.trajectories, p.workers)?;
    let wall = start.elapsed().as_secs_f64();
    write_ensemble_csv(&dir.join("ensemble.csv"), &out.stats)?;
    write_choices_csv(&dir.join("choices.csv"), &out.stats.choices)?;
    if config.write_trajectories {
        let tdir = dir.join("trajectories");
        fs::create_dir_all(&tdir)?;
        for r in &out.records {
            write_trajectory_csv(
                &tdir.join(format!("{}.csv", r.trajectory_id)),
                r,
                &p.trajectory.record.observables,
            )?;
        }
    }
    if config.log_decisions {
        write_decision_log(&dir.join("decisions.csv"), &out.records)?;
    }
    if config.log_jumps {
        write_jump_log(&dir.join("jumps.csv"), &out.records)?;
    }
    write_manifest(dir, config, wall, Some(&out))?;
    Ok(RunReport { output: out, wall_time_s: wall })
}

#[derive(Debug)]
pub struct OracleReport {
    pub rows: Vec<OracleRow>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub partial: bool,
}

impl OracleReport {
    pub fn exceeded(&self) -> bool {
        !(self.max_abs_z <= self.threshold)
    }
}

/// Solves the master equation on the dense oracle at the recorded sample
/// times for every configured observable.
pub fn reference_observables(model: &ModelSpec, cfg: &TrajectoryConfig, me_dt: f64) -> Result<Vec<ReferenceRow>> {
    let h = model.hamiltonian()?;
    let rho0 = model.initial_dense()?.to_density_matrix();
    let times: Vec<f64> = cfg.sample_steps().iter().map(|&s| s as f64 * cfg.dt).collect();
    let rhos: Vec<DenseDensityMatrix> = integrate_me(&rho0, &h, &model.channels, me_dt, &times)?;
    let mut rows = Vec::new();
    for (t, rho) in times.iter().zip(&rhos) {
        for o in &cfg.record.observables {
            let refs: Vec<(usize, &CMat)> = o.factors.iter().map(|(s, m)| (*s, m)).collect();
            rows.push(ReferenceRow { t: *t, observable: o.name.clone(), value: rho.expectation(&refs).re });
        }
    }
    Ok(rows)
}

/// Runs the dense master equation and the trajectory ensemble and writes
/// `reference.csv`, `oracle_compare.csv`, `ensemble.csv` and `manifest.json`.
pub fn execute_oracle(config: &RunConfig) -> Result<OracleReport> {
    let p = config.prepare()?;
    if p.trajectory.record.observables.is_empty() {
        return Err(Error::Config("observables: the oracle needs at least one observable".into()));
    }
    if matches!(p.model.dynamics, models::Dynamics::Rbc(_)) {
        return Err(Error::Config("model: the oracle needs a static Hamiltonian".into()));
    }
    let dir = &config.output_dir;
    create_output_dir(dir)?;
    let start = Instant::now();
    let me_dt = config.oracle.me_dt.unwrap_or(config.dt);
    let reference = reference_observables(&p.model, &p.trajectory, me_dt)?;
    let traj_model = p.model.clone().with_rates_scaled(config.oracle.trajectory_rate_scale);
    let out = ensemble::run_ensemble(&traj_model, &p.policy, &p.trajectory, config.trajectories, p.workers)?;
    let wall = start.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(reference.len());
    for r in &reference {
        let site = p
            .trajectory
            .record
            .observables
            .iter()
            .find(|o| o.name == r.observable)
            .map(|o| o.site() as i64)
            .unwrap_or(0);
        let stat = out
            .stats
            .series(&r.observable, site)
            .into_iter()
            .find(|s| s.t == r.t)
            .ok_or_else(|| Error::InvalidArgument(format!("no statistics for {} at t={}", r.observable, r.t)))?;
        rows.push(OracleRow {
            t: r.t,
            observable: r.observable.clone(),
            reference: r.value,
            mean: stat.mean,
            stderr: stat.stderr,
            z: z_score(stat.mean, stat.stderr, r.value),
            n: stat.n,
        });
    }
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    write_reference_csv(&dir.join("reference.csv"), &reference)?;
    write_oracle_csv(&dir.join("oracle_compare.csv"), &rows)?;
    write_ensemble_csv(&dir.join("ensemble.csv"), &out.stats)?;
    write_manifest(dir, config, wall, Some(&out))?;
    Ok(OracleReport { rows, max_abs_z, threshold: config.oracle.z_threshold, partial: out.is_partial() })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BELL: &str = r#"{
        "model": {"name": "bell", "params": {"gamma": 1.0}},
        "policy": {"kind": "number"},
        "dt": 0.001, "t_final": 0.1, "trajectories": 4
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json_str(BELL).unwrap();
        assert_eq!(c.chi_max, 64);
        assert_eq!(c.samples, 50);
        assert_eq!(c.oracle.z_threshold, 5.0);
        c.validate().unwrap();
    }

    #[test]
    fn missing_field_names_its_path() {
        let text = r#"{"model": {"name": "ising", "params": {"n": 3, "h": 0, "g": 1, "gamma": 1}},
                       "policy": {"kind": "number"}, "dt": 0.01, "t_final": 1, "trajectories": 1}"#;
        let e = RunConfig::from_json_str(text).unwrap_err().to_string();
        assert!(e.contains("model") && e.contains("`j`"), "{e}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = BELL.replace("\"trajectories\": 4", "\"trajectories\": 4, \"trajectorys\": 5");
        let e = RunConfig::from_json_str(&text).unwrap_err().to_string();
        assert!(e.contains("trajectorys"), "{e}");
    }

    #[test]
    fn large_step_is_a_config_error() {
        let text = BELL.replace("\"dt\": 0.001", "\"dt\": 0.2");
        let c = RunConfig::from_json_str(&text).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_parameter_is_rejected() {
        let mut c = RunConfig::from_json_str(BELL).unwrap();
        c.model = ModelConfig::Bell { gamma: f64::NAN };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn phase_list_length_is_checked() {
        let text = BELL.replace(r#"{"kind": "number"}"#, r#"{"kind": "homodyne", "phases": [0.0]}"#);
        let c = RunConfig::from_json_str(&text).unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("policy.phases"), "{e}");
    }

    #[test]
    fn operators_by_name() {
        assert_eq!(named_operator("p1", 2).unwrap(), linalg::ket_bra(2, 1, 1));
        assert_eq!(named_operator("p2", 3).unwrap(), linalg::ket_bra(3, 2, 2));
        assert!(named_operator("p2", 2).is_err());
        assert!(named_operator("x", 3).is_err());
        assert!(named_operator("q", 2).is_err());
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        let x = 0.1f64 + 0.2;
        let s = fmt_f64(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn z_score_edge_cases() {
        assert_eq!(z_score(1.0, 0.0, 1.0), 0.0);
        assert!(z_score(1.0, 0.0, 0.5).is_infinite());
        assert_eq!(z_score(2.0, 0.5, 1.0), 2.0);
    }
}
