//! `eoqt`: run trajectory ensembles from JSON configs, compare them with the
//! master equation, and regenerate the Bell and random-circuit studies.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime abort or partial
//! ensemble, 3 oracle disagreement beyond the z threshold.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use eoqt_core::experiments::{self, BellStudy, RbcPolicy, RbcStudy};
use eoqt_core::io::{self, RunConfig};
use eoqt_core::models::RbcParams;
use eoqt_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "eoqt", version, about = "Entanglement-optimized quantum trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Worker threads (EOQT_THREADS takes precedence).
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cut targeted by the adaptive policy; for `run`/`oracle` also the only recorded cut.
    #[arg(long)]
    cut: Option<usize>,
    /// Maximum bond dimension.
    #[arg(long)]
    chi: Option<usize>,
    /// Reuse one random-circuit realization for every trajectory.
    #[arg(long)]
    frozen_circuit: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ensemble described by a config (or an earlier manifest.json).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare ensemble observables with the dense master equation.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Monitored Bell pair under counting, homodyne(0) and adaptive unravellings.
    Bell {
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 3.0)]
        t_final: f64,
        #[arg(long, default_value_t = 10_000)]
        trajectories: usize,
        #[arg(long, default_value_t = 21)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Long-time entanglement profiles of the random Brownian circuit.
    Rbc {
        /// Chain lengths.
        #[arg(long, value_delimiter = ',', default_value = "12")]
        sizes: Vec<usize>,
        /// Homodyne phases (default 0, π/4, 3π/8, π/2).
        #[arg(long, value_delimiter = ',')]
        phases: Option<Vec<f64>>,
        #[arg(long)]
        no_number: bool,
        #[arg(long)]
        no_eoqt: bool,
        #[command(flatten)]
        circuit: CircuitArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Half-chain long-time entanglement against a grid of homodyne phases.
    SweepPhase {
        #[arg(long, default_value_t = 12)]
        n: usize,
        /// Grid points on [0, π/2].
        #[arg(long, default_value_t = 7)]
        points: usize,
        #[command(flatten)]
        circuit: CircuitArgs,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone, Debug)]
struct CircuitArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 1.6)]
    t_final: f64,
    #[arg(long, default_value_t = 50)]
    trajectories: usize,
    #[arg(long, default_value_t = 33)]
    samples: usize,
    /// Trailing fraction of the run used for long-time averages.
    #[arg(long, default_value_t = 0.25)]
    window: f64,
}

enum Failure {
    Config(String),
    Runtime(String),
    Oracle(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Oracle(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Oracle(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::StepTooLarge(_)
            | Error::InvalidCut { .. }
            | Error::SiteOutOfRange { .. }
            | Error::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn env_threads() -> Result<Option<usize>, Failure> {
    match std::env::var("EOQT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .map(Some)
            .ok_or_else(|| Failure::Config(format!("EOQT_THREADS: expected a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_workers(common: &Common) -> Result<usize, Failure> {
    Ok(env_threads()?
        .or(common.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)))
}

fn load_config(path: &Path, common: &Common) -> Result<RunConfig, Failure> {
    let mut c = RunConfig::load(path)?;
    if let Some(w) = env_threads()?.or(common.workers) {
        c.workers = Some(w);
    }
    if let Some(s) = common.seed {
        c.master_seed = s;
    }
    if let Some(o) = &common.out {
        c.output_dir = o.clone();
    }
    if let Some(chi) = common.chi {
        c.chi_max = chi;
    }
    if let Some(b) = common.cut {
        c.cuts = vec![b];
        if let io::PolicyConfig::Eoqt { cut } = &mut c.policy {
            *cut = Some(b);
        }
    }
    if common.frozen_circuit {
        c.frozen_circuit = true;
    }
    Ok(c)
}

fn cmd_run(config: &Path, common: &Common) -> Result<(), Failure> {
    let c = load_config(config, common)?;
    let report = io::execute_run(&c)?;
    let out = &report.output;
    eprintln!(
        "{} trajectories in {:.2} s -> {}",
        out.records.len(),
        report.wall_time_s,
        c.output_dir.display()
    );
    if out.is_partial() {
        return Err(Failure::Runtime(format!(
            "{} of {} trajectories aborted (first: {})",
            out.failures.len(),
            c.trajectories,
            out.failures[0].1
        )));
    }
    Ok(())
}

fn cmd_oracle(config: &Path, common: &Common) -> Result<(), Failure> {
    let c = load_config(config, common)?;
    let report = io::execute_oracle(&c)?;
    eprintln!("max |z| = {:.3} (threshold {})", report.max_abs_z, report.threshold);
    if report.partial {
        return Err(Failure::Runtime("some trajectories aborted".into()));
    }
    if report.exceeded() {
        let worst = report
            .rows
            .iter()
            .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
            .map(|r| format!("{} at t={}: z={:.3}", r.observable, r.t, r.z))
            .unwrap_or_default();
        return Err(Failure::Oracle(format!("trajectories disagree with the master equation ({worst})")));
    }
    Ok(())
}

fn prepare_out(common: &Common, default: &str) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    io::create_output_dir(&dir)?;
    Ok(dir)
}

fn write_study_manifest(dir: &Path, command: &str, params: serde_json::Value, wall: f64) -> Result<(), Failure> {
    let m = json!({
        "command": command,
        "params": params,
        "git_revision": io::git_revision(),
        "wall_time_s": wall,
        "package_version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&m).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| Failure::Runtime(e.to_string()))
}

fn cmd_bell(p: BellStudy, common: &Common) -> Result<(), Failure> {
    let dir = prepare_out(common, "out/bell")?;
    let start = Instant::now();
    let report = experiments::bell_study(&p)?;
    experiments::write_bell_outputs(&dir, &report)?;
    let params = json!({
        "gamma": p.gamma, "dt": p.dt, "t_final": p.t_final, "trajectories": p.trajectories,
        "samples": p.samples, "master_seed": p.master_seed, "workers": p.workers,
    });
    write_study_manifest(&dir, "bell", params, start.elapsed().as_secs_f64())?;
    if report.partial() {
        return Err(Failure::Runtime("some trajectories aborted".into()));
    }
    Ok(())
}

fn rbc_base(c: &CircuitArgs, common: &Common) -> Result<RbcStudy, Failure> {
    let d = RbcStudy::default();
    Ok(RbcStudy {
        params: RbcParams { alpha: c.alpha, gamma: c.gamma, includes_identity_term: true },
        chi_max: common.chi.unwrap_or(d.chi_max),
        dt: c.dt,
        t_final: c.t_final,
        trajectories: c.trajectories,
        samples: c.samples,
        window_fraction: c.window,
        frozen_circuit: common.frozen_circuit,
        eoqt_cut: common.cut,
        master_seed: common.seed.unwrap_or(d.master_seed),
        workers: resolve_workers(common)?,
        ..d
    })
}

fn check_circuit(c: &CircuitArgs) -> Result<(), Failure> {
    let all_finite = [c.alpha, c.gamma, c.dt, c.t_final, c.window].iter().all(|x| x.is_finite());
    if !all_finite || !(c.dt > 0.0) || !(c.t_final > 0.0) || !(c.window > 0.0 && c.window <= 1.0) {
        return Err(Failure::Config("circuit parameters must be finite; dt, t_final > 0; 0 < window ≤ 1".into()));
    }
    if c.gamma * c.dt > 0.1 {
        return Err(Failure::Config(format!("dt: gamma*dt = {} exceeds 0.1", c.gamma * c.dt)));
    }
    if c.trajectories == 0 {
        return Err(Failure::Config("trajectories: must be at least 1".into()));
    }
    Ok(())
}

fn study_params(s: &RbcStudy) -> serde_json::Value {
    json!({
        "sizes": s.sizes,
        "policies": s.policies.iter().map(RbcPolicy::label).collect::<Vec<_>>(),
        "alpha": s.params.alpha, "gamma": s.params.gamma, "chi_max": s.chi_max,
        "dt": s.dt, "t_final": s.t_final, "trajectories": s.trajectories, "samples": s.samples,
        "window_fraction": s.window_fraction, "frozen_circuit": s.frozen_circuit,
        "eoqt_cut": s.eoqt_cut, "master_seed": s.master_seed, "workers": s.workers,
    })
}

fn any_failures(runs: &[experiments::RbcRun]) -> Result<(), Failure> {
    match runs.iter().find(|r| !r.failures.is_empty()) {
        Some(r) => Err(Failure::Runtime(format!("n={} {}: {}", r.n, r.policy.label(), r.failures[0].1))),
        None => Ok(()),
    }
}

fn cmd_rbc(
    sizes: Vec<usize>,
    phases: Option<Vec<f64>>,
    no_number: bool,
    no_eoqt: bool,
    circuit: &CircuitArgs,
    common: &Common,
) -> Result<(), Failure> {
    check_circuit(circuit)?;
    if sizes.iter().any(|&n| n < 2) {
        return Err(Failure::Config("sizes: every chain needs at least 2 sites".into()));
    }
    let mut study = rbc_base(circuit, common)?;
    study.sizes = sizes;
    if let Some(ph) = phases {
        study.policies = ph.into_iter().map(RbcPolicy::Homodyne).collect();
        study.policies.push(RbcPolicy::Number);
        study.policies.push(RbcPolicy::Eoqt);
    }
    study.policies.retain(|p| !(no_number && *p == RbcPolicy::Number || no_eoqt && *p == RbcPolicy::Eoqt));
    let dir = prepare_out(common, "out/rbc")?;
    let start = Instant::now();
    let runs = experiments::rbc_study(&study)?;
    experiments::write_rbc_outputs(&dir, &runs)?;
    write_study_manifest(&dir, "rbc", study_params(&study), start.elapsed().as_secs_f64())?;
    any_failures(&runs)
}

fn cmd_sweep_phase(n: usize, points: usize, circuit: &CircuitArgs, common: &Common) -> Result<(), Failure> {
    check_circuit(circuit)?;
    if n < 2 || points == 0 {
        return Err(Failure::Config("need n ≥ 2 and at least one phase point".into()));
    }
    let mut study = rbc_base(circuit, common)?;
    study.sizes = vec![n];
    study.policies = experiments::phase_grid(points).into_iter().map(RbcPolicy::Homodyne).collect();
    let dir = prepare_out(common, "out/sweep_phase")?;
    let start = Instant::now();
    let runs = experiments::rbc_study(&study)?;
    experiments::write_phase_sweep(&dir, &runs)?;
    experiments::write_rbc_outputs(&dir, &runs)?;
    write_study_manifest(&dir, "sweep-phase", study_params(&study), start.elapsed().as_secs_f64())?;
    any_failures(&runs)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, common } => cmd_run(&config, &common),
        Command::Oracle { config, common } => cmd_oracle(&config, &common),
        Command::Bell { gamma, dt, t_final, trajectories, samples, common } => {
            let finite = [gamma, dt, t_final].iter().all(|x| x.is_finite());
            if !finite || !(dt > 0.0) || !(t_final > 0.0) || trajectories == 0 || gamma < 0.0 {
                return Err(Failure::Config("bell: need finite gamma ≥ 0, dt > 0, t_final > 0, trajectories ≥ 1".into()));
            }
            let p = BellStudy {
                gamma,
                dt,
                t_final,
                trajectories,
                samples,
                master_seed: common.seed.unwrap_or(BellStudy::default().master_seed),
                workers: resolve_workers(&common)?,
            };
            cmd_bell(p, &common)
        }
        Command::Rbc { sizes, phases, no_number, no_eoqt, circuit, common } => {
            cmd_rbc(sizes, phases, no_number, no_eoqt, &circuit, &common)
        }
        Command::SweepPhase { n, points, circuit, common } => cmd_sweep_phase(n, points, &circuit, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
