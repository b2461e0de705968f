//! Canned experiments: the monitored Bell pair against its closed forms and
//! random-circuit entanglement profiles across unravellings and sizes.

use std::path::Path;

use crate::ensemble::{self, EnsembleOutput, EnsembleStats, TrajectoryConfig, TrajectoryRecord, UnravellingPolicy};
use crate::io::{self, fmt_f64};
use crate::models::{self, bell_analytics, RbcParams};
use crate::Result;

#[derive(Clone, Debug)]
pub struct BellStudy {
    pub gamma: f64,
    pub dt: f64,
    pub t_final: f64,
    pub trajectories: usize,
    pub samples: usize,
    pub master_seed: u64,
    pub workers: usize,
}

impl Default for BellStudy {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            dt: 1e-3,
            t_final: 3.0,
            trajectories: 10_000,
            samples: 21,
            master_seed: 2024,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRow {
    pub t: f64,
    pub series: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct BellReport {
    pub number: EnsembleOutput,
    pub homodyne: EnsembleOutput,
    pub eoqt: EnsembleOutput,
    /// Simulated curves, excesses over `E_f` and analytic overlays.
    pub rows: Vec<SeriesRow>,
}

impl BellReport {
    pub fn partial(&self) -> bool {
        self.number.is_partial() || self.homodyne.is_partial() || self.eoqt.is_partial()
    }
}

/// Runs the Bell pair under counting, homodyne(0, 0) and adaptive
/// unravellings, each with the same seed.
pub fn bell_study(p: &BellStudy) -> Result<BellReport> {
    let model = models::bell_model(p.gamma)?;
    let mut cfg = TrajectoryConfig::new(p.dt, p.t_final, 2, p.master_seed);
    cfg.record.samples = p.samples;
    cfg.record.cuts = vec![1];
    let run = |policy: UnravellingPolicy| ensemble::run_ensemble(&model, &policy, &cfg, p.trajectories, p.workers);
    let number = run(UnravellingPolicy::FixedNumber)?;
    let homodyne = run(UnravellingPolicy::FixedHomodyne(vec![0.0, 0.0]))?;
    let eoqt = run(UnravellingPolicy::Eoqt(Some(1)))?;

    let mut rows = Vec::new();
    for (label, out) in [("number", &number), ("homodyne0", &homodyne), ("eoqt", &eoqt)] {
        for r in out.stats.series("ee", 1) {
            let ef = bell_analytics::e_formation(p.gamma * r.t)?;
            rows.push(SeriesRow { t: r.t, series: format!("ee_{label}"), mean: r.mean, stderr: r.stderr, n: r.n });
            rows.push(SeriesRow {
                t: r.t,
                series: format!("excess_{label}"),
                mean: r.mean - ef,
                stderr: r.stderr,
                n: r.n,
            });
        }
    }
    for r in number.stats.series("ee", 1) {
        let gt = p.gamma * r.t;
        let analytic = |series: &str, mean: f64| SeriesRow { t: r.t, series: series.into(), mean, stderr: 0.0, n: 0 };
        rows.push(analytic("analytic_number", bell_analytics::eaee_number(gt)?));
        rows.push(analytic("analytic_homodyne0", bell_analytics::eaee_homodyne(gt, 0.0, 0.0)?));
        rows.push(analytic("e_formation", bell_analytics::e_formation(gt)?));
    }
    Ok(BellReport { number, homodyne, eoqt, rows })
}

/// `t,series,mean,stderr,N`.
pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    w.write_record(["t", "series", "mean", "stderr", "N"])?;
    for r in rows {
        w.write_record([fmt_f64(r.t), r.series.clone(), fmt_f64(r.mean), fmt_f64(r.stderr), r.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bell_outputs(dir: &Path, report: &BellReport) -> Result<()> {
    write_series_csv(&dir.join("bell.csv"), &report.rows)?;
    io::write_choices_csv(&dir.join("bell_choices.csv"), &report.eoqt.stats.choices)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum RbcPolicy {
    Homodyne(f64),
    Number,
    Eoqt,
}

impl RbcPolicy {
    pub fn label(&self) -> String {
        match self {
            RbcPolicy::Homodyne(phi) => format!("homodyne({phi:.6})"),
            RbcPolicy::Number => "number".into(),
            RbcPolicy::Eoqt => "eoqt".into(),
        }
    }

    fn phase(&self) -> f64 {
        match self {
            RbcPolicy::Homodyne(phi) => *phi,
            _ => f64::NAN,
        }
    }

    fn build(&self, n: usize, cut: Option<usize>) -> UnravellingPolicy {
        match self {
            RbcPolicy::Homodyne(phi) => UnravellingPolicy::FixedHomodyne(vec![*phi; n]),
            RbcPolicy::Number => UnravellingPolicy::FixedNumber,
            RbcPolicy::Eoqt => UnravellingPolicy::Eoqt(cut),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RbcStudy {
    pub sizes: Vec<usize>,
    pub policies: Vec<RbcPolicy>,
    pub params: RbcParams,
    pub chi_max: usize,
    pub dt: f64,
    pub t_final: f64,
    pub trajectories: usize,
    pub samples: usize,
    /// Trailing fraction of the run averaged for the long-time profile.
    pub window_fraction: f64,
    pub frozen_circuit: bool,
    /// Cut targeted by the adaptive policy (`None` = half chain).
    pub eoqt_cut: Option<usize>,
    pub master_seed: u64,
    pub workers: usize,
}

impl Default for RbcStudy {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            sizes: vec![12],
            policies: vec![
                RbcPolicy::Homodyne(0.0),
                RbcPolicy::Homodyne(PI / 4.0),
                RbcPolicy::Homodyne(3.0 * PI / 8.0),
                RbcPolicy::Homodyne(PI / 2.0),
                RbcPolicy::Number,
                RbcPolicy::Eoqt,
            ],
            params: RbcParams { alpha: 1.0, gamma: 10.0, includes_identity_term: true },
            chi_max: 64,
            dt: 0.01,
            t_final: 1.6,
            trajectories: 50,
            samples: 33,
            window_fraction: 0.25,
            frozen_circuit: false,
            eoqt_cut: None,
            master_seed: 7,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub n: usize,
    pub policy: String,
    pub phase: f64,
    pub cut: usize,
    pub mean: f64,
    pub stderr: f64,
    pub trajectories: usize,
}

#[derive(Clone, Debug)]
pub struct RbcRun {
    pub n: usize,
    pub policy: RbcPolicy,
    pub stats: EnsembleStats,
    pub profile: Vec<ProfileRow>,
    pub failures: Vec<(u64, String)>,
}

impl RbcRun {
    pub fn half_chain(&self) -> &ProfileRow {
        let half = self.n / 2;
        self.profile.iter().find(|r| r.cut == half).expect("every cut is recorded")
    }
}

/// Per-trajectory time average of each cut's entropy over samples with
/// `t ≥ (1 − fraction)·T`, then mean and standard error across trajectories.
pub fn long_time_profile(records: &[TrajectoryRecord], t_final: f64, fraction: f64) -> Vec<(usize, f64, f64)> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    let t0 = (1.0 - fraction) * t_final - 1e-12;
    let idx: Vec<usize> = (0..first.times.len()).filter(|&i| first.times[i] >= t0).collect();
    first
        .cuts
        .iter()
        .enumerate()
        .map(|(ci, &b)| {
            let per: Vec<f64> = records
                .iter()
                .map(|r| idx.iter().map(|&i| r.ee[i][ci]).sum::<f64>() / idx.len() as f64)
                .collect();
            let (m, se) = ensemble::mean_stderr(&per);
            (b, m, se)
        })
        .collect()
}

pub fn rbc_study(p: &RbcStudy) -> Result<Vec<RbcRun>> {
    let mut runs = Vec::new();
    for &n in &p.sizes {
        let model = models::rbc_model(n, p.params)?;
        let mut cfg = TrajectoryConfig::new(p.dt, p.t_final, p.chi_max, p.master_seed);
        cfg.record.samples = p.samples;
        cfg.frozen_circuit = p.frozen_circuit;
        for pol in &p.policies {
            let out = ensemble::run_ensemble(&model, &pol.build(n, p.eoqt_cut), &cfg, p.trajectories, p.workers)?;
            let profile = long_time_profile(&out.records, p.t_final, p.window_fraction)
                .into_iter()
                .map(|(cut, mean, stderr)| ProfileRow {
                    n,
                    policy: pol.label(),
                    phase: pol.phase(),
                    cut,
                    mean,
                    stderr,
                    trajectories: out.records.len(),
                })
                .collect();
            runs.push(RbcRun { n, policy: pol.clone(), stats: out.stats, profile, failures: out.failures });
        }
    }
    Ok(runs)
}

/// `rbc_profile.csv` (`n,policy,phase,cut,mean,stderr,N`) and
/// `rbc_series.csv` (`n,policy,t,cut,mean,stderr,N`, half-chain cut).
pub fn write_rbc_outputs(dir: &Path, runs: &[RbcRun]) -> Result<()> {
    let mk = |name: &str, header: &[&str]| -> Result<csv::Writer<std::fs::File>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(dir.join(name))?;
        w.write_record(header)?;
        Ok(w)
    };
    let mut prof = mk("rbc_profile.csv", &["n", "policy", "phase", "cut", "mean", "stderr", "N"])?;
    let mut ser = mk("rbc_series.csv", &["n", "policy", "t", "cut", "mean", "stderr", "N"])?;
    for run in runs {
        for r in &run.profile {
            prof.write_record([
                r.n.to_string(),
                r.policy.clone(),
                fmt_f64(r.phase),
                r.cut.to_string(),
                fmt_f64(r.mean),
                fmt_f64(r.stderr),
                r.trajectories.to_string(),
            ])?;
        }
        let half = run.n / 2;
        for s in run.stats.series("ee", half as i64) {
            ser.write_record([
                run.n.to_string(),
                run.policy.label(),
                fmt_f64(s.t),
                half.to_string(),
                fmt_f64(s.mean),
                fmt_f64(s.stderr),
                s.n.to_string(),
            ])?;
        }
    }
    prof.flush()?;
    ser.flush()?;
    Ok(())
}

/// Equally spaced homodyne phases on `[0, π/2]`.
pub fn phase_grid(points: usize) -> Vec<f64> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        k => (0..k).map(|i| half_pi * i as f64 / (k - 1) as f64).collect(),
    }
}

/// `sweep_phase.csv`: `n,phase,mean,stderr,N` for the half-chain cut.
pub fn write_phase_sweep(dir: &Path, runs: &[RbcRun]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(dir.join("sweep_phase.csv"))?;
    w.write_record(["n", "phase", "mean", "stderr", "N"])?;
    for run in runs {
        let h = run.half_chain();
        w.write_record([
            run.n.to_string(),
            fmt_f64(h.phase),
            fmt_f64(h.mean),
            fmt_f64(h.stderr),
            h.trajectories.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_averages_trailing_samples() {
        let rec = |id: u64, v: [f64; 5]| TrajectoryRecord {
            trajectory_id: id,
            master_seed: 0,
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            cuts: vec![1],
            ee: v.iter().map(|&x| vec![x]).collect(),
            observables: vec![vec![]; 5],
            choices: vec![vec![]; 5],
            max_bond: vec![1; 5],
            discarded_weight: vec![0.0; 5],
            decisions: vec![],
            jumps: vec![],
        };
        let rs = [rec(0, [9.0, 9.0, 9.0, 1.0, 3.0]), rec(1, [9.0, 9.0, 9.0, 3.0, 5.0])];
        let p = long_time_profile(&rs, 1.0, 0.25);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].0, 1);
        assert!((p[0].1 - 3.0).abs() < 1e-15);
        assert!((p[0].2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_spans_zero_to_half_pi() {
        let g = phase_grid(5);
        assert_eq!(g[0], 0.0);
        assert!((g[4] - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn short_bell_study_rows() {
        let p = BellStudy { trajectories: 3, t_final: 0.05, samples: 3, ..BellStudy::default() };
        let r = bell_study(&p).unwrap();
        let at0: Vec<_> = r.rows.iter().filter(|x| x.t == 0.0).collect();
        // Every curve starts at one ebit, every excess at zero.
        for row in at0 {
            let want = if row.series.starts_with("excess") { 0.0 } else { 1.0 };
            assert!((row.mean - want).abs() < 1e-12, "{row:?}");
        }
    }
}
