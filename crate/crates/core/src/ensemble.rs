//! Trajectory engine and ensemble statistics.
//!
//! One step of a trajectory is a stochastic layer (every channel in turn,
//! ascending site order unless permuted) followed by the coherent layer of
//! two-site gates. The stochastic layer runs as one MPS sweep, so canonical
//! form is restored once per layer rather than once per channel. Trajectory `k` draws from ChaCha streams keyed by
//! `(master_seed, k)`, so results do not depend on scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::linalg::CMat;
use crate::models::ModelSpec;
use crate::mps::{Cut, MpsState, TruncationPolicy};
use crate::propagators::{self, PreparedChannel, PropagatorChoice, StepOutcome};
use crate::rates;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum UnravellingPolicy {
    FixedNumber,
    /// One phase per channel.
    FixedHomodyne(Vec<f64>),
    /// Greedy entanglement-optimized choice relative to a cut (`None` = half chain).
    Eoqt(Option<usize>),
}

impl UnravellingPolicy {
    pub fn label(&self) -> String {
        match self {
            UnravellingPolicy::FixedNumber => "number".into(),
            UnravellingPolicy::FixedHomodyne(p) => {
                let first = p.first().copied().unwrap_or(0.0);
                format!("homodyne({first:.6})")
            }
            UnravellingPolicy::Eoqt(_) => "eoqt".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelOrder {
    #[default]
    Ascending,
    /// Fresh random permutation every step.
    RandomPermutation,
}

/// A product of single-site operators recorded as a real expectation value.
#[derive(Clone, Debug)]
pub struct Observable {
    pub name: String,
    pub factors: Vec<(usize, CMat)>,
}

impl Observable {
    pub fn local(name: &str, site: usize, op: CMat) -> Self {
        Self {
            name: name.into(),
            factors: vec![(site, op)],
        }
    }

    pub fn product(name: &str, factors: Vec<(usize, CMat)>) -> Self {
        Self {
            name: name.into(),
            factors,
        }
    }

    /// Site reported in the `cut_or_site` column (first factor).
    pub fn site(&self) -> usize {
        self.factors.first().map(|f| f.0).unwrap_or(0)
    }

    pub fn evaluate(&self, state: &MpsState) -> Result<f64> {
        let refs: Vec<(usize, &CMat)> = self.factors.iter().map(|(s, o)| (*s, o)).collect();
        Ok(state.expectation_product(&refs)?.re)
    }
}

#[derive(Clone, Debug)]
pub struct RecordSpec {
    /// Number of equally spaced sample points on `[0, T]` (endpoints included).
    pub samples: usize,
    /// Cuts `b` whose entropy is recorded (empty = all).
    pub cuts: Vec<usize>,
    pub observables: Vec<Observable>,
    pub log_decisions: bool,
    pub log_jumps: bool,
}

impl Default for RecordSpec {
    fn default() -> Self {
        Self {
            samples: 50,
            cuts: Vec::new(),
            observables: Vec::new(),
            log_decisions: false,
            log_jumps: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryConfig {
    pub dt: f64,
    pub t_final: f64,
    pub truncation: TruncationPolicy,
    pub record: RecordSpec,
    pub channel_order: ChannelOrder,
    /// Share one circuit realization across trajectories.
    pub frozen_circuit: bool,
    pub master_seed: u64,
}

impl TrajectoryConfig {
    pub fn new(dt: f64, t_final: f64, chi_max: usize, master_seed: u64) -> Self {
        Self {
            dt,
            t_final,
            truncation: TruncationPolicy::with_chi(chi_max),
            record: RecordSpec::default(),
            channel_order: ChannelOrder::Ascending,
            frozen_circuit: false,
            master_seed,
        }
    }

    pub fn total_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Step indices at which the state is recorded (strictly increasing).
    pub fn sample_steps(&self) -> Vec<usize> {
        let total = self.total_steps();
        let s = self.record.samples.max(1);
        let mut v: Vec<usize> = if s == 1 {
            vec![total]
        } else {
            (0..s)
                .map(|k| ((k as f64) * total as f64 / (s - 1) as f64).round() as usize)
                .collect()
        };
        v.dedup();
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ChoiceTally {
    pub number: u32,
    pub homodyne: u32,
    pub phase_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionEvent {
    pub t: f64,
    pub channel: usize,
    pub choice: PropagatorChoice,
    pub predicted_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    pub t: f64,
    pub channel: usize,
    pub jumped: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub trajectory_id: u64,
    pub master_seed: u64,
    pub times: Vec<f64>,
    /// Recorded cuts `b`.
    pub cuts: Vec<usize>,
    /// `[time][cut]` entropies in bits.
    pub ee: Vec<Vec<f64>>,
    /// `[time][observable]`.
    pub observables: Vec<Vec<f64>>,
    /// `[time][channel]` choices made since the previous sample.
    pub choices: Vec<Vec<ChoiceTally>>,
    pub max_bond: Vec<usize>,
    pub discarded_weight: Vec<f64>,
    pub decisions: Vec<DecisionEvent>,
    pub jumps: Vec<JumpEvent>,
}

fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master_seed);
    r.set_stream(stream);
    r
}

/// Per-trajectory noise stream.
pub fn noise_rng(master_seed: u64, id: u64) -> ChaCha8Rng {
    stream_rng(master_seed, 2 * id)
}

/// Per-trajectory circuit stream (shared when the circuit is frozen).
pub fn circuit_rng(master_seed: u64, id: u64, frozen: bool) -> ChaCha8Rng {
    if frozen {
        stream_rng(master_seed, u64::MAX)
    } else {
        stream_rng(master_seed, 2 * id + 1)
    }
}

fn resolve_cuts(spec: &[usize], n: usize) -> Result<Vec<usize>> {
    if spec.is_empty() {
        return Ok((1..n).collect());
    }
    for &b in spec {
        Cut::new(b, n)?;
    }
    Ok(spec.to_vec())
}

pub fn run_trajectory(
    model: &ModelSpec,
    policy: &UnravellingPolicy,
    cfg: &TrajectoryConfig,
    trajectory_id: u64,
) -> Result<TrajectoryRecord> {
    let n = model.n;
    let prepared: Vec<PreparedChannel> = model
        .channels
        .iter()
        .map(|c| c.prepare(cfg.dt))
        .collect::<Result<_>>()?;
    if let UnravellingPolicy::FixedHomodyne(p) = policy {
        if p.len() != prepared.len() {
            return Err(Error::InvalidArgument(format!(
                "{} homodyne phases for {} channels",
                p.len(),
                prepared.len()
            )));
        }
    }
    let eoqt_cut = match policy {
        UnravellingPolicy::Eoqt(c) => Some(Cut::new(c.unwrap_or(n / 2), n)?),
        _ => None,
    };
    let cuts = resolve_cuts(&cfg.record.cuts, n)?;
    let schedule = model.gate_schedule(cfg.dt)?;
    let mut state = model.initial_mps(cfg.truncation.clone())?;
    let mut rng = noise_rng(cfg.master_seed, trajectory_id);
    let mut crng = circuit_rng(cfg.master_seed, trajectory_id, cfg.frozen_circuit);

    let mut base_order: Vec<usize> = (0..prepared.len()).collect();
    base_order.sort_by_key(|&j| prepared[j].channel.site);
    let sample_steps = cfg.sample_steps();
    let mut rec = TrajectoryRecord {
        trajectory_id,
        master_seed: cfg.master_seed,
        times: Vec::with_capacity(sample_steps.len()),
        cuts: cuts.clone(),
        ee: Vec::new(),
        observables: Vec::new(),
        choices: Vec::new(),
        max_bond: Vec::new(),
        discarded_weight: Vec::new(),
        decisions: Vec::new(),
        jumps: Vec::new(),
    };
    let mut tally = vec![ChoiceTally::default(); prepared.len()];
    let record = |state: &MpsState, step: usize, tally: &mut Vec<ChoiceTally>, rec: &mut TrajectoryRecord| -> Result<()> {
        rec.times.push(step as f64 * cfg.dt);
        rec.ee.push(
            cuts.iter()
                .map(|&b| state.entanglement_entropy(Cut::new(b, n)?))
                .collect::<Result<_>>()?,
        );
        rec.observables.push(
            cfg.record
                .observables
                .iter()
                .map(|o| o.evaluate(state))
                .collect::<Result<_>>()?,
        );
        rec.choices.push(std::mem::take(tally));
        *tally = vec![ChoiceTally::default(); prepared.len()];
        rec.max_bond.push(state.max_bond());
        rec.discarded_weight.push(state.discarded_weight());
        Ok(())
    };

    let mut next = 0usize;
    if sample_steps.first() == Some(&0) {
        record(&state, 0, &mut tally, &mut rec)?;
        next = 1;
    }
    let total = cfg.total_steps();
    let mut order = base_order.clone();
    for step in 0..total {
        let t = step as f64 * cfg.dt;
        if cfg.channel_order == ChannelOrder::RandomPermutation {
            order.copy_from_slice(&base_order);
            order.shuffle(&mut rng);
        }
        for &j in &order {
            let ch = &prepared[j];
            state.advance_center(ch.channel.site)?;
            let (choice, predicted) = match (policy, eoqt_cut) {
                (UnravellingPolicy::FixedNumber, _) => (PropagatorChoice::Number, f64::NAN),
                (UnravellingPolicy::FixedHomodyne(p), _) => (PropagatorChoice::homodyne(p[j]), f64::NAN),
                (UnravellingPolicy::Eoqt(_), Some(cut)) => {
                    let d = rates::choose_propagator(&state, &ch.channel, cut)?;
                    (d.choice, d.predicted_rate)
                }
                (UnravellingPolicy::Eoqt(_), None) => unreachable!("cut resolved above"),
            };
            match choice {
                PropagatorChoice::Number => tally[j].number += 1,
                PropagatorChoice::Homodyne(phi) => {
                    tally[j].homodyne += 1;
                    tally[j].phase_sum += phi;
                }
            }
            if cfg.record.log_decisions {
                rec.decisions.push(DecisionEvent { t, channel: j, choice, predicted_rate: predicted });
            }
            let draw = propagators::draw(choice, cfg.dt, &mut rng);
            let outcome = propagators::apply_choice(&mut state, ch, choice, draw)?;
            if cfg.record.log_jumps {
                if let StepOutcome::Jump(jumped) = outcome {
                    rec.jumps.push(JumpEvent { t, channel: j, jumped });
                }
            }
        }
        state.finish_sweep()?;
        if state.has_non_finite() {
            return Err(Error::NonFinite(format!(
                "trajectory {trajectory_id}: stochastic layer at step {step} (t={t})"
            )));
        }
        let layer = schedule.layer(&mut crng);
        for (b, g) in layer.iter() {
            state.apply_two_site_gate(*b, g)?;
        }
        if state.has_non_finite() {
            return Err(Error::NonFinite(format!(
                "trajectory {trajectory_id}: coherent layer at step {step} (t={t})"
            )));
        }
        if next < sample_steps.len() && sample_steps[next] == step + 1 {
            record(&state, step + 1, &mut tally, &mut rec)?;
            next += 1;
        }
    }
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatRow {
    pub t: f64,
    pub quantity: String,
    /// Cut `b`, observable site, or −1 for chain-global quantities.
    pub cut_or_site: i64,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceRow {
    pub t: f64,
    pub channel: usize,
    pub frac_number: f64,
    pub frac_homodyne: f64,
    /// Mean homodyne phase (NaN if homodyne was never chosen).
    pub mean_phase: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EnsembleStats {
    pub rows: Vec<StatRow>,
    pub choices: Vec<ChoiceRow>,
}

impl EnsembleStats {
    pub fn series(&self, quantity: &str, cut_or_site: i64) -> Vec<&StatRow> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity && r.cut_or_site == cut_or_site)
            .collect()
    }

    pub fn choice_series(&self, channel: usize) -> Vec<&ChoiceRow> {
        self.choices.iter().filter(|r| r.channel == channel).collect()
    }
}

/// Mean and standard error (sample std / √N; zero for N < 2).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n < 2 || xs.iter().all(|&x| x == xs[0]) {
        return (if n < 2 { m } else { xs[0] }, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Aggregates records (in the given order) into per-time statistics.
pub fn aggregate(records: &[TrajectoryRecord], observable_names: &[(String, usize)]) -> Result<EnsembleStats> {
    let mut stats = EnsembleStats::default();
    let Some(first) = records.first() else {
        return Ok(stats);
    };
    for r in records {
        if r.times != first.times || r.cuts != first.cuts {
            return Err(Error::InvalidArgument("records have mismatched grids".into()));
        }
    }
    let n = records.len();
    let mut buf = vec![0.0; n];
    for (ti, &t) in first.times.iter().enumerate() {
        let mut push = |quantity: &str, idx: i64, f: &dyn Fn(&TrajectoryRecord) -> f64| {
            for (k, r) in records.iter().enumerate() {
                buf[k] = f(r);
            }
            let (mean, stderr) = mean_stderr(&buf);
            stats.rows.push(StatRow { t, quantity: quantity.into(), cut_or_site: idx, mean, stderr, n });
        };
        for (ci, &b) in first.cuts.iter().enumerate() {
            push("ee", b as i64, &|r| r.ee[ti][ci]);
        }
        for (oi, (name, site)) in observable_names.iter().enumerate() {
            push(name, *site as i64, &|r| r.observables[ti][oi]);
        }
        push("max_bond", -1, &|r| r.max_bond[ti] as f64);
        push("discarded_weight", -1, &|r| r.discarded_weight[ti]);
        if ti > 0 {
            for ch in 0..first.choices[ti].len() {
                let mut num = 0u64;
                let mut hom = 0u64;
                let mut phase = 0.0;
                for r in records {
                    let c = r.choices[ti][ch];
                    num += c.number as u64;
                    hom += c.homodyne as u64;
                    phase += c.phase_sum;
                }
                let tot = (num + hom) as f64;
                stats.choices.push(ChoiceRow {
                    t,
                    channel: ch,
                    frac_number: if tot > 0.0 { num as f64 / tot } else { f64::NAN },
                    frac_homodyne: if tot > 0.0 { hom as f64 / tot } else { f64::NAN },
                    mean_phase: if hom > 0 { phase / hom as f64 } else { f64::NAN },
                });
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput {
    pub stats: EnsembleStats,
    pub records: Vec<TrajectoryRecord>,
    /// Trajectories that aborted, with the error message.
    pub failures: Vec<(u64, String)>,
}

impl EnsembleOutput {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Runs `n_traj` trajectories on `workers` threads; output is independent of
/// the worker count.
pub fn run_ensemble(
    model: &ModelSpec,
    policy: &UnravellingPolicy,
    cfg: &TrajectoryConfig,
    n_traj: usize,
    workers: usize,
) -> Result<EnsembleOutput> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrajectoryRecord>> = pool.install(|| {
        (0..n_traj as u64)
            .into_par_iter()
            .map(|k| run_trajectory(model, policy, cfg, k))
            .collect()
    });
    let mut records = Vec::with_capacity(n_traj);
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            // Configuration problems are identical for every trajectory.
            Err(e @ (Error::StepTooLarge(_) | Error::InvalidArgument(_) | Error::InvalidCut { .. })) => return Err(e),
            Err(e) => failures.push((k as u64, e.to_string())),
        }
    }
    let names: Vec<(String, usize)> = cfg
        .record
        .observables
        .iter()
        .map(|o| (o.name.clone(), o.site()))
        .collect();
    let stats = aggregate(&records, &names)?;
    Ok(EnsembleOutput { stats, records, failures })
}

/// Sample variance across trajectories, `[time][observable]`.
pub fn variance_report(records: &[TrajectoryRecord]) -> Result<Vec<Vec<f64>>> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("variance needs at least two records".into()));
    }
    let first = &records[0];
    if records.iter().any(|r| r.times != first.times) {
        return Err(Error::InvalidArgument("records have mismatched grids".into()));
    }
    let n = records.len() as f64;
    let n_obs = first.observables.first().map(Vec::len).unwrap_or(0);
    Ok((0..first.times.len())
        .map(|ti| {
            (0..n_obs)
                .map(|oi| {
                    let x0 = first.observables[ti][oi];
                    if records.iter().all(|r| r.observables[ti][oi] == x0) {
                        return 0.0;
                    }
                    let m = records.iter().map(|r| r.observables[ti][oi]).sum::<f64>() / n;
                    records
                        .iter()
                        .map(|r| (r.observables[ti][oi] - m).powi(2))
                        .sum::<f64>()
                        / (n - 1.0)
                })
                .collect()
        })
        .collect())
}

/// Connected correlator `E[x_ab] − E[x_a]E[x_b]` across trajectories with a
/// delta-method standard error, per sample time.
pub fn connected_correlator(records: &[TrajectoryRecord], ab: usize, a: usize, b: usize) -> Vec<(f64, f64)> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    (0..first.times.len())
        .map(|ti| {
            let col = |i: usize| records.iter().map(|r| r.observables[ti][i]).collect::<Vec<f64>>();
            let (xab, xa, xb) = (col(ab), col(a), col(b));
            let (mab, _) = mean_stderr(&xab);
            let (ma, _) = mean_stderr(&xa);
            let (mb, _) = mean_stderr(&xb);
            let infl: Vec<f64> = (0..records.len())
                .map(|k| xab[k] - mb * xa[k] - ma * xb[k])
                .collect();
            let (_, se) = mean_stderr(&infl);
            (mab - ma * mb, se)
        })
        .collect()
}
