//! Single-channel stochastic propagators.
//!
//! Counting (jump / no-jump) and homodyne updates act through
//! [`TrajectoryBackend::apply_single_site`], so the same code drives both the
//! MPS and the dense backend.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, CMat};
use crate::mps::MpsState;
use crate::{Error, Result, C64};

/// Largest accepted `γ·dt`.
pub const MAX_GAMMA_DT: f64 = 0.1;

/// The single-site operations a propagator needs from a state.
pub trait TrajectoryBackend {
    fn n_sites(&self) -> usize;
    fn local_dim(&self) -> usize;
    fn expectation(&self, site: usize, op: &CMat) -> Result<C64>;
    /// Applies `op` at `site`; returns `⟨op†op⟩` of the input state.
    fn apply_single_site(&mut self, site: usize, op: &CMat, renormalize: bool) -> Result<f64>;
}

impl TrajectoryBackend for MpsState {
    fn n_sites(&self) -> usize {
        self.n()
    }

    fn local_dim(&self) -> usize {
        self.d()
    }

    fn expectation(&self, site: usize, op: &CMat) -> Result<C64> {
        MpsState::expectation(self, site, op)
    }

    fn apply_single_site(&mut self, site: usize, op: &CMat, renormalize: bool) -> Result<f64> {
        MpsState::apply_single_site(self, site, op, renormalize)
    }
}

#[derive(Clone, Debug)]
pub struct JumpChannel {
    pub site: usize,
    pub op: CMat,
    pub rate: f64,
}

impl JumpChannel {
    pub fn new(site: usize, op: CMat, rate: f64) -> Result<Self> {
        if !op.is_square() {
            return Err(Error::Dimension("jump operator must be square".into()));
        }
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::InvalidArgument(format!("rate {rate} must be finite and ≥ 0")));
        }
        Ok(Self { site, op, rate })
    }

    /// Precomputes the per-step operators for a given `dt`.
    pub fn prepare(&self, dt: f64) -> Result<PreparedChannel> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if self.rate * dt > MAX_GAMMA_DT {
            return Err(Error::StepTooLarge(self.rate * dt));
        }
        let cdag_c = self.op.adjoint() * &self.op;
        let no_jump = linalg::expm_hermitian(&cdag_c, C64::new(-0.5 * self.rate * dt, 0.0));
        Ok(PreparedChannel {
            channel: self.clone(),
            dt,
            cdag_c,
            no_jump,
        })
    }
}

/// A channel with its `dt`-dependent no-jump operator cached.
#[derive(Clone, Debug)]
pub struct PreparedChannel {
    pub channel: JumpChannel,
    pub dt: f64,
    pub cdag_c: CMat,
    /// `exp(−γ dt c†c / 2)`.
    pub no_jump: CMat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PropagatorChoice {
    Number,
    Homodyne(f64),
}

impl PropagatorChoice {
    /// Homodyne choice with the phase reduced to `[0, 2π)`.
    pub fn homodyne(phase: f64) -> Self {
        PropagatorChoice::Homodyne(reduce_phase(phase))
    }
}

pub fn reduce_phase(phi: f64) -> f64 {
    let r = phi.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StochasticDraw {
    /// Wiener increment `dW ~ N(0, dt)`.
    Wiener(f64),
    /// Uniform `u ∈ [0, 1)`.
    Uniform(f64),
}

/// Draws the random number a choice consumes.
pub fn draw<R: Rng + ?Sized>(choice: PropagatorChoice, dt: f64, rng: &mut R) -> StochasticDraw {
    match choice {
        PropagatorChoice::Number => StochasticDraw::Uniform(rng.random::<f64>()),
        PropagatorChoice::Homodyne(_) => {
            let z: f64 = rng.sample(StandardNormal);
            StochasticDraw::Wiener(z * dt.sqrt())
        }
    }
}

/// Homodyne update; returns the measured increment `dξ`.
pub fn homodyne_step<S: TrajectoryBackend + ?Sized>(
    state: &mut S,
    ch: &PreparedChannel,
    phase: f64,
    dw: f64,
) -> Result<f64> {
    let c = &ch.channel;
    if c.rate == 0.0 {
        return Ok(dw);
    }
    let e = C64::from_polar(1.0, phase);
    let x_op = &c.op * e + c.op.adjoint() * e.conj();
    let x = state.expectation(c.site, &x_op)?.re;
    let sg = c.rate.sqrt();
    let dxi = sg * x * ch.dt + dw;
    let k = &ch.no_jump + &c.op * (e * (sg * dxi));
    state.apply_single_site(c.site, &k, true)?;
    Ok(dxi)
}

/// Counting update; returns whether a jump occurred.
pub fn number_step<S: TrajectoryBackend + ?Sized>(state: &mut S, ch: &PreparedChannel, u: f64) -> Result<bool> {
    let c = &ch.channel;
    if c.rate == 0.0 {
        return Ok(false);
    }
    let p = c.rate * ch.dt * state.expectation(c.site, &ch.cdag_c)?.re;
    if p >= 1.0 {
        return Err(Error::JumpProbability(p));
    }
    if u < p {
        state.apply_single_site(c.site, &c.op, true)?;
        Ok(true)
    } else {
        state.apply_single_site(c.site, &ch.no_jump, true)?;
        Ok(false)
    }
}

/// Exponential form `exp(e^{iφ} √γ c dξ)` for channels with `c†c = 1`.
pub fn rbc_exponential_form_step<S: TrajectoryBackend + ?Sized>(
    state: &mut S,
    ch: &PreparedChannel,
    phase: f64,
    dw: f64,
) -> Result<f64> {
    let c = &ch.channel;
    let d = c.op.nrows();
    if linalg::frobenius(&(&ch.cdag_c - linalg::identity(d))) > 1e-10 {
        return Err(Error::InvalidArgument("exponential form requires c†c = 1".into()));
    }
    let e = C64::from_polar(1.0, phase);
    let x_op = &c.op * e + c.op.adjoint() * e.conj();
    let x = state.expectation(c.site, &x_op)?.re;
    let sg = c.rate.sqrt();
    let dxi = sg * x * ch.dt + dw;
    let k = linalg::expm(&(&c.op * (e * (sg * dxi))));
    state.apply_single_site(c.site, &k, true)?;
    Ok(dxi)
}

/// Outcome of one channel substep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Jump(bool),
    Homodyne { dxi: f64 },
}

pub fn apply_choice<S: TrajectoryBackend + ?Sized>(
    state: &mut S,
    ch: &PreparedChannel,
    choice: PropagatorChoice,
    draw: StochasticDraw,
) -> Result<StepOutcome> {
    match (choice, draw) {
        (PropagatorChoice::Number, StochasticDraw::Uniform(u)) => Ok(StepOutcome::Jump(number_step(state, ch, u)?)),
        (PropagatorChoice::Homodyne(phi), StochasticDraw::Wiener(dw)) => {
            Ok(StepOutcome::Homodyne { dxi: homodyne_step(state, ch, phi, dw)? })
        }
        _ => Err(Error::InvalidArgument("draw kind does not match propagator".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseState;
    use crate::linalg::{pauli_z, real};

    #[test]
    fn zero_rate_is_identity() {
        let mut s = DenseState::new(1, 2, vec![real(0.6), real(0.8)]).unwrap();
        let before = s.clone();
        let ch = JumpChannel::new(0, pauli_z(), 0.0).unwrap().prepare(1e-3).unwrap();
        homodyne_step(&mut s, &ch, 0.3, 0.7).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn coarse_step_rejected() {
        let ch = JumpChannel::new(0, pauli_z(), 200.0).unwrap();
        assert!(matches!(ch.prepare(1e-3), Err(Error::StepTooLarge(_))));
    }

    #[test]
    fn phase_reduction() {
        assert!((reduce_phase(-0.5) - (2.0 * PI - 0.5)).abs() < 1e-15);
        assert!(reduce_phase(2.0 * PI) < 1e-15);
    }

    #[test]
    fn mismatched_draw_rejected() {
        let mut s = DenseState::new(1, 2, vec![real(0.6), real(0.8)]).unwrap();
        let ch = JumpChannel::new(0, pauli_z(), 1.0).unwrap().prepare(1e-3).unwrap();
        assert!(apply_choice(&mut s, &ch, PropagatorChoice::Number, StochasticDraw::Wiener(0.0)).is_err());
    }
}
