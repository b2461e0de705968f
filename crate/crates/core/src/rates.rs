//! Expected entanglement change rates and the optimal propagator choice.
//!
//! All rates are in bits per unit time and include the channel rate γ as an
//! overall factor.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, LN_2, PI};

use crate::linalg::{self, CMat};
use crate::mps::{Cut, MpsState, SchmidtBlock, EPS_EIG};
use crate::propagators::{reduce_phase, JumpChannel, PropagatorChoice};
use crate::{Error, Result, C64};

/// Relative closeness below which the log kernel uses its diagonal limit.
pub const EPS_REL: f64 = 1e-8;
/// Rate difference treated as a tie (resolved in favour of homodyne).
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RateInputs {
    /// Schmidt spectrum, descending, summing to one.
    pub xi: Vec<f64>,
    /// `tr(c φ)`.
    pub a0: C64,
    /// `⟨ξ_k| tr_B(c φ) |ξ_l⟩`.
    pub a_mat: CMat,
    /// `tr(c φ c†)`.
    pub jump_weight: f64,
    /// `⟨ξ_k| tr_B(c φ c†) |ξ_l⟩`.
    pub reduced_jump: CMat,
    pub gamma: f64,
}

impl RateInputs {
    /// Validating constructor.
    pub fn new(block: SchmidtBlock, gamma: f64) -> Result<Self> {
        let r = Self::from_block(block, gamma);
        r.validate()?;
        Ok(r)
    }

    fn from_block(b: SchmidtBlock, gamma: f64) -> Self {
        Self {
            xi: b.xi,
            a0: b.a0,
            a_mat: b.a_mat,
            jump_weight: b.jump_weight,
            reduced_jump: b.reduced_jump,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let chi = self.xi.len();
        if self.a_mat.shape() != (chi, chi) || self.reduced_jump.shape() != (chi, chi) {
            return Err(Error::Dimension("rate input matrices do not match spectrum".into()));
        }
        if self.xi.iter().any(|&x| x < -1e-12) || (self.xi.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("Schmidt spectrum not normalized".into()));
        }
        if (self.reduced_jump.trace().re - self.jump_weight).abs() > 1e-9 {
            return Err(Error::InvalidArgument("reduced_jump trace != jump_weight".into()));
        }
        if (self.a_mat.trace() - self.a0).norm() > 1e-9 {
            return Err(Error::InvalidArgument("a_mat trace != a0".into()));
        }
        if linalg::eigvalsh(&self.reduced_jump).first().copied().unwrap_or(0.0) < -1e-9 {
            return Err(Error::InvalidArgument("reduced_jump not PSD".into()));
        }
        Ok(())
    }

    /// Builds inputs from a canonical MPS; for a site in `A` the roles of
    /// the two halves are exchanged (the rates are symmetric).
    pub fn from_mps(state: &MpsState, channel: &JumpChannel, cut: Cut) -> Result<Self> {
        let block = state.schmidt_operator_block(cut, channel.site, &channel.op)?;
        Ok(Self::from_block(block, channel.rate))
    }

    /// Builds inputs from a dense pure state (reference path).
    pub fn from_dense(state: &crate::dense::DenseState, channel: &JumpChannel, cut: Cut) -> Result<Self> {
        let mps = MpsState::from_state_vector(
            &state.amps,
            state.d,
            crate::mps::TruncationPolicy {
                chi_max: usize::MAX,
                trunc_threshold: 0.0,
                max_discarded_weight: None,
            },
        )?;
        Self::from_mps(&mps, channel, cut)
    }

    /// `Σ_{kl} K(ξ_k, ξ_l) |a_kl|²`, the kernel-weighted weight appearing in
    /// the phase-averaged homodyne rate.
    pub fn kernel_weight(&self) -> f64 {
        let mut acc = 0.0;
        for k in self.kept() {
            for l in self.kept() {
                acc += log_kernel(self.xi[k], self.xi[l]) * self.a_mat[(k, l)].norm_sqr();
            }
        }
        acc
    }

    fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.xi.len()).filter(move |&k| self.xi[k] >= EPS_EIG)
    }
}

/// `(ln x − ln y)/(x − y)`, with the limit `1/x` for nearly equal arguments.
pub fn log_kernel(x: f64, y: f64) -> f64 {
    if (x - y).abs() < EPS_REL * x.max(y) {
        2.0 / (x + y)
    } else {
        (x.ln() - y.ln()) / (x - y)
    }
}

/// Expected entanglement change rate under photon counting.
pub fn rate_number(inp: &RateInputs) -> f64 {
    let w = inp.jump_weight;
    if w < EPS_EIG {
        return 0.0;
    }
    let mut cross = 0.0;
    for k in inp.kept() {
        cross += inp.reduced_jump[(k, k)].re * inp.xi[k].log2();
    }
    let ev = linalg::eigvalsh(&inp.reduced_jump);
    let self_term: f64 = ev.iter().filter(|&&r| r > EPS_EIG).map(|&r| r * r.log2()).sum();
    inp.gamma * (w * w.log2() + cross - self_term)
}

/// Expected entanglement change rate under homodyne detection at `phase`.
///
/// `phase` has the meaning it has in [`crate::propagators::homodyne_step`]
/// (measured quadrature of `c e^{iφ}`), so the first term is
/// `|e^{iφ} tr(cφ) + c.c.|²`.
pub fn rate_homodyne(inp: &RateInputs, phase: f64) -> f64 {
    let e = C64::from_polar(1.0, phase);
    let first = (e * inp.a0 + e.conj() * inp.a0.conj()).norm_sqr();
    let mut kern = 0.0;
    for k in inp.kept() {
        for l in inp.kept() {
            let m = e * inp.a_mat[(k, l)] + e.conj() * inp.a_mat[(l, k)].conj();
            kern += log_kernel(inp.xi[k], inp.xi[l]) * m.norm_sqr();
        }
    }
    inp.gamma * (first - kern) / (2.0 * LN_2)
}

/// Phase-averaged homodyne rate `γ(|a0|² − Σ K|a|²)/ln 2`.
pub fn rate_phase_average(inp: &RateInputs) -> f64 {
    inp.gamma * (inp.a0.norm_sqr() - inp.kernel_weight()) / LN_2
}

/// The homodyne rate is `u + v cos 2φ + w sin 2φ`; returns the minimizing
/// phase in `[0, π)` and the rate there.
pub fn optimal_phase(inp: &RateInputs) -> (f64, f64) {
    let f0 = rate_homodyne(inp, 0.0);
    let f4 = rate_homodyne(inp, FRAC_PI_4);
    let f2 = rate_homodyne(inp, FRAC_PI_2);
    let u = 0.5 * (f0 + f2);
    let v = 0.5 * (f0 - f2);
    let w = f4 - u;
    if v.abs() < 1e-300 && w.abs() < 1e-300 {
        return (0.0, f0);
    }
    let phi = (0.5 * (-w).atan2(-v)).rem_euclid(PI);
    let phi = if phi >= PI { 0.0 } else { phi };
    (phi, rate_homodyne(inp, phi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneralMeasurementParams {
    pub r: f64,
    pub s: f64,
    pub beta: f64,
}

impl GeneralMeasurementParams {
    pub fn new(r: f64, s: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) || !(0.0 <= r && r <= s) {
            return Err(Error::InvalidArgument(format!("need 0 ≤ r ≤ s ≤ 1, got r={r}, s={s}")));
        }
        Ok(Self { r, s, beta: reduce_phase(beta) })
    }
}

/// Rate of a general single-quantum measurement parameterized by `(r, β, s)`;
/// `s = 1` is the non-vacuum-resolving family.
pub fn rate_general(inp: &RateInputs, p: GeneralMeasurementParams, rate_num: f64, rate_hom_at_beta: f64) -> f64 {
    let r2 = p.r * p.r;
    let s2 = p.s * p.s;
    r2 * rate_hom_at_beta + (s2 - r2) * rate_phase_average(inp) + (1.0 - s2) * rate_num
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub choice: PropagatorChoice,
    pub predicted_rate: f64,
    pub rate_number: f64,
    pub rate_homodyne: f64,
}

/// Picks the propagator with the lower predicted rate (ties → homodyne).
pub fn choose_from_inputs(inp: &RateInputs) -> Decision {
    let num = rate_number(inp);
    let (phi, hom) = optimal_phase(inp);
    let choice = if num < hom - TIE_TOLERANCE {
        PropagatorChoice::Number
    } else {
        PropagatorChoice::homodyne(phi)
    };
    Decision {
        choice,
        predicted_rate: num.min(hom),
        rate_number: num,
        rate_homodyne: hom,
    }
}

pub fn choose_propagator(state: &MpsState, channel: &JumpChannel, cut: Cut) -> Result<Decision> {
    if channel.site >= state.n() {
        return Err(Error::SiteOutOfRange { site: channel.site, n: state.n() });
    }
    Ok(choose_from_inputs(&RateInputs::from_mps(state, channel, cut)?))
}
