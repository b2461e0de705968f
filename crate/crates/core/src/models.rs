//! Benchmark models and the Bell-pair analytic references.

use std::borrow::Cow;
use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dense::{DenseState, LocalOperatorSum, LocalTerm};
use crate::linalg::{self, ket_bra, kron, pauli_x, pauli_y, pauli_z, real, CMat};
use crate::mps::{MpsState, TruncationPolicy};
use crate::propagators::JumpChannel;
use crate::{Error, Result, C64};

#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    /// Product of computational basis states.
    Basis(Vec<usize>),
    /// `(|00⟩ + |11⟩)/√2`.
    Bell,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbcParams {
    /// Coupling variance α (a rate).
    pub alpha: f64,
    /// Dephasing rate γ.
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub includes_identity_term: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug)]
pub enum Dynamics {
    /// `H = 0`.
    Frozen,
    /// Time-independent local Hamiltonian.
    Static(LocalOperatorSum),
    /// Random Brownian circuit; couplings resampled every step.
    Rbc(RbcParams),
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    pub d: usize,
    pub channels: Vec<JumpChannel>,
    pub initial: InitialState,
    pub dynamics: Dynamics,
}

/// Gates of one coherent step, applied in order (even bonds, then odd).
pub enum GateSchedule {
    Empty,
    Static(Vec<(usize, CMat)>),
    Rbc { params: RbcParams, n: usize, dt: f64 },
}

impl GateSchedule {
    pub fn layer<R: Rng + ?Sized>(&self, rng: &mut R) -> Cow<'_, [(usize, CMat)]> {
        match self {
            GateSchedule::Empty => Cow::Borrowed(&[]),
            GateSchedule::Static(g) => Cow::Borrowed(g),
            GateSchedule::Rbc { params, n, dt } => Cow::Owned(rbc_layer(params, *n, *dt, rng)),
        }
    }
}

fn bond_order(n: usize) -> impl Iterator<Item = usize> {
    (0..n.saturating_sub(1)).step_by(2).chain((1..n.saturating_sub(1)).step_by(2))
}

impl ModelSpec {
    /// Two-site bond Hamiltonians with single-site terms folded in: interior
    /// sites give half to each neighbouring bond, boundary sites all to their
    /// only bond.
    pub fn bond_hamiltonians(&self) -> Result<Vec<CMat>> {
        let h = match &self.dynamics {
            Dynamics::Static(h) => h,
            _ => return Err(Error::InvalidArgument("model has no static Hamiltonian".into())),
        };
        fold_into_bonds(h, self.n, self.d)
    }

    pub fn gate_schedule(&self, dt: f64) -> Result<GateSchedule> {
        match &self.dynamics {
            Dynamics::Frozen => Ok(GateSchedule::Empty),
            Dynamics::Static(_) => {
                if self.n < 2 {
                    return Ok(GateSchedule::Empty);
                }
                let bonds = self.bond_hamiltonians()?;
                let gates = bond_order(self.n)
                    .map(|b| (b, linalg::expm_hermitian(&bonds[b], C64::new(0.0, -dt))))
                    .collect();
                Ok(GateSchedule::Static(gates))
            }
            Dynamics::Rbc(p) => Ok(GateSchedule::Rbc { params: *p, n: self.n, dt }),
        }
    }

    /// Hamiltonian for the master equation (static models only).
    pub fn hamiltonian(&self) -> Result<LocalOperatorSum> {
        match &self.dynamics {
            Dynamics::Frozen => Ok(LocalOperatorSum::default()),
            Dynamics::Static(h) => Ok(h.clone()),
            Dynamics::Rbc(_) => Err(Error::InvalidArgument("RBC has no static Hamiltonian".into())),
        }
    }

    pub fn initial_mps(&self, policy: TruncationPolicy) -> Result<MpsState> {
        match &self.initial {
            InitialState::Basis(levels) => MpsState::basis_product(self.n, self.d, levels, policy),
            InitialState::Bell => MpsState::from_state_vector(&bell_amplitudes(), 2, policy),
        }
    }

    pub fn initial_dense(&self) -> Result<DenseState> {
        match &self.initial {
            InitialState::Basis(levels) => DenseState::basis_product(self.n, self.d, levels),
            InitialState::Bell => DenseState::new(2, 2, bell_amplitudes()),
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.channels.iter().map(|c| c.rate).fold(0.0, f64::max)
    }

    /// Scales all channel rates (used for negative controls).
    pub fn with_rates_scaled(mut self, f: f64) -> Self {
        for c in &mut self.channels {
            c.rate *= f;
        }
        self
    }
}

fn bell_amplitudes() -> Vec<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    vec![real(s), real(0.0), real(0.0), real(s)]
}

/// Folds a sum of one- and two-site terms into `n-1` bond Hamiltonians.
pub fn fold_into_bonds(h: &LocalOperatorSum, n: usize, d: usize) -> Result<Vec<CMat>> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two sites".into()));
    }
    let id = linalg::identity(d);
    let mut bonds = vec![CMat::zeros(d * d, d * d); n - 1];
    for t in &h.terms {
        if t.op.nrows() == d {
            let s = t.site;
            if s >= n {
                return Err(Error::SiteOutOfRange { site: s, n });
            }
            let left = kron(&t.op, &id);
            let right = kron(&id, &t.op);
            if s == 0 {
                bonds[0] += left;
            } else if s == n - 1 {
                bonds[n - 2] += right;
            } else {
                bonds[s - 1] += right * real(0.5);
                bonds[s] += left * real(0.5);
            }
        } else if t.op.nrows() == d * d {
            if t.site + 1 >= n {
                return Err(Error::SiteOutOfRange { site: t.site + 1, n });
            }
            bonds[t.site] += &t.op;
        } else {
            return Err(Error::Dimension("only one- and two-site terms can be folded".into()));
        }
    }
    Ok(bonds)
}

/// Two qubits in a Bell state, `H = 0`, channels `|1⟩⟨1|` on both.
pub fn bell_model(gamma: f64) -> Result<ModelSpec> {
    let channels = (0..2)
        .map(|j| JumpChannel::new(j, ket_bra(2, 1, 1), gamma))
        .collect::<Result<_>>()?;
    Ok(ModelSpec {
        name: "bell".into(),
        n: 2,
        d: 2,
        channels,
        initial: InitialState::Bell,
        dynamics: Dynamics::Frozen,
    })
}

/// Open random Brownian circuit with `σz` dephasing, starting from all `|1⟩`.
pub fn rbc_model(n: usize, params: RbcParams) -> Result<ModelSpec> {
    if n < 2 || !(params.alpha >= 0.0) {
        return Err(Error::InvalidArgument("rbc needs n ≥ 2 and α ≥ 0".into()));
    }
    let channels = (0..n)
        .map(|j| JumpChannel::new(j, pauli_z(), params.gamma))
        .collect::<Result<_>>()?;
    Ok(ModelSpec {
        name: "rbc".into(),
        n,
        d: 2,
        channels,
        initial: InitialState::Basis(vec![1; n]),
        dynamics: Dynamics::Rbc(params),
    })
}

/// Samples one coherent RBC step: per bond 16 couplings `G ~ N(0, α/dt)`
/// and the gate `exp(−i dt Σ G^{kl} σ^k⊗σ^l)`.
pub fn rbc_layer<R: Rng + ?Sized>(p: &RbcParams, n: usize, dt: f64, rng: &mut R) -> Vec<(usize, CMat)> {
    let paulis = [linalg::identity(2), pauli_x(), pauli_y(), pauli_z()];
    let sd = (p.alpha / dt).sqrt();
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for b in bond_order(n) {
        let mut h = CMat::zeros(4, 4);
        for k in 0..4 {
            for l in 0..4 {
                let z: f64 = rng.sample(StandardNormal);
                if k == 0 && l == 0 && !p.includes_identity_term {
                    continue;
                }
                h += kron(&paulis[k], &paulis[l]) * real(sd * z);
            }
        }
        out.push((b, linalg::expm_hermitian(&h, C64::new(0.0, -dt))));
    }
    out
}

/// `H = Σ[h σz − g σx] + Σ J σzσz` with decay `|0⟩⟨1|`, from all `|1⟩`.
pub fn ising_model(h: f64, g: f64, j: f64, gamma: f64, n: usize) -> Result<ModelSpec> {
    if n < 2 {
        return Err(Error::InvalidArgument("ising needs n ≥ 2".into()));
    }
    let mut terms = Vec::new();
    for s in 0..n {
        terms.push(LocalTerm::new(s, pauli_z() * real(h) - pauli_x() * real(g)));
    }
    for s in 0..n - 1 {
        terms.push(LocalTerm::new(s, kron(&pauli_z(), &pauli_z()) * real(j)));
    }
    let channels = (0..n)
        .map(|s| JumpChannel::new(s, ket_bra(2, 0, 1), gamma))
        .collect::<Result<_>>()?;
    Ok(ModelSpec {
        name: "ising".into(),
        n,
        d: 2,
        channels,
        initial: InitialState::Basis(vec![1; n]),
        dynamics: Dynamics::Static(LocalOperatorSum { terms }),
    })
}

/// Levels of the three-level EIT atom.
pub const G1: usize = 0;
pub const G2: usize = 1;
pub const R: usize = 2;

/// `σz₁ = |r⟩⟨r| − |g₁⟩⟨g₁|`.
pub fn eit_sigma_z1() -> CMat {
    ket_bra(3, R, R) - ket_bra(3, G1, G1)
}

/// Three-level chain driven on `g₁↔r` and `g₂↔r`, with `|r⟩⟨r|` dephasing,
/// starting from all atoms in `g₁`.
pub fn eit_model(omega1: f64, omega2: f64, v: f64, gamma: f64, n: usize) -> Result<ModelSpec> {
    if n < 2 {
        return Err(Error::InvalidArgument("eit needs n ≥ 2".into()));
    }
    let sx = |g: usize| ket_bra(3, g, R) + ket_bra(3, R, g);
    let single = (sx(G1) * real(omega1 / 2.0) + sx(G2) * real(omega2 / 2.0)) * real(-1.0);
    let z1 = eit_sigma_z1();
    let mut terms: Vec<LocalTerm> = (0..n).map(|s| LocalTerm::new(s, single.clone())).collect();
    for s in 0..n - 1 {
        terms.push(LocalTerm::new(s, kron(&z1, &z1) * real(v)));
    }
    let channels = (0..n)
        .map(|s| JumpChannel::new(s, ket_bra(3, R, R), gamma))
        .collect::<Result<_>>()?;
    Ok(ModelSpec {
        name: "eit".into(),
        n,
        d: 3,
        channels,
        initial: InitialState::Basis(vec![G1; n]),
        dynamics: Dynamics::Static(LocalOperatorSum { terms }),
    })
}

/// Closed forms for the monitored Bell pair.
pub mod bell_analytics {
    use super::*;

    /// `σ(s) = [(1+e^{−s}) ln(1+e^{−s}) + s e^{−s}] / (2 ln 2)`.
    pub fn sigma(s: f64) -> f64 {
        if s >= 0.0 {
            let e = (-s).exp();
            ((1.0 + e) * e.ln_1p() + s * e) / (2.0 * LN_2)
        } else {
            // Same expression rewritten with e^{s} to avoid cancellation.
            let x = s.exp();
            (-s + (1.0 + 1.0 / x) * x.ln_1p()) / (2.0 * LN_2)
        }
    }

    /// Counting unravelling: `σ(2γt)`.
    pub fn eaee_number(gamma_t: f64) -> Result<f64> {
        if gamma_t < 0.0 {
            return Err(Error::InvalidArgument("negative time".into()));
        }
        Ok(sigma(2.0 * gamma_t))
    }

    /// Homodyne unravelling with phases `φ1, φ2`: the Gaussian average of
    /// `σ` with mean `2τ` and variance `4τ`, `τ = γt(cos²φ1 + cos²φ2)`,
    /// integrated over the whole real line.
    pub fn eaee_homodyne(gamma_t: f64, phi1: f64, phi2: f64) -> Result<f64> {
        if gamma_t < 0.0 {
            return Err(Error::InvalidArgument("negative time".into()));
        }
        let tau = gamma_t * (phi1.cos().powi(2) + phi2.cos().powi(2));
        Ok(gaussian_average_sigma(tau))
    }

    /// `E[σ(2τ + 2√τ z)]`, `z ~ N(0,1)`, by composite Simpson on `|z| ≤ 12`.
    pub fn gaussian_average_sigma(tau: f64) -> f64 {
        if tau <= 0.0 {
            return sigma(0.0);
        }
        let m = 8000usize;
        let (a, b) = (-12.0f64, 12.0f64);
        let h = (b - a) / m as f64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let f = |z: f64| norm * (-0.5 * z * z).exp() * sigma(2.0 * tau + 2.0 * tau.sqrt() * z);
        let mut acc = f(a) + f(b);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    /// Entanglement of formation of the dephased Bell pair.
    pub fn e_formation(gamma_t: f64) -> Result<f64> {
        if gamma_t < 0.0 {
            return Err(Error::InvalidArgument("negative time".into()));
        }
        let r = (1.0 - (-2.0 * gamma_t).exp()).max(0.0).sqrt();
        let rp = 0.5 * (1.0 + r);
        let rm = 0.5 * (1.0 - r);
        Ok(linalg::entropy_bits(&[rp, rm], 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::bell_analytics::*;
    use super::*;

    #[test]
    fn sigma_at_zero_is_one() {
        assert!((sigma(0.0) - 1.0).abs() < 1e-15);
        assert!(eaee_number(50.0).unwrap() < 1e-20);
    }

    #[test]
    fn number_slope_at_origin() {
        let h = 1e-6;
        let slope = (eaee_number(h).unwrap() - eaee_number(0.0).unwrap()) / h;
        assert!((slope + 1.0).abs() < 1e-4);
    }

    #[test]
    fn homodyne_tau_zero_limit() {
        assert!((eaee_homodyne(0.0, 0.0, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((gaussian_average_sigma(1e-8) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn folded_bonds_sum_to_hamiltonian() {
        let m = ising_model(-0.5, 2.5, 0.5, 1.0, 4).unwrap();
        let h = m.hamiltonian().unwrap();
        let bonds = m.bond_hamiltonians().unwrap();
        let terms = LocalOperatorSum {
            terms: bonds.into_iter().enumerate().map(|(b, op)| LocalTerm::new(b, op)).collect(),
        };
        let diff = terms.to_dense(4, 2) - h.to_dense(4, 2);
        assert!(linalg::frobenius(&diff) < 1e-12);
    }

    #[test]
    fn zero_alpha_gives_identity_gates() {
        let p = RbcParams { alpha: 0.0, gamma: 1.0, includes_identity_term: true };
        let mut rng = rand::rng();
        for (_, g) in rbc_layer(&p, 5, 0.01, &mut rng) {
            assert!(linalg::frobenius(&(g - linalg::identity(4))) < 1e-14);
        }
    }
}
