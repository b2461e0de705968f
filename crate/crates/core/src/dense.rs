//! Exact dense reference implementation for small chains.
//!
//! Basis ordering matches [`crate::mps::MpsState::to_dense`]: site 0 is the
//! most significant digit of the basis index.

use std::borrow::Cow;

use nalgebra::DMatrix;

use crate::linalg::{self, CMat};
use crate::mps::Cut;
use crate::propagators::{self, JumpChannel, PreparedChannel, PropagatorChoice, StochasticDraw, TrajectoryBackend};
use crate::{Error, Result, C64};

/// An operator acting on `k` consecutive sites starting at `site`.
#[derive(Clone, Debug)]
pub struct LocalTerm {
    pub site: usize,
    pub op: CMat,
}

impl LocalTerm {
    pub fn new(site: usize, op: CMat) -> Self {
        Self { site, op }
    }

    fn width(&self, d: usize) -> usize {
        let mut k = 0;
        let mut m = 1;
        while m < self.op.nrows() {
            m *= d;
            k += 1;
        }
        k
    }
}

/// A Hamiltonian written as a sum of local terms.
#[derive(Clone, Debug, Default)]
pub struct LocalOperatorSum {
    pub terms: Vec<LocalTerm>,
}

impl LocalOperatorSum {
    pub fn to_dense(&self, n: usize, d: usize) -> CMat {
        let dim = d.pow(n as u32);
        let mut h = CMat::zeros(dim, dim);
        for t in &self.terms {
            let k = t.width(d);
            let left = linalg::identity(d.pow(t.site as u32));
            let right = linalg::identity(d.pow((n - t.site - k) as u32));
            h += linalg::kron(&linalg::kron(&left, &t.op), &right);
        }
        h
    }
}

/// Source of the (possibly time-dependent) Hamiltonian for [`integrate_me`].
pub trait HamiltonianAt {
    fn at(&self, t: f64) -> Cow<'_, LocalOperatorSum>;
}

impl HamiltonianAt for LocalOperatorSum {
    fn at(&self, _t: f64) -> Cow<'_, LocalOperatorSum> {
        Cow::Borrowed(self)
    }
}

/// Applies a `k`-site operator in place to a vector in the `d^n` space.
pub fn apply_local_vec(x: &mut [C64], n: usize, d: usize, site: usize, op: &CMat) {
    let dk = op.nrows();
    let mut k = 0;
    let mut m = 1;
    while m < dk {
        m *= d;
        k += 1;
    }
    debug_assert!(site + k <= n);
    let inner = d.pow((n - site - k) as u32);
    let outer = d.pow(site as u32);
    let mut v = vec![C64::new(0.0, 0.0); dk];
    for o in 0..outer {
        let base = o * dk * inner;
        for i in 0..inner {
            for (a, slot) in v.iter_mut().enumerate() {
                *slot = x[base + a * inner + i];
            }
            for a in 0..dk {
                let mut acc = C64::new(0.0, 0.0);
                for (b, vb) in v.iter().enumerate() {
                    acc += op[(a, b)] * vb;
                }
                x[base + a * inner + i] = acc;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseState {
    pub n: usize,
    pub d: usize,
    pub amps: Vec<C64>,
}

impl DenseState {
    pub fn new(n: usize, d: usize, amps: Vec<C64>) -> Result<Self> {
        if amps.len() != d.pow(n as u32) {
            return Err(Error::Dimension(format!("{} amplitudes for {n} sites of dim {d}", amps.len())));
        }
        let mut s = Self { n, d, amps };
        s.normalize()?;
        Ok(s)
    }

    pub fn basis_product(n: usize, d: usize, levels: &[usize]) -> Result<Self> {
        if levels.len() != n || levels.iter().any(|&l| l >= d) {
            return Err(Error::InvalidArgument("bad basis levels".into()));
        }
        let idx = levels.iter().fold(0usize, |acc, &l| acc * d + l);
        let mut amps = vec![C64::new(0.0, 0.0); d.pow(n as u32)];
        amps[idx] = C64::new(1.0, 0.0);
        Ok(Self { n, d, amps })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn normalize(&mut self) -> Result<f64> {
        let w = self.norm_sqr();
        if !(w > 1e-300) || !w.is_finite() {
            return Err(Error::NonFinite(format!("state norm² {w}")));
        }
        let f = 1.0 / w.sqrt();
        for z in &mut self.amps {
            *z *= f;
        }
        Ok(w)
    }

    pub fn apply_local(&mut self, site: usize, op: &CMat) {
        apply_local_vec(&mut self.amps, self.n, self.d, site, op);
    }

    pub fn expectation_local(&self, site: usize, op: &CMat) -> C64 {
        let mut y = self.amps.clone();
        apply_local_vec(&mut y, self.n, self.d, site, op);
        self.amps.iter().zip(&y).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn expectation_product(&self, ops: &[(usize, &CMat)]) -> C64 {
        let mut y = self.amps.clone();
        for (s, o) in ops {
            apply_local_vec(&mut y, self.n, self.d, *s, o);
        }
        self.amps.iter().zip(&y).map(|(a, b)| a.conj() * b).sum()
    }

    /// Reduced density matrix of sites `0..b`.
    pub fn reduced_density_matrix(&self, cut: Cut) -> CMat {
        let da = self.d.pow(cut.b() as u32);
        let db = self.amps.len() / da;
        let m = CMat::from_row_slice(da, db, &self.amps);
        &m * m.adjoint()
    }

    /// Von Neumann entropy in bits across a cut.
    pub fn entanglement_entropy(&self, cut: Cut) -> f64 {
        let ev = linalg::eigvalsh(&self.reduced_density_matrix(cut));
        linalg::entropy_bits(&ev, crate::mps::EPS_EIG)
    }

    pub fn to_density_matrix(&self) -> DenseDensityMatrix {
        let v = nalgebra::DVector::from_column_slice(&self.amps);
        DenseDensityMatrix {
            n: self.n,
            d: self.d,
            rho: &v * v.adjoint(),
        }
    }

    pub fn fidelity(&self, other: &DenseState) -> f64 {
        let o: C64 = self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum();
        o.norm_sqr()
    }
}

impl TrajectoryBackend for DenseState {
    fn n_sites(&self) -> usize {
        self.n
    }

    fn local_dim(&self) -> usize {
        self.d
    }

    fn expectation(&self, site: usize, op: &CMat) -> Result<C64> {
        if site >= self.n {
            return Err(Error::SiteOutOfRange { site, n: self.n });
        }
        Ok(self.expectation_local(site, op))
    }

    fn apply_single_site(&mut self, site: usize, op: &CMat, renormalize: bool) -> Result<f64> {
        if site >= self.n {
            return Err(Error::SiteOutOfRange { site, n: self.n });
        }
        self.apply_local(site, op);
        if renormalize {
            self.normalize()
        } else {
            Ok(self.norm_sqr())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseDensityMatrix {
    pub n: usize,
    pub d: usize,
    pub rho: CMat,
}

impl DenseDensityMatrix {
    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn expectation(&self, ops: &[(usize, &CMat)]) -> C64 {
        // tr(O ρ) with O applied column by column.
        let mut m = self.rho.clone();
        for (s, o) in ops {
            apply_left(&mut m, self.n, self.d, *s, o);
        }
        m.trace()
    }

    /// Connected correlator `⟨A_i B_j⟩ − ⟨A_i⟩⟨B_j⟩`.
    pub fn connected(&self, i: usize, a: &CMat, j: usize, b: &CMat) -> f64 {
        (self.expectation(&[(i, a), (j, b)]) - self.expectation(&[(i, a)]) * self.expectation(&[(j, b)])).re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::eigvalsh(&self.rho).first().copied().unwrap_or(0.0)
    }
}

fn apply_left(m: &mut CMat, n: usize, d: usize, site: usize, op: &CMat) {
    let dim = m.nrows();
    let data = m.as_mut_slice();
    for col in data.chunks_mut(dim) {
        apply_local_vec(col, n, d, site, op);
    }
}

/// Lindbladian `−i[H,ρ] + Σ γ (c ρ c† − ½{c†c, ρ})` for Hermitian `ρ`.
pub fn lindblad_rhs(rho: &DenseDensityMatrix, h: &LocalOperatorSum, channels: &[JumpChannel]) -> Result<CMat> {
    let (n, d) = (rho.n, rho.d);
    let dim = d.pow(n as u32);
    if rho.rho.shape() != (dim, dim) {
        return Err(Error::Dimension("density matrix shape".into()));
    }
    for t in &h.terms {
        if t.site + t.width(d) > n {
            return Err(Error::Dimension("Hamiltonian term exceeds chain".into()));
        }
    }
    for c in channels {
        if c.site >= n || c.op.shape() != (d, d) {
            return Err(Error::Dimension("jump channel".into()));
        }
    }
    let mut hr = CMat::zeros(dim, dim);
    for t in &h.terms {
        let mut x = rho.rho.clone();
        apply_left(&mut x, n, d, t.site, &t.op);
        hr += x;
    }
    let mi = C64::new(0.0, -1.0);
    let mut out = (&hr - hr.adjoint()) * mi;
    for c in channels {
        if c.rate == 0.0 {
            continue;
        }
        let mut cr = rho.rho.clone();
        apply_left(&mut cr, n, d, c.site, &c.op);
        let mut crc = cr.adjoint();
        apply_left(&mut crc, n, d, c.site, &c.op);
        let cc = c.op.adjoint() * &c.op;
        let mut y = rho.rho.clone();
        apply_left(&mut y, n, d, c.site, &cc);
        let g = C64::new(c.rate, 0.0);
        out += (crc - (&y + y.adjoint()) * C64::new(0.5, 0.0)) * g;
    }
    Ok(out)
}

/// Fixed-step RK4 integration of the master equation.
///
/// Returns `ρ(t)` at each requested sample time (each rounded to the step
/// grid). Aborts when the trace drifts by more than 1e−6.
pub fn integrate_me(
    rho0: &DenseDensityMatrix,
    h: &dyn HamiltonianAt,
    channels: &[JumpChannel],
    dt: f64,
    sample_times: &[f64],
) -> Result<Vec<DenseDensityMatrix>> {
    let (n, d) = (rho0.n, rho0.d);
    if n as f64 * (d as f64).log2() > 20.0 + 1e-9 {
        return Err(Error::InvalidArgument("integrate_me: system too large".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let steps: Vec<usize> = sample_times.iter().map(|t| (t / dt).round() as usize).collect();
    if steps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sample times must be non-decreasing".into()));
    }
    let mut out = Vec::with_capacity(steps.len());
    let mut rho = rho0.clone();
    let tr0 = rho.trace();
    let mut k = 0usize;
    let wrap = |m: CMat| DenseDensityMatrix { n, d, rho: m };
    for &target in &steps {
        while k < target {
            let t = k as f64 * dt;
            let hh = h.at(t);
            let hm = h.at(t + 0.5 * dt);
            let he = h.at(t + dt);
            let k1 = lindblad_rhs(&rho, &hh, channels)?;
            let k2 = lindblad_rhs(&wrap(&rho.rho + &k1 * C64::new(0.5 * dt, 0.0)), &hm, channels)?;
            let k3 = lindblad_rhs(&wrap(&rho.rho + &k2 * C64::new(0.5 * dt, 0.0)), &hm, channels)?;
            let k4 = lindblad_rhs(&wrap(&rho.rho + &k3 * C64::new(dt, 0.0)), &he, channels)?;
            let incr = (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(dt / 6.0, 0.0);
            rho.rho += incr;
            rho.rho = linalg::hermitize(&rho.rho);
            let drift = (rho.trace() - tr0).abs();
            if drift > 1e-6 || !drift.is_finite() {
                return Err(Error::TraceDrift(drift));
            }
            k += 1;
        }
        out.push(rho.clone());
    }
    Ok(out)
}

/// Wootters entanglement of formation (bits) of a two-qubit state.
pub fn entanglement_of_formation_2q(rho: &CMat) -> Result<f64> {
    if rho.shape() != (4, 4) {
        return Err(Error::Dimension("two-qubit density matrix expected".into()));
    }
    let (vals, vecs) = linalg::eigh(rho);
    if vals[0] < -1e-8 {
        return Err(Error::InvalidArgument(format!("negative eigenvalue {}", vals[0])));
    }
    let sq = {
        let mut s = vecs.clone();
        for (j, &l) in vals.iter().enumerate() {
            let r = l.max(0.0).sqrt();
            for i in 0..4 {
                s[(i, j)] *= r;
            }
        }
        s * vecs.adjoint()
    };
    let yy = linalg::kron(&linalg::pauli_y(), &linalg::pauli_y());
    let tilde = &yy * rho.map(|z| z.conj()) * &yy;
    let m = &sq * tilde * &sq;
    let mut l: Vec<f64> = linalg::eigvalsh(&m).iter().map(|x| x.max(0.0).sqrt()).collect();
    l.sort_by(|a, b| b.total_cmp(a));
    let c = (l[0] - l[1] - l[2] - l[3]).max(0.0).min(1.0);
    let r = 0.5 * (1.0 + (1.0 - c * c).max(0.0).sqrt());
    Ok(linalg::entropy_bits(&[r, 1.0 - r], 0.0))
}

/// One full step on a dense state: the stochastic layer (channels in the
/// given order) followed by the coherent layer of two-site unitaries.
pub fn dense_trajectory_step(
    state: &mut DenseState,
    channels: &[PreparedChannel],
    choices: &[PropagatorChoice],
    draws: &[StochasticDraw],
    gates: &[(usize, CMat)],
) -> Result<()> {
    if channels.len() != choices.len() || choices.len() != draws.len() {
        return Err(Error::Dimension("channels/choices/draws length".into()));
    }
    for ((ch, choice), draw) in channels.iter().zip(choices).zip(draws) {
        propagators::apply_choice(state, ch, *choice, *draw)?;
    }
    for (site, g) in gates {
        state.apply_local(*site, g);
    }
    Ok(())
}

/// One conditional outcome of the two-qubit measurement example.
#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub label: String,
    pub probability: f64,
    pub state: DenseState,
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct ToyEnsemble {
    pub name: &'static str,
    pub outcomes: Vec<ToyOutcome>,
}

impl ToyEnsemble {
    pub fn average_entropy(&self) -> f64 {
        self.outcomes.iter().map(|o| o.probability * o.entropy).sum()
    }

    pub fn average_state(&self) -> CMat {
        let mut m = CMat::zeros(4, 4);
        for o in &self.outcomes {
            m += o.state.to_density_matrix().rho * C64::new(o.probability, 0.0);
        }
        m
    }
}

/// The two-qubit example: system `½(|00⟩+|01⟩+|10⟩−|11⟩)`, each qubit copied
/// onto an environment qubit by a CNOT, then the environment measured with
/// three strategies (computational basis, ± basis, adaptive).
pub fn toy_example_decompositions() -> Vec<ToyEnsemble> {
    let h = C64::new(0.5, 0.0);
    let sys = [h, h, h, -h];
    // Order (S1, S2, E1, E2); after CNOTs amplitude of |ab ab⟩ is sys[ab].
    let mut full = vec![C64::new(0.0, 0.0); 16];
    for ab in 0..4 {
        full[ab * 4 + ab] = sys[ab];
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let comp = |o: usize| -> [C64; 2] {
        if o == 0 {
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)]
        } else {
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
        }
    };
    let pm = |o: usize| -> [C64; 2] {
        if o == 0 {
            [C64::new(s, 0.0), C64::new(s, 0.0)]
        } else {
            [C64::new(s, 0.0), C64::new(-s, 0.0)]
        }
    };
    let project = |b1: [C64; 2], b2: [C64; 2]| -> (f64, DenseState) {
        let mut v = vec![C64::new(0.0, 0.0); 4];
        for (sidx, slot) in v.iter_mut().enumerate() {
            for e1 in 0..2 {
                for e2 in 0..2 {
                    *slot += b1[e1].conj() * b2[e2].conj() * full[sidx * 4 + e1 * 2 + e2];
                }
            }
        }
        let p: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        (p, DenseState::new(2, 2, v).expect("nonzero outcome"))
    };
    let cut = Cut::new(1, 2).expect("cut");
    let mk = |label: String, (p, st): (f64, DenseState)| ToyOutcome {
        entropy: st.entanglement_entropy(cut),
        label,
        probability: p,
        state: st,
    };
    let sign = |o: usize| if o == 0 { '+' } else { '-' };
    let mut s1 = Vec::new();
    let mut s2 = Vec::new();
    let mut s3 = Vec::new();
    for o1 in 0..2 {
        for o2 in 0..2 {
            s1.push(mk(format!("{o1}{o2}"), project(comp(o1), comp(o2))));
            s2.push(mk(format!("{}{}", sign(o1), sign(o2)), project(pm(o1), pm(o2))));
            let lab = if o1 == 0 { format!("0{o2}") } else { format!("1{}", sign(o2)) };
            let b2 = if o1 == 0 { comp(o2) } else { pm(o2) };
            s3.push(mk(lab, project(comp(o1), b2)));
        }
    }
    vec![
        ToyEnsemble { name: "computational", outcomes: s1 },
        ToyEnsemble { name: "plus-minus", outcomes: s2 },
        ToyEnsemble { name: "adaptive", outcomes: s3 },
    ]
}

/// Full unitary from a list of two-site gates (for small checks).
pub fn gates_to_dense(n: usize, d: usize, gates: &[(usize, CMat)]) -> CMat {
    let dim = d.pow(n as u32);
    let mut u: CMat = DMatrix::identity(dim, dim);
    for (s, g) in gates {
        apply_left(&mut u, n, d, *s, g);
    }
    u
}
