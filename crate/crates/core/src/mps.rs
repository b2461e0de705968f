//! Matrix product states in Vidal's Γλ form.
//!
//! The state is stored as `B_j = Γ_j λ_j` together with the Schmidt values
//! `λ_j` of every bond (`λ` of the last site is the scalar 1):
//!
//! ```text
//!   ψ = Γ_0 λ_0 Γ_1 λ_1 ... λ_{n-2} Γ_{n-1}
//!     = B_0 B_1 ... B_{n-1}
//!
//!        p            p
//!        |            |
//!   α ──[B_j]── β  = α ──[Γ_j]──(λ_j)── β
//! ```
//!
//! In canonical form every `B_j` is right-isometric and `λ_j` holds the exact
//! Schmidt coefficients across bond `j`, so local quantities never need the
//! inverse of `λ`. Γ is recovered on request with clamped division.
//!
//! Tensor index order is (left bond, physical, right bond), row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::linalg::{self, mul, svd, CMat};
use crate::{Error, Result, C64};

/// Singular values below this are always treated as zero.
pub const SV_HARD_FLOOR: f64 = 1e-14;
/// Divisor clamp used when exposing Γ tensors.
pub const LAMBDA_CLAMP: f64 = 1e-12;
/// Schmidt weights below this are ignored in entropies and rates.
pub const EPS_EIG: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 8] = b"EOQTMPS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub dl: usize,
    pub d: usize,
    pub dr: usize,
    pub data: Vec<C64>,
}

impl Tensor3 {
    pub fn zeros(dl: usize, d: usize, dr: usize) -> Self {
        Self {
            dl,
            d,
            dr,
            data: vec![C64::new(0.0, 0.0); dl * d * dr],
        }
    }

    #[inline]
    pub fn idx(&self, a: usize, p: usize, b: usize) -> usize {
        (a * self.d + p) * self.dr + b
    }

    #[inline]
    pub fn get(&self, a: usize, p: usize, b: usize) -> C64 {
        self.data[self.idx(a, p, b)]
    }

    /// `(dl·d) × dr` matrix view (copied).
    pub fn left_matrix(&self) -> CMat {
        CMat::from_row_slice(self.dl * self.d, self.dr, &self.data)
    }

    /// `dl × (d·dr)` matrix view (copied).
    pub fn right_matrix(&self) -> CMat {
        CMat::from_row_slice(self.dl, self.d * self.dr, &self.data)
    }

    pub fn from_left_matrix(m: &CMat, d: usize) -> Self {
        let (rows, dr) = m.shape();
        Self {
            dl: rows / d,
            d,
            dr,
            data: row_major(m),
        }
    }

    pub fn from_right_matrix(m: &CMat, d: usize) -> Self {
        let (dl, cols) = m.shape();
        Self {
            dl,
            d,
            dr: cols / d,
            data: row_major(m),
        }
    }

    /// Matrix `B^p` for physical index `p`.
    pub fn slice(&self, p: usize) -> CMat {
        CMat::from_fn(self.dl, self.dr, |a, b| self.get(a, p, b))
    }

    /// Applies `op` on the physical index: `B'^p = Σ_q op[p,q] B^q`.
    pub fn apply_physical(&self, op: &CMat) -> Self {
        let mut out = Self::zeros(self.dl, self.d, self.dr);
        for a in 0..self.dl {
            for p in 0..self.d {
                for q in 0..self.d {
                    let o = op[(p, q)];
                    if o == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let src = self.idx(a, q, 0);
                    let dst = out.idx(a, p, 0);
                    for b in 0..self.dr {
                        out.data[dst + b] += o * self.data[src + b];
                    }
                }
            }
        }
        out
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    fn scale(&mut self, f: f64) {
        for z in &mut self.data {
            *z *= f;
        }
    }
}

fn row_major(m: &CMat) -> Vec<C64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

/// Bipartition `A = sites 0..b`, `B = sites b..n`, with `1 ≤ b ≤ n-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cut(usize);

impl Cut {
    pub fn new(b: usize, n: usize) -> Result<Self> {
        if b == 0 || b >= n {
            return Err(Error::InvalidCut { cut: b, n });
        }
        Ok(Cut(b))
    }

    /// Half-chain cut `b = n/2`.
    pub fn half(n: usize) -> Result<Self> {
        Self::new(n / 2, n)
    }

    /// Number of sites in `A`.
    pub fn b(self) -> usize {
        self.0
    }

    /// Index into the bond list.
    pub fn bond(self) -> usize {
        self.0 - 1
    }

    pub fn contains_a(self, site: usize) -> bool {
        site < self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationPolicy {
    pub chi_max: usize,
    /// Singular values (of the normalized state) below this are dropped.
    pub trunc_threshold: f64,
    /// Optional cap on the relative weight discarded per bond update.
    pub max_discarded_weight: Option<f64>,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            chi_max: 64,
            trunc_threshold: 1e-10,
            max_discarded_weight: None,
        }
    }
}

impl TruncationPolicy {
    pub fn with_chi(chi_max: usize) -> Self {
        Self {
            chi_max,
            ..Self::default()
        }
    }

    /// Number of singular values kept (always ≥ 1).
    pub fn keep(&self, s: &[f64]) -> usize {
        let total: f64 = s.iter().map(|x| x * x).sum();
        if total <= 0.0 {
            return 1;
        }
        let norm = total.sqrt();
        let floor = self.trunc_threshold.max(SV_HARD_FLOOR);
        let mut k = s.iter().take_while(|&&x| x / norm >= floor).count();
        k = k.min(self.chi_max.max(1));
        if let Some(w) = self.max_discarded_weight {
            let mut tail = 0.0;
            let mut kk = s.len();
            while kk > 1 {
                let t = tail + s[kk - 1] * s[kk - 1];
                if t / total > w {
                    break;
                }
                tail = t;
                kk -= 1;
            }
            k = k.min(kk);
        }
        k.max(1)
    }
}

#[derive(Clone, Debug)]
pub struct MpsState {
    n: usize,
    d: usize,
    tensors: Vec<Tensor3>,
    lambdas: Vec<Vec<f64>>,
    pub policy: TruncationPolicy,
    /// Recanonicalize transparently instead of failing on non-canonical input.
    pub auto_canonicalize: bool,
    canonical: bool,
    /// Orthogonality center of an open layer sweep (see [`MpsState::advance_center`]).
    center: Option<usize>,
    discarded: f64,
}

/// Schmidt-basis matrix elements of a jump operator relative to a cut.
///
/// For a site in `B` the basis is the Schmidt basis of `A`:
/// `a_mat[k,l] = ⟨ξ_k| tr_B(c φ) |ξ_l⟩`, `reduced_jump[k,l] = ⟨ξ_k| tr_B(c φ c†) |ξ_l⟩`.
/// For a site in `A` the roles of `A` and `B` are exchanged.
#[derive(Clone, Debug)]
pub struct SchmidtBlock {
    pub xi: Vec<f64>,
    pub a_mat: CMat,
    pub reduced_jump: CMat,
    pub a0: C64,
    pub jump_weight: f64,
}

impl MpsState {
    pub fn product_state(d: usize, kets: &[Vec<C64>], policy: TruncationPolicy) -> Result<Self> {
        if kets.is_empty() {
            return Err(Error::InvalidArgument("empty chain".into()));
        }
        let mut tensors = Vec::with_capacity(kets.len());
        for (j, k) in kets.iter().enumerate() {
            if k.len() != d {
                return Err(Error::Dimension(format!("ket {j} has length {} != {d}", k.len())));
            }
            let nrm: f64 = k.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::InvalidArgument(format!("ket {j} has zero norm")));
            }
            tensors.push(Tensor3 {
                dl: 1,
                d,
                dr: 1,
                data: k.iter().map(|z| z / nrm).collect(),
            });
        }
        let n = kets.len();
        Ok(Self {
            n,
            d,
            tensors,
            lambdas: vec![vec![1.0]; n - 1],
            policy,
            auto_canonicalize: false,
            canonical: true,
            center: None,
            discarded: 0.0,
        })
    }

    /// Product state with every site in basis state `level`.
    pub fn basis_product(n: usize, d: usize, levels: &[usize], policy: TruncationPolicy) -> Result<Self> {
        if levels.len() != n {
            return Err(Error::Dimension("levels length".into()));
        }
        let kets: Vec<Vec<C64>> = levels
            .iter()
            .map(|&l| {
                let mut v = vec![C64::new(0.0, 0.0); d];
                if l < d {
                    v[l] = C64::new(1.0, 0.0);
                }
                v
            })
            .collect();
        if levels.iter().any(|&l| l >= d) {
            return Err(Error::InvalidArgument("basis level out of range".into()));
        }
        Self::product_state(d, &kets, policy)
    }

    /// Exact MPS of a normalized state vector (site 0 is the most
    /// significant digit). Only numerically zero Schmidt values are dropped.
    pub fn from_state_vector(psi: &[C64], d: usize, policy: TruncationPolicy) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidArgument("local dimension must be ≥ 2".into()));
        }
        let mut n = 0;
        let mut len = 1usize;
        while len < psi.len() {
            len *= d;
            n += 1;
        }
        if len != psi.len() || n == 0 {
            return Err(Error::Dimension(format!("length {} is not a power of {d}", psi.len())));
        }
        let nrm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (nrm - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("state norm {nrm} != 1")));
        }
        let mut tensors = vec![Tensor3::zeros(1, d, 1); n];
        let mut lambdas = vec![Vec::new(); n.saturating_sub(1)];
        // Row index: sites 0..j, column index: (site j, right bond).
        let mut m = CMat::from_row_slice(len / d, d, psi);
        for j in (1..n).rev() {
            let dec = svd(m);
            let total: f64 = dec.s.iter().map(|x| x * x).sum::<f64>().sqrt();
            let k = dec
                .s
                .iter()
                .take_while(|&&x| x / total >= SV_HARD_FLOOR)
                .count()
                .max(1);
            let vt = dec.vt.rows(0, k).into_owned();
            tensors[j] = Tensor3::from_right_matrix(&vt, d);
            lambdas[j - 1] = dec.s[..k].iter().map(|x| x / total).collect();
            let mut us = dec.u.columns(0, k).into_owned();
            for c in 0..k {
                for r in 0..us.nrows() {
                    us[(r, c)] *= dec.s[c];
                }
            }
            // (sites 0..j) × k  ->  (sites 0..j-1) × (d·k)
            let rows = us.nrows() / d;
            let flat = row_major(&us);
            m = CMat::from_row_slice(rows, d * k, &flat);
        }
        let t0 = Tensor3::from_right_matrix(&m, d);
        let mut t0 = t0;
        let nn = t0.norm_sqr().sqrt();
        t0.scale(1.0 / nn);
        tensors[0] = t0;
        Ok(Self {
            n,
            d,
            tensors,
            lambdas,
            policy,
            auto_canonicalize: false,
            canonical: true,
            center: None,
            discarded: 0.0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    /// Cumulative relative weight discarded by truncation.
    pub fn discarded_weight(&self) -> f64 {
        self.discarded
    }

    pub fn tensor(&self, site: usize) -> &Tensor3 {
        &self.tensors[site]
    }

    /// Schmidt values of bond `j` (between sites `j` and `j+1`).
    pub fn lambda(&self, bond: usize) -> &[f64] {
        &self.lambdas[bond]
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.lambdas.iter().map(Vec::len).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.lambdas.iter().map(Vec::len).max().unwrap_or(1)
    }

    /// Γ tensor of a site, `Γ_j = B_j λ_j^{-1}` with divisors clamped.
    pub fn gamma(&self, site: usize) -> Tensor3 {
        let mut t = self.tensors[site].clone();
        if site + 1 < self.n {
            let lam = &self.lambdas[site];
            for a in 0..t.dl {
                for p in 0..t.d {
                    for b in 0..t.dr {
                        let i = t.idx(a, p, b);
                        t.data[i] /= lam[b].max(LAMBDA_CLAMP);
                    }
                }
            }
        }
        t
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.n {
            return Err(Error::SiteOutOfRange { site, n: self.n });
        }
        Ok(())
    }

    fn require_canonical(&self) -> Result<()> {
        if self.canonical {
            Ok(())
        } else {
            Err(Error::NotCanonical)
        }
    }

    fn prepare_mut(&mut self) -> Result<()> {
        if self.center.is_some() {
            self.finish_sweep()?;
        }
        if !self.canonical {
            if self.auto_canonicalize {
                self.canonicalize()?;
            } else {
                return Err(Error::NotCanonical);
            }
        }
        Ok(())
    }

    fn left_lambda(&self, site: usize) -> Vec<f64> {
        if site == 0 {
            vec![1.0]
        } else {
            self.lambdas[site - 1].clone()
        }
    }

    /// Dense amplitudes; requires `n·log2(d) ≤ 24`.
    pub fn to_dense(&self) -> Result<Vec<C64>> {
        let bits = self.n as f64 * (self.d as f64).log2();
        if bits > 24.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!("to_dense: {bits:.1} qubits exceeds 24")));
        }
        let mut acc = self.tensors[0].right_matrix(); // 1 × (d·χ)
        let mut rows = 1usize;
        let mut chi = self.tensors[0].dr;
        for j in 1..self.n {
            let t = &self.tensors[j];
            // acc: (rows·d) × χ  times  χ × (d·χ')
            let flat = row_major(&acc);
            let lhs = CMat::from_row_slice(rows * self.d, chi, &flat);
            acc = lhs * t.right_matrix();
            rows *= self.d;
            chi = t.dr;
        }
        Ok(row_major(&acc))
    }

    /// Squared norm. Valid for any gauge.
    pub fn norm_sqr(&self) -> f64 {
        let mut e = CMat::identity(1, 1);
        for t in &self.tensors {
            e = transfer(&e, t, None);
        }
        e[(0, 0)].re
    }

    /// Applies a unitary two-site gate to sites `(site, site+1)`.
    ///
    /// `gate` is `d²×d²` with row index `p_site·d + p_{site+1}`.
    /// Returns the discarded weight of this bond update.
    pub fn apply_two_site_gate(&mut self, site: usize, gate: &CMat) -> Result<f64> {
        self.check_site(site)?;
        if site + 1 >= self.n {
            return Err(Error::SiteOutOfRange { site: site + 1, n: self.n });
        }
        let d = self.d;
        if gate.shape() != (d * d, d * d) {
            return Err(Error::Dimension(format!("gate shape {:?}, expected {}²", gate.shape(), d * d)));
        }
        match linalg::unitary_scale(gate, 1e-9) {
            Some(c) if (c - 1.0).abs() < 1e-9 => {}
            _ => return Err(Error::InvalidArgument("two-site gate is not unitary".into())),
        }
        self.prepare_mut()?;
        let a = &self.tensors[site];
        let b = &self.tensors[site + 1];
        let (l, r) = (a.dl, b.dr);
        let phi0 = mul(&a.left_matrix(), &b.right_matrix());
        let mut phi = CMat::zeros(l * d, d * r);
        let mut v = vec![C64::new(0.0, 0.0); d * d];
        for al in 0..l {
            for be in 0..r {
                for p1 in 0..d {
                    for p2 in 0..d {
                        v[p1 * d + p2] = phi0[(al * d + p1, p2 * r + be)];
                    }
                }
                for q1 in 0..d {
                    for q2 in 0..d {
                        let row = q1 * d + q2;
                        let mut acc = C64::new(0.0, 0.0);
                        for (c, x) in v.iter().enumerate() {
                            acc += gate[(row, c)] * x;
                        }
                        phi[(al * d + q1, q2 * r + be)] = acc;
                    }
                }
            }
        }
        Ok(self.split_bond(site, phi))
    }

    /// SVD split of `phi = B_site B_{site+1}` (without the left λ) on bond
    /// `site`, assuming orthonormal environments on both sides.
    fn split_bond(&mut self, site: usize, phi: CMat) -> f64 {
        let d = self.d;
        let lam = self.left_lambda(site);
        let mut theta = phi.clone();
        for row in 0..theta.nrows() {
            let f = lam[row / d];
            for c in 0..theta.ncols() {
                theta[(row, c)] *= f;
            }
        }
        let dec = svd(theta);
        let k = self.policy.keep(&dec.s);
        let total: f64 = dec.s.iter().map(|x| x * x).sum();
        let kept: f64 = dec.s[..k].iter().map(|x| x * x).sum();
        let nk = kept.sqrt();
        let vt = dec.vt.rows(0, k).into_owned();
        let mut left = mul(&phi, &vt.adjoint());
        left /= C64::new(nk, 0.0);
        self.tensors[site] = Tensor3::from_left_matrix(&left, d);
        self.tensors[site + 1] = Tensor3::from_right_matrix(&vt, d);
        self.lambdas[site] = dec.s[..k].iter().map(|x| x / nk).collect();
        let disc = if total > 0.0 { 1.0 - kept / total } else { 0.0 };
        self.discarded += disc.max(0.0);
        disc.max(0.0)
    }

    /// Restores exact Schmidt values on bonds `site..n-1` after the tensor at
    /// `site` changed, given canonical environments. Normalizes the state.
    fn sweep_right_from(&mut self, site: usize) -> Result<()> {
        let d = self.d;
        if site + 1 == self.n {
            let lam = self.left_lambda(site);
            let t = &mut self.tensors[site];
            let mut nrm = 0.0;
            for a in 0..t.dl {
                for p in 0..d {
                    for b in 0..t.dr {
                        nrm += lam[a] * lam[a] * t.get(a, p, b).norm_sqr();
                    }
                }
            }
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::NonFinite("state norm vanished".into()));
            }
            t.scale(1.0 / nrm.sqrt());
            return Ok(());
        }
        for j in site..self.n - 1 {
            self.shift_center_right(j)?;
        }
        Ok(())
    }

    /// One-site SVD step: makes bond `j` exact given an orthonormal left
    /// environment (weights `λ_{j-1}`) and a right-isometric tail beyond `j+1`.
    fn shift_center_right(&mut self, j: usize) -> Result<()> {
        let d = self.d;
        let lam = self.left_lambda(j);
        let bm = self.tensors[j].left_matrix();
        let mut c = bm.clone();
        for row in 0..c.nrows() {
            let f = lam[row / d];
            for col in 0..c.ncols() {
                c[(row, col)] *= f;
            }
        }
        let dec = svd(c);
        let total: f64 = dec.s.iter().map(|x| x * x).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::NonFinite("state norm vanished".into()));
        }
        let k = self.policy.keep(&dec.s);
        let kept: f64 = dec.s[..k].iter().map(|x| x * x).sum();
        let nk = kept.sqrt();
        let vt = dec.vt.rows(0, k).into_owned();
        let mut newb = mul(&bm, &vt.adjoint());
        newb /= C64::new(nk, 0.0);
        self.tensors[j] = Tensor3::from_left_matrix(&newb, d);
        let next = mul(&vt, &self.tensors[j + 1].right_matrix());
        self.tensors[j + 1] = Tensor3::from_right_matrix(&next, d);
        self.lambdas[j] = dec.s[..k].iter().map(|x| x / nk).collect();
        self.discarded += (1.0 - kept / total).max(0.0);
        Ok(())
    }

    /// Current orthogonality center of an open sweep.
    pub fn center(&self) -> Option<usize> {
        self.center
    }

    /// Opens (or continues) a left-to-right sweep with the orthogonality
    /// center at `site`.
    ///
    /// While the sweep is open, single-site operators at the center cost no
    /// SVD, and local expectations and Schmidt blocks remain available at
    /// the center. Canonical form is restored by [`MpsState::finish_sweep`]
    /// (called implicitly by gates and by moving the center leftwards).
    pub fn advance_center(&mut self, site: usize) -> Result<()> {
        self.check_site(site)?;
        match self.center {
            Some(c) if !self.canonical && c <= site => {
                for j in c..site {
                    self.shift_center_right(j)?;
                }
            }
            Some(_) if !self.canonical => {
                self.finish_sweep()?;
            }
            _ => {
                if !self.canonical {
                    self.prepare_mut()?;
                }
            }
        }
        self.center = Some(site);
        Ok(())
    }

    /// Closes an open sweep, restoring exact canonical form. Cost: one
    /// SVD per bond when the sweep applied a non-unitary operator, none
    /// otherwise.
    pub fn finish_sweep(&mut self) -> Result<()> {
        if let Some(c) = self.center.take() {
            if !self.canonical {
                self.sweep_right_from(c)?;
                if c > 0 {
                    self.sweep_left_from(c - 1);
                }
                self.canonical = true;
            }
        }
        Ok(())
    }

    /// Restores bonds `bond, bond-1, ..., 0` right to left, given that the
    /// environment right of `bond+1` is orthonormal.
    fn sweep_left_from(&mut self, bond: usize) {
        for j in (0..=bond).rev() {
            let phi = mul(&self.tensors[j].left_matrix(), &self.tensors[j + 1].right_matrix());
            self.split_bond(j, phi);
        }
    }

    /// Applies a single-site operator.
    ///
    /// Returns `⟨ψ|op†op|ψ⟩` of the input state. With `renormalize` the
    /// result is normalized and canonical form is restored exactly (a
    /// rescaling suffices when `op` is proportional to a unitary);
    /// otherwise the state is left unnormalized and marked non-canonical.
    pub fn apply_single_site(&mut self, site: usize, op: &CMat, renormalize: bool) -> Result<f64> {
        self.check_site(site)?;
        if op.shape() != (self.d, self.d) {
            return Err(Error::Dimension(format!("operator shape {:?}", op.shape())));
        }
        if !renormalize {
            let w = if self.local_view_ok(site) { self.local_weight(site, op) } else { f64::NAN };
            self.tensors[site] = self.tensors[site].apply_physical(op);
            self.canonical = false;
            self.center = None;
            return Ok(w);
        }
        if self.center.is_some() {
            self.advance_center(site)?;
            return self.apply_at_center(site, op);
        }
        self.prepare_mut()?;
        if let Some(c) = linalg::unitary_scale(op, 1e-12) {
            if !(c > 1e-300) {
                return Err(Error::NonFinite("operator annihilates the state".into()));
            }
            let mut t = self.tensors[site].apply_physical(op);
            t.scale(1.0 / c.sqrt());
            self.tensors[site] = t;
            return Ok(c);
        }
        let w = self.local_weight(site, op);
        if !(w > 1e-300) || !w.is_finite() {
            return Err(Error::NonFinite(format!("post-operator norm {w}")));
        }
        self.tensors[site] = self.tensors[site].apply_physical(op);
        self.sweep_right_from(site)?;
        if site > 0 {
            self.sweep_left_from(site - 1);
        }
        Ok(w)
    }

    fn apply_at_center(&mut self, site: usize, op: &CMat) -> Result<f64> {
        if let Some(c) = linalg::unitary_scale(op, 1e-12) {
            if !(c > 1e-300) {
                return Err(Error::NonFinite("operator annihilates the state".into()));
            }
            let mut t = self.tensors[site].apply_physical(op);
            t.scale(1.0 / c.sqrt());
            self.tensors[site] = t;
            return Ok(c);
        }
        let w = self.local_weight(site, op);
        if !(w > 1e-300) || !w.is_finite() {
            return Err(Error::NonFinite(format!("post-operator norm {w}")));
        }
        let mut t = self.tensors[site].apply_physical(op);
        t.scale(1.0 / w.sqrt());
        self.tensors[site] = t;
        self.canonical = false;
        Ok(w)
    }

    /// Local quantities at `site` are exact in canonical form and at the
    /// center of an open sweep.
    fn local_view_ok(&self, site: usize) -> bool {
        self.canonical || self.center == Some(site)
    }

    /// `⟨op† op⟩` at `site` on a canonical state.
    fn local_weight(&self, site: usize, op: &CMat) -> f64 {
        let oo = op.adjoint() * op;
        self.local_expect_unchecked(site, &oo).re
    }

    /// Brings an arbitrary gauge into canonical form (two full sweeps) and
    /// normalizes. Returns the weight discarded by truncation.
    pub fn canonicalize(&mut self) -> Result<f64> {
        let before = self.discarded;
        let d = self.d;
        for j in (1..self.n).rev() {
            let dec = svd(self.tensors[j].right_matrix());
            let smax = dec.s.first().copied().unwrap_or(0.0);
            if !(smax > 0.0) || !smax.is_finite() {
                return Err(Error::NonFinite("state norm vanished".into()));
            }
            let k = dec.s.iter().take_while(|&&x| x / smax >= SV_HARD_FLOOR).count().max(1);
            let vt = dec.vt.rows(0, k).into_owned();
            let mut us = dec.u.columns(0, k).into_owned();
            for c in 0..k {
                for r in 0..us.nrows() {
                    us[(r, c)] *= dec.s[c];
                }
            }
            self.tensors[j] = Tensor3::from_right_matrix(&vt, d);
            let prev = mul(&self.tensors[j - 1].left_matrix(), &us);
            self.tensors[j - 1] = Tensor3::from_left_matrix(&prev, d);
        }
        self.center = None;
        for j in 0..self.n - 1 {
            self.lambdas[j] = vec![1.0; self.tensors[j].dr];
        }
        self.sweep_right_from(0)?;
        self.canonical = true;
        Ok(self.discarded - before)
    }

    /// `⟨op⟩` at one site.
    pub fn expectation(&self, site: usize, op: &CMat) -> Result<C64> {
        self.check_site(site)?;
        if !self.local_view_ok(site) {
            return Err(Error::NotCanonical);
        }
        if op.shape() != (self.d, self.d) {
            return Err(Error::Dimension("operator shape".into()));
        }
        Ok(self.local_expect_unchecked(site, op))
    }

    fn local_expect_unchecked(&self, site: usize, op: &CMat) -> C64 {
        let rho = self.local_rdm_unchecked(site);
        let mut acc = C64::new(0.0, 0.0);
        for p in 0..self.d {
            for q in 0..self.d {
                acc += op[(q, p)] * rho[(p, q)];
            }
        }
        acc
    }

    /// Single-site reduced density matrix.
    pub fn local_rdm(&self, site: usize) -> Result<CMat> {
        self.check_site(site)?;
        if !self.local_view_ok(site) {
            return Err(Error::NotCanonical);
        }
        Ok(self.local_rdm_unchecked(site))
    }

    fn local_rdm_unchecked(&self, site: usize) -> CMat {
        let t = &self.tensors[site];
        let lam = self.left_lambda(site);
        let d = self.d;
        let mut rho = CMat::zeros(d, d);
        for a in 0..t.dl {
            let w = lam[a] * lam[a];
            if w == 0.0 {
                continue;
            }
            for p in 0..d {
                let bp = t.idx(a, p, 0);
                for q in 0..d {
                    let bq = t.idx(a, q, 0);
                    let mut acc = C64::new(0.0, 0.0);
                    for b in 0..t.dr {
                        acc += t.data[bp + b] * t.data[bq + b].conj();
                    }
                    rho[(p, q)] += acc * w;
                }
            }
        }
        rho
    }

    /// `⟨Π_k op_k⟩` for operators on distinct sites (any order).
    pub fn expectation_product(&self, ops: &[(usize, &CMat)]) -> Result<C64> {
        self.require_canonical()?;
        if ops.is_empty() {
            return Ok(C64::new(1.0, 0.0));
        }
        let mut sorted: Vec<(usize, &CMat)> = ops.to_vec();
        sorted.sort_by_key(|x| x.0);
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidArgument("repeated site in product".into()));
            }
        }
        for (s, _) in &sorted {
            self.check_site(*s)?;
        }
        let first = sorted[0].0;
        let last = sorted[sorted.len() - 1].0;
        let lam = self.left_lambda(first);
        let mut e = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
            lam.len(),
            lam.iter().map(|x| C64::new(x * x, 0.0)),
        ));
        let mut it = sorted.iter().peekable();
        for j in first..=last {
            let op = match it.peek() {
                Some((s, o)) if *s == j => {
                    it.next();
                    Some(*o)
                }
                _ => None,
            };
            e = transfer(&e, &self.tensors[j], op);
        }
        Ok(e.trace())
    }

    /// Von Neumann entropy (bits) across a cut.
    pub fn entanglement_entropy(&self, cut: Cut) -> Result<f64> {
        self.require_canonical()?;
        if cut.b() >= self.n {
            return Err(Error::InvalidCut { cut: cut.b(), n: self.n });
        }
        let p: Vec<f64> = self.lambdas[cut.bond()].iter().map(|x| x * x).collect();
        Ok(linalg::entropy_bits(&p, EPS_EIG))
    }

    /// Entropies across all `n-1` cuts.
    pub fn entanglement_profile(&self) -> Result<Vec<f64>> {
        (1..self.n)
            .map(|b| self.entanglement_entropy(Cut(b)))
            .collect()
    }

    /// Schmidt-basis blocks of `op` and `op† op` for a site relative to a cut.
    ///
    /// In canonical form the Schmidt basis is read off the stored bond. At
    /// the center of an open sweep the stored `λ` of the cut may be stale;
    /// the reduced state is then rebuilt in the (still orthonormal) bond
    /// basis and diagonalized.
    pub fn schmidt_operator_block(&self, cut: Cut, site: usize, op: &CMat) -> Result<SchmidtBlock> {
        self.check_site(site)?;
        if !self.local_view_ok(site) {
            return Err(Error::NotCanonical);
        }
        if cut.b() >= self.n {
            return Err(Error::InvalidCut { cut: cut.b(), n: self.n });
        }
        let exact = self.canonical;
        let cc = op.adjoint() * op;
        let lam = &self.lambdas[cut.bond()];
        let chi = lam.len();
        let (a_mat, reduced_jump, gram) = if cut.contains_a(site) {
            let l0 = self.left_lambda(site);
            let e0 = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
                l0.len(),
                l0.iter().map(|x| C64::new(x * x, 0.0)),
            ));
            let mut ec = transfer(&e0, &self.tensors[site], Some(op));
            let mut ecc = transfer(&e0, &self.tensors[site], Some(&cc));
            let mut eid = (!exact).then(|| transfer(&e0, &self.tensors[site], None));
            for j in site + 1..cut.b() {
                ec = transfer(&ec, &self.tensors[j], None);
                ecc = transfer(&ecc, &self.tensors[j], None);
                eid = eid.map(|e| transfer(&e, &self.tensors[j], None));
            }
            (ec.transpose(), ecc.transpose(), eid.map(|e| e.transpose()))
        } else {
            let fr = CMat::identity(self.tensors[site].dr, self.tensors[site].dr);
            let mut gc = transfer_right(&fr, &self.tensors[site], Some(op));
            let mut gcc = transfer_right(&fr, &self.tensors[site], Some(&cc));
            let mut gid = (!exact).then(|| transfer_right(&fr, &self.tensors[site], None));
            for j in (cut.b()..site).rev() {
                gc = transfer_right(&gc, &self.tensors[j], None);
                gcc = transfer_right(&gcc, &self.tensors[j], None);
                gid = gid.map(|g| transfer_right(&g, &self.tensors[j], None));
            }
            let scale = |g: &CMat| CMat::from_fn(chi, chi, |k, l| g[(l, k)] * (lam[k] * lam[l]));
            (scale(&gc), scale(&gcc), gid.map(|g| scale(&g)))
        };
        let (xi, a_mat, reduced_jump) = match gram {
            None => (lam.iter().map(|x| x * x).collect(), a_mat, reduced_jump),
            Some(rho) => {
                let (vals, vecs) = linalg::eigh(&linalg::hermitize(&rho));
                let order: Vec<usize> = (0..chi).rev().collect();
                let w = vecs.select_columns(&order);
                let xi: Vec<f64> = order.iter().map(|&k| vals[k].max(0.0)).collect();
                let wa = w.adjoint();
                (xi, mul(&mul(&wa, &a_mat), &w), mul(&mul(&wa, &reduced_jump), &w))
            }
        };
        let a0 = a_mat.trace();
        let jump_weight = reduced_jump.trace().re;
        Ok(SchmidtBlock {
            xi,
            a_mat,
            reduced_jump,
            a0,
            jump_weight,
        })
    }

    /// Writes the binary checkpoint format.
    ///
    /// Layout (little endian): magic `EOQTMPS1`, `u64` n, d, chi_max; per
    /// site `u64` dl, d, dr then interleaved `f64` re/im of `B` row-major;
    /// per bond `u64` length then `f64` Schmidt values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.n, self.d, self.policy.chi_max] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for t in &self.tensors {
            for v in [t.dl, t.d, t.dr] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
            for z in &t.data {
                w.write_all(&z.re.to_le_bytes())?;
                w.write_all(&z.im.to_le_bytes())?;
            }
        }
        for l in &self.lambdas {
            w.write_all(&(l.len() as u64).to_le_bytes())?;
            for x in l {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let rd_u64 = |r: &mut R| -> Result<usize> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b) as usize)
        };
        let n = rd_u64(&mut r)?;
        let d = rd_u64(&mut r)?;
        let chi_max = rd_u64(&mut r)?;
        if n == 0 || d < 2 || n > 1 << 20 {
            return Err(Error::Checkpoint(format!("bad header n={n} d={d}")));
        }
        let rd_f64 = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let dl = rd_u64(&mut r)?;
            let dd = rd_u64(&mut r)?;
            let dr = rd_u64(&mut r)?;
            if dd != d || dl * dr > 1 << 28 {
                return Err(Error::Checkpoint("bad tensor dims".into()));
            }
            let mut data = Vec::with_capacity(dl * d * dr);
            for _ in 0..dl * d * dr {
                let re = rd_f64(&mut r)?;
                let im = rd_f64(&mut r)?;
                data.push(C64::new(re, im));
            }
            tensors.push(Tensor3 { dl, d, dr, data });
        }
        let mut lambdas = Vec::with_capacity(n - 1);
        for _ in 0..n - 1 {
            let len = rd_u64(&mut r)?;
            if len > 1 << 24 {
                return Err(Error::Checkpoint("bad bond length".into()));
            }
            let mut l = Vec::with_capacity(len);
            for _ in 0..len {
                l.push(rd_f64(&mut r)?);
            }
            lambdas.push(l);
        }
        for j in 0..n - 1 {
            if tensors[j].dr != lambdas[j].len() || tensors[j + 1].dl != lambdas[j].len() {
                return Err(Error::Checkpoint(format!("bond {j} dimensions disagree")));
            }
        }
        Ok(Self {
            n,
            d,
            tensors,
            lambdas,
            policy: TruncationPolicy::with_chi(chi_max),
            auto_canonicalize: false,
            canonical: true,
            center: None,
            discarded: 0.0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    pub fn has_non_finite(&self) -> bool {
        self.lambdas.iter().flatten().any(|x| !x.is_finite())
            || self
                .tensors
                .iter()
                .any(|t| t.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()))
    }
}

/// Left transfer: `E'[γ',γ] = Σ conj(B[α',p',γ']) E[α',α] O[p',p] B[α,p,γ]`.
fn transfer(e: &CMat, t: &Tensor3, op: Option<&CMat>) -> CMat {
    let ob = match op {
        Some(o) => t.apply_physical(o),
        None => t.clone(),
    };
    // X[α',(p,γ)] = Σ_α E[α',α] OB[α,p,γ], regrouped as rows (α',p).
    let x = mul(e, &ob.right_matrix());
    let x = Tensor3::from_right_matrix(&x, t.d).left_matrix();
    mul(&t.left_matrix().adjoint(), &x)
}

/// Right transfer: `F'[l,k] = Σ conj(B[l,p',γ']) O[p',p] B[k,p,γ] F[γ',γ]`.
fn transfer_right(f: &CMat, t: &Tensor3, op: Option<&CMat>) -> CMat {
    let ob = match op {
        Some(o) => t.apply_physical(o),
        None => t.clone(),
    };
    // Z[(k,p),γ'] = Σ_γ OB[k,p,γ] F[γ',γ], regrouped as columns (p,γ').
    let z = mul(&ob.left_matrix(), &f.transpose());
    let z = Tensor3::from_left_matrix(&z, t.d).right_matrix();
    mul(&t.right_matrix().map(|c| c.conj()), &z.transpose())
}
