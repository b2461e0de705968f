//! Dense linear-algebra helpers.
//!
//! Matrices are nalgebra `DMatrix` values. Decompositions and products above
//! a small size are delegated to faer, which is several times faster for the
//! complex matrices of moderate bond dimension met in practice; below that
//! size nalgebra has less overhead.

use faer::MatRef;
use nalgebra::DMatrix;

use crate::C64;

pub type CMat = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Thin SVD `m = u * diag(s) * vt` with `s` sorted descending.
pub struct Svd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub vt: CMat,
}

/// Smallest dimension from which faer is used.
const FAER_MIN_DIM: usize = 12;

fn as_faer(m: &CMat) -> MatRef<'_, C64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn from_faer(m: MatRef<'_, C64>) -> CMat {
    CMat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Matrix product.
pub fn mul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions differ");
    if a.nrows().min(a.ncols()).min(b.ncols()) >= FAER_MIN_DIM {
        let p = as_faer(a) * as_faer(b);
        from_faer(p.as_ref())
    } else {
        a * b
    }
}

pub fn svd(m: CMat) -> Svd {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return Svd {
            u: CMat::zeros(r, 0),
            s: Vec::new(),
            vt: CMat::zeros(0, c),
        };
    }
    if k == 1 {
        return svd_rank_one(&m);
    }
    let faer_dec = if k >= FAER_MIN_DIM && m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        as_faer(&m).thin_svd().ok()
    } else {
        None
    };
    let (u, s, vt) = match faer_dec {
        Some(dec) => {
            let sv = dec.S().column_vector();
            let s: Vec<f64> = (0..k).map(|i| sv[i].re).collect();
            (from_faer(dec.U()), s, from_faer(dec.V()).adjoint())
        }
        None => {
            let dec = m.svd(true, true);
            let s: Vec<f64> = dec.singular_values.iter().copied().collect();
            (dec.u.expect("svd u"), s, dec.v_t.expect("svd v_t"))
        }
    };
    if s.windows(2).all(|w| w[0] >= w[1]) {
        return Svd { u, s, vt };
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u2 = CMat::from_fn(r, k, |i, j| u[(i, order[j])]);
    let vt2 = CMat::from_fn(k, c, |i, j| vt[(order[i], j)]);
    let s2 = order.iter().map(|&j| s[j]).collect();
    Svd { u: u2, s: s2, vt: vt2 }
}

/// SVD of a single row or column.
fn svd_rank_one(m: &CMat) -> Svd {
    let (r, c) = m.shape();
    let nrm = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let mut e = CMat::zeros(r.max(c), 1);
    if nrm > 0.0 && nrm.is_finite() {
        for (i, z) in m.iter().enumerate() {
            e[(i, 0)] = z / nrm;
        }
    } else {
        e[(0, 0)] = ONE;
    }
    if r == 1 {
        Svd {
            u: CMat::from_element(1, 1, ONE),
            s: vec![nrm],
            vt: e.transpose(),
        }
    } else {
        Svd {
            u: e,
            s: vec![nrm],
            vt: CMat::from_element(1, 1, ONE),
        }
    }
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), CMat::zeros(0, 0));
    }
    let h = hermitize(m);
    if n >= FAER_MIN_DIM {
        if let Ok(dec) = as_faer(&h).self_adjoint_eigen(faer::Side::Lower) {
            let ev = dec.S().column_vector();
            let vals: Vec<f64> = (0..n).map(|i| ev[i].re).collect();
            return sorted_eigen(vals, from_faer(dec.U()));
        }
    }
    let dec = h.symmetric_eigen();
    sorted_eigen(dec.eigenvalues.iter().copied().collect(), dec.eigenvectors)
}

fn sorted_eigen(vals: Vec<f64>, vecs: CMat) -> (Vec<f64>, CMat) {
    let n = vals.len();
    if vals.windows(2).all(|w| w[0] <= w[1]) {
        return (vals, vecs);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let sorted = CMat::from_fn(n, n, |i, j| vecs[(i, order[j])]);
    (order.iter().map(|&j| vals[j]).collect(), sorted)
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let h = hermitize(m);
    let mut v: Vec<f64> = if h.nrows() >= FAER_MIN_DIM {
        match as_faer(&h).self_adjoint_eigenvalues(faer::Side::Lower) {
            Ok(v) => v,
            Err(_) => h.symmetric_eigenvalues().iter().copied().collect(),
        }
    } else {
        h.symmetric_eigenvalues().iter().copied().collect()
    };
    v.sort_by(f64::total_cmp);
    v
}

pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// `exp(z * h)` for Hermitian `h`.
pub fn expm_hermitian(h: &CMat, z: C64) -> CMat {
    let (vals, v) = eigh(h);
    let mut scaled = v.clone();
    for (j, &l) in vals.iter().enumerate() {
        let e = (z * l).exp();
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= e;
        }
    }
    scaled * v.adjoint()
}

/// General matrix exponential.
pub fn expm(m: &CMat) -> CMat {
    m.clone().exp()
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn identity(d: usize) -> CMat {
    CMat::identity(d, d)
}

/// Returns `c` if `m† m = c·1` to relative precision `tol`.
pub fn unitary_scale(m: &CMat, tol: f64) -> Option<f64> {
    let g = m.adjoint() * m;
    let n = g.nrows();
    let c = (0..n).map(|i| g[(i, i)].re).sum::<f64>() / n as f64;
    let scale = c.abs().max(1e-300);
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { c } else { 0.0 };
            if (g[(i, j)] - target).norm() > tol * scale {
                return None;
            }
        }
    }
    Some(c)
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    m.is_square() && (m - m.adjoint()).iter().all(|z| z.norm() <= tol)
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Von Neumann entropy in bits of a probability vector; entries below
/// `eps` are ignored.
pub fn entropy_bits(p: &[f64], eps: f64) -> f64 {
    p.iter()
        .filter(|&&x| x > eps)
        .map(|&x| -x * x.log2())
        .sum::<f64>()
        .max(0.0)
        + 0.0 // no −0 in outputs
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMat {
    CMat::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

/// `σz = |0⟩⟨0| − |1⟩⟨1|`.
pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

/// `|i⟩⟨j|` in dimension `d`.
pub fn ket_bra(d: usize, i: usize, j: usize) -> CMat {
    let mut m = CMat::zeros(d, d);
    m[(i, j)] = ONE;
    m
}

pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}
