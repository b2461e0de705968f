#![allow(dead_code)]

use eoqt_core::dense::DenseState;
use eoqt_core::linalg::{self, CMat};
use eoqt_core::mps::TruncationPolicy;
use eoqt_core::C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_c<R: Rng>(r: &mut R) -> C64 {
    C64::new(r.sample(StandardNormal), r.sample(StandardNormal))
}

pub fn random_amps<R: Rng>(r: &mut R, len: usize) -> Vec<C64> {
    let mut v: Vec<C64> = (0..len).map(|_| gaussian_c(r)).collect();
    let nrm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut v {
        *z /= nrm;
    }
    v
}

pub fn random_dense<R: Rng>(r: &mut R, n: usize, d: usize) -> DenseState {
    DenseState::new(n, d, random_amps(r, d.pow(n as u32))).unwrap()
}

pub fn random_matrix<R: Rng>(r: &mut R, d: usize) -> CMat {
    CMat::from_fn(d, d, |_, _| gaussian_c(r))
}

pub fn random_hermitian<R: Rng>(r: &mut R, d: usize) -> CMat {
    linalg::hermitize(&random_matrix(r, d))
}

pub fn random_unitary<R: Rng>(r: &mut R, d: usize) -> CMat {
    linalg::expm_hermitian(&random_hermitian(r, d), C64::new(0.0, -1.0))
}

pub fn exact() -> TruncationPolicy {
    TruncationPolicy { chi_max: usize::MAX, trunc_threshold: 0.0, max_discarded_weight: None }
}

pub fn overlap_sqr(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<C64>().norm_sqr()
}

/// Trapezoid weights for `E[f(z)]`, `z ~ N(0,1)`; spectrally accurate for
/// smooth integrands.
pub fn gauss_nodes(m: usize, half_width: f64) -> Vec<(f64, f64)> {
    let h = 2.0 * half_width / (m - 1) as f64;
    let norm = h / (2.0 * std::f64::consts::PI).sqrt();
    (0..m)
        .map(|i| {
            let z = -half_width + i as f64 * h;
            (z, norm * (-0.5 * z * z).exp())
        })
        .collect()
}
