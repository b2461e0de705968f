mod common;

use common::*;
use eoqt_core::dense::{lindblad_rhs, DenseDensityMatrix, DenseState, LocalOperatorSum};
use eoqt_core::linalg::{self, pauli_z, real, CMat};
use eoqt_core::mps::MpsState;
use eoqt_core::propagators::{
    self, apply_choice, draw, homodyne_step, number_step, rbc_exponential_form_step, JumpChannel, PropagatorChoice,
    StochasticDraw,
};
use eoqt_core::{models, Error, C64};
use proptest::prelude::*;

fn projector(psi: &DenseState) -> CMat {
    psi.to_density_matrix().rho
}

/// `E[|ψ'⟩⟨ψ'|]` over the counting outcome, computed exactly.
fn number_average(psi: &DenseState, ch: &JumpChannel, dt: f64) -> CMat {
    let prep = ch.prepare(dt).unwrap();
    let p = ch.rate * dt * psi.expectation_local(ch.site, &prep.cdag_c).re;
    let mut jump = psi.clone();
    assert!(number_step(&mut jump, &prep, 0.0).unwrap() || p == 0.0);
    let mut stay = psi.clone();
    assert!(!number_step(&mut stay, &prep, 1.0 - 1e-16).unwrap());
    projector(&jump) * real(p) + projector(&stay) * real(1.0 - p)
}

/// `E[|ψ'⟩⟨ψ'|]` over `dW ~ N(0, dt)` by quadrature.
fn homodyne_average(psi: &DenseState, ch: &JumpChannel, dt: f64, phase: f64) -> CMat {
    let prep = ch.prepare(dt).unwrap();
    let mut acc = CMat::zeros(psi.amps.len(), psi.amps.len());
    for (z, w) in gauss_nodes(801, 12.0) {
        let mut s = psi.clone();
        homodyne_step(&mut s, &prep, phase, z * dt.sqrt()).unwrap();
        acc += projector(&s) * real(w);
    }
    acc
}

fn generator_error(avg: &CMat, psi: &DenseState, ch: &JumpChannel, dt: f64) -> f64 {
    let rho = psi.to_density_matrix();
    let l = lindblad_rhs(&rho, &LocalOperatorSum::default(), std::slice::from_ref(ch)).unwrap();
    linalg::frobenius(&(avg - (&rho.rho + l * real(dt))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn one_step_averages_reproduce_the_lindbladian(seed in 0u64..10_000, phase in 0.0f64..6.28) {
        let mut r = rng(seed);
        let psi = random_dense(&mut r, 3, 2);
        let op = random_matrix(&mut r, 2) * real(0.5);
        let ch = JumpChannel::new(1, op, 0.8).unwrap();
        // Errors are O(dt²): halving dt must cut them by about four.
        let (d1, d2) = (4e-3, 2e-3);
        let en1 = generator_error(&number_average(&psi, &ch, d1), &psi, &ch, d1);
        let en2 = generator_error(&number_average(&psi, &ch, d2), &psi, &ch, d2);
        prop_assert!(en1 < 50.0 * d1 * d1, "number {en1}");
        prop_assert!(en2 < en1 / 3.0 || en2 < 1e-13, "number ratio {en1} {en2}");
        let eh1 = generator_error(&homodyne_average(&psi, &ch, d1, phase), &psi, &ch, d1);
        let eh2 = generator_error(&homodyne_average(&psi, &ch, d2, phase), &psi, &ch, d2);
        prop_assert!(eh1 < 50.0 * d1 * d1, "homodyne {eh1}");
        prop_assert!(eh2 < eh1 / 3.0, "homodyne ratio {eh1} {eh2}");
    }

    #[test]
    fn mps_and_dense_backends_agree(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let model = models::ising_model(-0.5, 2.5, 0.5, 1.0, 4).unwrap();
        let dt = 0.01;
        let prepared: Vec<_> = model.channels.iter().map(|c| c.prepare(dt).unwrap()).collect();
        let gates = match model.gate_schedule(dt).unwrap() {
            models::GateSchedule::Static(g) => g,
            _ => unreachable!(),
        };
        let mut dense = model.initial_dense().unwrap();
        let mut mps = model.initial_mps(exact()).unwrap();
        for step in 0..40 {
            let choices: Vec<PropagatorChoice> = (0..4)
                .map(|j| if (step + j) % 3 == 0 { PropagatorChoice::Number } else { PropagatorChoice::homodyne(0.3 * j as f64) })
                .collect();
            let draws: Vec<StochasticDraw> = choices.iter().map(|&c| draw(c, dt, &mut r)).collect();
            eoqt_core::dense::dense_trajectory_step(&mut dense, &prepared, &choices, &draws, &gates).unwrap();
            for ((ch, c), d) in prepared.iter().zip(&choices).zip(&draws) {
                apply_choice(&mut mps, ch, *c, *d).unwrap();
            }
            for (b, g) in &gates {
                mps.apply_two_site_gate(*b, g).unwrap();
            }
        }
        prop_assert!(1.0 - overlap_sqr(&mps.to_dense().unwrap(), &dense.amps) < 1e-9);
    }
}

#[test]
fn wiener_draws_have_variance_dt() {
    let mut r = rng(11);
    let dt = 1e-3;
    let n = 200_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| match draw(PropagatorChoice::Homodyne(0.0), dt, &mut r) {
            StochasticDraw::Wiener(x) => x,
            _ => unreachable!(),
        })
        .collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    assert!(m.abs() < 5.0 * (dt / n as f64).sqrt());
    // Var of the sample variance is 2σ⁴/n.
    assert!((v - dt).abs() < 5.0 * dt * (2.0 / n as f64).sqrt());
    for _ in 0..1000 {
        match draw(PropagatorChoice::Number, dt, &mut r) {
            StochasticDraw::Uniform(u) => assert!((0.0..1.0).contains(&u)),
            _ => unreachable!(),
        }
    }
}

#[test]
fn jump_frequency_matches_probability() {
    let mut r = rng(12);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let psi = DenseState::new(1, 2, vec![real(s), real(s)]).unwrap();
    let ch = JumpChannel::new(0, linalg::ket_bra(2, 0, 1), 5.0).unwrap();
    let prep = ch.prepare(0.02).unwrap();
    let p = 5.0 * 0.02 * 0.5;
    let n = 100_000;
    let mut jumps = 0;
    for _ in 0..n {
        let mut st = psi.clone();
        if let StochasticDraw::Uniform(u) = draw(PropagatorChoice::Number, 0.02, &mut r) {
            jumps += number_step(&mut st, &prep, u).unwrap() as usize;
        }
    }
    let f = jumps as f64 / n as f64;
    assert!((f - p).abs() < 5.0 * (p * (1.0 - p) / n as f64).sqrt(), "{f} vs {p}");
}

#[test]
fn zero_rate_channels_do_nothing() {
    let mut r = rng(13);
    let psi = random_dense(&mut r, 2, 2);
    let ch = JumpChannel::new(0, pauli_z(), 0.0).unwrap();
    let prep = ch.prepare(0.01).unwrap();
    let mut a = psi.clone();
    assert!(!number_step(&mut a, &prep, 0.0).unwrap());
    homodyne_step(&mut a, &prep, 0.4, 0.1).unwrap();
    assert_eq!(a, psi);
}

#[test]
fn step_size_guard() {
    let ch = JumpChannel::new(0, pauli_z(), 10.0).unwrap();
    assert!(ch.prepare(0.01).is_ok());
    assert!(matches!(ch.prepare(0.0101), Err(Error::StepTooLarge(_))));
    assert!(JumpChannel::new(0, linalg::identity(3), 1.0).is_ok());
    assert!(JumpChannel::new(0, pauli_z(), -1.0).is_err());
    assert!(JumpChannel::new(0, pauli_z(), f64::NAN).is_err());
}

#[test]
fn exponential_form_needs_unitary_square() {
    let ch = JumpChannel::new(0, linalg::ket_bra(2, 1, 1), 1.0).unwrap();
    let prep = ch.prepare(1e-3).unwrap();
    let mut m = MpsState::basis_product(2, 2, &[0, 1], exact()).unwrap();
    assert!(rbc_exponential_form_step(&mut m, &prep, 0.0, 0.01).is_err());
}

#[test]
fn homodyne_phase_is_reduced() {
    match PropagatorChoice::homodyne(-0.5) {
        PropagatorChoice::Homodyne(p) => assert!((p - (2.0 * std::f64::consts::PI - 0.5)).abs() < 1e-15),
        _ => unreachable!(),
    }
    assert_eq!(propagators::reduce_phase(2.0 * std::f64::consts::PI), 0.0);
}

#[test]
fn dephasing_channel_averages_to_lindblad_on_mixed_input() {
    // Linearity: averaging a mixture of two pure inputs.
    let mut r = rng(14);
    let a = random_dense(&mut r, 2, 2);
    let b = random_dense(&mut r, 2, 2);
    let ch = JumpChannel::new(0, pauli_z(), 2.0).unwrap();
    let dt = 1e-3;
    let avg = (homodyne_average(&a, &ch, dt, 0.0) + homodyne_average(&b, &ch, dt, 0.0)) * real(0.5);
    let rho = DenseDensityMatrix { n: 2, d: 2, rho: (projector(&a) + projector(&b)) * real(0.5) };
    let l = lindblad_rhs(&rho, &LocalOperatorSum::default(), &[ch]).unwrap();
    let err = linalg::frobenius(&(avg - (&rho.rho + l * C64::new(dt, 0.0))));
    assert!(err < 40.0 * dt * dt, "{err}");
}
