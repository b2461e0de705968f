mod common;

use std::f64::consts::PI;

use common::*;
use eoqt_core::dense::DenseState;
use eoqt_core::linalg::{self, real, CMat};
use eoqt_core::models::bell_analytics;
use eoqt_core::mps::{Cut, MpsState};
use eoqt_core::propagators::{homodyne_step, number_step, JumpChannel, PropagatorChoice};
use eoqt_core::rates::{self, GeneralMeasurementParams, RateInputs};
use eoqt_core::C64;
use proptest::prelude::*;
use rand::Rng;

/// Expected one-step entropy change per unit time under counting, exact in
/// the outcome average.
fn number_fd(psi: &DenseState, ch: &JumpChannel, cut: Cut, dt: f64) -> f64 {
    let prep = ch.prepare(dt).unwrap();
    let p = ch.rate * dt * psi.expectation_local(ch.site, &prep.cdag_c).re;
    let e0 = psi.entanglement_entropy(cut);
    let mut stay = psi.clone();
    number_step(&mut stay, &prep, 1.0 - 1e-16).unwrap();
    let mut ej = 0.0;
    if p > 0.0 {
        let mut jump = psi.clone();
        number_step(&mut jump, &prep, 0.0).unwrap();
        ej = jump.entanglement_entropy(cut);
    }
    (p * ej + (1.0 - p) * stay.entanglement_entropy(cut) - e0) / dt
}

fn homodyne_fd(psi: &DenseState, ch: &JumpChannel, cut: Cut, dt: f64, phase: f64) -> f64 {
    let prep = ch.prepare(dt).unwrap();
    let e0 = psi.entanglement_entropy(cut);
    let mut acc = 0.0;
    for (z, w) in gauss_nodes(401, 10.0) {
        let mut s = psi.clone();
        homodyne_step(&mut s, &prep, phase, z * dt.sqrt()).unwrap();
        acc += w * s.entanglement_entropy(cut);
    }
    (acc - e0) / dt
}

fn richardson(f: impl Fn(f64) -> f64, dt: f64) -> f64 {
    2.0 * f(dt / 2.0) - f(dt)
}

fn inputs(psi: &DenseState, ch: &JumpChannel, cut: Cut) -> RateInputs {
    let m = MpsState::from_state_vector(&psi.amps, psi.d, exact()).unwrap();
    let inp = RateInputs::from_mps(&m, ch, cut).unwrap();
    inp.validate().unwrap();
    inp
}

fn random_case(seed: u64) -> (DenseState, JumpChannel, Cut) {
    let mut r = rng(seed);
    let n = r.random_range(3..5);
    let psi = random_dense(&mut r, n, 2);
    let site = r.random_range(0..n);
    let op = random_matrix(&mut r, 2);
    let gamma = r.random_range(0.2..2.0);
    let cut = Cut::new(r.random_range(1..n), n).unwrap();
    (psi, JumpChannel::new(site, op, gamma).unwrap(), cut)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn rates_match_exact_finite_differences(seed in 0u64..100_000, phase in 0.0f64..6.28) {
        let (psi, ch, cut) = random_case(seed);
        let inp = inputs(&psi, &ch, cut);
        let scale = ch.rate * ch.op.norm_squared();
        let fd_n = richardson(|h| number_fd(&psi, &ch, cut, h), 2e-5);
        let fd_h = richardson(|h| homodyne_fd(&psi, &ch, cut, h, phase), 2e-5);
        let tol = 2e-3 * scale.max(1.0);
        prop_assert!((rates::rate_number(&inp) - fd_n).abs() < tol, "number {} vs {fd_n}", rates::rate_number(&inp));
        prop_assert!((rates::rate_homodyne(&inp, phase) - fd_h).abs() < tol, "homodyne {} vs {fd_h}", rates::rate_homodyne(&inp, phase));
    }

    #[test]
    fn rates_are_never_positive(seed in 0u64..100_000, phase in 0.0f64..6.28) {
        let (psi, ch, cut) = random_case(seed);
        let inp = inputs(&psi, &ch, cut);
        prop_assert!(rates::rate_number(&inp) <= 1e-9);
        prop_assert!(rates::rate_homodyne(&inp, phase) <= 1e-9);
        prop_assert!(rates::rate_phase_average(&inp) <= 1e-9);
    }

    #[test]
    fn optimal_phase_beats_a_fine_grid(seed in 0u64..100_000) {
        let (psi, ch, cut) = random_case(seed);
        let inp = inputs(&psi, &ch, cut);
        let (phi, best) = rates::optimal_phase(&inp);
        prop_assert!((0.0..PI).contains(&phi));
        prop_assert!((rates::rate_homodyne(&inp, phi) - best).abs() < 1e-12);
        let grid: Vec<f64> = (0..3600).map(|k| rates::rate_homodyne(&inp, 2.0 * PI * k as f64 / 3600.0)).collect();
        let gmin = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(best <= gmin + 1e-12);
        // Rates are π-periodic in the phase; the grid mean is the phase average.
        prop_assert!((rates::rate_homodyne(&inp, phi + PI) - best).abs() < 1e-10);
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        prop_assert!((mean - rates::rate_phase_average(&inp)).abs() < 1e-9 * (1.0 + mean.abs()));
    }

    #[test]
    fn general_measurements_never_beat_the_better_extreme(
        seed in 0u64..100_000, s in 0.0f64..=1.0, frac in 0.0f64..=1.0, beta in 0.0f64..6.28,
    ) {
        let (psi, ch, cut) = random_case(seed);
        let inp = inputs(&psi, &ch, cut);
        let p = GeneralMeasurementParams::new(frac * s, s, beta).unwrap();
        let num = rates::rate_number(&inp);
        let (_, hom) = rates::optimal_phase(&inp);
        let g = rates::rate_general(&inp, p, num, rates::rate_homodyne(&inp, p.beta));
        prop_assert!(g >= num.min(hom) - 1e-9);
    }

    #[test]
    fn mirrored_chain_gives_the_same_rates(seed in 0u64..100_000, phase in 0.0f64..6.28) {
        let (psi, ch, cut) = random_case(seed);
        let n = psi.n;
        let mut amps = vec![C64::new(0.0, 0.0); psi.amps.len()];
        for (i, a) in psi.amps.iter().enumerate() {
            let mut j = 0;
            for k in 0..n {
                j |= ((i >> k) & 1) << (n - 1 - k);
            }
            amps[j] = *a;
        }
        let mirror = DenseState::new(n, 2, amps).unwrap();
        let mch = JumpChannel::new(n - 1 - ch.site, ch.op.clone(), ch.rate).unwrap();
        let mcut = Cut::new(n - cut.b(), n).unwrap();
        let a = inputs(&psi, &ch, cut);
        let b = inputs(&mirror, &mch, mcut);
        prop_assert!((rates::rate_number(&a) - rates::rate_number(&b)).abs() < 1e-9);
        prop_assert!((rates::rate_homodyne(&a, phase) - rates::rate_homodyne(&b, phase)).abs() < 1e-9);
    }

    #[test]
    fn decision_picks_the_smaller_rate(seed in 0u64..100_000) {
        let (psi, ch, cut) = random_case(seed);
        let inp = inputs(&psi, &ch, cut);
        let d = rates::choose_from_inputs(&inp);
        prop_assert_eq!(d.predicted_rate, d.rate_number.min(d.rate_homodyne));
        match d.choice {
            PropagatorChoice::Number => prop_assert!(d.rate_number < d.rate_homodyne),
            PropagatorChoice::Homodyne(_) => prop_assert!(d.rate_homodyne <= d.rate_number + 1e-12),
        }
    }
}

fn bell() -> DenseState {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DenseState::new(2, 2, vec![real(s), real(0.0), real(0.0), real(s)]).unwrap()
}

#[test]
fn bell_rates_match_closed_form_slopes() {
    let gamma = 1.7;
    let ch = JumpChannel::new(0, linalg::ket_bra(2, 1, 1), gamma).unwrap();
    let inp = inputs(&bell(), &ch, Cut::new(1, 2).unwrap());
    // σ'(0) and σ''(0) by central differences of the closed form.
    let h = 1e-4;
    let s = bell_analytics::sigma;
    let d1 = (s(h) - s(-h)) / (2.0 * h);
    let d2 = (s(h) - 2.0 * s(0.0) + s(-h)) / (h * h);
    assert!((d1 + 0.5).abs() < 1e-6);
    // Counting: Ē = σ(2γt) from two channels, so each contributes γσ'(0).
    assert!((rates::rate_number(&inp) - gamma * d1).abs() < 1e-6);
    // Homodyne(0): Ē = E[σ(2τ + 2√τ z)] with τ = 2γt over two channels.
    let want = gamma * (2.0 * d1 + 2.0 * d2);
    assert!((rates::rate_homodyne(&inp, 0.0) - want).abs() < 1e-5, "{} vs {want}", rates::rate_homodyne(&inp, 0.0));
    let d = rates::choose_from_inputs(&inp);
    assert!(matches!(d.choice, PropagatorChoice::Homodyne(p) if p.abs() < 1e-9 || (p - PI).abs() < 1e-9));
}

#[test]
fn product_states_have_zero_rates() {
    let mut r = rng(21);
    let kets: Vec<Vec<C64>> = (0..3).map(|_| random_amps(&mut r, 2)).collect();
    let m = MpsState::product_state(2, &kets, exact()).unwrap();
    let ch = JumpChannel::new(1, random_matrix(&mut r, 2), 1.0).unwrap();
    for b in 1..3 {
        let inp = RateInputs::from_mps(&m, &ch, Cut::new(b, 3).unwrap()).unwrap();
        assert!(rates::rate_number(&inp).abs() < 1e-12);
        assert!(rates::rate_homodyne(&inp, 0.7).abs() < 1e-12);
    }
}

#[test]
fn rates_are_linear_in_gamma() {
    let (psi, ch, cut) = random_case(5);
    let a = inputs(&psi, &ch, cut);
    let ch2 = JumpChannel::new(ch.site, ch.op.clone(), 3.0 * ch.rate).unwrap();
    let b = inputs(&psi, &ch2, cut);
    assert!((3.0 * rates::rate_number(&a) - rates::rate_number(&b)).abs() < 1e-12);
    assert!((3.0 * rates::rate_homodyne(&a, 1.0) - rates::rate_homodyne(&b, 1.0)).abs() < 1e-12);
}

#[test]
fn log_kernel_limits() {
    assert!((rates::log_kernel(0.3, 0.3) - 2.0 / 0.6).abs() < 1e-12);
    let k = rates::log_kernel(0.3, 0.3 + 1e-9);
    assert!((k - 2.0 / 0.6).abs() < 1e-6);
    let (x, y): (f64, f64) = (0.7, 0.1);
    assert!((rates::log_kernel(x, y) - (x.ln() - y.ln()) / (x - y)).abs() < 1e-12);
}

#[test]
fn bad_inputs_fail_validation() {
    let (psi, ch, cut) = random_case(8);
    let mut inp = inputs(&psi, &ch, cut);
    inp.xi[0] += 0.1;
    assert!(inp.validate().is_err());
    let mut inp = inputs(&psi, &ch, cut);
    inp.a_mat = CMat::zeros(1, 1);
    assert!(inp.validate().is_err());
    assert!(GeneralMeasurementParams::new(0.6, 0.5, 0.0).is_err());
    assert!(GeneralMeasurementParams::new(0.1, 1.5, 0.0).is_err());
}
