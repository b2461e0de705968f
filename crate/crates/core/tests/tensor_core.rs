mod common;

use common::*;
use eoqt_core::dense::DenseState;
use eoqt_core::linalg::{self, pauli_x, pauli_z, real, CMat};
use eoqt_core::mps::{Cut, MpsState, TruncationPolicy};
use eoqt_core::{Error, C64};
use proptest::prelude::*;
use rand::Rng;

fn entropies_match(m: &MpsState, psi: &DenseState, tol: f64) {
    for b in 1..m.n() {
        let cut = Cut::new(b, m.n()).unwrap();
        let e1 = m.entanglement_entropy(cut).unwrap();
        let e2 = psi.entanglement_entropy(cut);
        assert!((e1 - e2).abs() < tol, "cut {b}: {e1} vs {e2}");
    }
}

#[test]
fn gates_match_dense_on_eight_qubits() {
    // Bond dimension reaches 16, which exercises the large-matrix paths.
    let mut r = rng(1);
    let n = 8;
    let mut psi = DenseState::basis_product(n, 2, &[0; 8]).unwrap();
    let mut m = MpsState::basis_product(n, 2, &[0; 8], exact()).unwrap();
    for layer in 0..6 {
        for b in (layer % 2..n - 1).step_by(2) {
            let g = random_unitary(&mut r, 4);
            psi.apply_local(b, &g);
            m.apply_two_site_gate(b, &g).unwrap();
        }
    }
    assert_eq!(m.max_bond(), 16);
    assert!(1.0 - overlap_sqr(&m.to_dense().unwrap(), &psi.amps) < 1e-10);
    entropies_match(&m, &psi, 1e-9);
    for b in 0..n - 1 {
        let s: f64 = m.lambda(b).iter().map(|x| x * x).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn qutrit_chain_matches_dense() {
    let mut r = rng(2);
    let psi = random_dense(&mut r, 4, 3);
    let mut m = MpsState::from_state_vector(&psi.amps, 3, exact()).unwrap();
    let mut psi = psi;
    let g = random_unitary(&mut r, 9);
    psi.apply_local(1, &g);
    m.apply_two_site_gate(1, &g).unwrap();
    let op = random_matrix(&mut r, 3);
    psi.apply_local(2, &op);
    psi.normalize().unwrap();
    m.apply_single_site(2, &op, true).unwrap();
    assert!(1.0 - overlap_sqr(&m.to_dense().unwrap(), &psi.amps) < 1e-10);
    entropies_match(&m, &psi, 1e-9);
    let z = (linalg::ket_bra(3, 2, 2) - linalg::ket_bra(3, 0, 0)) * real(0.5);
    let a = m.expectation_product(&[(0, &z), (3, &z)]).unwrap();
    let b = psi.expectation_product(&[(0, &z), (3, &z)]);
    assert!((a - b).norm() < 1e-10);
}

#[test]
fn ghz_has_one_bit_everywhere() {
    let n = 6;
    let mut amps = vec![C64::new(0.0, 0.0); 1 << n];
    amps[0] = real(std::f64::consts::FRAC_1_SQRT_2);
    amps[(1 << n) - 1] = real(std::f64::consts::FRAC_1_SQRT_2);
    let m = MpsState::from_state_vector(&amps, 2, exact()).unwrap();
    for e in m.entanglement_profile().unwrap() {
        assert!((e - 1.0).abs() < 1e-12);
    }
    assert_eq!(m.max_bond(), 2);
}

#[test]
fn cnot_on_plus_zero_makes_a_bell_pair() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let plus = vec![real(s), real(s)];
    let zero = vec![real(1.0), real(0.0)];
    let mut m = MpsState::product_state(2, &[plus, zero], exact()).unwrap();
    let mut cnot = CMat::zeros(4, 4);
    for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        cnot[(i, j)] = real(1.0);
    }
    m.apply_two_site_gate(0, &cnot).unwrap();
    let e = m.entanglement_entropy(Cut::new(1, 2).unwrap()).unwrap();
    assert!((e - 1.0).abs() < 1e-14);
    let zz = m.expectation_product(&[(0, &pauli_z()), (1, &pauli_z())]).unwrap();
    assert!((zz.re - 1.0).abs() < 1e-14);
}

#[test]
fn discarded_weight_is_monotone_in_chi() {
    let mut r = rng(3);
    let psi = random_dense(&mut r, 8, 2);
    let g = random_unitary(&mut r, 4);
    let mut prev = -1.0;
    for chi in [16, 8, 6, 4, 2, 1] {
        let mut m = MpsState::from_state_vector(&psi.amps, 2, TruncationPolicy::with_chi(chi)).unwrap();
        assert_eq!(m.discarded_weight(), 0.0);
        let w = m.apply_two_site_gate(3, &g).unwrap();
        assert!(m.lambda(3).len() <= chi);
        assert!(w >= prev, "chi {chi}: {w} < {prev}");
        if chi < 16 {
            assert!(w > 0.0);
        } else {
            assert!(w < 1e-20);
        }
        let s: f64 = m.lambda(3).iter().map(|x| x * x).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(m.entanglement_entropy(Cut::new(4, 8).unwrap()).unwrap() <= (chi as f64).log2() + 1e-12);
        prev = w;
    }
}

#[test]
fn rdm_is_a_density_matrix() {
    let mut r = rng(4);
    let psi = random_dense(&mut r, 5, 2);
    let m = MpsState::from_state_vector(&psi.amps, 2, exact()).unwrap();
    for site in 0..5 {
        let rho = m.local_rdm(site).unwrap();
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
        assert!(linalg::is_hermitian(&rho, 1e-12));
        assert!(linalg::eigvalsh(&rho)[0] > -1e-12);
        let x = (&rho * pauli_x()).trace();
        assert!((x - psi.expectation_local(site, &pauli_x())).norm() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut r = rng(5);
    let psi = random_dense(&mut r, 5, 2);
    let m = MpsState::from_state_vector(&psi.amps, 2, TruncationPolicy::with_chi(3)).unwrap();
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf).unwrap();
    assert_eq!(&buf[..8], b"EOQTMPS1");
    let back = MpsState::read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.to_dense().unwrap(), m.to_dense().unwrap());
    assert_eq!(back.bond_dims(), m.bond_dims());
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("state.bin");
    m.save(&path).unwrap();
    assert_eq!(MpsState::load(&path).unwrap().to_dense().unwrap(), m.to_dense().unwrap());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(MpsState::read_checkpoint(&bad[..]), Err(Error::Checkpoint(_))));
    assert!(MpsState::read_checkpoint(&buf[..buf.len() - 3]).is_err());
}

#[test]
fn argument_errors() {
    let mut m = MpsState::basis_product(3, 2, &[0, 0, 0], exact()).unwrap();
    assert!(matches!(m.apply_two_site_gate(2, &linalg::identity(4)), Err(Error::SiteOutOfRange { .. })));
    assert!(matches!(m.apply_two_site_gate(0, &(linalg::identity(4) * real(2.0))), Err(Error::InvalidArgument(_))));
    assert!(matches!(m.apply_single_site(0, &linalg::identity(3), true), Err(Error::Dimension(_))));
    assert!(matches!(Cut::new(0, 3), Err(Error::InvalidCut { .. })));
    assert!(matches!(Cut::new(3, 3), Err(Error::InvalidCut { .. })));
    let proj = linalg::ket_bra(2, 1, 1);
    assert!(matches!(m.apply_single_site(1, &proj, true), Err(Error::NonFinite(_))));
    m.apply_single_site(1, &pauli_x(), false).unwrap();
    m.apply_single_site(1, &(linalg::identity(2) * real(2.0)), false).unwrap();
    assert!(matches!(m.expectation(1, &pauli_z()), Err(Error::NotCanonical)));
    m.canonicalize().unwrap();
    assert!((m.expectation(1, &pauli_z()).unwrap().re + 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_circuits_preserve_invariants(seed in 0u64..10_000, chi in 1usize..10) {
        let mut r = rng(seed);
        let n = 6;
        let psi0 = random_dense(&mut r, n, 2);
        let mut m = MpsState::from_state_vector(&psi0.amps, 2, TruncationPolicy::with_chi(chi)).unwrap();
        let mut psi = psi0.clone();
        for _ in 0..8 {
            let b = r.random_range(0..n - 1);
            let g = random_unitary(&mut r, 4);
            m.apply_two_site_gate(b, &g).unwrap();
            psi.apply_local(b, &g);
            let site = r.random_range(0..n);
            let op = random_matrix(&mut r, 2) + linalg::identity(2) * real(2.0);
            m.apply_single_site(site, &op, true).unwrap();
            psi.apply_local(site, &op);
            psi.normalize().unwrap();
        }
        prop_assert!((m.norm_sqr() - 1.0).abs() < 1e-10);
        for b in 0..n - 1 {
            let s: f64 = m.lambda(b).iter().map(|x| x * x).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            prop_assert!(m.lambda(b).len() <= chi);
            prop_assert!(m.lambda(b).windows(2).all(|w| w[0] >= w[1]));
        }
        for b in 1..n {
            let e = m.entanglement_entropy(Cut::new(b, n).unwrap()).unwrap();
            prop_assert!(e >= 0.0 && e <= (b.min(n - b) as f64) + 1e-12);
        }
        if m.discarded_weight() == 0.0 {
            prop_assert!(1.0 - overlap_sqr(&m.to_dense().unwrap(), &psi.amps) < 1e-9);
        }
    }

    #[test]
    fn dense_round_trip(seed in 0u64..10_000, n in 2usize..7) {
        let mut r = rng(seed);
        let psi = random_amps(&mut r, 1 << n);
        let m = MpsState::from_state_vector(&psi, 2, exact()).unwrap();
        let back = m.to_dense().unwrap();
        for (a, b) in back.iter().zip(&psi) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn product_expectations_match_dense(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let psi = random_dense(&mut r, 5, 2);
        let m = MpsState::from_state_vector(&psi.amps, 2, exact()).unwrap();
        let a = random_hermitian(&mut r, 2);
        let b = random_hermitian(&mut r, 2);
        let i = r.random_range(0..5);
        let j = (i + r.random_range(1..5)) % 5;
        let got = m.expectation_product(&[(i, &a), (j, &b)]).unwrap();
        let want = psi.expectation_product(&[(i, &a), (j, &b)]);
        prop_assert!((got - want).norm() < 1e-10);
    }
}
