mod common;

use common::arb_state;
use nalgebra::DMatrix;
use num_complex::Complex64;
use phonon_core::fock::CMatrix;
use phonon_core::metrics::{
    average_fidelity, canonical_qubit_basis, g2_zero, haar_average_fidelity_oracle, process_from_channel,
};
use proptest::prelude::*;

/// Kraus operators `d_out × 2` from the QR isometry of a random matrix.
fn kraus(entries: &[f64], d_out: usize, rank: usize) -> Vec<CMatrix> {
    let rows = d_out * rank;
    let g = DMatrix::from_fn(rows, 2, |i, j| {
        let k = 2 * (i * 2 + j);
        Complex64::new(entries[k], entries[k + 1])
    });
    let q = g.qr().q();
    (0..rank)
        .map(|r| q.view((r * d_out, 0), (d_out, 2)).into_owned())
        .collect()
}

fn apply(ks: &[CMatrix], rho: &CMatrix) -> CMatrix {
    ks.iter().map(|k| k * rho * k.adjoint()).fold(
        CMatrix::zeros(ks[0].nrows(), ks[0].nrows()),
        |acc, m| acc + m,
    )
}

fn entries(d_out: usize, rank: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, 4 * d_out * rank)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corrections_agree_for_trace_preserving_maps(e in entries(2, 3)) {
        let ks = kraus(&e, 2, 3);
        let map = process_from_channel(&canonical_qubit_basis(), |r| apply(&ks, r)).unwrap();
        let rep = average_fidelity(&map);
        prop_assert!((rep.f_avg - rep.f_avg_uncorrected).abs() <= 1e-9);
        prop_assert!((rep.a - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn haar_oracle_matches_closed_form_with_leakage(e in entries(3, 2), seed in any::<u64>()) {
        // Outputs on three levels, scored on the qubit block.
        let ks = kraus(&e, 3, 2);
        let map = process_from_channel(&canonical_qubit_basis(), |r| apply(&ks, r)).unwrap();
        let rep = average_fidelity(&map);
        let mc = haar_average_fidelity_oracle(&map, 40_000, seed).unwrap();
        prop_assert!(
            (mc.mean - rep.f_avg).abs() <= 4.5 * mc.std_err,
            "Haar {} ± {} vs {}", mc.mean, mc.std_err, rep.f_avg
        );
    }

    #[test]
    fn g2_ignores_phase(rho in arb_state(5, 10), theta in -6.3f64..6.3) {
        let a = g2_zero(&rho).unwrap();
        let b = g2_zero(&rho.phase_rotated(theta)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn identity_has_unit_fidelity() {
    let map = process_from_channel(&canonical_qubit_basis(), |r| r.clone()).unwrap();
    let rep = average_fidelity(&map);
    assert_eq!(rep.f_avg, 1.0);
    assert_eq!(rep.f_avg_uncorrected, 1.0);
}

#[test]
fn g2_reference_values() {
    use phonon_core::fock::{coherent_state, thermal_state, DensityMatrix};
    assert_eq!(g2_zero(&DensityMatrix::fock(1, 16).unwrap()).unwrap(), 0.0);
    let th = g2_zero(&thermal_state(0.2, 30).unwrap()).unwrap();
    assert!((th - 2.0).abs() < 1e-3, "{th}");
    let coh = g2_zero(&coherent_state(common::amp(0.8, 0.3), 30).unwrap()).unwrap();
    assert!((coh - 1.0).abs() < 1e-6, "{coh}");
}
