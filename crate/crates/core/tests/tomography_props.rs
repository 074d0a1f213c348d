mod common;

use common::arb_state;
use phonon_core::fixtures::{fixtures, EmbedPolicy};
use phonon_core::povm::PovmKind;
use phonon_core::sampling::sample_q_with_noise;
use phonon_core::tomography::{run_ml, MlConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn cfg(dim: usize, iterations: usize) -> MlConfig {
    MlConfig {
        dim,
        iterations,
        povm: PovmKind::DisplacedThermal { n_th: 0.1 },
        ..MlConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn estimates_are_states_and_likelihood_climbs(rho in arb_state(3, 5), seed in any::<u64>()) {
        let samples = sample_q_with_noise(&rho, 0.1, 1500, None, seed).unwrap();
        let res = run_ml(&samples, &cfg(5, 120)).unwrap();
        let est = &res.rho_est;
        prop_assert!((est.trace() - 1.0).abs() <= 1e-10);
        prop_assert!(est.min_eigenvalue() >= -1e-9);
        prop_assert!(res.is_monotone(), "flags {:?}", res.flags);
        prop_assert_eq!(res.log_likelihood_trace.len(), 121);
    }

    #[test]
    fn sample_order_does_not_matter(seed in any::<u64>()) {
        let rho = phonon_core::fock::thermal_state(0.4, 6).unwrap();
        let samples = sample_q_with_noise(&rho, 0.1, 800, None, seed).unwrap();
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5555));
        let a = run_ml(&samples, &cfg(6, 60)).unwrap();
        let b = run_ml(&shuffled, &cfg(6, 60)).unwrap();
        prop_assert_eq!(a.rho_est.matrix(), b.rho_est.matrix());
    }
}

/// Diagonal RMS error of a fixture state versus sample count should fall
/// roughly as `N^{-1/2}`.
#[test]
fn diagonal_error_scales_as_inverse_root_n() {
    let rho = fixtures()
        .unwrap()
        .state("densityMatrices/input/2", 8, EmbedPolicy::Physical)
        .unwrap();
    let truth = rho.populations();
    let counts = [1_000usize, 10_000, 100_000];
    let seeds = 3u64;
    let mut rms = Vec::new();
    for &n in &counts {
        let mut sq = 0.0;
        for s in 0..seeds {
            let samples = sample_q_with_noise(&rho, 0.1, n, None, 1000 * n as u64 + s).unwrap();
            let est = run_ml(&samples, &cfg(8, 300)).unwrap().rho_est.populations();
            sq += (0..3).map(|k| (est[k] - truth[k]).powi(2)).sum::<f64>() / 3.0;
        }
        rms.push((sq / seeds as f64).sqrt());
    }
    let slope = (rms[2] / rms[0]).ln() / 100f64.ln();
    assert!(
        (-0.8..=-0.3).contains(&slope),
        "rms {rms:?} gives slope {slope}"
    );
}
