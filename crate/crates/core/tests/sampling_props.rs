mod common;

use common::arb_state;
use phonon_core::fixtures::{fixtures, EmbedPolicy};
use phonon_core::sampling::QSampler;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_samples(rho in arb_state(3, 8), seed in any::<u64>(), n_th in 0.0f64..0.5) {
        let s = QSampler::new(&rho, None).unwrap();
        let a = s.sample_with_noise(3000, n_th, seed).unwrap();
        let b = s.sample_with_noise(3000, n_th, seed).unwrap();
        prop_assert_eq!(&a.samples, &b.samples);
        prop_assert_eq!(a.proposed, b.proposed);
        prop_assert!(a.acceptance_rate() >= a.expected_acceptance(&rho) * 0.9);
    }
}

#[test]
fn heterodyne_moment_identity_on_fixtures() {
    let fx = fixtures().unwrap();
    let n_th = 0.1;
    let n = 60_000;
    for (k, side) in (1..=4).flat_map(|k| [(k, "input"), (k, "output")]) {
        let key = format!("densityMatrices/{side}/{k}");
        let rho = fx.state(&key, 16, EmbedPolicy::Physical).unwrap();
        let set = QSampler::new(&rho, None)
            .unwrap()
            .sample_with_noise(n, n_th, 40 + k as u64)
            .unwrap();
        let r2: Vec<f64> = set.samples.iter().map(|s| s.x * s.x + s.y * s.y).collect();
        let mean = r2.iter().sum::<f64>() / n as f64;
        let var = r2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let expected = rho.mean_occupation() + n_th;
        assert!(
            (mean - 1.0 - expected).abs() < 5.0 * se,
            "{key}: {} vs {expected} (se {se})",
            mean - 1.0
        );
    }
}
