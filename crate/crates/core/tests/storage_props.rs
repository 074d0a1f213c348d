use phonon_core::storage::{evolve, evolve_populations, thermal_distribution, MasterEquation};
use proptest::prelude::*;

const DIM: usize = 16;

fn populations(support: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, support).prop_map(|w| {
        let s: f64 = w.iter().sum::<f64>() + 1e-3;
        let mut p = vec![0.0; DIM];
        for (i, x) in w.iter().enumerate() {
            p[i] = x / s;
        }
        p[0] += 1e-3 / s;
        p
    })
}

fn model() -> impl Strategy<Value = MasterEquation> {
    prop_oneof![
        (1e2f64..1e5).prop_map(|gamma| MasterEquation::SingleParameter { gamma }),
        (1e2f64..1e5, 0.0f64..2.0).prop_map(|(kappa, n_bath)| MasterEquation::Full { kappa, n_bath }),
    ]
}

fn rate(m: &MasterEquation) -> f64 {
    match *m {
        MasterEquation::SingleParameter { gamma } => gamma,
        MasterEquation::Full { kappa, n_bath } => kappa * (n_bath + 1.0),
    }
}

fn mean(p: &[f64]) -> f64 {
    p.iter().enumerate().map(|(n, x)| n as f64 * x).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn populations_conserved_and_nonnegative(p0 in populations(4), m in model()) {
        let r = rate(&m);
        let grid: Vec<f64> = (0..=10).map(|k| 0.3 * k as f64 / r).collect();
        for p in evolve(&p0, m, &grid).unwrap() {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
            prop_assert!(p.iter().all(|&x| x >= -1e-10), "{p:?}");
        }
    }

    #[test]
    fn truncated_thermal_state_is_stationary(n_bath in 0.01f64..1.5, kappa in 1e2f64..1e5) {
        let mut p0 = thermal_distribution(n_bath, DIM).unwrap();
        let s: f64 = p0.iter().sum();
        p0.iter_mut().for_each(|x| *x /= s);
        let grid = [1.0 / kappa, 5.0 / kappa];
        for p in evolve(&p0, MasterEquation::Full { kappa, n_bath }, &grid).unwrap() {
            let worst = p.iter().zip(&p0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(worst <= 1e-10, "drift {worst}");
        }
    }
}

#[test]
fn zero_rate_is_identity() {
    let p0 = [0.683, 0.264, 0.053];
    let out = evolve_populations(&p0, 0.0, &[0.0, 1e-4, 1.0]).unwrap();
    for p in out {
        assert_eq!(p, p0);
    }
}

/// The full equation relaxes the mean as `N + (n₀ − N)e^{−κt}`. The
/// single-parameter form with `γ = κN` does not.
#[test]
fn mean_relaxation_needs_the_full_equation() {
    let dim = 40;
    let (kappa, n_bath) = (1.0 / 137e-6, 0.3);
    let mut p0 = vec![0.0; dim];
    p0[..3].copy_from_slice(&[0.683, 0.264, 0.053]);
    let n0 = mean(&p0);
    let grid: Vec<f64> = (1..=8).map(|k| 0.5 * k as f64 / kappa).collect();

    let full = evolve(&p0, MasterEquation::Full { kappa, n_bath }, &grid).unwrap();
    for (t, p) in grid.iter().zip(&full) {
        let analytic = n_bath + (n0 - n_bath) * (-kappa * t).exp();
        assert!(
            (mean(p) / analytic - 1.0).abs() <= 1e-4,
            "t={t}: {} vs {analytic}",
            mean(p)
        );
    }

    let approx = evolve_populations(&p0, kappa * n_bath, &grid).unwrap();
    let t = grid[1];
    let analytic = n_bath + (n0 - n_bath) * (-kappa * t).exp();
    let dev = (mean(&approx[1]) / analytic - 1.0).abs();
    assert!(dev > 0.1, "single-parameter mean {} tracks {analytic}", mean(&approx[1]));
}

#[test]
fn approach_to_equilibrium_is_monotone_for_ground_heavy_states() {
    // Stored state relaxing with τ = 137 µs: P₀ rises and P₁ falls at early times.
    let mut p0 = vec![0.0; DIM];
    p0[..3].copy_from_slice(&[0.683, 0.264, 0.053]);
    let kappa = 1.0 / 137e-6;
    let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 10e-6).collect();
    let traj = evolve(&p0, MasterEquation::Full { kappa, n_bath: 0.05 }, &grid).unwrap();
    for w in traj.windows(2) {
        assert!(w[1][0] >= w[0][0] - 1e-12);
        assert!(w[1][1] <= w[0][1] + 1e-12);
    }
}
