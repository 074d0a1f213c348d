#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use phonon_core::fock::{CMatrix, ComplexAmplitude, DensityMatrix};
use phonon_core::sampling::husimi_q;
use proptest::prelude::*;

/// `G G†/tr` with `G` supported on the lowest `support` levels of `dim`.
pub fn density_from_entries(entries: &[f64], support: usize, dim: usize) -> DensityMatrix {
    let g = CMatrix::from_fn(support, support, |i, j| {
        let k = 2 * (i * support + j);
        Complex64::new(entries[k], entries[k + 1])
    });
    let mut m = &g * g.adjoint();
    m += CMatrix::identity(support, support).scale(1e-3);
    let tr = m.trace().re;
    let mut full = CMatrix::zeros(dim, dim);
    full.view_mut((0, 0), (support, support)).copy_from(&m.unscale(tr));
    DensityMatrix::from_matrix(full).expect("valid by construction")
}

/// Random mixed states on the lowest `support` levels.
pub fn arb_state(support: usize, dim: usize) -> impl Strategy<Value = DensityMatrix> {
    proptest::collection::vec(-1.0f64..1.0, 2 * support * support)
        .prop_map(move |e| density_from_entries(&e, support, dim))
}

/// Gauss–Hermite nodes and weights for `∫ e^{−x²} f(x) dx` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |i, k| {
        if k == i + 1 {
            ((k as f64) / 2.0).sqrt()
        } else if i == k + 1 {
            ((i as f64) / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `∫ Q(α') K(α − α') d²α'` with `K(β) = e^{−|β|²/s}/(πs)`, by tensor
/// Gauss–Hermite quadrature.
pub fn convolved_q(rho: &DensityMatrix, alpha: Complex64, s: f64, nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (x, w) = nodes;
    let r = s.sqrt();
    let mut acc = 0.0;
    for (xu, wu) in x.iter().zip(w) {
        for (xv, wv) in x.iter().zip(w) {
            let a = alpha + Complex64::new(r * xu, r * xv);
            acc += wu * wv * husimi_q(rho, ComplexAmplitude::new(a.re, a.im).unwrap());
        }
    }
    acc / PI
}

pub fn amp(re: f64, im: f64) -> ComplexAmplitude {
    ComplexAmplitude::new(re, im).unwrap()
}

pub fn max_abs(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Real-valued off-diagonal magnitude.
pub fn max_off_diagonal(m: &CMatrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                worst = worst.max(m[(i, j)].norm());
            }
        }
    }
    worst
}
