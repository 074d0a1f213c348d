//! Synthetic heterodyne data: rejection sampling of the Husimi Q-function
//! inside a disc, with optional Gaussian added noise.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{coherent_amplitudes, ComplexAmplitude, DensityMatrix};
use crate::quadrature::QuadratureSample;
use crate::rng;

/// Q mass that must lie inside a caller-supplied sampling disc.
pub const REQUIRED_MASS: f64 = 0.999;
/// Q mass inside the default disc. Cutting 10⁻³ of the tail biases ML
/// populations by ~10⁻² at 10⁵ samples, so the default is much tighter.
pub const DEFAULT_MASS: f64 = 1.0 - 1e-7;

/// Samples drawn per RNG stream. Fixed so results do not depend on threads.
const BLOCK: usize = 4096;
const NOISE_STREAM_OFFSET: u64 = 1 << 40;

/// `Q(α) = ⟨α|ρ|α⟩/π`, using the coherent vector projected on the state's space.
pub fn husimi_q(rho: &DensityMatrix, alpha: ComplexAmplitude) -> f64 {
    let v = coherent_amplitudes(alpha.to_complex(), rho.dim());
    let m = rho.matrix();
    let d = rho.dim();
    let mut acc = 0.0;
    for j in 0..d {
        let mut col = num_complex::Complex64::new(0.0, 0.0);
        for i in 0..d {
            col += v[i].conj() * m[(i, j)];
        }
        acc += (col * v[j]).re;
    }
    (acc / PI).max(0.0)
}

/// Q mass inside `|α| ≤ radius`. The angular integral removes all
/// off-diagonal terms, leaving `Σ_n ρ_nn P(n+1, r²)` with `P` the regularized
/// lower incomplete gamma function.
pub fn q_mass_within(rho: &DensityMatrix, radius: f64) -> f64 {
    let x = radius * radius;
    let mut term = (-x).exp();
    let mut partial = 0.0;
    let mut mass = 0.0;
    for (n, p) in rho.populations().into_iter().enumerate() {
        if n > 0 {
            term *= x / n as f64;
        }
        partial += term;
        mass += p * (1.0 - partial).max(0.0);
    }
    mass
}

/// Smallest radius (to 1e-3) enclosing [`DEFAULT_MASS`].
pub fn default_radius(rho: &DensityMatrix) -> f64 {
    radius_for_mass(rho, DEFAULT_MASS)
}

/// Smallest radius (to 1e-3) whose enclosed Q mass reaches `mass`,
/// bracketed by doubling from 1.
pub fn radius_for_mass(rho: &DensityMatrix, mass: f64) -> f64 {
    let mut hi = 1.0;
    while q_mass_within(rho, hi) < mass {
        hi *= 2.0;
        if hi > 1e3 {
            return hi;
        }
    }
    let mut lo = if hi > 1.0 { hi / 2.0 } else { 0.0 };
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if q_mass_within(rho, mid) >= mass {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Accepted samples plus sampler diagnostics.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<QuadratureSample>,
    pub proposed: u64,
    pub radius: f64,
    /// Upper bound on Q used for rejection.
    pub q_bound: f64,
}

impl SampleSet {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.samples.len() as f64 / self.proposed as f64
        }
    }

    /// Lower bound on the acceptance rate, `mass/(πr² Q_bound)`.
    pub fn expected_acceptance(&self, rho: &DensityMatrix) -> f64 {
        q_mass_within(rho, self.radius) / (PI * self.radius * self.radius * self.q_bound)
    }
}

/// Rejection sampler for one state and disc.
#[derive(Debug, Clone)]
pub struct QSampler {
    rho: DensityMatrix,
    radius: f64,
    q_bound: f64,
}

impl QSampler {
    /// `radius = None` picks [`default_radius`]. A given radius enclosing less than
    /// [`REQUIRED_MASS`] is rejected.
    pub fn new(rho: &DensityMatrix, radius: Option<f64>) -> Result<Self> {
        let radius = match radius {
            Some(r) => {
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::InvalidArgument(format!("radius {r} must be positive")));
                }
                let mass = q_mass_within(rho, r);
                if mass < REQUIRED_MASS {
                    return Err(Error::RadiusTooSmall {
                        radius: r,
                        mass,
                        required: radius_for_mass(rho, REQUIRED_MASS),
                    });
                }
                r
            }
            None => default_radius(rho),
        };
        // ⟨α|ρ|α⟩ ≤ λ_max for any vector of norm ≤ 1, so λ_max/π bounds Q.
        let lambda_max = nalgebra::SymmetricEigen::new(rho.matrix().clone())
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        Ok(Self {
            rho: rho.clone(),
            radius,
            q_bound: lambda_max.min(1.0) / PI,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sample(&self, n_samples: usize, seed: u64) -> Result<SampleSet> {
        self.sample_with_noise(n_samples, 0.0, seed)
    }

    /// Q samples with independent Gaussian noise of variance `n_th/2` added
    /// to each quadrature. This matches the displaced-thermal POVM with
    /// `n_add = n_th`.
    pub fn sample_with_noise(&self, n_samples: usize, n_th: f64, seed: u64) -> Result<SampleSet> {
        if !(n_th >= 0.0) || !n_th.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise occupancy {n_th} must be finite and non-negative"
            )));
        }
        let noise = if n_th > 0.0 {
            Some(Normal::new(0.0, (0.5 * n_th).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?)
        } else {
            None
        };
        let blocks = n_samples.div_ceil(BLOCK);
        let parts: Vec<(Vec<QuadratureSample>, u64)> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let count = BLOCK.min(n_samples - b * BLOCK);
                self.sample_block(count, seed, b as u64, noise.as_ref())
            })
            .collect();
        let mut samples = Vec::with_capacity(n_samples);
        let mut proposed = 0;
        for (s, p) in parts {
            samples.extend(s);
            proposed += p;
        }
        Ok(SampleSet {
            samples,
            proposed,
            radius: self.radius,
            q_bound: self.q_bound,
        })
    }

    fn sample_block(
        &self,
        count: usize,
        seed: u64,
        block: u64,
        noise: Option<&Normal<f64>>,
    ) -> (Vec<QuadratureSample>, u64) {
        let mut rng = rng::stream(seed, block);
        let mut out = Vec::with_capacity(count);
        let mut proposed = 0u64;
        while out.len() < count {
            proposed += 1;
            let r = self.radius * rng.random::<f64>().sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let alpha = ComplexAmplitude {
                re: r * phi.cos(),
                im: r * phi.sin(),
            };
            let u: f64 = rng.random();
            if u * self.q_bound < husimi_q(&self.rho, alpha) {
                out.push(QuadratureSample {
                    x: alpha.re,
                    y: alpha.im,
                });
            }
        }
        if let Some(dist) = noise {
            let mut nrng = rng::stream(seed, NOISE_STREAM_OFFSET + block);
            for s in &mut out {
                s.x += dist.sample(&mut nrng);
                s.y += dist.sample(&mut nrng);
            }
        }
        (out, proposed)
    }
}

pub fn sample_q(
    rho: &DensityMatrix,
    n_samples: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<Vec<QuadratureSample>> {
    Ok(QSampler::new(rho, radius)?.sample(n_samples, seed)?.samples)
}

pub fn sample_q_with_noise(
    rho: &DensityMatrix,
    n_th: f64,
    n_samples: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<Vec<QuadratureSample>> {
    Ok(QSampler::new(rho, radius)?
        .sample_with_noise(n_samples, n_th, seed)?
        .samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, thermal_state};

    fn moments(s: &[QuadratureSample]) -> (f64, f64, f64, f64) {
        let n = s.len() as f64;
        let mx = s.iter().map(|p| p.x).sum::<f64>() / n;
        let my = s.iter().map(|p| p.y).sum::<f64>() / n;
        let vx = s.iter().map(|p| (p.x - mx).powi(2)).sum::<f64>() / (n - 1.0);
        let vy = s.iter().map(|p| (p.y - my).powi(2)).sum::<f64>() / (n - 1.0);
        (mx, my, vx, vy)
    }

    #[test]
    fn q_values() {
        let vac = DensityMatrix::vacuum(16).unwrap();
        assert!((husimi_q(&vac, ComplexAmplitude::zero()) - 1.0 / PI).abs() < 1e-15);
        let one = DensityMatrix::fock(1, 16).unwrap();
        let a = ComplexAmplitude::new(1.0, 0.0).unwrap();
        assert!((husimi_q(&one, a) - (-1.0f64).exp() / PI).abs() < 1e-14);
        assert_eq!(husimi_q(&one, ComplexAmplitude::zero()), 0.0);
    }

    #[test]
    fn grid_integral_matches_closed_form_mass() {
        let rho = thermal_state(0.3, 16).unwrap();
        let h = 0.05;
        let r: f64 = 6.0;
        let n = (r / h) as i64;
        let mut total = 0.0;
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                if x * x + y * y <= r * r {
                    total += husimi_q(&rho, ComplexAmplitude { re: x, im: y });
                }
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 2e-3, "grid mass {total}");
        assert!((q_mass_within(&rho, 6.0) - 1.0).abs() < 1e-10);
        // Vacuum: 1 − e^{−r²}.
        let vac = DensityMatrix::vacuum(16).unwrap();
        assert!((q_mass_within(&vac, 1.5) - (1.0 - (-2.25f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn default_radius_is_minimal() {
        let vac = DensityMatrix::vacuum(16).unwrap();
        // 1 − e^{−r²} = m at r = √(−ln(1 − m)).
        let r = radius_for_mass(&vac, REQUIRED_MASS);
        assert!((r - 1000f64.ln().sqrt()).abs() < 2e-3);
        assert!((default_radius(&vac) - 1e7f64.ln().sqrt()).abs() < 2e-3);
        assert!(matches!(
            QSampler::new(&vac, Some(1.0)),
            Err(Error::RadiusTooSmall { .. })
        ));
    }

    #[test]
    fn vacuum_variance() {
        let vac = DensityMatrix::vacuum(16).unwrap();
        let s = sample_q(&vac, 100_000, None, 3).unwrap();
        let (_, _, vx, vy) = moments(&s);
        assert!((vx - 0.5).abs() < 0.01 && (vy - 0.5).abs() < 0.01, "{vx} {vy}");
    }

    #[test]
    fn coherent_centroid() {
        let rho = coherent_state(ComplexAmplitude::new(1.0, 0.0).unwrap(), 16).unwrap();
        let s = sample_q(&rho, 50_000, None, 11).unwrap();
        let (mx, my, _, _) = moments(&s);
        let sigma = (0.5 / s.len() as f64).sqrt();
        assert!((mx - 1.0).abs() < 3.0 * sigma && my.abs() < 3.0 * sigma, "{mx} {my}");
    }

    #[test]
    fn noise_adds_half_n_per_quadrature() {
        let vac = DensityMatrix::vacuum(16).unwrap();
        let s = sample_q_with_noise(&vac, 0.1, 100_000, None, 5).unwrap();
        let (_, _, vx, vy) = moments(&s);
        assert!((vx - 0.55).abs() < 0.011 && (vy - 0.55).abs() < 0.011, "{vx} {vy}");
    }

    #[test]
    fn zero_noise_is_plain_sampling_and_seeded() {
        let rho = thermal_state(0.2, 16).unwrap();
        let a = sample_q(&rho, 9000, None, 42).unwrap();
        let b = sample_q_with_noise(&rho, 0.0, 9000, None, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_q(&rho, 9000, None, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn acceptance_rate_bound() {
        let rho = DensityMatrix::fock(1, 16).unwrap();
        let sampler = QSampler::new(&rho, None).unwrap();
        let set = sampler.sample(20_000, 1).unwrap();
        assert!(set.acceptance_rate() >= 0.95 * set.expected_acceptance(&rho));
    }
}
