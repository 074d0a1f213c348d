//! Maximum-likelihood state reconstruction by the RρR iteration.
//!
//! Starting from `ρ⁽⁰⁾ = I/d`, each step applies `ρ ← 𝒩[R(ρ) ρ R(ρ)]` with
//! `R(ρ) = (1/N) Σ_k E_k / tr(ρE_k)`. Hermitian operators are stored packed
//! into `d²` reals (`√2·Re`, `√2·Im` off the diagonal) so `tr(ρE)` is a dot
//! product. Samples are sorted before use and partial sums are reduced in a
//! fixed chunk order, so the estimate is bit-identical under any permutation
//! of the input and any thread count.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{hermitize, min_eigenvalue, CMatrix, ComplexAmplitude, DensityMatrix, DensityMatrixDoc};
use crate::povm::{PovmCache, PovmElement, PovmKind};
use crate::quadrature::QuadratureSample;

/// Elements per partial sum in the reduction.
const CHUNK: usize = 512;
/// Positivity is re-verified on this iteration stride.
const PSD_CHECK_EVERY: usize = 50;
const PSD_TOL: f64 = 1e-9;
const MONOTONE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlConfig {
    pub dim: usize,
    pub iterations: usize,
    pub povm: PovmKind,
    /// `R ← (1−ε)I + εR`; 1 is the plain update.
    pub dilution: f64,
    /// Optional α-grid pitch for binning samples (exact when `None`).
    pub bin_width: Option<f64>,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            dim: crate::fock::DEFAULT_DIM,
            iterations: 500,
            povm: PovmKind::Coherent,
            dilution: 1.0,
            bin_width: None,
        }
    }
}

impl MlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("dim {} must be >= 2", self.dim)));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if !(self.dilution > 0.0 && self.dilution <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dilution {} outside (0, 1]",
                self.dilution
            )));
        }
        if let Some(h) = self.bin_width {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidArgument(format!("bin width {h} must be positive")));
            }
        }
        self.povm.validate()
    }
}

#[derive(Debug, Clone)]
pub struct MlResult {
    pub rho_est: DensityMatrix,
    /// `ℒ(ρ⁽ⁱ⁾)` for `i = 0..=iterations`.
    pub log_likelihood_trace: Vec<f64>,
    /// Largest element change in the final step.
    pub converged_delta: f64,
    pub iterations: usize,
    /// `diluted` and/or `non-monotone-likelihood` when applicable.
    pub flags: Vec<String>,
}

impl MlResult {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().expect("non-empty trace")
    }

    pub fn is_monotone(&self) -> bool {
        !self.flags.iter().any(|f| f == "non-monotone-likelihood")
    }

    pub fn to_doc(&self) -> MlResultDoc {
        MlResultDoc {
            rho: self.rho_est.to_doc(),
            log_likelihood_trace: self.log_likelihood_trace.clone(),
            converged_delta: self.converged_delta,
            iterations: self.iterations,
            flags: self.flags.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlResultDoc {
    pub rho: DensityMatrixDoc,
    pub log_likelihood_trace: Vec<f64>,
    pub converged_delta: f64,
    pub iterations: usize,
    pub flags: Vec<String>,
}

/// Packs a Hermitian matrix into `d²` reals with `tr(AB) = pack(A)·pack(B)`.
pub fn pack(m: &CMatrix) -> Vec<f64> {
    let d = m.nrows();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        out[i * d + i] = m[(i, i)].re;
        for j in (i + 1)..d {
            out[i * d + j] = SQRT_2 * m[(i, j)].re;
            out[j * d + i] = SQRT_2 * m[(i, j)].im;
        }
    }
    out
}

pub fn unpack(p: &[f64], d: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    for i in 0..d {
        m[(i, i)] = Complex64::new(p[i * d + i], 0.0);
        for j in (i + 1)..d {
            let z = Complex64::new(p[i * d + j], p[j * d + i]) / SQRT_2;
            m[(i, j)] = z;
            m[(j, i)] = z.conj();
        }
    }
    m
}

/// Four independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Weighted measurement operators prepared for the iteration.
#[derive(Debug, Clone)]
pub struct PovmSet {
    dim: usize,
    packed: Vec<f64>,
    weights: Vec<f64>,
    /// Index into the caller's sample list of the first sample per element.
    origin: Vec<usize>,
}

impl PovmSet {
    /// One element per sample (sorted), or one cell-averaged element per
    /// occupied grid cell when `bin_width` is set, weighted by its count.
    pub fn from_samples(
        samples: &[QuadratureSample],
        kind: PovmKind,
        dim: usize,
        bin_width: Option<f64>,
    ) -> Result<Self> {
        if bin_width.is_some() {
            return Self::from_samples_cached(samples, &PovmCache::new(kind, dim, bin_width)?);
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        kind.validate()?;
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.sort_by(|&a, &b| {
            samples[a]
                .x
                .total_cmp(&samples[b].x)
                .then(samples[a].y.total_cmp(&samples[b].y))
        });
        let alphas = idx
            .iter()
            .map(|&i| ComplexAmplitude::new(samples[i].x, samples[i].y))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            packed: build_packed(&alphas, kind, dim)?,
            weights: vec![1.0; idx.len()],
            origin: idx,
        })
    }

    /// Binned set whose operators come from `cache`, so repeated fits on
    /// the same grid build each element once. Without a cache grid this is
    /// the exact per-sample set.
    pub fn from_samples_cached(samples: &[QuadratureSample], cache: &PovmCache) -> Result<Self> {
        let Some(h) = cache.grid() else {
            return Self::from_samples(samples, cache.kind(), cache.dim(), None);
        };
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let mut bins: BTreeMap<(i64, i64), (usize, usize)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let a = ComplexAmplitude::new(s.x, s.y)?;
            let key = cache.cell(a).expect("grid is set");
            let e = bins.entry(key).or_insert((0, i));
            e.0 += 1;
        }
        let d2 = cache.dim() * cache.dim();
        let mut packed = Vec::with_capacity(bins.len() * d2);
        let mut weights = Vec::with_capacity(bins.len());
        let mut origin = Vec::with_capacity(bins.len());
        for (&(kx, ky), &(count, first)) in &bins {
            let center = ComplexAmplitude::new(kx as f64 * h, ky as f64 * h)?;
            packed.extend(pack(&cache.get(center)?.operator));
            weights.push(count as f64);
            origin.push(first);
        }
        Ok(Self {
            dim: cache.dim(),
            packed,
            weights,
            origin,
        })
    }

    /// Explicit outcome locations with weights (e.g. a quadrature grid).
    pub fn from_weighted(
        alphas: &[ComplexAmplitude],
        weights: &[f64],
        kind: PovmKind,
        dim: usize,
    ) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != weights.len() {
            return Err(Error::InvalidArgument("need matching, non-empty alphas and weights".into()));
        }
        Ok(Self {
            dim,
            packed: build_packed(alphas, kind, dim)?,
            weights: weights.to_vec(),
            origin: (0..alphas.len()).collect(),
        })
    }

    pub fn from_elements(elements: &[PovmElement]) -> Result<Self> {
        let Some(first) = elements.first() else {
            return Err(Error::InvalidArgument("no POVM elements".into()));
        };
        let dim = first.operator.nrows();
        let mut packed = Vec::with_capacity(elements.len() * dim * dim);
        for e in elements {
            if e.operator.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.operator.nrows(),
                });
            }
            packed.extend(pack(&e.operator));
        }
        Ok(Self {
            dim,
            packed,
            weights: vec![1.0; elements.len()],
            origin: (0..elements.len()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `(Σ_k w_k E_k/p_k / Σ w, Σ_k w_k ln p_k)` for the packed state.
    fn accumulate(&self, rho: &[f64]) -> Result<(Vec<f64>, f64)> {
        let d2 = self.dim * self.dim;
        let parts: Vec<Result<(Vec<f64>, f64)>> = self
            .packed
            .par_chunks(CHUNK * d2)
            .zip(self.weights.par_chunks(CHUNK))
            .enumerate()
            .map(|(c, (ops, ws))| {
                let mut r = vec![0.0; d2];
                let mut ll = 0.0;
                for (k, (e, &w)) in ops.chunks_exact(d2).zip(ws).enumerate() {
                    let p = dot(rho, e);
                    if !(p > 0.0) || !p.is_finite() {
                        return Err(Error::DegenerateSupport {
                            index: self.origin[c * CHUNK + k],
                            probability: p,
                        });
                    }
                    let s = w / p;
                    for (ri, ei) in r.iter_mut().zip(e) {
                        *ri += s * ei;
                    }
                    ll += w * p.ln();
                }
                Ok((r, ll))
            })
            .collect();
        let mut r = vec![0.0; d2];
        let mut ll = 0.0;
        for part in parts {
            let (pr, pl) = part?;
            for (a, b) in r.iter_mut().zip(&pr) {
                *a += b;
            }
            ll += pl;
        }
        let w = self.total_weight();
        for a in &mut r {
            *a /= w;
        }
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood);
        }
        Ok((r, ll))
    }
}

fn build_packed(alphas: &[ComplexAmplitude], kind: PovmKind, dim: usize) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = alphas
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len() * dim * dim);
            for &a in chunk {
                out.extend(pack(&kind.element(a, dim)?.operator));
            }
            Ok(out)
        })
        .collect();
    let mut packed = Vec::with_capacity(alphas.len() * dim * dim);
    for p in parts {
        packed.extend(p?);
    }
    Ok(packed)
}

/// `R(ρ) = (1/N) Σ_k E_k / tr(ρE_k)`.
pub fn r_operator(rho: &DensityMatrix, povms: &[PovmElement]) -> Result<CMatrix> {
    let set = PovmSet::from_elements(povms)?;
    check_dim(rho, &set)?;
    let (r, _) = set.accumulate(&pack(rho.matrix()))?;
    Ok(unpack(&r, set.dim))
}

/// `ℒ = Σ_k ln tr(ρE_k)`; a zero probability is an error.
pub fn log_likelihood(rho: &DensityMatrix, povms: &[PovmElement]) -> Result<f64> {
    let set = PovmSet::from_elements(povms)?;
    log_likelihood_set(rho, &set)
}

pub fn log_likelihood_set(rho: &DensityMatrix, set: &PovmSet) -> Result<f64> {
    check_dim(rho, set)?;
    Ok(set.accumulate(&pack(rho.matrix()))?.1)
}

fn check_dim(rho: &DensityMatrix, set: &PovmSet) -> Result<()> {
    if rho.dim() != set.dim {
        return Err(Error::DimensionMismatch {
            expected: set.dim,
            got: rho.dim(),
        });
    }
    Ok(())
}

pub fn run_ml(samples: &[QuadratureSample], config: &MlConfig) -> Result<MlResult> {
    config.validate()?;
    let set = PovmSet::from_samples(samples, config.povm, config.dim, config.bin_width)?;
    run_ml_on(&set, config)
}

/// Runs the iteration on prepared operators (`config.povm` and `bin_width`
/// are not consulted).
pub fn run_ml_on(set: &PovmSet, config: &MlConfig) -> Result<MlResult> {
    config.validate()?;
    if set.dim != config.dim {
        return Err(Error::DimensionMismatch {
            expected: config.dim,
            got: set.dim,
        });
    }
    let d = config.dim;
    let eps = config.dilution;
    let mut rho = CMatrix::identity(d, d).unscale(d as f64);
    let mut packed = pack(&rho);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut delta = 0.0;
    for it in 0..config.iterations {
        let (r, ll) = set.accumulate(&packed)?;
        trace.push(ll);
        let mut rm = unpack(&r, d);
        if eps < 1.0 {
            rm = rm.scale(eps) + CMatrix::identity(d, d).scale(1.0 - eps);
        }
        let next = &rm * &rho * &rm;
        let tr = next.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::NonFiniteLikelihood);
        }
        let next = hermitize(next.unscale(tr));
        delta = next
            .iter()
            .zip(rho.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        rho = next;
        packed = pack(&rho);
        if (it + 1) % PSD_CHECK_EVERY == 0 {
            let m = min_eigenvalue(&rho);
            if m < -PSD_TOL {
                return Err(Error::InvalidState(format!(
                    "iterate {} has eigenvalue {m:.3e}",
                    it + 1
                )));
            }
        }
    }
    trace.push(set.accumulate(&packed)?.1);

    let mut flags = Vec::new();
    if eps < 1.0 {
        flags.push("diluted".to_string());
    }
    let monotone = trace
        .windows(2)
        .all(|w| w[1] >= w[0] - MONOTONE_TOL * w[0].abs().max(1.0));
    if !monotone {
        flags.push("non-monotone-likelihood".to_string());
    }
    Ok(MlResult {
        rho_est: DensityMatrix::from_composite(rho)?,
        log_likelihood_trace: trace,
        converged_delta: delta,
        iterations: config.iterations,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{max_abs_diff, thermal_state};
    use crate::povm::coherent_povm;
    use crate::sampling::{husimi_q, sample_q};
    use std::f64::consts::PI;

    #[test]
    fn pack_round_trip_and_trace_product() {
        let a = thermal_state(0.4, 5).unwrap();
        let b = crate::fock::coherent_state(ComplexAmplitude::new(0.3, 0.8).unwrap(), 5).unwrap();
        let pa = pack(a.matrix());
        let pb = pack(b.matrix());
        assert!(max_abs_diff(&unpack(&pb, 5), b.matrix()) < 1e-15);
        let direct = crate::fock::trace_product(a.matrix(), b.matrix()).re;
        assert!((dot(&pa, &pb) - direct).abs() < 1e-15);
    }

    #[test]
    fn r_operator_single_outcome() {
        let e = coherent_povm(ComplexAmplitude::zero(), 2).unwrap();
        let rho = DensityMatrix::maximally_mixed(2).unwrap();
        let r = r_operator(&rho, &[e]).unwrap();
        let expected = DensityMatrix::vacuum(2).unwrap().into_matrix().scale(2.0);
        assert!(max_abs_diff(&r, &expected) < 1e-14);
        assert!(max_abs_diff(&r, &r.adjoint()) < 1e-12);
        assert!(r_operator(&rho, &[]).is_err());
    }

    #[test]
    fn r_operator_degenerate_support() {
        let e = coherent_povm(ComplexAmplitude::zero(), 4).unwrap();
        let one = DensityMatrix::fock(1, 4).unwrap();
        assert!(matches!(
            r_operator(&one, &[e.clone()]),
            Err(Error::DegenerateSupport { index: 0, .. })
        ));
        assert!(log_likelihood(&one, &[e]).is_err());
    }

    #[test]
    fn r_is_identity_at_continuum_fixed_point() {
        let rho = thermal_state(0.3, 8).unwrap();
        let h = 0.1;
        let n = 70;
        let mut alphas = Vec::new();
        let mut weights = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                let a = ComplexAmplitude {
                    re: i as f64 * h,
                    im: j as f64 * h,
                };
                alphas.push(a);
                weights.push(husimi_q(&rho, a) * h * h);
            }
        }
        let set = PovmSet::from_weighted(&alphas, &weights, PovmKind::Coherent, 8).unwrap();
        let (r, _) = set.accumulate(&pack(rho.matrix())).unwrap();
        let r = unpack(&r, 8);
        assert!(max_abs_diff(&r, &CMatrix::identity(8, 8)) < 1e-3);
    }

    #[test]
    fn log_likelihood_single_sample() {
        let e = coherent_povm(ComplexAmplitude::zero(), 16).unwrap();
        let vac = DensityMatrix::vacuum(16).unwrap();
        assert!((log_likelihood(&vac, &[e]).unwrap() - (1.0 / PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn vacuum_reconstruction() {
        let vac = DensityMatrix::vacuum(16).unwrap();
        let samples = sample_q(&vac, 20_000, None, 9).unwrap();
        let cfg = MlConfig {
            iterations: 200,
            ..MlConfig::default()
        };
        let res = run_ml(&samples, &cfg).unwrap();
        assert!(res.rho_est.element(0, 0).re >= 0.98);
        assert!(res.is_monotone());
        assert_eq!(res.log_likelihood_trace.len(), 201);
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let rho = thermal_state(0.3, 8).unwrap();
        let mut samples = sample_q(&rho, 3000, None, 4).unwrap();
        let cfg = MlConfig {
            dim: 8,
            iterations: 30,
            ..MlConfig::default()
        };
        let a = run_ml(&samples, &cfg).unwrap();
        samples.reverse();
        samples.swap(10, 2000);
        let b = run_ml(&samples, &cfg).unwrap();
        assert_eq!(a.rho_est, b.rho_est);
        assert_eq!(a.log_likelihood_trace, b.log_likelihood_trace);
    }

    #[test]
    fn dilution_is_flagged() {
        let vac = DensityMatrix::vacuum(8).unwrap();
        let samples = sample_q(&vac, 2000, None, 2).unwrap();
        let cfg = MlConfig {
            dim: 8,
            iterations: 20,
            dilution: 0.5,
            ..MlConfig::default()
        };
        let res = run_ml(&samples, &cfg).unwrap();
        assert!(res.flags.contains(&"diluted".to_string()));
        let bad = MlConfig {
            dilution: 0.0,
            ..cfg
        };
        assert!(run_ml(&samples, &bad).is_err());
        assert!(run_ml(&[], &cfg).is_err());
    }

    #[test]
    fn binning_approximates_exact() {
        let rho = thermal_state(0.5, 10).unwrap();
        let samples = sample_q(&rho, 20_000, None, 8).unwrap();
        let cfg = MlConfig {
            dim: 10,
            iterations: 100,
            ..MlConfig::default()
        };
        let exact = run_ml(&samples, &cfg).unwrap();
        let binned = run_ml(
            &samples,
            &MlConfig {
                bin_width: Some(0.05),
                ..cfg
            },
        )
        .unwrap();
        assert!(max_abs_diff(exact.rho_est.matrix(), binned.rho_est.matrix()) < 5e-3);
    }
}
