//! g²(0), entanglement fidelity and the average fidelity of a process
//! reconstructed from input/output state pairs.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{hermitize, min_eigenvalue, CMatrix, CVector, DensityMatrix};
use crate::rng;

/// Condition numbers above this reject the input basis.
pub const MAX_CONDITION: f64 = 1e6;
/// Outputs with an eigenvalue below `-NEGATIVE_EIGENVALUE_TOL` are flagged.
pub const NEGATIVE_EIGENVALUE_TOL: f64 = 1e-6;

/// `Σ n(n−1)ρ_nn / (Σ n ρ_nn)²` over every diagonal element.
pub fn g2_zero(rho: &DensityMatrix) -> Result<f64> {
    let p = rho.populations();
    let mut num = 0.0;
    let mut mean = 0.0;
    for (n, pn) in p.iter().enumerate() {
        let n = n as f64;
        num += n * (n - 1.0) * pn;
        mean += n * pn;
    }
    if !(mean > 1e-15) {
        return Err(Error::UndefinedMetric(format!(
            "g2 needs a positive mean occupation, got {mean:.3e}"
        )));
    }
    Ok(num / (mean * mean))
}

/// A linear map fixed by its action on `d²` linearly independent inputs.
#[derive(Debug, Clone)]
pub struct ProcessMap {
    dim_in: usize,
    dim_out: usize,
    inputs: Vec<CMatrix>,
    outputs: Vec<CMatrix>,
    /// Maps `vec(X)` to expansion coefficients over `inputs`.
    coefficients: CMatrix,
    condition: f64,
    flags: Vec<String>,
}

impl ProcessMap {
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn basis_inputs(&self) -> &[CMatrix] {
        &self.inputs
    }

    pub fn basis_outputs(&self) -> &[CMatrix] {
        &self.outputs
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    /// `ℰ(X)` for a `dim_in × dim_in` operator, by linear extension.
    pub fn apply(&self, x: &CMatrix) -> Result<CMatrix> {
        let d = self.dim_in;
        if x.nrows() != d || x.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.nrows(),
            });
        }
        let c = &self.coefficients * vectorize(x);
        let mut out = CMatrix::zeros(self.dim_out, self.dim_out);
        for (ck, ok) in c.iter().zip(&self.outputs) {
            out += ok * *ck;
        }
        Ok(out)
    }
}

fn vectorize(x: &CMatrix) -> CVector {
    let d = x.nrows();
    CVector::from_iterator(d * d, (0..d).flat_map(|i| (0..d).map(move |j| x[(i, j)])))
}

/// Reconstructs `ℰ` from `dim_in²` pairs. Inputs are truncated to their
/// leading `dim_in` block without renormalization; outputs are kept whole.
pub fn reconstruct_process(
    inputs: &[DensityMatrix],
    outputs: &[DensityMatrix],
    dim_in: usize,
) -> Result<ProcessMap> {
    let ins: Vec<CMatrix> = inputs.iter().map(|r| r.matrix().clone()).collect();
    let outs: Vec<CMatrix> = outputs.iter().map(|r| r.matrix().clone()).collect();
    reconstruct_process_matrices(&ins, &outs, dim_in)
}

/// As [`reconstruct_process`] for estimates that need not be exactly
/// positive or normalized (tabulated states, for instance).
pub fn reconstruct_process_matrices(
    inputs: &[CMatrix],
    outputs: &[CMatrix],
    dim_in: usize,
) -> Result<ProcessMap> {
    let mut ins = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.nrows() < dim_in || x.ncols() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                got: x.nrows(),
            });
        }
        ins.push(x.view((0, 0), (dim_in, dim_in)).into_owned());
    }
    let mut map = reconstruct_from_operators(&ins, outputs, dim_in)?;
    if outputs
        .iter()
        .any(|o| min_eigenvalue(&hermitize(o.clone())) < -NEGATIVE_EIGENVALUE_TOL)
    {
        map.flags.push("negative-output-eigenvalue".to_string());
    }
    Ok(map)
}

/// As [`reconstruct_process`] but on raw operators, which need not be
/// physical states.
pub fn reconstruct_from_operators(
    inputs: &[CMatrix],
    outputs: &[CMatrix],
    dim_in: usize,
) -> Result<ProcessMap> {
    let n = dim_in * dim_in;
    if dim_in == 0 || inputs.len() != n || outputs.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need {n} input/output pairs for dim {dim_in}, got {}/{}",
            inputs.len(),
            outputs.len()
        )));
    }
    for x in inputs {
        if x.nrows() != dim_in || x.ncols() != dim_in {
            return Err(Error::DimensionMismatch {
                expected: dim_in,
                got: x.nrows(),
            });
        }
    }
    let dim_out = outputs[0].nrows();
    for o in outputs {
        if o.nrows() != dim_out || o.ncols() != dim_out {
            return Err(Error::DimensionMismatch {
                expected: dim_out,
                got: o.nrows(),
            });
        }
    }
    if dim_out < dim_in {
        return Err(Error::DimensionMismatch {
            expected: dim_in,
            got: dim_out,
        });
    }
    let mut m = CMatrix::zeros(n, n);
    for (k, x) in inputs.iter().enumerate() {
        m.set_column(k, &vectorize(x));
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularBasis { condition });
    }
    let coefficients = m.try_inverse().ok_or(Error::SingularBasis { condition })?;
    Ok(ProcessMap {
        dim_in,
        dim_out,
        inputs: inputs.to_vec(),
        outputs: outputs.to_vec(),
        coefficients,
        condition,
        flags: Vec::new(),
    })
}

/// Builds the map of a known channel from its action on `basis`.
pub fn process_from_channel<F>(basis: &[CMatrix], channel: F) -> Result<ProcessMap>
where
    F: Fn(&CMatrix) -> CMatrix,
{
    let dim_in = basis.first().map(|b| b.nrows()).unwrap_or(0);
    let outs: Vec<CMatrix> = basis.iter().map(&channel).collect();
    reconstruct_from_operators(basis, &outs, dim_in)
}

/// `|0⟩, |1⟩, |+⟩, |+i⟩` projectors.
pub fn canonical_qubit_basis() -> Vec<CMatrix> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let kets = [
        [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        [Complex64::new(s, 0.0), Complex64::new(s, 0.0)],
        [Complex64::new(s, 0.0), Complex64::new(0.0, s)],
    ];
    kets.iter()
        .map(|k| {
            let v = CVector::from_column_slice(k);
            &v * v.adjoint()
        })
        .collect()
}

fn unit(d: usize, i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    m[(i, j)] = Complex64::new(1.0, 0.0);
    m
}

/// `(1/d²) Σ_ij ⟨i|ℰ(|i⟩⟨j|)|j⟩` before taking the real part.
fn entanglement_sum(map: &ProcessMap) -> Complex64 {
    let d = map.dim_in;
    let mut s = Complex64::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let e = map.apply(&unit(d, i, j)).expect("dims checked");
            s += e[(i, j)];
        }
    }
    s / (d * d) as f64
}

pub fn entanglement_fidelity(map: &ProcessMap) -> f64 {
    entanglement_sum(map).re
}

/// `A(ℰ) = (1/d²) Σ_ij ⟨i|ℰ(|j⟩⟨j|)|i⟩`.
pub fn leakage_correction(map: &ProcessMap) -> f64 {
    let d = map.dim_in;
    let mut s = Complex64::new(0.0, 0.0);
    for j in 0..d {
        let e = map.apply(&unit(d, j, j)).expect("dims checked");
        for i in 0..d {
            s += e[(i, i)];
        }
    }
    s.re / (d * d) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    #[serde(rename = "F_e")]
    pub f_e: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "F_avg")]
    pub f_avg: f64,
    #[serde(rename = "F_avg_uncorrected")]
    pub f_avg_uncorrected: f64,
    pub imag_residual: f64,
    pub condition_number: f64,
    pub flags: Vec<String>,
}

pub fn average_fidelity(map: &ProcessMap) -> FidelityReport {
    let d = map.dim_in as f64;
    let fe = entanglement_sum(map);
    let a = leakage_correction(map);
    let mut flags = map.flags.clone();
    if fe.im.abs() > 1e-9 {
        flags.push("imaginary-residual".to_string());
    }
    FidelityReport {
        f_e: fe.re,
        a,
        f_avg: d / (d + 1.0) * (fe.re + a),
        f_avg_uncorrected: (d * fe.re + 1.0) / (d + 1.0),
        imag_residual: fe.im,
        condition_number: map.condition,
        flags,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaarEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_states: usize,
}

const HAAR_BLOCK: usize = 4096;

/// Monte Carlo `∫dψ ⟨ψ|ℰ(|ψ⟩⟨ψ|)|ψ⟩` over Haar-random qubit states.
pub fn haar_average_fidelity_oracle(map: &ProcessMap, n_states: usize, seed: u64) -> Result<HaarEstimate> {
    if map.dim_in != 2 {
        return Err(Error::InvalidArgument("the Haar oracle is for qubit maps".into()));
    }
    if n_states < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: n_states,
        });
    }
    let blocks = n_states.div_ceil(HAAR_BLOCK);
    let sums: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let count = HAAR_BLOCK.min(n_states - b * HAAR_BLOCK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                let mut z = [Complex64::new(0.0, 0.0); 2];
                for zi in &mut z {
                    *zi = Complex64::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
                }
                let psi = CVector::from_column_slice(&z).normalize();
                let out = map.apply(&(&psi * psi.adjoint())).expect("qubit map");
                let mut f = Complex64::new(0.0, 0.0);
                for i in 0..2 {
                    for j in 0..2 {
                        f += psi[i].conj() * out[(i, j)] * psi[j];
                    }
                }
                s += f.re;
                s2 += f.re * f.re;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = n_states as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(HaarEstimate {
        mean,
        std_err: (var / n).sqrt(),
        n_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{max_abs_diff, thermal_state};

    #[test]
    fn g2_reference_values() {
        assert_eq!(g2_zero(&DensityMatrix::fock(1, 16).unwrap()).unwrap(), 0.0);
        let th = thermal_state(0.5, 16).unwrap();
        assert!((g2_zero(&th).unwrap() - 2.0).abs() < 1e-3);
        assert!(matches!(
            g2_zero(&DensityMatrix::vacuum(4).unwrap()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    fn identity_map() -> ProcessMap {
        process_from_channel(&canonical_qubit_basis(), |x| x.clone()).unwrap()
    }

    #[test]
    fn identity_map_is_perfect() {
        let r = average_fidelity(&identity_map());
        assert_eq!(r.f_e, 1.0);
        assert_eq!(r.f_avg, 1.0);
        assert_eq!(r.f_avg_uncorrected, 1.0);
    }

    #[test]
    fn classical_and_depolarizing_channels() {
        let classical = process_from_channel(&canonical_qubit_basis(), |x| {
            let mut m = CMatrix::zeros(2, 2);
            m[(0, 0)] = x[(0, 0)];
            m[(1, 1)] = x[(1, 1)];
            m
        })
        .unwrap();
        let r = average_fidelity(&classical);
        assert!((r.f_e - 0.5).abs() < 1e-12);
        assert!((r.f_avg - 2.0 / 3.0).abs() < 1e-12);

        let depol = process_from_channel(&canonical_qubit_basis(), |x| {
            CMatrix::identity(2, 2).scale(0.5) * x.trace()
        })
        .unwrap();
        assert!((entanglement_fidelity(&depol) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn interpolation_property() {
        let ins = canonical_qubit_basis();
        let outs: Vec<CMatrix> = ins
            .iter()
            .map(|x| {
                let mut m = CMatrix::zeros(3, 3);
                m.view_mut((0, 0), (2, 2)).copy_from(&x.scale(0.9));
                m[(2, 2)] = Complex64::new(0.1, 0.0);
                m
            })
            .collect();
        let map = reconstruct_from_operators(&ins, &outs, 2).unwrap();
        for (i, o) in ins.iter().zip(&outs) {
            assert!(max_abs_diff(&map.apply(i).unwrap(), o) < 1e-12);
        }
        let r = average_fidelity(&map);
        assert!(r.f_avg <= r.f_avg_uncorrected + 1e-12);
    }

    #[test]
    fn singular_basis_is_rejected() {
        let mut ins = canonical_qubit_basis();
        ins[3] = ins[2].clone();
        let outs = ins.clone();
        assert!(matches!(
            reconstruct_from_operators(&ins, &outs, 2),
            Err(Error::SingularBasis { .. })
        ));
        assert!(reconstruct_from_operators(&ins[..3], &outs[..3], 2).is_err());
    }

    #[test]
    fn haar_oracle_on_identity() {
        let est = haar_average_fidelity_oracle(&identity_map(), 2000, 1).unwrap();
        assert!((est.mean - 1.0).abs() < 1e-12);
    }
}
