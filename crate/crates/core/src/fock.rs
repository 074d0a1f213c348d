//! Truncated Fock-space linear algebra.
//!
//! Everything here works on dense complex matrices in the number basis
//! `|0⟩ … |d−1⟩`. Two-mode operators use lexicographic `|n_A⟩⊗|n_B⟩`
//! ordering, i.e. row index `n_A * dim_b + n_B`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Hilbert-space truncation used for tomography and the capture model.
pub const DEFAULT_DIM: usize = 16;

/// Largest population a constructor may discard before it refuses.
pub const DEFAULT_MAX_TAIL: f64 = 0.01;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-9;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// A phase-space point `α = X + iY` in units of quanta^(1/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexAmplitude {
    pub re: f64,
    pub im: f64,
}

impl ComplexAmplitude {
    pub fn new(re: f64, im: f64) -> Result<Self> {
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "amplitude ({re}, {im}) is not finite"
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zero() -> Self {
        Self { re: 0.0, im: 0.0 }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

impl From<Complex64> for ComplexAmplitude {
    fn from(z: Complex64) -> Self {
        Self { re: z.re, im: z.im }
    }
}

/// Which factor of a two-mode state to keep in a partial trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    A,
    B,
}

/// Hermitian, unit-trace, positive semidefinite operator on a truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    elements: CMatrix,
}

impl DensityMatrix {
    /// Validates `m` against the density-matrix invariants. The matrix must
    /// already be Hermitian to 1e-12; it is symmetrized before storing.
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        check_square(&m)?;
        let skew = max_abs_diff(&m, &m.adjoint());
        if skew > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!(
                "not Hermitian (max |ρ−ρ†| = {skew:.3e})"
            )));
        }
        Self::from_composite(m)
    }

    /// Symmetrizes, then checks trace and positivity. Used after composite
    /// operations where small Hermiticity drift is expected.
    pub(crate) fn from_composite(m: CMatrix) -> Result<Self> {
        check_square(&m)?;
        let m = hermitize(m);
        let tr = m.trace().re;
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min_eig = min_eigenvalue(&m);
        if min_eig < -PSD_TOL {
            return Err(Error::InvalidState(format!(
                "smallest eigenvalue {min_eig:.3e} is negative"
            )));
        }
        Ok(Self { elements: m })
    }

    /// Rescales a positive operator to unit trace before validating it.
    pub(crate) fn from_unnormalized(m: CMatrix) -> Result<Self> {
        let tr = m.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::InvalidState(format!("trace {tr} cannot be normalized")));
        }
        Self::from_composite(m.unscale(tr))
    }

    /// Clips negative eigenvalues of a Hermitian operator and renormalizes.
    /// Turns rounded published matrices into states that can be sampled.
    pub fn from_clipped(m: CMatrix) -> Result<Self> {
        check_square(&m)?;
        let m = hermitize(m);
        let eig = SymmetricEigen::new(m);
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        let v = &eig.eigenvectors;
        let diag = CMatrix::from_diagonal(&vals.map(|x| Complex64::new(x, 0.0)));
        Self::from_unnormalized(v * diag * v.adjoint())
    }

    pub fn vacuum(dim: usize) -> Result<Self> {
        Self::fock(0, dim)
    }

    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if n >= dim {
            return Err(Error::InvalidArgument(format!(
                "Fock level {n} outside truncation {dim}"
            )));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(n, n)] = ONE;
        Ok(Self { elements: m })
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            elements: CMatrix::identity(dim, dim).unscale(dim as f64),
        })
    }

    /// Diagonal state with the given populations (must sum to one).
    pub fn from_populations(p: &[f64]) -> Result<Self> {
        let m = CMatrix::from_diagonal(&DVector::from_iterator(
            p.len(),
            p.iter().map(|&x| Complex64::new(x, 0.0)),
        ));
        Self::from_matrix(m)
    }

    /// Pure state `|ψ⟩⟨ψ|` after normalizing `ψ`.
    pub fn pure(psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidArgument("zero state vector".into()));
        }
        let v = psi.unscale(norm);
        Self::from_composite(&v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.elements.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.elements
    }

    pub fn into_matrix(self) -> CMatrix {
        self.elements
    }

    pub fn element(&self, i: usize, j: usize) -> Complex64 {
        self.elements[(i, j)]
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.elements[(n, n)].re).collect()
    }

    pub fn trace(&self) -> f64 {
        self.elements.trace().re
    }

    /// `tr(ρ n̂)`.
    pub fn mean_occupation(&self) -> f64 {
        (0..self.dim())
            .map(|n| n as f64 * self.elements[(n, n)].re)
            .sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.elements)
    }

    /// `tr(ρ A)`.
    pub fn expectation(&self, op: &CMatrix) -> Result<Complex64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: op.nrows(),
            });
        }
        Ok(trace_product(&self.elements, op))
    }

    /// Upper-left `d × d` block without renormalization.
    pub fn truncated_block(&self, d: usize) -> CMatrix {
        let d = d.min(self.dim());
        self.elements.view((0, 0), (d, d)).into_owned()
    }

    /// Zero-pads (or truncates and renormalizes) to a new dimension.
    pub fn resized(&self, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if dim >= self.dim() {
            let mut m = CMatrix::zeros(dim, dim);
            m.view_mut((0, 0), (self.dim(), self.dim()))
                .copy_from(&self.elements);
            Ok(Self { elements: m })
        } else {
            Self::from_unnormalized(self.truncated_block(dim))
        }
    }

    pub fn tensor(&self, other: &DensityMatrix) -> TwoModeState {
        TwoModeState {
            dim_a: self.dim(),
            dim_b: other.dim(),
            elements: self.elements.kronecker(&other.elements),
        }
    }

    /// `e^{iθn̂} ρ e^{−iθn̂}`.
    pub fn phase_rotated(&self, theta: f64) -> Self {
        let d = self.dim();
        let m = CMatrix::from_fn(d, d, |i, j| {
            self.elements[(i, j)] * Complex64::from_polar(1.0, theta * (i as f64 - j as f64))
        });
        Self {
            elements: hermitize(m),
        }
    }

    pub fn to_doc(&self) -> DensityMatrixDoc {
        let d = self.dim();
        DensityMatrixDoc {
            dim: d,
            re: (0..d)
                .map(|i| (0..d).map(|j| self.elements[(i, j)].re).collect())
                .collect(),
            im: (0..d)
                .map(|i| (0..d).map(|j| self.elements[(i, j)].im).collect())
                .collect(),
        }
    }

    pub fn from_doc(doc: &DensityMatrixDoc) -> Result<Self> {
        Self::from_matrix(doc.to_matrix()?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DensityMatrixDoc = serde_json::from_str(s)?;
        Self::from_doc(&doc)
    }
}

/// JSON layout `{"dim": d, "re": [[...]], "im": [[...]]}`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrixDoc {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl DensityMatrixDoc {
    pub fn to_matrix(&self) -> Result<CMatrix> {
        let d = self.dim;
        let rows_ok = |rows: &Vec<Vec<f64>>| rows.len() == d && rows.iter().all(|r| r.len() == d);
        if !rows_ok(&self.re) || !rows_ok(&self.im) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.re.len(),
            });
        }
        Ok(CMatrix::from_fn(d, d, |i, j| {
            Complex64::new(self.re[i][j], self.im[i][j])
        }))
    }
}

/// Density matrix of two modes in `|n_A⟩⊗|n_B⟩` ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeState {
    dim_a: usize,
    dim_b: usize,
    elements: CMatrix,
}

impl TwoModeState {
    pub fn from_matrix(dim_a: usize, dim_b: usize, m: CMatrix) -> Result<Self> {
        check_square(&m)?;
        if m.nrows() != dim_a * dim_b {
            return Err(Error::DimensionMismatch {
                expected: dim_a * dim_b,
                got: m.nrows(),
            });
        }
        // Reuse the single-mode checks on the flattened operator.
        let rho = DensityMatrix::from_matrix(m)?;
        Ok(Self {
            dim_a,
            dim_b,
            elements: rho.into_matrix(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.elements
    }
}

/// Reduced state of one factor.
pub fn partial_trace(state: &TwoModeState, keep: Subsystem) -> Result<DensityMatrix> {
    let (da, db) = state.dims();
    let m = state.matrix();
    if m.nrows() != da * db {
        return Err(Error::DimensionMismatch {
            expected: da * db,
            got: m.nrows(),
        });
    }
    let reduced = match keep {
        Subsystem::A => CMatrix::from_fn(da, da, |i, k| {
            (0..db).map(|j| m[(i * db + j, k * db + j)]).sum()
        }),
        Subsystem::B => CMatrix::from_fn(db, db, |j, l| {
            (0..da).map(|i| m[(i * db + j, i * db + l)]).sum()
        }),
    };
    DensityMatrix::from_composite(reduced)
}

/// Amplitudes `⟨n|α⟩ = e^{−|α|²/2} αⁿ/√n!` for `n < dim`, without renormalization.
pub fn coherent_amplitudes(alpha: Complex64, dim: usize) -> CVector {
    let mut v = CVector::zeros(dim);
    if dim == 0 {
        return v;
    }
    v[0] = Complex64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
    for n in 1..dim {
        v[n] = v[n - 1] * alpha / (n as f64).sqrt();
    }
    v
}

/// A constructed state together with the population lost to truncation.
#[derive(Debug, Clone)]
pub struct Truncated {
    pub state: DensityMatrix,
    pub tail_mass: f64,
}

/// Renormalized coherent-state projector; errors if more than 1% of the
/// population lies above the truncation.
pub fn coherent_state(alpha: ComplexAmplitude, dim: usize) -> Result<DensityMatrix> {
    Ok(coherent_state_with_limit(alpha, dim, DEFAULT_MAX_TAIL)?.state)
}

pub fn coherent_state_with_limit(
    alpha: ComplexAmplitude,
    dim: usize,
    max_tail: f64,
) -> Result<Truncated> {
    check_dim(dim)?;
    let alpha = ComplexAmplitude::new(alpha.re, alpha.im)?;
    let v = coherent_amplitudes(alpha.to_complex(), dim);
    let kept = v.norm_squared();
    let tail = (1.0 - kept).max(0.0);
    if tail > max_tail {
        return Err(Error::TruncationTail {
            dim,
            tail,
            limit: max_tail,
        });
    }
    Ok(Truncated {
        state: DensityMatrix::pure(&v)?,
        tail_mass: tail,
    })
}

/// Bose–Einstein populations `P_n = n̄ⁿ/(n̄+1)^{n+1}` for `n < dim`, unnormalized.
pub fn thermal_populations(nbar: f64, dim: usize) -> Vec<f64> {
    let q = nbar / (nbar + 1.0);
    let mut p = Vec::with_capacity(dim);
    let mut term = 1.0 / (nbar + 1.0);
    for _ in 0..dim {
        p.push(term);
        term *= q;
    }
    p
}

pub fn thermal_state(nbar: f64, dim: usize) -> Result<DensityMatrix> {
    Ok(thermal_state_with_limit(nbar, dim, DEFAULT_MAX_TAIL)?.state)
}

pub fn thermal_state_with_limit(nbar: f64, dim: usize, max_tail: f64) -> Result<Truncated> {
    check_dim(dim)?;
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "thermal occupancy {nbar} must be finite and non-negative"
        )));
    }
    let p = thermal_populations(nbar, dim);
    let kept: f64 = p.iter().sum();
    let tail = (1.0 - kept).max(0.0);
    if tail > max_tail {
        return Err(Error::TruncationTail {
            dim,
            tail,
            limit: max_tail,
        });
    }
    let p: Vec<f64> = p.iter().map(|x| x / kept).collect();
    Ok(Truncated {
        state: DensityMatrix::from_populations(&p)?,
        tail_mass: tail,
    })
}

/// Lowering operator `a` on `dim` levels.
pub fn annihilation_operator(dim: usize) -> CMatrix {
    let mut a = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = Complex64::new((n as f64).sqrt(), 0.0);
    }
    a
}

/// `diag(0, 1, …, dim−1)`.
pub fn number_operator(dim: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(dim, (0..dim).map(|n| n as f64)))
}

/// `D(α) = exp(αa† − α*a)` evaluated on `2·dim` levels, then projected to `dim`.
pub fn displacement_operator(alpha: ComplexAmplitude, dim: usize) -> Result<CMatrix> {
    displacement_operator_with_working_dim(alpha, dim, 2 * dim)
}

pub fn displacement_operator_with_working_dim(
    alpha: ComplexAmplitude,
    dim: usize,
    working_dim: usize,
) -> Result<CMatrix> {
    check_dim(dim)?;
    let alpha = ComplexAmplitude::new(alpha.re, alpha.im)?.to_complex();
    let w = working_dim.max(dim);
    let a = annihilation_operator(w);
    let generator = a.adjoint() * alpha - &a * alpha.conj();
    let d = generator.exp();
    Ok(d.view((0, 0), (dim, dim)).into_owned())
}

/// Projections onto the first `dim` levels of the displaced number states
/// `D(α)|n⟩`, `n < count`.
///
/// Uses `D(α)|n⟩ = (a† − α*)ⁿ|α⟩/√n!`. Raising only moves population upward,
/// so the low components stay exact regardless of the truncation.
pub fn displaced_number_states(alpha: Complex64, dim: usize, count: usize) -> Vec<CVector> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(coherent_amplitudes(alpha, dim));
    let ac = alpha.conj();
    for n in 1..count {
        let prev = &out[n - 1];
        let norm = (n as f64).sqrt();
        let next = CVector::from_fn(dim, |i, _| {
            let raised = if i > 0 {
                prev[i - 1] * (i as f64).sqrt()
            } else {
                ZERO
            };
            (raised - ac * prev[i]) / norm
        });
        out.push(next);
    }
    out
}

/// Two-mode beamsplitter stored as its photon-number-conserving blocks.
///
/// Convention: `B† a₁ B = cosθ a₁ − sinθ a₂`, `B† a₂ B = sinθ a₁ + cosθ a₂`,
/// so θ = π/2 swaps the modes and `sin²θ` is the reflection coefficient.
#[derive(Debug, Clone)]
pub struct Beamsplitter {
    dim: usize,
    theta: f64,
    blocks: Vec<(Vec<usize>, CMatrix)>,
}

impl Beamsplitter {
    pub fn new(theta: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if !theta.is_finite() {
            return Err(Error::InvalidArgument("beamsplitter angle is not finite".into()));
        }
        let mut blocks = Vec::with_capacity(2 * dim - 1);
        for total in 0..(2 * dim - 1) {
            let lo = total.saturating_sub(dim - 1);
            let hi = total.min(dim - 1);
            let n1s: Vec<usize> = (lo..=hi).collect();
            let size = n1s.len();
            // Generator θ(a₁a₂† − a₁†a₂) restricted to the block.
            let mut g = CMatrix::zeros(size, size);
            for (col, &n1) in n1s.iter().enumerate() {
                let n2 = total - n1;
                if n1 > lo {
                    // a₁a₂†|n1,n2⟩ = √n1 √(n2+1) |n1−1,n2+1⟩
                    let amp = ((n1 * (n2 + 1)) as f64).sqrt();
                    g[(col - 1, col)] += Complex64::new(theta * amp, 0.0);
                }
                if n1 < hi {
                    // −a₁†a₂|n1,n2⟩ = −√(n1+1) √n2 |n1+1,n2−1⟩
                    let amp = (((n1 + 1) * n2) as f64).sqrt();
                    g[(col + 1, col)] -= Complex64::new(theta * amp, 0.0);
                }
            }
            let idx = n1s.iter().map(|&n1| n1 * dim + (total - n1)).collect();
            blocks.push((idx, g.exp()));
        }
        Ok(Self { dim, theta, blocks })
    }

    /// Beamsplitter whose reflection coefficient `sin²θ` equals `r`.
    pub fn from_reflection(r: f64, dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!(
                "reflection coefficient {r} outside [0, 1]"
            )));
        }
        Self::new(r.sqrt().asin(), dim)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_dense(&self) -> CMatrix {
        let n = self.dim * self.dim;
        let mut u = CMatrix::zeros(n, n);
        for (idx, block) in &self.blocks {
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    u[(i, j)] = block[(r, c)];
                }
            }
        }
        u
    }

    /// `B ρ B†`.
    pub fn apply(&self, state: &TwoModeState) -> Result<TwoModeState> {
        let (da, db) = state.dims();
        if da != self.dim || db != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: da.max(db),
            });
        }
        let rho = state.matrix();
        let n = self.dim * self.dim;
        let mut left = CMatrix::zeros(n, n);
        for (idx, block) in &self.blocks {
            for (r, &i) in idx.iter().enumerate() {
                for col in 0..n {
                    let mut acc = ZERO;
                    for (c, &k) in idx.iter().enumerate() {
                        acc += block[(r, c)] * rho[(k, col)];
                    }
                    left[(i, col)] = acc;
                }
            }
        }
        let mut out = CMatrix::zeros(n, n);
        for (idx, block) in &self.blocks {
            for row in 0..n {
                for (r, &j) in idx.iter().enumerate() {
                    let mut acc = ZERO;
                    for (c, &k) in idx.iter().enumerate() {
                        acc += left[(row, k)] * block[(r, c)].conj();
                    }
                    out[(row, j)] = acc;
                }
            }
        }
        Ok(TwoModeState {
            dim_a: da,
            dim_b: db,
            elements: hermitize(out),
        })
    }
}

/// Dense two-mode unitary on `dim²` levels (see [`Beamsplitter`] for the convention).
pub fn beamsplitter_unitary(theta: f64, dim: usize) -> Result<CMatrix> {
    Ok(Beamsplitter::new(theta, dim)?.to_dense())
}

pub(crate) fn hermitize(m: CMatrix) -> CMatrix {
    let adj = m.adjoint();
    (m + adj).unscale(2.0)
}

pub(crate) fn min_eigenvalue(m: &CMatrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(hermitize(m.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `tr(AB)` without forming the product.
pub(crate) fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let d = a.nrows();
    let mut acc = ZERO;
    for i in 0..d {
        for j in 0..d {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub(crate) fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dimension {dim} must be >= 2")));
    }
    Ok(())
}

fn check_square(m: &CMatrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    Ok(())
}
