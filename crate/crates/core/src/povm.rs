//! Heterodyne measurement operators.
//!
//! An outcome α of a quantum-limited heterodyne measurement corresponds to
//! `E = |α⟩⟨α|/π`. With thermal added noise `n` the element becomes
//! `E = D(α) ρ_th(n) D†(α)/π`, which equals the Q-function smeared by the
//! Gaussian kernel `exp(−|β|²/n)/(πn)` (variance `n/2` per quadrature).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    coherent_amplitudes, displaced_number_states, displacement_operator_with_working_dim,
    thermal_populations, CMatrix, ComplexAmplitude,
};

/// Thermal terms are summed until the remaining weight drops below this.
const THERMAL_TAIL: f64 = 1e-16;
const MAX_THERMAL_TERMS: usize = 400;

/// Which family of measurement operators models the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PovmKind {
    Coherent,
    DisplacedThermal { n_th: f64 },
}

impl PovmKind {
    pub fn added_noise(&self) -> f64 {
        match *self {
            PovmKind::Coherent => 0.0,
            PovmKind::DisplacedThermal { n_th } => n_th,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.added_noise();
        if !(n >= 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "added noise {n} must be finite and non-negative"
            )));
        }
        Ok(())
    }

    pub fn element(&self, alpha: ComplexAmplitude, dim: usize) -> Result<PovmElement> {
        match *self {
            PovmKind::Coherent => coherent_povm(alpha, dim),
            PovmKind::DisplacedThermal { n_th } => displaced_thermal_povm(alpha, n_th, dim),
        }
    }

    /// Parses `coherent` or `thermal:<n>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "coherent" {
            return Ok(PovmKind::Coherent);
        }
        if let Some(v) = s.strip_prefix("thermal:") {
            let n_th: f64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad noise value in '{s}'")))?;
            let kind = PovmKind::DisplacedThermal { n_th };
            kind.validate()?;
            return Ok(kind);
        }
        Err(Error::InvalidArgument(format!(
            "unknown POVM '{s}' (expected 'coherent' or 'thermal:<n>')"
        )))
    }
}

/// Measurement operator for one heterodyne outcome, including the `1/π`.
#[derive(Debug, Clone)]
pub struct PovmElement {
    pub alpha: ComplexAmplitude,
    pub n_add: f64,
    pub operator: CMatrix,
}

impl PovmElement {
    /// `tr(ρE)`.
    pub fn probability(&self, rho: &crate::fock::DensityMatrix) -> Result<f64> {
        Ok(rho.expectation(&self.operator)?.re)
    }
}

pub fn coherent_povm(alpha: ComplexAmplitude, dim: usize) -> Result<PovmElement> {
    check(alpha, 0.0, dim)?;
    let v = coherent_amplitudes(alpha.to_complex(), dim);
    Ok(PovmElement {
        alpha,
        n_add: 0.0,
        operator: (&v * v.adjoint()).unscale(PI),
    })
}

/// `D(α) ρ_th(n_add) D†(α)/π` projected onto `dim` levels.
///
/// The thermal state is not truncated: terms are summed until the geometric
/// weight is negligible, and each displaced number state is exact on the
/// retained block.
pub fn displaced_thermal_povm(
    alpha: ComplexAmplitude,
    n_add: f64,
    dim: usize,
) -> Result<PovmElement> {
    check(alpha, n_add, dim)?;
    if n_add == 0.0 {
        return coherent_povm(alpha, dim);
    }
    let terms = thermal_term_count(n_add);
    let weights = thermal_populations(n_add, terms);
    let states = displaced_number_states(alpha.to_complex(), dim, terms);
    let mut op = CMatrix::zeros(dim, dim);
    for (w, v) in weights.iter().zip(&states) {
        let s = w / PI;
        for j in 0..dim {
            let vj = v[j].conj() * s;
            for i in 0..dim {
                op[(i, j)] += v[i] * vj;
            }
        }
    }
    Ok(PovmElement {
        alpha,
        n_add,
        operator: crate::fock::hermitize(op),
    })
}

/// Same element built literally as `P D_w ρ_th D_w† P / π` on a working space
/// of `working_dim` levels (matrix exponential, renormalized truncated thermal
/// state). Used to cross-check the exact construction.
pub fn displaced_thermal_povm_expm(
    alpha: ComplexAmplitude,
    n_add: f64,
    dim: usize,
    working_dim: usize,
) -> Result<PovmElement> {
    check(alpha, n_add, dim)?;
    let w = working_dim.max(dim);
    let d = displacement_operator_with_working_dim(alpha, w, w)?;
    let p = thermal_populations(n_add, w);
    let total: f64 = p.iter().sum();
    let rho = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        w,
        p.iter().map(|x| Complex64::new(x / total, 0.0)),
    ));
    let full = &d * rho * d.adjoint();
    Ok(PovmElement {
        alpha,
        n_add,
        operator: crate::fock::hermitize(full.view((0, 0), (dim, dim)).unscale(PI)),
    })
}

fn thermal_term_count(n_add: f64) -> usize {
    let q = n_add / (n_add + 1.0);
    if q <= 0.0 {
        return 1;
    }
    let n = (THERMAL_TAIL.ln() / q.ln()).ceil() as usize + 1;
    n.clamp(1, MAX_THERMAL_TERMS)
}

fn check(alpha: ComplexAmplitude, n_add: f64, dim: usize) -> Result<()> {
    ComplexAmplitude::new(alpha.re, alpha.im)?;
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("dimension {dim} must be >= 2")));
    }
    if !(n_add >= 0.0) || !n_add.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "added noise {n_add} must be finite and non-negative"
        )));
    }
    Ok(())
}

/// Memoizes elements on a square grid of pitch `grid`. Each cell holds the
/// element averaged over the cell (3×3 Gauss–Legendre), so binned counts
/// see the exact cell probability `h²·tr(ρE_cell)` up to quadrature error.
/// With `grid = None` every call builds the exact element.
#[derive(Debug)]
pub struct PovmCache {
    kind: PovmKind,
    dim: usize,
    grid: Option<f64>,
    store: Mutex<HashMap<(i64, i64), Arc<PovmElement>>>,
}

impl PovmCache {
    pub fn new(kind: PovmKind, dim: usize, grid: Option<f64>) -> Result<Self> {
        kind.validate()?;
        if let Some(h) = grid {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidArgument(format!("grid pitch {h} must be positive")));
            }
        }
        Ok(Self {
            kind,
            dim,
            grid,
            store: Mutex::new(HashMap::new()),
        })
    }

    pub fn kind(&self) -> PovmKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> Option<f64> {
        self.grid
    }

    /// Grid cell containing α, if caching is enabled.
    pub fn cell(&self, alpha: ComplexAmplitude) -> Option<(i64, i64)> {
        self.grid
            .map(|h| ((alpha.re / h).round() as i64, (alpha.im / h).round() as i64))
    }

    pub fn get(&self, alpha: ComplexAmplitude) -> Result<Arc<PovmElement>> {
        let (Some(h), Some(key)) = (self.grid, self.cell(alpha)) else {
            return Ok(Arc::new(self.kind.element(alpha, self.dim)?));
        };
        if let Some(e) = self.store.lock().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.cell_average(key, h)?);
        self.store
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| e.clone());
        Ok(e)
    }

    fn cell_average(&self, key: (i64, i64), h: f64) -> Result<PovmElement> {
        const NODES: [(f64, f64); 3] = [
            (-0.774_596_669_241_483_4, 5.0 / 18.0),
            (0.0, 8.0 / 18.0),
            (0.774_596_669_241_483_4, 5.0 / 18.0),
        ];
        let (cx, cy) = (key.0 as f64 * h, key.1 as f64 * h);
        let mut op = CMatrix::zeros(self.dim, self.dim);
        for (u, wu) in NODES {
            for (v, wv) in NODES {
                let a = ComplexAmplitude::new(cx + 0.5 * h * u, cy + 0.5 * h * v)?;
                op += self.kind.element(a, self.dim)?.operator * Complex64::new(wu * wv, 0.0);
            }
        }
        Ok(PovmElement {
            alpha: ComplexAmplitude::new(cx, cy)?,
            n_add: self.kind.added_noise(),
            operator: op,
        })
    }

    pub fn len(&self) -> usize {
        self.store.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{max_abs_diff, thermal_state, DensityMatrix};

    fn amp(re: f64, im: f64) -> ComplexAmplitude {
        ComplexAmplitude::new(re, im).unwrap()
    }

    #[test]
    fn coherent_element_at_origin() {
        let e = coherent_povm(ComplexAmplitude::zero(), 16).unwrap();
        let expected = DensityMatrix::vacuum(16).unwrap().into_matrix().unscale(PI);
        assert!(max_abs_diff(&e.operator, &expected) < 1e-15);
        let vac = DensityMatrix::vacuum(16).unwrap();
        assert!((e.probability(&vac).unwrap() - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn fock_one_q_value() {
        let e = coherent_povm(amp(1.0, 0.0), 16).unwrap();
        let one = DensityMatrix::fock(1, 16).unwrap();
        let p = e.probability(&one).unwrap();
        assert!((p - (-1.0f64).exp() / PI).abs() < 1e-12);
        assert!((p - 0.1171).abs() < 1e-4);
    }

    #[test]
    fn zero_noise_matches_coherent() {
        let a = amp(0.4, -1.3);
        let c = coherent_povm(a, 16).unwrap();
        let t = displaced_thermal_povm(a, 0.0, 16).unwrap();
        assert!(max_abs_diff(&c.operator, &t.operator) < 1e-15);
    }

    #[test]
    fn thermal_element_at_origin_is_diagonal() {
        let e = displaced_thermal_povm(ComplexAmplitude::zero(), 0.1, 16).unwrap();
        let th = thermal_populations(0.1, 16);
        for i in 0..16 {
            for j in 0..16 {
                let expected = if i == j { th[i] / PI } else { 0.0 };
                assert!((e.operator[(i, j)].re - expected).abs() < 1e-15);
                assert!(e.operator[(i, j)].im.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_and_expm_constructions_agree() {
        for &(re, im) in &[(0.0, 0.0), (1.1, 0.3), (-2.0, 1.5)] {
            let a = amp(re, im);
            let exact = displaced_thermal_povm(a, 0.1, 16).unwrap();
            let expm = displaced_thermal_povm_expm(a, 0.1, 16, 64).unwrap();
            assert!(max_abs_diff(&exact.operator, &expm.operator) < 1e-9, "alpha {a:?}");
        }
    }

    #[test]
    fn elements_are_positive() {
        let e = displaced_thermal_povm(amp(2.5, -0.5), 0.3, 16).unwrap();
        assert!(crate::fock::min_eigenvalue(&e.operator) > -1e-14);
        assert!(max_abs_diff(&e.operator, &e.operator.adjoint()) < 1e-15);
    }

    #[test]
    fn disc_completeness() {
        let h = 0.1;
        let r: f64 = 6.0;
        let n = (r / h).ceil() as i64;
        let mut sum = CMatrix::zeros(16, 16);
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                if x * x + y * y <= r * r {
                    sum += coherent_povm(amp(x, y), 16).unwrap().operator;
                }
            }
        }
        sum.scale_mut(h * h);
        assert!(max_abs_diff(&sum, &CMatrix::identity(16, 16)) < 0.01);
    }

    #[test]
    fn noisy_probability_of_thermal_state() {
        // A thermal state seen through n_add of extra noise has a Gaussian
        // Q-function with total occupancy n + n_add + 1.
        let rho = thermal_state(0.2, 16).unwrap();
        let a = amp(0.7, -0.2);
        let p = displaced_thermal_povm(a, 0.1, 16).unwrap().probability(&rho).unwrap();
        let s = 0.2 + 0.1 + 1.0;
        let expected = (-a.norm_sqr() / s).exp() / (PI * s);
        assert!((p - expected).abs() < 1e-6);
    }

    #[test]
    fn cache_reuses_quantized_elements() {
        let cache = PovmCache::new(PovmKind::DisplacedThermal { n_th: 0.1 }, 8, Some(0.1)).unwrap();
        let a = cache.get(amp(0.51, 0.02)).unwrap();
        let b = cache.get(amp(0.49, -0.03)).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
        let exact = PovmCache::new(PovmKind::Coherent, 8, None).unwrap();
        exact.get(amp(0.5, 0.0)).unwrap();
        assert!(exact.is_empty());
    }

    #[test]
    fn cell_average_gives_cell_probability() {
        let h = 0.1;
        let cache = PovmCache::new(PovmKind::Coherent, 16, Some(h)).unwrap();
        let e = cache.get(amp(0.5, 0.0)).unwrap();
        let vac = crate::fock::DensityMatrix::vacuum(16).unwrap();
        let mass = e.probability(&vac).unwrap() * h * h;
        let exact = 0.25 * (libm::erf(0.55) - libm::erf(0.45)) * (libm::erf(0.05) - libm::erf(-0.05));
        assert!((mass - exact).abs() < 1e-10 * exact.max(1e-3), "{mass} vs {exact}");
    }

    #[test]
    fn parse_kinds() {
        assert_eq!(PovmKind::parse("coherent").unwrap(), PovmKind::Coherent);
        assert_eq!(
            PovmKind::parse("thermal:0.1").unwrap(),
            PovmKind::DisplacedThermal { n_th: 0.1 }
        );
        assert!(PovmKind::parse("thermal:-1").is_err());
        assert!(PovmKind::parse("squeezed").is_err());
    }
}
