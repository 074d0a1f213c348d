//! Cascaded two-beamsplitter model of the capture process.
//!
//! A loss beamsplitter `B₁` mixes the incoming state with a thermal ancilla,
//! then `B₂` swaps the result into a mechanical mode that starts thermal:
//! `ρ_out = tr_e(B₂ ρ'⊗ρ_th B₂†)` with `ρ' = tr_an(B₁ ρ_an⊗ρ_e B₁†)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{partial_trace, thermal_state, Beamsplitter, DensityMatrix, Subsystem};
use crate::metrics::{average_fidelity, canonical_qubit_basis, reconstruct_process, FidelityReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureModelParams {
    /// Reflection coefficient `sin²θ₁` of the loss beamsplitter.
    pub r1: f64,
    /// Reflection coefficient `sin²θ₂` of the capture beamsplitter.
    pub r2: f64,
    pub n_th_target: f64,
    pub dim: usize,
}

impl Default for CaptureModelParams {
    fn default() -> Self {
        Self {
            r1: 0.14,
            r2: 0.95,
            n_th_target: 0.1,
            dim: crate::fock::DEFAULT_DIM,
        }
    }
}

impl CaptureModelParams {
    /// `R₁ = 0`, `R₂ = 1`, no thermal occupation.
    pub fn perfect(dim: usize) -> Self {
        Self {
            r1: 0.0,
            r2: 1.0,
            n_th_target: 0.0,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r1", self.r1), ("r2", self.r2)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if !(self.n_th_target >= 0.0) || !self.n_th_target.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "n_th_target = {} must be >= 0",
                self.n_th_target
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidArgument("dim must be >= 2".into()));
        }
        Ok(())
    }
}

/// Mean occupation of `ρ'` for a vacuum input and a thermal ancilla.
fn intermediate_mean(b1: &Beamsplitter, n_an: f64, dim: usize) -> Result<f64> {
    let joint = thermal_state(n_an, dim)?.tensor(&DensityMatrix::vacuum(dim)?);
    Ok(partial_trace(&b1.apply(&joint)?, Subsystem::B)?.mean_occupation())
}

/// Ancilla occupancy for which a vacuum input leaves `B₁` with mean
/// `n_th_target`, by bisection on the two-mode computation.
pub fn solve_ancilla_occupancy(params: &CaptureModelParams) -> Result<f64> {
    params.validate()?;
    if params.n_th_target == 0.0 {
        return Ok(0.0);
    }
    if params.r1 == 0.0 {
        return Err(Error::Infeasible(
            "R1 = 0 cannot produce a thermal intermediate state".into(),
        ));
    }
    let b1 = Beamsplitter::from_reflection(params.r1, params.dim)?;
    let target = params.n_th_target;
    let mut lo = 0.0;
    let mut hi = target / params.r1;
    let mut grow = 0;
    while intermediate_mean(&b1, hi, params.dim)? < target {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 8 {
            return Err(Error::Infeasible(format!(
                "no ancilla occupancy up to {hi} reaches {target}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if intermediate_mean(&b1, mid, params.dim)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The model with its beamsplitters and reservoir states prepared once.
#[derive(Debug, Clone)]
pub struct CaptureModel {
    params: CaptureModelParams,
    n_an: f64,
    b1: Beamsplitter,
    b2: Beamsplitter,
    ancilla: DensityMatrix,
    bath: DensityMatrix,
}

impl CaptureModel {
    pub fn new(params: CaptureModelParams) -> Result<Self> {
        let n_an = solve_ancilla_occupancy(&params)?;
        let dim = params.dim;
        Ok(Self {
            params,
            n_an,
            b1: Beamsplitter::from_reflection(params.r1, dim)?,
            b2: Beamsplitter::from_reflection(params.r2, dim)?,
            ancilla: thermal_state(n_an, dim)?,
            bath: thermal_state(params.n_th_target, dim)?,
        })
    }

    pub fn params(&self) -> &CaptureModelParams {
        &self.params
    }

    pub fn ancilla_occupancy(&self) -> f64 {
        self.n_an
    }

    /// `ρ'`, the state after the loss beamsplitter.
    pub fn intermediate(&self, rho_e: &DensityMatrix) -> Result<DensityMatrix> {
        self.check(rho_e)?;
        partial_trace(&self.b1.apply(&self.ancilla.tensor(rho_e))?, Subsystem::B)
    }

    pub fn apply(&self, rho_e: &DensityMatrix) -> Result<DensityMatrix> {
        let rho_p = self.intermediate(rho_e)?;
        let out = partial_trace(&self.b2.apply(&rho_p.tensor(&self.bath))?, Subsystem::B)?;
        let top = out.element(self.params.dim - 1, self.params.dim - 1).re;
        if top > 1e-6 {
            log::warn!("capture model output has {top:.2e} population in the top Fock level");
        }
        Ok(out)
    }

    fn check(&self, rho: &DensityMatrix) -> Result<()> {
        if rho.dim() != self.params.dim {
            return Err(Error::DimensionMismatch {
                expected: self.params.dim,
                got: rho.dim(),
            });
        }
        Ok(())
    }
}

pub fn apply_capture_model(rho_e: &DensityMatrix, params: &CaptureModelParams) -> Result<DensityMatrix> {
    CaptureModel::new(*params)?.apply(rho_e)
}

/// Average-fidelity report of the model map on the `|0⟩, |1⟩, |+⟩, |+i⟩`
/// basis.
pub fn model_fidelity_report(params: &CaptureModelParams) -> Result<FidelityReport> {
    let model = CaptureModel::new(*params)?;
    let inputs = canonical_basis_states(params.dim)?;
    let outputs = inputs
        .iter()
        .map(|r| model.apply(r))
        .collect::<Result<Vec<_>>>()?;
    Ok(average_fidelity(&reconstruct_process(&inputs, &outputs, 2)?))
}

pub fn model_average_fidelity(params: &CaptureModelParams) -> Result<f64> {
    Ok(model_fidelity_report(params)?.f_avg)
}

/// The canonical qubit basis embedded in `dim`.
pub fn canonical_basis_states(dim: usize) -> Result<Vec<DensityMatrix>> {
    canonical_qubit_basis()
        .into_iter()
        .map(|m| DensityMatrix::from_matrix(m)?.resized(dim))
        .collect()
}
