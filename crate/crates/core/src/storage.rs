//! Population dynamics of the stored mechanical state and the storage-time
//! fit.
//!
//! The diagonal master equation is
//! `dP_n/dt = −κ[(N+1)nP_n + N(n+1)P_n − (N+1)(n+1)P_{n+1} − NnP_{n−1}]`.
//! With `N + 1 ≈ N` it depends only on `γ = κN`. The top level reflects: no
//! rate leads out of the truncated space.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::thermal_populations;

/// Diagonal relaxation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum MasterEquation {
    /// `N + 1 ≈ N`, rate `γ = κN`.
    SingleParameter { gamma: f64 },
    Full { kappa: f64, n_bath: f64 },
}

impl MasterEquation {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::SingleParameter { gamma } => gamma >= 0.0 && gamma.is_finite(),
            Self::Full { kappa, n_bath } => {
                kappa >= 0.0 && kappa.is_finite() && n_bath >= 0.0 && n_bath.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid rates {self:?}")))
        }
    }

    /// `(down, up)`: rates per unit `n` and `n+1` for `n → n−1` and `n → n+1`.
    fn coefficients(&self) -> (f64, f64) {
        match *self {
            Self::SingleParameter { gamma } => (gamma, gamma),
            Self::Full { kappa, n_bath } => (kappa * (n_bath + 1.0), kappa * n_bath),
        }
    }

    fn scale(&self) -> f64 {
        let (down, up) = self.coefficients();
        down.max(up)
    }

    fn derivative(&self, p: &[f64], out: &mut [f64]) {
        let (down, up) = self.coefficients();
        let top = p.len() - 1;
        for n in 0..p.len() {
            let nf = n as f64;
            let mut d = -down * nf * p[n];
            if n < top {
                d -= up * (nf + 1.0) * p[n];
                d += down * (nf + 1.0) * p[n + 1];
            }
            if n > 0 {
                d += up * nf * p[n - 1];
            }
            out[n] = d;
        }
    }
}

fn check_populations(p0: &[f64]) -> Result<()> {
    if p0.len() < 2 {
        return Err(Error::InvalidArgument("need at least two levels".into()));
    }
    if p0.iter().any(|p| !p.is_finite() || *p < -1e-12) {
        return Err(Error::InvalidArgument("populations must be finite and non-negative".into()));
    }
    let s: f64 = p0.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "populations sum to {s}, expected 1"
        )));
    }
    Ok(())
}

/// `P_n(t)` at each grid time (seconds, non-decreasing, from `t = 0`) under
/// the single-parameter equation.
pub fn evolve_populations(p0: &[f64], gamma: f64, t_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    evolve(p0, MasterEquation::SingleParameter { gamma }, t_grid)
}

/// As [`evolve_populations`] with the full two-parameter equation.
pub fn evolve_populations_full(
    p0: &[f64],
    kappa: f64,
    n_bath: f64,
    t_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    evolve(p0, MasterEquation::Full { kappa, n_bath }, t_grid)
}

pub fn evolve(p0: &[f64], model: MasterEquation, t_grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_populations(p0)?;
    model.validate()?;
    let mut prev_t = 0.0;
    let mut min_gap = f64::INFINITY;
    for &t in t_grid {
        if !t.is_finite() || t < prev_t {
            return Err(Error::InvalidArgument(
                "time grid must be finite, non-negative and non-decreasing".into(),
            ));
        }
        if t > prev_t {
            min_gap = min_gap.min(t - prev_t);
        }
        prev_t = t;
    }
    let rate = model.scale();
    let dt_max = (1e-3 / rate).min(min_gap / 10.0);

    let d = p0.len();
    let mut p = p0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut out = Vec::with_capacity(t_grid.len());
    let mut t_now = 0.0;
    for &t in t_grid {
        let span = t - t_now;
        if span > 0.0 && rate > 0.0 {
            let steps = (span / dt_max).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                model.derivative(&p, &mut k1);
                for i in 0..d {
                    tmp[i] = p[i] + 0.5 * h * k1[i];
                }
                model.derivative(&tmp, &mut k2);
                for i in 0..d {
                    tmp[i] = p[i] + 0.5 * h * k2[i];
                }
                model.derivative(&tmp, &mut k3);
                for i in 0..d {
                    tmp[i] = p[i] + h * k3[i];
                }
                model.derivative(&tmp, &mut k4);
                for i in 0..d {
                    p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        t_now = t;
        out.push(p.clone());
    }
    if let Some(last) = out.last() {
        if last[d - 1] > 1e-6 {
            log::warn!("top Fock level holds {:.2e} of the population", last[d - 1]);
        }
    }
    Ok(out)
}

/// `P_n = n̄ⁿ/(n̄+1)^{n+1}` for `n < dim` (not renormalized).
pub fn thermal_distribution(nbar: f64, dim: usize) -> Result<Vec<f64>> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::InvalidArgument(format!("nbar {nbar} must be >= 0")));
    }
    Ok(thermal_populations(nbar, dim))
}

/// Observed diagonal elements at one storage time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoragePoint {
    /// Seconds.
    pub tau_s: f64,
    pub populations: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Residuals divided by the stated uncertainties.
    #[default]
    InverseVariance,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageFit {
    /// Seconds.
    pub tau_m: f64,
    pub stderr: f64,
    pub gamma: f64,
    pub gamma_stderr: f64,
    pub objective: f64,
    pub n_residuals: usize,
}

/// Objective for rate `gamma`; `p0` is the state at the earliest point.
fn objective(points: &[StoragePoint], p0: &[f64], gamma: f64, weighting: Weighting) -> Result<f64> {
    let t0 = points[0].tau_s;
    let grid: Vec<f64> = points.iter().map(|p| p.tau_s - t0).collect();
    let traj = evolve_populations(p0, gamma, &grid)?;
    let mut s = 0.0;
    for (pt, model) in points.iter().zip(&traj) {
        for (k, obs) in pt.populations.iter().enumerate() {
            let r = model[k] - obs;
            let w = match weighting {
                Weighting::InverseVariance => 1.0 / (pt.sigma[k] * pt.sigma[k]),
                Weighting::Uniform => 1.0,
            };
            s += w * r * r;
        }
    }
    Ok(s)
}

/// Least-squares fit of `γ_m` over every tracked diagonal; `τ_m = 1/γ_m`.
///
/// `points` must be sorted by `tau_s`; `p0` is the full population vector at
/// the earliest point.
pub fn fit_storage_time(points: &[StoragePoint], p0: &[f64], weighting: Weighting) -> Result<StorageFit> {
    if points.len() < 3 {
        return Err(Error::TooFewValues {
            needed: 3,
            got: points.len(),
        });
    }
    check_populations(p0)?;
    for w in points.windows(2) {
        if !(w[1].tau_s > w[0].tau_s) {
            return Err(Error::InvalidArgument("storage times must be increasing".into()));
        }
    }
    for pt in points {
        if pt.populations.len() != pt.sigma.len() || pt.populations.len() > p0.len() {
            return Err(Error::InvalidArgument("inconsistent population/sigma lengths".into()));
        }
        if weighting == Weighting::InverseVariance && pt.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("uncertainties must be positive".into()));
        }
    }
    let span = points.last().unwrap().tau_s - points[0].tau_s;
    let f = |ln_g: f64| objective(points, p0, ln_g.exp(), weighting);

    // Coarse log scan, then golden section around the best point.
    let lo = (1e-3 / span).ln();
    let hi = (1e3 / span).ln();
    let n_scan = 61;
    let step = (hi - lo) / (n_scan - 1) as f64;
    let mut best = (0, f64::INFINITY);
    for i in 0..n_scan {
        let v = f(lo + step * i as f64)?;
        if v < best.1 {
            best = (i, v);
        }
    }
    if best.0 == 0 || best.0 == n_scan - 1 {
        return Err(Error::NonConvergence(format!(
            "minimum at the edge of the rate bracket (objective {:.3e})",
            best.1
        )));
    }
    let mut a = lo + step * (best.0 - 1) as f64;
    let mut b = lo + step * (best.0 + 1) as f64;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    let mut iters = 0;
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
        iters += 1;
        if iters > 200 {
            return Err(Error::NonConvergence(format!(
                "golden section did not shrink (objective {:.3e})",
                fc.min(fd)
            )));
        }
    }
    let gamma = (0.5 * (a + b)).exp();
    let s_min = objective(points, p0, gamma, weighting)?;

    let h = 1e-3 * gamma;
    let s_plus = objective(points, p0, gamma + h, weighting)?;
    let s_minus = objective(points, p0, gamma - h, weighting)?;
    let curvature = (s_plus - 2.0 * s_min + s_minus) / (h * h);
    let m: usize = points.iter().map(|p| p.populations.len()).sum();
    let var = match weighting {
        Weighting::InverseVariance => 2.0 / curvature,
        Weighting::Uniform => 2.0 * s_min / (m as f64 - 1.0) / curvature,
    };
    let gamma_stderr = if curvature > 0.0 { var.sqrt() } else { f64::NAN };
    Ok(StorageFit {
        tau_m: 1.0 / gamma,
        stderr: gamma_stderr / (gamma * gamma),
        gamma,
        gamma_stderr,
        objective: s_min,
        n_residuals: m,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct StorageRow {
    tau_s_us: f64,
    #[serde(rename = "P0")]
    p0: f64,
    #[serde(rename = "P1")]
    p1: f64,
    #[serde(rename = "P2")]
    p2: f64,
    sigma0: f64,
    sigma1: f64,
    sigma2: f64,
}

/// Reads `tau_s_us,P0,P1,P2,sigma0,sigma1,sigma2`.
pub fn read_storage_csv<R: Read>(r: R) -> Result<Vec<StoragePoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: StorageRow = row?;
        out.push(StoragePoint {
            tau_s: row.tau_s_us * 1e-6,
            populations: vec![row.p0, row.p1, row.p2],
            sigma: vec![row.sigma0, row.sigma1, row.sigma2],
        });
    }
    Ok(out)
}

pub fn write_storage_csv<W: Write>(w: W, points: &[StoragePoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in points {
        if p.populations.len() < 3 || p.sigma.len() < 3 {
            return Err(Error::InvalidArgument("need three populations per point".into()));
        }
        wtr.serialize(StorageRow {
            tau_s_us: p.tau_s * 1e6,
            p0: p.populations[0],
            p1: p.populations[1],
            p2: p.populations[2],
            sigma0: p.sigma[0],
            sigma1: p.sigma[1],
            sigma2: p.sigma[2],
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_storage_csv_path(path: &Path) -> Result<Vec<StoragePoint>> {
    read_storage_csv(std::fs::File::open(path)?)
}
