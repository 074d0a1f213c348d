//! Mean-field electromechanical dynamics.
//!
//! The full model is integrated in a frame rotating at the LC resonance. A
//! pump `j` at `ω_LC + Δ_j` with rate `Γ_j(t)` and phase ψ_j contributes a
//! coupling `g_j = i√(Γ_j κ_LC/4) e^{iψ_j}`:
//!
//! ```text
//! ḃ = −κ_LC/2 b − i Σ_j g_j e^{−iΔ_j t} (c + c*) + √κ_ext b_in
//! ċ = (−iω_m − κ_m/2) c − i Σ_j (g_j e^{−iΔ_j t} b* + g_j* e^{iΔ_j t} b)
//! b_out = √κ_ext b − b_in
//! ```
//!
//! Red pumps sit at `Δ = −ω_m`, blue pumps at `Δ = +ω_m`. With this phase
//! convention the adiabatic limits reduce exactly to the closed forms in
//! [`integrate_adiabatic_blue`] and [`integrate_adiabatic_red`].

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Largest allowed `dt · max(κ_LC, ω_m)`.
pub const MAX_STEP_FACTOR: f64 = 0.05;

/// Default Gaussian width of pump edges.
pub const DEFAULT_EDGE_SIGMA: f64 = 200e-9;

/// Physical constants of the electromechanical device (angular rates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub omega_m: f64,
    pub kappa_m: f64,
    pub kappa_lc: f64,
    pub kappa_ext: f64,
    pub g0: f64,
    pub n_m: f64,
    pub eta: f64,
}

impl DeviceParams {
    pub fn new(
        omega_m: f64,
        kappa_m: f64,
        kappa_lc: f64,
        kappa_ext: f64,
        g0: f64,
        n_m: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("omega_m", omega_m),
            ("kappa_m", kappa_m),
            ("kappa_lc", kappa_lc),
            ("kappa_ext", kappa_ext),
            ("g0", g0),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be positive")));
            }
        }
        if kappa_ext > kappa_lc {
            return Err(Error::InvalidArgument(format!(
                "kappa_ext {kappa_ext} exceeds kappa_lc {kappa_lc}"
            )));
        }
        if !(n_m >= 0.0) {
            return Err(Error::InvalidArgument(format!("n_m = {n_m} must be non-negative")));
        }
        Ok(Self {
            omega_m,
            kappa_m,
            kappa_lc,
            kappa_ext,
            g0,
            n_m,
            eta: kappa_ext / kappa_lc,
        })
    }

    /// Measured device: κ_LC/2π = 3 MHz, κ_ext/2π = 2.59 MHz, ω_m/2π = 9.345 MHz,
    /// κ_m/2π = 14.5 Hz, g₀/2π = 283 Hz, n_m = 42.
    pub fn measured() -> Self {
        let tp = 2.0 * PI;
        Self::new(tp * 9.345e6, tp * 14.5, tp * 3.0e6, tp * 2.59e6, tp * 283.0, 42.0)
            .expect("valid constants")
    }

    /// `|g| = √(Γκ_LC/4)` for a pump-induced rate Γ.
    pub fn coupling(&self, gamma: f64) -> f64 {
        (gamma.max(0.0) * self.kappa_lc / 4.0).sqrt()
    }

    /// Intracavity pump photons `n = Γκ_LC/(4g₀²)` giving rate Γ.
    pub fn pump_photons(&self, gamma: f64) -> f64 {
        gamma * self.kappa_lc / (4.0 * self.g0 * self.g0)
    }

    /// Largest step accepted by [`integrate_full_eom`].
    pub fn max_step(&self) -> f64 {
        MAX_STEP_FACTOR / self.kappa_lc.max(self.omega_m)
    }
}

/// Complex samples on a uniform grid `t_k = t0 + k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrace {
    t0: f64,
    dt: f64,
    values: Vec<Complex64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t: f64,
    re: f64,
    im: f64,
}

impl FieldTrace {
    pub fn new(t0: f64, dt: f64, values: Vec<Complex64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidArgument(format!("bad time grid t0={t0}, dt={dt}")));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty field trace".into()));
        }
        Ok(Self { t0, dt, values })
    }

    /// Samples `f` at `n` grid points.
    pub fn from_fn(t0: f64, dt: f64, n: usize, f: impl Fn(f64) -> Complex64) -> Result<Self> {
        Self::new(t0, dt, (0..n).map(|k| f(t0 + k as f64 * dt)).collect())
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.t(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Linear interpolation; zero outside the trace.
    pub fn value_at(&self, t: f64) -> Complex64 {
        let x = (t - self.t0) / self.dt;
        let last = (self.values.len() - 1) as f64;
        if x < -1e-9 || x > last + 1e-9 {
            return ZERO;
        }
        let x = x.clamp(0.0, last);
        let k = x.floor() as usize;
        if k + 1 >= self.values.len() {
            return self.values[self.values.len() - 1];
        }
        let f = x - k as f64;
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }

    /// `∫|v|² dt` by the trapezoid rule.
    pub fn energy(&self) -> f64 {
        let v = &self.values;
        if v.len() < 2 {
            return 0.0;
        }
        let inner: f64 = v[1..v.len() - 1].iter().map(|z| z.norm_sqr()).sum();
        self.dt * (inner + 0.5 * (v[0].norm_sqr() + v[v.len() - 1].norm_sqr()))
    }

    /// [`energy`](Self::energy) over the samples with `t ≤ t_end`.
    pub fn energy_until(&self, t_end: f64) -> f64 {
        let n = self.values.iter().enumerate().take_while(|&(k, _)| self.t(k) <= t_end).count();
        Self {
            t0: self.t0,
            dt: self.dt,
            values: self.values[..n].to_vec(),
        }
        .energy()
    }

    pub fn envelope(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.norm()).collect()
    }

    /// CSV with header `t,re,im`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for (k, z) in self.values.iter().enumerate() {
            wtr.serialize(TraceRow {
                t: self.t(k),
                re: z.re,
                im: z.im,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut ts = Vec::new();
        let mut vs = Vec::new();
        for row in rdr.deserialize() {
            let row: TraceRow = row?;
            ts.push(row.t);
            vs.push(Complex64::new(row.re, row.im));
        }
        if ts.len() < 2 {
            return Err(Error::InvalidArgument("trace CSV needs at least two rows".into()));
        }
        let dt = ts[1] - ts[0];
        for w in ts.windows(2) {
            if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.abs() {
                return Err(Error::InvalidArgument("trace CSV grid is not uniform".into()));
            }
        }
        Self::new(ts[0], dt, vs)
    }
}

/// `Γ_r(t+τ_r) = γe^{−γ(t+τ_r)}/(1 − e^{−γ(t+τ_r)} + γ/Γ_r(0))`, zero before
/// `t + τ_r = 0`. Captures a field with envelope `√γ e^{−γt/2}`.
pub fn optimal_capture_pulse(gamma: f64, gamma_r0: f64, tau_r: f64, t: f64) -> f64 {
    let s = t + tau_r;
    if s < 0.0 {
        return 0.0;
    }
    let e = (-gamma * s).exp();
    gamma * e / (1.0 - e + gamma / gamma_r0)
}

/// One piece of a pump-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Segment {
    /// Rate `rate` on `[start, end)`.
    Constant { start: f64, end: f64, rate: f64 },
    /// [`optimal_capture_pulse`] started at `start` and cut at `end`.
    Decaycatch {
        start: f64,
        end: f64,
        gamma: f64,
        gamma_r0: f64,
        #[serde(default)]
        tau_r: f64,
    },
    /// Flat-top pulse with its own edge width.
    GaussianEdge {
        start: f64,
        end: f64,
        rate: f64,
        sigma: f64,
    },
}

/// Piecewise pump rate Γ(t). Windows of `constant` and `decaycatch` pieces
/// are convolved with a Gaussian of width `edge_sigma` (0 = sharp edges).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub segments: Vec<Segment>,
    #[serde(default = "default_sigma")]
    pub edge_sigma: f64,
}

fn default_sigma() -> f64 {
    DEFAULT_EDGE_SIGMA
}

fn window(t: f64, start: f64, end: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if t >= start && t < end { 1.0 } else { 0.0 };
    }
    let s = std::f64::consts::SQRT_2 * sigma;
    0.5 * (libm::erf((t - start) / s) - libm::erf((t - end) / s))
}

impl Schedule {
    pub fn off() -> Self {
        Self {
            segments: Vec::new(),
            edge_sigma: DEFAULT_EDGE_SIGMA,
        }
    }

    pub fn new(segments: Vec<Segment>, edge_sigma: f64) -> Result<Self> {
        let s = Self { segments, edge_sigma };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.edge_sigma >= 0.0) {
            return Err(Error::InvalidArgument("edge_sigma must be non-negative".into()));
        }
        for seg in &self.segments {
            let (start, end, ok) = match *seg {
                Segment::Constant { start, end, rate } => (start, end, rate >= 0.0),
                Segment::Decaycatch {
                    start,
                    end,
                    gamma,
                    gamma_r0,
                    ..
                } => (start, end, gamma > 0.0 && gamma_r0 > 0.0),
                Segment::GaussianEdge {
                    start,
                    end,
                    rate,
                    sigma,
                } => (start, end, rate >= 0.0 && sigma >= 0.0),
            };
            if !(end >= start) || !ok {
                return Err(Error::InvalidArgument(format!("invalid segment {seg:?}")));
            }
        }
        Ok(())
    }

    pub fn rate(&self, t: f64) -> f64 {
        let sigma = self.edge_sigma;
        self.segments
            .iter()
            .map(|seg| match *seg {
                Segment::Constant { start, end, rate } => rate * window(t, start, end, sigma),
                Segment::Decaycatch {
                    start,
                    end,
                    gamma,
                    gamma_r0,
                    tau_r,
                } => {
                    optimal_capture_pulse(gamma, gamma_r0, tau_r, (t - start).max(-tau_r))
                        * window(t, start, end, sigma)
                }
                Segment::GaussianEdge {
                    start,
                    end,
                    rate,
                    sigma,
                } => rate * window(t, start, end, sigma),
            })
            .sum::<f64>()
            .max(0.0)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let s: Schedule = serde_json::from_str(s)?;
        s.validate()?;
        Ok(s)
    }
}

/// A coherent pump tone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pump {
    /// Pump frequency minus ω_LC (rad/s).
    pub detuning: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub phase: f64,
}

impl Pump {
    pub fn red(params: &DeviceParams, schedule: Schedule) -> Self {
        Self {
            detuning: -params.omega_m,
            schedule,
            phase: 0.0,
        }
    }

    pub fn blue(params: &DeviceParams, schedule: Schedule, phase: f64) -> Self {
        Self {
            detuning: params.omega_m,
            schedule,
            phase,
        }
    }
}

/// Red (capture) and blue (amplification) schedules of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpSchedule {
    pub gamma_r: Schedule,
    pub gamma_b: Schedule,
    pub psi_b: f64,
    pub tau_b: f64,
    pub tau_r: f64,
    pub tau_s: f64,
}

impl PumpSchedule {
    /// Capture with a decaycatch red pulse on `[0, τ_r)`, store for τ_s, then
    /// amplify with a constant blue pulse Γ₀ for τ_b.
    #[allow(clippy::too_many_arguments)]
    pub fn capture_protocol(
        gamma: f64,
        gamma_r0: f64,
        tau_r: f64,
        tau_s: f64,
        gamma_b0: f64,
        tau_b: f64,
        psi_b: f64,
        edge_sigma: f64,
    ) -> Result<Self> {
        if tau_r < 0.0 || tau_s < 0.0 || tau_b < 0.0 {
            return Err(Error::InvalidArgument("durations must be non-negative".into()));
        }
        let red = Schedule::new(
            vec![Segment::Decaycatch {
                start: 0.0,
                end: tau_r,
                gamma,
                gamma_r0,
                tau_r: 0.0,
            }],
            edge_sigma,
        )?;
        let b_start = tau_r + tau_s;
        let blue = Schedule::new(
            vec![Segment::Constant {
                start: b_start,
                end: b_start + tau_b,
                rate: gamma_b0,
            }],
            edge_sigma,
        )?;
        Ok(Self {
            gamma_r: red,
            gamma_b: blue,
            psi_b,
            tau_b,
            tau_r,
            tau_s,
        })
    }

    pub fn pumps(&self, params: &DeviceParams) -> Vec<Pump> {
        vec![
            Pump::red(params, self.gamma_r.clone()),
            Pump::blue(params, self.gamma_b.clone(), self.psi_b),
        ]
    }

    pub fn duration(&self) -> f64 {
        self.tau_r + self.tau_s + self.tau_b
    }
}

/// Trajectories of the full model on the integration grid.
#[derive(Debug, Clone)]
pub struct EomSolution {
    pub b: FieldTrace,
    pub c: FieldTrace,
    pub b_out: FieldTrace,
    pub b_in: FieldTrace,
}

impl EomSolution {
    /// `∫|b_out|² / ∫|b_in|²` over the integration window.
    pub fn reflected_fraction(&self) -> f64 {
        self.b_out.energy() / self.b_in.energy()
    }
}

/// Integrates the full model from `b = c = 0` over the span of `input`.
pub fn integrate_full_eom(
    params: &DeviceParams,
    pumps: &[Pump],
    input: &FieldTrace,
    dt: f64,
) -> Result<EomSolution> {
    integrate_full_eom_from(params, pumps, input, dt, ZERO, ZERO)
}

/// As [`integrate_full_eom`] with initial amplitudes `b0`, `c0` at `input.t0()`.
pub fn integrate_full_eom_from(
    params: &DeviceParams,
    pumps: &[Pump],
    input: &FieldTrace,
    dt: f64,
    b0: Complex64,
    c0: Complex64,
) -> Result<EomSolution> {
    let limit = params.max_step();
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::UnstableStep {
            dt,
            suggested: limit,
        });
    }
    for p in pumps {
        p.schedule.validate()?;
    }
    let t0 = input.t0();
    let steps = ((input.end() - t0) / dt).round() as usize;
    let sk = params.kappa_ext.sqrt();
    let half_k = 0.5 * params.kappa_lc;
    let mech = Complex64::new(-0.5 * params.kappa_m, -params.omega_m);

    // Σ_j g_j e^{−iΔ_j t}
    let coupling = |t: f64| -> Complex64 {
        pumps
            .iter()
            .map(|p| {
                let g = params.coupling(p.schedule.rate(t));
                if g == 0.0 {
                    ZERO
                } else {
                    I * g * Complex64::from_polar(1.0, p.phase - p.detuning * t)
                }
            })
            .sum()
    };
    // With several pumps the c-equation needs Σ g_j e^{−iΔt} and its conjugate,
    // which is the same sum conjugated.
    let rhs = |t: f64, b: Complex64, c: Complex64| -> (Complex64, Complex64) {
        let g = coupling(t);
        let db = -half_k * b - I * g * (c + c.conj()) + sk * input.value_at(t);
        let dc = mech * c - I * (g * b.conj() + g.conj() * b);
        (db, dc)
    };

    let mut b = b0;
    let mut c = c0;
    let mut bs = Vec::with_capacity(steps + 1);
    let mut cs = Vec::with_capacity(steps + 1);
    let mut outs = Vec::with_capacity(steps + 1);
    let mut ins = Vec::with_capacity(steps + 1);
    let record = |t: f64, b: Complex64, c: Complex64, bs: &mut Vec<_>, cs: &mut Vec<_>, outs: &mut Vec<_>, ins: &mut Vec<_>| {
        let bin = input.value_at(t);
        bs.push(b);
        cs.push(c);
        ins.push(bin);
        outs.push(sk * b - bin);
    };
    record(t0, b, c, &mut bs, &mut cs, &mut outs, &mut ins);
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let (k1b, k1c) = rhs(t, b, c);
        let (k2b, k2c) = rhs(t + 0.5 * dt, b + 0.5 * dt * k1b, c + 0.5 * dt * k1c);
        let (k3b, k3c) = rhs(t + 0.5 * dt, b + 0.5 * dt * k2b, c + 0.5 * dt * k2c);
        let (k4b, k4c) = rhs(t + dt, b + dt * k3b, c + dt * k3c);
        b += dt / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
        c += dt / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c);
        if !b.is_finite() || !c.is_finite() {
            return Err(Error::UnstableStep {
                dt,
                suggested: 0.5 * dt,
            });
        }
        record(t0 + (k + 1) as f64 * dt, b, c, &mut bs, &mut cs, &mut outs, &mut ins);
    }
    Ok(EomSolution {
        b: FieldTrace::new(t0, dt, bs)?,
        c: FieldTrace::new(t0, dt, cs)?,
        b_out: FieldTrace::new(t0, dt, outs)?,
        b_in: FieldTrace::new(t0, dt, ins)?,
    })
}

/// Closed-form output of a constant blue pump Γ₀ switched on at `input.t0()`:
/// `b_out = c*(0)√(ηΓ₀) e^{iψ_b} h + Γ₀η (h ⋆ b_in) + (2η−1) b_in`,
/// `h(t) = e^{Γ₀t/2}`. The convolution is accumulated recursively with the
/// trapezoid rule on the input grid.
pub fn integrate_adiabatic_blue(
    gamma0: f64,
    eta: f64,
    psi_b: f64,
    c0: Complex64,
    input: &FieldTrace,
) -> Result<FieldTrace> {
    if !(gamma0 > 0.0) {
        return Err(Error::InvalidArgument(format!("Gamma0 = {gamma0} must be positive")));
    }
    let dt = input.dt();
    let step = (0.5 * gamma0 * dt).exp();
    let lead = c0.conj() * (eta * gamma0).sqrt() * Complex64::from_polar(1.0, psi_b);
    let v = input.values();
    let mut conv = ZERO;
    let mut h = 1.0;
    let mut out = Vec::with_capacity(v.len());
    for k in 0..v.len() {
        if k > 0 {
            conv = step * conv + 0.5 * dt * (step * v[k - 1] + v[k]);
            h *= step;
        }
        out.push(lead * h + gamma0 * eta * conv + (2.0 * eta - 1.0) * v[k]);
    }
    FieldTrace::new(input.t0(), dt, out)
}

/// Adiabatic red-pump (beamsplitter) model with a time-dependent rate:
/// `ċ = −Γ/2 c − √(ηΓ) e^{−iψ} b_in`, `b_out = √(ηΓ) e^{iψ} c + (2η−1) b_in`.
/// RK4 on the input grid; returns `(c, b_out)`.
pub fn integrate_adiabatic_red(
    gamma_r: &Schedule,
    eta: f64,
    psi_r: f64,
    c0: Complex64,
    input: &FieldTrace,
) -> Result<(FieldTrace, FieldTrace)> {
    gamma_r.validate()?;
    let dt = input.dt();
    let phase = Complex64::from_polar(1.0, psi_r);
    let f = |t: f64, c: Complex64| {
        let g = gamma_r.rate(t);
        -0.5 * g * c - (eta * g).sqrt() * phase.conj() * input.value_at(t)
    };
    let mut c = c0;
    let mut cs = Vec::with_capacity(input.len());
    let mut outs = Vec::with_capacity(input.len());
    for k in 0..input.len() {
        let t = input.t(k);
        if k > 0 {
            let tp = t - dt;
            let k1 = f(tp, c);
            let k2 = f(tp + 0.5 * dt, c + 0.5 * dt * k1);
            let k3 = f(tp + 0.5 * dt, c + 0.5 * dt * k2);
            let k4 = f(t, c + dt * k3);
            c += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let g = gamma_r.rate(t);
        cs.push(c);
        outs.push((eta * g).sqrt() * phase * c + (2.0 * eta - 1.0) * input.values()[k]);
    }
    Ok((
        FieldTrace::new(input.t0(), dt, cs)?,
        FieldTrace::new(input.t0(), dt, outs)?,
    ))
}

/// `√γ B e^{−γt/2}` for `t ≥ 0` on `[0, span]`.
pub fn decaying_pulse(gamma: f64, amplitude: Complex64, span: f64, dt: f64) -> Result<FieldTrace> {
    let n = (span / dt).round() as usize + 1;
    FieldTrace::from_fn(0.0, dt, n, |t| amplitude * (gamma.sqrt() * (-0.5 * gamma * t).exp()))
}

/// Reflected energy fraction when a unit pulse `√γ e^{−γt/2}` is captured by a
/// decaycatch red pulse on `[0, τ_r)`. The window extends `tail` past τ_r.
pub fn capture_reflection(
    params: &DeviceParams,
    gamma: f64,
    gamma_r0: f64,
    tau_r: f64,
    edge_sigma: f64,
    tail: f64,
    dt: f64,
) -> Result<f64> {
    let input = decaying_pulse(gamma, Complex64::new(1.0, 0.0), tau_r + tail, dt)?;
    let red = Schedule::new(
        vec![Segment::Decaycatch {
            start: 0.0,
            end: tau_r,
            gamma,
            gamma_r0,
            tau_r: 0.0,
        }],
        edge_sigma,
    )?;
    let sol = integrate_full_eom(params, &[Pump::red(params, red)], &input, dt)?;
    Ok(sol.reflected_fraction())
}

/// Output energy over input energy for the capture protocol as the blue rate
/// is varied (capture, then immediate amplification for τ_b).
pub fn capture_gain_curve(
    params: &DeviceParams,
    gamma: f64,
    gamma_r0: f64,
    tau_r: f64,
    tau_b: f64,
    gamma_b: &[f64],
    edge_sigma: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let span = tau_r + tau_b + 4.0 * edge_sigma;
    let input = decaying_pulse(gamma, Complex64::new(1.0, 0.0), span, dt)?;
    let e_in = input.energy();
    gamma_b
        .iter()
        .map(|&gb| {
            let sched =
                PumpSchedule::capture_protocol(gamma, gamma_r0, tau_r, 0.0, gb, tau_b, 0.0, edge_sigma)?;
            let sol = integrate_full_eom(params, &sched.pumps(params), &input, dt)?;
            Ok(sol.b_out.energy() / e_in)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    Direct,
    Conjugate,
}

/// `cosh²(r/2)` (direct) or `sinh²(r/2)` (phase-conjugating), `r = Γ_b τ_b`.
pub fn energy_gain(r: f64, mode: GainMode) -> Result<f64> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!("r = {r} must be non-negative")));
    }
    Ok(match mode {
        GainMode::Direct => (0.5 * r).cosh().powi(2),
        GainMode::Conjugate => (0.5 * r).sinh().powi(2),
    })
}

/// `Var(S_h)/Var(S_c) = (n_m + 1)/(n_th + 1)`.
pub fn hot_cold_ratio(n_m: f64, n_th: f64) -> Result<f64> {
    if !(n_m >= 0.0) || !(n_th >= 0.0) {
        return Err(Error::InvalidArgument("occupancies must be non-negative".into()));
    }
    Ok((n_m + 1.0) / (n_th + 1.0))
}

/// Inverse of [`hot_cold_ratio`] for `n_th`.
pub fn n_th_from_ratio(ratio: f64, n_m: f64) -> Result<f64> {
    if !(ratio > 0.0) || !(n_m >= 0.0) {
        return Err(Error::InvalidArgument("ratio must be positive".into()));
    }
    Ok((n_m + 1.0) / ratio - 1.0)
}
