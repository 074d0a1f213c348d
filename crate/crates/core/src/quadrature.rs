//! Quadrature amplitudes from detector voltage records.
//!
//! The amplified signal has envelope `f(t) = exp(Γ_b t/2)` and sits at the
//! intermediate frequency ω_IF. A record `{t_k, V_k}` maps to
//!
//! ```text
//! X = √(2T_s/𝒢C) Σ V_k f(t_k) cos(ω_IF t_k)
//! Y = √(2T_s/𝒢C) Σ V_k f(t_k) sin(ω_IF t_k),   C = Σ |f(t_k)|²
//! ```
//!
//! and 𝒢 is fixed from vacuum reference data so that the rescaled total
//! variance is `1 + n_th`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::FieldTrace;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_OMEGA_IF: f64 = 2.0 * PI * 1.0e6;
pub const DEFAULT_SAMPLE_RATE: f64 = 5.0e6;
/// Reference and signal records alternate in blocks of this many executions.
pub const INTERLEAVE_BLOCK: usize = 512;

/// One heterodyne outcome in units of quanta^(1/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSample {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
}

impl QuadratureSample {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::InvalidArgument(format!("sample ({x}, {y}) is not finite")));
        }
        Ok(Self { x, y })
    }
}

/// Uniformly sampled voltages, `t_k = t0 + k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageRecord {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl VoltageRecord {
    pub fn new(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidArgument(format!("bad time grid t0={t0}, dt={dt}")));
        }
        Ok(Self { t0, dt, values })
    }

    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Scale 𝒢 (volts²·s per quantum), the assumed noise occupancy, and
/// optionally a fixed filter norm `C`. When `c` is `None` it is computed from
/// each record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainCalibration {
    pub g: f64,
    pub n_th: f64,
    #[serde(default)]
    pub c: Option<f64>,
}

impl GainCalibration {
    pub fn new(g: f64, n_th: f64) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::InvalidArgument(format!("gain scale {g} must be positive")));
        }
        if !(n_th >= 0.0) || !n_th.is_finite() {
            return Err(Error::InvalidArgument(format!("n_th {n_th} must be non-negative")));
        }
        Ok(Self { g, n_th, c: None })
    }

    /// 𝒢 = 1: leaves amplitudes in raw units.
    pub fn unit() -> Self {
        Self {
            g: 1.0,
            n_th: 0.0,
            c: None,
        }
    }
}

/// `C = Σ f(t_k)²` for `f(t) = exp(Γ_b t/2)`.
pub fn filter_norm(record: &VoltageRecord, gamma_b: f64) -> f64 {
    (0..record.len())
        .map(|k| (gamma_b * record.t(k)).exp())
        .sum()
}

pub fn extract_quadratures(
    record: &VoltageRecord,
    gamma_b: f64,
    omega_if: f64,
    cal: &GainCalibration,
) -> Result<QuadratureSample> {
    if record.is_empty() {
        return Err(Error::InvalidArgument("empty voltage record".into()));
    }
    if !(cal.g > 0.0) {
        return Err(Error::InvalidArgument(format!("gain scale {} must be positive", cal.g)));
    }
    let c = cal.c.unwrap_or_else(|| filter_norm(record, gamma_b));
    let scale = (2.0 * record.dt / (cal.g * c)).sqrt();
    let (mut sx, mut sy) = (0.0, 0.0);
    for (k, &v) in record.values.iter().enumerate() {
        let t = record.t(k);
        let w = v * (0.5 * gamma_b * t).exp();
        let (s, co) = (omega_if * t).sin_cos();
        sx += w * co;
        sy += w * s;
    }
    QuadratureSample::new(scale * sx, scale * sy)
}

/// Extracts every record independently.
pub fn extract_batch(
    records: &[VoltageRecord],
    gamma_b: f64,
    omega_if: f64,
    cal: &GainCalibration,
) -> Result<Vec<QuadratureSample>> {
    records
        .par_iter()
        .map(|r| extract_quadratures(r, gamma_b, omega_if, cal))
        .collect()
}

/// `Var(X) + Var(Y)` with the unbiased (n−1) normalization.
pub fn total_variance(samples: &[QuadratureSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.x).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.y).sum::<f64>() / n;
    let ss: f64 = samples
        .iter()
        .map(|s| (s.x - mx).powi(2) + (s.y - my).powi(2))
        .sum();
    Ok(ss / (n - 1.0))
}

/// 𝒢 = σ_V²/(1 + n_th) from uncalibrated reference amplitudes.
pub fn calibrate_gain(reference: &[QuadratureSample], n_th: f64) -> Result<GainCalibration> {
    let var = total_variance(reference)?;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    GainCalibration::new(var / (1.0 + n_th), n_th)
}

/// Divides amplitudes by √𝒢.
pub fn rescale(samples: &[QuadratureSample], cal: &GainCalibration) -> Vec<QuadratureSample> {
    let s = cal.g.sqrt();
    samples
        .iter()
        .map(|p| QuadratureSample {
            x: p.x / s,
            y: p.y / s,
        })
        .collect()
}

/// White Gaussian detector noise added to synthesized records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorNoise {
    pub sigma: f64,
    pub seed: u64,
}

/// `V(t_k) = Re[b_out(t_k) e^{iω_IF t_k}]` sampled at `sample_rate` over the
/// span of `b_out` (linear interpolation between trace points).
pub fn synthesize_voltage_record(
    b_out: &FieldTrace,
    omega_if: f64,
    sample_rate: f64,
    noise: Option<DetectorNoise>,
) -> Result<VoltageRecord> {
    if !(sample_rate > 0.0) || !sample_rate.is_finite() {
        return Err(Error::InvalidArgument(format!("sample rate {sample_rate} must be positive")));
    }
    let ts = 1.0 / sample_rate;
    let span = b_out.end() - b_out.t0();
    let n = (span / ts + 1e-9).floor() as usize + 1;
    let mut values: Vec<f64> = (0..n)
        .map(|k| {
            let t = b_out.t0() + k as f64 * ts;
            let z = b_out.value_at(t) * num_complex::Complex64::from_polar(1.0, omega_if * t);
            z.re
        })
        .collect();
    if let Some(DetectorNoise { sigma, seed }) = noise {
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut r = rng::stream(seed, 0);
        for v in &mut values {
            *v += dist.sample(&mut r);
        }
    }
    VoltageRecord::new(b_out.t0(), ts, values)
}

/// Whether a batch came from the vacuum reference or the signal protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchTag {
    Reference,
    Signal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub tag: BatchTag,
    pub index: usize,
    pub samples: Vec<QuadratureSample>,
}

/// Splits a sample list into consecutive tagged batches of [`INTERLEAVE_BLOCK`].
pub fn tag_batches(samples: &[QuadratureSample], tag: BatchTag) -> Vec<SampleBatch> {
    samples
        .chunks(INTERLEAVE_BLOCK)
        .enumerate()
        .map(|(index, c)| SampleBatch {
            tag,
            index,
            samples: c.to_vec(),
        })
        .collect()
}

/// Metadata written next to a sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub g: f64,
    pub n_th: f64,
    pub count: usize,
    pub batches: Vec<BatchInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchInfo {
    pub tag: BatchTag,
    pub index: usize,
    pub count: usize,
}

impl SampleSidecar {
    pub fn new(cal: &GainCalibration, batches: &[SampleBatch]) -> Self {
        Self {
            g: cal.g,
            n_th: cal.n_th,
            count: batches.iter().map(|b| b.samples.len()).sum(),
            batches: batches
                .iter()
                .map(|b| BatchInfo {
                    tag: b.tag,
                    index: b.index,
                    count: b.samples.len(),
                })
                .collect(),
        }
    }
}

/// CSV with header `X,Y`.
pub fn write_samples<W: Write>(w: W, samples: &[QuadratureSample]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(r: R) -> Result<Vec<QuadratureSample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let s: QuadratureSample = rec?;
        out.push(QuadratureSample::new(s.x, s.y)?);
    }
    Ok(out)
}

pub fn write_samples_csv(path: &Path, samples: &[QuadratureSample]) -> Result<()> {
    write_samples(std::fs::File::create(path)?, samples)
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<QuadratureSample>> {
    read_samples(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    // Slow enough that the filter is nearly flat across the record, so the
    // 2ω_IF terms average out.
    const GAMMA_B: f64 = 2.0 * PI * 500.0;

    fn record_of(n: usize, f: impl Fn(f64) -> f64) -> VoltageRecord {
        let dt = 1.0 / DEFAULT_SAMPLE_RATE;
        VoltageRecord::new(0.0, dt, (0..n).map(|k| f(k as f64 * dt)).collect()).unwrap()
    }

    #[test]
    fn zero_record() {
        let r = record_of(100, |_| 0.0);
        let q = extract_quadratures(&r, GAMMA_B, DEFAULT_OMEGA_IF, &GainCalibration::unit()).unwrap();
        assert_eq!((q.x, q.y), (0.0, 0.0));
        let empty = VoltageRecord::new(0.0, 1e-6, vec![]).unwrap();
        assert!(extract_quadratures(&empty, GAMMA_B, DEFAULT_OMEGA_IF, &GainCalibration::unit()).is_err());
    }

    #[test]
    fn matched_cosine() {
        // 500 samples = 100 IF cycles at 5 samples per cycle.
        let r = record_of(500, |t| (0.5 * GAMMA_B * t).exp() * (DEFAULT_OMEGA_IF * t).cos());
        let q = extract_quadratures(&r, GAMMA_B, DEFAULT_OMEGA_IF, &GainCalibration::unit()).unwrap();
        let c = filter_norm(&r, GAMMA_B);
        let direct: f64 = (0..r.len())
            .map(|k| {
                let t = r.t(k);
                (GAMMA_B * t).exp() * (DEFAULT_OMEGA_IF * t).cos().powi(2)
            })
            .sum::<f64>()
            * (2.0 * r.dt / c).sqrt();
        assert!((q.x - direct).abs() < 1e-12 * direct);
        let approx = (r.dt * c / 2.0).sqrt();
        assert!((q.x / approx - 1.0).abs() < 1e-3);
        assert!(q.y.abs() < 1e-3 * approx);
    }

    #[test]
    fn phase_shift_conjugate_rotation() {
        // 500 samples = 100 IF cycles.
        let phi = 0.7;
        let base = record_of(500, |t| (0.5 * GAMMA_B * t).exp() * (DEFAULT_OMEGA_IF * t).cos());
        let shifted = record_of(500, |t| {
            (0.5 * GAMMA_B * t).exp() * (DEFAULT_OMEGA_IF * t + phi).cos()
        });
        let cal = GainCalibration::unit();
        let q0 = extract_quadratures(&base, GAMMA_B, DEFAULT_OMEGA_IF, &cal).unwrap();
        let q1 = extract_quadratures(&shifted, GAMMA_B, DEFAULT_OMEGA_IF, &cal).unwrap();
        // The +sin demodulation maps a phase advance φ to a rotation by −φ.
        let z0 = Complex64::new(q0.x, q0.y) * Complex64::from_polar(1.0, -phi);
        let z1 = Complex64::new(q1.x, q1.y);
        assert!((z1 - z0).norm() < 1e-3 * z0.norm());
    }

    #[test]
    fn extraction_is_linear() {
        let a = record_of(200, |t| (3.1e6 * t).sin());
        let b = record_of(200, |t| (1.7e6 * t).cos() + 0.2);
        let sum = VoltageRecord::new(
            0.0,
            a.dt,
            a.values.iter().zip(&b.values).map(|(x, y)| 2.0 * x - 3.0 * y).collect(),
        )
        .unwrap();
        let cal = GainCalibration::unit();
        let qa = extract_quadratures(&a, GAMMA_B, DEFAULT_OMEGA_IF, &cal).unwrap();
        let qb = extract_quadratures(&b, GAMMA_B, DEFAULT_OMEGA_IF, &cal).unwrap();
        let qs = extract_quadratures(&sum, GAMMA_B, DEFAULT_OMEGA_IF, &cal).unwrap();
        assert!((qs.x - (2.0 * qa.x - 3.0 * qb.x)).abs() < 1e-12);
        assert!((qs.y - (2.0 * qa.y - 3.0 * qb.y)).abs() < 1e-12);
    }

    fn scaled(var_total: f64) -> Vec<QuadratureSample> {
        // Four points with zero mean; each coordinate contributes half.
        let a = (var_total * 3.0 / 8.0).sqrt();
        vec![
            QuadratureSample { x: a, y: a },
            QuadratureSample { x: -a, y: -a },
            QuadratureSample { x: a, y: -a },
            QuadratureSample { x: -a, y: a },
        ]
    }

    #[test]
    fn calibration_arithmetic() {
        let cal = calibrate_gain(&scaled(1.1), 0.1).unwrap();
        assert!((cal.g - 1.0).abs() < 1e-12);
        let cal = calibrate_gain(&scaled(2.2), 0.1).unwrap();
        assert!((cal.g - 2.0).abs() < 1e-12);
        let back = rescale(&scaled(2.2), &cal);
        assert!((total_variance(&back).unwrap() - 1.1).abs() < 1e-12);
        let again = calibrate_gain(&back, 0.1).unwrap();
        assert!((again.g - 1.0).abs() < 1e-12);
        let twice = rescale(&back, &again);
        for (p, q) in back.iter().zip(&twice) {
            assert!((p.x - q.x).abs() < 1e-14 && (p.y - q.y).abs() < 1e-14);
        }
    }

    #[test]
    fn calibration_errors() {
        let flat = vec![QuadratureSample { x: 1.0, y: 1.0 }; 5];
        assert!(matches!(calibrate_gain(&flat, 0.1), Err(Error::ZeroVariance)));
        assert!(calibrate_gain(&flat[..1], 0.1).is_err());
    }

    #[test]
    fn synthesized_records() {
        let zero = FieldTrace::new(0.0, 1e-8, vec![Complex64::new(0.0, 0.0); 1001]).unwrap();
        let r = synthesize_voltage_record(&zero, DEFAULT_OMEGA_IF, DEFAULT_SAMPLE_RATE, None).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(r.len(), 51);

        let one = FieldTrace::new(0.0, 1e-8, vec![Complex64::new(1.0, 0.0); 1001]).unwrap();
        let r = synthesize_voltage_record(&one, DEFAULT_OMEGA_IF, DEFAULT_SAMPLE_RATE, None).unwrap();
        for k in 0..r.len() {
            assert!((r.values[k] - (DEFAULT_OMEGA_IF * r.t(k)).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![
            QuadratureSample { x: 0.1, y: -2.5 },
            QuadratureSample { x: 1e-17, y: 3.0 },
        ];
        let mut buf = Vec::new();
        write_samples(&mut buf, &s).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("X,Y\n"));
        assert_eq!(read_samples(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn batches_and_sidecar() {
        let s = vec![QuadratureSample { x: 0.0, y: 0.0 }; 1100];
        let b = tag_batches(&s, BatchTag::Reference);
        assert_eq!(b.len(), 3);
        assert_eq!(b[2].samples.len(), 1100 - 2 * INTERLEAVE_BLOCK);
        let side = SampleSidecar::new(&GainCalibration::unit(), &b);
        assert_eq!(side.count, 1100);
    }
}
