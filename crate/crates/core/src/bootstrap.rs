//! Parametric bootstrap: synthetic data sets drawn from an estimate are
//! re-tomographed, and basic-bootstrap intervals are read off the spread.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::CaptureModel;
use crate::error::{Error, Result};
use crate::fock::DensityMatrix;
use crate::metrics::{average_fidelity, g2_zero, reconstruct_process, FidelityReport};
use crate::povm::{PovmCache, PovmKind};
use crate::quadrature::{calibrate_gain, rescale, QuadratureSample};
use crate::rng::derive_seed;
use crate::sampling::QSampler;
use crate::tomography::{run_ml_on, MlConfig, MlResult, PovmSet};

/// Fewest bootstrap values accepted by [`basic_bootstrap_ci`].
pub const MIN_VALUES: usize = 100;
/// Grid pitch used when a bootstrap ML config leaves binning unset.
pub const DEFAULT_BIN_WIDTH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_sets: usize,
    pub n_samples_per_set: usize,
    pub level: f64,
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_bins() -> usize {
    40
}

impl BootstrapConfig {
    /// 1000 sets of 102,400 outcomes.
    pub fn for_states(seed: u64) -> Self {
        Self {
            n_sets: 1000,
            n_samples_per_set: 102_400,
            level: 0.9,
            seed,
            histogram_bins: default_bins(),
        }
    }

    /// 1000 sets of 20,480 outcomes.
    pub fn for_fidelity(seed: u64) -> Self {
        Self {
            n_samples_per_set: 20_480,
            ..Self::for_states(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sets == 0 || self.n_samples_per_set == 0 || self.histogram_bins == 0 {
            return Err(Error::InvalidArgument("bootstrap counts must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Nearest-rank percentile of sorted values, `p ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p * n as f64).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// `[θ − (θ_up − θ), θ + (θ − θ_lo)]` with `θ_lo`, `θ_up` the `(1−level)/2`
/// and `1 − (1−level)/2` percentiles.
pub fn basic_bootstrap_ci(theta: f64, values: &[f64], level: f64) -> Result<ConfidenceInterval> {
    if values.len() < MIN_VALUES {
        return Err(Error::TooFewValues {
            needed: MIN_VALUES,
            got: values.len(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ci_from_percentiles(theta, percentile(&v, tail), percentile(&v, 1.0 - tail)))
}

pub fn ci_from_percentiles(theta: f64, theta_lo: f64, theta_up: f64) -> ConfidenceInterval {
    ConfidenceInterval {
        estimate: theta,
        lo: theta - (theta_up - theta),
        hi: theta + (theta - theta_lo),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins spanning the values; every value lands in a bin.
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self {
                lo: 0.0,
                hi: 0.0,
                counts: vec![0; bins],
            };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut counts = vec![0; bins];
        for v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / n as f64)
            .collect()
    }
}

/// ML on samples, reusing binned POVM elements across calls.
struct Fitter {
    ml: MlConfig,
    cache: PovmCache,
}

impl Fitter {
    fn new(ml: &MlConfig) -> Result<Self> {
        ml.validate()?;
        Ok(Self {
            ml: *ml,
            cache: PovmCache::new(ml.povm, ml.dim, ml.bin_width)?,
        })
    }

    fn fit(&self, samples: &[QuadratureSample]) -> Result<MlResult> {
        run_ml_on(&PovmSet::from_samples_cached(samples, &self.cache)?, &self.ml)
    }

    /// Draws outcomes from `sampler` through the POVM's added noise and fits.
    fn resample(&self, sampler: &QSampler, n: usize, seed: u64) -> Result<MlResult> {
        let set = sampler.sample_with_noise(n, self.ml.povm.added_noise(), seed)?;
        self.fit(&set.samples)
    }
}

/// Bootstrap ML config: `ml` with binning defaulted to [`DEFAULT_BIN_WIDTH`].
pub fn with_default_binning(ml: &MlConfig) -> MlConfig {
    MlConfig {
        bin_width: ml.bin_width.or(Some(DEFAULT_BIN_WIDTH)),
        ..*ml
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementSummary {
    pub name: String,
    pub estimate: f64,
    pub ci: Option<ConfidenceInterval>,
    pub histogram: Histogram,
    pub mean: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateBootstrap {
    pub n_sets: usize,
    pub failures: usize,
    pub elements: Vec<ElementSummary>,
}

impl StateBootstrap {
    pub fn element(&self, name: &str) -> Option<&ElementSummary> {
        self.elements.iter().find(|e| e.name == name)
    }
}

fn tracked(rho: &DensityMatrix) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = (0..rho.dim().min(3))
        .map(|n| (format!("rho_{n}{n}"), rho.element(n, n).re))
        .collect();
    let r01 = rho.element(0, 1);
    out.push(("abs_rho_01".into(), r01.norm()));
    out.push(("arg_rho_01".into(), r01.arg()));
    out.push(("g2".into(), g2_zero(rho).unwrap_or(f64::NAN)));
    out
}

fn summarize(
    names_estimates: Vec<(String, f64)>,
    columns: Vec<Vec<f64>>,
    b: &BootstrapConfig,
) -> Vec<ElementSummary> {
    names_estimates
        .into_iter()
        .zip(columns)
        .map(|((name, estimate), mut values)| {
            values.retain(|v| v.is_finite());
            let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
            ElementSummary {
                ci: basic_bootstrap_ci(estimate, &values, b.level).ok().filter(|_| estimate.is_finite()),
                histogram: Histogram::from_values(&values, b.histogram_bins),
                name,
                estimate,
                mean,
                values,
            }
        })
        .collect()
}

fn transpose(rows: Vec<Vec<f64>>, width: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); width];
    for r in rows {
        for (c, v) in cols.iter_mut().zip(r) {
            c.push(v);
        }
    }
    cols
}

/// Re-estimates `rho_est` from `n_sets` synthetic data sets. Samples carry
/// the added noise of `ml.povm`. Replicates whose ML fails are dropped and
/// counted.
pub fn bootstrap_state(rho_est: &DensityMatrix, ml: &MlConfig, b: &BootstrapConfig) -> Result<StateBootstrap> {
    b.validate()?;
    if rho_est.dim() != ml.dim {
        return Err(Error::DimensionMismatch {
            expected: ml.dim,
            got: rho_est.dim(),
        });
    }
    let fitter = Fitter::new(ml)?;
    let sampler = QSampler::new(rho_est, None)?;
    let reps: Vec<Option<Vec<f64>>> = (0..b.n_sets)
        .into_par_iter()
        .map(|r| {
            match fitter.resample(&sampler, b.n_samples_per_set, derive_seed(b.seed, r as u64)) {
                Ok(res) => Some(tracked(&res.rho_est).into_iter().map(|t| t.1).collect()),
                Err(e) => {
                    log::warn!("bootstrap replicate {r} dropped: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = reps.iter().filter(|r| r.is_none()).count();
    let est = tracked(rho_est);
    let cols = transpose(reps.into_iter().flatten().collect(), est.len());
    Ok(StateBootstrap {
        n_sets: b.n_sets,
        failures,
        elements: summarize(est, cols, b),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityBootstrap {
    pub report: FidelityReport,
    pub ci: Option<ConfidenceInterval>,
    pub mean: f64,
    pub n_sets: usize,
    pub failures: usize,
    pub histogram: Histogram,
    #[serde(skip)]
    pub values: Vec<f64>,
}

pub fn bootstrap_fidelity(
    inputs: &[DensityMatrix],
    outputs: &[DensityMatrix],
    ml: &MlConfig,
    b: &BootstrapConfig,
) -> Result<FidelityBootstrap> {
    bootstrap_fidelity_with(inputs, outputs, ml, ml, b)
}

/// Resample every pair, re-tomograph, reconstruct the qubit map and take
/// the corrected `F_avg`, once per replicate.
pub fn bootstrap_fidelity_with(
    inputs: &[DensityMatrix],
    outputs: &[DensityMatrix],
    input_ml: &MlConfig,
    output_ml: &MlConfig,
    b: &BootstrapConfig,
) -> Result<FidelityBootstrap> {
    b.validate()?;
    let report = average_fidelity(&reconstruct_process(inputs, outputs, 2)?);
    let fin = Fitter::new(input_ml)?;
    let fout = Fitter::new(output_ml)?;
    let s_in = inputs
        .iter()
        .map(|r| QSampler::new(r, None))
        .collect::<Result<Vec<_>>>()?;
    let s_out = outputs
        .iter()
        .map(|r| QSampler::new(r, None))
        .collect::<Result<Vec<_>>>()?;
    let n = b.n_samples_per_set;
    let values: Vec<Option<f64>> = (0..b.n_sets)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(b.seed, r as u64);
            let rep = || -> Result<f64> {
                let mut ins = Vec::with_capacity(s_in.len());
                let mut outs = Vec::with_capacity(s_out.len());
                for (k, s) in s_in.iter().enumerate() {
                    ins.push(fin.resample(s, n, derive_seed(seed, k as u64))?.rho_est);
                }
                for (k, s) in s_out.iter().enumerate() {
                    outs.push(fout.resample(s, n, derive_seed(seed, 100 + k as u64))?.rho_est);
                }
                Ok(average_fidelity(&reconstruct_process(&ins, &outs, 2)?).f_avg)
            };
            rep().map_err(|e| log::warn!("fidelity replicate {r} dropped: {e}")).ok()
        })
        .collect();
    Ok(fidelity_summary(report, values, b))
}

fn fidelity_summary(report: FidelityReport, values: Vec<Option<f64>>, b: &BootstrapConfig) -> FidelityBootstrap {
    let failures = values.iter().filter(|v| v.is_none()).count();
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    FidelityBootstrap {
        ci: basic_bootstrap_ci(report.f_avg, &values, b.level).ok(),
        mean,
        n_sets: b.n_sets,
        failures,
        histogram: Histogram::from_values(&values, b.histogram_bins),
        report,
        values,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasRun {
    /// Exact `F_avg` of the model map.
    pub model_f_avg: f64,
    pub mean: f64,
    pub bias: f64,
    pub n_sets: usize,
    pub failures: usize,
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Simulates the whole fidelity experiment with `model` standing in for
/// the capture: tomograph synthetic data from each input, push the estimate
/// through the model, tomograph synthetic data from the result, then
/// compute `F_avg`.
pub fn model_bias_run(
    inputs: &[DensityMatrix],
    model: &CaptureModel,
    input_ml: &MlConfig,
    output_ml: &MlConfig,
    b: &BootstrapConfig,
) -> Result<BiasRun> {
    b.validate()?;
    let model_f_avg = crate::capture::model_average_fidelity(model.params())?;
    let fin = Fitter::new(input_ml)?;
    let fout = Fitter::new(output_ml)?;
    let s_in = inputs
        .iter()
        .map(|r| QSampler::new(r, None))
        .collect::<Result<Vec<_>>>()?;
    let n = b.n_samples_per_set;
    let values: Vec<Option<f64>> = (0..b.n_sets)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(b.seed, r as u64);
            let rep = || -> Result<f64> {
                let mut ins = Vec::with_capacity(s_in.len());
                let mut outs = Vec::with_capacity(s_in.len());
                for (k, s) in s_in.iter().enumerate() {
                    let est = fin.resample(s, n, derive_seed(seed, k as u64))?.rho_est;
                    let captured = model.apply(&est)?;
                    let sampler = QSampler::new(&captured, None)?;
                    outs.push(fout.resample(&sampler, n, derive_seed(seed, 100 + k as u64))?.rho_est);
                    ins.push(est);
                }
                Ok(average_fidelity(&reconstruct_process(&ins, &outs, 2)?).f_avg)
            };
            rep().map_err(|e| log::warn!("bias replicate {r} dropped: {e}")).ok()
        })
        .collect();
    let failures = values.iter().filter(|v| v.is_none()).count();
    let values: Vec<f64> = values.into_iter().flatten().collect();
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    Ok(BiasRun {
        model_f_avg,
        mean,
        bias: mean - model_f_avg,
        n_sets: b.n_sets,
        failures,
        values,
    })
}

/// Which POVM the sweep assumes while varying `n_th`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepPovm {
    /// Displaced thermal with the swept `n_th`.
    #[default]
    Thermal,
    /// Ideal heterodyne; only the gain scaling follows `n_th`.
    Coherent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_th: f64,
    pub diagonal: [f64; 3],
}

/// Re-scales `signal` with the gain calibrated from `reference` under each
/// assumed `n_th`, then re-tomographs.
pub fn nth_sensitivity_sweep(
    reference: &[QuadratureSample],
    signal: &[QuadratureSample],
    nth_values: &[f64],
    ml: &MlConfig,
    povm: SweepPovm,
) -> Result<Vec<SweepRow>> {
    if ml.dim < 3 {
        return Err(Error::InvalidArgument("the sweep tracks three levels".into()));
    }
    nth_values
        .iter()
        .map(|&n| {
            let cal = calibrate_gain(reference, n)?;
            let scaled = rescale(signal, &cal);
            let cfg = MlConfig {
                povm: match povm {
                    SweepPovm::Thermal => PovmKind::DisplacedThermal { n_th: n },
                    SweepPovm::Coherent => PovmKind::Coherent,
                },
                ..*ml
            };
            let set = PovmSet::from_samples(&scaled, cfg.povm, cfg.dim, cfg.bin_width)?;
            let rho = run_ml_on(&set, &cfg)?.rho_est;
            Ok(SweepRow {
                n_th: n,
                diagonal: [rho.element(0, 0).re, rho.element(1, 1).re, rho.element(2, 2).re],
            })
        })
        .collect()
}

/// `element,bin_lo,bin_hi,count` rows for every tracked element.
pub fn write_histograms_csv<W: Write>(w: W, elements: &[ElementSummary]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["element", "bin_lo", "bin_hi", "count"])?;
    for e in elements {
        let edges = e.histogram.edges();
        for (k, c) in e.histogram.counts.iter().enumerate() {
            wtr.write_record([
                e.name.clone(),
                edges[k].to_string(),
                edges[k + 1].to_string(),
                c.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn inversion_arithmetic() {
        let ci = ci_from_percentiles(0.89, 0.84, 1.06);
        assert!((ci.lo - 0.72).abs() < 1e-12);
        assert!((ci.hi - 0.94).abs() < 1e-12);
    }

    #[test]
    fn symmetric_values_give_symmetric_interval() {
        let vals: Vec<f64> = (0..201).map(|k| (k as f64 - 100.0) / 100.0).collect();
        let ci = basic_bootstrap_ci(0.0, &vals, 0.9).unwrap();
        assert!((ci.lo + ci.hi).abs() < 1e-12);
        assert!(ci.lo <= ci.hi);
        assert!(basic_bootstrap_ci(0.0, &vals[..99], 0.9).is_err());
    }

    #[test]
    fn standard_normal_percentiles() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..200_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ci = basic_bootstrap_ci(0.0, &vals, 0.9).unwrap();
        assert!((ci.lo + 1.645).abs() < 0.02, "{ci:?}");
        assert!((ci.hi - 1.645).abs() < 0.02, "{ci:?}");
    }

    #[test]
    fn histogram_counts_everything() {
        let vals = [0.1, 0.2, 0.2, 0.9, 0.3];
        let h = Histogram::from_values(&vals, 4);
        assert_eq!(h.total(), 5);
        assert_eq!(*h.counts.last().unwrap(), 1);
        assert_eq!(Histogram::from_values(&[0.5; 7], 3).total(), 7);
    }

    #[test]
    fn vacuum_bootstrap_concentrates() {
        let ml = MlConfig {
            dim: 6,
            iterations: 100,
            bin_width: Some(0.2),
            ..MlConfig::default()
        };
        let b = BootstrapConfig {
            n_sets: 100,
            n_samples_per_set: 2000,
            level: 0.9,
            seed: 5,
            histogram_bins: 20,
        };
        let rho = DensityMatrix::vacuum(6).unwrap();
        let res = bootstrap_state(&rho, &ml, &b).unwrap();
        let e = res.element("rho_00").unwrap();
        assert_eq!(e.histogram.total() as usize + res.failures, 100);
        assert!(e.mean > 0.97);
        let again = bootstrap_state(&rho, &ml, &b).unwrap();
        assert_eq!(again.element("rho_00").unwrap().values, e.values);
    }
}
