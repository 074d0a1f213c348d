//! Config-driven runs: prepare states, capture, sample, tomograph, score,
//! bootstrap, and write everything to one run directory.
//!
//! A run directory holds
//!
//! ```text
//! states/<label>.json     prepared density matrices
//! samples/<label>.csv     synthetic heterodyne outcomes
//! rho/<label>.json        ML estimates with their likelihood traces
//! metrics.json            diagonals, g², fidelity reports
//! ci.json                 bootstrap summaries (when configured)
//! histograms/<label>.csv  bootstrap histograms (when configured)
//! manifest.json           config hash, seeds, fixture checksums, artifact hashes
//! ```
//!
//! Nothing is written until the config validates and every state is built.
//! The directory is assembled under a temporary name and renamed at the end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bootstrap::{
    bootstrap_fidelity, bootstrap_state, write_histograms_csv, BootstrapConfig, FidelityBootstrap, Histogram,
    StateBootstrap, DEFAULT_BIN_WIDTH,
};
use crate::capture::{CaptureModel, CaptureModelParams};
use crate::error::{Error, Result};
use crate::fixtures::{fixtures, EmbedPolicy, Fixtures};
use crate::fock::{thermal_state, CMatrix, DensityMatrix, DEFAULT_DIM};
use crate::metrics::{average_fidelity, g2_zero, reconstruct_process, reconstruct_process_matrices, FidelityReport};
use crate::povm::PovmKind;
use crate::quadrature::write_samples_csv;
use crate::rng::derive_seed;
use crate::sampling::QSampler;
use crate::tomography::{run_ml_on, MlConfig, MlResult, PovmSet};

pub const PHOTON_CAPTURE_CONFIG: &str = include_str!("../configs/photon-capture.json");
pub const FIDELITY_CONFIG: &str = include_str!("../configs/fidelity.json");

const SAMPLING_STAGE: u64 = 1;
const BOOTSTRAP_STAGE: u64 = 2;

/// Bundled configs by name.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    match name {
        "photon-capture" => Some(PHOTON_CAPTURE_CONFIG),
        "fidelity" => Some(FIDELITY_CONFIG),
        _ => None,
    }
}

pub fn bundled_names() -> [&'static str; 2] {
    ["photon-capture", "fidelity"]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub state_source: StateSourceConfig,
    pub capture: CaptureConfig,
    pub sampling: SamplingConfig,
    pub tomography: TomographyConfig,
    pub metrics: MetricsConfig,
    pub bootstrap: Option<BootstrapStageConfig>,
}

/// State specs are fixture keys, `fock:<n>`, `thermal:<nbar>` or
/// `file:<path>` (a density-matrix JSON, relative to the config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSourceConfig {
    pub states: Vec<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub policy: EmbedPolicy,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaptureConfig {
    /// Only the source states are analysed.
    #[default]
    None,
    Model {
        #[serde(default = "default_r1")]
        r1: f64,
        #[serde(default = "default_r2")]
        r2: f64,
        #[serde(default = "default_n_th")]
        n_th_target: f64,
    },
    /// Output states given directly, one per source state.
    Declared { states: Vec<String> },
}

fn default_r1() -> f64 {
    CaptureModelParams::default().r1
}
fn default_r2() -> f64 {
    CaptureModelParams::default().r2
}
fn default_n_th() -> f64 {
    CaptureModelParams::default().n_th_target
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    /// Added detector noise, in quanta.
    #[serde(default)]
    pub n_th: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographyConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_povm")]
    pub povm: PovmKind,
    #[serde(default = "default_dilution")]
    pub dilution: f64,
    #[serde(default)]
    pub bin_width: Option<f64>,
}

fn default_iterations() -> usize {
    500
}
fn default_povm() -> PovmKind {
    PovmKind::Coherent
}
fn default_dilution() -> f64 {
    1.0
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            povm: default_povm(),
            dilution: default_dilution(),
            bin_width: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "yes")]
    pub g2: bool,
    #[serde(default)]
    pub fidelity: bool,
}

fn yes() -> bool {
    true
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            g2: true,
            fidelity: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapTarget {
    States,
    Fidelity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStageConfig {
    pub target: BootstrapTarget,
    pub n_sets: usize,
    pub n_samples_per_set: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Binning pitch for replicate ML.
    #[serde(default = "default_boot_bin")]
    pub bin_width: Option<f64>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_level() -> f64 {
    0.9
}
fn default_boot_bin() -> Option<f64> {
    Some(DEFAULT_BIN_WIDTH)
}
fn default_bins() -> usize {
    40
}

struct Keys {
    required: &'static [&'static str],
    optional: &'static [&'static str],
}

const TOP: Keys = Keys {
    required: &["name", "seed", "state_source", "sampling", "tomography"],
    optional: &["capture", "metrics", "bootstrap"],
};
const STATE_SOURCE: Keys = Keys {
    required: &["states"],
    optional: &["dim", "policy"],
};
const CAPTURE_MODEL: Keys = Keys {
    required: &["kind"],
    optional: &["r1", "r2", "n_th_target"],
};
const CAPTURE_DECLARED: Keys = Keys {
    required: &["kind", "states"],
    optional: &[],
};
const CAPTURE_NONE: Keys = Keys {
    required: &["kind"],
    optional: &[],
};
const SAMPLING: Keys = Keys {
    required: &["n_samples"],
    optional: &["n_th"],
};
const TOMOGRAPHY: Keys = Keys {
    required: &[],
    optional: &["iterations", "povm", "dilution", "bin_width"],
};
const METRICS: Keys = Keys {
    required: &[],
    optional: &["g2", "fidelity"],
};
const BOOTSTRAP: Keys = Keys {
    required: &["target", "n_sets", "n_samples_per_set"],
    optional: &["level", "bin_width", "histogram_bins"],
};

/// Flags unknown and missing keys of an object at `path`.
fn check_keys(path: &str, v: &Value, keys: &Keys, errs: &mut Vec<String>) -> bool {
    let Some(obj) = v.as_object() else {
        errs.push(format!("{path}: expected an object"));
        return false;
    };
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    for k in obj.keys() {
        if !keys.required.contains(&k.as_str()) && !keys.optional.contains(&k.as_str()) {
            errs.push(format!("unknown key {}", join(k)));
        }
    }
    for k in keys.required {
        if !obj.contains_key(*k) {
            errs.push(format!("missing key {}", join(k)));
        }
    }
    true
}

fn typed<T: serde::de::DeserializeOwned>(path: &str, v: Option<&Value>, errs: &mut Vec<String>) -> Option<T> {
    let v = v.cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| errs.push(format!("{path}: {e}"))).ok()
}

enum StateSpec {
    Fixture(String),
    Fock(usize),
    Thermal(f64),
    File(PathBuf),
}

fn parse_state_spec(spec: &str, fx: &Fixtures) -> std::result::Result<StateSpec, String> {
    if let Some(n) = spec.strip_prefix("fock:") {
        return n.parse().map(StateSpec::Fock).map_err(|_| format!("bad Fock index in '{spec}'"));
    }
    if let Some(n) = spec.strip_prefix("thermal:") {
        return match n.parse::<f64>() {
            Ok(x) if x >= 0.0 && x.is_finite() => Ok(StateSpec::Thermal(x)),
            _ => Err(format!("bad occupancy in '{spec}'")),
        };
    }
    if let Some(p) = spec.strip_prefix("file:") {
        return Ok(StateSpec::File(PathBuf::from(p)));
    }
    if fx.keys().iter().any(|k| k == spec) && !spec.contains("params/") {
        return Ok(StateSpec::Fixture(spec.to_string()));
    }
    Err(format!("unknown state '{spec}'"))
}

impl ExperimentConfig {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(&v)
    }

    /// Validates the document and lists every offending key.
    pub fn from_value(v: &Value) -> Result<Self> {
        let mut errs = Vec::new();
        if !check_keys("", v, &TOP, &mut errs) {
            return Err(Error::Config(errs));
        }
        let section = |k: &str| v.get(k);
        for (name, keys) in [
            ("state_source", &STATE_SOURCE),
            ("sampling", &SAMPLING),
            ("tomography", &TOMOGRAPHY),
            ("metrics", &METRICS),
            ("bootstrap", &BOOTSTRAP),
        ] {
            if let Some(s) = section(name) {
                if !(name == "bootstrap" && s.is_null()) {
                    check_keys(name, s, keys, &mut errs);
                }
            }
        }
        if let Some(c) = section("capture") {
            let keys = match c.get("kind").and_then(Value::as_str) {
                Some("model") => &CAPTURE_MODEL,
                Some("declared") => &CAPTURE_DECLARED,
                Some("none") | None => &CAPTURE_NONE,
                Some(other) => {
                    errs.push(format!("capture.kind: unknown kind '{other}'"));
                    &CAPTURE_NONE
                }
            };
            check_keys("capture", c, keys, &mut errs);
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }

        let name: Option<String> = typed("name", section("name"), &mut errs);
        let seed: Option<u64> = typed("seed", section("seed"), &mut errs);
        let state_source: Option<StateSourceConfig> = typed("state_source", section("state_source"), &mut errs);
        let capture: Option<CaptureConfig> = match section("capture") {
            Some(c) => typed("capture", Some(c), &mut errs),
            None => Some(CaptureConfig::None),
        };
        let sampling: Option<SamplingConfig> = typed("sampling", section("sampling"), &mut errs);
        let tomography: Option<TomographyConfig> = typed("tomography", section("tomography"), &mut errs);
        let metrics: Option<MetricsConfig> = match section("metrics") {
            Some(m) => typed("metrics", Some(m), &mut errs),
            None => Some(MetricsConfig::default()),
        };
        let bootstrap: Option<Option<BootstrapStageConfig>> = match section("bootstrap") {
            Some(b) => typed("bootstrap", Some(b), &mut errs),
            None => Some(None),
        };
        match (name, seed, state_source, capture, sampling, tomography, metrics, bootstrap) {
            (Some(name), Some(seed), Some(state_source), Some(capture), Some(sampling), Some(tomography), Some(metrics), Some(bootstrap)) => {
                let cfg = ExperimentConfig {
                    name,
                    seed,
                    state_source,
                    capture,
                    sampling,
                    tomography,
                    metrics,
                    bootstrap,
                };
                cfg.check()?;
                Ok(cfg)
            }
            _ => Err(Error::Config(errs)),
        }
    }

    /// Value checks that serde cannot express.
    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        let valid_name = !self.name.is_empty()
            && !self.name.starts_with('.')
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !valid_name {
            errs.push(format!("name: '{}' is not a plain directory name", self.name));
        }
        let fx = match fixtures() {
            Ok(f) => f,
            Err(e) => return Err(Error::Config(vec![format!("fixtures: {e}")])),
        };
        let src = &self.state_source;
        if src.states.is_empty() {
            errs.push("state_source.states: no states".into());
        }
        if src.dim < 3 {
            errs.push(format!("state_source.dim: {} is below 3", src.dim));
        }
        for (i, s) in src.states.iter().enumerate() {
            if let Err(e) = parse_state_spec(s, &fx) {
                errs.push(format!("state_source.states[{i}]: {e}"));
            }
        }
        match &self.capture {
            CaptureConfig::None => {}
            CaptureConfig::Model { r1, r2, n_th_target } => {
                let p = CaptureModelParams {
                    r1: *r1,
                    r2: *r2,
                    n_th_target: *n_th_target,
                    dim: src.dim,
                };
                if let Err(e) = p.validate() {
                    errs.push(format!("capture: {e}"));
                }
            }
            CaptureConfig::Declared { states } => {
                if states.len() != src.states.len() {
                    errs.push(format!(
                        "capture.states: {} outputs for {} inputs",
                        states.len(),
                        src.states.len()
                    ));
                }
                for (i, s) in states.iter().enumerate() {
                    if let Err(e) = parse_state_spec(s, &fx) {
                        errs.push(format!("capture.states[{i}]: {e}"));
                    }
                }
            }
        }
        if self.sampling.n_samples == 0 {
            errs.push("sampling.n_samples: must be at least 1".into());
        }
        if !(self.sampling.n_th >= 0.0) || !self.sampling.n_th.is_finite() {
            errs.push(format!("sampling.n_th: {} must be >= 0", self.sampling.n_th));
        }
        if let Err(e) = self.ml_config().validate() {
            errs.push(format!("tomography: {e}"));
        }
        if self.metrics.fidelity {
            let pairs = match &self.capture {
                CaptureConfig::None => 0,
                _ => src.states.len(),
            };
            if pairs != 4 {
                errs.push(format!(
                    "metrics.fidelity: needs 4 input/output pairs, config gives {pairs}"
                ));
            }
        }
        if let Some(b) = &self.bootstrap {
            if let Err(e) = self.bootstrap_config(b).validate() {
                errs.push(format!("bootstrap: {e}"));
            }
            if let Some(h) = b.bin_width {
                if !(h > 0.0) || !h.is_finite() {
                    errs.push(format!("bootstrap.bin_width: {h} must be positive"));
                }
            }
            if b.target == BootstrapTarget::Fidelity && !self.metrics.fidelity {
                errs.push("bootstrap.target: fidelity requires metrics.fidelity".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn ml_config(&self) -> MlConfig {
        MlConfig {
            dim: self.state_source.dim,
            iterations: self.tomography.iterations,
            povm: self.tomography.povm,
            dilution: self.tomography.dilution,
            bin_width: self.tomography.bin_width,
        }
    }

    fn bootstrap_config(&self, b: &BootstrapStageConfig) -> BootstrapConfig {
        BootstrapConfig {
            n_sets: b.n_sets,
            n_samples_per_set: b.n_samples_per_set,
            level: b.level,
            seed: self.stage_seed(BOOTSTRAP_STAGE),
            histogram_bins: b.histogram_bins,
        }
    }

    fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }
}

pub fn load_config(path: &Path) -> Result<(ExperimentConfig, Vec<u8>)> {
    let bytes = fs::read(path)?;
    Ok((ExperimentConfig::from_slice(&bytes)?, bytes))
}

struct PreparedState {
    label: String,
    spec: String,
    rho: DensityMatrix,
    /// The raw table block, for fixture states that have one.
    block: Option<CMatrix>,
}

fn build_state(spec: &str, dim: usize, policy: EmbedPolicy, fx: &Fixtures, base: Option<&Path>) -> Result<(DensityMatrix, Option<CMatrix>)> {
    let parsed = parse_state_spec(spec, fx).map_err(|e| Error::Config(vec![e]))?;
    Ok(match parsed {
        StateSpec::Fixture(key) => {
            let block = fx.density_block(&key).ok();
            (fx.state(&key, dim, policy)?, block)
        }
        StateSpec::Fock(n) => (DensityMatrix::fock(n, dim)?, None),
        StateSpec::Thermal(n) => (thermal_state(n, dim)?, None),
        StateSpec::File(p) => {
            let path = match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            };
            (read_state_file(&path)?.resized(dim)?, None)
        }
    })
}

/// Reads a density-matrix JSON, or the `rho` of an ML result JSON.
pub fn read_state_file(path: &Path) -> Result<DensityMatrix> {
    let v: Value = serde_json::from_slice(&fs::read(path)?)?;
    let doc = match v.get("rho") {
        Some(inner) => inner.clone(),
        None => v,
    };
    DensityMatrix::from_doc(&serde_json::from_value(doc)?)
}

/// Builds a state from a spec (fixture key, `fock:<n>`, `thermal:<nbar>`,
/// `file:<path>`, or a bare path to a density-matrix JSON).
pub fn resolve_state(spec: &str, dim: usize, policy: EmbedPolicy) -> Result<DensityMatrix> {
    let fx = fixtures()?;
    let spec = if parse_state_spec(spec, &fx).is_err() && Path::new(spec).is_file() {
        format!("file:{spec}")
    } else {
        spec.to_string()
    };
    Ok(build_state(&spec, dim, policy, &fx, None)?.0)
}

fn prepare_states(cfg: &ExperimentConfig, fx: &Fixtures, base: Option<&Path>) -> Result<(Vec<PreparedState>, Vec<PreparedState>)> {
    let src = &cfg.state_source;
    let inputs = src
        .states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let (rho, block) = build_state(s, src.dim, src.policy, fx, base)?;
            Ok(PreparedState {
                label: format!("input_{}", k + 1),
                spec: s.clone(),
                rho,
                block,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = match &cfg.capture {
        CaptureConfig::None => Vec::new(),
        CaptureConfig::Model { r1, r2, n_th_target } => {
            let model = CaptureModel::new(CaptureModelParams {
                r1: *r1,
                r2: *r2,
                n_th_target: *n_th_target,
                dim: src.dim,
            })?;
            inputs
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    Ok(PreparedState {
                        label: format!("output_{}", k + 1),
                        spec: format!("model({})", p.spec),
                        rho: model.apply(&p.rho)?,
                        block: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        CaptureConfig::Declared { states } => states
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let (rho, block) = build_state(s, src.dim, src.policy, fx, base)?;
                Ok(PreparedState {
                    label: format!("output_{}", k + 1),
                    spec: s.clone(),
                    rho,
                    block,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok((inputs, outputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMetrics {
    pub label: String,
    pub source: String,
    pub n_samples: usize,
    pub acceptance_rate: f64,
    /// `ρ₀₀, ρ₁₁, ρ₂₂` of the prepared state.
    pub prepared_diagonal: [f64; 3],
    pub estimate_diagonal: [f64; 3],
    pub prepared_mean_occupation: f64,
    pub estimate_mean_occupation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prepared_g2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate_g2: Option<f64>,
    pub final_log_likelihood: f64,
    pub converged_delta: f64,
    pub ml_flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMetrics {
    /// The map built from the raw 3×3 table blocks, when every state has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<FidelityReport>,
    pub prepared: FidelityReport,
    pub estimate: FidelityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub name: String,
    pub states: Vec<StateMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityMetrics>,
}

impl MetricsDoc {
    pub fn state(&self, label: &str) -> Option<&StateMetrics> {
        self.states.iter().find(|s| s.label == label)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CiDoc {
    pub n_sets: usize,
    pub n_samples_per_set: usize,
    pub level: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub states: BTreeMap<String, StateBootstrap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelityBootstrap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub fixtures: BTreeMap<String, String>,
    /// Relative path to SHA-256 for every other file in the run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: MetricsDoc,
    pub ci: Option<CiDoc>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn diag3(rho: &DensityMatrix) -> [f64; 3] {
    [rho.element(0, 0).re, rho.element(1, 1).re, rho.element(2, 2).re]
}

/// Collects files written under a staging directory.
struct RunWriter {
    staging: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunWriter {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.staging.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Registers a file written by another routine.
    fn record(&mut self, rel: &str) -> Result<()> {
        let bytes = fs::read(self.staging.join(rel))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }
}

/// Runs the config at `config_path` into `out_root/<name>`.
pub fn run_experiment(config_path: &Path, out_root: &Path) -> Result<RunReport> {
    let (cfg, bytes) = load_config(config_path)?;
    run_config(&cfg, &bytes, out_root, config_path.parent())
}

/// Runs a bundled config, optionally with the JSON `overrides` merged in.
pub fn run_bundled(name: &str, overrides: Option<&Value>, out_root: &Path) -> Result<RunReport> {
    let text = bundled_config(name).ok_or_else(|| Error::Config(vec![format!("no bundled config '{name}'")]))?;
    let mut v: Value = serde_json::from_str(text)?;
    if let Some(o) = overrides {
        merge(&mut v, o);
    }
    let bytes = serde_json::to_vec_pretty(&v)?;
    let cfg = ExperimentConfig::from_value(&v)?;
    run_config(&cfg, &bytes, out_root, None)
}

/// Recursive object merge; non-object values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Runs a parsed config. `config_bytes` is hashed into the manifest; `base`
/// resolves relative `file:` states.
pub fn run_config(cfg: &ExperimentConfig, config_bytes: &[u8], out_root: &Path, base: Option<&Path>) -> Result<RunReport> {
    cfg.check()?;
    let fx = fixtures()?;
    let (inputs, outputs) = prepare_states(cfg, &fx, base)?;

    let dir = out_root.join(&cfg.name);
    if dir.exists() && !dir.join("manifest.json").is_file() {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not a run directory",
            dir.display()
        )));
    }
    let staging = out_root.join(format!(".{}.partial", cfg.name));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut w = RunWriter {
        staging: staging.clone(),
        artifacts: BTreeMap::new(),
    };
    let result = execute(cfg, &inputs, &outputs, &mut w);
    let (metrics, ci) = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };

    let manifest = Manifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(config_bytes),
        seed: cfg.seed,
        stage_seeds: BTreeMap::from([
            ("sampling".to_string(), cfg.stage_seed(SAMPLING_STAGE)),
            ("bootstrap".to_string(), cfg.stage_seed(BOOTSTRAP_STAGE)),
        ]),
        fixtures: fx.checksums().clone(),
        artifacts: w.artifacts.clone(),
    };
    w.write("config.json", config_bytes)?;
    let mut manifest = manifest;
    manifest.artifacts = w.artifacts.clone();
    w.write_json("manifest.json", &manifest)?;

    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&staging, &dir)?;
    Ok(RunReport {
        dir,
        manifest,
        metrics,
        ci,
    })
}

fn execute(
    cfg: &ExperimentConfig,
    inputs: &[PreparedState],
    outputs: &[PreparedState],
    w: &mut RunWriter,
) -> Result<(MetricsDoc, Option<CiDoc>)> {
    let ml = cfg.ml_config();
    let sampling_seed = cfg.stage_seed(SAMPLING_STAGE);
    let all: Vec<&PreparedState> = inputs.iter().chain(outputs).collect();

    let mut estimates = Vec::with_capacity(all.len());
    let mut states = Vec::with_capacity(all.len());
    for (i, p) in all.iter().enumerate() {
        log::info!("{}: sampling {} outcomes of {}", p.label, cfg.sampling.n_samples, p.spec);
        w.write_json(&format!("states/{}.json", p.label), &p.rho.to_doc())?;
        let set = QSampler::new(&p.rho, None)?.sample_with_noise(
            cfg.sampling.n_samples,
            cfg.sampling.n_th,
            derive_seed(sampling_seed, i as u64),
        )?;
        let rel = format!("samples/{}.csv", p.label);
        fs::create_dir_all(w.staging.join("samples"))?;
        write_samples_csv(&w.staging.join(&rel), &set.samples)?;
        w.record(&rel)?;

        let povms = PovmSet::from_samples(&set.samples, ml.povm, ml.dim, ml.bin_width)?;
        let fit: MlResult = run_ml_on(&povms, &ml)?;
        w.write_json(&format!("rho/{}.json", p.label), &fit.to_doc())?;

        let g2 = |r: &DensityMatrix| if cfg.metrics.g2 { g2_zero(r).ok() } else { None };
        states.push(StateMetrics {
            label: p.label.clone(),
            source: p.spec.clone(),
            n_samples: set.samples.len(),
            acceptance_rate: set.acceptance_rate(),
            prepared_diagonal: diag3(&p.rho),
            estimate_diagonal: diag3(&fit.rho_est),
            prepared_mean_occupation: p.rho.mean_occupation(),
            estimate_mean_occupation: fit.rho_est.mean_occupation(),
            prepared_g2: g2(&p.rho),
            estimate_g2: g2(&fit.rho_est),
            final_log_likelihood: fit.final_log_likelihood(),
            converged_delta: fit.converged_delta,
            ml_flags: fit.flags.clone(),
        });
        estimates.push(fit.rho_est);
    }
    let (est_in, est_out) = estimates.split_at(inputs.len());

    let fidelity = if cfg.metrics.fidelity {
        let prep_in: Vec<DensityMatrix> = inputs.iter().map(|p| p.rho.clone()).collect();
        let prep_out: Vec<DensityMatrix> = outputs.iter().map(|p| p.rho.clone()).collect();
        let blocks = |ps: &[PreparedState]| ps.iter().map(|p| p.block.clone()).collect::<Option<Vec<_>>>();
        let table = match (blocks(inputs), blocks(outputs)) {
            (Some(bi), Some(bo)) => Some(average_fidelity(&reconstruct_process_matrices(&bi, &bo, 2)?)),
            _ => None,
        };
        Some(FidelityMetrics {
            table,
            prepared: average_fidelity(&reconstruct_process(&prep_in, &prep_out, 2)?),
            estimate: average_fidelity(&reconstruct_process(est_in, est_out, 2)?),
        })
    } else {
        None
    };
    let metrics = MetricsDoc {
        name: cfg.name.clone(),
        states,
        fidelity,
    };
    w.write_json("metrics.json", &metrics)?;

    let ci = match &cfg.bootstrap {
        None => None,
        Some(b) => {
            let bc = cfg.bootstrap_config(b);
            let boot_ml = MlConfig {
                bin_width: b.bin_width,
                ..ml
            };
            let mut doc = CiDoc {
                n_sets: bc.n_sets,
                n_samples_per_set: bc.n_samples_per_set,
                level: bc.level,
                seed: bc.seed,
                states: BTreeMap::new(),
                fidelity: None,
            };
            match b.target {
                BootstrapTarget::States => {
                    for (i, (p, est)) in all.iter().zip(&estimates).enumerate() {
                        log::info!("{}: bootstrapping {} sets", p.label, bc.n_sets);
                        let per_state = BootstrapConfig {
                            seed: derive_seed(bc.seed, i as u64),
                            ..bc
                        };
                        let sb = bootstrap_state(est, &boot_ml, &per_state)?;
                        let mut buf = Vec::new();
                        write_histograms_csv(&mut buf, &sb.elements)?;
                        w.write(&format!("histograms/{}.csv", p.label), &buf)?;
                        doc.states.insert(p.label.clone(), sb);
                    }
                }
                BootstrapTarget::Fidelity => {
                    log::info!("fidelity: bootstrapping {} sets", bc.n_sets);
                    let fb = bootstrap_fidelity(est_in, est_out, &boot_ml, &bc)?;
                    let mut buf = Vec::new();
                    write_single_histogram(&mut buf, "F_avg", &fb.histogram)?;
                    w.write("histograms/fidelity.csv", &buf)?;
                    doc.fidelity = Some(fb);
                }
            }
            w.write_json("ci.json", &doc)?;
            Some(doc)
        }
    };
    Ok((metrics, ci))
}

fn write_single_histogram(buf: &mut Vec<u8>, name: &str, h: &Histogram) -> Result<()> {
    let summary = crate::bootstrap::ElementSummary {
        name: name.to_string(),
        estimate: f64::NAN,
        ci: None,
        histogram: h.clone(),
        mean: f64::NAN,
        values: Vec::new(),
    };
    write_histograms_csv(buf, std::slice::from_ref(&summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn small() -> Value {
        json!({
            "name": "small",
            "seed": 7,
            "state_source": {"states": ["fock:1"], "dim": 6},
            "sampling": {"n_samples": 2000, "n_th": 0.0},
            "tomography": {"iterations": 50, "bin_width": 0.2},
        })
    }

    #[test]
    fn bundled_configs_parse() {
        for name in bundled_names() {
            let cfg = ExperimentConfig::from_slice(bundled_config(name).unwrap().as_bytes()).unwrap();
            assert_eq!(cfg.name, name);
        }
    }

    #[test]
    fn schema_errors_list_keys() {
        let mut v = small();
        v["sampling"]["shots"] = json!(3);
        v["tomography"]["povm_kind"] = json!("coherent");
        v.as_object_mut().unwrap().remove("seed");
        let Err(Error::Config(errs)) = ExperimentConfig::from_value(&v) else {
            panic!("expected a config error");
        };
        let all = errs.join("\n");
        assert!(all.contains("unknown key sampling.shots"), "{all}");
        assert!(all.contains("unknown key tomography.povm_kind"), "{all}");
        assert!(all.contains("missing key seed"), "{all}");
    }

    #[test]
    fn zero_samples_is_rejected_before_output() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = small();
        v["sampling"]["n_samples"] = json!(0);
        let path = dir.path().join("empty.json");
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        let out = dir.path().join("runs");
        let err = run_experiment(&path, &out).unwrap_err();
        assert!(matches!(&err, Error::Config(e) if e.iter().any(|m| m.contains("n_samples"))), "{err}");
        assert!(!out.exists());
    }

    #[test]
    fn unknown_fixture_and_fidelity_pairs() {
        let mut v = small();
        v["state_source"]["states"] = json!(["densityMatrices/input/9"]);
        v["metrics"] = json!({"fidelity": true});
        let Err(Error::Config(errs)) = ExperimentConfig::from_value(&v) else {
            panic!("expected a config error");
        };
        assert_eq!(errs.len(), 2, "{errs:?}");
    }

    #[test]
    fn run_writes_manifest_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let v = small();
        let bytes = serde_json::to_vec(&v).unwrap();
        let cfg = ExperimentConfig::from_value(&v).unwrap();
        let a = run_config(&cfg, &bytes, &dir.path().join("a"), None).unwrap();
        let b = run_config(&cfg, &bytes, &dir.path().join("b"), None).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let ma = fs::read(a.dir.join("metrics.json")).unwrap();
        let mb = fs::read(b.dir.join("metrics.json")).unwrap();
        assert_eq!(ma, mb);
        for rel in a.manifest.artifacts.keys() {
            assert!(a.dir.join(rel).is_file(), "{rel}");
        }
        assert!(a.manifest.artifacts.contains_key("rho/input_1.json"));
        assert!(a.manifest.artifacts.contains_key("samples/input_1.csv"));
        assert_eq!(a.manifest.config_sha256, sha256_hex(&bytes));
        let s = a.metrics.state("input_1").unwrap();
        assert!(s.estimate_diagonal[1] > 0.9, "{:?}", s.estimate_diagonal);
        assert_eq!(s.prepared_g2, Some(0.0));
    }

    #[test]
    fn merge_overrides_nested_keys() {
        let mut v = json!({"a": {"b": 1, "c": 2}});
        merge(&mut v, &json!({"a": {"b": 5}}));
        assert_eq!(v, json!({"a": {"b": 5, "c": 2}}));
    }
}
