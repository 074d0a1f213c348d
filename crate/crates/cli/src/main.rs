use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde_json::{json, Value};

use phonon_core::bootstrap::{
    bootstrap_fidelity, bootstrap_state, with_default_binning, write_histograms_csv, BootstrapConfig,
};
use phonon_core::capture::{model_fidelity_report, CaptureModel, CaptureModelParams};
use phonon_core::dynamics::{decaying_pulse, integrate_full_eom, PumpSchedule, DEFAULT_EDGE_SIGMA};
use phonon_core::fixtures::{fixtures, EmbedPolicy};
use phonon_core::fock::DensityMatrix;
use phonon_core::metrics::{
    average_fidelity, g2_zero, haar_average_fidelity_oracle, reconstruct_process, reconstruct_process_matrices,
};
use phonon_core::pipeline::{self, resolve_state, ExperimentConfig};
use phonon_core::povm::PovmKind;
use phonon_core::quadrature::read_samples_csv;
use phonon_core::storage::{fit_storage_time, read_storage_csv_path, Weighting};
use phonon_core::tomography::{run_ml, MlConfig};

#[derive(Parser)]
#[command(name = "phonon", version, about = "Photon-to-phonon conversion simulation and analysis")]
struct Cli {
    /// Master seed (overrides a config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (a path or a bundled name).
    Run(RunArgs),
    /// State tomography.
    #[command(subcommand)]
    Tomo(TomoCmd),
    /// Figures of merit.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Parametric bootstrap.
    #[command(subcommand)]
    Boot(BootCmd),
    /// Capture-process model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Storage-time analysis.
    #[command(subcommand)]
    Storage(StorageCmd),
    /// Classical equations of motion.
    #[command(subcommand)]
    Dynamics(DynamicsCmd),
}

#[derive(Args)]
struct RunArgs {
    /// Config path, or `photon-capture` / `fidelity`.
    config: String,
    /// JSON merged into the config, e.g. '{"sampling":{"n_samples":2048}}'.
    #[arg(long = "set")]
    overrides: Option<String>,
}

#[derive(Args)]
struct MlArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long = "iters", alias = "iterations", default_value_t = 500)]
    iterations: usize,
    /// `coherent` or `thermal:<n_th>`.
    #[arg(long, default_value = "coherent")]
    povm: String,
    #[arg(long, default_value_t = 1.0)]
    dilution: f64,
    /// Bin outcomes on a grid of this pitch.
    #[arg(long)]
    bin_width: Option<f64>,
}

impl MlArgs {
    fn config(&self) -> Result<MlConfig> {
        let cfg = MlConfig {
            dim: self.dim,
            iterations: self.iterations,
            povm: PovmKind::parse(&self.povm)?,
            dilution: self.dilution,
            bin_width: self.bin_width,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum TomoCmd {
    /// ML reconstruction from a sample CSV (columns x,y).
    Fit {
        #[arg(long)]
        samples: PathBuf,
        #[command(flatten)]
        ml: MlArgs,
        /// Defaults to `<out-dir>/rho.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PairArgs {
    /// JSON `{"inputs": [...], "outputs": [...]}` of state specs.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Input states: fixture keys, `fock:<n>`, `thermal:<n>` or JSON paths.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    outputs: Vec<String>,
    /// Fock dimension the states are embedded in.
    #[arg(long, default_value_t = 16)]
    state_dim: usize,
}

#[derive(serde::Deserialize)]
struct PairsFile {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl PairArgs {
    /// Explicit lists, then `--pairs`, then the tabulated pairs. Relative
    /// paths in a pairs file resolve against the file.
    fn defaulted(&self) -> Result<(Vec<String>, Vec<String>)> {
        let table = |side: &str| (1..=4).map(|k| format!("densityMatrices/{side}/{k}")).collect::<Vec<_>>();
        let (mut ins, mut outs) = (table("input"), table("output"));
        if let Some(p) = &self.pairs {
            let f: PairsFile = serde_json::from_slice(&fs::read(p)?).with_context(|| format!("reading {}", p.display()))?;
            let base = p.parent().unwrap_or(Path::new("."));
            let fix = |v: Vec<String>| {
                v.into_iter()
                    .map(|s| {
                        let cand = base.join(&s);
                        if cand.is_file() { cand.to_string_lossy().into_owned() } else { s }
                    })
                    .collect::<Vec<_>>()
            };
            ins = fix(f.inputs);
            outs = fix(f.outputs);
        }
        if !self.inputs.is_empty() {
            ins = self.inputs.clone();
        }
        if !self.outputs.is_empty() {
            outs = self.outputs.clone();
        }
        Ok((ins, outs))
    }

    fn states(&self) -> Result<(Vec<DensityMatrix>, Vec<DensityMatrix>)> {
        let (ins, outs) = self.defaulted()?;
        let load = |v: &[String]| {
            v.iter()
                .map(|s| resolve_state(s, self.state_dim, EmbedPolicy::Physical).with_context(|| format!("loading {s}")))
                .collect::<Result<Vec<_>>>()
        };
        Ok((load(&ins)?, load(&outs)?))
    }
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Average fidelity of the qubit map defined by four state pairs
    /// (default: the tabulated pairs).
    Fidelity {
        #[command(flatten)]
        pairs: PairArgs,
        /// Truncation dimension of the map (the qubit block).
        #[arg(long, default_value_t = 2)]
        dim: usize,
        /// Also estimate by Haar Monte Carlo with this many states.
        #[arg(long)]
        haar: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// g²(0) of a state.
    G2 {
        /// State JSON, fixture key, `fock:<n>` or `thermal:<n>`.
        #[arg(long)]
        rho: String,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
}

#[derive(Args)]
struct BootArgs {
    #[arg(long = "sets", default_value_t = 1000)]
    n_sets: usize,
    /// Outcomes per synthetic set.
    #[arg(long = "samples")]
    n_samples: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    level: f64,
    #[arg(long, default_value_t = 40)]
    histogram_bins: usize,
}

#[derive(Subcommand)]
enum BootCmd {
    /// Element-wise CIs for one state.
    State {
        #[arg(long)]
        rho: String,
        #[command(flatten)]
        ml: MlArgs,
        #[command(flatten)]
        boot: BootArgs,
    },
    /// CI on the corrected average fidelity.
    Fidelity {
        #[command(flatten)]
        pairs: PairArgs,
        #[arg(long = "iters", default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value = "thermal:0.1")]
        povm: String,
        #[arg(long)]
        bin_width: Option<f64>,
        #[command(flatten)]
        boot: BootArgs,
    },
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Push a state through the two-beamsplitter capture model.
    Capture {
        #[arg(long)]
        rho: String,
        #[arg(long, default_value_t = 0.14)]
        r1: f64,
        #[arg(long, default_value_t = 0.95)]
        r2: f64,
        #[arg(long = "nth", default_value_t = 0.1)]
        n_th: f64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Defaults to `<out-dir>/pred.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StorageCmd {
    /// Fit τ_m to a `tau_s_us,P0,P1,P2,sigma0,sigma1,sigma2` CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "inverse-variance")]
        weighting: WeightingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WeightingArg {
    InverseVariance,
    Uniform,
}

#[derive(Subcommand)]
enum DynamicsCmd {
    /// Capture, store and amplify a decaying pulse with the full model.
    Simulate {
        /// Signal decay rate γ/2π.
        #[arg(long, default_value_t = 60e3)]
        gamma_hz: f64,
        #[arg(long, default_value_t = 1e6)]
        gamma_r0_hz: f64,
        #[arg(long, default_value_t = 30.0)]
        tau_r_us: f64,
        #[arg(long, default_value_t = 0.0)]
        tau_s_us: f64,
        /// Blue rate Γ_b/2π (0 disables amplification).
        #[arg(long, default_value_t = 0.0)]
        gamma_b_hz: f64,
        #[arg(long, default_value_t = 0.0)]
        tau_b_us: f64,
        #[arg(long, default_value_t = 0.0)]
        psi_b: f64,
        #[arg(long, default_value_t = DEFAULT_EDGE_SIGMA * 1e9)]
        edge_sigma_ns: f64,
        /// Step; defaults to the largest stable step.
        #[arg(long)]
        dt_ns: Option<f64>,
        /// Keep every n-th point in the trace CSV.
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Run(a) => cmd_run(a, cli.seed, &cli.out_dir),
        Command::Tomo(TomoCmd::Fit { samples, ml, out }) => {
            let samples = read_samples_csv(samples)?;
            let res = run_ml(&samples, &ml.config()?)?;
            let path = write_json_to(out.clone().unwrap_or_else(|| cli.out_dir.join("rho.json")), &res.to_doc())?;
            print_json(&json!({
                "rho": path,
                "n_samples": samples.len(),
                "diagonal": diagonal(&res.rho_est),
                "final_log_likelihood": res.final_log_likelihood(),
                "converged_delta": res.converged_delta,
                "flags": res.flags,
            }))
        }
        Command::Metrics(MetricsCmd::G2 { rho, dim }) => {
            let state = resolve_state(rho, *dim, EmbedPolicy::Physical)?;
            print_json(&json!({ "state": rho, "g2": g2_zero(&state)?, "mean_occupation": state.mean_occupation() }))
        }
        Command::Metrics(MetricsCmd::Fidelity { pairs, dim, haar, out }) => {
            cmd_fidelity(pairs, *dim, *haar, seed, out.as_deref())
        }
        Command::Boot(BootCmd::State { rho, ml, boot }) => {
            let ml = with_default_binning(&ml.config()?);
            let rho = resolve_state(rho, ml.dim, EmbedPolicy::Physical)?;
            let b = boot_config(boot, 102_400, seed)?;
            let sb = bootstrap_state(&rho, &ml, &b)?;
            fs::create_dir_all(&cli.out_dir)?;
            write_histograms_csv(fs::File::create(cli.out_dir.join("histograms.csv"))?, &sb.elements)?;
            write_json(&cli.out_dir, "ci.json", &sb)?;
            print_json(&serde_json::to_value(&sb)?)
        }
        Command::Boot(BootCmd::Fidelity {
            pairs,
            iterations,
            povm,
            bin_width,
            boot,
        }) => {
            let (ins, outs) = pairs.states()?;
            let ml = with_default_binning(&MlConfig {
                dim: pairs.state_dim,
                iterations: *iterations,
                povm: PovmKind::parse(povm)?,
                dilution: 1.0,
                bin_width: *bin_width,
            });
            let b = boot_config(boot, 20_480, seed)?;
            let fb = bootstrap_fidelity(&ins, &outs, &ml, &b)?;
            write_json(&cli.out_dir, "ci.json", &fb)?;
            print_json(&serde_json::to_value(&fb)?)
        }
        Command::Model(ModelCmd::Capture {
            rho,
            r1,
            r2,
            n_th,
            dim,
            out,
        }) => {
            let params = CaptureModelParams {
                r1: *r1,
                r2: *r2,
                n_th_target: *n_th,
                dim: *dim,
            };
            let model = CaptureModel::new(params)?;
            let pred = model.apply(&resolve_state(rho, *dim, EmbedPolicy::Physical)?)?;
            let path = write_json_to(out.clone().unwrap_or_else(|| cli.out_dir.join("pred.json")), &pred.to_doc())?;
            print_json(&json!({
                "output": path,
                "ancilla_occupancy": model.ancilla_occupancy(),
                "diagonal": diagonal(&pred),
                "model_fidelity": model_fidelity_report(&params)?,
            }))
        }
        Command::Storage(StorageCmd::Fit { data, weighting, out }) => {
            let points = read_storage_csv_path(data)?;
            let first = points.first().context("empty storage CSV")?;
            let mut p0 = first.populations.clone();
            let rest = 1.0 - p0.iter().sum::<f64>();
            if rest > 0.0 {
                p0.push(rest);
            }
            p0.resize(p0.len().max(phonon_core::fock::DEFAULT_DIM), 0.0);
            let w = match weighting {
                WeightingArg::InverseVariance => Weighting::InverseVariance,
                WeightingArg::Uniform => Weighting::Uniform,
            };
            let fit = fit_storage_time(&points, &p0, w)?;
            let doc = json!({
                "tau_m_us": fit.tau_m * 1e6,
                "stderr_us": fit.stderr * 1e6,
                "fit": fit,
            });
            if let Some(o) = out {
                write_json_to(o.clone(), &doc)?;
            }
            print_json(&doc)
        }
        Command::Dynamics(d) => cmd_dynamics(d, &cli.out_dir),
    }
}

fn cmd_run(a: &RunArgs, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let path = Path::new(&a.config);
    let (mut v, base): (Value, Option<&Path>) = if path.is_file() {
        (serde_json::from_slice(&fs::read(path)?)?, path.parent())
    } else if let Some(text) = pipeline::bundled_config(&a.config) {
        (serde_json::from_str(text)?, None)
    } else {
        bail!(
            "{} is neither a file nor a bundled config ({})",
            a.config,
            pipeline::bundled_names().join(", ")
        );
    };
    if let Some(o) = &a.overrides {
        let patch: Value = serde_json::from_str(o).context("parsing --set")?;
        pipeline::merge(&mut v, &patch);
    }
    if let Some(s) = seed {
        v["seed"] = json!(s);
    }
    let bytes = serde_json::to_vec_pretty(&v)?;
    let cfg = ExperimentConfig::from_value(&v)?;
    let report = pipeline::run_config(&cfg, &bytes, out_dir, base)?;
    print_json(&json!({
        "dir": report.dir,
        "metrics": report.metrics,
        "config_sha256": report.manifest.config_sha256,
    }))
}

fn cmd_fidelity(pairs: &PairArgs, dim: usize, haar: Option<usize>, seed: u64, out: Option<&Path>) -> Result<()> {
    let (ins, outs) = pairs.defaulted()?;
    let fx = fixtures()?;
    let blocks = |v: &[String]| v.iter().map(|k| fx.density_block(k).ok()).collect::<Option<Vec<_>>>();
    // Tabulated pairs are scored on the raw blocks; anything else goes
    // through validated states.
    let map = match (blocks(&ins), blocks(&outs)) {
        (Some(bi), Some(bo)) => reconstruct_process_matrices(&bi, &bo, dim)?,
        _ => {
            let (i, o) = pairs.states()?;
            reconstruct_process(&i, &o, dim)?
        }
    };
    let report = average_fidelity(&map);
    let haar = haar.map(|n| haar_average_fidelity_oracle(&map, n, seed)).transpose()?;
    let doc = json!({ "report": report, "haar": haar });
    if let Some(o) = out {
        write_json_to(o.to_path_buf(), &doc)?;
    }
    print_json(&doc)
}

fn boot_config(a: &BootArgs, default_samples: usize, seed: u64) -> Result<BootstrapConfig> {
    let b = BootstrapConfig {
        n_sets: a.n_sets,
        n_samples_per_set: a.n_samples.unwrap_or(default_samples),
        level: a.level,
        seed,
        histogram_bins: a.histogram_bins,
    };
    b.validate()?;
    Ok(b)
}

fn cmd_dynamics(d: &DynamicsCmd, out_dir: &Path) -> Result<()> {
    let DynamicsCmd::Simulate {
        gamma_hz,
        gamma_r0_hz,
        tau_r_us,
        tau_s_us,
        gamma_b_hz,
        tau_b_us,
        psi_b,
        edge_sigma_ns,
        dt_ns,
        stride,
    } = d;
    let tp = 2.0 * std::f64::consts::PI;
    let params = fixtures()?.device_params()?;
    let sched = PumpSchedule::capture_protocol(
        tp * gamma_hz,
        tp * gamma_r0_hz,
        tau_r_us * 1e-6,
        tau_s_us * 1e-6,
        tp * gamma_b_hz,
        tau_b_us * 1e-6,
        *psi_b,
        edge_sigma_ns * 1e-9,
    )?;
    let dt = dt_ns.map(|x| x * 1e-9).unwrap_or_else(|| params.max_step());
    let span = sched.duration() + 4.0 * edge_sigma_ns * 1e-9;
    let input = decaying_pulse(tp * gamma_hz, Complex64::new(1.0, 0.0), span, dt)?;
    let sol = integrate_full_eom(&params, &sched.pumps(&params), &input, dt)?;

    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("trajectory.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "t,b_in_re,b_in_im,b_out_re,b_out_im,b_re,b_im,c_re,c_im")?;
    for k in (0..sol.b.len()).step_by((*stride).max(1)) {
        let v = |tr: &phonon_core::dynamics::FieldTrace| tr.values()[k];
        let (bi, bo, b, c) = (v(&sol.b_in), v(&sol.b_out), v(&sol.b), v(&sol.c));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            sol.b.t(k),
            bi.re,
            bi.im,
            bo.re,
            bo.im,
            b.re,
            b.im,
            c.re,
            c.im
        )?;
    }
    w.flush()?;
    // Reflection is scored before the blue pump starts to ramp up.
    let reflected = if *gamma_b_hz > 0.0 && *tau_b_us > 0.0 {
        let cutoff = (tau_r_us + tau_s_us) * 1e-6 - 4.0 * edge_sigma_ns * 1e-9;
        sol.b_out.energy_until(cutoff) / sol.b_in.energy()
    } else {
        sol.reflected_fraction()
    };
    print_json(&json!({
        "trajectory": path,
        "dt": dt,
        "steps": sol.b.len(),
        "reflected_fraction": reflected,
        "output_energy_over_input": sol.b_out.energy() / sol.b_in.energy(),
    }))
}

fn diagonal(rho: &DensityMatrix) -> Vec<f64> {
    (0..rho.dim().min(3)).map(|n| rho.element(n, n).re).collect()
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    write_json_to(dir.join(name), value)
}

fn write_json_to<T: serde::Serialize>(path: PathBuf, value: &T) -> Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(&path, s)?;
    Ok(path)
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
