//! Configuration ingestion, subcommand dispatch, and CSV/JSON emission.
//!
//! Time units: gamma = 1 throughout; config frequencies are in units of
//! gamma and times in 1/gamma. CSV floats use the shortest round-trip
//! representation so golden files are bit-stable.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{CostMatrix, HypothesisPair};
use crate::montecarlo::{
    bench, estimate_qe_counting, estimate_qe_posterior, first_passage, run_trial, Estimator,
    ExperimentConfig, TruthSampling,
};
use crate::qmath::{bloch_to_density, build_hamiltonian, pauli, Axis, BlochVector,
    DissipatorOrdering};
use crate::trajectory::{DissipatorScaling, LoglikMode, ModelSpec, SimGrid};

/// CSV schema version, bumped whenever a column set changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_NUMERICAL,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn numerical_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

// ---------------------------------------------------------------------------
// Config file schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub omega: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSection {
    pub kappa: f64,
    pub eta: f64,
    pub dissipator_scaling: DissipatorScaling,
    pub ordering: DissipatorOrdering,
}

impl Default for MeasurementSection {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            eta: 0.5,
            dissipator_scaling: DissipatorScaling::EtaScaled,
            ordering: DissipatorOrdering::FFdag,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsSection {
    pub p0: f64,
    pub p1: f64,
}

impl Default for PriorsSection {
    fn default() -> Self {
        Self { p0: 0.5, p1: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub c00: f64,
    pub c01: f64,
    pub c10: f64,
    pub c11: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            c00: 0.0,
            c01: 1.0,
            c10: 1.0,
            c11: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    pub loglik_mode: LoglikMode,
    pub z0: f64,
    pub x0: f64,
    pub y0: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_max: 30.0,
            seed: 42,
            loglik_mode: LoglikMode::ItoCorrected,
            z0: 1.0,
            x0: 0.0,
            y0: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub estimator: Estimator,
    pub n_trials: usize,
    pub beta: f64,
    pub truth_sampling: TruthSampling,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            estimator: Estimator::Posterior,
            n_trials: 1,
            beta: 0.01,
            truth_sampling: TruthSampling::FromPrior,
            workers: 0,
        }
    }
}

/// The on-disk config. Defaults reproduce the two-hypothesis Rabi example:
/// Omega in {1, 2} gamma, Delta = 1.43 gamma, kappa = 1, eta = 0.5, z0 = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model0: ModelSection,
    pub model1: ModelSection,
    pub measurement: MeasurementSection,
    pub priors: PriorsSection,
    pub cost: CostSection,
    pub sim: SimSection,
    pub experiment: ExperimentSection,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            model0: ModelSection {
                omega: 1.0,
                delta: 1.43,
            },
            model1: ModelSection {
                omega: 2.0,
                delta: 1.43,
            },
            measurement: MeasurementSection::default(),
            priors: PriorsSection::default(),
            cost: CostSection::default(),
            sim: SimSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl ConfigFile {
    /// Build the validated runtime configuration, naming the offending key
    /// on failure.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let f_op = pauli(Axis::Z).scale(Complex64::new(
            self.measurement
                .kappa
                .sqrt(),
            0.0,
        ));
        if !(self.measurement.kappa > 0.0 && self.measurement.kappa.is_finite()) {
            return Err(config_err(format!(
                "measurement.kappa = {} must be positive",
                self.measurement.kappa
            )));
        }
        if !(self.measurement.eta > 0.0 && self.measurement.eta <= 1.0) {
            return Err(config_err(format!(
                "measurement.eta = {} outside (0, 1]",
                self.measurement.eta
            )));
        }
        let mk_model = |m: &ModelSection, key: &str| -> Result<ModelSpec, CliError> {
            let h = build_hamiltonian(m.omega, m.delta)
                .map_err(|e| config_err(format!("{key}: {e}")))?;
            ModelSpec::new(
                h,
                f_op.clone(),
                self.measurement.eta,
                self.measurement.dissipator_scaling,
                self.measurement.ordering,
            )
            .map_err(|e| config_err(format!("{key}: {e}")))
        };
        let model0 = mk_model(&self.model0, "model0")?;
        let model1 = mk_model(&self.model1, "model1")?;
        let cost = CostMatrix::new(self.cost.c00, self.cost.c01, self.cost.c10, self.cost.c11)
            .map_err(|e| config_err(format!("cost: {e}")))?;
        let pair = HypothesisPair::new(model0, model1, self.priors.p0, self.priors.p1, cost)
            .map_err(|e| config_err(format!("priors: {e}")))?;
        let grid = SimGrid::new(self.sim.dt, self.sim.t_max)
            .map_err(|e| config_err(format!("sim: {e}")))?;
        let b = BlochVector::new(self.sim.x0, self.sim.y0, self.sim.z0)
            .map_err(|e| config_err(format!("sim initial state: {e}")))?;
        let rho0 = bloch_to_density(b).map_err(|e| config_err(format!("sim initial state: {e}")))?;
        if !(self.experiment.beta > 0.0 && self.experiment.beta < 1.0) {
            return Err(config_err(format!(
                "experiment.beta = {} outside (0, 1)",
                self.experiment.beta
            )));
        }
        if self.experiment.n_trials < 1 {
            return Err(config_err("experiment.n_trials must be >= 1"));
        }
        Ok(ExperimentConfig {
            pair,
            grid,
            rho0,
            beta: self.experiment.beta,
            n_trials: self.experiment.n_trials,
            base_seed: self.sim.seed,
            estimator: self.experiment.estimator,
            truth_sampling: self.experiment.truth_sampling,
            loglik_mode: self.sim.loglik_mode,
            workers: self.experiment.workers,
        })
    }
}

/// Apply a dotted-path override like `sim.dt=5e-4` onto the JSON tree.
fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override '{spec}' is not key=value")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override path '{path}' does not address an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!()
}

/// Load a JSON config (or defaults when `path` is None), apply overrides,
/// and validate. Unknown keys are rejected.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<(ConfigFile, ExperimentConfig), CliError> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(ConfigFile::default()).expect("default serializes"),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let file: ConfigFile =
        serde_json::from_value(tree).map_err(|e| config_err(format!("config: {e}")))?;
    let resolved = file.resolve()?;
    Ok((file, resolved))
}

// ---------------------------------------------------------------------------
// CLI surface

#[derive(Debug, Parser)]
#[command(
    name = "qdiscrim",
    about = "Binary discrimination of weakly measured quantum systems via dual likelihood filters"
)]
pub struct Cli {
    /// Path to a JSON config file; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set sim.dt=5e-4 (repeatable).
    #[arg(long = "set", global = true)]
    pub overrides: Vec<String>,
    /// Output directory for CSV and manifest files.
    #[arg(long, global = true, default_value = "out")]
    pub output_dir: PathBuf,
    /// Worker threads (flag > QDISCRIM_WORKERS env > config file).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one truth trajectory and its measurement record.
    Simulate,
    /// Run a single discrimination trial and emit the posterior/decision path.
    Discriminate {
        /// Trial index within the seed's stream.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Estimate the average error probability curve.
    Qe {
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<Estimator>,
        /// Number of trials (overrides experiment.n_trials).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Wall-clock comparison of the two estimators.
    Bench {
        /// Comma-separated trial counts, e.g. 10,20,50,100.
        #[arg(long = "n-list", value_delimiter = ',')]
        n_list: Vec<usize>,
        /// Stop each run at the first Qe <= beta crossing.
        #[arg(long, default_value_t = false)]
        early_stop: bool,
    },
    /// Run the runtime invariant suite; nonzero exit on any failure.
    Validate,
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    match s {
        "posterior" => Ok(Estimator::Posterior),
        "counting" => Ok(Estimator::Counting),
        other => Err(format!("unknown estimator '{other}'")),
    }
}

#[derive(Debug, Serialize)]
struct ManifestEcho<'a> {
    artifact: &'a str,
    version: &'a str,
    command: String,
    seed: u64,
    overrides: &'a [String],
    config: &'a ConfigFile,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    file: &ConfigFile,
    overrides: &[String],
) -> Result<(), CliError> {
    let echo = ManifestEcho {
        artifact: "qdiscrim",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        seed: file.sim.seed,
        overrides,
        config: file,
    };
    let path = out_dir.join("manifest.json");
    let mut f = fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&echo).expect("serialize"))?;
    Ok(())
}

fn csv_header(f: &mut impl Write, columns: &str) -> Result<(), CliError> {
    writeln!(
        f,
        "# qdiscrim v{} schema={} units: gamma=1, time in 1/gamma",
        env!("CARGO_PKG_VERSION"),
        CSV_SCHEMA_VERSION
    )?;
    writeln!(f, "{columns}")?;
    Ok(())
}

/// Execute a parsed command line. Returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Load config, run the requested subcommand, and write outputs plus a
/// manifest echo into the output directory.
pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let (file, mut cfg) = load_config(cli.config.as_deref(), &cli.overrides)?;
    // flag > env > file
    if let Some(w) = cli.workers {
        cfg.workers = w;
    } else if let Ok(v) = std::env::var("QDISCRIM_WORKERS") {
        cfg.workers = v
            .parse()
            .map_err(|_| config_err(format!("QDISCRIM_WORKERS = '{v}' is not a number")))?;
    }
    fs::create_dir_all(&cli.output_dir)?;

    match &cli.command {
        Command::Simulate => {
            write_manifest(&cli.output_dir, "simulate", &file, &cli.overrides)?;
            cmd_simulate(&cli.output_dir, &cfg)
        }
        Command::Discriminate { trial } => {
            write_manifest(&cli.output_dir, "discriminate", &file, &cli.overrides)?;
            cmd_discriminate(&cli.output_dir, &cfg, *trial)
        }
        Command::Qe { estimator, n } => {
            write_manifest(&cli.output_dir, "qe", &file, &cli.overrides)?;
            let mut cfg = cfg;
            if let Some(e) = estimator {
                cfg.estimator = *e;
            }
            if let Some(n) = n {
                cfg.n_trials = *n;
            }
            cmd_qe(&cli.output_dir, &cfg)
        }
        Command::Bench { n_list, early_stop } => {
            write_manifest(&cli.output_dir, "bench", &file, &cli.overrides)?;
            cmd_bench(&cli.output_dir, &cfg, n_list, *early_stop)
        }
        Command::Validate => crate::validate::run_suite(&cfg).map_err(numerical_err),
    }
}

fn cmd_simulate(out_dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    use crate::trajectory::{simulate_record, GaussianNoise};
    use rand::SeedableRng;
    let mut noise = GaussianNoise::new(rand_chacha::ChaCha12Rng::seed_from_u64(cfg.base_seed));
    let (path, record) = simulate_record(&cfg.pair.model0, &cfg.rho0, cfg.grid, &mut noise)
        .map_err(numerical_err)?;
    let mut f = fs::File::create(out_dir.join("trajectory.csv"))?;
    csv_header(&mut f, "time,x,y,z,dy")?;
    for (i, state) in path.states.iter().enumerate() {
        let b = crate::qmath::density_to_bloch(state).map_err(numerical_err)?;
        let dy = if i == 0 { 0.0 } else { record.dy[i - 1] };
        writeln!(f, "{},{},{},{},{}", cfg.grid.time(i), b.x, b.y, b.z, dy)?;
    }
    Ok(())
}

fn cmd_discriminate(out_dir: &Path, cfg: &ExperimentConfig, trial: usize) -> Result<(), CliError> {
    let t = run_trial(cfg, trial).map_err(numerical_err)?;
    let mut f = fs::File::create(out_dir.join("discriminate.csv"))?;
    csv_header(
        &mut f,
        "time,x0,y0,z0,x1,y1,z1,loglik0,loglik1,log_ratio,p0,p1,cond_error,decision",
    )?;
    for i in 0..t.posterior_path.len() {
        let (x0, y0, z0) = t.bloch0_path[i];
        let (x1, y1, z1) = t.bloch1_path[i];
        let d = &t.decision_path[i];
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            cfg.grid.time(i),
            x0,
            y0,
            z0,
            x1,
            y1,
            z1,
            t.loglik0_path[i],
            t.loglik1_path[i],
            d.log_ratio,
            t.posterior_path[i].p0,
            t.posterior_path[i].p1,
            t.conditional_error_path[i],
            d.accepted,
        )?;
    }
    eprintln!(
        "trial {trial}: truth {}, final decision {}, stop_time {:?}, repairs {}",
        t.true_hypothesis, t.final_decision.accepted, t.stop_time, t.repair_count
    );
    Ok(())
}

fn cmd_qe(out_dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let curve = match cfg.estimator {
        Estimator::Posterior => estimate_qe_posterior(cfg).map_err(numerical_err)?,
        Estimator::Counting => estimate_qe_counting(cfg).map_err(numerical_err)?.0,
    };
    let mut f = fs::File::create(out_dir.join("qe.csv"))?;
    csv_header(&mut f, "time,qe,stderr,n_trials,estimator")?;
    for i in 0..curve.times.len() {
        writeln!(
            f,
            "{},{},{},{},{}",
            curve.times[i], curve.qe[i], curve.stderr[i], curve.n_trials, curve.estimator
        )?;
    }
    if let Some(t) = first_passage(&curve, cfg.beta) {
        eprintln!("Qe crossed beta={} at t={}", cfg.beta, t);
    } else {
        eprintln!("Qe never crossed beta={}", cfg.beta);
    }
    Ok(())
}

fn cmd_bench(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    n_list: &[usize],
    early_stop: bool,
) -> Result<(), CliError> {
    let table = bench(cfg, n_list, early_stop).map_err(numerical_err)?;
    let mut f = fs::File::create(out_dir.join("bench.csv"))?;
    csv_header(&mut f, "n_trials,estimator,first_passage_time,wall_clock_seconds,seed")?;
    for row in &table.rows {
        let fp = row
            .first_passage_time
            .map(|t| t.to_string())
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{}",
            row.n_trials, row.estimator, fp, row.wall_clock_seconds, row.seed
        )?;
    }
    Ok(())
}
