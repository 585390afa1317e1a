//! `camib` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation failure (bad flags, bad
//! config, missing files, failed gradient checks), 2 runtime failure.
//! Verbosity comes from `CAMIB_LOG` (`off`, `info`, `debug`; default `warn`).

// NaN-rejecting checks are written `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use camib_core::experiment::{self, Grid, Variant};
use camib_core::synth::{self, Block, SyntheticDataset, SPLIT_NAMES};
use camib_core::train::{self, TrainedModel};
use camib_core::verify::{self, Mutation, VerifyConfig};
use clap::{Parser, Subcommand};
use serde::Serialize;

pub mod config;
pub mod report;

pub use config::RunConfigFile;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<camib_core::Error> for CliError {
    fn from(e: camib_core::Error) -> Self {
        use camib_core::Error as E;
        let code = match &e {
            E::Argument(_) | E::Config(_) | E::Format(_) | E::Json(_) => 1,
            E::Io(io) if io.kind() == ErrorKind::NotFound => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        camib_core::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "camib", version, about = "Causal multimodal information bottleneck laboratory")]
struct Cli {
    /// Override the data and training seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write it with a summary.
    GenerateData { config: PathBuf },
    /// Train one model and write it with its loss history and metrics.
    Train { config: PathBuf },
    /// Score a saved model on one split.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test_ood")]
        split: String,
    },
    /// Check the closed-form attention and loss gradients against autodiff and finite differences.
    VerifyGradients {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Corrupt one closed form on purpose; the suite should then fail.
        #[arg(long)]
        mutate: bool,
    },
    /// Train the full model and each variant over several seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value = "no_iv,no_unif,kl_to_mse,no_intv,no_ib,fully_ablated")]
        variants: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Grid search over lambda1, lambda2 and beta.
    Sweep {
        config: PathBuf,
        /// For example `lambda1=0.1:1.0:0.1;lambda2=0.3;beta=1e-5,1e-4`.
        #[arg(long)]
        grid: String,
        /// Defaults to the training seed of the config.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Summarise the outputs found in a run directory.
    Report { run_dir: PathBuf },
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let filter = std::env::var("CAMIB_LOG").unwrap_or_else(|_| "warn".into());
    let _ = env_logger::Builder::new().parse_filters(&filter).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let load = |p: &Path| RunConfigFile::load(p).map(|c| c.with_seed(cli.seed));
    match &cli.command {
        Command::GenerateData { config } => generate_data(&load(config)?),
        Command::Train { config } => train_cmd(&load(config)?),
        Command::Evaluate { config, model, split } => evaluate_cmd(&load(config)?, model, split),
        Command::VerifyGradients { instances, tol, mutate } => verify_cmd(*instances, *tol, *mutate, cli.seed),
        Command::Ablate { config, variants, seeds } => ablate_cmd(&load(config)?, variants, seeds),
        Command::Sweep { config, grid, seeds } => sweep_cmd(&load(config)?, grid, seeds.as_deref()),
        Command::Report { run_dir } => report::run(run_dir),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn write_text(path: &Path, s: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Loads the dataset file when present, else generates and saves it.
fn dataset(cfg: &RunConfigFile) -> CliResult<SyntheticDataset> {
    if cfg.dataset.exists() {
        let ds = synth::load(&cfg.dataset)?;
        if ds.spec != cfg.data {
            return Err(CliError::usage(format!(
                "{} was generated from different [data] settings; rerun generate-data",
                cfg.dataset.display()
            )));
        }
        return Ok(ds);
    }
    let ds = synth::generate(&cfg.data)?;
    if let Some(dir) = cfg.dataset.parent() {
        fs::create_dir_all(dir)?;
    }
    synth::save(&ds, &cfg.dataset)?;
    Ok(ds)
}

#[derive(Serialize)]
struct SplitSummary {
    name: String,
    samples: usize,
    rho: f64,
    agreement: f64,
}

#[derive(Serialize)]
struct DataSummary {
    splits: Vec<SplitSummary>,
    shortcut_probe: synth::ProbeReport,
    causal_probe: synth::ProbeReport,
}

fn generate_data(cfg: &RunConfigFile) -> CliResult<()> {
    let ds = synth::generate(&cfg.data)?;
    fs::create_dir_all(&cfg.dir)?;
    if let Some(dir) = cfg.dataset.parent() {
        fs::create_dir_all(dir)?;
    }
    synth::save(&ds, &cfg.dataset)?;
    let summary = DataSummary {
        splits: ds
            .splits()
            .iter()
            .map(|s| SplitSummary {
                name: s.name.clone(),
                samples: s.len(),
                rho: s.rho,
                agreement: s.agreement(),
            })
            .collect(),
        shortcut_probe: synth::linear_probe(&ds, Block::Shortcut)?,
        causal_probe: synth::linear_probe(&ds, Block::Causal)?,
    };
    write_json(&cfg.dir.join("data_summary.json"), &summary)?;
    println!("wrote {}", cfg.dataset.display());
    for s in &summary.splits {
        println!("{:<9} n={:<6} rho={:.2} agreement={:.4}", s.name, s.samples, s.rho, s.agreement);
    }
    for (name, p) in [("shortcut", summary.shortcut_probe), ("causal", summary.causal_probe)] {
        println!("{name} probe: id {:.4} ood {:.4}", p.id_accuracy, p.ood_accuracy);
    }
    Ok(())
}

/// Metrics of a trained model, as written to `report.json`.
#[derive(Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub config: train::TrainConfig,
    pub data: synth::BiasSpec,
    pub steps: usize,
    pub final_loss: camib_core::intervention::LossBreakdown,
    pub val: camib_core::metrics::MetricsReport,
    pub test_id: camib_core::metrics::MetricsReport,
    pub test_ood: camib_core::metrics::MetricsReport,
}

fn train_cmd(cfg: &RunConfigFile) -> CliResult<()> {
    let ds = dataset(cfg)?;
    let model = train::train(&cfg.train, &ds.train.batch)?;
    model.save(&cfg.dir.join("model.json"))?;
    write_text(&cfg.dir.join("history.csv"), &report::history_csv(&model.history))?;
    let rep = TrainReport {
        config: cfg.train.clone(),
        data: cfg.data.clone(),
        steps: model.history.len(),
        final_loss: model.history.last().copied().unwrap_or_default(),
        val: model.evaluate(&ds.val.batch)?,
        test_id: model.evaluate(&ds.test_id.batch)?,
        test_ood: model.evaluate(&ds.test_ood.batch)?,
    };
    write_json(&cfg.dir.join("report.json"), &rep)?;
    print!("{}", report::metrics_table(&[("val", &rep.val), ("test_id", &rep.test_id), ("test_ood", &rep.test_ood)]));
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfigFile, model_path: &Path, split: &str) -> CliResult<()> {
    if !SPLIT_NAMES.contains(&split) {
        return Err(CliError::usage(format!("unknown split {split:?}; expected one of {SPLIT_NAMES:?}")));
    }
    let model = TrainedModel::load(model_path)
        .map_err(|e| CliError::from(e).with_context(&format!("model {}", model_path.display())))?;
    let ds = dataset(cfg)?;
    let m = model.evaluate(&ds.split(split)?.batch)?;
    write_json(&cfg.dir.join(format!("eval_{split}.json")), &m)?;
    print!("{}", report::metrics_table(&[(split, &m)]));
    Ok(())
}

impl CliError {
    fn with_context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

fn verify_cmd(instances: usize, tol: f64, mutate: bool, seed: Option<u64>) -> CliResult<()> {
    if instances == 0 || !(tol > 0.0) {
        return Err(CliError::usage("--instances and --tol must be positive"));
    }
    let cfg = VerifyConfig {
        instances,
        tolerance: tol,
        seed: seed.unwrap_or(0),
        mutation: if mutate { Mutation::FlipDvhatDs } else { Mutation::None },
        ..VerifyConfig::default()
    };
    let rep = verify::verify_all(&cfg)?;
    print!("{}", rep.to_text());
    if rep.all_passed() {
        Ok(())
    } else {
        Err(CliError::usage(format!("gradient checks failed: {}", rep.failed().join(", "))))
    }
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let seeds = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(|_| CliError::usage(format!("bad seed {p:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(CliError::usage("no seeds given"));
    }
    Ok(seeds)
}

fn ablate_cmd(cfg: &RunConfigFile, variants: &str, seeds: &str) -> CliResult<()> {
    let variants = Variant::parse_list(variants)?;
    let seeds = parse_seeds(seeds)?;
    let ds = dataset(cfg)?;
    let rep = experiment::ablate(&cfg.train, &ds, &variants, &seeds)?;
    write_json(&cfg.dir.join("ablation.json"), &rep)?;
    let text = rep.to_text();
    write_text(&cfg.dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sweep_cmd(cfg: &RunConfigFile, grid: &str, seeds: Option<&str>) -> CliResult<()> {
    let grid = Grid::parse(grid)?;
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.train.seed],
    };
    let ds = dataset(cfg)?;
    let rep = experiment::sweep(&cfg.train, &ds, &grid, &seeds)?;
    write_json(&cfg.dir.join("sweep.json"), &rep)?;
    let text = rep.to_text();
    write_text(&cfg.dir.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}
