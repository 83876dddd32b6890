//! Command-line harness: dataset synthesis, training runs, evaluation,
//! hyper-parameter sweeps and report aggregation.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime training error,
//! 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noisytail::config::RunConfig;
use noisytail::data;
use noisytail::error::Error;
use noisytail::eval;
use noisytail::model::{Branch, Mode, Network};
use noisytail::tensor::Tape;
use noisytail::trainer;

#[derive(Parser)]
#[command(
    name = "noisytail",
    about = "Training engine for classification under long-tailed label distributions and label noise",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-configuring subcommand. Precedence:
/// built-in defaults, then --config file values, then these flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key=value config file (documented keys; # comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.lr0=0.1 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Dataset kind: blobs | idx | bundle
    #[arg(long)]
    dataset: Option<String>,
    /// IDX images file (dataset.kind = idx)
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX labels file (dataset.kind = idx)
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Imbalance ratio rho in (0, 1]
    #[arg(long)]
    rho: Option<f64>,
    /// Label-noise rate eta in [0, 1]
    #[arg(long)]
    eta: Option<f64>,
    /// Noise kind: none | ci | cd
    #[arg(long)]
    noise: Option<String>,
    /// Method preset: ce | cam | cam-lnor | full
    #[arg(long)]
    method: Option<String>,
    /// Architecture: mlp | cnn
    #[arg(long)]
    arch: Option<String>,
    /// Warm-up epochs (stage 1)
    #[arg(long)]
    epochs_warmup: Option<usize>,
    /// Main epochs (stage 2)
    #[arg(long)]
    epochs_main: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.dataset {
            cfg.apply_kv("dataset.kind", v)?;
        }
        if let Some(v) = &self.images {
            cfg.apply_kv("dataset.images", &v.display().to_string())?;
        }
        if let Some(v) = &self.labels {
            cfg.apply_kv("dataset.labels", &v.display().to_string())?;
        }
        if let Some(v) = self.rho {
            cfg.apply_kv("dataset.rho", &v.to_string())?;
        }
        if let Some(v) = self.eta {
            cfg.apply_kv("dataset.eta", &v.to_string())?;
        }
        if let Some(v) = &self.noise {
            cfg.apply_kv("dataset.noise", v)?;
        }
        if let Some(v) = &self.method {
            cfg.apply_kv("method", v)?;
        }
        if let Some(v) = &self.arch {
            cfg.apply_kv("train.arch", v)?;
        }
        if let Some(v) = self.epochs_warmup {
            cfg.apply_kv("train.epochs_warmup", &v.to_string())?;
        }
        if let Some(v) = self.epochs_main {
            cfg.apply_kv("train.epochs_main", &v.to_string())?;
        }
        if let Some(v) = self.batch_size {
            cfg.apply_kv("train.batch_size", &v.to_string())?;
        }
        if let Some(v) = self.lr0 {
            cfg.apply_kv("train.lr0", &v.to_string())?;
        }
        if let Some(v) = self.alpha {
            cfg.apply_kv("train.alpha", &v.to_string())?;
        }
        if let Some(v) = self.lambda {
            cfg.apply_kv("train.lambda", &v.to_string())?;
        }
        if let Some(v) = self.kappa {
            cfg.apply_kv("train.kappa", &v.to_string())?;
        }
        if let Some(v) = self.tau {
            cfg.apply_kv("train.tau", &v.to_string())?;
        }
        if let Some(v) = self.seed {
            cfg.apply_kv("seed", &v.to_string())?;
        }
        if let Some(v) = &self.out {
            cfg.apply_kv("out.dir", &v.display().to_string())?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset artifact (train + test bundles with sidecars)
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the two-stage training procedure
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seed list; each seed gets its own run directory
        #[arg(long)]
        seeds: Option<String>,
        /// Resume from the checkpoint in the run directory
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate the checkpoint of a finished run on its dataset
    Eval {
        /// Run directory holding checkpoint.bin
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-product sweep over config keys
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Grid spec like "train.alpha=1,2;train.lambda=0.05,0.1"
        #[arg(long)]
        grid: String,
        /// Comma-separated seed list applied to every grid cell
        #[arg(long, default_value = "1")]
        seeds: String,
    },
    /// Print the summary of one or more run directories and aggregate them
    Report {
        /// Run directories
        runs: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Usage(_) => 2,
        Error::Io { .. } => 4,
        Error::Training(_) | Error::Shape(_) | Error::Load(_) => 3,
    }
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, Error> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{}'", s.trim())))
        })
        .collect()
}

fn cmd_synth(config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.resolve()?;
    cfg.validate()?;
    let (train, test) = cfg.synthesize()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let train_path = cfg.out_dir.join("train.bundle");
    let test_path = cfg.out_dir.join("test.bundle");
    data::save_bundle(&train, &train_path)?;
    data::save_bundle(&test, &test_path)?;
    println!(
        "wrote {} ({} samples, counts {:?}, noisy fraction {:.4})",
        train_path.display(),
        train.len(),
        train.class_counts,
        train.noisy_fraction()
    );
    println!("wrote {} ({} samples)", test_path.display(), test.len());
    Ok(())
}

fn run_one_seed(cfg: &RunConfig, run_dir: &Path) -> Result<f64, Error> {
    let hash = cfg.hash();
    let (train, test) = cfg.synthesize()?;
    let (_net, outcome) = trainer::train(&cfg.train, &train, &test, Some(run_dir), &hash)?;
    let acc = outcome.records.last().map(|r| r.test_accuracy).unwrap_or(0.0);
    println!(
        "run {}: {} epochs, final test accuracy {:.4}, skipped batches {}",
        run_dir.display(),
        outcome.records.len(),
        acc,
        outcome.skipped_batches
    );
    Ok(acc)
}

fn mean_stdev(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_train(config: &ConfigArgs, seeds: Option<&str>, resume: bool) -> Result<(), Error> {
    let base = config.resolve()?;
    base.validate()?;
    let seed_list = match seeds {
        Some(spec) => parse_seeds(spec)?,
        None => vec![base.train.seed],
    };
    let multi = seed_list.len() > 1;
    let mut finals = Vec::new();
    for &seed in &seed_list {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        let run_dir =
            if multi { cfg.out_dir.join(format!("seed_{seed}")) } else { cfg.out_dir.clone() };
        if !resume && run_dir.join("checkpoint.bin").exists() {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint; pass --resume to continue it",
                run_dir.display()
            )));
        }
        finals.push(run_one_seed(&cfg, &run_dir)?);
    }
    if multi {
        let (mean, stdev) = mean_stdev(&finals);
        println!("seeds {:?}: test accuracy {:.4} ± {:.4}", seed_list, mean, stdev);
        let agg = serde_json::json!({
            "seeds": seed_list,
            "final_test_accuracy": finals,
            "mean": mean,
            "stdev": stdev,
        });
        let path = base.out_dir.join("aggregate.json");
        fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
        fs::write(&path, serde_json::to_string_pretty(&agg).unwrap())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_eval(run: &Path, config: &ConfigArgs) -> Result<(), Error> {
    let cfg = config.resolve()?;
    cfg.validate()?;
    let ck_path = run.join("checkpoint.bin");
    let state = trainer::load_checkpoint(&ck_path)?;
    let net = Network::import_weights(&state.weights)?;
    let (train, test) = cfg.synthesize()?;
    let _ = train;
    let acc = eval::accuracy(&net, &test, cfg.train.batch_size)?;
    let per_class = eval::classwise_accuracy(&net, &test, cfg.train.batch_size)?;
    println!("checkpoint {} (epochs {})", ck_path.display(), state.completed_epochs);
    println!("test accuracy: {acc:.4}");
    println!(
        "per-class: [{}]",
        per_class.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
    );

    // sanity-check one eval forward against the stored running statistics
    if !test.is_empty() {
        let imgs: Vec<&data::Image> = test.samples.iter().take(4).map(|s| &s.image).collect();
        let x = net.batch_tensor(&imgs)?;
        let tape = Tape::no_grad();
        net.forward(&tape, &x, Branch::Weak, Mode::Eval)?;
    }
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<(String, Vec<String>)>, Error> {
    let mut axes = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis '{part}' is not KEY=V1,V2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis '{key}' has no values")));
        }
        axes.push((key.trim().to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    Ok(axes)
}

fn grid_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn cmd_sweep(config: &ConfigArgs, grid: &str, seeds: &str) -> Result<(), Error> {
    let base = config.resolve()?;
    let axes = parse_grid(grid)?;
    let seed_list = parse_seeds(seeds)?;
    let cells = grid_cells(&axes);
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let mut rows = Vec::new();
    for cell in &cells {
        let cell_name: String = cell
            .iter()
            .map(|(k, v)| format!("{}_{v}", k.replace('.', "-")))
            .collect::<Vec<_>>()
            .join("__");
        for &seed in &seed_list {
            let mut cfg = base.clone();
            let mut apply_err = None;
            for (k, v) in cell {
                if let Err(e) = cfg.apply_kv(k, v) {
                    apply_err = Some(e);
                    break;
                }
            }
            cfg.train.seed = seed;
            let run_dir = base.out_dir.join(&cell_name).join(format!("seed_{seed}"));
            let result = match apply_err {
                Some(e) => Err(e),
                None => cfg.validate().and_then(|_| run_one_seed(&cfg, &run_dir)),
            };
            // a failed cell is recorded, not fatal to the sweep
            match result {
                Ok(acc) => rows.push((cell_name.clone(), seed, "ok".to_string(), acc)),
                Err(e) => {
                    eprintln!("cell {cell_name} seed {seed} failed: {e}");
                    rows.push((cell_name.clone(), seed, format!("error: {e}"), f64::NAN));
                }
            }
        }
    }
    let mut csv = String::from("cell,seed,status,final_test_accuracy\n");
    for (cell, seed, status, acc) in &rows {
        csv.push_str(&format!("{cell},{seed},\"{status}\",{acc}\n"));
    }
    let agg = base.out_dir.join("aggregate.csv");
    fs::write(&agg, csv).map_err(|e| Error::io(&agg, e))?;
    println!("sweep complete: {} rows in {}", rows.len(), agg.display());
    Ok(())
}

fn cmd_report(runs: &[PathBuf]) -> Result<(), Error> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut accs = Vec::new();
    for run in runs {
        let path = run.join("summary.json");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let summary: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let acc = summary["final_test_accuracy"].as_f64().unwrap_or(f64::NAN);
        let method = summary["config"]["method"].as_str().unwrap_or("?").to_string();
        let seed = summary["seed"].as_u64().unwrap_or(0);
        let tail = summary["tail_accuracy"].as_f64().unwrap_or(f64::NAN);
        println!(
            "{}: method {method} seed {seed} accuracy {acc:.4} tail accuracy {tail:.4}",
            run.display()
        );
        accs.push(acc);
    }
    if accs.len() > 1 {
        let (mean, stdev) = mean_stdev(&accs);
        println!("aggregate over {} runs: {:.4} ± {:.4}", accs.len(), mean, stdev);
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { config } => cmd_synth(config),
        Command::Train { config, seeds, resume } => cmd_train(config, seeds.as_deref(), *resume),
        Command::Eval { run, config } => cmd_eval(run, config),
        Command::Sweep { config, grid, seeds } => cmd_sweep(config, grid, seeds),
        Command::Report { runs } => cmd_report(runs),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

