//! The `sohwm` command line: synthesise data, train, evaluate, roll out,
//! sweep horizons and export latent PCA.
//!
//! Every command writing files takes a fresh output directory; an existing
//! non-empty directory is refused so finished runs are never modified.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{builder::PossibleValuesParser, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_all_windows, build_windows, export_dataset, load_dataset, stratified_split, CellRecord, LoadOptions,
    SplitAssignment, SplitSizes, Window,
};
use crate::eval::{
    emit_report, evaluate, model_pca, predict_records, write_trajectories, DEFAULT_HORIZONS, PCA_FILE,
    TRAJECTORY_FILE,
};
use crate::net::{Model, NetConfig};
use crate::parallel::Parallelism;
use crate::synth::{generate_fleet, FleetRanges};
use crate::train::{sweep_horizons, train, TrainConfig, TrainData};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FISHER_FILE: &str = "fisher.bin";
pub const HISTORY_FILE: &str = "history.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SWEEP_FILE: &str = "sweep.tsv";

const VARIANT_NAMES: [&str; 5] = ["piwm", "wm", "cnn-patchtst", "piwm-ewc", "lstm"];

/// Network and training settings of one experiment, as stored in
/// `config.toml`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Apply `section.field=value` overrides. Values are read as TOML and
    /// fall back to plain strings.
    pub fn apply_overrides(&mut self, sets: &[String]) -> anyhow::Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut root = toml::Table::try_from(&*self)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not key=value"))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, path) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in path {
                table = table
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| anyhow!("unknown config section {p:?} in {key:?}"))?;
            }
            if !table.contains_key(*last) {
                bail!("unknown config key {key:?}");
            }
            table.insert(last.to_string(), value);
        }
        let par = self.train.parallelism;
        *self = root.try_into().context("applying overrides")?;
        self.train.parallelism = par;
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Provenance record written into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    /// SHA-256 over the input directory's file names and contents.
    pub input_hash: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Parser)]
#[command(name = "sohwm", version, about = "Battery state-of-health world model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run all batch work on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fleet dataset.
    Synth(SynthArgs),
    /// Train one variant and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a trained run on a split of a dataset.
    Eval(EvalArgs),
    /// Print one window's forecast as tab-separated text.
    Rollout(RolloutArgs),
    /// Train once per forecast horizon and tabulate test errors.
    SweepH(SweepArgs),
    /// Export the latent PCA projection of a trained run.
    Pca(PcaArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of cells.
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    pub cells: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output dataset directory (must not exist or be empty).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with fleet ranges.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Canonical samples per cycle.
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Raw samples per cycle at full health.
    #[arg(long)]
    pub samples_per_cycle: Option<usize>,
    /// Capacity noise standard deviation (SOH units).
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

/// Flags shared by commands that build an experiment configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with `[net]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.max_epochs=40`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub fisher_epoch: Option<usize>,
    /// Window length W in cycles.
    #[arg(long)]
    pub window: Option<usize>,
    /// Forecast horizon H in cycles.
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = PossibleValuesParser::new(VARIANT_NAMES))]
    pub variant: String,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Cell exclusion list (default: `exclude.txt` in the dataset).
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated horizons for trajectory MAE.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS)]
    pub horizons: Vec<usize>,
    #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(["train", "val", "test"]))]
    pub split: String,
    /// Expected-configuration override, checked against the checkpoint.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cell: String,
    /// Anchor cycle index; defaults to the cell's first evaluable anchor.
    #[arg(long)]
    pub anchor: Option<u32>,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_parser = PossibleValuesParser::new(VARIANT_NAMES))]
    pub variant: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated horizons to train.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 80, 100])]
    pub horizons: Vec<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(["train", "val", "test"]))]
    pub split: String,
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

/// Parse arguments, run the command and return the exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, err) = match &e {
                CliError::Usage(err) => (e.exit_code(), err),
                CliError::Runtime(err) => (e.exit_code(), err),
            };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        "warn"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::new(format!("sohwm={level}")))
        .with_target(false)
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let par = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, par),
        Command::Eval(a) => cmd_eval(a, par),
        Command::Rollout(a) => cmd_rollout(a, par),
        Command::SweepH(a) => cmd_sweep(a, par),
        Command::Pca(a) => cmd_pca(a, par),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Create `dir`, refusing to reuse a non-empty directory.
pub fn create_fresh_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
        if entries.next().is_some() {
            bail!(
                "output directory {} already exists and is not empty; choose a new path",
                dir.display()
            );
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// SHA-256 over the sorted file names and contents of a directory's files.
pub fn hash_directory(dir: &Path) -> anyhow::Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().expect("file has a name").to_string_lossy().into_owned();
        let body = fs::read(&f)?;
        h.update(format!("{name}\0{}\0", body.len()).as_bytes());
        h.update(&body);
    }
    Ok(hex::encode(h.finalize()))
}

fn write_manifest(dir: &Path, mut m: RunManifest) -> anyhow::Result<()> {
    m.finished_at = now();
    m.outputs.sort();
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn list_outputs(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    v.push(MANIFEST_FILE.to_string());
    v.sort();
    v.dedup();
    v
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut ranges = match &a.config {
        Some(p) => toml::from_str::<FleetRanges>(&fs::read_to_string(p).map_err(usage)?).map_err(usage)?,
        None => FleetRanges::default(),
    };
    if let Some(t) = a.t_max {
        ranges.t_max = t;
    }
    if let Some(s) = a.samples_per_cycle {
        ranges.samples_per_cycle = s;
    }
    if let Some(n) = a.noise_sd {
        ranges.noise_sd = n;
    }
    let cells = generate_fleet(a.cells as usize, &ranges, a.seed).map_err(usage)?;
    create_fresh_dir(&a.out)?;
    export_dataset(&cells, &a.out)?;
    tracing::info!(cells = cells.len(), out = %a.out.display(), "synthetic fleet written");
    Ok(())
}

fn build_config(c: &ConfigArgs, variant: Option<&str>, par: Parallelism) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(CliError::Usage)?,
        None => ExperimentConfig::default(),
    };
    cfg.train.parallelism = par;
    if let Some(v) = c.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = c.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = c.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = c.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = c.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = c.fisher_epoch {
        cfg.train.fisher_epoch = v;
    }
    if let Some(v) = c.window {
        cfg.net.window = v;
    }
    if let Some(v) = c.horizon {
        cfg.net.horizon = v;
    }
    cfg.apply_overrides(&c.sets).map_err(CliError::Usage)?;
    if let Some(v) = variant {
        cfg.train.variant = v.parse().map_err(usage)?;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn load_cells(data: &Path, t_max: usize, exclude: Option<PathBuf>, par: Parallelism) -> anyhow::Result<Vec<CellRecord>> {
    let loaded = load_dataset(
        data,
        &LoadOptions {
            t_max,
            exclude,
            parallelism: par,
        },
    )?;
    for r in &loaded.rejected {
        tracing::warn!(cell = %r.cell_id, reason = %r.reason, "cell rejected");
    }
    if loaded.cells.is_empty() {
        bail!("no usable cells in {}", data.display());
    }
    Ok(loaded.cells)
}

fn split_windows(cells: &[CellRecord], split: &SplitAssignment, which: &str, net: &NetConfig) -> Vec<Window> {
    let (tr, va, te) = split.indices(cells);
    let idx = match which {
        "train" => tr,
        "val" => va,
        _ => te,
    };
    build_all_windows(cells, &idx, net.window, net.horizon)
}

fn cmd_train(a: TrainArgs, par: Parallelism) -> Result<(), CliError> {
    let started = now();
    let cfg = build_config(&a.cfg, Some(&a.variant), par)?;
    create_fresh_dir(&a.out)?;
    let cells = load_cells(&a.data, cfg.net.t_max, a.exclude.clone(), par)?;
    let split = stratified_split(&cells, SplitSizes::proportional(cells.len()), cfg.train.seed)?;
    let data = TrainData::from_split(&cells, &split, &cfg.net);
    tracing::info!(
        variant = %cfg.train.variant,
        cells = cells.len(),
        train_windows = data.train.len(),
        val_windows = data.val.len(),
        "training"
    );
    let outcome = train(&data, &cfg.net, &cfg.train)?;

    let out = &a.out;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()).context("writing config")?;
    fs::write(out.join(SPLIT_FILE), serde_json::to_string_pretty(&split).context("split")? + "\n")
        .context("writing split")?;
    outcome.model.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(HISTORY_FILE), outcome.history.to_tsv()).context("writing history")?;
    if let Some(f) = &outcome.fisher {
        f.save(&out.join(FISHER_FILE), outcome.model.architecture(), outcome.model.config())?;
    }
    let test = split_windows(&cells, &split, "test", &cfg.net);
    if test.is_empty() {
        tracing::warn!("test split has no evaluable windows; no metrics written");
    } else {
        write_evaluation(
            &outcome.model,
            &cells,
            &test,
            &horizons_for(&outcome.model),
            cfg.train.variant.name(),
            out,
            par,
        )?;
    }
    write_manifest(
        out,
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "train".into(),
            variant: Some(cfg.train.variant.to_string()),
            seed: Some(cfg.train.seed),
            config: Some(cfg.to_toml()),
            input_hash: Some(hash_directory(&a.data)?),
            inputs: vec![a.data.display().to_string()],
            outputs: list_outputs(out),
            started_at: started,
            finished_at: String::new(),
        },
    )?;
    Ok(())
}

fn horizons_for(model: &Model) -> Vec<usize> {
    if !model.architecture().has_trajectory() {
        return Vec::new();
    }
    DEFAULT_HORIZONS
        .iter()
        .copied()
        .filter(|&h| h <= model.config().horizon)
        .collect()
}

fn write_evaluation(
    model: &Model,
    cells: &[CellRecord],
    windows: &[Window],
    horizons: &[usize],
    method: &str,
    out: &Path,
    par: Parallelism,
) -> anyhow::Result<()> {
    let refs: Vec<&Window> = windows.iter().collect();
    let report = evaluate(model, cells, &refs, horizons, par)?;
    let pca = if model.architecture().has_trajectory() && refs.len() >= 3 {
        Some(model_pca(model, cells, &refs, par)?)
    } else {
        None
    };
    emit_report(out, &report, method, pca.as_ref())?;
    write_trajectories(&out.join(TRAJECTORY_FILE), &predict_records(model, cells, &refs, par)?)?;
    Ok(())
}

struct LoadedRun {
    cfg: ExperimentConfig,
    model: Model,
    split: SplitAssignment,
}

fn load_run(run: &Path, sets: &[String]) -> Result<LoadedRun, CliError> {
    let mut cfg = ExperimentConfig::from_file(&run.join(CONFIG_FILE)).map_err(CliError::Usage)?;
    cfg.apply_overrides(sets).map_err(CliError::Usage)?;
    let model = Model::load(&run.join(CHECKPOINT_FILE), Some(&cfg.net))?;
    let split_path = run.join(SPLIT_FILE);
    let split: SplitAssignment = serde_json::from_str(
        &fs::read_to_string(&split_path).with_context(|| format!("reading {}", split_path.display()))?,
    )
    .with_context(|| format!("parsing {}", split_path.display()))?;
    Ok(LoadedRun { cfg, model, split })
}

fn cmd_eval(a: EvalArgs, par: Parallelism) -> Result<(), CliError> {
    let started = now();
    let run = load_run(&a.run, &a.sets)?;
    let h = run.cfg.net.horizon;
    if !run.model.architecture().has_trajectory() {
        tracing::info!("model has no trajectory output; horizon MAE skipped");
    } else if let Some(bad) = a.horizons.iter().find(|&&x| x == 0 || x > h) {
        return Err(usage(anyhow!("--horizons {bad} is outside 1..={h}")));
    }
    let horizons = if run.model.architecture().has_trajectory() {
        a.horizons.clone()
    } else {
        Vec::new()
    };
    create_fresh_dir(&a.out)?;
    let cells = load_cells(&a.data, run.cfg.net.t_max, None, par)?;
    let windows = split_windows(&cells, &run.split, &a.split, &run.cfg.net);
    if windows.is_empty() {
        return Err(anyhow!("the {} split has no evaluable windows", a.split).into());
    }
    write_evaluation(
        &run.model,
        &cells,
        &windows,
        &horizons,
        run.cfg.train.variant.name(),
        &a.out,
        par,
    )?;
    write_manifest(
        &a.out,
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "eval".into(),
            variant: Some(run.cfg.train.variant.to_string()),
            seed: Some(run.cfg.train.seed),
            config: Some(run.cfg.to_toml()),
            input_hash: Some(hash_directory(&a.data)?),
            inputs: vec![a.run.display().to_string(), a.data.display().to_string()],
            outputs: list_outputs(&a.out),
            started_at: started,
            finished_at: String::new(),
        },
    )?;
    Ok(())
}

fn cmd_rollout(a: RolloutArgs, par: Parallelism) -> Result<(), CliError> {
    let run = load_run(&a.run, &[])?;
    if !run.model.architecture().has_trajectory() {
        return Err(crate::Error::Unsupported("the LSTM baseline cannot produce a multi-step trajectory".into()).into());
    }
    let cells = load_cells(&a.data, run.cfg.net.t_max, None, par)?;
    let idx = cells
        .iter()
        .position(|c| c.cell_id == a.cell)
        .ok_or_else(|| usage(anyhow!("no cell {:?} in {}", a.cell, a.data.display())))?;
    let net = &run.cfg.net;
    let windows = build_windows(&cells[idx], idx, net.window, net.horizon);
    let w = match a.anchor {
        Some(k) => windows
            .iter()
            .find(|w| w.anchor_cycle == k)
            .ok_or_else(|| usage(anyhow!("cycle {k} is not an evaluable anchor of {}", a.cell)))?,
        None => windows
            .first()
            .ok_or_else(|| anyhow!("cell {} is too short for W={} and H={}", a.cell, net.window, net.horizon))?,
    };
    let (now_hat, future) = run.model.forward_trajectory(&cells, w)?;
    let anchor_pos = w.anchor_pos();
    let cycles = &cells[idx].cycles;
    let mut s = String::from("h\tcycle\tsoh_pred\tsoh_true\n");
    let _ = writeln!(s, "0\t{}\t{now_hat}\t{}", w.anchor_cycle, w.soh_now);
    for (h, (p, t)) in future.iter().zip(&w.soh_future).enumerate() {
        let _ = writeln!(s, "{}\t{}\t{p}\t{t}", h + 1, cycles[anchor_pos + h + 1].cycle_index);
    }
    match &a.out {
        Some(p) => fs::write(p, s).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{s}"),
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, par: Parallelism) -> Result<(), CliError> {
    let started = now();
    let cfg = build_config(&a.cfg, Some(&a.variant), par)?;
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return Err(usage(anyhow!("--horizons must list positive values")));
    }
    create_fresh_dir(&a.out)?;
    let cells = load_cells(&a.data, cfg.net.t_max, None, par)?;
    let split = stratified_split(&cells, SplitSizes::proportional(cells.len()), cfg.train.seed)?;
    let rows = sweep_horizons(&cells, &split, &cfg.net, &cfg.train, &a.horizons)?;
    let mut s = String::from("horizon\ttest_windows\toverall_mae\ttrajectory_mae\tbest_val_mae\n");
    for r in &rows {
        let traj = r.trajectory_mae.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{traj}\t{}",
            r.horizon, r.test_windows, r.overall_mae, r.best_val_mae
        );
    }
    fs::write(a.out.join(SWEEP_FILE), &s).context("writing sweep table")?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_toml()).context("writing config")?;
    print!("{s}");
    write_manifest(
        &a.out,
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "sweep-h".into(),
            variant: Some(cfg.train.variant.to_string()),
            seed: Some(cfg.train.seed),
            config: Some(cfg.to_toml()),
            input_hash: Some(hash_directory(&a.data)?),
            inputs: vec![a.data.display().to_string()],
            outputs: list_outputs(&a.out),
            started_at: started,
            finished_at: String::new(),
        },
    )?;
    Ok(())
}

fn cmd_pca(a: PcaArgs, par: Parallelism) -> Result<(), CliError> {
    let started = now();
    let run = load_run(&a.run, &[])?;
    if !run.model.architecture().has_trajectory() {
        return Err(crate::Error::Unsupported("the LSTM baseline has no latent state".into()).into());
    }
    create_fresh_dir(&a.out)?;
    let cells = load_cells(&a.data, run.cfg.net.t_max, None, par)?;
    let windows = split_windows(&cells, &run.split, &a.split, &run.cfg.net);
    let refs: Vec<&Window> = windows.iter().collect();
    let pca = model_pca(&run.model, &cells, &refs, par)?;
    let mut s = String::from("pc1\tpc2\tsoh\tcell_id\n");
    for ((c, soh), id) in pca.coords.iter().zip(&pca.soh).zip(&pca.cell_ids) {
        let _ = writeln!(s, "{}\t{}\t{soh}\t{id}", c[0], c[1]);
    }
    fs::write(a.out.join(PCA_FILE), s).context("writing PCA table")?;
    fs::write(
        a.out.join("pca_variance.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "pc1": pca.ratios[0], "pc2": pca.ratios[1] }))
            .context("variance ratios")?
            + "\n",
    )
    .context("writing variance ratios")?;
    write_manifest(
        &a.out,
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "pca".into(),
            variant: Some(run.cfg.train.variant.to_string()),
            seed: Some(run.cfg.train.seed),
            config: Some(run.cfg.to_toml()),
            input_hash: Some(hash_directory(&a.data)?),
            inputs: vec![a.run.display().to_string(), a.data.display().to_string()],
            outputs: list_outputs(&a.out),
            started_at: started,
            finished_at: String::new(),
        },
    )?;
    Ok(())
}
