//! `pkforecast` command-line tool.
//!
//! Every command writes its artifacts under `--out` using the fixed layout
//! `checkpoints/`, `reports/`, `logs/` and a single `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use pkforecast::data::{covering_grid, ingest_events, read_aligned_csv, read_events, write_aligned_csv, PreprocessConfig};
use pkforecast::eval::{evaluate_checkpoints, CounterfactualTable, KTable};
use pkforecast::model::{Checkpoint, FeatureConfig, FeatureMode, TrainingMode, CHECKPOINT_FORMAT};
use pkforecast::synth::{generate, SynthConfig};
use pkforecast::train::{run_trials, write_log, TrainConfig};
use pkforecast::{Dataset, Error};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "pkforecast", version, about = "Glucose forecasting with pharmacokinetic insulin features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as aligned per-patient CSVs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align raw event CSVs (one per patient) onto a 5-minute grid.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preprocessing rules as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = pkforecast::data::DEFAULT_STEP_MINUTES)]
        step_minutes: u32,
    },
    /// Train one model per trial (global) or per trial and patient (local).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        features: Features,
        #[arg(long, value_enum, default_value = "global")]
        mode: Mode,
        /// Training configuration as JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Trailing steps held out from training for evaluation.
        #[arg(long, default_value_t = pkforecast::data::DEFAULT_TEST_STEPS)]
        test_steps: usize,
        /// Drop patient statics from the model input.
        #[arg(long)]
        no_statics: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rolling-forecast evaluation of trained checkpoints on the test partition.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// A checkpoints directory or a `train` output directory.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Defaults to the value recorded by `train`.
        #[arg(long)]
        test_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Final-horizon forecasts with original, removed and scaled boluses.
    Counterfactual {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        scale: f64,
        /// Restrict origins to the trailing test partition; all origins otherwise.
        #[arg(long)]
        test_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate learned absorption constants and test k_bolus > k_basal.
    InspectK {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Univariate,
    Sparse,
    Sumtotal,
    Pk,
}

impl Features {
    fn mode(self) -> FeatureMode {
        match self {
            Self::Univariate => FeatureMode::Univariate,
            Self::Sparse => FeatureMode::SparseExogenous,
            Self::Sumtotal => FeatureMode::SumTotal,
            Self::Pk => FeatureMode::Pharmacokinetic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    Local,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    elapsed_seconds: f64,
    versions: Versions,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_steps: Option<usize>,
}

#[derive(Serialize)]
struct Versions {
    pkforecast: &'static str,
    checkpoint_format: &'static str,
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn read_config(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dirs(out: &Path, subdirs: &[&str]) -> CmdResult<()> {
    for d in subdirs {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_with<F>(path: &Path, f: F) -> CmdResult<()>
where
    F: FnOnce(fs::File) -> pkforecast::Result<()>,
{
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    Ok(f(file)?)
}

/// Sorted `*.<ext>` files of a directory.
fn list_files(dir: &Path, ext: &str) -> CmdResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Aligned CSVs of a directory, one patient per file named after the patient.
fn load_dataset(dir: &Path) -> CmdResult<Dataset> {
    let files = list_files(dir, "csv")?;
    if files.is_empty() {
        return Err(Failure::Runtime(format!("{}: no patient CSV files", dir.display())));
    }
    let records = files
        .iter()
        .map(|p| read_aligned_csv(p, &stem(p)).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))))
        .collect::<CmdResult<Vec<_>>>()?;
    Ok(Dataset::new(records)?)
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join("checkpoints");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_checkpoints(path: &Path) -> CmdResult<Vec<Checkpoint>> {
    let dir = checkpoint_dir(path);
    let cks = list_files(&dir, "json")?
        .into_iter()
        .filter(|p| !stem(p).starts_with("pk_"))
        .map(|p| Checkpoint::load(&p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))))
        .collect::<CmdResult<Vec<_>>>()?;
    if cks.is_empty() {
        return Err(Failure::Runtime(format!("{}: no checkpoints", dir.display())));
    }
    Ok(cks)
}

fn finish(out: &Path, mut manifest: RunManifest, started: Instant) -> CmdResult<()> {
    manifest.elapsed_seconds = started.elapsed().as_secs_f64();
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(&out.join("manifest.json"), &text)
}

fn manifest(command: &str, config_digest: String, inputs: &[&Path]) -> RunManifest {
    RunManifest {
        command: command.into(),
        config_digest,
        seeds: Vec::new(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: Vec::new(),
        elapsed_seconds: 0.0,
        versions: Versions { pkforecast: env!("CARGO_PKG_VERSION"), checkpoint_format: CHECKPOINT_FORMAT },
        test_steps: None,
    }
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn simulate(config: &Path, out: &Path) -> CmdResult<()> {
    let started = Instant::now();
    let text = read_config(config)?;
    let cfg: SynthConfig = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    cfg.validate()?;
    let cohort = generate(&cfg)?;
    create_dirs(out, &["logs"])?;
    let mut m = manifest("simulate", digest(text.as_bytes()), &[config]);
    m.seeds.push(cfg.seed);
    for r in &cohort.dataset.records {
        let p = out.join(format!("{}.csv", r.patient_id));
        write_aligned_csv(r, &p)?;
        m.outputs.push(rel(out, &p));
    }
    let truth = out.join("logs").join("synth_truth.json");
    let text = serde_json::to_string_pretty(&cohort.manifest()).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(&truth, &text)?;
    m.outputs.push(rel(out, &truth));
    finish(out, m, started)
}

fn ingest(events: &Path, out: &Path, config: Option<&Path>, step_minutes: u32) -> CmdResult<()> {
    let started = Instant::now();
    let (rules, text) = match config {
        Some(p) => {
            let text = read_config(p)?;
            let rules: PreprocessConfig =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            (rules, text)
        }
        None => (PreprocessConfig::default(), String::new()),
    };
    if step_minutes == 0 {
        return Err(Failure::Usage("step minutes must be positive".into()));
    }
    let files = list_files(events, "csv")?;
    if files.is_empty() {
        return Err(Failure::Runtime(format!("{}: no event CSV files", events.display())));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut m = manifest("ingest", digest(format!("{text}|{step_minutes}").as_bytes()), &[events]);
    for f in files {
        let ctx = |e: Error| Failure::Runtime(format!("{}: {e}", f.display()));
        let file = fs::File::open(&f).map_err(|e| io_err(&f, e))?;
        let evs = read_events(file).map_err(ctx)?;
        let grid = covering_grid(&evs, step_minutes).map_err(ctx)?;
        let id = rules.patient_id.clone().unwrap_or_else(|| stem(&f));
        let record = ingest_events(&evs, grid, &rules, &id).map_err(ctx)?;
        let p = out.join(format!("{id}.csv"));
        write_aligned_csv(&record, &p)?;
        m.outputs.push(rel(out, &p));
    }
    finish(out, m, started)
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    features: Features,
    mode: Mode,
    config: Option<&Path>,
    trials: usize,
    test_steps: usize,
    statics: bool,
    out: &Path,
) -> CmdResult<()> {
    let started = Instant::now();
    let text = match config {
        Some(p) => read_config(p)?,
        None => "{}".into(),
    };
    let mut cfg = TrainConfig::from_json(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.mode = match mode {
        Mode::Global => TrainingMode::Global,
        Mode::Local => TrainingMode::Local,
    };
    cfg.validate()?;
    if trials == 0 {
        return Err(Failure::Usage("--trials must be at least 1".into()));
    }
    let features = FeatureConfig::new(features.mode(), statics);
    let dataset = load_dataset(data)?;
    let (train_part, _) = dataset.split(test_steps)?;
    let set = run_trials(&train_part, &cfg, &features, trials)?;

    create_dirs(out, &["checkpoints", "logs", "reports"])?;
    let effective = serde_json::to_string(&(&cfg, &features, trials, test_steps)).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut m = manifest("train", digest(effective.as_bytes()), &[data]);
    m.seeds = set.seeds();
    m.test_steps = Some(test_steps);
    for run in &set.trials {
        for outcome in &run.models {
            let name = match set.mode {
                TrainingMode::Global => format!("trial{:02}", run.trial),
                TrainingMode::Local => format!("trial{:02}_{}", run.trial, outcome.patient_ids[0]),
            };
            let ck = outcome.checkpoint(set.mode, run.trial, run.seed);
            let p = out.join("checkpoints").join(format!("{name}.json"));
            ck.save(&p)?;
            m.outputs.push(rel(out, &p));
            if let Some(pk) = &outcome.pk {
                let p = out.join("checkpoints").join(format!("pk_{name}.json"));
                write_text(&p, &pk.to_json()?)?;
                m.outputs.push(rel(out, &p));
            }
            let p = out.join("logs").join(format!("{name}.jsonl"));
            write_with(&p, |f| write_log(&outcome.log, f))?;
            m.outputs.push(rel(out, &p));
        }
    }
    finish(out, m, started)
}

/// `test_steps` recorded by a `train` run, if `path` is one.
fn recorded_test_steps(path: &Path) -> Option<usize> {
    let text = fs::read_to_string(path.join("manifest.json"))
        .ok()
        .or_else(|| fs::read_to_string(path.parent()?.join("manifest.json")).ok())?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("test_steps")?.as_u64().map(|n| n as usize)
}

fn evaluate(data: &Path, checkpoints: &Path, test_steps: Option<usize>, out: &Path) -> CmdResult<()> {
    let started = Instant::now();
    let test_steps = test_steps
        .or_else(|| recorded_test_steps(checkpoints))
        .unwrap_or(pkforecast::data::DEFAULT_TEST_STEPS);
    let cks = load_checkpoints(checkpoints)?;
    let dataset = load_dataset(data)?;
    let mode_label = format!(
        "{}-{}",
        serde_json::to_value(cks[0].features.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        match cks[0].meta.mode {
            TrainingMode::Global => "global",
            TrainingMode::Local => "local",
        }
    );
    let report = evaluate_checkpoints(&mode_label, &cks, &dataset, test_steps)?;

    create_dirs(out, &["reports"])?;
    let mut m = manifest("evaluate", digest(format!("{test_steps}").as_bytes()), &[data, checkpoints]);
    m.test_steps = Some(test_steps);
    let mut seeds: Vec<u64> = cks.iter().map(|c| c.meta.seed).collect();
    seeds.dedup();
    m.seeds = seeds;
    let json = out.join("reports").join("eval.json");
    write_text(&json, &report.to_json()?)?;
    let csv = out.join("reports").join("eval.csv");
    write_with(&csv, |f| report.write_csv(f))?;
    m.outputs.extend([rel(out, &json), rel(out, &csv)]);
    finish(out, m, started)
}

#[derive(Serialize)]
struct CounterfactualSummary {
    patient: String,
    scale: f64,
    origins: usize,
    mean_original: f64,
    mean_zeroed: f64,
    mean_scaled: f64,
}

fn counterfactual(checkpoint: &Path, data: &Path, scale: f64, test_steps: Option<usize>, out: &Path) -> CmdResult<()> {
    let started = Instant::now();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Failure::Usage(format!("--scale must be positive, got {scale}")));
    }
    let ck = Checkpoint::load(checkpoint).map_err(|e| Failure::Runtime(format!("{}: {e}", checkpoint.display())))?;
    if ck.features.mode != FeatureMode::Pharmacokinetic {
        return Err(Failure::Runtime(format!(
            "{}: counterfactual analysis needs a pharmacokinetic checkpoint",
            checkpoint.display()
        )));
    }
    let model = ck.model()?;
    let dataset = load_dataset(data)?.select(&ck.patient_ids)?;

    create_dirs(out, &["reports"])?;
    let mut m = manifest("counterfactual", digest(format!("{scale}|{test_steps:?}").as_bytes()), &[checkpoint, data]);
    m.seeds.push(ck.meta.seed);
    m.test_steps = test_steps;
    let mut summary = Vec::new();
    for r in &dataset.records {
        let first = test_steps.map_or(0, |t| r.len().saturating_sub(t));
        let table = CounterfactualTable::compute(&model, ck.pk.as_ref(), r, scale, first)?;
        let p = out.join("reports").join(format!("counterfactual_{}.csv", r.patient_id));
        write_with(&p, |f| table.write_csv(f))?;
        m.outputs.push(rel(out, &p));
        let (o, z, s) = table.means();
        summary.push(CounterfactualSummary {
            patient: r.patient_id.clone(),
            scale,
            origins: table.original.len(),
            mean_original: o,
            mean_zeroed: z,
            mean_scaled: s,
        });
    }
    let p = out.join("reports").join("counterfactual_summary.json");
    write_text(&p, &serde_json::to_string_pretty(&summary).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    m.outputs.push(rel(out, &p));
    finish(out, m, started)
}

fn inspect_k(checkpoints: &Path, out: &Path) -> CmdResult<()> {
    let started = Instant::now();
    let cks = load_checkpoints(checkpoints)?;
    let table = KTable::from_checkpoints(&cks)?;
    create_dirs(out, &["reports"])?;
    let mut m = manifest("inspect-k", digest(b""), &[checkpoints]);
    let mut seeds: Vec<u64> = cks.iter().map(|c| c.meta.seed).collect();
    seeds.dedup();
    m.seeds = seeds;
    let csv = out.join("reports").join("k_table.csv");
    write_with(&csv, |f| table.write_csv(f))?;
    let json = out.join("reports").join("k_test.json");
    write_text(&json, &serde_json::to_string_pretty(&table).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    m.outputs.extend([rel(out, &csv), rel(out, &json)]);
    finish(out, m, started)
}

fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, &out),
        Command::Ingest { events, out, config, step_minutes } => ingest(&events, &out, config.as_deref(), step_minutes),
        Command::Train { data, features, mode, config, trials, test_steps, no_statics, out } => {
            train(&data, features, mode, config.as_deref(), trials, test_steps, !no_statics, &out)
        }
        Command::Evaluate { data, checkpoints, test_steps, out } => evaluate(&data, &checkpoints, test_steps, &out),
        Command::Counterfactual { checkpoint, data, scale, test_steps, out } => {
            counterfactual(&checkpoint, &data, scale, test_steps, &out)
        }
        Command::InspectK { checkpoints, out } => inspect_k(&checkpoints, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
