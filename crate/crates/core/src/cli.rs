//! Command-line front end: `gendata`, `train`, `eval` and `verify`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{parse_ablations, parse_stage_epochs, RunConfig};
use crate::data::{self, generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generation_probe, write_reports, EvalReport};
use crate::objectives::Stage;
use crate::trainer::{self, checkpoint, restore, write_atomic, EpochRecord, Event, TrainState, Trainer};
use crate::verify::{self, VerifyOptions};

pub const THREADS_ENV: &str = "VARIDENT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "varident", version, about = "Variational IDI/IAI disentanglement on synthetic two-modality data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gendata(GendataArgs),
    /// Run the three-stage training schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out identities.
    Eval(EvalArgs),
    /// Run the closed-form, gradient and metric self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the data seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a CSV export next to the dataset.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma list of loss terms to switch off: gmm, lmc, rec, idc, cyc, ambi.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Epochs for stages 1, 2 and 3, e.g. `30,15,30`.
    #[arg(long)]
    pub stage_epochs: Option<String>,
    /// Continue the run in `--out` from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Stop cleanly after this many epochs (used to exercise resumption).
    #[arg(long, hide = true)]
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.json, histogram.csv and embeddings.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Protocol seed for gallery draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = verify::MC_SAMPLES)]
    pub mc_samples: usize,
    /// Scales the closed-form divergences; any value but 1 must fail.
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub tamper_kl_scale: f64,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = thread_cap().and_then(|threads| match cli.command {
        Command::Gendata(a) => run_gendata(&a).map(|_| 0),
        Command::Train(a) => run_train(&a, threads).map(|_| 0),
        Command::Eval(a) => run_eval(&a).map(|_| 0),
        Command::Verify(a) => run_verify(&a, threads),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Worker threads allowed by `VARIDENT_THREADS`, defaulting to the
/// machine's parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn run_gendata(args: &GendataArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.data.seed = seed;
    }
    config.validate()?;
    let dataset = generate(&config.data, config.data.seed)?;
    let bytes = dataset.to_bytes();
    let probe = generation_probe(&dataset)?;
    let provenance = json!({
        "tool": "varident",
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config.hash(),
        "seed": config.data.seed,
        "dataset_sha256": sha256_hex(&bytes),
        "dataset_format": data::FORMAT_VERSION,
        "samples": dataset.len(),
        "identity_probe": probe,
    });
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    write_atomic(&args.out, &bytes)?;
    write_atomic(&sibling(&args.out, ".provenance.json"), to_json(&provenance).as_bytes())?;
    if args.csv {
        dataset.write_csv(&sibling(&args.out, ".csv"))?;
    }
    eprintln!(
        "wrote {} samples to {} (identity probe: raw {:.3}, shared {:.3}, chance {:.3})",
        dataset.len(),
        args.out.display(),
        probe.raw_accuracy,
        probe.shared_accuracy,
        probe.chance
    );
    Ok(())
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                format!("{} is in use by another run (remove .lock if stale)", dir.display()),
                e,
            )),
            Err(e) => Err(Error::io(format!("locking {}", dir.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// File names inside a run directory.
pub mod run_files {
    pub const CONFIG: &str = "config.toml";
    pub const PROVENANCE: &str = "provenance.json";
    pub const DATA: &str = "data.vrds";
    pub const METRICS_STREAM: &str = "metrics.jsonl";
    pub const LAST_CHECKPOINT: &str = "last.ckpt";

    pub fn stage_checkpoint(stage: u32) -> String {
        format!("stage{stage}.ckpt")
    }
}

fn epoch_line(r: &EpochRecord) -> Value {
    let terms: Map<String, Value> = r
        .terms
        .iter()
        .map(|(t, v)| (t.name().to_string(), v.map_or(Value::Null, Value::from)))
        .collect();
    json!({
        "event": "epoch",
        "stage": r.stage.number(),
        "epoch": r.epoch,
        "step": r.step,
        "total": r.total,
        "terms": terms,
    })
}

fn snapshot_line(stage: Stage, step: u64, report: &EvalReport) -> Value {
    json!({
        "event": "stage_done",
        "stage": stage.number(),
        "step": step,
        "rank1": report.retrieval.rank1,
        "map": report.retrieval.map,
        "gap": report.distance_stats.gap,
        "idi_accuracy": report.probe.idi_accuracy,
        "iai_accuracy": report.probe.iai_accuracy,
        "collapsed": report.collapse.collapsed,
    })
}

fn append_line(path: &Path, line: &Value) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("appending to {}", path.display()), e))
}

/// Drops stream lines written after the checkpoint being resumed from.
fn truncate_stream(path: &Path, state: &TrainState) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let step = v["step"].as_u64().unwrap_or(u64::MAX);
        let stage = v["stage"].as_u64().unwrap_or(u64::MAX);
        let keep = step < state.step
            || (step == state.step
                && match v["event"].as_str() {
                    Some("stage_done") => stage < u64::from(state.stage.number()) || state.stage == Stage::Three,
                    _ => true,
                });
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_atomic(path, kept.as_bytes())
}

fn resolve_run(args: &TrainArgs) -> Result<(RunConfig, PathBuf)> {
    if args.resume {
        if args.config.is_some() || args.seed.is_some() || args.ablate.is_some() || args.stage_epochs.is_some() || args.data.is_some() {
            return Err(Error::Config("--resume takes the run's own config; drop the other flags".into()));
        }
        let out = args
            .out
            .clone()
            .ok_or_else(|| Error::Config("--resume needs --out".into()))?;
        let config = RunConfig::load(&out.join(run_files::CONFIG))?;
        return Ok((config, out));
    }
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(e) = &args.stage_epochs {
        config.training.epochs = parse_stage_epochs(e)?;
    }
    if let Some(list) = &args.ablate {
        config.loss = config.loss.with_ablations(&parse_ablations(list)?)?;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    config.validate()?;
    let out = config.out.clone();
    Ok((config, out))
}

pub fn run_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let (mut config, out) = resolve_run(args)?;
    let dataset = if args.resume {
        Dataset::read(&out.join(run_files::DATA))?
    } else if let Some(path) = &args.data {
        let ds = Dataset::read(path)?;
        config.data = ds.config().clone();
        config.validate()?;
        ds
    } else {
        generate(&config.data, config.data.seed)?
    };
    let trainer = Trainer::new(&dataset, config.training.clone(), config.loss)?;

    if !args.resume && out.join(run_files::CONFIG).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume or choose another --out",
            out.display()
        )));
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let _lock = RunLock::acquire(&out)?;
    let stream = out.join(run_files::METRICS_STREAM);

    let mut state = if args.resume {
        let state = restore(&out.join(run_files::LAST_CHECKPOINT))?;
        if state.model.dims() != &trainer.dims(&config.model) || state.seed != config.seed {
            return Err(Error::Config("checkpoint does not match the run config".into()));
        }
        truncate_stream(&stream, &state)?;
        state
    } else {
        let bytes = dataset.to_bytes();
        write_atomic(&out.join(run_files::CONFIG), config.to_toml().as_bytes())?;
        write_atomic(&out.join(run_files::DATA), &bytes)?;
        let ablated: Vec<&str> = crate::objectives::ABLATABLE
            .iter()
            .filter(|&&t| (1..=3).all(|s| config.loss.effective(t, Stage::try_from(s).expect("stage")) == 0.0))
            .map(|t| t.name())
            .collect();
        let provenance = json!({
            "tool": "varident",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": config.hash(),
            "seed": config.seed,
            "data_seed": config.data.seed,
            "dataset_sha256": sha256_hex(&bytes),
            "dataset_format": data::FORMAT_VERSION,
            "checkpoint_format": trainer::CHECKPOINT_VERSION,
            "ablated_terms": ablated,
            "threads": threads,
        });
        write_atomic(&out.join(run_files::PROVENANCE), to_json(&provenance).as_bytes())?;
        write_atomic(&stream, b"")?;
        trainer.init_state(&config.model, config.seed)?
    };

    let mut epochs_run = 0usize;
    let stop_after = args.stop_after_epochs;
    let last = out.join(run_files::LAST_CHECKPOINT);
    trainer.run(&mut state, &mut |event, state| {
        match event {
            Event::Epoch(r) => {
                append_line(&stream, &epoch_line(r))?;
                checkpoint(state, &last)?;
                eprintln!("stage {} epoch {:>3}  loss {:.5}", r.stage, r.epoch, r.total);
                epochs_run += 1;
                Ok(stop_after.map_or(true, |n| epochs_run < n))
            }
            Event::StageDone(stage) => {
                let (report, _) = evaluate(&state.model, &dataset, config.eval_seed)?;
                append_line(&stream, &snapshot_line(stage, state.step, &report))?;
                checkpoint(state, &out.join(run_files::stage_checkpoint(stage.number())))?;
                checkpoint(state, &last)?;
                eprintln!(
                    "stage {stage} done: mAP {:.4}  rank-1 {:.4}  gap {:.4}",
                    report.retrieval.map, report.retrieval.rank1, report.distance_stats.gap
                );
                Ok(true)
            }
        }
    })?;
    if state.is_finished(trainer.config()) {
        let (report, embeddings) = evaluate(&state.model, &dataset, config.eval_seed)?;
        write_reports(&out, &report, &embeddings)?;
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let state = restore(&args.checkpoint)?;
    let dataset = Dataset::read(&args.data)?;
    let (report, embeddings) = evaluate(&state.model, &dataset, args.seed).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(format!("checkpoint does not fit the dataset: {m}")),
        other => other,
    })?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    write_reports(&args.out, &report, &embeddings)?;
    eprintln!(
        "mAP {:.4}  rank-1 {:.4}  rank-10 {:.4}  gap {:.4}",
        report.retrieval.map, report.retrieval.rank1, report.retrieval.rank10, report.distance_stats.gap
    );
    Ok(())
}

/// Runs the verify suite; returns exit code 2 if any check fails.
pub fn run_verify(args: &VerifyArgs, threads: usize) -> Result<i32> {
    if args.mc_samples < 2 {
        return Err(Error::Config("--mc-samples must be at least 2".into()));
    }
    let options = VerifyOptions {
        mc_samples: args.mc_samples,
        kl_scale: args.tamper_kl_scale,
    };
    let report = verify::run_parallel(args.seed, &options, threads)?;
    for c in &report.checks {
        println!(
            "{} {:<34} residual {:.3e}  tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.residual,
            c.tolerance
        );
    }
    if let Some(path) = &args.out {
        write_atomic(path, to_json(&report).as_bytes())?;
    }
    Ok(if report.passed { 0 } else { 2 })
}
