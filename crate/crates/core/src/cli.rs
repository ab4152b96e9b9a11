//! Command-line front end.
//!
//! Every subcommand that writes output also writes a run record (`run.json`
//! inside an output directory, `<file>.run.json` next to an output file)
//! holding the effective configuration, seeds, tool version and retrieval
//! records. Run records carry no timestamps, so reruns are byte-identical.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 invalid data,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bundle::{load_bundle, save_bundle, select_measured_subset, HrirBundle, MeasurementSubset};
use crate::dsp::ItdConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, MeanScores};
use crate::ranf_model::{predict_subject, Checkpoint, PredictConfig};
use crate::retrieval::{retrieve_topk, FeatureStore, RetrievalCriterion, RetrievalResult, TargetMeasurements};
use crate::synth::{generate_bundle, GridSpec, SynthConfig};
use crate::training::{
    adapt, evaluate_pretrained, run_pretraining, EpochLog, ExperimentConfig, ExperimentReport, TrainState,
};

/// Default bundle directory when `--bundle` is not given.
pub const DATA_DIR_ENV: &str = "RANF_DATA_DIR";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ranf", version, about = "Sparse HRTF upsampling with a retrieval-augmented neural field")]
pub struct Cli {
    /// Worker threads; 1 gives a fully sequential run.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rigid-sphere bundle.
    SynthGen(SynthGenArgs),
    /// Load a bundle and check every invariant.
    Validate(BundleArg),
    /// Select the measured directions D′ on a bundle's grid.
    Subset(SubsetArgs),
    /// Retrieve the subjects closest to a target on D′.
    Retrieve(RetrieveArgs),
    /// Pretrain a model on the training split.
    Pretrain(PretrainArgs),
    /// Fit one subject's target-side vectors from its measurements on D′.
    Adapt(AdaptArgs),
    /// Predict a subject's full grid and write it as a bundle.
    Upsample(UpsampleArgs),
    /// Score a predicted bundle against the truth.
    Evaluate(EvaluateArgs),
    /// Pretrain, adapt and score one sparsity condition, with baselines.
    Experiment(ExperimentArgs),
    /// Aggregate experiment or evaluation reports into one CSV table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct BundleArg {
    #[arg(long, env = DATA_DIR_ENV)]
    pub bundle: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub subjects: usize,
    /// `icosphere:<level>`, `octahedron` or `horizontal:<count>`.
    #[arg(long, default_value = "icosphere:2")]
    pub grid: GridSpec,
    #[arg(long, default_value_t = 48_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 256)]
    pub hrir_length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub subset_seed: u64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// `itd`, `lsd`, `random` or `random:<seed>`.
    #[arg(long, default_value = "itd")]
    pub criterion: RetrievalCriterion,
    /// Candidate ids, comma separated; default every other subject.
    #[arg(long, value_delimiter = ',')]
    pub pool: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Experiment settings shared by `pretrain` and `experiment`. Flags
/// override the TOML config file, which overrides the defaults.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub criterion: Option<RetrievalCriterion>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Seed of initialization, shuffling and adaptation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub adapt_epochs: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(c) = self.criterion {
            cfg.criterion = c;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = self.subset_seed {
            cfg.subset_seed = s;
        }
        if let Some(e) = self.pretrain_epochs {
            cfg.train.pretrain_epochs = e;
        }
        if let Some(e) = self.adapt_epochs {
            cfg.train.adapt_epochs = e;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory: `pretrained.ranf`, its sidecar, `train_log.jsonl`,
    /// the resumable `state/` and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `<out>/state` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Config file for training settings; the checkpoint fixes the rest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Output bundle directory holding the predicted subject.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub base_delay: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted bundle.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth bundle.
    #[arg(long, env = DATA_DIR_ENV)]
    pub truth: PathBuf,
    #[arg(long)]
    pub subject: String,
    /// Measured directions, comma separated; excluded from scoring.
    #[arg(long, value_delimiter = ',')]
    pub measured: Vec<usize>,
    #[arg(long)]
    pub include_measured: bool,
    /// Method label used by `report`.
    #[arg(long, default_value = "ranf")]
    pub method: String,
    /// JSON report; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub bundle: BundleArg,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory: `report.json`, `model.ranf`, logs and `run.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Experiment reports or `evaluate` outputs.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retrievals: Vec<RetrievalResult>,
}

impl RunRecord {
    fn new(command: &str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            retrievals: Vec::new(),
        }
    }
}

/// Output of `evaluate`, readable by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub method: String,
    /// Number of measured directions.
    pub n: usize,
    pub report: EvalReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        e if e.is_data() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let command = cli.command;
    match cli.threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| dispatch(command)),
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Validate(a) => validate(a),
        Command::Subset(a) => subset(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Upsample(a) => upsample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
    }
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let cfg = SynthConfig {
        subjects: a.subjects,
        grid: a.grid,
        sample_rate: a.sample_rate,
        hrir_length: a.hrir_length,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let bundle = generate_bundle(&cfg)?;
    save_bundle(&bundle, &a.out)?;
    write_json(&a.out.join("run.json"), &RunRecord::new("synth-gen", serde_json::to_value(&cfg)?))?;
    eprintln!(
        "wrote {} subjects x {} directions to {}",
        bundle.subjects().len(),
        bundle.grid().len(),
        a.out.display()
    );
    Ok(())
}

fn validate(a: BundleArg) -> Result<()> {
    let b = load_bundle(&a.bundle)?;
    println!(
        "ok: {} subjects, {} directions, {} Hz, L={}",
        b.subjects().len(),
        b.grid().len(),
        b.sample_rate(),
        b.hrir_length()
    );
    Ok(())
}

fn subset(a: SubsetArgs) -> Result<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let s = select_measured_subset(b.grid(), a.n, a.seed)?;
    emit(&json!({ "n": a.n, "seed": a.seed, "indices": s.indices() }), a.out.as_deref())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let subset = select_measured_subset(b.grid(), a.n, a.subset_seed)?;
    let store = FeatureStore::new(&b, ItdConfig::default());
    let m = TargetMeasurements::from_set(b.subject(&a.target)?, &subset, store.itd_config())?;
    let pool = if a.pool.is_empty() { b.subject_ids() } else { a.pool.clone() };
    let r = retrieve_topk(&store, &m, &pool, a.k, a.criterion)?;
    if let Some(out) = &a.out {
        let cfg = json!({ "target": a.target, "n": a.n, "subset_seed": a.subset_seed, "k": a.k,
            "criterion": a.criterion.to_string(), "pool": pool });
        let mut rec = RunRecord::new("retrieve", cfg);
        rec.retrievals.push(r.clone());
        write_json(&sibling(out, ".run.json"), &rec)?;
    }
    emit(&r, a.out.as_deref())
}

/// Streams epoch logs to standard error and to `log`, as JSON lines.
fn epoch_logger(log: PathBuf, append: bool) -> Result<impl FnMut(&EpochLog) -> Result<()>> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    Ok(move |l: &EpochLog| {
        let line = serde_json::to_string(l)?;
        eprintln!("{line}");
        writeln!(file, "{line}").map_err(|e| Error::io(&log, e))
    })
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let b = load_bundle(&a.bundle.bundle)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let state_dir = a.out.join("state");
    let resume = if a.resume && state_dir.join("state.json").exists() {
        Some(TrainState::load(&state_dir)?)
    } else {
        None
    };
    let mut log = epoch_logger(a.out.join("train_log.jsonl"), resume.is_some())?;
    let pre = run_pretraining(&b, &cfg, resume, &mut |l, state| {
        log(l)?;
        state.save(&state_dir)
    })?;
    pre.checkpoint(&cfg).save(&a.out.join("pretrained.ranf"))?;
    let rec = RunRecord::new("pretrain", json!({ "bundle": a.bundle.bundle, "experiment": cfg }));
    write_json(&a.out.join("run.json"), &rec)
}

fn load_train_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    ConfigArgs {
        config: path.map(Path::to_path_buf),
        ..ConfigArgs::default()
    }
    .resolve()
}

fn target_measurements(b: &HrirBundle, ck: &Checkpoint, target: &str, itd: &ItdConfig) -> Result<TargetMeasurements> {
    let subset = MeasurementSubset::new(ck.sidecar.measured.clone(), b.grid().len())?;
    TargetMeasurements::from_set(b.subject(target)?, &subset, itd)
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let mut cfg = load_train_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.adapt_epochs = e;
    }
    let b = load_bundle(&a.bundle.bundle)?;
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let store = FeatureStore::new(&b, cfg.itd);
    let m = target_measurements(&b, &ck, &a.target, &cfg.itd)?;
    let criterion: RetrievalCriterion = ck.sidecar.criterion.parse()?;
    let pool = ck.sidecar.retrieved.clone();
    let retrieval = retrieve_topk(&store, &m, &pool, ck.sidecar.k, criterion)?;
    let outcome = adapt(&ck.model, &ck.params, &store, &m, &retrieval, &cfg.train)?;
    ck.params = outcome.params;
    ck.sidecar.retrievals.insert(a.target.clone(), retrieval.subjects.clone());
    ck.save(&a.out)?;
    let mut rec = RunRecord::new(
        "adapt",
        json!({ "checkpoint": a.checkpoint, "target": a.target, "train": cfg.train, "losses": outcome.losses }),
    );
    rec.retrievals.push(retrieval);
    write_json(&sibling(&a.out, ".run.json"), &rec)
}

fn upsample(a: UpsampleArgs) -> Result<()> {
    let b = load_bundle(&a.bundle.bundle)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let store = FeatureStore::new(&b, ItdConfig::default());
    let criterion: RetrievalCriterion = ck.sidecar.criterion.parse()?;
    let retrieval = match ck.sidecar.retrievals.get(&a.target) {
        Some(ids) => RetrievalResult {
            target: a.target.clone(),
            criterion,
            k: ids.len(),
            subjects: ids.clone(),
            scores: None,
        },
        None => {
            let m = target_measurements(&b, &ck, &a.target, store.itd_config())?;
            retrieve_topk(&store, &m, &ck.sidecar.retrieved, ck.sidecar.k, criterion)?
        }
    };
    let cfg = PredictConfig {
        base_delay: a.base_delay,
        ..PredictConfig::default()
    };
    let dirs: Vec<usize> = (0..b.grid().len()).collect();
    let set = predict_subject(&ck.model, &ck.params, &store, &a.target, &retrieval, &dirs, &cfg)?;
    let out = HrirBundle::new(b.grid().to_vec(), vec![set])?;
    save_bundle(&out, &a.out)?;
    let mut rec = RunRecord::new("upsample", json!({ "checkpoint": a.checkpoint, "target": a.target, "predict": cfg }));
    rec.retrievals.push(retrieval);
    write_json(&a.out.join("run.json"), &rec)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = load_bundle(&a.pred)?;
    let truth = load_bundle(&a.truth)?;
    if pred.grid() != truth.grid() {
        return Err(Error::invariant("shared grid", "predicted and true bundles differ in grid"));
    }
    let measured = MeasurementSubset::new(a.measured.clone(), truth.grid().len())?;
    let report = metrics::evaluate(
        pred.subject(&a.subject)?,
        truth.subject(&a.subject)?,
        &measured,
        !a.include_measured,
        &ItdConfig::default(),
    )?;
    write_text(&a.out.with_extension("csv"), &report.to_csv())?;
    let record = EvaluationRecord {
        method: a.method.clone(),
        n: a.measured.len(),
        report,
    };
    write_json(&a.out, &record)?;
    let rec = RunRecord::new(
        "evaluate",
        json!({ "pred": a.pred, "truth": a.truth, "subject": a.subject, "measured": a.measured,
            "exclude_measured": !a.include_measured, "method": a.method }),
    );
    write_json(&sibling(&a.out, ".run.json"), &rec)
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let b = load_bundle(&a.bundle.bundle)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut log = epoch_logger(a.out.join("train_log.jsonl"), false)?;
    let pre = run_pretraining(&b, &cfg, None, &mut |l, _| log(l))?;
    let outcome = evaluate_pretrained(&b, &cfg, pre)?;
    outcome.checkpoint.save(&a.out.join("model.ranf"))?;
    write_json(&a.out.join("report.json"), &outcome.report)?;
    write_text(&a.out.join("report.csv"), &table(&rows_of_experiment(&outcome.report))?)?;
    let mut rec = RunRecord::new("experiment", json!({ "bundle": a.bundle.bundle, "experiment": cfg }));
    rec.retrievals = outcome.report.retrievals.clone();
    write_json(&a.out.join("run.json"), &rec)?;
    for (method, r) in &outcome.report.methods {
        eprintln!(
            "{method}: ITD {:.1} us, ILD {:.2} dB, LSD {:.2} dB",
            r.mean.itd_error_us, r.mean.ild_error_db, r.mean.lsd_db
        );
    }
    Ok(())
}

/// One (method, condition) cell group of the report table.
struct Row {
    method: String,
    n: usize,
    mean: MeanScores,
    subjects: usize,
}

fn rows_of_experiment(r: &ExperimentReport) -> Vec<Row> {
    r.methods
        .iter()
        .map(|(m, rep)| Row {
            method: m.clone(),
            n: r.config.n,
            mean: rep.mean,
            subjects: rep.subjects.len(),
        })
        .collect()
}

/// Reads an experiment report or an evaluation record.
fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    if value.get("methods").is_some() {
        let r: ExperimentReport = serde_json::from_value(value)?;
        Ok(rows_of_experiment(&r))
    } else {
        let e: EvaluationRecord = serde_json::from_value(value)?;
        Ok(vec![Row {
            method: e.method,
            n: e.n,
            mean: e.report.mean,
            subjects: 1,
        }])
    }
}

/// Methods as rows, one ITD/ILD/LSD column triple per condition. Repeated
/// (method, condition) pairs are averaged with subject-count weights.
fn table(rows: &[Row]) -> Result<String> {
    let mut cells: BTreeMap<(String, usize), (MeanScores, usize)> = BTreeMap::new();
    for r in rows {
        let (acc, count) = cells.entry((r.method.clone(), r.n)).or_default();
        let w = r.subjects as f64;
        acc.itd_error_us += r.mean.itd_error_us * w;
        acc.ild_error_db += r.mean.ild_error_db * w;
        acc.lsd_db += r.mean.lsd_db * w;
        *count += r.subjects;
    }
    let mut conditions: Vec<usize> = cells.keys().map(|(_, n)| *n).collect();
    conditions.sort_unstable();
    conditions.dedup();
    let mut methods: Vec<&String> = cells.keys().map(|(m, _)| m).collect();
    methods.dedup();
    let mut out = String::from("method");
    for n in &conditions {
        let _ = write!(out, ",n{n}_itd_us,n{n}_ild_db,n{n}_lsd_db");
    }
    out.push('\n');
    for m in methods {
        out.push_str(m);
        for n in &conditions {
            match cells.get(&(m.clone(), *n)) {
                Some((s, c)) if *c > 0 => {
                    let c = *c as f64;
                    let _ = write!(out, ",{:.4},{:.4},{:.4}", s.itd_error_us / c, s.ild_error_db / c, s.lsd_db / c);
                }
                _ => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_rows(p)?);
    }
    let csv = table(&rows)?;
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["ranf", "no-such-command"]), EXIT_USAGE);
        assert_eq!(main_with_args(["ranf", "subset", "--bundle", "x", "--n", "many"]), EXIT_USAGE);
        assert_eq!(main_with_args(["ranf", "--help"]), 0);
    }

    #[test]
    fn exit_code_families() {
        assert_eq!(exit_code(&Error::Numerical("nan".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::UnknownSubject("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "# recipe\nn = 5\nk = 3\n[train]\nadapt_epochs = 7\n").unwrap();
        let args = ConfigArgs {
            config: Some(path.clone()),
            k: Some(2),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!((cfg.n, cfg.k, cfg.train.adapt_epochs), (5, 2, 7));
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(args.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn table_layout() {
        let row = |method: &str, n, lsd| Row {
            method: method.into(),
            n,
            mean: MeanScores {
                itd_error_us: 10.0,
                ild_error_db: 1.0,
                lsd_db: lsd,
            },
            subjects: 2,
        };
        let csv = table(&[row("ranf", 3, 4.0), row("ranf", 5, 3.0), row("nearest_neighbor", 3, 8.0), row("ranf", 3, 6.0)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,n3_itd_us,n3_ild_db,n3_lsd_db,n5_itd_us,n5_ild_db,n5_lsd_db");
        assert_eq!(lines[1], "nearest_neighbor,10.0000,1.0000,8.0000,,,");
        assert_eq!(lines[2], "ranf,10.0000,1.0000,5.0000,10.0000,1.0000,3.0000");
    }
}
