use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use epfbench::backtest::{
    evaluate, render_report, run_backtest, EvaluationPolicy, ForecastTable, ModelSpec, ReportFormat, NAIVE,
};
use epfbench::dnn::DnnSettings;
use epfbench::features::{build_features, feature_name, PriceTransform};
use epfbench::lear::LearConfig;
use epfbench::market_data::{parse_dataset_with, DstPolicy, MarketDataset, SplitSpec};
use epfbench::synthetic;
use epfbench::Error;

const MANIFEST_FORMAT: &str = "epfbench-manifest/1";

/// Exit codes: 2 bad input data, 3 insufficient history, 4 internal error.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Ingest(_) | Error::InvalidSplit(_) | Error::Misaligned(_) => 2,
            Error::InsufficientHistory { .. } | Error::OutOfRange { .. } => 3,
            _ => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "epfbench", version, about = "Day-ahead electricity price forecasting benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate an hourly CSV and write it in normalized form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Dst::Strict)]
        dst: Dst,
        /// Normalized CSV destination.
        #[arg(long)]
        output: PathBuf,
    },
    /// Rolling daily-recalibration backtest.
    Backtest(BacktestArgs),
    /// Score precomputed forecast tables.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        forecasts: Vec<PathBuf>,
        #[arg(long, default_value = NAIVE)]
        baseline: String,
        /// Write the JSON report here; a text summary goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the 247 regressors for one day.
    Features {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Dst::Strict)]
        dst: Dst,
        #[arg(long)]
        day: NaiveDate,
        #[arg(long, value_enum, default_value_t = Transform::Identity)]
        transform: Transform,
    },
    /// Write a synthetic market with a known data-generating process.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(clap::Args)]
struct BacktestArgs {
    /// Rerun exactly the configuration recorded in a manifest.
    #[arg(long, conflicts_with_all = ["data", "test_start", "test_end", "models"])]
    from_manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dst::Strict)]
    dst: Dst,
    #[arg(long, required_unless_present = "from_manifest")]
    test_start: Option<NaiveDate>,
    /// Defaults to the last day of the dataset.
    #[arg(long)]
    test_end: Option<NaiveDate>,
    #[arg(long, value_delimiter = ',', default_value = "naive,lear,dnn")]
    models: Vec<ModelName>,
    #[arg(long, default_value_t = 1456)]
    calib_days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    cv_folds: usize,
    #[arg(long, default_value_t = 30)]
    n_lambdas: usize,
    #[arg(long, default_value_t = 32)]
    budget: usize,
    #[arg(long, default_value_t = 4)]
    ensemble: usize,
    #[arg(long, default_value_t = 28)]
    search_every: usize,
    #[arg(long, value_enum, default_value_t = Transform::Identity)]
    transform: Transform,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dst {
    Strict,
    Repair,
}

impl From<Dst> for DstPolicy {
    fn from(d: Dst) -> Self {
        match d {
            Dst::Strict => DstPolicy::Strict,
            Dst::Repair => DstPolicy::Repair,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Transform {
    Identity,
    Asinh,
}

impl From<Transform> for PriceTransform {
    fn from(t: Transform) -> Self {
        match t {
            Transform::Identity => PriceTransform::Identity,
            Transform::Asinh => PriceTransform::Asinh,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelName {
    Naive,
    Lear,
    Dnn,
    DnnProb,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Sparse,
    Nonlinear,
    Heteroskedastic,
    Periodic,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetRef {
    path: String,
    sha256: String,
    dst: DstPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunManifest {
    format: String,
    tool_version: String,
    dataset: DatasetRef,
    split: SplitSpec,
    seed: u64,
    models: Vec<ModelSpec>,
    policy: EvaluationPolicy,
    /// sha256 of every output file except the manifest and runtime.json
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::internal(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load(path: &Path, dst: DstPolicy) -> CliResult<(MarketDataset, String)> {
    let text = read_text(path)?;
    let (ds, _) = parse_dataset_with(&text, dst).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok((ds, sha256_hex(text.as_bytes())))
}

fn cmd_ingest(input: &Path, dst: Dst, output: &Path) -> CliResult<()> {
    let text = read_text(input)?;
    let (ds, summary) = parse_dataset_with(&text, dst.into()).map_err(|e| Failure::data(e.to_string()))?;
    write_file(output, &ds.to_csv())?;
    println!("{summary}");
    Ok(())
}

fn model_specs(args: &BacktestArgs) -> Vec<ModelSpec> {
    let lear = LearConfig {
        calib_days: args.calib_days,
        cv_folds: args.cv_folds,
        n_lambdas: args.n_lambdas,
        transform: args.transform.into(),
        ..LearConfig::default()
    };
    let dnn = DnnSettings {
        calib_days: args.calib_days,
        budget: args.budget,
        n_members: args.ensemble,
        search_every: args.search_every,
        transform: args.transform.into(),
        ..DnnSettings::default()
    };
    let mut seen = Vec::new();
    let mut specs = Vec::new();
    for &m in &args.models {
        if seen.contains(&m) {
            continue;
        }
        seen.push(m);
        specs.push(match m {
            ModelName::Naive => ModelSpec::Naive,
            ModelName::Lear => ModelSpec::Lear { config: lear.clone() },
            ModelName::Dnn => ModelSpec::Dnn { settings: dnn.clone(), seed: args.seed },
            // the Gaussian head models prices directly
            ModelName::DnnProb => ModelSpec::DnnProb {
                settings: DnnSettings { transform: PriceTransform::Identity, ..dnn.clone() },
                seed: args.seed,
            },
        });
    }
    specs
}

/// Resolves a manifest's dataset path, trying the working directory first
/// and then the manifest's own directory.
fn manifest_data_path(manifest_path: &Path, recorded: &str) -> PathBuf {
    let direct = PathBuf::from(recorded);
    if direct.is_absolute() || direct.exists() {
        return direct;
    }
    manifest_path.parent().map(|p| p.join(recorded)).filter(|p| p.exists()).unwrap_or(direct)
}

fn plan_from_args(args: &BacktestArgs) -> CliResult<(RunManifest, MarketDataset)> {
    let data = args.data.as_ref().expect("required by clap");
    let dst: DstPolicy = args.dst.into();
    let (ds, sha) = load(data, dst)?;
    let test_start = args.test_start.expect("required by clap");
    let test_end = args.test_end.unwrap_or_else(|| ds.last_date());
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: DatasetRef { path: data.display().to_string(), sha256: sha, dst },
        split: SplitSpec::ending_before(test_start, test_end),
        seed: args.seed,
        models: model_specs(args),
        policy: EvaluationPolicy::default(),
        outputs: BTreeMap::new(),
    };
    Ok((manifest, ds))
}

fn plan_from_manifest(path: &Path) -> CliResult<(RunManifest, MarketDataset)> {
    let manifest: RunManifest = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Failure::data(format!("unsupported manifest format {:?}", manifest.format)));
    }
    let data = manifest_data_path(path, &manifest.dataset.path);
    let (ds, sha) = load(&data, manifest.dataset.dst)?;
    if sha != manifest.dataset.sha256 {
        return Err(Failure::data(format!(
            "{} has sha256 {sha}, the manifest records {}",
            data.display(),
            manifest.dataset.sha256
        )));
    }
    Ok((RunManifest { outputs: BTreeMap::new(), ..manifest }, ds))
}

fn cmd_backtest(args: &BacktestArgs) -> CliResult<()> {
    let (mut manifest, ds) = match &args.from_manifest {
        Some(path) => plan_from_manifest(path)?,
        None => plan_from_args(args)?,
    };
    let run = || run_backtest(&ds, &manifest.split, &manifest.models, &manifest.policy);
    let outcome = match args.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Failure::internal(e.to_string()))?
            .install(run),
        None => run(),
    }?;

    fs::create_dir_all(&args.out).map_err(|e| Failure::internal(format!("{}: {e}", args.out.display())))?;
    let mut files: Vec<(&str, String)> = vec![
        ("forecasts.csv", outcome.table.to_csv()),
        ("report.json", render_report(&outcome.report, ReportFormat::Json)),
    ];
    if let Some(grid) = outcome.report.models.iter().find_map(|m| m.diagnostics.selection_grid.as_ref()) {
        files.push(("selection_grid.csv", grid.to_csv()));
    }
    for (name, contents) in &files {
        write_file(&args.out.join(name), contents)?;
        manifest.outputs.insert(name.to_string(), sha256_hex(contents.as_bytes()));
    }
    write_file(&args.out.join("runtime.json"), &to_json(&outcome.runtime))?;
    write_file(&args.out.join("manifest.json"), &to_json(&manifest))?;
    print!("{}", render_report(&outcome.report, ReportFormat::Text));
    Ok(())
}

/// Reads forecast tables; a model name already taken by an earlier file is
/// renamed `model@file-stem`.
fn read_tables(paths: &[PathBuf]) -> CliResult<ForecastTable> {
    let mut table = ForecastTable::default();
    for path in paths {
        let mut t = ForecastTable::from_csv(&read_text(path)?)
            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let taken = table.models();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for row in &mut t.rows {
            if taken.contains(&row.model) {
                row.model = format!("{}@{stem}", row.model);
            }
        }
        table.extend(t);
    }
    Ok(table)
}

fn cmd_evaluate(forecasts: &[PathBuf], baseline: &str, report: Option<&Path>) -> CliResult<()> {
    let table = read_tables(forecasts)?;
    let r = evaluate(&table, baseline, &EvaluationPolicy::default(), &BTreeMap::new()).map_err(|e| match e {
        Error::InvalidArgument(m) => Failure::data(m),
        other => other.into(),
    })?;
    if let Some(path) = report {
        write_file(path, &render_report(&r, ReportFormat::Json))?;
    }
    print!("{}", render_report(&r, ReportFormat::Text));
    Ok(())
}

fn cmd_features(data: &Path, dst: Dst, day: NaiveDate, transform: Transform) -> CliResult<()> {
    let (ds, _) = load(data, dst.into())?;
    let f = build_features(&ds, day, transform.into())?;
    let mut out = String::new();
    for (j, v) in f.values().iter().enumerate() {
        out.push_str(&format!("{j}\t{}\t{v}\n", feature_name(j)));
    }
    print!("{out}");
    Ok(())
}

fn cmd_synth(kind: SynthKind, days: usize, seed: u64, output: &Path) -> CliResult<()> {
    if days == 0 {
        return Err(Failure::data("--days must be at least 1"));
    }
    let ds = match kind {
        SynthKind::Sparse => synthetic::sparse_linear_market(days, seed, 10.0).dataset,
        SynthKind::Nonlinear => synthetic::nonlinear_load_market(days, seed),
        SynthKind::Heteroskedastic => synthetic::heteroskedastic_market(days, seed).dataset,
        SynthKind::Periodic => synthetic::weekly_periodic_market(days, seed),
        SynthKind::Constant => synthetic::constant_market(days, 50.0, seed),
    };
    write_file(output, &ds.to_csv())?;
    println!("{} days ({} .. {})", ds.len(), ds.first_date(), ds.last_date());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest { input, dst, output } => cmd_ingest(input, *dst, output),
        Command::Backtest(args) => cmd_backtest(args),
        Command::Evaluate { forecasts, baseline, report } => cmd_evaluate(forecasts, baseline, report.as_deref()),
        Command::Features { data, dst, day, transform } => cmd_features(data, *dst, *day, *transform),
        Command::Synth { kind, days, seed, output } => cmd_synth(*kind, *days, *seed, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
