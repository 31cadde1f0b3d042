//! Rolling-origin evaluation with daily recalibration.
//!
//! For every test day `d` each model sees the dataset through `d` with the
//! prices of `d` blanked out, fits on data through `d - 1` and forecasts the
//! 24 hours of `d`. Days run in order; models run in parallel within a day.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dnn::{predict_day, recalibrate, search, DnnEnsemble, DnnSettings, SearchResult};
use crate::error::{Error, Result};
use crate::lear::{fit_lear, predict_lear, LearConfig, SelectionGrid};
use crate::market_data::{validate_split, MarketDataset, SplitSpec, HOURS};
use crate::metrics::{diebold_mariano, mean_absolute, relative_mae, DM_MIN_LEN};
use crate::neural::Head;

pub const REPORT_SCHEMA: &str = "epfbench-report/1";
pub const FORECAST_CSV_HEADER: &str = "date,hour,model,forecast,actual";
pub const NAIVE: &str = "naive";

/// Last week's price for the same hour.
pub fn naive_forecast(dataset: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
    let week_ago = day - chrono::Days::new(7);
    dataset
        .day(week_ago)
        .map(|r| r.prices)
        .ok_or_else(|| Error::insufficient(day, "the naive forecast needs the price of seven days earlier"))
}

/// A model under daily recalibration.
pub trait Forecaster: Send {
    fn name(&self) -> &str;

    /// Forecast `day`. `history` ends at `day`, whose prices are zeroed.
    fn forecast(&mut self, history: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]>;

    fn diagnostics(&self) -> ModelDiagnostics {
        ModelDiagnostics::default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub recalibrations: usize,
    pub searches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_grid: Option<SelectionGrid>,
}

pub struct NaiveForecaster;

impl Forecaster for NaiveForecaster {
    fn name(&self) -> &str {
        NAIVE
    }

    fn forecast(&mut self, history: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
        naive_forecast(history, day)
    }
}

pub struct LearForecaster {
    pub config: LearConfig,
    grid: SelectionGrid,
}

impl LearForecaster {
    pub fn new(config: LearConfig) -> Self {
        Self {
            config,
            grid: SelectionGrid::default(),
        }
    }
}

impl Forecaster for LearForecaster {
    fn name(&self) -> &str {
        "lear"
    }

    fn forecast(&mut self, history: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
        let model = fit_lear(history, previous(day), &self.config)?;
        self.grid.accumulate(&model);
        predict_lear(&model, history, day)
    }

    fn diagnostics(&self) -> ModelDiagnostics {
        ModelDiagnostics {
            recalibrations: self.grid.n_models as usize,
            searches: 0,
            selection_grid: Some(self.grid.clone()),
        }
    }
}

/// Point forecasts of a DNN ensemble (the pooled mean for the Gaussian head).
/// Hyperparameters are searched on the first test day and then every
/// `search_every` days, always on data before the day being forecast.
pub struct DnnForecaster {
    name: String,
    pub settings: DnnSettings,
    pub seed: u64,
    current: Option<SearchResult>,
    days_since_search: usize,
    recalibrations: usize,
    searches: usize,
    last: Option<DnnEnsemble>,
}

impl DnnForecaster {
    pub fn new(name: impl Into<String>, settings: DnnSettings, seed: u64) -> Self {
        Self {
            name: name.into(),
            settings,
            seed,
            current: None,
            days_since_search: 0,
            recalibrations: 0,
            searches: 0,
            last: None,
        }
    }

    /// Ensemble fitted for the most recent forecast.
    pub fn last_ensemble(&self) -> Option<&DnnEnsemble> {
        self.last.as_ref()
    }
}

impl Forecaster for DnnForecaster {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&mut self, history: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
        let fit_end = previous(day);
        let every = self.settings.search_every.max(1);
        if self.current.is_none() || self.days_since_search >= every {
            let seed = self.seed.wrapping_add(1_000_003u64.wrapping_mul(self.searches as u64));
            self.current = Some(search(history, fit_end, &self.settings, seed)?);
            self.searches += 1;
            self.days_since_search = 0;
        }
        self.days_since_search += 1;
        let config = &self.current.as_ref().expect("searched above").best;
        let ensemble = recalibrate(
            config,
            history,
            fit_end,
            self.settings.calib_days,
            self.settings.n_members,
            self.seed,
        )?;
        self.recalibrations += 1;
        let out = predict_day(&ensemble, history, day)?;
        self.last = Some(ensemble);
        Ok(out)
    }

    fn diagnostics(&self) -> ModelDiagnostics {
        ModelDiagnostics {
            recalibrations: self.recalibrations,
            searches: self.searches,
            selection_grid: None,
        }
    }
}

fn previous(day: NaiveDate) -> NaiveDate {
    day.pred_opt().expect("date in range")
}

/// Serializable model description; the manifest stores a list of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    Naive,
    Lear { config: LearConfig },
    Dnn { settings: DnnSettings, seed: u64 },
    DnnProb { settings: DnnSettings, seed: u64 },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Naive => NAIVE,
            ModelSpec::Lear { .. } => "lear",
            ModelSpec::Dnn { .. } => "dnn",
            ModelSpec::DnnProb { .. } => "dnn-prob",
        }
    }

    pub fn build(&self) -> Box<dyn Forecaster> {
        match self {
            ModelSpec::Naive => Box::new(NaiveForecaster),
            ModelSpec::Lear { config } => Box::new(LearForecaster::new(config.clone())),
            ModelSpec::Dnn { settings, seed } => {
                let settings = DnnSettings { head: Head::Point, ..settings.clone() };
                Box::new(DnnForecaster::new(self.name(), settings, *seed))
            }
            ModelSpec::DnnProb { settings, seed } => {
                let settings = DnnSettings { head: Head::Gaussian, ..settings.clone() };
                Box::new(DnnForecaster::new(self.name(), settings, *seed))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub date: NaiveDate,
    pub hour: usize,
    pub model: String,
    pub forecast: f64,
    pub actual: f64,
}

/// Long-format forecasts: one row per (date, hour, model).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastTable {
    pub rows: Vec<ForecastRow>,
}

impl ForecastTable {
    pub fn push_day(&mut self, model: &str, date: NaiveDate, forecast: &[f64; HOURS], actual: &[f64; HOURS]) {
        for h in 0..HOURS {
            self.rows.push(ForecastRow {
                date,
                hour: h,
                model: model.to_string(),
                forecast: forecast[h],
                actual: actual[h],
            });
        }
    }

    /// Model names in order of first appearance.
    pub fn models(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.model) {
                seen.push(r.model.clone());
            }
        }
        seen
    }

    pub fn extend(&mut self, other: ForecastTable) {
        self.rows.extend(other.rows);
    }

    /// Forecast errors of every model, keyed by model, over a common
    /// (date, hour) index sorted chronologically. Fails unless every model
    /// covers the same points exactly once and agrees on the actuals.
    pub fn aligned_errors(&self) -> Result<(Vec<(NaiveDate, usize)>, BTreeMap<String, Vec<f64>>)> {
        let mut per_model: BTreeMap<&str, BTreeMap<(NaiveDate, usize), &ForecastRow>> = BTreeMap::new();
        for r in &self.rows {
            if r.hour >= HOURS {
                return Err(Error::Misaligned(format!("hour {} out of range", r.hour)));
            }
            if per_model.entry(&r.model).or_default().insert((r.date, r.hour), r).is_some() {
                return Err(Error::Misaligned(format!(
                    "duplicate row for {} {} hour {}",
                    r.model, r.date, r.hour
                )));
            }
        }
        let mut iter = per_model.iter();
        let (first_name, first) = iter
            .next()
            .ok_or_else(|| Error::Misaligned("no forecasts".into()))?;
        let keys: Vec<(NaiveDate, usize)> = first.keys().copied().collect();
        for (name, rows) in iter {
            let other: BTreeSet<_> = rows.keys().collect();
            if other.len() != keys.len() || keys.iter().any(|k| !other.contains(k)) {
                return Err(Error::Misaligned(format!(
                    "{name} and {first_name} cover different (date, hour) points"
                )));
            }
            for k in &keys {
                let (a, b) = (rows[k].actual, first[k].actual);
                if a != b && !(a.is_nan() && b.is_nan()) {
                    return Err(Error::Misaligned(format!(
                        "{name} and {first_name} disagree on the actual price at {} hour {}",
                        k.0, k.1
                    )));
                }
            }
        }
        let errors = per_model
            .iter()
            .map(|(name, rows)| {
                let e = keys.iter().map(|k| rows[k].forecast - rows[k].actual).collect();
                (name.to_string(), e)
            })
            .collect();
        Ok((keys, errors))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(FORECAST_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.date, r.hour, r.model, r.forecast, r.actual);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == FORECAST_CSV_HEADER => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "forecast table header {:?}, expected {FORECAST_CSV_HEADER:?}",
                    other.map(|(_, h)| h).unwrap_or("")
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::InvalidArgument(format!("forecast table line {}: {what}", i + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d").map_err(|_| bad("bad date"))?;
            let hour = fields[1].parse().map_err(|_| bad("bad hour"))?;
            let forecast = fields[3].parse().map_err(|_| bad("bad forecast"))?;
            let actual = fields[4].parse().map_err(|_| bad("bad actual"))?;
            if fields[2].is_empty() {
                return Err(bad("empty model name"));
            }
            rows.push(ForecastRow {
                date,
                hour,
                model: fields[2].to_string(),
                forecast,
                actual,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmVerdict {
    RowBetter,
    ColumnBetter,
    NotSignificant,
    /// Identical losses at every point (also the diagonal).
    Identical,
    /// Fewer points than the test accepts.
    TooShort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmMatrix {
    pub models: Vec<String>,
    pub loss_power: f64,
    pub significance: f64,
    /// `statistic[i][j]` tests row model `i` against column model `j`;
    /// negative favours the row.
    pub statistic: Vec<Vec<Option<f64>>>,
    pub p_value: Vec<Vec<Option<f64>>>,
    pub verdict: Vec<Vec<DmVerdict>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub mae: f64,
    /// `None` when the baseline MAE is zero (flagged in `flags`).
    pub rmae: Option<f64>,
    pub diagnostics: ModelDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPolicy {
    pub loss_power: f64,
    pub significance: f64,
}

impl Default for EvaluationPolicy {
    fn default() -> Self {
        Self {
            loss_power: 1.0,
            significance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub schema: String,
    /// Absent when scoring precomputed forecast tables.
    pub split: Option<SplitSpec>,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub test_days: usize,
    pub points: usize,
    pub baseline: String,
    pub models: Vec<ModelScore>,
    pub dm: DmMatrix,
    pub flags: Vec<String>,
}

/// Wall-clock cost per model, kept out of [`BacktestReport`] so reports
/// stay reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRuntime {
    pub model: String,
    pub total_seconds: f64,
    pub median_day_seconds: f64,
    pub days: usize,
}

impl ModelRuntime {
    fn from_durations(model: &str, per_day: &[Duration]) -> Self {
        let mut secs: Vec<f64> = per_day.iter().map(Duration::as_secs_f64).collect();
        secs.sort_by(f64::total_cmp);
        let median = match secs.len() {
            0 => 0.0,
            n if n % 2 == 1 => secs[n / 2],
            n => 0.5 * (secs[n / 2 - 1] + secs[n / 2]),
        };
        Self {
            model: model.to_string(),
            total_seconds: secs.iter().sum(),
            median_day_seconds: median,
            days: secs.len(),
        }
    }
}

/// Scores an aligned forecast table against `baseline`.
pub fn evaluate(
    table: &ForecastTable,
    baseline: &str,
    policy: &EvaluationPolicy,
    diagnostics: &BTreeMap<String, ModelDiagnostics>,
) -> Result<BacktestReport> {
    let (keys, errors) = table.aligned_errors()?;
    let base = errors
        .get(baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline model {baseline:?} is not in the table")))?;
    let base_mae = mean_absolute(base)?;
    let mut flags = Vec::new();
    if base_mae == 0.0 {
        flags.push("division_by_zero".to_string());
    }
    let order = table.models();
    let mut models = Vec::with_capacity(order.len());
    for name in &order {
        let e = &errors[name];
        let m = mean_absolute(e)?;
        let rmae = if name == baseline {
            Some(1.0)
        } else {
            match relative_mae(m, base_mae) {
                Ok(r) => Some(r),
                Err(Error::DivisionByZero) => None,
                Err(e) => return Err(e),
            }
        };
        models.push(ModelScore {
            model: name.clone(),
            mae: m,
            rmae,
            diagnostics: diagnostics.get(name).cloned().unwrap_or_default(),
        });
    }
    let dm = dm_matrix(&order, &errors, policy)?;
    let dates: BTreeSet<NaiveDate> = keys.iter().map(|k| k.0).collect();
    Ok(BacktestReport {
        schema: REPORT_SCHEMA.to_string(),
        split: None,
        test_start: *dates.first().expect("non-empty table"),
        test_end: *dates.last().expect("non-empty table"),
        test_days: dates.len(),
        points: keys.len(),
        baseline: baseline.to_string(),
        models,
        dm,
        flags,
    })
}

fn dm_matrix(order: &[String], errors: &BTreeMap<String, Vec<f64>>, policy: &EvaluationPolicy) -> Result<DmMatrix> {
    let k = order.len();
    let mut statistic = vec![vec![None; k]; k];
    let mut p_value = vec![vec![None; k]; k];
    let mut verdict = vec![vec![DmVerdict::Identical; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (a, b) = (&errors[&order[i]], &errors[&order[j]]);
            if a.len() < DM_MIN_LEN {
                verdict[i][j] = DmVerdict::TooShort;
                continue;
            }
            match diebold_mariano(a, b, policy.loss_power) {
                Ok(t) => {
                    statistic[i][j] = Some(t.statistic);
                    p_value[i][j] = Some(t.p_value);
                    verdict[i][j] = if t.p_value >= policy.significance {
                        DmVerdict::NotSignificant
                    } else if t.statistic < 0.0 {
                        DmVerdict::RowBetter
                    } else {
                        DmVerdict::ColumnBetter
                    };
                }
                Err(Error::DegenerateDifferential) => verdict[i][j] = DmVerdict::Identical,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(DmMatrix {
        models: order.to_vec(),
        loss_power: policy.loss_power,
        significance: policy.significance,
        statistic,
        p_value,
        verdict,
    })
}

#[derive(Debug, Clone)]
pub struct BacktestOutcome {
    pub table: ForecastTable,
    pub report: BacktestReport,
    pub runtime: Vec<ModelRuntime>,
}

/// `history_through(day)` with the target day's prices set to zero.
pub fn history_for(dataset: &MarketDataset, day: NaiveDate) -> Result<MarketDataset> {
    let names = dataset.series_names().clone();
    let mut days = dataset.history_through(day)?.into_records();
    if let Some(last) = days.last_mut() {
        last.prices = [0.0; HOURS];
    }
    MarketDataset::from_days(names, days)
}

/// Runs the rolling backtest. The naive model is added as the baseline when
/// `models` does not contain it. Any failing day aborts the run.
pub fn run_backtest(
    dataset: &MarketDataset,
    split: &SplitSpec,
    models: &[ModelSpec],
    policy: &EvaluationPolicy,
) -> Result<BacktestOutcome> {
    validate_split(dataset, split).map_err(|v| {
        Error::InvalidSplit(v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
    })?;
    let mut specs: Vec<ModelSpec> = Vec::with_capacity(models.len() + 1);
    if !models.iter().any(|m| m.name() == NAIVE) {
        specs.push(ModelSpec::Naive);
    }
    for m in models {
        if specs.iter().any(|s| s.name() == m.name()) {
            return Err(Error::InvalidArgument(format!("model {} listed twice", m.name())));
        }
        specs.push(m.clone());
    }
    let mut forecasters: Vec<Box<dyn Forecaster>> = specs.iter().map(ModelSpec::build).collect();
    let mut timings: Vec<Vec<Duration>> = vec![Vec::new(); forecasters.len()];
    let mut table = ForecastTable::default();

    for day in split.test_days() {
        let history = history_for(dataset, day)?;
        let actual = dataset.day(day).expect("validated split").prices;
        let results: Vec<(Result<[f64; HOURS]>, Duration)> = forecasters
            .par_iter_mut()
            .map(|f| {
                let start = Instant::now();
                let r = f.forecast(&history, day);
                (r, start.elapsed())
            })
            .collect();
        for (i, (r, elapsed)) in results.into_iter().enumerate() {
            let forecast = r?;
            if forecast.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{} produced a non-finite forecast for {day}",
                    forecasters[i].name()
                )));
            }
            table.push_day(forecasters[i].name(), day, &forecast, &actual);
            timings[i].push(elapsed);
        }
    }

    let diagnostics: BTreeMap<String, ModelDiagnostics> =
        forecasters.iter().map(|f| (f.name().to_string(), f.diagnostics())).collect();
    let mut report = evaluate(&table, NAIVE, policy, &diagnostics)?;
    report.split = Some(*split);
    let runtime = forecasters
        .iter()
        .zip(&timings)
        .map(|(f, t)| ModelRuntime::from_durations(f.name(), t))
        .collect();
    Ok(BacktestOutcome { table, report, runtime })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

pub fn render_report(report: &BacktestReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Text => render_text(report),
    }
}

fn render_text(report: &BacktestReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "test {} .. {} ({} days, {} points), baseline {}",
        report.test_start, report.test_end, report.test_days, report.points, report.baseline
    );
    let mut rows: Vec<&ModelScore> = report.models.iter().collect();
    rows.sort_by(|a, b| {
        let key = |m: &ModelScore| m.rmae.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.mae.total_cmp(&b.mae))
    });
    let width = rows.iter().map(|m| m.model.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>8}", "model", "MAE", "rMAE");
    for m in rows {
        let rmae = m.rmae.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(out, "{:<width$}  {:>12.4}  {:>8}", m.model, m.mae, rmae);
    }
    for f in &report.flags {
        let _ = writeln!(out, "flag: {f}");
    }
    let dm = &report.dm;
    if dm.models.len() > 1 {
        let _ = writeln!(out, "\nDiebold-Mariano p-values (row vs column, q = {}):", dm.loss_power);
        let _ = write!(out, "{:<width$}", "");
        for m in &dm.models {
            let _ = write!(out, "  {m:>10}");
        }
        out.push('\n');
        for (i, m) in dm.models.iter().enumerate() {
            let _ = write!(out, "{m:<width$}");
            for j in 0..dm.models.len() {
                let cell = match (dm.p_value[i][j], dm.verdict[i][j]) {
                    (Some(p), _) => format!("{p:.4}"),
                    (None, DmVerdict::TooShort) => "short".into(),
                    (None, _) => "-".into(),
                };
                let _ = write!(out, "  {cell:>10}");
            }
            out.push('\n');
        }
    }
    out
}
