mod common;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use common::{dm_reference, normal_quantile, tiny_dnn_settings};
use epfbench::backtest::{
    evaluate, render_report, run_backtest, BacktestReport, DmVerdict, EvaluationPolicy, ForecastTable, ModelSpec,
    ReportFormat,
};
use epfbench::lear::LearConfig;
use epfbench::market_data::{DayRecord, MarketDataset, SplitSpec, HOURS};
use epfbench::metrics::diebold_mariano;
use epfbench::synthetic::{sparse_linear_market, weekly_periodic_market};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn last_days(ds: &MarketDataset, n: usize) -> SplitSpec {
    let recs = ds.records();
    SplitSpec::ending_before(recs[recs.len() - n].date, ds.last_date())
}

fn small_lear() -> ModelSpec {
    ModelSpec::Lear { config: LearConfig { calib_days: 60, n_lambdas: 8, cv_folds: 3, ..LearConfig::default() } }
}

#[test]
fn naive_reproduces_last_week() {
    let ds = sparse_linear_market(40, 1, 5.0).dataset;
    let out = run_backtest(&ds, &last_days(&ds, 10), &[], &EvaluationPolicy::default()).unwrap();
    assert_eq!(out.table.rows.len(), 10 * HOURS);
    for row in &out.table.rows {
        let week_ago = ds.day(row.date - chrono::Days::new(7)).unwrap();
        assert_eq!(row.forecast, week_ago.prices[row.hour]);
        assert_eq!(row.actual, ds.day(row.date).unwrap().prices[row.hour]);
    }
    let naive = &out.report.models[0];
    assert_eq!((naive.model.as_str(), naive.rmae), ("naive", Some(1.0)));
}

#[test]
fn periodic_prices_flag_division_by_zero() {
    let ds = weekly_periodic_market(100, 2);
    let out = run_backtest(&ds, &last_days(&ds, 7), &[small_lear()], &EvaluationPolicy::default()).unwrap();
    let r = &out.report;
    assert_eq!(r.flags, vec!["division_by_zero".to_string()]);
    assert_eq!(r.models[0].mae, 0.0);
    assert_eq!(r.models[0].rmae, Some(1.0));
    assert_eq!(r.models[1].rmae, None);
}

#[test]
fn rows_cover_every_day_hour_and_model() {
    let ds = sparse_linear_market(80, 3, 5.0).dataset;
    let models = [small_lear(), ModelSpec::Dnn { settings: tiny_dnn_settings(60), seed: 1 }];
    let out = run_backtest(&ds, &last_days(&ds, 4), &models, &EvaluationPolicy::default()).unwrap();
    assert_eq!(out.table.rows.len(), 4 * HOURS * 3);
    assert_eq!(out.table.models(), vec!["naive", "lear", "dnn"]);
    assert_eq!(out.report.points, 4 * HOURS);
    assert_eq!(out.runtime.len(), 3);
    let lear = &out.report.models[1].diagnostics;
    assert_eq!(lear.recalibrations, 4);
    assert!(lear.selection_grid.is_some());
    let dnn = &out.report.models[2].diagnostics;
    assert_eq!((dnn.recalibrations, dnn.searches), (4, 1));
}

#[test]
fn future_prices_do_not_change_forecasts() {
    let ds = sparse_linear_market(90, 4, 5.0).dataset;
    let split = last_days(&ds, 6);
    let models = [small_lear(), ModelSpec::Dnn { settings: tiny_dnn_settings(60), seed: 3 }];
    let base = run_backtest(&ds, &split, &models, &EvaluationPolicy::default()).unwrap();
    // Corrupt the last three days: forecasts for the first three test days must not move.
    let mut days: Vec<DayRecord> = ds.records().to_vec();
    let n = days.len();
    for d in &mut days[n - 3..] {
        d.prices = [9999.0; HOURS];
    }
    let altered = MarketDataset::from_records(days).unwrap();
    let other = run_backtest(&altered, &split, &models, &EvaluationPolicy::default()).unwrap();
    let cutoff = ds.records()[n - 3].date;
    for (a, b) in base.table.rows.iter().zip(&other.table.rows) {
        assert_eq!((a.date, a.hour, &a.model), (b.date, b.hour, &b.model));
        if a.date <= cutoff {
            assert_eq!(a.forecast, b.forecast, "{} {} {}", a.model, a.date, a.hour);
        }
    }
}

#[test]
fn backtests_are_deterministic() {
    let ds = sparse_linear_market(80, 5, 5.0).dataset;
    let models = [small_lear(), ModelSpec::Dnn { settings: tiny_dnn_settings(60), seed: 9 }];
    let a = run_backtest(&ds, &last_days(&ds, 3), &models, &EvaluationPolicy::default()).unwrap();
    let b = run_backtest(&ds, &last_days(&ds, 3), &models, &EvaluationPolicy::default()).unwrap();
    assert_eq!(a.table.to_csv(), b.table.to_csv());
    assert_eq!(render_report(&a.report, ReportFormat::Json), render_report(&b.report, ReportFormat::Json));
}

#[test]
fn invalid_splits_are_rejected() {
    let ds = sparse_linear_market(40, 6, 5.0).dataset;
    let recs = ds.records();
    let early = SplitSpec::ending_before(recs[20].date, recs[30].date);
    assert!(run_backtest(&ds, &early, &[], &EvaluationPolicy::default()).is_err());
    let overlap = SplitSpec { calibration_end: recs[35].date, test_start: recs[30].date, test_end: ds.last_date() };
    assert!(run_backtest(&ds, &overlap, &[], &EvaluationPolicy::default()).is_err());
}

fn day(i: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i)
}

/// Two models over `days` days: `a` with errors of size 1, `b` with 2.
fn two_model_table(days: u64) -> ForecastTable {
    let mut t = ForecastTable::default();
    for i in 0..days {
        let actual = [10.0; HOURS];
        let near: [f64; HOURS] = std::array::from_fn(|h| if h % 2 == 0 { 11.0 } else { 9.0 });
        let far: [f64; HOURS] = std::array::from_fn(|h| if (h + i as usize) % 3 == 0 { 13.0 } else { 8.0 });
        t.push_day("a", day(i), &near, &actual);
        t.push_day("b", day(i), &far, &actual);
    }
    t
}

#[test]
fn two_by_two_report_json_round_trips() {
    let t = two_model_table(5);
    let r = evaluate(&t, "a", &EvaluationPolicy::default(), &BTreeMap::new()).unwrap();
    assert_eq!(r.dm.models, vec!["a", "b"]);
    assert_eq!(r.dm.verdict[0][0], DmVerdict::Identical);
    assert_eq!(r.dm.verdict[0][1], DmVerdict::RowBetter);
    assert_eq!(r.dm.verdict[1][0], DmVerdict::ColumnBetter);
    assert!(r.dm.statistic[0][1].unwrap() < 0.0);
    let mae_b = (8.0 * 3.0 + 16.0 * 2.0) / 24.0;
    assert!((r.models[1].mae - mae_b).abs() < 0.2);
    let json = render_report(&r, ReportFormat::Json);
    let back: BacktestReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.models[1].rmae, r.models[1].rmae);
}

#[test]
fn short_tables_are_too_short_for_dm() {
    let mut t = ForecastTable::default();
    t.push_day("a", day(0), &[1.0; HOURS], &[0.0; HOURS]);
    t.push_day("b", day(0), &[2.0; HOURS], &[0.0; HOURS]);
    let mut short = ForecastTable::default();
    short.rows = t.rows.into_iter().filter(|r| r.hour < 10).collect();
    let r = evaluate(&short, "a", &EvaluationPolicy::default(), &BTreeMap::new()).unwrap();
    assert_eq!(r.dm.verdict[0][1], DmVerdict::TooShort);
    assert_eq!(r.dm.p_value[0][1], None);
}

#[test]
fn misaligned_tables_are_rejected() {
    let mut t = two_model_table(2);
    t.rows.pop();
    assert!(evaluate(&t, "a", &EvaluationPolicy::default(), &BTreeMap::new()).is_err());
    let t = two_model_table(2);
    assert!(evaluate(&t, "missing", &EvaluationPolicy::default(), &BTreeMap::new()).is_err());
}

#[test]
fn forecast_csv_round_trips() {
    let t = two_model_table(3);
    assert_eq!(ForecastTable::from_csv(&t.to_csv()).unwrap(), t);
}

#[test]
fn dm_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [30, 63, 64, 200, 1000] {
        let a: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| 1.2 * rng.sample::<f64, _>(StandardNormal)).collect();
        let t = diebold_mariano(&a, &b, 1.0).unwrap();
        let (stat, lag) = dm_reference(&a, &b);
        assert_eq!(t.lag, lag);
        assert!((t.statistic - stat).abs() < 1e-10 * stat.abs().max(1.0));
    }
}

#[test]
fn dm_size_is_near_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 300;
    let crit = normal_quantile(0.975);
    let mut rejections = 0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..240).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..240).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t = diebold_mariano(&a, &b, 1.0).unwrap();
        assert_eq!(t.p_value < 0.05, t.statistic.abs() > crit);
        rejections += usize::from(t.p_value < 0.05);
    }
    let rate = rejections as f64 / trials as f64;
    assert!((0.01..=0.10).contains(&rate), "rejection rate {rate}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dm_is_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 30..120),
        shift in 0.01f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * ((i % 5) as f64 - 1.5)).collect();
        let ab = diebold_mariano(&a, &b, 1.0);
        let ba = diebold_mariano(&b, &a, 1.0);
        match (ab, ba) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x.statistic + y.statistic).abs() <= 1e-9 * x.statistic.abs().max(1.0));
                prop_assert!((x.p_value - y.p_value).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one direction failed"),
        }
    }
}
