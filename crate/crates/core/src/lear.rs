//! LEAR: 24 independent LASSO regressions, one per delivery hour, over the
//! shared 247-column layout, re-estimated on a trailing window every day.

use chrono::NaiveDate;
use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    assemble_all, build_features, feature_name, is_dummy, PriceTransform, Standardizer,
    StandardizerDoc, LAYOUT_VERSION, MAX_LAG, N_FEATURES,
};
use crate::lasso::{lambda_grid, BlockedCv, LassoConfig, LassoError, LassoFit};
use crate::market_data::{MarketDataset, HOURS};

pub const LEAR_FORMAT: &str = "epfbench-lear/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearConfig {
    /// Days in the calibration window, including the 7 days that only feed lags.
    pub calib_days: usize,
    pub cv_folds: usize,
    pub n_lambdas: usize,
    pub lambda_ratio: f64,
    /// Stop the cross-validation path after this many penalties without a
    /// new minimum; `None` scores the whole grid.
    pub cv_patience: Option<usize>,
    /// Skip cross-validation and use this penalty for every hour.
    pub fixed_lambda: Option<f64>,
    pub tol: f64,
    pub max_iters: usize,
    pub transform: PriceTransform,
}

impl Default for LearConfig {
    fn default() -> Self {
        Self {
            calib_days: 1456,
            cv_folds: 7,
            n_lambdas: 30,
            lambda_ratio: 1e-2,
            cv_patience: Some(5),
            fixed_lambda: None,
            tol: 1e-6,
            max_iters: 10_000,
            transform: PriceTransform::Identity,
        }
    }
}

impl LearConfig {
    fn lasso(&self) -> LassoConfig<f64> {
        LassoConfig {
            lambda: 0.0,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationWindow {
    pub first_day: NaiveDate,
    pub last_day: NaiveDate,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearModel {
    pub layout_version: String,
    pub transform: PriceTransform,
    /// The feature matrix is identical for every hour, so one standardizer
    /// serves all 24 regressions.
    pub standardizer: Standardizer<f64>,
    pub per_hour: Vec<LassoFit<f64>>,
    pub lambdas: Vec<f64>,
    pub window: CalibrationWindow,
}

fn tag_hour(e: LassoError<f64>, hour: usize) -> Error {
    match e {
        LassoError::DidNotConverge(fit) => Error::DidNotConverge {
            iterations: fit.iterations_used,
            hour: Some(hour),
        },
        other => other.into(),
    }
}

/// Fits all 24 hourly models on the `calib_days` window ending at
/// `last_day` (the last day whose prices are used).
pub fn fit_lear(dataset: &MarketDataset, last_day: NaiveDate, config: &LearConfig) -> Result<LearModel> {
    let data = assemble_all(dataset, last_day, config.calib_days, config.transform)?;
    let standardizer = Standardizer::fit_layout(data.x.view())?;
    let mut z = standardizer.apply(data.x.view());
    // The seven dummies sum to one, duplicating the intercept. Dropping the
    // last one leaves predictions unchanged and the problem non-singular.
    z.column_mut(N_FEATURES - 1).fill(0.0);
    let penalized: Vec<bool> = (0..N_FEATURES).map(|j| !is_dummy(j)).collect();
    let lasso = config.lasso();
    let folds = config.cv_folds.max(2).min(z.nrows());
    let cv = BlockedCv::new(z.view(), data.y.view(), &penalized, folds)?.with_patience(config.cv_patience);

    let per_hour: Vec<(LassoFit<f64>, f64)> = (0..HOURS)
        .into_par_iter()
        .map(|h| {
            let grid = match config.fixed_lambda {
                Some(l) => vec![l],
                None => {
                    let lmax = cv.full_problem(h).lambda_max(&lasso);
                    if lmax == 0.0 {
                        // the unpenalized columns already fit exactly
                        let fit = cv.fit_full(h, &[0.0], &lasso).map_err(|e| tag_hour(e, h))?;
                        return Ok((fit, 0.0));
                    }
                    let grid = lambda_grid(lmax, config.n_lambdas, config.lambda_ratio)?;
                    let res = cv.run(h, Some(&grid), config.n_lambdas, config.lambda_ratio, &lasso)?;
                    grid[..=res.chosen_index].to_vec()
                }
            };
            let lambda = *grid.last().expect("non-empty grid");
            let fit = cv.fit_full(h, &grid, &lasso).map_err(|e| tag_hour(e, h))?;
            Ok((fit, lambda))
        })
        .collect::<Result<_>>()?;

    let (per_hour, lambdas) = per_hour.into_iter().unzip();
    Ok(LearModel {
        layout_version: LAYOUT_VERSION.to_string(),
        transform: config.transform,
        standardizer,
        per_hour,
        lambdas,
        window: CalibrationWindow {
            first_day: last_day - chrono::Days::new((config.calib_days - 1) as u64),
            last_day,
            rows: config.calib_days - MAX_LAG,
        },
    })
}

impl LearModel {
    pub fn predict_features(&self, features: ArrayView1<f64>) -> [f64; HOURS] {
        let z = self.standardizer.apply_row(features);
        std::array::from_fn(|h| self.transform.inverse(self.per_hour[h].predict_row(z.view())))
    }

    pub fn n_active(&self) -> usize {
        self.per_hour.iter().map(|f| f.active_set.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LearModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LearModelDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// 24 price forecasts for `day` from the fitted hourly regressions.
pub fn predict_lear(model: &LearModel, dataset: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
    let f = build_features(dataset, day, model.transform)?;
    Ok(model.predict_features(ArrayView1::from(f.values())))
}

/// How often each feature was active, per target hour, across recalibrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionGrid {
    /// `counts[j][h]`: number of models whose hour-`h` fit kept feature `j`.
    pub counts: Vec<[u32; HOURS]>,
    pub n_models: u32,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        Self {
            counts: vec![[0; HOURS]; N_FEATURES],
            n_models: 0,
        }
    }
}

impl SelectionGrid {
    pub fn accumulate(&mut self, model: &LearModel) {
        for (h, fit) in model.per_hour.iter().enumerate() {
            for &j in &fit.active_set {
                self.counts[j][h] += 1;
            }
        }
        self.n_models += 1;
    }

    pub fn frequency(&self, feature: usize, hour: usize) -> f64 {
        if self.n_models == 0 {
            0.0
        } else {
            self.counts[feature][hour] as f64 / self.n_models as f64
        }
    }

    /// `feature,h0,...,h23` with one row per layout column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature");
        for h in 0..HOURS {
            out.push_str(&format!(",h{h}"));
        }
        out.push('\n');
        for (j, row) in self.counts.iter().enumerate() {
            out.push_str(&feature_name(j));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn selection_grid<'a>(models: impl IntoIterator<Item = &'a LearModel>) -> SelectionGrid {
    let mut grid = SelectionGrid::default();
    for m in models {
        grid.accumulate(m);
    }
    grid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HourDoc {
    hour: usize,
    lambda: f64,
    intercept: f64,
    iterations: usize,
    coefficients: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LearModelDoc {
    format: String,
    layout_version: String,
    transform: PriceTransform,
    window: CalibrationWindow,
    standardizer: StandardizerDoc,
    hours: Vec<HourDoc>,
}

impl From<&LearModel> for LearModelDoc {
    fn from(m: &LearModel) -> Self {
        Self {
            format: LEAR_FORMAT.to_string(),
            layout_version: m.layout_version.clone(),
            transform: m.transform,
            window: m.window,
            standardizer: (&m.standardizer).into(),
            hours: m
                .per_hour
                .iter()
                .enumerate()
                .map(|(hour, f)| HourDoc {
                    hour,
                    lambda: m.lambdas[hour],
                    intercept: f.intercept,
                    iterations: f.iterations_used,
                    coefficients: f.coefficients.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<LearModelDoc> for LearModel {
    type Error = Error;

    fn try_from(doc: LearModelDoc) -> Result<Self> {
        if doc.format != LEAR_FORMAT {
            return Err(Error::InvalidArgument(format!("unsupported model format {:?}", doc.format)));
        }
        if doc.layout_version != LAYOUT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "model trained on layout {:?}, this build uses {LAYOUT_VERSION:?}",
                doc.layout_version
            )));
        }
        if doc.hours.len() != HOURS || doc.hours.iter().any(|h| h.coefficients.len() != N_FEATURES) {
            return Err(Error::shape("24 hours x 247 coefficients", "other"));
        }
        let lambdas = doc.hours.iter().map(|h| h.lambda).collect();
        let per_hour = doc
            .hours
            .into_iter()
            .map(|h| {
                let coefficients = Array1::from(h.coefficients);
                let active_set = coefficients
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| **b != 0.0)
                    .map(|(j, _)| j)
                    .collect();
                LassoFit {
                    coefficients,
                    intercept: h.intercept,
                    active_set,
                    iterations_used: h.iterations,
                    converged: true,
                    lambda: h.lambda,
                }
            })
            .collect();
        Ok(LearModel {
            layout_version: doc.layout_version,
            transform: doc.transform,
            standardizer: doc.standardizer.into(),
            per_hour,
            lambdas,
            window: doc.window,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(intercepts: [f64; HOURS], transform: PriceTransform) -> LearModel {
        LearModel {
            layout_version: LAYOUT_VERSION.into(),
            transform,
            standardizer: Standardizer {
                means: Array1::zeros(N_FEATURES),
                scales: Array1::ones(N_FEATURES),
                exempt: (0..N_FEATURES).map(is_dummy).collect(),
            },
            per_hour: intercepts
                .iter()
                .map(|&b| LassoFit {
                    coefficients: Array1::zeros(N_FEATURES),
                    intercept: b,
                    active_set: vec![],
                    iterations_used: 0,
                    converged: true,
                    lambda: 1.0,
                })
                .collect(),
            lambdas: vec![1.0; HOURS],
            window: CalibrationWindow {
                first_day: NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(),
                last_day: NaiveDate::from_ymd_opt(2017, 1, 31).unwrap(),
                rows: 24,
            },
        }
    }

    #[test]
    fn zero_coefficients_predict_intercepts() {
        let b: [f64; HOURS] = std::array::from_fn(|h| 10.0 + h as f64);
        let m = zero_model(b, PriceTransform::Identity);
        let f = Array1::from_elem(N_FEATURES, 3.0);
        assert_eq!(m.predict_features(f.view()), b);
    }

    #[test]
    fn asinh_model_with_zero_coefficients_inverts_intercept() {
        let prices: [f64; HOURS] = std::array::from_fn(|h| 40.0 + h as f64);
        let b = prices.map(f64::asinh);
        let m = zero_model(b, PriceTransform::Asinh);
        let out = m.predict_features(Array1::zeros(N_FEATURES).view());
        for h in 0..HOURS {
            assert!((out[h] - prices[h]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_feature_prediction() {
        let mut m = zero_model([1.0; HOURS], PriceTransform::Identity);
        m.standardizer.means[5] = 2.0;
        m.standardizer.scales[5] = 4.0;
        m.per_hour[17].coefficients[5] = 3.0;
        m.per_hour[17].active_set = vec![5];
        let mut f = Array1::zeros(N_FEATURES);
        f[5] = 10.0;
        // 1 + 3 * (10 - 2) / 4
        assert_eq!(m.predict_features(f.view())[17], 7.0);
        assert_eq!(m.predict_features(f.view())[16], 1.0);

        let grid = selection_grid([&m]);
        assert_eq!(grid.counts[5][17], 1);
        let total: u32 = grid.counts.iter().flatten().sum();
        assert_eq!(total, 1);
        let grid3 = selection_grid([&m, &m, &m]);
        assert_eq!(grid3.counts[5][17], 3);
        assert_eq!(grid3.frequency(5, 17), 1.0);
    }

    #[test]
    fn json_round_trip() {
        let mut m = zero_model([0.25; HOURS], PriceTransform::Identity);
        m.per_hour[3].coefficients[100] = -0.1234567890123;
        m.per_hour[3].active_set = vec![100];
        let back = LearModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
