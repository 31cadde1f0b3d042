//! The 247-column LEAR regressor layout and the standardization shared by
//! every model.
//!
//! Layout (each block 24 hourly values unless noted):
//!
//! | block | content |
//! |-------|---------|
//! | 0..4  | prices at d-1, d-2, d-3, d-7 |
//! | 4..7  | exog1 day-ahead forecast at d, d-1, d-7 |
//! | 7..10 | exog2 day-ahead forecast at d, d-1, d-7 |
//! | 10    | weekday dummies Mon..Sun (7 values) |

use chrono::NaiveDate;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{weekday_index, MarketDataset, HOURS};
use crate::scalar::Scalar;

pub const N_FEATURES: usize = 4 * HOURS + 2 * 3 * HOURS + 7;
pub const N_BLOCKS: usize = 11;
pub const LAYOUT_VERSION: &str = "lear-247/1";
/// Days of history consumed by the deepest lag.
pub const MAX_LAG: usize = 7;
pub const DUMMY_OFFSET: usize = N_FEATURES - 7;

const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBlock {
    PriceLag1,
    PriceLag2,
    PriceLag3,
    PriceLag7,
    Exog1Lag0,
    Exog1Lag1,
    Exog1Lag7,
    Exog2Lag0,
    Exog2Lag1,
    Exog2Lag7,
    Dummies,
}

impl FeatureBlock {
    pub const ALL: [FeatureBlock; N_BLOCKS] = [
        FeatureBlock::PriceLag1,
        FeatureBlock::PriceLag2,
        FeatureBlock::PriceLag3,
        FeatureBlock::PriceLag7,
        FeatureBlock::Exog1Lag0,
        FeatureBlock::Exog1Lag1,
        FeatureBlock::Exog1Lag7,
        FeatureBlock::Exog2Lag0,
        FeatureBlock::Exog2Lag1,
        FeatureBlock::Exog2Lag7,
        FeatureBlock::Dummies,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|b| *b == self).unwrap()
    }

    /// Column range of this block in the 247-vector.
    pub fn columns(self) -> std::ops::Range<usize> {
        let i = self.index();
        if self == FeatureBlock::Dummies {
            DUMMY_OFFSET..N_FEATURES
        } else {
            i * HOURS..(i + 1) * HOURS
        }
    }

    /// `(series, lag in days)`, series 0 = price, 1 = exog1, 2 = exog2.
    fn source(self) -> Option<(usize, usize)> {
        use FeatureBlock::*;
        Some(match self {
            PriceLag1 => (0, 1),
            PriceLag2 => (0, 2),
            PriceLag3 => (0, 3),
            PriceLag7 => (0, 7),
            Exog1Lag0 => (1, 0),
            Exog1Lag1 => (1, 1),
            Exog1Lag7 => (1, 7),
            Exog2Lag0 => (2, 0),
            Exog2Lag1 => (2, 1),
            Exog2Lag7 => (2, 7),
            Dummies => return None,
        })
    }

    pub fn label(self) -> String {
        match self.source() {
            Some((series, lag)) => {
                let s = ["price", "exog1", "exog2"][series];
                if lag == 0 {
                    format!("{s}[d]")
                } else {
                    format!("{s}[d-{lag}]")
                }
            }
            None => "dow".to_string(),
        }
    }
}

/// Human-readable name of column `index`, e.g. `price[d-7][h=17]`.
pub fn feature_name(index: usize) -> String {
    assert!(index < N_FEATURES, "feature index {index} out of range");
    if index >= DUMMY_OFFSET {
        return format!("dow[{}]", WEEKDAYS[index - DUMMY_OFFSET]);
    }
    let block = FeatureBlock::ALL[index / HOURS];
    format!("{}[h={}]", block.label(), index % HOURS)
}

pub fn is_dummy(index: usize) -> bool {
    (DUMMY_OFFSET..N_FEATURES).contains(&index)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutManifest {
    pub version: String,
    pub features: Vec<LayoutEntry>,
}

pub fn layout_manifest() -> LayoutManifest {
    LayoutManifest {
        version: LAYOUT_VERSION.to_string(),
        features: (0..N_FEATURES)
            .map(|index| LayoutEntry {
                index,
                name: feature_name(index),
            })
            .collect(),
    }
}

/// One-hot Mon..Sun indicator.
pub fn weekday_dummies(date: NaiveDate) -> [f64; 7] {
    let mut d = [0.0; 7];
    d[weekday_index(date)] = 1.0;
    d
}

/// Optional variance-stabilizing transform applied to prices before they
/// enter a model (lagged inputs and targets alike).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceTransform {
    #[default]
    Identity,
    Asinh,
}

impl PriceTransform {
    #[inline]
    pub fn forward(self, p: f64) -> f64 {
        match self {
            PriceTransform::Identity => p,
            PriceTransform::Asinh => p.asinh(),
        }
    }

    #[inline]
    pub fn inverse(self, v: f64) -> f64 {
        match self {
            PriceTransform::Identity => v,
            PriceTransform::Asinh => v.sinh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Regressors for forecasting day `day`. Reads prices of days d-7..d-1 and
/// exogenous forecasts of d-7, d-1 and d; never reads the price of `day`.
pub fn build_features(
    dataset: &MarketDataset,
    day: NaiveDate,
    transform: PriceTransform,
) -> Result<FeatureVector> {
    let idx = dataset
        .index_of(day)
        .ok_or_else(|| Error::insufficient(day, "day is not in the dataset"))?;
    if idx < MAX_LAG {
        return Err(Error::insufficient(
            day,
            format!("needs {MAX_LAG} preceding days, dataset has {idx}"),
        ));
    }
    let records = dataset.records();
    let mut values = Vec::with_capacity(N_FEATURES);
    for block in FeatureBlock::ALL {
        match block.source() {
            Some((0, lag)) => values.extend(
                records[idx - lag]
                    .prices
                    .iter()
                    .map(|&p| transform.forward(p)),
            ),
            Some((series, lag)) => values.extend_from_slice(&records[idx - lag].exog[series - 1]),
            None => values.extend_from_slice(&weekday_dummies(day)),
        }
    }
    debug_assert_eq!(values.len(), N_FEATURES);
    Ok(FeatureVector(values))
}

/// Stacked regression problem for one target hour.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub dates: Vec<NaiveDate>,
    pub target_hour: usize,
}

/// Features and all 24 targets over a calibration window. The feature matrix
/// does not depend on the target hour, so models that fit all hours share it.
#[derive(Debug, Clone)]
pub struct CalibrationData {
    pub x: Array2<f64>,
    /// rows x 24 (transformed) prices
    pub y: Array2<f64>,
    pub dates: Vec<NaiveDate>,
}

/// Rows for every day of the `n_days` window ending at `last_day` whose lags
/// fall inside the window (the first 7 days only feed lags).
pub fn assemble_all(
    dataset: &MarketDataset,
    last_day: NaiveDate,
    n_days: usize,
    transform: PriceTransform,
) -> Result<CalibrationData> {
    if n_days < MAX_LAG + 1 {
        return Err(Error::insufficient(
            last_day,
            format!("calibration window of {n_days} days is shorter than {}", MAX_LAG + 1),
        ));
    }
    let window = dataset.window(last_day, n_days).map_err(|_| {
        Error::insufficient(
            last_day,
            format!("calibration window of {n_days} days exceeds available history"),
        )
    })?;
    let rows = n_days - MAX_LAG;
    let mut x = Array2::zeros((rows, N_FEATURES));
    let mut y = Array2::zeros((rows, HOURS));
    let mut dates = Vec::with_capacity(rows);
    for (r, rec) in window.records()[MAX_LAG..].iter().enumerate() {
        let f = build_features(&window, rec.date, transform)?;
        x.row_mut(r).assign(&ArrayView1::from(f.values()));
        for h in 0..HOURS {
            y[[r, h]] = transform.forward(rec.prices[h]);
        }
        dates.push(rec.date);
    }
    Ok(CalibrationData { x, y, dates })
}

pub fn assemble(
    dataset: &MarketDataset,
    last_day: NaiveDate,
    n_days: usize,
    hour: usize,
    transform: PriceTransform,
) -> Result<DesignMatrix> {
    if hour >= HOURS {
        return Err(Error::InvalidArgument(format!("target hour {hour} not in 0..24")));
    }
    let data = assemble_all(dataset, last_day, n_days, transform)?;
    Ok(DesignMatrix {
        y: data.y.column(hour).to_owned(),
        x: data.x,
        dates: data.dates,
        target_hour: hour,
    })
}

/// Column-wise affine standardization with population standard deviation.
/// Exempt columns (weekday dummies) pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<F: Scalar> {
    pub means: Array1<F>,
    pub scales: Array1<F>,
    pub exempt: Vec<bool>,
}

impl<F: Scalar> Standardizer<F> {
    /// Fits on `x`; `names` labels columns in `ConstantColumn` errors.
    pub fn fit_named(x: ArrayView2<F>, exempt: &[bool], names: impl Fn(usize) -> String) -> Result<Self> {
        let (n, p) = x.dim();
        if exempt.len() != p {
            return Err(Error::shape(format!("{p} exemption flags"), exempt.len()));
        }
        if n == 0 {
            return Err(Error::shape("at least one row", 0));
        }
        let nf = F::from_usize_lossy(n);
        let mut means = Array1::zeros(p);
        let mut scales = Array1::ones(p);
        for j in 0..p {
            if exempt[j] {
                continue;
            }
            let col = x.column(j);
            let mean = col.sum() / nf;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let sd = var.sqrt();
            if !(sd > F::lit(1e-12) * mean.abs().max(F::one())) {
                return Err(Error::ConstantColumn {
                    index: j,
                    name: names(j),
                });
            }
            means[j] = mean;
            scales[j] = sd;
        }
        Ok(Self {
            means,
            scales,
            exempt: exempt.to_vec(),
        })
    }

    pub fn fit(x: ArrayView2<F>, exempt: &[bool]) -> Result<Self> {
        Self::fit_named(x, exempt, |j| format!("column {j}"))
    }

    /// Fits over the full 247-column layout with the dummy block exempt.
    pub fn fit_layout(x: ArrayView2<F>) -> Result<Self> {
        let exempt: Vec<bool> = (0..x.ncols()).map(is_dummy).collect();
        Self::fit_named(x, &exempt, |j| {
            if j < N_FEATURES {
                feature_name(j)
            } else {
                format!("column {j}")
            }
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for j in 0..row.len() {
                row[j] = (row[j] - self.means[j]) / self.scales[j];
            }
        }
        out
    }

    pub fn apply_row(&self, row: ArrayView1<F>) -> Array1<F> {
        Array1::from_iter(
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - self.means[j]) / self.scales[j]),
        )
    }

    pub fn invert(&self, z: ArrayView2<F>) -> Array2<F> {
        let mut out = z.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for j in 0..row.len() {
                row[j] = row[j] * self.scales[j] + self.means[j];
            }
        }
        out
    }

    pub fn invert_row(&self, row: ArrayView1<F>) -> Array1<F> {
        Array1::from_iter(
            row.iter()
                .enumerate()
                .map(|(j, &v)| v * self.scales[j] + self.means[j]),
        )
    }

    /// Restriction to a subset of columns.
    pub fn select(&self, columns: &[usize]) -> Self {
        Self {
            means: columns.iter().map(|&j| self.means[j]).collect(),
            scales: columns.iter().map(|&j| self.scales[j]).collect(),
            exempt: columns.iter().map(|&j| self.exempt[j]).collect(),
        }
    }
}

/// Serialized form of a `Standardizer<f64>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizerDoc {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub exempt: Vec<bool>,
}

impl From<&Standardizer<f64>> for StandardizerDoc {
    fn from(s: &Standardizer<f64>) -> Self {
        Self {
            means: s.means.to_vec(),
            scales: s.scales.to_vec(),
            exempt: s.exempt.clone(),
        }
    }
}

impl From<StandardizerDoc> for Standardizer<f64> {
    fn from(d: StandardizerDoc) -> Self {
        Self {
            means: Array1::from(d.means),
            scales: Array1::from(d.scales),
            exempt: d.exempt,
        }
    }
}
