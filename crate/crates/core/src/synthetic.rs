//! Synthetic markets with known data-generating processes.
//!
//! Every generator is a pure function of its arguments. Exogenous series
//! mimic a day-ahead load forecast (`exog1`: daily level, hourly profile,
//! weekend dip) and a wind forecast (`exog2`).

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::features::FeatureBlock;
use crate::market_data::{weekday_index, DayRecord, MarketDataset, HOURS};

/// First date of every synthetic dataset (a Monday).
pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date")
}

const BURN_IN: usize = 28;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn profile(h: usize) -> f64 {
    (std::f64::consts::PI * (h as f64 - 6.0) / 12.0).sin()
}

fn dates(n: usize) -> impl Iterator<Item = NaiveDate> {
    (0..n).map(|i| start_date() + Days::new(i as u64))
}

fn assemble(prices: &[[f64; HOURS]], exog: &[[[f64; HOURS]; 2]]) -> MarketDataset {
    let days = dates(prices.len())
        .zip(prices.iter().zip(exog))
        .map(|(date, (p, x))| DayRecord {
            date,
            prices: *p,
            exog: *x,
        })
        .collect();
    MarketDataset::from_records(days).expect("synthetic data is contiguous and finite")
}

/// Load-like and wind-like exogenous series for `n` days.
fn exogenous(n: usize, rng: &mut ChaCha8Rng, hourly_sd: f64) -> Vec<[[f64; HOURS]; 2]> {
    let mut level = 0.0;
    dates(n)
        .map(|date| {
            level = 0.6 * level + 0.5 * normal(rng);
            let weekend = if weekday_index(date) >= 5 { -0.5 } else { 0.0 };
            let wind_day = 0.7 * normal(rng);
            let mut x = [[0.0; HOURS]; 2];
            for h in 0..HOURS {
                x[0][h] = level + weekend + 0.8 * profile(h) + hourly_sd * normal(rng);
                x[1][h] = wind_day + 0.3 * profile(h + 3) + hourly_sd * normal(rng);
            }
            x
        })
        .collect()
}

/// A market whose hour-`h` price is linear in ten hour-`h` LEAR features.
#[derive(Debug, Clone)]
pub struct SparseMarket {
    pub dataset: MarketDataset,
    pub noise_sd: f64,
}

/// `(block, coefficient)`; for target hour `h` the feature is column `h` of
/// the block.
pub const SPARSE_TERMS: [(FeatureBlock, f64); 10] = [
    (FeatureBlock::PriceLag1, 0.40),
    (FeatureBlock::PriceLag2, 0.15),
    (FeatureBlock::PriceLag3, 0.10),
    (FeatureBlock::PriceLag7, 0.20),
    (FeatureBlock::Exog1Lag0, 3.0),
    (FeatureBlock::Exog1Lag1, -1.5),
    (FeatureBlock::Exog1Lag7, 1.0),
    (FeatureBlock::Exog2Lag0, -2.5),
    (FeatureBlock::Exog2Lag1, 1.2),
    (FeatureBlock::Exog2Lag7, -0.8),
];

impl SparseMarket {
    /// Column indices of the true nonzero coefficients for target hour `hour`.
    pub fn support(hour: usize) -> Vec<usize> {
        SPARSE_TERMS.iter().map(|(b, _)| b.columns().start + hour).collect()
    }
}

fn sparse_prices(exog: &[[[f64; HOURS]; 2]], shocks: &[[f64; HOURS]], sd: f64) -> (Vec<[f64; HOURS]>, f64) {
    let n = exog.len();
    let mut prices = vec![[0.0; HOURS]; n];
    let mut signal = Vec::with_capacity(n * HOURS);
    for d in 0..n {
        for h in 0..HOURS {
            let base = 20.0 + 5.0 * profile(h);
            let mut s = base;
            if d >= 7 {
                for (block, beta) in SPARSE_TERMS {
                    let x = match block {
                        FeatureBlock::PriceLag1 => prices[d - 1][h],
                        FeatureBlock::PriceLag2 => prices[d - 2][h],
                        FeatureBlock::PriceLag3 => prices[d - 3][h],
                        FeatureBlock::PriceLag7 => prices[d - 7][h],
                        FeatureBlock::Exog1Lag0 => exog[d][0][h],
                        FeatureBlock::Exog1Lag1 => exog[d - 1][0][h],
                        FeatureBlock::Exog1Lag7 => exog[d - 7][0][h],
                        FeatureBlock::Exog2Lag0 => exog[d][1][h],
                        FeatureBlock::Exog2Lag1 => exog[d - 1][1][h],
                        FeatureBlock::Exog2Lag7 => exog[d - 7][1][h],
                        FeatureBlock::Dummies => unreachable!(),
                    };
                    // Price lags enter as deviations so the level stays near `base`.
                    let centred = if block.index() < 4 { x - base } else { x };
                    s += beta * centred;
                }
                signal.push(s);
            }
            prices[d][h] = s + sd * shocks[d][h];
        }
    }
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let var = signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / signal.len() as f64;
    (prices, var)
}

/// Ten-sparse linear market with signal-to-noise variance ratio `snr`.
/// The noise level is found by fixed-point iteration because lagged prices
/// carry past noise into the signal.
pub fn sparse_linear_market(n_days: usize, seed: u64, snr: f64) -> SparseMarket {
    let total = n_days + BURN_IN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exog = exogenous(total, &mut rng, 1.0);
    let shocks: Vec<[f64; HOURS]> = (0..total)
        .map(|_| std::array::from_fn(|_| normal(&mut rng)))
        .collect();
    let mut sd = 1.0;
    for _ in 0..6 {
        let (_, var) = sparse_prices(&exog, &shocks, sd);
        sd = (var / snr).sqrt();
    }
    let (prices, _) = sparse_prices(&exog, &shocks, sd);
    SparseMarket {
        dataset: assemble(&prices[BURN_IN..], &exog[BURN_IN..]),
        noise_sd: sd,
    }
}

/// Prices convex in the day-ahead load: `25 + 20 exp(load) - 4 wind + noise`.
pub fn nonlinear_load_market(n_days: usize, seed: u64) -> MarketDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exog = exogenous(n_days, &mut rng, 0.1);
    let prices: Vec<[f64; HOURS]> = exog
        .iter()
        .map(|x| std::array::from_fn(|h| 25.0 + 20.0 * x[0][h].exp() - 4.0 * x[1][h] + 2.0 * normal(&mut rng)))
        .collect();
    assemble(&prices, &exog)
}

/// Gaussian prices whose mean and standard deviation depend on the day's
/// exogenous forecasts.
#[derive(Debug, Clone)]
pub struct HeteroskedasticMarket {
    pub dataset: MarketDataset,
    pub mean: Vec<[f64; HOURS]>,
    pub sd: Vec<[f64; HOURS]>,
}

pub fn heteroskedastic_market(n_days: usize, seed: u64) -> HeteroskedasticMarket {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exog = exogenous(n_days, &mut rng, 0.3);
    let mean: Vec<[f64; HOURS]> = exog
        .iter()
        .map(|x| std::array::from_fn(|h| 40.0 + 8.0 * x[0][h] - 3.0 * x[1][h]))
        .collect();
    let sd: Vec<[f64; HOURS]> = exog
        .iter()
        .map(|x| std::array::from_fn(|h| 1.0 + 4.0 / (1.0 + (-2.0 * x[1][h]).exp())))
        .collect();
    let prices: Vec<[f64; HOURS]> = mean
        .iter()
        .zip(&sd)
        .map(|(m, s)| std::array::from_fn(|h| m[h] + s[h] * normal(&mut rng)))
        .collect();
    HeteroskedasticMarket {
        dataset: assemble(&prices, &exog),
        mean,
        sd,
    }
}

/// Prices repeat exactly every seven days.
pub fn weekly_periodic_market(n_days: usize, seed: u64) -> MarketDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let week: Vec<[f64; HOURS]> = (0..7)
        .map(|_| std::array::from_fn(|h| 40.0 + 10.0 * profile(h) + 5.0 * normal(&mut rng)))
        .collect();
    let exog = exogenous(n_days, &mut rng, 1.0);
    let prices: Vec<[f64; HOURS]> = (0..n_days).map(|d| week[d % 7]).collect();
    assemble(&prices, &exog)
}

pub fn constant_market(n_days: usize, price: f64, seed: u64) -> MarketDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exog = exogenous(n_days, &mut rng, 1.0);
    assemble(&vec![[price; HOURS]; n_days], &exog)
}

/// Only last week's price of the same hour carries signal; the exogenous
/// series are independent noise.
pub fn weekly_lag_market(n_days: usize, seed: u64) -> MarketDataset {
    let total = n_days + BURN_IN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exog: Vec<[[f64; HOURS]; 2]> = (0..total)
        .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| normal(&mut rng))))
        .collect();
    let mut prices = vec![[50.0; HOURS]; total];
    for d in 0..total {
        for h in 0..HOURS {
            let prev = if d >= 7 { prices[d - 7][h] } else { 50.0 };
            prices[d][h] = 50.0 + 0.9 * (prev - 50.0) + 5.0 * normal(&mut rng);
        }
    }
    assemble(&prices[BURN_IN..], &exog[BURN_IN..])
}
