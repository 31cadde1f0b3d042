//! The multi-output DNN: periodic joint search over input blocks and
//! hyperparameters, daily recalibration of an ensemble, and the Gaussian
//! distributional variant.

use chrono::NaiveDate;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::features::{
    assemble_all, build_features, is_dummy, FeatureBlock, PriceTransform, Standardizer, StandardizerDoc,
    LAYOUT_VERSION, MAX_LAG, N_BLOCKS,
};
use crate::lear::CalibrationWindow;
use crate::market_data::{MarketDataset, HOURS};
use crate::neural::{train, Activation, Head, Network, NetworkDoc, NetworkSpec, TrainConfig, TrainHistory};

pub const ENSEMBLE_FORMAT: &str = "epfbench-dnn/1";

/// Share of each calibration window (its most recent days) held out for
/// early stopping and trial scoring.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// One on/off flag per feature block, in layout order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(pub [bool; N_BLOCKS]);

impl FeatureMask {
    pub fn all() -> Self {
        Self([true; N_BLOCKS])
    }

    pub fn only(blocks: &[FeatureBlock]) -> Self {
        let mut m = [false; N_BLOCKS];
        for b in blocks {
            m[b.index()] = true;
        }
        Self(m)
    }

    pub fn enabled(&self, block: FeatureBlock) -> bool {
        self.0[block.index()]
    }

    pub fn blocks(&self) -> impl Iterator<Item = FeatureBlock> + '_ {
        FeatureBlock::ALL.into_iter().filter(|b| self.enabled(*b))
    }

    /// Layout columns kept by the mask, ascending.
    pub fn columns(&self) -> Vec<usize> {
        self.blocks().flat_map(|b| b.columns()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.blocks().map(|b| b.columns().len()).sum()
    }
}

/// One point in the search space: input blocks plus network and training
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnConfig {
    pub feature_mask: FeatureMask,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub head: Head,
    pub transform: PriceTransform,
    pub max_epochs: usize,
    pub patience: usize,
}

impl DnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_mask.input_dim() == 0 {
            return Err(Error::InvalidArgument("feature mask enables no block".into()));
        }
        if self.head == Head::Gaussian && self.transform != PriceTransform::Identity {
            return Err(Error::InvalidArgument(
                "the Gaussian head models prices directly and cannot be combined with a price transform".into(),
            ));
        }
        self.network_spec(0).validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || !(self.learning_rate > 0.0) || self.l2_weight < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid training hyperparameters in {self:?}")));
        }
        Ok(())
    }

    pub fn network_spec(&self, seed: u64) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.feature_mask.input_dim(),
            hidden: self.hidden.clone(),
            activation: self.activation,
            head: self.head,
            outputs: HOURS,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            l2_weight: self.l2_weight,
            seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.network_spec(0).parameter_count()
    }
}

/// Ranges sampled by the random search. Continuous ranges are `(low, high)`;
/// learning rate and L2 weight are sampled log-uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: (f64, f64),
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub l2_weight: (f64, f64),
    /// Probability that a block is enabled in a sampled mask.
    pub block_probability: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            depths: vec![2],
            widths: vec![16, 32, 64, 128],
            activations: vec![Activation::Relu, Activation::Tanh, Activation::Sigmoid],
            dropout: (0.0, 0.3),
            learning_rate: (1e-4, 1e-2),
            batch_sizes: vec![16, 32, 64],
            l2_weight: (1e-6, 1e-2),
            block_probability: 0.5,
            max_epochs: 200,
            patience: 20,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

impl SearchSpace {
    fn check(&self) -> Result<()> {
        if self.depths.is_empty() || self.widths.is_empty() || self.activations.is_empty() || self.batch_sizes.is_empty()
        {
            return Err(Error::InvalidArgument("search space has an empty choice list".into()));
        }
        if !(self.block_probability > 0.0 && self.block_probability <= 1.0) {
            return Err(Error::InvalidArgument("block probability must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample(&self, head: Head, transform: PriceTransform, rng: &mut ChaCha8Rng) -> DnnConfig {
        let feature_mask = loop {
            let m = FeatureMask(std::array::from_fn(|_| rng.random_bool(self.block_probability)));
            if m.input_dim() > 0 {
                break m;
            }
        };
        let depth = pick(rng, &self.depths);
        let hidden = (0..depth).map(|_| pick(rng, &self.widths)).collect();
        DnnConfig {
            feature_mask,
            hidden,
            activation: pick(rng, &self.activations),
            dropout_rate: uniform(rng, self.dropout),
            learning_rate: log_uniform(rng, self.learning_rate),
            batch_size: pick(rng, &self.batch_sizes),
            l2_weight: log_uniform(rng, self.l2_weight),
            head,
            transform,
            max_epochs: self.max_epochs,
            patience: self.patience,
        }
    }
}

/// Everything the DNN model needs besides data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnSettings {
    pub calib_days: usize,
    pub head: Head,
    pub transform: PriceTransform,
    pub budget: usize,
    pub n_members: usize,
    /// Test days between hyperparameter searches.
    pub search_every: usize,
    pub space: SearchSpace,
}

impl Default for DnnSettings {
    fn default() -> Self {
        Self {
            calib_days: 1456,
            head: Head::Point,
            transform: PriceTransform::Identity,
            budget: 32,
            n_members: 4,
            search_every: 28,
            space: SearchSpace::default(),
        }
    }
}

/// Calibration-window data split chronologically into a training prefix and
/// a validation suffix.
struct WindowData {
    x: Array2<f64>,
    y: Array2<f64>,
    n_train: usize,
    window: CalibrationWindow,
}

impl WindowData {
    fn load(dataset: &MarketDataset, last_day: NaiveDate, calib_days: usize, transform: PriceTransform) -> Result<Self> {
        let data = assemble_all(dataset, last_day, calib_days, transform)?;
        let rows = data.x.nrows();
        let n_val = ((rows as f64 * VALIDATION_FRACTION).round() as usize).max(1);
        if rows < n_val + 2 {
            return Err(Error::insufficient(
                last_day,
                format!("{rows} calibration rows cannot be split into training and validation"),
            ));
        }
        Ok(Self {
            window: CalibrationWindow {
                first_day: data.dates[0] - chrono::Days::new(MAX_LAG as u64),
                last_day,
                rows,
            },
            x: data.x,
            y: data.y,
            n_train: rows - n_val,
        })
    }
}

/// Inputs and targets standardized for one feature mask.
struct Prepared {
    input: Standardizer<f64>,
    target: Standardizer<f64>,
    train_x: Array2<f64>,
    train_y: Array2<f64>,
    val_x: Array2<f64>,
    val_y: Array2<f64>,
}

impl Prepared {
    fn new(data: &WindowData, mask: &FeatureMask) -> Result<Self> {
        let cols = mask.columns();
        let x = data.x.select(Axis(1), &cols);
        let (xt, xv) = x.view().split_at(Axis(0), data.n_train);
        let (yt, yv) = data.y.view().split_at(Axis(0), data.n_train);
        let exempt: Vec<bool> = cols.iter().map(|&j| is_dummy(j)).collect();
        let input = Standardizer::fit_named(xt, &exempt, |k| crate::features::feature_name(cols[k]))?;
        let target = Standardizer::fit(yt, &[false; HOURS])?;
        Ok(Self {
            train_x: input.apply(xt),
            train_y: target.apply(yt),
            val_x: input.apply(xv),
            val_y: target.apply(yv),
            input,
            target,
        })
    }
}

fn train_member(config: &DnnConfig, prep: &Prepared, seed: u64) -> Result<(Network<f64>, TrainHistory)> {
    let net = Network::init(&config.network_spec(seed))?;
    train(
        net,
        prep.train_x.view(),
        prep.train_y.view(),
        prep.val_x.view(),
        prep.val_y.view(),
        &config.train_config(seed),
    )
}

/// Per-member outputs mapped back to price units: means (or point
/// forecasts) and, for the Gaussian head, standard deviations.
fn to_price_space(
    config: &DnnConfig,
    target: &Standardizer<f64>,
    out: ArrayView2<f64>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mu = target.invert(out.slice(s![.., ..HOURS]));
    let mu = mu.mapv(|v| config.transform.inverse(v));
    let sd = (config.head == Head::Gaussian).then(|| {
        let mut sd = out.slice(s![.., HOURS..]).to_owned();
        for mut row in sd.axis_iter_mut(Axis(0)) {
            for h in 0..HOURS {
                row[h] *= target.scales[h];
            }
        }
        sd
    });
    (mu, sd)
}

fn gaussian_nll_prices(mu: &Array2<f64>, sd: &Array2<f64>, y: ArrayView2<f64>) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let n = y.len() as f64;
    mu.iter()
        .zip(sd.iter())
        .zip(y.iter())
        .map(|((m, s), v)| s.ln() + (v - m).powi(2) / (2.0 * s * s) + half_ln_2pi)
        .sum::<f64>()
        / n
}

/// Validation score in price units: MAE for the point head, mean Gaussian
/// negative log-likelihood for the distributional head.
fn score(config: &DnnConfig, prep: &Prepared, net: &Network<f64>, data: &WindowData) -> Result<f64> {
    let out = net.forward_batch(prep.val_x.view())?;
    let (mu, sd) = to_price_space(config, &prep.target, out.view());
    let actual = data.y.slice(s![data.n_train.., ..]).mapv(|v| config.transform.inverse(v));
    let s = match sd {
        None => mu.iter().zip(actual.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / actual.len() as f64,
        Some(sd) => gaussian_nll_prices(&mu, &sd, actual.view()),
    };
    Ok(if s.is_finite() { s } else { f64::INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: DnnConfig,
    pub score: f64,
    pub parameter_count: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Last day of the calibration window the search saw.
    pub last_day: NaiveDate,
    pub best_index: usize,
    pub best: DnnConfig,
    pub trials: Vec<Trial>,
}

impl SearchResult {
    pub fn best_score(&self) -> f64 {
        self.trials[self.best_index].score
    }
}

/// Random search over `settings.space`: `settings.budget` configurations are
/// each trained on the first 80% of the window ending at `last_day` and
/// scored on the remaining 20%. Lowest score wins; ties go to the smaller
/// network, then to the earlier trial.
pub fn search(dataset: &MarketDataset, last_day: NaiveDate, settings: &DnnSettings, seed: u64) -> Result<SearchResult> {
    if settings.budget == 0 {
        return Err(Error::InvalidArgument("search budget must be at least 1".into()));
    }
    settings.space.check()?;
    let data = WindowData::load(dataset, last_day, settings.calib_days, settings.transform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<DnnConfig> = (0..settings.budget)
        .map(|_| settings.space.sample(settings.head, settings.transform, &mut rng))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let trials: Vec<Trial> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let prep = Prepared::new(&data, &config.feature_mask)?;
            let (net, hist) = train_member(&config, &prep, seed.wrapping_add(index as u64))?;
            let score = if hist.diverged && hist.best_epoch == 0 {
                f64::INFINITY
            } else {
                score(&config, &prep, &net, &data)?
            };
            Ok(Trial {
                index,
                parameter_count: config.parameter_count(),
                epochs: hist.epochs_run(),
                score,
                config,
            })
        })
        .collect::<Result<_>>()?;
    let best_index = trials
        .iter()
        .min_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(a.parameter_count.cmp(&b.parameter_count))
                .then(a.index.cmp(&b.index))
        })
        .map(|t| t.index)
        .expect("budget >= 1");
    Ok(SearchResult {
        last_day,
        best_index,
        best: trials[best_index].config.clone(),
        trials,
    })
}

/// Networks sharing one configuration and one pair of standardizers.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnEnsemble {
    pub layout_version: String,
    pub config: DnnConfig,
    pub input_standardizer: Standardizer<f64>,
    pub target_standardizer: Standardizer<f64>,
    pub members: Vec<Network<f64>>,
    pub window: CalibrationWindow,
}

/// Trains `n_members` networks with seeds `seed, seed + 1, ...` on the
/// `calib_days` window ending at `last_day`.
pub fn recalibrate(
    config: &DnnConfig,
    dataset: &MarketDataset,
    last_day: NaiveDate,
    calib_days: usize,
    n_members: usize,
    seed: u64,
) -> Result<DnnEnsemble> {
    config.validate()?;
    if n_members == 0 {
        return Err(Error::InvalidArgument("an ensemble needs at least one member".into()));
    }
    let data = WindowData::load(dataset, last_day, calib_days, config.transform)?;
    let prep = Prepared::new(&data, &config.feature_mask)?;
    let members = (0..n_members)
        .into_par_iter()
        .map(|i| train_member(config, &prep, seed.wrapping_add(i as u64)).map(|(net, _)| net))
        .collect::<Result<Vec<_>>>()?;
    Ok(DnnEnsemble {
        layout_version: LAYOUT_VERSION.to_string(),
        config: config.clone(),
        input_standardizer: prep.input,
        target_standardizer: prep.target,
        members,
        window: data.window,
    })
}

/// Per-hour Gaussian predictive distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionalForecast {
    pub mean: [f64; HOURS],
    pub std: [f64; HOURS],
}

/// Mean and standard deviation of the equal-weight mixture of
/// `N(means[i], sds[i]^2)`.
pub fn pool_gaussian(means: &[f64], sds: &[f64]) -> (f64, f64) {
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let within = sds.iter().map(|s| s * s).sum::<f64>() / n;
    let between = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n;
    (mu, (within + between).sqrt())
}

fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

impl DistributionalForecast {
    /// Central `level` interval `mean +- z sd` per hour.
    pub fn interval(&self, level: f64) -> Result<[(f64, f64); HOURS]> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidArgument(format!("interval level {level} not in (0, 1)")));
        }
        let z = standard_normal_quantile(0.5 * (1.0 + level));
        Ok(std::array::from_fn(|h| (self.mean[h] - z * self.std[h], self.mean[h] + z * self.std[h])))
    }
}

pub fn interval(forecast: &DistributionalForecast, level: f64) -> Result<[(f64, f64); HOURS]> {
    forecast.interval(level)
}

impl DnnEnsemble {
    fn member_outputs(&self, features: ArrayView1<f64>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let cols = self.config.feature_mask.columns();
        let x = features.select(Axis(0), &cols);
        let z = self.input_standardizer.apply_row(x.view()).insert_axis(Axis(0)).to_owned();
        let outs: Vec<Array1<f64>> = self
            .members
            .iter()
            .map(|m| m.forward_batch(z.view()).map(|o| o.row(0).to_owned()))
            .collect::<Result<_>>()?;
        let width = outs[0].len();
        let stacked = Array2::from_shape_fn((outs.len(), width), |(i, j)| outs[i][j]);
        Ok(to_price_space(&self.config, &self.target_standardizer, stacked.view()))
    }

    /// Arithmetic mean of the members' price forecasts (their means for the
    /// Gaussian head).
    pub fn predict_features(&self, features: ArrayView1<f64>) -> Result<[f64; HOURS]> {
        let (mu, _) = self.member_outputs(features)?;
        let avg = mu.mean_axis(Axis(0)).expect("non-empty ensemble");
        Ok(std::array::from_fn(|h| avg[h]))
    }

    pub fn distribution_features(&self, features: ArrayView1<f64>) -> Result<DistributionalForecast> {
        let (mu, sd) = self.member_outputs(features)?;
        let sd = sd.ok_or(Error::WrongHead)?;
        let mut out = DistributionalForecast {
            mean: [0.0; HOURS],
            std: [0.0; HOURS],
        };
        for h in 0..HOURS {
            let (m, s) = pool_gaussian(&mu.column(h).to_vec(), &sd.column(h).to_vec());
            out.mean[h] = m;
            out.std[h] = s;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&EnsembleDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<EnsembleDoc>(text)?.try_into()
    }
}

pub fn predict_day(ensemble: &DnnEnsemble, dataset: &MarketDataset, day: NaiveDate) -> Result<[f64; HOURS]> {
    let f = build_features(dataset, day, ensemble.config.transform)?;
    ensemble.predict_features(ArrayView1::from(f.values()))
}

pub fn predict_distribution(
    ensemble: &DnnEnsemble,
    dataset: &MarketDataset,
    day: NaiveDate,
) -> Result<DistributionalForecast> {
    if ensemble.config.head != Head::Gaussian {
        return Err(Error::WrongHead);
    }
    let f = build_features(dataset, day, ensemble.config.transform)?;
    ensemble.distribution_features(ArrayView1::from(f.values()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleDoc {
    format: String,
    layout_version: String,
    config: DnnConfig,
    window: CalibrationWindow,
    input_standardizer: StandardizerDoc,
    target_standardizer: StandardizerDoc,
    members: Vec<NetworkDoc>,
}

impl From<&DnnEnsemble> for EnsembleDoc {
    fn from(e: &DnnEnsemble) -> Self {
        Self {
            format: ENSEMBLE_FORMAT.to_string(),
            layout_version: e.layout_version.clone(),
            config: e.config.clone(),
            window: e.window,
            input_standardizer: (&e.input_standardizer).into(),
            target_standardizer: (&e.target_standardizer).into(),
            members: e.members.iter().map(NetworkDoc::from_network).collect(),
        }
    }
}

impl TryFrom<EnsembleDoc> for DnnEnsemble {
    type Error = Error;

    fn try_from(doc: EnsembleDoc) -> Result<Self> {
        if doc.format != ENSEMBLE_FORMAT {
            return Err(Error::InvalidArgument(format!("unsupported ensemble format {:?}", doc.format)));
        }
        if doc.layout_version != LAYOUT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "ensemble trained on layout {:?}, this build uses {LAYOUT_VERSION:?}",
                doc.layout_version
            )));
        }
        if doc.members.is_empty() {
            return Err(Error::InvalidArgument("ensemble has no members".into()));
        }
        let members = doc
            .members
            .into_iter()
            .map(NetworkDoc::into_network)
            .collect::<Result<Vec<Network<f64>>>>()?;
        let spec = doc.config.network_spec(0);
        if members.iter().any(|m| m.spec.widths() != spec.widths()) {
            return Err(Error::shape(format!("{:?}", spec.widths()), "different member shapes"));
        }
        Ok(Self {
            layout_version: doc.layout_version,
            config: doc.config,
            input_standardizer: doc.input_standardizer.into(),
            target_standardizer: doc.target_standardizer.into(),
            members,
            window: doc.window,
        })
    }
}
