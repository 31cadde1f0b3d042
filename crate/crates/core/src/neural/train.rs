use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Layer, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without validation improvement tolerated before
    /// stopping; 0 stops after the first epoch.
    pub patience: usize,
    pub l2_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            l2_weight: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept (0 if no epoch completed).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub diverged: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }
}

struct Adam<F> {
    params: AdamParams,
    lr: F,
    step: i32,
    m: Vec<Layer<F>>,
    v: Vec<Layer<F>>,
}

impl<F: Scalar> Adam<F> {
    fn new(net: &Network<F>, lr: f64, params: AdamParams) -> Self {
        let zeros: Vec<Layer<F>> = net
            .layers
            .iter()
            .map(|l| Layer {
                weights: Array2::zeros(l.weights.dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect();
        Self {
            params,
            lr: F::lit(lr),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, net: &mut Network<F>, grads: &[Layer<F>]) {
        self.step += 1;
        let b1 = F::lit(self.params.beta1);
        let b2 = F::lit(self.params.beta2);
        let eps = F::lit(self.params.epsilon);
        let c1 = F::one() - b1.powi(self.step);
        let c2 = F::one() - b2.powi(self.step);
        let lr = self.lr;
        let one = F::one();
        let apply = |p: &mut F, g: F, m: &mut F, v: &mut F| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[l], &mut self.v[l], &grads[l]);
            for (((p, &gw), mw), vw) in layer
                .weights
                .iter_mut()
                .zip(g.weights.iter())
                .zip(m.weights.iter_mut())
                .zip(v.weights.iter_mut())
            {
                apply(p, gw, mw, vw);
            }
            for (((p, &gb), mb), vb) in layer
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                apply(p, gb, mb, vb);
            }
        }
    }
}

/// Mini-batch Adam with early stopping on validation loss. Returns the
/// weights of the best validation epoch. One seeded stream drives both
/// shuffling and dropout, so identical inputs give identical histories.
pub fn train<F: Scalar>(
    network: Network<F>,
    train_x: ArrayView2<F>,
    train_y: ArrayView2<F>,
    val_x: ArrayView2<F>,
    val_y: ArrayView2<F>,
    config: &TrainConfig,
) -> Result<(Network<F>, TrainHistory)> {
    train_with(network, train_x, train_y, val_x, val_y, config, AdamParams::default())
}

pub fn train_with<F: Scalar>(
    mut network: Network<F>,
    train_x: ArrayView2<F>,
    train_y: ArrayView2<F>,
    val_x: ArrayView2<F>,
    val_y: ArrayView2<F>,
    config: &TrainConfig,
    adam: AdamParams,
) -> Result<(Network<F>, TrainHistory)> {
    let n = train_x.nrows();
    if n == 0 || val_x.nrows() == 0 {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    if train_y.nrows() != n || val_y.nrows() != val_x.nrows() {
        return Err(Error::shape("matching input and target rows", "mismatch"));
    }
    if config.batch_size == 0 || config.max_epochs == 0 || !(config.learning_rate > 0.0) || config.l2_weight < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid training config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(&network, config.learning_rate, adam);
    let l2 = F::lit(config.l2_weight);
    let mut history = TrainHistory {
        best_val_loss: f64::INFINITY,
        ..TrainHistory::default()
    };
    let mut best = network.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let bx = train_x.select(Axis(0), chunk);
            let by = train_y.select(Axis(0), chunk);
            let cache = network.forward_cached(bx.view(), Some(&mut rng))?;
            let (loss, grads) = network.backward(&cache, by.view(), l2)?;
            epoch_loss += loss.as_f64() * chunk.len() as f64 / n as f64;
            opt.update(&mut network, &grads.layers);
        }
        let val = network.data_loss(val_x, val_y)?.as_f64();
        history.train_loss.push(epoch_loss);
        history.val_loss.push(val);
        if !epoch_loss.is_finite() || !val.is_finite() {
            history.diverged = true;
            break;
        }
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch;
            best = network.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    Ok((best, history))
}
