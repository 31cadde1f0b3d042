use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor added to the softplus scale output.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const NETWORK_FORMAT: &str = "epfbench-network/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(F::zero()),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    pub fn derivative<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Relu => {
                if z > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                F::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (F::one() - s)
            }
        }
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<F: Scalar>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

/// Output head: point forecasts, or a Gaussian mean and standard deviation
/// for every target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Point,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
    /// Targets per sample (24 hourly prices for the forecasting models).
    pub outputs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation, head: Head) -> Self {
        Self {
            input_dim,
            hidden,
            activation,
            head,
            outputs: 24,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            Head::Point => self.outputs,
            Head::Gaussian => 2 * self.outputs,
        }
    }

    /// `[input_dim, hidden..., output_width]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_width());
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.outputs == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!("layer widths must be >= 1: {:?}", self.widths())));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Dense layer `out = W in + b`, `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<F> {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer<F>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    /// Input to each layer (`inputs[0]` is the batch itself); hidden entries
    /// are post-activation, post-dropout.
    pub inputs: Vec<Array2<F>>,
    /// Pre-activations of every layer; the last one is the raw head output.
    pub pre: Vec<Array2<F>>,
    /// Inverted-dropout masks per hidden layer (`None` when inactive).
    pub masks: Vec<Option<Array2<F>>>,
}

impl<F> ForwardCache<F> {
    pub fn raw_output(&self) -> &Array2<F> {
        self.pre.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn flatten(&self) -> Vec<F> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

impl<F: Scalar> Network<F> {
    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero
    /// biases, drawn from a stream seeded by `spec.seed`.
    pub fn init(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths()
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| F::lit(rng.random_range(-limit..limit)));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim {
            return Err(Error::shape(format!("{} inputs", self.spec.input_dim), cols));
        }
        Ok(())
    }

    /// Forward pass keeping intermediate activations. Dropout is applied to
    /// hidden activations only when `dropout_rng` is given.
    pub fn forward_cached<R: Rng>(&self, x: ArrayView2<F>, mut dropout_rng: Option<&mut R>) -> Result<ForwardCache<F>> {
        self.check_input(x.ncols())?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
        inputs.push(x.to_owned());
        let rate = self.spec.dropout_rate;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = inputs[l].dot(&layer.weights.t()) + &layer.bias;
            if l + 1 < n_layers {
                let mut a = z.mapv(|v| self.spec.activation.apply(v));
                let mask = match dropout_rng.as_deref_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = F::lit(1.0 / (1.0 - rate));
                        let m = Array2::from_shape_fn(a.dim(), |_| {
                            if rng.random::<f64>() < rate {
                                F::zero()
                            } else {
                                keep
                            }
                        });
                        a *= &m;
                        Some(m)
                    }
                    _ => None,
                };
                masks.push(mask);
                inputs.push(a);
            }
            pre.push(z);
        }
        Ok(ForwardCache { inputs, pre, masks })
    }

    /// Inference on a batch (no dropout). Point head: `outputs` columns;
    /// Gaussian head: means then standard deviations.
    pub fn forward_batch(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        let cache = self.forward_cached::<ChaCha8Rng>(x, None)?;
        Ok(self.head_output(cache.raw_output()))
    }

    pub fn forward(&self, input: ArrayView1<F>) -> Result<Array1<F>> {
        let x = input.insert_axis(Axis(0));
        Ok(self.forward_batch(x)?.row(0).to_owned())
    }

    /// Maps raw head activations to head outputs (softplus + floor on scales).
    pub fn head_output(&self, raw: &Array2<F>) -> Array2<F> {
        match self.spec.head {
            Head::Point => raw.clone(),
            Head::Gaussian => {
                let k = self.spec.outputs;
                let mut out = raw.clone();
                out.slice_mut(s![.., k..])
                    .mapv_inplace(|v| softplus(v) + F::lit(SIGMA_FLOOR));
                out
            }
        }
    }

    /// Data loss of the head output against `y` (MSE or Gaussian NLL).
    pub fn data_loss(&self, x: ArrayView2<F>, y: ArrayView2<F>) -> Result<F> {
        let out = self.forward_batch(x)?;
        self.loss_of_output(&out, y)
    }

    pub fn loss_of_output(&self, out: &Array2<F>, y: ArrayView2<F>) -> Result<F> {
        let k = self.spec.outputs;
        if y.ncols() != k || y.nrows() != out.nrows() {
            return Err(Error::shape(format!("{} x {k} targets", out.nrows()), format!("{:?}", y.dim())));
        }
        match self.spec.head {
            Head::Point => Ok(mse(out.view(), y)),
            Head::Gaussian => gaussian_nll_batch(out.slice(s![.., ..k]), out.slice(s![.., k..]), y),
        }
    }

    pub fn l2_penalty(&self, l2_weight: F) -> F {
        let sq: F = self.layers.iter().map(|l| l.weights.iter().map(|w| *w * *w).sum::<F>()).sum();
        F::lit(0.5) * l2_weight * sq
    }

    /// Reverse-mode gradients of `data loss + l2/2 * ||W||^2` (biases are not
    /// regularized). Returns the loss alongside.
    pub fn backward(&self, cache: &ForwardCache<F>, y: ArrayView2<F>, l2_weight: F) -> Result<(F, Gradients<F>)> {
        let raw = cache.raw_output();
        let (b, width) = raw.dim();
        let k = self.spec.outputs;
        if y.dim() != (b, k) {
            return Err(Error::shape(format!("{b} x {k} targets"), format!("{:?}", y.dim())));
        }
        let denom = F::from_usize_lossy(b * k);
        let mut delta = Array2::<F>::zeros((b, width));
        let loss = match self.spec.head {
            Head::Point => {
                let mut sse = F::zero();
                for i in 0..b {
                    for h in 0..k {
                        let e = raw[[i, h]] - y[[i, h]];
                        sse += e * e;
                        delta[[i, h]] = (e + e) / denom;
                    }
                }
                sse / denom
            }
            Head::Gaussian => {
                let half_ln_2pi = F::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
                let mut total = F::zero();
                for i in 0..b {
                    for h in 0..k {
                        let mu = raw[[i, h]];
                        let r = raw[[i, k + h]];
                        let sigma = softplus(r) + F::lit(SIGMA_FLOOR);
                        let e = y[[i, h]] - mu;
                        let s2 = sigma * sigma;
                        total += sigma.ln() + e * e / (s2 + s2) + half_ln_2pi;
                        delta[[i, h]] = -e / s2 / denom;
                        let dsigma = (F::one() / sigma - e * e / (s2 * sigma)) / denom;
                        delta[[i, k + h]] = dsigma * sigmoid(r);
                    }
                }
                total / denom
            }
        };

        let n_layers = self.layers.len();
        let mut grads: Vec<Layer<F>> = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let mut dw = delta.t().dot(&cache.inputs[l]);
            if l2_weight != F::zero() {
                dw.scaled_add(l2_weight, &layer.weights);
            }
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut da = delta.dot(&layer.weights);
                if let Some(mask) = &cache.masks[l - 1] {
                    da *= mask;
                }
                let z = &cache.pre[l - 1];
                let act = self.spec.activation;
                da.zip_mut_with(z, |g, &zv| *g = *g * act.derivative(zv));
                delta = da;
            }
            grads.push(Layer { weights: dw, bias: db });
        }
        grads.reverse();
        Ok((loss + self.l2_penalty(l2_weight), Gradients { layers: grads }))
    }

    /// Forward (without dropout) and backward in one call.
    pub fn loss_and_gradients(&self, x: ArrayView2<F>, y: ArrayView2<F>, l2_weight: F) -> Result<(F, Gradients<F>)> {
        let cache = self.forward_cached::<ChaCha8Rng>(x, None)?;
        self.backward(&cache, y, l2_weight)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkDoc::from_network(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<NetworkDoc>(text)?.into_network()
    }
}

/// Mean squared error over all entries.
pub fn mse<F: Scalar>(pred: ArrayView2<F>, y: ArrayView2<F>) -> F {
    let n = F::from_usize_lossy(pred.len().max(1));
    pred.iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<F>()
        / n
}

/// Mean over hours of `ln sigma + (y - mu)^2 / (2 sigma^2) + ln(2 pi) / 2`.
pub fn gaussian_nll<F: Scalar>(mu: &[F], sigma: &[F], y: &[F]) -> Result<F> {
    if mu.len() != sigma.len() || mu.len() != y.len() || mu.is_empty() {
        return Err(Error::shape(format!("{} values", mu.len()), format!("{} / {}", sigma.len(), y.len())));
    }
    let half_ln_2pi = F::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let mut total = F::zero();
    for ((&m, &s), &v) in mu.iter().zip(sigma).zip(y) {
        if !(s > F::zero()) {
            return Err(Error::NonPositiveSigma(s.as_f64()));
        }
        let e = v - m;
        total += s.ln() + e * e / (F::lit(2.0) * s * s) + half_ln_2pi;
    }
    Ok(total / F::from_usize_lossy(mu.len()))
}

fn gaussian_nll_batch<F: Scalar>(mu: ArrayView2<F>, sigma: ArrayView2<F>, y: ArrayView2<F>) -> Result<F> {
    let mu = mu.iter().copied().collect::<Vec<_>>();
    let sigma = sigma.iter().copied().collect::<Vec<_>>();
    let y = y.iter().copied().collect::<Vec<_>>();
    gaussian_nll(&mu, &sigma, &y)
}

/// Versioned JSON: spec plus row-major weights and biases per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub format: String,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDoc {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NetworkDoc {
    pub fn from_network<F: Scalar>(net: &Network<F>) -> Self {
        Self {
            format: NETWORK_FORMAT.to_string(),
            spec: net.spec.clone(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().map(|w| w.as_f64()).collect(),
                    bias: l.bias.iter().map(|b| b.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn into_network<F: Scalar>(self) -> Result<Network<F>> {
        if self.format != NETWORK_FORMAT {
            return Err(Error::InvalidArgument(format!("unsupported network format {:?}", self.format)));
        }
        let widths = self.spec.widths();
        if self.layers.len() + 1 != widths.len() {
            return Err(Error::shape(format!("{} layers", widths.len() - 1), self.layers.len()));
        }
        let layers = self
            .layers
            .into_iter()
            .zip(widths.windows(2))
            .map(|(l, w)| {
                if (l.rows, l.cols) != (w[1], w[0]) || l.bias.len() != w[1] || l.weights.len() != w[0] * w[1] {
                    return Err(Error::shape(format!("{} x {}", w[1], w[0]), format!("{} x {}", l.rows, l.cols)));
                }
                Ok(Layer {
                    weights: Array2::from_shape_vec((l.rows, l.cols), l.weights.into_iter().map(F::lit).collect())
                        .expect("shape checked"),
                    bias: l.bias.into_iter().map(F::lit).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Network { spec: self.spec, layers })
    }
}
