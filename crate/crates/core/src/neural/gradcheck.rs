use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{Activation, Gradients, Network, NetworkSpec};
use crate::error::Result;

const EPSILON: f64 = 1e-5;
/// Pre-activations closer than this to the ReLU kink trigger a resample.
const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-8;
const BATCH: usize = 4;
const L2: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLocation {
    pub trial: usize,
    pub layer: usize,
    /// `"weight"` or `"bias"`
    pub kind: String,
    pub index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<ParamLocation>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients with central differences (step 1e-5,
/// double precision) on `n_trials` random networks and batches built from
/// `spec`. Dropout is disabled; an L2 term is included.
pub fn gradcheck(spec: &NetworkSpec, n_trials: usize, tolerance: f64, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(spec, n_trials, tolerance, seed, |net, x, y, l2| {
        net.loss_and_gradients(x, y, l2).map(|(_, g)| g)
    })
}

/// As [`gradcheck`], with the analytic gradient supplied by `analytic`.
pub fn gradcheck_with<G>(spec: &NetworkSpec, n_trials: usize, tolerance: f64, seed: u64, analytic: G) -> Result<GradcheckReport>
where
    G: Fn(&Network<f64>, ArrayView2<f64>, ArrayView2<f64>, f64) -> Result<Gradients<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        trials: n_trials,
        parameters_checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    for trial in 0..n_trials {
        let trial_spec = NetworkSpec {
            dropout_rate: 0.0,
            seed: spec.seed.wrapping_add(trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..spec.clone()
        };
        let mut net = Network::<f64>::init(&trial_spec)?;
        for l in &mut net.layers {
            l.bias.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let x = sample_inputs(&net, &mut rng)?;
        let y = Array2::from_shape_fn((BATCH, spec.outputs), |_| rng.sample::<f64, _>(StandardNormal));
        let grads = analytic(&net, x.view(), y.view(), L2)?;

        let loss_at = |n: &Network<f64>| -> Result<f64> {
            Ok(n.data_loss(x.view(), y.view())? + n.l2_penalty(L2))
        };
        for l in 0..net.layers.len() {
            for kind in ["weight", "bias"] {
                let count = if kind == "weight" { net.layers[l].weights.len() } else { net.layers[l].bias.len() };
                for flat in 0..count {
                    let original = param(&net, l, kind, flat);
                    set_param(&mut net, l, kind, flat, original + EPSILON);
                    let plus = loss_at(&net)?;
                    set_param(&mut net, l, kind, flat, original - EPSILON);
                    let minus = loss_at(&net)?;
                    set_param(&mut net, l, kind, flat, original);
                    let numeric = (plus - minus) / (2.0 * EPSILON);
                    let a = if kind == "weight" {
                        grads.layers[l].weights.as_slice().expect("standard layout")[flat]
                    } else {
                        grads.layers[l].bias[flat]
                    };
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                    report.parameters_checked += 1;
                    if !(rel <= report.max_rel_error) {
                        report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                        let index = if kind == "weight" {
                            let cols = net.layers[l].weights.ncols();
                            vec![flat / cols, flat % cols]
                        } else {
                            vec![flat]
                        };
                        report.worst = Some(ParamLocation {
                            trial,
                            layer: l,
                            kind: kind.to_string(),
                            index,
                            analytic: a,
                            numeric,
                        });
                    }
                }
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

fn param(net: &Network<f64>, layer: usize, kind: &str, flat: usize) -> f64 {
    if kind == "weight" {
        net.layers[layer].weights.as_slice().expect("standard layout")[flat]
    } else {
        net.layers[layer].bias[flat]
    }
}

fn set_param(net: &mut Network<f64>, layer: usize, kind: &str, flat: usize, value: f64) {
    if kind == "weight" {
        net.layers[layer].weights.as_slice_mut().expect("standard layout")[flat] = value;
    } else {
        net.layers[layer].bias[flat] = value;
    }
}

/// Random standard-normal batch; for ReLU nets, redrawn until no hidden
/// pre-activation sits within the kink margin.
fn sample_inputs(net: &Network<f64>, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let dim = net.spec.input_dim;
    let mut x = Array2::from_shape_fn((BATCH, dim), |_| rng.sample::<f64, _>(StandardNormal));
    if net.spec.activation != Activation::Relu {
        return Ok(x);
    }
    for _ in 0..1000 {
        let cache = net.forward_cached::<ChaCha8Rng>(x.view(), None)?;
        let hidden = &cache.pre[..cache.pre.len() - 1];
        if hidden.iter().all(|z| z.iter().all(|v| v.abs() >= KINK_MARGIN)) {
            return Ok(x);
        }
        x = Array2::from_shape_fn((BATCH, dim), |_| rng.sample::<f64, _>(StandardNormal));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::network::Head;

    #[test]
    fn default_specs_pass() {
        for (act, head) in [
            (Activation::Tanh, Head::Point),
            (Activation::Relu, Head::Point),
            (Activation::Sigmoid, Head::Gaussian),
            (Activation::Relu, Head::Gaussian),
        ] {
            let spec = NetworkSpec { outputs: 3, ..NetworkSpec::new(5, vec![4, 3], act, head) };
            let r = gradcheck(&spec, 3, 1e-4, 42).unwrap();
            assert!(r.passed, "{act:?} {head:?}: {r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let spec = NetworkSpec { outputs: 2, ..NetworkSpec::new(3, vec![4], Activation::Tanh, Head::Point) };
        let r = gradcheck_with(&spec, 2, 1e-4, 1, |net, x, y, l2| {
            let (_, mut g) = net.loss_and_gradients(x, y, l2)?;
            g.layers[0].weights[[1, 2]] *= 1.01;
            Ok(g)
        })
        .unwrap();
        assert!(!r.passed);
        let worst = r.worst.unwrap();
        assert_eq!((worst.layer, worst.kind.as_str(), worst.index.clone()), (0, "weight", vec![1, 2]));
    }
}
