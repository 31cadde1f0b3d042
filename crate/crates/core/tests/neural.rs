use epfbench::neural::{gaussian_nll, gradcheck, softplus, Activation, Head, Network, NetworkSpec, SIGMA_FLOOR};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Normal};

const ACTIVATIONS: [Activation; 3] = [Activation::Relu, Activation::Tanh, Activation::Sigmoid];

fn act(a: Activation, z: f64) -> f64 {
    match a {
        Activation::Identity => z,
        Activation::Relu => if z > 0.0 { z } else { 0.0 },
        Activation::Tanh => z.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
    }
}

/// Scalar-loop forward pass.
fn reference_forward(net: &Network<f64>, input: &[f64]) -> Vec<f64> {
    let mut a = input.to_vec();
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let (rows, cols) = layer.weights.dim();
        let mut z = vec![0.0; rows];
        for i in 0..rows {
            z[i] = layer.bias[i];
            for j in 0..cols {
                z[i] += layer.weights[[i, j]] * a[j];
            }
        }
        a = if l < last { z.iter().map(|&v| act(net.spec.activation, v)).collect() } else { z };
    }
    if net.spec.head == Head::Gaussian {
        let k = net.spec.outputs;
        for v in &mut a[k..] {
            *v = (1.0 + v.exp()).ln() + SIGMA_FLOOR;
        }
    }
    a
}

fn randomize(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    for l in &mut net.layers {
        l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
}

#[test]
fn forward_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for head in [Head::Point, Head::Gaussian] {
        for activation in ACTIVATIONS {
            let spec = NetworkSpec { outputs: 3, seed: 9, ..NetworkSpec::new(6, vec![5, 4], activation, head) };
            let mut net = Network::<f64>::init(&spec).unwrap();
            randomize(&mut net, &mut rng);
            for _ in 0..10 {
                let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = net.forward(Array1::from(x.clone()).view()).unwrap();
                let want = reference_forward(&net, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "{activation:?} {head:?}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn gaussian_nll_matches_log_density() {
    let mu = [1.0, -2.0, 0.5];
    let sigma = [0.5, 2.0, 3.0];
    let y = [1.3, 0.0, -4.0];
    let want = -(0..3).map(|i| Normal::new(mu[i], sigma[i]).unwrap().ln_pdf(y[i])).sum::<f64>() / 3.0;
    let got = gaussian_nll(&mu, &sigma, &y).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(gaussian_nll(&mu, &[1.0, 0.0, 1.0], &y).is_err());
}

#[test]
fn softplus_is_stable() {
    assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(softplus(800.0f64), 800.0);
    assert!(softplus(-800.0f64) >= 0.0);
}

#[test]
fn gradients_agree_with_finite_differences() {
    for head in [Head::Point, Head::Gaussian] {
        for (k, activation) in ACTIVATIONS.into_iter().enumerate() {
            let spec = NetworkSpec { outputs: 4, seed: 100 + k as u64, ..NetworkSpec::new(7, vec![6, 5], activation, head) };
            let report = gradcheck(&spec, 10, 1e-4, 17 + k as u64).unwrap();
            assert!(report.passed, "{activation:?} {head:?}: {:?}", report.worst);
        }
    }
}

#[test]
fn json_round_trip_preserves_predictions() {
    let spec = NetworkSpec { outputs: 2, seed: 5, ..NetworkSpec::new(3, vec![4], Activation::Tanh, Head::Gaussian) };
    let net = Network::<f64>::init(&spec).unwrap();
    let back = Network::<f64>::from_json(&net.to_json().unwrap()).unwrap();
    let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) / 3.0);
    assert_eq!(net.forward_batch(x.view()).unwrap(), back.forward_batch(x.view()).unwrap());
}

#[test]
fn f32_network_tracks_f64() {
    let spec = NetworkSpec { outputs: 3, seed: 2, ..NetworkSpec::new(4, vec![8], Activation::Sigmoid, Head::Point) };
    let n64 = Network::<f64>::init(&spec).unwrap();
    let n32 = Network::<f32>::init(&spec).unwrap();
    let x64 = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 / 10.0);
    let x32 = x64.mapv(|v| v as f32);
    let a = n64.forward_batch(x64.view()).unwrap();
    let b = n32.forward_batch(x32.view()).unwrap();
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - *v as f64).abs() < 1e-5);
    }
}
