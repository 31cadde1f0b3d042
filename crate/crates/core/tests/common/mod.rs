//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub lambda: f64,
}

/// Correlated Gaussian design, sparse truth, penalty a random fraction of
/// the smallest penalty with an all-zero solution.
pub fn random_instance(seed: u64, max_n: usize, max_p: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(1..=max_p);
    let n = rng.random_range((p + 2).min(max_n)..=max_n);
    let mut z = || rng.sample::<f64, _>(StandardNormal);
    let common: Vec<f64> = (0..n).map(|_| z()).collect();
    let x = Array2::from_shape_fn((n, p), |(i, _)| z() + 0.5 * common[i]);
    let beta: Vec<f64> = (0..p).map(|j| if j % 2 == 0 { 2.0 * z() } else { 0.0 }).collect();
    let y = Array1::from_shape_fn(n, |i| (0..p).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + z() + 3.0);
    let lambda = lambda_max(&x, &y) * rng.random_range(0.01..1.1);
    Instance { x, y, lambda }
}

/// Centered moments `(G, c)` with `G = Xc'Xc / n`, `c = Xc'yc / n`.
pub fn centered_moments(x: &Array2<f64>, y: &Array1<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = x.dim();
    let xm = DMatrix::from_fn(n, p, |i, j| x[[i, j]]);
    let ym = DVector::from_fn(n, |i, _| y[i]);
    let col_means = DVector::from_fn(p, |j, _| xm.column(j).mean());
    let y_mean = ym.mean();
    let xc = DMatrix::from_fn(n, p, |i, j| xm[(i, j)] - col_means[j]);
    let yc = ym.add_scalar(-y_mean);
    let g = xc.transpose() * &xc / n as f64;
    let c = xc.transpose() * yc / n as f64;
    (g, c)
}

/// `max_j |x_j'(y - ybar)| / n`, summed over rows in order.
pub fn lambda_max(x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let n = y.len();
    let mut y_mean = 0.0;
    for v in y {
        y_mean += v;
    }
    y_mean /= n as f64;
    let mut best: f64 = 0.0;
    for j in 0..x.ncols() {
        let mut s = 0.0;
        for i in 0..n {
            s += x[[i, j]] * (y[i] - y_mean);
        }
        best = best.max((s / n as f64).abs());
    }
    best
}

fn objective(g: &DMatrix<f64>, c: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (b.dot(&(g * b))) - c.dot(b) + lambda * b.abs().sum()
}

/// Exhaustive search over sign patterns: for every `s` in `{-1, 0, 1}^p` the
/// stationarity equations `G_SS b = c_S - lambda s_S` are solved; among the
/// sign-consistent candidates the one with the lowest objective is the
/// minimizer. All columns penalized.
pub fn sign_pattern_oracle(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Vec<f64> {
    let (g, c) = centered_moments(x, y);
    let p = c.len();
    let mut best = (objective(&g, &c, &DVector::zeros(p), lambda), vec![0.0; p]);
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        let mut s = vec![0i8; p];
        let mut k = code;
        for sj in s.iter_mut() {
            *sj = (k % 3) as i8 - 1;
            k /= 3;
        }
        let support: Vec<usize> = (0..p).filter(|&j| s[j] != 0).collect();
        if support.is_empty() {
            continue;
        }
        let m = support.len();
        let gss = DMatrix::from_fn(m, m, |a, b| g[(support[a], support[b])]);
        let rhs = DVector::from_fn(m, |a, _| c[support[a]] - lambda * s[support[a]] as f64);
        let Some(sol) = gss.clone().lu().solve(&rhs) else { continue };
        // one step of iterative refinement
        let sol = &sol + gss.clone().lu().solve(&(&rhs - &gss * &sol)).unwrap_or_else(|| DVector::zeros(m));
        if (0..m).any(|a| sol[a] * s[support[a]] as f64 <= 0.0) {
            continue;
        }
        let mut b = DVector::zeros(p);
        for (a, &j) in support.iter().enumerate() {
            b[j] = sol[a];
        }
        let obj = objective(&g, &c, &b, lambda);
        if obj < best.0 {
            best = (obj, b.iter().copied().collect());
        }
    }
    best.1
}

/// Largest violation of the optimality conditions at `beta`:
/// `|c_j - (G beta)_j - lambda sign(beta_j)|` on the support,
/// `max(|c_j - (G beta)_j| - lambda, 0)` off it; unpenalized columns need a
/// zero gradient.
pub fn kkt_violation(x: &Array2<f64>, y: &Array1<f64>, beta: &[f64], lambda: f64, penalized: &[bool]) -> f64 {
    let (g, c) = centered_moments(x, y);
    let b = DVector::from_column_slice(beta);
    let grad = c - g * b;
    (0..beta.len())
        .map(|j| {
            if !penalized[j] {
                grad[j].abs()
            } else if beta[j] != 0.0 {
                (grad[j] - lambda * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Standard normal quantile by bisection on `erfc`, independent of the
/// library's inverse CDF.
pub fn normal_quantile(p: f64) -> f64 {
    let cdf = |z: f64| 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Small DNN settings that train in well under a second per calibration.
pub fn tiny_dnn_settings(calib_days: usize) -> epfbench::dnn::DnnSettings {
    use epfbench::dnn::{DnnSettings, SearchSpace};
    DnnSettings {
        calib_days,
        budget: 3,
        n_members: 2,
        search_every: 5,
        space: SearchSpace {
            widths: vec![8, 16],
            batch_sizes: vec![32],
            max_epochs: 30,
            patience: 5,
            ..SearchSpace::default()
        },
        ..DnnSettings::default()
    }
}

/// Diebold-Mariano statistic for absolute loss, lag chosen by integer cube
/// root, long-run variance from Bartlett-weighted autocovariances.
pub fn dm_reference(a: &[f64], b: &[f64]) -> (f64, usize) {
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.abs() - y.abs()).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let mut lag = 0;
    while (lag + 1) * (lag + 1) * (lag + 1) <= n {
        lag += 1;
    }
    let gamma = |k: usize| (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / n as f64;
    let mut lrv = gamma(0);
    for k in 1..=lag {
        lrv += 2.0 * (1.0 - k as f64 / (lag + 1) as f64) * gamma(k);
    }
    (mean / (lrv / n as f64).sqrt(), lag)
}
