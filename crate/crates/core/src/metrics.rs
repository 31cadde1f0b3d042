//! Point-forecast accuracy measures and the Diebold-Mariano test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shortest series the Diebold-Mariano test accepts.
pub const DM_MIN_LEN: usize = 30;

pub fn mean_absolute<F: Scalar>(errors: &[F]) -> Result<F> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("mean of an empty error series".into()));
    }
    let sum: F = errors.iter().map(|e| e.abs()).sum();
    Ok(sum / F::from_usize_lossy(errors.len()))
}

pub fn mae<F: Scalar>(forecasts: &[F], actuals: &[F]) -> Result<F> {
    if forecasts.len() != actuals.len() {
        return Err(Error::shape(actuals.len(), forecasts.len()));
    }
    let errors: Vec<F> = forecasts.iter().zip(actuals).map(|(f, a)| *f - *a).collect();
    mean_absolute(&errors)
}

/// `model_mae / naive_mae`.
pub fn relative_mae<F: Scalar>(model_mae: F, naive_mae: F) -> Result<F> {
    if naive_mae == F::zero() {
        return Err(Error::DivisionByZero);
    }
    Ok(model_mae / naive_mae)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmTest {
    /// Negative when the first series has the smaller loss.
    pub statistic: f64,
    /// Two-sided, standard-normal reference distribution.
    pub p_value: f64,
    pub lag: usize,
}

/// Diebold-Mariano test on `d_t = |a_t|^q - |b_t|^q` with a Bartlett-kernel
/// (Newey-West) long-run variance at lag `floor(n^(1/3))`.
pub fn diebold_mariano<F: Scalar>(errors_a: &[F], errors_b: &[F], loss_power: F) -> Result<DmTest> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::shape(errors_a.len(), errors_b.len()));
    }
    let n = errors_a.len();
    if n < DM_MIN_LEN {
        return Err(Error::InvalidArgument(format!(
            "Diebold-Mariano needs at least {DM_MIN_LEN} observations, got {n}"
        )));
    }
    if !(loss_power > F::zero()) {
        return Err(Error::InvalidArgument(format!("loss power must be positive, got {loss_power}")));
    }
    let d: Vec<f64> = errors_a
        .iter()
        .zip(errors_b)
        .map(|(a, b)| (a.abs().powf(loss_power) - b.abs().powf(loss_power)).as_f64())
        .collect();
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateDifferential);
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let lag = (nf.cbrt() + 1e-9).floor() as usize;
    let autocov = |k: usize| (k..n).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / nf;
    let mut lrv = autocov(0);
    for k in 1..=lag {
        lrv += 2.0 * (1.0 - k as f64 / (lag as f64 + 1.0)) * autocov(k);
    }
    let statistic = if lrv > 0.0 {
        mean / (lrv / nf).sqrt()
    } else {
        // constant nonzero differential: one model is better at every point
        mean.signum() * f64::INFINITY
    };
    let p_value = erfc(statistic.abs() / std::f64::consts::SQRT_2);
    Ok(DmTest { statistic, p_value, lag })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_mae() {
        let e = mae(&[1.0, -1.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((e - 4.0 / 3.0f64).abs() < 1e-15);
        assert_eq!(relative_mae(6.0, 10.0).unwrap(), 0.6);
        assert!(matches!(relative_mae(1.0, 0.0), Err(Error::DivisionByZero)));
        assert_eq!(mae::<f32>(&[2.0], &[1.5]).unwrap(), 0.5);
    }

    #[test]
    fn dm_basic_errors() {
        let a = vec![1.0; 40];
        assert!(matches!(diebold_mariano(&a, &a, 1.0), Err(Error::DegenerateDifferential)));
        assert!(diebold_mariano(&a[..10], &a[..10], 1.0).is_err());
        assert!(diebold_mariano(&a, &a[..35], 1.0).is_err());
    }

    #[test]
    fn dm_lag_is_cube_root() {
        let a: Vec<f64> = (0..64).map(|i| (i % 5) as f64).collect();
        let b: Vec<f64> = (0..64).map(|i| (i % 3) as f64).collect();
        assert_eq!(diebold_mariano(&a, &b, 1.0).unwrap().lag, 4);
        assert_eq!(diebold_mariano(&a[..63], &b[..63], 1.0).unwrap().lag, 3);
    }

    #[test]
    fn dm_uniformly_better_is_infinitely_significant() {
        let a = vec![1.0; 30];
        let b = vec![2.0; 30];
        let t = diebold_mariano(&a, &b, 1.0).unwrap();
        assert_eq!(t.statistic, f64::NEG_INFINITY);
        assert_eq!(t.p_value, 0.0);
    }
}
