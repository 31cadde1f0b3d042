//! L1-penalized least squares by cyclic coordinate descent.
//!
//! Objective, with an unpenalized intercept `b`:
//!
//! ```text
//! (1/2n) ||y - X beta - b||^2 + lambda * sum_{j penalized} |beta_j|
//! ```
//!
//! The intercept is profiled out by centering, so the solver works on the
//! centered Gram matrix `C = Xc'Xc / n` and cross-products `c = Xc'yc / n`.
//! Covariance updates make a sweep cost `O(p * |support|)`, and the same
//! moments serve every fold of a time-blocked cross-validation.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Proximal map of `gamma * |.|`: `sign(z) * max(|z| - gamma, 0)`.
#[inline]
pub fn soft_threshold<F: Scalar>(z: F, gamma: F) -> F {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        F::zero()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoConfig<F> {
    pub lambda: F,
    /// Cap on coordinate-descent sweeps.
    pub max_iters: usize,
    /// Convergence threshold on the largest coefficient change in a full sweep.
    pub tol: F,
}

impl<F: Scalar> Default for LassoConfig<F> {
    fn default() -> Self {
        Self {
            lambda: F::zero(),
            max_iters: 10_000,
            tol: F::lit(1e-6),
        }
    }
}

impl<F: Scalar> LassoConfig<F> {
    pub fn with_lambda(self, lambda: F) -> Self {
        Self { lambda, ..self }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= F::zero()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tol > F::zero()) {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit<F> {
    pub coefficients: Array1<F>,
    pub intercept: F,
    /// Indices of nonzero coefficients, ascending.
    pub active_set: Vec<usize>,
    pub iterations_used: usize,
    pub converged: bool,
    pub lambda: F,
}

impl<F: Scalar> LassoFit<F> {
    pub fn predict_row(&self, row: ArrayView1<F>) -> F {
        self.active_set
            .iter()
            .fold(self.intercept, |acc, &j| acc + self.coefficients[j] * row[j])
    }

    pub fn predict(&self, x: ArrayView2<F>) -> Array1<F> {
        x.axis_iter(Axis(0)).map(|row| self.predict_row(row)).collect()
    }

    pub fn l1_norm(&self) -> F {
        self.coefficients.iter().map(|b| b.abs()).sum()
    }
}

#[derive(Debug, Clone)]
pub enum LassoError<F> {
    /// Sweep budget exhausted; carries the last iterate.
    DidNotConverge(Box<LassoFit<F>>),
    Invalid(String),
}

impl<F> std::fmt::Display for LassoError<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LassoError::DidNotConverge(fit) => write!(
                f,
                "coordinate descent did not converge within {} sweeps",
                fit.iterations_used
            ),
            LassoError::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl<F> From<LassoError<F>> for Error {
    fn from(e: LassoError<F>) -> Self {
        match e {
            LassoError::DidNotConverge(fit) => Error::DidNotConverge {
                iterations: fit.iterations_used,
                hour: None,
            },
            LassoError::Invalid(msg) => Error::InvalidArgument(msg),
        }
    }
}

/// Centered second moments of one least-squares problem.
#[derive(Debug, Clone)]
pub struct GramProblem<F> {
    n: usize,
    x_mean: Array1<F>,
    y_mean: F,
    gram: Arc<Array2<F>>,
    xty: Array1<F>,
    yy: F,
    penalized: Vec<bool>,
    /// Columns with (numerically) zero variance; their coefficients stay 0.
    degenerate: Arc<Vec<bool>>,
}

fn degenerate_columns<F: Scalar>(gram: &Array2<F>) -> Vec<bool> {
    let floor = F::epsilon().powf(F::lit(0.75));
    gram.diag().iter().map(|&g| !(g > floor)).collect()
}

fn mean<F: Scalar>(v: impl Iterator<Item = F>, n: usize) -> F {
    v.sum::<F>() / F::from_usize_lossy(n)
}

impl<F: Scalar> GramProblem<F> {
    /// `penalized[j] == false` exempts column `j` from the L1 penalty.
    pub fn from_data(x: ArrayView2<F>, y: ArrayView1<F>, penalized: Option<&[bool]>) -> Result<Self> {
        let (n, p) = x.dim();
        if n == 0 {
            return Err(Error::shape("at least one row", 0));
        }
        if y.len() != n {
            return Err(Error::shape(format!("{n} targets"), y.len()));
        }
        let penalized = match penalized {
            Some(m) if m.len() != p => return Err(Error::shape(format!("{p} penalty flags"), m.len())),
            Some(m) => m.to_vec(),
            None => vec![true; p],
        };
        let nf = F::from_usize_lossy(n);
        let y_mean = mean(y.iter().copied(), n);
        let x_mean: Array1<F> = (0..p).map(|j| mean(x.column(j).iter().copied(), n)).collect();
        let mut xc = x.to_owned();
        for j in 0..p {
            let m = x_mean[j];
            xc.column_mut(j).mapv_inplace(|v| v - m);
        }
        let gram = (xc.t().dot(&xc) / nf).as_standard_layout().into_owned();
        // x_j'(y - ybar) / n, summed in row order
        let xty: Array1<F> = (0..p)
            .map(|j| {
                x.column(j)
                    .iter()
                    .zip(y.iter())
                    .map(|(&a, &b)| a * (b - y_mean))
                    .sum::<F>()
                    / nf
            })
            .collect();
        let yy = y.iter().map(|&v| (v - y_mean) * (v - y_mean)).sum::<F>() / nf;
        Ok(Self {
            n,
            x_mean,
            y_mean,
            degenerate: Arc::new(degenerate_columns(&gram)),
            gram: Arc::new(gram),
            xty,
            yy,
            penalized,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_features(&self) -> usize {
        self.xty.len()
    }

    pub fn penalized(&self) -> &[bool] {
        &self.penalized
    }

    /// `(1/2n)||y - X beta - b||^2 + lambda ||beta_pen||_1` at the optimal intercept.
    pub fn objective(&self, beta: ArrayView1<F>, lambda: F) -> F {
        let half = F::lit(0.5);
        let quad = beta.dot(&self.gram.dot(&beta));
        let lin = self.xty.dot(&beta);
        let l1: F = beta
            .iter()
            .zip(&self.penalized)
            .filter(|(_, &p)| p)
            .map(|(b, _)| b.abs())
            .sum();
        half * (self.yy - lin - lin + quad) + lambda * l1
    }

    fn col_is_degenerate(&self, j: usize) -> bool {
        self.degenerate[j]
    }

    /// One cyclic pass over `coords`; returns the largest coefficient change.
    fn sweep(&self, lambda: F, beta: &mut Array1<F>, support: &mut Support, coords: &[usize]) -> F {
        let p = self.n_features();
        let gram = self.gram.as_slice().expect("standard layout");
        let b = beta.as_slice_mut().expect("contiguous");
        // gradient xty - G b, kept current as coordinates move
        let mut grad = self.xty.to_vec();
        for &k in &support.members {
            axpy(&mut grad, -b[k], &gram[k * p..(k + 1) * p]);
        }
        let mut max_delta = F::zero();
        for &j in coords {
            if self.degenerate[j] {
                continue;
            }
            let row = &gram[j * p..(j + 1) * p];
            let cjj = row[j];
            let z = grad[j] + cjj * b[j];
            let new = if self.penalized[j] {
                soft_threshold(z, lambda) / cjj
            } else {
                z / cjj
            };
            let step = new - b[j];
            if step != F::zero() {
                axpy(&mut grad, -step, row);
                b[j] = new;
                support.insert(j);
                max_delta = max_delta.max(step.abs());
            }
        }
        max_delta
    }

    /// Moves `beta` to the minimizer over its current sign pattern, dropping
    /// coordinates that would change sign on the way (active-set method), so
    /// the objective does not increase. Support columns collinear with those
    /// already factored keep their values. Returns false if the solve breaks
    /// down numerically.
    fn pattern_step(&self, lambda: F, beta: &mut Array1<F>, factor: &mut PatternFactor<F>) -> bool {
        let p = self.n_features();
        let gram = self.gram.as_slice().expect("standard layout");
        for _ in 0..=2 * p {
            for pos in (0..factor.order.len()).rev() {
                let j = factor.order[pos];
                if self.penalized[j] && beta[j] == F::zero() {
                    factor.delete(pos);
                }
            }
            let mut frozen = Vec::new();
            for j in 0..p {
                let wanted = !self.col_is_degenerate(j) && (beta[j] != F::zero() || !self.penalized[j]);
                if wanted && !factor.contains(j) && !factor.push(&self.gram, j) {
                    frozen.push(j);
                }
            }
            if factor.order.is_empty() {
                return true;
            }
            if frozen.iter().any(|&k| self.null_move(lambda, beta, factor, k)) {
                continue;
            }
            let mut rhs: Vec<F> = factor
                .order
                .iter()
                .map(|&j| {
                    if self.penalized[j] {
                        self.xty[j] - lambda * beta[j].signum()
                    } else {
                        self.xty[j]
                    }
                })
                .collect();
            for &k in &frozen {
                let row = &gram[k * p..(k + 1) * p];
                for (r, &j) in rhs.iter_mut().zip(&factor.order) {
                    *r -= row[j] * beta[k];
                }
            }
            let target = factor.solve(&rhs);
            if target.iter().any(|v| !v.is_finite()) {
                return false;
            }
            // longest step along beta -> target that keeps every sign
            let mut step = F::one();
            let mut blocking = None;
            for (&j, &b) in factor.order.iter().zip(&target) {
                if self.penalized[j] && b * beta[j] <= F::zero() {
                    let t = beta[j] / (beta[j] - b);
                    if t < step {
                        step = t;
                        blocking = Some(j);
                    }
                }
            }
            for (&j, &b) in factor.order.iter().zip(&target) {
                let old = beta[j];
                beta[j] = old + step * (b - old);
            }
            match blocking {
                Some(j) => beta[j] = F::zero(),
                None => return true,
            }
        }
        true
    }

    /// For a column `k` in the span of the factored support, moves along the
    /// direction that keeps the fitted values (nearly) fixed while the
    /// objective decreases, until a coordinate reaches zero. Returns true
    /// when one did.
    fn null_move(&self, lambda: F, beta: &mut Array1<F>, factor: &PatternFactor<F>, k: usize) -> bool {
        let p = self.n_features();
        let gram = self.gram.as_slice().expect("standard layout");
        let gk = &gram[k * p..(k + 1) * p];
        let w = factor.solve(&factor.order.iter().map(|&j| gk[j]).collect::<Vec<_>>());
        if w.iter().any(|v| !v.is_finite()) {
            return false;
        }
        // direction v: +1 on k, -w on the factored support
        let dir = |i: usize| -> (usize, F) {
            if i == 0 {
                (k, F::one())
            } else {
                (factor.order[i - 1], -w[i - 1])
            }
        };
        let count = factor.order.len() + 1;
        let mut grad = self.xty.to_vec();
        for (j, &b) in beta.iter().enumerate() {
            if b != F::zero() {
                axpy(&mut grad, -b, &gram[j * p..(j + 1) * p]);
            }
        }
        let mut slope = F::zero();
        let mut curvature = gk[k];
        let mut scale = F::one();
        for i in 0..count {
            let (j, v) = dir(i);
            slope -= grad[j] * v;
            if self.penalized[j] {
                slope += lambda * beta[j].signum() * v;
            }
            if i > 0 {
                curvature -= gk[j] * w[i - 1];
            }
            scale += v.abs();
        }
        if !(slope.abs() > F::epsilon().sqrt() * lambda.max(F::epsilon()) * scale) {
            return false;
        }
        let sign = if slope > F::zero() { -F::one() } else { F::one() };
        let mut t = F::infinity();
        let mut blocking = None;
        for i in 0..count {
            let (j, v) = dir(i);
            let v = sign * v;
            if self.penalized[j] && beta[j] * v < F::zero() {
                let tj = -beta[j] / v;
                if tj < t {
                    t = tj;
                    blocking = Some(j);
                }
            }
        }
        let curvature = curvature.max(F::zero());
        if curvature > F::zero() && slope.abs() / curvature < t {
            t = slope.abs() / curvature;
            blocking = None;
        }
        if !t.is_finite() {
            return false;
        }
        for i in 0..count {
            let (j, v) = dir(i);
            beta[j] += t * sign * v;
        }
        match blocking {
            Some(j) => {
                beta[j] = F::zero();
                true
            }
            None => false,
        }
    }

    /// Full cyclic sweeps, each followed by an exact minimization over the
    /// sign pattern it produced. When the support is collinear (for instance
    /// larger than the sample), sweeps restricted to the support take over
    /// until a full sweep leaves a smaller support. Stops when a full sweep
    /// moves no coefficient by `tol` or more.
    fn descend(
        &self,
        lambda: F,
        beta: &mut Array1<F>,
        max_sweeps: usize,
        tol: F,
        factor: &mut PatternFactor<F>,
    ) -> (usize, bool) {
        let p = self.n_features();
        let all: Vec<usize> = (0..p).collect();
        let mut sweeps = 0;
        // support size at which the last exact step failed
        let mut failed_at: Option<usize> = None;
        loop {
            let nnz = beta.iter().filter(|b| **b != F::zero()).count();
            let accelerate = nnz > 0 && failed_at.is_none_or(|m| nnz < m);
            if accelerate {
                let saved = beta.clone();
                if self.pattern_step(lambda, beta, factor) {
                    failed_at = None;
                } else {
                    beta.assign(&saved);
                    factor.clear();
                    failed_at = Some(nnz);
                }
            }
            let mut support = Support::from_beta(beta);
            if sweeps >= max_sweeps {
                return (sweeps, false);
            }
            let delta = self.sweep(lambda, beta, &mut support, &all);
            sweeps += 1;
            if delta < tol {
                return (sweeps, true);
            }
            if failed_at.is_none() {
                continue;
            }
            loop {
                if sweeps >= max_sweeps {
                    return (sweeps, false);
                }
                let coords = support.members.clone();
                let delta = self.sweep(lambda, beta, &mut support, &coords);
                sweeps += 1;
                if delta < tol {
                    break;
                }
            }
        }
    }

    fn make_fit(&self, beta: Array1<F>, lambda: F, iterations_used: usize, converged: bool) -> LassoFit<F> {
        let intercept = self.y_mean - self.x_mean.dot(&beta);
        let active_set = beta
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != F::zero())
            .map(|(j, _)| j)
            .collect();
        LassoFit {
            coefficients: beta,
            intercept,
            active_set,
            iterations_used,
            converged,
            lambda,
        }
    }

    /// Solution with every penalized coefficient at zero.
    pub fn null_fit(&self, config: &LassoConfig<F>) -> LassoFit<F> {
        let mut beta = Array1::zeros(self.n_features());
        let (it, ok) = if self.penalized.iter().all(|&p| p) {
            (0, true)
        } else {
            let mut factor = PatternFactor::new(self.n_features());
            self.descend(F::infinity(), &mut beta, config.max_iters, config.tol, &mut factor)
        };
        self.make_fit(beta, F::infinity(), it, ok)
    }

    fn lambda_max_from(&self, null: &LassoFit<F>) -> F {
        let beta = &null.coefficients;
        let floor = F::epsilon().sqrt() * self.yy.max(F::zero()).sqrt();
        (0..self.n_features())
            .filter(|&j| self.penalized[j])
            .map(|j| {
                let g = (self.xty[j] - self.gram.row(j).dot(beta)).abs();
                if g > floor * self.gram[[j, j]].sqrt() {
                    g
                } else {
                    F::zero()
                }
            })
            .fold(F::zero(), F::max)
    }

    /// Smallest penalty with an all-zero penalized solution:
    /// `max_j |x_j' r0| / n` over penalized `j`, `r0` the null-fit residual.
    /// Correlations at rounding level (below `sqrt(eps)` relative to
    /// `|x_j| |y|`) count as zero, so a null fit that is already exact
    /// gives 0.
    pub fn lambda_max(&self, config: &LassoConfig<F>) -> F {
        self.lambda_max_from(&self.null_fit(config))
    }

    /// Solves at `config.lambda`, warm-started from `warm` when given.
    pub fn solve(&self, config: &LassoConfig<F>, warm: Option<&Array1<F>>) -> std::result::Result<LassoFit<F>, LassoError<F>> {
        self.solve_with(config, warm, &mut PatternFactor::new(self.n_features()))
    }

    fn solve_with(
        &self,
        config: &LassoConfig<F>,
        warm: Option<&Array1<F>>,
        factor: &mut PatternFactor<F>,
    ) -> std::result::Result<LassoFit<F>, LassoError<F>> {
        config.validate().map_err(|e| LassoError::Invalid(e.to_string()))?;
        let lambda = config.lambda;
        let (mut beta, used) = match warm {
            Some(w) if w.len() == self.n_features() => (w.clone(), 0),
            Some(w) => {
                return Err(LassoError::Invalid(format!(
                    "warm start has {} coefficients, expected {}",
                    w.len(),
                    self.n_features()
                )))
            }
            None => {
                let null = self.null_fit(config);
                if lambda >= self.lambda_max_from(&null) {
                    let mut fit = null;
                    fit.lambda = lambda;
                    return if fit.converged {
                        Ok(fit)
                    } else {
                        Err(LassoError::DidNotConverge(Box::new(fit)))
                    };
                }
                (null.coefficients, null.iterations_used)
            }
        };
        let (it, ok) = self.descend(lambda, &mut beta, config.max_iters.saturating_sub(used), config.tol, factor);
        let fit = self.make_fit(beta, lambda, used + it, ok);
        if ok {
            Ok(fit)
        } else {
            Err(LassoError::DidNotConverge(Box::new(fit)))
        }
    }

    /// Warm-started fits along a (descending) penalty grid.
    pub fn fit_path(&self, grid: &[F], config: &LassoConfig<F>) -> std::result::Result<Vec<LassoFit<F>>, LassoError<F>> {
        let mut walker = PathWalker::new(self, config);
        grid.iter().map(|&lambda| walker.fit(lambda, config)).collect()
    }
}

/// Warm-started fits at successively smaller penalties, sharing one
/// support factorization.
struct PathWalker<'a, F: Scalar> {
    problem: &'a GramProblem<F>,
    null: LassoFit<F>,
    lambda_max: F,
    warm: Option<Array1<F>>,
    factor: PatternFactor<F>,
}

impl<'a, F: Scalar> PathWalker<'a, F> {
    fn new(problem: &'a GramProblem<F>, config: &LassoConfig<F>) -> Self {
        let null = problem.null_fit(config);
        Self {
            problem,
            lambda_max: problem.lambda_max_from(&null),
            null,
            warm: None,
            factor: PatternFactor::new(problem.n_features()),
        }
    }

    fn fit(&mut self, lambda: F, config: &LassoConfig<F>) -> std::result::Result<LassoFit<F>, LassoError<F>> {
        let fit = if lambda >= self.lambda_max {
            LassoFit { lambda, ..self.null.clone() }
        } else {
            let warm = self.warm.as_ref().unwrap_or(&self.null.coefficients);
            self.problem.solve_with(&config.with_lambda(lambda), Some(warm), &mut self.factor)?
        };
        self.warm = Some(fit.coefficients.clone());
        Ok(fit)
    }
}

/// Cholesky factor `L L' = G_SS` of the Gram matrix restricted to an ordered
/// support, updated as columns enter and leave.
#[derive(Debug, Clone)]
struct PatternFactor<F> {
    order: Vec<usize>,
    /// Row `i` of `L` holds its first `i + 1` entries.
    rows: Vec<Vec<F>>,
    member: Vec<bool>,
}

impl<F: Scalar> PatternFactor<F> {
    fn new(p: usize) -> Self {
        Self {
            order: Vec::new(),
            rows: Vec::new(),
            member: vec![false; p],
        }
    }

    fn clear(&mut self) {
        for &j in &self.order {
            self.member[j] = false;
        }
        self.order.clear();
        self.rows.clear();
    }

    fn contains(&self, j: usize) -> bool {
        self.member[j]
    }

    /// Appends column `j`; false if it is (numerically) in the span of the
    /// current columns.
    fn push(&mut self, gram: &Array2<F>, j: usize) -> bool {
        let m = self.order.len();
        let g = gram.row(j);
        let mut row = Vec::with_capacity(m + 1);
        for i in 0..m {
            let li = &self.rows[i];
            let dot: F = li[..i].iter().zip(&row).map(|(a, b)| *a * *b).sum();
            row.push((g[self.order[i]] - dot) / li[i]);
        }
        let d = g[j] - row.iter().map(|v| *v * *v).sum::<F>();
        if !(d > F::epsilon().powf(F::lit(0.6)) * g[j]) {
            return false;
        }
        row.push(d.sqrt());
        self.rows.push(row);
        self.order.push(j);
        self.member[j] = true;
        true
    }

    /// Removes the column at `pos`, restoring triangularity with Givens
    /// rotations.
    fn delete(&mut self, pos: usize) {
        let j = self.order.remove(pos);
        self.member[j] = false;
        self.rows.remove(pos);
        // rows pos.. now carry one entry right of the diagonal
        for i in pos..self.rows.len() {
            let (a, b) = (self.rows[i][i], self.rows[i][i + 1]);
            let r = a.hypot(b);
            let (c, s) = (a / r, b / r);
            for row in &mut self.rows[i..] {
                let (x, y) = (row[i], row[i + 1]);
                row[i] = c * x + s * y;
                row[i + 1] = c * y - s * x;
            }
            self.rows[i].truncate(i + 1);
        }
    }

    fn solve(&self, rhs: &[F]) -> Vec<F> {
        let m = self.order.len();
        let mut z = vec![F::zero(); m];
        for i in 0..m {
            let li = &self.rows[i];
            let dot: F = li[..i].iter().zip(&z).map(|(a, b)| *a * *b).sum();
            z[i] = (rhs[i] - dot) / li[i];
        }
        for i in (0..m).rev() {
            let li = &self.rows[i];
            let bi = z[i] / li[i];
            z[i] = bi;
            axpy(&mut z[..i], -bi, &li[..i]);
        }
        z
    }
}

/// `y += a * x`
fn axpy<F: Scalar>(y: &mut [F], a: F, x: &[F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

#[derive(Debug, Default)]
struct Support {
    members: Vec<usize>,
    flags: Vec<bool>,
}

impl Support {
    fn from_beta<F: Scalar>(beta: &Array1<F>) -> Self {
        let flags: Vec<bool> = beta.iter().map(|b| *b != F::zero()).collect();
        let members = flags.iter().enumerate().filter(|(_, f)| **f).map(|(j, _)| j).collect();
        Self { members, flags }
    }

    fn insert(&mut self, j: usize) {
        if !self.flags[j] {
            self.flags[j] = true;
            self.members.push(j);
        }
    }
}

/// Fit to explicit data (expected standardized, apart from exempt columns).
pub fn lasso_fit<F: Scalar>(
    x: ArrayView2<F>,
    y: ArrayView1<F>,
    penalized: Option<&[bool]>,
    config: &LassoConfig<F>,
) -> std::result::Result<LassoFit<F>, LassoError<F>> {
    let problem = GramProblem::from_data(x, y, penalized).map_err(|e| LassoError::Invalid(e.to_string()))?;
    problem.solve(config, None)
}

/// Descending log-spaced grid from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid<F: Scalar>(lambda_max: F, n_lambdas: usize, ratio: F) -> Result<Vec<F>> {
    if n_lambdas < 2 {
        return Err(Error::InvalidArgument(format!("n_lambdas must be >= 2, got {n_lambdas}")));
    }
    if !(ratio > F::zero() && ratio < F::one()) {
        return Err(Error::InvalidArgument(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let last = F::from_usize_lossy(n_lambdas - 1);
    Ok((0..n_lambdas)
        .map(|k| {
            if k == 0 {
                lambda_max
            } else {
                lambda_max * ratio.powf(F::from_usize_lossy(k) / last)
            }
        })
        .collect())
}

pub fn lambda_path<F: Scalar>(problem: &GramProblem<F>, n_lambdas: usize, ratio: F, config: &LassoConfig<F>) -> Result<Vec<F>> {
    lambda_grid(problem.lambda_max(config), n_lambdas, ratio)
}

/// Raw (uncentered) sums over a block of rows, for several targets at once.
#[derive(Debug, Clone)]
struct Moments<F> {
    n: usize,
    sum_x: Array1<F>,
    sum_xx: Array2<F>,
    sum_y: Array1<F>,
    sum_xy: Array2<F>,
    sum_yy: Array1<F>,
}

impl<F: Scalar> Moments<F> {
    fn from_rows(x: ArrayView2<F>, y: ArrayView2<F>) -> Self {
        Self {
            n: x.nrows(),
            sum_x: x.sum_axis(Axis(0)),
            sum_xx: x.t().dot(&x),
            sum_y: y.sum_axis(Axis(0)),
            sum_xy: x.t().dot(&y),
            sum_yy: y.map(|v| *v * *v).sum_axis(Axis(0)),
        }
    }

    fn minus(&self, other: &Self) -> Self {
        Self {
            n: self.n - other.n,
            sum_x: &self.sum_x - &other.sum_x,
            sum_xx: &self.sum_xx - &other.sum_xx,
            sum_y: &self.sum_y - &other.sum_y,
            sum_xy: &self.sum_xy - &other.sum_xy,
            sum_yy: &self.sum_yy - &other.sum_yy,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            n: 0,
            sum_x: Array1::zeros(self.sum_x.len()),
            sum_xx: Array2::zeros(self.sum_xx.dim()),
            sum_y: Array1::zeros(self.sum_y.len()),
            sum_xy: Array2::zeros(self.sum_xy.dim()),
            sum_yy: Array1::zeros(self.sum_yy.len()),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.n += other.n;
        self.sum_x += &other.sum_x;
        self.sum_xx += &other.sum_xx;
        self.sum_y += &other.sum_y;
        self.sum_xy += &other.sum_xy;
        self.sum_yy += &other.sum_yy;
    }

    /// Target-independent part of [`Moments::problem`].
    fn shared(&self) -> SharedGram<F> {
        let nf = F::from_usize_lossy(self.n);
        let x_mean = &self.sum_x / nf;
        let col = x_mean.view().insert_axis(Axis(1));
        let gram = (&self.sum_xx / nf - &col.dot(&col.t())).as_standard_layout().into_owned();
        SharedGram {
            degenerate: Arc::new(degenerate_columns(&gram)),
            gram: Arc::new(gram),
            x_mean,
        }
    }

    fn problem(&self, shared: &SharedGram<F>, target: usize, penalized: &[bool]) -> GramProblem<F> {
        let nf = F::from_usize_lossy(self.n);
        let x_mean = &shared.x_mean;
        let y_mean = self.sum_y[target] / nf;
        let xty = Array1::from_iter((0..x_mean.len()).map(|j| self.sum_xy[[j, target]] / nf - x_mean[j] * y_mean));
        let yy = self.sum_yy[target] / nf - y_mean * y_mean;
        GramProblem {
            n: self.n,
            x_mean: x_mean.clone(),
            y_mean,
            gram: Arc::clone(&shared.gram),
            degenerate: Arc::clone(&shared.degenerate),
            xty,
            yy,
            penalized: penalized.to_vec(),
        }
    }
}

/// Centered Gram matrix shared by every target of one row set.
#[derive(Debug, Clone)]
struct SharedGram<F> {
    x_mean: Array1<F>,
    gram: Arc<Array2<F>>,
    degenerate: Arc<Vec<bool>>,
}

pub fn time_blocked_folds(n: usize, k_folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..k_folds).map(|f| f * n / k_folds..(f + 1) * n / k_folds).collect()
}

#[derive(Debug, Clone)]
pub struct CvResult<F> {
    /// Descending penalty grid.
    pub grid: Vec<F>,
    /// Mean over folds of the fold validation MSE, per grid point.
    pub mean_mse: Vec<F>,
    pub chosen_index: usize,
    pub chosen_lambda: F,
}

/// Time-blocked K-fold cross-validation for several targets sharing one
/// design matrix. Fold moments are computed once and reused for every
/// target and grid point.
pub struct BlockedCv<'a, F: Scalar> {
    x: Array2<F>,
    y: Array2<F>,
    penalized: &'a [bool],
    x_shift: Array1<F>,
    y_shift: Array1<F>,
    folds: Vec<std::ops::Range<usize>>,
    full: Moments<F>,
    full_gram: SharedGram<F>,
    /// Moments and Gram matrix of each training set (all rows but one fold).
    train: Vec<(Moments<F>, SharedGram<F>)>,
    patience: Option<usize>,
}

impl<'a, F: Scalar> BlockedCv<'a, F> {
    pub fn new(x: ArrayView2<'_, F>, y: ArrayView2<'_, F>, penalized: &'a [bool], k_folds: usize) -> Result<Self> {
        let (n, p) = x.dim();
        if k_folds < 2 {
            return Err(Error::InvalidArgument(format!("k_folds must be >= 2, got {k_folds}")));
        }
        if n < k_folds {
            return Err(Error::InvalidArgument(format!("{n} rows cannot form {k_folds} folds")));
        }
        if y.nrows() != n {
            return Err(Error::shape(format!("{n} target rows"), y.nrows()));
        }
        if penalized.len() != p {
            return Err(Error::shape(format!("{p} penalty flags"), penalized.len()));
        }
        // shift by full-sample means to keep the moment differences well conditioned
        let x_shift = x.mean_axis(Axis(0)).expect("n >= 2");
        let y_shift = y.mean_axis(Axis(0)).expect("n >= 2");
        let x = &x - &x_shift;
        let y = &y - &y_shift;
        let folds = time_blocked_folds(n, k_folds);
        let fold_moments: Vec<Moments<F>> = folds
            .iter()
            .map(|r| Moments::from_rows(x.slice(s![r.clone(), ..]), y.slice(s![r.clone(), ..])))
            .collect();
        let mut full = fold_moments[0].zeros_like();
        for m in &fold_moments {
            full.add_assign(m);
        }
        Ok(Self {
            x,
            y,
            penalized,
            x_shift,
            y_shift,
            folds,
            full_gram: full.shared(),
            train: fold_moments
                .iter()
                .map(|fold| {
                    let m = full.minus(fold);
                    let g = m.shared();
                    (m, g)
                })
                .collect(),
            full,
            patience: None,
        })
    }

    /// Stop walking the grid once the CV error has not improved for
    /// `patience` consecutive penalties. The reported curve is then a prefix
    /// of the grid.
    pub fn with_patience(mut self, patience: Option<usize>) -> Self {
        self.patience = patience;
        self
    }

    /// Full-sample problem in shifted coordinates (columns and targets
    /// centered on their full-sample means).
    pub fn full_problem(&self, target: usize) -> GramProblem<F> {
        self.full.problem(&self.full_gram, target, self.penalized)
    }

    /// Warm-started full-sample path over `grid`, returning the fit at its
    /// last point with the intercept mapped back to the original coordinates.
    pub fn fit_full(&self, target: usize, grid: &[F], config: &LassoConfig<F>) -> std::result::Result<LassoFit<F>, LassoError<F>> {
        let mut fit = self
            .full_problem(target)
            .fit_path(grid, config)?
            .pop()
            .ok_or_else(|| LassoError::Invalid("empty penalty grid".into()))?;
        fit.intercept = fit.intercept + self.y_shift[target] - self.x_shift.dot(&fit.coefficients);
        Ok(fit)
    }

    /// Runs CV for one target over `grid` (or a fresh `n_lambdas` / `ratio`
    /// grid from the full-sample `lambda_max`). Ties go to the larger penalty.
    pub fn run(
        &self,
        target: usize,
        grid: Option<&[F]>,
        n_lambdas: usize,
        ratio: F,
        config: &LassoConfig<F>,
    ) -> Result<CvResult<F>> {
        let grid = match grid {
            Some(g) => g.to_vec(),
            None => lambda_path(&self.full_problem(target), n_lambdas, ratio, config)?,
        };
        let k = F::from_usize_lossy(self.folds.len());
        let trains: Vec<GramProblem<F>> = self
            .train
            .iter()
            .map(|(m, g)| m.problem(g, target, self.penalized))
            .collect();
        let mut walkers: Vec<PathWalker<F>> = trains.iter().map(|t| PathWalker::new(t, config)).collect();
        let mut mean_mse = Vec::with_capacity(grid.len());
        let mut best = 0;
        for &lambda in &grid {
            let mut total = F::zero();
            for (range, walker) in self.folds.iter().zip(&mut walkers) {
                let fit = walker.fit(lambda, config).map_err(Error::from)?;
                let xv = self.x.slice(s![range.clone(), ..]);
                let yv = self.y.slice(s![range.clone(), target]);
                let sse: F = xv
                    .axis_iter(Axis(0))
                    .zip(yv.iter())
                    .map(|(row, &yi)| {
                        let e = yi - fit.predict_row(row);
                        e * e
                    })
                    .sum();
                total = total + sse / F::from_usize_lossy(range.len()) / k;
            }
            mean_mse.push(total);
            let g = mean_mse.len() - 1;
            if total < mean_mse[best] {
                best = g;
            }
            if self.patience.is_some_and(|pat| g - best >= pat) {
                break;
            }
        }
        let grid = grid[..mean_mse.len()].to_vec();
        let mut chosen_index = 0;
        for (g, &mse) in mean_mse.iter().enumerate() {
            if mse < mean_mse[chosen_index] {
                chosen_index = g;
            }
        }
        Ok(CvResult {
            chosen_lambda: grid[chosen_index],
            grid,
            mean_mse,
            chosen_index,
        })
    }
}

/// Single-target convenience wrapper around [`BlockedCv`].
pub fn cross_validate_lambda<F: Scalar>(
    x: ArrayView2<F>,
    y: ArrayView1<F>,
    penalized: Option<&[bool]>,
    grid: Option<&[F]>,
    k_folds: usize,
    n_lambdas: usize,
    ratio: F,
    config: &LassoConfig<F>,
) -> Result<CvResult<F>> {
    let all = vec![true; x.ncols()];
    let penalized = penalized.unwrap_or(&all);
    let y2 = y.insert_axis(Axis(1));
    BlockedCv::new(x, y2, penalized, k_folds)?.run(0, grid, n_lambdas, ratio, config)
}
