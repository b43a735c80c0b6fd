//! Sign-constrained ridge regression.
//!
//! Minimizes `‖y − Xβ‖² + λ‖β‖²` over z-scored columns and labels, subject to
//! a per-column sign constraint. The problem is reduced to non-negative least
//! squares: non-positive columns are negated, free columns are split into a
//! `(x, −x)` pair, and the ridge term becomes `√λ·I` rows with zero targets.
//! The reduced problem is solved with a Lawson–Hanson active-set iteration.
//!
//! [`brute_force_fit`] enumerates supports exhaustively and is kept as the
//! reference for tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorizer::Category;
use crate::data::{DataError, Standardizer};

/// Stopping tolerance on the negative-gradient entries of the reduced problem.
pub const GRADIENT_TOL: f64 = 1e-10;
pub const BRUTE_FORCE_MAX_COLUMNS: usize = 12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("design and labels must be finite")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lambda must be finite and >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("active-set iteration cap {iterations} reached; residual gradient norm {gradient_norm:e}")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("brute force supports at most {BRUTE_FORCE_MAX_COLUMNS} columns, got {0}")]
    TooManyColumns(usize),
    #[error("expected {expected} columns, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("no feasible support found")]
    NoFeasibleSupport,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConstraint {
    NonNegative,
    NonPositive,
    Free,
}

impl SignConstraint {
    /// Positive → non-negative, negative → non-positive, mixed → free.
    /// Irrelevant modules never reach the design matrix.
    pub fn from_category(c: Category) -> Option<Self> {
        match c {
            Category::Positive => Some(SignConstraint::NonNegative),
            Category::Negative => Some(SignConstraint::NonPositive),
            Category::Mixed => Some(SignConstraint::Free),
            Category::Irrelevant => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            SignConstraint::NonNegative => SignConstraint::NonPositive,
            SignConstraint::NonPositive => SignConstraint::NonNegative,
            SignConstraint::Free => SignConstraint::Free,
        }
    }

    pub fn admits(self, beta: f64) -> bool {
        match self {
            SignConstraint::NonNegative => beta >= 0.0,
            SignConstraint::NonPositive => beta <= 0.0,
            SignConstraint::Free => true,
        }
    }
}

/// Solution of the standardized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedFit {
    /// Weights on z-scored columns, predicting the z-scored label.
    pub weights: Vec<f64>,
    /// Weights in raw column and label units.
    pub raw_weights: Vec<f64>,
    /// Intercept in label units.
    pub bias: f64,
    pub constraints: Vec<SignConstraint>,
    pub lambda: f64,
    pub standardizer: Standardizer,
    /// Objective at the solution, in standardized units.
    pub objective: f64,
    pub iterations: usize,
}

pub fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let r = y - x * beta;
    r.norm_squared() + lambda * beta.norm_squared()
}

/// Largest KKT violation of `beta` for the standardized problem.
///
/// Uses the gradient `g = 2(Xᵀ(Xβ − y) + λβ)`. Free or strictly interior
/// weights need `g = 0`; a non-negative weight at zero needs `g ≥ 0`, a
/// non-positive one `g ≤ 0`. Sign violations count as infinite.
pub fn kkt_violation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    constraints: &[SignConstraint],
    lambda: f64,
) -> f64 {
    let g = (x.transpose() * (x * beta - y) + beta * lambda) * 2.0;
    let mut worst = 0.0f64;
    for (j, &c) in constraints.iter().enumerate() {
        let (b, gj) = (beta[j], g[j]);
        if !c.admits(b) {
            return f64::INFINITY;
        }
        let v = match c {
            SignConstraint::NonNegative if b == 0.0 => (-gj).max(0.0),
            SignConstraint::NonPositive if b == 0.0 => gj.max(0.0),
            _ => gj.abs(),
        };
        worst = worst.max(v);
    }
    worst
}

fn check_inputs(
    design: &DMatrix<f64>,
    y: &[f64],
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<(), SolverError> {
    if design.nrows() != y.len() {
        return Err(SolverError::Shape(format!(
            "{} design rows vs {} labels",
            design.nrows(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(SolverError::Shape("no rows".into()));
    }
    if design.ncols() != constraints.len() {
        return Err(SolverError::ColumnMismatch {
            expected: constraints.len(),
            got: design.ncols(),
        });
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SolverError::InvalidLambda(lambda));
    }
    if design.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    Ok(())
}

/// Least squares restricted to the columns flagged in `active`; the returned
/// vector has zeros elsewhere.
fn restricted_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..a.ncols()).filter(|&j| active[j]).collect();
    let mut out = DVector::zeros(a.ncols());
    if idx.is_empty() {
        return out;
    }
    let sub = a.select_columns(idx.iter());
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    let z = svd.solve(b, eps).expect("u and v were computed");
    for (k, &j) in idx.iter().enumerate() {
        out[j] = z[k];
    }
    out
}

/// Lawson–Hanson active-set NNLS: `min ‖Ax − b‖ s.t. x ≥ 0`.
pub fn nnls(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, usize), SolverError> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut blocked = vec![false; n];
    let mut w = a.transpose() * b;
    let mut iterations = 0;

    loop {
        let entering = (0..n)
            .filter(|&j| !passive[j] && !blocked[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(j) = entering else { break };
        if iterations >= max_iter {
            let gradient_norm = (0..n)
                .filter(|&k| !passive[k])
                .map(|k| w[k].max(0.0))
                .fold(0.0, f64::max);
            return Err(SolverError::NotConverged {
                iterations,
                gradient_norm,
            });
        }
        iterations += 1;
        passive[j] = true;
        let mut s = restricted_lstsq(a, b, &passive);

        let mut inner = 0;
        while (0..n).any(|k| passive[k] && s[k] <= 0.0) {
            inner += 1;
            if inner > 3 * n + 3 {
                break;
            }
            let (mut alpha, mut hit) = (f64::INFINITY, None);
            for k in 0..n {
                if passive[k] && s[k] <= 0.0 {
                    let step = x[k] / (x[k] - s[k]);
                    if step < alpha {
                        alpha = step;
                        hit = Some(k);
                    }
                }
            }
            let alpha = if alpha.is_finite() { alpha.clamp(0.0, 1.0) } else { 0.0 };
            x += (&s - &x) * alpha;
            if let Some(k) = hit {
                x[k] = 0.0;
            }
            let scale = 1.0 + x.amax();
            for k in 0..n {
                if passive[k] && x[k] <= 1e-15 * scale {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            s = restricted_lstsq(a, b, &passive);
        }

        if passive[j] {
            blocked.iter_mut().for_each(|f| *f = false);
        } else {
            // Entering column was rejected at once; skip it until the
            // passive set changes.
            blocked[j] = true;
        }
        for k in 0..n {
            x[k] = if passive[k] { s[k].max(0.0) } else { 0.0 };
        }
        w = a.transpose() * (b - a * &x);
    }
    Ok((x, iterations))
}

/// Solves the already-standardized problem.
pub fn solve_standardized(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<Solution, SolverError> {
    let (m, p) = x.shape();
    if constraints.len() != p {
        return Err(SolverError::ColumnMismatch {
            expected: constraints.len(),
            got: p,
        });
    }
    // Reduced column layout: (source column, sign).
    let mut layout: Vec<(usize, f64)> = Vec::with_capacity(2 * p);
    for (j, c) in constraints.iter().enumerate() {
        match c {
            SignConstraint::NonNegative => layout.push((j, 1.0)),
            SignConstraint::NonPositive => layout.push((j, -1.0)),
            SignConstraint::Free => {
                layout.push((j, 1.0));
                layout.push((j, -1.0));
            }
        }
    }
    let q = layout.len();
    let ridge = lambda > 0.0;
    let rows = if ridge { m + q } else { m };
    let mut a = DMatrix::zeros(rows, q);
    for (k, &(j, sign)) in layout.iter().enumerate() {
        for i in 0..m {
            a[(i, k)] = sign * x[(i, j)];
        }
        if ridge {
            a[(m + k, k)] = lambda.sqrt();
        }
    }
    let mut b = DVector::zeros(rows);
    b.rows_mut(0, m).copy_from(y);

    let (z, iterations) = nnls(&a, &b, GRADIENT_TOL, 10 * q.max(1))?;

    let mut beta = DVector::<f64>::zeros(p);
    for (k, &(j, sign)) in layout.iter().enumerate() {
        beta[j] += sign * z[k];
    }
    for (j, c) in constraints.iter().enumerate() {
        beta[j] = match c {
            SignConstraint::NonNegative => beta[j].max(0.0),
            SignConstraint::NonPositive => beta[j].min(0.0),
            SignConstraint::Free => beta[j],
        };
        if beta[j] == 0.0 {
            beta[j] = 0.0; // normalize -0.0
        }
    }
    let objective = objective(x, y, &beta, lambda);
    Ok(Solution {
        beta,
        objective,
        iterations,
    })
}

/// Exhaustive reference solver for the standardized problem.
///
/// Some optimum always has a linearly independent support on which it is the
/// unconstrained ridge solution, so enumerating every column subset, solving
/// there, and keeping the best sign-feasible candidate is exact.
pub fn brute_force_standardized(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<Solution, SolverError> {
    let p = x.ncols();
    if p > BRUTE_FORCE_MAX_COLUMNS {
        return Err(SolverError::TooManyColumns(p));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << p) {
        let idx: Vec<usize> = (0..p).filter(|&j| mask & (1 << j) != 0).collect();
        let mut beta = DVector::zeros(p);
        if !idx.is_empty() {
            let sub = x.select_columns(idx.iter());
            let gram = sub.transpose() * &sub + DMatrix::identity(idx.len(), idx.len()) * lambda;
            let rhs = sub.transpose() * y;
            let svd = gram.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if smax == 0.0 || smin <= smax * 1e-12 {
                continue;
            }
            let z = svd.solve(&rhs, 0.0).expect("u and v were computed");
            for (k, &j) in idx.iter().enumerate() {
                beta[j] = z[k];
            }
        }
        if !constraints.iter().enumerate().all(|(j, c)| c.admits(beta[j])) {
            continue;
        }
        let obj = objective(x, y, &beta, lambda);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, beta));
        }
    }
    let (objective, beta) = best.ok_or(SolverError::NoFeasibleSupport)?;
    Ok(Solution {
        beta,
        objective,
        iterations: 1 << p,
    })
}

struct Prepared {
    standardizer: Standardizer,
    xs: DMatrix<f64>,
    ys: DVector<f64>,
}

fn prepare(
    design: &DMatrix<f64>,
    y: &[f64],
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<Prepared, SolverError> {
    check_inputs(design, y, constraints, lambda)?;
    let standardizer = Standardizer::fit(design, Some(y))?;
    let xs = standardizer.transform(design);
    let ys = DVector::from_vec(standardizer.transform_labels(y));
    Ok(Prepared { standardizer, xs, ys })
}

fn finish(p: Prepared, sol: Solution, constraints: &[SignConstraint], lambda: f64) -> ConstrainedFit {
    let st = p.standardizer;
    let weights: Vec<f64> = sol.beta.iter().copied().collect();
    let raw_weights: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(j, b)| b * st.label_scale / st.feature_scale[j])
        .collect();
    let bias = st.label_mean
        - raw_weights
            .iter()
            .zip(&st.feature_mean)
            .map(|(w, m)| w * m)
            .sum::<f64>();
    ConstrainedFit {
        weights,
        raw_weights,
        bias,
        constraints: constraints.to_vec(),
        lambda,
        standardizer: st,
        objective: sol.objective,
        iterations: sol.iterations,
    }
}

/// Fits the sign-constrained ridge model. Columns and labels are z-scored on
/// the given rows; the intercept comes from centering and is not penalized.
pub fn fit(
    design: &DMatrix<f64>,
    y: &[f64],
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<ConstrainedFit, SolverError> {
    let p = prepare(design, y, constraints, lambda)?;
    let sol = solve_standardized(&p.xs, &p.ys, constraints, lambda)?;
    Ok(finish(p, sol, constraints, lambda))
}

/// Same contract as [`fit`], solved by exhaustive enumeration (≤ 12 columns).
pub fn brute_force_fit(
    design: &DMatrix<f64>,
    y: &[f64],
    constraints: &[SignConstraint],
    lambda: f64,
) -> Result<ConstrainedFit, SolverError> {
    if design.ncols() > BRUTE_FORCE_MAX_COLUMNS {
        return Err(SolverError::TooManyColumns(design.ncols()));
    }
    let p = prepare(design, y, constraints, lambda)?;
    let sol = brute_force_standardized(&p.xs, &p.ys, constraints, lambda)?;
    Ok(finish(p, sol, constraints, lambda))
}

impl ConstrainedFit {
    pub fn n_columns(&self) -> usize {
        self.weights.len()
    }

    /// Standardizes rows with the fit's snapshot, applies the weights and
    /// maps the result back to label units.
    pub fn predict(&self, design: &DMatrix<f64>) -> Result<Vec<f64>, SolverError> {
        if design.ncols() != self.n_columns() {
            return Err(SolverError::ColumnMismatch {
                expected: self.n_columns(),
                got: design.ncols(),
            });
        }
        let z = self.standardizer.transform(design);
        let beta = DVector::from_column_slice(&self.weights);
        let yz = z * beta;
        Ok(self.standardizer.inverse_labels(yz.as_slice()))
    }

    pub fn to_record(&self, names: &[String], categories: &[Category]) -> FitRecord {
        FitRecord {
            weights: self
                .weights
                .iter()
                .enumerate()
                .map(|(j, &beta)| WeightRecord {
                    name: names.get(j).cloned().unwrap_or_else(|| format!("col{j}")),
                    beta,
                    raw_beta: self.raw_weights[j],
                    constraint: self.constraints[j],
                    category: categories.get(j).copied(),
                })
                .collect(),
            bias: self.bias,
            lambda: self.lambda,
            standardizer: self.standardizer.clone(),
            objective: self.objective,
        }
    }
}

pub fn predict(fit: &ConstrainedFit, design: &DMatrix<f64>) -> Result<Vec<f64>, SolverError> {
    fit.predict(design)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub name: String,
    pub beta: f64,
    pub raw_beta: f64,
    pub constraint: SignConstraint,
    pub category: Option<Category>,
}

/// On-disk form of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub weights: Vec<WeightRecord>,
    pub bias: f64,
    pub lambda: f64,
    pub standardizer: Standardizer,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub weight: f64,
    pub category: Option<Category>,
}

/// Largest standardized weights by magnitude, ties broken by name.
pub fn weights_report(
    fit: &ConstrainedFit,
    names: &[String],
    categories: &[Category],
    top_n: usize,
) -> Vec<WeightEntry> {
    let mut entries: Vec<WeightEntry> = fit
        .weights
        .iter()
        .enumerate()
        .map(|(j, &w)| WeightEntry {
            name: names.get(j).cloned().unwrap_or_else(|| format!("col{j}")),
            weight: w,
            category: categories.get(j).copied(),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then_with(|| a.name.cmp(&b.name))
    });
    entries.truncate(top_n.max(1));
    entries
}

/// Plain-text bar listing in the style of a top-weights chart.
pub fn render_weights_report(entries: &[WeightEntry]) -> String {
    let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
    let max = entries.iter().map(|e| e.weight.abs()).fold(0.0, f64::max);
    let mut out = format!("{:<width$}  {:>10}  {:<10}  bar\n", "name", "weight", "category");
    for e in entries {
        let len = if max > 0.0 {
            (e.weight.abs() / max * 30.0).round() as usize
        } else {
            0
        };
        let ch = match e.category {
            Some(Category::Positive) => '+',
            Some(Category::Negative) => '-',
            _ => '~',
        };
        let cat = e.category.map(|c| c.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{:<width$}  {:>10.4}  {:<10}  {}\n",
            e.name,
            e.weight,
            cat,
            ch.to_string().repeat(len)
        ));
    }
    out
}
