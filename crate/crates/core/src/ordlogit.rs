//! Proportional-odds ordered logit: maximum likelihood by damped Newton
//! iteration on an unconstrained threshold reparameterization.
//!
//! The model is logit(P(Y <= j)) = theta_j - x.beta with strictly increasing
//! thresholds theta_1 < ... < theta_{K-1}. Parameter vectors throughout this
//! module are ordered thresholds first, then coefficients.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::inference::normal_sf;

#[derive(Debug, Error)]
pub enum OrdLogitError {
    #[error("need at least 2 outcome categories, got {0}")]
    TooFewCategories(usize),
    #[error("outcome category {0} has no observations; thresholds are unidentifiable")]
    EmptyCategory(usize),
    #[error("outcome value {0} outside 1..={1}")]
    BadCategory(usize, usize),
    #[error("row {0} has {1} covariates, expected {2}")]
    RaggedRow(usize, usize, usize),
    #[error("non-finite covariate value in row {0}")]
    NonFinite(usize),
    #[error("thresholds must be strictly increasing")]
    NonMonotoneThresholds,
    #[error("{n} observations cannot identify {params} parameters")]
    TooFewObservations { n: usize, params: usize },
    #[error("null log-likelihood is zero; pseudo-R2 undefined")]
    ZeroNullLikelihood,
    #[error("no data rows")]
    Empty,
}

/// Design matrix plus ordinal outcome, validated on construction.
#[derive(Debug, Clone)]
pub struct ModelData {
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    n_categories: usize,
    covariate_names: Vec<String>,
}

impl ModelData {
    pub fn new(
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        n_categories: usize,
        covariate_names: Vec<String>,
    ) -> Result<Self, OrdLogitError> {
        if x.is_empty() || y.is_empty() {
            return Err(OrdLogitError::Empty);
        }
        if n_categories < 2 {
            return Err(OrdLogitError::TooFewCategories(n_categories));
        }
        let p = covariate_names.len();
        let mut seen = vec![false; n_categories];
        for (i, (row, &yi)) in x.iter().zip(&y).enumerate() {
            if row.len() != p {
                return Err(OrdLogitError::RaggedRow(i, row.len(), p));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(OrdLogitError::NonFinite(i));
            }
            if yi < 1 || yi > n_categories {
                return Err(OrdLogitError::BadCategory(yi, n_categories));
            }
            seen[yi - 1] = true;
        }
        if let Some(j) = seen.iter().position(|s| !s) {
            return Err(OrdLogitError::EmptyCategory(j + 1));
        }
        Ok(Self {
            x,
            y,
            n_categories,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Fitted model with covariance from the inverse observed information.
#[derive(Debug, Clone, Serialize)]
pub struct OrderedLogitFit {
    pub covariate_names: Vec<String>,
    pub n: usize,
    pub n_categories: usize,
    /// Thresholds theta_1..theta_{K-1}, strictly increasing.
    pub theta: Vec<f64>,
    /// One coefficient per covariate.
    pub beta: Vec<f64>,
    pub ll_model: f64,
    pub ll_null: f64,
    /// Covariance over [theta, beta].
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Standard errors that came out of a rank-deficient information matrix.
    pub unreliable_se: Vec<bool>,
    /// Quasi-separation flags (|estimate| > 10 with se/|estimate| > 5).
    pub separation: Vec<bool>,
    pub warnings: Vec<String>,
}

impl OrderedLogitFit {
    /// Estimated parameter count p + (K - 1), the k of the information criteria.
    pub fn param_count(&self) -> usize {
        self.beta.len() + self.theta.len()
    }

    pub fn pseudo_r2(&self) -> f64 {
        pseudo_r2(self.ll_null, self.ll_model).unwrap_or(f64::NAN)
    }

    pub fn information_criteria(&self) -> (f64, f64) {
        information_criteria(self.param_count(), self.n, self.ll_model)
    }

    /// Estimates in report order: one (name, index-into-se) per coefficient,
    /// then thresholds.
    pub fn estimate(&self, param: usize) -> f64 {
        if param < self.theta.len() {
            self.theta[param]
        } else {
            self.beta[param - self.theta.len()]
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// sigmoid(b) - sigmoid(a) for a <= b, avoiding cancellation in the tails.
fn sigmoid_diff(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 1.0;
    }
    if a == f64::NEG_INFINITY {
        return sigmoid(b);
    }
    if b == f64::INFINITY {
        return sigmoid(-a);
    }
    if a >= 0.0 {
        sigmoid(-a) - sigmoid(-b)
    } else {
        sigmoid(b) - sigmoid(a)
    }
}

/// Per-category probabilities P(Y = 1..K) for one covariate row.
pub fn cumulative_probs(
    theta: &[f64],
    beta: &[f64],
    x_row: &[f64],
) -> Result<Vec<f64>, OrdLogitError> {
    if theta.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OrdLogitError::NonMonotoneThresholds);
    }
    let eta: f64 = beta.iter().zip(x_row).map(|(b, x)| b * x).sum();
    let k = theta.len() + 1;
    let mut probs = Vec::with_capacity(k);
    for j in 0..k {
        let lo = if j == 0 {
            f64::NEG_INFINITY
        } else {
            theta[j - 1] - eta
        };
        let hi = if j == k - 1 {
            f64::INFINITY
        } else {
            theta[j] - eta
        };
        probs.push(sigmoid_diff(lo, hi));
    }
    Ok(probs)
}

/// Negative log-likelihood; +infinity when any observed category has zero
/// probability so the optimizer backtracks instead of failing.
pub fn neg_log_likelihood(theta: &[f64], beta: &[f64], data: &ModelData) -> f64 {
    let mut nll = 0.0;
    for (row, &yi) in data.x.iter().zip(&data.y) {
        let eta: f64 = beta.iter().zip(row).map(|(b, x)| b * x).sum();
        let p = category_prob(theta, eta, yi, data.n_categories);
        if p <= 0.0 {
            return f64::INFINITY;
        }
        nll -= p.ln();
    }
    nll
}

fn category_prob(theta: &[f64], eta: f64, y: usize, k: usize) -> f64 {
    let lo = if y == 1 {
        f64::NEG_INFINITY
    } else {
        theta[y - 2] - eta
    };
    let hi = if y == k {
        f64::INFINITY
    } else {
        theta[y - 1] - eta
    };
    sigmoid_diff(lo, hi)
}

/// Analytic gradient of the negative log-likelihood over [theta, beta].
pub fn gradient(theta: &[f64], beta: &[f64], data: &ModelData) -> Vec<f64> {
    let (_, g, _) = nll_grad_hess(theta, beta, data, false);
    g.data.into()
}

/// Value, gradient, and (optionally) Hessian of the NLL in natural parameters.
fn nll_grad_hess(
    theta: &[f64],
    beta: &[f64],
    data: &ModelData,
    want_hess: bool,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let k1 = theta.len();
    let p = beta.len();
    let m = k1 + p;
    let mut nll = 0.0;
    let mut grad = DVector::zeros(m);
    let mut hess = DMatrix::zeros(if want_hess { m } else { 0 }, if want_hess { m } else { 0 });

    // Scratch for the per-observation active parameters: at most two
    // thresholds plus every coefficient.
    let mut idx: Vec<usize> = Vec::with_capacity(p + 2);
    let mut da: Vec<f64> = Vec::with_capacity(p + 2);
    let mut db: Vec<f64> = Vec::with_capacity(p + 2);

    for (row, &yi) in data.x.iter().zip(&data.y) {
        let eta: f64 = beta.iter().zip(row).map(|(b, x)| b * x).sum();
        let k = data.n_categories;
        let (lo, f_lo) = if yi == 1 {
            (f64::NEG_INFINITY, 0.0)
        } else {
            let t = theta[yi - 2] - eta;
            let s = sigmoid(t);
            (t, s * (1.0 - s))
        };
        let (hi, f_hi) = if yi == k {
            (f64::INFINITY, 0.0)
        } else {
            let t = theta[yi - 1] - eta;
            let s = sigmoid(t);
            (t, s * (1.0 - s))
        };
        let prob = sigmoid_diff(lo, hi);
        if prob <= 0.0 {
            return (f64::INFINITY, grad, hess);
        }
        nll -= prob.ln();

        // d(eta-offset)/d(param) for the lower and upper cut of this category.
        idx.clear();
        da.clear();
        db.clear();
        if yi > 1 {
            idx.push(yi - 2);
            da.push(1.0);
            db.push(0.0);
        }
        if yi < k {
            idx.push(yi - 1);
            da.push(0.0);
            db.push(1.0);
        }
        for (r, &xv) in row.iter().enumerate() {
            idx.push(k1 + r);
            da.push(-xv);
            db.push(-xv);
        }

        // f'(t) = f(t) (1 - 2 sigmoid(t))
        let fp_lo = if yi == 1 {
            0.0
        } else {
            f_lo * (1.0 - 2.0 * sigmoid(lo))
        };
        let fp_hi = if yi == k {
            0.0
        } else {
            f_hi * (1.0 - 2.0 * sigmoid(hi))
        };

        for u in 0..idx.len() {
            let dp_u = f_hi * db[u] - f_lo * da[u];
            grad[idx[u]] -= dp_u / prob;
            if want_hess {
                for v in u..idx.len() {
                    let dp_v = f_hi * db[v] - f_lo * da[v];
                    let d2p = fp_hi * db[u] * db[v] - fp_lo * da[u] * da[v];
                    let h = -d2p / prob + dp_u * dp_v / (prob * prob);
                    hess[(idx[u], idx[v])] += h;
                    if idx[u] != idx[v] {
                        hess[(idx[v], idx[u])] += h;
                    }
                }
            }
        }
    }
    (nll, grad, hess)
}

/// McFadden pseudo-R^2: 1 - ll_model / ll_null.
pub fn pseudo_r2(ll_null: f64, ll_model: f64) -> Result<f64, OrdLogitError> {
    if ll_null == 0.0 {
        return Err(OrdLogitError::ZeroNullLikelihood);
    }
    Ok(1.0 - ll_model / ll_null)
}

/// (AIC, BIC) = (2k - 2 ll, k ln n - 2 ll).
pub fn information_criteria(k: usize, n: usize, ll: f64) -> (f64, f64) {
    let k = k as f64;
    let aic = 2.0 * k - 2.0 * ll;
    let bic = k * (n as f64).ln() - 2.0 * ll;
    (aic, bic)
}

/// Two-sided Wald p-values over [theta, beta] of a fit.
pub fn wald_p_values(fit: &OrderedLogitFit) -> Vec<f64> {
    fit.z.iter().map(|&z| wald_p(z)).collect()
}

fn wald_p(z: f64) -> f64 {
    if z.is_finite() {
        2.0 * normal_sf(z.abs())
    } else {
        f64::NAN
    }
}

/// Thresholds-only maximum likelihood: logits of the empirical cumulative
/// proportions.
fn null_thresholds(data: &ModelData) -> Vec<f64> {
    let n = data.n() as f64;
    let mut counts = vec![0usize; data.n_categories];
    for &yi in &data.y {
        counts[yi - 1] += 1;
    }
    let mut cum = 0usize;
    let mut theta = Vec::with_capacity(data.n_categories - 1);
    for &c in counts.iter().take(data.n_categories - 1) {
        cum += c;
        let prop = cum as f64 / n;
        theta.push((prop / (1.0 - prop)).ln());
    }
    theta
}

fn theta_to_psi(theta: &[f64]) -> Vec<f64> {
    let mut psi = Vec::with_capacity(theta.len());
    psi.push(theta[0]);
    for w in theta.windows(2) {
        psi.push((w[1] - w[0]).ln());
    }
    psi
}

fn psi_to_theta(psi: &[f64], k1: usize) -> Vec<f64> {
    let mut theta = Vec::with_capacity(k1);
    let mut t = psi[0];
    theta.push(t);
    for &d in psi.iter().take(k1).skip(1) {
        t += d.exp();
        theta.push(t);
    }
    theta
}

/// Jacobian d(natural)/d(psi); unit block for coefficients.
fn reparam_jacobian(psi: &[f64], k1: usize, p: usize) -> DMatrix<f64> {
    let m = k1 + p;
    let mut j = DMatrix::zeros(m, m);
    for row in 0..k1 {
        j[(row, 0)] = 1.0;
        for col in 1..=row {
            j[(row, col)] = psi[col].exp();
        }
    }
    for r in 0..p {
        j[(k1 + r, k1 + r)] = 1.0;
    }
    j
}

fn solve_damped(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let m = h.nrows();
    let max_diag = (0..m).map(|i| h[(i, i)].abs()).fold(1.0_f64, f64::max);
    let mut tau = 0.0;
    loop {
        let mut hd = h.clone();
        if tau > 0.0 {
            for i in 0..m {
                hd[(i, i)] += tau;
            }
        }
        if let Some(chol) = hd.cholesky() {
            return chol.solve(&g.scale(-1.0));
        }
        tau = if tau == 0.0 {
            1e-8 * max_diag
        } else {
            tau * 10.0
        };
        if tau > 1e8 * max_diag {
            // Information hopelessly ill-conditioned; fall back to a scaled
            // gradient step.
            return g.scale(-1.0 / max_diag);
        }
    }
}

/// Inverse of a symmetric matrix; falls back to an eigenvalue pseudo-inverse
/// when it is not positive definite. Returns (inverse, per-index dropped flag).
fn invert_information(h: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let m = h.nrows();
    if let Some(chol) = h.clone().cholesky() {
        return (chol.inverse(), vec![false; m]);
    }
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    let max_ev = eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let cut = max_ev * 1e-12;
    let mut inv = DMatrix::zeros(m, m);
    let mut dropped_mass = vec![0.0_f64; m];
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        if ev > cut {
            inv += DMatrix::from_fn(m, m, |i, j| v[i] * v[j] / ev);
        } else {
            for i in 0..m {
                dropped_mass[i] += v[i] * v[i];
            }
        }
    }
    let dropped = dropped_mass.iter().map(|&w| w > 1e-6).collect();
    (inv, dropped)
}

/// Maximum-likelihood fit with the thresholds-only model as the null.
pub fn fit(data: &ModelData, config: &FitConfig) -> Result<OrderedLogitFit, OrdLogitError> {
    let k = data.n_categories;
    let k1 = k - 1;
    let p = data.n_covariates();
    let m = k1 + p;
    if data.n() <= m {
        return Err(OrdLogitError::TooFewObservations {
            n: data.n(),
            params: m,
        });
    }

    let theta0 = null_thresholds(data);
    let ll_null = -neg_log_likelihood(&theta0, &vec![0.0; p], data);

    let mut psi: Vec<f64> = theta_to_psi(&theta0);
    psi.extend(std::iter::repeat_n(0.0, p));

    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut theta = theta0.clone();
    let mut beta = vec![0.0; p];
    let (mut nll, mut g_nat, _) = nll_grad_hess(&theta, &beta, data, false);

    for iter in 1..=config.max_iter {
        iterations = iter;
        if g_nat.amax() <= config.tol {
            converged = true;
            break;
        }
        let (_, _, h_nat) = nll_grad_hess(&theta, &beta, data, true);

        // Pull the step back through the reparameterization so every iterate
        // keeps monotone thresholds.
        let j = reparam_jacobian(&psi, k1, p);
        let g_psi = j.transpose() * &g_nat;
        let mut h_psi = j.transpose() * &h_nat * &j;
        for i in 1..k1 {
            let curv: f64 = (i..k1).map(|r| g_nat[r]).sum::<f64>() * psi[i].exp();
            h_psi[(i, i)] += curv;
        }

        let step = solve_damped(&h_psi, &g_psi);
        let mut scale = 1.0;
        let mut accepted = false;
        // Near the optimum the objective decrease drops below f64 resolution;
        // a step still counts when it shrinks the gradient within that noise.
        let noise = 1e-10 * nll.abs().max(1.0);
        for _ in 0..60 {
            let cand: Vec<f64> = psi
                .iter()
                .zip(step.iter())
                .map(|(v, s)| v + scale * s)
                .collect();
            let cand_theta = psi_to_theta(&cand, k1);
            let cand_beta = cand[k1..].to_vec();
            let (cand_nll, cand_g, _) = nll_grad_hess(&cand_theta, &cand_beta, data, false);
            let improves =
                cand_nll < nll || (cand_nll <= nll + noise && cand_g.amax() < g_nat.amax());
            if cand_nll.is_finite() && improves {
                psi = cand;
                theta = cand_theta;
                beta = cand_beta;
                nll = cand_nll;
                g_nat = cand_g;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            if g_nat.amax() <= config.tol {
                converged = true;
            } else {
                warnings.push("line search stalled before meeting tolerance".into());
            }
            break;
        }
    }
    if !converged && g_nat.amax() <= config.tol {
        converged = true;
    }
    if !converged {
        warnings.push(format!(
            "did not converge in {iterations} iterations (max |gradient| = {:.3e})",
            g_nat.amax()
        ));
    }

    let ll_model = -nll;
    if ll_model < ll_null - 1e-6 {
        warnings.push("model log-likelihood below null; fit is not trustworthy".into());
    }

    let (_, _, h_nat) = nll_grad_hess(&theta, &beta, data, true);
    let (cov_m, dropped) = invert_information(&h_nat);
    if dropped.iter().any(|&d| d) {
        warnings.push("information matrix is singular; some standard errors are unreliable".into());
    }

    let mut se = Vec::with_capacity(m);
    let mut unreliable_se = Vec::with_capacity(m);
    for i in 0..m {
        let v = cov_m[(i, i)];
        if dropped[i] || v <= 0.0 || !v.is_finite() {
            se.push(f64::NAN);
            unreliable_se.push(true);
        } else {
            se.push(v.sqrt());
            unreliable_se.push(false);
        }
    }
    let estimates: Vec<f64> = theta.iter().chain(beta.iter()).copied().collect();
    let z: Vec<f64> = estimates
        .iter()
        .zip(&se)
        .map(|(&e, &s)| if s > 0.0 { e / s } else { f64::NAN })
        .collect();
    let p_values: Vec<f64> = z.iter().map(|&zi| wald_p(zi)).collect();
    let separation: Vec<bool> = estimates
        .iter()
        .zip(&se)
        .map(|(&e, &s)| e.abs() > 10.0 && s.is_finite() && s / e.abs() > 5.0)
        .collect();
    if separation.iter().any(|&s| s) {
        warnings.push(
            "possible quasi-separation: a coefficient diverged with an inflated standard error"
                .into(),
        );
    }

    let cov: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| cov_m[(i, j)]).collect())
        .collect();

    Ok(OrderedLogitFit {
        covariate_names: data.covariate_names.clone(),
        n: data.n(),
        n_categories: k,
        theta,
        beta,
        ll_model,
        ll_null,
        cov,
        se,
        z,
        p_values,
        converged,
        iterations,
        unreliable_se,
        separation,
        warnings,
    })
}
