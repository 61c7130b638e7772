//! Likelihood-ratio testing for nested ordered logit models, backed by a
//! self-contained chi-square upper-tail probability.

use serde::Serialize;
use thiserror::Error;

use crate::ordlogit::OrderedLogitFit;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("degrees of freedom must be positive")]
    ZeroDf,
    #[error("chi-square argument is not a finite number")]
    BadArgument,
    #[error("models were fit on different sample sizes ({0} vs {1})")]
    MismatchedN(usize, usize),
    #[error("models have different outcome categories ({0} vs {1})")]
    MismatchedCategories(usize, usize),
    #[error("restricted model is not nested in the full model: {0}")]
    NotNested(String),
}

/// Result of comparing two nested model fits.
#[derive(Debug, Clone, Serialize)]
pub struct LrTestResult {
    pub lr: f64,
    pub df: u32,
    pub p_value: f64,
    /// Significance level at which the null was rejected, if it was.
    pub reject_at: Option<f64>,
    pub warning: Option<String>,
}

/// LR = -2 (ll_restricted - ll_full).
pub fn lr_statistic(ll_restricted: f64, ll_full: f64) -> f64 {
    -2.0 * (ll_restricted - ll_full)
}

/// Upper-tail probability P(chi2_df > x).
///
/// Computed through the regularized upper incomplete gamma function Q(df/2, x/2),
/// using the series expansion for small arguments and the continued fraction
/// otherwise.
pub fn chi_square_sf(x: f64, df: u32) -> Result<f64, InferenceError> {
    if df == 0 {
        return Err(InferenceError::ZeroDf);
    }
    if x.is_nan() {
        return Err(InferenceError::BadArgument);
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(regularized_gamma_q(f64::from(df) / 2.0, x / 2.0))
}

/// Standard normal upper-tail probability P(Z > z).
pub fn normal_sf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    // erfc(|z|/sqrt(2)) = Q(1/2, z^2/2)
    let half_tail = 0.5 * regularized_gamma_q(0.5, z * z / 2.0);
    if z >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

/// Compare a restricted fit against a full fit it is nested in.
pub fn lr_test(
    restricted: &OrderedLogitFit,
    full: &OrderedLogitFit,
    alpha: f64,
) -> Result<LrTestResult, InferenceError> {
    if restricted.n != full.n {
        return Err(InferenceError::MismatchedN(restricted.n, full.n));
    }
    if restricted.n_categories != full.n_categories {
        return Err(InferenceError::MismatchedCategories(
            restricted.n_categories,
            full.n_categories,
        ));
    }
    for name in &restricted.covariate_names {
        if !full.covariate_names.contains(name) {
            return Err(InferenceError::NotNested(format!(
                "covariate '{name}' of the restricted model is absent from the full model"
            )));
        }
    }
    let df = full.param_count().saturating_sub(restricted.param_count());
    if df == 0 {
        return Err(InferenceError::NotNested(
            "full model adds no parameters over the restricted model".into(),
        ));
    }
    let df = u32::try_from(df).expect("parameter-count difference fits in u32");

    let lr = lr_statistic(restricted.ll_model, full.ll_model);
    if lr < 0.0 {
        // Indicates non-convergence of one of the fits; flag instead of failing.
        return Ok(LrTestResult {
            lr,
            df,
            p_value: 1.0,
            reject_at: None,
            warning: Some(
                "negative LR statistic: fits may not be converged or models not nested".into(),
            ),
        });
    }
    let p_value = chi_square_sf(lr, df)?;
    let reject_at = (p_value < alpha).then_some(alpha);
    Ok(LrTestResult {
        lr,
        df,
        p_value,
        reject_at,
        warning: None,
    })
}

const MAX_ITER: usize = 1000;
const EPS: f64 = 1e-16;

/// Regularized upper incomplete gamma Q(a, x) = Gamma(a, x) / Gamma(a).
fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

/// Lower regularized gamma P(a, x) by its power series.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper regularized gamma Q(a, x) by the Lentz continued fraction.
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Natural log of the gamma function (Lanczos, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.999_999_999_999_809_9;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
