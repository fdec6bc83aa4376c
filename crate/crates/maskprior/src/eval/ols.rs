//! Ordinary least squares with a two-sided t-test on the slope.
//!
//! The p-value comes from the Student-t CDF, computed through the regularized
//! incomplete beta function `I_x(a, b)` (continued fraction, modified Lentz):
//! for `t` with `nu` degrees of freedom,
//! `p_two = I_{nu/(nu+t^2)}(nu/2, 1/2)`.

use crate::error::{Error, Result};

/// Result of a simple linear regression `y ~ a + b x`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation coefficient.
    pub r: f64,
    /// Two-sided p-value for the null hypothesis `slope = 0`.
    pub p_two_sided: f64,
    pub n: usize,
}

/// Fit `y = intercept + slope * x` by least squares. Requires `n >= 3`
/// (for the t-test) and non-constant `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    if x.len() != y.len() {
        return Err(Error::Eval(format!("ols: {} x values vs {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Eval(format!("ols: need at least 3 points, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::Eval("ols: x values are constant".into()));
    }
    if syy <= 0.0 {
        // Constant response: the zero slope is observed exactly, so there is
        // no evidence against it.
        return Ok(OlsFit { slope: 0.0, intercept: my, r: 0.0, p_two_sided: 1.0, n });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r = if syy <= 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() };
    let sse = (syy - slope * sxy).max(0.0);
    let df = nf - 2.0;
    let s2 = sse / df;
    let se = (s2 / sxx).sqrt();
    let p_two_sided = if se == 0.0 {
        // Perfect fit: the slope is exact.
        0.0
    } else {
        student_t_p_two_sided(slope / se, df)
    };
    Ok(OlsFit { slope, intercept, r, p_two_sided, n })
}

/// Two-sided p-value of a t statistic with `nu` degrees of freedom.
pub fn student_t_p_two_sided(t: f64, nu: f64) -> f64 {
    let x = nu / (nu + t * t);
    reg_inc_beta(nu / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Natural log of the gamma function (Lanczos approximation, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Use the continued fraction on the side where it converges fast.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz's method).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        // Even step.
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
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
    h
}
