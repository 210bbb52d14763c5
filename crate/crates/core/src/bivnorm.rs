//! Standard bivariate normal distribution.
//!
//! The CDF uses the one-dimensional integral representation
//!
//! ```text
//! Phi2(a, b; rho) = Phi(a) Phi(b)
//!   + 1/(2 pi) * Int_0^{asin(rho)} exp(-(a^2 + b^2 - 2 a b sin t) / (2 cos^2 t)) dt
//! ```
//!
//! whose integrand is smooth on the whole range (the sin substitution removes
//! the endpoint singularity of the raw correlation integral), so a fixed
//! Gauss-Legendre rule is accurate to near machine precision for |rho| < 1.

use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

const GL_POINTS: usize = 32;

fn std_normal() -> &'static Normal {
    static NORMAL: OnceLock<Normal> = OnceLock::new();
    NORMAL.get_or_init(|| Normal::new(0.0, 1.0).expect("valid standard normal"))
}

/// Univariate standard normal CDF.
pub fn phi(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Univariate standard normal quantile.
pub fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Gauss-Legendre nodes and weights on [-1, 1], computed once by Newton
/// iteration on the Legendre polynomial.
fn gauss_legendre() -> &'static ([f64; GL_POINTS], [f64; GL_POINTS]) {
    static RULE: OnceLock<([f64; GL_POINTS], [f64; GL_POINTS])> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = [0.0; GL_POINTS];
        let mut weights = [0.0; GL_POINTS];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
                let mut p0 = 1.0;
                let mut p1 = x;
                for k in 2..=n {
                    let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = pk;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = pk;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    })
}

/// P(Z1 <= a, Z2 <= b) for standard normals with correlation `rho`.
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&rho), "correlation out of range");
    if rho == 0.0 {
        return phi(a) * phi(b);
    }
    if rho == 1.0 {
        return phi(a.min(b));
    }
    if rho == -1.0 {
        return (phi(a) + phi(b) - 1.0).max(0.0);
    }
    let alpha = rho.asin();
    let (nodes, weights) = gauss_legendre();
    let half = 0.5 * alpha;
    let mut integral = 0.0;
    for i in 0..GL_POINTS {
        let theta = half * (nodes[i] + 1.0);
        let s = theta.sin();
        let c2 = theta.cos().powi(2);
        integral += weights[i] * (-(a * a + b * b - 2.0 * a * b * s) / (2.0 * c2)).exp();
    }
    integral *= half / (2.0 * std::f64::consts::PI);
    (phi(a) * phi(b) + integral).clamp(0.0, 1.0)
}

/// Density of the standard bivariate normal at (a, b) with correlation `rho`;
/// also the derivative of [`bvn_cdf`] with respect to `rho`.
pub fn bvn_pdf(a: f64, b: f64, rho: f64) -> f64 {
    let om = 1.0 - rho * rho;
    (-(a * a - 2.0 * rho * a * b + b * b) / (2.0 * om)).exp()
        / (2.0 * std::f64::consts::PI * om.sqrt())
}
