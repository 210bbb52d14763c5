//! Dropout hazard model and inverse-probability observation weights.
//!
//! The hazard of remaining under observation at occasion j (given observation
//! at j-1) is logistic in a vector of hazard covariates. The fit maximizes the
//! partial likelihood over at-risk transitions by Newton-Raphson on the score
//!
//! ```text
//! S(theta) = sum_i sum_{j=2..T} R_{i,j-1} { R_ij - lambda_ij(theta) } H_ij
//! ```
//!
//! Cumulative products of the fitted hazards give the observation
//! probabilities omega, and the weights used downstream are R_ij / omega_ij.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use thiserror::Error;

use crate::data::LongitudinalDataset;
use crate::linalg;

/// Score-norm tolerance (on the 1/n-averaged score) for the hazard fit.
const SCORE_TOL: f64 = 1e-12;
const MAX_ITER: usize = 50;
/// Coefficient norm beyond which a non-vanishing score means separation.
const SEPARATION_NORM: f64 = 30.0;
/// Floor applied to omega in divisions, guarding against extreme weights.
const OMEGA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DropoutError {
    #[error("hazard design shape {got:?} does not match dataset ({expected:?})")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize, usize),
    },
    #[error("no at-risk transitions to fit (need T >= 2 and observed baselines)")]
    NoTransitions,
    #[error("complete separation: hazard coefficients diverge (all at-risk transitions observed, or a covariate perfectly predicts dropout)")]
    Separation,
    #[error("singular information matrix in hazard fit (collinear hazard covariates?)")]
    SingularInformation,
    #[error("hazard fit did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("hazard probability outside (0, 1] at an at-risk cell")]
    InvalidHazard,
}

/// How to assemble the hazard design: an intercept, `y_lags` lagged outcomes
/// (zero-substituted where the lag is unobserved or out of range), then the
/// dataset's extra dropout covariates unless `include_extra` is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HazardSpec {
    pub y_lags: usize,
    pub include_extra: bool,
}

impl Default for HazardSpec {
    fn default() -> Self {
        Self {
            y_lags: 1,
            include_extra: true,
        }
    }
}

/// Builds per-(subject, occasion) hazard covariate vectors. Lagged outcomes
/// beyond the observed history are substituted by zero; such rows only matter
/// when at risk, and at-risk rows always have the lag-1 outcome observed.
pub fn hazard_design(ds: &LongitudinalDataset, spec: &HazardSpec) -> Array3<f64> {
    let n = ds.n();
    let t = ds.t();
    let n_extra = if spec.include_extra {
        ds.h_names().len()
    } else {
        0
    };
    let q = 1 + spec.y_lags + n_extra;
    let mut design = Array3::<f64>::zeros((n, t, q));
    for i in 0..n {
        for j in 0..t {
            design[[i, j, 0]] = 1.0;
            for lag in 1..=spec.y_lags {
                let value = if j >= lag && ds.observed()[[i, j - lag]] {
                    ds.y()[[i, j - lag]]
                } else {
                    0.0
                };
                design[[i, j, lag]] = value;
            }
            for c in 0..n_extra {
                design[[i, j, 1 + spec.y_lags + c]] = ds.h()[[i, j, c]];
            }
        }
    }
    design
}

/// Fitted dropout model with everything downstream consumers need: hazard
/// coefficients, per-cell hazards and observation probabilities, the floored
/// inverse-probability weights R/omega, and per-subject score contributions.
#[derive(Debug, Clone)]
pub struct DropoutFit {
    pub theta: Array1<f64>,
    /// n x T continuation probabilities; first column is identically 1.
    pub lambda: Array2<f64>,
    /// n x T cumulative observation probabilities.
    pub omega: Array2<f64>,
    /// n x T weights R_ij / max(omega_ij, floor); exactly 0 where unobserved.
    pub ipw: Array2<f64>,
    /// n x q per-subject score contributions at theta-hat.
    pub scores: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// How many observed cells hit the omega floor in weight construction.
    pub floored: usize,
}

impl DropoutFit {
    pub fn q(&self) -> usize {
        self.theta.len()
    }

    /// Unit-weight fit for data without dropout: omega is identically 1, the
    /// hazard model is empty (q = 0) and contributes no score block.
    pub fn no_dropout(ds: &LongitudinalDataset) -> Self {
        let n = ds.n();
        let t = ds.t();
        let mut ipw = Array2::<f64>::zeros((n, t));
        for i in 0..n {
            for j in 0..t {
                if ds.observed()[[i, j]] {
                    ipw[[i, j]] = 1.0;
                }
            }
        }
        Self {
            theta: Array1::zeros(0),
            lambda: Array2::ones((n, t)),
            omega: Array2::ones((n, t)),
            ipw,
            scores: Array2::zeros((n, 0)),
            iterations: 0,
            converged: true,
            floored: 0,
        }
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct AtRisk {
    subject: usize,
    occasion: usize, // 0-based occasion index of the transition target
    response: f64,   // R_ij at the target
}

fn at_risk_transitions(ds: &LongitudinalDataset) -> Vec<AtRisk> {
    let mut rows = Vec::new();
    for i in 0..ds.n() {
        for j in 1..ds.t() {
            if ds.observed()[[i, j - 1]] {
                rows.push(AtRisk {
                    subject: i,
                    occasion: j,
                    response: f64::from(u8::from(ds.observed()[[i, j]])),
                });
            }
        }
    }
    rows
}

fn partial_loglik(rows: &[AtRisk], design: &Array3<f64>, theta: ArrayView1<'_, f64>) -> f64 {
    let mut ll = 0.0;
    for row in rows {
        let eta = eta_at(design, row.subject, row.occasion, theta);
        // log lambda^r (1-lambda)^(1-r) written in a numerically stable form
        ll += row.response * eta - softplus(eta);
    }
    ll
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn eta_at(design: &Array3<f64>, i: usize, j: usize, theta: ArrayView1<'_, f64>) -> f64 {
    (0..theta.len()).map(|c| design[[i, j, c]] * theta[c]).sum()
}

fn score_and_information(
    rows: &[AtRisk],
    design: &Array3<f64>,
    theta: ArrayView1<'_, f64>,
) -> (Array1<f64>, Array2<f64>) {
    let q = theta.len();
    let mut score = Array1::<f64>::zeros(q);
    let mut info = Array2::<f64>::zeros((q, q));
    for row in rows {
        let eta = eta_at(design, row.subject, row.occasion, theta);
        let lambda = expit(eta);
        let resid = row.response - lambda;
        let w = lambda * (1.0 - lambda);
        for a in 0..q {
            let ha = design[[row.subject, row.occasion, a]];
            score[a] += resid * ha;
            for b in 0..q {
                info[[a, b]] += w * ha * design[[row.subject, row.occasion, b]];
            }
        }
    }
    (score, info)
}

/// Fits the dropout hazard by partial likelihood. `design` must come from
/// [`hazard_design`] or have the same n x T x q layout; only at-risk rows
/// (j >= 2 with the previous outcome observed) enter the fit.
pub fn fit_dropout(
    ds: &LongitudinalDataset,
    design: &Array3<f64>,
) -> Result<DropoutFit, DropoutError> {
    let n = ds.n();
    let t = ds.t();
    let (dn, dt, q) = design.dim();
    if dn != n || dt != t || q == 0 {
        return Err(DropoutError::ShapeMismatch {
            expected: (n, t),
            got: (dn, dt, q),
        });
    }
    let rows = at_risk_transitions(ds);
    if rows.is_empty() {
        return Err(DropoutError::NoTransitions);
    }
    if rows.iter().all(|r| r.response == 1.0) {
        // No dropout at all: the partial likelihood is maximized at infinity.
        return Err(DropoutError::Separation);
    }

    let mut theta = Array1::<f64>::zeros(q);
    let mut ll = partial_loglik(&rows, design, theta.view());
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=MAX_ITER {
        iterations = iter;
        if linalg::norm2(theta.view()) > SEPARATION_NORM {
            return Err(DropoutError::Separation);
        }
        let (score, info) = score_and_information(&rows, design, theta.view());
        let avg_norm = linalg::norm2(score.view()) / n as f64;
        if avg_norm <= SCORE_TOL {
            converged = true;
            break;
        }
        let delta = linalg::solve_spd_vec(info.view(), score.view())
            .ok_or(DropoutError::SingularInformation)?;
        let score_norm = linalg::norm2(score.view());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &theta + &(&delta * step);
            let trial_ll = partial_loglik(&rows, design, trial.view());
            // Once the likelihood saturates in float resolution, keep
            // polishing as long as the score norm still shrinks.
            let improves = trial_ll > ll || {
                let (ts, _) = score_and_information(&rows, design, trial.view());
                linalg::norm2(ts.view()) < score_norm
            };
            if improves {
                theta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            converged = avg_norm <= 1e-6;
            break;
        }
    }
    if !converged {
        if linalg::norm2(theta.view()) > SEPARATION_NORM {
            return Err(DropoutError::Separation);
        }
        return Err(DropoutError::NotConverged(MAX_ITER));
    }

    // Fitted hazards and cumulative observation probabilities.
    let mut lambda = Array2::<f64>::ones((n, t));
    let mut omega = Array2::<f64>::ones((n, t));
    for i in 0..n {
        for j in 1..t {
            let l = expit(eta_at(design, i, j, theta.view()));
            if !(l > 0.0 && l <= 1.0) {
                return Err(DropoutError::InvalidHazard);
            }
            lambda[[i, j]] = l;
            omega[[i, j]] = omega[[i, j - 1]] * l;
        }
    }
    let (ipw, floored) = observation_weights_from(ds, &omega);

    // Per-subject score contributions at theta-hat (needed by MLIC and by the
    // dropout block of the full estimating function).
    let mut scores = Array2::<f64>::zeros((n, q));
    for row in &rows {
        let lambda_ij = lambda[[row.subject, row.occasion]];
        let resid = row.response - lambda_ij;
        for c in 0..q {
            scores[[row.subject, c]] += resid * design[[row.subject, row.occasion, c]];
        }
    }

    Ok(DropoutFit {
        theta,
        lambda,
        omega,
        ipw,
        scores,
        iterations,
        converged,
        floored,
    })
}

/// Cumulative observation probabilities from a hazard matrix whose first
/// column is identically 1. Errors if any entry leaves (0, 1].
pub fn observation_weights(lambda: &Array2<f64>) -> Result<Array2<f64>, DropoutError> {
    let (n, t) = lambda.dim();
    let mut omega = Array2::<f64>::ones((n, t));
    for i in 0..n {
        if (lambda[[i, 0]] - 1.0).abs() > 1e-12 {
            return Err(DropoutError::InvalidHazard);
        }
        for j in 1..t {
            let l = lambda[[i, j]];
            if !(l > 0.0 && l <= 1.0) {
                return Err(DropoutError::InvalidHazard);
            }
            omega[[i, j]] = omega[[i, j - 1]] * l;
        }
    }
    Ok(omega)
}

fn observation_weights_from(
    ds: &LongitudinalDataset,
    omega: &Array2<f64>,
) -> (Array2<f64>, usize) {
    let (n, t) = omega.dim();
    let mut ipw = Array2::<f64>::zeros((n, t));
    let mut floored = 0;
    for i in 0..n {
        for j in 0..t {
            if ds.observed()[[i, j]] {
                let w = omega[[i, j]];
                if w < OMEGA_FLOOR {
                    floored += 1;
                    ipw[[i, j]] = 1.0 / OMEGA_FLOOR;
                } else {
                    ipw[[i, j]] = 1.0 / w;
                }
            }
        }
    }
    (ipw, floored)
}
