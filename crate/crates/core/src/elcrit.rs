//! Empirical-likelihood model-selection criteria JEAIC and JEBIC.
//!
//! For each candidate, a stacked per-subject estimating function is evaluated
//! at the candidate's plug-in WGEE estimates:
//!
//! * a mean block over the full design, with the candidate's coefficients
//!   padded by zeros and its correlation values embedded in stationary form;
//! * a stationary correlation block `U_i - h(rho_c) phi`, where
//!   `U_im = sum_j (R_{i,j+m}/omega_{i,j+m}) e_ij e_{i,j+m}` pools lag-m
//!   residual products and `h_m(rho_c) = rho_c_m (T - m - p/n)`;
//! * the dropout-model score block.
//!
//! The empirical likelihood ratio for the constraint `sum_i p_i G_i = 0` is
//! profiled through its convex dual: lambda minimizes `-sum_i log(1 + l'G_i)`
//! and `-2 log R = 2 sum_i log(1 + lambda'G_i)`. A candidate whose stacked
//! moments cannot be centered (zero outside the convex hull of {G_i}) is
//! infeasible and receives infinite criteria.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::data::{design_matrices, DataError, LongitudinalDataset, MeanModelSpec};
use crate::dropout::DropoutFit;
use crate::linalg;
use crate::wgee::{
    correlation_matrix, subject_mean_contribution, CorrelationKind, WgeeError, WgeeFit,
    WorkingCorrelation,
};

const GRAD_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 40;
const LAMBDA_DIVERGED: f64 = 1e10;

#[derive(Debug, Error)]
pub enum ElError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wgee(#[from] WgeeError),
    #[error("candidate mean model is not nested in the full design")]
    NotNested,
    #[error("an unstructured candidate cannot be embedded in the stationary correlation block")]
    UnstructuredCandidate,
    #[error("estimating-function dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("log of a nonpositive argument; lambda violates the solver contract")]
    NonpositiveLogArgument,
}

/// Dimensions and plug-in values defining the full estimating function for
/// one candidate.
#[derive(Debug, Clone)]
pub struct FullEEContext {
    pub full_spec: MeanModelSpec,
    /// Candidate coefficients padded with zeros to the full design.
    pub beta_tilde: Array1<f64>,
    /// Candidate correlation values in stationary coordinates (length T-1).
    pub rho_c: Vec<f64>,
    pub phi: f64,
    /// Candidate mean dimension p.
    pub p_candidate: usize,
    pub n: usize,
    pub t: usize,
    pub q: usize,
}

impl FullEEContext {
    /// Total number of stacked estimating equations L + (T-1) + q.
    pub fn l_total(&self) -> usize {
        self.full_spec.len() + (self.t - 1) + self.q
    }

    /// Validates nesting and assembles the plug-in values for a candidate:
    /// the zero-padded coefficient vector, the stationary embedding of its
    /// correlation values, and the dimensions of every block.
    pub fn for_candidate(
        ds: &LongitudinalDataset,
        full_spec: &MeanModelSpec,
        candidate: &WgeeFit,
        dropout: &DropoutFit,
    ) -> Result<Self, ElError> {
        full_spec.validate_against(ds)?;
        if !candidate.spec.is_nested_in(full_spec) {
            return Err(ElError::NotNested);
        }
        let t = ds.t();
        let l_mean = full_spec.len();
        let full_cols = full_spec.columns();
        let cand_cols = candidate.spec.columns();
        let mut beta_tilde = Array1::<f64>::zeros(l_mean);
        for (ci, col) in cand_cols.iter().enumerate() {
            let pos = full_cols
                .iter()
                .position(|fc| fc == col)
                .ok_or(ElError::NotNested)?;
            beta_tilde[pos] = candidate.beta[ci];
        }
        Ok(Self {
            full_spec: full_spec.clone(),
            beta_tilde,
            rho_c: stationary_embedding(&candidate.corr, t)?,
            phi: candidate.phi,
            p_candidate: candidate.p(),
            n: ds.n(),
            t,
            q: dropout.q(),
        })
    }
}

/// Maps a fitted working correlation into stationary coordinates
/// (rho_1, ..., rho_{T-1}): independence to zeros, exchangeable to a constant
/// vector, AR1 to geometric decay, stationary to itself.
pub fn stationary_embedding(
    corr: &WorkingCorrelation,
    t: usize,
) -> Result<Vec<f64>, ElError> {
    let lags = t - 1;
    match corr.kind {
        CorrelationKind::Independence => Ok(vec![0.0; lags]),
        CorrelationKind::Exchangeable => Ok(vec![corr.rho[0]; lags]),
        CorrelationKind::Ar1 => Ok((1..=lags).map(|m| corr.rho[0].powi(m as i32)).collect()),
        CorrelationKind::Stationary => Ok(corr.rho.clone()),
        CorrelationKind::Unstructured => Err(ElError::UnstructuredCandidate),
    }
}

/// Number of parameters charged to a candidate: mean dimension, free
/// correlation parameters of its structure, and the dropout model dimension.
pub fn p_tilde(p_mean: usize, kind: CorrelationKind, t: usize, q: usize) -> usize {
    debug_assert!(kind != CorrelationKind::Unstructured);
    p_mean + kind.param_count(t) + q
}

/// Builds the per-subject stacked estimating vectors (length L + (T-1) + q)
/// for a candidate fit, evaluated at its own plug-in estimates.
pub fn build_full_ee(
    ds: &LongitudinalDataset,
    full_spec: &MeanModelSpec,
    candidate: &WgeeFit,
    dropout: &DropoutFit,
) -> Result<Vec<Array1<f64>>, ElError> {
    let ctx = FullEEContext::for_candidate(ds, full_spec, candidate, dropout)?;
    let n = ctx.n;
    let t = ctx.t;
    let q = ctx.q;
    let l_mean = ctx.full_spec.len();
    let phi = ctx.phi;

    let stationary = WorkingCorrelation {
        kind: CorrelationKind::Stationary,
        rho: ctx.rho_c.clone(),
    };
    let c = correlation_matrix(&stationary, t)?;
    let c_inv = linalg::inv_spd(c.view()).ok_or(WgeeError::NotPositiveDefinite)?;

    let designs = design_matrices(ds, &ctx.full_spec)?;
    let family = ds.family();

    // h_m(rho_c) phi: the centering of the pooled lag-m moment.
    let n_f = n as f64;
    let h_phi: Vec<f64> = (1..t)
        .map(|m| ctx.rho_c[m - 1] * ((t - m) as f64 - ctx.p_candidate as f64 / n_f) * phi)
        .collect();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let eta = designs[i].dot(&ctx.beta_tilde);
        let mu_row: Vec<f64> = (0..t).map(|j| family.mean(eta[j])).collect();
        let resid: Vec<f64> = (0..t)
            .map(|j| {
                if ds.observed()[[i, j]] {
                    (ds.y()[[i, j]] - mu_row[j]) / family.variance(mu_row[j]).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let ipw_row: Vec<f64> = (0..t).map(|j| dropout.ipw[[i, j]]).collect();

        let mut g = Array1::<f64>::zeros(ctx.l_total());
        let mean_block = subject_mean_contribution(
            ds,
            &designs[i],
            &ctx.beta_tilde,
            &mu_row,
            &c_inv,
            phi,
            &ipw_row,
            i,
        );
        for a in 0..l_mean {
            g[a] = mean_block[a];
        }
        for m in 1..t {
            let mut u = 0.0;
            for j in 0..(t - m) {
                u += ipw_row[j + m] * resid[j] * resid[j + m];
            }
            g[l_mean + m - 1] = u - h_phi[m - 1];
        }
        for c in 0..q {
            g[l_mean + (t - 1) + c] = dropout.scores[[i, c]];
        }
        out.push(g);
    }
    Ok(out)
}

/// Outcome of the inner empirical-likelihood problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElStatus {
    Solved,
    /// Zero is outside the convex hull of the estimating vectors; the
    /// constraint cannot be met by any probability vector.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct ElResult {
    pub lambda: Array1<f64>,
    /// `-2 log R`; infinite when infeasible.
    pub neg2logr: f64,
    /// Implied probabilities `1/(n(1 + lambda'G_i))`; empty when infeasible.
    pub probabilities: Vec<f64>,
    pub status: ElStatus,
    pub iterations: usize,
}

impl ElResult {
    fn infeasible(dim: usize, iterations: usize) -> Self {
        Self {
            lambda: Array1::zeros(dim),
            neg2logr: f64::INFINITY,
            probabilities: Vec::new(),
            status: ElStatus::Infeasible,
            iterations,
        }
    }
}

fn dual_value(g: &[Array1<f64>], lambda: &Array1<f64>) -> Option<(f64, Vec<f64>)> {
    let n = g.len() as f64;
    let floor = 1.0 / n;
    let mut value = 0.0;
    let mut w = Vec::with_capacity(g.len());
    for gi in g {
        let wi = 1.0 + lambda.dot(gi);
        if wi <= floor {
            return None;
        }
        value -= wi.ln();
        w.push(wi);
    }
    Some((value, w))
}

/// Profiles the empirical likelihood subject to `sum_i p_i G_i = 0` by damped
/// Newton on the convex dual. The step keeps every `1 + lambda'G_i` above
/// `1/n`, which guarantees the implied probabilities stay below one.
pub fn solve_lagrange(g: &[Array1<f64>]) -> ElResult {
    let n = g.len();
    assert!(n > 0, "empty estimating set");
    let dim = g[0].len();

    // A coordinate whose values all share a strict sign puts zero outside the
    // convex hull immediately.
    for k in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for gi in g {
            lo = lo.min(gi[k]);
            hi = hi.max(gi[k]);
        }
        if lo > 0.0 || hi < 0.0 {
            return ElResult::infeasible(dim, 0);
        }
    }

    let mut lambda = Array1::<f64>::zeros(dim);
    let mut sum_g = Array1::<f64>::zeros(dim);
    for gi in g {
        sum_g = &sum_g + gi;
    }
    let tol = GRAD_TOL * (1.0 + linalg::norm2(sum_g.view()));

    let (mut f_val, mut weights) = dual_value(g, &lambda).expect("lambda = 0 is interior");
    let mut iterations = 0;
    for iter in 1..=MAX_NEWTON {
        iterations = iter;
        // Gradient -sum G_i / w_i and Hessian sum G_i G_i' / w_i^2.
        let mut grad = Array1::<f64>::zeros(dim);
        let mut hess = Array2::<f64>::zeros((dim, dim));
        for (gi, &wi) in g.iter().zip(weights.iter()) {
            let inv = 1.0 / wi;
            let inv2 = inv * inv;
            for a in 0..dim {
                grad[a] -= gi[a] * inv;
                let ga = gi[a] * inv2;
                for b in 0..dim {
                    hess[[a, b]] += ga * gi[b];
                }
            }
        }
        if linalg::norm2(grad.view()) <= tol {
            break;
        }
        if linalg::norm2(lambda.view()) > LAMBDA_DIVERGED {
            return ElResult::infeasible(dim, iterations);
        }
        let direction = match linalg::solve_spd_vec(hess.view(), grad.view()) {
            Some(d) => -d,
            None => {
                // Degenerate curvature (e.g. an identically-zero coordinate):
                // retry with a ridge before giving up. The ridge only damps
                // the step; convergence is still judged by the gradient.
                let max_diag = (0..dim).map(|a| hess[[a, a]]).fold(0.0f64, f64::max);
                let bump = (1e-8 * max_diag).max(1e-300);
                let mut ridged = hess.clone();
                for a in 0..dim {
                    ridged[[a, a]] += bump;
                }
                match linalg::solve_spd_vec(ridged.view(), grad.view()) {
                    Some(d) => -d,
                    None => return ElResult::infeasible(dim, iterations),
                }
            }
        };
        let grad_norm = linalg::norm2(grad.view());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial = &lambda + &(&direction * step);
            if let Some((trial_f, trial_w)) = dual_value(g, &trial) {
                // Strict descent, or gradient-norm descent once the dual
                // value saturates in float resolution.
                let improves = trial_f < f_val || {
                    let mut tg = Array1::<f64>::zeros(dim);
                    for (gi, &wi) in g.iter().zip(trial_w.iter()) {
                        for a in 0..dim {
                            tg[a] -= gi[a] / wi;
                        }
                    }
                    trial_f <= f_val && linalg::norm2(tg.view()) < grad_norm
                };
                if improves {
                    lambda = trial;
                    f_val = trial_f;
                    weights = trial_w;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent available: accept if the gradient is already tiny,
            // otherwise the dual is unbounded (hull degeneracy).
            if linalg::norm2(grad.view()) <= 1e-6 * (1.0 + linalg::norm2(sum_g.view())) {
                break;
            }
            return ElResult::infeasible(dim, iterations);
        }
    }

    // Final feasibility audit: the gradient must have actually vanished.
    let mut grad = Array1::<f64>::zeros(dim);
    for (gi, &wi) in g.iter().zip(weights.iter()) {
        for a in 0..dim {
            grad[a] -= gi[a] / wi;
        }
    }
    if linalg::norm2(grad.view()) > 1e-6 * (1.0 + linalg::norm2(sum_g.view())) {
        return ElResult::infeasible(dim, iterations);
    }

    let n_f = n as f64;
    let neg2logr = (2.0 * weights.iter().map(|w| w.ln()).sum::<f64>()).max(0.0);
    let probabilities = weights.iter().map(|w| 1.0 / (n_f * w)).collect();
    ElResult {
        lambda,
        neg2logr,
        probabilities,
        status: ElStatus::Solved,
        iterations,
    }
}

/// `-2 log R = 2 sum_i log(1 + lambda'G_i)` at a given multiplier.
pub fn neg2_log_elr(g: &[Array1<f64>], lambda: &Array1<f64>) -> Result<f64, ElError> {
    let mut total = 0.0;
    for gi in g {
        let w = 1.0 + lambda.dot(gi);
        if w <= 0.0 {
            return Err(ElError::NonpositiveLogArgument);
        }
        total += w.ln();
    }
    Ok((2.0 * total).max(0.0))
}

/// The joint criteria: `JEAIC = -2 log R + 2 p_tilde`,
/// `JEBIC = -2 log R + p_tilde ln n`. Infeasible candidates get infinity.
pub fn jeaic_jebic(neg2logr: f64, p_tilde: usize, n: usize) -> (f64, f64) {
    if !neg2logr.is_finite() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let p = p_tilde as f64;
    (neg2logr + 2.0 * p, neg2logr + p * (n as f64).ln())
}
