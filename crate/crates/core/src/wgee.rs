//! Weighted generalized estimating equations.
//!
//! For a candidate mean model with design X_i and working correlation C(rho),
//! the coefficient estimate solves
//!
//! ```text
//! sum_i D_i' V_i^{-1} W_i (Y_i - mu_i(beta)) = 0
//! ```
//!
//! with D_i = d mu_i / d beta', V_i = A_i^{1/2} C(rho) A_i^{1/2} and W_i the
//! diagonal matrix of inverse-probability observation weights R_ij/omega_ij.
//! The fit alternates modified Fisher-scoring steps for beta with moment
//! updates of the dispersion and the correlation parameters, both computed
//! from weighted Pearson residuals with the dropout-unbiased normalizations.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::data::{design_matrices, DataError, LongitudinalDataset, MeanModelSpec, OutcomeFamily};
use crate::dropout::DropoutFit;
use crate::linalg;

/// Inner target for the coefficient-change stopping rule; the accepted
/// convergence threshold is looser (1e-8) when iterations run out.
const BETA_TOL_TARGET: f64 = 1e-11;
const BETA_TOL_ACCEPT: f64 = 1e-8;
const MAX_ITER: usize = 100;
/// Fitted correlation parameters are clipped to this open interval.
const RHO_CLIP: f64 = 0.99;

#[derive(Debug, Error)]
pub enum WgeeError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("correlation parameter vector has length {got}, expected {expected}")]
    RhoLength { expected: usize, got: usize },
    #[error("working correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dispersion denominator nT - p = {0} is not positive")]
    DispersionDenominator(i64),
    #[error("correlation denominator requires n > p (n = {n}, p = {p})")]
    CorrelationDenominator { n: usize, p: usize },
    #[error("no observed pairs at lag {0}; correlation not estimable")]
    NoObservedPairs(usize),
    #[error("singular weighted information matrix")]
    SingularSystem,
    #[error("coefficient update produced non-finite values")]
    NonFiniteStep,
    #[error("fit did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("sandwich variance needs more subjects than parameters (n = {n}, p = {p})")]
    RankDeficient { n: usize, p: usize },
}

/// Working correlation structure kinds, ordered for deterministic candidate
/// enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CorrelationKind {
    Independence,
    Exchangeable,
    Ar1,
    Stationary,
    Unstructured,
}

impl CorrelationKind {
    /// Number of free correlation parameters for panels of length `t`.
    pub fn param_count(self, t: usize) -> usize {
        match self {
            CorrelationKind::Independence => 0,
            CorrelationKind::Exchangeable | CorrelationKind::Ar1 => 1,
            CorrelationKind::Stationary => t - 1,
            CorrelationKind::Unstructured => t * (t - 1) / 2,
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorrelationKind::Independence => "IND",
            CorrelationKind::Exchangeable => "EXC",
            CorrelationKind::Ar1 => "AR1",
            CorrelationKind::Stationary => "STAT",
            CorrelationKind::Unstructured => "UN",
        };
        write!(f, "{s}")
    }
}

impl FromStr for CorrelationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "independence" => Ok(CorrelationKind::Independence),
            "exc" | "exchangeable" => Ok(CorrelationKind::Exchangeable),
            "ar1" => Ok(CorrelationKind::Ar1),
            "stat" | "stationary" => Ok(CorrelationKind::Stationary),
            "un" | "unstructured" => Ok(CorrelationKind::Unstructured),
            other => Err(format!("unknown correlation structure `{other}`")),
        }
    }
}

/// A structure kind together with its fitted parameter vector (empty for
/// independence, one entry for EXC/AR1, T-1 for stationary, T(T-1)/2 for
/// unstructured in pair order (1,2), (1,3), ..., (T-1,T)).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingCorrelation {
    pub kind: CorrelationKind,
    pub rho: Vec<f64>,
}

impl WorkingCorrelation {
    pub fn independence() -> Self {
        Self {
            kind: CorrelationKind::Independence,
            rho: Vec::new(),
        }
    }
}

/// Materializes the T x T working correlation matrix and checks positive
/// definiteness.
pub fn correlation_matrix(corr: &WorkingCorrelation, t: usize) -> Result<Array2<f64>, WgeeError> {
    let expected = corr.kind.param_count(t);
    if corr.rho.len() != expected {
        return Err(WgeeError::RhoLength {
            expected,
            got: corr.rho.len(),
        });
    }
    let mut c = Array2::<f64>::eye(t);
    match corr.kind {
        CorrelationKind::Independence => {}
        CorrelationKind::Exchangeable => {
            for j in 0..t {
                for k in 0..t {
                    if j != k {
                        c[[j, k]] = corr.rho[0];
                    }
                }
            }
        }
        CorrelationKind::Ar1 => {
            for j in 0..t {
                for k in 0..t {
                    if j != k {
                        c[[j, k]] = corr.rho[0].powi((j as i32 - k as i32).abs());
                    }
                }
            }
        }
        CorrelationKind::Stationary => {
            for j in 0..t {
                for k in 0..t {
                    if j != k {
                        let lag = (j as i64 - k as i64).unsigned_abs() as usize;
                        c[[j, k]] = corr.rho[lag - 1];
                    }
                }
            }
        }
        CorrelationKind::Unstructured => {
            for j in 0..t {
                for k in (j + 1)..t {
                    let v = corr.rho[pair_index(j, k, t)];
                    c[[j, k]] = v;
                    c[[k, j]] = v;
                }
            }
        }
    }
    if linalg::cholesky(c.view()).is_none() {
        return Err(WgeeError::NotPositiveDefinite);
    }
    Ok(c)
}

/// Index of pair (j, k), j < k (0-based), in the order (0,1), (0,2), ...,
/// (0,T-1), (1,2), ...
pub(crate) fn pair_index(j: usize, k: usize, t: usize) -> usize {
    debug_assert!(j < k && k < t);
    j * t - j * (j + 1) / 2 + (k - j - 1)
}

/// Moment estimate of the dispersion from masked Pearson residuals:
/// `phi = 1/(nT - p) * sum_ij e_ij^2 R_ij/omega_ij`.
pub fn estimate_dispersion(
    residuals: &Array2<f64>,
    ipw: &Array2<f64>,
    p: usize,
) -> Result<f64, WgeeError> {
    let (n, t) = residuals.dim();
    let denom = (n * t) as i64 - p as i64;
    if denom <= 0 {
        return Err(WgeeError::DispersionDenominator(denom));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..t {
            total += residuals[[i, j]] * residuals[[i, j]] * ipw[[i, j]];
        }
    }
    Ok(total / denom as f64)
}

/// Moment estimates of the correlation parameters, clipped entrywise to
/// (-0.99, 0.99).
///
/// Pairwise moments use the dropout-unbiased form
/// `sum_i e_ij e_ik R_ik/omega_ik`. Exchangeable pools every pair and AR1
/// pools lag-1 pairs, each divided by `(n-p) phi` per pair; the stationary
/// structure pools lag m with denominator `(n(T-m) - p) phi`, which makes the
/// fitted values solve the stationary moment equations of the stacked system
/// exactly.
pub fn estimate_rho(
    residuals: &Array2<f64>,
    ipw: &Array2<f64>,
    kind: CorrelationKind,
    p: usize,
    phi: f64,
) -> Result<Vec<f64>, WgeeError> {
    let (n, t) = residuals.dim();
    if kind == CorrelationKind::Independence {
        return Ok(Vec::new());
    }
    let pair_moment = |j: usize, k: usize| -> (f64, usize) {
        let mut s = 0.0;
        let mut support = 0;
        for i in 0..n {
            let w = ipw[[i, k]];
            if w > 0.0 {
                support += 1;
                s += residuals[[i, j]] * residuals[[i, k]] * w;
            }
        }
        (s, support)
    };
    let clip = |v: f64| v.clamp(-RHO_CLIP, RHO_CLIP);
    let per_pair_denom = || -> Result<f64, WgeeError> {
        if n <= p {
            return Err(WgeeError::CorrelationDenominator { n, p });
        }
        Ok((n - p) as f64 * phi)
    };

    match kind {
        CorrelationKind::Independence => unreachable!(),
        CorrelationKind::Exchangeable => {
            let denom = per_pair_denom()?;
            let mut total = 0.0;
            let mut pairs = 0usize;
            let mut support = 0usize;
            for j in 0..t {
                for k in (j + 1)..t {
                    let (s, sup) = pair_moment(j, k);
                    total += s;
                    support += sup;
                    pairs += 1;
                }
            }
            if support == 0 {
                return Err(WgeeError::NoObservedPairs(1));
            }
            Ok(vec![clip(total / (denom * pairs as f64))])
        }
        CorrelationKind::Ar1 => {
            let denom = per_pair_denom()?;
            let mut total = 0.0;
            let mut support = 0usize;
            for j in 0..(t - 1) {
                let (s, sup) = pair_moment(j, j + 1);
                total += s;
                support += sup;
            }
            if support == 0 {
                return Err(WgeeError::NoObservedPairs(1));
            }
            Ok(vec![clip(total / (denom * (t - 1) as f64))])
        }
        CorrelationKind::Stationary => {
            let mut rho = Vec::with_capacity(t - 1);
            for m in 1..t {
                let mut s = 0.0;
                let mut support = 0usize;
                for j in 0..(t - m) {
                    let (sj, sup) = pair_moment(j, j + m);
                    s += sj;
                    support += sup;
                }
                if support == 0 {
                    return Err(WgeeError::NoObservedPairs(m));
                }
                let denom = (n * (t - m)) as f64 - p as f64;
                if denom <= 0.0 {
                    return Err(WgeeError::CorrelationDenominator { n, p });
                }
                rho.push(clip(s / (denom * phi)));
            }
            Ok(rho)
        }
        CorrelationKind::Unstructured => {
            let denom = per_pair_denom()?;
            let mut rho = vec![0.0; t * (t - 1) / 2];
            for j in 0..t {
                for k in (j + 1)..t {
                    let (s, sup) = pair_moment(j, k);
                    if sup == 0 {
                        return Err(WgeeError::NoObservedPairs(k - j));
                    }
                    rho[pair_index(j, k, t)] = clip(s / denom);
                }
            }
            Ok(rho)
        }
    }
}

/// Converged WGEE fit for one candidate (mean model, correlation structure)
/// pair.
#[derive(Debug, Clone)]
pub struct WgeeFit {
    pub spec: MeanModelSpec,
    pub beta: Array1<f64>,
    pub corr: WorkingCorrelation,
    pub phi: f64,
    /// n x T fitted means.
    pub mu_hat: Array2<f64>,
    /// n x T Pearson residuals, zero at unobserved cells.
    pub residuals: Array2<f64>,
    /// Sandwich covariance of beta-hat, when computable.
    pub robust_cov: Option<Array2<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl WgeeFit {
    pub fn p(&self) -> usize {
        self.beta.len()
    }
}

fn fitted_means(
    ds: &LongitudinalDataset,
    designs: &[Array2<f64>],
    beta: &Array1<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n = ds.n();
    let t = ds.t();
    let family = ds.family();
    let mut mu = Array2::<f64>::zeros((n, t));
    let mut resid = Array2::<f64>::zeros((n, t));
    for i in 0..n {
        let eta = designs[i].dot(beta);
        for j in 0..t {
            let m = family.mean(eta[j]);
            mu[[i, j]] = m;
            if ds.observed()[[i, j]] {
                resid[[i, j]] = (ds.y()[[i, j]] - m) / family.variance(m).sqrt();
            }
        }
    }
    (mu, resid)
}

struct MomentState {
    phi: f64,
    corr: WorkingCorrelation,
    c_inv: Array2<f64>,
}

fn moment_state(
    ds: &LongitudinalDataset,
    residuals: &Array2<f64>,
    ipw: &Array2<f64>,
    kind: CorrelationKind,
    p: usize,
) -> Result<MomentState, WgeeError> {
    let phi = match ds.family().fixed_dispersion() {
        Some(v) => v,
        None => estimate_dispersion(residuals, ipw, p)?,
    };
    let rho = estimate_rho(residuals, ipw, kind, p, phi)?;
    let corr = WorkingCorrelation { kind, rho };
    let c = correlation_matrix(&corr, ds.t())?;
    let c_inv = linalg::inv_spd(c.view()).ok_or(WgeeError::NotPositiveDefinite)?;
    Ok(MomentState { phi, corr, c_inv })
}

/// `V_i^{-1}` for one subject: A^{-1/2} C^{-1} A^{-1/2} with
/// A_jj = phi * nu(mu_ij).
pub(crate) fn v_inverse(
    family: OutcomeFamily,
    mu_row: &[f64],
    c_inv: &Array2<f64>,
    phi: f64,
) -> Array2<f64> {
    let t = mu_row.len();
    let inv_sd: Vec<f64> = mu_row
        .iter()
        .map(|&m| 1.0 / (phi * family.variance(m)).sqrt())
        .collect();
    Array2::from_shape_fn((t, t), |(j, k)| c_inv[[j, k]] * inv_sd[j] * inv_sd[k])
}

/// `D_i = diag(dmu/deta) X_i` for one subject.
pub(crate) fn mean_jacobian(
    family: OutcomeFamily,
    design: &Array2<f64>,
    beta: &Array1<f64>,
) -> Array2<f64> {
    let eta = design.dot(beta);
    let mut d = design.clone();
    for j in 0..d.nrows() {
        let w = family.mean_derivative(eta[j]);
        for c in 0..d.ncols() {
            d[[j, c]] *= w;
        }
    }
    d
}

/// One modified Fisher-scoring assembly: the estimating function value `g`
/// and the weighted information `E` at the current state.
fn assemble_system(
    ds: &LongitudinalDataset,
    designs: &[Array2<f64>],
    beta: &Array1<f64>,
    mu: &Array2<f64>,
    state: &MomentState,
    ipw: &Array2<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let n = ds.n();
    let t = ds.t();
    let p = beta.len();
    let family = ds.family();
    let mut g = Array1::<f64>::zeros(p);
    let mut e = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        let mu_row: Vec<f64> = (0..t).map(|j| mu[[i, j]]).collect();
        let vinv = v_inverse(family, &mu_row, &state.c_inv, state.phi);
        let d = mean_jacobian(family, &designs[i], beta);
        let m = d.t().dot(&vinv);
        for j in 0..t {
            let w = ipw[[i, j]];
            if w == 0.0 {
                continue;
            }
            let r = w * (ds.y_or_zero(i, j) - mu[[i, j]]);
            for a in 0..p {
                g[a] += m[[a, j]] * r;
                let maj = m[[a, j]] * w;
                for b in 0..p {
                    e[[a, b]] += maj * d[[j, b]];
                }
            }
        }
    }
    (g, e)
}

fn fisher_loop(
    ds: &LongitudinalDataset,
    designs: &[Array2<f64>],
    spec: &MeanModelSpec,
    kind: CorrelationKind,
    dropout: &DropoutFit,
    mut beta: Array1<f64>,
) -> Result<WgeeFit, WgeeError> {
    let p = spec.len();
    let ipw = &dropout.ipw;
    let mut iterations = 0;
    let mut converged = false;
    for iter in 1..=MAX_ITER {
        iterations = iter;
        let (mu, resid) = fitted_means(ds, designs, &beta);
        let state = moment_state(ds, &resid, ipw, kind, p)?;
        let (g, e) = assemble_system(ds, designs, &beta, &mu, &state, ipw);
        let delta = linalg::solve_spd_vec(e.view(), g.view()).ok_or(WgeeError::SingularSystem)?;
        beta = &beta + &delta;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(WgeeError::NonFiniteStep);
        }
        let change = linalg::norm2(delta.view());
        if change < BETA_TOL_TARGET {
            converged = true;
            break;
        }
        if iter == MAX_ITER && change < BETA_TOL_ACCEPT {
            converged = true;
        }
    }
    if !converged {
        return Err(WgeeError::NotConverged(MAX_ITER));
    }
    // Re-derive every moment quantity at the final coefficients so the stored
    // state is exactly the fixed point consumed downstream.
    let (mu, resid) = fitted_means(ds, designs, &beta);
    let state = moment_state(ds, &resid, ipw, kind, p)?;
    let mut fit = WgeeFit {
        spec: spec.clone(),
        beta,
        corr: state.corr,
        phi: state.phi,
        mu_hat: mu,
        residuals: resid,
        robust_cov: None,
        converged,
        iterations,
    };
    fit.robust_cov = sandwich_variance(ds, &fit, dropout).ok();
    Ok(fit)
}

/// Fits the weighted GEE for one candidate. Coefficients are initialized at
/// the independence-structure fit; correlation parameters start at zero.
pub fn wgee_fit(
    ds: &LongitudinalDataset,
    spec: &MeanModelSpec,
    kind: CorrelationKind,
    dropout: &DropoutFit,
) -> Result<WgeeFit, WgeeError> {
    spec.validate_against(ds)?;
    let designs = design_matrices(ds, spec)?;
    let init = Array1::<f64>::zeros(spec.len());
    if kind == CorrelationKind::Independence {
        return fisher_loop(ds, &designs, spec, kind, dropout, init);
    }
    let ind = fisher_loop(
        ds,
        &designs,
        spec,
        CorrelationKind::Independence,
        dropout,
        init,
    )?;
    let warm_start = ind.iterations;
    let mut fit = fisher_loop(ds, &designs, spec, kind, dropout, ind.beta)?;
    fit.iterations += warm_start;
    Ok(fit)
}

/// Sandwich covariance `E^{-1} M E^{-1}` with `E = sum_i D' V^{-1} W D` and
/// `M = sum_i g_i g_i'` built from the per-subject estimating contributions.
pub fn sandwich_variance(
    ds: &LongitudinalDataset,
    fit: &WgeeFit,
    dropout: &DropoutFit,
) -> Result<Array2<f64>, WgeeError> {
    let n = ds.n();
    let t = ds.t();
    let p = fit.p();
    if n <= p {
        return Err(WgeeError::RankDeficient { n, p });
    }
    let designs = design_matrices(ds, &fit.spec)?;
    let c = correlation_matrix(&fit.corr, t)?;
    let c_inv = linalg::inv_spd(c.view()).ok_or(WgeeError::NotPositiveDefinite)?;
    let family = ds.family();
    let mut e = Array2::<f64>::zeros((p, p));
    let mut meat = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        let mu_row: Vec<f64> = (0..t).map(|j| fit.mu_hat[[i, j]]).collect();
        let vinv = v_inverse(family, &mu_row, &c_inv, fit.phi);
        let d = mean_jacobian(family, &designs[i], &fit.beta);
        let m = d.t().dot(&vinv);
        let mut g_i = Array1::<f64>::zeros(p);
        for j in 0..t {
            let w = dropout.ipw[[i, j]];
            if w == 0.0 {
                continue;
            }
            let r = w * (ds.y_or_zero(i, j) - fit.mu_hat[[i, j]]);
            for a in 0..p {
                g_i[a] += m[[a, j]] * r;
                let maj = m[[a, j]] * w;
                for b in 0..p {
                    e[[a, b]] += maj * d[[j, b]];
                }
            }
        }
        for a in 0..p {
            for b in 0..p {
                meat[[a, b]] += g_i[a] * g_i[b];
            }
        }
    }
    let e_inv = linalg::inv_spd(e.view()).ok_or(WgeeError::SingularSystem)?;
    let cov = e_inv.dot(&meat).dot(&e_inv);
    let mut sym = cov.clone();
    for a in 0..p {
        for b in 0..p {
            sym[[a, b]] = 0.5 * (cov[[a, b]] + cov[[b, a]]);
        }
    }
    Ok(sym)
}

/// Per-subject estimating-function contributions at the fitted state; the
/// rows stack into the mean block of the full estimating function.
#[allow(clippy::too_many_arguments)]
pub(crate) fn subject_mean_contribution(
    ds: &LongitudinalDataset,
    design: &Array2<f64>,
    beta: &Array1<f64>,
    mu_row: &[f64],
    c_inv: &Array2<f64>,
    phi: f64,
    ipw_row: &[f64],
    i: usize,
) -> Array1<f64> {
    let family = ds.family();
    let vinv = v_inverse(family, mu_row, c_inv, phi);
    let d = mean_jacobian(family, design, beta);
    let m = d.t().dot(&vinv);
    let p = beta.len();
    let t = mu_row.len();
    let mut g = Array1::<f64>::zeros(p);
    for j in 0..t {
        let w = ipw_row[j];
        if w == 0.0 {
            continue;
        }
        let r = w * (ds.y_or_zero(i, j) - mu_row[j]);
        for a in 0..p {
            g[a] += m[[a, j]] * r;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeFamily;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gaussian elimination with partial pivoting, independent of the crate's
    /// Cholesky kernels; used only by test oracles.
    fn oracle_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
        let n = b.len();
        let mut m = a.clone();
        let mut rhs = b.clone();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| m[[r1, col]].abs().partial_cmp(&m[[r2, col]].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for c in 0..n {
                    m.swap([col, c], [pivot, c]);
                }
                rhs.swap(col, pivot);
            }
            for row in (col + 1)..n {
                let f = m[[row, col]] / m[[col, col]];
                for c in col..n {
                    m[[row, c]] -= f * m[[col, c]];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = Array1::<f64>::zeros(n);
        for row in (0..n).rev() {
            let mut v = rhs[row];
            for c in (row + 1)..n {
                v -= m[[row, c]] * x[c];
            }
            x[row] = v / m[[row, row]];
        }
        x
    }

    fn complete_dataset(
        family: OutcomeFamily,
        y: Array2<f64>,
        x: Array3<f64>,
        names: Vec<String>,
    ) -> LongitudinalDataset {
        let (n, t) = y.dim();
        LongitudinalDataset::from_parts(
            (0..n).map(|i| format!("s{i}")).collect(),
            family,
            y,
            Array2::from_elem((n, t), true),
            x,
            names,
            Array3::zeros((n, t, 0)),
            vec![],
        )
        .unwrap()
    }

    fn random_gaussian_instance(seed: u64, n: usize, t: usize, k: usize) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array3::<f64>::zeros((n, t, k + 1));
        let mut y = Array2::<f64>::zeros((n, t));
        for i in 0..n {
            for j in 0..t {
                x[[i, j, 0]] = 1.0;
                for c in 1..=k {
                    x[[i, j, c]] = rng.random_range(-1.0..1.0);
                }
                let mean: f64 =
                    0.5 + (1..=k).map(|c| 0.3 * c as f64 * x[[i, j, c]]).sum::<f64>();
                y[[i, j]] = mean + rng.random_range(-0.5..0.5);
            }
        }
        let names = std::iter::once("(intercept)".to_string())
            .chain((1..=k).map(|c| format!("x{c}")))
            .collect();
        complete_dataset(OutcomeFamily::Gaussian, y, x, names)
    }

    fn random_binary_instance(seed: u64, n: usize, t: usize, k: usize) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array3::<f64>::zeros((n, t, k + 1));
        let mut y = Array2::<f64>::zeros((n, t));
        for i in 0..n {
            for j in 0..t {
                x[[i, j, 0]] = 1.0;
                for c in 1..=k {
                    x[[i, j, c]] = rng.random_range(-1.0..1.0);
                }
                let eta: f64 = -0.2 + (1..=k).map(|c| 0.8 * x[[i, j, c]]).sum::<f64>();
                let prob = 1.0 / (1.0 + (-eta).exp());
                y[[i, j]] = f64::from(u8::from(rng.random_range(0.0..1.0) < prob));
            }
        }
        let names = std::iter::once("(intercept)".to_string())
            .chain((1..=k).map(|c| format!("x{c}")))
            .collect();
        complete_dataset(OutcomeFamily::Binary, y, x, names)
    }

    fn stack_rows(ds: &LongitudinalDataset, spec: &MeanModelSpec) -> (Array2<f64>, Array1<f64>) {
        let designs = design_matrices(ds, spec).unwrap();
        let p = spec.len();
        let rows = ds.n() * ds.t();
        let mut x = Array2::<f64>::zeros((rows, p));
        let mut y = Array1::<f64>::zeros(rows);
        let mut r = 0;
        for i in 0..ds.n() {
            for j in 0..ds.t() {
                for c in 0..p {
                    x[[r, c]] = designs[i][[j, c]];
                }
                y[r] = ds.y()[[i, j]];
                r += 1;
            }
        }
        (x, y)
    }

    fn ols_oracle(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let xtx = x.t().dot(x);
        let xty = x.t().dot(y);
        oracle_solve(&xtx, &xty)
    }

    fn irls_logistic_oracle(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
        let p = x.ncols();
        let mut beta = Array1::<f64>::zeros(p);
        for _ in 0..60 {
            let eta = x.dot(&beta);
            let mu = eta.mapv(|e| 1.0 / (1.0 + (-e).exp()));
            let mut info = Array2::<f64>::zeros((p, p));
            let mut score = Array1::<f64>::zeros(p);
            for r in 0..x.nrows() {
                let w = mu[r] * (1.0 - mu[r]);
                for a in 0..p {
                    score[a] += x[[r, a]] * (y[r] - mu[r]);
                    for b in 0..p {
                        info[[a, b]] += w * x[[r, a]] * x[[r, b]];
                    }
                }
            }
            let delta = oracle_solve(&info, &score);
            let change: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            beta = &beta + &delta;
            if change < 1e-12 {
                break;
            }
        }
        beta
    }

    #[test]
    fn independence_matrix_is_identity() {
        let c = correlation_matrix(&WorkingCorrelation::independence(), 3).unwrap();
        assert_eq!(c, Array2::eye(3));
    }

    #[test]
    fn exchangeable_matrix_fills_off_diagonals() {
        let corr = WorkingCorrelation {
            kind: CorrelationKind::Exchangeable,
            rho: vec![0.5],
        };
        let c = correlation_matrix(&corr, 3).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let want = if j == k { 1.0 } else { 0.5 };
                assert_abs_diff_eq!(c[[j, k]], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn ar1_matrix_decays_geometrically() {
        let corr = WorkingCorrelation {
            kind: CorrelationKind::Ar1,
            rho: vec![0.5],
        };
        let c = correlation_matrix(&corr, 3).unwrap();
        assert_abs_diff_eq!(c[[0, 1]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[0, 2]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[1, 2]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_definite_structure_is_rejected() {
        let corr = WorkingCorrelation {
            kind: CorrelationKind::Exchangeable,
            rho: vec![-0.6],
        };
        assert!(matches!(
            correlation_matrix(&corr, 3),
            Err(WgeeError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn unstructured_matrix_uses_pair_order() {
        let corr = WorkingCorrelation {
            kind: CorrelationKind::Unstructured,
            rho: vec![0.1, 0.2, 0.3],
        };
        let c = correlation_matrix(&corr, 3).unwrap();
        assert_abs_diff_eq!(c[[0, 1]], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[0, 2]], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c[[1, 2]], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn dispersion_of_unit_residuals_is_nt_over_nt_minus_p() {
        let resid = Array2::<f64>::ones((4, 3));
        let ipw = Array2::<f64>::ones((4, 3));
        let phi = estimate_dispersion(&resid, &ipw, 2).unwrap();
        assert_abs_diff_eq!(phi, 12.0 / 10.0, epsilon = 1e-14);
    }

    #[test]
    fn dispersion_hand_example() {
        // n = 2, T = 2, p = 1, residuals (1,1) and (1,-1): phi = 4/3.
        let resid = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let ipw = Array2::<f64>::ones((2, 2));
        let phi = estimate_dispersion(&resid, &ipw, 1).unwrap();
        assert_abs_diff_eq!(phi, 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn dispersion_requires_nt_above_p() {
        let resid = Array2::<f64>::ones((1, 2));
        let ipw = Array2::<f64>::ones((1, 2));
        assert!(estimate_dispersion(&resid, &ipw, 2).is_err());
    }

    #[test]
    fn rho_hand_example_is_zero() {
        // n = 2, p = 0, phi = 1, T = 2, residual pairs (1,1) and (1,-1).
        let resid = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let ipw = Array2::<f64>::ones((2, 2));
        let rho = estimate_rho(&resid, &ipw, CorrelationKind::Exchangeable, 0, 1.0).unwrap();
        assert_abs_diff_eq!(rho[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn perfectly_correlated_residuals_clip_at_bound() {
        let n = 40;
        let resid = Array2::from_shape_fn((n, 3), |(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 });
        let ipw = Array2::<f64>::ones((n, 3));
        let rho = estimate_rho(&resid, &ipw, CorrelationKind::Exchangeable, 0, 1.0).unwrap();
        assert_abs_diff_eq!(rho[0], 0.99, epsilon = 1e-14);
    }

    #[test]
    fn no_observed_pairs_is_an_error() {
        // Everyone drops out right after baseline: no lag pairs observed.
        let resid = Array2::<f64>::ones((5, 3));
        let ipw = Array2::from_shape_fn((5, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        assert!(matches!(
            estimate_rho(&resid, &ipw, CorrelationKind::Ar1, 0, 1.0),
            Err(WgeeError::NoObservedPairs(1))
        ));
    }

    #[test]
    fn stationary_rho_solves_the_stationary_moment_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 30;
        let t = 4;
        let p = 2;
        let resid = Array2::from_shape_fn((n, t), |_| rng.random_range(-1.0..1.0f64));
        let ipw = Array2::from_shape_fn((n, t), |(_, j)| if j == 3 { 1.25 } else { 1.0 });
        let phi = 0.8;
        let rho = estimate_rho(&resid, &ipw, CorrelationKind::Stationary, p, phi).unwrap();
        for m in 1..t {
            let mut u_total = 0.0;
            for i in 0..n {
                for j in 0..(t - m) {
                    u_total += ipw[[i, j + m]] * resid[[i, j]] * resid[[i, j + m]];
                }
            }
            let h = rho[m - 1] * ((t - m) as f64 - p as f64 / n as f64);
            assert_abs_diff_eq!(u_total - n as f64 * h * phi, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn gaussian_independence_fit_matches_ols_oracle() {
        for seed in 0..4u64 {
            let ds = random_gaussian_instance(100 + seed, 30, 3, 2);
            let spec = MeanModelSpec::full(2);
            let dropout = DropoutFit::no_dropout(&ds);
            let fit = wgee_fit(&ds, &spec, CorrelationKind::Independence, &dropout).unwrap();
            let (x, y) = stack_rows(&ds, &spec);
            let oracle = ols_oracle(&x, &y);
            for c in 0..spec.len() {
                assert_abs_diff_eq!(fit.beta[c], oracle[c], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn binary_independence_fit_matches_irls_oracle() {
        for seed in 0..4u64 {
            let ds = random_binary_instance(200 + seed, 40, 3, 2);
            let spec = MeanModelSpec::full(2);
            let dropout = DropoutFit::no_dropout(&ds);
            let fit = wgee_fit(&ds, &spec, CorrelationKind::Independence, &dropout).unwrap();
            let (x, y) = stack_rows(&ds, &spec);
            let oracle = irls_logistic_oracle(&x, &y);
            for c in 0..spec.len() {
                assert_abs_diff_eq!(fit.beta[c], oracle[c], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn estimating_equation_vanishes_at_the_fit() {
        let ds = random_gaussian_instance(42, 25, 3, 2);
        let spec = MeanModelSpec::full(2);
        let dropout = DropoutFit::no_dropout(&ds);
        let fit = wgee_fit(&ds, &spec, CorrelationKind::Exchangeable, &dropout).unwrap();
        let designs = design_matrices(&ds, &spec).unwrap();
        let c = correlation_matrix(&fit.corr, ds.t()).unwrap();
        let c_inv = crate::linalg::inv_spd(c.view()).unwrap();
        let state = MomentState {
            phi: fit.phi,
            corr: fit.corr.clone(),
            c_inv,
        };
        let (g, _) = assemble_system(&ds, &designs, &fit.beta, &fit.mu_hat, &state, &dropout.ipw);
        let norm = crate::linalg::norm2(g.view());
        let bound = 1e-6 * (1.0 + crate::linalg::norm2(fit.beta.view()));
        assert!(norm <= bound, "residual equation norm {norm} > {bound}");
    }

    #[test]
    fn fit_is_invariant_to_subject_reordering() {
        let ds = random_gaussian_instance(11, 20, 3, 2);
        let perm: Vec<usize> = (0..ds.n()).rev().collect();
        let ds_rev = ds.reordered(&perm);
        let spec = MeanModelSpec::full(2);
        let fit = wgee_fit(&ds, &spec, CorrelationKind::Ar1, &DropoutFit::no_dropout(&ds)).unwrap();
        let fit_rev = wgee_fit(
            &ds_rev,
            &spec,
            CorrelationKind::Ar1,
            &DropoutFit::no_dropout(&ds_rev),
        )
        .unwrap();
        for c in 0..spec.len() {
            assert_abs_diff_eq!(fit.beta[c], fit_rev.beta[c], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(fit.corr.rho[0], fit_rev.corr.rho[0], epsilon = 1e-10);
    }

    #[test]
    fn independence_fit_carries_no_correlation_parameters() {
        let ds = random_gaussian_instance(3, 15, 3, 1);
        let fit = wgee_fit(
            &ds,
            &MeanModelSpec::full(1),
            CorrelationKind::Independence,
            &DropoutFit::no_dropout(&ds),
        )
        .unwrap();
        assert!(fit.corr.rho.is_empty());
        assert_eq!(fit.corr.kind, CorrelationKind::Independence);
    }

    #[test]
    fn binary_family_fixes_dispersion_at_one() {
        let ds = random_binary_instance(5, 30, 3, 1);
        let fit = wgee_fit(
            &ds,
            &MeanModelSpec::full(1),
            CorrelationKind::Exchangeable,
            &DropoutFit::no_dropout(&ds),
        )
        .unwrap();
        assert_eq!(fit.phi, 1.0);
    }

    #[test]
    fn collinear_design_reports_singular_system() {
        let base = random_gaussian_instance(8, 20, 3, 2);
        let mut x = base.x().clone();
        for i in 0..base.n() {
            for j in 0..base.t() {
                x[[i, j, 2]] = x[[i, j, 1]];
            }
        }
        let ds = LongitudinalDataset::from_parts(
            base.ids().to_vec(),
            base.family(),
            base.y().clone(),
            base.observed().clone(),
            x,
            base.x_names().to_vec(),
            base.h().clone(),
            base.h_names().to_vec(),
        )
        .unwrap();
        let err = wgee_fit(
            &ds,
            &MeanModelSpec::full(2),
            CorrelationKind::Independence,
            &DropoutFit::no_dropout(&ds),
        )
        .unwrap_err();
        assert!(matches!(err, WgeeError::SingularSystem));
    }

    fn ols_sandwich_oracle(
        designs: &[Array2<f64>],
        y: &Array2<f64>,
        beta: &Array1<f64>,
    ) -> Array2<f64> {
        // Cluster-robust OLS sandwich: (X'X)^{-1} (sum X_i' r_i r_i' X_i) (X'X)^{-1}
        let p = beta.len();
        let mut bread = Array2::<f64>::zeros((p, p));
        let mut meat = Array2::<f64>::zeros((p, p));
        for (i, x_i) in designs.iter().enumerate() {
            bread = &bread + &x_i.t().dot(x_i);
            let r_i = &y.row(i).to_owned() - &x_i.dot(beta);
            let s_i = x_i.t().dot(&r_i);
            for a in 0..p {
                for b in 0..p {
                    meat[[a, b]] += s_i[a] * s_i[b];
                }
            }
        }
        let mut bread_inv = Array2::<f64>::zeros((p, p));
        for c in 0..p {
            let mut unit = Array1::<f64>::zeros(p);
            unit[c] = 1.0;
            let col = oracle_solve(&bread, &unit);
            for r in 0..p {
                bread_inv[[r, c]] = col[r];
            }
        }
        bread_inv.dot(&meat).dot(&bread_inv)
    }

    #[test]
    fn sandwich_matches_ols_oracle_on_complete_data() {
        let ds = random_gaussian_instance(77, 30, 3, 2);
        let spec = MeanModelSpec::full(2);
        let dropout = DropoutFit::no_dropout(&ds);
        let fit = wgee_fit(&ds, &spec, CorrelationKind::Independence, &dropout).unwrap();
        let cov = sandwich_variance(&ds, &fit, &dropout).unwrap();
        let designs = design_matrices(&ds, &spec).unwrap();
        let oracle = ols_sandwich_oracle(&designs, ds.y(), &fit.beta);
        for a in 0..spec.len() {
            for b in 0..spec.len() {
                assert_abs_diff_eq!(cov[[a, b]], oracle[[a, b]], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn duplicating_every_subject_halves_the_sandwich() {
        let ds = random_gaussian_instance(13, 20, 3, 1);
        let spec = MeanModelSpec::full(1);
        let dropout = DropoutFit::no_dropout(&ds);
        let fit = wgee_fit(&ds, &spec, CorrelationKind::Independence, &dropout).unwrap();
        let cov = sandwich_variance(&ds, &fit, &dropout).unwrap();

        let perm: Vec<usize> = (0..ds.n()).chain(0..ds.n()).collect();
        let doubled = ds.reordered(&perm);
        let dropout2 = DropoutFit::no_dropout(&doubled);
        let fit2 = wgee_fit(&doubled, &spec, CorrelationKind::Independence, &dropout2).unwrap();
        let cov2 = sandwich_variance(&doubled, &fit2, &dropout2).unwrap();
        for a in 0..spec.len() {
            for b in 0..spec.len() {
                assert_abs_diff_eq!(cov2[[a, b]], cov[[a, b]] / 2.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn single_subject_sandwich_is_rank_deficient() {
        let ds = random_gaussian_instance(1, 1, 3, 1);
        let spec = MeanModelSpec::full(1);
        let dropout = DropoutFit::no_dropout(&ds);
        if let Ok(fit) = wgee_fit(&ds, &spec, CorrelationKind::Independence, &dropout) {
            assert!(matches!(
                sandwich_variance(&ds, &fit, &dropout),
                Err(WgeeError::RankDeficient { .. })
            ));
        }
    }

    #[test]
    fn correlation_kind_round_trips_through_strings() {
        for kind in [
            CorrelationKind::Independence,
            CorrelationKind::Exchangeable,
            CorrelationKind::Ar1,
            CorrelationKind::Stationary,
            CorrelationKind::Unstructured,
        ] {
            let parsed: CorrelationKind = kind.to_string().parse().unwrap();
            assert_eq!(parsed, kind);
        }
    }

    #[test]
    fn pair_index_enumerates_upper_triangle() {
        assert_eq!(pair_index(0, 1, 4), 0);
        assert_eq!(pair_index(0, 2, 4), 1);
        assert_eq!(pair_index(0, 3, 4), 2);
        assert_eq!(pair_index(1, 2, 4), 3);
        assert_eq!(pair_index(1, 3, 4), 4);
        assert_eq!(pair_index(2, 3, 4), 5);
    }

    #[test]
    fn baseline_only_subject_is_handled_consistently() {
        // A subject observed only at baseline contributes through its first
        // occasion alone; the solved equations still vanish.
        let base = random_gaussian_instance(21, 16, 3, 1);
        let mut y = base.y().clone();
        let mut observed = base.observed().clone();
        let n = base.n();
        for j in 1..base.t() {
            observed[[n - 1, j]] = false;
            y[[n - 1, j]] = f64::NAN;
        }
        let truncated = LongitudinalDataset::from_parts(
            base.ids().to_vec(),
            base.family(),
            y,
            observed,
            base.x().clone(),
            base.x_names().to_vec(),
            base.h().clone(),
            base.h_names().to_vec(),
        )
        .unwrap();
        let dropout = DropoutFit::no_dropout(&truncated);
        let spec = MeanModelSpec::full(1);
        let fit = wgee_fit(&truncated, &spec, CorrelationKind::Exchangeable, &dropout).unwrap();
        let designs = design_matrices(&truncated, &spec).unwrap();
        let c = correlation_matrix(&fit.corr, truncated.t()).unwrap();
        let c_inv = crate::linalg::inv_spd(c.view()).unwrap();
        let state = MomentState {
            phi: fit.phi,
            corr: fit.corr.clone(),
            c_inv,
        };
        let (g, _) = assemble_system(
            &truncated,
            &designs,
            &fit.beta,
            &fit.mu_hat,
            &state,
            &dropout.ipw,
        );
        let norm = crate::linalg::norm2(g.view());
        assert!(norm <= 1e-6 * (1.0 + crate::linalg::norm2(fit.beta.view())));
    }
}
