//! Comparison criteria: the missing longitudinal information criterion (MLIC)
//! and the weighted quasi-likelihood criterion QICWr.
//!
//! MLIC is a weighted quadratic loss plus a trace penalty that accounts for
//! estimating both the mean coefficients and the dropout model:
//!
//! ```text
//! MLIC = sum_i (Y_i - mu_i)' W_i (Y_i - mu_i) + 2 tr(E_n^{-1} J_n)
//! E_n  = sum_i D_i' V_i^{-1} W_i D_i
//! J_n  = sum_i (D_i' V_i^{-1} eps_i - G_i) (D_i' eps_i)'
//! eps_i = W_i (Y_i - mu0_i),   G_i = (sum Q s')(sum s s')^{-1} s_i
//! ```
//!
//! with mu0 the fitted means of the largest candidate mean model and s_i the
//! dropout-score contributions. QICWr is the weighted independence quasi-
//! likelihood with penalty `2 tr(Phi_I V_w)`, V_w being the sandwich
//! covariance of the candidate fit.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::data::{design_matrices, DataError, LongitudinalDataset, OutcomeFamily};
use crate::dropout::DropoutFit;
use crate::linalg;
use crate::wgee::{correlation_matrix, mean_jacobian, sandwich_variance, v_inverse, WgeeError, WgeeFit};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Wgee(#[from] WgeeError),
    #[error("candidate mean model is not nested in the reference model")]
    NotNested,
    #[error("singular dropout score cross-product")]
    SingularScoreMatrix,
    #[error("singular weighted information matrix in the trace penalty")]
    SingularInformation,
}

/// MLIC decomposition.
#[derive(Debug, Clone)]
pub struct MlicParts {
    pub loss: f64,
    pub penalty: f64,
    pub e_n: Array2<f64>,
    pub j_n: Array2<f64>,
    /// Reference means from the largest candidate mean model.
    pub mu0: Array2<f64>,
}

impl MlicParts {
    pub fn value(&self) -> f64 {
        self.loss + self.penalty
    }
}

/// QICWr decomposition.
#[derive(Debug, Clone)]
pub struct QicwParts {
    /// Weighted independence log quasi-likelihood at the fit.
    pub quasi_loglik: f64,
    pub penalty: f64,
    pub phi_i: Array2<f64>,
    pub v_w: Array2<f64>,
}

impl QicwParts {
    pub fn value(&self) -> f64 {
        -2.0 * self.quasi_loglik + self.penalty
    }
}

/// MLIC for a candidate fit, with reference means from `full` (the largest
/// mean model, conventionally fitted under the candidate's correlation
/// structure).
pub fn mlic(
    ds: &LongitudinalDataset,
    candidate: &WgeeFit,
    full: &WgeeFit,
    dropout: &DropoutFit,
) -> Result<MlicParts, BaselineError> {
    if !candidate.spec.is_nested_in(&full.spec) {
        return Err(BaselineError::NotNested);
    }
    let n = ds.n();
    let t = ds.t();
    let p = candidate.p();
    let q = dropout.q();
    let family = ds.family();
    let designs = design_matrices(ds, &candidate.spec)?;
    let c = correlation_matrix(&candidate.corr, t)?;
    let c_inv = linalg::inv_spd(c.view()).ok_or(WgeeError::NotPositiveDefinite)?;

    let mut loss = 0.0;
    let mut e_n = Array2::<f64>::zeros((p, p));
    // Per-subject pieces reused in the J_n assembly.
    let mut dve: Vec<Array1<f64>> = Vec::with_capacity(n); // D' V^{-1} eps_i
    let mut dte: Vec<Array1<f64>> = Vec::with_capacity(n); // D' eps_i
    let mut q_i: Vec<Array1<f64>> = Vec::with_capacity(n); // D' V^{-1} W (Y - mu_hat)
    for i in 0..n {
        let mu_row: Vec<f64> = (0..t).map(|j| candidate.mu_hat[[i, j]]).collect();
        let vinv = v_inverse(family, &mu_row, &c_inv, candidate.phi);
        let d = mean_jacobian(family, &designs[i], &candidate.beta);
        let m = d.t().dot(&vinv); // p x t

        // eps_i = W_i (Y_i - mu0_i); raw residual, weighted, masked.
        let eps: Vec<f64> = (0..t)
            .map(|j| dropout.ipw[[i, j]] * (ds.y_or_zero(i, j) - full.mu_hat[[i, j]]))
            .collect();
        let mut dve_i = Array1::<f64>::zeros(p);
        let mut dte_i = Array1::<f64>::zeros(p);
        let mut qi = Array1::<f64>::zeros(p);
        for j in 0..t {
            let w = dropout.ipw[[i, j]];
            let raw = ds.y_or_zero(i, j) - candidate.mu_hat[[i, j]];
            loss += w * raw * raw;
            let wr = w * raw;
            for a in 0..p {
                dve_i[a] += m[[a, j]] * eps[j];
                dte_i[a] += d[[j, a]] * eps[j];
                qi[a] += m[[a, j]] * wr;
                if w != 0.0 {
                    let maj = m[[a, j]] * w;
                    for b in 0..p {
                        e_n[[a, b]] += maj * d[[j, b]];
                    }
                }
            }
        }
        dve.push(dve_i);
        dte.push(dte_i);
        q_i.push(qi);
    }

    // G_i = (sum Q s')(sum s s')^{-1} s_i corrects for dropout estimation;
    // with no dropout model (q = 0) the correction vanishes.
    let g_i: Vec<Array1<f64>> = if q == 0 {
        vec![Array1::zeros(p); n]
    } else {
        let mut qs = Array2::<f64>::zeros((p, q));
        let mut ss = Array2::<f64>::zeros((q, q));
        for i in 0..n {
            for a in 0..p {
                for b in 0..q {
                    qs[[a, b]] += q_i[i][a] * dropout.scores[[i, b]];
                }
            }
            for a in 0..q {
                for b in 0..q {
                    ss[[a, b]] += dropout.scores[[i, a]] * dropout.scores[[i, b]];
                }
            }
        }
        let ss_inv = linalg::inv_spd(ss.view()).ok_or(BaselineError::SingularScoreMatrix)?;
        let proj = qs.dot(&ss_inv); // p x q
        (0..n)
            .map(|i| proj.dot(&dropout.scores.row(i).to_owned()))
            .collect()
    };

    let mut j_n = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        for a in 0..p {
            let lead = dve[i][a] - g_i[i][a];
            for b in 0..p {
                j_n[[a, b]] += lead * dte[i][b];
            }
        }
    }

    let e_inv_j =
        linalg::solve_spd_mat(e_n.view(), j_n.view()).ok_or(BaselineError::SingularInformation)?;
    let penalty = 2.0 * (0..p).map(|a| e_inv_j[[a, a]]).sum::<f64>();

    Ok(MlicParts {
        loss,
        penalty,
        e_n,
        j_n,
        mu0: full.mu_hat.clone(),
    })
}

/// QICWr for a candidate fit: minus twice the weighted independence quasi-
/// likelihood plus `2 tr(Phi_I V_w)`.
pub fn qicw_r(
    ds: &LongitudinalDataset,
    candidate: &WgeeFit,
    dropout: &DropoutFit,
) -> Result<QicwParts, BaselineError> {
    let n = ds.n();
    let t = ds.t();
    let p = candidate.p();
    let family = ds.family();
    let designs = design_matrices(ds, &candidate.spec)?;

    let mut quasi = 0.0;
    let mut phi_i = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        for j in 0..t {
            let w = dropout.ipw[[i, j]];
            if w == 0.0 {
                continue;
            }
            let mu = candidate.mu_hat[[i, j]];
            quasi += w * family.quasi_loglik(ds.y()[[i, j]], mu);
            // Negative Hessian of the weighted independence quasi-likelihood.
            let curv = match family {
                OutcomeFamily::Binary => family.variance(mu),
                OutcomeFamily::Gaussian => 1.0,
            };
            let wc = w * curv;
            for a in 0..p {
                let xa = designs[i][[j, a]];
                for b in 0..p {
                    phi_i[[a, b]] += wc * xa * designs[i][[j, b]];
                }
            }
        }
    }

    let v_w = match &candidate.robust_cov {
        Some(cov) => cov.clone(),
        None => sandwich_variance(ds, candidate, dropout)?,
    };
    let penalty = 2.0 * linalg::trace_product(phi_i.view(), v_w.view());

    Ok(QicwParts {
        quasi_loglik: quasi,
        penalty,
        phi_i,
        v_w,
    })
}
