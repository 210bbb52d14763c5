//! Candidate enumeration and joint criterion evaluation.
//!
//! `select` fits the dropout model once, fits every candidate (mean model,
//! correlation structure) pair by WGEE, evaluates JEAIC/JEBIC/MLIC/QICWr, and
//! reports the per-criterion argmin. Candidate evaluations are independent
//! and run in parallel; the assembled table is deterministic regardless of
//! thread count because rows are collected in candidate order.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{mlic, qicw_r};
use crate::data::{DataError, LongitudinalDataset, MeanModelSpec};
use crate::dropout::{fit_dropout, hazard_design, DropoutError, DropoutFit, HazardSpec};
use crate::elcrit::{build_full_ee, jeaic_jebic, p_tilde, solve_lagrange, ElStatus};
use crate::wgee::{wgee_fit, CorrelationKind, WgeeError};

/// Hard cap on the all-subsets policy.
const MAX_SUBSETS: usize = 64;

pub const CRITERIA: [&str; 4] = ["JEAIC", "JEBIC", "MLIC", "QICWr"];

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dropout model fit failed: {0}")]
    Dropout(#[from] DropoutError),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("duplicate candidate: {0}")]
    DuplicateCandidate(String),
    #[error("unstructured working correlation is not selectable (not nested in the stationary block)")]
    UnstructuredCandidate,
    #[error("all-subsets policy would enumerate {0} mean models (cap {MAX_SUBSETS}); list candidates explicitly")]
    TooManySubsets(usize),
}

/// A mean-model / correlation-structure pair up for selection.
#[derive(Debug, Clone)]
pub struct CandidateModel {
    pub spec: MeanModelSpec,
    pub structure: CorrelationKind,
    pub label: String,
}

impl CandidateModel {
    pub fn new(
        spec: MeanModelSpec,
        structure: CorrelationKind,
        x_names: &[String],
    ) -> Result<Self, SelectionError> {
        if structure == CorrelationKind::Unstructured {
            return Err(SelectionError::UnstructuredCandidate);
        }
        let label = spec.label(x_names);
        Ok(Self {
            spec,
            structure,
            label,
        })
    }
}

/// How to build the mean-model side of the candidate set.
#[derive(Debug, Clone)]
pub enum CandidatePolicy {
    Explicit(Vec<MeanModelSpec>),
    /// Every covariate subset, always including the intercept.
    AllSubsetsWithIntercept,
}

/// Expands a policy into candidates in canonical order: mean models sorted by
/// their covariate index sets, then structures in IND < EXC < AR1 < STAT
/// order.
pub fn enumerate_candidates(
    ds: &LongitudinalDataset,
    policy: &CandidatePolicy,
    structures: &[CorrelationKind],
) -> Result<Vec<CandidateModel>, SelectionError> {
    let mut specs = match policy {
        CandidatePolicy::Explicit(list) => {
            for (i, a) in list.iter().enumerate() {
                a.validate_against(ds)?;
                for b in list.iter().skip(i + 1) {
                    if a == b {
                        return Err(SelectionError::DuplicateCandidate(a.label(ds.x_names())));
                    }
                }
            }
            list.clone()
        }
        CandidatePolicy::AllSubsetsWithIntercept => {
            let k = ds.p_full() - 1;
            let count = 1usize << k;
            if count > MAX_SUBSETS {
                return Err(SelectionError::TooManySubsets(count));
            }
            let mut out = Vec::with_capacity(count);
            for mask in 0..count {
                let indices: Vec<usize> = (1..=k).filter(|&c| mask & (1 << (c - 1)) != 0).collect();
                out.push(MeanModelSpec::new(true, indices).expect("valid subset"));
            }
            out
        }
    };
    if specs.is_empty() || structures.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    specs.sort_by_cached_key(|s| s.sort_key());
    let mut kinds = structures.to_vec();
    kinds.sort();
    kinds.dedup();
    let mut out = Vec::with_capacity(specs.len() * kinds.len());
    for spec in &specs {
        for &kind in &kinds {
            out.push(CandidateModel::new(spec.clone(), kind, ds.x_names())?);
        }
    }
    Ok(out)
}

/// One evaluated candidate.
#[derive(Debug, Clone)]
pub struct CriterionRow {
    pub label: String,
    pub structure: CorrelationKind,
    pub p_tilde: usize,
    /// JEAIC, JEBIC, MLIC, QICWr in [`CRITERIA`] order.
    pub values: [f64; 4],
    pub converged: bool,
    pub el_solved: bool,
    /// Human-readable diagnostics for failures; empty when clean.
    pub note: String,
}

/// Criterion table over all candidates with per-criterion argmins.
#[derive(Debug, Clone)]
pub struct CriterionTable {
    pub rows: Vec<CriterionRow>,
    /// Row index of the winner per criterion.
    pub argmin: [usize; 4],
    /// Whether the winning value was tied with another row.
    pub tied: [bool; 4],
}

/// Argmin with deterministic tie-breaking: exact value ties go to the model
/// with fewer parameters, then to the earlier row.
pub(crate) fn argmin_with_ties(values: &[f64], p_tildes: &[usize]) -> (usize, bool) {
    let mut best = 0usize;
    let mut tied = false;
    for i in 1..values.len() {
        if values[i] < values[best] {
            best = i;
            tied = false;
        } else if values[i] == values[best] && values[i].is_finite() {
            tied = true;
            if p_tildes[i] < p_tildes[best] {
                best = i;
            }
        }
    }
    (best, tied)
}

/// Runs the full selection pipeline. The dropout model is fitted once (data
/// without any dropout gets unit weights and an empty hazard model); each
/// candidate failure is contained to its row.
pub fn select(
    ds: &LongitudinalDataset,
    candidates: &[CandidateModel],
    hazard: &HazardSpec,
) -> Result<CriterionTable, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    let dropout = if ds.is_complete() {
        DropoutFit::no_dropout(ds)
    } else {
        fit_dropout(ds, &hazard_design(ds, hazard))?
    };
    Ok(select_with_dropout(ds, candidates, &dropout))
}

/// Largest mean model across a candidate set: the union of all covariate
/// sets, used as the reference for the full estimating function and MLIC.
pub fn full_union_spec(candidates: &[CandidateModel]) -> MeanModelSpec {
    let mut union: Vec<usize> = Vec::new();
    let mut intercept = false;
    for cand in candidates {
        intercept |= cand.spec.includes_intercept();
        for &ix in cand.spec.indices() {
            if !union.contains(&ix) {
                union.push(ix);
            }
        }
    }
    union.sort_unstable();
    MeanModelSpec::new(intercept, union).expect("union of valid specs")
}

/// Selection against an already-fitted dropout model.
pub fn select_with_dropout(
    ds: &LongitudinalDataset,
    candidates: &[CandidateModel],
    dropout: &DropoutFit,
) -> CriterionTable {
    let full_spec = full_union_spec(candidates);

    // Reference fits of the largest mean model, one per structure in play.
    let mut kinds: Vec<CorrelationKind> = candidates.iter().map(|c| c.structure).collect();
    kinds.sort();
    kinds.dedup();
    let full_fits: Vec<(CorrelationKind, Result<crate::wgee::WgeeFit, WgeeError>)> = kinds
        .par_iter()
        .map(|&kind| (kind, wgee_fit(ds, &full_spec, kind, dropout)))
        .collect();

    let t = ds.t();
    let q = dropout.q();
    let n = ds.n();
    let rows: Vec<CriterionRow> = candidates
        .par_iter()
        .map(|cand| {
            let pt = p_tilde(cand.spec.len(), cand.structure, t, q);
            let mut row = CriterionRow {
                label: cand.label.clone(),
                structure: cand.structure,
                p_tilde: pt,
                values: [f64::INFINITY; 4],
                converged: false,
                el_solved: false,
                note: String::new(),
            };
            let fit = match wgee_fit(ds, &cand.spec, cand.structure, dropout) {
                Ok(f) => f,
                Err(e) => {
                    row.note = format!("fit failed: {e}");
                    return row;
                }
            };
            row.converged = fit.converged;

            match build_full_ee(ds, &full_spec, &fit, dropout) {
                Ok(g) => {
                    let el = solve_lagrange(&g);
                    row.el_solved = el.status == ElStatus::Solved;
                    let (jeaic, jebic) = jeaic_jebic(el.neg2logr, pt, n);
                    row.values[0] = jeaic;
                    row.values[1] = jebic;
                    if el.status == ElStatus::Infeasible {
                        push_note(&mut row.note, "EL infeasible");
                    }
                }
                Err(e) => push_note(&mut row.note, &format!("EL failed: {e}")),
            }

            let full_fit = full_fits
                .iter()
                .find(|(k, _)| *k == cand.structure)
                .map(|(_, f)| f)
                .expect("structure present");
            match full_fit {
                Ok(full) => match mlic(ds, &fit, full, dropout) {
                    Ok(parts) => row.values[2] = parts.value(),
                    Err(e) => push_note(&mut row.note, &format!("MLIC failed: {e}")),
                },
                Err(e) => push_note(&mut row.note, &format!("MLIC reference fit failed: {e}")),
            }

            match qicw_r(ds, &fit, dropout) {
                Ok(parts) => row.values[3] = parts.value(),
                Err(e) => push_note(&mut row.note, &format!("QICWr failed: {e}")),
            }
            row
        })
        .collect();

    let p_tildes: Vec<usize> = rows.iter().map(|r| r.p_tilde).collect();
    let mut argmin = [0usize; 4];
    let mut tied = [false; 4];
    for c in 0..4 {
        let values: Vec<f64> = rows.iter().map(|r| r.values[c]).collect();
        let (best, tie) = argmin_with_ties(&values, &p_tildes);
        argmin[c] = best;
        tied[c] = tie;
    }
    CriterionTable { rows, argmin, tied }
}

fn push_note(note: &mut String, msg: &str) {
    if !note.is_empty() {
        note.push_str("; ");
    }
    note.push_str(msg);
}

impl CriterionTable {
    /// Winner row index for a named criterion.
    pub fn argmin_of(&self, criterion: &str) -> Option<usize> {
        CRITERIA
            .iter()
            .position(|c| *c == criterion)
            .map(|c| self.argmin[c])
    }

    /// Tab-separated rendering: one row per candidate plus an argmin footer.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "mean_model\tstructure\tp_tilde\tJEAIC\tJEBIC\tMLIC\tQICWr\tconverged\tel_solved\tnote\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                row.label,
                row.structure,
                row.p_tilde,
                fmt_value(row.values[0]),
                fmt_value(row.values[1]),
                fmt_value(row.values[2]),
                fmt_value(row.values[3]),
                row.converged,
                row.el_solved,
                row.note,
            ));
        }
        for (c, name) in CRITERIA.iter().enumerate() {
            let best = &self.rows[self.argmin[c]];
            let qualifier = if !best.values[c].is_finite() {
                " [no finite value]"
            } else if self.tied[c] {
                " [tied]"
            } else {
                ""
            };
            out.push_str(&format!(
                "# argmin {}\t{} ({}){}\n",
                name, best.label, best.structure, qualifier
            ));
        }
        out
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".to_string()
    }
}

impl fmt::Display for CriterionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(4)
            .max(10);
        let header = "mean model";
        writeln!(
            f,
            "{header:<label_w$}  {:>5}  {:>3}  {:>12}  {:>12}  {:>12}  {:>12}  flags",
            "corr", "p~", "JEAIC", "JEBIC", "MLIC", "QICWr"
        )?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut flags = String::new();
            for (c, name) in CRITERIA.iter().enumerate() {
                if self.argmin[c] == i && row.values[c].is_finite() {
                    if !flags.is_empty() {
                        flags.push(' ');
                    }
                    flags.push('<');
                    flags.push_str(name);
                    if self.tied[c] {
                        flags.push_str(" tied");
                    }
                }
            }
            if !row.note.is_empty() {
                if !flags.is_empty() {
                    flags.push(' ');
                }
                flags.push_str(&format!("[{}]", row.note));
            }
            writeln!(
                f,
                "{:<label_w$}  {:>5}  {:>3}  {:>12}  {:>12}  {:>12}  {:>12}  {}",
                row.label,
                row.structure.to_string(),
                row.p_tilde,
                fmt_value(row.values[0]),
                fmt_value(row.values[1]),
                fmt_value(row.values[2]),
                fmt_value(row.values[3]),
                flags
            )?;
        }
        Ok(())
    }
}
