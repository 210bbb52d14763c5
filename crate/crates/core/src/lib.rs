//! Weighted generalized estimating equations (WGEE) for longitudinal data with
//! monotone dropout, plus joint selection of the marginal mean structure and
//! the working correlation structure.
//!
//! The crate is organized around a pipeline:
//!
//! 1. [`data`] — long-format ingestion and the balanced-panel dataset type.
//! 2. [`dropout`] — partial-likelihood fit of the dropout hazard, producing
//!    inverse-probability observation weights.
//! 3. [`wgee`] — weighted GEE fits for a candidate mean model paired with a
//!    working correlation structure.
//! 4. [`elcrit`] — the empirical-likelihood criteria JEAIC and JEBIC built on
//!    a stacked full estimating function evaluated at plug-in WGEE estimates.
//! 5. [`baselines`] — the comparison criteria MLIC and QICWr.
//! 6. [`selection`] — candidate enumeration and the per-criterion argmin table.
//! 7. [`simlab`] — synthetic data generators and a Monte Carlo harness for
//!    selection-rate experiments.
//!
//! Everything is deterministic: fits are pure functions of their inputs, and
//! simulation replicates draw from per-replicate ChaCha streams, so results
//! are identical across runs and across parallelism degrees.

// Index-based loops over subjects/occasions mirror the matrix notation and
// often drive several arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod bivnorm;
pub mod data;
pub mod dropout;
pub mod elcrit;
mod linalg;
pub mod selection;
pub mod simlab;
pub mod wgee;
