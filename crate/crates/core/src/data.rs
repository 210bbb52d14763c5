//! Balanced longitudinal dataset with monotone dropout, long-format CSV
//! ingestion, and per-subject design-matrix construction.
//!
//! Unobserved outcome cells are stored as `NaN` so that any code path that
//! forgets to mask by the observation indicator fails loudly instead of
//! silently using garbage. Occasions are 1-based in every public interface.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("schema line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("subject `{id}` has {got} rows, expected {expected} (balanced panels only)")]
    RaggedSubject {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate occasion {time} for subject `{id}`")]
    DuplicateOccasion { id: String, time: usize },
    #[error("subject `{id}`: occasion indices must cover 1..={t} exactly")]
    BadOccasions { id: String, t: usize },
    #[error("subject `{id}`, occasion {time}: column `{column}` is not numeric: `{value}`")]
    NonNumeric {
        id: String,
        time: usize,
        column: String,
        value: String,
    },
    #[error("subject `{id}`, occasion {time}: column `{column}` is not finite")]
    NonFinite {
        id: String,
        time: usize,
        column: String,
    },
    #[error("subject `{id}`: baseline outcome is missing")]
    BaselineMissing { id: String },
    #[error("subject `{id}`: non-monotone missingness at occasion {occasion}")]
    NonMonotone { id: String, occasion: usize },
    #[error("dataset has no subjects")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("mean model: covariate index {index} out of range (1..={max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("mean model: duplicate covariate index {0}")]
    DuplicateIndex(usize),
    #[error("mean model has no terms")]
    EmptyModel,
}

/// Outcome family with its link. Binary uses the logit link, Gaussian the
/// identity link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeFamily {
    Binary,
    Gaussian,
}

/// Guard for binary means inside variance and log terms.
pub(crate) const MU_EPS: f64 = 1e-10;

impl OutcomeFamily {
    /// Inverse link: mean as a function of the linear predictor.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            OutcomeFamily::Binary => 1.0 / (1.0 + (-eta).exp()),
            OutcomeFamily::Gaussian => eta,
        }
    }

    /// Derivative of the mean with respect to the linear predictor.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            OutcomeFamily::Binary => {
                let mu = self.mean(eta);
                mu * (1.0 - mu)
            }
            OutcomeFamily::Gaussian => 1.0,
        }
    }

    /// Variance function nu(mu); the dispersion factor is carried separately.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            OutcomeFamily::Binary => {
                let m = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                m * (1.0 - m)
            }
            OutcomeFamily::Gaussian => 1.0,
        }
    }

    /// Log quasi-likelihood contribution of one observation.
    pub fn quasi_loglik(self, y: f64, mu: f64) -> f64 {
        match self {
            OutcomeFamily::Binary => {
                let m = mu.clamp(1e-12, 1.0 - 1e-12);
                y * m.ln() + (1.0 - y) * (1.0 - m).ln()
            }
            OutcomeFamily::Gaussian => -0.5 * (y - mu) * (y - mu),
        }
    }

    /// Dispersion is fixed at 1 for binary outcomes and estimated otherwise.
    pub fn fixed_dispersion(self) -> Option<f64> {
        match self {
            OutcomeFamily::Binary => Some(1.0),
            OutcomeFamily::Gaussian => None,
        }
    }
}

impl fmt::Display for OutcomeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeFamily::Binary => write!(f, "binary"),
            OutcomeFamily::Gaussian => write!(f, "gaussian"),
        }
    }
}

/// Balanced longitudinal dataset.
///
/// `y` is n x T with `NaN` at unobserved cells; `observed` is the matching
/// indicator matrix; `x` is n x T x p with the intercept in column 0; `h`
/// holds extra dropout-model covariates (possibly zero columns).
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    ids: Vec<String>,
    family: OutcomeFamily,
    y: Array2<f64>,
    observed: Array2<bool>,
    x: Array3<f64>,
    x_names: Vec<String>,
    h: Array3<f64>,
    h_names: Vec<String>,
}

/// First monotonicity violation for one subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonotoneViolation {
    pub subject: usize,
    pub id: String,
    /// 1-based occasion at which an outcome reappears after a gap.
    pub occasion: usize,
}

/// Checks each indicator row for monotone dropout; reports the first
/// violation per subject. An empty report means the pattern is valid.
pub fn validate_monotone(observed: &Array2<bool>, ids: &[String]) -> Vec<MonotoneViolation> {
    let mut report = Vec::new();
    for (i, row) in observed.rows().into_iter().enumerate() {
        let mut dropped = false;
        for (j, &obs) in row.iter().enumerate() {
            if !obs {
                dropped = true;
            } else if dropped {
                report.push(MonotoneViolation {
                    subject: i,
                    id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                    occasion: j + 1,
                });
                break;
            }
        }
    }
    report
}

impl LongitudinalDataset {
    /// Builds a dataset from raw parts, enforcing every structural invariant:
    /// baseline observed, monotone dropout, finite covariates, finite outcomes
    /// where observed. Unobserved outcome cells are forced to `NaN`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        ids: Vec<String>,
        family: OutcomeFamily,
        mut y: Array2<f64>,
        observed: Array2<bool>,
        x: Array3<f64>,
        x_names: Vec<String>,
        h: Array3<f64>,
        h_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = ids.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let t = y.ncols();
        if y.nrows() != n || observed.dim() != (n, t) {
            return Err(DataError::Dimension(
                "outcome and indicator shapes disagree".into(),
            ));
        }
        if x.dim().0 != n || x.dim().1 != t || x.dim().2 != x_names.len() {
            return Err(DataError::Dimension("covariate array shape".into()));
        }
        if h.dim().0 != n || h.dim().1 != t || h.dim().2 != h_names.len() {
            return Err(DataError::Dimension("dropout covariate array shape".into()));
        }
        for i in 0..n {
            if !observed[[i, 0]] {
                return Err(DataError::BaselineMissing {
                    id: ids[i].clone(),
                });
            }
        }
        if let Some(v) = validate_monotone(&observed, &ids).into_iter().next() {
            return Err(DataError::NonMonotone {
                id: v.id,
                occasion: v.occasion,
            });
        }
        for i in 0..n {
            for j in 0..t {
                if observed[[i, j]] {
                    if !y[[i, j]].is_finite() {
                        return Err(DataError::NonFinite {
                            id: ids[i].clone(),
                            time: j + 1,
                            column: "y".into(),
                        });
                    }
                } else {
                    y[[i, j]] = f64::NAN;
                }
                for (c, name) in x_names.iter().enumerate() {
                    if !x[[i, j, c]].is_finite() {
                        return Err(DataError::NonFinite {
                            id: ids[i].clone(),
                            time: j + 1,
                            column: name.clone(),
                        });
                    }
                }
                for (c, name) in h_names.iter().enumerate() {
                    if !h[[i, j, c]].is_finite() {
                        return Err(DataError::NonFinite {
                            id: ids[i].clone(),
                            time: j + 1,
                            column: name.clone(),
                        });
                    }
                }
            }
        }
        Ok(Self {
            ids,
            family,
            y,
            observed,
            x,
            x_names,
            h,
            h_names,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Occasions per subject.
    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    /// Total covariate columns including the intercept.
    pub fn p_full(&self) -> usize {
        self.x_names.len()
    }

    pub fn family(&self) -> OutcomeFamily {
        self.family
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn observed(&self) -> &Array2<bool> {
        &self.observed
    }

    /// Outcome value with unobserved cells replaced by zero, safe to enter
    /// arithmetic that is subsequently masked by the weight matrix.
    pub fn y_or_zero(&self, i: usize, j: usize) -> f64 {
        if self.observed[[i, j]] {
            self.y[[i, j]]
        } else {
            0.0
        }
    }

    pub fn x(&self) -> &Array3<f64> {
        &self.x
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn h(&self) -> &Array3<f64> {
        &self.h
    }

    pub fn h_names(&self) -> &[String] {
        &self.h_names
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Number of observed occasions for subject `i`; with monotone dropout
    /// this equals the position of the last observed occasion.
    pub fn observed_count(&self, i: usize) -> usize {
        self.observed.row(i).iter().filter(|&&o| o).count()
    }

    /// Builds a new dataset from the given subject indices, which may repeat;
    /// used to check permutation invariance and duplication scaling of fits.
    pub fn reordered(&self, perm: &[usize]) -> Self {
        assert!(perm.iter().all(|&i| i < self.n()));
        let t = self.t();
        let p = self.p_full();
        let q = self.h_names.len();
        let mut y = Array2::zeros((perm.len(), t));
        let mut observed = Array2::from_elem((perm.len(), t), false);
        let mut x = Array3::zeros((perm.len(), t, p));
        let mut h = Array3::zeros((perm.len(), t, q));
        let mut ids = Vec::with_capacity(perm.len());
        for (new_i, &old_i) in perm.iter().enumerate() {
            ids.push(self.ids[old_i].clone());
            for j in 0..t {
                y[[new_i, j]] = self.y[[old_i, j]];
                observed[[new_i, j]] = self.observed[[old_i, j]];
                for c in 0..p {
                    x[[new_i, j, c]] = self.x[[old_i, j, c]];
                }
                for c in 0..q {
                    h[[new_i, j, c]] = self.h[[old_i, j, c]];
                }
            }
        }
        Self {
            ids,
            family: self.family,
            y,
            observed,
            x,
            x_names: self.x_names.clone(),
            h,
            h_names: self.h_names.clone(),
        }
    }
}

/// An ordered subset of the covariate columns defining a candidate marginal
/// mean model. Indices refer to non-intercept columns of the dataset (column
/// 0 is the intercept); the intercept, when included, always comes first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeanModelSpec {
    includes_intercept: bool,
    indices: Vec<usize>,
}

impl MeanModelSpec {
    pub fn new(includes_intercept: bool, indices: Vec<usize>) -> Result<Self, DataError> {
        if !includes_intercept && indices.is_empty() {
            return Err(DataError::EmptyModel);
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0] == w[1] {
                return Err(DataError::DuplicateIndex(w[0]));
            }
        }
        if indices.contains(&0) {
            return Err(DataError::DuplicateIndex(0));
        }
        Ok(Self {
            includes_intercept,
            indices,
        })
    }

    pub fn intercept_only() -> Self {
        Self {
            includes_intercept: true,
            indices: Vec::new(),
        }
    }

    /// Intercept plus every covariate column 1..=k.
    pub fn full(n_covariates: usize) -> Self {
        Self {
            includes_intercept: true,
            indices: (1..=n_covariates).collect(),
        }
    }

    pub fn includes_intercept(&self) -> bool {
        self.includes_intercept
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Number of mean parameters.
    pub fn len(&self) -> usize {
        self.indices.len() + usize::from(self.includes_intercept)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dataset column indices in model order, intercept first when present.
    pub fn columns(&self) -> Vec<usize> {
        let mut cols = Vec::with_capacity(self.len());
        if self.includes_intercept {
            cols.push(0);
        }
        cols.extend_from_slice(&self.indices);
        cols
    }

    pub fn validate_against(&self, ds: &LongitudinalDataset) -> Result<(), DataError> {
        let max = ds.p_full().saturating_sub(1);
        for &ix in &self.indices {
            if ix == 0 || ix > max {
                return Err(DataError::IndexOutOfRange { index: ix, max });
            }
        }
        Ok(())
    }

    pub fn is_nested_in(&self, other: &MeanModelSpec) -> bool {
        (!self.includes_intercept || other.includes_intercept)
            && self.indices.iter().all(|ix| other.indices.contains(ix))
    }

    /// Sort key giving a deterministic candidate order.
    pub fn sort_key(&self) -> (Vec<usize>, bool) {
        let mut ix = self.indices.clone();
        ix.sort_unstable();
        (ix, !self.includes_intercept)
    }

    pub fn label(&self, x_names: &[String]) -> String {
        if self.indices.is_empty() {
            return "1".to_string();
        }
        self.indices
            .iter()
            .map(|&ix| {
                x_names
                    .get(ix)
                    .cloned()
                    .unwrap_or_else(|| format!("x[{ix}]"))
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Per-subject T x p design matrices for a mean model.
pub fn design_matrices(
    ds: &LongitudinalDataset,
    spec: &MeanModelSpec,
) -> Result<Vec<Array2<f64>>, DataError> {
    spec.validate_against(ds)?;
    let cols = spec.columns();
    let t = ds.t();
    let out = (0..ds.n())
        .map(|i| Array2::from_shape_fn((t, cols.len()), |(j, c)| ds.x()[[i, j, cols[c]]]))
        .collect();
    Ok(out)
}

/// Maps CSV header names onto dataset roles. Parsed from `key = value` text
/// with keys `id`, `time`, `y`, `x` (comma list) and `h` (comma list), or
/// inferred from headers by prefix convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    pub id: String,
    pub time: String,
    pub y: String,
    pub x: Vec<String>,
    pub h: Vec<String>,
}

impl ColumnSchema {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut id = None;
        let mut time = None;
        let mut y = None;
        let mut x = Vec::new();
        let mut h = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DataError::Schema {
                    line: lineno + 1,
                    message: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let list = || {
                value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
            };
            match key {
                "id" => id = Some(value.to_string()),
                "time" => time = Some(value.to_string()),
                "y" => y = Some(value.to_string()),
                "x" => x = list(),
                "h" => h = list(),
                other => {
                    return Err(DataError::Schema {
                        line: lineno + 1,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        let missing = |what: &str| DataError::Schema {
            line: 0,
            message: format!("missing required key `{what}`"),
        };
        Ok(Self {
            id: id.ok_or_else(|| missing("id"))?,
            time: time.ok_or_else(|| missing("time"))?,
            y: y.ok_or_else(|| missing("y"))?,
            x,
            h,
        })
    }

    /// Convention-based schema: columns literally named `id`, `time`, `y`,
    /// plus `x*` mean covariates and `h*` dropout covariates in header order.
    pub fn infer(headers: &[String]) -> Result<Self, DataError> {
        let need = |name: &str| -> Result<String, DataError> {
            headers
                .iter()
                .find(|hd| hd.as_str() == name)
                .cloned()
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let x = headers
            .iter()
            .filter(|hd| hd.starts_with('x'))
            .cloned()
            .collect();
        let h = headers
            .iter()
            .filter(|hd| hd.starts_with('h'))
            .cloned()
            .collect();
        Ok(Self {
            id: need("id")?,
            time: need("time")?,
            y: need("y")?,
            x,
            h,
        })
    }
}

/// One occasion as parsed from a CSV row: outcome (empty means missing),
/// mean covariates, dropout covariates.
type OccasionRow = (Option<f64>, Vec<f64>, Vec<f64>);

struct SubjectRows {
    rows: Vec<Option<OccasionRow>>,
    seen: usize,
}

/// Loads a long-format CSV: one row per (subject, occasion), occasions
/// 1-based, empty outcome field meaning unobserved. Every subject must have
/// exactly T rows covering occasions 1..=T once each.
pub fn load_long_csv<R: Read>(
    reader: R,
    schema: &ColumnSchema,
    family: OutcomeFamily,
) -> Result<LongitudinalDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let col = |name: &String| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|hd| hd == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.y)?;
    let x_cols: Vec<usize> = schema.x.iter().map(col).collect::<Result<_, _>>()?;
    let h_cols: Vec<usize> = schema.h.iter().map(col).collect::<Result<_, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut subjects: HashMap<String, SubjectRows> = HashMap::new();
    let mut t_max = 0usize;

    for record in rdr.records() {
        let record = record?;
        let id = record.get(id_col).unwrap_or("").to_string();
        let time_raw = record.get(time_col).unwrap_or("");
        let time: usize = time_raw.parse().map_err(|_| DataError::NonNumeric {
            id: id.clone(),
            time: 0,
            column: schema.time.clone(),
            value: time_raw.to_string(),
        })?;
        if time == 0 {
            return Err(DataError::BadOccasions { id, t: 0 });
        }
        t_max = t_max.max(time);

        let parse_num = |column: &str, value: &str| -> Result<f64, DataError> {
            let v: f64 = value.parse().map_err(|_| DataError::NonNumeric {
                id: id.clone(),
                time,
                column: column.to_string(),
                value: value.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    id: id.clone(),
                    time,
                    column: column.to_string(),
                });
            }
            Ok(v)
        };

        let y_raw = record.get(y_col).unwrap_or("");
        let y_val = if y_raw.is_empty() {
            None
        } else {
            Some(parse_num(&schema.y, y_raw)?)
        };
        let mut x_row = Vec::with_capacity(x_cols.len());
        for (c, &ix) in x_cols.iter().enumerate() {
            x_row.push(parse_num(&schema.x[c], record.get(ix).unwrap_or(""))?);
        }
        let mut h_row = Vec::with_capacity(h_cols.len());
        for (c, &ix) in h_cols.iter().enumerate() {
            h_row.push(parse_num(&schema.h[c], record.get(ix).unwrap_or(""))?);
        }

        let entry = subjects.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            SubjectRows {
                rows: Vec::new(),
                seen: 0,
            }
        });
        if entry.rows.len() < time {
            entry.rows.resize_with(time, || None);
        }
        if entry.rows[time - 1].is_some() {
            return Err(DataError::DuplicateOccasion { id, time });
        }
        entry.rows[time - 1] = Some((y_val, x_row, h_row));
        entry.seen += 1;
    }

    if order.is_empty() {
        return Err(DataError::Empty);
    }
    let t = t_max;
    let n = order.len();
    for id in &order {
        let s = &subjects[id];
        if s.seen != t {
            return Err(DataError::RaggedSubject {
                id: id.clone(),
                expected: t,
                got: s.seen,
            });
        }
        if s.rows.len() != t || s.rows.iter().any(Option::is_none) {
            return Err(DataError::BadOccasions { id: id.clone(), t });
        }
    }

    let p = x_cols.len() + 1;
    let q = h_cols.len();
    let mut y = Array2::<f64>::zeros((n, t));
    let mut observed = Array2::from_elem((n, t), false);
    let mut x = Array3::<f64>::zeros((n, t, p));
    let mut h = Array3::<f64>::zeros((n, t, q));
    for (i, id) in order.iter().enumerate() {
        let s = &subjects[id];
        for j in 0..t {
            let (y_val, x_row, h_row) = s.rows[j].as_ref().expect("checked above");
            match y_val {
                Some(v) => {
                    y[[i, j]] = *v;
                    observed[[i, j]] = true;
                }
                None => y[[i, j]] = f64::NAN,
            }
            x[[i, j, 0]] = 1.0;
            for (c, v) in x_row.iter().enumerate() {
                x[[i, j, c + 1]] = *v;
            }
            for (c, v) in h_row.iter().enumerate() {
                h[[i, j, c]] = *v;
            }
        }
    }

    let mut x_names = Vec::with_capacity(p);
    x_names.push("(intercept)".to_string());
    x_names.extend(schema.x.iter().cloned());

    LongitudinalDataset::from_parts(
        order,
        family,
        y,
        observed,
        x,
        x_names,
        h,
        schema.h.clone(),
    )
}

/// Writes a dataset back to long-format CSV with the given schema names;
/// unobserved outcomes become empty fields. Inverse of [`load_long_csv`] up
/// to float formatting.
pub fn write_long_csv(ds: &LongitudinalDataset, schema: &ColumnSchema) -> String {
    let mut out = String::new();
    out.push_str(&schema.id);
    out.push(',');
    out.push_str(&schema.time);
    out.push(',');
    out.push_str(&schema.y);
    for name in &schema.x {
        out.push(',');
        out.push_str(name);
    }
    for name in &schema.h {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..ds.n() {
        for j in 0..ds.t() {
            out.push_str(&ds.ids()[i]);
            out.push(',');
            out.push_str(&(j + 1).to_string());
            out.push(',');
            if ds.observed()[[i, j]] {
                out.push_str(&format_float(ds.y()[[i, j]]));
            }
            for c in 1..ds.p_full() {
                out.push(',');
                out.push_str(&format_float(ds.x()[[i, j, c]]));
            }
            for c in 0..ds.h_names().len() {
                out.push(',');
                out.push_str(&format_float(ds.h()[[i, j, c]]));
            }
            out.push('\n');
        }
    }
    out
}

fn format_float(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}
