//! Scoring of inferred causality matrices and next-event-type prediction.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ModelError;
use crate::eventseq::{CausalMatrix, Dataset, EventSequence};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1} entries")]
    Shape(usize, usize),
    #[error("AUC undefined: ground truth has a single class")]
    SingleClass,
    #[error("Kendall tau undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("need at least {0} entries")]
    TooFew(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Index of the largest value; the first one wins on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Flattened entries of a matrix, optionally dropping the diagonal.
pub fn entries(m: &CausalMatrix, include_diagonal: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.num_types() * m.num_types());
    for (i, row) in m.rows().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if include_diagonal || i != j {
                out.push(v);
            }
        }
    }
    out
}

/// Rank AUC (Mann-Whitney) with tied positive/negative pairs counted 0.5.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::Shape(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, so half ranks stay integral
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o]).count() as u64;
        rank2_pos += pos_in_group * (i + j + 2) as u64;
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// AUC of `scores` against the nonzero pattern of `truth`.
pub fn auc(scores: &CausalMatrix, truth: &CausalMatrix, include_diagonal: bool) -> Result<f64> {
    let s = entries(scores, include_diagonal);
    let t: Vec<bool> = entries(truth, include_diagonal).iter().map(|&v| v != 0.0).collect();
    auc_scores(&s, &t)
}

/// Kendall's tau-b in `O(n log n)` (Knight's merge-sort method).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::Shape(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricError::TooFew(2));
    }
    let pairs = |c: u64| c * c.saturating_sub(1) / 2;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let (mut tie_x, mut tie_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                tie_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tie_x += pairs(run_x);
            tie_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tie_x += pairs(run_x);
    tie_xy += pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let swaps = merge_count(&mut ys);

    let mut tie_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            tie_y += pairs(run_y);
            run_y = 1;
        }
    }
    tie_y += pairs(run_y);

    let n0 = pairs(n as u64);
    if tie_x == n0 {
        return Err(MetricError::ZeroVariance("scores"));
    }
    if tie_y == n0 {
        return Err(MetricError::ZeroVariance("truth"));
    }
    let s = n0 as f64 - tie_x as f64 - tie_y as f64 + tie_xy as f64 - 2.0 * swaps as f64;
    Ok(s / ((n0 - tie_x) as f64 * (n0 - tie_y) as f64).sqrt())
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            merged.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

pub fn kendall_tau(scores: &CausalMatrix, truth: &CausalMatrix, include_diagonal: bool) -> Result<f64> {
    kendall_tau_b(&entries(scores, include_diagonal), &entries(truth, include_diagonal))
}

/// Models that can name the most likely type of each event given its time.
pub trait TypePredictor {
    /// Predicted type for every event of `seq`.
    fn predict_sequence(&self, seq: &EventSequence) -> std::result::Result<Vec<usize>, ModelError>;
}

/// Fraction of events whose type is predicted correctly, with the count.
pub fn type_accuracy<P: TypePredictor + Sync>(model: &P, ds: &Dataset) -> Result<(f64, usize)> {
    use rayon::prelude::*;
    let per_seq: Vec<(usize, usize)> = ds
        .sequences()
        .par_iter()
        .map(|s| {
            let pred = model.predict_sequence(s)?;
            let hits = pred.iter().zip(s.types()).filter(|(p, k)| **p == *k).count();
            Ok((hits, s.len()))
        })
        .collect::<std::result::Result<_, ModelError>>()?;
    let (hits, n) = per_seq.iter().fold((0, 0), |(h, n), (a, b)| (h + a, n + b));
    if n == 0 {
        return Err(MetricError::TooFew(1));
    }
    Ok((hits as f64 / n as f64, n))
}

/// Most frequent type in `ds`; the lower index wins ties.
pub fn majority_type(ds: &Dataset) -> usize {
    let mut counts = vec![0.0; ds.num_types()];
    for s in ds.sequences() {
        for k in s.types() {
            counts[k] += 1.0;
        }
    }
    argmax(&counts)
}

/// Accuracy of always predicting `k`.
pub fn constant_accuracy(ds: &Dataset, k: usize) -> f64 {
    let n = ds.total_events();
    if n == 0 {
        return 0.0;
    }
    let hits = ds.sequences().iter().flat_map(|s| s.types()).filter(|&t| t == k).count();
    hits as f64 / n as f64
}

/// SHA-256 of the canonical JSON form of a configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes");
    Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    /// `None` when undefined (single-class truth).
    pub auc: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub accuracy: f64,
    pub majority_accuracy: f64,
    pub matrix_entries: usize,
    pub predicted_events: usize,
    pub include_diagonal: bool,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default = "yes")]
    pub include_diagonal: bool,
}

fn yes() -> bool {
    true
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { include_diagonal: true }
    }
}

/// Assembles matrix and prediction metrics on a test split. The majority
/// class is taken from `train`.
pub fn evaluate<P: TypePredictor + Sync>(
    model_name: &str,
    model: &P,
    scores: &CausalMatrix,
    truth: &CausalMatrix,
    train: &Dataset,
    test: &Dataset,
    opts: EvalOptions,
    fingerprint: String,
) -> Result<EvalReport> {
    let auc = match auc(scores, truth, opts.include_diagonal) {
        Ok(v) => Some(v),
        Err(MetricError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let tau = match kendall_tau(scores, truth, opts.include_diagonal) {
        Ok(v) => Some(v),
        Err(MetricError::ZeroVariance(_)) => None,
        Err(e) => return Err(e),
    };
    let (accuracy, n) = type_accuracy(model, test)?;
    Ok(EvalReport {
        model: model_name.to_string(),
        auc,
        kendall_tau: tau,
        accuracy,
        majority_accuracy: constant_accuracy(test, majority_type(train)),
        matrix_entries: entries(scores, opts.include_diagonal).len(),
        predicted_events: n,
        include_diagonal: opts.include_diagonal,
        fingerprint,
    })
}

/// Aligned text table, one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"));
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>7}  {:>8}  {:>8}\n",
        "model", "AUC", "tau", "acc", "majority"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>8.3}  {:>8.3}",
            r.model,
            fmt(r.auc),
            fmt(r.kendall_tau),
            r.accuracy,
            r.majority_accuracy
        );
    }
    out
}
