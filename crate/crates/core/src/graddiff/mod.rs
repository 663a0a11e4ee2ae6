//! Exact gradients of scalar losses: a tensor tape with reverse sweep,
//! a named parameter store, and a central-difference gradient checker.

mod params;
pub mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{
    Gradients, ParamCheckpoint, ParamId, ParamRecord, ParamStore, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("loss node must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite adjoint at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("objective returned a non-finite value")]
    NonFiniteValue,
    #[error("parameter {0:?} registered twice")]
    DuplicateName(String),
    #[error("parameter {0:?} has non-finite entries")]
    NonFiniteParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Denominator floor for relative errors, so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub passed: bool,
    /// Parameter with the largest discrepancy, if any failed.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradient returned by `f` against central differences with
/// step `h`, one parameter entry at a time.
pub fn grad_check<F>(store: &ParamStore, h: f64, tol: f64, f: F) -> Result<GradCheckReport, GradError>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients), GradError>,
{
    let (v0, engine) = f(store)?;
    if !v0.is_finite() {
        return Err(GradError::NonFiniteValue);
    }
    let mut work = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut worst = 0.0_f64;
        for e in 0..store.get(id).len() {
            let orig = store.get(id).data()[e];
            work.values_mut(id)[e] = orig + h;
            let (fp, _) = f(&work)?;
            work.values_mut(id)[e] = orig - h;
            let (fm, _) = f(&work)?;
            work.values_mut(id)[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(GradError::NonFiniteValue);
            }
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(engine.get(id).data()[e], fd));
        }
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            max_rel_error: worst,
        });
    }
    let failing = entries
        .iter()
        .filter(|e| !(e.max_rel_error < tol))
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    Ok(GradCheckReport {
        worst: failing.map(|e| e.name.clone()),
        passed: failing.is_none(),
        entries,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_passes_with_empty_report() {
        let store = ParamStore::new();
        let rep = grad_check(&store, 1e-5, 1e-3, |s| Ok((1.0, s.zeros_like()))).unwrap();
        assert!(rep.passed);
        assert!(rep.entries.is_empty());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::scalar(1.0)).unwrap();
        let res = grad_check(&store, 1e-5, 1e-3, |s| Ok((f64::NAN, s.zeros_like())));
        assert!(matches!(res, Err(GradError::NonFiniteValue)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::new(2, 2, vec![0.1, 1e-300, -3.5, 7.0 / 3.0])).unwrap();
        store.register("b", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        let text = serde_json::to_string(&store.to_checkpoint()).unwrap();
        let back: ParamCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ParamStore::from_checkpoint(&back).unwrap(), store);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            store.register("a", Tensor::scalar(1.0)),
            Err(GradError::DuplicateName(_))
        ));
    }
}
