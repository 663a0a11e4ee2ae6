use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Names are unique and shapes are fixed once
/// registered; only values change.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, GradError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(GradError::DuplicateName(name));
        }
        if !value.all_finite() {
            return Err(GradError::NonFiniteParam(name));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Mutable view of the values; the shape cannot change.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    /// Zero-filled tensors with the same layout (a gradient buffer).
    pub fn zeros_like(&self) -> Gradients {
        Gradients(
            self.tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        )
    }

    pub fn to_checkpoint(&self) -> ParamCheckpoint {
        ParamCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: [t.rows(), t.cols()],
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &ParamCheckpoint) -> Result<Self, GradError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(GradError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut store = ParamStore::new();
        for rec in &ck.params {
            if rec.shape[0] * rec.shape[1] != rec.values.len() {
                return Err(GradError::Checkpoint(format!(
                    "parameter {} has {} values for shape {:?}",
                    rec.name,
                    rec.values.len(),
                    rec.shape
                )));
            }
            store.register(
                rec.name.clone(),
                Tensor::new(rec.shape[0], rec.shape[1], rec.values.clone()),
            )?;
        }
        Ok(store)
    }
}

pub const CHECKPOINT_FORMAT: &str = "hawkes-causal/params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized parameters: name, `[rows, cols]` shape and row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Gradient tensors aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub(crate) Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}
