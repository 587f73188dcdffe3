use serde::{Deserialize, Serialize};

use super::error::AutodiffError;
use super::params::ParamStore;
use super::tensor::{Real, Shape, Tensor};

/// One serialized parameter: name, `[rows, cols]`, row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Flat, order-preserving parameter dump.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub params: Vec<ParamRecord>,
}

impl ParamCheckpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        Self {
            params: store
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    shape: [p.value.rows(), p.value.cols()],
                    values: p.value.to_f64_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites `store` in place; names and shapes must match exactly.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        if self.params.len() != store.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "{} records for {} parameters",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (rec, id) in self.params.iter().zip(ids) {
            let current = store.value(id).shape();
            if rec.name != store.name(id) {
                return Err(AutodiffError::Checkpoint(format!(
                    "expected `{}`, found `{}`",
                    store.name(id),
                    rec.name
                )));
            }
            let shape = Shape(rec.shape[0], rec.shape[1]);
            if shape != current || rec.values.len() != shape.0 * shape.1 {
                return Err(AutodiffError::Checkpoint(format!(
                    "`{}` has shape {shape}, expected {current}",
                    rec.name
                )));
            }
            *store.value_mut(id) = Tensor::from_f64(shape.0, shape.1, &rec.values);
        }
        Ok(())
    }
}
