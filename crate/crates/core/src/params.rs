//! Named parameter storage and the flat tensor archive used for checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{Error, Result};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Ordered collection of named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DMatrix<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DMatrix<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.param(v.clone())).collect(),
        }
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }

    pub fn to_archive(&self, metadata: BTreeMap<String, String>) -> TensorArchive {
        TensorArchive {
            format_version: ARCHIVE_FORMAT_VERSION,
            metadata,
            tensors: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| NamedTensor {
                    name: name.clone(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.transpose().iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Overwrites values from an archive; every name must exist with the same shape.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        if archive.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::format(
                "archive",
                format!("unsupported format version {}", archive.format_version),
            ));
        }
        let by_name: BTreeMap<&str, &NamedTensor> =
            archive.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::format("archive", format!("missing tensor {name}")))?;
            if t.shape != [value.nrows(), value.ncols()] || t.data.len() != value.len() {
                return Err(Error::format(
                    "archive",
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape, value.shape()),
                ));
            }
            *value = DMatrix::from_row_slice(t.shape[0], t.shape[1], &t.data);
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Extracts one gradient per parameter, zero where none flowed.
    pub fn gradients(&self, grads: &mut Grads, store: &ParamStore) -> Vec<DMatrix<f64>> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, value)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| DMatrix::zeros(value.nrows(), value.ncols()))
            })
            .collect()
    }
}

/// One entry of a [`TensorArchive`]; `data` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Flat named-tensor archive. Tensor names follow `component/layer-index/matrix-name`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorArchive {
    pub format_version: u32,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorArchive {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }
}

/// Uniform initialization on `[-scale, scale]`.
pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}
