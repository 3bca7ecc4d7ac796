//! Checkpoints, the on-disk tensor container, task vectors and layer grouping.

mod grouping;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{LarvError, Result};

pub use grouping::{
    group_layers, GroupingConfig, GroupingPolicy, LayerGroup, LayerPartition, MatrixView,
    DEFAULT_BLOCK_PATTERN, DEFAULT_SKIP_PATTERNS,
};
pub use io::{load_checkpoint, save_checkpoint, save_checkpoint_with, to_bytes, SaveDtype};

/// Element type of a tensor as stored on disk. Values are always held as `f32` in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub(crate) fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// Source element type; determines the on-disk encoding when the input dtype is preserved.
    pub dtype: DType,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::with_dtype(DType::F32, shape, data)
    }

    pub fn with_dtype(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(LarvError::ShapeMismatch("tensor shape must be non-empty".into()));
        }
        if shape.contains(&0) {
            return Err(LarvError::ShapeMismatch(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LarvError::ShapeMismatch(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(rows, cols)` of the 2-D view: the leading axis against all trailing axes folded
    /// together. `None` for 1-axis tensors.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        matrix_dims(&self.shape)
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1..].iter().product()))
}

/// A named collection of tensors plus free-form string metadata.
///
/// Tensor order is the insertion order (file order for loaded checkpoints). Equality ignores
/// that order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(LarvError::DuplicateName(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Identifier used when recording provenance in derived checkpoints.
    pub fn source_id(&self) -> &str {
        self.meta
            .get("source")
            .or_else(|| self.meta.get("name"))
            .map(String::as_str)
            .unwrap_or("unknown")
    }

    /// Checks that `other` has exactly the same tensor names with identical shapes.
    pub fn check_aligned(&self, other: &Checkpoint) -> Result<()> {
        for (name, tensor) in &self.tensors {
            match other.tensors.get(name) {
                None => {
                    return Err(LarvError::Misaligned {
                        name: name.clone(),
                        reason: "missing from the other checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(LarvError::Misaligned {
                        name: name.clone(),
                        reason: format!("shape {:?} vs {:?}", tensor.shape(), t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(LarvError::Misaligned {
                name: extra.clone(),
                reason: "not present in the reference checkpoint".into(),
            });
        }
        Ok(())
    }

    pub fn is_aligned(&self, other: &Checkpoint) -> bool {
        self.check_aligned(other).is_ok()
    }
}

/// Task vector `finetuned - base`, computed elementwise in `f32`.
pub fn compute_task_vector(base: &Checkpoint, finetuned: &Checkpoint) -> Result<Checkpoint> {
    base.check_aligned(finetuned)?;
    let mut out = Checkpoint::new();
    for (name, b) in &base.tensors {
        let f = &finetuned.tensors[name];
        let data = f.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        out.insert(name.clone(), Tensor::new(b.shape().to_vec(), data)?)?;
    }
    out.meta
        .insert("task_vector.base".into(), base.source_id().to_string());
    out.meta
        .insert("task_vector.finetuned".into(), finetuned.source_id().to_string());
    Ok(out)
}
