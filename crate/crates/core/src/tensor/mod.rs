//! Dense row-major tensors with a reverse-mode tape.
//!
//! Values are held as `f64` internally. In [`Precision::F32`] mode every
//! stored value is rounded to the nearest single-precision float, so tensors
//! behave like 32-bit buffers and round-trip exactly through the 32-bit
//! checkpoint format. [`Precision::F64`] keeps full precision for gradient
//! and oracle checks.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;

pub use checkpoint::{load_checkpoint, read_index, save_checkpoint, CheckpointEntry};
pub use graph::{primitive_catalog, CustomOp, CustomOutput, Gradients, Graph, Var};
pub use kernels::{log_softmax_rows, logaddexp, softmax_rows};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_vec(self, mut v: Vec<f64>) -> Vec<f64> {
        if self == Precision::F32 {
            for x in &mut v {
                *x = *x as f32 as f64;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data: precision.round_vec(data),
            precision,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], precision).expect("non-empty shape")
    }

    pub fn from_matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![rows, cols], data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix; rank-1 tensors are row vectors.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    /// Overwrites the values, rounding to this tensor's precision.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape("set_data", &self.shape, &[data.len()]));
        }
        self.data = self.precision.round_vec(data);
        Ok(())
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: precision.round_vec(self.data.clone()),
            precision,
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Named parameters in insertion order; the order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Marks every parameter whose name starts with `prefix` as trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    /// Parameters whose name starts with `prefix`, in store order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> {
        self.params.iter().filter(move |(n, _)| n.starts_with(prefix))
    }

    /// Sorts parameters by name so that store order does not depend on construction history.
    pub fn sort_by_name(&mut self) {
        self.params.sort_keys();
    }
}
