//! Dense row-major multi-dimensional arrays of f64 — the value type threaded
//! through the tape, the model, and the metrics stack.

use std::io::Write;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Dense row-major array. Shape extents may be zero only for empty arrays;
/// `data.len()` always equals the product of the extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(
                "Array::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis; 1 for rank-0 (which this crate never builds).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// Element accessor by multi-index (tests and small fixtures only).
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Array> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(CoreError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug dump: one line `shape,<e0>,<e1>,...` then the values as rows of
    /// the trailing axis. Intended for test goldens and inspection only.
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let header: Vec<String> = self.shape.iter().map(|e| e.to_string()).collect();
        writeln!(file, "shape,{}", header.join(","))
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let cols = self.last_dim().max(1);
        for row in self.data.chunks(cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(file, "{}", line.join(","))
                .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        }
        Ok(())
    }
}
