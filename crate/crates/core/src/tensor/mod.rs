//! Dense `f64` tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type: a shape plus row-major data, with the
//! invariant that every element is finite. [`Graph`] is a define-by-run tape
//! over tensors; ops append nodes and a single [`Graph::backward`] pass
//! populates gradients for every `requires_grad` leaf. The
//! [`grad_check`](gradcheck::grad_check) harness verifies analytic gradients
//! against central finite differences.

mod gradcheck;
mod graph;

pub use gradcheck::{
    grad_check, gradient_battery, gradient_battery_with_tolerance, BatteryEntry, GradCheckReport,
};
pub use graph::{Graph, NodeId};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// All constructors reject NaN and infinity so downstream code can rely on
/// every stored element being finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, "tensor literal")
    }

    /// Like [`Tensor::new`] but errors name `context` as the producing site.
    pub(crate) fn checked(shape: Vec<usize>, data: Vec<f64>, context: &str) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: context.to_string(),
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("{context} (element {pos})") });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    /// Constant-filled tensor. `value` must be finite.
    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::checked(shape, vec![value; numel], "tensor full")
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::checked(vec![], vec![value], "scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access for in-crate kernels. Callers must keep the
    /// finiteness invariant; public entry points re-validate.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "scalar_value".into(),
                detail: format!("expected one element, got shape {:?}", self.shape),
            })
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff".into(),
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Writes the tensor as a one-line JSON header (`{"shape": [...]}`)
    /// followed by raw little-endian `f64` bytes in row-major order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::json!({ "shape": self.shape });
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a tensor written by [`Tensor::write_to`], validating the byte
    /// count against the header shape and the finiteness of every element.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            shape: Vec<usize>,
        }
        let mut header_bytes = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte)?;
            if n == 0 {
                return Err(Error::Artifact("tensor header truncated".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header_bytes.push(byte[0]);
            if header_bytes.len() > 4096 {
                return Err(Error::Artifact("tensor header exceeds 4096 bytes".into()));
            }
        }
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Artifact(format!("bad tensor header: {e}")))?;
        let numel: usize = header.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Artifact(format!("tensor payload shorter than {numel} elements")))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Artifact("trailing bytes after tensor payload".into()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::checked(header.shape, data, "tensor file")
            .map_err(|e| Error::Artifact(format!("invalid tensor payload: {e}")))
    }

    /// Saves to a file using the header + raw bytes layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    /// Loads a tensor previously written by [`Tensor::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}
