//! Dense rank-2 tensors in row-major `f64` storage.
//!
//! Everything in this crate is a matrix: row vectors are `1 x d`, scalars are
//! `1 x 1`. Training runs entirely in 64-bit floats so gradients can be
//! validated against central finite differences; checkpoints are written in
//! 32-bit (see `checkpoint`).

use crate::error::{MetError, Result};

/// A dense real matrix, optionally tracked for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    /// `[rows, cols]`, both positive.
    pub shape: Vec<usize>,
    /// Row-major values, `shape[0] * shape[1]` entries.
    pub data: Vec<f64>,
    /// Whether reverse-mode differentiation should reach this tensor.
    pub requires_grad: bool,
    /// Gradient buffer, populated by `Tape::backward`; same shape as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MetError::EmptyAxis { op: "Tensor::new" });
        }
        if data.len() != rows * cols {
            return Err(MetError::Data(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value]).expect("scalar shape")
    }

    /// A `1 x d` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let d = data.len();
        Self::new(1, d, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named model tensor; frozen parameters never receive gradient updates.
#[derive(Debug, Clone)]
pub struct Parameter {
    /// Dotted path, unique within a model (e.g. `bank.u_down`, `head.2.weight`).
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn trainable(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_grad(),
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: false,
        }
    }
}

/// Cosine similarity `u.v / (|u| |v|)` of two equal-length vectors.
///
/// Errors on zero-norm inputs; callers that want a lenient zero (such as
/// similarity-graph construction) handle that case themselves.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(MetError::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![1, u.len()],
            rhs: vec![1, v.len()],
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetError::DegenerateVector { op: "cosine_sim" });
    }
    Ok(dot / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn cosine_of_self_is_one() {
        let u = [3.0, -1.0, 2.0];
        assert!((cosine_sim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_is_zero() {
        let u = [1.0, 0.0];
        let v = [0.0, 5.0];
        assert_eq!(cosine_sim(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_dot_norm_oracle() {
        // 16-d pair with a fixed generator; oracle recomputes dot and norms
        // with explicit loops.
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let u: Vec<f64> = (0..16).map(|_| next()).collect();
        let v: Vec<f64> = (0..16).map(|_| next()).collect();
        let mut dot = 0.0;
        let mut nu = 0.0;
        let mut nv = 0.0;
        for i in 0..16 {
            dot += u[i] * v[i];
            nu += u[i] * u[i];
            nv += v[i] * v[i];
        }
        let expect = dot / (nu.sqrt() * nv.sqrt());
        assert!((cosine_sim(&u, &v).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let z = [0.0, 0.0];
        let v = [1.0, 2.0];
        assert!(matches!(
            cosine_sim(&z, &v),
            Err(MetError::DegenerateVector { .. })
        ));
    }
}
