use rand::Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Named tensors owned by one network. Shapes are fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Gradients share the exact named layout of the [`ParamSet`] they belong to.
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor, returning its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            names: other.names.clone(),
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat copy of every entry in slot order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn scalar_at(&self, mut flat_idx: usize) -> f64 {
        for t in &self.tensors {
            if flat_idx < t.len() {
                return t.data()[flat_idx];
            }
            flat_idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_scalar_at(&mut self, mut flat_idx: usize, value: f64) {
        for t in &mut self.tensors {
            if flat_idx < t.len() {
                t.data_mut()[flat_idx] = value;
                return;
            }
            flat_idx -= t.len();
        }
        panic!("flat index out of range");
    }

    /// SHA-256 over names, shapes and little-endian payload.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.names, other.names
            )))
        }
    }

    /// First non-finite entry, reported by parameter name.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("{what} '{name}'")));
            }
        }
        Ok(())
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_view_roundtrip() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        p.push("b", Tensor::from_vec(2, 1, vec![3.0, 4.0]));
        assert_eq!(p.flat(), vec![1.0, 2.0, 3.0, 4.0]);
        p.set_scalar_at(2, 9.0);
        assert_eq!(p.scalar_at(2), 9.0);
        assert_eq!(p.get("b").unwrap().data(), &[9.0, 4.0]);
    }

    #[test]
    fn nan_reported_by_name() {
        let mut p = ParamSet::new();
        p.push("ok", Tensor::scalar(1.0));
        p.push("bad", Tensor::scalar(f64::NAN));
        let err = p.ensure_finite("gradient").unwrap_err();
        assert!(err.to_string().contains("'bad'"), "{err}");
    }

    #[test]
    fn checksum_changes_with_payload() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(1.0));
        let c1 = p.checksum();
        p.set_scalar_at(0, 1.0 + f64::EPSILON);
        assert_ne!(c1, p.checksum());
    }
}
