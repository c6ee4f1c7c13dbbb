//! Flat parameter/gradient bundles shared by the graph, the optimizer and the
//! gradient checker.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One buffer per parameter tensor, in the owning model's fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &[&[T]]) -> Self {
        Self {
            tensors: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = T::zero()));
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::contract("gradient bundles have different tensor counts"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.len() != b.len() {
                return Err(Error::contract("gradient tensor sizes differ"));
            }
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v *= s));
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == T::zero())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.tensors
            .iter()
            .flatten()
            .zip(other.tensors.iter().flatten())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
