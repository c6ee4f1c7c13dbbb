use crate::error::{Error, Result};
use crate::layers::he_uniform;
use crate::scalar::Scalar;
use crate::tensor::FlatVector;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FullyConnectedLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads<T> {
    pub input: FlatVector<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FullyConnectedLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("fully connected dimensions must be positive"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        })
    }

    pub fn init<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim)?;
        layer.weights = he_uniform(rng, in_dim * out_dim, in_dim);
        Ok(layer)
    }

    fn check_input(&self, x: &FlatVector<T>) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(Error::contract(format!(
                "fully connected layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FlatVector<T>) -> Result<FlatVector<T>> {
        self.check_input(x)?;
        let out = self
            .weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| b + super::dot(row, x.data()))
            .collect();
        Ok(FlatVector::new(out))
    }

    pub fn backward_into(
        &self,
        x: &FlatVector<T>,
        grad_out: &FlatVector<T>,
        grad_in: Option<&mut FlatVector<T>>,
        grad_w: &mut [T],
        grad_b: &mut [T],
    ) -> Result<()> {
        self.check_input(x)?;
        if grad_out.len() != self.out_dim {
            return Err(Error::contract(format!(
                "fully connected grad_out has {} entries, expected {}",
                grad_out.len(),
                self.out_dim
            )));
        }
        if grad_w.len() != self.weights.len() || grad_b.len() != self.bias.len() {
            return Err(Error::contract("fully connected gradient buffers mis-sized"));
        }
        for ((gw_row, gb), &g) in grad_w.chunks_exact_mut(self.in_dim).zip(grad_b.iter_mut()).zip(grad_out.data()) {
            *gb += g;
            if g != T::zero() {
                for (d, &v) in gw_row.iter_mut().zip(x.data()) {
                    *d += g * v;
                }
            }
        }
        if let Some(gi) = grad_in {
            if gi.len() != self.in_dim {
                return Err(Error::contract("fully connected grad_in mis-sized"));
            }
            for (row, &g) in self.weights.chunks_exact(self.in_dim).zip(grad_out.data()) {
                if g != T::zero() {
                    for (d, &w) in gi.data_mut().iter_mut().zip(row) {
                        *d += g * w;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn backward(&self, x: &FlatVector<T>, grad_out: &FlatVector<T>) -> Result<FcGrads<T>> {
        let mut grads = FcGrads {
            input: FlatVector::zeros(self.in_dim),
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
        };
        self.backward_into(x, grad_out, Some(&mut grads.input), &mut grads.weights, &mut grads.bias)?;
        Ok(grads)
    }
}
