use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{row_reduce, row_reduce_backward, FeatureMapStack, FlatVector, PoolMode, RowReduceSaved};

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaxPoolLayer;

impl MaxPoolLayer {
    pub fn output_dims(h: usize, w: usize) -> Result<(usize, usize)> {
        if w < 2 {
            return Err(Error::MinWidth { min_width: 2, got: w });
        }
        if h < 2 {
            return Err(Error::contract(format!("max pool input height {h} < 2")));
        }
        Ok((h / 2, w / 2))
    }
}

/// Winning input cell (flat index within its map) for every output cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolSaved {
    pub input_shape: (usize, usize, usize),
    pub argmax: Vec<u32>,
}

pub fn maxpool_forward<T: Scalar>(input: &FeatureMapStack<T>) -> Result<(FeatureMapStack<T>, MaxPoolSaved)> {
    let (n, h, w) = input.shape();
    let (oh, ow) = MaxPoolLayer::output_dims(h, w)?;
    let mut out = FeatureMapStack::zeros(n, oh, ow)?;
    let mut argmax = Vec::with_capacity(n * oh * ow);
    for m in 0..n {
        let src = input.map(m);
        let dst = out.map_mut(m);
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                // scan order fixes the tie-break at the lowest flat index
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if src[c] > src[best] {
                        best = c;
                    }
                }
                dst[y * ow + x] = src[best];
                argmax.push(best as u32);
            }
        }
    }
    Ok((
        out,
        MaxPoolSaved {
            input_shape: (n, h, w),
            argmax,
        },
    ))
}

/// Adds the routed gradient into `grad_in`.
pub fn maxpool_backward_into<T: Scalar>(
    grad_out: &FeatureMapStack<T>,
    saved: &MaxPoolSaved,
    grad_in: &mut FeatureMapStack<T>,
) -> Result<()> {
    if grad_out.data().len() != saved.argmax.len() || grad_in.shape() != saved.input_shape {
        return Err(Error::contract("max pool backward shape mismatch"));
    }
    let per_out = grad_out.height() * grad_out.width();
    for m in 0..grad_out.n_map() {
        let g = grad_out.map(m);
        let idx = &saved.argmax[m * per_out..(m + 1) * per_out];
        let dst = grad_in.map_mut(m);
        for (&gv, &i) in g.iter().zip(idx) {
            dst[i as usize] += gv;
        }
    }
    Ok(())
}

pub fn maxpool_backward<T: Scalar>(grad_out: &FeatureMapStack<T>, saved: &MaxPoolSaved) -> Result<FeatureMapStack<T>> {
    let (n, h, w) = saved.input_shape;
    let mut grad_in = FeatureMapStack::zeros(n, h, w)?;
    maxpool_backward_into(grad_out, saved, &mut grad_in)?;
    Ok(grad_in)
}

/// Spatially-sensitive pooling: one value per map row, width discarded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SspLayer {
    pub mode: PoolMode,
}

impl SspLayer {
    pub fn new(mode: PoolMode) -> Self {
        Self { mode }
    }

    pub fn output_len(&self, n_map: usize, h: usize) -> usize {
        n_map * h
    }

    pub fn forward<T: Scalar>(&self, maps: &FeatureMapStack<T>) -> (FlatVector<T>, RowReduceSaved) {
        row_reduce(maps, self.mode)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &FlatVector<T>, saved: &RowReduceSaved) -> Result<FeatureMapStack<T>> {
        row_reduce_backward(grad_out, saved)
    }
}
