use crate::error::{Error, Result};
use crate::layers::he_uniform;
use crate::scalar::Scalar;
use crate::tensor::FeatureMapStack;
use rand::Rng;

/// Stride-1 2-D cross-correlation with zero padding and a per-map bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_maps: usize,
    pub out_maps: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    /// `out_maps x in_maps x k_h x k_w`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: FeatureMapStack<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    /// Zero weights and bias.
    pub fn zeros(in_maps: usize, out_maps: usize, kernel: (usize, usize), pad: (usize, usize)) -> Result<Self> {
        if in_maps == 0 || out_maps == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::config("conv layer dimensions must be positive"));
        }
        Ok(Self {
            in_maps,
            out_maps,
            k_h: kernel.0,
            k_w: kernel.1,
            pad_h: pad.0,
            pad_w: pad.1,
            weights: vec![T::zero(); out_maps * in_maps * kernel.0 * kernel.1],
            bias: vec![T::zero(); out_maps],
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        in_maps: usize,
        out_maps: usize,
        kernel: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_maps, out_maps, kernel, pad)?;
        let area = kernel.0 * kernel.1;
        layer.weights = he_uniform(rng, layer.weights.len(), in_maps * area);
        Ok(layer)
    }

    #[cfg(test)]
    fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_maps + i) * self.k_h + ky) * self.k_w + kx
    }

    /// Smallest input width this layer accepts.
    pub fn min_input_width(&self) -> usize {
        self.k_w.saturating_sub(2 * self.pad_w).max(1)
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if w + 2 * self.pad_w < self.k_w {
            return Err(Error::MinWidth {
                min_width: self.min_input_width(),
                got: w,
            });
        }
        if h + 2 * self.pad_h < self.k_h {
            return Err(Error::contract(format!(
                "conv input height {h} too small for kernel height {} with padding {}",
                self.k_h, self.pad_h
            )));
        }
        Ok((h + 2 * self.pad_h - self.k_h + 1, w + 2 * self.pad_w - self.k_w + 1))
    }

    fn check_input(&self, input: &FeatureMapStack<T>) -> Result<(usize, usize)> {
        if input.n_map() != self.in_maps {
            return Err(Error::contract(format!(
                "conv expects {} input maps, got {}",
                self.in_maps,
                input.n_map()
            )));
        }
        self.output_dims(input.height(), input.width())
    }

    /// Column range `[x0, x1)` of output positions whose tap `kx` lands inside
    /// an input row of width `w`.
    #[inline]
    fn valid_cols(&self, kx: usize, w: usize, out_w: usize) -> (usize, usize) {
        let x0 = self.pad_w.saturating_sub(kx);
        let x1 = out_w.min((w + self.pad_w).saturating_sub(kx));
        (x0, x1.max(x0))
    }

    /// Unrolls the input into a `(in_maps * k_h * k_w) x (out_h * out_w)`
    /// matrix whose row order matches the weight layout.
    fn im2col(&self, input: &FeatureMapStack<T>, out_h: usize, out_w: usize) -> Vec<T> {
        let (h, w) = (input.height(), input.width());
        let p = out_h * out_w;
        let mut col = vec![T::zero(); self.in_maps * self.k_h * self.k_w * p];
        let mut rows = col.chunks_exact_mut(p);
        for i in 0..self.in_maps {
            let in_map = input.map(i);
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = rows.next().expect("row count matches kernel volume");
                    let (x0, x1) = self.valid_cols(kx, w, out_w);
                    if x0 == x1 {
                        continue;
                    }
                    let shift = x0 + kx - self.pad_w;
                    for y in 0..out_h {
                        let Some(iy) = (y + ky).checked_sub(self.pad_h).filter(|&r| r < h) else {
                            continue;
                        };
                        row[y * out_w + x0..y * out_w + x1]
                            .copy_from_slice(&in_map[iy * w + shift..iy * w + shift + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back onto the input.
    fn col2im_add(&self, col: &[T], grad_in: &mut FeatureMapStack<T>, out_h: usize, out_w: usize) {
        let (h, w) = (grad_in.height(), grad_in.width());
        let mut rows = col.chunks_exact(out_h * out_w);
        for i in 0..self.in_maps {
            let map = grad_in.map_mut(i);
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = rows.next().expect("row count matches kernel volume");
                    let (x0, x1) = self.valid_cols(kx, w, out_w);
                    if x0 == x1 {
                        continue;
                    }
                    let shift = x0 + kx - self.pad_w;
                    for y in 0..out_h {
                        let Some(iy) = (y + ky).checked_sub(self.pad_h).filter(|&r| r < h) else {
                            continue;
                        };
                        let dst = &mut map[iy * w + shift..iy * w + shift + (x1 - x0)];
                        for (d, &g) in dst.iter_mut().zip(&row[y * out_w + x0..y * out_w + x1]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }

    fn kernel_volume(&self) -> usize {
        self.in_maps * self.k_h * self.k_w
    }

    pub fn forward(&self, input: &FeatureMapStack<T>) -> Result<FeatureMapStack<T>> {
        let (out_h, out_w) = self.check_input(input)?;
        let p = out_h * out_w;
        let col = self.im2col(input, out_h, out_w);
        let mut out = FeatureMapStack::zeros(self.out_maps, out_h, out_w)?;
        for (o, &b) in self.bias.iter().enumerate() {
            out.map_mut(o).iter_mut().for_each(|v| *v = b);
        }
        T::gemm_acc(self.out_maps, self.kernel_volume(), p, &self.weights, false, &col, false, out.data_mut());
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad_w`/`grad_b` and, when
    /// requested, the input gradient into `grad_in`.
    pub fn backward_into(
        &self,
        input: &FeatureMapStack<T>,
        grad_out: &FeatureMapStack<T>,
        grad_in: Option<&mut FeatureMapStack<T>>,
        grad_w: &mut [T],
        grad_b: &mut [T],
    ) -> Result<()> {
        let (out_h, out_w) = self.check_input(input)?;
        if grad_out.shape() != (self.out_maps, out_h, out_w) {
            return Err(Error::contract(format!(
                "conv grad_out shape {:?} != forward output {:?}",
                grad_out.shape(),
                (self.out_maps, out_h, out_w)
            )));
        }
        if grad_w.len() != self.weights.len() || grad_b.len() != self.bias.len() {
            return Err(Error::contract("conv parameter gradient buffers mis-sized"));
        }
        if let Some(gi) = grad_in.as_deref() {
            if gi.shape() != input.shape() {
                return Err(Error::contract("conv grad_in shape != input shape"));
            }
        }
        let p = out_h * out_w;
        let kv = self.kernel_volume();
        for (o, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out.map(o).iter().copied().sum::<T>();
        }
        let col = self.im2col(input, out_h, out_w);
        T::gemm_acc(self.out_maps, p, kv, grad_out.data(), false, &col, true, grad_w);
        if let Some(gi) = grad_in {
            let mut gcol = vec![T::zero(); kv * p];
            T::gemm_acc(kv, self.out_maps, p, &self.weights, true, grad_out.data(), false, &mut gcol);
            self.col2im_add(&gcol, gi, out_h, out_w);
        }
        Ok(())
    }

    pub fn backward(&self, input: &FeatureMapStack<T>, grad_out: &FeatureMapStack<T>) -> Result<ConvGrads<T>> {
        let mut grads = ConvGrads {
            input: input.zeros_like(),
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
        };
        self.backward_into(input, grad_out, Some(&mut grads.input), &mut grads.weights, &mut grads.bias)?;
        Ok(grads)
    }
}
