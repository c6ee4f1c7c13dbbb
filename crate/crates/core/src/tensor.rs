//! Variable-width feature-map storage and the row reductions that the
//! spatially-sensitive pooling layer is built on.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// A stack of `n_map` response maps, each `h` rows by `w` columns.
///
/// Storage is map-major then row-major, so row `r` of map `m` is the
/// contiguous slice starting at `(m * h + r) * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapStack<T> {
    n_map: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMapStack<T> {
    pub fn zeros(n_map: usize, h: usize, w: usize) -> Result<Self> {
        Self::filled(n_map, h, w, T::zero())
    }

    pub fn filled(n_map: usize, h: usize, w: usize, value: T) -> Result<Self> {
        check_dims(n_map, h, w)?;
        Ok(Self {
            n_map,
            h,
            w,
            data: vec![value; n_map * h * w],
        })
    }

    pub fn from_vec(n_map: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        check_dims(n_map, h, w)?;
        if data.len() != n_map * h * w {
            return Err(Error::contract(format!(
                "feature map data has {} values, expected {}x{}x{}",
                data.len(),
                n_map,
                h,
                w
            )));
        }
        Ok(Self { n_map, h, w, data })
    }

    /// Builds a single-map stack from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::contract("ragged rows"));
        }
        Self::from_vec(1, h, w, rows.concat())
    }

    /// Zero-filled stack with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            n_map: self.n_map,
            h: self.h,
            w: self.w,
            data: vec![T::zero(); self.data.len()],
        }
    }

    #[inline]
    pub fn n_map(&self) -> usize {
        self.n_map
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_map, self.h, self.w)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// All `h * w` cells of map `m`.
    #[inline]
    pub fn map(&self, m: usize) -> &[T] {
        let len = self.h * self.w;
        &self.data[m * len..(m + 1) * len]
    }

    #[inline]
    pub fn map_mut(&mut self, m: usize) -> &mut [T] {
        let len = self.h * self.w;
        &mut self.data[m * len..(m + 1) * len]
    }

    #[inline]
    pub fn row(&self, m: usize, r: usize) -> &[T] {
        let start = (m * self.h + r) * self.w;
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, m: usize, r: usize) -> &mut [T] {
        let start = (m * self.h + r) * self.w;
        &mut self.data[start..start + self.w]
    }

    #[inline]
    pub fn get(&self, m: usize, r: usize, c: usize) -> T {
        self.data[(m * self.h + r) * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, m: usize, r: usize, c: usize, v: T) {
        self.data[(m * self.h + r) * self.w + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy whose columns are reordered so that output column `j`
    /// is input column `perm[j]`, identically for every row of every map.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.w {
            return Err(Error::contract("column permutation length != width"));
        }
        let mut out = self.zeros_like();
        for (src, dst) in self.data.chunks_exact(self.w).zip(out.data.chunks_exact_mut(self.w)) {
            for (d, &p) in dst.iter_mut().zip(perm) {
                *d = src[p];
            }
        }
        Ok(out)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> FeatureMapStack<U> {
        FeatureMapStack {
            n_map: self.n_map,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

fn check_dims(n_map: usize, h: usize, w: usize) -> Result<()> {
    if n_map == 0 || h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "feature map dimensions must be positive, got {n_map}x{h}x{w}"
        )));
    }
    Ok(())
}

/// A flat descriptor: pooled features, fc activations, logits, probabilities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatVector<T> {
    data: Vec<T>,
}

impl<T: Scalar> FlatVector<T> {
    pub fn new(data: Vec<T>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![T::zero(); len],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.data)
    }

    /// Copies out `len` entries starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        self.data
            .get(start..start + len)
            .map(|s| Self::new(s.to_vec()))
            .ok_or_else(|| Error::contract("slice out of range"))
    }
}

impl<T> From<Vec<T>> for FlatVector<T> {
    fn from(data: Vec<T>) -> Self {
        Self { data }
    }
}

/// Lowest index holding the maximum value; `None` for an empty slice.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Average,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PoolMode::Max),
            "average" | "avg" | "mean" => Ok(PoolMode::Average),
            other => Err(Error::config(format!("unknown pool mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Max => "max",
            PoolMode::Average => "average",
        })
    }
}

/// What the backward pass of a row reduction needs from its forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum RowReduceSaved {
    /// Winning column per row, in output order.
    Max {
        n_map: usize,
        h: usize,
        w: usize,
        argmax: Vec<u32>,
    },
    Average { n_map: usize, h: usize, w: usize },
}

impl RowReduceSaved {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match *self {
            RowReduceSaved::Max { n_map, h, w, .. } | RowReduceSaved::Average { n_map, h, w } => {
                (n_map, h, w)
            }
        }
    }

    pub fn mode(&self) -> PoolMode {
        match self {
            RowReduceSaved::Max { .. } => PoolMode::Max,
            RowReduceSaved::Average { .. } => PoolMode::Average,
        }
    }
}

/// Collapses every row of every map to one value. Output element `m * h + r`
/// is the max (or mean) of row `r` of map `m`; the result length is
/// `n_map * h` regardless of width.
pub fn row_reduce<T: Scalar>(
    maps: &FeatureMapStack<T>,
    mode: PoolMode,
) -> (FlatVector<T>, RowReduceSaved) {
    let (n_map, h, w) = maps.shape();
    let rows = maps.data().chunks_exact(w);
    match mode {
        PoolMode::Max => {
            let mut out = Vec::with_capacity(n_map * h);
            let mut idx = Vec::with_capacity(n_map * h);
            for row in rows {
                let mut best = 0usize;
                let mut best_v = row[0];
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                out.push(best_v);
                idx.push(best as u32);
            }
            (
                FlatVector::new(out),
                RowReduceSaved::Max {
                    n_map,
                    h,
                    w,
                    argmax: idx,
                },
            )
        }
        PoolMode::Average => {
            let inv = T::one() / T::from_usize_lossy(w);
            let out = rows.map(|row| row.iter().copied().sum::<T>() * inv).collect();
            (FlatVector::new(out), RowReduceSaved::Average { n_map, h, w })
        }
    }
}

/// Adjoint of [`row_reduce`]: max routes each row's gradient to its saved
/// winner, average spreads `g / w` over the row.
pub fn row_reduce_backward<T: Scalar>(
    grad_out: &FlatVector<T>,
    saved: &RowReduceSaved,
) -> Result<FeatureMapStack<T>> {
    let (n_map, h, w) = saved.input_shape();
    if grad_out.len() != n_map * h {
        return Err(Error::contract(format!(
            "row_reduce_backward: gradient length {} != n_map*h = {}",
            grad_out.len(),
            n_map * h
        )));
    }
    let mut grad = FeatureMapStack::zeros(n_map, h, w)?;
    let rows = grad.data_mut().chunks_exact_mut(w);
    match saved {
        RowReduceSaved::Max { argmax, .. } => {
            for ((row, &g), &c) in rows.zip(grad_out.data()).zip(argmax) {
                row[c as usize] = g;
            }
        }
        RowReduceSaved::Average { .. } => {
            let inv = T::one() / T::from_usize_lossy(w);
            for (row, &g) in rows.zip(grad_out.data()) {
                let share = g * inv;
                row.iter_mut().for_each(|v| *v = share);
            }
        }
    }
    Ok(grad)
}

/// Joins vectors end to end, preserving order.
pub fn concat<T: Scalar>(vs: &[&FlatVector<T>]) -> Result<FlatVector<T>> {
    if vs.is_empty() {
        return Err(Error::contract("concat of an empty sequence"));
    }
    let total = vs.iter().map(|v| v.len()).sum();
    let mut out = Vec::with_capacity(total);
    for v in vs {
        out.extend_from_slice(v.data());
    }
    Ok(FlatVector::new(out))
}

/// Splits a concatenated vector back into pieces of the given lengths.
pub fn split<T: Scalar>(v: &FlatVector<T>, lengths: &[usize]) -> Result<Vec<FlatVector<T>>> {
    if lengths.iter().sum::<usize>() != v.len() {
        return Err(Error::contract("split lengths do not cover the vector"));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        out.push(v.slice(start, len)?);
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> FeatureMapStack<f64> {
        FeatureMapStack::from_rows(&[vec![1.0, 5.0, 2.0], vec![0.0, -1.0, 3.0]]).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(FeatureMapStack::<f32>::zeros(0, 1, 1).is_err());
        assert!(FeatureMapStack::<f32>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn max_reduction_of_512_maps_has_length_512() {
        let maps = FeatureMapStack::<f32>::filled(512, 1, 37, 0.25).unwrap();
        let (v, _) = row_reduce(&maps, PoolMode::Max);
        assert_eq!(v.len(), 512);
    }

    #[test]
    fn constant_map_reduces_to_constant() {
        let maps = FeatureMapStack::<f64>::filled(1, 2, 3, 1.75).unwrap();
        for mode in [PoolMode::Max, PoolMode::Average] {
            let (v, _) = row_reduce(&maps, mode);
            assert_eq!(v.data(), &[1.75, 1.75]);
        }
    }

    #[test]
    fn reduces_example_rows() {
        // brute-force scan oracle
        let rows = [[1.0f64, 5.0, 2.0], [0.0, -1.0, 3.0]];
        let want_max: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect();
        let want_avg: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / 3.0).collect();
        assert_eq!(want_max, vec![5.0, 3.0]);

        let (max, _) = row_reduce(&example(), PoolMode::Max);
        assert_eq!(max.data(), want_max.as_slice());
        let (avg, _) = row_reduce(&example(), PoolMode::Average);
        assert!((avg.data()[0] - 8.0 / 3.0).abs() < 1e-15);
        assert!((avg.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((avg.data()[0] - want_avg[0]).abs() < 1e-15);
    }

    #[test]
    fn max_backward_routes_to_winner() {
        let (_, saved) = row_reduce(&example(), PoolMode::Max);
        let g = row_reduce_backward(&FlatVector::new(vec![1.0, 1.0]), &saved).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

        // central differences on each input cell
        let eps = 1e-6;
        for i in 0..6 {
            let mut plus = example();
            plus.data_mut()[i] += eps;
            let mut minus = example();
            minus.data_mut()[i] -= eps;
            let f = |m: &FeatureMapStack<f64>| row_reduce(m, PoolMode::Max).0.data().iter().sum::<f64>();
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6, "cell {i}: fd {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn average_backward_splits_uniformly() {
        let (_, saved) = row_reduce(&example(), PoolMode::Average);
        let g = row_reduce_backward(&FlatVector::new(vec![3.0, 0.0]), &saved).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        for mode in [PoolMode::Max, PoolMode::Average] {
            let (_, saved) = row_reduce(&example(), mode);
            let g = row_reduce_backward(&FlatVector::<f64>::zeros(2), &saved).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_length_mismatch() {
        let (_, saved) = row_reduce(&example(), PoolMode::Max);
        let err = row_reduce_backward(&FlatVector::<f64>::zeros(3), &saved).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn max_ties_pick_lowest_column() {
        let maps = FeatureMapStack::from_rows(&[vec![2.0f32, 7.0, 7.0, 1.0]]).unwrap();
        let (_, saved) = row_reduce(&maps, PoolMode::Max);
        match saved {
            RowReduceSaved::Max { argmax, .. } => assert_eq!(argmax, vec![1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn concat_examples() {
        let a = FlatVector::new(vec![1.0f32, 2.0]);
        let b = FlatVector::new(vec![3.0f32]);
        assert_eq!(concat(&[&a, &b]).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(concat(&[&a]).unwrap(), a);
        assert!(concat::<f32>(&[]).is_err());

        let parts: Vec<FlatVector<f32>> =
            [1792, 1152, 512].iter().map(|&n| FlatVector::zeros(n)).collect();
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(concat(&refs).unwrap().len(), 3456);
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), Some(1));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    fn stack_strategy() -> impl Strategy<Value = FeatureMapStack<f64>> {
        (1usize..5, 1usize..5, 1usize..12).prop_flat_map(|(n, h, w)| {
            proptest::collection::vec(-10.0f64..10.0, n * h * w)
                .prop_map(move |d| FeatureMapStack::from_vec(n, h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn concat_then_split_recovers_parts(
            parts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 1..8), 1..5)
        ) {
            let vs: Vec<FlatVector<f64>> = parts.iter().cloned().map(FlatVector::new).collect();
            let refs: Vec<_> = vs.iter().collect();
            let joined = concat(&refs).unwrap();
            let lens: Vec<usize> = vs.iter().map(|v| v.len()).collect();
            prop_assert_eq!(split(&joined, &lens).unwrap(), vs);
        }

        #[test]
        fn max_is_bounded_by_map_max(maps in stack_strategy()) {
            let (v, _) = row_reduce(&maps, PoolMode::Max);
            prop_assert_eq!(v.len(), maps.n_map() * maps.height());
            for m in 0..maps.n_map() {
                let top = maps.map(m).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let pooled = &v.data()[m * maps.height()..(m + 1) * maps.height()];
                prop_assert!(pooled.iter().all(|&p| p <= top));
                prop_assert!(pooled.iter().any(|&p| p == top));
            }
        }

        #[test]
        fn backward_matches_directional_derivative(
            maps in stack_strategy(),
            dir_seed in proptest::collection::vec(-1.0f64..1.0, 64),
            avg in any::<bool>(),
        ) {
            let mode = if avg { PoolMode::Average } else { PoolMode::Max };
            let (out, saved) = row_reduce(&maps, mode);
            let grad_out = FlatVector::new((0..out.len()).map(|i| dir_seed[i % 64] + 0.5).collect());
            let grad_in = row_reduce_backward(&grad_out, &saved).unwrap();
            // direction in input space
            let dir: Vec<f64> = (0..maps.data().len()).map(|i| dir_seed[(i * 7 + 3) % 64]).collect();
            let analytic: f64 = grad_in.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
            let eps = 1e-6;
            let shifted = |s: f64| {
                let mut m = maps.clone();
                m.data_mut().iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d);
                let (o, _) = row_reduce(&m, mode);
                o.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            // skip draws where a row's winner is within eps of a runner-up
            let near_tie = mode == PoolMode::Max && maps.data().chunks(maps.width()).any(|row| {
                let mut s: Vec<f64> = row.to_vec();
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                s.len() > 1 && (s[0] - s[1]) < 1e-4
            });
            if !near_tie {
                // the map is piecewise linear, so the only error is cancellation in the sums
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                prop_assert!(rel < 1e-6, "analytic {} numeric {} rel {}", analytic, numeric, rel);
            }
        }
    }
}
