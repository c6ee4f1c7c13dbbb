//! Patch-averaging baseline: a fixed-size 32x32 classifier applied to random
//! square crops, whose softmax outputs are averaged per image.

use crate::data::{resize_to_height, sample_patches, GrayImage, Sample, PATCH_SOURCE_HEIGHT};
use crate::error::{Error, Result};
use crate::graph::{Architecture, NetworkGraph, PatchNetConfig};
use crate::optim::{train_with_callback, EpochRecord, TrainConfig, TrainHistory, Trainable};
use crate::params::Gradients;
use crate::scalar::Scalar;
use crate::tensor::{argmax, FeatureMapStack};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used for test-time patch sampling unless the caller picks another.
pub const DEFAULT_EVAL_SEED: u64 = 0x5eed;

/// A network built with [`Architecture::Patch`]; accepts only square
/// `patch_size` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchNet<T> {
    graph: NetworkGraph<T>,
}

impl<T: Scalar> PatchNet<T> {
    pub fn new(cfg: PatchNetConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            graph: NetworkGraph::patch_net(cfg, seed)?,
        })
    }

    /// Wraps an existing graph, rejecting anything but a patch network.
    pub fn from_graph(graph: NetworkGraph<T>) -> Result<Self> {
        match graph.architecture() {
            Architecture::Patch(_) => Ok(Self { graph }),
            Architecture::Mspn(_) => Err(Error::config("checkpoint holds a pooling network, not a patch network")),
        }
    }

    pub fn graph(&self) -> &NetworkGraph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut NetworkGraph<T> {
        &mut self.graph
    }

    pub fn into_graph(self) -> NetworkGraph<T> {
        self.graph
    }

    pub fn patch_size(&self) -> usize {
        match self.graph.architecture() {
            Architecture::Patch(c) => c.patch_size,
            Architecture::Mspn(_) => unreachable!("PatchNet always wraps a patch architecture"),
        }
    }
}

impl<T: Scalar> Trainable<T> for PatchNet<T> {
    type Input = FeatureMapStack<T>;

    fn params(&self) -> Vec<&[T]> {
        self.graph.params()
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.graph.params_mut()
    }

    fn accumulate(&self, x: &Self::Input, label: usize, grads: &mut Gradients<T>) -> Result<T> {
        self.graph.loss_and_grads_into(x, label, grads)
    }

    fn predict_class(&self, x: &Self::Input) -> Result<usize> {
        Ok(self.graph.forward(x)?.predicted_class())
    }
}

/// One softmax row per patch, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction<T> {
    pub rows: Vec<Vec<T>>,
}

impl<T: Scalar> PatchPrediction<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn predict_patches<T: Scalar>(net: &PatchNet<T>, patches: &[GrayImage]) -> Result<PatchPrediction<T>> {
    let side = net.patch_size();
    let rows = patches
        .iter()
        .map(|p| {
            if p.height() != side || p.width() != side {
                return Err(Error::contract(format!(
                    "patch is {}x{}, network expects {side}x{side}",
                    p.height(),
                    p.width()
                )));
            }
            net.graph.predict(&p.to_maps())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchPrediction { rows })
}

/// Arithmetic mean of the rows, summed in row order, and its argmax (lowest
/// index on ties).
pub fn average_probs<T: Scalar>(pred: &PatchPrediction<T>) -> Result<(Vec<T>, usize)> {
    let first = pred
        .rows
        .first()
        .ok_or_else(|| Error::contract("cannot average an empty patch prediction"))?;
    let k = first.len();
    if pred.rows.iter().any(|r| r.len() != k) {
        return Err(Error::contract("patch probability rows differ in length"));
    }
    let mut mean = vec![T::zero(); k];
    for row in &pred.rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = T::one() / T::from_usize_lossy(pred.rows.len());
    mean.iter_mut().for_each(|m| *m *= inv);
    let class = argmax(&mean).ok_or_else(|| Error::contract("empty probability rows"))?;
    Ok((mean, class))
}

/// Rescales to the patch source height and draws that image's patches.
pub fn image_patches<R: rand::Rng + ?Sized>(image: &GrayImage, rng: &mut R) -> Result<Vec<GrayImage>> {
    sample_patches(&resize_to_height(image, PATCH_SOURCE_HEIGHT)?, rng)
}

/// Generator for image `index`: one ChaCha stream per image, so results do
/// not depend on iteration order.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Every patch of every sample, labelled with its parent's label.
pub fn patch_dataset<T: Scalar>(samples: &[Sample], seed: u64) -> Result<Vec<(FeatureMapStack<T>, usize)>> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for p in image_patches(&s.image, &mut image_rng(seed, i))? {
            out.push((p.to_maps(), s.label));
        }
    }
    Ok(out)
}

/// Averaged class scores and predicted class for image `index` of a set.
pub fn predict_image<T: Scalar>(net: &PatchNet<T>, image: &GrayImage, seed: u64, index: usize) -> Result<(Vec<T>, usize)> {
    let patches = image_patches(image, &mut image_rng(seed, index))?;
    average_probs(&predict_patches(net, &patches)?)
}

/// Predicted class for every sample, patch sampling driven by `eval_seed`.
pub fn predict_images<T: Scalar>(net: &PatchNet<T>, samples: &[Sample], eval_seed: u64) -> Result<Vec<usize>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| predict_image(net, &s.image, eval_seed, i).map(|(_, c)| c))
        .collect()
}

/// Trains on patches drawn once from each split (the validation error that
/// drives the schedule is measured per patch). `cfg.seed` also seeds patch
/// sampling.
pub fn baseline_train<T: Scalar>(
    net: PatchNet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PatchNet<T>, TrainHistory)> {
    let train_patches = patch_dataset(train_set, cfg.seed)?;
    let val_patches = patch_dataset(val_set, cfg.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut net = net;
    train_with_callback(&mut net, &train_patches, &val_patches, cfg, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PatchNet<f64> {
        let cfg = PatchNetConfig {
            channels: [2, 3, 3, 4],
            fc_widths: [5, 5],
            ..PatchNetConfig::default()
        };
        PatchNet::new(cfg, 3).unwrap()
    }

    fn patch(v: f32) -> GrayImage {
        GrayImage::new(32, 32, (0..1024).map(|i| ((i % 13) as f32 / 12.0) * v).collect()).unwrap()
    }

    #[test]
    fn averaging_example() {
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        a[..2].copy_from_slice(&[0.2, 0.8]);
        b[..2].copy_from_slice(&[0.6, 0.4]);
        let (y, c) = average_probs(&PatchPrediction { rows: vec![a, b] }).unwrap();
        assert!((y[0] - 0.4f64).abs() < 1e-15 && (y[1] - 0.6).abs() < 1e-15);
        assert!(y[2..].iter().all(|&v| v == 0.0));
        assert_eq!(c, 1);
    }

    #[test]
    fn single_row_is_identity() {
        let row = vec![0.1f64, 0.3, 0.6];
        let (y, c) = average_probs(&PatchPrediction { rows: vec![row.clone()] }).unwrap();
        assert_eq!(y, row);
        assert_eq!(c, 2);
    }

    #[test]
    fn empty_rejected() {
        let err = average_probs(&PatchPrediction::<f64> { rows: vec![] }).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let (_, c) = average_probs(&PatchPrediction {
            rows: vec![vec![0.25f64, 0.5, 0.25], vec![0.5, 0.25, 0.25]],
        })
        .unwrap();
        assert_eq!(c, 0);
    }

    #[test]
    fn predict_patches_arity_and_sums() {
        let net = tiny();
        let ps = vec![patch(1.0), patch(0.5), patch(1.0)];
        let pred = predict_patches(&net, &ps).unwrap();
        assert_eq!(pred.len(), 3);
        assert_eq!(pred.rows[0], pred.rows[2]);
        for r in &pred.rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_patch_size_rejected() {
        let net = tiny();
        let bad = GrayImage::filled(32, 33, 0.5).unwrap();
        assert!(matches!(predict_patches(&net, &[bad]), Err(Error::Contract(_))));
    }

    #[test]
    fn from_graph_rejects_pooling_network() {
        let cfg = crate::MspnConfig {
            channels: [2, 2, 2, 2],
            fc_widths: [3, 3],
            ..crate::MspnConfig::default()
        };
        let g = NetworkGraph::<f64>::mspn(cfg, 0).unwrap();
        assert!(matches!(PatchNet::from_graph(g), Err(Error::Config(_))));
    }

    #[test]
    fn patches_inherit_labels_and_are_reproducible() {
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                image: GrayImage::new(32, 40 + 30 * i, vec![0.5; 32 * (40 + 30 * i)]).unwrap(),
                label: i + 4,
                source_id: format!("s{i}"),
            })
            .collect();
        let a = patch_dataset::<f32>(&samples, 11).unwrap();
        let b = patch_dataset::<f32>(&samples, 11).unwrap();
        assert_eq!(a, b);
        // widths become 50, 88, 125 at height 40 -> 3, 5, 7 patches
        let labels: Vec<usize> = a.iter().map(|p| p.1).collect();
        assert_eq!(labels, [vec![4; 3], vec![5; 5], vec![6; 7]].concat());
    }

    #[test]
    fn whole_image_prediction_reproducible() {
        let net = tiny();
        let img = GrayImage::new(32, 90, (0..32 * 90).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let a = predict_image(&net, &img, 5, 0).unwrap();
        let b = predict_image(&net, &img, 5, 0).unwrap();
        assert_eq!(a, b);
    }

    fn distribution(k: usize) -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        use proptest::prelude::*;
        proptest::collection::vec(0.01f64..1.0, k).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest::proptest! {
        #[test]
        fn mean_is_permutation_invariant_and_convex(
            rows in proptest::collection::vec(distribution(10), 1..12),
            shift in 0usize..12,
        ) {
            let (y, _) = average_probs(&PatchPrediction { rows: rows.clone() }).unwrap();
            let mut rotated = rows.clone();
            let n = rotated.len();
            rotated.rotate_left(shift % n);
            rotated.reverse();
            let (y2, _) = average_probs(&PatchPrediction { rows: rotated }).unwrap();
            for k in 0..10 {
                proptest::prop_assert!((y[k] - y2[k]).abs() < 1e-12);
                let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(lo - 1e-15 <= y[k] && y[k] <= hi + 1e-15);
            }
            proptest::prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
