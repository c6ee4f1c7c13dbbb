//! Dataset ingestion, preprocessing, the synthetic corpus and patch sampling.

mod image;
mod loader;
mod patches;
mod synth;

pub use self::image::{pad_to_min_width, resize_bilinear, resize_to_height, scaled_width, GrayImage};
pub use loader::{
    load_dataset, load_dataset_with, save_dataset, stratified_split, DatasetManifest, Preprocess, Split,
    SIW10_CLASSES, SIW10_TEST_COUNTS, SIW10_TRAIN_COUNTS,
};
pub use patches::{patch_count, sample_patches, PATCH_MAX_SIDE, PATCH_MIN_SIDE, PATCH_SOURCE_HEIGHT};
pub use synth::{synth_generate, write_synth, SynthCorpus, SynthSpec, GLYPH_SIZE, SYNTH_SPEC_FILE};

use crate::scalar::Scalar;
use crate::tensor::FeatureMapStack;

/// A labelled, preprocessed image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
    pub source_id: String,
}

impl Sample {
    pub fn to_input<T: Scalar>(&self) -> (FeatureMapStack<T>, usize) {
        (self.image.to_maps(), self.label)
    }
}

/// Network inputs for a whole split.
pub fn to_inputs<T: Scalar>(samples: &[Sample]) -> Vec<(FeatureMapStack<T>, usize)> {
    samples.iter().map(Sample::to_input).collect()
}
