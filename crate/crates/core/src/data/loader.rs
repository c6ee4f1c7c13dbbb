use super::image::{pad_to_min_width, resize_to_height, GrayImage};
use super::Sample;
use crate::error::{Error, Result};
use crate::graph::{min_input_width, DEFAULT_INPUT_HEIGHT};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

pub const SIW10_CLASSES: [&str; 10] = [
    "Arabic", "Chinese", "English", "Greek", "Hebrew", "Japanese", "Korean", "Russian", "Thai", "Tibetan",
];
/// Published per-class training counts, in lexicographic class order.
pub const SIW10_TRAIN_COUNTS: [usize; 10] = [503, 809, 725, 522, 770, 717, 1064, 532, 1726, 677];
pub const SIW10_TEST_COUNTS: [usize; 10] = [500; 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Target height and minimum width applied to every loaded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preprocess {
    pub height: usize,
    pub min_width: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            height: DEFAULT_INPUT_HEIGHT,
            min_width: min_input_width(),
        }
    }
}

impl Preprocess {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        Ok(pad_to_min_width(&resize_to_height(img, self.height)?, self.min_width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
    /// Files that could not be decoded.
    pub skipped: usize,
    /// Per-class counts equal the published SIW-10 numbers for this split.
    pub siw10_verified: bool,
}

impl DatasetManifest {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<(Vec<Sample>, DatasetManifest)> {
    load_dataset_with(root, split, &Preprocess::default())
}

/// Reads `root/<split>/<class>/<file>.{png,pgm}`. Classes are the
/// sub-directories in lexicographic order; labels are their indices.
pub fn load_dataset_with(
    root: impl AsRef<Path>,
    split: Split,
    prep: &Preprocess,
) -> Result<(Vec<Sample>, DatasetManifest)> {
    let root = root.as_ref();
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", split_dir.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&split_dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::config(format!("no class directories under {}", split_dir.display())));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut counts = Vec::with_capacity(class_dirs.len());
    let mut skipped = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::config(format!("class directory {} is not UTF-8", dir.display())))?
            .to_string();
        let mut n = 0;
        for path in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
            match GrayImage::open(&path) {
                Ok(img) => {
                    let source_id = format!(
                        "{}/{}/{}",
                        split.dir_name(),
                        name,
                        path.file_name().and_then(|f| f.to_str()).unwrap_or_default()
                    );
                    samples.push(Sample {
                        image: prep.apply(&img)?,
                        label,
                        source_id,
                    });
                    n += 1;
                }
                Err(e) => {
                    log::warn!("skipping unreadable image: {e}");
                    skipped += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::config(format!("class {name:?} has no readable images in {}", dir.display())));
        }
        class_names.push(name);
        counts.push(n);
    }
    let published: &[usize] = match split {
        Split::Train => &SIW10_TRAIN_COUNTS,
        Split::Test => &SIW10_TEST_COUNTS,
    };
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        siw10_verified: counts == published,
        class_names,
        counts,
        skipped,
    };
    Ok((samples, manifest))
}

/// Writes samples as 8-bit PNGs under `root/<split>/<class>/`.
pub fn save_dataset(root: impl AsRef<Path>, split: Split, samples: &[Sample], class_names: &[String]) -> Result<()> {
    let split_dir = root.as_ref().join(split.dir_name());
    for name in class_names {
        let dir = split_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = class_names
            .get(s.label)
            .ok_or_else(|| Error::contract(format!("label {} has no class name", s.label)))?;
        let file = Path::new(&s.source_id)
            .file_stem()
            .and_then(|f| f.to_str())
            .map_or_else(|| format!("{i:06}"), str::to_string);
        s.image.save(split_dir.join(name).join(format!("{file}.png")))?;
    }
    Ok(())
}

/// Holds out `frac` of each class (at least one sample when the class has
/// two or more), deterministically for a given seed. Both parts keep the
/// input order.
pub fn stratified_split(samples: &[Sample], frac: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut held = vec![false; samples.len()];
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == c).collect();
        if idx.len() < 2 {
            continue;
        }
        idx.shuffle(&mut rng);
        let k = ((frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in samples.iter().zip(held) {
        if h {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}
