//! Seeded synthetic text-line corpus: each class owns an alphabet of random
//! 8x8 binary glyphs, part of which is shared by every class.

use super::image::GrayImage;
use super::loader::{save_dataset, Split};
use super::Sample;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const GLYPH_SIZE: usize = 8;
pub const SYNTH_SPEC_FILE: &str = "synth_spec.json";
const CANVAS_HEIGHT: usize = 32;
/// Each glyph row is drawn this many pixels tall (8 rows -> 24 pixels).
const ROW_SCALE: usize = 3;
const TOP: usize = 4;
const MAX_JITTER: i64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    /// Glyphs available to each class, shared ones included.
    pub alphabet_size: usize,
    /// Fraction of each alphabet drawn from the pool common to all classes.
    pub shared_fraction: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Horizontal gap between glyphs is uniform in `1..=max_gap`.
    pub max_gap: usize,
    pub margin: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            alphabet_size: 12,
            shared_fraction: 0.3,
            min_len: 3,
            max_len: 12,
            max_gap: 4,
            margin: 4,
            noise: 0.08,
            train_per_class: 200,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn shared_glyphs(&self) -> usize {
        (self.shared_fraction * self.alphabet_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.shared_fraction) {
            return Err(Error::config(format!("shared fraction {} not in [0, 1)", self.shared_fraction)));
        }
        if self.alphabet_size == 0 || self.shared_glyphs() >= self.alphabet_size {
            return Err(Error::config(format!(
                "alphabet of {} glyphs cannot hold a shared pool of {} plus class-specific glyphs",
                self.alphabet_size,
                self.shared_glyphs()
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("text length range must be positive and ordered"));
        }
        if self.n_classes < 2 || self.max_gap == 0 || self.noise < 0.0 {
            return Err(Error::config("need >= 2 classes, a positive gap and non-negative noise"));
        }
        Ok(())
    }

    /// Narrowest and widest image the renderer can produce.
    pub fn width_bounds(&self) -> (usize, usize) {
        let lo = self.min_len * GLYPH_SIZE + (self.min_len - 1) + 2 * self.margin;
        let hi = self.max_len * GLYPH_SIZE + (self.max_len - 1) * self.max_gap + 2 * self.margin;
        (lo, hi)
    }
}

type Glyph = [u8; GLYPH_SIZE];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Glyph indices each class may draw from (into the global glyph table).
    pub alphabets: Vec<Vec<usize>>,
}

fn random_glyph<R: Rng>(rng: &mut R) -> Glyph {
    loop {
        let mut g = [0u8; GLYPH_SIZE];
        for row in &mut g {
            *row = rng.gen();
        }
        let ink: u32 = g.iter().map(|r| r.count_ones()).sum();
        if (16..=40).contains(&ink) {
            return g;
        }
    }
}

fn render<R: Rng>(rng: &mut R, spec: &SynthSpec, glyphs: &[Glyph], alphabet: &[usize], noise: &Normal<f64>) -> GrayImage {
    let n = rng.gen_range(spec.min_len..=spec.max_len);
    let picks: Vec<usize> = (0..n).map(|_| *alphabet.choose(rng).expect("non-empty alphabet")).collect();
    let gaps: Vec<usize> = (1..n).map(|_| rng.gen_range(1..=spec.max_gap)).collect();
    let width = 2 * spec.margin + n * GLYPH_SIZE + gaps.iter().sum::<usize>();
    let background = rng.gen_range(0.0..0.35);
    let ink = rng.gen_range(0.65..1.0);
    let mut px = vec![background; CANVAS_HEIGHT * width];
    let mut x = spec.margin;
    for (k, &g) in picks.iter().enumerate() {
        let top = (TOP as i64 + rng.gen_range(-MAX_JITTER..=MAX_JITTER)) as usize;
        for (r, bits) in glyphs[g].iter().enumerate() {
            for c in 0..GLYPH_SIZE {
                if bits & (1 << c) != 0 {
                    for dy in 0..ROW_SCALE {
                        px[(top + r * ROW_SCALE + dy) * width + x + c] = ink;
                    }
                }
            }
        }
        x += GLYPH_SIZE + gaps.get(k).copied().unwrap_or(0);
    }
    for p in &mut px {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let mut img = GrayImage::new(CANVAS_HEIGHT, width, px.into_iter().map(|v| v as f32).collect())
        .expect("canvas is non-empty");
    img.quantize();
    img
}

/// Generates a corpus fully determined by `spec.seed`. Pixels are quantised to
/// 8-bit levels so that writing and re-reading the corpus is lossless.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_shared = spec.shared_glyphs();
    let n_own = spec.alphabet_size - n_shared;
    let total = n_shared + spec.n_classes * n_own;
    let mut seen = HashSet::new();
    let mut glyphs = Vec::with_capacity(total);
    while glyphs.len() < total {
        let g = random_glyph(&mut rng);
        if seen.insert(g) {
            glyphs.push(g);
        }
    }
    let alphabets: Vec<Vec<usize>> = (0..spec.n_classes)
        .map(|c| (0..n_shared).chain(n_shared + c * n_own..n_shared + (c + 1) * n_own).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let class_names: Vec<String> = (0..spec.n_classes).map(|c| format!("script-{c}")).collect();
    let mut make = |split: Split, per_class: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * spec.n_classes);
        for (c, alphabet) in alphabets.iter().enumerate() {
            for i in 0..per_class {
                out.push(Sample {
                    image: render(&mut rng, spec, &glyphs, alphabet, &noise),
                    label: c,
                    source_id: format!("{split}/{}/{i:05}.png", class_names[c]),
                });
            }
        }
        out
    };
    let train = make(Split::Train, spec.train_per_class);
    let test = make(Split::Test, spec.test_per_class);
    Ok(SynthCorpus {
        spec: spec.clone(),
        class_names,
        train,
        test,
        alphabets,
    })
}

/// Writes `out/{train,test}/<class>/*.png` and the generator settings beside them.
pub fn write_synth(out: impl AsRef<Path>, corpus: &SynthCorpus) -> Result<()> {
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_dataset(out, Split::Train, &corpus.train, &corpus.class_names)?;
    save_dataset(out, Split::Test, &corpus.test, &corpus.class_names)?;
    let path = out.join(SYNTH_SPEC_FILE);
    let json = serde_json::to_string_pretty(&corpus.spec)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
