use crate::error::{Error, Result};
use crate::tensor::PoolMode;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_INPUT_HEIGHT: usize = 32;
pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_CHANNELS: [usize; 4] = [96, 256, 384, 512];
pub const DEFAULT_FC: [usize; 2] = [1024, 1024];
pub const PATCH_SIZE: usize = 32;

/// One of the three pooling taps. `Ssp1` reads conv2's pooled maps,
/// `Ssp2` conv3's pooled maps, `Ssp3` conv4's rectified maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SspStage {
    #[serde(rename = "ssp-1")]
    Ssp1,
    #[serde(rename = "ssp-2")]
    Ssp2,
    #[serde(rename = "ssp-3")]
    Ssp3,
}

impl SspStage {
    pub const ALL: [SspStage; 3] = [SspStage::Ssp1, SspStage::Ssp2, SspStage::Ssp3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["ssp-1", "ssp-2", "ssp-3"][self.index()]
    }

    /// Name of the graph node this stage pools.
    pub fn tap(self) -> &'static str {
        ["pool2", "pool3", "relu4"][self.index()]
    }
}

impl fmt::Display for SspStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyper-parameters of the pooling network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MspnConfig {
    /// Output maps of conv1..conv4.
    pub channels: [usize; 4],
    /// Hidden widths of fc1 and fc2.
    pub fc_widths: [usize; 2],
    pub ssp_mode: PoolMode,
    /// Enabled taps, indexed by [`SspStage::index`].
    pub enabled: [bool; 3],
    pub input_height: usize,
    pub in_channels: usize,
    pub n_classes: usize,
}

impl Default for MspnConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            fc_widths: DEFAULT_FC,
            ssp_mode: PoolMode::Max,
            enabled: [true; 3],
            input_height: DEFAULT_INPUT_HEIGHT,
            in_channels: 1,
            n_classes: DEFAULT_CLASSES,
        }
    }
}

impl MspnConfig {
    pub fn with_stages(mut self, stages: &[SspStage]) -> Self {
        self.enabled = [false; 3];
        for s in stages {
            self.enabled[s.index()] = true;
        }
        self
    }

    pub fn stages(&self) -> Vec<SspStage> {
        SspStage::ALL.into_iter().filter(|s| self.enabled[s.index()]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::config("at least one ssp stage must be enabled"));
        }
        validate_common(&self.channels, &self.fc_widths, self.in_channels, self.n_classes)?;
        let heights = stage_heights(self.input_height)
            .ok_or_else(|| Error::config(format!("input height {} too small for the conv chain", self.input_height)))?;
        if heights.iter().any(|&h| h == 0) {
            return Err(Error::config(format!(
                "input height {} collapses a stage to zero rows",
                self.input_height
            )));
        }
        Ok(())
    }

    /// Length of the concatenated pooled descriptor: sum over enabled taps of
    /// `channels * map height`.
    pub fn concat_dim(&self) -> usize {
        let heights = stage_heights(self.input_height).unwrap_or([0; 4]);
        let per_stage = [
            self.channels[1] * heights[1],
            self.channels[2] * heights[2],
            self.channels[3] * heights[3],
        ];
        SspStage::ALL
            .iter()
            .filter(|s| self.enabled[s.index()])
            .map(|s| per_stage[s.index()])
            .sum()
    }
}

/// Hyper-parameters of the fixed-size patch classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchNetConfig {
    pub channels: [usize; 4],
    pub fc_widths: [usize; 2],
    pub patch_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            fc_widths: DEFAULT_FC,
            patch_size: PATCH_SIZE,
            in_channels: 1,
            n_classes: DEFAULT_CLASSES,
        }
    }
}

impl PatchNetConfig {
    /// Mirrors the pooling network's conv and fc sizes.
    pub fn mirroring(cfg: &MspnConfig) -> Self {
        Self {
            channels: cfg.channels,
            fc_widths: cfg.fc_widths,
            patch_size: PATCH_SIZE,
            in_channels: cfg.in_channels,
            n_classes: cfg.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(&self.channels, &self.fc_widths, self.in_channels, self.n_classes)?;
        let ok = stage_heights(self.patch_size).is_some_and(|h| h.iter().all(|&v| v > 0));
        if !ok {
            return Err(Error::config(format!("patch size {} too small for the conv chain", self.patch_size)));
        }
        Ok(())
    }

    /// Flattened length of conv4's output.
    pub fn flatten_dim(&self) -> usize {
        let side = stage_heights(self.patch_size).map_or(0, |h| h[3]);
        self.channels[3] * side * side
    }
}

fn validate_common(channels: &[usize; 4], fc: &[usize; 2], in_channels: usize, n_classes: usize) -> Result<()> {
    if channels.iter().chain(fc).any(|&c| c == 0) || in_channels == 0 {
        return Err(Error::config("channel counts and fc widths must be positive"));
    }
    if n_classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    Ok(())
}

/// Kernel and padding of conv1..conv4 (square, stride 1).
pub const CONV_CHAIN: [(usize, usize); 4] = [(3, 0), (3, 1), (3, 1), (3, 0)];

fn conv_extent(x: usize, k: usize, pad: usize) -> Option<usize> {
    (x + 2 * pad).checked_sub(k).map(|v| v + 1).filter(|&v| v > 0)
}

/// Extent after each stage (pool1, pool2, pool3, conv4) along one axis,
/// or `None` if the chain cannot be applied.
pub fn stage_extents(x: usize) -> Option<[usize; 4]> {
    let mut out = [0; 4];
    let mut cur = x;
    for (i, &(k, pad)) in CONV_CHAIN.iter().enumerate() {
        cur = conv_extent(cur, k, pad)?;
        if i < 3 {
            if cur < 2 {
                return None;
            }
            cur /= 2;
        }
        out[i] = cur;
    }
    Some(out)
}

/// Map heights after each stage; `[15, 7, 3, 1]` for height 32.
pub fn stage_heights(h: usize) -> Option<[usize; 4]> {
    stage_extents(h)
}

/// Smallest input width the conv chain accepts.
pub fn min_input_width() -> usize {
    (1..).find(|&w| stage_extents(w).is_some()).expect("conv chain accepts some width")
}

/// Ablation rows, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Variant1,
    Variant2,
    Variant3,
    Variant4,
    Variant5,
    Mspn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Variant1,
        Variant::Variant2,
        Variant::Variant3,
        Variant::Variant4,
        Variant::Variant5,
        Variant::Mspn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Variant1 => "Variant-1",
            Variant::Variant2 => "Variant-2",
            Variant::Variant3 => "Variant-3",
            Variant::Variant4 => "Variant-4",
            Variant::Variant5 => "Variant-5",
            Variant::Mspn => "MSPN",
        }
    }

    pub fn stages(self) -> &'static [SspStage] {
        use SspStage::*;
        match self {
            Variant::Variant1 => &[Ssp1],
            Variant::Variant2 => &[Ssp2],
            Variant::Variant3 => &[Ssp3],
            Variant::Variant4 => &[Ssp2, Ssp3],
            Variant::Variant5 => &[Ssp1, Ssp2],
            Variant::Mspn => &[Ssp1, Ssp2, Ssp3],
        }
    }

    /// e.g. `"ssp-2 + ssp-3"`.
    pub fn configuration(self) -> String {
        self.stages().iter().map(|s| s.name()).collect::<Vec<_>>().join(" + ")
    }

    /// Applies this row's tap set to `base`; the starred row also gets the
    /// reduced fc2 width from `opts`.
    pub fn config(self, base: &MspnConfig, opts: &VariantOptions) -> MspnConfig {
        let mut cfg = base.clone().with_stages(self.stages());
        if opts.starred == Some(self) {
            cfg.fc_widths[1] = opts.starred_fc2;
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm || norm == format!("v{}", v.ordinal()))
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (expected Variant-1..Variant-5 or MSPN)")))
    }
}

impl Variant {
    fn ordinal(self) -> usize {
        Variant::ALL.iter().position(|&v| v == self).unwrap() + 1
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which row carries the reduced fc2 width, and what that width is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantOptions {
    pub starred: Option<Variant>,
    pub starred_fc2: usize,
}

impl Default for VariantOptions {
    fn default() -> Self {
        Self {
            starred: Some(Variant::Variant3),
            starred_fc2: 512,
        }
    }
}
