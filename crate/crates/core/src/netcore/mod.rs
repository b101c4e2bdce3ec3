//! The toy pose network: a residual backbone whose normalization layers are
//! lighting-condition specific, topped by a feature-pyramid head (global
//! prediction) and a concatenating refinement head.

mod checkpoint;
mod lsbn;
mod model;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use lsbn::{lsbn_forward, Affine, BatchStats, BnParams, LsbnParams, NormLayer, RunningStats};
pub use model::{Binding, HeadOutput, Mode, NetOutput, ParamInfo, PoseNet, Prediction};

/// Number of body joints (CrowdPose convention).
pub const NUM_JOINTS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingCondition {
    LowLight,
    WellLit,
}

impl LightingCondition {
    /// 1 for low-light, 0 for well-lit.
    pub fn indicator(self) -> u8 {
        match self {
            LightingCondition::LowLight => 1,
            LightingCondition::WellLit => 0,
        }
    }

    pub fn from_indicator(lambda: u8) -> Result<Self> {
        match lambda {
            1 => Ok(LightingCondition::LowLight),
            0 => Ok(LightingCondition::WellLit),
            other => Err(Error::Contract(format!(
                "lighting indicator must be 0 or 1, got {other}"
            ))),
        }
    }
}

/// Feature extraction points: the stem convolution and the four residual stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerTag {
    C1,
    R1,
    R2,
    R3,
    R4,
}

impl LayerTag {
    pub const ALL: [LayerTag; 5] = [
        LayerTag::C1,
        LayerTag::R1,
        LayerTag::R2,
        LayerTag::R3,
        LayerTag::R4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::C1 => "C1",
            LayerTag::R1 => "R1",
            LayerTag::R2 => "R2",
            LayerTag::R3 => "R3",
            LayerTag::R4 => "R4",
        }
    }
}

impl std::str::FromStr for LayerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown layer tag `{s}`")))
    }
}

impl std::fmt::Display for LayerTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Activations `N x C x H x W` taken at one extraction point.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub layer: LayerTag,
    pub condition: LightingCondition,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, layer: LayerTag, condition: LightingCondition) -> Result<Self> {
        tensor.dims4()?;
        if !tensor.is_finite() {
            return Err(Error::Degenerate(format!(
                "feature map {layer} contains non-finite values"
            )));
        }
        Ok(FeatureMap {
            tensor,
            layer,
            condition,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Separate affine parameters and running statistics per lighting condition.
    Lsbn,
    /// A single shared batch normalization.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    pub blocks_per_stage: usize,
    pub pyramid_channels: usize,
    pub refine_channels: usize,
    pub n_joints: usize,
    pub norm: NormKind,
    pub momentum: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (256, 192),
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            stage_strides: [2, 2, 2, 2],
            blocks_per_stage: 1,
            pyramid_channels: 32,
            refine_channels: 16,
            n_joints: NUM_JOINTS,
            norm: NormKind::Lsbn,
            momentum: 0.1,
            eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small network for unit tests: 32x24 input, 4-channel stages.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: (32, 24),
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            stage_strides: [2, 2, 1, 1],
            pyramid_channels: 4,
            refine_channels: 3,
            ..ModelConfig::default()
        }
    }

    /// Sized for the synthetic benchmark scenes: 64x48 input, 16x12 heatmaps.
    pub fn benchmark() -> Self {
        ModelConfig {
            input_size: (64, 48),
            stem_channels: 8,
            stage_channels: [8, 16, 24, 32],
            stage_strides: [2, 2, 2, 1],
            pyramid_channels: 16,
            refine_channels: 8,
            ..ModelConfig::default()
        }
    }

    /// Spatial size of the heatmaps (a quarter of the input).
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }

    pub fn total_stride(&self) -> usize {
        2 * self.stage_strides.iter().product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints != NUM_JOINTS {
            return Err(Error::Config(format!(
                "n_joints must be {NUM_JOINTS}, got {}",
                self.n_joints
            )));
        }
        if self.stage_strides[0] != 2 {
            return Err(Error::Config(
                "the first stage must downsample by 2 so heatmaps are input/4".into(),
            ));
        }
        if self.stage_strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::Config("stage strides must be 1 or 2".into()));
        }
        let stride = self.total_stride();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the total stride {stride}"
            )));
        }
        if self.stem_channels == 0
            || self.stage_channels.contains(&0)
            || self.pyramid_channels == 0
            || self.refine_channels == 0
            || self.blocks_per_stage == 0
        {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
