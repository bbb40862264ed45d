use serde::{Deserialize, Serialize};

use crate::disparity::{make_bins_with, BinSpacing, DisparityBins};
use crate::error::{Error, Result};

/// Residual block flavour of the encoder stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a four-fold channel expansion.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthNetConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the three stem convolutions.
    pub stem_widths: [usize; 3],
    pub block: BlockKind,
    /// Residual blocks per stage.
    pub stage_blocks: [usize; 4],
    /// Output channels per stage.
    pub encoder_widths: [usize; 4],
    /// Dilation per stage. Stage 2 halves the resolution, the others keep it.
    pub dilations: [usize; 4],
    /// Channels `N` of the context module output.
    pub attention_channels: usize,
    /// Number of disparity bins `K`.
    pub ddv_bins: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub bin_spacing: BinSpacing,
    /// Widths of the three decoder stages, coarse to fine.
    pub decoder_widths: [usize; 3],
    pub use_attention: bool,
    pub use_ddv: bool,
    /// Divide attention scores by `sqrt(N)` before the softmax.
    pub scale_scores: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Encoder resolution divisor of the bottleneck.
pub const BOTTLENECK_STRIDE: usize = 8;

impl DepthNetConfig {
    /// Full-size network at 640×192.
    pub fn full() -> Self {
        Self {
            input_height: 192,
            input_width: 640,
            stem_widths: [64, 64, 128],
            block: BlockKind::Bottleneck,
            stage_blocks: [3, 4, 23, 3],
            encoder_widths: [256, 512, 1024, 2048],
            dilations: [1, 1, 2, 4],
            attention_channels: 512,
            ddv_bins: 128,
            min_depth: 0.1,
            max_depth: 100.0,
            bin_spacing: BinSpacing::LinearDisparity,
            decoder_widths: [64, 64, 32],
            use_attention: true,
            use_ddv: true,
            scale_scores: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Narrow network at 64×96 that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            input_height: 64,
            input_width: 96,
            stem_widths: [8, 8, 16],
            block: BlockKind::Basic,
            stage_blocks: [1, 1, 1, 1],
            encoder_widths: [16, 32, 48, 64],
            dilations: [1, 1, 2, 4],
            attention_channels: 32,
            ddv_bins: 16,
            min_depth: 1.0,
            max_depth: 50.0,
            bin_spacing: BinSpacing::LinearDisparity,
            decoder_widths: [32, 32, 16],
            use_attention: true,
            use_ddv: true,
            scale_scores: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % BOTTLENECK_STRIDE != 0
            || self.input_width % BOTTLENECK_STRIDE != 0
        {
            return Err(Error::invalid(format!(
                "input size {}x{} (h x w) must be positive multiples of {BOTTLENECK_STRIDE}",
                self.input_height, self.input_width
            )));
        }
        if self.stem_widths.contains(&0) || self.encoder_widths.contains(&0) {
            return bad("stem and encoder widths must be positive".into());
        }
        if self.stage_blocks.contains(&0) {
            return bad("every encoder stage needs at least one block".into());
        }
        if self.block == BlockKind::Bottleneck && self.encoder_widths.iter().any(|w| w % 4 != 0) {
            return bad("bottleneck stage widths must be divisible by 4".into());
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if self.attention_channels == 0 || self.decoder_widths.contains(&0) {
            return bad("attention and decoder widths must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must lie in (0, 1] and bn_eps must be positive".into());
        }
        self.bins().map(|_| ())
    }

    pub fn bins(&self) -> Result<DisparityBins> {
        make_bins_with(self.ddv_bins, self.min_depth, self.max_depth, self.bin_spacing)
    }

    /// Native `(height, width)` of each output scale, coarse to fine.
    pub fn scale_sizes(&self) -> [(usize, usize); 4] {
        let (h, w) = (self.input_height, self.input_width);
        [(h / 8, w / 8), (h / 4, w / 4), (h / 2, w / 2), (h, w)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Output channels of the stride-2 convolutions.
    pub widths: Vec<usize>,
    /// Factor applied to the six raw outputs.
    pub output_scale: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PoseNetConfig {
    pub fn full() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 256, 256, 256],
            output_scale: 0.01,
        }
    }

    pub fn desk() -> Self {
        Self {
            widths: vec![16, 32, 64, 64],
            output_scale: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("pose widths must be non-empty and positive".into()));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config("pose output_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: DepthNetConfig,
    pub pose: PoseNetConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            depth: DepthNetConfig::full(),
            pose: PoseNetConfig::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            depth: DepthNetConfig::desk(),
            pose: PoseNetConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        self.pose.validate()
    }
}
