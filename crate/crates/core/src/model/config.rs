use alloc::format;

use crate::error::{Error, Result};

/// Divisor applied to `Q·Kᵀ` inside attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AttentionScale {
    /// `sqrt(width / heads)`
    PerHeadDim,
    /// `sqrt(tokens)`
    TokenCount,
}

/// How the cross-frame module derives its keys, queries and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CfiProjection {
    /// One weight per channel (a kernel-1 depthwise convolution).
    Depthwise,
    /// A full `C_t×C_t` linear map.
    Dense,
}

/// Where the regression head normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HeadNorm {
    /// LayerNorm over the pooled `C_t` features, then the output projection.
    BeforeProjection,
    /// Output projection, then LayerNorm over the `J·3` outputs.
    AfterProjection,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub num_joints: usize,
    /// Receptive field; must be odd.
    pub frames: usize,
    /// Spatial width `D`. The temporal width is `num_joints * spatial_dim`.
    pub spatial_dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub attention_scale: AttentionScale,
    pub cji_enabled: bool,
    pub cfi_enabled: bool,
    pub spatial_embed_enabled: bool,
    pub temporal_embed_enabled: bool,
    /// Groups of every GroupNorm; must divide both widths. At D = 32 the
    /// default of 32 gives CJI one channel per group.
    pub groupnorm_groups: usize,
    pub cji_kernel: usize,
    pub cfi_projection: CfiProjection,
    pub head_norm: HeadNorm,
    /// Fixed multiplier on the head output. The default of 1000 lets the
    /// network work in metres while predictions and losses are millimetres.
    pub output_scale: f64,
    pub norm_eps: f64,
    /// Reserved; only 0 is accepted.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full(81)
    }
}

impl ModelConfig {
    /// 17 joints, D = 32, four spatial and four temporal layers, eight heads.
    pub fn full(frames: usize) -> Self {
        ModelConfig {
            num_joints: 17,
            frames,
            spatial_dim: 32,
            spatial_layers: 4,
            temporal_layers: 4,
            heads: 8,
            mlp_ratio: 2.0,
            attention_scale: AttentionScale::PerHeadDim,
            cji_enabled: true,
            cfi_enabled: true,
            spatial_embed_enabled: true,
            temporal_embed_enabled: true,
            groupnorm_groups: 32,
            cji_kernel: 5,
            cfi_projection: CfiProjection::Depthwise,
            head_norm: HeadNorm::BeforeProjection,
            output_scale: 1000.0,
            norm_eps: 1e-5,
            dropout: 0.0,
        }
    }

    /// J = 3, F = 3, D = 4 (so C_t = 12), one layer per stage, two heads,
    /// four GroupNorm groups.
    pub fn tiny() -> Self {
        ModelConfig {
            num_joints: 3,
            frames: 3,
            spatial_dim: 4,
            spatial_layers: 1,
            temporal_layers: 1,
            heads: 2,
            groupnorm_groups: 4,
            ..ModelConfig::full(3)
        }
    }

    pub fn temporal_dim(&self) -> usize {
        self.num_joints * self.spatial_dim
    }

    pub fn spatial_hidden(&self) -> usize {
        hidden_width(self.spatial_dim, self.mlp_ratio)
    }

    pub fn temporal_hidden(&self) -> usize {
        hidden_width(self.temporal_dim(), self.mlp_ratio)
    }

    /// Toggles every interaction module and positional table at once.
    pub fn with_toggles(mut self, cji: bool, cfi: bool, spatial_embed: bool, temporal_embed: bool) -> Self {
        self.cji_enabled = cji;
        self.cfi_enabled = cfi;
        self.spatial_embed_enabled = spatial_embed;
        self.temporal_embed_enabled = temporal_embed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.num_joints == 0 || self.spatial_dim == 0 || self.heads == 0 {
            return fail("num_joints, spatial_dim and heads must be positive".into());
        }
        if self.frames == 0 || self.frames % 2 == 0 {
            return fail(format!("frames must be odd, got {}", self.frames));
        }
        if self.spatial_dim % self.heads != 0 {
            return fail(format!("spatial_dim {} not divisible by {} heads", self.spatial_dim, self.heads));
        }
        if self.temporal_dim() % self.heads != 0 {
            return fail(format!("temporal_dim {} not divisible by {} heads", self.temporal_dim(), self.heads));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() || self.spatial_hidden() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.groupnorm_groups == 0
            || self.spatial_dim % self.groupnorm_groups != 0
            || self.temporal_dim() % self.groupnorm_groups != 0
        {
            return fail(format!(
                "groupnorm_groups {} must divide both {} and {}",
                self.groupnorm_groups,
                self.spatial_dim,
                self.temporal_dim()
            ));
        }
        if self.cji_kernel % 2 == 0 {
            return fail(format!("cji_kernel must be odd, got {}", self.cji_kernel));
        }
        if !(self.output_scale > 0.0) || !self.output_scale.is_finite() {
            return fail("output_scale must be positive and finite".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        if self.dropout != 0.0 {
            return fail("dropout is not supported; it must be 0".into());
        }
        Ok(())
    }
}

fn hidden_width(dim: usize, ratio: f64) -> usize {
    libm::round(dim as f64 * ratio) as usize
}
