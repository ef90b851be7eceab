use alloc::format;
use alloc::vec::Vec;

use super::config::{AttentionScale, CfiProjection, HeadNorm, ModelConfig};
use super::params::ModelParams;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x·W + b`, or `x·W` when there is no bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct CjiVars {
    pub conv1_kernel: Var,
    pub conv1_bias: Var,
    pub norm: Norm,
    pub conv2_kernel: Var,
    pub conv2_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CfiVars {
    pub w_k: Var,
    pub w_q: Var,
    pub w_v: Var,
    pub conv: Linear,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialBlockVars {
    pub ln1: Norm,
    pub attn: AttentionVars,
    pub cji: Option<CjiVars>,
    pub ln2: Norm,
    pub mlp: MlpVars,
    pub ln_out: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalBlockVars {
    pub ln1: Norm,
    pub attn: AttentionVars,
    pub cfi: Option<CfiVars>,
    pub ln2: Norm,
    pub mlp: MlpVars,
    pub ln_out: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub frame_weights: Var,
    pub norm: Norm,
    pub proj: Linear,
}

/// Every parameter slot placed on a tape, grouped by layer.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Linear,
    pub spatial_pos: Option<Var>,
    pub spatial: Vec<SpatialBlockVars>,
    pub temporal_pos: Option<Var>,
    pub temporal: Vec<TemporalBlockVars>,
    pub head: HeadVars,
    /// One leaf per slot, in slot order.
    pub leaves: Vec<Var>,
}

struct Lookup<'a> {
    params: &'a ModelParams,
    leaves: &'a [Var],
}

impl Lookup<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .and_then(|i| self.leaves.get(i).copied())
            .ok_or_else(|| Error::Config(format!("missing parameter slot `{name}`")))
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear { weight: self.var(&format!("{prefix}.weight"))?, bias: Some(self.var(&format!("{prefix}.bias"))?) })
    }

    fn norm(&self, prefix: &str) -> Result<Norm> {
        Ok(Norm { gamma: self.var(&format!("{prefix}.gamma"))?, beta: self.var(&format!("{prefix}.beta"))? })
    }

    fn attention(&self, prefix: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            q: self.linear(&format!("{prefix}.attn.q"))?,
            k: Linear { weight: self.var(&format!("{prefix}.attn.k.weight"))?, bias: None },
            v: self.linear(&format!("{prefix}.attn.v"))?,
            out: self.linear(&format!("{prefix}.attn.out"))?,
        })
    }

    fn mlp(&self, prefix: &str) -> Result<MlpVars> {
        Ok(MlpVars { fc1: self.linear(&format!("{prefix}.mlp.fc1"))?, fc2: self.linear(&format!("{prefix}.mlp.fc2"))? })
    }
}

impl ModelVars {
    /// Places every slot of `params` on the tape as a leaf.
    pub fn bind(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig, requires_grad: bool) -> Result<Self> {
        let leaves: Vec<Var> = params.slots().iter().map(|s| tape.leaf(s.value.clone(), requires_grad)).collect();
        Self::from_leaves(params, cfg, leaves)
    }

    /// Groups already-placed leaves (one per slot, in slot order).
    pub fn from_leaves(params: &ModelParams, cfg: &ModelConfig, leaves: Vec<Var>) -> Result<Self> {
        let l = Lookup { params, leaves: &leaves };
        let spatial = (0..cfg.spatial_layers)
            .map(|i| {
                let p = format!("spatial.{i}");
                let cji = if cfg.cji_enabled {
                    Some(CjiVars {
                        conv1_kernel: l.var(&format!("{p}.cji.conv1.kernel"))?,
                        conv1_bias: l.var(&format!("{p}.cji.conv1.bias"))?,
                        norm: l.norm(&format!("{p}.cji.norm"))?,
                        conv2_kernel: l.var(&format!("{p}.cji.conv2.kernel"))?,
                        conv2_bias: l.var(&format!("{p}.cji.conv2.bias"))?,
                    })
                } else {
                    None
                };
                Ok(SpatialBlockVars {
                    ln1: l.norm(&format!("{p}.ln1"))?,
                    attn: l.attention(&p)?,
                    cji,
                    ln2: l.norm(&format!("{p}.ln2"))?,
                    mlp: l.mlp(&p)?,
                    ln_out: l.norm(&format!("{p}.ln_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let temporal = (0..cfg.temporal_layers)
            .map(|i| {
                let p = format!("temporal.{i}");
                let cfi = if cfg.cfi_enabled {
                    Some(CfiVars {
                        w_k: l.var(&format!("{p}.cfi.w_k"))?,
                        w_q: l.var(&format!("{p}.cfi.w_q"))?,
                        w_v: l.var(&format!("{p}.cfi.w_v"))?,
                        conv: l.linear(&format!("{p}.cfi.conv"))?,
                        norm: l.norm(&format!("{p}.cfi.norm"))?,
                    })
                } else {
                    None
                };
                Ok(TemporalBlockVars {
                    ln1: l.norm(&format!("{p}.ln1"))?,
                    attn: l.attention(&p)?,
                    cfi,
                    ln2: l.norm(&format!("{p}.ln2"))?,
                    mlp: l.mlp(&p)?,
                    ln_out: l.norm(&format!("{p}.ln_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let vars = ModelVars {
            embed: l.linear("embed")?,
            spatial_pos: if cfg.spatial_embed_enabled { Some(l.var("spatial_pos")?) } else { None },
            spatial,
            temporal_pos: if cfg.temporal_embed_enabled { Some(l.var("temporal_pos")?) } else { None },
            temporal,
            head: HeadVars {
                frame_weights: l.var("head.frame_weights")?,
                norm: l.norm("head.norm")?,
                proj: l.linear("head.proj")?,
            },
            leaves: Vec::new(),
        };
        Ok(ModelVars { leaves, ..vars })
    }
}

pub fn linear(tape: &mut Tape, x: Var, lin: &Linear) -> Result<Var> {
    let y = tape.matmul(x, lin.weight)?;
    match lin.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

fn layer_norm(tape: &mut Tape, x: Var, norm: &Norm, eps: f64) -> Result<Var> {
    tape.layer_norm(x, norm.gamma, norm.beta, eps)
}

/// Two-layer perceptron with a GELU in between.
pub fn mlp(tape: &mut Tape, x: Var, vars: &MlpVars) -> Result<Var> {
    let h = linear(tape, x, &vars.fc1)?;
    let h = tape.gelu(h);
    linear(tape, h, &vars.fc2)
}

/// Projects one frame's `J×2` joints to `J×D` and adds the per-joint
/// positional table when present.
pub fn embed_joints(tape: &mut Tape, x: Var, vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    if tape.value(x).shape() != [cfg.num_joints, 2] {
        return Err(Error::shape(
            "embed_joints",
            format!("expected [{}, 2] joints, got {:?}", cfg.num_joints, tape.value(x).shape()),
        ));
    }
    let z = linear(tape, x, &vars.embed)?;
    match vars.spatial_pos {
        Some(pos) => tape.add(z, pos),
        None => Ok(z),
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `z`.
pub fn multi_head_attention(
    tape: &mut Tape,
    z: Var,
    vars: &AttentionVars,
    heads: usize,
    scale: AttentionScale,
) -> Result<Var> {
    let (tokens, width) = tape.value(z).dims2().ok_or_else(|| Error::shape("attention", "matrix input"))?;
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape("attention", format!("width {width} not divisible by {heads} heads")));
    }
    let head_dim = width / heads;
    let divisor = match scale {
        AttentionScale::PerHeadDim => libm::sqrt(head_dim as f64),
        AttentionScale::TokenCount => libm::sqrt(tokens as f64),
    };
    let q = linear(tape, z, &vars.q)?;
    let k = linear(tape, z, &vars.k)?;
    let v = linear(tape, z, &vars.v)?;
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / divisor);
        let attn = tape.softmax_rows(scores)?;
        outputs.push(tape.matmul(attn, vh)?);
    }
    let concat = if heads == 1 { outputs[0] } else { tape.concat_cols(&outputs)? };
    linear(tape, concat, &vars.out)
}

/// Cross-joint interaction on a `J×D` map: depthwise convolution along the
/// joint axis, GELU, GroupNorm, a second depthwise convolution, plus the
/// residual input.
pub fn cji(tape: &mut Tape, z: Var, vars: &CjiVars, cfg: &ModelConfig) -> Result<Var> {
    let zt = tape.transpose(z)?; // D×J
    let h = tape.depthwise_conv1d(zt, vars.conv1_kernel, vars.conv1_bias)?;
    let h = tape.gelu(h);
    let h = tape.group_norm(h, cfg.groupnorm_groups, vars.norm.gamma, vars.norm.beta, cfg.norm_eps)?;
    let h = tape.depthwise_conv1d(h, vars.conv2_kernel, vars.conv2_bias)?;
    let h = tape.transpose(h)?;
    tape.add(h, z)
}

pub fn spatial_block(tape: &mut Tape, z: Var, vars: &SpatialBlockVars, cfg: &ModelConfig) -> Result<Var> {
    let h = layer_norm(tape, z, &vars.ln1, cfg.norm_eps)?;
    let h = multi_head_attention(tape, h, &vars.attn, cfg.heads, cfg.attention_scale)?;
    let mut z = tape.add(h, z)?;
    if let Some(c) = &vars.cji {
        z = cji(tape, z, c, cfg)?;
    }
    let h = layer_norm(tape, z, &vars.ln2, cfg.norm_eps)?;
    let h = mlp(tape, h, &vars.mlp)?;
    let z = tape.add(h, z)?;
    layer_norm(tape, z, &vars.ln_out, cfg.norm_eps)
}

fn project(tape: &mut Tape, z: Var, w: Var, mode: CfiProjection) -> Result<Var> {
    match mode {
        CfiProjection::Depthwise => tape.scale_cols(z, w),
        CfiProjection::Dense => tape.matmul(z, w),
    }
}

/// Cross-frame interaction on an `F×C` map: bilinear frame-pair scores
/// `K·Qᵀ / C` (no softmax) mix the values, followed by a pointwise channel
/// convolution, GroupNorm and the residual input.
pub fn cfi(tape: &mut Tape, z: Var, vars: &CfiVars, cfg: &ModelConfig) -> Result<Var> {
    let (_, width) = tape.value(z).dims2().ok_or_else(|| Error::shape("cfi", "matrix input"))?;
    let k = project(tape, z, vars.w_k, cfg.cfi_projection)?;
    let q = project(tape, z, vars.w_q, cfg.cfi_projection)?;
    let v = project(tape, z, vars.w_v, cfg.cfi_projection)?;
    let qt = tape.transpose(q)?;
    let corr = tape.matmul(k, qt)?; // F×F
    let corr = tape.scale(corr, 1.0 / width as f64);
    let mixed = tape.matmul(corr, v)?;
    let h = linear(tape, mixed, &vars.conv)?;
    let ht = tape.transpose(h)?; // C×F
    let ht = tape.group_norm(ht, cfg.groupnorm_groups, vars.norm.gamma, vars.norm.beta, cfg.norm_eps)?;
    let h = tape.transpose(ht)?;
    tape.add(h, z)
}

pub fn temporal_block(tape: &mut Tape, z: Var, vars: &TemporalBlockVars, cfg: &ModelConfig) -> Result<Var> {
    let h = layer_norm(tape, z, &vars.ln1, cfg.norm_eps)?;
    let h = multi_head_attention(tape, h, &vars.attn, cfg.heads, cfg.attention_scale)?;
    let mut z = tape.add(h, z)?;
    if let Some(c) = &vars.cfi {
        z = cfi(tape, z, c, cfg)?;
    }
    let h = layer_norm(tape, z, &vars.ln2, cfg.norm_eps)?;
    let h = mlp(tape, h, &vars.mlp)?;
    let z = tape.add(h, z)?;
    layer_norm(tape, z, &vars.ln_out, cfg.norm_eps)
}

/// Learned weighted sum over frames, normalization and projection to `J×3`.
pub fn regression_head(tape: &mut Tape, z: Var, vars: &HeadVars, cfg: &ModelConfig) -> Result<Var> {
    let pooled = tape.matmul(vars.frame_weights, z)?; // 1×C
    let out = match cfg.head_norm {
        HeadNorm::BeforeProjection => {
            let h = layer_norm(tape, pooled, &vars.norm, cfg.norm_eps)?;
            linear(tape, h, &vars.proj)?
        }
        HeadNorm::AfterProjection => {
            let h = linear(tape, pooled, &vars.proj)?;
            layer_norm(tape, h, &vars.norm, cfg.norm_eps)?
        }
    };
    let out = if cfg.output_scale == 1.0 { out } else { tape.scale(out, cfg.output_scale) };
    tape.reshape(out, &[cfg.num_joints, 3])
}

fn frame_tensor(frame: &[[f64; 2]]) -> Tensor {
    let data = frame.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::matrix(frame.len(), 2, data).expect("non-empty frame")
}

/// Embedding plus spatial blocks for every frame, each frame independently.
pub fn spatial_stage(
    tape: &mut Tape,
    frames_2d: &[Vec<[f64; 2]>],
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    frames_2d
        .iter()
        .map(|frame| {
            if frame.is_empty() {
                return Err(Error::shape("forward", "empty frame"));
            }
            let x = tape.constant(frame_tensor(frame));
            let mut z = embed_joints(tape, x, vars, cfg)?;
            for block in &vars.spatial {
                z = spatial_block(tape, z, block, cfg)?;
            }
            Ok(z)
        })
        .collect()
}

/// Full network: `F` frames of `J×2` joints to the `J×3` center-frame pose.
pub fn forward(tape: &mut Tape, frames_2d: &[Vec<[f64; 2]>], vars: &ModelVars, cfg: &ModelConfig) -> Result<Var> {
    if frames_2d.len() != cfg.frames {
        return Err(Error::shape("forward", format!("expected {} frames, got {}", cfg.frames, frames_2d.len())));
    }
    let width = cfg.temporal_dim();
    let per_frame = spatial_stage(tape, frames_2d, vars, cfg)?;
    let rows = per_frame
        .into_iter()
        .map(|z| tape.reshape(z, &[1, width]))
        .collect::<Result<Vec<_>>>()?;
    let mut z = tape.concat_rows(&rows)?;
    if let Some(pos) = vars.temporal_pos {
        z = tape.add(z, pos)?;
    }
    for block in &vars.temporal {
        z = temporal_block(tape, z, block, cfg)?;
    }
    regression_head(tape, z, &vars.head, cfg)
}

/// Inference without gradients.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, frames_2d: &[Vec<[f64; 2]>]) -> Result<Vec<[f64; 3]>> {
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params, cfg, false)?;
    let out = forward(&mut tape, frames_2d, &vars, cfg)?;
    Ok(tape.value(out).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

#[cfg(test)]
mod tests;
