//! Named parameter slots.
//!
//! The slot list is a pure function of [`ModelConfig`]: every learnable lives
//! in exactly one named slot and disabled modules contribute no slots.
//! Weight matrices are stored `[in, out]` and applied as `x·W + b`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::{CfiProjection, HeadNorm, ModelConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation of the uniform weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Weight,
    Zero,
    One,
    /// `1 / frames`, a plain average over the receptive field.
    FrameAverage,
}

/// One entry of the parameter ledger.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl SlotSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Ledger(Vec<SlotSpec>);

impl Ledger {
    fn slot(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(SlotSpec { name, shape: shape.to_vec(), init });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.slot(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Weight);
        self.slot(format!("{prefix}.bias"), &[fan_out], Init::Zero);
    }

    fn norm(&mut self, prefix: &str, width: usize) {
        self.slot(format!("{prefix}.gamma"), &[width], Init::One);
        self.slot(format!("{prefix}.beta"), &[width], Init::Zero);
    }

    fn attention(&mut self, prefix: &str, width: usize) {
        self.linear(&format!("{prefix}.attn.q"), width, width);
        // A key bias shifts every score in a row equally and cancels in the
        // softmax, so the key projection carries none.
        self.slot(format!("{prefix}.attn.k.weight"), &[width, width], Init::Weight);
        self.linear(&format!("{prefix}.attn.v"), width, width);
        self.linear(&format!("{prefix}.attn.out"), width, width);
    }

    fn mlp(&mut self, prefix: &str, width: usize, hidden: usize) {
        self.linear(&format!("{prefix}.mlp.fc1"), width, hidden);
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, width);
    }
}

/// Every parameter slot of the model, in binding order.
pub fn param_ledger(cfg: &ModelConfig) -> Vec<SlotSpec> {
    let d = cfg.spatial_dim;
    let c = cfg.temporal_dim();
    let j = cfg.num_joints;
    let mut l = Ledger::default();

    l.linear("embed", 2, d);
    if cfg.spatial_embed_enabled {
        l.slot("spatial_pos".into(), &[j, d], Init::Zero);
    }
    for layer in 0..cfg.spatial_layers {
        let p = format!("spatial.{layer}");
        l.norm(&format!("{p}.ln1"), d);
        l.attention(&p, d);
        if cfg.cji_enabled {
            l.slot(format!("{p}.cji.conv1.kernel"), &[d, cfg.cji_kernel], Init::Weight);
            l.slot(format!("{p}.cji.conv1.bias"), &[d], Init::Zero);
            l.norm(&format!("{p}.cji.norm"), d);
            l.slot(format!("{p}.cji.conv2.kernel"), &[d, cfg.cji_kernel], Init::Weight);
            l.slot(format!("{p}.cji.conv2.bias"), &[d], Init::Zero);
        }
        l.norm(&format!("{p}.ln2"), d);
        l.mlp(&p, d, cfg.spatial_hidden());
        l.norm(&format!("{p}.ln_out"), d);
    }
    if cfg.temporal_embed_enabled {
        l.slot("temporal_pos".into(), &[cfg.frames, c], Init::Zero);
    }
    for layer in 0..cfg.temporal_layers {
        let p = format!("temporal.{layer}");
        l.norm(&format!("{p}.ln1"), c);
        l.attention(&p, c);
        if cfg.cfi_enabled {
            let proj: &[usize] = match cfg.cfi_projection {
                CfiProjection::Depthwise => &[c],
                CfiProjection::Dense => &[c, c],
            };
            for part in ["w_k", "w_q", "w_v"] {
                l.slot(format!("{p}.cfi.{part}"), proj, Init::Weight);
            }
            l.linear(&format!("{p}.cfi.conv"), c, c);
            // The GroupNorm is the last op before the residual add, so a unit
            // gain would inject unit-variance features at step 0. A zero gain
            // starts the module as an identity.
            l.slot(format!("{p}.cfi.norm.gamma"), &[c], Init::Zero);
            l.slot(format!("{p}.cfi.norm.beta"), &[c], Init::Zero);
        }
        l.norm(&format!("{p}.ln2"), c);
        l.mlp(&p, c, cfg.temporal_hidden());
        l.norm(&format!("{p}.ln_out"), c);
    }
    l.slot("head.frame_weights".into(), &[cfg.frames], Init::FrameAverage);
    match cfg.head_norm {
        HeadNorm::BeforeProjection => l.norm("head.norm", c),
        HeadNorm::AfterProjection => l.norm("head.norm", j * 3),
    }
    l.linear("head.proj", c, j * 3);
    l.0
}

/// Exact number of scalar learnables for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_ledger(cfg).iter().map(SlotSpec::numel).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: Tensor,
}

/// All learnable tensors of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    slots: Vec<ParamSlot>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    /// Seeded initialization. Each slot draws from its own stream keyed by
    /// its name, so toggling one module leaves every other slot unchanged.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let half_width = INIT_STD * libm::sqrt(3.0);
        let slots = param_ledger(cfg)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data = match spec.init {
                    Init::Zero => vec![0.0; n],
                    Init::One => vec![1.0; n],
                    Init::FrameAverage => vec![1.0 / cfg.frames as f64; n],
                    Init::Weight => {
                        let mut r = rng::stream(seed, &spec.name);
                        (0..n).map(|_| rng::uniform(&mut r, -half_width, half_width)).collect()
                    }
                };
                ParamSlot { value: Tensor::new(spec.shape, data).expect("ledger shape"), name: spec.name }
            })
            .collect();
        Ok(Self::from_parts(slots))
    }

    /// Every slot set to zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = param_ledger(cfg)
            .into_iter()
            .map(|spec| ParamSlot { value: Tensor::zeros(&spec.shape), name: spec.name })
            .collect();
        Ok(Self::from_parts(slots))
    }

    /// Rebuilds parameters from named slots (e.g. read from a checkpoint),
    /// checking names and shapes against the ledger for `cfg`.
    pub fn from_slots(cfg: &ModelConfig, slots: Vec<ParamSlot>) -> Result<Self> {
        cfg.validate()?;
        let ledger = param_ledger(cfg);
        if ledger.len() != slots.len() {
            return Err(Error::Config(format!(
                "expected {} parameter slots, found {}",
                ledger.len(),
                slots.len()
            )));
        }
        for (spec, slot) in ledger.iter().zip(&slots) {
            if spec.name != slot.name || spec.shape != slot.value.shape() {
                return Err(Error::Config(format!(
                    "slot `{}` {:?} does not match expected `{}` {:?}",
                    slot.name,
                    slot.value.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self::from_parts(slots))
    }

    fn from_parts(slots: Vec<ParamSlot>) -> Self {
        let index = slots.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ModelParams { slots, index }
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.slots
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.slots[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.slots[i].value)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Zeroes every slot of the cross-joint and cross-frame modules, which
    /// turns both into exact identities.
    pub fn zero_interaction_modules(&mut self) {
        for slot in &mut self.slots {
            if is_interaction_slot(&slot.name) {
                slot.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// True for slots that belong to a cross-joint or cross-frame module.
pub fn is_interaction_slot(name: &str) -> bool {
    name.contains(".cji.") || name.contains(".cfi.")
}
