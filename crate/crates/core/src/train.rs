//! MPJPE loss, Adam, the learning-rate schedule, the epoch loop and the
//! evaluation driver.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::{hflip, hflip_pose2, hflip_pose3, window, Pose2, Pose3, PoseWindow, SequenceRecord, SkeletonSpec};
use crate::error::{Error, Result};
use crate::metrics::{mpjpe, EvalReport, Metrics};
use crate::model::{forward, predict, ModelConfig, ModelParams, ModelVars, ParamSlot};
use crate::rng;
use crate::tensor::Tensor;

/// Mean Euclidean distance between the rows of `pred` (J×3) and `gt`, on
/// the tape. Coincident joints contribute a zero subgradient.
pub fn mpjpe_loss(tape: &mut Tape, pred: Var, gt: &[[f64; 3]]) -> Result<Var> {
    let target = Tensor::new(vec![gt.len(), 3], gt.iter().flatten().copied().collect())?;
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let norms = tape.row_norms(diff)?;
    Ok(tape.mean(norms))
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub flip_augment: bool,
    /// Average each prediction with its mirrored counterpart at evaluation.
    pub flip_test: bool,
    /// Zero the CJI/CFI slots and keep them from training.
    pub freeze_interaction: bool,
    pub train_path: Option<String>,
    pub eval_path: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 32,
            lr0: 1e-4,
            lr_decay: 0.99,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            flip_augment: true,
            flip_test: true,
            freeze_interaction: false,
            train_path: None,
            eval_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 {} must be finite and non-negative", self.lr0)));
        }
        let betas = [self.adam_beta1, self.adam_beta2];
        if betas.iter().any(|b| !(*b >= 0.0 && *b < 1.0)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// `lr0 · lr_decay^epoch`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * libm::pow(cfg.lr_decay, epoch as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per slot, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(slots: &[ParamSlot]) -> Self {
        let zeros: Vec<Vec<f64>> = slots.iter().map(|s| vec![0.0; s.value.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite; the error names the offending slot.
pub fn adam_step(slots: &mut [ParamSlot], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, hyper: &AdamHyper) -> Result<()> {
    if grads.len() != slots.len() || state.m.len() != slots.len() {
        return Err(Error::shape("adam_step", format!("{} slots, {} gradients, {} moments", slots.len(), grads.len(), state.m.len())));
    }
    for (slot, g) in slots.iter().zip(grads) {
        if g.len() != slot.value.len() {
            return Err(Error::shape("adam_step", format!("slot `{}`: {} values, {} gradients", slot.name, slot.value.len(), g.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {} in slot `{}` at index {i}", g[i], slot.name)));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(hyper.beta1, t);
    let c2 = 1.0 - libm::pow(hyper.beta2, t);
    for (k, slot) in slots.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in slot.value.data_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            *p -= lr * (m[i] / c1) / (libm::sqrt(v[i] / c2) + hyper.eps);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    /// 1-based; the log for epoch `e` is written after `e` epochs of updates.
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub train_loss: f64,
    pub eval_mpjpe: Option<f64>,
}

/// Loss and parameter gradients over a batch, averaged over its windows.
pub fn batch_gradients(params: &ModelParams, cfg: &ModelConfig, batch: &[PoseWindow]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads: Vec<Vec<f64>> = params.slots().iter().map(|s| vec![0.0; s.value.len()]).collect();
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for w in batch {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, params, cfg, true)?;
        let pred = forward(&mut tape, &w.frames_2d, &vars, cfg)?;
        let loss = mpjpe_loss(&mut tape, pred, &w.target_3d)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on window {}@{}", w.record_id, w.center)));
        }
        loss_sum += value;
        let g = tape.backward(loss)?;
        for (acc, &leaf) in grads.iter_mut().zip(&vars.leaves) {
            if let Some(d) = g.get(leaf) {
                for (a, x) in acc.iter_mut().zip(d) {
                    *a += scale * x;
                }
            }
        }
    }
    Ok((loss_sum * scale, grads))
}

/// Mean MPJPE of plain (non-ensembled) predictions over `windows`.
pub fn mean_mpjpe(params: &ModelParams, cfg: &ModelConfig, windows: &[PoseWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("mean_mpjpe: no windows".into()));
    }
    let mut total = 0.0;
    for w in windows {
        total += mpjpe(&predict(params, cfg, &w.frames_2d)?, &w.target_3d)?;
    }
    Ok(total / windows.len() as f64)
}

/// Seeded mini-batch training.
///
/// Each epoch shuffles the windows, mirrors each with probability 1/2 when
/// `flip_augment` is set, and takes one Adam step per batch. `on_epoch`
/// receives the log line and the parameters after every epoch; returning
/// an error stops training. A non-finite loss or gradient aborts before
/// the parameters are touched, so the last reported state stays valid.
pub fn train<F>(
    cfg: &TrainConfig,
    params: &mut ModelParams,
    skeleton: &SkeletonSpec,
    train_windows: &[PoseWindow],
    eval_records: &[SequenceRecord],
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Config("train: no training windows".into()));
    }
    if cfg.freeze_interaction {
        params.zero_interaction_modules();
    }
    let frozen: Vec<bool> =
        params.slots().iter().map(|s| cfg.freeze_interaction && crate::model::is_interaction_slot(&s.name)).collect();
    let mut adam = AdamState::new(params.slots());
    let hyper = cfg.adam();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        rng::shuffle(&mut rng::stream(cfg.seed, &format!("train/shuffle/{epoch}")), &mut order);
        let mut coin = rng::stream(cfg.seed, &format!("train/flip/{epoch}"));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PoseWindow> = chunk
                .iter()
                .map(|&i| {
                    let w = &train_windows[i];
                    if cfg.flip_augment && rng::uniform(&mut coin, 0.0, 1.0) < 0.5 { hflip(w, skeleton) } else { w.clone() }
                })
                .collect();
            let (loss, mut grads) = batch_gradients(params, &cfg.model, &batch)?;
            for (g, &f) in grads.iter_mut().zip(&frozen) {
                if f {
                    g.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            adam_step(params.slots_mut(), &grads, &mut adam, lr, &hyper)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let eval_mpjpe = if eval_records.is_empty() {
            None
        } else {
            let report = evaluate(eval_records, cfg.model.frames, skeleton, cfg.flip_test, model_predictor(params, &cfg.model))?;
            Some(report.aggregate.metrics.mpjpe)
        };
        let log = EpochLog { epoch: epoch + 1, lr, steps: adam.t, train_loss: loss_sum / train_windows.len() as f64, eval_mpjpe };
        on_epoch(&log, params)?;
        logs.push(log);
    }
    Ok(logs)
}

/// A predictor closure backed by the network.
pub fn model_predictor<'a>(params: &'a ModelParams, cfg: &'a ModelConfig) -> impl FnMut(&[Pose2]) -> Result<Pose3> + 'a {
    move |frames| predict(params, cfg, frames)
}

/// Slides a window over every frame of every record, predicts each center
/// pose (optionally averaged with the un-mirrored prediction for the
/// mirrored window), and reports the four metrics per action.
pub fn evaluate<P>(records: &[SequenceRecord], frames: usize, skeleton: &SkeletonSpec, flip_test: bool, mut predictor: P) -> Result<EvalReport>
where
    P: FnMut(&[Pose2]) -> Result<Pose3>,
{
    let mut samples: Vec<(String, Metrics)> = Vec::new();
    for record in records {
        if record.num_joints() != skeleton.num_joints {
            return Err(Error::Config(format!(
                "record `{}` has {} joints but the model expects {}",
                record.id,
                record.num_joints(),
                skeleton.num_joints
            )));
        }
        for center in 0..record.frames() {
            let w = window(record, frames, center)?;
            let mut pred = predictor(&w.frames_2d)?;
            if flip_test {
                let mirrored: Vec<Pose2> = w.frames_2d.iter().map(|f| hflip_pose2(f, skeleton)).collect();
                let back = hflip_pose3(&predictor(&mirrored)?, skeleton);
                for (p, q) in pred.iter_mut().zip(&back) {
                    for k in 0..3 {
                        p[k] = 0.5 * (p[k] + q[k]);
                    }
                }
            }
            samples.push((record.action.clone(), Metrics::of(&pred, &w.target_3d)?));
        }
    }
    Ok(EvalReport::from_samples(samples.iter().map(|(a, m)| (a.as_str(), *m))))
}
