//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use alloc::string::String;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, ModelVars};
use crate::rng;
use crate::tensor::Tensor;

/// Outcome of [`finite_diff_check`], one entry per parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / f64::max(1e-8, libm::fabs(analytic) + libm::fabs(numeric))
}

fn eval_loss<F>(f: &F, params: &[Tensor], with_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), with_grad)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.len() != 1 {
        return Err(Error::shape("finite_diff_check", "objective must return a scalar"));
    }
    if !value.data()[0].is_finite() {
        return Err(Error::Numeric("finite_diff_check: non-finite loss".into()));
    }
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `f` against `(f(p+eps) - f(p-eps)) / 2eps`
/// for every entry of every parameter tensor.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("finite_diff_check: eps must be positive".into()));
    }
    let (tape, vars, loss) = eval_loss(&f, params, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut worst: f64 = 0.0;
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = scalar_of(&f, &work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = scalar_of(&f, &work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[p][i], numeric));
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport { per_param })
}

fn scalar_of<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = eval_loss(f, params, false)?;
    Ok(tape.value(loss).data()[0])
}

/// Nodes on the tape for one forward pass plus the gradient-check readout.
pub fn model_tape_len(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let params = ModelParams::zeros(cfg)?;
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, &params, cfg, true)?;
    let frames = alloc::vec![alloc::vec![[0.0; 2]; cfg.num_joints]; cfg.frames];
    let out = forward(&mut tape, &frames, &vars, cfg)?;
    let w = tape.constant(Tensor::zeros(&[cfg.num_joints, 3]));
    let prod = tape.mul(out, w)?;
    tape.sum(prod);
    Ok(tape.len())
}

/// Seed used by the command-line gradient check.
pub const DEFAULT_SEED: u64 = 1;
/// Central-difference step used by the command-line gradient check.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-slot outcome of [`model_gradcheck`].
#[derive(Debug, Clone)]
pub struct SlotError {
    pub name: String,
    pub error: f64,
}

/// Gradient-checks the whole network on a seeded random instance.
///
/// Parameters are drawn U(-0.5, 0.5) (gains 1 ± 0.5) so every path carries
/// signal, the output scale is forced to 1, and the objective is a random
/// weighted sum of the predicted pose. `fault` perturbs one op's backward
/// rule and exists to prove the check can fail.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, eps: f64, fault: Option<OpKind>) -> Result<Vec<SlotError>> {
    let cfg = ModelConfig { output_scale: 1.0, ..cfg.clone() };
    let mut params = ModelParams::init(&cfg, seed)?;
    for slot in params.slots_mut() {
        let mut r = rng::stream(seed, &alloc::format!("gradcheck/{}", slot.name));
        let gain = slot.name.ends_with(".gamma");
        for v in slot.value.data_mut() {
            let u = rng::uniform(&mut r, -0.5, 0.5);
            *v = if gain { 1.0 + u } else { u };
        }
    }
    let mut r = rng::stream(seed, "gradcheck/input");
    let frames: Vec<Vec<[f64; 2]>> = (0..cfg.frames)
        .map(|_| (0..cfg.num_joints).map(|_| [rng::uniform(&mut r, -1.0, 1.0), rng::uniform(&mut r, -1.0, 1.0)]).collect())
        .collect();
    let readout = Tensor::new(
        alloc::vec![cfg.num_joints, 3],
        (0..cfg.num_joints * 3).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect(),
    )?;
    let report = finite_diff_check(
        |t, leaves| {
            if let Some(kind) = fault {
                t.inject_fault(kind);
            }
            let vars = ModelVars::from_leaves(&params, &cfg, leaves.to_vec())?;
            let out = forward(t, &frames, &vars, &cfg)?;
            let w = t.constant(readout.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        },
        &params.tensors(),
        eps,
    )?;
    Ok(params
        .slots()
        .iter()
        .zip(report.per_param)
        .map(|(slot, error)| SlotError { name: slot.name.clone(), error })
        .collect())
}
