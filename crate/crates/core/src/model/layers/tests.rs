use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::gradcheck::finite_diff_check;
use crate::model::params::param_ledger;
use crate::rng::{self, StreamRng};

type M = Vec<Vec<f64>>;

// ---- straight-line reference implementations on nested vectors ----

fn to_m(t: &Tensor) -> M {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn mm(a: &M, b: &M) -> M {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().enumerate().map(|(t, x)| x * b[t][j]).sum()).collect())
        .collect()
}

fn tr(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_row(a: &M, b: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn affine(x: &M, w: &Tensor, b: &Tensor) -> M {
    add_row(&mm(x, &to_m(w)), b.data())
}

fn ln_rows(x: &M, g: &[f64], b: &[f64], eps: f64) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| g[j] * (v - mu) / (var + eps).sqrt() + b[j]).collect()
        })
        .collect()
}

// GroupNorm with a single group over a channels × positions map.
fn gn(x: &M, groups: usize, g: &[f64], b: &[f64], eps: f64) -> M {
    let per = x.len() / groups;
    let mut out = x.clone();
    for grp in 0..groups {
        let rows = &x[grp * per..(grp + 1) * per];
        let all: Vec<f64> = rows.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mu = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        for c in grp * per..(grp + 1) * per {
            for (o, v) in out[c].iter_mut().zip(&x[c]) {
                *o = g[c] * (v - mu) / (var + eps).sqrt() + b[c];
            }
        }
    }
    out
}

fn conv(x: &M, k: &M, b: &[f64]) -> M {
    let kw = k[0].len() as isize;
    let pad = (kw - 1) / 2;
    x.iter()
        .enumerate()
        .map(|(c, row)| {
            (0..row.len() as isize)
                .map(|p| {
                    let mut s = b[c];
                    for j in 0..kw {
                        let q = p + j - pad;
                        if q >= 0 && (q as usize) < row.len() {
                            s += k[c][j as usize] * row[q as usize];
                        }
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn gelu_m(x: &M) -> M {
    x.iter()
        .map(|r| r.iter().map(|v| v * 0.5 * (1.0 + libm::erf(v / core::f64::consts::SQRT_2))).collect())
        .collect()
}

fn softmax(x: &M) -> M {
    x.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn max_diff(a: &M, t: &Tensor) -> f64 {
    a.iter().flatten().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- fixtures ----

fn random_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut params = ModelParams::init(cfg, seed).unwrap();
    for slot in params.slots_mut() {
        let mut r = rng::stream(seed ^ 0x5eed, &slot.name);
        let is_gain = slot.name.ends_with(".gamma");
        for v in slot.value.data_mut() {
            let u = rng::uniform(&mut r, -scale, scale);
            *v = if is_gain { 1.0 + u } else { u };
        }
    }
    params
}

fn random_frames(rng: &mut StreamRng, f: usize, j: usize) -> Vec<Vec<[f64; 2]>> {
    (0..f)
        .map(|_| (0..j).map(|_| [rng::uniform(rng, -1.0, 1.0), rng::uniform(rng, -1.0, 1.0)]).collect())
        .collect()
}

fn random_tensor(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(rng, -scale, scale)).collect()).unwrap()
}

fn p<'a>(params: &'a ModelParams, name: &str) -> &'a Tensor {
    params.get(name).unwrap_or_else(|| panic!("{name}"))
}

fn set(params: &mut ModelParams, name: &str, value: f64) {
    params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = value);
}

fn run_block<F>(params: &ModelParams, cfg: &ModelConfig, input: &Tensor, f: F) -> Tensor
where
    F: FnOnce(&mut Tape, Var, &ModelVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params, cfg, false).unwrap();
    let x = tape.constant(input.clone());
    let out = f(&mut tape, x, &vars).unwrap();
    tape.value(out).clone()
}

fn tiny() -> ModelConfig {
    ModelConfig { output_scale: 1.0, ..ModelConfig::tiny() }
}

// ---- embedding ----

#[test]
fn embed_zero_weights_without_table_is_zero() {
    let cfg = ModelConfig { spatial_embed_enabled: false, ..tiny() };
    let params = ModelParams::zeros(&cfg).unwrap();
    let mut r = rng::stream(1, "embed");
    let x = random_tensor(&mut r, &[3, 2], 1.0);
    let out = run_block(&params, &cfg, &x, |t, x, v| embed_joints(t, x, v, &cfg));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn embed_zero_weights_returns_table() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 2, 1.0);
    set(&mut params, "embed.weight", 0.0);
    set(&mut params, "embed.bias", 0.0);
    let mut r = rng::stream(2, "embed");
    let x = random_tensor(&mut r, &[3, 2], 1.0);
    let out = run_block(&params, &cfg, &x, |t, x, v| embed_joints(t, x, v, &cfg));
    assert_eq!(out.data(), p(&params, "spatial_pos").data());
}

#[test]
fn embed_matches_per_joint_oracle() {
    let cfg = tiny();
    let params = random_params(&cfg, 3, 1.0);
    let mut r = rng::stream(3, "embed");
    let x = random_tensor(&mut r, &[3, 2], 1.0);
    let out = run_block(&params, &cfg, &x, |t, x, v| embed_joints(t, x, v, &cfg));
    let w = p(&params, "embed.weight");
    let b = p(&params, "embed.bias");
    let pos = p(&params, "spatial_pos");
    for j in 0..3 {
        for d in 0..4 {
            let expected = x.at(j, 0) * w.at(0, d) + x.at(j, 1) * w.at(1, d) + b.data()[d] + pos.at(j, d);
            assert!((out.at(j, d) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn embed_rejects_wrong_joint_count() {
    let cfg = tiny();
    let params = ModelParams::zeros(&cfg).unwrap();
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, &params, &cfg, false).unwrap();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(embed_joints(&mut tape, x, &vars, &cfg), Err(Error::Shape { .. })));
}

// ---- attention ----

#[test]
fn attention_with_zero_values_returns_output_bias() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 4, 1.0);
    set(&mut params, "spatial.0.attn.v.weight", 0.0);
    set(&mut params, "spatial.0.attn.v.bias", 0.0);
    let mut r = rng::stream(4, "attn");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, cfg.heads, cfg.attention_scale)
    });
    let bias = p(&params, "spatial.0.attn.out.bias").data();
    for row in 0..3 {
        assert_eq!(out.row(row), bias);
    }
}

#[test]
fn attention_single_token() {
    let cfg = tiny();
    let params = random_params(&cfg, 5, 1.0);
    let mut r = rng::stream(5, "attn");
    let z = random_tensor(&mut r, &[1, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, cfg.heads, cfg.attention_scale)
    });
    let zm = to_m(&z);
    let v = affine(&zm, p(&params, "spatial.0.attn.v.weight"), p(&params, "spatial.0.attn.v.bias"));
    let expected = affine(&v, p(&params, "spatial.0.attn.out.weight"), p(&params, "spatial.0.attn.out.bias"));
    assert!(max_diff(&expected, &out) < 1e-12);
}

fn single_head_oracle(params: &ModelParams, z: &Tensor, divisor: f64) -> M {
    let zm = to_m(z);
    let q = affine(&zm, p(params, "spatial.0.attn.q.weight"), p(params, "spatial.0.attn.q.bias"));
    let k = mm(&zm, &to_m(p(params, "spatial.0.attn.k.weight")));
    let v = affine(&zm, p(params, "spatial.0.attn.v.weight"), p(params, "spatial.0.attn.v.bias"));
    let scores: M = mm(&q, &tr(&k)).iter().map(|r| r.iter().map(|s| s / divisor).collect()).collect();
    let a = mm(&softmax(&scores), &v);
    affine(&a, p(params, "spatial.0.attn.out.weight"), p(params, "spatial.0.attn.out.bias"))
}

#[test]
fn single_head_attention_matches_oracle() {
    let cfg = ModelConfig { heads: 1, ..tiny() };
    let params = random_params(&cfg, 6, 1.0);
    let mut r = rng::stream(6, "attn");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, 1, AttentionScale::PerHeadDim)
    });
    assert!(max_diff(&single_head_oracle(&params, &z, 2.0), &out) < 1e-10);
    let out = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, 1, AttentionScale::TokenCount)
    });
    assert!(max_diff(&single_head_oracle(&params, &z, 3f64.sqrt()), &out) < 1e-10);
}

#[test]
fn attention_scales_coincide_when_tokens_equal_width() {
    let cfg = ModelConfig { heads: 1, ..tiny() };
    let params = random_params(&cfg, 7, 1.0);
    let mut r = rng::stream(7, "attn");
    let z = random_tensor(&mut r, &[4, 4], 1.0);
    let a = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, 1, AttentionScale::PerHeadDim)
    });
    let b = run_block(&params, &cfg, &z, |t, z, v| {
        multi_head_attention(t, z, &v.spatial[0].attn, 1, AttentionScale::TokenCount)
    });
    assert_eq!(a, b);
}

// ---- cross-joint interaction ----

#[test]
fn cji_with_zero_kernels_is_identity() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 8, 1.0);
    for name in ["conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias"] {
        set(&mut params, &alloc::format!("spatial.0.cji.{name}"), 0.0);
    }
    set(&mut params, "spatial.0.cji.norm.beta", 0.0);
    let mut r = rng::stream(8, "cji");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| cji(t, z, v.spatial[0].cji.as_ref().unwrap(), &cfg));
    assert_eq!(out, z);
}

#[test]
fn cji_with_silenced_norm_is_residual_only() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 9, 1.0);
    let kernel = params.get_mut("spatial.0.cji.conv2.kernel").unwrap();
    for c in 0..4 {
        for j in 0..5 {
            kernel.data_mut()[c * 5 + j] = if j == 2 { 1.0 } else { 0.0 };
        }
    }
    set(&mut params, "spatial.0.cji.conv2.bias", 0.0);
    set(&mut params, "spatial.0.cji.norm.gamma", 0.0);
    set(&mut params, "spatial.0.cji.norm.beta", 0.0);
    let mut r = rng::stream(9, "cji");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| cji(t, z, v.spatial[0].cji.as_ref().unwrap(), &cfg));
    assert_eq!(out, z);
}

#[test]
fn cji_matches_primitive_composition() {
    let cfg = ModelConfig { num_joints: 5, ..tiny() };
    let params = random_params(&cfg, 10, 1.0);
    let mut r = rng::stream(10, "cji");
    let z = random_tensor(&mut r, &[5, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| cji(t, z, v.spatial[0].cji.as_ref().unwrap(), &cfg));
    let pre = "spatial.0.cji";
    let zt = tr(&to_m(&z));
    let h = conv(&zt, &to_m(p(&params, &alloc::format!("{pre}.conv1.kernel"))), p(&params, &alloc::format!("{pre}.conv1.bias")).data());
    let h = gelu_m(&h);
    let h = gn(&h, cfg.groupnorm_groups, p(&params, &alloc::format!("{pre}.norm.gamma")).data(), p(&params, &alloc::format!("{pre}.norm.beta")).data(), cfg.norm_eps);
    let h = conv(&h, &to_m(p(&params, &alloc::format!("{pre}.conv2.kernel"))), p(&params, &alloc::format!("{pre}.conv2.bias")).data());
    let expected = add(&tr(&h), &to_m(&z));
    assert!(max_diff(&expected, &out) < 1e-10);
}

// ---- spatial block ----

fn silence_value_paths(params: &mut ModelParams, prefix: &str) {
    for name in ["attn.v.weight", "attn.v.bias", "attn.out.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        set(params, &alloc::format!("{prefix}.{name}"), 0.0);
    }
}

#[test]
fn spatial_block_with_silenced_paths_is_final_norm() {
    let cfg = ModelConfig { cji_enabled: false, ..tiny() };
    let mut params = random_params(&cfg, 11, 1.0);
    silence_value_paths(&mut params, "spatial.0");
    let mut r = rng::stream(11, "block");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| spatial_block(t, z, &v.spatial[0], &cfg));
    let expected = ln_rows(
        &to_m(&z),
        p(&params, "spatial.0.ln_out.gamma").data(),
        p(&params, "spatial.0.ln_out.beta").data(),
        cfg.norm_eps,
    );
    assert!(max_diff(&expected, &out) < 1e-12);
}

#[test]
fn spatial_block_is_neutral_to_zeroed_cji() {
    let with = tiny();
    let without = ModelConfig { cji_enabled: false, ..tiny() };
    let mut params = random_params(&with, 12, 1.0);
    params.zero_interaction_modules();
    let bare = ModelParams::from_slots(
        &without,
        params.slots().iter().filter(|s| !s.name.contains(".cji.")).cloned().collect(),
    )
    .unwrap();
    let mut r = rng::stream(12, "block");
    let z = random_tensor(&mut r, &[3, 4], 1.0);
    let a = run_block(&params, &with, &z, |t, z, v| spatial_block(t, z, &v.spatial[0], &with));
    let b = run_block(&bare, &without, &z, |t, z, v| spatial_block(t, z, &v.spatial[0], &without));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

fn block_gradcheck<F>(cfg: &ModelConfig, seed: u64, input_shape: &[usize], f: F) -> f64
where
    F: Fn(&mut Tape, Var, &ModelVars) -> Result<Var>,
{
    let params = random_params(cfg, seed, 0.5);
    let mut r = rng::stream(seed, "gradcheck-input");
    let input = random_tensor(&mut r, input_shape, 1.0);
    let readout = random_tensor(&mut r, input_shape, 1.0);
    let report = finite_diff_check(
        |t, leaves| {
            let vars = ModelVars::from_leaves(&params, cfg, leaves.to_vec())?;
            let x = t.constant(input.clone());
            let out = f(t, x, &vars)?;
            let w = t.constant(readout.clone());
            let prod = t.mul(out, w)?;
            Ok(t.sum(prod))
        },
        &params.tensors(),
        1e-5,
    )
    .unwrap();
    report.max_error()
}

#[test]
fn spatial_block_gradient_check() {
    let cfg = tiny();
    let err = block_gradcheck(&cfg, 13, &[3, 4], |t, z, v| spatial_block(t, z, &v.spatial[0], &cfg));
    assert!(err < 1e-4, "{err}");
}

// ---- cross-frame interaction ----

#[test]
fn cfi_with_zero_values_is_identity() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 14, 1.0);
    set(&mut params, "temporal.0.cfi.w_v", 0.0);
    set(&mut params, "temporal.0.cfi.norm.gamma", 0.0);
    set(&mut params, "temporal.0.cfi.norm.beta", 0.0);
    let mut r = rng::stream(14, "cfi");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| cfi(t, z, v.temporal[0].cfi.as_ref().unwrap(), &cfg));
    assert_eq!(out, z);
}

fn cfi_oracle(params: &ModelParams, cfg: &ModelConfig, z: &Tensor) -> M {
    let zm = to_m(z);
    let c = zm[0].len();
    let proj = |name: &str| -> M {
        let w = p(params, &alloc::format!("temporal.0.cfi.{name}"));
        match cfg.cfi_projection {
            CfiProjection::Dense => mm(&zm, &to_m(w)),
            CfiProjection::Depthwise => zm.iter().map(|r| r.iter().zip(w.data()).map(|(x, s)| x * s).collect()).collect(),
        }
    };
    let (k, q, v) = (proj("w_k"), proj("w_q"), proj("w_v"));
    let corr: M = mm(&k, &tr(&q)).iter().map(|r| r.iter().map(|s| s / c as f64).collect()).collect();
    let mixed = mm(&corr, &v);
    let h = affine(&mixed, p(params, "temporal.0.cfi.conv.weight"), p(params, "temporal.0.cfi.conv.bias"));
    let h = gn(&tr(&h), cfg.groupnorm_groups, p(params, "temporal.0.cfi.norm.gamma").data(), p(params, "temporal.0.cfi.norm.beta").data(), cfg.norm_eps);
    add(&tr(&h), &zm)
}

#[test]
fn cfi_single_frame_by_hand() {
    let cfg = ModelConfig { frames: 1, ..tiny() };
    let params = random_params(&cfg, 15, 1.0);
    let mut r = rng::stream(15, "cfi");
    let z = random_tensor(&mut r, &[1, 12], 1.0);
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, &params, &cfg, false).unwrap();
    let x = tape.constant(z.clone());
    let c = vars.temporal[0].cfi.unwrap();
    let k = tape.scale_cols(x, c.w_k).unwrap();
    let q = tape.scale_cols(x, c.w_q).unwrap();
    let qt = tape.transpose(q).unwrap();
    let corr = tape.matmul(k, qt).unwrap();
    let corr = tape.scale(corr, 1.0 / 12.0);
    let wk = vec_of(p(&params, "temporal.0.cfi.w_k"));
    let wq = vec_of(p(&params, "temporal.0.cfi.w_q"));
    let dot: f64 = (0..12).map(|i| z.data()[i] * wk[i] * z.data()[i] * wq[i]).sum();
    assert!((tape.value(corr).data()[0] - dot / 12.0).abs() < 1e-14);
    let out = run_block(&params, &cfg, &z, |t, z, v| cfi(t, z, v.temporal[0].cfi.as_ref().unwrap(), &cfg));
    assert!(max_diff(&cfi_oracle(&params, &cfg, &z), &out) < 1e-12);
}

#[test]
fn cfi_matches_matrix_product_oracle() {
    // F = 3, C_t = 6 (J = 3, D = 2)
    for mode in [CfiProjection::Depthwise, CfiProjection::Dense] {
        let cfg = ModelConfig { spatial_dim: 2, groupnorm_groups: 2, cfi_projection: mode, ..tiny() };
        let params = random_params(&cfg, 16, 1.0);
        let mut r = rng::stream(16, "cfi");
        let z = random_tensor(&mut r, &[3, 6], 1.0);
        let out = run_block(&params, &cfg, &z, |t, z, v| cfi(t, z, v.temporal[0].cfi.as_ref().unwrap(), &cfg));
        assert!(max_diff(&cfi_oracle(&params, &cfg, &z), &out) < 1e-10, "{mode:?}");
    }
}

// ---- temporal block ----

#[test]
fn temporal_block_is_neutral_to_silenced_cfi() {
    let with = tiny();
    let without = ModelConfig { cfi_enabled: false, ..tiny() };
    let mut params = random_params(&with, 17, 1.0);
    set(&mut params, "temporal.0.cfi.w_v", 0.0);
    set(&mut params, "temporal.0.cfi.norm.gamma", 0.0);
    set(&mut params, "temporal.0.cfi.norm.beta", 0.0);
    let bare = ModelParams::from_slots(
        &without,
        params.slots().iter().filter(|s| !s.name.contains(".cfi.")).cloned().collect(),
    )
    .unwrap();
    let mut r = rng::stream(17, "block");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let a = run_block(&params, &with, &z, |t, z, v| temporal_block(t, z, &v.temporal[0], &with));
    let b = run_block(&bare, &without, &z, |t, z, v| temporal_block(t, z, &v.temporal[0], &without));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn temporal_block_single_frame_keeps_shape() {
    let cfg = ModelConfig { frames: 1, ..tiny() };
    let params = random_params(&cfg, 18, 1.0);
    let mut r = rng::stream(18, "block");
    let z = random_tensor(&mut r, &[1, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| temporal_block(t, z, &v.temporal[0], &cfg));
    assert_eq!(out.shape(), &[1, 12]);
    assert!(out.is_finite());
}

#[test]
fn temporal_block_gradient_check() {
    for mode in [CfiProjection::Depthwise, CfiProjection::Dense] {
        let cfg = ModelConfig { cfi_projection: mode, ..tiny() };
        let err = block_gradcheck(&cfg, 19, &[3, 12], |t, z, v| temporal_block(t, z, &v.temporal[0], &cfg));
        assert!(err < 1e-4, "{mode:?}: {err}");
    }
}

// ---- regression head ----

#[test]
fn head_one_hot_center_reads_normalized_center_frame() {
    let cfg = ModelConfig { num_joints: 4, spatial_dim: 3, heads: 1, groupnorm_groups: 3, ..tiny() }; // C_t = 12 = J·3
    let mut params = random_params(&cfg, 20, 1.0);
    let fw = params.get_mut("head.frame_weights").unwrap();
    fw.data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
    set(&mut params, "head.norm.gamma", 1.0);
    set(&mut params, "head.norm.beta", 0.0);
    *params.get_mut("head.proj.weight").unwrap() = Tensor::identity(12);
    set(&mut params, "head.proj.bias", 0.0);
    let mut r = rng::stream(20, "head");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| regression_head(t, z, &v.head, &cfg));
    assert_eq!(out.shape(), &[4, 3]);
    let ones = vec![1.0; 12];
    let zeros = vec![0.0; 12];
    let expected = ln_rows(&vec![z.row(1).to_vec()], &ones, &zeros, cfg.norm_eps);
    assert!(max_diff(&expected, &out) < 1e-12);
}

#[test]
fn head_with_zero_weights_returns_bias() {
    let cfg = tiny();
    let mut params = random_params(&cfg, 21, 1.0);
    set(&mut params, "head.proj.weight", 0.0);
    let mut r = rng::stream(21, "head");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| regression_head(t, z, &v.head, &cfg));
    assert_eq!(out.data(), p(&params, "head.proj.bias").data());
}

#[test]
fn head_matches_composition_oracle() {
    let cfg = ModelConfig { output_scale: 7.5, ..tiny() };
    let params = random_params(&cfg, 22, 1.0);
    let mut r = rng::stream(22, "head");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| regression_head(t, z, &v.head, &cfg));
    let w = p(&params, "head.frame_weights").data();
    let pooled: Vec<f64> = (0..12).map(|c| (0..3).map(|f| w[f] * z.at(f, c)).sum()).collect();
    let normed = ln_rows(&vec![pooled], p(&params, "head.norm.gamma").data(), p(&params, "head.norm.beta").data(), cfg.norm_eps);
    let projected = affine(&normed, p(&params, "head.proj.weight"), p(&params, "head.proj.bias"));
    let scaled: M = projected.iter().map(|r| r.iter().map(|v| v * 7.5).collect()).collect();
    assert!(max_diff(&scaled, &out) < 1e-12);
}

#[test]
fn head_norm_after_projection_variant() {
    let cfg = ModelConfig { head_norm: HeadNorm::AfterProjection, ..tiny() };
    let params = random_params(&cfg, 23, 1.0);
    assert_eq!(p(&params, "head.norm.gamma").shape(), &[9]);
    let mut r = rng::stream(23, "head");
    let z = random_tensor(&mut r, &[3, 12], 1.0);
    let out = run_block(&params, &cfg, &z, |t, z, v| regression_head(t, z, &v.head, &cfg));
    let w = p(&params, "head.frame_weights").data();
    let pooled: Vec<f64> = (0..12).map(|c| (0..3).map(|f| w[f] * z.at(f, c)).sum()).collect();
    let projected = affine(&vec![pooled], p(&params, "head.proj.weight"), p(&params, "head.proj.bias"));
    let normed = ln_rows(&projected, p(&params, "head.norm.gamma").data(), p(&params, "head.norm.beta").data(), cfg.norm_eps);
    assert!(max_diff(&normed, &out) < 1e-12);
}

// ---- full forward ----

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 24).unwrap();
    let mut r = rng::stream(24, "frames");
    let frames = random_frames(&mut r, 3, 3);
    let a = predict(&params, &cfg, &frames).unwrap();
    let b = predict(&params, &cfg, &frames).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.map(f64::to_bits), y.map(f64::to_bits));
    }
}

#[test]
fn forward_rejects_wrong_frame_count() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let mut r = rng::stream(0, "frames");
    let frames = random_frames(&mut r, 5, 3);
    assert!(matches!(predict(&params, &cfg, &frames), Err(Error::Shape { .. })));
}

#[test]
fn forward_neutral_to_zeroed_interaction_modules() {
    for toggles in [(true, true), (false, true), (true, false), (false, false)] {
        let base = tiny().with_toggles(true, true, toggles.0, toggles.1);
        let off = ModelConfig { cji_enabled: false, cfi_enabled: false, ..base.clone() };
        let mut params = random_params(&base, 25, 0.5);
        params.zero_interaction_modules();
        let bare = ModelParams::from_slots(
            &off,
            params.slots().iter().filter(|s| !crate::model::is_interaction_slot(&s.name)).cloned().collect(),
        )
        .unwrap();
        let mut r = rng::stream(25, "frames");
        let frames = random_frames(&mut r, 3, 3);
        let a = predict(&params, &base, &frames).unwrap();
        let b = predict(&bare, &off, &frames).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn spatial_stage_is_per_frame() {
    let cfg = ModelConfig { frames: 5, ..tiny() };
    let params = random_params(&cfg, 26, 0.5);
    let mut r = rng::stream(26, "frames");
    let frames = random_frames(&mut r, 5, 3);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<_> = perm.iter().map(|&i| frames[i].clone()).collect();
    let run = |input: &[Vec<[f64; 2]>]| {
        let mut tape = Tape::new();
        let vars = ModelVars::bind(&mut tape, &params, &cfg, false).unwrap();
        let outs = spatial_stage(&mut tape, input, &vars, &cfg).unwrap();
        outs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    let plain = run(&frames);
    let shuffled = run(&permuted);
    for (slot, &src) in perm.iter().enumerate() {
        assert!(shuffled[slot].max_abs_diff(&plain[src]) < 1e-12);
    }
}

#[test]
fn ledger_matches_bound_slots() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, &params, &cfg, true).unwrap();
    assert_eq!(vars.leaves.len(), param_ledger(&cfg).len());
}

#[test]
fn forward_gradient_check_covers_every_slot() {
    for seed in 1..=8 {
        for mode in [CfiProjection::Depthwise, CfiProjection::Dense] {
            let cfg = ModelConfig { cfi_projection: mode, ..ModelConfig::tiny() };
            let report = crate::gradcheck::model_gradcheck(&cfg, seed, crate::gradcheck::DEFAULT_EPS, None).unwrap();
            assert_eq!(report.len(), param_ledger(&cfg).len());
            for slot in &report {
                assert!(slot.error < 1e-4, "seed {seed} {mode:?} {}: {}", slot.name, slot.error);
            }
        }
    }
}

#[test]
fn injected_backward_fault_is_detected() {
    let report =
        crate::gradcheck::model_gradcheck(&ModelConfig::tiny(), 1, crate::gradcheck::DEFAULT_EPS, Some(crate::autodiff::OpKind::DepthwiseConv1d))
            .unwrap();
    let worst = report.iter().map(|s| s.error).fold(0.0, f64::max);
    assert!(worst > 1e-2, "{worst}");
}

#[test]
fn forward_shape_at_full_sizes() {
    for f in [9, 27, 81] {
        let cfg = ModelConfig { spatial_layers: 1, temporal_layers: 1, ..ModelConfig::full(f) };
        let params = ModelParams::init(&cfg, 28).unwrap();
        let mut r = rng::stream(28, "frames");
        let frames = random_frames(&mut r, f, 17);
        let out = predict(&params, &cfg, &frames).unwrap();
        assert_eq!(out.len(), 17);
        assert!(out.iter().flatten().all(|v| v.is_finite()));
    }
}
