use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::rng::{self, StreamRng};

fn random_pose(r: &mut StreamRng, j: usize, scale: f64) -> Pose3 {
    (0..j).map(|_| [rng::uniform(r, -scale, scale), rng::uniform(r, -scale, scale), rng::uniform(r, -scale, scale)]).collect()
}

// Uniform random rotation from a normalized quaternion.
fn random_rotation(r: &mut StreamRng) -> Mat3 {
    let mut q = [0.0; 4];
    loop {
        for v in &mut q {
            *v = rng::uniform(r, -1.0, 1.0);
        }
        let n: f64 = q.iter().map(|v| v * v).sum();
        if n > 1e-3 && n <= 1.0 {
            let n = n.sqrt();
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn similarity(pose: &[[f64; 3]], rot: &Mat3, scale: f64, shift: [f64; 3]) -> Pose3 {
    pose.iter()
        .map(|p| {
            let mut out = shift;
            for r in 0..3 {
                out[r] += scale * (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2]);
            }
            out
        })
        .collect()
}

fn random_similarity(r: &mut StreamRng) -> (Mat3, f64, [f64; 3]) {
    let rot = random_rotation(r);
    let scale = rng::uniform(r, 0.2, 5.0);
    let shift = [rng::uniform(r, -500.0, 500.0), rng::uniform(r, -500.0, 500.0), rng::uniform(r, -500.0, 500.0)];
    (rot, scale, shift)
}

fn max_point_diff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sq_residual(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()).sum()
}

#[test]
fn mpjpe_examples() {
    let gt = vec![[0.0; 3]; 4];
    assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    assert_eq!(mpjpe(&vec![[3.0, 4.0, 0.0]; 4], &gt).unwrap(), 5.0);
    assert!(matches!(mpjpe(&gt[..3], &gt), Err(Error::Shape { .. })));
}

#[test]
fn mpjpe_matches_direct_formula() {
    let mut r = rng::stream(1, "mpjpe");
    let (p, g) = (random_pose(&mut r, 17, 300.0), random_pose(&mut r, 17, 300.0));
    let mut total = 0.0;
    for k in 0..17 {
        let d = [p[k][0] - g[k][0], p[k][1] - g[k][1], p[k][2] - g[k][2]];
        total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    assert!((mpjpe(&p, &g).unwrap() - total / 17.0).abs() < 1e-12);
    assert_eq!(mpjpe(&p, &g).unwrap(), mpjpe(&g, &p).unwrap());
}

#[test]
fn svd_reconstructs_and_is_orthonormal() {
    let mut r = rng::stream(2, "svd");
    let mut cases: Vec<Mat3> = (0..50)
        .map(|_| {
            let mut m = [[0.0; 3]; 3];
            m.iter_mut().flatten().for_each(|v| *v = rng::uniform(&mut r, -10.0, 10.0));
            m
        })
        .collect();
    // rank 2, rank 1 and zero
    cases.push([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [5.0, 7.0, 9.0]]);
    cases.push([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]]);
    cases.push([[0.0; 3]; 3]);
    for m in cases {
        let (u, s, vt) = svd3(&m);
        assert!(s[0] >= s[1] && s[1] >= s[2] && s[2] >= 0.0);
        let scale = m.iter().flatten().map(|v| v.abs()).fold(1e-300, f64::max);
        for i in 0..3 {
            for j in 0..3 {
                let rec: f64 = (0..3).map(|k| u[i][k] * s[k] * vt[k][j]).sum();
                assert!((rec - m[i][j]).abs() < 1e-10 * scale, "{m:?}");
                let uu: f64 = (0..3).map(|k| u[k][i] * u[k][j]).sum();
                let vv: f64 = (0..3).map(|k| vt[i][k] * vt[j][k]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                assert!((uu - id).abs() < 1e-10 && (vv - id).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn alignment_of_identical_poses_is_identity() {
    let mut r = rng::stream(3, "align");
    let g = random_pose(&mut r, 17, 300.0);
    assert!(max_point_diff(&procrustes_align(&g, &g).unwrap(), &g) < 1e-10);
    assert!(p_mpjpe(&g, &g).unwrap() < 1e-10);
}

#[test]
fn alignment_recovers_similarity_transforms() {
    let mut r = rng::stream(4, "align");
    for _ in 0..50 {
        let g = random_pose(&mut r, 17, 300.0);
        let (rot, scale, shift) = random_similarity(&mut r);
        let pred = similarity(&g, &rot, scale, shift);
        assert!(max_point_diff(&procrustes_align(&pred, &g).unwrap(), &g) < 1e-8);
        assert!(p_mpjpe(&pred, &g).unwrap() < 1e-6);
    }
}

#[test]
fn alignment_handles_reflections_and_three_joints() {
    let mut r = rng::stream(5, "align");
    let g = random_pose(&mut r, 3, 300.0);
    let (rot, scale, shift) = random_similarity(&mut r);
    let pred = similarity(&g, &rot, scale, shift);
    assert!(p_mpjpe(&pred, &g).unwrap() < 1e-6);
    // A mirrored pose cannot be reached by a proper rotation.
    let g = random_pose(&mut r, 17, 300.0);
    let mirrored: Pose3 = g.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let aligned = procrustes_align(&mirrored, &g).unwrap();
    assert!(p_mpjpe(&mirrored, &g).unwrap() <= mpjpe(&mirrored, &g).unwrap() + 1e-9);
    assert!(aligned.iter().all(|p| p.iter().all(|v| v.is_finite())));
}

#[test]
fn alignment_is_optimal_against_random_transforms() {
    let mut r = rng::stream(6, "align");
    let (p, g) = (random_pose(&mut r, 17, 300.0), random_pose(&mut r, 17, 300.0));
    let best = sq_residual(&procrustes_align(&p, &g).unwrap(), &g);
    let (mp, mg) = (centroid(&p), centroid(&g));
    let centered: Pose3 = p.iter().map(|q| [q[0] - mp[0], q[1] - mp[1], q[2] - mp[2]]).collect();
    for _ in 0..1000 {
        let rot = random_rotation(&mut r);
        let scale = rng::uniform(&mut r, 0.0, 2.0);
        let jitter = [rng::uniform(&mut r, -50.0, 50.0), rng::uniform(&mut r, -50.0, 50.0), rng::uniform(&mut r, -50.0, 50.0)];
        let shift = [mg[0] + jitter[0], mg[1] + jitter[1], mg[2] + jitter[2]];
        assert!(best <= sq_residual(&similarity(&centered, &rot, scale, shift), &g) + 1e-9);
    }
}

#[test]
fn alignment_rejects_degenerate_input() {
    let g = vec![[1.0, 2.0, 3.0]; 5];
    assert!(matches!(procrustes_align(&g, &g), Err(Error::Alignment(_))));
    let mut r = rng::stream(7, "align");
    let p = random_pose(&mut r, 5, 10.0);
    assert!(matches!(procrustes_align(&p, &g), Err(Error::Alignment(_))));
    assert!(matches!(procrustes_align(&p[..2], &p[..2]), Err(Error::Alignment(_))));
}

#[test]
fn rigid_only_alignment_keeps_scale() {
    let mut r = rng::stream(8, "align");
    let g = random_pose(&mut r, 17, 300.0);
    let rot = random_rotation(&mut r);
    let pred = similarity(&g, &rot, 2.0, [10.0, 0.0, 0.0]);
    assert!(p_mpjpe_with(&pred, &g, true).unwrap() < 1e-6);
    assert!(p_mpjpe_with(&pred, &g, false).unwrap() > 1.0);
    let rigid = similarity(&g, &rot, 1.0, [10.0, 0.0, 0.0]);
    assert!(p_mpjpe_with(&rigid, &g, false).unwrap() < 1e-6);
}

#[test]
fn p_mpjpe_is_composition() {
    let mut r = rng::stream(9, "align");
    let (p, g) = (random_pose(&mut r, 17, 300.0), random_pose(&mut r, 17, 300.0));
    let composed = mpjpe(&procrustes_align(&p, &g).unwrap(), &g).unwrap();
    assert!((p_mpjpe(&p, &g).unwrap() - composed).abs() < 1e-10);
}

#[test]
fn pck_examples() {
    let g = vec![[0.0; 3]; 6];
    for t in [0.0, 1.0, 150.0] {
        assert_eq!(pck(&g, &g, t).unwrap(), 1.0);
    }
    let at_boundary = vec![[150.0, 0.0, 0.0]; 6];
    assert_eq!(pck(&at_boundary, &g, 150.0).unwrap(), 1.0);
    assert!(pck(&g, &g, -1.0).is_err());
}

#[test]
fn auc_examples() {
    let g = vec![[0.0; 3]; 6];
    assert_eq!(auc(&g, &g).unwrap(), 1.0);
    assert_eq!(auc(&vec![[0.0, 150.5, 0.0]; 6], &g).unwrap(), 0.0);
    assert_eq!(auc_thresholds().len(), 31);
    assert_eq!(auc_thresholds()[30], 150.0);
}

fn brute_pck(p: &[[f64; 3]], g: &[[f64; 3]], t: f64) -> f64 {
    let mut hits = 0;
    for k in 0..p.len() {
        let d2 = (p[k][0] - g[k][0]).powi(2) + (p[k][1] - g[k][1]).powi(2) + (p[k][2] - g[k][2]).powi(2);
        if d2.sqrt() <= t {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

#[test]
fn pck_and_auc_match_counting_oracles() {
    let mut r = rng::stream(10, "pck");
    for _ in 0..100 {
        let g = random_pose(&mut r, 17, 300.0);
        let p: Pose3 = g.iter().map(|q| [q[0] + rng::uniform(&mut r, -120.0, 120.0), q[1], q[2] + rng::uniform(&mut r, -60.0, 60.0)]).collect();
        assert_eq!(pck(&p, &g, 150.0).unwrap(), brute_pck(&p, &g, 150.0));
        let mut sum = 0.0;
        for i in 0..31 {
            sum += brute_pck(&p, &g, 5.0 * i as f64);
        }
        assert!((auc(&p, &g).unwrap() - sum / 31.0).abs() < 1e-12);
    }
}

#[test]
fn report_aggregate_is_count_weighted() {
    let mut r = rng::stream(11, "report");
    let mut samples = Vec::new();
    for i in 0..37 {
        let action = ["walk", "wave", "squat"][i % 3];
        let g = random_pose(&mut r, 17, 300.0);
        let p = random_pose(&mut r, 17, 300.0);
        samples.push((action, Metrics::of(&p, &g).unwrap()));
    }
    samples.truncate(35);
    let report = EvalReport::from_samples(samples.iter().copied());
    assert_eq!(report.aggregate.count, 35);
    assert_eq!(report.per_action.len(), 3);
    let raw_mean = samples.iter().map(|s| s.1.mpjpe).sum::<f64>() / 35.0;
    assert!((report.aggregate.metrics.mpjpe - raw_mean).abs() < 1e-9);
    let weighted: f64 = report.per_action.values().map(|row| row.count as f64 * row.metrics.auc).sum::<f64>() / 35.0;
    assert!((report.aggregate.metrics.auc - weighted).abs() < 1e-9);
    assert_eq!(EvalReport::from_samples(Vec::new()).aggregate.count, 0);
}

proptest! {
    #[test]
    fn alignment_never_hurts(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "prop");
        let (p, g) = (random_pose(&mut r, 17, 300.0), random_pose(&mut r, 17, 300.0));
        prop_assert!(p_mpjpe(&p, &g).unwrap() <= mpjpe(&p, &g).unwrap() + 1e-9);
    }

    #[test]
    fn p_mpjpe_invariant_to_similarity_of_prediction(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "prop");
        let (p, g) = (random_pose(&mut r, 17, 300.0), random_pose(&mut r, 17, 300.0));
        let (rot, scale, shift) = random_similarity(&mut r);
        let moved = similarity(&p, &rot, scale, shift);
        prop_assert!((p_mpjpe(&moved, &g).unwrap() - p_mpjpe(&p, &g).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn pck_monotone_and_auc_bracketed(seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "prop");
        let g = random_pose(&mut r, 17, 300.0);
        let p: Pose3 = g.iter().map(|q| [q[0] + rng::uniform(&mut r, -150.0, 150.0), q[1], q[2]]).collect();
        let mut last = 0.0;
        for t in auc_thresholds() {
            let v = pck(&p, &g, t).unwrap();
            prop_assert!(v >= last);
            last = v;
        }
        let a = auc(&p, &g).unwrap();
        prop_assert!(a >= pck(&p, &g, 0.0).unwrap() && a <= pck(&p, &g, 150.0).unwrap());
    }
}
