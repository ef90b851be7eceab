//! Pose error protocols: MPJPE, similarity-aligned P-MPJPE, PCK and AUC.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Pose3;
use crate::error::{Error, Result};

/// PCK threshold used in reports, in millimetres.
pub const PCK_THRESHOLD: f64 = 150.0;

type Mat3 = [[f64; 3]; 3];

fn check_shapes(op: &'static str, pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(op, format!("{} predicted joints vs {} ground-truth joints", pred.len(), gt.len())));
    }
    Ok(())
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    libm::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]))
}

/// Per-joint Euclidean distances.
pub fn joint_errors(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Vec<f64>> {
    check_shapes("joint_errors", pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).collect())
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    check_shapes("mpjpe", pred, gt)?;
    Ok(joint_errors(pred, gt)?.iter().sum::<f64>() / pred.len() as f64)
}

/// Fraction of joints within `threshold` (inclusive).
pub fn pck(pred: &[[f64; 3]], gt: &[[f64; 3]], threshold: f64) -> Result<f64> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("pck threshold {threshold} must be non-negative")));
    }
    let errs = joint_errors(pred, gt)?;
    Ok(errs.iter().filter(|&&e| e <= threshold).count() as f64 / errs.len() as f64)
}

/// `0, 5, …, 150` millimetres.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=30).map(|i| 5.0 * i as f64).collect()
}

/// Mean PCK over the default threshold grid.
pub fn auc(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    auc_with(pred, gt, &auc_thresholds())
}

pub fn auc_with(pred: &[[f64; 3]], gt: &[[f64; 3]], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("auc needs at least one threshold".into()));
    }
    let errs = joint_errors(pred, gt)?;
    let mut total = 0.0;
    for &t in thresholds {
        if !(t >= 0.0) {
            return Err(Error::Config(format!("auc threshold {t} must be non-negative")));
        }
        total += errs.iter().filter(|&&e| e <= t).count() as f64 / errs.len() as f64;
    }
    Ok(total / thresholds.len() as f64)
}

/// Singular value decomposition `M = U·diag(s)·Vᵀ` of a 3×3 matrix by
/// one-sided Jacobi rotations. Singular values come out non-increasing and
/// `U`, `V` are orthonormal even when `M` is rank deficient.
pub fn svd3(m: &Mat3) -> (Mat3, [f64; 3], Mat3) {
    // Work on columns: a[j] is column j of M.
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[j][i] = m[i][j];
        }
    }
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]; // v[j] = column j of V
    for _ in 0..64 {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let alpha = dot(&a[p], &a[p]);
            let beta = dot(&a[q], &a[q]);
            let gamma = dot(&a[p], &a[q]);
            if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
            let c = 1.0 / libm::sqrt(1.0 + t * t);
            let s = c * t;
            for cols in [&mut a, &mut v] {
                let (cp, cq) = (cols[p], cols[q]);
                for k in 0..3 {
                    cols[p][k] = c * cp[k] - s * cq[k];
                    cols[q][k] = s * cp[k] + c * cq[k];
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    let norms = [norm(&a[0]), norm(&a[1]), norm(&a[2])];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let sigma = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let vcols = [v[order[0]], v[order[1]], v[order[2]]];
    let tol = 1e-13 * f64::max(sigma[0], f64::MIN_POSITIVE);
    let mut ucols = [[0.0; 3]; 3];
    let mut rank = 0;
    for k in 0..3 {
        if sigma[k] > tol {
            let col = a[order[k]];
            ucols[k] = [col[0] / sigma[k], col[1] / sigma[k], col[2] / sigma[k]];
            rank += 1;
        }
    }
    // Complete U to an orthonormal basis where singular values vanish.
    if rank == 0 {
        ucols[0] = [1.0, 0.0, 0.0];
    }
    if rank <= 1 {
        let u0 = ucols[0];
        let helper = if libm::fabs(u0[0]) < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        ucols[1] = normalize(cross(&u0, &helper));
    }
    if rank <= 2 {
        ucols[2] = cross(&ucols[0], &ucols[1]);
    }
    let mut u = [[0.0; 3]; 3];
    let mut vt = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            u[i][k] = ucols[k][i];
            vt[k][i] = vcols[k][i];
        }
    }
    (u, sigma, vt)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(&a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

/// Maps `pred` onto `gt` by the least-squares similarity transform
/// (rotation with det +1, uniform scale, translation).
pub fn procrustes_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Pose3> {
    procrustes_align_with(pred, gt, true)
}

/// As [`procrustes_align`]; `with_scale = false` fixes the scale at 1.
pub fn procrustes_align_with(pred: &[[f64; 3]], gt: &[[f64; 3]], with_scale: bool) -> Result<Pose3> {
    check_shapes("procrustes_align", pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Alignment(format!("need at least 3 joints, got {}", pred.len())));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let x: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] - mp[0], p[1] - mp[1], p[2] - mp[2]]).collect();
    let y: Vec<[f64; 3]> = gt.iter().map(|g| [g[0] - mg[0], g[1] - mg[1], g[2] - mg[2]]).collect();
    let var_x: f64 = x.iter().map(|p| dot(p, p)).sum();
    // cov = Σ y_i x_iᵀ
    let mut cov = [[0.0; 3]; 3];
    for (xi, yi) in x.iter().zip(&y) {
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += yi[r] * xi[c];
            }
        }
    }
    if !(var_x > 0.0) || cov.iter().flatten().all(|&v| v == 0.0) {
        return Err(Error::Alignment("degenerate pose: zero cross-covariance".into()));
    }
    if !cov.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Alignment("non-finite coordinates".into()));
    }
    let (u, sigma, vt) = svd3(&cov);
    let d = if det3(&u) * det3(&vt) < 0.0 { -1.0 } else { 1.0 };
    let signs = [1.0, 1.0, d];
    let mut rot = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rot[r][c] = (0..3).map(|k| u[r][k] * signs[k] * vt[k][c]).sum();
        }
    }
    let scale = if with_scale { (sigma[0] + sigma[1] + d * sigma[2]) / var_x } else { 1.0 };
    Ok(x.iter()
        .map(|xi| {
            let mut out = mg;
            for r in 0..3 {
                out[r] += scale * dot(&rot[r], xi);
            }
            out
        })
        .collect())
}

/// MPJPE after similarity alignment.
pub fn p_mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    mpjpe(&procrustes_align(pred, gt)?, gt)
}

pub fn p_mpjpe_with(pred: &[[f64; 3]], gt: &[[f64; 3]], with_scale: bool) -> Result<f64> {
    mpjpe(&procrustes_align_with(pred, gt, with_scale)?, gt)
}

/// The four numbers reported per pose, per action and overall.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub pck150: f64,
    pub auc: f64,
}

impl Metrics {
    pub fn of(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Self> {
        let p_mpjpe = match p_mpjpe(pred, gt) {
            // Zero cross-covariance: every rotation scores the same and the
            // optimal scale is 0, which maps all joints onto gt's centroid.
            Err(Error::Alignment(_)) if pred.len() >= 3 && pred.iter().flatten().all(|v| v.is_finite()) => {
                mpjpe(&vec![centroid(gt); gt.len()], gt)?
            }
            other => other?,
        };
        Ok(Metrics { mpjpe: mpjpe(pred, gt)?, p_mpjpe, pck150: pck(pred, gt, PCK_THRESHOLD)?, auc: auc(pred, gt)? })
    }
}

/// Mean metrics over `count` poses.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRow {
    pub count: usize,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub metrics: Metrics,
}

/// Per-action means and their count-weighted aggregate.
#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub per_action: BTreeMap<String, MetricRow>,
    pub aggregate: MetricRow,
}

impl EvalReport {
    /// Averages per-pose metrics by action.
    pub fn from_samples<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, Metrics)>,
    {
        let mut sums: BTreeMap<String, (usize, [f64; 4])> = BTreeMap::new();
        for (action, m) in samples {
            let entry = sums.entry(String::from(action)).or_insert((0, [0.0; 4]));
            entry.0 += 1;
            for (acc, v) in entry.1.iter_mut().zip([m.mpjpe, m.p_mpjpe, m.pck150, m.auc]) {
                *acc += v;
            }
        }
        let per_action: BTreeMap<String, MetricRow> = sums
            .into_iter()
            .map(|(a, (n, s))| {
                let k = n as f64;
                let metrics = Metrics { mpjpe: s[0] / k, p_mpjpe: s[1] / k, pck150: s[2] / k, auc: s[3] / k };
                (a, MetricRow { count: n, metrics })
            })
            .collect();
        let aggregate = weighted_mean(per_action.values());
        EvalReport { per_action, aggregate }
    }
}

fn weighted_mean<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> MetricRow {
    let mut count = 0;
    let mut s = [0.0; 4];
    for r in rows {
        count += r.count;
        let w = r.count as f64;
        let m = r.metrics;
        for (acc, v) in s.iter_mut().zip([m.mpjpe, m.p_mpjpe, m.pck150, m.auc]) {
            *acc += w * v;
        }
    }
    if count == 0 {
        return MetricRow::default();
    }
    let k = count as f64;
    MetricRow { count, metrics: Metrics { mpjpe: s[0] / k, p_mpjpe: s[1] / k, pck150: s[2] / k, auc: s[3] / k } }
}

#[cfg(test)]
mod tests;
