//! Pose sequences, the synthetic generator, receptive-field windows and
//! horizontal flipping.
//!
//! 2D joints are normalized image coordinates (pixels divided by the image
//! half-width); 3D joints are root-relative millimetres.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng;

pub type Pose2 = Vec<[f64; 2]>;
pub type Pose3 = Vec<[f64; 3]>;

/// Version written into every serialized record.
pub const SCHEMA_VERSION: u32 = 1;

/// Joint layout: names, mirror pairs and the root.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletonSpec {
    pub num_joints: usize,
    pub joint_names: Vec<String>,
    /// `(left, right)` joint indices.
    pub left_right_pairs: Vec<(usize, usize)>,
    pub root_index: usize,
    /// Root-relative neutral pose in millimetres, mirror-symmetric in x.
    pub rest_pose: Pose3,
}

impl SkeletonSpec {
    /// The 17-joint Human3.6M layout.
    pub fn h36m17() -> Self {
        let joints: [(&str, [f64; 3]); 17] = [
            ("hip", [0.0, 0.0, 0.0]),
            ("r_hip", [-130.0, 0.0, 0.0]),
            ("r_knee", [-130.0, -450.0, 0.0]),
            ("r_foot", [-130.0, -900.0, 0.0]),
            ("l_hip", [130.0, 0.0, 0.0]),
            ("l_knee", [130.0, -450.0, 0.0]),
            ("l_foot", [130.0, -900.0, 0.0]),
            ("spine", [0.0, 230.0, 0.0]),
            ("thorax", [0.0, 480.0, 0.0]),
            ("neck", [0.0, 580.0, 0.0]),
            ("head", [0.0, 680.0, 0.0]),
            ("l_shoulder", [170.0, 450.0, 0.0]),
            ("l_elbow", [190.0, 200.0, 0.0]),
            ("l_wrist", [200.0, -50.0, 0.0]),
            ("r_shoulder", [-170.0, 450.0, 0.0]),
            ("r_elbow", [-190.0, 200.0, 0.0]),
            ("r_wrist", [-200.0, -50.0, 0.0]),
        ];
        SkeletonSpec {
            num_joints: 17,
            joint_names: joints.iter().map(|(n, _)| n.to_string()).collect(),
            left_right_pairs: alloc::vec![(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)],
            root_index: 0,
            rest_pose: joints.iter().map(|(_, p)| *p).collect(),
        }
    }

    /// A chain of `num_joints` joints rooted at 0, with joints `(1, 2)`,
    /// `(3, 4)`, … as mirror pairs and any leftover joint on the midline.
    pub fn generic(num_joints: usize) -> Self {
        let mut rest_pose = Vec::with_capacity(num_joints);
        let mut pairs = Vec::new();
        for j in 0..num_joints {
            let p = if j == 0 {
                [0.0, 0.0, 0.0]
            } else {
                let level = ((j - 1) / 2) as f64 + 1.0;
                if j + 1 < num_joints || j % 2 == 0 {
                    let side = if j % 2 == 1 { 1.0 } else { -1.0 };
                    [side * 120.0 * level, 150.0 * level, 0.0]
                } else {
                    [0.0, 150.0 * level, 0.0]
                }
            };
            if j % 2 == 1 && j + 1 < num_joints {
                pairs.push((j, j + 1));
            }
            rest_pose.push(p);
        }
        SkeletonSpec {
            num_joints,
            joint_names: (0..num_joints).map(|j| format!("joint{j}")).collect(),
            left_right_pairs: pairs,
            root_index: 0,
            rest_pose,
        }
    }

    /// The built-in layout for `num_joints`: Human3.6M for 17, generic otherwise.
    pub fn for_joints(num_joints: usize) -> Self {
        if num_joints == 17 { Self::h36m17() } else { Self::generic(num_joints) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let j = self.num_joints;
        if j == 0 || self.joint_names.len() != j || self.rest_pose.len() != j {
            return fail(format!("skeleton: {j} joints but {} names, {} rest joints", self.joint_names.len(), self.rest_pose.len()));
        }
        if self.root_index >= j {
            return fail(format!("skeleton: root {} out of range", self.root_index));
        }
        let mut seen = alloc::vec![false; j];
        for &(l, r) in &self.left_right_pairs {
            for i in [l, r] {
                if i >= j {
                    return fail(format!("skeleton: pair index {i} out of range"));
                }
                if i == self.root_index {
                    return fail("skeleton: the root cannot be in a mirror pair".into());
                }
                if seen[i] {
                    return fail(format!("skeleton: joint {i} appears in two pairs"));
                }
                seen[i] = true;
            }
        }
        if self.rest_pose[self.root_index] != [0.0; 3] {
            return fail("skeleton: rest pose root must be the origin".into());
        }
        Ok(())
    }
}

/// Pinhole camera looking down +z from `distance` millimetres behind the root.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Camera {
    pub focal: f64,
    pub distance: f64,
    /// Pixels mapped to normalized coordinate 1.
    pub half_width: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Camera { focal: 1000.0, distance: 4000.0, half_width: 500.0 }
    }
}

impl Camera {
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let z = p[2] + self.distance;
        [self.focal * p[0] / z / self.half_width, self.focal * p[1] / z / self.half_width]
    }
}

/// One clip: `T` frames of 2D inputs and root-relative 3D targets.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequenceRecord {
    pub schema_version: u32,
    pub id: String,
    pub action: String,
    pub root_index: usize,
    pub joints_2d: Vec<Pose2>,
    pub joints_3d: Vec<Pose3>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub camera: Option<Camera>,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.joints_2d.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints_2d.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Validation { record: self.id.clone(), reason });
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let t = self.joints_2d.len();
        if t == 0 {
            return fail("no frames".into());
        }
        if self.joints_3d.len() != t {
            return fail(format!("{t} 2D frames but {} 3D frames", self.joints_3d.len()));
        }
        let j = self.num_joints();
        if j == 0 || self.root_index >= j {
            return fail(format!("root_index {} with {j} joints", self.root_index));
        }
        for (f, (p2, p3)) in self.joints_2d.iter().zip(&self.joints_3d).enumerate() {
            if p2.len() != j || p3.len() != j {
                return fail(format!("frame {f}: joint count differs from {j}"));
            }
            if !p2.iter().flatten().chain(p3.iter().flatten()).all(|v| v.is_finite()) {
                return fail(format!("frame {f}: non-finite coordinate"));
            }
            if p3[self.root_index] != [0.0; 3] {
                return fail(format!("frame {f}: root joint is {:?}, not the origin", p3[self.root_index]));
            }
        }
        Ok(())
    }
}

/// Knobs of [`synth_sequence_with`].
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthOptions {
    /// Upper bound on each joint's displacement from rest, in millimetres.
    pub max_amplitude: f64,
    /// Sinusoid frequencies are drawn from this range, in cycles per frame.
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub camera: Camera,
    /// Standard deviation of Gaussian noise added to the 2D inputs, in
    /// normalized image units, imitating a 2D detector. The 3D targets stay
    /// exact.
    pub noise_2d: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { max_amplitude: 200.0, min_frequency: 0.01, max_frequency: 0.06, camera: Camera::default(), noise_2d: 0.0 }
    }
}

const ACTIONS: [&str; 4] = ["walk", "wave", "squat", "turn"];

/// [`synth_sequence_with`] under default options.
pub fn synth_sequence(spec: &SkeletonSpec, seed: u64, frames: usize) -> Result<SequenceRecord> {
    synth_sequence_with(spec, seed, frames, &SynthOptions::default())
}

/// Every non-root joint moves around its rest position as a sum of three
/// sinusoids with seeded amplitude, frequency, phase and in-plane direction.
///
/// Each joint's motion stays in a plane whose tilt depends only on the joint,
/// never on the seed, so depth is a fixed linear function of the in-image
/// displacement and a model can learn to recover it.
pub fn synth_sequence_with(spec: &SkeletonSpec, seed: u64, frames: usize, opts: &SynthOptions) -> Result<SequenceRecord> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::Config("synth: at least one frame is required".into()));
    }
    if !(opts.max_amplitude >= 0.0) || !(opts.min_frequency <= opts.max_frequency) {
        return Err(Error::Config("synth: bad amplitude or frequency range".into()));
    }
    if !(opts.noise_2d >= 0.0) || !opts.noise_2d.is_finite() {
        return Err(Error::Config(format!("synth: noise_2d {} must be finite and non-negative", opts.noise_2d)));
    }
    let tau = 2.0 * core::f64::consts::PI;
    // (amplitude, frequency, phase, unit direction) per joint and component
    let mut motion: Vec<[(f64, f64, f64, [f64; 3]); 3]> = Vec::with_capacity(spec.num_joints);
    for j in 0..spec.num_joints {
        let mut tilt = rng::stream(0, &format!("synth/plane/{j}"));
        let (a, b) = (rng::uniform(&mut tilt, -1.0, 1.0), rng::uniform(&mut tilt, -1.0, 1.0));
        let mut r = rng::stream(seed, &format!("synth/joint/{j}"));
        let mut comps = [(0.0, 0.0, 0.0, [0.0; 3]); 3];
        for c in &mut comps {
            let amp = rng::uniform(&mut r, 0.0, opts.max_amplitude / 3.0);
            let freq = rng::uniform(&mut r, opts.min_frequency, opts.max_frequency);
            let phase = rng::uniform(&mut r, 0.0, tau);
            let theta = rng::uniform(&mut r, 0.0, tau);
            let (s, co) = (libm::sin(theta), libm::cos(theta));
            let d = [co, s, a * co + b * s];
            let n = libm::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
            *c = (amp, freq, phase, [d[0] / n, d[1] / n, d[2] / n]);
        }
        motion.push(comps);
    }
    let mut joints_3d = Vec::with_capacity(frames);
    let mut joints_2d = Vec::with_capacity(frames);
    for t in 0..frames {
        let pose: Pose3 = (0..spec.num_joints)
            .map(|j| {
                if j == spec.root_index {
                    return [0.0; 3];
                }
                let mut p = spec.rest_pose[j];
                for &(amp, freq, phase, d) in &motion[j] {
                    let w = amp * libm::sin(tau * freq * t as f64 + phase);
                    for k in 0..3 {
                        p[k] += w * d[k];
                    }
                }
                p
            })
            .collect();
        joints_2d.push(pose.iter().map(|&p| opts.camera.project(p)).collect::<Pose2>());
        joints_3d.push(pose);
    }
    if opts.noise_2d > 0.0 {
        let mut r = rng::stream(seed, "synth/noise");
        for v in joints_2d.iter_mut().flatten().flatten() {
            *v += rng::normal(&mut r, opts.noise_2d);
        }
    }
    Ok(SequenceRecord {
        schema_version: SCHEMA_VERSION,
        id: format!("synth-{seed:08}"),
        action: ACTIONS[(seed % ACTIONS.len() as u64) as usize].into(),
        root_index: spec.root_index,
        joints_2d,
        joints_3d,
        camera: Some(opts.camera),
    })
}

/// Records for seeds `first_seed .. first_seed + count`.
pub fn synth_dataset(spec: &SkeletonSpec, first_seed: u64, count: usize, frames: usize, opts: &SynthOptions) -> Result<Vec<SequenceRecord>> {
    (0..count as u64).map(|i| synth_sequence_with(spec, first_seed + i, frames, opts)).collect()
}

/// An `F`-frame input and its center-frame target.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseWindow {
    pub frames_2d: Vec<Pose2>,
    pub target_3d: Pose3,
    pub record_id: String,
    pub center: usize,
}

/// Frames `center - F/2 ..= center + F/2`, replicating the first or last
/// frame wherever that range leaves the record.
pub fn window(record: &SequenceRecord, frames: usize, center: usize) -> Result<PoseWindow> {
    let t = record.frames();
    if frames % 2 == 0 {
        return Err(Error::Config(format!("window: receptive field {frames} must be odd")));
    }
    if center >= t {
        return Err(Error::Config(format!("window: center {center} outside {t} frames")));
    }
    let half = (frames / 2) as isize;
    let frames_2d = (-half..=half)
        .map(|o| {
            let i = (center as isize + o).clamp(0, t as isize - 1) as usize;
            record.joints_2d[i].clone()
        })
        .collect();
    Ok(PoseWindow {
        frames_2d,
        target_3d: record.joints_3d[center].clone(),
        record_id: record.id.clone(),
        center,
    })
}

/// One window per frame of the record, in frame order.
pub fn windows(record: &SequenceRecord, frames: usize) -> Result<Vec<PoseWindow>> {
    (0..record.frames()).map(|c| window(record, frames, c)).collect()
}

fn swap_pairs<T>(pose: &mut [T], spec: &SkeletonSpec) {
    for &(l, r) in &spec.left_right_pairs {
        pose.swap(l, r);
    }
}

pub fn hflip_pose2(pose: &[[f64; 2]], spec: &SkeletonSpec) -> Pose2 {
    let mut out: Pose2 = pose.iter().map(|p| [-p[0], p[1]]).collect();
    swap_pairs(&mut out, spec);
    out
}

pub fn hflip_pose3(pose: &[[f64; 3]], spec: &SkeletonSpec) -> Pose3 {
    let mut out: Pose3 = pose.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    swap_pairs(&mut out, spec);
    out
}

/// Mirrors a window left to right: negates x and swaps every mirror pair.
pub fn hflip(w: &PoseWindow, spec: &SkeletonSpec) -> PoseWindow {
    PoseWindow {
        frames_2d: w.frames_2d.iter().map(|f| hflip_pose2(f, spec)).collect(),
        target_3d: hflip_pose3(&w.target_3d, spec),
        record_id: w.record_id.clone(),
        center: w.center,
    }
}

/// Sorts by id and splits off the last 20% (at least one record when there
/// are two or more) as the held-out set. Returns `(train, held_out)`.
pub fn split_held_out(mut records: Vec<SequenceRecord>) -> (Vec<SequenceRecord>, Vec<SequenceRecord>) {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let n = records.len();
    let held = if n < 2 { 0 } else { usize::max(1, n / 5) };
    let tail = records.split_off(n - held);
    (records, tail)
}
