//! Pose layout, a procedural two-person dataset on a small tree skeleton,
//! normalization, and the composite training loss.

mod io;
mod loss;
mod rotation;

pub use io::{read_motion, write_motion, write_tsv, MotionHeader};
pub use loss::{loss_total, LossBreakdown, LossWeights, TERM_NAMES};
pub use rotation::{rot6d_to_matrix, rot_x, rot_y, matmul3, matrix_to_rot6d};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames per second recorded in motion metadata.
pub const DEFAULT_FPS: f64 = 20.0;
/// A foot whose frame-to-frame displacement is at most this is in contact.
pub const CONTACT_SPEED: f64 = 1e-9;
pub const STD_FLOOR: f64 = 1e-6;

/// Feature ranges of one frame for `joints` joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoseLayout {
    pub joints: usize,
}

impl PoseLayout {
    pub fn width(&self) -> usize {
        12 * self.joints + 4
    }

    pub fn positions(&self) -> Range<usize> {
        0..3 * self.joints
    }

    pub fn velocities(&self) -> Range<usize> {
        3 * self.joints..6 * self.joints
    }

    pub fn rotations(&self) -> Range<usize> {
        6 * self.joints..12 * self.joints
    }

    pub fn contacts(&self) -> Range<usize> {
        12 * self.joints..12 * self.joints + 4
    }
}

/// Tree skeleton: a root with two leg chains. The four contact joints are
/// the last two joints of each chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    /// `None` for the root (joint 0).
    pub parents: Vec<Option<usize>>,
    /// Bone vector from the parent in the parent's rest frame.
    pub offsets: Vec<[f64; 3]>,
    pub feet: [usize; 4],
    pub chains: [Vec<usize>; 2],
}

impl Skeleton {
    pub fn new(joints: usize) -> Result<Self> {
        if joints < 2 {
            return Err(Error::Config(format!("skeleton needs at least 2 joints, got {joints}")));
        }
        let rest = joints - 1;
        let left: Vec<usize> = (1..=rest.div_ceil(2)).collect();
        let right: Vec<usize> = (left.len() + 1..joints).collect();
        let mut parents = vec![None; joints];
        let mut offsets = vec![[0.0; 3]; joints];
        for (chain, side) in [(&left, 1.0), (&right, -1.0)] {
            for (k, &j) in chain.iter().enumerate() {
                parents[j] = Some(if k == 0 { 0 } else { chain[k - 1] });
                offsets[j] = match k {
                    0 => [0.15 * side, -0.45, 0.0],
                    1 => [0.0, -0.05, 0.15],
                    _ => [0.0, 0.0, 0.08],
                };
            }
        }
        let tail = |c: &[usize]| -> [usize; 2] {
            match c {
                [] => [left[0], left[0]],
                [only] => [*only, *only],
                [.., a, b] => [*a, *b],
            }
        };
        let (l, r) = (tail(&left), tail(if right.is_empty() { &left } else { &right }));
        Ok(Self { parents, offsets, feet: [l[0], l[1], r[0], r[1]], chains: [left, right] })
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    /// `(child, parent)` for every bone.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents.iter().enumerate().filter_map(|(j, p)| p.map(|p| (j, p))).collect()
    }

    pub fn rest_lengths(&self) -> Vec<f64> {
        self.bones().iter().map(|&(j, _)| norm3(self.offsets[j])).collect()
    }

    /// Global joint positions from the root position and per-joint local
    /// rotations.
    pub fn forward_kinematics(&self, root: [f64; 3], local: &[[[f64; 3]; 3]]) -> Vec<[f64; 3]> {
        let n = self.joints();
        let mut global = vec![[[0.0; 3]; 3]; n];
        let mut pos = vec![[0.0; 3]; n];
        for j in 0..n {
            match self.parents[j] {
                None => {
                    global[j] = local[j];
                    pos[j] = root;
                }
                Some(p) => {
                    global[j] = matmul3(&global[p], &local[j]);
                    let d = apply3(&global[j], self.offsets[j]);
                    pos[j] = [pos[p][0] + d[0], pos[p][1] + d[1], pos[p][2] + d[2]];
                }
            }
        }
        pos
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn apply3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

/// Two aligned pose sequences and their condition label.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPair {
    /// Each `[frames, pose_width]`, row-major.
    pub persons: [Vec<f64>; 2],
    pub frames: usize,
    pub joints: usize,
    pub label: usize,
    pub fps: f64,
}

impl MotionPair {
    pub fn layout(&self) -> PoseLayout {
        PoseLayout { joints: self.joints }
    }

    pub fn frame(&self, person: usize, t: usize) -> &[f64] {
        let w = self.layout().width();
        &self.persons[person][t * w..(t + 1) * w]
    }
}

/// Dataset size and shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub frames: usize,
    pub joints: usize,
    pub n_labels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, n_sequences: 8, frames: 32, joints: 5, n_labels: 3 }
    }
}

/// Frames per gait cycle; the last `HOLD` of them repeat the pose.
const CYCLE: usize = 8;
const HOLD: usize = 2;

#[derive(Clone, Copy, Debug)]
struct PersonState {
    root: [f64; 3],
    heading: f64,
    swing: f64,
}

/// Per-sequence random variation.
struct Jitter {
    center: [f64; 2],
    amp: f64,
    phase: usize,
    spread: f64,
    angle: f64,
}

/// Deterministic toy dataset. Sequence `i` has label `i % n_labels`; label
/// families cycle through approach, circling and mirrored side-stepping,
/// with higher labels varying the family's speed and spacing.
pub fn toy_dataset_generate(seed: u64, n_sequences: usize, frames: usize, joints: usize, n_labels: usize) -> Result<Vec<MotionPair>> {
    if n_sequences == 0 || frames < 8 || joints < 2 || n_labels == 0 {
        return Err(Error::Config(format!(
            "toy data needs n_sequences ≥ 1, frames ≥ 8, joints ≥ 2, n_labels ≥ 1; got {n_sequences}, {frames}, {joints}, {n_labels}"
        )));
    }
    let skel = Skeleton::new(joints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sequences)
        .map(|i| {
            let jit = Jitter {
                center: [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)],
                amp: 0.35 * rng.random_range(0.9..1.1),
                phase: rng.random_range(0..CYCLE),
                spread: rng.random_range(-0.1..0.1),
                angle: rng.random_range(-0.2..0.2),
            };
            generate_pair(&skel, frames, i % n_labels, &jit)
        })
        .collect()
}

pub fn toy_dataset(cfg: &DataConfig) -> Result<Vec<MotionPair>> {
    toy_dataset_generate(cfg.seed, cfg.n_sequences, cfg.frames, cfg.joints, cfg.n_labels)
}

/// Gait progress at frame index `f`; constant across hold frames.
fn progress(f: usize) -> f64 {
    let moving = CYCLE - HOLD;
    ((f / CYCLE) * moving + (f % CYCLE).min(moving)) as f64
}

fn person_state(label: usize, person: usize, s: f64, s_end: f64, jit: &Jitter) -> PersonState {
    let family = label % 3;
    let variant = (label / 3) as f64;
    let u = s / s_end;
    let side = if person == 0 { -1.0 } else { 1.0 };
    let swing = side * jit.amp * (2.0 * std::f64::consts::PI * s / (CYCLE - HOLD) as f64).sin();
    let (x, z, heading) = match family {
        0 => {
            let start = 1.2 * (1.0 + 0.2 * variant) + jit.spread;
            let x = side * (start * (1.0 - u) + 0.4 * u);
            (x, 0.0, -side * std::f64::consts::FRAC_PI_2)
        }
        1 => {
            let r = 0.45 * (1.0 + 0.2 * variant);
            let psi = jit.angle + 0.12 * (1.0 + 0.25 * variant) * s + if person == 0 { 0.0 } else { std::f64::consts::PI };
            (r * psi.cos(), r * psi.sin(), -psi)
        }
        _ => {
            let x = side * (0.5 + 0.5 * jit.spread);
            let z = 0.3 * (2.0 * std::f64::consts::PI * s / 24.0 * (1.0 + 0.5 * variant)).sin();
            (x, z, -side * std::f64::consts::FRAC_PI_2)
        }
    };
    PersonState { root: [x + jit.center[0], 0.5, z + jit.center[1]], heading: heading + 0.1 * jit.angle, swing }
}

fn local_rotations(skel: &Skeleton, st: &PersonState) -> Vec<[[f64; 3]; 3]> {
    let mut local = vec![rot_x(0.0); skel.joints()];
    local[0] = rot_y(st.heading);
    for (c, sign) in [(&skel.chains[0], 1.0), (&skel.chains[1], -1.0)] {
        if let Some(&hip) = c.first() {
            local[hip] = rot_x(sign * st.swing);
        }
    }
    local
}

fn generate_pair(skel: &Skeleton, frames: usize, label: usize, jit: &Jitter) -> Result<MotionPair> {
    let layout = PoseLayout { joints: skel.joints() };
    let (j, w) = (skel.joints(), layout.width());
    // one extra leading frame supplies the first velocity
    let s_end = progress(frames + jit.phase).max(1.0);
    let mut persons = [vec![0.0; frames * w], vec![0.0; frames * w]];
    for (p, out) in persons.iter_mut().enumerate() {
        let mut prev: Option<Vec<[f64; 3]>> = None;
        for f in 0..=frames {
            let st = person_state(label, p, progress(f + jit.phase), s_end, jit);
            let local = local_rotations(skel, &st);
            let pos = skel.forward_kinematics(st.root, &local);
            if let Some(prev) = &prev {
                let row = &mut out[(f - 1) * w..f * w];
                for k in 0..j {
                    for a in 0..3 {
                        row[3 * k + a] = pos[k][a];
                        row[3 * j + 3 * k + a] = pos[k][a] - prev[k][a];
                    }
                    row[6 * j + 6 * k..6 * j + 6 * k + 6].copy_from_slice(&matrix_to_rot6d(&local[k]));
                }
                for (c, &foot) in skel.feet.iter().enumerate() {
                    let v = [pos[foot][0] - prev[foot][0], pos[foot][1] - prev[foot][1], pos[foot][2] - prev[foot][2]];
                    row[12 * j + c] = if norm3(v) <= CONTACT_SPEED { 1.0 } else { 0.0 };
                }
            }
            prev = Some(pos);
        }
    }
    Ok(MotionPair { persons, frames, joints: j, label, fps: DEFAULT_FPS })
}

/// Checks the ground-truth pose contract of a pair: width, binary contact
/// flags, velocities consistent with positions, and bone lengths matching
/// the skeleton.
pub fn check_pose_invariants(pair: &MotionPair, skel: &Skeleton) -> Result<()> {
    let layout = pair.layout();
    let (j, w) = (pair.joints, layout.width());
    let rest = skel.rest_lengths();
    for (p, data) in pair.persons.iter().enumerate() {
        if data.len() != pair.frames * w {
            return Err(Error::Data(format!("person {p}: {} values for {} frames of width {w}", data.len(), pair.frames)));
        }
        for t in 0..pair.frames {
            let row = pair.frame(p, t);
            if row[layout.contacts()].iter().any(|&c| c != 0.0 && c != 1.0) {
                return Err(Error::Data(format!("person {p} frame {t}: contact flags not binary")));
            }
            if t > 0 {
                let prev = pair.frame(p, t - 1);
                for k in 0..3 * j {
                    if (row[3 * j + k] - (row[k] - prev[k])).abs() > 1e-9 {
                        return Err(Error::Data(format!("person {p} frame {t}: velocity inconsistent with positions")));
                    }
                }
            }
            for (&(c, par), &len) in skel.bones().iter().zip(&rest) {
                let d = [row[3 * c] - row[3 * par], row[3 * c + 1] - row[3 * par + 1], row[3 * c + 2] - row[3 * par + 2]];
                if (norm3(d) - len).abs() > 1e-6 {
                    return Err(Error::Data(format!("person {p} frame {t}: bone {c} has length {} not {len}", norm3(d))));
                }
            }
        }
    }
    Ok(())
}

/// Per-feature mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Short content hash used to tie motion files to their statistics.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    fn tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((Tensor::from_vec(self.mean.clone(), &[self.width()])?, Tensor::from_vec(self.std.clone(), &[self.width()])?))
    }

    /// `(x − mean)/std` over the last axis.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors()?;
        x.sub(&m)?.div(&s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let (m, s) = self.tensors()?;
        x.mul(&s)?.add(&m)
    }
}

/// Statistics over every frame of both persons.
pub fn compute_stats(data: &[MotionPair]) -> Result<NormStats> {
    let first = data.first().ok_or_else(|| Error::Data("cannot normalize an empty dataset".into()))?;
    let w = first.layout().width();
    let mut sum = vec![0.0; w];
    let mut count = 0usize;
    for pair in data {
        if pair.layout().width() != w {
            return Err(Error::Data("pose widths differ across the dataset".into()));
        }
        for row in pair.persons.iter().flat_map(|p| p.chunks_exact(w)) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            count += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; w];
    for row in data.iter().flat_map(|pair| pair.persons.iter().flat_map(|p| p.chunks_exact(w))) {
        for i in 0..w {
            var[i] += (row[i] - mean[i]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

/// Normalizes a dataset, returning the normalized copy and its statistics.
pub fn normalize(data: &[MotionPair]) -> Result<(Vec<MotionPair>, NormStats)> {
    let stats = compute_stats(data)?;
    let out = data.iter().map(|p| map_pair(p, &stats, |v, m, s| (v - m) / s)).collect();
    Ok((out, stats))
}

pub fn denormalize(data: &[MotionPair], stats: &NormStats) -> Vec<MotionPair> {
    data.iter().map(|p| map_pair(p, stats, |v, m, s| v * s + m)).collect()
}

fn map_pair(pair: &MotionPair, stats: &NormStats, f: impl Fn(f64, f64, f64) -> f64) -> MotionPair {
    let w = stats.width();
    let mut out = pair.clone();
    for person in out.persons.iter_mut() {
        for row in person.chunks_exact_mut(w) {
            for i in 0..w {
                row[i] = f(row[i], stats.mean[i], stats.std[i]);
            }
        }
    }
    out
}

/// Stacks pairs into `[N, 2, frames, width]`.
pub fn stack_pairs(pairs: &[&MotionPair]) -> Result<Tensor> {
    let first = pairs.first().ok_or_else(|| Error::Data("no sequences to stack".into()))?;
    let (l, w) = (first.frames, first.layout().width());
    let mut data = Vec::with_capacity(pairs.len() * 2 * l * w);
    for p in pairs {
        if p.frames != l || p.joints != first.joints {
            return Err(Error::Data(format!("sequence shapes differ: {} frames vs {l}", p.frames)));
        }
        data.extend_from_slice(&p.persons[0]);
        data.extend_from_slice(&p.persons[1]);
    }
    Tensor::from_vec(data, &[pairs.len(), 2, l, w])
}

/// Splits `[N, 2, frames, width]` back into pairs with the given labels.
pub fn unstack_pairs(x: &Tensor, joints: usize, labels: &[usize], fps: f64) -> Result<Vec<MotionPair>> {
    let (n, l, w) = match x.shape() {
        &[n, 2, l, w] if w == 12 * joints + 4 && labels.len() == n => (n, l, w),
        s => return Err(Error::Data(format!("cannot split {s:?} into {} pairs of {joints} joints", labels.len()))),
    };
    let d = x.data();
    Ok((0..n)
        .map(|i| {
            let person = |p: usize| d[(i * 2 + p) * l * w..(i * 2 + p + 1) * l * w].to_vec();
            MotionPair { persons: [person(0), person(1)], frames: l, joints, label: labels[i], fps }
        })
        .collect())
}
