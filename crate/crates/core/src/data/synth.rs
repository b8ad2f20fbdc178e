//! Procedural motion for desk-scale experiments.
//!
//! Every joint carries three local Euler angles driven by sums of sinusoids.
//! Poses come from forward kinematics over the rest offsets, so limb lengths
//! are constant by construction and the root stays at the origin.

use std::f64::consts::TAU;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MotionSequence;
use crate::diff::Tensor;
use crate::skeleton::SkeletonKind;

pub const SYNTH_FPS: f64 = 50.0;

/// Frames over which a regime switch is blended.
const BLEND_FRAMES: f64 = 60.0;

#[derive(Clone, Copy)]
enum Role {
    Root,
    Spine,
    Chest,
    Head,
    RThigh,
    RShin,
    LThigh,
    LShin,
    RUpper,
    RFore,
    LUpper,
    LFore,
}

/// Joint whose incoming bone a role rotates.
fn role_joint(kind: SkeletonKind, role: Role) -> Option<&'static str> {
    use Role::*;
    let name = match (kind, role) {
        (SkeletonKind::H36m17, Root) => "Hip",
        (SkeletonKind::H36m17, Spine) => "Spine",
        (SkeletonKind::H36m17, Chest) => "Thorax",
        (SkeletonKind::H36m17, Head) => "Head",
        (SkeletonKind::H36m17, RShin) => "RFoot",
        (SkeletonKind::H36m17, LShin) => "LFoot",
        (SkeletonKind::Humaneva15, Root) => "Pelvis",
        (SkeletonKind::Humaneva15, Spine) => "Thorax",
        (SkeletonKind::Humaneva15, Chest) => return None,
        (SkeletonKind::Humaneva15, Head) => "Head",
        (SkeletonKind::Humaneva15, RShin) => "RAnkle",
        (SkeletonKind::Humaneva15, LShin) => "LAnkle",
        (_, RThigh) => "RKnee",
        (_, LThigh) => "LKnee",
        (_, RUpper) => "RElbow",
        (_, RFore) => "RWrist",
        (_, LUpper) => "LElbow",
        (_, LFore) => "LWrist",
    };
    Some(name)
}

/// One driven angle: `(role, axis, base, amplitude, phase offset in cycles)`.
/// Axis 0 bends forward/backward, 1 twists about the bone, 2 bends sideways.
type Drive = (Role, usize, f64, f64, f64);

struct Regime {
    hz: f64,
    drives: &'static [Drive],
}

use Role::*;

const REGIMES: [Regime; 4] = [
    // walk
    Regime {
        hz: 0.8,
        drives: &[
            (RThigh, 0, 0.0, 0.4, 0.0),
            (LThigh, 0, 0.0, 0.4, 0.5),
            (RShin, 0, 0.35, 0.3, 0.25),
            (LShin, 0, 0.35, 0.3, 0.75),
            (RUpper, 0, 0.0, 0.3, 0.5),
            (LUpper, 0, 0.0, 0.3, 0.0),
            (RFore, 0, -0.3, 0.1, 0.5),
            (LFore, 0, -0.3, 0.1, 0.0),
            (Spine, 1, 0.0, 0.08, 0.0),
            (Root, 1, 0.0, 0.05, 0.5),
            (Root, 2, 0.0, 0.03, 0.25),
        ],
    },
    // wave with the right arm
    Regime {
        hz: 0.7,
        drives: &[
            (RUpper, 2, -1.5, 0.3, 0.0),
            (RFore, 2, -0.5, 0.45, 0.25),
            (LUpper, 2, 0.1, 0.05, 0.0),
            (Spine, 2, 0.0, 0.06, 0.0),
            (Head, 1, 0.0, 0.2, 0.3),
            (RThigh, 0, 0.0, 0.05, 0.0),
            (LThigh, 0, 0.0, 0.05, 0.5),
            (Root, 1, 0.0, 0.04, 0.0),
            (Root, 2, 0.0, 0.03, 0.5),
        ],
    },
    // squat with arms forward
    Regime {
        hz: 0.45,
        drives: &[
            (RThigh, 0, -0.4, 0.4, 0.0),
            (LThigh, 0, -0.4, 0.4, 0.0),
            (RShin, 0, 0.6, 0.6, 0.0),
            (LShin, 0, 0.6, 0.6, 0.0),
            (Spine, 0, 0.25, 0.25, 0.0),
            (RUpper, 0, -0.6, 0.6, 0.0),
            (LUpper, 0, -0.6, 0.6, 0.0),
            (Chest, 0, 0.05, 0.05, 0.5),
            (Root, 0, 0.0, 0.04, 0.0),
            (Root, 2, 0.0, 0.03, 0.25),
        ],
    },
    // torso twist
    Regime {
        hz: 0.6,
        drives: &[
            (Spine, 1, 0.0, 0.45, 0.0),
            (RUpper, 2, -0.5, 0.3, 0.0),
            (LUpper, 2, 0.5, 0.3, 0.5),
            (RFore, 0, -0.8, 0.3, 0.25),
            (LFore, 0, -0.8, 0.3, 0.75),
            (Head, 1, 0.0, 0.3, 0.5),
            (RThigh, 2, -0.1, 0.1, 0.0),
            (LThigh, 2, 0.1, 0.1, 0.0),
            (Root, 1, 0.0, 0.06, 0.5),
            (Root, 2, 0.0, 0.02, 0.0),
        ],
    },
];

const FREQ_SCALES: [f64; 3] = [0.8, 0.95, 1.1];
const AMP_SCALES: [f64; 3] = [0.85, 1.0, 1.15];

/// A regime instantiated with per-sequence frequency, amplitude and phases.
struct Action {
    omega: f64,
    phase: f64,
    amp: f64,
    // per drive: joint index, axis, base, amplitude, offset, harmonic phases
    drives: Vec<(usize, usize, f64, f64, f64, Vec<f64>)>,
}

impl Action {
    fn sample(rng: &mut ChaCha8Rng, regime: &Regime, kind: SkeletonKind) -> Self {
        let skeleton = kind.skeleton();
        let omega = TAU * regime.hz * FREQ_SCALES.choose(rng).copied().unwrap_or(1.0);
        let amp = AMP_SCALES.choose(rng).copied().unwrap_or(1.0);
        let phase = rng.random_range(0.0..TAU);
        let drives = regime
            .drives
            .iter()
            .filter_map(|&(role, axis, base, a, offset)| {
                let joint = skeleton.joint_index(role_joint(kind, role)?)?;
                let harmonics = rng.random_range(2..=4);
                let phases = (0..harmonics)
                    .map(|k| if k == 0 { 0.0 } else { rng.random_range(0.0..TAU) })
                    .collect();
                Some((joint, axis, base, a, offset, phases))
            })
            .collect();
        Self {
            omega,
            phase,
            amp,
            drives,
        }
    }

    /// Adds `weight` times this action's angles at time `t` seconds.
    fn accumulate(&self, t: f64, weight: f64, angles: &mut [[f64; 3]]) {
        for (joint, axis, base, a, offset, phases) in &self.drives {
            let arg = self.omega * t + self.phase + TAU * offset;
            // Harmonic k has amplitude 1/k³, keeping angular speed bounded.
            let wave: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, psi)| {
                    let k = (k + 1) as f64;
                    (k * arg + psi).sin() / (k * k * k)
                })
                .sum();
            angles[*joint][*axis] += weight * (base + self.amp * a * wave);
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `Rz(γ)·Ry(β)·Rx(α)` for angles `[α, β, γ]`.
fn euler(angles: &[f64; 3]) -> Mat3 {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sg, cg) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

/// Forward kinematics: joint positions from local angles and rest offsets.
pub fn forward_kinematics(kind: SkeletonKind, angles: &[[f64; 3]]) -> Vec<f64> {
    let skeleton = kind.skeleton();
    let offsets = kind.rest_offsets();
    let j = skeleton.joint_count();
    let mut global: Vec<Mat3> = Vec::with_capacity(j);
    let mut pos = vec![0.0; 3 * j];
    for joint in 0..j {
        let local = euler(&angles[joint]);
        match skeleton.parent(joint) {
            None => global.push(local),
            Some(p) => {
                let g = mat_mul(&global[p], &local);
                let d = mat_vec(&g, &offsets[joint]);
                for k in 0..3 {
                    pos[3 * joint + k] = pos[3 * p + k] + d[k];
                }
                global.push(g);
            }
        }
    }
    pos
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Generates `n_sequences` sequences of `length` frames at 50 fps.
///
/// Each sequence runs one action regime; half of them blend into a second
/// regime partway through, so similar pasts are followed by different futures.
/// Sequence `i` depends only on `(seed, i)`.
pub fn synth_generate(
    seed: u64,
    n_sequences: usize,
    length: usize,
    kind: SkeletonKind,
) -> Vec<MotionSequence> {
    let j = kind.skeleton().joint_count();
    (0..n_sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let first = rng.random_range(0..REGIMES.len());
            let a = Action::sample(&mut rng, &REGIMES[first], kind);
            let switch = rng.random_bool(0.5).then(|| {
                let second = (first + rng.random_range(1..REGIMES.len())) % REGIMES.len();
                let at = rng.random_range(length as f64 * 0.2..=length as f64 * 0.7);
                (Action::sample(&mut rng, &REGIMES[second], kind), at)
            });
            let mut data = Vec::with_capacity(length * 3 * j);
            let mut angles = vec![[0.0; 3]; j];
            for f in 0..length {
                let t = f as f64 / SYNTH_FPS;
                angles.iter_mut().for_each(|a| *a = [0.0; 3]);
                match &switch {
                    None => a.accumulate(t, 1.0, &mut angles),
                    Some((b, at)) => {
                        let w = smoothstep((f as f64 - at) / BLEND_FRAMES);
                        a.accumulate(t, 1.0 - w, &mut angles);
                        b.accumulate(t, w, &mut angles);
                    }
                }
                data.extend(forward_kinematics(kind, &angles));
            }
            let frames = Tensor::matrix(length, 3 * j, data);
            MotionSequence::new(frames, SYNTH_FPS).expect("forward kinematics yields finite frames")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::limb_lengths;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_generate(5, 3, 80, SkeletonKind::H36m17);
        let b = synth_generate(5, 3, 80, SkeletonKind::H36m17);
        assert_eq!(a, b);
        let c = synth_generate(6, 3, 80, SkeletonKind::H36m17);
        assert_ne!(a, c);
    }

    #[test]
    fn sequences_depend_only_on_their_index() {
        let few = synth_generate(9, 2, 60, SkeletonKind::H36m17);
        let more = synth_generate(9, 5, 60, SkeletonKind::H36m17);
        assert_eq!(few[..], more[..2]);
    }

    #[test]
    fn rest_pose_reproduces_offsets() {
        let kind = SkeletonKind::H36m17;
        let pose = forward_kinematics(kind, &vec![[0.0; 3]; 17]);
        // RFoot = RHip + 2 shin offsets.
        assert_eq!(&pose[9..12], &[-0.13, -0.88, 0.0]);
    }

    #[test]
    fn limb_lengths_stay_constant_and_root_fixed() {
        for kind in [SkeletonKind::H36m17, SkeletonKind::Humaneva15] {
            let skel = kind.skeleton();
            for seq in synth_generate(1, 12, 200, kind) {
                let first = limb_lengths(seq.frame(0), &skel);
                for f in 0..seq.frame_count() {
                    assert_eq!(&seq.frame(f)[..3], &[0.0, 0.0, 0.0]);
                    for (a, b) in limb_lengths(seq.frame(f), &skel).iter().zip(&first) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn per_frame_displacement_is_small() {
        for kind in [SkeletonKind::H36m17, SkeletonKind::Humaneva15] {
            let mut worst: f64 = 0.0;
            for seq in synth_generate(2, 40, 250, kind) {
                for f in 1..seq.frame_count() {
                    let (a, b) = (seq.frame(f - 1), seq.frame(f));
                    for (pa, pb) in a.chunks_exact(3).zip(b.chunks_exact(3)) {
                        let d: f64 = (0..3).map(|k| (pa[k] - pb[k]).powi(2)).sum::<f64>().sqrt();
                        worst = worst.max(d);
                    }
                }
            }
            assert!(worst < 0.1, "{kind:?}: {worst}");
            assert!(worst > 0.005, "{kind:?}: motion too static ({worst})");
        }
    }
}
