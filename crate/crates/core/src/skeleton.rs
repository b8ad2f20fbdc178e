//! Kinematic tree of a body model and the built-in 17- and 15-joint bodies.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint names and the parent of every joint. Joints are stored so that
/// every parent index is smaller than its child's index; joint 0 is the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
}

impl Skeleton {
    /// Validates a tree given with `-1` as the root sentinel and reindexes it
    /// topologically. Returns the skeleton and `order`, where `order[new] = old`.
    pub fn from_parents(names: Vec<String>, parents: &[i64]) -> Result<(Self, Vec<usize>)> {
        let n = names.len();
        if n == 0 {
            return Err(Error::Data("skeleton has no joints".into()));
        }
        if parents.len() != n {
            return Err(Error::Data(format!(
                "{n} joint names but {} parent indices",
                parents.len()
            )));
        }
        let mut roots = Vec::new();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &p) in parents.iter().enumerate() {
            match p {
                -1 => roots.push(i),
                p if p >= 0 && (p as usize) < n && p as usize != i => children[p as usize].push(i),
                p => {
                    return Err(Error::Data(format!(
                        "joint `{}` has invalid parent index {p}",
                        names[i]
                    )))
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Data(format!(
                "skeleton must have exactly one root, found {}",
                roots.len()
            )));
        }
        // Breadth-first from the root; joints never reached sit on a cycle.
        let mut order = Vec::with_capacity(n);
        let mut new_index = vec![usize::MAX; n];
        order.push(roots[0]);
        new_index[roots[0]] = 0;
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            head += 1;
            for &c in &children[j] {
                new_index[c] = order.len();
                order.push(c);
            }
        }
        if order.len() != n {
            let stray: Vec<&str> = (0..n)
                .filter(|&i| new_index[i] == usize::MAX)
                .map(|i| names[i].as_str())
                .collect();
            return Err(Error::Data(format!(
                "parent graph is not a tree; joints {stray:?} are not connected to the root"
            )));
        }
        // Keep the original order when it is already topological.
        let already_sorted = parents
            .iter()
            .enumerate()
            .all(|(i, &p)| p < 0 || (p as usize) < i);
        let order: Vec<usize> = if already_sorted && roots[0] == 0 {
            (0..n).collect()
        } else {
            order
        };
        let mut remap = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let skeleton = Self {
            names: order.iter().map(|&o| names[o].clone()).collect(),
            parents: order
                .iter()
                .map(|&o| (parents[o] >= 0).then(|| remap[parents[o] as usize]))
                .collect(),
        };
        Ok((skeleton, order))
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    /// Coordinates per pose (`3·J`).
    pub fn dim(&self) -> usize {
        3 * self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    /// Parents in file notation (`-1` for the root).
    pub fn parent_indices(&self) -> Vec<i64> {
        self.parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `(child, parent)` for every non-root joint, in joint order.
    pub fn limbs(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (c, p)))
            .collect()
    }

    pub fn limb_count(&self) -> usize {
        self.names.len() - 1
    }

    /// Stable 64-bit FNV-1a digest of names and parents, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (n, p) in self.names.iter().zip(self.parent_indices()) {
            let _ = write!(text, "{n}:{p};");
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Straight chain `j0 ← j1 ← … ← j(n-1)`.
    pub fn chain(n: usize) -> Self {
        Self {
            names: (0..n).map(|i| format!("j{i}")).collect(),
            parents: (0..n).map(|i| i.checked_sub(1)).collect(),
        }
    }
}

/// Built-in body models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkeletonKind {
    /// 17 joints, Human3.6M layout.
    H36m17,
    /// 15 joints, HumanEva-I layout.
    Humaneva15,
}

struct JointDef {
    name: &'static str,
    parent: i64,
    offset: [f64; 3],
}

const fn j(name: &'static str, parent: i64, offset: [f64; 3]) -> JointDef {
    JointDef {
        name,
        parent,
        offset,
    }
}

// +x is the body's left, +y up, +z forward; meters.
const H36M17: [JointDef; 17] = [
    j("Hip", -1, [0.0, 0.0, 0.0]),
    j("RHip", 0, [-0.13, 0.0, 0.0]),
    j("RKnee", 1, [0.0, -0.44, 0.0]),
    j("RFoot", 2, [0.0, -0.44, 0.0]),
    j("LHip", 0, [0.13, 0.0, 0.0]),
    j("LKnee", 4, [0.0, -0.44, 0.0]),
    j("LFoot", 5, [0.0, -0.44, 0.0]),
    j("Spine", 0, [0.0, 0.23, 0.0]),
    j("Thorax", 7, [0.0, 0.25, 0.0]),
    j("Neck", 8, [0.0, 0.12, 0.05]),
    j("Head", 9, [0.0, 0.12, -0.04]),
    j("LShoulder", 8, [0.16, -0.02, 0.0]),
    j("LElbow", 11, [0.0, -0.28, 0.0]),
    j("LWrist", 12, [0.0, -0.25, 0.0]),
    j("RShoulder", 8, [-0.16, -0.02, 0.0]),
    j("RElbow", 14, [0.0, -0.28, 0.0]),
    j("RWrist", 15, [0.0, -0.25, 0.0]),
];

const HUMANEVA15: [JointDef; 15] = [
    j("Pelvis", -1, [0.0, 0.0, 0.0]),
    j("Thorax", 0, [0.0, 0.48, 0.0]),
    j("LShoulder", 1, [0.17, -0.02, 0.0]),
    j("LElbow", 2, [0.0, -0.28, 0.0]),
    j("LWrist", 3, [0.0, -0.25, 0.0]),
    j("RShoulder", 1, [-0.17, -0.02, 0.0]),
    j("RElbow", 5, [0.0, -0.28, 0.0]),
    j("RWrist", 6, [0.0, -0.25, 0.0]),
    j("LHip", 0, [0.12, 0.0, 0.0]),
    j("LKnee", 8, [0.0, -0.44, 0.0]),
    j("LAnkle", 9, [0.0, -0.44, 0.0]),
    j("RHip", 0, [-0.12, 0.0, 0.0]),
    j("RKnee", 11, [0.0, -0.44, 0.0]),
    j("RAnkle", 12, [0.0, -0.44, 0.0]),
    j("Head", 1, [0.0, 0.22, 0.03]),
];

impl SkeletonKind {
    fn defs(self) -> &'static [JointDef] {
        match self {
            SkeletonKind::H36m17 => &H36M17,
            SkeletonKind::Humaneva15 => &HUMANEVA15,
        }
    }

    pub fn skeleton(self) -> Skeleton {
        let defs = self.defs();
        Skeleton {
            names: defs.iter().map(|d| d.name.to_string()).collect(),
            parents: defs
                .iter()
                .map(|d| (d.parent >= 0).then_some(d.parent as usize))
                .collect(),
        }
    }

    /// Rest-pose bone vector of every joint relative to its parent.
    pub fn rest_offsets(self) -> Vec<[f64; 3]> {
        self.defs().iter().map(|d| d.offset).collect()
    }

    /// Joint names of the two-part split: lower body (root and legs) first.
    pub fn lower_upper(self) -> Vec<Vec<&'static str>> {
        match self {
            SkeletonKind::H36m17 => vec![
                vec!["Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot"],
                vec![
                    "Spine", "Thorax", "Neck", "Head", "LShoulder", "LElbow", "LWrist",
                    "RShoulder", "RElbow", "RWrist",
                ],
            ],
            SkeletonKind::Humaneva15 => vec![
                vec!["Pelvis", "LHip", "LKnee", "LAnkle", "RHip", "RKnee", "RAnkle"],
                vec![
                    "Thorax", "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow",
                    "RWrist", "Head",
                ],
            ],
        }
    }

    /// Joint names of the five-part split: torso, right leg, left leg,
    /// right arm, left arm.
    pub fn five_parts(self) -> Vec<Vec<&'static str>> {
        match self {
            SkeletonKind::H36m17 => vec![
                vec!["Hip", "Spine", "Thorax", "Neck", "Head"],
                vec!["RHip", "RKnee", "RFoot"],
                vec!["LHip", "LKnee", "LFoot"],
                vec!["RShoulder", "RElbow", "RWrist"],
                vec!["LShoulder", "LElbow", "LWrist"],
            ],
            SkeletonKind::Humaneva15 => vec![
                vec!["Pelvis", "Thorax", "Head"],
                vec!["RHip", "RKnee", "RAnkle"],
                vec!["LHip", "LKnee", "LAnkle"],
                vec!["RShoulder", "RElbow", "RWrist"],
                vec!["LShoulder", "LElbow", "LWrist"],
            ],
        }
    }
}
