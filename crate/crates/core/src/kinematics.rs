//! Angles between body-part orientations and limb directions, their
//! data-mined valid ranges, and the squared range-violation loss.

use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::Skeleton;

const MIN_NORM: f64 = 1e-8;

/// A unit vector derived from a pose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngleVector {
    /// Normal of the plane through three joints: `(j2 − j1) × (j3 − j1)`.
    Plane(usize, usize, usize),
    /// Direction from the first joint to the second.
    Limb(usize, usize),
}

impl AngleVector {
    fn joints(&self) -> Vec<usize> {
        match *self {
            AngleVector::Plane(a, b, c) => vec![a, b, c],
            AngleVector::Limb(a, b) => vec![a, b],
        }
    }

    fn eval(&self, pose: &[f64]) -> Option<[f64; 3]> {
        let p = |j: usize| [pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]];
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let v = match *self {
            AngleVector::Plane(a, b, c) => {
                let (u, w) = (sub(p(b), p(a)), sub(p(c), p(a)));
                [
                    u[1] * w[2] - u[2] * w[1],
                    u[2] * w[0] - u[0] * w[2],
                    u[0] * w[1] - u[1] * w[0],
                ]
            }
            AngleVector::Limb(a, b) => sub(p(b), p(a)),
        };
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        (n > MIN_NORM).then(|| v.map(|x| x / n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleSpec {
    pub name: String,
    pub a: AngleVector,
    pub b: AngleVector,
    /// `(lower, upper)` in radians once mined.
    pub bounds: Option<(f64, f64)>,
}

impl AngleSpec {
    pub fn new(name: impl Into<String>, a: AngleVector, b: AngleVector) -> Result<Self> {
        let name = name.into();
        for v in [a, b] {
            let mut j = v.joints();
            j.sort_unstable();
            j.dedup();
            if j.len() != v.joints().len() {
                return Err(Error::Config(format!("angle `{name}` repeats a joint")));
            }
        }
        Ok(Self {
            name,
            a,
            b,
            bounds: None,
        })
    }

    fn max_joint(&self) -> usize {
        self.a.joints().into_iter().chain(self.b.joints()).max().unwrap_or(0)
    }
}

/// Angle between the two vectors of `spec`, in `[0, π]`.
pub fn compute_angle(pose: &[f64], spec: &AngleSpec) -> Result<f64> {
    if 3 * spec.max_joint() + 3 > pose.len() {
        return Err(Error::dim(
            "compute_angle",
            format!("angle `{}` references joints beyond the pose", spec.name),
        ));
    }
    let (Some(u), Some(v)) = (spec.a.eval(pose), spec.b.eval(pose)) else {
        return Err(Error::Data(format!(
            "angle `{}` is undefined: degenerate plane or limb",
            spec.name
        )));
    };
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    Ok(dot.clamp(-1.0, 1.0).acos())
}

enum Def {
    P(&'static str, &'static str, &'static str),
    L(&'static str, &'static str),
}

use Def::{L, P};

/// Named angles of the 17-joint layout.
const H36M_ANGLES: &[(&str, Def, Def)] = &[
    ("Neck2Spine", L("Thorax", "Neck"), L("Hip", "Spine")),
    (
        "HeadPlane2TorsoPlane",
        P("Thorax", "Neck", "Head"),
        P("Hip", "LShoulder", "RShoulder"),
    ),
    ("RLeg2ThighPlane", L("RKnee", "RFoot"), P("Hip", "RHip", "RKnee")),
    ("LLeg2ThighPlane", L("LKnee", "LFoot"), P("Hip", "LHip", "LKnee")),
    ("RThigh2TorsoPlane", L("RHip", "RKnee"), P("Hip", "LShoulder", "RShoulder")),
    ("LThigh2TorsoPlane", L("LHip", "LKnee"), P("Hip", "LShoulder", "RShoulder")),
    ("UpperSpine2LowerSpine", L("Spine", "Thorax"), L("Spine", "Hip")),
    ("Shoulder2Hip", L("RShoulder", "LShoulder"), L("RHip", "LHip")),
    ("RShoulder2Neck", L("Thorax", "RShoulder"), L("Thorax", "Neck")),
    ("LShoulder2Neck", L("Thorax", "LShoulder"), L("Thorax", "Neck")),
    ("Shoulder2Shoulder", L("Thorax", "LShoulder"), L("Thorax", "RShoulder")),
    ("Spine2Hip", L("Hip", "Spine"), L("RHip", "LHip")),
];

/// Named angles of the 15-joint layout.
const HUMANEVA_ANGLES: &[(&str, Def, Def)] = &[
    ("Neck2Spine", L("Thorax", "Head"), L("Pelvis", "Thorax")),
    ("RLeg2ThighPlane", L("RKnee", "RAnkle"), P("Pelvis", "RHip", "RKnee")),
    ("LLeg2ThighPlane", L("LKnee", "LAnkle"), P("Pelvis", "LHip", "LKnee")),
    ("RThigh2TorsoPlane", L("RHip", "RKnee"), P("Pelvis", "LShoulder", "RShoulder")),
    ("LThigh2TorsoPlane", L("LHip", "LKnee"), P("Pelvis", "LShoulder", "RShoulder")),
    ("Shoulder2Shoulder", L("Thorax", "LShoulder"), L("Thorax", "RShoulder")),
    ("RArm2ShoulderPlane", L("RShoulder", "RElbow"), P("Pelvis", "LShoulder", "RShoulder")),
    ("LArm2ShoulderPlane", L("LShoulder", "LElbow"), P("Pelvis", "LShoulder", "RShoulder")),
];

fn resolve(def: &Def, skeleton: &Skeleton) -> Option<AngleVector> {
    let j = |n: &str| skeleton.joint_index(n);
    Some(match *def {
        P(a, b, c) => AngleVector::Plane(j(a)?, j(b)?, j(c)?),
        L(a, b) => AngleVector::Limb(j(a)?, j(b)?),
    })
}

/// The named angle set of whichever layout `skeleton` matches best; angles
/// whose joints are missing are left out.
pub fn default_angle_specs(skeleton: &Skeleton) -> Vec<AngleSpec> {
    let resolved = |set: &[(&str, Def, Def)]| -> Vec<AngleSpec> {
        set.iter()
            .filter_map(|(name, a, b)| {
                let (a, b) = (resolve(a, skeleton)?, resolve(b, skeleton)?);
                AngleSpec::new(*name, a, b).ok()
            })
            .collect()
    };
    let (h36m, humaneva) = (resolved(H36M_ANGLES), resolved(HUMANEVA_ANGLES));
    if humaneva.len() > h36m.len() {
        humaneva
    } else {
        h36m
    }
}

/// Mined angle ranges bound to one skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleTable {
    fingerprint: String,
    specs: Vec<AngleSpec>,
    // lower and upper bounds, radians, in spec order
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl AngleTable {
    pub fn new(skeleton: &Skeleton, specs: Vec<AngleSpec>) -> Result<Self> {
        let mut lower = Vec::with_capacity(specs.len());
        let mut upper = Vec::with_capacity(specs.len());
        for s in &specs {
            let Some((l, u)) = s.bounds else {
                return Err(Error::Config(format!("angle `{}` has no mined bounds", s.name)));
            };
            if !(0.0 <= l && l <= u && u <= std::f64::consts::PI) {
                return Err(Error::Config(format!(
                    "angle `{}` bounds [{l}, {u}] outside 0 ≤ l ≤ u ≤ π",
                    s.name
                )));
            }
            if 3 * s.max_joint() + 3 > skeleton.dim() {
                return Err(Error::Config(format!(
                    "angle `{}` references joints beyond the skeleton",
                    s.name
                )));
            }
            lower.push(l);
            upper.push(u);
        }
        Ok(Self {
            fingerprint: skeleton.fingerprint(),
            specs,
            lower,
            upper,
        })
    }

    pub fn specs(&self) -> &[AngleSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn check_skeleton(&self, skeleton: &Skeleton) -> Result<()> {
        if self.fingerprint != skeleton.fingerprint() {
            return Err(Error::Checkpoint(
                "angle table was mined for a different skeleton".into(),
            ));
        }
        Ok(())
    }

    /// Builds the graph evaluator for rows of `3J` coordinates.
    pub fn graph_loss(&self) -> AngleGraphLoss {
        AngleGraphLoss::new(self)
    }
}

/// Per-spec min/max of the angle over every pose row, widened by `margin`
/// radians and clipped to `[0, π]`. Frames where a spec is undefined are
/// skipped and counted.
pub fn mine_ranges(
    poses: &Tensor,
    specs: &[AngleSpec],
    skeleton: &Skeleton,
    margin: f64,
) -> Result<AngleTable> {
    if poses.rows() == 0 {
        return Err(Error::Data("cannot mine angle ranges from an empty dataset".into()));
    }
    if poses.cols() != skeleton.dim() {
        return Err(Error::dim(
            "mine_ranges",
            format!("{} coordinates for {} joints", poses.cols(), skeleton.joint_count()),
        ));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("angle margin must be ≥ 0, got {margin}")));
    }
    let mut mined = Vec::with_capacity(specs.len());
    for spec in specs {
        let (mut lo, mut hi, mut skipped) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
        for f in 0..poses.rows() {
            match compute_angle(poses.row(f), spec) {
                Ok(a) => {
                    lo = lo.min(a);
                    hi = hi.max(a);
                }
                Err(Error::Data(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if skipped == poses.rows() {
            return Err(Error::Data(format!(
                "angle `{}` is undefined on every frame",
                spec.name
            )));
        }
        if skipped > 0 {
            warn!("angle `{}`: skipped {skipped} degenerate frames", spec.name);
        }
        let (lo, hi) = (
            (lo - margin).max(0.0),
            (hi + margin).min(std::f64::consts::PI),
        );
        info!(
            "angle `{}`: [{:.1}°, {:.1}°]",
            spec.name,
            lo.to_degrees(),
            hi.to_degrees()
        );
        mined.push(AngleSpec {
            bounds: Some((lo, hi)),
            ..spec.clone()
        });
    }
    AngleTable::new(skeleton, mined)
}

fn violation(a: f64, l: f64, u: f64) -> f64 {
    if a < l {
        (a - l) * (a - l)
    } else if a > u {
        (a - u) * (a - u)
    } else {
        0.0
    }
}

/// Sum over specs of the squared range violation of one pose, radians².
/// Specs undefined on this pose contribute nothing.
pub fn angle_loss(pose: &[f64], table: &AngleTable) -> f64 {
    table
        .specs
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            compute_angle(pose, s)
                .ok()
                .map(|a| violation(a, table.lower[i], table.upper[i]))
        })
        .sum()
}

/// Column index lists that evaluate every table angle on a batch of poses.
#[derive(Clone, Debug)]
pub struct AngleGraphLoss {
    limb_from: Vec<usize>,
    limb_to: Vec<usize>,
    plane_base: Vec<usize>,
    plane_u: Vec<usize>,
    plane_v: Vec<usize>,
    // columns of each spec's vectors in [limb vectors | plane normals]
    a_cols: Vec<usize>,
    b_cols: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

fn xyz(j: usize) -> [usize; 3] {
    [3 * j, 3 * j + 1, 3 * j + 2]
}

impl AngleGraphLoss {
    fn new(table: &AngleTable) -> Self {
        let mut limbs: Vec<(usize, usize)> = Vec::new();
        let mut planes: Vec<(usize, usize, usize)> = Vec::new();
        for s in &table.specs {
            for v in [s.a, s.b] {
                match v {
                    AngleVector::Limb(a, b) if !limbs.contains(&(a, b)) => limbs.push((a, b)),
                    AngleVector::Plane(a, b, c) if !planes.contains(&(a, b, c)) => {
                        planes.push((a, b, c))
                    }
                    _ => {}
                }
            }
        }
        let column = |v: AngleVector| -> usize {
            match v {
                AngleVector::Limb(a, b) => limbs.iter().position(|&l| l == (a, b)).unwrap(),
                AngleVector::Plane(a, b, c) => {
                    limbs.len() + planes.iter().position(|&p| p == (a, b, c)).unwrap()
                }
            }
        };
        let cols = |v: AngleVector| {
            let k = column(v);
            [3 * k, 3 * k + 1, 3 * k + 2]
        };
        Self {
            limb_from: limbs.iter().flat_map(|&(a, _)| xyz(a)).collect(),
            limb_to: limbs.iter().flat_map(|&(_, b)| xyz(b)).collect(),
            plane_base: planes.iter().flat_map(|&(a, _, _)| xyz(a)).collect(),
            plane_u: planes.iter().flat_map(|&(_, b, _)| xyz(b)).collect(),
            plane_v: planes.iter().flat_map(|&(_, _, c)| xyz(c)).collect(),
            a_cols: table.specs.iter().flat_map(|s| cols(s.a)).collect(),
            b_cols: table.specs.iter().flat_map(|s| cols(s.b)).collect(),
            lower: table.lower.clone(),
            upper: table.upper.clone(),
        }
    }

    /// Angles of every spec for every row of `poses` (`R × L`).
    pub fn angles(&self, g: &mut Graph, poses: Var) -> Result<Var> {
        let mut vectors = Vec::new();
        if !self.limb_from.is_empty() {
            let to = g.gather_cols(poses, self.limb_to.clone())?;
            let from = g.gather_cols(poses, self.limb_from.clone())?;
            let d = g.sub(to, from)?;
            vectors.push(g.normalize_groups(d, 3, MIN_NORM)?);
        }
        if !self.plane_base.is_empty() {
            let base = g.gather_cols(poses, self.plane_base.clone())?;
            let u = g.gather_cols(poses, self.plane_u.clone())?;
            let v = g.gather_cols(poses, self.plane_v.clone())?;
            let u = g.sub(u, base)?;
            let v = g.sub(v, base)?;
            let n = g.cross3(u, v)?;
            vectors.push(g.normalize_groups(n, 3, MIN_NORM)?);
        }
        let all = g.concat(&vectors, 1)?;
        let a = g.gather_cols(all, self.a_cols.clone())?;
        let b = g.gather_cols(all, self.b_cols.clone())?;
        let prod = g.mul(a, b)?;
        let l = self.lower.len();
        let mut sum = Tensor::zeros(3 * l, l);
        for i in 0..3 * l {
            sum.set(i, i / 3, 1.0);
        }
        let sum = g.constant(sum);
        let cosines = g.matmul(prod, sum)?;
        g.acos(cosines)
    }

    /// Mean over rows of the per-pose angle loss.
    pub fn loss(&self, g: &mut Graph, poses: Var) -> Result<Var> {
        let rows = g.value(poses).rows();
        if self.lower.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let angles = self.angles(g, poses)?;
        let neg_lower = g.constant(Tensor::row_vector(self.lower.iter().map(|v| -v).collect()));
        let neg_upper = g.constant(Tensor::row_vector(self.upper.iter().map(|v| -v).collect()));
        // below = l − a, above = a − u; only positive parts are violations
        let shifted = g.add_row(angles, neg_lower)?;
        let below = g.scale(shifted, -1.0);
        let below = g.clamp(below, 0.0, f64::INFINITY);
        let above = g.add_row(angles, neg_upper)?;
        let above = g.clamp(above, 0.0, f64::INFINITY);
        let below = g.square(below);
        let above = g.square(above);
        let total = g.add(below, above)?;
        let total = g.sum(total);
        Ok(g.scale(total, 1.0 / rows as f64))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum VectorDef {
    Limb([String; 2]),
    Plane([String; 3]),
}

#[derive(Serialize, Deserialize)]
struct AngleEntry {
    name: String,
    a: VectorDef,
    b: VectorDef,
    min_deg: f64,
    max_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct AngleFile {
    skeleton: String,
    angle: Vec<AngleEntry>,
}

/// A degree value whose conversion back to radians does not move the bound
/// inward: `to_radians(d) ≤ rad` for lower bounds, `≥ rad` for upper ones,
/// and equal whenever a nearby decimal allows it.
fn degrees_for(rad: f64, lower: bool) -> f64 {
    let d0 = rad.to_degrees();
    let mut best: Option<f64> = None;
    let mut cand = d0;
    for _ in 0..8 {
        cand = cand.next_down();
    }
    for _ in 0..17 {
        let back = cand.to_radians();
        if back == rad {
            return cand;
        }
        let ok = if lower { back <= rad } else { back >= rad };
        let better = match best {
            None => true,
            Some(b) => (back - rad).abs() < (b.to_radians() - rad).abs(),
        };
        if ok && better {
            best = Some(cand);
        }
        cand = cand.next_up();
    }
    best.unwrap_or(d0)
}

fn vector_def(v: AngleVector, skeleton: &Skeleton) -> VectorDef {
    let n = |j: usize| skeleton.names()[j].clone();
    match v {
        AngleVector::Limb(a, b) => VectorDef::Limb([n(a), n(b)]),
        AngleVector::Plane(a, b, c) => VectorDef::Plane([n(a), n(b), n(c)]),
    }
}

fn vector_from(def: &VectorDef, skeleton: &Skeleton, angle: &str) -> Result<AngleVector> {
    let j = |n: &String| {
        skeleton.joint_index(n).ok_or_else(|| {
            Error::Config(format!("angle `{angle}` names unknown joint `{n}`"))
        })
    };
    Ok(match def {
        VectorDef::Limb([a, b]) => AngleVector::Limb(j(a)?, j(b)?),
        VectorDef::Plane([a, b, c]) => AngleVector::Plane(j(a)?, j(b)?, j(c)?),
    })
}

/// Angle table as TOML text with joint names and bounds in degrees.
pub fn angle_table_to_toml(table: &AngleTable, skeleton: &Skeleton) -> Result<String> {
    table.check_skeleton(skeleton)?;
    let file = AngleFile {
        skeleton: table.fingerprint.clone(),
        angle: table
            .specs
            .iter()
            .enumerate()
            .map(|(i, s)| AngleEntry {
                name: s.name.clone(),
                a: vector_def(s.a, skeleton),
                b: vector_def(s.b, skeleton),
                min_deg: degrees_for(table.lower[i], true),
                max_deg: degrees_for(table.upper[i], false),
            })
            .collect(),
    };
    Ok(toml::to_string(&file)?)
}

pub fn angle_table_from_toml(text: &str, skeleton: &Skeleton) -> Result<AngleTable> {
    let file: AngleFile = toml::from_str(text)?;
    if file.skeleton != skeleton.fingerprint() {
        return Err(Error::Checkpoint(
            "angle table was mined for a different skeleton".into(),
        ));
    }
    let specs = file
        .angle
        .iter()
        .map(|e| {
            let mut s = AngleSpec::new(
                e.name.clone(),
                vector_from(&e.a, skeleton, &e.name)?,
                vector_from(&e.b, skeleton, &e.name)?,
            )?;
            let pi = std::f64::consts::PI;
            s.bounds = Some((
                e.min_deg.to_radians().clamp(0.0, pi),
                e.max_deg.to_radians().clamp(0.0, pi),
            ));
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    AngleTable::new(skeleton, specs)
}

pub fn save_angle_table(
    path: impl AsRef<Path>,
    table: &AngleTable,
    skeleton: &Skeleton,
) -> Result<()> {
    fs::write(path, angle_table_to_toml(table, skeleton)?)?;
    Ok(())
}

pub fn load_angle_table(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<AngleTable> {
    angle_table_from_toml(&fs::read_to_string(path)?, skeleton)
}

#[cfg(test)]
mod tests;
