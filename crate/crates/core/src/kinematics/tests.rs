use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synth_generate;
use crate::diff::{grad_check, ParamStore};
use crate::skeleton::SkeletonKind;

fn chain_spec() -> AngleSpec {
    AngleSpec::new("bend", AngleVector::Limb(0, 1), AngleVector::Limb(1, 2)).unwrap()
}

/// Three-joint chain whose second segment makes angle `theta` with the first.
fn bent_chain(theta: f64) -> Vec<f64> {
    vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, theta.sin(), 1.0 + theta.cos(), 0.0]
}

fn synthetic_frames(kind: SkeletonKind, seqs: usize, len: usize) -> Tensor {
    let all = synth_generate(21, seqs, len, kind);
    let rows: Vec<Vec<f64>> = all
        .iter()
        .flat_map(|s| (0..s.frame_count()).map(move |f| s.frame(f).to_vec()))
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = dot(&v, &v).sqrt();
    v.map(|x| x / n)
}

fn joint(pose: &[f64], j: usize) -> [f64; 3] {
    [pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]
}

fn minus(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ]
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let a = unit([0, 1, 2].map(|_| rng.random_range(-1.0..1.0)));
    let t = unit([0, 1, 2].map(|_| rng.random_range(-1.0..1.0)));
    let b = unit(cross(a, t));
    let c = cross(a, b);
    [a, b, c]
}

fn rotate(pose: &[f64], r: &[[f64; 3]; 3]) -> Vec<f64> {
    pose.chunks(3)
        .flat_map(|p| [0, 1, 2].map(|i| dot(&r[i], p)))
        .collect()
}

#[test]
fn limb_angles() {
    let spec = chain_spec();
    assert_eq!(compute_angle(&bent_chain(0.0), &spec).unwrap(), 0.0);
    assert!((compute_angle(&bent_chain(FRAC_PI_2), &spec).unwrap() - FRAC_PI_2).abs() < 1e-15);
    let collapsed = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    assert!(matches!(compute_angle(&collapsed, &spec), Err(Error::Data(_))));
}

#[test]
fn head_plane_against_torso_plane_by_hand() {
    let kind = SkeletonKind::H36m17;
    let skel = kind.skeleton();
    let pose = synthetic_frames(kind, 1, 5).row(3).to_vec();
    let spec = default_angle_specs(&skel)
        .into_iter()
        .find(|s| s.name == "HeadPlane2TorsoPlane")
        .unwrap();
    let j = |n: &str| joint(&pose, skel.joint_index(n).unwrap());
    let head = unit(cross(
        minus(j("Neck"), j("Thorax")),
        minus(j("Head"), j("Thorax")),
    ));
    let torso = unit(cross(
        minus(j("LShoulder"), j("Hip")),
        minus(j("RShoulder"), j("Hip")),
    ));
    let expected = dot(&head, &torso).clamp(-1.0, 1.0).acos();
    assert!((compute_angle(&pose, &spec).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn default_sets_follow_each_skeleton() {
    let names = |k: SkeletonKind| -> Vec<String> {
        default_angle_specs(&k.skeleton())
            .into_iter()
            .map(|s| s.name)
            .collect()
    };
    let h = names(SkeletonKind::H36m17);
    let e = names(SkeletonKind::Humaneva15);
    assert_eq!(h.len(), 12, "{h:?}");
    assert_eq!(e.len(), 8, "{e:?}");
    assert_eq!(e.len(), 8);
    assert!(!h.iter().any(|n| n.contains("Arm2ShoulderPlane")));
    assert!(!e.iter().any(|n| n == "Spine2Hip" || n == "HeadPlane2TorsoPlane"));
    for list in [h, e] {
        let mut sorted = list.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), list.len());
    }
}

#[test]
fn constant_angle_mines_point_range() {
    let skel = Skeleton::chain(3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..20)
        .map(|_| rotate(&bent_chain(1.0), &random_rotation(&mut rng)))
        .collect();
    let table = mine_ranges(&Tensor::from_rows(&rows).unwrap(), &[chain_spec()], &skel, 0.0)
        .unwrap();
    let (l, u) = table.specs()[0].bounds.unwrap();
    assert!((l - 1.0).abs() < 1e-12 && (u - 1.0).abs() < 1e-12);
}

#[test]
fn mined_bounds_equal_brute_force_scan() {
    let kind = SkeletonKind::H36m17;
    let skel = kind.skeleton();
    let frames = synthetic_frames(kind, 4, 25);
    let specs = default_angle_specs(&skel);
    let table = mine_ranges(&frames, &specs, &skel, 0.0).unwrap();
    let vec_of = |v: AngleVector, pose: &[f64]| match v {
        AngleVector::Limb(a, b) => unit(minus(joint(pose, b), joint(pose, a))),
        AngleVector::Plane(a, b, c) => unit(cross(
            minus(joint(pose, b), joint(pose, a)),
            minus(joint(pose, c), joint(pose, a)),
        )),
    };
    for s in table.specs() {
        let angles: Vec<f64> = (0..frames.rows())
            .map(|f| {
                let p = frames.row(f);
                dot(&vec_of(s.a, p), &vec_of(s.b, p)).clamp(-1.0, 1.0).acos()
            })
            .collect();
        let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (l, u) = s.bounds.unwrap();
        assert!((l - lo).abs() < 1e-12 && (u - hi).abs() < 1e-12, "{}", s.name);
    }
}

#[test]
fn margin_widens_and_clips() {
    let skel = Skeleton::chain(3);
    let poses = Tensor::from_rows(&[bent_chain(0.05), bent_chain(3.1)]).unwrap();
    let table = mine_ranges(&poses, &[chain_spec()], &skel, 0.1).unwrap();
    assert_eq!(table.specs()[0].bounds, Some((0.0, PI)));
    assert!(mine_ranges(&poses, &[chain_spec()], &skel, -1.0).is_err());
}

#[test]
fn all_degenerate_frames_is_an_error() {
    let skel = Skeleton::chain(3);
    let collapsed = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0];
    let poses = Tensor::from_rows(&[collapsed.to_vec()]).unwrap();
    assert!(mine_ranges(&poses, &[chain_spec()], &skel, 0.0).is_err());
}

fn chain_table(l: f64, u: f64) -> AngleTable {
    let mut spec = chain_spec();
    spec.bounds = Some((l, u));
    AngleTable::new(&Skeleton::chain(3), vec![spec]).unwrap()
}

#[test]
fn violation_is_squared_distance_to_range() {
    let table = chain_table(1.0, 2.0);
    assert_eq!(angle_loss(&bent_chain(1.5), &table), 0.0);
    assert!((angle_loss(&bent_chain(0.9), &table) - 0.01).abs() < 1e-12);
    assert!((angle_loss(&bent_chain(2.2), &table) - 0.04).abs() < 1e-12);

    let graph_loss = table.graph_loss();
    let poses = Tensor::from_rows(&[bent_chain(0.9), bent_chain(1.5), bent_chain(2.2)]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(poses);
    let loss = graph_loss.loss(&mut g, x).unwrap();
    assert!((g.scalar(loss) - 0.05 / 3.0).abs() < 1e-12);
}

#[test]
fn graph_gradient_on_violating_poses() {
    let table = chain_table(1.0, 2.0);
    let graph_loss = table.graph_loss();
    let mut store = ParamStore::new();
    store.add(
        "poses",
        Tensor::from_rows(&[bent_chain(0.7), bent_chain(2.4), bent_chain(1.3)]).unwrap(),
    );
    let report = grad_check(&mut store, 1e-6, |g, s| {
        let x = g.param(s, s.ids().next().unwrap());
        graph_loss.loss(g, x)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn mining_data_has_zero_loss_and_is_rotation_invariant() {
    let kind = SkeletonKind::H36m17;
    let skel = kind.skeleton();
    let frames = synthetic_frames(kind, 6, 60);
    let table = mine_ranges(&frames, &default_angle_specs(&skel), &skel, 0.0).unwrap();
    for f in 0..frames.rows() {
        assert_eq!(angle_loss(frames.row(f), &table), 0.0);
    }
    let narrow = chain_table(1.0, 1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pose = bent_chain(0.4);
    let base = angle_loss(&pose, &narrow);
    assert!(base > 0.0);
    for _ in 0..20 {
        let rotated = rotate(&pose, &random_rotation(&mut rng));
        assert!((angle_loss(&rotated, &narrow) - base).abs() < 1e-9);
    }
}

#[test]
fn toml_round_trip_keeps_mined_frames_inside() {
    let kind = SkeletonKind::Humaneva15;
    let skel = kind.skeleton();
    let frames = synthetic_frames(kind, 6, 60);
    let table = mine_ranges(&frames, &default_angle_specs(&skel), &skel, 0.0).unwrap();
    let text = angle_table_to_toml(&table, &skel).unwrap();
    assert!(text.contains("min_deg") && text.contains("LShoulder"));
    let loaded = angle_table_from_toml(&text, &skel).unwrap();
    for (a, b) in loaded.specs().iter().zip(table.specs()) {
        let ((la, ua), (lb, ub)) = (a.bounds.unwrap(), b.bounds.unwrap());
        assert!(la <= lb && ua >= ub && lb - la < 1e-14 && ua - ub < 1e-14);
    }
    for f in 0..frames.rows() {
        assert_eq!(angle_loss(frames.row(f), &loaded), 0.0);
    }
    assert!(angle_table_from_toml(&text, &SkeletonKind::H36m17.skeleton()).is_err());
}

#[test]
fn degree_conversion_never_tightens() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let r = rng.random_range(0.0..PI);
        assert!(degrees_for(r, true).to_radians() <= r);
        assert!(degrees_for(r, false).to_radians() >= r);
    }
}
