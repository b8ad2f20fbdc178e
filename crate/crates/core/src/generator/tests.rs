use super::*;
use crate::dct::decode;
use crate::diff::grad_check;

fn toy(seed: u64) -> Generator {
    let skel = Skeleton::chain(4);
    let partition = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
    let basis = build_basis(3, 4, 5).unwrap();
    let config = ModelConfig {
        hidden: 6,
        latent: 3,
        residual_blocks: 2,
    };
    Generator::new(&skel, partition, basis, config, seed).unwrap()
}

/// Replaces every zero-initialized output weight so latents matter.
fn randomize_outputs(model: &mut Generator, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.parts().iter().map(|p| p.output_layer().w).collect();
    for id in ids {
        for v in model.store_mut().value_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

fn past(seed: u64, h: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(h, d, (0..h * d).map(|_| rng.random_range(-0.5..0.5)).collect())
}

fn cols(t: &Tensor, idx: &[usize]) -> Vec<f64> {
    (0..t.rows())
        .flat_map(|r| idx.iter().map(move |&c| t.get(r, c)))
        .collect()
}

/// Rows of `c` for the given coordinates, in order.
fn node_rows(c: &Tensor, nodes: &[usize]) -> Tensor {
    Tensor::matrix(
        nodes.len(),
        c.cols(),
        nodes.iter().flat_map(|&n| c.row(n).to_vec()).collect(),
    )
}

#[test]
fn zero_weights_give_zero_layer_output() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::full(4, 3, 0.7));
    let a = g.constant(Tensor::eye(2));
    let w = g.constant(Tensor::zeros(3, 5));
    let out = gc_layer(&mut g, f, a, w, 2).unwrap();
    assert_eq!(g.value(out).shape(), &[4, 5]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_layer_follows_tanh_taylor_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    let mut g = Graph::new();
    let f = g.constant(Tensor::matrix(4, 3, data.clone()));
    let a = g.constant(Tensor::eye(4));
    let w = g.constant(Tensor::eye(3));
    let out = gc_layer(&mut g, f, a, w, 1).unwrap();
    for (o, x) in g.value(out).data().iter().zip(&data) {
        assert!((o - (x - x * x * x / 3.0)).abs() < 1e-9);
    }
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mut rand = |r: usize, c: usize| {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-0.8..0.8)).collect())
    };
    let a = store.add("a", rand(3, 3));
    let w = store.add("w", rand(4, 2));
    let f = store.add("f", rand(6, 4));
    let report = grad_check(&mut store, 1e-6, |g, s| {
        let (av, wv, fv) = (g.param(s, a), g.param(s, w), g.param(s, f));
        let out = gc_layer(g, fv, av, wv, 2)?;
        let sq = g.square(out);
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn partition_validation() {
    assert!(PartitionSpec::new(vec![vec![0, 1], vec![1, 2]], 3).is_err());
    assert!(PartitionSpec::new(vec![vec![0, 1]], 3).is_err());
    assert!(PartitionSpec::new(vec![], 0).is_err());
    assert!(PartitionSpec::new(vec![vec![0], vec![3]], 3).is_err());
    let p = PartitionSpec::new(vec![vec![2], vec![0, 1]], 3).unwrap();
    assert_eq!(p.nodes_through(1), vec![6, 7, 8, 0, 1, 2, 3, 4, 5]);
}

#[test]
fn presets_cover_both_layouts() {
    for kind in [SkeletonKind::H36m17, SkeletonKind::Humaneva15] {
        let skel = kind.skeleton();
        let two = PartitionSpec::preset(PartitionPreset::LowerUpper, &skel).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two.parts()[0].contains(&0), "lower body holds the root");
        assert_eq!(PartitionSpec::preset(PartitionPreset::Five, &skel).unwrap().len(), 5);
        assert_eq!(PartitionSpec::preset(PartitionPreset::Whole, &skel).unwrap().len(), 1);
    }
    assert!(PartitionSpec::preset(PartitionPreset::Five, &Skeleton::chain(4)).is_err());
}

#[test]
fn untrained_model_continues_the_last_pose() {
    let model = toy(1);
    let x = past(2, 3, 12);
    let set = model.sample_tree(&x, 3, 9).unwrap();
    let padded = replicate_pad(&x, 3, 4).unwrap();
    let coeffs = encode(&padded.transpose(), model.basis()).unwrap();
    let expected = decode(&coeffs, model.basis()).unwrap().transpose();
    for s in &set.sequences {
        assert!(s.max_abs_diff(&expected) < 1e-12);
    }
}

#[test]
fn part_forward_is_deterministic_given_z() {
    let mut model = toy(1);
    randomize_outputs(&mut model, 5);
    let c = model.past_coeffs(&past(3, 3, 12)).unwrap();
    let c0 = node_rows(&c, model.parts()[0].nodes());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = LatentCode::sample(&mut rng, 3);
    let a = model.part_forward(0, &c0, None, &z).unwrap();
    let b = model.part_forward(0, &c0, None, &z).unwrap();
    assert_eq!(a, b);
    let z2 = LatentCode::sample(&mut rng, 3);
    let c2 = model.part_forward(0, &c0, None, &z2).unwrap();
    assert!(a.max_abs_diff(&c2) > 0.0);

    let all = node_rows(&c, model.parts()[1].nodes());
    assert!(model.part_forward(1, &all, None, &z).is_err());
    let out = model.part_forward(1, &all, Some(&a), &z).unwrap();
    assert_eq!(out.shape(), &[6, 5]);
}

#[test]
fn batched_rollout_matches_single_sample_forward() {
    let mut model = toy(2);
    randomize_outputs(&mut model, 6);
    let c = model.past_coeffs(&past(4, 3, 12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z1: Vec<LatentCode> = (0..2).map(|_| LatentCode::sample(&mut rng, 3)).collect();
    let z2: Vec<LatentCode> = (0..4).map(|_| LatentCode::sample(&mut rng, 3)).collect();
    let stack = |zs: &[LatentCode]| {
        Tensor::matrix(zs.len(), 3, zs.iter().flat_map(|z| z.z.clone()).collect())
    };
    let mut g = Graph::new();
    let roll = model
        .rollout(&mut g, std::slice::from_ref(&c), &[2, 2], &[stack(&z1), stack(&z2)])
        .unwrap();
    assert_eq!(roll.sample_counts, vec![2, 4]);
    let c0 = node_rows(&c, model.parts()[0].nodes());
    let c1 = node_rows(&c, model.parts()[1].nodes());
    let part0 = g.value(roll.own_coeffs[0]).clone();
    let part1 = g.value(roll.own_coeffs[1]).clone();
    for (p, z) in z1.iter().enumerate() {
        let single = model.part_forward(0, &c0, None, z).unwrap();
        assert!(single.max_abs_diff(&part0.slice_rows(6 * p, 6 * p + 6)) < 1e-12);
        for j in 0..2 {
            let child = 2 * p + j;
            let second = model.part_forward(1, &c1, Some(&single), &z2[child]).unwrap();
            let batched = part1.slice_rows(6 * child, 6 * child + 6);
            assert!(second.max_abs_diff(&batched) < 1e-12);
        }
    }
}

#[test]
fn tree_has_k_to_the_n_leaves_and_k_distinct_first_parts() {
    let mut model = toy(3);
    randomize_outputs(&mut model, 7);
    let x = past(5, 3, 12);
    let set = model.sample_tree(&x, 10, 42).unwrap();
    assert_eq!(set.len(), 100);
    assert_eq!(set.nodes.len(), 110);
    let part0 = model.partition().coords(0);
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for f in set.futures() {
        assert_eq!(f.shape(), &[4, 12]);
        let p = cols(&f, &part0);
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    assert_eq!(distinct.len(), 10);
    for (i, path) in set.leaves.iter().enumerate() {
        assert_eq!(path.len(), 2);
        assert_eq!(set.nodes[path[1]].parent, Some(path[0]));
        assert_eq!(path[0], i / 10);
    }
    assert_eq!(set, model.sample_tree(&x, 10, 42).unwrap());
    assert_ne!(set, model.sample_tree(&x, 10, 43).unwrap());
}

#[test]
fn single_part_single_sample_tree() {
    let skel = Skeleton::chain(2);
    let partition = PartitionSpec::new(vec![vec![0, 1]], 2).unwrap();
    let model = Generator::new(
        &skel,
        partition,
        build_basis(2, 2, 4).unwrap(),
        ModelConfig {
            hidden: 3,
            latent: 2,
            residual_blocks: 1,
        },
        0,
    )
    .unwrap();
    let set = model.sample_tree(&past(1, 2, 6), 1, 0).unwrap();
    assert_eq!(set.len(), 1);
    assert!(model.sample_tree(&past(1, 2, 6), 0, 0).is_err());
}

#[test]
fn frozen_first_part_is_bit_identical() {
    let mut model = toy(4);
    randomize_outputs(&mut model, 8);
    let x = past(6, 3, 12);
    let frozen = vec![LatentCode::from_stream(1, 0, 3)];
    let a = model.controllable_sample(&x, &frozen, 50, 10).unwrap();
    let b = model.controllable_sample(&x, &frozen, 50, 11).unwrap();
    let (p0, p1) = (model.partition().coords(0), model.partition().coords(1));
    let reference = cols(&a.sequences[0], &p0);
    let mut second_parts = Vec::new();
    for s in a.sequences.iter().chain(&b.sequences) {
        assert_eq!(cols(s, &p0), reference);
        second_parts.push(cols(s, &p1));
    }
    second_parts.dedup();
    assert!(second_parts.len() > 1);
    assert_eq!(a.path_latents(7)[0], &frozen[0]);
    assert!(model.controllable_sample(&x, &[frozen[0].clone(), frozen[0].clone()], 2, 0).is_err());
}

#[test]
fn unfrozen_sampling_draws_independent_paths() {
    let mut model = toy(4);
    randomize_outputs(&mut model, 8);
    let set = model.controllable_sample(&past(6, 3, 12), &[], 5, 3).unwrap();
    assert_eq!(set.len(), 5);
    assert_eq!(set.nodes.len(), 10);
    let p0 = model.partition().coords(0);
    let mut firsts: Vec<Vec<f64>> = set.sequences.iter().map(|s| cols(s, &p0)).collect();
    firsts.dedup();
    assert_eq!(firsts.len(), 5);
}

#[test]
fn later_latents_do_not_touch_earlier_parts() {
    let mut model = toy(5);
    randomize_outputs(&mut model, 9);
    let c = model.past_coeffs(&past(7, 3, 12)).unwrap();
    let z1 = Tensor::row_vector(vec![0.3, -1.0, 0.5]);
    let run = |z2: Vec<f64>| {
        let mut g = Graph::new();
        let roll = model
            .rollout(&mut g, std::slice::from_ref(&c), &[1, 1], &[z1.clone(), Tensor::row_vector(z2)])
            .unwrap();
        let frames = model.decode_full(&mut g, roll.full, 1).unwrap();
        g.value(frames).clone()
    };
    let a = run(vec![0.0, 0.0, 0.0]);
    let b = run(vec![2.0, -1.0, 0.7]);
    let (p0, p1) = (model.partition().coords(0), model.partition().coords(1));
    assert_eq!(cols(&a, &p0), cols(&b, &p0));
    assert_ne!(cols(&a, &p1), cols(&b, &p1));
}

#[test]
fn past_segment_loss_is_differentiable() {
    let model = toy(6);
    let x = past(8, 3, 12);
    let c = model.past_coeffs(&x).unwrap();
    let z = [Tensor::row_vector(vec![0.1, 0.2, 0.3]), Tensor::row_vector(vec![-0.4, 0.0, 0.9])];
    let ids: Vec<ParamId> = model.parts().iter().map(|p| p.output_layer().w).collect();
    let mut g = Graph::new();
    let roll = model.rollout(&mut g, std::slice::from_ref(&c), &[1, 1], &z).unwrap();
    let frames = model.decode_full(&mut g, roll.full, 1).unwrap();
    let head = g.slice(frames, 0, 0, 3).unwrap();
    let target = g.constant(x);
    let d = g.sub(head, target).unwrap();
    let sq = g.square(d);
    let loss = g.sum(sq);
    let mut store = model.store().clone();
    g.backward(loss, &mut store).unwrap();
    for id in ids {
        assert!(store.grad(id).max_abs() > 0.0);
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let mut model = toy(7);
    randomize_outputs(&mut model, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gen.json");
    model.save(&path).unwrap();
    let loaded = Generator::load(&path, model.skeleton(), Some((3, 4, 5))).unwrap();
    assert_eq!(loaded.store().flat_values(), model.store().flat_values());
    let x = past(9, 3, 12);
    assert_eq!(loaded.sample_tree(&x, 2, 1).unwrap(), model.sample_tree(&x, 2, 1).unwrap());
    assert!(matches!(
        Generator::load(&path, model.skeleton(), Some((3, 4, 6))),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Generator::load(&path, &Skeleton::chain(5), None),
        Err(Error::Checkpoint(_))
    ));
}
