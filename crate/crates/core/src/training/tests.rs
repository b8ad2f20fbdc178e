use std::f64::consts::E;

use super::*;
use crate::diff::{grad_check, ParamId, ParamStore};
use crate::kinematics::{mine_ranges, AngleSpec, AngleVector};
use crate::prior::random_flow;

fn rows(data: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&data.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn scalar_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.scalar(v)
}

// Toy body: root j0 with children j1 and j2, and j3 below j2.
fn toy_skeleton() -> Skeleton {
    let names = ["j0", "j1", "j2", "j3"].map(String::from).to_vec();
    Skeleton::from_parents(names, &[-1, 0, 0, 2]).unwrap().0
}

const REST: [f64; 12] = [0.0, 0.0, 0.0, 0.4, 0.1, 0.0, -0.1, 0.5, 0.0, -0.2, 0.9, 0.1];

fn toy_windows(seed: u64, n: usize, h: usize, t: usize) -> Vec<SampleWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut frames = Vec::new();
            let phase: f64 = rng.random_range(0.0..6.0);
            for f in 0..h + t {
                let s = (0.3 * f as f64 + phase).sin();
                let mut pose = REST.to_vec();
                pose[3] += 0.05 * s;
                pose[9] += 0.08 * s;
                pose[11] += 0.06 * (0.2 * f as f64 + phase).cos();
                for (k, v) in pose.iter_mut().enumerate().skip(3) {
                    *v += rng.random_range(-0.01..0.01) * (k % 2) as f64;
                }
                frames.extend(pose);
            }
            let all = Tensor::matrix(h + t, 12, frames);
            SampleWindow {
                source: i,
                start: 0,
                past: all.slice_rows(0, h),
                future: all.slice_rows(h, h + t),
            }
        })
        .collect()
}

fn toy_model(seed: u64) -> Generator {
    let skel = toy_skeleton();
    let partition = PartitionSpec::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
    let config = ModelConfig {
        hidden: 4,
        latent: 2,
        residual_blocks: 4,
    };
    let mut model = Generator::new(&skel, partition, build_basis(3, 4, 5).unwrap(), config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let outputs: Vec<ParamId> = model.parts().iter().map(|p| p.output_layer().w).collect();
    for id in outputs {
        for v in model.store_mut().value_mut(id).data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    model
}

/// Prior and angle limits; the limits are mined on a narrower motion so the
/// generated frames violate some of them.
fn toy_priors(seed: u64) -> Priors {
    let skel = toy_skeleton();
    let specs = vec![
        AngleSpec::new("spread", AngleVector::Limb(0, 1), AngleVector::Limb(0, 2)).unwrap(),
        AngleSpec::new("bend", AngleVector::Limb(0, 2), AngleVector::Limb(2, 3)).unwrap(),
        AngleSpec::new("twist", AngleVector::Plane(0, 1, 2), AngleVector::Limb(2, 3)).unwrap(),
    ];
    let ws = toy_windows(seed, 2, 2, 2);
    let mined: Vec<f64> = ws.iter().flat_map(|w| w.past.data().to_vec()).collect();
    let table = mine_ranges(&Tensor::matrix(4, 12, mined), &specs, &skel, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Priors::new(&random_flow(9, &mut rng, 0.3), &table, &skel).unwrap()
}

fn toy_batch(model: &Generator, seed: u64, n: usize) -> Vec<BatchItem> {
    let ws = toy_windows(seed, n + 2, 3, 4);
    (0..n)
        .map(|i| BatchItem::new(model, &ws[i], &[&ws[i], &ws[n], &ws[n + 1]]).unwrap())
        .collect()
}

fn reference_weights() -> LossWeights {
    LossWeights {
        nf: 0.01,
        angle: 100.0,
        diversity: vec![8.0, 25.0],
        recon: 2.0,
        multimodal: 1.0,
        past: 100.0,
        limb: 500.0,
    }
}

#[test]
fn reconstruction_takes_the_closest_prediction() {
    let gt = rows(&[&[1.0, 2.0]]);
    let v = scalar_of(|g| {
        let p = g.constant(rows(&[&[3.0, 2.0], &[1.0, 2.0]]));
        loss_r(g, p, &gt)
    });
    assert_eq!(v, 0.0);
    // squared distances 4, 1, 9
    let preds = [[3.0, 2.0], [1.0, 3.0], [1.0, -1.0]];
    for perm in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
        let p: Vec<&[f64]> = perm.iter().map(|&i| &preds[i][..]).collect();
        let v = scalar_of(|g| {
            let p = g.constant(rows(&p));
            loss_r(g, p, &gt)
        });
        assert_eq!(v, 1.0);
    }
}

#[test]
fn reconstruction_gradient_reaches_only_the_argmin() {
    let mut g = Graph::new();
    let p = g.input(rows(&[&[3.0, 2.0], &[1.0, 3.0]]));
    let l = loss_r(&mut g, p, &rows(&[&[1.0, 2.0]])).unwrap();
    let grads = g.gradients(l).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0, 2.0]);
}

#[test]
fn multimodal_loss_reductions_and_double_loop() {
    let gt = rows(&[&[1.0, 2.0]]);
    let preds = rows(&[&[3.0, 2.0], &[1.0, 3.0], &[0.5, 0.5]]);
    let r = scalar_of(|g| {
        let p = g.constant(preds.clone());
        loss_r(g, p, &gt)
    });
    let mm = scalar_of(|g| {
        let p = g.constant(preds.clone());
        loss_mm(g, p, &gt)
    });
    assert_eq!(r, mm);
    let matched = scalar_of(|g| {
        let p = g.constant(preds.clone());
        loss_mm(g, p, &rows(&[&[0.5, 0.5], &[3.0, 2.0]]))
    });
    assert_eq!(matched, 0.0);
    let empty = scalar_of(|g| {
        let p = g.constant(preds.clone());
        loss_mm(g, p, &Tensor::zeros(0, 2))
    });
    assert_eq!(empty, 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rand = |r: usize| {
        Tensor::matrix(r, 6, (0..r * 6).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (p, q) = (rand(4), rand(5));
    let mut brute = 0.0;
    for j in 0..5 {
        let mut best = f64::INFINITY;
        for i in 0..4 {
            let d: f64 = p.row(i).iter().zip(q.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d);
        }
        brute += best;
    }
    let v = scalar_of(|g| {
        let pv = g.constant(p.clone());
        loss_mm(g, pv, &q)
    });
    assert!((v - brute / 5.0).abs() < 1e-12);
}

#[test]
fn diversity_closed_forms() {
    let same = scalar_of(|g| {
        let p = g.constant(Tensor::full(3, 4, 0.2));
        loss_d(g, p, 3, 5.0)
    });
    assert_eq!(same, 1.0);
    let alpha = 2.5;
    let v = scalar_of(|g| {
        let p = g.constant(rows(&[&[0.0, 0.0], &[1.0, -1.5]]));
        loss_d(g, p, 2, alpha)
    });
    assert!((v - 1.0 / E).abs() < 1e-15);
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(3, 2));
    assert!(loss_d(&mut g, p, 1, 1.0).is_err());
    assert!(loss_d(&mut g, p, 2, 1.0).is_err());
    assert!(loss_d(&mut g, p, 3, 0.0).is_err());
}

#[test]
fn diversity_pairs_stay_within_sibling_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (k, groups, width, alpha) = (3, 4, 5, 1.7);
    let p = Tensor::matrix(
        k * groups,
        width,
        (0..k * groups * width).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let mut brute = Vec::new();
    for grp in 0..groups {
        for i in 0..k {
            for j in i + 1..k {
                let l1: f64 = p
                    .row(grp * k + i)
                    .iter()
                    .zip(p.row(grp * k + j))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                brute.push((-l1 / alpha).exp());
            }
        }
    }
    let expected = brute.iter().sum::<f64>() / brute.len() as f64;
    let v = scalar_of(|g| {
        let pv = g.constant(p.clone());
        loss_d(g, pv, k, alpha)
    });
    assert!((v - expected).abs() < 1e-14);

    // pushing one pair apart lowers the loss
    let mut wider = p.clone();
    wider.set(0, 0, p.get(0, 0) + 3.0 * (p.get(0, 0) - p.get(1, 0)).signum());
    let w = scalar_of(|g| {
        let pv = g.constant(wider);
        loss_d(g, pv, k, alpha)
    });
    assert!(w < v);
}

#[test]
fn past_loss_closed_form_and_gradient() {
    let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
    let zero = scalar_of(|g| {
        let p = g.constant(x.clone());
        loss_past(g, p, &x)
    });
    assert_eq!(zero, 0.0);
    let eps = 0.03;
    let off = scalar_of(|g| {
        let p = g.constant(x.map(|v| v + eps));
        loss_past(g, p, &x)
    });
    assert!((off - eps * eps * 12.0).abs() < 1e-15);

    let mut store = ParamStore::new();
    let id = store.add("past", x.map(|v| v * 1.3 - 0.2));
    let report = grad_check(&mut store, 1e-5, |g, s| {
        let p = g.param(s, id);
        loss_past(g, p, &x)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn limb_loss_closed_form_and_rotation_invariance() {
    let skel = toy_skeleton();
    let pose = Tensor::matrix(1, 12, REST.to_vec());
    let lengths = Tensor::row_vector(limb_lengths(&REST, &skel));
    let v = scalar_of(|g| {
        let p = g.constant(pose.clone());
        loss_limb(g, p, &lengths, &skel)
    });
    assert!(v < 1e-30);

    // stretch j3 away from j2 by 0.1 in the second of two frames
    let (j2, j3) = (&REST[6..9], &REST[9..12]);
    let dir: Vec<f64> = j3.iter().zip(j2).map(|(a, b)| a - b).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut longer = REST.to_vec();
    for k in 0..3 {
        longer[9 + k] += 0.1 * dir[k] / n;
    }
    let two = Tensor::matrix(2, 12, REST.iter().chain(&longer).copied().collect());
    let lengths2 = Tensor::matrix(2, 3, lengths.data().repeat(2));
    let v = scalar_of(|g| {
        let p = g.constant(two.clone());
        loss_limb(g, p, &lengths2, &skel)
    });
    assert!((v - 0.01).abs() < 1e-12);

    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rotated: Vec<f64> = longer
        .chunks(3)
        .flat_map(|p| [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]])
        .collect();
    let r = scalar_of(|g| {
        let p = g.constant(Tensor::matrix(1, 12, rotated));
        loss_limb(g, p, &lengths, &skel)
    });
    assert!((r - 0.01).abs() < 1e-12);
}

#[test]
fn decay_schedule() {
    assert_eq!(lr_decay(0), 1.0);
    assert_eq!(lr_decay(50), 1.0);
    assert_eq!(lr_decay(100), 1.0);
    assert_eq!(lr_decay(300), 0.5);
    assert_eq!(lr_decay(500), 0.0);
}

fn eval_terms(
    model: &Generator,
    batch: &[BatchItem],
    latents: &[Tensor],
    weights: &LossWeights,
    priors: &Priors,
) -> (f64, LossTerms<f64>) {
    let mut g = Graph::new();
    let (total, terms) =
        total_loss(&mut g, model, batch, latents, 3, &[0.5, 0.8], weights, priors).unwrap();
    (g.scalar(total), terms.values(&g))
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    let model = toy_model(1);
    let priors = toy_priors(2);
    let batch = toy_batch(&model, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let latents = tree_latents(&mut rng, &model, 2, 3);

    let zero = LossWeights {
        diversity: vec![0.0, 0.0],
        ..LossWeights::default()
    };
    let (t0, terms) = eval_terms(&model, &batch, &latents, &zero, &priors);
    assert_eq!(t0, 0.0);
    for (name, v) in terms.named() {
        assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
    }
    assert!(terms.angle > 0.0, "toy limits should be violated");

    let (weighted, _) = eval_terms(&model, &batch, &latents, &reference_weights(), &priors);
    let w = reference_weights();
    let hand = w.nf * terms.nf
        + w.angle * terms.angle
        + w.diversity[0] * terms.diversity[0]
        + w.diversity[1] * terms.diversity[1]
        + w.recon * terms.recon
        + w.multimodal * terms.multimodal
        + w.past * terms.past
        + w.limb * terms.limb;
    assert!((weighted - hand).abs() <= 1e-12 * hand.abs().max(1.0), "{weighted} vs {hand}");

    let single = LossWeights {
        limb: 1.0,
        ..zero.clone()
    };
    assert_eq!(eval_terms(&model, &batch, &latents, &single, &priors).0, terms.limb);
    let single = LossWeights {
        diversity: vec![0.0, 1.0],
        ..zero
    };
    assert_eq!(eval_terms(&model, &batch, &latents, &single, &priors).0, terms.diversity[1]);
}

#[test]
fn terms_match_independent_evaluation() {
    let model = toy_model(5);
    let priors = toy_priors(2);
    let batch = toy_batch(&model, 6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let latents = tree_latents(&mut rng, &model, 1, 3);
    let (_, terms) = eval_terms(&model, &batch, &latents, &reference_weights(), &priors);

    // Recompute reconstruction from decoded futures outside the graph.
    let mut g = Graph::new();
    let roll = model.rollout(&mut g, &[batch[0].c_past.clone()], &[3, 3], &latents).unwrap();
    let frames = model.decode_full(&mut g, roll.full, 9).unwrap();
    let frames = g.value(frames).clone();
    let futures: Vec<Vec<f64>> = (0..9)
        .map(|s| frames.slice_rows(s * 7 + 3, s * 7 + 7).data().to_vec())
        .collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let best = futures
        .iter()
        .map(|f| sq(f, batch[0].future.data()))
        .fold(f64::INFINITY, f64::min);
    assert!((terms.recon - best).abs() < 1e-12 * best.max(1.0));
    let past: f64 = (0..9)
        .map(|s| sq(frames.slice_rows(s * 7, s * 7 + 3).data(), batch[0].past.data()))
        .sum::<f64>()
        / 9.0;
    assert!((terms.past - past).abs() < 1e-12 * past.max(1.0));
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut model = toy_model(8);
    let priors = toy_priors(9);
    let batch = toy_batch(&model, 10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let latents = tree_latents(&mut rng, &model, 1, 3);
    let weights = reference_weights();
    let template = model.clone();
    let report = grad_check(model.store_mut(), 1e-6, |g, s| {
        let mut m = template.clone();
        *m.store_mut() = s.clone();
        let (total, _) = total_loss(g, &m, &batch, &latents, 3, &[0.5, 0.8], &weights, &priors)?;
        Ok(total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{:?}", report.worst());
}

#[test]
fn presets_parse_and_overrides_merge_deeply() {
    for name in PRESETS {
        TrainConfig::preset(name).unwrap();
    }
    let h36m = TrainConfig::preset("h36m-paper").unwrap();
    assert_eq!((h36m.h, h36m.t, h36m.m, h36m.k), (25, 100, 20, 10));
    assert_eq!(h36m.alpha, vec![100.0, 300.0]);
    let he = TrainConfig::preset("humaneva-paper").unwrap();
    assert_eq!((he.h, he.t, he.m), (15, 60, 8));
    assert_eq!(he.lambda_d, vec![5.0, 10.0]);

    let cfg = TrainConfig::from_toml("preset = \"h36m-paper\"\nk = 4\n[model]\nhidden = 8\n").unwrap();
    assert_eq!(cfg.k, 4);
    assert_eq!(cfg.model.hidden, 8);
    assert_eq!(cfg.model.latent, 64);
    assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::preset("desk-synth").unwrap());
    let round = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(round, cfg);

    assert!(TrainConfig::from_toml("typo = 1").is_err());
    assert!(TrainConfig::from_toml("preset = \"nope\"").is_err());
    assert!(TrainConfig::from_toml("k = 1").is_err());
    assert!(TrainConfig::from_toml("k = 1\nlambda_d = [0.0, 0.0]").is_ok());
    assert!(TrainConfig::from_toml("lambda_r = -1.0").is_err());
    assert!(TrainConfig::from_toml("alpha = [1.0]").is_err());
}

#[test]
fn step_check_names_the_bad_term() {
    let mut terms = LossTerms {
        nf: 1.0,
        angle: 0.0,
        diversity: vec![0.5, 0.5],
        recon: 2.0,
        multimodal: 2.0,
        past: 0.1,
        limb: 0.1,
    };
    assert!(check_step(&terms, 5.0).is_ok());
    assert!(check_step(&terms, 2e6).unwrap_err().contains("diverged"));
    terms.diversity[1] = f64::NAN;
    assert!(check_step(&terms, 5.0).unwrap_err().contains("div2"));
}
