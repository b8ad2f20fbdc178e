//! Part-sequential graph-convolutional generator.
//!
//! The body is split into ordered parts. Generator `i` sees one graph node
//! per scalar coordinate of parts `1..=i`; each node carries its DCT
//! coefficients of the replicate-padded past, the coefficients already
//! predicted for it by earlier parts (zeros on part-`i` nodes) and the latent
//! code tiled to every node. It regresses residual coefficients for the
//! part-`i` coordinates only.
//!
//! Samples are stacked as row blocks of `D'` nodes so one graph evaluates a
//! whole batch; [`Graph::block_matmul`] applies the adjacency per block.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dct::{build_basis, encode, replicate_pad, DctBasis};
use crate::diff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::{Skeleton, SkeletonKind};

const CHECKPOINT_VERSION: u32 = 1;
/// Half-width of the uniform noise added to the identity adjacency at init.
const ADJACENCY_NOISE: f64 = 0.01;

/// Ordered disjoint joint sets covering the skeleton. Part `i` is generated
/// conditioned on parts `1..i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    parts: Vec<Vec<usize>>,
}

/// Named part layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPreset {
    /// One part: the whole body.
    Whole,
    /// Lower body (root and legs), then upper body.
    LowerUpper,
    /// Torso, right leg, left leg, right arm, left arm.
    Five,
}

impl PartitionSpec {
    pub fn new(parts: Vec<Vec<usize>>, joint_count: usize) -> Result<Self> {
        if parts.is_empty() || parts.iter().any(Vec::is_empty) {
            return Err(Error::Config("a partition needs at least one non-empty part".into()));
        }
        let mut seen = vec![false; joint_count];
        for &j in parts.iter().flatten() {
            if j >= joint_count {
                return Err(Error::Config(format!(
                    "partition names joint {j} of a {joint_count}-joint skeleton"
                )));
            }
            if seen[j] {
                return Err(Error::Config(format!("joint {j} appears in two parts")));
            }
            seen[j] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("joint {missing} belongs to no part")));
        }
        Ok(Self { parts })
    }

    pub fn from_names(skeleton: &Skeleton, parts: &[Vec<&str>]) -> Result<Self> {
        let parts = parts
            .iter()
            .map(|names| {
                names
                    .iter()
                    .map(|n| {
                        skeleton.joint_index(n).ok_or_else(|| {
                            Error::Config(format!("partition joint `{n}` is not in the skeleton"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts, skeleton.joint_count())
    }

    /// Resolves a preset against whichever built-in layout names the
    /// skeleton's joints.
    pub fn preset(preset: PartitionPreset, skeleton: &Skeleton) -> Result<Self> {
        if preset == PartitionPreset::Whole {
            return Self::new(vec![(0..skeleton.joint_count()).collect()], skeleton.joint_count());
        }
        for kind in [SkeletonKind::H36m17, SkeletonKind::Humaneva15] {
            let names = match preset {
                PartitionPreset::LowerUpper => kind.lower_upper(),
                _ => kind.five_parts(),
            };
            if let Ok(spec) = Self::from_names(skeleton, &names) {
                return Ok(spec);
            }
        }
        Err(Error::Config(format!(
            "partition {preset:?} does not fit this skeleton's joint names"
        )))
    }

    /// Part count `N`.
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn parts(&self) -> &[Vec<usize>] {
        &self.parts
    }

    pub fn joint_count(&self) -> usize {
        self.parts.iter().map(Vec::len).sum()
    }

    /// Coordinate indices (`3j + axis`) of part `i`.
    pub fn coords(&self, i: usize) -> Vec<usize> {
        self.parts[i]
            .iter()
            .flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2])
            .collect()
    }

    /// Coordinates of parts `0..=i` in part order: the node set of generator `i`.
    pub fn nodes_through(&self, i: usize) -> Vec<usize> {
        (0..=i).flat_map(|p| self.coords(p)).collect()
    }
}

/// Standard-normal latent code of one tree node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

impl LatentCode {
    pub fn sample(rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            z: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    /// Latent drawn from its own ChaCha stream, independent of evaluation order.
    pub fn from_stream(seed: u64, stream: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self::sample(&mut rng, dim)
    }
}

/// Sizes of every part generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub latent: usize,
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            latent: 64,
            residual_blocks: 4,
        }
    }
}

/// Learnable adjacency `A` (`D' × D'`) and weights `W` of one graph layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnLayerParams {
    pub a: ParamId,
    pub w: ParamId,
}

/// `tanh(A·F·W)` applied to each of `blocks` stacked node blocks of `f`.
pub fn gc_layer(g: &mut Graph, f: Var, a: Var, w: Var, blocks: usize) -> Result<Var> {
    let lin = gc_linear(g, f, a, w, blocks)?;
    Ok(g.tanh(lin))
}

/// `A·F·W` per block, without the activation.
pub fn gc_linear(g: &mut Graph, f: Var, a: Var, w: Var, blocks: usize) -> Result<Var> {
    let fw = g.matmul(f, w)?;
    g.block_matmul(a, fw, blocks)
}

/// Generator of one part: input layer, residual blocks of two layers each
/// and a linear, zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct PartGenerator {
    nodes: Vec<usize>,
    own: usize,
    input: GcnLayerParams,
    blocks: Vec<[GcnLayerParams; 2]>,
    output: GcnLayerParams,
}

impl PartGenerator {
    /// Coordinates of the node set, parts in order.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Number of trailing nodes that belong to the generated part.
    pub fn own(&self) -> usize {
        self.own
    }

    pub fn layers(&self) -> impl Iterator<Item = &GcnLayerParams> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter().flatten())
            .chain(std::iter::once(&self.output))
    }

    pub fn output_layer(&self) -> GcnLayerParams {
        self.output
    }

    /// Residual coefficients plus past coefficients for the part's own
    /// nodes, for `S = z.rows()` stacked samples.
    ///
    /// `c_past` is `(S·D') × M` in node order. `prev` holds the coefficients
    /// of the earlier-part nodes, `(S·(D' − own)) × M`, and is `None` for
    /// the first part. Returns `(S·own) × M`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c_past: &Tensor,
        prev: Option<Var>,
        z: &Tensor,
    ) -> Result<Var> {
        let s = z.rows();
        let dn = self.nodes.len();
        let before = dn - self.own;
        let m = c_past.cols();
        if c_past.rows() != s * dn {
            return Err(Error::dim(
                "part_forward",
                format!("{} past rows for {s} samples of {dn} nodes", c_past.rows()),
            ));
        }
        let prev_feat = match (prev, before) {
            (None, 0) => g.constant(Tensor::zeros(s * dn, m)),
            (Some(p), b) if b > 0 && g.value(p).shape() == [s * b, m] => {
                let zero = g.constant(Tensor::zeros(1, m));
                let padded = g.concat(&[p, zero], 0)?;
                let idx = (0..s)
                    .flat_map(|k| (0..dn).map(move |n| if n < b { k * b + n } else { s * b }))
                    .collect();
                g.gather_rows(padded, idx)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "part generator with {before} conditioning nodes got mismatched earlier parts"
                )))
            }
        };
        let mut ztile = Vec::with_capacity(s * dn * z.cols());
        for k in 0..s {
            for _ in 0..dn {
                ztile.extend_from_slice(z.row(k));
            }
        }
        let ztile = g.constant(Tensor::matrix(s * dn, z.cols(), ztile));
        let past = g.constant(c_past.clone());
        let feat = g.concat(&[past, prev_feat, ztile], 1)?;

        let layer = |g: &mut Graph, l: &GcnLayerParams, f: Var, act: bool| -> Result<Var> {
            let a = g.param(store, l.a);
            let w = g.param(store, l.w);
            if act {
                gc_layer(g, f, a, w, s)
            } else {
                gc_linear(g, f, a, w, s)
            }
        };
        let mut h = layer(g, &self.input, feat, true)?;
        for [l1, l2] in &self.blocks {
            let y = layer(g, l1, h, true)?;
            let y = layer(g, l2, y, true)?;
            h = g.add(h, y)?;
        }
        let out = layer(g, &self.output, h, false)?;

        let own_rows: Vec<usize> = (0..s)
            .flat_map(|k| (before..dn).map(move |n| k * dn + n))
            .collect();
        let residual = g.gather_rows(out, own_rows.clone())?;
        let mut base = Vec::with_capacity(own_rows.len() * m);
        for &r in &own_rows {
            base.extend_from_slice(c_past.row(r));
        }
        let base = g.constant(Tensor::matrix(own_rows.len(), m, base));
        g.add(residual, base)
    }
}

/// All part generators of one model together with their parameters.
#[derive(Clone, Debug)]
pub struct Generator {
    skeleton: Skeleton,
    partition: PartitionSpec,
    basis: DctBasis,
    config: ModelConfig,
    store: ParamStore,
    parts: Vec<PartGenerator>,
    /// `perm[c]`: position of skeleton coordinate `c` in part order.
    perm: Vec<usize>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-r..r)).collect())
}

fn adjacency(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut a = Tensor::eye(n);
    for v in a.data_mut() {
        *v += rng.random_range(-ADJACENCY_NOISE..ADJACENCY_NOISE);
    }
    a
}

impl Generator {
    /// Fresh model: near-identity adjacencies, Glorot weights, zero output
    /// weights, so the initial prediction continues the last observed pose.
    pub fn new(
        skeleton: &Skeleton,
        partition: PartitionSpec,
        basis: DctBasis,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        if partition.joint_count() != skeleton.joint_count() {
            return Err(Error::Config(format!(
                "partition covers {} joints, skeleton has {}",
                partition.joint_count(),
                skeleton.joint_count()
            )));
        }
        if config.hidden == 0 || config.latent == 0 {
            return Err(Error::Config("hidden width and latent size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = basis.coeffs();
        let hd = config.hidden;
        let mut parts = Vec::with_capacity(partition.len());
        for i in 0..partition.len() {
            let nodes = partition.nodes_through(i);
            let own = partition.coords(i).len();
            let dn = nodes.len();
            let mut layer = |name: String, fin: usize, fout: usize, zero: bool| GcnLayerParams {
                a: store.add(format!("{name}.a"), adjacency(&mut rng, dn)),
                w: store.add(
                    format!("{name}.w"),
                    if zero {
                        Tensor::zeros(fin, fout)
                    } else {
                        glorot(&mut rng, fin, fout)
                    },
                ),
            };
            let input = layer(format!("part{i}.input"), 2 * m + config.latent, hd, false);
            let blocks = (0..config.residual_blocks)
                .map(|b| {
                    [
                        layer(format!("part{i}.block{b}.0"), hd, hd, false),
                        layer(format!("part{i}.block{b}.1"), hd, hd, false),
                    ]
                })
                .collect();
            let output = layer(format!("part{i}.output"), hd, m, true);
            parts.push(PartGenerator {
                nodes,
                own,
                input,
                blocks,
                output,
            });
        }
        let order = partition.nodes_through(partition.len() - 1);
        let mut perm = vec![0; order.len()];
        for (pos, &c) in order.iter().enumerate() {
            perm[c] = pos;
        }
        Ok(Self {
            skeleton: skeleton.clone(),
            partition,
            basis,
            config,
            store,
            parts,
            perm,
        })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    pub fn basis(&self) -> &DctBasis {
        &self.basis
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parts(&self) -> &[PartGenerator] {
        &self.parts
    }

    pub fn dim(&self) -> usize {
        self.skeleton.dim()
    }

    /// DCT coefficients (`D × M`, skeleton coordinate order) of the
    /// replicate-padded past `H × D`.
    pub fn past_coeffs(&self, past: &Tensor) -> Result<Tensor> {
        if past.cols() != self.dim() {
            return Err(Error::Config(format!(
                "past has {} coordinates, skeleton needs {}",
                past.cols(),
                self.dim()
            )));
        }
        let padded = replicate_pad(past, self.basis.past_len(), self.basis.future_len())?;
        encode(&padded.transpose(), &self.basis)
    }

    /// Runs every part for a batch of sample paths.
    ///
    /// `c_past[w]` are the `D × M` past coefficients of window `w`. Part `i`
    /// expands each sample of part `i − 1` (or each window for `i = 0`) into
    /// `fan[i]` children, child `j` of parent `p` at index `p·fan[i] + j`;
    /// `latents[i]` has one row per resulting sample.
    pub fn rollout(
        &self,
        g: &mut Graph,
        c_past: &[Tensor],
        fan: &[usize],
        latents: &[Tensor],
    ) -> Result<Rollout> {
        let n = self.parts.len();
        if fan.len() != n || latents.len() != n {
            return Err(Error::Config(format!(
                "rollout over {n} parts got {} fan-outs and {} latent sets",
                fan.len(),
                latents.len()
            )));
        }
        let m = self.basis.coeffs();
        let mut window_of: Vec<usize> = (0..c_past.len()).collect();
        let mut prev: Option<Var> = None;
        let mut own_coeffs = Vec::with_capacity(n);
        let mut sample_counts = Vec::with_capacity(n);
        for (i, part) in self.parts.iter().enumerate() {
            let parents = window_of.len();
            let s = parents * fan[i];
            if fan[i] == 0 || latents[i].rows() != s || latents[i].cols() != self.config.latent {
                return Err(Error::Config(format!(
                    "part {i}: {:?} latents for {s} samples of size {}",
                    latents[i].shape(),
                    self.config.latent
                )));
            }
            window_of = window_of
                .iter()
                .flat_map(|&w| std::iter::repeat_n(w, fan[i]))
                .collect();
            let before = part.nodes.len() - part.own;
            let expanded = match prev {
                Some(p) if fan[i] > 1 => {
                    let idx = (0..s)
                        .flat_map(|k| (0..before).map(move |r| (k / fan[i]) * before + r))
                        .collect();
                    Some(g.gather_rows(p, idx)?)
                }
                other => other,
            };
            let mut past = Vec::with_capacity(s * part.nodes.len() * m);
            for &w in &window_of {
                for &c in &part.nodes {
                    past.extend_from_slice(c_past[w].row(c));
                }
            }
            let past = Tensor::matrix(s * part.nodes.len(), m, past);
            let own = part.forward(g, &self.store, &past, expanded, &latents[i])?;
            prev = Some(match expanded {
                None => own,
                Some(e) => {
                    let both = g.concat(&[e, own], 0)?;
                    let dn = part.nodes.len();
                    let idx = (0..s)
                        .flat_map(|k| {
                            (0..dn).map(move |r| {
                                if r < before {
                                    k * before + r
                                } else {
                                    s * before + k * part.own + r - before
                                }
                            })
                        })
                        .collect();
                    g.gather_rows(both, idx)?
                }
            });
            own_coeffs.push(own);
            sample_counts.push(s);
        }
        let full = prev.expect("partition has at least one part");
        Ok(Rollout {
            own_coeffs,
            sample_counts,
            full,
            window_of,
        })
    }

    /// Decodes stacked full coefficients (`(S·D) × M`, part order) into
    /// `(S·(H+T)) × D` frames in skeleton coordinate order.
    pub fn decode_full(&self, g: &mut Graph, full: Var, samples: usize) -> Result<Var> {
        let basis_t = g.constant(self.basis.matrix().transpose());
        let traj = g.matmul(full, basis_t)?;
        let frames = g.block_transpose(traj, samples)?;
        g.gather_cols(frames, self.perm.clone())
    }

    /// Decoded future of part `i` only: `(S·own) × M` coefficients to
    /// `S × (own·T)`, coordinate-major per sample.
    pub fn decode_part_future(&self, g: &mut Graph, own: Var, i: usize) -> Result<Var> {
        let h = self.basis.past_len();
        let t = self.basis.future_len();
        let future_basis = self.basis.matrix().slice_rows(h, h + t).transpose();
        let fb = g.constant(future_basis);
        let traj = g.matmul(own, fb)?;
        let rows = g.value(traj).rows();
        let width = self.parts[i].own * t;
        g.reshape(traj, rows * t / width, width)
    }

    /// Full-body sequences of every leaf path, `(H+T) × D` each.
    fn run(&self, c_past: &Tensor, fan: &[usize], latents: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let roll = self.rollout(&mut g, std::slice::from_ref(c_past), fan, latents)?;
        let s = roll.window_of.len();
        let frames = self.decode_full(&mut g, roll.full, s)?;
        let f = self.basis.frames();
        let v = g.value(frames);
        Ok((0..s).map(|k| v.slice_rows(k * f, (k + 1) * f)).collect())
    }

    /// Generates part `i` for a single sample, outside any batch.
    pub fn part_forward(
        &self,
        i: usize,
        c_past: &Tensor,
        c_prev: Option<&Tensor>,
        z: &LatentCode,
    ) -> Result<Tensor> {
        let part = self.parts.get(i).ok_or_else(|| {
            Error::Config(format!("model has {} parts, asked for {i}", self.parts.len()))
        })?;
        let mut g = Graph::new();
        let prev = c_prev.map(|p| g.constant(p.clone()));
        let z = Tensor::row_vector(z.z.clone());
        let out = part.forward(&mut g, &self.store, c_past, prev, &z)?;
        Ok(g.value(out).clone())
    }

    /// Full `K`-ary tree of depth `N` below the past `x` (`H × D`).
    ///
    /// Every tree node draws its latent from its own stream of `seed`,
    /// numbered in breadth-first order.
    pub fn sample_tree(&self, x: &Tensor, k: usize, seed: u64) -> Result<PredictionSet> {
        if k == 0 {
            return Err(Error::Contract("sample_tree needs K ≥ 1".into()));
        }
        let n = self.parts.len();
        let mut nodes = Vec::new();
        let mut latents = Vec::with_capacity(n);
        let mut level: Vec<Option<usize>> = vec![None];
        for part in 0..n {
            let mut next = Vec::with_capacity(level.len() * k);
            let mut z = Vec::new();
            for &parent in &level {
                for _ in 0..k {
                    let code = LatentCode::from_stream(seed, nodes.len() as u64, self.config.latent);
                    z.extend_from_slice(&code.z);
                    next.push(Some(nodes.len()));
                    nodes.push(TreeNode {
                        part,
                        parent,
                        latent: code,
                    });
                }
            }
            latents.push(Tensor::matrix(next.len(), self.config.latent, z));
            level = next;
        }
        let c = self.past_coeffs(x)?;
        let sequences = self.run(&c, &vec![k; n], &latents)?;
        let leaves = level
            .into_iter()
            .map(|leaf| path_to(&nodes, leaf.expect("tree has at least one level")))
            .collect();
        Ok(PredictionSet {
            h: self.basis.past_len(),
            sequences,
            nodes,
            leaves,
        })
    }

    /// `k` futures sharing the given latent codes for the first
    /// `frozen.len()` parts; later parts draw fresh latents per future.
    pub fn controllable_sample(
        &self,
        x: &Tensor,
        frozen: &[LatentCode],
        k: usize,
        seed: u64,
    ) -> Result<PredictionSet> {
        let n = self.parts.len();
        if frozen.len() >= n {
            return Err(Error::Contract(format!(
                "can freeze at most {} of {n} parts, got {}",
                n - 1,
                frozen.len()
            )));
        }
        if k == 0 {
            return Err(Error::Contract("controllable_sample needs K ≥ 1".into()));
        }
        if let Some(bad) = frozen.iter().find(|c| c.z.len() != self.config.latent) {
            return Err(Error::Config(format!(
                "frozen latent has {} entries, model uses {}",
                bad.z.len(),
                self.config.latent
            )));
        }
        let mut nodes = Vec::new();
        let mut fan = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        let mut tips: Vec<Option<usize>> = vec![None];
        for (part, code) in frozen.iter().enumerate() {
            nodes.push(TreeNode {
                part,
                parent: tips[0],
                latent: code.clone(),
            });
            tips = vec![Some(nodes.len() - 1)];
            fan.push(1);
            latents.push(Tensor::row_vector(code.z.clone()));
        }
        let shared = tips[0];
        tips = vec![shared; k];
        for part in frozen.len()..n {
            let mut z = Vec::with_capacity(k * self.config.latent);
            for (path, tip) in tips.iter_mut().enumerate() {
                let stream = (path * n + part) as u64;
                let code = LatentCode::from_stream(seed, stream, self.config.latent);
                z.extend_from_slice(&code.z);
                nodes.push(TreeNode {
                    part,
                    parent: *tip,
                    latent: code,
                });
                *tip = Some(nodes.len() - 1);
            }
            fan.push(if part == frozen.len() { k } else { 1 });
            latents.push(Tensor::matrix(k, self.config.latent, z));
        }
        let c = self.past_coeffs(x)?;
        let sequences = self.run(&c, &fan, &latents)?;
        let leaves = tips
            .into_iter()
            .map(|leaf| path_to(&nodes, leaf.expect("at least one part is sampled")))
            .collect();
        Ok(PredictionSet {
            h: self.basis.past_len(),
            sequences,
            nodes,
            leaves,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = GeneratorCheckpoint {
            version: CHECKPOINT_VERSION,
            skeleton: self.skeleton.fingerprint(),
            partition: self.partition.clone(),
            h: self.basis.past_len(),
            t: self.basis.future_len(),
            m: self.basis.coeffs(),
            config: self.config,
            params: self
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        };
        fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint, refusing a different skeleton or, when given, a
    /// different `(H, T, M)`.
    pub fn load(
        path: impl AsRef<Path>,
        skeleton: &Skeleton,
        dct: Option<(usize, usize, usize)>,
    ) -> Result<Self> {
        let ck: GeneratorCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported generator checkpoint version {}",
                ck.version
            )));
        }
        if ck.skeleton != skeleton.fingerprint() {
            return Err(Error::Checkpoint(
                "generator was trained for a different skeleton".into(),
            ));
        }
        if let Some(expected) = dct {
            if expected != (ck.h, ck.t, ck.m) {
                return Err(Error::Checkpoint(format!(
                    "generator uses (H, T, M) = {:?}, expected {expected:?}",
                    (ck.h, ck.t, ck.m)
                )));
            }
        }
        let basis = build_basis(ck.h, ck.t, ck.m)?;
        let mut model = Self::new(skeleton, ck.partition, basis, ck.config, 0)?;
        model.store.load_named(&ck.params)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorCheckpoint {
    version: u32,
    skeleton: String,
    partition: PartitionSpec,
    h: usize,
    t: usize,
    m: usize,
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

/// Graph handles produced by [`Generator::rollout`].
pub struct Rollout {
    /// Per part, `(S_i·own_i) × M` coefficients of that part's coordinates.
    pub own_coeffs: Vec<Var>,
    /// Per part, the number of samples `S_i`.
    pub sample_counts: Vec<usize>,
    /// `(S_N·D) × M` coefficients of every coordinate, part order.
    pub full: Var,
    /// Window index of every final sample.
    pub window_of: Vec<usize>,
}

/// One latent draw in a sampling tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub part: usize,
    pub parent: Option<usize>,
    pub latent: LatentCode,
}

fn path_to(nodes: &[TreeNode], leaf: usize) -> Vec<usize> {
    let mut path = vec![leaf];
    while let Some(p) = nodes[*path.last().expect("path is never empty")].parent {
        path.push(p);
    }
    path.reverse();
    path
}

/// Sampled futures with the latent tree that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    h: usize,
    /// Decoded `(H+T) × D` sequences, one per leaf.
    pub sequences: Vec<Tensor>,
    pub nodes: Vec<TreeNode>,
    /// Node indices from the first part to the leaf, one path per sequence.
    pub leaves: Vec<Vec<usize>>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// The `T × D` future frames of every sequence.
    pub fn futures(&self) -> Vec<Tensor> {
        self.sequences
            .iter()
            .map(|s| s.slice_rows(self.h, s.rows()))
            .collect()
    }

    /// Latent codes along the path of sequence `i`, first part first.
    pub fn path_latents(&self, i: usize) -> Vec<&LatentCode> {
        self.leaves[i].iter().map(|&n| &self.nodes[n].latent).collect()
    }
}

#[cfg(test)]
mod tests;
