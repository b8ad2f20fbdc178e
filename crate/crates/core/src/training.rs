//! Loss terms, their weighted sum and the generator optimization loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{limb_lengths, mine_pseudo_gt, window, MotionSequence, PseudoGtSet, SampleWindow};
use crate::dct::build_basis;
use crate::diff::{Adam, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig, PartitionPreset, PartitionSpec};
use crate::kinematics::{AngleGraphLoss, AngleTable};
use crate::metrics::{evaluate, model_cases};
use crate::prior::{FlowParams, FrozenFlow};
use crate::skeleton::Skeleton;

/// Training loss above this value aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const H36M_PAPER: &str = r#"
k = 10
lambda_nf = 0.01
lambda_a = 100.0
lambda_d = [8.0, 25.0]
lambda_r = 2.0
lambda_mm = 1.0
lambda_past = 100.0
lambda_limb = 500.0
alpha = [100.0, 300.0]
batch_size = 16
epochs = 500
samples_per_epoch = 5000
lr = 1e-3
seed = 0
h = 25
t = 100
m = 20
pseudo_gt_threshold = 0.5
max_pseudo_gt = 50
window_stride = 10
partition = "lower-upper"
checkpoint_every = 50
val_windows = 200
val_samples = 50

[model]
hidden = 256
latent = 64
residual_blocks = 4
"#;

const HUMANEVA_PAPER: &str = r#"
k = 10
lambda_nf = 0.01
lambda_a = 100.0
lambda_d = [5.0, 10.0]
lambda_r = 2.0
lambda_mm = 1.0
lambda_past = 100.0
lambda_limb = 500.0
alpha = [15.0, 50.0]
batch_size = 16
epochs = 500
samples_per_epoch = 5000
lr = 1e-3
seed = 0
h = 15
t = 60
m = 8
pseudo_gt_threshold = 0.5
max_pseudo_gt = 50
window_stride = 5
partition = "lower-upper"
checkpoint_every = 50
val_windows = 200
val_samples = 50

[model]
hidden = 256
latent = 64
residual_blocks = 4
"#;

// Small enough to train twice inside a few minutes on one core.
const DESK_SYNTH: &str = r#"
k = 3
lambda_nf = 0.01
lambda_a = 100.0
lambda_d = [8.0, 25.0]
lambda_r = 2.0
lambda_mm = 1.0
lambda_past = 100.0
lambda_limb = 500.0
alpha = [20.0, 60.0]
batch_size = 8
epochs = 40
samples_per_epoch = 200
lr = 1e-3
seed = 0
h = 10
t = 30
m = 10
pseudo_gt_threshold = 0.5
max_pseudo_gt = 10
window_stride = 5
partition = "lower-upper"
checkpoint_every = 10
val_windows = 16
val_samples = 10

[model]
hidden = 32
latent = 8
residual_blocks = 4
"#;

/// Every setting of a generator training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Samples per part and tree level.
    pub k: usize,
    pub lambda_nf: f64,
    pub lambda_a: f64,
    /// Diversity weight per part.
    pub lambda_d: Vec<f64>,
    pub lambda_r: f64,
    pub lambda_mm: f64,
    pub lambda_past: f64,
    pub lambda_limb: f64,
    /// Diversity normalizer per part, in L1 meters.
    pub alpha: Vec<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
    pub h: usize,
    pub t: usize,
    pub m: usize,
    /// Last-pose distance (meters) under which windows share futures.
    pub pseudo_gt_threshold: f64,
    /// Pseudo ground truths kept per training window.
    pub max_pseudo_gt: usize,
    pub window_stride: usize,
    pub partition: PartitionPreset,
    /// Epochs between checkpoints; 0 writes only the final model.
    pub checkpoint_every: usize,
    /// Validation windows scored after each epoch; 0 disables validation.
    pub val_windows: usize,
    pub val_samples: usize,
    pub model: ModelConfig,
}

pub const PRESETS: [&str; 3] = ["h36m-paper", "humaneva-paper", "desk-synth"];

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "h36m-paper" => Ok(H36M_PAPER),
        "humaneva-paper" => Ok(HUMANEVA_PAPER),
        "desk-synth" => Ok(DESK_SYNTH),
        _ => Err(Error::Config(format!(
            "unknown preset `{name}`, expected one of {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(preset_text(name)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a run config. A top-level `preset = "<name>"` (default
    /// `desk-synth`) supplies every field the text leaves out.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut over: toml::Value = toml::from_str(text)?;
        let name = match over.as_table_mut().and_then(|t| t.remove("preset")) {
            Some(toml::Value::String(s)) => s,
            Some(other) => {
                return Err(Error::Config(format!("`preset` must be a string, got {other}")))
            }
            None => "desk-synth".to_string(),
        };
        let mut base: toml::Value = toml::from_str(preset_text(&name)?)?;
        merge(&mut base, over);
        let cfg: Self = base.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            nf: self.lambda_nf,
            angle: self.lambda_a,
            diversity: self.lambda_d.clone(),
            recon: self.lambda_r,
            multimodal: self.lambda_mm,
            past: self.lambda_past,
            limb: self.lambda_limb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda_nf", self.lambda_nf),
            ("lambda_a", self.lambda_a),
            ("lambda_r", self.lambda_r),
            ("lambda_mm", self.lambda_mm),
            ("lambda_past", self.lambda_past),
            ("lambda_limb", self.lambda_limb),
        ];
        for (name, v) in scalars.into_iter().chain(self.lambda_d.iter().map(|&v| ("lambda_d", v))) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite weight ≥ 0, got {v}")));
            }
        }
        if self.lambda_d.len() != self.alpha.len() {
            return Err(Error::Config(format!(
                "{} diversity weights but {} normalizers",
                self.lambda_d.len(),
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config("every alpha must be positive".into()));
        }
        if self.k == 0 || (self.k < 2 && self.lambda_d.iter().any(|&w| w > 0.0)) {
            return Err(Error::Config(format!(
                "K = {} but diversity losses need K ≥ 2",
                self.k
            )));
        }
        if self.batch_size == 0 || self.window_stride == 0 || self.h == 0 || self.t == 0 {
            return Err(Error::Config(
                "batch_size, window_stride, h and t must be positive".into(),
            ));
        }
        if self.m == 0 || self.m > self.h + self.t {
            return Err(Error::Config(format!("m must lie in 1..={}", self.h + self.t)));
        }
        if !(self.lr > 0.0) || !(self.pseudo_gt_threshold > 0.0) {
            return Err(Error::Config("lr and pseudo_gt_threshold must be positive".into()));
        }
        if self.val_windows > 0 && self.val_samples < 2 {
            return Err(Error::Config("validation APD needs val_samples ≥ 2".into()));
        }
        Ok(())
    }
}

/// Multiplicative learning-rate factor of (0-based) epoch `e`.
pub fn lr_decay(epoch: usize) -> f64 {
    1.0 - (epoch as f64 - 100.0).max(0.0) / 400.0
}

/// Weights of every loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossWeights {
    pub nf: f64,
    pub angle: f64,
    pub diversity: Vec<f64>,
    pub recon: f64,
    pub multimodal: f64,
    pub past: f64,
    pub limb: f64,
}

/// One value (graph handle or number) per loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub nf: T,
    pub angle: T,
    pub diversity: Vec<T>,
    pub recon: T,
    pub multimodal: T,
    pub past: T,
    pub limb: T,
}

impl<T: Copy> LossTerms<T> {
    /// `(name, value)` pairs in logging order.
    pub fn named(&self) -> Vec<(String, T)> {
        let mut out = vec![("nf".to_string(), self.nf), ("angle".to_string(), self.angle)];
        out.extend(
            self.diversity
                .iter()
                .enumerate()
                .map(|(i, &v)| (format!("div{}", i + 1), v)),
        );
        out.extend([
            ("recon".to_string(), self.recon),
            ("multimodal".to_string(), self.multimodal),
            ("past".to_string(), self.past),
            ("limb".to_string(), self.limb),
        ]);
        out
    }
}

impl LossTerms<Var> {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        let v = |x: Var| g.scalar(x);
        LossTerms {
            nf: v(self.nf),
            angle: v(self.angle),
            diversity: self.diversity.iter().map(|&d| v(d)).collect(),
            recon: v(self.recon),
            multimodal: v(self.multimodal),
            past: v(self.past),
            limb: v(self.limb),
        }
    }
}

/// `min_j ‖pred_j − gt‖²` over the rows of `preds` (`S × X`) against a
/// `1 × X` ground truth. The gradient reaches the minimizing row only.
pub fn loss_r(g: &mut Graph, preds: Var, gt: &Tensor) -> Result<Var> {
    let d = g.pairwise_sq_dist(preds, gt.clone())?;
    g.min_rows(d)
}

/// Mean over pseudo ground truths (`P × X`) of the closest squared distance.
/// Without pseudo ground truths the term is 0.
pub fn loss_mm(g: &mut Graph, preds: Var, pseudo_gts: &Tensor) -> Result<Var> {
    if pseudo_gts.rows() == 0 {
        warn!("no pseudo ground truth for a window; multimodal loss is 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = g.pairwise_sq_dist(preds, pseudo_gts.clone())?;
    let best = g.min_rows(d)?;
    g.mean(best)
}

/// Mean of `exp(−‖a − b‖₁ / α)` over sibling pairs. Rows of `preds` come in
/// consecutive groups of `k` siblings; pairs never cross groups.
pub fn loss_d(g: &mut Graph, preds: Var, k: usize, alpha: f64) -> Result<Var> {
    let s = g.value(preds).rows();
    if k < 2 || s % k != 0 || s == 0 {
        return Err(Error::Contract(format!(
            "diversity loss needs groups of K ≥ 2 siblings, got {s} rows in groups of {k}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
    }
    let pairs = k * (k - 1) / 2;
    let mut diff = Tensor::zeros(pairs, k);
    let mut row = 0;
    for i in 0..k {
        for j in i + 1..k {
            diff.set(row, i, 1.0);
            diff.set(row, j, -1.0);
            row += 1;
        }
    }
    let diff = g.constant(diff);
    let d = g.block_matmul(diff, preds, s / k)?;
    let l1 = g.row_l1(d)?;
    let scaled = g.scale(l1, -1.0 / alpha);
    let e = g.exp(scaled);
    g.mean(e)
}

/// `‖past_hat − x‖²` summed over every frame and coordinate.
pub fn loss_past(g: &mut Graph, past_hat: Var, x: &Tensor) -> Result<Var> {
    let target = g.constant(x.clone());
    let d = g.sub(past_hat, target)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

/// Column indices of limb children and parents, three per limb.
fn limb_columns(skeleton: &Skeleton) -> (Vec<usize>, Vec<usize>) {
    let limbs = skeleton.limbs();
    let expand = |j: usize| [3 * j, 3 * j + 1, 3 * j + 2];
    (
        limbs.iter().flat_map(|&(c, _)| expand(c)).collect(),
        limbs.iter().flat_map(|&(_, p)| expand(p)).collect(),
    )
}

/// `Σ_t Σ_l (l̂_{t,l} − l_{t,l})²` for pose rows `frames` (`R × 3J`) against
/// reference lengths `R × L`.
pub fn loss_limb(g: &mut Graph, frames: Var, lengths: &Tensor, skeleton: &Skeleton) -> Result<Var> {
    let (child, parent) = limb_columns(skeleton);
    let c = g.gather_cols(frames, child)?;
    let p = g.gather_cols(frames, parent)?;
    let bones = g.sub(c, p)?;
    let norms = g.group_norms(bones, 3)?;
    let target = g.constant(lengths.clone());
    let d = g.sub(norms, target)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

/// Frozen pose prior and angle limits evaluated on generated frames.
#[derive(Clone, Debug)]
pub struct Priors {
    pub flow: FrozenFlow,
    pub angles: AngleGraphLoss,
}

impl Priors {
    pub fn new(flow: &FlowParams, table: &AngleTable, skeleton: &Skeleton) -> Result<Self> {
        table.check_skeleton(skeleton)?;
        Ok(Self {
            flow: flow.frozen(skeleton)?,
            angles: table.graph_loss(),
        })
    }
}

/// Everything one training window contributes to a batch.
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// `D × M` past coefficients.
    pub c_past: Tensor,
    /// `H × D` observed frames.
    pub past: Tensor,
    /// `1 × (T·D)` ground-truth future.
    pub future: Tensor,
    /// `P × (T·D)` pseudo ground-truth futures.
    pub pseudo_gts: Tensor,
    /// Limb lengths of the last observed pose.
    pub lengths: Vec<f64>,
}

impl BatchItem {
    pub fn new(model: &Generator, w: &SampleWindow, pseudo: &[&SampleWindow]) -> Result<Self> {
        let td = w.future.len();
        let mut p = Vec::with_capacity(pseudo.len() * td);
        for o in pseudo {
            p.extend_from_slice(o.future.data());
        }
        Ok(Self {
            c_past: model.past_coeffs(&w.past)?,
            past: w.past.clone(),
            future: Tensor::matrix(1, td, w.future.data().to_vec()),
            pseudo_gts: Tensor::matrix(pseudo.len(), td, p),
            lengths: limb_lengths(w.last_past_pose(), model.skeleton()),
        })
    }
}

/// Standard-normal latents for a full `K`-ary tree over `windows` windows.
pub fn tree_latents(rng: &mut impl Rng, model: &Generator, windows: usize, k: usize) -> Vec<Tensor> {
    let z = model.config().latent;
    let mut s = windows;
    (0..model.partition().len())
        .map(|_| {
            s *= k;
            Tensor::matrix(s, z, (0..s * z).map(|_| rng.sample(StandardNormal)).collect())
        })
        .collect()
}

/// Every loss term for one batch, with a full `K`-ary tree below each window.
///
/// Reconstruction terms take the minimum over each window's `K^N` futures.
/// Prior, angle, past and limb terms average over every sampled future.
pub fn loss_terms(
    g: &mut Graph,
    model: &Generator,
    batch: &[BatchItem],
    latents: &[Tensor],
    k: usize,
    alpha: &[f64],
    priors: &Priors,
) -> Result<LossTerms<Var>> {
    let n = model.partition().len();
    if alpha.len() != n {
        return Err(Error::Config(format!(
            "{} diversity normalizers for {n} parts",
            alpha.len()
        )));
    }
    let basis = model.basis();
    let (h, t) = (basis.past_len(), basis.future_len());
    let f = h + t;
    let d = model.dim();
    let c_past: Vec<Tensor> = batch.iter().map(|b| b.c_past.clone()).collect();
    let roll = model.rollout(g, &c_past, &vec![k; n], latents)?;
    let s = roll.window_of.len();
    let frames = model.decode_full(g, roll.full, s)?;

    let past_rows: Vec<usize> = (0..s).flat_map(|i| (0..h).map(move |r| i * f + r)).collect();
    let future_rows: Vec<usize> = (0..s).flat_map(|i| (h..f).map(move |r| i * f + r)).collect();
    let past_hat = g.gather_rows(frames, past_rows)?;
    let future = g.gather_rows(frames, future_rows)?;

    let mut past_target = Vec::with_capacity(s * h * d);
    let mut lengths = Vec::new();
    for &w in &roll.window_of {
        past_target.extend_from_slice(batch[w].past.data());
        for _ in 0..t {
            lengths.extend_from_slice(&batch[w].lengths);
        }
    }
    let past_sum = loss_past(g, past_hat, &Tensor::matrix(s * h, d, past_target))?;
    let past = g.scale(past_sum, 1.0 / s as f64);
    let limb_count = model.skeleton().limb_count();
    let lengths = Tensor::matrix(s * t, limb_count, lengths);
    let limb_sum = loss_limb(g, future, &lengths, model.skeleton())?;
    let limb = g.scale(limb_sum, 1.0 / s as f64);
    let nf = priors.flow.nf_loss(g, future)?;
    let angle = priors.angles.loss(g, future)?;

    let flat = g.reshape(future, s, t * d)?;
    let per_window = s / batch.len();
    let mut recon = Vec::with_capacity(batch.len());
    let mut multimodal = Vec::with_capacity(batch.len());
    for (b, item) in batch.iter().enumerate() {
        let preds = g.slice(flat, 0, b * per_window, (b + 1) * per_window)?;
        let r = loss_r(g, preds, &item.future)?;
        recon.push(g.reshape(r, 1, 1)?);
        let mm = loss_mm(g, preds, &item.pseudo_gts)?;
        multimodal.push(g.reshape(mm, 1, 1)?);
    }
    let recon = g.concat(&recon, 0)?;
    let recon = g.mean(recon)?;
    let multimodal = g.concat(&multimodal, 0)?;
    let multimodal = g.mean(multimodal)?;

    let mut diversity = Vec::with_capacity(n);
    for (i, &a) in alpha.iter().enumerate() {
        if k < 2 {
            diversity.push(g.constant(Tensor::scalar(0.0)));
            continue;
        }
        let part = model.decode_part_future(g, roll.own_coeffs[i], i)?;
        diversity.push(loss_d(g, part, k, a)?);
    }
    Ok(LossTerms {
        nf,
        angle,
        diversity,
        recon,
        multimodal,
        past,
        limb,
    })
}

/// `Σ λ·L` over every term.
pub fn weighted_total(g: &mut Graph, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    if w.diversity.len() != terms.diversity.len() {
        return Err(Error::Config(format!(
            "{} diversity weights for {} parts",
            w.diversity.len(),
            terms.diversity.len()
        )));
    }
    let mut parts = vec![
        g.scale(terms.nf, w.nf),
        g.scale(terms.angle, w.angle),
        g.scale(terms.recon, w.recon),
        g.scale(terms.multimodal, w.multimodal),
        g.scale(terms.past, w.past),
        g.scale(terms.limb, w.limb),
    ];
    for (&v, &lambda) in terms.diversity.iter().zip(&w.diversity) {
        parts.push(g.scale(v, lambda));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// The weighted training objective for one batch.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    model: &Generator,
    batch: &[BatchItem],
    latents: &[Tensor],
    k: usize,
    alpha: &[f64],
    weights: &LossWeights,
    priors: &Priors,
) -> Result<(Var, LossTerms<Var>)> {
    let terms = loss_terms(g, model, batch, latents, k, alpha, priors)?;
    let total = weighted_total(g, &terms, weights)?;
    Ok((total, terms))
}

/// Windows of every sequence, tagged with their sequence index.
pub fn windows_of(seqs: &[MotionSequence], h: usize, t: usize, stride: usize) -> Result<Vec<SampleWindow>> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        out.extend(window(s, i, h, t, stride)?);
    }
    Ok(out)
}

/// Mean loss terms and validation scores of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms<f64>,
    pub total: f64,
    pub val_apd: Option<f64>,
    pub val_ade: Option<f64>,
}

impl EpochLog {
    pub fn csv_header(parts: usize) -> String {
        let mut cols = vec!["epoch".to_string(), "lr".to_string(), "total".to_string()];
        cols.extend(["nf", "angle"].map(String::from));
        cols.extend((1..=parts).map(|i| format!("div{i}")));
        cols.extend(["recon", "multimodal", "past", "limb", "val_apd", "val_ade"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            format!("{:e}", self.lr),
            format!("{:.9e}", self.total),
        ];
        cols.extend(self.terms.named().into_iter().map(|(_, v)| format!("{v:.9e}")));
        for v in [self.val_apd, self.val_ade] {
            cols.push(v.map(|v| format!("{v:.9e}")).unwrap_or_default());
        }
        cols.join(",")
    }
}

/// Trained model and its per-epoch log.
pub struct TrainOutcome {
    pub model: Generator,
    pub log: Vec<EpochLog>,
}

/// File names written into the output directory of [`train`].
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const GENERATOR_FILE: &str = "generator.json";

/// Optimizes a fresh generator with Adam and the per-epoch decay.
///
/// With `out` set, appends one CSV row per epoch to [`METRICS_FILE`],
/// refreshes [`CHECKPOINT_FILE`] every `checkpoint_every` epochs and writes
/// [`GENERATOR_FILE`] at the end. A non-finite term or a loss above
/// [`DIVERGENCE_LIMIT`] aborts without touching the last checkpoint.
pub fn train(
    cfg: &TrainConfig,
    skeleton: &Skeleton,
    train_seqs: &[MotionSequence],
    val_seqs: &[MotionSequence],
    flow: &FlowParams,
    table: &AngleTable,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let partition = PartitionSpec::preset(cfg.partition, skeleton)?;
    if partition.len() != cfg.lambda_d.len() {
        return Err(Error::Config(format!(
            "partition has {} parts but {} diversity weights are configured",
            partition.len(),
            cfg.lambda_d.len()
        )));
    }
    let priors = Priors::new(flow, table, skeleton)?;
    let basis = build_basis(cfg.h, cfg.t, cfg.m)?;
    let mut model = Generator::new(skeleton, partition, basis, cfg.model, cfg.seed)?;

    let windows = windows_of(train_seqs, cfg.h, cfg.t, cfg.window_stride)?;
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "no training sequence has the {} frames one window needs",
            cfg.h + cfg.t
        )));
    }
    let pseudo = mine_pseudo_gt(&windows, cfg.pseudo_gt_threshold)?;
    let mean_p = pseudo.matches.iter().map(Vec::len).sum::<usize>() as f64 / windows.len() as f64;
    info!(
        "{} training windows, {mean_p:.1} pseudo ground truths per window before capping at {}",
        windows.len(),
        cfg.max_pseudo_gt
    );
    let val = validation_set(cfg, val_seqs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let weights = cfg.weights();
    let mut adam = Adam::new(model.store());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", EpochLog::csv_header(model.partition().len()))?;
            Some(f)
        }
        None => None,
    };
    let steps = cfg.samples_per_epoch.div_ceil(cfg.batch_size).max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * lr_decay(epoch);
        let mut sums: Option<LossTerms<f64>> = None;
        let mut total_sum = 0.0;
        for step in 0..steps {
            let batch_n = cfg.batch_size.min(cfg.samples_per_epoch - step * cfg.batch_size).max(1);
            let picks: Vec<usize> = (0..batch_n).map(|_| rng.random_range(0..windows.len())).collect();
            let batch = picks
                .iter()
                .map(|&i| {
                    let others = pick_pseudo(&mut rng, pseudo.of(i), cfg.max_pseudo_gt);
                    let refs: Vec<&SampleWindow> = others.iter().map(|&j| &windows[j]).collect();
                    BatchItem::new(&model, &windows[i], &refs)
                })
                .collect::<Result<Vec<_>>>()?;
            let latents = tree_latents(&mut rng, &model, batch.len(), cfg.k);
            let mut g = Graph::new();
            let (total, terms) =
                total_loss(&mut g, &model, &batch, &latents, cfg.k, &cfg.alpha, &weights, &priors)?;
            let values = terms.values(&g);
            let total_v = g.scalar(total);
            check_step(&values, total_v)
                .map_err(|e| Error::Training(format!("epoch {epoch}, step {step}: {e}")))?;
            debug!(
                "epoch {epoch} step {step}: total {total_v:.5} {}",
                values
                    .named()
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.5}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            model.store_mut().zero_grad();
            g.backward(total, model.store_mut())?;
            adam.step(model.store_mut(), lr);
            total_sum += total_v;
            sums = Some(match sums {
                None => values,
                Some(acc) => add_terms(acc, &values),
            });
        }
        let terms = scale_terms(sums.expect("at least one step per epoch"), 1.0 / steps as f64);
        let (val_apd, val_ade) = match &val {
            Some((ws, ps)) => {
                let cases = model_cases(&model, ws, ps, cfg.val_samples, cfg.seed)?;
                let r = evaluate(&cases, &[])?;
                (Some(r.apd), Some(r.ade))
            }
            None => (None, None),
        };
        let entry = EpochLog {
            epoch,
            lr,
            terms,
            total: total_sum / steps as f64,
            val_apd,
            val_ade,
        };
        info!(
            "epoch {epoch}: loss {:.4}, recon {:.4}, val APD {:?}, val ADE {:?}",
            entry.total, entry.terms.recon, entry.val_apd, entry.val_ade
        );
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", entry.csv_row())?;
            f.flush()?;
        }
        log.push(entry);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                model.save(dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    if let Some(dir) = out {
        model.save(dir.join(GENERATOR_FILE))?;
    }
    Ok(TrainOutcome { model, log })
}

/// Names the first non-finite term, or reports divergence of the total.
pub fn check_step(values: &LossTerms<f64>, total: f64) -> std::result::Result<(), String> {
    for (name, v) in values.named() {
        if !v.is_finite() {
            return Err(format!("loss term `{name}` became {v}"));
        }
    }
    if !(total <= DIVERGENCE_LIMIT) {
        return Err(format!("loss diverged to {total}"));
    }
    Ok(())
}

fn validation_set(
    cfg: &TrainConfig,
    val_seqs: &[MotionSequence],
) -> Result<Option<(Vec<SampleWindow>, PseudoGtSet)>> {
    if cfg.val_windows == 0 {
        return Ok(None);
    }
    let all = windows_of(val_seqs, cfg.h, cfg.t, cfg.window_stride)?;
    if all.is_empty() {
        warn!("no validation windows; skipping validation");
        return Ok(None);
    }
    let n = cfg.val_windows.min(all.len());
    let ws: Vec<SampleWindow> = (0..n).map(|i| all[i * all.len() / n].clone()).collect();
    let ps = mine_pseudo_gt(&ws, cfg.pseudo_gt_threshold)?;
    Ok(Some((ws, ps)))
}

/// At most `cap` of `matches`, chosen at random when there are more.
fn pick_pseudo(rng: &mut impl Rng, matches: &[usize], cap: usize) -> Vec<usize> {
    if matches.len() <= cap {
        return matches.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, matches.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| matches[i]).collect()
}

fn add_terms(a: LossTerms<f64>, b: &LossTerms<f64>) -> LossTerms<f64> {
    LossTerms {
        nf: a.nf + b.nf,
        angle: a.angle + b.angle,
        diversity: a.diversity.iter().zip(&b.diversity).map(|(x, y)| x + y).collect(),
        recon: a.recon + b.recon,
        multimodal: a.multimodal + b.multimodal,
        past: a.past + b.past,
        limb: a.limb + b.limb,
    }
}

fn scale_terms(a: LossTerms<f64>, s: f64) -> LossTerms<f64> {
    LossTerms {
        nf: a.nf * s,
        angle: a.angle * s,
        diversity: a.diversity.iter().map(|x| x * s).collect(),
        recon: a.recon * s,
        multimodal: a.multimodal * s,
        past: a.past * s,
        limb: a.limb * s,
    }
}

#[cfg(test)]
mod tests;
