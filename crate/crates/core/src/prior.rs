//! Normalizing-flow density over limb directions.
//!
//! Each of the three layers maps a row vector `f` to `σ(f·Q·R + b)`, where `Q`
//! is a product of Householder reflections, `R` is upper triangular with
//! `diag(R) = exp(r_diag_raw)`, and `σ` is a parametric ReLU with slope
//! `exp(slope_raw)`. The log-determinant of the Jacobian is therefore
//! `Σ r_diag_raw + slope_raw · #{pre-activations ≤ 0}` per layer.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Adam, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::skeleton::Skeleton;

pub const FLOW_LAYERS: usize = 3;
/// Limb lengths are clamped to this value before normalization in losses.
pub const LIMB_EPS: f64 = 1e-6;
const MIN_LIMB: f64 = 1e-8;
const HOUSEHOLDER_EPS: f64 = 1e-12;
const CHECKPOINT_VERSION: u32 = 1;

/// Unit parent→child direction of every limb, concatenated in joint order.
pub fn to_limb_directions(pose: &[f64], skeleton: &Skeleton) -> Result<Vec<f64>> {
    if pose.len() != skeleton.dim() {
        return Err(Error::dim(
            "to_limb_directions",
            format!("{} coordinates for {} joints", pose.len(), skeleton.joint_count()),
        ));
    }
    let mut out = Vec::with_capacity(3 * skeleton.limb_count());
    for (c, p) in skeleton.limbs() {
        let d: [f64; 3] = [0, 1, 2].map(|k| pose[3 * c + k] - pose[3 * p + k]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !(n > MIN_LIMB) {
            return Err(Error::Data(format!(
                "limb ending at joint `{}` has length {n:e}",
                skeleton.names()[c]
            )));
        }
        out.extend(d.map(|v| v / n));
    }
    Ok(out)
}

/// Limb directions of every frame, one row per frame.
pub fn limb_direction_rows(frames: &Tensor, skeleton: &Skeleton) -> Result<Tensor> {
    let rows = (0..frames.rows())
        .map(|f| to_limb_directions(frames.row(f), skeleton))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Parameters of one invertible layer over `n`-dimensional rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowLayerParams {
    /// Row `k` is the `k`-th reflection vector; `Q = H_1·H_2·…·H_n`.
    pub householder: Tensor,
    /// Only the strictly upper-triangular entries are used.
    pub r_upper: Tensor,
    pub r_diag_raw: Tensor,
    pub bias: Tensor,
    pub slope_raw: f64,
}

impl FlowLayerParams {
    pub fn identity(n: usize) -> Self {
        Self {
            householder: Tensor::zeros(n, n),
            r_upper: Tensor::zeros(n, n),
            r_diag_raw: Tensor::zeros(1, n),
            bias: Tensor::zeros(1, n),
            slope_raw: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.cols()
    }

    /// Orthogonal factor. Zero vectors contribute identity reflections.
    pub fn q(&self) -> Tensor {
        let n = self.dim();
        let mut q = Tensor::eye(n);
        for k in 0..n {
            let v = self.householder.row(k);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= HOUSEHOLDER_EPS {
                continue;
            }
            // q ← q·(I − 2 v̂ v̂ᵀ)
            for r in 0..n {
                let row = q.row_mut(r);
                let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
                for (x, vi) in row.iter_mut().zip(v) {
                    *x -= 2.0 * dot * vi / norm;
                }
            }
        }
        q
    }

    pub fn r(&self) -> Tensor {
        let n = self.dim();
        let mut r = Tensor::zeros(n, n);
        for i in 0..n {
            r.set(i, i, self.r_diag_raw.data()[i].exp());
            for j in i + 1..n {
                r.set(i, j, self.r_upper.get(i, j));
            }
        }
        r
    }

    pub fn slope(&self) -> f64 {
        self.slope_raw.exp()
    }

    fn check(&self, n: usize) -> Result<()> {
        let ok = self.householder.shape() == [n, n]
            && self.r_upper.shape() == [n, n]
            && self.r_diag_raw.shape() == [1, n]
            && self.bias.shape() == [1, n]
            && self.slope_raw.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "flow layer shapes do not match dimension {n}"
            )))
        }
    }
}

/// A three-layer flow with its precomputed dense weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    layers: Vec<FlowLayerParams>,
    dense: Vec<DenseLayer>,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer {
    q: Tensor,
    r: Tensor,
    w: Tensor,
    bias: Tensor,
    slope: f64,
    slope_raw: f64,
    diag_log_sum: f64,
}

impl DenseLayer {
    fn new(p: &FlowLayerParams) -> Self {
        let q = p.q();
        let r = p.r();
        let w = q.matmul(&r).expect("square factors");
        Self {
            q,
            r,
            w,
            bias: p.bias.clone(),
            slope: p.slope(),
            slope_raw: p.slope_raw,
            diag_log_sum: p.r_diag_raw.sum(),
        }
    }
}

impl FlowParams {
    pub fn new(layers: Vec<FlowLayerParams>) -> Result<Self> {
        if layers.len() != FLOW_LAYERS {
            return Err(Error::Config(format!(
                "flow needs {FLOW_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        let n = layers[0].dim();
        for l in &layers {
            l.check(n)?;
        }
        let dense = layers.iter().map(DenseLayer::new).collect();
        Ok(Self { layers, dense })
    }

    /// `Q = R = I`, `b = 0`, slope 1: the identity map.
    pub fn identity(n: usize) -> Self {
        Self::new(vec![FlowLayerParams::identity(n); FLOW_LAYERS]).expect("consistent shapes")
    }

    /// Random unit Householder vectors, everything else at identity.
    pub fn init(n: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..FLOW_LAYERS)
            .map(|_| {
                let mut l = FlowLayerParams::identity(n);
                for k in 0..n {
                    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for (dst, x) in l.householder.row_mut(k).iter_mut().zip(&v) {
                        *dst = x / norm;
                    }
                }
                l
            })
            .collect();
        Self::new(layers).expect("consistent shapes")
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn layers(&self) -> &[FlowLayerParams] {
        &self.layers
    }

    /// Reconstructed orthogonal factor of each layer.
    pub fn q_factors(&self) -> impl Iterator<Item = &Tensor> {
        self.dense.iter().map(|d| &d.q)
    }

    /// Maps rows of `x` through the flow; returns outputs and per-row log-det.
    pub fn forward_rows(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if x.cols() != self.dim() {
            return Err(Error::dim(
                "flow_forward",
                format!("{} columns into a {}-dim flow", x.cols(), self.dim()),
            ));
        }
        let mut h = x.clone();
        let mut log_det = vec![0.0; x.rows()];
        for layer in &self.dense {
            let mut pre = h.matmul(&layer.w)?;
            for (r, ld) in log_det.iter_mut().enumerate() {
                *ld += layer.diag_log_sum;
                for (v, b) in pre.row_mut(r).iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if *v <= 0.0 {
                        *v *= layer.slope;
                        *ld += layer.slope_raw;
                    }
                }
            }
            h = pre;
        }
        Ok((h, log_det))
    }

    /// Inverts the flow row by row.
    pub fn inverse_rows(&self, h: &Tensor) -> Result<Tensor> {
        if h.cols() != self.dim() {
            return Err(Error::dim(
                "flow_inverse",
                format!("{} columns into a {}-dim flow", h.cols(), self.dim()),
            ));
        }
        let n = self.dim();
        let mut x = h.clone();
        for layer in self.dense.iter().rev() {
            let mut g = vec![0.0; n];
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    if *v <= 0.0 {
                        *v /= layer.slope;
                    }
                    *v -= b;
                }
                // g·R = u with R upper triangular: solve column by column.
                for j in 0..n {
                    let mut acc = row[j];
                    for (i, gi) in g.iter().enumerate().take(j) {
                        acc -= gi * layer.r.get(i, j);
                    }
                    g[j] = acc / layer.r.get(j, j);
                }
                // row = g·Qᵀ
                for (i, out) in row.iter_mut().enumerate() {
                    *out = layer.q.row(i).iter().zip(&g).map(|(q, gv)| q * gv).sum();
                }
            }
        }
        Ok(x)
    }

    /// Log-density of each row of `x` under the flow.
    pub fn log_likelihood_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (h, log_det) = self.forward_rows(x)?;
        let c = -0.5 * self.dim() as f64 * (2.0 * PI).ln();
        Ok((0..h.rows())
            .map(|r| c - 0.5 * h.row(r).iter().map(|v| v * v).sum::<f64>() + log_det[r])
            .collect())
    }

    pub fn mean_nll(&self, x: &Tensor) -> Result<f64> {
        let ll = self.log_likelihood_rows(x)?;
        Ok(-ll.iter().sum::<f64>() / ll.len().max(1) as f64)
    }

    /// Constants for the generator-side NLL loss.
    pub fn frozen(&self, skeleton: &Skeleton) -> Result<FrozenFlow> {
        if self.dim() != 3 * skeleton.limb_count() {
            return Err(Error::Checkpoint(format!(
                "prior dimension {} does not fit {} limbs",
                self.dim(),
                skeleton.limb_count()
            )));
        }
        let limbs = skeleton.limbs();
        Ok(FrozenFlow {
            children: limbs
                .iter()
                .flat_map(|&(c, _)| [3 * c, 3 * c + 1, 3 * c + 2])
                .collect(),
            parents: limbs
                .iter()
                .flat_map(|&(_, p)| [3 * p, 3 * p + 1, 3 * p + 2])
                .collect(),
            flow: self.clone(),
        })
    }
}

pub fn flow_forward(d: &[f64], params: &FlowParams) -> Result<(Vec<f64>, f64)> {
    let (h, ld) = params.forward_rows(&Tensor::row_vector(d.to_vec()))?;
    Ok((h.into_data(), ld[0]))
}

pub fn flow_inverse(h: &[f64], params: &FlowParams) -> Result<Vec<f64>> {
    Ok(params
        .inverse_rows(&Tensor::row_vector(h.to_vec()))?
        .into_data())
}

/// `log N(h | 0, I) + log|det ∂h/∂d|`.
pub fn log_likelihood(d: &[f64], params: &FlowParams) -> Result<f64> {
    Ok(params.log_likelihood_rows(&Tensor::row_vector(d.to_vec()))?[0])
}

/// Closed-form mean NLL of rows under a standard Gaussian.
pub fn gaussian_nll(x: &Tensor) -> f64 {
    let c = 0.5 * x.cols() as f64 * (2.0 * PI).ln();
    let sq: f64 = x.data().iter().map(|v| v * v).sum();
    c + 0.5 * sq / x.rows().max(1) as f64
}

/// A trained flow frozen for use inside generator losses.
#[derive(Clone, Debug)]
pub struct FrozenFlow {
    children: Vec<usize>,
    parents: Vec<usize>,
    flow: FlowParams,
}

impl FrozenFlow {
    pub fn flow(&self) -> &FlowParams {
        &self.flow
    }

    /// Mean over rows of `frames` (one pose per row) of the negative
    /// log-likelihood of the pose's limb directions. Limb lengths are clamped
    /// at [`LIMB_EPS`]. The activation pattern is treated as locally constant,
    /// so the log-det term carries no gradient.
    pub fn nf_loss(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let rows = g.value(frames).rows();
        let child = g.gather_cols(frames, self.children.clone())?;
        let parent = g.gather_cols(frames, self.parents.clone())?;
        let diff = g.sub(child, parent)?;
        let mut h = g.normalize_groups(diff, 3, LIMB_EPS)?;
        let mut log_det = 0.0;
        for layer in &self.flow.dense {
            let w = g.constant(layer.w.clone());
            let b = g.constant(layer.bias.clone());
            let lin = g.matmul(h, w)?;
            let pre = g.add_row(lin, b)?;
            let negatives = g.value(pre).data().iter().filter(|&&v| v <= 0.0).count();
            log_det += rows as f64 * layer.diag_log_sum + layer.slope_raw * negatives as f64;
            let slope = g.constant(Tensor::scalar(layer.slope));
            h = g.prelu(pre, slope)?;
        }
        let sq = g.square(h);
        let total = g.sum(sq);
        let half = g.scale(total, 0.5 / rows as f64);
        let c = 0.5 * self.flow.dim() as f64 * (2.0 * PI).ln() - log_det / rows as f64;
        Ok(g.add_scalar(half, c))
    }
}

/// Scalar reference for [`FrozenFlow::nf_loss`] without clamping.
pub fn nf_loss_value(frames: &Tensor, skeleton: &Skeleton, flow: &FlowParams) -> Result<f64> {
    let d = limb_direction_rows(frames, skeleton)?;
    flow.mean_nll(&d)
}

#[derive(Clone, Copy)]
struct LayerIds {
    householder: ParamId,
    r_upper: ParamId,
    r_diag_raw: ParamId,
    bias: ParamId,
    slope_raw: ParamId,
}

fn register(store: &mut ParamStore, flow: &FlowParams) -> Vec<LayerIds> {
    flow.layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerIds {
            householder: store.add(format!("flow{i}.householder"), l.householder.clone()),
            r_upper: store.add(format!("flow{i}.r_upper"), l.r_upper.clone()),
            r_diag_raw: store.add(format!("flow{i}.r_diag_raw"), l.r_diag_raw.clone()),
            bias: store.add(format!("flow{i}.bias"), l.bias.clone()),
            slope_raw: store.add(format!("flow{i}.slope_raw"), Tensor::scalar(l.slope_raw)),
        })
        .collect()
}

fn extract(store: &ParamStore, ids: &[LayerIds]) -> Result<FlowParams> {
    FlowParams::new(
        ids.iter()
            .map(|l| FlowLayerParams {
                householder: store.value(l.householder).clone(),
                r_upper: store.value(l.r_upper).clone(),
                r_diag_raw: store.value(l.r_diag_raw).clone(),
                bias: store.value(l.bias).clone(),
                slope_raw: store.value(l.slope_raw).item(),
            })
            .collect(),
    )
}

/// Mean NLL of a batch, differentiable in the flow parameters.
fn nll_graph(g: &mut Graph, store: &ParamStore, ids: &[LayerIds], batch: &Tensor) -> Result<Var> {
    let (b, n) = (batch.rows(), batch.cols());
    let mut upper_mask = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            upper_mask.set(i, j, 1.0);
        }
    }
    let mask = g.constant(upper_mask);
    let eye = g.constant(Tensor::eye(n));
    let ones = g.constant(Tensor::full(n, 1, 1.0));
    let mut h = g.constant(batch.clone());
    let mut log_det: Option<Var> = None;
    for l in ids {
        let v = g.param(store, l.householder);
        let v = g.normalize_groups(v, n, HOUSEHOLDER_EPS)?;
        for k in 0..n {
            let vk = g.slice(v, 0, k, k + 1)?;
            let vkt = g.transpose(vk)?;
            let proj = g.matmul(h, vkt)?;
            let outer = g.matmul(proj, vk)?;
            let twice = g.scale(outer, 2.0);
            h = g.sub(h, twice)?;
        }
        let ru = g.param(store, l.r_upper);
        let ru = g.mul(ru, mask)?;
        let raw = g.param(store, l.r_diag_raw);
        let diag = g.exp(raw);
        let spread = g.matmul(ones, diag)?;
        let diag = g.mul(spread, eye)?;
        let r = g.add(ru, diag)?;
        let lin = g.matmul(h, r)?;
        let bias = g.param(store, l.bias);
        let pre = g.add_row(lin, bias)?;
        let negatives = g.value(pre).data().iter().filter(|&&v| v <= 0.0).count() as f64;
        let slope_raw = g.param(store, l.slope_raw);
        let slope = g.exp(slope_raw);
        h = g.prelu(pre, slope)?;

        let diag_sum = g.sum(raw);
        let diag_part = g.scale(diag_sum, b as f64);
        let slope_part = g.scale(slope_raw, negatives);
        let slope_part = g.reshape(slope_part, 1, 1)?;
        let diag_part = g.reshape(diag_part, 1, 1)?;
        let layer_ld = g.add(diag_part, slope_part)?;
        log_det = Some(match log_det {
            None => layer_ld,
            Some(acc) => g.add(acc, layer_ld)?,
        });
    }
    let sq = g.square(h);
    let sq = g.sum(sq);
    let half = g.scale(sq, 0.5);
    let half = g.reshape(half, 1, 1)?;
    let log_det = log_det.expect("at least one layer");
    let nll = g.sub(half, log_det)?;
    let nll = g.sum(nll);
    let mean = g.scale(nll, 1.0 / b as f64);
    Ok(g.add_scalar(mean, 0.5 * n as f64 * (2.0 * PI).ln()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Maximum-likelihood training with Adam. `val` is scored before the first
/// update (epoch 0) and after every epoch.
pub fn train_prior(
    train: &Tensor,
    val: &Tensor,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(FlowParams, Vec<PriorEpoch>)> {
    if train.rows() == 0 || val.rows() == 0 {
        return Err(Error::Data("prior training needs non-empty train and validation sets".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("prior batch_size and lr must be positive".into()));
    }
    let n = train.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = FlowParams::init(n, &mut rng);
    let mut store = ParamStore::new();
    let ids = register(&mut store, &init);
    let mut adam = Adam::new(&store);
    let mut curve = vec![PriorEpoch {
        epoch: 0,
        train_nll: init.mean_nll(train)?,
        val_nll: init.mean_nll(val)?,
    }];
    info!("prior epoch 0: val nll {:.4}", curve[0].val_nll);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<f64> = chunk.iter().flat_map(|&r| train.row(r).iter().copied()).collect();
            let batch = Tensor::matrix(chunk.len(), n, rows);
            let mut g = Graph::new();
            let loss = nll_graph(&mut g, &store, &ids, &batch)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "prior NLL became {value} in epoch {epoch}"
                )));
            }
            total += value * chunk.len() as f64;
            store.zero_grad();
            g.backward(loss, &mut store)?;
            adam.step(&mut store, cfg.lr);
        }
        let flow = extract(&store, &ids)?;
        let val_nll = flow.mean_nll(val)?;
        if !val_nll.is_finite() {
            return Err(Error::Training(format!(
                "prior validation NLL became {val_nll} in epoch {epoch}"
            )));
        }
        let rec = PriorEpoch {
            epoch,
            train_nll: total / train.rows() as f64,
            val_nll,
        };
        info!(
            "prior epoch {epoch}: train nll {:.4}, val nll {:.4}",
            rec.train_nll, rec.val_nll
        );
        curve.push(rec);
    }
    Ok((extract(&store, &ids)?, curve))
}

#[derive(Serialize, Deserialize)]
struct PriorCheckpoint {
    version: u32,
    dim: usize,
    skeleton: String,
    layers: Vec<FlowLayerParams>,
}

pub fn save_prior(path: impl AsRef<Path>, flow: &FlowParams, skeleton: &Skeleton) -> Result<()> {
    let ck = PriorCheckpoint {
        version: CHECKPOINT_VERSION,
        dim: flow.dim(),
        skeleton: skeleton.fingerprint(),
        layers: flow.layers.clone(),
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

/// Loads a prior and checks it against the active skeleton.
pub fn load_prior(path: impl AsRef<Path>, skeleton: &Skeleton) -> Result<FlowParams> {
    let ck: PriorCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported prior checkpoint version {}",
            ck.version
        )));
    }
    let expected = 3 * skeleton.limb_count();
    if ck.dim != expected {
        return Err(Error::Checkpoint(format!(
            "prior has dimension {}, skeleton needs {expected}",
            ck.dim
        )));
    }
    if ck.skeleton != skeleton.fingerprint() {
        return Err(Error::Checkpoint(
            "prior was trained for a different skeleton".into(),
        ));
    }
    let flow = FlowParams::new(ck.layers)?;
    if flow.dim() != ck.dim {
        return Err(Error::Checkpoint("prior layer shapes disagree with its header".into()));
    }
    Ok(flow)
}

/// Random parameters with every factor away from identity, for tests.
pub fn random_flow(n: usize, rng: &mut impl Rng, spread: f64) -> FlowParams {
    let layers = (0..FLOW_LAYERS)
        .map(|_| {
            let slope_raw = rng.random_range(-spread..spread);
            let mut sample = |rows: usize, cols: usize, s: f64| {
                Tensor::matrix(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.random_range(-s..s)).collect(),
                )
            };
            FlowLayerParams {
                householder: sample(n, n, 1.0),
                r_upper: sample(n, n, spread),
                r_diag_raw: sample(1, n, spread),
                bias: sample(1, n, spread),
                slope_raw,
            }
        })
        .collect();
    FlowParams::new(layers).expect("consistent shapes")
}
