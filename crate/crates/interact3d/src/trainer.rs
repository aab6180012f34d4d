//! Training loop.
//!
//! The loss and its gradient with respect to every network output are
//! computed by the core crate in `f64`; autograd only differentiates the
//! surrogate `sum(output * gradient)` back into the weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use interact3d_core::datamodel::{pad_queries, ImagePrediction, MovableClass, QueryPoint, SceneSample};
use interact3d_core::losses::{total_loss, ImageGrad, ImageTargets, LossConfig, LossInput, LossReport, LossTerm};
use interact3d_core::metrics::{evaluate, MetricReport};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Array, Checkpoint, CheckpointError};
use crate::io::{load_split, IoError};
use crate::network::{to_predictions, NetOutput, Network, NetworkConfig, NetworkError};

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LOSS_CURVE: &str = "loss_curve.csv";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("{0}")]
    Core(#[from] interact3d_core::Error),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: term `{term}` is {value}")]
    NonFinite { epoch: usize, step: usize, term: &'static str, value: f64 },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Epochs between `last` checkpoint writes; the final epoch always saves.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 60,
            batch_size: 2,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            checkpoint_interval: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be >= 0 and betas in [0, 1)");
        }
        if !(self.eps > 0.0) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("eps and grad_clip must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be at least 1");
        }
        Ok(())
    }
}

/// Everything a training run is configured by; the `train --config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.network.validate()?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| TrainError::File { path: path.to_path_buf(), source })?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of each term over the batches where it was active.
    pub terms: [Option<f64>; LossTerm::COUNT],
    pub total: f64,
    pub val_total: Option<f64>,
}

/// A sample with its network inputs and loss targets precomputed.
pub struct Prepared {
    pub sample: SceneSample,
    image: Tensor,
    points: Tensor,
    targets: ImageTargets,
    valid: Vec<bool>,
}

pub fn prepare(net: &Network, samples: Vec<SceneSample>) -> Result<Vec<Prepared>> {
    let (mw, mh) = net.config().out_size();
    samples
        .into_iter()
        .map(|sample| {
            let pts: Vec<QueryPoint> = sample.queries.iter().map(|q| q.point).collect();
            let (padded, valid) = pad_queries(&pts)?;
            Ok(Prepared {
                image: net.image_tensor(&sample.image)?,
                points: net.points_tensor(&padded)?,
                targets: ImageTargets::from_sample(&sample, mw, mh, mw, mh)?,
                valid,
                sample,
            })
        })
        .collect()
}

fn batch_inputs(items: &[&Prepared]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = items.iter().map(|p| &p.image).collect();
    let points: Vec<&Tensor> = items.iter().map(|p| &p.points).collect();
    Ok((Tensor::stack(&images, 0)?, Tensor::stack(&points, 0)?))
}

/// Predictions for every sample, with padded slots dropped.
pub fn predict_prepared(net: &Network, data: &[Prepared], batch_size: usize) -> Result<Vec<ImagePrediction>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&Prepared> = chunk.iter().collect();
        let (images, points) = batch_inputs(&items)?;
        let preds = to_predictions(&net.forward(&images, &points)?)?;
        for (mut p, item) in preds.into_iter().zip(chunk) {
            p.queries.truncate(item.sample.queries.len());
            out.push(p);
        }
    }
    Ok(out)
}

/// Gradient tensors shaped like [`NetOutput::parts`].
fn grad_tensors(out: &NetOutput, grads: &[ImageGrad]) -> Result<[Tensor; 9]> {
    let dev = out.movable.device();
    let per_query = |f: &dyn Fn(&interact3d_core::losses::QueryGrad) -> &[f64], like: &Tensor| -> Result<Tensor> {
        let data: Vec<f32> =
            grads.iter().flat_map(|g| g.queries.iter().flat_map(|q| f(q).iter().map(|&v| v as f32))).collect();
        Ok(Tensor::from_vec(data, like.shape(), dev)?)
    };
    let depth: Vec<f32> = grads.iter().flat_map(|g| g.depth.iter().map(|&v| v as f32)).collect();
    Ok([
        per_query(&|q| &q.movable, &out.movable)?,
        per_query(&|q| &q.rigidity, &out.rigidity)?,
        per_query(&|q| &q.articulation, &out.articulation)?,
        per_query(&|q| &q.action, &out.action)?,
        per_query(&|q| &q.bbox, &out.bbox)?,
        per_query(&|q| &q.axis, &out.axis)?,
        per_query(&|q| &q.mask, &out.mask)?,
        per_query(&|q| &q.affordance, &out.affordance)?,
        Tensor::from_vec(depth, out.depth.shape(), dev)?,
    ])
}

/// Loss, per-output gradients and the raw outputs for one batch.
pub fn batch_loss(
    net: &Network,
    items: &[&Prepared],
    loss_cfg: &LossConfig,
) -> Result<(LossReport, NetOutput, [Tensor; 9])> {
    let (images, points) = batch_inputs(items)?;
    let out = net.forward(&images, &points)?;
    let preds = to_predictions(&out)?;
    let inputs: Vec<LossInput<'_>> = preds
        .iter()
        .zip(items)
        .map(|(p, it)| LossInput { prediction: p, targets: &it.targets, valid: &it.valid })
        .collect();
    let (report, grads) = total_loss(&inputs, loss_cfg)?;
    let g = grad_tensors(&out, &grads)?;
    Ok((report, out, g))
}

/// Backpropagates the surrogate whose weight gradient equals the loss's.
pub fn backward(out: &NetOutput, grads: &[Tensor; 9]) -> Result<GradStore> {
    let mut surrogate: Option<Tensor> = None;
    for (o, g) in out.parts().into_iter().zip(grads) {
        let term = (o * g)?.sum_all()?;
        surrogate = Some(match surrogate {
            Some(s) => (s + term)?,
            None => term,
        });
    }
    Ok(surrogate.expect("nine parts").backward()?)
}

/// Decoupled weight decay Adam. Decay applies to matrices and kernels only,
/// not to biases, norms or embeddings of rank one.
#[derive(Debug, Clone)]
pub struct AdamW {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(net: &Network) -> Result<Self> {
        let zeros = |v: &candle_core::Var| v.as_tensor().zeros_like();
        let m = net.params().iter().map(|(k, v)| Ok((k.clone(), zeros(v)?))).collect::<Result<_>>()?;
        let v = net.params().iter().map(|(k, v)| Ok((k.clone(), zeros(v)?))).collect::<Result<_>>()?;
        Ok(Self { step: 0, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, net: &Network, grads: &GradStore, cfg: &TrainConfig) -> Result<f64> {
        let mut sq = 0f64;
        for (_, var) in net.params().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
        }
        let norm = sq.sqrt();
        let clip = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in net.params().iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * clip)?;
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            *m = ((&*m * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
            *v = ((&*v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let update = ((&*m / bc1)? / ((&*v / bc2)?.sqrt()? + cfg.eps)?)?;
            let decay = if var.rank() >= 2 { 1.0 - cfg.lr * cfg.weight_decay } else { 1.0 };
            let next = ((var.as_tensor() * decay)? - (update * cfg.lr)?)?;
            var.set(&next)?;
        }
        Ok(norm)
    }

    fn to_state(&self) -> Result<AdamState> {
        let arr = |m: &BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Array>> {
            m.iter().map(|(k, t)| Ok((k.clone(), Array::from_tensor(t)?))).collect()
        };
        Ok(AdamState { step: self.step, m: arr(&self.m)?, v: arr(&self.v)? })
    }

    fn from_state(state: &AdamState) -> Result<Self> {
        let t = |m: &BTreeMap<String, Array>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, a)| Ok((k.clone(), a.to_tensor()?))).collect()
        };
        Ok(Self { step: state.step, m: t(&state.m)?, v: t(&state.v)? })
    }
}

/// Trainer bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    curve: Vec<EpochRecord>,
    train: TrainConfig,
    loss: LossConfig,
}

pub struct Trainer {
    pub net: Network,
    opt: AdamW,
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    /// Epochs completed.
    pub epoch: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    pub curve: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let net = Network::new(&run.network)?;
        let opt = AdamW::new(&net)?;
        Ok(Self {
            net,
            opt,
            cfg: run.train.clone(),
            loss_cfg: run.loss,
            epoch: 0,
            best: None,
            best_epoch: None,
            curve: Vec::new(),
        })
    }

    /// Restores weights, optimizer moments and history from a checkpoint
    /// written by [`Trainer::checkpoint`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let bad = |m: &str| TrainError::Config(format!("{}: {m}", path.display()));
        let state: TrainState =
            serde_json::from_str(ckpt.train_state.as_deref().ok_or_else(|| bad("no trainer state"))?)
                .map_err(|e| bad(&e.to_string()))?;
        let adam = ckpt.adam.as_ref().ok_or_else(|| bad("no optimizer state"))?;
        let net = ckpt.to_network()?;
        Ok(Self {
            net,
            opt: AdamW::from_state(adam)?,
            cfg: state.train,
            loss_cfg: state.loss,
            epoch: state.epoch,
            best: state.best,
            best_epoch: state.best_epoch,
            curve: state.curve,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_network(&self.net)?;
        ckpt.adam = Some(self.opt.to_state()?);
        let state = TrainState {
            epoch: self.epoch,
            best: self.best,
            best_epoch: self.best_epoch,
            curve: self.curve.clone(),
            train: self.cfg.clone(),
            loss: self.loss_cfg,
        };
        ckpt.train_state = Some(serde_json::to_string(&state).expect("state serializes"));
        Ok(ckpt)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    /// Runs one epoch over `data` in a seeded order; returns the epoch's
    /// mean terms and total.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = [0f64; LossTerm::COUNT];
        let mut counts = [0usize; LossTerm::COUNT];
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let (report, out, grads) = batch_loss(&self.net, &items, &self.loss_cfg)?;
            check_finite(&report, epoch, step)?;
            let gs = backward(&out, &grads)?;
            self.opt.step(&self.net, &gs, &self.cfg)?;
            for t in LossTerm::ALL {
                if report.is_active(t) {
                    sums[t as usize] += report.term(t);
                    counts[t as usize] += 1;
                }
            }
            total += report.total;
            batches += 1;
        }
        self.epoch = epoch;
        let terms = core::array::from_fn(|i| (counts[i] > 0).then(|| sums[i] / counts[i] as f64));
        Ok(EpochRecord { epoch, terms, total: total / batches.max(1) as f64, val_total: None })
    }

    /// Mean total loss over `data` without updating weights.
    pub fn eval_loss(&self, data: &[Prepared]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0;
        for chunk in data.chunks(self.cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().collect();
            let (report, _, _) = batch_loss(&self.net, &items, &self.loss_cfg)?;
            check_finite(&report, self.epoch, n)?;
            total += report.total;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }

    /// Trains until `cfg.epochs` (or `deadline`), writing checkpoints and
    /// the loss curve into `out_dir` when given.
    pub fn fit(&mut self, train: &[Prepared], val: &[Prepared], out_dir: Option<&Path>, deadline: Option<Instant>) -> Result<()> {
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|source| TrainError::File { path: dir.to_path_buf(), source })?;
        }
        while self.epoch < self.cfg.epochs {
            let started = Instant::now();
            let mut rec = self.train_epoch(train)?;
            if !val.is_empty() {
                rec.val_total = Some(self.eval_loss(val)?);
            }
            log::info!(
                "epoch {} loss {:.4}{} ({:.1}s)",
                rec.epoch,
                rec.total,
                rec.val_total.map(|v| format!(" val {v:.4}")).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
            let score = rec.val_total.unwrap_or(rec.total);
            let improved = self.best.is_none_or(|b| score < b);
            if improved {
                self.best = Some(score);
                self.best_epoch = Some(rec.epoch);
            }
            self.curve.push(rec);
            let last = self.epoch == self.cfg.epochs || deadline.is_some_and(|d| Instant::now() >= d);
            if let Some(dir) = out_dir {
                write_curve(&dir.join(LOSS_CURVE), &self.curve)?;
                if improved || last || self.epoch.is_multiple_of(self.cfg.checkpoint_interval) {
                    let ckpt = self.checkpoint()?;
                    if improved {
                        ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                    if last || self.epoch.is_multiple_of(self.cfg.checkpoint_interval) {
                        ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                    }
                }
            }
            if last {
                break;
            }
        }
        Ok(())
    }
}

fn check_finite(report: &LossReport, epoch: usize, step: usize) -> Result<()> {
    if let Some(t) = report.non_finite_term() {
        return Err(TrainError::NonFinite { epoch, step, term: t.name(), value: report.term(t) });
    }
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite { epoch, step, term: "total", value: report.total });
    }
    Ok(())
}

/// Writes the curve as CSV: epoch, every term, total, val_total.
pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let file_err = |source: std::io::Error| TrainError::File { path: path.to_path_buf(), source };
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| file_err(e.into()))?;
        let mut header = vec!["epoch".to_string()];
        header.extend(LossTerm::ALL.iter().map(|t| t.name().to_string()));
        header.extend(["total".to_string(), "val_total".to_string()]);
        w.write_record(&header).map_err(|e| file_err(e.into()))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        for r in curve {
            let mut row = vec![r.epoch.to_string()];
            row.extend(r.terms.iter().map(|&v| opt(v)));
            row.extend([format!("{:.8}", r.total), opt(r.val_total)]);
            w.write_record(&row).map_err(|e| file_err(e.into()))?;
        }
        w.flush().map_err(file_err)?;
    }
    fs::rename(&tmp, path).map_err(file_err)
}

/// Reads `(epoch, total)` pairs back from a loss curve.
pub fn read_curve_totals(path: &Path) -> Result<Vec<(usize, f64)>> {
    let file_err = |source: std::io::Error| TrainError::File { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(|e| file_err(e.into()))?;
    let headers = r.headers().map_err(|e| file_err(e.into()))?.clone();
    let col = headers.iter().position(|h| h == "total").ok_or_else(|| TrainError::Config("curve has no total column".into()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| file_err(e.into()))?;
        let parse = |i: usize| rec.get(i).and_then(|s| s.parse().ok());
        match (parse(0), parse(col)) {
            (Some(e), Some(t)) => out.push((e as usize, t)),
            _ => return Err(TrainError::Config("malformed loss curve row".into())),
        }
    }
    Ok(out)
}

fn load_optional_split(dir: &Path) -> Result<Vec<SceneSample>> {
    if dir.is_dir() && !crate::io::list_split(dir)?.is_empty() {
        Ok(load_split(dir)?)
    } else {
        Ok(Vec::new())
    }
}

/// Trains on `data/train` (validating on `data/val` when present), writing
/// `best.safetensors`, `last.safetensors` and `loss_curve.csv` to `out`.
/// Resumes from `out/last.safetensors` when `resume` is set and it exists.
pub fn train(data: &Path, out: &Path, run: &RunConfig, resume: bool) -> Result<Trainer> {
    let last = out.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let mut t = Trainer::resume(&last)?;
        t.cfg.epochs = run.train.epochs;
        t
    } else {
        Trainer::new(run)?
    };
    let train = prepare(&trainer.net, load_split(&data.join("train"))?)?;
    let val = prepare(&trainer.net, load_optional_split(&data.join("val"))?)?;
    trainer.fit(&train, &val, Some(out), None)?;
    Ok(trainer)
}

/// Predicts every sample and scores the predictions.
pub fn evaluate_split(net: &Network, samples: Vec<SceneSample>, batch_size: usize) -> Result<MetricReport> {
    let data = prepare(net, samples)?;
    let preds = predict_prepared(net, &data, batch_size)?;
    let samples: Vec<SceneSample> = data.into_iter().map(|p| p.sample).collect();
    Ok(evaluate(&preds, &samples)?)
}

/// Share of the most common movable class among annotated queries.
pub fn majority_baseline(train: &[SceneSample], eval: &[SceneSample]) -> f64 {
    let mut counts = [0usize; 3];
    for q in train.iter().flat_map(|s| &s.queries) {
        counts[q.movable.index()] += 1;
    }
    let majority = MovableClass::ALL[interact3d_core::datamodel::argmax(&counts.map(|c| c as f64))];
    let total = eval.iter().map(|s| s.queries.len()).sum::<usize>();
    let hits = eval.iter().flat_map(|s| &s.queries).filter(|q| q.movable == majority).count();
    hits as f64 / total.max(1) as f64
}

/// Thresholds of the synthetic overfit check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitThresholds {
    pub movable_acc: f64,
    pub articulation_acc: f64,
    pub axis_ea: f64,
    pub mask_iou: f64,
    pub affordance_sim: f64,
    pub depth_delta: f64,
    /// Held-out movable accuracy margin over the majority class.
    pub heldout_margin: f64,
}

impl Default for OverfitThresholds {
    fn default() -> Self {
        Self {
            movable_acc: 0.95,
            articulation_acc: 0.90,
            axis_ea: 0.75,
            mask_iou: 0.60,
            affordance_sim: 0.50,
            depth_delta: 0.90,
            heldout_margin: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub train: MetricReport,
    pub heldout: MetricReport,
    pub majority_baseline: f64,
    pub epochs: usize,
    pub seconds: f64,
    /// `(name, value, threshold, passed)` per check.
    pub checks: Vec<(String, f64, f64, bool)>,
}

impl OverfitReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.3)
    }
}

/// Scores a trained network against the overfit thresholds.
pub fn score_overfit(
    net: &Network,
    train: &[Prepared],
    heldout: &[Prepared],
    th: &OverfitThresholds,
    epochs: usize,
    seconds: f64,
) -> Result<OverfitReport> {
    let samples = |d: &[Prepared]| d.iter().map(|p| p.sample.clone()).collect::<Vec<_>>();
    let (tr, ho) = (samples(train), samples(heldout));
    let train_m = evaluate(&predict_prepared(net, train, 2)?, &tr)?;
    let held_m = evaluate(&predict_prepared(net, heldout, 2)?, &ho)?;
    let baseline = majority_baseline(&tr, &ho);
    let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    let mut check = |name: &str, value: f64, threshold: f64| {
        checks.push((name.to_string(), value, threshold, value >= threshold));
    };
    check("movable_acc", v(train_m.movable_acc), th.movable_acc);
    check("articulation_acc", v(train_m.articulation_acc), th.articulation_acc);
    check("axis_ea", v(train_m.axis_ea), th.axis_ea);
    check("mask_iou", v(train_m.mask_iou), th.mask_iou);
    check("affordance_sim", v(train_m.affordance_sim), th.affordance_sim);
    check("depth_delta_1.25", v(train_m.depth_delta[0]), th.depth_delta);
    check("heldout_movable_acc", v(held_m.movable_acc), baseline + th.heldout_margin);
    Ok(OverfitReport { train: train_m, heldout: held_m, majority_baseline: baseline, epochs, seconds, checks })
}

/// Trains a fresh model on `train` until the epoch budget or `budget`
/// wall-clock time runs out, then scores it.
pub fn overfit_check(
    run: &RunConfig,
    train: Vec<SceneSample>,
    heldout: Vec<SceneSample>,
    budget: Duration,
    th: &OverfitThresholds,
) -> Result<(Trainer, OverfitReport)> {
    let started = Instant::now();
    let mut trainer = Trainer::new(run)?;
    let train = prepare(&trainer.net, train)?;
    let heldout = prepare(&trainer.net, heldout)?;
    trainer.fit(&train, &[], None, Some(started + budget))?;
    let seconds = started.elapsed().as_secs_f64();
    let report = score_overfit(&trainer.net, &train, &heldout, th, trainer.epoch, seconds)?;
    Ok((trainer, report))
}
