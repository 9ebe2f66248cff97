//! AdamW with cosine warm restarts, 180° rotation augmentation, full
//! backpropagation through time, and checkpointing on validation AUC.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Real};
use crate::losses::{sample_loss, waypoint_targets, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, WaypointReport};
use crate::model::{
    forward, occupancy_probabilities, sample_frames, Checkpoint, Model, ModelConfig, ModelParams,
    OptimizerMoments, Prediction,
};
use crate::scenario::{Dataset, ManifestEntry, SampleRecord, Split};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `eta_min = lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Train and validate on the centered `crop x crop` window.
    pub crop: Option<usize>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr: 0.002,
            min_lr_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            augment: true,
            grad_clip: None,
            crop: None,
            max_steps: None,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn eta_min(&self) -> f64 {
        self.lr * self.min_lr_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let eta = self.eta_min();
        if !(self.lr.is_finite() && eta > 0.0 && self.lr > eta) {
            return Err(Error::Config(format!(
                "need lr > eta_min > 0, got lr {} eta_min {eta}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be nonnegative".into()));
        }
        self.loss.validate()
    }
}

/// Cosine annealing restarted every `steps_per_cycle` steps.
pub fn cosine_lr(step: u64, steps_per_cycle: u64, lr0: f64, eta_min: f64) -> f64 {
    let cycle = steps_per_cycle.max(1);
    let phase = (step % cycle) as f64 / cycle as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of a flat tensor; `step` is the 1-based update count.
pub fn adamw_update<T: Real>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    opt: &AdamW,
) {
    let b1 = T::lit(opt.beta1);
    let b2 = T::lit(opt.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - opt.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - opt.beta2.powi(step as i32));
    let lr = T::lit(lr);
    let decay = one - lr * T::lit(opt.weight_decay);
    let eps = T::lit(opt.eps);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] = w[i] * decay - lr * mh / (vh.sqrt() + eps);
    }
}

pub type OptimizerState = OptimizerMoments;

pub fn optimizer_state(params: &ModelParams<FeatureGrid<f32>>) -> OptimizerState {
    OptimizerMoments {
        step: 0,
        first: params.map(|_, p| FeatureGrid::zeros(p.shape())),
        second: params.map(|_, p| FeatureGrid::zeros(p.shape())),
    }
}

/// Apply one AdamW step. Every parameter needs a gradient.
pub fn adamw_step(
    params: &mut ModelParams<FeatureGrid<f32>>,
    grads: &ModelParams<Option<FeatureGrid<f32>>>,
    state: &mut OptimizerState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    let mut missing = None;
    grads.for_each(|name, g| {
        if g.is_none() && missing.is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Contract(format!("no gradient for {name}")));
    }
    state.step += 1;
    let step = state.step;
    let mut g_list = Vec::new();
    grads.for_each(|_, g| g_list.push(g.as_ref().expect("checked")));
    let mut firsts: Vec<&mut FeatureGrid<f32>> = Vec::new();
    let mut seconds: Vec<&mut FeatureGrid<f32>> = Vec::new();
    let mut ws: Vec<&mut FeatureGrid<f32>> = Vec::new();
    params.for_each_mut(|p| ws.push(p));
    state.first.for_each_mut(|p| firsts.push(p));
    state.second.for_each_mut(|p| seconds.push(p));
    for (((w, g), m), v) in ws.into_iter().zip(g_list).zip(firsts).zip(seconds) {
        if w.shape() != g.shape() || m.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::Contract(format!(
                "gradient/moment shape mismatch for parameter of shape {:?}",
                w.shape()
            )));
        }
        adamw_update(w.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, lr, opt);
    }
    Ok(())
}

/// Scale every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams<Option<FeatureGrid<f32>>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    grads.for_each(|_, g| {
        if let Some(g) = g {
            sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.for_each_mut(|g| {
            if let Some(g) = g {
                g.scale_assign(s);
            }
        });
    }
    norm
}

/// 180° rotation of every plane with flow negated.
pub fn augment_rot180(sample: &SampleRecord) -> SampleRecord {
    sample.rot180()
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ModelParams<FeatureGrid<f32>>,
    cfg: &ModelConfig,
    sample: &SampleRecord,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams<Option<FeatureGrid<f32>>>)> {
    let mut tape = Tape::new();
    let p = params.to_tape(&mut tape, true);
    let frames: Vec<Var> = sample_frames(sample, None)?
        .into_iter()
        .map(|f| tape.constant(f))
        .collect();
    let targets = waypoint_targets(sample);
    let preds = forward(&mut tape, &p, cfg, &frames, targets.len())?;
    let (total, breakdown) = sample_loss(&mut tape, &preds, &targets, weights)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, p.map(|_, _| None)));
    }
    tape.backward(total)?;
    Ok((breakdown, p.map(|_, &v| tape.grad(v).cloned())))
}

/// Mean loss and mean gradients over a batch. Per-sample work may run in
/// parallel; the reduction runs in batch order.
pub fn batch_gradients(
    params: &ModelParams<FeatureGrid<f32>>,
    cfg: &ModelConfig,
    batch: &[SampleRecord],
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams<Option<FeatureGrid<f32>>>)> {
    let parts = batch
        .par_iter()
        .map(|s| sample_gradients(params, cfg, s, weights))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / batch.len().max(1) as f64;
    let mut mean = LossBreakdown::default();
    let mut grads: ModelParams<Option<FeatureGrid<f32>>> = params.map(|_, p| Some(FeatureGrid::zeros(p.shape())));
    for (b, g) in &parts {
        mean.occupancy += b.occupancy * inv;
        mean.flow += b.flow * inv;
        mean.trace += b.trace * inv;
        mean.total += b.total * inv;
        let mut add = Vec::new();
        g.for_each(|_, g| add.push(g));
        let mut add = add.into_iter();
        grads.for_each_mut(|acc| match (acc.as_mut(), add.next().expect("same layout")) {
            (Some(a), Some(g)) => a.add_assign(g),
            _ => *acc = None,
        });
    }
    let s = inv as f32;
    grads.for_each_mut(|g| {
        if let Some(g) = g {
            g.scale_assign(s);
        }
    });
    Ok((mean, grads))
}

/// Probabilities and flow for a sample from its last `input_len` frames.
pub fn predict_probabilities(
    model: &Model,
    sample: &SampleRecord,
    input_len: Option<usize>,
) -> Result<Vec<Prediction<FeatureGrid<f32>>>> {
    Ok(model
        .predict_sample(sample, input_len)?
        .into_iter()
        .map(|p| Prediction {
            occupancy: occupancy_probabilities(&p.occupancy),
            flow: p.flow,
        })
        .collect())
}

/// Metrics of one sample under the model.
pub fn evaluate_sample(model: &Model, sample: &SampleRecord, input_len: Option<usize>) -> Result<WaypointReport> {
    let preds = predict_probabilities(model, sample, input_len)?;
    evaluate(&preds, &waypoint_targets(sample))
}

/// How a shortened input sequence is fed to the accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Zero state, then only the last `L` frames.
    Reset,
    /// Every accumulation step runs; frames before the last `L` are blank.
    Carry,
}

impl SweepMode {
    pub const ALL: [SweepMode; 2] = [SweepMode::Reset, SweepMode::Carry];

    pub fn name(self) -> &'static str {
        match self {
            SweepMode::Reset => "reset",
            SweepMode::Carry => "carry",
        }
    }
}

/// Model inputs for an `L`-frame evaluation under `mode`.
pub fn sweep_frames(sample: &SampleRecord, len: usize, mode: SweepMode) -> Result<Vec<FeatureGrid<f32>>> {
    let recent = sample_frames(sample, Some(len))?;
    Ok(match mode {
        SweepMode::Reset => recent,
        SweepMode::Carry => {
            let blank = FeatureGrid::zeros(recent[0].shape());
            let mut frames = vec![blank; sample.inputs.len() - len];
            frames.extend(recent);
            frames
        }
    })
}

/// Metrics of one sample for an `L`-frame sweep point.
pub fn evaluate_sweep_sample(model: &Model, sample: &SampleRecord, len: usize, mode: SweepMode) -> Result<WaypointReport> {
    let frames = sweep_frames(sample, len, mode)?;
    let preds: Vec<_> = model
        .predict(&frames, sample.targets.len())?
        .into_iter()
        .map(|p| Prediction {
            occupancy: occupancy_probabilities(&p.occupancy),
            flow: p.flow,
        })
        .collect();
    evaluate(&preds, &waypoint_targets(sample))
}

/// Loads an entry and applies the optional center crop.
pub fn load_sample(dataset: &Dataset, entry: &ManifestEntry, crop: Option<usize>) -> Result<SampleRecord> {
    let s = dataset.load(entry)?;
    match crop {
        Some(c) => s.center_crop(c, c),
        None => Ok(s),
    }
}

/// Per-sample reports for a split, in manifest order, labelled by seed.
pub fn evaluate_split(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    input_len: Option<usize>,
    crop: Option<usize>,
) -> Result<Vec<(String, WaypointReport)>> {
    let entries: Vec<&ManifestEntry> = dataset.entries(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let s = load_sample(dataset, e, crop)?;
            Ok((e.seed.to_string(), evaluate_sample(model, &s, input_len)?))
        })
        .collect()
}

pub const LOG_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "lr",
    "loss_total",
    "loss_occ",
    "loss_flow",
    "loss_trace",
    "val_observed_auc",
    "val_observed_soft_iou",
    "val_occluded_auc",
    "val_flow_epe",
    "val_flow_grounded_auc",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub validation: Option<WaypointReport>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss.total,
            self.loss.occupancy,
            self.loss.flow,
            self.loss.trace
        );
        match &self.validation {
            Some(r) => {
                let m = &r.mean;
                s += &format!(
                    ",{},{},{},{},{}",
                    m.observed_auc, m.observed_soft_iou, m.occluded_auc, m.flow_epe, m.flow_grounded_auc
                );
            }
            None => s += ",,,,,",
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_metric: Option<f64>,
    pub rows: Vec<LogRow>,
    pub model: Model,
    pub steps: u64,
}

pub const LOG_FILE: &str = "train_log.csv";

fn nonfinite(out_dir: &Path, step: u64, epoch: usize, seeds: &[u64], loss: &LossBreakdown) -> Error {
    let dump = serde_json::json!({
        "step": step,
        "epoch": epoch,
        "batch_seeds": seeds,
        "loss": loss,
    });
    let path = out_dir.join("nonfinite_batch.json");
    let _ = std::fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default());
    Error::Numerical(format!(
        "non-finite loss at step {step} (epoch {epoch}); batch seeds {seeds:?}; dump in {}",
        path.display()
    ))
}

/// Full training run. Writes `train_log.csv` and an `epoch_NNN.ckpt`
/// checkpoint whenever mean observed validation AUC improves.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let train_entries: Vec<ManifestEntry> = dataset.entries(Split::Train).cloned().collect();
    if train_entries.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let has_val = dataset.entries(Split::Val).next().is_some();
    let probe = load_sample(dataset, &train_entries[0], cfg.crop)?;
    if probe.grid.height != model_cfg.height || probe.grid.width != model_cfg.width {
        return Err(Error::Config(format!(
            "samples are {}x{}, model expects {}x{}",
            probe.grid.height, probe.grid.width, model_cfg.height, model_cfg.width
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{}", LOG_COLUMNS.join(",")).map_err(io)?;

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let mut state = optimizer_state(&model.params);
    let opt = AdamW::from(cfg);
    let steps_per_epoch = train_entries.len().div_ceil(cfg.batch_size) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    let mut step = 0u64;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<f64> = None;
    let extra = serde_json::json!({
        "train_config": cfg,
        "dataset_config_hash": dataset.config_hash,
    });

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let flips: Vec<bool> = idx.iter().map(|_| cfg.augment && rng.gen_bool(0.5)).collect();
            let batch = idx
                .iter()
                .zip(&flips)
                .map(|(&i, &flip)| {
                    let s = load_sample(dataset, &train_entries[i], cfg.crop)?;
                    Ok(if flip { augment_rot180(&s) } else { s })
                })
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = idx.iter().map(|&i| train_entries[i].seed).collect();
            let lr = cosine_lr(step, steps_per_epoch, cfg.lr, cfg.eta_min());
            let (loss, mut grads) = batch_gradients(&model.params, model_cfg, &batch, &cfg.loss)?;
            if !loss.total.is_finite() {
                log.flush().map_err(io)?;
                return Err(nonfinite(out_dir, step, epoch, &seeds, &loss));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adamw_step(&mut model.params, &grads, &mut state, lr, &opt)?;
            if !model.params.all_finite() {
                log.flush().map_err(io)?;
                return Err(nonfinite(out_dir, step, epoch, &seeds, &loss));
            }
            step += 1;
            let stop = cfg.max_steps.is_some_and(|m| step >= m);
            let epoch_end = bi + 1 == batches.len() || stop;
            let mut row = LogRow {
                step,
                epoch,
                lr,
                loss,
                validation: None,
            };
            if epoch_end && has_val {
                let reports: Vec<WaypointReport> = evaluate_split(&model, dataset, Split::Val, None, cfg.crop)?
                    .into_iter()
                    .map(|(_, r)| r)
                    .collect();
                let report = WaypointReport::aggregate(&reports)?;
                let metric = report.mean.observed_auc;
                if best.is_none_or(|b| metric > b) {
                    best = Some(metric);
                    let path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
                    let ck = Checkpoint {
                        config: model_cfg.clone(),
                        params: model.params.clone(),
                        epoch,
                        step,
                        metric: Some(metric),
                        optimizer: Some(state.clone()),
                        extra: extra.clone(),
                    };
                    ck.save(&path)?;
                    checkpoints.push(path);
                }
                row.validation = Some(report);
            }
            writeln!(log, "{}", row.csv()).map_err(io)?;
            rows.push(row);
            if stop {
                break 'epochs;
            }
        }
    }
    log.flush().map_err(io)?;
    Ok(TrainOutcome {
        log_path,
        best_checkpoint: checkpoints.last().cloned(),
        checkpoints,
        best_metric: best,
        rows,
        model,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 10, 0.002, 0.00002) - 0.002).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.002, 0.00002) - 0.00101).abs() < 1e-15);
        assert!((cosine_lr(10, 10, 0.002, 0.00002) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let opt = AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut w = [2.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for step in 1..=3 {
            adamw_update(&mut w, &[0.0], &mut m, &mut v, step, 0.1, &opt);
        }
        assert!((w[0] - 2.0 * (1.0 - 0.1 * 0.01f64).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_bad_lr() {
        let c = TrainConfig {
            min_lr_ratio: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
