//! Training loop for the three objective modes.

mod config;
mod optimizer;
mod schedule;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{TrainConfig, TrainMode};
pub use optimizer::AdamW;
pub use schedule::LrSchedule;

use crate::data::{sample_windows, FrameWindow, VideoDataset};
use crate::error::{Error, Result};
use crate::losses::{
    gradient_loss_grad, intensity_loss_grad, total_loss_grad, LossBreakdown, LossWeights,
};
use crate::masking::{generate_mask, PatchMask};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::model::{backward, forward_trace, EncodedFeatures, ModelParams};
use crate::seeds::{self, Stream};
use crate::tensor::Frame;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// A window together with its position in the unshuffled window list.
///
/// The index keys the per-sample random draws, so a sample sees the same
/// mask in a given epoch no matter where the shuffle puts it.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub index: usize,
    pub window: FrameWindow<'a>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(rename = "l_N")]
    pub l_n: f64,
    #[serde(rename = "l_P")]
    pub l_p: f64,
    pub l_cst: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub schedule: LrSchedule,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(params: ModelParams, cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let optimizer = AdamW::new(&params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        TrainState {
            params,
            optimizer,
            schedule: lr_schedule(cfg, steps_per_epoch),
            step: 0,
            epoch: 0,
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig, train_loss: Option<f64>) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION.into(),
                model: self.params.config.clone(),
                step: self.step,
                epoch: self.epoch,
                train_config: Some(serde_json::to_value(cfg).expect("config serializes")),
                train_loss,
            },
            params: self.params.clone(),
            moments: Some(self.optimizer.moments.clone()),
        }
    }

    /// Rebuilds the state saved by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        let saved = ckpt
            .meta
            .train_config
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training config".into()))?;
        let saved: TrainConfig =
            serde_json::from_value(saved.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if &saved != cfg {
            return Err(Error::config(
                "resume config differs from the one stored in the checkpoint",
            ));
        }
        let moments = ckpt
            .moments
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer moments".into()))?;
        let mut state = TrainState::new(ckpt.params, cfg, steps_per_epoch);
        state.optimizer.moments = moments;
        state.optimizer.steps = ckpt.meta.step;
        state.step = ckpt.meta.step;
        state.epoch = ckpt.meta.epoch;
        Ok(state)
    }
}

pub fn steps_per_epoch(num_windows: usize, batch_size: usize) -> usize {
    num_windows.div_ceil(batch_size)
}

pub fn lr_schedule(cfg: &TrainConfig, steps_per_epoch: usize) -> LrSchedule {
    LrSchedule::new(cfg.lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch)
}

/// Learning rate used for the update that brings the step count to `step`.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    lr_schedule(cfg, steps_per_epoch).at(step)
}

/// Mask for sample `index` in epoch `epoch`.
pub fn sample_mask(
    params: &ModelParams,
    cfg: &TrainConfig,
    epoch: u64,
    index: usize,
) -> Result<PatchMask> {
    let seed = seeds::derive(cfg.seed, Stream::Mask, epoch, index as u64);
    generate_mask(params.config.grid(), cfg.mask_ratio, seed)
}

/// Whether sample `index` is swapped for its masked version in `pasrm` mode.
pub fn pseudo_draw(seed: u64, epoch: u64, index: usize, probability: f64) -> bool {
    seeds::rng(seed, Stream::PseudoCoin, epoch, index as u64).random_bool(probability)
}

fn scaled(mut frame: Frame, s: f64) -> Frame {
    frame.data.iter_mut().for_each(|v| *v *= s);
    frame
}

fn reconstruction_grad(pred: &Frame, target: &Frame, lambda: f64) -> Result<(f64, f64, Frame)> {
    let (int, mut g) = intensity_loss_grad(pred, target)?;
    let (gd, gg) = gradient_loss_grad(pred, target)?;
    for (a, b) in g.data.iter_mut().zip(&gg.data) {
        *a = lambda * (*a + b);
    }
    Ok((int, gd, g))
}

/// Batch-mean loss and its gradient for the configured mode.
///
/// `epoch` is the zero-based epoch index that keys masks and coin flips.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<(ModelParams, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut grads = params.zeros_like();
    let inv = 1.0 / batch.len() as f64;
    let mut parts = Vec::with_capacity(batch.len());
    for s in batch {
        let inputs = s.window.input_frames();
        let target = s.window.target();
        let part = match cfg.mode {
            TrainMode::Baseline => {
                let w = LossWeights {
                    lambda_p: 0.0,
                    lambda_cst: 0.0,
                    ..cfg.weights
                };
                let trace = forward_trace(params, inputs, None)?;
                let (int, gd, d) = reconstruction_grad(&trace.prediction(), target, w.lambda_n)?;
                backward(params, &trace, &scaled(d, inv), None, &mut grads);
                LossBreakdown::assemble(int, gd, 0.0, 0.0, 0.0, &w)
            }
            TrainMode::Pasrm => {
                let w = LossWeights {
                    lambda_cst: 0.0,
                    ..cfg.weights
                };
                if pseudo_draw(cfg.seed, epoch, s.index, cfg.pseudo_probability) {
                    let mask = sample_mask(params, cfg, epoch, s.index)?;
                    let trace = forward_trace(params, inputs, Some(&mask))?;
                    let (int, gd, d) = reconstruction_grad(&trace.prediction(), target, w.lambda_p)?;
                    backward(params, &trace, &scaled(d, inv), None, &mut grads);
                    LossBreakdown::assemble(0.0, 0.0, int, gd, 0.0, &w)
                } else {
                    let trace = forward_trace(params, inputs, None)?;
                    let (int, gd, d) = reconstruction_grad(&trace.prediction(), target, w.lambda_n)?;
                    backward(params, &trace, &scaled(d, inv), None, &mut grads);
                    LossBreakdown::assemble(int, gd, 0.0, 0.0, 0.0, &w)
                }
            }
            TrainMode::PasrmNct => {
                let mask = sample_mask(params, cfg, epoch, s.index)?;
                let trace_o = forward_trace(params, inputs, None)?;
                let trace_p = forward_trace(params, inputs, Some(&mask))?;
                let f_o = EncodedFeatures {
                    tokens: trace_o.features.clone(),
                };
                let f_p = EncodedFeatures {
                    tokens: trace_p.features.clone(),
                };
                let mut g = total_loss_grad(
                    &trace_o.prediction(),
                    &trace_p.prediction(),
                    target,
                    &f_o,
                    &f_p,
                    &cfg.weights,
                )?;
                g.d_f_o.data.iter_mut().for_each(|v| *v *= inv);
                g.d_f_p.data.iter_mut().for_each(|v| *v *= inv);
                let d_f_o = (!cfg.stop_grad_normal).then_some(&g.d_f_o);
                backward(params, &trace_o, &scaled(g.d_pred_o, inv), d_f_o, &mut grads);
                backward(params, &trace_p, &scaled(g.d_pred_p, inv), Some(&g.d_f_p), &mut grads);
                g.breakdown
            }
        };
        parts.push(part);
    }
    Ok((grads, LossBreakdown::mean(&parts)))
}

/// One optimizer update for whichever mode `cfg` selects.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (grads, breakdown) = compute_gradients(&state.params, batch, cfg, state.epoch)?;
    let next = state.step + 1;
    if !breakdown.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient at step {next} (epoch {}): l_N={} l_P={} l_cst={} total={}",
            state.epoch + 1,
            breakdown.l_n,
            breakdown.l_p,
            breakdown.l_cst,
            breakdown.total
        )));
    }
    let lr = state.schedule.at(next as usize);
    state.optimizer.step(&mut state.params, &grads, lr);
    state.step = next;
    Ok(breakdown)
}

fn require_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::config(format!(
            "step for mode {mode} called with mode {}",
            cfg.mode
        )));
    }
    Ok(())
}

/// Dual-branch update: normal and masked inputs together with consistency.
pub fn train_step_nct(
    state: &mut TrainState,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    require_mode(cfg, TrainMode::PasrmNct)?;
    train_step(state, batch, cfg)
}

/// Probabilistic pseudo-input update without consistency.
pub fn train_step_pasrm(
    state: &mut TrainState,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    require_mode(cfg, TrainMode::Pasrm)?;
    train_step(state, batch, cfg)
}

pub fn train_step_baseline(
    state: &mut TrainState,
    batch: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    require_mode(cfg, TrainMode::Baseline)?;
    train_step(state, batch, cfg)
}

/// Window order for a zero-based epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, Stream::Shuffle, epoch, 0));
    order
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where checkpoints and the metrics log go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Metrics of the steps run in this call.
    pub metrics: Vec<MetricRecord>,
    pub final_checkpoint: Checkpoint,
}

fn check_geometry(dataset: &VideoDataset, params: &ModelParams, cfg: &TrainConfig) -> Result<()> {
    let m = &params.config;
    let expected = (m.image_size.0, m.image_size.1, m.out_channels);
    let got = (dataset.frame_height, dataset.frame_width, dataset.channels);
    if expected != got {
        return Err(Error::config(format!(
            "model expects {}x{}x{} frames, dataset has {}x{}x{}",
            expected.0, expected.1, expected.2, got.0, got.1, got.2
        )));
    }
    if m.frames() != cfg.t {
        return Err(Error::config(format!(
            "model takes {} input frames but T = {}",
            m.frames(),
            cfg.t
        )));
    }
    Ok(())
}

fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

fn prune_epoch_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    let excess = found.len().saturating_sub(keep);
    for p in &found[..excess] {
        fs::remove_file(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Keeps only records up to `step`, so a resumed run appends cleanly.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Checkpoint(format!("bad metrics line in {}: {e}", path.display())))?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Checkpoint(e.to_string())))
        .collect()
}

/// Trains from `init` (or from `opts.resume`) over every window of `dataset`.
///
/// Only frames are read from the dataset; labels are never touched.
pub fn run_training(
    dataset: &VideoDataset,
    init: ModelParams,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_geometry(dataset, &init, cfg)?;
    let windows = sample_windows(dataset, cfg.t)?.windows;
    if windows.is_empty() {
        return Err(Error::config("dataset yields no training windows"));
    }
    let spe = steps_per_epoch(windows.len(), cfg.batch_size);

    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    if let Some(dir) = &ckpt_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));

    let mut best: Option<f64> = None;
    let mut state = match &opts.resume {
        Some(path) => {
            let state = TrainState::from_checkpoint(Checkpoint::load(path)?, cfg, spe)?;
            if state.params.config != init.config {
                return Err(Error::config("resume checkpoint has a different model config"));
            }
            if let Some(p) = &metrics_path {
                truncate_metrics(p, state.step)?;
            }
            if let Some(dir) = &ckpt_dir {
                let best_path = dir.join(BEST_CHECKPOINT);
                if best_path.exists() {
                    best = Checkpoint::load(&best_path)?.meta.train_loss;
                }
            }
            log::info!("resuming at epoch {} step {}", state.epoch, state.step);
            state
        }
        None => {
            if let Some(p) = &metrics_path {
                fs::write(p, "").map_err(|e| Error::io(p, e))?;
            }
            TrainState::new(init, cfg, spe)
        }
    };

    let mut metrics = Vec::new();
    let mut last_loss = None;
    while (state.epoch as usize) < cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(windows.len(), cfg.seed, epoch);
        let mut epoch_records = Vec::with_capacity(spe);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&index| Sample {
                    index,
                    window: windows[index],
                })
                .collect();
            let b = train_step(&mut state, &batch, cfg)?;
            epoch_records.push(MetricRecord {
                step: state.step,
                epoch: epoch + 1,
                lr: state.schedule.at(state.step as usize),
                l_n: b.l_n,
                l_p: b.l_p,
                l_cst: b.l_cst,
                total: b.total,
            });
        }
        state.epoch += 1;
        let epoch_loss =
            epoch_records.iter().map(|r| r.total).sum::<f64>() / epoch_records.len() as f64;
        last_loss = Some(epoch_loss);
        log::info!(
            "epoch {}/{} step {} loss {:.6}",
            state.epoch,
            cfg.epochs,
            state.step,
            epoch_loss
        );

        if let Some(p) = &metrics_path {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            for r in &epoch_records {
                let line = serde_json::to_string(r).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
        }
        if let Some(dir) = &ckpt_dir {
            let ckpt = state.to_checkpoint(cfg, Some(epoch_loss));
            ckpt.save(&dir.join(epoch_checkpoint_name(state.epoch)))?;
            if best.is_none_or(|b| epoch_loss < b) {
                best = Some(epoch_loss);
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
            prune_epoch_checkpoints(dir, 3)?;
        }
        metrics.extend(epoch_records);
    }

    let final_checkpoint = state.to_checkpoint(cfg, last_loss);
    if let Some(dir) = &opts.out_dir {
        final_checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        state,
        metrics,
        final_checkpoint,
    })
}
