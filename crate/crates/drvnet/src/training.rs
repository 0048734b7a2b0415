//! Two-phase training protocol.
//!
//! Phase 1 optimizes the backbone alone against the composite loss on
//! its own probability map. Phase 2 loads the phase-1 backbone, freezes
//! every `backbone/` parameter *and* its batch-norm statistics, and
//! trains the tail on the refined map. Both phases share the stepped
//! learning-rate schedule (÷10 every 50 epochs) and Adam.
//!
//! Batches are gradient accumulations over single images: per-sample
//! gradients are averaged, then applied in one optimizer step.

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, Dataset, RetinalSample};
use crate::error::{Error, Result};
use crate::loss::{composite_grad, composite_parts, LossWeights};
use crate::network::DrVNet;
use crate::nn::{GradStore, ParamVisit, TrainCtx};
use crate::rng::{substream, Stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;

/// Which sub-network a schedule drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Backbone,
    Tail,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Backbone => "backbone",
            Phase::Tail => "tail",
        }
    }

    /// Epoch budget: 150 for the backbone, 100 for the tail.
    pub fn default_epochs(self) -> usize {
        match self {
            Phase::Backbone => 150,
            Phase::Tail => 100,
        }
    }
}

/// Learning-rate schedule and loop bookkeeping for one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase: Phase,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    /// The published protocol for a phase on a dataset: lr 1e-3 divided
    /// by 10 every 50 epochs, dataset-specific batch size.
    pub fn for_phase(phase: Phase, dataset: Dataset, seed: u64) -> Self {
        TrainSchedule {
            phase,
            initial_lr: 1e-3,
            decay_factor: 10.0,
            decay_every: 50,
            total_epochs: phase.default_epochs(),
            batch_size: dataset.batch_size(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if self.decay_factor < 1.0 || !self.decay_factor.is_finite() {
            return Err(Error::Config(format!(
                "decay factor must be ≥ 1, got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 || self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "decay interval, epoch count and batch size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `initial_lr / decay_factor^⌊epoch/decay_every⌋`.
    pub fn lr_at(&self, epoch: i64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::InvalidInput(format!(
                "epoch must be non-negative, got {epoch}"
            )));
        }
        if epoch as usize >= self.total_epochs {
            return Err(Error::InvalidInput(format!(
                "epoch {epoch} outside the scheduled {} epochs",
                self.total_epochs
            )));
        }
        let steps = (epoch as usize / self.decay_every) as i32;
        Ok(self.initial_lr / self.decay_factor.powi(steps))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_bce: f64,
    pub train_dice: f64,
    pub train_total: f64,
    /// Mean composite loss on the validation set; absent when no
    /// validation samples were supplied.
    pub val_total: Option<f64>,
    pub wall_secs: f64,
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with per-parameter moments and an optional frozen prefix.
/// Gradients arriving for a frozen parameter are a protocol bug, not a
/// user error, and abort the run.
#[derive(Debug, Clone)]
pub struct Adam {
    step: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
    frozen_prefix: Option<String>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { step: 0, m: IndexMap::new(), v: IndexMap::new(), frozen_prefix: None }
    }

    /// Refuse to touch parameters whose name starts with `prefix`.
    pub fn with_frozen_prefix(prefix: &str) -> Self {
        Adam { frozen_prefix: Some(prefix.to_string()), ..Self::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `θ ← θ − lr · m̂ / (√v̂ + ε)` with bias-corrected
    /// moments, over every gradient in `grads`.
    pub fn apply(
        &mut self,
        model: &mut dyn ParamVisit,
        grads: &GradStore,
        lr: f64,
    ) -> Result<()> {
        if let Some(prefix) = &self.frozen_prefix {
            if let Some(name) = grads.names().find(|n| n.starts_with(prefix.as_str())) {
                return Err(Error::Internal(format!(
                    "gradient for frozen parameter `{name}` reached the optimizer"
                )));
            }
        }
        if grads.is_empty() {
            return Ok(());
        }
        let mut known = std::collections::HashSet::new();
        model.visit_params(&mut |name, _| {
            known.insert(name.to_string());
        });
        if let Some(name) = grads.names().find(|n| !known.contains(*n)) {
            return Err(Error::Internal(format!(
                "gradient for unknown parameter `{name}`"
            )));
        }

        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let mut deltas: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        for (name, g) in grads.iter() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            if m.shape() != g.shape() {
                return Err(Error::Internal(format!(
                    "moment shape {:?} does not match gradient shape {:?} for `{name}`",
                    m.shape(),
                    g.shape()
                )));
            }
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let delta = ndarray::Zip::from(&*m)
                .and(&*v)
                .map_collect(|&m, &v| lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS));
            deltas.insert(name.to_string(), delta);
        }

        let mut bad: Option<String> = None;
        model.visit_params_mut(&mut |name, p| {
            if let Some(d) = deltas.get(name) {
                if d.shape() != p.shape() {
                    bad.get_or_insert_with(|| {
                        format!(
                            "gradient shape {:?} does not match parameter `{name}` {:?}",
                            d.shape(),
                            p.shape()
                        )
                    });
                } else {
                    *p -= d;
                }
            }
        });
        match bad {
            Some(msg) => Err(Error::Internal(msg)),
            None => Ok(()),
        }
    }

    /// Copy moments and step counter into a checkpoint.
    pub fn snapshot_into(&self, ckpt: &mut Checkpoint) {
        ckpt.adam_step = self.step;
        ckpt.adam_m = self.m.clone();
        ckpt.adam_v = self.v.clone();
    }
}

// ---------------------------------------------------------------------------
// Phase loops
// ---------------------------------------------------------------------------

/// Result of one trained phase: the checkpoint with the best validation
/// loss, the final checkpoint, and the full epoch log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

fn snapshot(
    model: &DrVNet,
    epoch: usize,
    adam: &Adam,
    history: &[EpochRecord],
) -> Checkpoint {
    let mut ckpt = Checkpoint::from_model(model.config(), model);
    ckpt.epoch = epoch;
    adam.snapshot_into(&mut ckpt);
    ckpt.history = history.to_vec();
    ckpt
}

fn emit(log: &mut Option<&mut dyn Write>, record: &EpochRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Internal(format!("log record serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn check_inputs(
    train: &[RetinalSample],
    weights: &LossWeights,
    sched: &TrainSchedule,
) -> Result<()> {
    weights.validate()?;
    sched.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("no training samples supplied".into()));
    }
    Ok(())
}

/// Mean composite loss parts accumulated across samples.
struct LossMeter {
    bce: f64,
    dice: f64,
    total: f64,
    n: usize,
}

impl LossMeter {
    fn new() -> Self {
        LossMeter { bce: 0.0, dice: 0.0, total: 0.0, n: 0 }
    }

    fn add(&mut self, parts: &crate::loss::LossParts) {
        self.bce += parts.bce;
        self.dice += parts.dice;
        self.total += parts.total;
        self.n += 1;
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.bce / n, self.dice / n, self.total / n)
    }
}

/// Phase 1: optimize the backbone alone under the composite loss on its
/// probability map. The model must have been built without a tail.
pub fn train_phase1(
    model: &mut DrVNet,
    train: &[RetinalSample],
    val: &[RetinalSample],
    weights: &LossWeights,
    sched: &TrainSchedule,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if sched.phase != Phase::Backbone {
        return Err(Error::Config(
            "phase-1 training requires a schedule with phase = backbone".into(),
        ));
    }
    if model.tail().is_some() {
        return Err(Error::Config(
            "phase-1 trains the backbone alone; build the model with the tail disabled".into(),
        ));
    }
    check_inputs(train, weights, sched)?;

    let mut adam = Adam::new();
    let mut history: Vec<EpochRecord> = Vec::with_capacity(sched.total_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..sched.total_epochs {
        let started = Instant::now();
        let lr = sched.lr_at(epoch as i64)?;
        let order = shuffled_indices(train.len(), sched.seed, epoch);
        let mut drop_rng = substream(sched.seed, Stream::Dropout { epoch: epoch as u64 });
        let mut meter = LossMeter::new();

        for (batch_idx, chunk) in order.chunks(sched.batch_size).enumerate() {
            let mut batch_grads = GradStore::new();
            for &sample_idx in chunk {
                let mut aug_rng = substream(
                    sched.seed,
                    Stream::Augment { epoch: epoch as u64, sample: sample_idx as u64 },
                );
                let sample = augment(&train[sample_idx], &mut aug_rng);
                let mut ctx = TrainCtx::train(&mut drop_rng);
                let (bmap, cache) = model.backbone_mut().forward_train(&sample.image, &mut ctx)?;
                let parts = composite_parts(&bmap, &sample.annotation, weights)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        bce: parts.bce,
                        dice: parts.dice,
                    });
                }
                meter.add(&parts);
                let dmap = composite_grad(&bmap, &sample.annotation, weights)?;
                let mut sample_grads = GradStore::new();
                model.backbone().backward(&dmap, &cache, &mut sample_grads);
                batch_grads.merge_scaled(sample_grads, 1.0 / chunk.len() as f64);
            }
            adam.apply(model, &batch_grads, lr)?;
        }

        let val_total = validation_loss(model, val, weights, |m, x| Ok(m.backbone().forward(x)?))?;
        let (train_bce, train_dice, train_total) = meter.mean();
        let record = EpochRecord {
            phase: sched.phase.label().to_string(),
            epoch,
            lr,
            train_bce,
            train_dice,
            train_total,
            val_total,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        emit(&mut log, &record)?;
        history.push(record);

        if let Some(v) = val_total {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, snapshot(model, epoch, &adam, &history)));
            }
        }
    }

    let last = snapshot(model, sched.total_epochs.saturating_sub(1), &adam, &history);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history })
}

/// Phase 2: load the phase-1 backbone, freeze it (weights and batch-norm
/// statistics), and train the tail on the final map. Aborts if any
/// backbone tensor moves.
pub fn train_phase2(
    model: &mut DrVNet,
    backbone_ckpt: &Checkpoint,
    train: &[RetinalSample],
    val: &[RetinalSample],
    weights: &LossWeights,
    sched: &TrainSchedule,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if sched.phase != Phase::Tail {
        return Err(Error::Config(
            "phase-2 training requires a schedule with phase = tail".into(),
        ));
    }
    if model.tail().is_none() {
        return Err(Error::Config(
            "phase-2 trains the tail; build the model with the tail enabled".into(),
        ));
    }
    check_inputs(train, weights, sched)?;
    backbone_ckpt.apply_to(model)?;

    let frozen_before = frozen_backbone_tensors(model);
    let mut adam = Adam::with_frozen_prefix("backbone/");
    let mut history: Vec<EpochRecord> = Vec::with_capacity(sched.total_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..sched.total_epochs {
        let started = Instant::now();
        let lr = sched.lr_at(epoch as i64)?;
        let order = shuffled_indices(train.len(), sched.seed, epoch);
        let mut drop_rng = substream(sched.seed, Stream::Dropout { epoch: epoch as u64 });
        let mut meter = LossMeter::new();

        for (batch_idx, chunk) in order.chunks(sched.batch_size).enumerate() {
            let mut batch_grads = GradStore::new();
            for &sample_idx in chunk {
                let mut aug_rng = substream(
                    sched.seed,
                    Stream::Augment { epoch: epoch as u64, sample: sample_idx as u64 },
                );
                let sample = augment(&train[sample_idx], &mut aug_rng);
                // Backbone runs in pure inference mode: phase-1 moving
                // statistics, no dropout, no cache, no gradients.
                let bmap = model.backbone().forward(&sample.image)?;
                let mut ctx = TrainCtx::train(&mut drop_rng);
                let tail = model
                    .tail_mut()
                    .ok_or_else(|| Error::Internal("tail vanished mid-training".into()))?;
                let (final_map, cache) = tail.forward_train(&sample.image, &bmap, &mut ctx)?;
                let parts = composite_parts(&final_map, &sample.annotation, weights)?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        bce: parts.bce,
                        dice: parts.dice,
                    });
                }
                meter.add(&parts);
                let dfinal = composite_grad(&final_map, &sample.annotation, weights)?;
                let mut sample_grads = GradStore::new();
                let tail = model
                    .tail()
                    .ok_or_else(|| Error::Internal("tail vanished mid-training".into()))?;
                let (_dimage, _dbmap) = tail.backward(&dfinal, &cache, &mut sample_grads);
                batch_grads.merge_scaled(sample_grads, 1.0 / chunk.len() as f64);
            }
            adam.apply(model, &batch_grads, lr)?;
        }

        let val_total = validation_loss(model, val, weights, |m, x| Ok(m.forward_full(x)?.1))?;
        let (train_bce, train_dice, train_total) = meter.mean();
        let record = EpochRecord {
            phase: sched.phase.label().to_string(),
            epoch,
            lr,
            train_bce,
            train_dice,
            train_total,
            val_total,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        emit(&mut log, &record)?;
        history.push(record);

        if let Some(v) = val_total {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, snapshot(model, epoch, &adam, &history)));
            }
        }
    }

    assert_backbone_unchanged(model, &frozen_before)?;

    let last = snapshot(model, sched.total_epochs.saturating_sub(1), &adam, &history);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history })
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, Stream::Shuffle { epoch: epoch as u64 });
    order.shuffle(&mut rng);
    order
}

fn validation_loss(
    model: &DrVNet,
    val: &[RetinalSample],
    weights: &LossWeights,
    forward: impl Fn(&DrVNet, &ndarray::Array3<f64>) -> Result<crate::network::ProbMap>,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for sample in val {
        let map = forward(model, &sample.image)?;
        total += composite_parts(&map, &sample.annotation, weights)?.total;
    }
    Ok(Some(total / val.len() as f64))
}

/// Every backbone tensor (parameters and state) by name.
fn frozen_backbone_tensors(model: &DrVNet) -> IndexMap<String, ArrayD<f64>> {
    let mut tensors = IndexMap::new();
    model.visit_params(&mut |name, p| {
        if name.starts_with("backbone/") {
            tensors.insert(name.to_string(), p.clone());
        }
    });
    model.visit_state(&mut |name, s| {
        if name.starts_with("backbone/") {
            tensors.insert(name.to_string(), s.clone());
        }
    });
    tensors
}

fn assert_backbone_unchanged(
    model: &DrVNet,
    before: &IndexMap<String, ArrayD<f64>>,
) -> Result<()> {
    let after = frozen_backbone_tensors(model);
    if after.len() != before.len() {
        return Err(Error::Internal(format!(
            "backbone tensor count changed during phase 2: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    for (name, b) in before {
        match after.get(name) {
            Some(a) if a == b => {}
            Some(_) => {
                return Err(Error::Internal(format!(
                    "frozen backbone tensor `{name}` changed during phase 2"
                )))
            }
            None => {
                return Err(Error::Internal(format!(
                    "frozen backbone tensor `{name}` disappeared during phase 2"
                )))
            }
        }
    }
    Ok(())
}
