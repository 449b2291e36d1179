//! Reference retraining runs the main pipeline is compared against.
//!
//! Plain head retraining is the control arm: identical optimizer, schedule,
//! and randomness, but cross entropy only. It is written as its own loop
//! rather than delegating to the composition-aware trainer, so the claim
//! that the weighted run reduces to it at weight zero is checked across two
//! independent implementations.
//!
//! The group-balanced retrain is an upper reference that cheats: it reads
//! the generator's ground-truth group labels to subsample a balanced
//! training set. Nothing in the main pipeline is allowed to do that, and
//! the audit test at the bottom enforces it textually.

use ndarray::Array2;

use crate::backbone::{softmax_cross_entropy, AdamHead, SplitModel};
use crate::error::{DacError, Result};
use crate::evaluation::group_metrics;
use crate::streams;
use crate::synthdata::{group_counts, ImageExample};
use crate::trainer::{embed_all, EpochLog, RetrainOutcome};

use serde::{Deserialize, Serialize};

/// Optimizer and schedule knobs for a cross-entropy-only head retrain. The
/// defaults match the composition-aware trainer so paired runs differ only
/// in the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for PlainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 5e-3,
            lr_step: 5,
            lr_gamma: 0.5,
            seed: 0,
        }
    }
}

impl PlainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DacError::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DacError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return Err(DacError::invalid("lr_gamma must be positive"));
        }
        Ok(())
    }

    /// The schedule half of a composition-aware config, for paired runs.
    pub fn matching(config: &crate::trainer::DacConfig) -> Self {
        Self {
            epochs: config.epochs,
            batch_size: config.batch_size,
            lr: config.lr,
            lr_step: config.lr_step,
            lr_gamma: config.lr_gamma,
            seed: config.seed,
        }
    }
}

/// Retrains only the head with plain cross entropy over frozen embeddings.
/// Shares the low-level kernels (embedding, loss, optimizer, shuffling
/// streams) with the composition-aware trainer but owns its own loop.
pub fn retrain_plain(
    model: &SplitModel,
    train: &[ImageExample],
    val: &[ImageExample],
    config: &PlainConfig,
) -> Result<RetrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DacError::invalid("training and validation splits must be nonempty"));
    }
    let embeddings = embed_all(model, train, 256)?;
    let mut head = model.head.clone();
    let (classes, dim) = head.weight.dim();
    let mut adam = AdamHead::new(classes, dim);
    let mut eval_model = model.clone();
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = crate::backbone::stepped_lr(config.lr, config.lr_gamma, config.lr_step, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = streams::stream(config.seed, streams::SHUFFLE, &[epoch as u64]);
        streams::shuffle_in_place(&mut order, &mut rng);

        let mut ce_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut emb = Array2::<f32>::zeros((chunk.len(), dim));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                emb.row_mut(row).assign(&embeddings.row(i));
                labels.push(train[i].label);
            }
            let logits = head.logits(&emb);
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(DacError::Diverged {
                    epoch,
                    detail: format!("cross entropy became {loss}"),
                });
            }
            ce_sum += loss * chunk.len() as f64;
            let (dw, db, _) = head.backward(&emb, &dlogits);
            adam.step(&mut head, &dw, &db, lr);
        }

        let l_ce = ce_sum / train.len() as f64;
        eval_model.head = head.clone();
        let metrics = group_metrics(&eval_model, val)?;
        logs.push(EpochLog {
            epoch,
            l_ce,
            l_comb: 0.0,
            l_total: l_ce,
            worst_group_val: metrics.worst,
            avg_val: metrics.average,
            skip_count: 0,
        });
    }

    Ok(RetrainOutcome {
        model: SplitModel {
            features: model.features.clone(),
            head,
            shape: model.shape,
        },
        logs,
        selections: Vec::new(),
    })
}

/// Subsamples every group down to the smallest group's size, seeded and
/// deterministic. The result preserves the original relative order within
/// each group's survivors.
pub fn group_balanced_subsample(
    examples: &[ImageExample],
    seed: u64,
) -> Result<Vec<ImageExample>> {
    let counts = group_counts(examples);
    if counts.is_empty() {
        return Err(DacError::invalid("cannot balance an empty example list"));
    }
    let min_size = *counts.values().min().expect("counts is nonempty");
    let mut keep: Vec<usize> = Vec::with_capacity(min_size * counts.len());
    for (group_idx, (group, _)) in counts.iter().enumerate() {
        let mut members: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group() == *group)
            .map(|(i, _)| i)
            .collect();
        let mut rng = streams::stream(seed, streams::BALANCE, &[group_idx as u64]);
        streams::shuffle_in_place(&mut members, &mut rng);
        members.truncate(min_size);
        members.sort_unstable();
        keep.extend(members);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| examples[i].clone()).collect())
}

/// Retrains the head on a group-balanced subsample built from ground-truth
/// group labels. An oracle reference only; the main pipeline must never
/// call it.
pub fn retrain_group_balanced(
    model: &SplitModel,
    train: &[ImageExample],
    val: &[ImageExample],
    config: &PlainConfig,
) -> Result<RetrainOutcome> {
    let balanced = group_balanced_subsample(train, config.seed)?;
    retrain_plain(model, &balanced, val, config)
}
