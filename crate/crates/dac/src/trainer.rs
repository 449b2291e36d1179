//! Full-model training and attention-guided head retraining.
//!
//! The base model trains with plain cross entropy. Retraining then freezes
//! the feature extractor and fits a fresh head on two loss terms: cross
//! entropy on the original batch, plus a weighted term on counterfactual
//! compositions built from the batch's most confidently handled examples.
//! Selection uses the frozen base model's per-example losses, precomputed
//! once into a cache, so the selected set depends only on the base model
//! and never drifts with the head being trained.

use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::backbone::{softmax_cross_entropy, SplitModel};
use crate::composer::{batch_mean, build_composed_set, ComposedSet, Donor, FillColor};
use crate::error::{DacError, Result};
use crate::evaluation::{group_metrics, losses_and_predictions};
use crate::masking::{GridSpec, MaskCache};
use crate::streams;
use crate::synthdata::ImageExample;

/// Settings for base-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays; 0 disables decay.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for ErmConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_step: 0,
            lr_gamma: 0.5,
            seed: 0,
        }
    }
}

impl ErmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DacError::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DacError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DacError::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(DacError::invalid("weight_decay must be finite and nonnegative"));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return Err(DacError::invalid("lr_gamma must be positive"));
        }
        Ok(())
    }
}

/// How retraining picks the examples worth composing from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The lowest-loss portion of each batch, sized by `q`.
    LossQuantile,
    /// Exactly the correctly classified examples; ignores `q`.
    Correct,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::LossQuantile => "erm_loss_quantile",
            SelectionMode::Correct => "erm_correct",
        }
    }
}

/// Settings for head retraining with composed examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DacConfig {
    /// Weight of the composition loss term.
    pub alpha: f64,
    /// Portion of each batch selected as donors, in (0, 1].
    pub q: f64,
    /// True trusts the masks as causal-region estimates; false inverts
    /// them, trusting the complement instead.
    pub causal_flag: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    /// Probe grid used at the masking stage; recorded here so one config
    /// describes the whole retraining run.
    pub grid: GridSpec,
    pub sensitivity: f64,
    pub selection: SelectionMode,
    pub seed: u64,
}

impl Default for DacConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            q: 0.5,
            causal_flag: true,
            epochs: 10,
            batch_size: 64,
            lr: 5e-3,
            lr_step: 5,
            lr_gamma: 0.5,
            grid: GridSpec::default(),
            sensitivity: 1.0,
            selection: SelectionMode::LossQuantile,
            seed: 0,
        }
    }
}

impl DacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(DacError::invalid(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(DacError::invalid(format!("q must lie in (0, 1], got {}", self.q)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DacError::invalid("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DacError::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_gamma.is_finite() && self.lr_gamma > 0.0) {
            return Err(DacError::invalid("lr_gamma must be positive"));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(DacError::invalid("sensitivity must be positive"));
        }
        self.grid.points().map(|_| ())
    }
}

/// What one batch's donor selection was and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub epoch: usize,
    pub batch_id: usize,
    pub selected: Vec<String>,
    /// The cached base-model losses the decision used, aligned with
    /// `selected`.
    pub losses: Vec<f64>,
    pub mode: String,
}

/// One training epoch's losses and validation metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_comb: f64,
    pub l_total: f64,
    pub worst_group_val: f64,
    pub avg_val: f64,
    /// Selected donors that found no composition partner.
    pub skip_count: usize,
}

/// Frozen per-example losses and predictions of a trained base model,
/// aligned with the training split's example order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCache {
    pub checkpoint_hash: String,
    pub ids: Vec<String>,
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl LossCache {
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let cache: LossCache = serde_json::from_slice(&std::fs::read(path)?)?;
        if cache.ids.len() != cache.losses.len() || cache.ids.len() != cache.predictions.len() {
            return Err(DacError::Integrity {
                what: format!("loss cache at {}", path.display()),
                expected: "equal id, loss, and prediction counts".into(),
                actual: format!(
                    "{} ids, {} losses, {} predictions",
                    cache.ids.len(),
                    cache.losses.len(),
                    cache.predictions.len()
                ),
            });
        }
        Ok(cache)
    }

    /// Confirms this cache was computed by `model`.
    pub fn check_model(&self, model: &SplitModel) -> Result<()> {
        let actual = model.weight_hash();
        if self.checkpoint_hash != actual {
            return Err(DacError::Stale {
                what: "loss cache".into(),
                expected: self.checkpoint_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Confirms the cache rows line up with `examples` one to one.
    pub fn check_alignment(&self, examples: &[ImageExample]) -> Result<()> {
        if self.ids.len() != examples.len() {
            return Err(DacError::invalid(format!(
                "loss cache covers {} examples, dataset has {}",
                self.ids.len(),
                examples.len()
            )));
        }
        for (cached, ex) in self.ids.iter().zip(examples) {
            if cached != &ex.id {
                return Err(DacError::invalid(format!(
                    "loss cache order mismatch: cached {cached:?} vs dataset {:?}",
                    ex.id
                )));
            }
        }
        Ok(())
    }
}

/// Runs the base model over the training split once and freezes its
/// per-example losses and predictions.
pub fn compute_loss_cache(model: &SplitModel, examples: &[ImageExample]) -> Result<LossCache> {
    let (losses, predictions) = losses_and_predictions(model, examples)?;
    Ok(LossCache {
        checkpoint_hash: model.weight_hash(),
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        losses,
        predictions,
    })
}

fn gather_batch(examples: &[ImageExample], indices: &[usize]) -> (Array4<f32>, Vec<usize>) {
    let (c, h, w) = examples[indices[0]].image.dim();
    let mut images = Array4::<f32>::zeros((indices.len(), c, h, w));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        images
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&examples[i].image);
        labels.push(examples[i].label);
    }
    (images, labels)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = streams::stream(seed, streams::SHUFFLE, &[epoch as u64]);
    streams::shuffle_in_place(&mut order, &mut rng);
    order
}

/// Trains the whole model with cross entropy and momentum SGD. Returns one
/// log record per epoch; the model is updated in place. Deterministic for
/// a fixed config.
pub fn train_erm(
    model: &mut SplitModel,
    train: &[ImageExample],
    val: &[ImageExample],
    config: &ErmConfig,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DacError::invalid("training and validation splits must be nonempty"));
    }
    let mut opt = crate::backbone::SgdMomentum::new(
        config.lr as f32,
        config.momentum as f32,
        config.weight_decay as f32,
    );
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        opt.lr = crate::backbone::stepped_lr(config.lr, config.lr_gamma, config.lr_step, epoch);
        let order = shuffled_indices(train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = gather_batch(train, chunk);
            let trace = model.forward_trace(&images);
            let (loss, dlogits) = softmax_cross_entropy(&trace.logits, &labels);
            if !loss.is_finite() {
                return Err(DacError::Diverged {
                    epoch,
                    detail: format!("cross entropy became {loss}"),
                });
            }
            let grads = model.backward(&trace, &dlogits);
            opt.step(model, &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let l_ce = loss_sum / train.len() as f64;
        let metrics = group_metrics(&*model, val)?;
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
    Ok(logs)
}

/// Picks the `max(1, floor(q * batch_size))` batch members with the lowest
/// cached loss. Ties resolve toward the smaller dataset index. Returns the
/// chosen dataset indices in ascending-loss order plus the audit record.
pub fn select_low_loss(
    epoch: usize,
    batch_id: usize,
    batch: &[usize],
    cache: &LossCache,
    q: f64,
) -> Result<(Vec<usize>, SelectionRecord)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(DacError::invalid(format!("q must lie in (0, 1], got {q}")));
    }
    if batch.is_empty() {
        return Err(DacError::invalid("cannot select from an empty batch"));
    }
    let k = ((q * batch.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = batch.to_vec();
    order.sort_by(|&a, &b| cache.losses[a].total_cmp(&cache.losses[b]).then(a.cmp(&b)));
    order.truncate(k);
    let record = SelectionRecord {
        epoch,
        batch_id,
        selected: order.iter().map(|&i| cache.ids[i].clone()).collect(),
        losses: order.iter().map(|&i| cache.losses[i]).collect(),
        mode: SelectionMode::LossQuantile.as_str().into(),
    };
    Ok((order, record))
}

/// Picks exactly the batch members the base model classified correctly.
/// May be empty, in which case the batch composes nothing.
pub fn select_correct(
    epoch: usize,
    batch_id: usize,
    batch: &[usize],
    cache: &LossCache,
    examples: &[ImageExample],
) -> (Vec<usize>, SelectionRecord) {
    let selected: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| cache.predictions[i] == examples[i].label)
        .collect();
    let record = SelectionRecord {
        epoch,
        batch_id,
        selected: selected.iter().map(|&i| cache.ids[i].clone()).collect(),
        losses: selected.iter().map(|&i| cache.losses[i]).collect(),
        mode: SelectionMode::Correct.as_str().into(),
    };
    (selected, record)
}

/// Combined objective: `mean(ce) + alpha * mean(comb)`, where an empty
/// composition term contributes nothing.
pub fn total_loss(ce: &[f64], comb: &[f64], alpha: f64) -> f64 {
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    mean(ce) + alpha * mean(comb)
}

/// Everything a retraining run produces: the retrained model, per-epoch
/// logs, and the per-batch selection audit trail.
#[derive(Debug)]
pub struct RetrainOutcome {
    pub model: SplitModel,
    pub logs: Vec<EpochLog>,
    pub selections: Vec<SelectionRecord>,
}

/// Precomputed frozen embeddings of a split, batched to bound peak memory.
pub fn embed_all(model: &SplitModel, examples: &[ImageExample], batch: usize) -> Result<Array2<f32>> {
    if examples.is_empty() {
        return Err(DacError::invalid("cannot embed an empty example list"));
    }
    let dim = model.head.weight.dim().1;
    let mut out = Array2::<f32>::zeros((examples.len(), dim));
    let mut row = 0usize;
    for chunk in examples.chunks(batch) {
        let (images, _) = gather_batch(chunk, &(0..chunk.len()).collect::<Vec<_>>());
        let emb = model.embed(&images);
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..]).assign(&emb);
        row += chunk.len();
    }
    Ok(out)
}

/// Retrains only the head. Original images contribute cross entropy
/// through frozen precomputed embeddings; selected donors are composed
/// pairwise and the compositions contribute a second loss term weighted by
/// `alpha`. At `alpha = 0` composition is skipped entirely and the run
/// reduces to plain head retraining, consuming identical randomness.
///
/// Both caches must have been produced by `model`; a hash mismatch is a
/// staleness error before any training happens.
pub fn dac_retrain(
    model: &SplitModel,
    train: &[ImageExample],
    val: &[ImageExample],
    mask_cache: &MaskCache,
    loss_cache: &LossCache,
    config: &DacConfig,
) -> Result<RetrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DacError::invalid("training and validation splits must be nonempty"));
    }
    loss_cache.check_model(model)?;
    loss_cache.check_alignment(train)?;
    let model_hash = model.weight_hash();
    if mask_cache.index.checkpoint_hash != model_hash {
        return Err(DacError::Stale {
            what: "mask cache".into(),
            expected: mask_cache.index.checkpoint_hash.clone(),
            actual: model_hash,
        });
    }

    let compose_enabled = config.alpha > 0.0;
    let fill = mask_cache.index.fill.clone();
    let embeddings = embed_all(model, train, 256)?;
    let masks = if compose_enabled {
        let mut masks = Vec::with_capacity(train.len());
        for ex in train {
            masks.push(mask_cache.load_mask(&ex.id)?);
        }
        masks
    } else {
        Vec::new()
    };

    let feature_hash_before = model.feature_hash();
    let mut head = model.head.clone();
    let (classes, dim) = head.weight.dim();
    let mut adam = crate::backbone::AdamHead::new(classes, dim);
    let mut eval_model = model.clone();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut selections = Vec::new();

    for epoch in 1..=config.epochs {
        let lr = crate::backbone::stepped_lr(config.lr, config.lr_gamma, config.lr_step, epoch);
        let order = shuffled_indices(train.len(), config.seed, epoch);
        let mut ce_sum = 0.0;
        let mut comb_sum = 0.0;
        let mut comb_batches = 0usize;
        let mut skip_count = 0usize;

        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut emb = Array2::<f32>::zeros((chunk.len(), dim));
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                emb.row_mut(row).assign(&embeddings.row(i));
                labels.push(train[i].label);
            }
            let logits = head.logits(&emb);
            let (ce_loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !ce_loss.is_finite() {
                return Err(DacError::Diverged {
                    epoch,
                    detail: format!("cross entropy became {ce_loss}"),
                });
            }
            ce_sum += ce_loss * chunk.len() as f64;
            let (mut dw, mut db, _) = head.backward(&emb, &dlogits);

            if compose_enabled {
                let (selected, record) = match config.selection {
                    SelectionMode::LossQuantile => {
                        select_low_loss(epoch, batch_id, chunk, loss_cache, config.q)?
                    }
                    SelectionMode::Correct => {
                        select_correct(epoch, batch_id, chunk, loss_cache, train)
                    }
                };
                selections.push(record);
                if !selected.is_empty() {
                    let donors: Vec<Donor> = selected
                        .iter()
                        .map(|&i| Donor {
                            id: &train[i].id,
                            label: train[i].label,
                            image: &train[i].image,
                            mask: &masks[i],
                        })
                        .collect();
                    use rand::Rng as _;
                    let set_seed = streams::stream(
                        config.seed,
                        streams::PAIRING,
                        &[epoch as u64, batch_id as u64],
                    )
                    .random::<u64>();
                    let composed: ComposedSet =
                        build_composed_set(&donors, config.causal_flag, &fill, set_seed)?;
                    skip_count += composed.skipped;
                    if !composed.examples.is_empty() {
                        let n = composed.examples.len();
                        let (c, h, w) = composed.examples[0].image.dim();
                        let mut images = Array4::<f32>::zeros((n, c, h, w));
                        let mut comp_labels = Vec::with_capacity(n);
                        for (row, ex) in composed.examples.iter().enumerate() {
                            images.index_axis_mut(ndarray::Axis(0), row).assign(&ex.image);
                            comp_labels.push(ex.label);
                        }
                        let comp_emb = model.embed(&images);
                        let comp_logits = head.logits(&comp_emb);
                        let (comb_loss, dlogits_c) =
                            softmax_cross_entropy(&comp_logits, &comp_labels);
                        if !comb_loss.is_finite() {
                            return Err(DacError::Diverged {
                                epoch,
                                detail: format!("composition loss became {comb_loss}"),
                            });
                        }
                        comb_sum += comb_loss;
                        comb_batches += 1;
                        let (dwc, dbc, _) = head.backward(&comp_emb, &dlogits_c);
                        let a = config.alpha as f32;
                        dw.zip_mut_with(&dwc, |g, &gc| *g += a * gc);
                        db.zip_mut_with(&dbc, |g, &gc| *g += a * gc);
                    }
                }
            }
            adam.step(&mut head, &dw, &db, lr);
        }

        let l_ce = ce_sum / train.len() as f64;
        let l_comb = if comb_batches > 0 { comb_sum / comb_batches as f64 } else { 0.0 };
        eval_model.head = head.clone();
        let metrics = group_metrics(&eval_model, val)?;
        logs.push(EpochLog {
            epoch,
            l_ce,
            l_comb,
            l_total: l_ce + config.alpha * l_comb,
            worst_group_val: metrics.worst,
            avg_val: metrics.average,
            skip_count,
        });
    }

    let outcome_model = SplitModel {
        features: model.features.clone(),
        head,
        shape: model.shape,
    };
    debug_assert_eq!(outcome_model.feature_hash(), feature_hash_before);
    Ok(RetrainOutcome {
        model: outcome_model,
        logs,
        selections,
    })
}

/// Mean pixel color over a split, the canonical fill for masking probes
/// and composition backgrounds.
pub fn split_mean_fill(examples: &[ImageExample]) -> Result<FillColor> {
    let indices: Vec<usize> = (0..examples.len()).collect();
    if indices.is_empty() {
        return Err(DacError::invalid("cannot average an empty example list"));
    }
    let (images, _) = gather_batch(examples, &indices);
    batch_mean(&images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelShape;
    use crate::masking::{AdaptiveMaskResult, BinaryMask, LossCurve};
    use crate::synthdata::{generate, GenConfig};
    use ndarray::{Array2 as NdArray2, Array3};
    use proptest::prelude::*;

    fn toy_example(id: &str, label: usize, value: f32) -> ImageExample {
        ImageExample {
            id: id.into(),
            image: Array3::from_elem((3, 8, 8), value),
            label,
            spurious: label,
            causal_region: BinaryMask::from_bits(NdArray2::ones((8, 8))).unwrap(),
        }
    }

    /// Two constant-brightness classes: separable by any useful feature.
    fn toy_dataset(n_per_class: usize) -> Vec<ImageExample> {
        let mut out = Vec::new();
        for i in 0..n_per_class {
            out.push(toy_example(&format!("a-{i:03}"), 0, 0.2));
            out.push(toy_example(&format!("b-{i:03}"), 1, 0.8));
        }
        out
    }

    fn toy_model(seed: u64) -> SplitModel {
        SplitModel::new(
            ModelShape { channels_in: 3, height: 8, width: 8, classes: 2 },
            seed,
        )
        .unwrap()
    }

    fn toy_cache(model: &SplitModel, examples: &[ImageExample]) -> LossCache {
        compute_loss_cache(model, examples).unwrap()
    }

    #[test]
    fn erm_fits_a_separable_toy_set() {
        let data = toy_dataset(8);
        let mut model = toy_model(1);
        let config = ErmConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.05,
            weight_decay: 0.0,
            seed: 7,
            ..ErmConfig::default()
        };
        let logs = train_erm(&mut model, &data, &data, &config).unwrap();
        assert_eq!(logs.len(), 30);
        let (_, preds) = losses_and_predictions(&model, &data).unwrap();
        let correct = preds
            .iter()
            .zip(&data)
            .filter(|(p, e)| **p == e.label)
            .count();
        assert_eq!(correct, data.len(), "separable toy set must be fully fit");
        assert!(logs.last().unwrap().l_ce < logs[0].l_ce);
    }

    #[test]
    fn erm_is_deterministic_under_a_fixed_seed() {
        let data = toy_dataset(4);
        let config = ErmConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..ErmConfig::default()
        };
        let mut a = toy_model(2);
        let mut b = toy_model(2);
        train_erm(&mut a, &data, &data, &config).unwrap();
        train_erm(&mut b, &data, &data, &config).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }

    #[test]
    fn erm_reports_divergence_with_the_epoch() {
        let data = toy_dataset(4);
        let mut model = toy_model(3);
        let config = ErmConfig {
            epochs: 5,
            batch_size: 4,
            lr: 1e8,
            seed: 1,
            ..ErmConfig::default()
        };
        match train_erm(&mut model, &data, &data, &config) {
            Err(DacError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_training_configs_are_rejected() {
        let bad_epochs = ErmConfig { epochs: 0, ..ErmConfig::default() };
        assert!(bad_epochs.validate().is_err());
        let bad_lr = ErmConfig { lr: 0.0, ..ErmConfig::default() };
        assert!(bad_lr.validate().is_err());
        let bad_q = DacConfig { q: 0.0, ..DacConfig::default() };
        assert!(bad_q.validate().is_err());
        let bad_alpha = DacConfig { alpha: -1.0, ..DacConfig::default() };
        assert!(bad_alpha.validate().is_err());
        let ok = DacConfig { q: 1.0, alpha: 0.0, ..DacConfig::default() };
        assert!(ok.validate().is_ok());
    }

    fn cache_of(losses: &[f64]) -> LossCache {
        LossCache {
            checkpoint_hash: "test".into(),
            ids: (0..losses.len()).map(|i| format!("x-{i:03}")).collect(),
            losses: losses.to_vec(),
            predictions: vec![0; losses.len()],
        }
    }

    #[test]
    fn low_loss_selection_takes_the_smallest_half() {
        let cache = cache_of(&[0.1, 0.9, 0.2, 0.5]);
        let (picked, record) =
            select_low_loss(1, 0, &[0, 1, 2, 3], &cache, 0.5).unwrap();
        assert_eq!(picked, vec![0, 2]);
        assert_eq!(record.selected, vec!["x-000".to_string(), "x-002".to_string()]);
        assert_eq!(record.losses, vec![0.1, 0.2]);
        assert_eq!(record.mode, "erm_loss_quantile");
    }

    #[test]
    fn q_one_selects_the_whole_batch() {
        let cache = cache_of(&[0.3, 0.1, 0.2]);
        let (picked, _) = select_low_loss(1, 0, &[0, 1, 2], &cache, 1.0).unwrap();
        assert_eq!(picked.len(), 3);
        assert_eq!(picked, vec![1, 2, 0], "ordered by ascending loss");
    }

    #[test]
    fn equal_losses_select_the_smallest_dataset_indices() {
        let cache = cache_of(&[0.5; 8]);
        let batch: Vec<usize> = (0..8).rev().collect();
        let (picked, _) = select_low_loss(1, 0, &batch, &cache, 0.25).unwrap();
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn correct_selection_matches_predictions() {
        let examples = toy_dataset(3);
        let mut cache = cache_of(&[0.1; 6]);
        // Labels alternate 0, 1, 0, 1, ...; predict 0 everywhere, so only
        // even indices are correct.
        cache.predictions = vec![0; 6];
        let batch: Vec<usize> = (0..6).collect();
        let (picked, record) = select_correct(1, 0, &batch, &cache, &examples);
        assert_eq!(picked, vec![0, 2, 4]);
        assert_eq!(record.mode, "erm_correct");

        cache.predictions = vec![1, 0, 1, 0, 1, 0];
        let (none, _) = select_correct(1, 0, &batch, &cache, &examples);
        assert!(none.is_empty());

        cache.predictions = examples.iter().map(|e| e.label).collect();
        let (all, _) = select_correct(1, 0, &batch, &cache, &examples);
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn total_loss_hand_cases() {
        assert_eq!(total_loss(&[0.4], &[0.2], 5.0), 0.4 + 5.0 * 0.2);
        assert_eq!(total_loss(&[0.7, 0.3], &[9.9], 0.0), 0.5);
        assert_eq!(total_loss(&[0.6], &[], 5.0), 0.6);
    }

    fn uniform_mask_cache(
        dir: &std::path::Path,
        model: &SplitModel,
        examples: &[ImageExample],
        p_star: f64,
    ) -> MaskCache {
        let (_, h, w) = examples[0].image.dim();
        let grid = vec![0.0, 0.25, 0.5];
        let entries: Vec<(String, AdaptiveMaskResult)> = examples
            .iter()
            .map(|ex| {
                let keep = ((1.0 - p_star) * (h * w) as f64).ceil() as usize;
                let mut bits = NdArray2::<u8>::zeros((h, w));
                for (i, b) in bits.iter_mut().enumerate() {
                    *b = u8::from(i < keep);
                }
                let mask = BinaryMask::from_bits(bits).unwrap();
                let result = AdaptiveMaskResult {
                    mask,
                    curve: LossCurve::new(grid.clone(), vec![0.1, 0.2, 0.3]).unwrap(),
                    p_star,
                    knee_found: true,
                };
                (ex.id.clone(), result)
            })
            .collect();
        MaskCache::write(
            dir,
            &model.weight_hash(),
            &grid,
            1.0,
            &FillColor::uniform(0.5, 3),
            &entries,
        )
        .unwrap()
    }

    #[test]
    fn retrain_rejects_stale_caches() {
        let data = toy_dataset(4);
        let model_a = toy_model(4);
        let model_b = toy_model(5);
        let dir = tempfile::tempdir().unwrap();
        let mask_cache = uniform_mask_cache(dir.path(), &model_a, &data, 0.25);
        let fresh_cache = toy_cache(&model_a, &data);
        let stale_cache = toy_cache(&model_b, &data);
        let config = DacConfig { epochs: 1, batch_size: 4, ..DacConfig::default() };
        match dac_retrain(&model_a, &data, &data, &mask_cache, &stale_cache, &config) {
            Err(DacError::Stale { .. }) => {}
            other => panic!("expected staleness error, got {other:?}"),
        }
        // A mask cache from the wrong model fails the same way.
        let dir_b = tempfile::tempdir().unwrap();
        let wrong_masks = uniform_mask_cache(dir_b.path(), &model_b, &data, 0.25);
        match dac_retrain(&model_a, &data, &data, &wrong_masks, &fresh_cache, &config) {
            Err(DacError::Stale { .. }) => {}
            other => panic!("expected staleness error, got {other:?}"),
        }
    }

    #[test]
    fn retrain_rejects_misaligned_loss_cache() {
        let data = toy_dataset(4);
        let model = toy_model(4);
        let dir = tempfile::tempdir().unwrap();
        let mask_cache = uniform_mask_cache(dir.path(), &model, &data, 0.25);
        let mut cache = toy_cache(&model, &data);
        cache.ids.swap(0, 1);
        let config = DacConfig { epochs: 1, batch_size: 4, ..DacConfig::default() };
        assert!(dac_retrain(&model, &data, &data, &mask_cache, &cache, &config).is_err());
    }

    #[test]
    fn retrain_changes_only_the_head() {
        let data = toy_dataset(6);
        let model = toy_model(6);
        let dir = tempfile::tempdir().unwrap();
        let mask_cache = uniform_mask_cache(dir.path(), &model, &data, 0.25);
        let loss_cache = toy_cache(&model, &data);
        let config = DacConfig {
            epochs: 2,
            batch_size: 6,
            alpha: 2.0,
            q: 0.5,
            seed: 3,
            ..DacConfig::default()
        };
        let outcome =
            dac_retrain(&model, &data, &data, &mask_cache, &loss_cache, &config).unwrap();
        assert_eq!(outcome.model.feature_hash(), model.feature_hash());
        assert_ne!(outcome.model.weight_hash(), model.weight_hash());
        assert_eq!(outcome.logs.len(), 2);
        for log in &outcome.logs {
            assert!(log.l_ce.is_finite());
            assert!(log.l_comb.is_finite());
            assert!(log.l_comb > 0.0, "alpha > 0 must exercise composition");
        }
        assert!(!outcome.selections.is_empty());
        for record in &outcome.selections {
            assert_eq!(record.selected.len(), 3, "q=0.5 of a 6-batch selects 3");
        }
    }

    #[test]
    fn retrain_is_deterministic_and_alpha_zero_skips_composition() {
        let data = toy_dataset(6);
        let model = toy_model(7);
        let dir = tempfile::tempdir().unwrap();
        let mask_cache = uniform_mask_cache(dir.path(), &model, &data, 0.25);
        let loss_cache = toy_cache(&model, &data);
        let config = DacConfig {
            epochs: 2,
            batch_size: 4,
            alpha: 0.0,
            seed: 11,
            ..DacConfig::default()
        };
        let a = dac_retrain(&model, &data, &data, &mask_cache, &loss_cache, &config).unwrap();
        let b = dac_retrain(&model, &data, &data, &mask_cache, &loss_cache, &config).unwrap();
        assert_eq!(a.model.weight_hash(), b.model.weight_hash());
        assert!(a.selections.is_empty(), "alpha = 0 never selects donors");
        for log in &a.logs {
            assert_eq!(log.l_comb, 0.0);
            assert_eq!(log.l_total, log.l_ce);
            assert_eq!(log.skip_count, 0);
        }
    }

    #[test]
    fn loss_cache_roundtrips_and_detects_length_tampering() {
        let data = toy_dataset(3);
        let model = toy_model(8);
        let cache = toy_cache(&model, &data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("losses.json");
        cache.write(&path).unwrap();
        let back = LossCache::read(&path).unwrap();
        assert_eq!(back.ids, cache.ids);
        assert_eq!(back.losses, cache.losses);
        assert_eq!(back.predictions, cache.predictions);
        back.check_model(&model).unwrap();
        back.check_alignment(&data).unwrap();

        let mut tampered: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        tampered["losses"].as_array_mut().unwrap().pop();
        std::fs::write(&path, serde_json::to_vec(&tampered).unwrap()).unwrap();
        match LossCache::read(&path) {
            Err(DacError::Integrity { .. }) => {}
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn embeddings_match_direct_forward() {
        let data = toy_dataset(5);
        let model = toy_model(9);
        let emb = embed_all(&model, &data, 3).unwrap();
        let indices: Vec<usize> = (0..data.len()).collect();
        let (images, _) = gather_batch(&data, &indices);
        let direct = model.embed(&images);
        assert_eq!(emb, direct);
    }

    #[test]
    fn training_on_the_synthetic_set_runs_end_to_end() {
        let gen = GenConfig {
            n_train: 32,
            n_val: 16,
            n_test: 8,
            correlation: 0.75,
            noise_std: 0.02,
            seed: 2,
            ..GenConfig::default()
        };
        let ds = generate(&gen).unwrap();
        let mut model = SplitModel::new(
            ModelShape {
                channels_in: 3,
                height: gen.height,
                width: gen.width,
                classes: 2,
            },
            13,
        )
        .unwrap();
        let erm = ErmConfig { epochs: 2, batch_size: 16, seed: 5, ..ErmConfig::default() };
        let logs = train_erm(&mut model, &ds.train, &ds.val, &erm).unwrap();
        assert_eq!(logs.len(), 2);
        let cache = compute_loss_cache(&model, &ds.train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mask_cache = uniform_mask_cache(dir.path(), &model, &ds.train, 0.5);
        let config = DacConfig {
            epochs: 2,
            batch_size: 16,
            alpha: 1.0,
            seed: 17,
            ..DacConfig::default()
        };
        let outcome =
            dac_retrain(&model, &ds.train, &ds.val, &mask_cache, &cache, &config).unwrap();
        assert_eq!(outcome.logs.len(), 2);
        assert!(outcome.logs.iter().all(|l| l.l_total.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_cardinality_is_exact(
            losses in proptest::collection::vec(0.0f64..10.0, 1..40),
            q in 0.01f64..=1.0
        ) {
            let cache = cache_of(&losses);
            let batch: Vec<usize> = (0..losses.len()).collect();
            let (picked, record) = select_low_loss(1, 0, &batch, &cache, q).unwrap();
            let expect = ((q * losses.len() as f64).floor() as usize).max(1);
            prop_assert_eq!(picked.len(), expect);
            prop_assert_eq!(record.selected.len(), expect);
            // Chosen losses are not exceeded by any unchosen loss.
            let max_picked = picked
                .iter()
                .map(|&i| losses[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for i in batch {
                if !picked.contains(&i) {
                    prop_assert!(losses[i] >= max_picked);
                }
            }
        }

        #[test]
        fn total_loss_is_linear_in_alpha(
            ce in proptest::collection::vec(0.0f64..5.0, 1..10),
            comb in proptest::collection::vec(0.0f64..5.0, 0..10),
            alpha in 0.0f64..10.0
        ) {
            let base = total_loss(&ce, &comb, 0.0);
            let weighted = total_loss(&ce, &comb, alpha);
            let comb_mean = if comb.is_empty() {
                0.0
            } else {
                comb.iter().sum::<f64>() / comb.len() as f64
            };
            prop_assert!((weighted - (base + alpha * comb_mean)).abs() < 1e-12);
        }
    }
}
