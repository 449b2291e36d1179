//! Group-level metrics and diagnostics.
//!
//! Accuracy is reported per (label, spurious) group, with the average taken
//! unweighted over groups so that a model cruising on the majority pattern
//! cannot hide its minority failures. The loss-quantile diagnostics ask
//! where a trained model's attention sits (causal region vs the rest) and
//! where minority examples land in the loss distribution; together they
//! show whether low loss was bought with the spurious signal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::{region_mean_score, xgradcam_batch, AttributionMap};
use crate::backbone::{cross_entropy_each, LogitFn, SplitModel};
use crate::error::{DacError, Result};
use crate::masking::BinaryMask;
use crate::synthdata::{images_tensor, Group, ImageExample};

const EVAL_BATCH: usize = 256;

/// Accuracy broken down by group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Group key ("y0s1") to accuracy, nonempty groups only.
    pub per_group: BTreeMap<String, f64>,
    /// Group key to example count.
    pub counts: BTreeMap<String, usize>,
    /// Minimum accuracy over nonempty groups.
    pub worst: f64,
    /// Unweighted mean over nonempty groups.
    pub average: f64,
    /// Plain accuracy over all examples, for comparison against the
    /// group-balanced average.
    pub sample_weighted_average: f64,
    /// Expected groups that had no examples and were left out.
    pub excluded: Vec<String>,
}

/// Where the model's attention sits, by loss quartile.
///
/// Buckets are rank quartiles: examples sorted by (loss, dataset index) and
/// split into four nearly equal runs, so bucket sizes differ by at most one
/// even under tied losses. Ties straddling a boundary resolve by index, the
/// lower index taking the lower bucket. `edges[0]` is the minimum loss and
/// `edges[k]` for k in 1..=4 is the largest loss inside bucket k-1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileAttentionStats {
    pub edges: [f64; 5],
    /// Mean attribution over the causal region, per bucket.
    pub causal: [f64; 4],
    /// Mean attribution over the rest of the image, per bucket.
    pub spurious: [f64; 4],
    pub counts: [usize; 4],
}

/// How minority and majority examples distribute over loss quartiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLossDistribution {
    pub edges: [f64; 5],
    /// P(bucket | minority), sums to 1.
    pub minority: [f64; 4],
    /// P(bucket | majority), sums to 1.
    pub majority: [f64; 4],
    pub n_minority: usize,
    pub n_majority: usize,
}

/// Sorts example indices by (loss, index) and cuts them into four runs of
/// nearly equal size. Returns the bucket of every example and the loss
/// edges (global minimum, then each bucket's maximum).
fn rank_quartiles(losses: &[f64]) -> Result<(Vec<usize>, [f64; 5])> {
    let n = losses.len();
    if n < 4 {
        return Err(DacError::invalid(format!(
            "need at least 4 examples to form loss quartiles, got {n}"
        )));
    }
    for (i, l) in losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(DacError::invalid(format!(
                "loss at index {i} is not finite: {l}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut bucket_of = vec![0usize; n];
    let mut edges = [0.0f64; 5];
    edges[0] = losses[order[0]];
    for b in 0..4 {
        let start = b * n / 4;
        let end = (b + 1) * n / 4;
        for &idx in &order[start..end] {
            bucket_of[idx] = b;
        }
        edges[b + 1] = losses[order[end - 1]];
    }
    Ok((bucket_of, edges))
}

/// Per-example losses and argmax predictions, batched to bound memory.
pub fn losses_and_predictions(
    model: &dyn LogitFn,
    examples: &[ImageExample],
) -> Result<(Vec<f64>, Vec<usize>)> {
    if examples.is_empty() {
        return Err(DacError::invalid("cannot evaluate an empty example list"));
    }
    let mut losses = Vec::with_capacity(examples.len());
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let images = images_tensor(chunk);
        let logits = model.logits(&images);
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        for l in cross_entropy_each(&logits, &labels) {
            losses.push(f64::from(l));
        }
        for row in logits.rows() {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("logits row is nonempty");
            preds.push(pred);
        }
    }
    Ok((losses, preds))
}

/// Group accuracies from precomputed predictions. The expected group set is
/// the cartesian product of observed labels and observed spurious values;
/// expected groups with no examples are excluded and recorded.
pub fn group_metrics_from_preds(
    preds: &[usize],
    examples: &[ImageExample],
) -> Result<GroupMetrics> {
    if preds.len() != examples.len() {
        return Err(DacError::invalid(format!(
            "{} predictions for {} examples",
            preds.len(),
            examples.len()
        )));
    }
    if examples.is_empty() {
        return Err(DacError::invalid("cannot evaluate an empty example list"));
    }
    let mut correct: BTreeMap<Group, usize> = BTreeMap::new();
    let mut total: BTreeMap<Group, usize> = BTreeMap::new();
    let mut labels = std::collections::BTreeSet::new();
    let mut spurious_values = std::collections::BTreeSet::new();
    let mut right_overall = 0usize;
    for (pred, ex) in preds.iter().zip(examples) {
        let g = ex.group();
        labels.insert(ex.label);
        spurious_values.insert(ex.spurious);
        *total.entry(g).or_insert(0) += 1;
        if *pred == ex.label {
            *correct.entry(g).or_insert(0) += 1;
            right_overall += 1;
        }
    }
    let mut per_group = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut worst = f64::INFINITY;
    let mut sum = 0.0;
    for &label in &labels {
        for &spurious in &spurious_values {
            let g = Group { label, spurious };
            match total.get(&g) {
                Some(&n) => {
                    let acc = *correct.get(&g).unwrap_or(&0) as f64 / n as f64;
                    per_group.insert(g.key(), acc);
                    counts.insert(g.key(), n);
                    worst = worst.min(acc);
                    sum += acc;
                }
                None => excluded.push(g.key()),
            }
        }
    }
    let present = per_group.len();
    Ok(GroupMetrics {
        worst,
        average: sum / present as f64,
        sample_weighted_average: right_overall as f64 / examples.len() as f64,
        per_group,
        counts,
        excluded,
    })
}

/// Runs the model and reports per-group accuracy.
pub fn group_metrics(model: &dyn LogitFn, examples: &[ImageExample]) -> Result<GroupMetrics> {
    let (_, preds) = losses_and_predictions(model, examples)?;
    group_metrics_from_preds(&preds, examples)
}

/// Attention statistics from precomputed losses and attribution maps.
/// `regions` holds each example's ground-truth causal region.
pub fn quantile_attention_stats_from(
    losses: &[f64],
    maps: &[AttributionMap],
    regions: &[BinaryMask],
) -> Result<QuantileAttentionStats> {
    if losses.len() != maps.len() || losses.len() != regions.len() {
        return Err(DacError::invalid(format!(
            "{} losses, {} maps, {} regions must all agree",
            losses.len(),
            maps.len(),
            regions.len()
        )));
    }
    let (bucket_of, edges) = rank_quartiles(losses)?;
    let mut causal_sum = [0.0f64; 4];
    let mut spurious_sum = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (i, (map, region)) in maps.iter().zip(regions).enumerate() {
        let b = bucket_of[i];
        causal_sum[b] += region_mean_score(map, region)?;
        spurious_sum[b] += region_mean_score(map, &region.invert())?;
        counts[b] += 1;
    }
    let mut causal = [0.0f64; 4];
    let mut spurious = [0.0f64; 4];
    for b in 0..4 {
        causal[b] = causal_sum[b] / counts[b] as f64;
        spurious[b] = spurious_sum[b] / counts[b] as f64;
    }
    Ok(QuantileAttentionStats { edges, causal, spurious, counts })
}

/// Computes losses and attribution maps with the model (attribution
/// targets the true label), then buckets attention by loss quartile.
pub fn quantile_attention_stats(
    model: &SplitModel,
    examples: &[ImageExample],
) -> Result<QuantileAttentionStats> {
    let (losses, _) = losses_and_predictions(model, examples)?;
    let mut maps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let images = images_tensor(chunk);
        let ids: Vec<String> = chunk.iter().map(|e| e.id.clone()).collect();
        let targets: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        maps.extend(xgradcam_batch(model, &images, &ids, &targets)?);
    }
    let regions: Vec<BinaryMask> =
        examples.iter().map(|e| e.causal_region.clone()).collect();
    quantile_attention_stats_from(&losses, &maps, &regions)
}

/// Distribution over loss quartiles from precomputed losses and minority
/// flags.
pub fn group_loss_distribution_from(
    losses: &[f64],
    minority: &[bool],
) -> Result<GroupLossDistribution> {
    if losses.len() != minority.len() {
        return Err(DacError::invalid(format!(
            "{} losses for {} minority flags",
            losses.len(),
            minority.len()
        )));
    }
    let n_minority = minority.iter().filter(|&&m| m).count();
    let n_majority = minority.len() - n_minority;
    if n_minority == 0 {
        return Err(DacError::invalid(
            "no minority examples; the distribution is undefined",
        ));
    }
    if n_majority == 0 {
        return Err(DacError::invalid(
            "no majority examples; the distribution is undefined",
        ));
    }
    let (bucket_of, edges) = rank_quartiles(losses)?;
    let mut minority_mass = [0.0f64; 4];
    let mut majority_mass = [0.0f64; 4];
    for (i, &is_min) in minority.iter().enumerate() {
        if is_min {
            minority_mass[bucket_of[i]] += 1.0;
        } else {
            majority_mass[bucket_of[i]] += 1.0;
        }
    }
    for b in 0..4 {
        minority_mass[b] /= n_minority as f64;
        majority_mass[b] /= n_majority as f64;
    }
    Ok(GroupLossDistribution {
        edges,
        minority: minority_mass,
        majority: majority_mass,
        n_minority,
        n_majority,
    })
}

/// Runs the model and reports where minority examples sit in the loss
/// distribution. Minority means the spurious value disagrees with the
/// label.
pub fn group_loss_distribution(
    model: &dyn LogitFn,
    examples: &[ImageExample],
) -> Result<GroupLossDistribution> {
    let (losses, _) = losses_and_predictions(model, examples)?;
    let minority: Vec<bool> = examples.iter().map(|e| e.group().is_minority()).collect();
    group_loss_distribution_from(&losses, &minority)
}

/// Intersection over union of two masks' keep-sets (bits equal to 1).
/// Both keep-sets empty counts as perfect agreement.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.bits.dim() != b.bits.dim() {
        return Err(DacError::invalid(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.bits.dim(),
            b.bits.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(b.bits.iter()) {
        match (x, y) {
            (1, 1) => {
                inter += 1;
                union += 1;
            }
            (0, 0) => {}
            _ => union += 1,
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}
