//! Per-pixel attribution via gradient-weighted class activation maps.
//!
//! Each channel of the last convolutional layer gets a weight proportional to
//! the sum of its activation-gradient product, normalized by the channel's
//! total activation mass. The weighted activation sum, rectified, upsampled
//! to image resolution, and min-max normalized, scores every pixel's
//! relevance to a chosen logit in [0,1].
//!
//! The backbone pools features with a global average and a linear head, so
//! the gradient of a logit with respect to a last-layer activation is a
//! per-channel constant: head weight divided by the spatial cell count. The
//! model path exploits that instead of running a full backward pass.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::backbone::SplitModel;
use crate::error::{DacError, Result};
use crate::masking::BinaryMask;

/// Axis-aligned pixel rectangle, `top`/`left` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top
            && row < self.top + self.height
            && col >= self.left
            && col < self.left + self.width
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(DacError::invalid("rectangle has zero area"));
        }
        if self.top + self.height > height || self.left + self.width > width {
            return Err(DacError::invalid(format!(
                "rectangle {self:?} does not fit in a {height}x{width} grid"
            )));
        }
        Ok(())
    }
}

/// Normalized per-pixel relevance scores for one image and one target logit.
///
/// Scores live in [0,1]; the maximum is exactly 1 unless the raw rectified
/// map was identically zero, in which case all scores are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub scores: Array2<f32>,
    pub image_id: String,
    pub target_label: usize,
}

impl AttributionMap {
    pub fn new(scores: Array2<f32>, image_id: &str, target_label: usize) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
            return Err(DacError::invalid(format!(
                "attribution scores must lie in [0,1], found {bad}"
            )));
        }
        Ok(Self {
            scores,
            image_id: image_id.to_string(),
            target_label,
        })
    }

    pub fn height(&self) -> usize {
        self.scores.dim().0
    }

    pub fn width(&self) -> usize {
        self.scores.dim().1
    }

    /// True when every score is zero (the raw map carried no signal).
    pub fn is_degenerate(&self) -> bool {
        self.scores.iter().all(|&s| s == 0.0)
    }
}

/// Rectified channel-weighted activation sum at feature resolution.
///
/// `activations` and `grads` are `channels x h x w`; the gradient is taken
/// with respect to the target logit. Accumulation runs in f64 in a fixed
/// order, so equal inputs give bit-equal outputs.
pub fn xgradcam_raw(activations: ArrayView3<f32>, grads: ArrayView3<f32>) -> Result<Array2<f32>> {
    if activations.dim() != grads.dim() {
        return Err(DacError::invalid(format!(
            "activation shape {:?} does not match gradient shape {:?}",
            activations.dim(),
            grads.dim()
        )));
    }
    let (c, h, w) = activations.dim();
    let mut alpha = vec![0.0f64; c];
    for k in 0..c {
        let mut weighted = 0.0f64;
        let mut mass = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let a = f64::from(activations[(k, i, j)]);
                let g = f64::from(grads[(k, i, j)]);
                weighted += g * a;
                mass += a;
            }
        }
        alpha[k] = weighted / (mass + XGRADCAM_EPS);
    }
    let mut raw = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f64;
            for k in 0..c {
                acc += alpha[k] * f64::from(activations[(k, i, j)]);
            }
            raw[(i, j)] = acc.max(0.0) as f32;
        }
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(DacError::invalid(
            "attribution produced non-finite values (check model weights)",
        ));
    }
    Ok(raw)
}

/// Denominator guard for channels with zero activation mass.
pub const XGRADCAM_EPS: f64 = 1e-8;

/// Bilinear resize without corner alignment: destination pixel centers map
/// to `(dst + 0.5) * in/out - 0.5` in source coordinates, clamped at the
/// edges. Matches the resize convention of common attribution tooling.
pub fn upsample_bilinear(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = map.dim();
    assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
    let coords = |out_len: usize, in_len: usize, i: usize| -> (usize, usize, f32) {
        let scale = in_len as f32 / out_len as f32;
        let src = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, src - lo as f32)
    };
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for r in 0..out_h {
        let (r0, r1, fr) = coords(out_h, in_h, r);
        for c in 0..out_w {
            let (c0, c1, fc) = coords(out_w, in_w, c);
            let top = map[(r0, c0)] * (1.0 - fc) + map[(r0, c1)] * fc;
            let bot = map[(r1, c0)] * (1.0 - fc) + map[(r1, c1)] * fc;
            out[(r, c)] = top * (1.0 - fr) + bot * fr;
        }
    }
    out
}

/// Min-max normalization to [0,1]. An identically zero map stays zero; a
/// nonzero constant map (every pixel equally relevant) becomes all ones.
pub fn normalize_unit_range(map: &Array2<f32>) -> Result<Array2<f32>> {
    if let Some(bad) = map.iter().find(|v| !v.is_finite()) {
        return Err(DacError::invalid(format!(
            "cannot normalize a map with non-finite value {bad}"
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == 0.0 && lo == 0.0 {
        return Ok(map.clone());
    }
    if hi == lo {
        return Ok(Array2::from_elem(map.dim(), 1.0));
    }
    let span = hi - lo;
    Ok(map.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0)))
}

/// Attribution maps for a batch of images against per-image target logits.
///
/// `ids` names each image in the output maps. The gradient of logit `t` with
/// respect to the last conv activations is the analytic constant
/// `head_weight[t][k] / (h * w)` per channel `k`.
pub fn xgradcam_batch(
    model: &SplitModel,
    images: &Array4<f32>,
    ids: &[String],
    targets: &[usize],
) -> Result<Vec<AttributionMap>> {
    model.check_input(images)?;
    let n = images.dim().0;
    if ids.len() != n || targets.len() != n {
        return Err(DacError::invalid(format!(
            "batch of {n} images needs {n} ids and targets, got {} and {}",
            ids.len(),
            targets.len()
        )));
    }
    let classes = model.head.weight.dim().0;
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(DacError::invalid(format!(
            "target label {bad} out of range for {classes} classes"
        )));
    }
    let (acts, _, _) = model.activations_and_logits(images);
    let (_, c, ah, aw) = acts.dim();
    let cell = (ah * aw) as f32;
    let (img_h, img_w) = (images.dim().2, images.dim().3);

    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let target = targets[i];
        let mut grads = Array3::<f32>::zeros((c, ah, aw));
        for k in 0..c {
            let g = model.head.weight[(target, k)] / cell;
            grads.index_axis_mut(Axis(0), k).fill(g);
        }
        let raw = xgradcam_raw(acts.index_axis(Axis(0), i), grads.view())?;
        let up = upsample_bilinear(raw.view(), img_h, img_w);
        let scores = normalize_unit_range(&up)?;
        maps.push(AttributionMap::new(scores, &ids[i], target)?);
    }
    Ok(maps)
}

/// Attribution map for a single image.
pub fn xgradcam(
    model: &SplitModel,
    image: &Array3<f32>,
    image_id: &str,
    target: usize,
) -> Result<AttributionMap> {
    let batch = image.clone().insert_axis(Axis(0));
    let mut maps = xgradcam_batch(model, &batch, &[image_id.to_string()], &[target])?;
    Ok(maps.remove(0))
}

/// Mean attribution score over the kept pixels of `region`.
pub fn region_mean_score(map: &AttributionMap, region: &BinaryMask) -> Result<f64> {
    if region.bits.dim() != map.scores.dim() {
        return Err(DacError::invalid(format!(
            "region shape {:?} does not match map shape {:?}",
            region.bits.dim(),
            map.scores.dim()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (score, bit) in map.scores.iter().zip(region.bits.iter()) {
        if *bit == 1 {
            sum += f64::from(*score);
            count += 1;
        }
    }
    if count == 0 {
        return Err(DacError::invalid("region is empty"));
    }
    Ok(sum / count as f64)
}

/// Writes the map as an 8-bit grayscale PNG (score 0 -> 0, score 1 -> 255).
pub fn save_heatmap_png(map: &AttributionMap, path: &Path) -> Result<()> {
    let (h, w) = map.scores.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let v = (map.scores[(r, c)] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DacError::invalid(format!("failed to write heatmap png: {e}")))
}
