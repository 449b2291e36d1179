//! Synthetic datasets with a controllable spurious correlation.
//!
//! Every image carries two independent signals: a causal pattern (a disk or
//! a cross, deciding the label) and a spurious pattern (horizontal or
//! vertical stripes). The generator controls how often the stripe
//! orientation agrees with the label, producing four groups per dataset:
//! (label, spurious) pairs whose sizes follow the correlation exactly.
//!
//! The stripes are deliberately easier than the shapes: high contrast and
//! spread over a whole panel, against low-contrast shapes whose painted
//! pixel counts are matched exactly across classes. A model trained by
//! plain risk minimization prefers the stripes, which is precisely the
//! failure mode the rest of the pipeline repairs. Ground-truth causal
//! regions and group labels make that failure measurable.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::Rect;
use crate::error::{DacError, Result};
use crate::masking::BinaryMask;
use crate::streams;

/// Spatial arrangement of the two signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Spurious stripes in the top panel, causal shape in the bottom panel.
    Stacked,
    /// Causal shape on a centered foreground patch, stripes as background.
    FgBg,
}

/// Full recipe for one dataset. Equal configs generate identical datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of each class whose spurious value agrees with the label.
    pub correlation: f64,
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub noise_std: f64,
    /// Probability that an example is painted with the other class's shape.
    /// This caps how predictive the causal region can be, the way photo
    /// subjects are sometimes ambiguous: a converged model must keep using
    /// the spurious stripes to fit the mislabeled tail, so the shortcut
    /// survives training instead of being washed out.
    pub shape_flip_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train: 8000,
            n_val: 1000,
            n_test: 400,
            correlation: 0.95,
            height: 64,
            width: 32,
            layout: Layout::Stacked,
            noise_std: 0.05,
            shape_flip_prob: 0.1,
            seed: 0,
        }
    }
}

pub const CHANNELS: usize = 3;
const STRIPE_PERIOD: usize = 8;
// Contrast levels set the learning order: stripes cover a whole panel, so
// even at moderate contrast they are picked up before the shapes, while the
// full-contrast shapes stay learnable from the minority groups.
const STRIPE_HI: f32 = 0.75;
const STRIPE_LO: f32 = 0.25;
const GROUND: f32 = 0.5;
// Per-example shape brightness above the ground level. The wide range makes
// some shapes trivially visible and some barely above the noise, mirroring
// real photo subjects of varying difficulty; fitting shapes at every level
// forces the backbone to learn a robust detector rather than a single
// template, which raises the ceiling that head retraining can reach.
const SHAPE_DELTA_MIN: f32 = 0.1;
const SHAPE_DELTA_MAX: f32 = 0.5;
const JITTER: i64 = 4;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DacError::invalid("every split needs at least one example"));
        }
        if self.n_train % 2 != 0 || self.n_val % 2 != 0 {
            return Err(DacError::invalid(
                "train and val sizes must be even (two balanced classes)",
            ));
        }
        if self.n_test % 4 != 0 {
            return Err(DacError::invalid(
                "test size must be divisible by 4 (group-balanced test split)",
            ));
        }
        if !(0.5..=1.0).contains(&self.correlation) {
            return Err(DacError::invalid(format!(
                "correlation must lie in [0.5, 1], got {}",
                self.correlation
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(DacError::invalid(format!(
                "noise_std must be finite and nonnegative, got {}",
                self.noise_std
            )));
        }
        if !self.shape_flip_prob.is_finite() || !(0.0..0.5).contains(&self.shape_flip_prob) {
            return Err(DacError::invalid(format!(
                "shape_flip_prob must lie in [0, 0.5), got {}",
                self.shape_flip_prob
            )));
        }
        let geom = Geometry::of(self)?;
        let _ = geom;
        Ok(())
    }

    /// Causal and spurious panel rectangles for the stacked layout, where
    /// both regions are fixed rectangles.
    pub fn stacked_rects(&self) -> Result<(Rect, Rect)> {
        if self.layout != Layout::Stacked {
            return Err(DacError::invalid(
                "panel rectangles are only defined for the stacked layout",
            ));
        }
        let panel = self.height / 2;
        let causal = Rect { top: panel, left: 0, height: panel, width: self.width };
        let spurious = Rect { top: 0, left: 0, height: panel, width: self.width };
        Ok((causal, spurious))
    }
}

/// One generated example. The group is the (label, spurious) pair.
#[derive(Debug, Clone)]
pub struct ImageExample {
    pub id: String,
    /// Channels x height x width, values in [0,1].
    pub image: Array3<f32>,
    pub label: usize,
    pub spurious: usize,
    /// Ground truth: 1 on the causal region, 0 elsewhere.
    pub causal_region: BinaryMask,
}

impl ImageExample {
    pub fn group(&self) -> Group {
        Group { label: self.label, spurious: self.spurious }
    }
}

/// Group identity: the label paired with the spurious value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Group {
    pub label: usize,
    pub spurious: usize,
}

impl Group {
    pub fn all() -> [Group; 4] {
        [
            Group { label: 0, spurious: 0 },
            Group { label: 0, spurious: 1 },
            Group { label: 1, spurious: 0 },
            Group { label: 1, spurious: 1 },
        ]
    }

    /// Minority means the spurious value disagrees with the label; at
    /// correlation 0.5 the naming is vacuous but harmless.
    pub fn is_minority(&self) -> bool {
        self.label != self.spurious
    }

    pub fn key(&self) -> String {
        format!("y{}s{}", self.label, self.spurious)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<ImageExample>,
    pub val: Vec<ImageExample>,
    pub test: Vec<ImageExample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[ImageExample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(DacError::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Offset sets for the two causal shapes, matched to the same painted pixel
/// count so class means are identical and only spatial structure separates
/// the labels.
#[derive(Debug, Clone)]
struct Geometry {
    shapes: [Vec<(i64, i64)>; 2],
    /// Foreground patch side for the fg_bg layout.
    patch: usize,
}

impl Geometry {
    fn of(config: &GenConfig) -> Result<Self> {
        let (region_h, region_w, patch) = match config.layout {
            Layout::Stacked => {
                if config.height % 2 != 0 {
                    return Err(DacError::invalid(
                        "stacked layout needs an even height to split into two panels",
                    ));
                }
                (config.height / 2, config.width, 0)
            }
            Layout::FgBg => {
                let min_dim = config.height.min(config.width);
                let patch = (3 * min_dim).div_euclid(5);
                (patch, patch, patch)
            }
        };
        let min_dim = region_h.min(region_w) as f64;
        let radius = 0.27 * min_dim;
        let disk = disk_offsets(radius);
        let target = disk.len();
        let arm = (1.18 * radius).round() as i64;
        let thick = (0.81 * radius).round() as i64;
        let cross = adjust_to_count(cross_offsets(arm, thick), target);
        let disk = adjust_to_count(disk, target);

        let extent = disk
            .iter()
            .chain(cross.iter())
            .map(|&(dr, dc)| dr.abs().max(dc.abs()))
            .max()
            .unwrap_or(0);
        // Stacked jitters the shape inside the panel; fg_bg jitters the
        // whole patch inside the image with the shape fixed at its center.
        let slack = match config.layout {
            Layout::Stacked => JITTER,
            Layout::FgBg => 0,
        };
        let half = (region_h.min(region_w) / 2) as i64;
        if extent + slack >= half {
            return Err(DacError::invalid(format!(
                "image too small: shape extent {extent} plus jitter {slack} \
                 does not fit a {region_h}x{region_w} causal region"
            )));
        }
        if config.layout == Layout::FgBg {
            let fit = |dim: usize| (dim as i64 - patch as i64) / 2 - JITTER >= 0;
            if !fit(config.height) || !fit(config.width) {
                return Err(DacError::invalid(format!(
                    "image too small: a {patch}x{patch} patch with jitter {JITTER} \
                     does not fit {}x{}",
                    config.height, config.width
                )));
            }
        }
        Ok(Self { shapes: [disk, cross], patch })
    }
}

fn disk_offsets(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.ceil() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if (dr * dr + dc * dc) as f64 <= r2 {
                out.push((dr, dc));
            }
        }
    }
    out
}

fn cross_offsets(arm: i64, thick: i64) -> Vec<(i64, i64)> {
    let half = thick / 2;
    let lo = half - thick + 1;
    let mut out = Vec::new();
    for dr in -arm..=arm {
        for dc in -arm..=arm {
            let in_h = (lo..=half).contains(&dr) && dc.abs() <= arm;
            let in_v = (lo..=half).contains(&dc) && dr.abs() <= arm;
            if in_h || in_v {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Trims the farthest-from-center pixels or grows the nearest missing ones
/// until the set has exactly `target` members. Deterministic: distance ties
/// resolve by offset order.
fn adjust_to_count(mut set: Vec<(i64, i64)>, target: usize) -> Vec<(i64, i64)> {
    let rank = |&(dr, dc): &(i64, i64)| (dr * dr + dc * dc, dr, dc);
    set.sort_by_key(rank);
    if set.len() > target {
        set.truncate(target);
    } else if set.len() < target {
        let have: std::collections::BTreeSet<(i64, i64)> = set.iter().copied().collect();
        let bound = set
            .iter()
            .map(|&(dr, dc)| dr.abs().max(dc.abs()))
            .max()
            .unwrap_or(1)
            + 2;
        let mut candidates: Vec<(i64, i64)> = Vec::new();
        for dr in -bound..=bound {
            for dc in -bound..=bound {
                if !have.contains(&(dr, dc)) {
                    candidates.push((dr, dc));
                }
            }
        }
        candidates.sort_by_key(rank);
        set.extend(candidates.into_iter().take(target - set.len()));
    }
    set
}

fn stripe_value(coord: usize) -> f32 {
    if (coord / (STRIPE_PERIOD / 2)) % 2 == 0 {
        STRIPE_HI
    } else {
        STRIPE_LO
    }
}

/// Paints stripes into `rect`: horizontal bands for value 0 (constant along
/// each row), vertical bands for value 1.
fn paint_stripes(image: &mut Array3<f32>, rect: &Rect, spurious: usize) {
    for r in rect.top..rect.top + rect.height {
        for c in rect.left..rect.left + rect.width {
            let coord = if spurious == 0 { r - rect.top } else { c - rect.left };
            let v = stripe_value(coord);
            for ch in 0..CHANNELS {
                image[(ch, r, c)] = v;
            }
        }
    }
}

fn paint_shape(image: &mut Array3<f32>, center: (i64, i64), offsets: &[(i64, i64)], value: f32) {
    for &(dr, dc) in offsets {
        let r = (center.0 + dr) as usize;
        let c = (center.1 + dc) as usize;
        for ch in 0..CHANNELS {
            image[(ch, r, c)] = value;
        }
    }
}

fn render(
    config: &GenConfig,
    geom: &Geometry,
    label: usize,
    spurious: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Array3<f32>, Rect) {
    use rand::Rng as _;
    let (h, w) = (config.height, config.width);
    let mut image = Array3::from_elem((CHANNELS, h, w), GROUND);
    // All stochastic draws (shape contrast, jitter, flip, noise) happen in a
    // fixed order and never branch on the label or the spurious value, so a
    // slot's appearance parameters are identical across group assignments.
    let value = GROUND + rng.random_range(SHAPE_DELTA_MIN..=SHAPE_DELTA_MAX);
    let jr = rng.random_range(-JITTER..=JITTER);
    let jc = rng.random_range(-JITTER..=JITTER);
    let flip = rng.random::<f64>() < config.shape_flip_prob;
    let painted = if flip { 1 - label } else { label };

    let causal_rect = match config.layout {
        Layout::Stacked => {
            let (causal, spurious_rect) = config
                .stacked_rects()
                .expect("validated config has stacked rects");
            paint_stripes(&mut image, &spurious_rect, spurious);
            let center = (
                causal.top as i64 + (causal.height / 2) as i64 + jr,
                causal.left as i64 + (causal.width / 2) as i64 + jc,
            );
            paint_shape(&mut image, center, &geom.shapes[painted], value);
            causal
        }
        Layout::FgBg => {
            paint_stripes(
                &mut image,
                &Rect { top: 0, left: 0, height: h, width: w },
                spurious,
            );
            let s = geom.patch;
            let top = ((h - s) / 2) as i64 + jr;
            let left = ((w - s) / 2) as i64 + jc;
            let rect = Rect {
                top: top as usize,
                left: left as usize,
                height: s,
                width: s,
            };
            for r in rect.top..rect.top + rect.height {
                for c in rect.left..rect.left + rect.width {
                    for ch in 0..CHANNELS {
                        image[(ch, r, c)] = GROUND;
                    }
                }
            }
            let center = (top + (s / 2) as i64, left + (s / 2) as i64);
            paint_shape(&mut image, center, &geom.shapes[painted], value);
            rect
        }
    };

    if config.noise_std > 0.0 {
        for v in image.iter_mut() {
            let n = streams::standard_normal(rng) * config.noise_std;
            *v = (*v + n as f32).clamp(0.0, 1.0);
        }
    }
    (image, causal_rect)
}

/// Majority-group size for one class of `n_class` examples.
fn majority_count(correlation: f64, n_class: usize) -> usize {
    (correlation * n_class as f64).round() as usize
}

fn split_assignments(config: &GenConfig, split_idx: u64, n: usize) -> Vec<(usize, usize)> {
    // The test split is group-balanced; train and val follow the correlation.
    let mut pairs = Vec::with_capacity(n);
    let n_class = n / 2;
    for label in 0..2usize {
        let aligned = if split_idx == 2 {
            n_class / 2
        } else {
            majority_count(config.correlation, n_class)
        };
        for i in 0..n_class {
            let spurious = if i < aligned { label } else { 1 - label };
            pairs.push((label, spurious));
        }
    }
    let mut rng = streams::stream(config.seed, streams::ALLOC, &[split_idx]);
    streams::shuffle_in_place(&mut pairs, &mut rng);
    pairs
}

/// Generates the three splits. Train and val realize the configured
/// correlation exactly (deterministic allocation, seeded order); the test
/// split holds all four groups at equal size.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let geom = Geometry::of(config)?;
    let mut splits: Vec<Vec<ImageExample>> = Vec::with_capacity(3);
    for (split_idx, (name, n)) in [
        ("train", config.n_train),
        ("val", config.n_val),
        ("test", config.n_test),
    ]
    .into_iter()
    .enumerate()
    {
        let pairs = split_assignments(config, split_idx as u64, n);
        let mut examples = Vec::with_capacity(n);
        for (i, (label, spurious)) in pairs.into_iter().enumerate() {
            let mut rng =
                streams::stream(config.seed, streams::RENDER, &[split_idx as u64, i as u64]);
            let (image, rect) = render(config, &geom, label, spurious, &mut rng);
            let causal_region = BinaryMask::from_rect(&rect, config.height, config.width)?;
            examples.push(ImageExample {
                id: format!("{name}-{i:05}"),
                image,
                label,
                spurious,
                causal_region,
            });
        }
        splits.push(examples);
    }
    let test = splits.pop().expect("three splits were pushed");
    let val = splits.pop().expect("three splits were pushed");
    let train = splits.pop().expect("three splits were pushed");
    Ok(Dataset { config: config.clone(), train, val, test })
}

/// Stacks example images into one `n x channels x H x W` tensor.
pub fn images_tensor(examples: &[ImageExample]) -> Array4<f32> {
    let n = examples.len();
    assert!(n > 0, "cannot stack an empty example list");
    let (c, h, w) = examples[0].image.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for (i, ex) in examples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&ex.image);
    }
    out
}

pub fn labels_of(examples: &[ImageExample]) -> Vec<usize> {
    examples.iter().map(|e| e.label).collect()
}

/// Counts examples per group.
pub fn group_counts(examples: &[ImageExample]) -> BTreeMap<Group, usize> {
    let mut counts = BTreeMap::new();
    for ex in examples {
        *counts.entry(ex.group()).or_insert(0) += 1;
    }
    counts
}

/// Decides which stripe orientation a region shows: 0 when rows are more
/// uniform than columns (horizontal bands), 1 otherwise. Works on composed
/// images because it reads pixels, not metadata.
pub fn infer_stripe_value(image: &Array3<f32>, region: &Rect) -> usize {
    let mut row_means = Vec::with_capacity(region.height);
    let mut col_means = vec![0.0f64; region.width];
    for r in 0..region.height {
        let mut row_sum = 0.0f64;
        for c in 0..region.width {
            let mut px = 0.0f64;
            for ch in 0..CHANNELS {
                px += f64::from(image[(ch, region.top + r, region.left + c)]);
            }
            px /= CHANNELS as f64;
            row_sum += px;
            col_means[c] += px;
        }
        row_means.push(row_sum / region.width as f64);
    }
    for m in col_means.iter_mut() {
        *m /= region.height as f64;
    }
    let variance = |xs: &[f64]| -> f64 {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
    };
    // Horizontal stripes vary across rows and are flat along them.
    if variance(&row_means) > variance(&col_means) {
        0
    } else {
        1
    }
}

fn mask_bounding_rect(mask: &BinaryMask) -> Result<Rect> {
    let (h, w) = mask.bits.dim();
    let mut top = h;
    let mut bottom = 0;
    let mut left = w;
    let mut right = 0;
    for r in 0..h {
        for c in 0..w {
            if mask.bits[(r, c)] == 1 {
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
    }
    if top > bottom {
        return Err(DacError::invalid("causal region is empty"));
    }
    Ok(Rect { top, left, height: bottom - top + 1, width: right - left + 1 })
}

/// Dataset of literally cropped causal regions: each image becomes just its
/// causal rectangle, and the new ground-truth region is the whole image.
/// All regions must share one size.
pub fn causal_crop(dataset: &Dataset) -> Result<Dataset> {
    let crop_one = |ex: &ImageExample| -> Result<ImageExample> {
        let rect = mask_bounding_rect(&ex.causal_region)?;
        let (c, _, _) = ex.image.dim();
        let mut image = Array3::<f32>::zeros((c, rect.height, rect.width));
        for ch in 0..c {
            for r in 0..rect.height {
                for col in 0..rect.width {
                    image[(ch, r, col)] = ex.image[(ch, rect.top + r, rect.left + col)];
                }
            }
        }
        Ok(ImageExample {
            id: ex.id.clone(),
            image,
            label: ex.label,
            spurious: ex.spurious,
            causal_region: BinaryMask::from_bits(Array2::ones((rect.height, rect.width)))?,
        })
    };
    let crop_all = |examples: &[ImageExample]| -> Result<Vec<ImageExample>> {
        examples.iter().map(crop_one).collect()
    };
    let train = crop_all(&dataset.train)?;
    let (h, w) = (train[0].image.dim().1, train[0].image.dim().2);
    let val = crop_all(&dataset.val)?;
    let test = crop_all(&dataset.test)?;
    for ex in train.iter().chain(val.iter()).chain(test.iter()) {
        if ex.image.dim().1 != h || ex.image.dim().2 != w {
            return Err(DacError::invalid(
                "causal regions differ in size; cannot crop to one shape",
            ));
        }
    }
    let mut config = dataset.config.clone();
    config.height = h;
    config.width = w;
    Ok(Dataset { config, train, val, test })
}

const MANIFEST_FORMAT: &str = "dac-dataset";
const MANIFEST_VERSION: u32 = 1;
const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: GenConfig,
    /// Per split: group key -> example count.
    pub group_counts: BTreeMap<String, BTreeMap<String, usize>>,
    /// SHA-256 over every sidecar, image blob, and mask file, in split and
    /// id order.
    pub content_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitSidecar {
    dtype: String,
    shape: [usize; 4],
    ids: Vec<String>,
    labels: Vec<usize>,
    spurious: Vec<usize>,
}

fn split_blob(examples: &[ImageExample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(examples.len() * examples[0].image.len() * 4);
    for ex in examples {
        for v in ex.image.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn mask_to_png_bytes(mask: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = mask.bits.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Luma([mask.bits[(r, c)] * 255]));
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| DacError::invalid(format!("failed to encode region mask: {e}")))?;
    Ok(bytes.into_inner())
}

fn mask_from_png_bytes(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| DacError::invalid(format!("failed to decode region mask: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut bits = Array2::<u8>::zeros((h as usize, w as usize));
    for r in 0..h as usize {
        for c in 0..w as usize {
            bits[(r, c)] = match img.get_pixel(c as u32, r as u32).0[0] {
                0 => 0,
                255 => 1,
                other => {
                    return Err(DacError::Integrity {
                        what: "region mask png".into(),
                        expected: "pixel values 0 or 255".into(),
                        actual: format!("pixel value {other}"),
                    })
                }
            };
        }
    }
    BinaryMask::from_bits(bits)
}

fn sidecar_of(examples: &[ImageExample], config: &GenConfig) -> SplitSidecar {
    SplitSidecar {
        dtype: "f32le".into(),
        shape: [examples.len(), CHANNELS, config.height, config.width],
        ids: examples.iter().map(|e| e.id.clone()).collect(),
        labels: examples.iter().map(|e| e.label).collect(),
        spurious: examples.iter().map(|e| e.spurious).collect(),
    }
}

fn group_count_keys(examples: &[ImageExample]) -> BTreeMap<String, usize> {
    group_counts(examples)
        .into_iter()
        .map(|(g, n)| (g.key(), n))
        .collect()
}

/// Writes a dataset directory: `images/<split>.f32` blobs with JSON
/// sidecars, `masks/<id>.png` region masks, and `manifest.json`.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut hasher = Sha256::new();
    let mut group_counts_out = BTreeMap::new();
    for name in SPLIT_NAMES {
        let examples = dataset.split(name)?;
        let sidecar = sidecar_of(examples, &dataset.config);
        let sidecar_bytes = serde_json::to_vec_pretty(&sidecar)?;
        let blob = split_blob(examples);
        hasher.update(&sidecar_bytes);
        hasher.update(&blob);
        std::fs::write(dir.join("images").join(format!("{name}.json")), &sidecar_bytes)?;
        std::fs::write(dir.join("images").join(format!("{name}.f32")), &blob)?;
        for ex in examples {
            let png = mask_to_png_bytes(&ex.causal_region)?;
            hasher.update(&png);
            std::fs::write(dir.join("masks").join(format!("{}.png", ex.id)), &png)?;
        }
        group_counts_out.insert(name.to_string(), group_count_keys(examples));
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: dataset.config.clone(),
        group_counts: group_counts_out,
        content_hash: hex::encode(hasher.finalize()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Reads a dataset directory back, verifying the content hash and the
/// manifest's bookkeeping against the actual files.
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(DacError::invalid(format!(
            "unrecognized dataset format {}/{}",
            manifest.format, manifest.version
        )));
    }
    let config = manifest.config.clone();
    let mut hasher = Sha256::new();
    let mut splits: Vec<Vec<ImageExample>> = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let sidecar_bytes = read_file(&dir.join("images").join(format!("{name}.json")))?;
        let blob = read_file(&dir.join("images").join(format!("{name}.f32")))?;
        hasher.update(&sidecar_bytes);
        hasher.update(&blob);
        let sidecar: SplitSidecar = serde_json::from_slice(&sidecar_bytes)?;
        if sidecar.dtype != "f32le" {
            return Err(DacError::invalid(format!(
                "unsupported image dtype {}",
                sidecar.dtype
            )));
        }
        let [n, c, h, w] = sidecar.shape;
        if c != CHANNELS || h != config.height || w != config.width {
            return Err(DacError::Integrity {
                what: format!("{name} image shape"),
                expected: format!("[*, {CHANNELS}, {}, {}]", config.height, config.width),
                actual: format!("{:?}", sidecar.shape),
            });
        }
        if sidecar.ids.len() != n || sidecar.labels.len() != n || sidecar.spurious.len() != n {
            return Err(DacError::Integrity {
                what: format!("{name} sidecar lengths"),
                expected: format!("{n} ids, labels, and spurious values"),
                actual: format!(
                    "{} ids, {} labels, {} spurious",
                    sidecar.ids.len(),
                    sidecar.labels.len(),
                    sidecar.spurious.len()
                ),
            });
        }
        let per_image = c * h * w;
        if blob.len() != n * per_image * 4 {
            return Err(DacError::Integrity {
                what: format!("{name} image blob size"),
                expected: format!("{} bytes", n * per_image * 4),
                actual: format!("{} bytes", blob.len()),
            });
        }
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let start = i * per_image * 4;
            let values: Vec<f32> = blob[start..start + per_image * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let image = Array3::from_shape_vec((c, h, w), values)
                .expect("length checked against shape");
            let png = read_file(&dir.join("masks").join(format!("{}.png", sidecar.ids[i])))?;
            hasher.update(&png);
            let causal_region = mask_from_png_bytes(&png)?;
            if causal_region.bits.dim() != (h, w) {
                return Err(DacError::Integrity {
                    what: format!("mask {}", sidecar.ids[i]),
                    expected: format!("{h}x{w}"),
                    actual: format!("{:?}", causal_region.bits.dim()),
                });
            }
            examples.push(ImageExample {
                id: sidecar.ids[i].clone(),
                image,
                label: sidecar.labels[i],
                spurious: sidecar.spurious[i],
                causal_region,
            });
        }
        let counts = group_count_keys(&examples);
        let recorded = manifest.group_counts.get(name).ok_or_else(|| {
            DacError::invalid(format!("manifest lacks group counts for {name}"))
        })?;
        if &counts != recorded {
            return Err(DacError::Integrity {
                what: format!("{name} group counts"),
                expected: format!("{recorded:?}"),
                actual: format!("{counts:?}"),
            });
        }
        splits.push(examples);
    }
    let actual_hash = hex::encode(hasher.finalize());
    if actual_hash != manifest.content_hash {
        return Err(DacError::Integrity {
            what: "dataset content hash".into(),
            expected: manifest.content_hash,
            actual: actual_hash,
        });
    }
    let test = splits.pop().expect("three splits were pushed");
    let val = splits.pop().expect("three splits were pushed");
    let train = splits.pop().expect("three splits were pushed");
    Ok(Dataset { config, train, val, test })
}
