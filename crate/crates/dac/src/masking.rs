//! Attribution-guided adaptive masking.
//!
//! The masking stage turns a per-pixel attribution map into a binary mask by
//! zeroing the `p` lowest-scoring pixels, probes the frozen model's loss as
//! `p` sweeps a grid, and picks the proportion at the elbow of that curve:
//! the largest mask the model tolerates before the pixels it actually relies
//! on start disappearing.
//!
//! Masks are precomputed once per dataset with the frozen model and cached to
//! disk (one PNG per image plus a JSON index), so retraining never needs to
//! re-run the probe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::backbone::{cross_entropy_each, LogitFn};
use crate::error::{DacError, Result};
use crate::kneedle::{find_elbow, CurvePoints};

/// Pixel ordering used to break score ties when selecting pixels to mask.
///
/// Only row-major ordering is implemented; the tag exists so the serialized
/// mask cache records the ordering promise explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TieBreak {
    #[default]
    RowMajor,
}

/// Binary keep/mask grid over image pixels. `1` keeps a pixel, `0` masks it.
///
/// Invariant: the number of zero bits equals `floor(proportion * H * W)`.
/// Proportions chosen by the masking algorithm always lie in [0,1) (the probe
/// grid never masks a whole image), but the representation admits 1.0 so that
/// inverted all-kept masks remain expressible.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub bits: Array2<u8>,
    pub proportion: f64,
    pub tie_break: TieBreak,
}

/// Number of pixels masked at proportion `p` of an `n`-pixel image.
pub fn masked_count(p: f64, n: usize) -> usize {
    (p * n as f64).floor() as usize
}

/// Smallest proportion whose floor-count equals `zeros` out of `n`, adjusted
/// by ulps so the count invariant holds exactly in f64 arithmetic.
fn proportion_for_count(zeros: usize, n: usize) -> f64 {
    let mut p = zeros as f64 / n as f64;
    while masked_count(p, n) > zeros {
        p = f64::next_down(p);
    }
    while masked_count(p, n) < zeros {
        p = f64::next_up(p);
    }
    p
}

impl BinaryMask {
    /// Wraps raw bits, deriving a proportion consistent with the count
    /// invariant. Fails if any value is outside {0,1}.
    pub fn from_bits(bits: Array2<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(DacError::invalid(format!(
                "mask bits must be 0 or 1, found {bad}"
            )));
        }
        let zeros = bits.iter().filter(|&&b| b == 0).count();
        let proportion = proportion_for_count(zeros, bits.len());
        Ok(Self {
            bits,
            proportion,
            tie_break: TieBreak::RowMajor,
        })
    }

    /// Indicator mask that keeps exactly the pixels inside `rect`.
    pub fn from_rect(rect: &crate::attribution::Rect, height: usize, width: usize) -> Result<Self> {
        rect.check_within(height, width)?;
        let mut bits = Array2::<u8>::zeros((height, width));
        for r in rect.top..rect.top + rect.height {
            for c in rect.left..rect.left + rect.width {
                bits[(r, c)] = 1;
            }
        }
        Self::from_bits(bits)
    }

    pub fn height(&self) -> usize {
        self.bits.dim().0
    }

    pub fn width(&self) -> usize {
        self.bits.dim().1
    }

    /// Number of kept (bit = 1) pixels.
    pub fn keep_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Number of masked (bit = 0) pixels.
    pub fn zero_count(&self) -> usize {
        self.bits.len() - self.keep_count()
    }

    /// Checks the count invariant and bit range.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(DacError::invalid(format!(
                "mask proportion {} outside [0,1]",
                self.proportion
            )));
        }
        if self.bits.iter().any(|&b| b > 1) {
            return Err(DacError::invalid("mask bits must be 0 or 1"));
        }
        let expect = masked_count(self.proportion, self.bits.len());
        let actual = self.zero_count();
        if expect != actual {
            return Err(DacError::invalid(format!(
                "mask proportion {} implies {expect} masked pixels but {actual} bits are zero",
                self.proportion
            )));
        }
        Ok(())
    }

    /// Complement mask (keeps what this mask drops).
    pub fn invert(&self) -> Self {
        Self::from_bits(self.bits.mapv(|b| 1 - b))
            .expect("complement of valid bits is valid")
    }
}

/// Loss of the frozen model as a function of masked proportion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn new(grid: Vec<f64>, losses: Vec<f64>) -> Result<Self> {
        let curve = Self { grid, losses };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(DacError::invalid("loss curve grid is empty"));
        }
        if self.grid.len() != self.losses.len() {
            return Err(DacError::invalid(format!(
                "loss curve has {} grid points but {} losses",
                self.grid.len(),
                self.losses.len()
            )));
        }
        check_grid(&self.grid)?;
        if let Some(bad) = self.losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(DacError::invalid(format!(
                "loss curve values must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(())
    }

    pub fn to_curve_points(&self) -> Result<CurvePoints> {
        CurvePoints::new(self.grid.clone(), self.losses.clone())
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(DacError::invalid("proportion grid is empty"));
    }
    for pair in grid.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(DacError::invalid(format!(
                "proportion grid must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) {
        return Err(DacError::invalid(format!(
            "proportion grid must lie in [0,1), spans [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Evenly spaced probe grid `0, step, 2*step, ...` capped at `max` (both ends
/// inclusive, everything strictly below 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub step: f64,
    pub max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { step: 0.05, max: 0.90 }
    }
}

impl GridSpec {
    /// Coarse preset with step 0.2.
    pub fn coarse() -> Self {
        Self { step: 0.2, max: 0.8 }
    }

    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(DacError::invalid(format!(
                "grid step must be positive, got {}",
                self.step
            )));
        }
        if !(0.0..1.0).contains(&self.max) {
            return Err(DacError::invalid(format!(
                "grid max must lie in [0,1), got {}",
                self.max
            )));
        }
        let mut points = Vec::new();
        let mut k = 0usize;
        loop {
            let p = k as f64 * self.step;
            if p > self.max + 1e-12 {
                break;
            }
            points.push(p.min(self.max));
            k += 1;
        }
        check_grid(&points)?;
        Ok(points)
    }
}

pub use crate::composer::FillColor;

/// Masks the `floor(p * H * W)` lowest-scoring pixels of the attribution map.
/// Score ties resolve toward the smaller row-major pixel index, so masks at
/// increasing proportions are nested regardless of tie structure.
pub fn mask_with_proportion(scores: &AttributionMap, p: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&p) {
        return Err(DacError::invalid(format!(
            "masking proportion must lie in [0,1), got {p}"
        )));
    }
    let (h, w) = scores.scores.dim();
    let n = h * w;
    let flat = scores
        .scores
        .as_slice()
        .expect("attribution scores are stored contiguously");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));

    let zeros = masked_count(p, n);
    let mut bits = Array2::<u8>::ones((h, w));
    let bits_flat = bits.as_slice_mut().expect("freshly allocated mask is contiguous");
    for &idx in order.iter().take(zeros) {
        bits_flat[idx] = 0;
    }
    Ok(BinaryMask {
        bits,
        proportion: p,
        tie_break: TieBreak::RowMajor,
    })
}

/// Replaces masked-out pixels of a `channels x H x W` image with the fill
/// color: `m * x + (1 - m) * fill` per channel.
pub fn apply_mask(image: &Array3<f32>, mask: &BinaryMask, fill: &FillColor) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if (h, w) != mask.bits.dim() {
        return Err(DacError::invalid(format!(
            "mask shape {:?} does not match image spatial shape ({h}, {w})",
            mask.bits.dim()
        )));
    }
    if fill.channels() != c {
        return Err(DacError::invalid(format!(
            "fill has {} channels, image has {c}",
            fill.channels()
        )));
    }
    let mut out = image.clone();
    for ch in 0..c {
        let fv = fill.0[ch];
        for r in 0..h {
            for col in 0..w {
                if mask.bits[(r, col)] == 0 {
                    out[(ch, r, col)] = fv;
                }
            }
        }
    }
    Ok(out)
}

/// Cross-entropy of the frozen model on one image masked at every grid point.
///
/// All grid points are evaluated in a single batched forward pass.
pub fn probe_loss_curve(
    model: &dyn LogitFn,
    image: &Array3<f32>,
    label: usize,
    scores: &AttributionMap,
    grid: &[f64],
    fill: &FillColor,
) -> Result<LossCurve> {
    check_grid(grid)?;
    if label >= model.num_classes() {
        return Err(DacError::invalid(format!(
            "label {label} out of range for {} classes",
            model.num_classes()
        )));
    }
    let (c, h, w) = image.dim();
    if (h, w) != scores.scores.dim() {
        return Err(DacError::invalid(format!(
            "attribution shape {:?} does not match image spatial shape ({h}, {w})",
            scores.scores.dim()
        )));
    }
    let mut batch = Array4::<f32>::zeros((grid.len(), c, h, w));
    for (g, &p) in grid.iter().enumerate() {
        let mask = mask_with_proportion(scores, p)?;
        let masked = apply_mask(image, &mask, fill)?;
        batch.index_axis_mut(ndarray::Axis(0), g).assign(&masked);
    }
    let logits = model.logits(&batch);
    let labels = vec![label; grid.len()];
    let losses: Vec<f64> = cross_entropy_each(&logits, &labels)
        .into_iter()
        .map(f64::from)
        .collect();
    LossCurve::new(grid.to_vec(), losses)
}

/// Adaptive mask for one image plus the evidence it was chosen from.
#[derive(Debug, Clone)]
pub struct AdaptiveMaskResult {
    pub mask: BinaryMask,
    pub curve: LossCurve,
    pub p_star: f64,
    pub knee_found: bool,
}

/// Probes the loss curve and masks at its elbow proportion. A curve with no
/// detectable elbow gives no evidence for any decomposition, so the fallback
/// keeps the whole image (proportion 0).
pub fn adaptive_mask(
    model: &dyn LogitFn,
    image: &Array3<f32>,
    label: usize,
    scores: &AttributionMap,
    grid: &[f64],
    sensitivity: f64,
    fill: &FillColor,
) -> Result<AdaptiveMaskResult> {
    let curve = probe_loss_curve(model, image, label, scores, grid, fill)?;
    let knee = find_elbow(&curve.to_curve_points()?, sensitivity, true)?;
    let (p_star, knee_found) = if knee.found {
        (curve.grid[knee.index], true)
    } else {
        (0.0, false)
    };
    let mask = mask_with_proportion(scores, p_star)?;
    Ok(AdaptiveMaskResult {
        mask,
        curve,
        p_star,
        knee_found,
    })
}

/// Index file of a mask cache directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskIndex {
    pub format: String,
    pub version: u32,
    /// Hash of the full model the probe ran with; retraining refuses a cache
    /// built by different weights.
    pub checkpoint_hash: String,
    pub grid: Vec<f64>,
    pub sensitivity: f64,
    pub fill: FillColor,
    pub tie_break: TieBreak,
    pub entries: BTreeMap<String, MaskIndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub p_star: f64,
    pub knee_found: bool,
}

pub const MASK_INDEX_FORMAT: &str = "dac-mask-cache";
pub const MASK_INDEX_VERSION: u32 = 1;

fn mask_png_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.mask.png"))
}

/// Writes one mask as an 8-bit grayscale PNG: 0 = masked, 255 = kept.
/// The write lands in a temp file first so readers never see a partial PNG.
fn write_mask_png(dir: &Path, id: &str, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.bits.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Luma([mask.bits[(r, c)] * 255]));
        }
    }
    let final_path = mask_png_path(dir, id);
    let tmp_path = dir.join(format!("{id}.mask.png.tmp"));
    img.save_with_format(&tmp_path, image::ImageFormat::Png)
        .map_err(|e| DacError::invalid(format!("failed to encode mask png: {e}")))?;
    std::fs::rename(&tmp_path, &final_path)?;
    Ok(())
}

fn read_mask_png(dir: &Path, id: &str) -> Result<BinaryMask> {
    let path = mask_png_path(dir, id);
    let img = image::open(&path)
        .map_err(|e| DacError::invalid(format!("failed to read mask png {}: {e}", path.display())))?
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
                        what: format!("mask png {}", path.display()),
                        expected: "pixel values 0 or 255".into(),
                        actual: format!("pixel value {other}"),
                    })
                }
            };
        }
    }
    BinaryMask::from_bits(bits)
}

/// On-disk mask cache: `<id>.mask.png` per image plus `index.json`.
#[derive(Debug)]
pub struct MaskCache {
    pub dir: PathBuf,
    pub index: MaskIndex,
}

impl MaskCache {
    /// Writes a full cache directory. Entries are `(image_id, result)`.
    pub fn write(
        dir: &Path,
        checkpoint_hash: &str,
        grid: &[f64],
        sensitivity: f64,
        fill: &FillColor,
        entries: &[(String, AdaptiveMaskResult)],
    ) -> Result<Self> {
        check_grid(grid)?;
        std::fs::create_dir_all(dir)?;
        let mut index_entries = BTreeMap::new();
        for (id, result) in entries {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(DacError::invalid(format!(
                    "image id {id:?} is not a safe cache file stem"
                )));
            }
            write_mask_png(dir, id, &result.mask)?;
            index_entries.insert(
                id.clone(),
                MaskIndexEntry {
                    p_star: result.p_star,
                    knee_found: result.knee_found,
                },
            );
        }
        let index = MaskIndex {
            format: MASK_INDEX_FORMAT.into(),
            version: MASK_INDEX_VERSION,
            checkpoint_hash: checkpoint_hash.into(),
            grid: grid.to_vec(),
            sensitivity,
            fill: fill.clone(),
            tie_break: TieBreak::RowMajor,
            entries: index_entries,
        };
        let tmp = dir.join("index.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&index)?)?;
        std::fs::rename(&tmp, dir.join("index.json"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    /// Opens a cache directory and checks it was built by the model with
    /// `expected_hash`. A hash mismatch means the masks are stale.
    pub fn open(dir: &Path, expected_hash: &str) -> Result<Self> {
        let raw = std::fs::read(dir.join("index.json"))?;
        let index: MaskIndex = serde_json::from_slice(&raw)?;
        if index.format != MASK_INDEX_FORMAT || index.version != MASK_INDEX_VERSION {
            return Err(DacError::invalid(format!(
                "unrecognized mask cache format {}/{}",
                index.format, index.version
            )));
        }
        if index.checkpoint_hash != expected_hash {
            return Err(DacError::Stale {
                what: format!("mask cache at {}", dir.display()),
                expected: index.checkpoint_hash,
                actual: expected_hash.into(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    /// Loads one mask and cross-checks its masked-pixel count against the
    /// proportion recorded in the index.
    pub fn load_mask(&self, id: &str) -> Result<BinaryMask> {
        let entry = self.index.entries.get(id).ok_or_else(|| {
            DacError::invalid(format!("image id {id} is not in the mask cache index"))
        })?;
        let mask = read_mask_png(&self.dir, id)?;
        let expect = masked_count(entry.p_star, mask.bits.len());
        if mask.zero_count() != expect {
            return Err(DacError::Integrity {
                what: format!("mask {id}"),
                expected: format!("{expect} masked pixels for proportion {}", entry.p_star),
                actual: format!("{} masked pixels", mask.zero_count()),
            });
        }
        Ok(mask)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.index.entries.keys()
    }
}
