//! Knee/elbow detection on discrete curves.
//!
//! The masking stage probes a model with progressively stronger masks and
//! gets back a loss-versus-proportion curve that stays flat while the mask
//! eats uninformative pixels and bends upward once informative pixels start
//! disappearing. The largest usable mask proportion is the curve's elbow.
//!
//! Detection follows the Kneedle recipe on min-max normalized points:
//!
//! 1. optional moving-average smoothing ([`smooth_curve`], off by default:
//!    probe grids here have at most a few dozen points),
//! 2. min-max normalization of both axes ([`normalize_curve`]),
//! 3. difference curve `d_i = y_i - x_i` ([`difference_curve`]),
//! 4. candidate knees = local maxima of `d`,
//! 5. per-candidate threshold `T = d_lmx - sensitivity * mean_dx` where
//!    `mean_dx` is the mean normalized x-spacing,
//! 6. a candidate is confirmed when `d` drops below its `T` before the next
//!    local maximum is reached.
//!
//! Kneedle detects knees of concave increasing curves. Loss-probe curves are
//! the opposite corner (convex, increasing), so `find_elbow(rising = true)`
//! first rotates the normalized curve 180 degrees (reverse the point order
//! and flip both axes). That maps a convex-increasing elbow onto a
//! concave-increasing knee and maps indices back one-to-one. A consequence
//! worth knowing: for rising curves, candidates are scanned from the high-x
//! end, so on a multi-bend curve the confirmed knee is the first one in
//! *transformed* order, i.e. the largest-x bend.
//!
//! [`max_curvature_oracle`] is an independent cross-check used by the tests:
//! it picks the interior point with the largest direction change between
//! adjacent segments of the normalized polyline. It shares no code with the
//! Kneedle path beyond input validation and normalization.

use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};

/// A discrete curve with strictly increasing x coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl CurvePoints {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let curve = CurvePoints { xs, ys };
        curve.validate()?;
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.xs.len() != self.ys.len() {
            return Err(DacError::invalid(format!(
                "curve has {} xs but {} ys",
                self.xs.len(),
                self.ys.len()
            )));
        }
        if self.xs.is_empty() {
            return Err(DacError::invalid("curve has no points"));
        }
        if self.xs.iter().chain(self.ys.iter()).any(|v| !v.is_finite()) {
            return Err(DacError::invalid("curve contains non-finite values"));
        }
        if self.xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DacError::invalid(
                "curve xs must be strictly increasing (constant or reordered xs are not a curve)",
            ));
        }
        Ok(())
    }
}

/// Outcome of knee detection. `x_knee` and `index` refer to the original
/// (unnormalized) curve and are meaningful only when `found` is true; when
/// no knee exists they are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneeResult {
    pub x_knee: f64,
    pub index: usize,
    pub found: bool,
}

impl KneeResult {
    fn none() -> Self {
        KneeResult {
            x_knee: 0.0,
            index: 0,
            found: false,
        }
    }
}

/// Angle (radians) below which the oracle treats the polyline as straight.
const ORACLE_FLAT_ANGLE: f64 = 1e-9;

// ---- curve preparation ----

/// Min-max normalize both axes to [0, 1].
///
/// A curve whose ys are all equal normalizes to all-zero ys (the y range is
/// degenerate; downstream detectors report `found = false` on such curves).
/// Constant xs are rejected by curve validation.
pub fn normalize_curve(curve: &CurvePoints) -> Result<CurvePoints> {
    curve.validate()?;
    let (x0, x1) = (curve.xs[0], *curve.xs.last().unwrap());
    let xs = curve.xs.iter().map(|x| (x - x0) / (x1 - x0)).collect();
    let ymin = curve.ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = curve.ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let yrange = ymax - ymin;
    let ys = if yrange == 0.0 {
        vec![0.0; curve.ys.len()]
    } else {
        curve.ys.iter().map(|y| (y - ymin) / yrange).collect()
    };
    Ok(CurvePoints { xs, ys })
}

/// Difference curve `d_i = y_i - x_i`. Expects a normalized curve.
pub fn difference_curve(curve: &CurvePoints) -> Vec<f64> {
    curve
        .ys
        .iter()
        .zip(curve.xs.iter())
        .map(|(y, x)| y - x)
        .collect()
}

/// Centered moving-average smoothing of ys with the given odd window width.
/// The window is truncated at the boundaries. `window <= 1` is the identity.
pub fn smooth_curve(curve: &CurvePoints, window: usize) -> Result<CurvePoints> {
    curve.validate()?;
    if window <= 1 {
        return Ok(curve.clone());
    }
    if window % 2 == 0 {
        return Err(DacError::invalid("smoothing window must be odd"));
    }
    let half = window / 2;
    let n = curve.len();
    let ys = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let span = &curve.ys[lo..=hi];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect();
    Ok(CurvePoints {
        xs: curve.xs.clone(),
        ys,
    })
}

// ---- detectors ----

/// Kneedle detection.
///
/// `sensitivity` scales the confirmation threshold (1.0 is the standard
/// setting; larger values demand a deeper drop after the candidate and
/// therefore confirm fewer knees). `rising` selects the convex-increasing
/// orientation used by loss-probe curves; `rising = false` treats the input
/// as concave increasing (the native Kneedle orientation).
///
/// Degenerate curves (fewer than 3 points, or constant ys) return
/// `found = false`; malformed curves (non-increasing xs, non-finite values)
/// are errors.
pub fn find_elbow(curve: &CurvePoints, sensitivity: f64, rising: bool) -> Result<KneeResult> {
    curve.validate()?;
    if !sensitivity.is_finite() || sensitivity < 0.0 {
        return Err(DacError::invalid(format!(
            "sensitivity must be a finite non-negative number, got {sensitivity}"
        )));
    }
    let n = curve.len();
    if n < 3 {
        return Ok(KneeResult::none());
    }
    let norm = normalize_curve(curve)?;
    if norm.ys.iter().all(|&y| y == 0.0) {
        return Ok(KneeResult::none());
    }

    // Rotate 180 degrees for rising curves: reverse order, flip both axes.
    let (txs, tys): (Vec<f64>, Vec<f64>) = if rising {
        (
            (0..n).map(|i| 1.0 - norm.xs[n - 1 - i]).collect(),
            (0..n).map(|i| 1.0 - norm.ys[n - 1 - i]).collect(),
        )
    } else {
        (norm.xs, norm.ys)
    };

    let diff: Vec<f64> = tys.iter().zip(txs.iter()).map(|(y, x)| y - x).collect();
    let mean_dx = (txs[n - 1] - txs[0]) / (n - 1) as f64;

    // Scan for the first local maximum of the difference curve that is
    // confirmed by a drop below its threshold before the next local maximum.
    let mut candidate: Option<(usize, f64)> = None; // (index, threshold)
    for i in 1..n {
        if let Some((ci, threshold)) = candidate {
            let is_local_max = i + 1 < n && diff[i] > diff[i - 1] && diff[i] >= diff[i + 1];
            if is_local_max {
                // Reached the next local maximum without the required drop:
                // the previous candidate is rejected, this one takes over.
                candidate = Some((i, diff[i] - sensitivity * mean_dx));
                continue;
            }
            if diff[i] < threshold {
                let index = if rising { n - 1 - ci } else { ci };
                return Ok(KneeResult {
                    x_knee: curve.xs[index],
                    index,
                    found: true,
                });
            }
        } else if i + 1 < n && diff[i] > diff[i - 1] && diff[i] >= diff[i + 1] {
            candidate = Some((i, diff[i] - sensitivity * mean_dx));
        }
    }
    Ok(KneeResult::none())
}

/// Independent cross-check: the interior point with the maximum direction
/// change (turn angle) between adjacent segments of the normalized polyline.
/// Ties break to the smallest index; a polyline with no turn anywhere
/// (straight line, constant ys) returns `found = false`.
pub fn max_curvature_oracle(curve: &CurvePoints) -> Result<KneeResult> {
    curve.validate()?;
    let n = curve.len();
    if n < 3 {
        return Ok(KneeResult::none());
    }
    let norm = normalize_curve(curve)?;

    let mut best: Option<(usize, f64)> = None;
    for i in 1..n - 1 {
        let v1 = (norm.xs[i] - norm.xs[i - 1], norm.ys[i] - norm.ys[i - 1]);
        let v2 = (norm.xs[i + 1] - norm.xs[i], norm.ys[i + 1] - norm.ys[i]);
        let cross = v1.0 * v2.1 - v1.1 * v2.0;
        let dot = v1.0 * v2.0 + v1.1 * v2.1;
        let angle = cross.abs().atan2(dot);
        let better = match best {
            None => true,
            Some((_, best_angle)) => angle > best_angle,
        };
        if better {
            best = Some((i, angle));
        }
    }
    match best {
        Some((index, angle)) if angle > ORACLE_FLAT_ANGLE => Ok(KneeResult {
            x_knee: curve.xs[index],
            index,
            found: true,
        }),
        _ => Ok(KneeResult::none()),
    }
}
