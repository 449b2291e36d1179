//! Counterfactual composition of masked image parts across labels.
//!
//! Given a causal donor `x_i` with mask `m_i` (1 on its causal part) and a
//! partner `x_j` with mask `m_j`, the composed image keeps the causal part of
//! `x_i`, shows the non-causal part of `x_j`, and paints the partner's own
//! causal part over with a default color `b`:
//!
//! ```text
//! out = m_i * x_i + (1 - m_i) * (1 - m_j) * x_j + (1 - m_i) * m_j * b
//! ```
//!
//! With binary masks the three coefficient fields partition every pixel, so
//! composition is implemented as an exact per-pixel selection rather than
//! floating-point blending. The composed example inherits the causal donor's
//! label; pairing donors across labels synthesizes counterexamples whose
//! visible background contradicts the label's usual context.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::masking::BinaryMask;
use crate::streams;

/// Per-channel default color painted where neither donor contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillColor(pub Vec<f32>);

impl FillColor {
    pub fn uniform(value: f32, channels: usize) -> Self {
        Self(vec![value; channels])
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(DacError::invalid("fill color needs at least one channel"));
        }
        if let Some(bad) = self.0.iter().find(|v| !v.is_finite()) {
            return Err(DacError::invalid(format!(
                "fill color must be finite, found {bad}"
            )));
        }
        Ok(())
    }
}

/// Per-channel mean over every pixel of every image in the batch.
pub fn batch_mean(batch: &ndarray::Array4<f32>) -> Result<FillColor> {
    let (n, c, h, w) = batch.dim();
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(DacError::invalid(format!(
            "batch mean needs a nonempty batch, got shape {:?}",
            batch.dim()
        )));
    }
    let mut means = Vec::with_capacity(c);
    let denom = (n * h * w) as f64;
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            for r in 0..h {
                for col in 0..w {
                    sum += f64::from(batch[(i, ch, r, col)]);
                }
            }
        }
        means.push((sum / denom) as f32);
    }
    Ok(FillColor(means))
}

/// One synthesized training example and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedExample {
    pub image: Array3<f32>,
    /// Label of the causal donor `x_i`.
    pub label: usize,
    pub donor_i: String,
    pub donor_j: String,
    /// True when both masks were bitwise inverted before composing.
    pub inverted: bool,
}

fn check_same_shape(
    x_i: &Array3<f32>,
    m_i: (usize, usize),
    x_j: &Array3<f32>,
    m_j: (usize, usize),
    b: &FillColor,
) -> Result<()> {
    let (c, h, w) = x_i.dim();
    if x_j.dim() != (c, h, w) {
        return Err(DacError::invalid(format!(
            "donor shapes differ: {:?} vs {:?}",
            x_i.dim(),
            x_j.dim()
        )));
    }
    if m_i != (h, w) || m_j != (h, w) {
        return Err(DacError::invalid(format!(
            "mask shapes {m_i:?} and {m_j:?} do not match image spatial shape ({h}, {w})"
        )));
    }
    if b.channels() != c {
        return Err(DacError::invalid(format!(
            "fill has {} channels, images have {c}",
            b.channels()
        )));
    }
    b.validate()
}

/// Core per-pixel selection. `invert` complements both masks on the fly, so
/// even a mask whose complement is not representable as a `BinaryMask`
/// (everything masked) composes correctly.
fn compose_bits(
    x_i: &Array3<f32>,
    bits_i: &ndarray::Array2<u8>,
    x_j: &Array3<f32>,
    bits_j: &ndarray::Array2<u8>,
    b: &FillColor,
    invert: bool,
) -> Array3<f32> {
    let (c, h, w) = x_i.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for r in 0..h {
        for col in 0..w {
            let (mi, mj) = if invert {
                (1 - bits_i[(r, col)], 1 - bits_j[(r, col)])
            } else {
                (bits_i[(r, col)], bits_j[(r, col)])
            };
            for ch in 0..c {
                out[(ch, r, col)] = if mi == 1 {
                    x_i[(ch, r, col)]
                } else if mj == 0 {
                    x_j[(ch, r, col)]
                } else {
                    b.0[ch]
                };
            }
        }
    }
    out
}

/// Composes two donors with their masks as given.
#[allow(clippy::too_many_arguments)]
pub fn compose(
    x_i: &Array3<f32>,
    m_i: &BinaryMask,
    x_j: &Array3<f32>,
    m_j: &BinaryMask,
    b: &FillColor,
    y_i: usize,
    donor_i: &str,
    donor_j: &str,
) -> Result<ComposedExample> {
    check_same_shape(x_i, m_i.bits.dim(), x_j, m_j.bits.dim(), b)?;
    Ok(ComposedExample {
        image: compose_bits(x_i, &m_i.bits, x_j, &m_j.bits, b, false),
        label: y_i,
        donor_i: donor_i.to_string(),
        donor_j: donor_j.to_string(),
        inverted: false,
    })
}

/// Borrowed view of one selected example offered to the pairing stage.
#[derive(Debug, Clone, Copy)]
pub struct Donor<'a> {
    pub id: &'a str,
    pub label: usize,
    pub image: &'a Array3<f32>,
    pub mask: &'a BinaryMask,
}

/// The composed set plus how many selected examples found no partner.
#[derive(Debug, Clone)]
pub struct ComposedSet {
    pub examples: Vec<ComposedExample>,
    pub skipped: usize,
}

/// Builds one composed example per donor.
///
/// The partner for slot `i` is drawn uniformly (with replacement across
/// slots) from the donors with a different label, falling back to same-label
/// partners when no other label exists. Self-pairing is never allowed, so a
/// lone donor is skipped and counted. Draw `i` comes from its own counter
/// substream of `seed`, making the result independent of evaluation order.
///
/// `causal_flag = false` bitwise-inverts both masks before composing: the
/// mask selection is trusted to have found the non-causal part instead.
pub fn build_composed_set(
    donors: &[Donor],
    causal_flag: bool,
    b: &FillColor,
    seed: u64,
) -> Result<ComposedSet> {
    if donors.is_empty() {
        return Err(DacError::invalid("cannot compose from an empty selection"));
    }
    let mut examples = Vec::with_capacity(donors.len());
    let mut skipped = 0usize;
    for (slot, donor) in donors.iter().enumerate() {
        let cross: Vec<usize> = (0..donors.len())
            .filter(|&j| donors[j].label != donor.label)
            .collect();
        let eligible = if cross.is_empty() {
            (0..donors.len())
                .filter(|&j| j != slot && donors[j].label == donor.label)
                .collect()
        } else {
            cross
        };
        if eligible.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = streams::stream(seed, streams::PAIRING, &[slot as u64]);
        use rand::Rng as _;
        let partner = &donors[eligible[rng.random_range(0..eligible.len())]];
        check_same_shape(
            donor.image,
            donor.mask.bits.dim(),
            partner.image,
            partner.mask.bits.dim(),
            b,
        )?;
        examples.push(ComposedExample {
            image: compose_bits(
                donor.image,
                &donor.mask.bits,
                partner.image,
                &partner.mask.bits,
                b,
                !causal_flag,
            ),
            label: donor.label,
            donor_i: donor.id.to_string(),
            donor_j: partner.id.to_string(),
            inverted: !causal_flag,
        });
    }
    Ok(ComposedSet { examples, skipped })
}

/// Writes donor_i, donor_j, and their composition side by side as one RGB
/// PNG with a thin separator, for visual inspection.
pub fn save_triptych_png(
    x_i: &Array3<f32>,
    x_j: &Array3<f32>,
    composed: &Array3<f32>,
    path: &std::path::Path,
) -> Result<()> {
    let (c, h, w) = x_i.dim();
    if x_j.dim() != (c, h, w) || composed.dim() != (c, h, w) {
        return Err(DacError::invalid("triptych panels must share one shape"));
    }
    if c != 3 {
        return Err(DacError::invalid("triptych export expects 3-channel images"));
    }
    let sep = 2usize;
    let total_w = 3 * w + 2 * sep;
    let mut img = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (panel, data) in [x_i, x_j, composed].into_iter().enumerate() {
        let x0 = panel * (w + sep);
        for r in 0..h {
            for col in 0..w {
                let px = image::Rgb(std::array::from_fn(|ch| {
                    (data[(ch, r, col)].clamp(0.0, 1.0) * 255.0).round() as u8
                }));
                img.put_pixel((x0 + col) as u32, r as u32, px);
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DacError::invalid(format!("failed to write triptych png: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2, Array4};
    use proptest::prelude::*;

    fn mask_from(bits: &Array2<u8>) -> BinaryMask {
        BinaryMask::from_bits(bits.clone()).unwrap()
    }

    fn image_1x1x2(a: f32, b: f32) -> Array3<f32> {
        Array3::from_shape_vec((1, 1, 2), vec![a, b]).unwrap()
    }

    #[test]
    fn batch_mean_of_zero_images_is_zero() {
        let batch = Array4::<f32>::zeros((1, 3, 2, 2));
        assert_eq!(batch_mean(&batch).unwrap(), FillColor(vec![0.0, 0.0, 0.0]));
    }

    #[test]
    fn batch_mean_averages_across_images_and_pixels() {
        let mut batch = Array4::<f32>::zeros((2, 2, 1, 1));
        batch[(1, 0, 0, 0)] = 1.0;
        batch[(1, 1, 0, 0)] = 1.0;
        assert_eq!(batch_mean(&batch).unwrap(), FillColor(vec![0.5, 0.5]));
    }

    #[test]
    fn batch_mean_of_constant_batch_is_the_constant() {
        let batch = Array4::from_elem((3, 2, 4, 4), 0.7f32);
        let b = batch_mean(&batch).unwrap();
        for v in &b.0 {
            assert!((v - 0.7).abs() < 1e-7);
        }
    }

    #[test]
    fn all_ones_mask_returns_the_causal_donor_exactly() {
        let x_i = Array3::from_shape_fn((3, 4, 4), |(c, r, col)| (c + r * col) as f32 * 0.31);
        let x_j = Array3::from_elem((3, 4, 4), 9.0f32);
        let ones = mask_from(&Array2::ones((4, 4)));
        let half = mask_from(&Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r < 2)));
        let out = compose(
            &x_i,
            &ones,
            &x_j,
            &half,
            &FillColor::uniform(0.5, 3),
            1,
            "a",
            "b",
        )
        .unwrap();
        assert_eq!(out.image, x_i);
        assert_eq!(out.label, 1);
    }

    #[test]
    fn hand_computed_two_pixel_compositions() {
        let x_i = image_1x1x2(1.0, 2.0);
        let x_j = image_1x1x2(5.0, 6.0);
        let m_i = mask_from(&arr2(&[[1u8, 0]]));
        let b = FillColor(vec![0.5]);

        let m_j = mask_from(&arr2(&[[0u8, 1]]));
        let out = compose(&x_i, &m_i, &x_j, &m_j, &b, 0, "i", "j").unwrap();
        assert_eq!(out.image, image_1x1x2(1.0, 0.5));

        let m_j_zero = mask_from(&arr2(&[[0u8, 0]]));
        let out = compose(&x_i, &m_i, &x_j, &m_j_zero, &b, 0, "i", "j").unwrap();
        assert_eq!(out.image, image_1x1x2(1.0, 6.0));
    }

    #[test]
    fn two_donors_across_labels_pair_with_each_other() {
        let img0 = Array3::from_elem((1, 2, 2), 0.0f32);
        let img1 = Array3::from_elem((1, 2, 2), 1.0f32);
        let mask = mask_from(&arr2(&[[1u8, 0], [0, 1]]));
        let donors = [
            Donor { id: "a", label: 0, image: &img0, mask: &mask },
            Donor { id: "b", label: 1, image: &img1, mask: &mask },
        ];
        let set =
            build_composed_set(&donors, true, &FillColor(vec![0.5]), 7).unwrap();
        assert_eq!(set.examples.len(), 2);
        assert_eq!(set.skipped, 0);
        assert_eq!(set.examples[0].donor_i, "a");
        assert_eq!(set.examples[0].donor_j, "b");
        assert_eq!(set.examples[0].label, 0);
        assert_eq!(set.examples[1].donor_i, "b");
        assert_eq!(set.examples[1].donor_j, "a");
        assert_eq!(set.examples[1].label, 1);
    }

    #[test]
    fn single_label_pool_falls_back_to_same_class_partners() {
        let imgs: Vec<Array3<f32>> =
            (0..3).map(|i| Array3::from_elem((1, 2, 2), i as f32)).collect();
        let mask = mask_from(&arr2(&[[1u8, 0], [0, 1]]));
        let donors: Vec<Donor> = imgs
            .iter()
            .enumerate()
            .map(|(i, image)| Donor {
                id: ["a", "b", "c"][i],
                label: 0,
                image,
                mask: &mask,
            })
            .collect();
        let set =
            build_composed_set(&donors, true, &FillColor(vec![0.5]), 7).unwrap();
        assert_eq!(set.examples.len(), 3);
        assert_eq!(set.skipped, 0);
        for (i, ex) in set.examples.iter().enumerate() {
            assert_ne!(ex.donor_j, ex.donor_i, "self-pairing is forbidden");
            assert_eq!(ex.donor_i, ["a", "b", "c"][i]);
        }
    }

    #[test]
    fn lone_donor_is_skipped_and_counted() {
        let img = Array3::from_elem((1, 2, 2), 0.3f32);
        let mask = mask_from(&arr2(&[[1u8, 0], [0, 1]]));
        let donors = [Donor { id: "only", label: 0, image: &img, mask: &mask }];
        let set =
            build_composed_set(&donors, true, &FillColor(vec![0.5]), 7).unwrap();
        assert!(set.examples.is_empty());
        assert_eq!(set.skipped, 1);
    }

    #[test]
    fn pairing_is_deterministic_in_the_seed() {
        let imgs: Vec<Array3<f32>> =
            (0..6).map(|i| Array3::from_elem((1, 2, 2), i as f32)).collect();
        let ids = ["a", "b", "c", "d", "e", "f"];
        let mask = mask_from(&arr2(&[[1u8, 0], [0, 1]]));
        let donors: Vec<Donor> = imgs
            .iter()
            .enumerate()
            .map(|(i, image)| Donor { id: ids[i], label: i % 2, image, mask: &mask })
            .collect();
        let b = FillColor(vec![0.5]);
        let s1 = build_composed_set(&donors, true, &b, 42).unwrap();
        let s2 = build_composed_set(&donors, true, &b, 42).unwrap();
        let partners = |s: &ComposedSet| -> Vec<String> {
            s.examples.iter().map(|e| e.donor_j.clone()).collect()
        };
        assert_eq!(partners(&s1), partners(&s2));
    }

    #[test]
    fn inverting_the_flag_equals_composing_pre_inverted_masks() {
        let x_i = Array3::from_shape_fn((2, 3, 3), |(c, r, col)| (c + 2 * r + col) as f32);
        let x_j = Array3::from_shape_fn((2, 3, 3), |(c, r, col)| (10 + c + r * col) as f32);
        let bits_i = arr2(&[[1u8, 0, 1], [0, 1, 0], [1, 1, 0]]);
        let bits_j = arr2(&[[0u8, 1, 0], [1, 0, 1], [0, 0, 1]]);
        let m_i = mask_from(&bits_i);
        let m_j = mask_from(&bits_j);
        let b = FillColor(vec![0.25, 0.75]);

        let donors = [
            Donor { id: "i", label: 0, image: &x_i, mask: &m_i },
            Donor { id: "j", label: 1, image: &x_j, mask: &m_j },
        ];
        let flagged = build_composed_set(&donors, false, &b, 11).unwrap();

        let inv_i = m_i.invert();
        let inv_j = m_j.invert();
        let manual = compose(&x_i, &inv_i, &x_j, &inv_j, &b, 0, "i", "j").unwrap();
        assert_eq!(flagged.examples[0].image, manual.image);
        assert!(flagged.examples[0].inverted);
    }

    #[test]
    fn inversion_handles_the_all_kept_mask() {
        // An all-ones mask has no representable complement, but inverted
        // composition must still work: both inverted masks are all-zero, so
        // the output is the partner image everywhere.
        let x_i = Array3::from_elem((1, 2, 2), 0.1f32);
        let x_j = Array3::from_elem((1, 2, 2), 0.9f32);
        let ones = mask_from(&Array2::ones((2, 2)));
        let donors = [
            Donor { id: "i", label: 0, image: &x_i, mask: &ones },
            Donor { id: "j", label: 1, image: &x_j, mask: &ones },
        ];
        let set =
            build_composed_set(&donors, false, &FillColor(vec![0.5]), 3).unwrap();
        assert_eq!(set.examples[0].image, x_j);
    }

    #[test]
    fn triptych_png_has_three_panels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trip.png");
        let x_i = Array3::from_elem((3, 4, 4), 0.0f32);
        let x_j = Array3::from_elem((3, 4, 4), 1.0f32);
        let comp = Array3::from_elem((3, 4, 4), 0.5f32);
        save_triptych_png(&x_i, &x_j, &comp, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (16, 4));
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(6, 0).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(12, 0).0, [128, 128, 128]);
    }

    proptest! {
        #[test]
        fn composing_identical_constants_returns_the_constant(
            seed in 0u64..500,
            value in 0.0f32..1.0,
        ) {
            // Partition of unity, observed through the composition path: when
            // both donors and the fill all equal one constant, every pixel of
            // the output must equal it no matter what the masks are.
            let mut rng = crate::streams::stream(seed, "test", &[]);
            use rand::Rng as _;
            let mut bits_i = Array2::from_shape_fn((4, 5), |_| u8::from(rng.random::<f64>() < 0.5));
            let bits_j = Array2::from_shape_fn((4, 5), |_| u8::from(rng.random::<f64>() < 0.5));
            if bits_i.iter().all(|&v| v == 0) {
                bits_i[(0, 0)] = 1;
            }
            let mut bits_j = bits_j;
            if bits_j.iter().all(|&v| v == 0) {
                bits_j[(1, 1)] = 1;
            }
            let x = Array3::from_elem((2, 4, 5), value);
            let out = compose(
                &x,
                &mask_from(&bits_i),
                &x.clone(),
                &mask_from(&bits_j),
                &FillColor(vec![value, value]),
                0,
                "i",
                "j",
            ).unwrap();
            for &v in out.image.iter() {
                prop_assert_eq!(v, value);
            }
        }

        #[test]
        fn causal_pixels_survive_composition_bitwise(seed in 0u64..500) {
            let mut rng = crate::streams::stream(seed, "test", &[]);
            use rand::Rng as _;
            let x_i = Array3::from_shape_fn((2, 4, 5), |_| rng.random::<f32>());
            let x_j = Array3::from_shape_fn((2, 4, 5), |_| rng.random::<f32>());
            let mut bits_i = Array2::from_shape_fn((4, 5), |_| u8::from(rng.random::<f64>() < 0.4));
            if bits_i.iter().all(|&v| v == 0) {
                bits_i[(2, 2)] = 1;
            }
            let bits_j = Array2::from_shape_fn((4, 5), |(r, c)| u8::from((r + c) % 2 == 0));
            let out = compose(
                &x_i,
                &mask_from(&bits_i),
                &x_j,
                &mask_from(&bits_j),
                &FillColor(vec![0.5, 0.5]),
                1,
                "i",
                "j",
            ).unwrap();
            prop_assert_eq!(out.label, 1);
            for r in 0..4 {
                for c in 0..5 {
                    if bits_i[(r, c)] == 1 {
                        for ch in 0..2 {
                            prop_assert_eq!(out.image[(ch, r, c)], x_i[(ch, r, c)]);
                        }
                    }
                }
            }
        }
    }
}
