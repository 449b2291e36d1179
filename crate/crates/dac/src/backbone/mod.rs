//! The classifier backbone: a small convolutional feature extractor with a
//! linear head, explicitly split so the retraining stages can freeze the
//! features and touch only the head.
//!
//! Architecture (fixed): three 3x3 stride-2 zero-padded conv+ReLU blocks
//! with 16/32/64 channels, global average pooling to a 64-dim embedding,
//! and a linear head. Forward, backward, and the optimizers are hand-rolled
//! on f32 `ndarray` storage; see [`layers`] for the kernels and their
//! direct-convolution test oracle.
//!
//! Checkpoints are single files: an 8-byte little-endian header length, a
//! JSON header (format tag, dtype, model shape, tensor manifest in blob
//! order, blob SHA-256), then the raw little-endian f32 weight blob. The
//! blob hash doubles as the model identity that downstream caches pin
//! themselves to (see `weight_hash`).

pub mod layers;
mod opt;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DacError, Result};
use crate::streams;

pub use layers::{
    conv_out_dim, cross_entropy_each, global_avg_pool, global_avg_pool_backward, im2col,
    softmax_cross_entropy, Conv2d, ConvTrace, LinearHead,
};
pub use opt::{stepped_lr, AdamHead, SgdMomentum};

/// Channel widths of the three conv blocks.
pub const CONV_WIDTHS: [usize; 3] = [16, 32, 64];
/// Embedding dimension (equals the last conv width, by global pooling).
pub const FEATURE_DIM: usize = CONV_WIDTHS[2];
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// Input/output contract of a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub channels_in: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels_in == 0 || self.classes < 2 {
            return Err(DacError::invalid(format!(
                "model shape needs channels >= 1 and classes >= 2, got {self:?}"
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(DacError::invalid(format!(
                "inputs must be at least 8x8 to survive three stride-2 convolutions, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// The frozen-during-retraining part: conv blocks plus global pooling.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub convs: [Conv2d; 3],
}

impl FeatureExtractor {
    /// Embeddings plus the post-ReLU activations of the last conv block
    /// (the attribution stage reads those).
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let t1 = self.convs[0].forward_relu(x);
        let t2 = self.convs[1].forward_relu(&t1.output);
        let t3 = self.convs[2].forward_relu(&t2.output);
        let emb = global_avg_pool(&t3.output);
        (t3.output, emb)
    }
}

/// Feature extractor and linear head, separable for last-layer retraining.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub features: FeatureExtractor,
    pub head: LinearHead,
    pub shape: ModelShape,
}

/// Everything backward needs from a forward pass.
pub struct ForwardTrace {
    conv_traces: [ConvTrace; 3],
    pub embeddings: Array2<f32>,
    pub logits: Array2<f32>,
}

/// Gradients for every parameter tensor, same shapes as the model.
pub struct Gradients {
    pub conv_w: [Array4<f32>; 3],
    pub conv_b: [Array1<f32>; 3],
    pub head_w: Array2<f32>,
    pub head_b: Array1<f32>,
}

/// Anything that maps image batches to class logits. The probe and masking
/// stages depend only on this, so tests can substitute analytic toy models.
pub trait LogitFn {
    fn logits(&self, images: &Array4<f32>) -> Array2<f32>;

    fn num_classes(&self) -> usize;
}

impl LogitFn for SplitModel {
    fn logits(&self, images: &Array4<f32>) -> Array2<f32> {
        self.forward(images)
    }

    fn num_classes(&self) -> usize {
        self.shape.classes
    }
}

impl SplitModel {
    /// Fresh model with He-initialized conv weights and a small random
    /// head, drawn from the `init` stream of `seed`.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut widths = vec![shape.channels_in];
        widths.extend_from_slice(&CONV_WIDTHS);

        let convs: [Conv2d; 3] = std::array::from_fn(|layer| {
            let (c_in, c_out) = (widths[layer], widths[layer + 1]);
            let mut rng = streams::stream(seed, streams::INIT, &[layer as u64]);
            let std = (2.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
            let weight = Array4::from_shape_fn((c_out, c_in, KERNEL, KERNEL), |_| {
                (streams::standard_normal(&mut rng) * std) as f32
            });
            Conv2d {
                weight,
                bias: Array1::zeros(c_out),
                stride: STRIDE,
                padding: PADDING,
            }
        });

        let mut rng = streams::stream(seed, streams::INIT, &[3]);
        let std = 1.0 / (FEATURE_DIM as f64).sqrt();
        let head = LinearHead {
            weight: Array2::from_shape_fn((shape.classes, FEATURE_DIM), |_| {
                (streams::standard_normal(&mut rng) * std) as f32
            }),
            bias: Array1::zeros(shape.classes),
        };

        Ok(SplitModel {
            features: FeatureExtractor { convs },
            head,
            shape,
        })
    }

    pub fn check_input(&self, images: &Array4<f32>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if (c, h, w) != (self.shape.channels_in, self.shape.height, self.shape.width) {
            return Err(DacError::invalid(format!(
                "input batch is {c}x{h}x{w} but the model expects {}x{}x{}",
                self.shape.channels_in, self.shape.height, self.shape.width
            )));
        }
        Ok(())
    }

    /// Plain forward pass to logits.
    pub fn forward(&self, x: &Array4<f32>) -> Array2<f32> {
        let (_, emb) = self.features.forward(x);
        self.head.logits(&emb)
    }

    /// Embeddings only (frozen-feature retraining precomputes these).
    pub fn embed(&self, x: &Array4<f32>) -> Array2<f32> {
        self.features.forward(x).1
    }

    /// Last-conv activations, embeddings, and logits in one pass; the
    /// attribution stage needs all three.
    pub fn activations_and_logits(&self, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>, Array2<f32>) {
        let (acts, emb) = self.features.forward(x);
        let logits = self.head.logits(&emb);
        (acts, emb, logits)
    }

    /// The two halves, explicitly.
    pub fn split(&self) -> (&FeatureExtractor, &LinearHead) {
        (&self.features, &self.head)
    }

    /// Forward pass that caches everything backward needs.
    pub fn forward_trace(&self, x: &Array4<f32>) -> ForwardTrace {
        let t1 = self.features.convs[0].forward_relu(x);
        let t2 = self.features.convs[1].forward_relu(&t1.output);
        let t3 = self.features.convs[2].forward_relu(&t2.output);
        let embeddings = global_avg_pool(&t3.output);
        let logits = self.head.logits(&embeddings);
        ForwardTrace {
            conv_traces: [t1, t2, t3],
            embeddings,
            logits,
        }
    }

    /// Full backward pass from `dlogits` to parameter gradients.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Array2<f32>) -> Gradients {
        let (head_w, head_b, demb) = self.head.backward(&trace.embeddings, dlogits);
        let (_, _, h3, w3) = trace.conv_traces[2].output.dim();
        let da3 = global_avg_pool_backward(&demb, (h3, w3));

        let (dx3, dw3, db3) =
            self.features.convs[2].backward_relu(&trace.conv_traces[2], &da3, true);
        let (dx2, dw2, db2) = self.features.convs[1].backward_relu(
            &trace.conv_traces[1],
            &dx3.expect("dx requested"),
            true,
        );
        let (_, dw1, db1) = self.features.convs[0].backward_relu(
            &trace.conv_traces[0],
            &dx2.expect("dx requested"),
            false,
        );

        Gradients {
            conv_w: [dw1, dw2, dw3],
            conv_b: [db1, db2, db3],
            head_w,
            head_b,
        }
    }

    // ---- persistence ----

    /// Tensors in blob order, with names.
    fn tensor_manifest(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::with_capacity(8);
        for (i, conv) in self.features.convs.iter().enumerate() {
            out.push((
                format!("features.conv{}.weight", i + 1),
                conv.weight.shape().to_vec(),
                conv.weight.iter().copied().collect(),
            ));
            out.push((
                format!("features.conv{}.bias", i + 1),
                conv.bias.shape().to_vec(),
                conv.bias.iter().copied().collect(),
            ));
        }
        out.push((
            "head.weight".into(),
            self.head.weight.shape().to_vec(),
            self.head.weight.iter().copied().collect(),
        ));
        out.push((
            "head.bias".into(),
            self.head.bias.shape().to_vec(),
            self.head.bias.iter().copied().collect(),
        ));
        out
    }

    fn blob(&self) -> Vec<u8> {
        let manifest = self.tensor_manifest();
        let total: usize = manifest.iter().map(|(_, _, v)| v.len() * 4).sum();
        let mut blob = Vec::with_capacity(total);
        for (_, _, values) in &manifest {
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    /// SHA-256 (hex) of the weight blob; the model's identity. Mask caches
    /// and loss caches record it and refuse to run against anything else.
    pub fn weight_hash(&self) -> String {
        hex::encode(Sha256::digest(self.blob()))
    }

    /// SHA-256 (hex) of the feature-extractor tensors only; lets a caller
    /// verify that retraining left the frozen half untouched.
    pub fn feature_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for conv in &self.features.convs {
            for v in conv.weight.iter().chain(conv.bias.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let manifest = self.tensor_manifest();
        let blob = self.blob();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: "f32le".into(),
            shape: self.shape,
            tensors: manifest
                .iter()
                .map(|(name, shape, _)| TensorInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        file.write_all(&blob)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if header_len > 1 << 20 {
            return Err(DacError::invalid(format!(
                "checkpoint header claims {header_len} bytes; file is corrupt or not a checkpoint"
            )));
        }
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
        if header.format != CHECKPOINT_FORMAT || header.dtype != "f32le" {
            return Err(DacError::invalid(format!(
                "unsupported checkpoint format {}/{}",
                header.format, header.dtype
            )));
        }
        let mut blob = Vec::new();
        file.read_to_end(&mut blob)?;
        let actual = hex::encode(Sha256::digest(&blob));
        if actual != header.blob_sha256 {
            return Err(DacError::Integrity {
                what: format!("checkpoint weight blob in {}", path.display()),
                expected: header.blob_sha256,
                actual,
            });
        }

        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if blob.len() != expected {
            return Err(DacError::Integrity {
                what: format!("checkpoint blob length in {}", path.display()),
                expected: format!("{expected} bytes"),
                actual: format!("{} bytes", blob.len()),
            });
        }

        let mut model = SplitModel::new(header.shape, 0)?;
        let mut offset = 0usize;
        let mut take = |shape: &[usize]| -> Vec<f32> {
            let count: usize = shape.iter().product();
            let vals = blob[offset..offset + count * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += count * 4;
            vals
        };
        for info in &header.tensors {
            let values = take(&info.shape);
            model.assign_tensor(&info.name, &info.shape, values)?;
        }
        Ok(model)
    }

    fn assign_tensor(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<()> {
        let mismatch = |expected: &[usize]| {
            DacError::invalid(format!(
                "checkpoint tensor {name} has shape {shape:?}, model expects {expected:?}"
            ))
        };
        match name {
            "features.conv1.weight" | "features.conv2.weight" | "features.conv3.weight" => {
                let idx = name.as_bytes()["features.conv".len()] - b'1';
                let conv = &mut self.features.convs[idx as usize];
                if shape != conv.weight.shape() {
                    return Err(mismatch(conv.weight.shape()));
                }
                conv.weight =
                    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
                        .expect("length checked");
            }
            "features.conv1.bias" | "features.conv2.bias" | "features.conv3.bias" => {
                let idx = name.as_bytes()["features.conv".len()] - b'1';
                let conv = &mut self.features.convs[idx as usize];
                if shape != conv.bias.shape() {
                    return Err(mismatch(conv.bias.shape()));
                }
                conv.bias = Array1::from_vec(values);
            }
            "head.weight" => {
                if shape != self.head.weight.shape() {
                    return Err(mismatch(self.head.weight.shape()));
                }
                self.head.weight =
                    Array2::from_shape_vec((shape[0], shape[1]), values).expect("length checked");
            }
            "head.bias" => {
                if shape != self.head.bias.shape() {
                    return Err(mismatch(self.head.bias.shape()));
                }
                self.head.bias = Array1::from_vec(values);
            }
            other => {
                return Err(DacError::invalid(format!(
                    "checkpoint contains unknown tensor {other}"
                )))
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "dac-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dtype: String,
    shape: ModelShape,
    tensors: Vec<TensorInfo>,
    blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_shape() -> ModelShape {
        ModelShape {
            channels_in: 3,
            height: 8,
            width: 8,
            classes: 2,
        }
    }

    /// Deterministic patterned weights so the frozen forward oracle below is
    /// reproducible outside this crate.
    fn patterned_model() -> SplitModel {
        let mut model = SplitModel::new(tiny_shape(), 0).unwrap();
        for (layer, conv) in model.features.convs.iter_mut().enumerate() {
            let l = layer as i64;
            conv.weight.indexed_iter_mut().for_each(|((o, c, i, j), v)| {
                let t = (o as i64 * 7 + c as i64 * 3 + i as i64 * 2 + j as i64 + l) % 5;
                *v = t as f32 * 0.1 - 0.2;
            });
            conv.bias.indexed_iter_mut().for_each(|(o, v)| {
                *v = (o % 3) as f32 * 0.05;
            });
        }
        model.head.weight.indexed_iter_mut().for_each(|((k, d), v)| {
            *v = (((k * 11 + d) % 7) as f32) * 0.05 - 0.15;
        });
        model.head.bias.indexed_iter_mut().for_each(|(k, v)| {
            *v = k as f32 * 0.01;
        });
        model
    }

    #[test]
    fn forward_matches_external_reference() {
        // Logits for an all-ones 3x8x8 input under the patterned weights,
        // frozen from an independent NumPy implementation of the same
        // conv/pool/head arithmetic (f64 there, so agreement to ~1e-5 is
        // the f32 accumulation budget).
        let model = patterned_model();
        let x = Array4::from_elem((1, 3, 8, 8), 1.0f32);
        let logits = model.forward(&x);
        let expected = [-0.014_875_0f32, 0.041_575_0];
        for (a, e) in logits.iter().zip(expected.iter()) {
            assert!(
                (a - e).abs() < 1e-4,
                "forward drifted from the frozen reference: {a} vs {e}"
            );
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = SplitModel::new(tiny_shape(), 42).unwrap();
        let b = SplitModel::new(tiny_shape(), 42).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        let c = SplitModel::new(tiny_shape(), 43).unwrap();
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = SplitModel::new(tiny_shape(), 7).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = SplitModel::load_checkpoint(&path).unwrap();
        assert_eq!(model.weight_hash(), loaded.weight_hash());
        assert_eq!(model.shape, loaded.shape);

        let x = Array4::from_elem((2, 3, 8, 8), 0.25f32);
        assert_eq!(model.forward(&x), loaded.forward(&x), "bitwise same forward");
    }

    #[test]
    fn corrupt_checkpoint_is_reported_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        SplitModel::new(tiny_shape(), 7)
            .unwrap()
            .save_checkpoint(&path)
            .unwrap();
        // Flip one byte near the end of the blob.
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xFF;
        std::fs::write(&path, bytes).unwrap();
        match SplitModel::load_checkpoint(&path) {
            Err(DacError::Integrity { expected, actual, .. }) => {
                assert_ne!(expected, actual, "error must name the mismatched hashes");
            }
            other => panic!("expected an integrity error, got {other:?}"),
        }
    }

    #[test]
    fn feature_hash_ignores_the_head() {
        let mut model = SplitModel::new(tiny_shape(), 7).unwrap();
        let before = model.feature_hash();
        let full_before = model.weight_hash();
        model.head.weight[(0, 0)] += 1.0;
        assert_eq!(model.feature_hash(), before);
        assert_ne!(model.weight_hash(), full_before);
    }

    #[test]
    fn finite_differences_confirm_full_backward() {
        // Central differences in f32. ReLU makes the loss piecewise smooth:
        // a probe whose interval straddles a kink produces a secant that no
        // longer matches the one-sided analytic gradient, so each probe is
        // validated at two step sizes and skipped if the estimates disagree.
        // An indexing bug in conv backward would corrupt most probes at O(1)
        // magnitude, far beyond the tolerance here.
        let model = patterned_model();
        let mut rng = crate::streams::stream(5, "test", &[]);
        use rand::Rng as _;
        let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(0.0f32..1.0));
        let labels = vec![0usize, 1];

        let trace = model.forward_trace(&x);
        let (_, dlogits) = softmax_cross_entropy(&trace.logits, &labels);
        let grads = model.backward(&trace, &dlogits);

        let loss_with = |m: &SplitModel| -> f64 {
            let logits = m.forward(&x);
            softmax_cross_entropy(&logits, &labels).0
        };
        let fd_at = |layer: usize, probe: usize, h: f32| -> f64 {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.features.convs[layer].weight.as_slice_mut().unwrap()[probe] += h;
            minus.features.convs[layer].weight.as_slice_mut().unwrap()[probe] -= h;
            (loss_with(&plus) - loss_with(&minus)) / (2.0 * f64::from(h))
        };

        let mut checked = 0usize;
        let mut skipped = 0usize;
        for layer in 0..3 {
            let count = model.features.convs[layer].weight.len();
            for probe in [0, count / 3, count / 2, count - 1] {
                let fd_wide = fd_at(layer, probe, 2e-3);
                let fd = fd_at(layer, probe, 1e-3);
                if (fd_wide - fd).abs() > 0.2 * fd.abs().max(0.02) {
                    skipped += 1;
                    continue;
                }
                let analytic = f64::from(grads.conv_w[layer].as_slice().unwrap()[probe]);
                assert!(
                    (fd - analytic).abs() <= 5e-2 * analytic.abs().max(0.05),
                    "conv{} weight[{probe}]: fd {fd} vs analytic {analytic}",
                    layer + 1
                );
                checked += 1;
            }
        }
        assert!(
            checked >= 9,
            "too many probes straddled kinks: {checked} checked, {skipped} skipped"
        );
    }
}
