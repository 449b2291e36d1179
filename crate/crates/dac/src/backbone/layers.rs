//! Layer kernels for the small convolutional backbone.
//!
//! Everything is f32, single-threaded, and allocation-explicit. Convolution
//! lowers to im2col plus one GEMM per layer (ndarray's `dot`), which is what
//! keeps full-dataset training tractable on one core; the straightforward
//! quadruple-loop convolution lives in the tests as the independent oracle
//! for the lowered path.
//!
//! Shape conventions: image batches are `(n, c, h, w)`, embeddings are
//! `(n, d)`, logits are `(n, k)`; all arrays are standard (row-major)
//! layout, which the raw-slice hot loops below rely on.

use ndarray::{Array1, Array2, Array4};

/// 2D convolution with square kernels and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(c_out, c_in, k, k)`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Lower `(n, c, h, w)` into the `(c*k*k, n*ho*wo)` patch matrix.
/// Out-of-image taps stay zero (zero padding).
pub fn im2col(
    x: &Array4<f32>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array2<f32>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let rows = c * kernel * kernel;
    let ncols = n * ho * wo;
    let xs = x.as_slice().expect("input must be standard layout");
    let mut cols = vec![0f32; rows * ncols];

    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                // Range of output columns whose source column is in-image.
                let j_lo = padding.saturating_sub(kj).div_ceil(stride);
                let j_hi_excl = ((w + padding).saturating_sub(kj).max(1) - 1) / stride + 1;
                let j_hi_excl = j_hi_excl.min(wo);
                for ni in 0..n {
                    for i in 0..ho {
                        let src_i = (i * stride + ki) as isize - padding as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        let xbase = ((ni * c + ci) * h + src_i as usize) * w;
                        let cbase = row * ncols + (ni * ho + i) * wo;
                        for j in j_lo..j_hi_excl {
                            let src_j = j * stride + kj - padding;
                            cols[cbase + j] = xs[xbase + src_j];
                        }
                    }
                }
            }
        }
    }
    (
        Array2::from_shape_vec((rows, ncols), cols).expect("row-major construction"),
        ho,
        wo,
    )
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix gradients back onto the
/// `(n, c, h, w)` input gradient.
pub fn col2im(
    dcols: &Array2<f32>,
    input_dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array4<f32> {
    let (n, c, h, w) = input_dim;
    let ho = conv_out_dim(h, kernel, stride, padding);
    let wo = conv_out_dim(w, kernel, stride, padding);
    let ncols = n * ho * wo;
    debug_assert_eq!(dcols.dim(), (c * kernel * kernel, ncols));
    let ds = dcols.as_slice().expect("standard layout");
    let mut dx = vec![0f32; n * c * h * w];

    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let j_lo = padding.saturating_sub(kj).div_ceil(stride);
                let j_hi_excl = (((w + padding).saturating_sub(kj).max(1) - 1) / stride + 1).min(wo);
                for ni in 0..n {
                    for i in 0..ho {
                        let src_i = (i * stride + ki) as isize - padding as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        let xbase = ((ni * c + ci) * h + src_i as usize) * w;
                        let cbase = row * ncols + (ni * ho + i) * wo;
                        for j in j_lo..j_hi_excl {
                            let src_j = j * stride + kj - padding;
                            dx[xbase + src_j] += ds[cbase + j];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), dx).expect("row-major construction")
}

/// Cached per-layer state the backward pass needs.
pub struct ConvTrace {
    pub cols: Array2<f32>,
    pub input_dim: (usize, usize, usize, usize),
    /// Post-ReLU output `(n, c_out, ho, wo)`; doubles as the ReLU mask
    /// (positive entries passed through).
    pub output: Array4<f32>,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> Array2<f32> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
            .to_owned()
    }

    /// Convolution followed by ReLU, returning the trace for backward.
    pub fn forward_relu(&self, x: &Array4<f32>) -> ConvTrace {
        let (n, _, _, _) = x.dim();
        let k = self.weight.dim().2;
        let (cols, ho, wo) = im2col(x, k, self.stride, self.padding);
        let co = self.out_channels();
        let out_mat = self.weight_matrix().dot(&cols); // (co, n*ho*wo)

        let mut out = vec![0f32; n * co * ho * wo];
        let om = out_mat.as_slice().expect("standard layout");
        let plane = ho * wo;
        for c in 0..co {
            let b = self.bias[c];
            for ni in 0..n {
                let src = c * (n * plane) + ni * plane;
                let dst = (ni * co + c) * plane;
                for p in 0..plane {
                    out[dst + p] = (om[src + p] + b).max(0.0);
                }
            }
        }
        ConvTrace {
            cols,
            input_dim: x.dim(),
            output: Array4::from_shape_vec((n, co, ho, wo), out).expect("row-major"),
        }
    }

    /// Backward through ReLU and the convolution.
    ///
    /// Returns `(dx, dw, db)`; `dx` is skipped (None) when `need_dx` is
    /// false, which saves the col2im for the first layer.
    pub fn backward_relu(
        &self,
        trace: &ConvTrace,
        grad_out: &Array4<f32>,
        need_dx: bool,
    ) -> (Option<Array4<f32>>, Array4<f32>, Array1<f32>) {
        let (n, co, ho, wo) = trace.output.dim();
        debug_assert_eq!(grad_out.dim(), trace.output.dim());
        let plane = ho * wo;

        // Gate by ReLU and transpose (n, co, ho, wo) -> (co, n*ho*wo).
        let go = grad_out.as_slice().expect("standard layout");
        let act = trace.output.as_slice().expect("standard layout");
        let mut g = vec![0f32; co * n * plane];
        for ni in 0..n {
            for c in 0..co {
                let src = (ni * co + c) * plane;
                let dst = c * (n * plane) + ni * plane;
                for p in 0..plane {
                    if act[src + p] > 0.0 {
                        g[dst + p] = go[src + p];
                    }
                }
            }
        }
        let g_mat = Array2::from_shape_vec((co, n * plane), g).expect("row-major");

        let db = g_mat.sum_axis(ndarray::Axis(1));
        let dw_mat = g_mat.dot(&trace.cols.t()); // (co, ci*k*k)
        let (co_w, ci, k, _) = self.weight.dim();
        debug_assert_eq!(co_w, co);
        let dw = dw_mat
            .into_shape_with_order((co, ci, k, k))
            .expect("contiguous");

        let dx = if need_dx {
            let dcols = self.weight_matrix().t().dot(&g_mat);
            Some(col2im(
                &dcols,
                trace.input_dim,
                k,
                self.stride,
                self.padding,
            ))
        } else {
            None
        };
        (dx, dw, db)
    }
}

/// Global average pooling `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0f32; n * c];
    for (idx, o) in out.iter_mut().enumerate() {
        let base = idx * h * w;
        let mut acc = 0f32;
        for v in &xs[base..base + h * w] {
            acc += v;
        }
        *o = acc * scale;
    }
    Array2::from_shape_vec((n, c), out).expect("row-major")
}

/// Backward of global average pooling.
pub fn global_avg_pool_backward(
    dz: &Array2<f32>,
    spatial: (usize, usize),
) -> Array4<f32> {
    let (n, c) = dz.dim();
    let (h, w) = spatial;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dz[(ni, ci)] * scale;
            dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
        }
    }
    dx
}

/// The linear classification head `logits = emb * W^T + b`.
#[derive(Debug, Clone)]
pub struct LinearHead {
    /// `(classes, d)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl LinearHead {
    pub fn logits(&self, emb: &Array2<f32>) -> Array2<f32> {
        let mut out = emb.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        out
    }

    /// Backward given upstream `dlogits` `(n, k)`:
    /// returns `(dw, db, demb)`.
    pub fn backward(
        &self,
        emb: &Array2<f32>,
        dlogits: &Array2<f32>,
    ) -> (Array2<f32>, Array1<f32>, Array2<f32>) {
        let dw = dlogits.t().dot(emb);
        let db = dlogits.sum_axis(ndarray::Axis(0));
        let demb = dlogits.dot(&self.weight);
        (dw, db, demb)
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. logits.
///
/// The gradient is `(softmax - onehot) / n`, i.e. already scaled for the
/// batch mean. Loss accumulates in f64.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "one label per logit row");
    let mut dlogits = Array2::<f32>::zeros((n, k));
    let mut total = 0f64;
    let inv_n = 1.0 / n as f32;
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < k, "label {label} out of range for {k} classes");
        let row = logits.row(i);
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0f32;
        for &z in row.iter() {
            sum += (z - max).exp();
        }
        let lse = max + sum.ln();
        total += f64::from(lse - row[label]);
        for j in 0..k {
            let p = (row[j] - lse).exp();
            dlogits[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (total / n as f64, dlogits)
}

/// Per-example cross-entropy losses (no gradient), for loss caches and
/// probe curves.
pub fn cross_entropy_each(logits: &Array2<f32>, labels: &[usize]) -> Vec<f32> {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "one label per logit row");
    let mut out = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        assert!(label < k, "label {label} out of range for {k} classes");
        let row = logits.row(i);
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0f32;
        for &z in row.iter() {
            sum += (z - max).exp();
        }
        out.push(max + sum.ln() - row[label]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    /// Direct quadruple-loop convolution; the oracle for the im2col path.
    fn naive_conv(
        x: &Array4<f32>,
        weight: &Array4<f32>,
        bias: &Array1<f32>,
        stride: usize,
        padding: usize,
    ) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (co, ci, k, _) = weight.dim();
        assert_eq!(c, ci);
        let ho = conv_out_dim(h, k, stride, padding);
        let wo = conv_out_dim(w, k, stride, padding);
        let mut out = Array4::<f32>::zeros((n, co, ho, wo));
        for ni in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bias[o];
                        for cc in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let si = (i * stride + ki) as isize - padding as isize;
                                    let sj = (j * stride + kj) as isize - padding as isize;
                                    if si >= 0
                                        && sj >= 0
                                        && (si as usize) < h
                                        && (sj as usize) < w
                                    {
                                        acc += x[(ni, cc, si as usize, sj as usize)]
                                            * weight[(o, cc, ki, kj)];
                                    }
                                }
                            }
                        }
                        out[(ni, o, i, j)] = acc.max(0.0);
                    }
                }
            }
        }
        out
    }

    fn seeded_array4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        use rand::Rng;
        let mut rng = crate::streams::stream(seed, "test", &[]);
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn im2col_conv_matches_naive_conv() {
        for (seed, n, c, h, w, co, stride, padding) in [
            (1u64, 2usize, 3usize, 8usize, 6usize, 4usize, 2usize, 1usize),
            (2, 1, 1, 5, 5, 2, 1, 1),
            (3, 3, 2, 7, 9, 5, 2, 0),
            (4, 1, 4, 4, 4, 3, 1, 0),
        ] {
            let x = seeded_array4((n, c, h, w), seed);
            let conv = Conv2d {
                weight: seeded_array4((co, c, 3, 3), seed + 100),
                bias: Array1::from_shape_fn(co, |i| i as f32 * 0.1 - 0.2),
                stride,
                padding,
            };
            let fast = conv.forward_relu(&x).output;
            let slow = naive_conv(&x, &conv.weight, &conv.bias, stride, padding);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!(
                    (a - b).abs() <= 1e-4 * b.abs().max(1.0),
                    "lowered conv diverged from direct conv: {a} vs {b} (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the defining
        // property of an adjoint, and exactly what backward relies on.
        let x = seeded_array4((2, 3, 6, 5), 11);
        let (cols, _, _) = im2col(&x, 3, 2, 1, );
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| {
            ((i * 31 + j * 7) % 13) as f32 * 0.25 - 1.5
        });
        let lhs: f64 = cols
            .iter()
            .zip(y.iter())
            .map(|(a, b)| f64::from(a * b))
            .sum();
        let back = col2im(&y, x.dim(), 3, 2, 1);
        let rhs: f64 = x
            .iter()
            .zip(back.iter())
            .map(|(a, b)| f64::from(a * b))
            .sum();
        assert!(
            (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn global_avg_pool_means_and_backward_spread() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, i, j)| {
            (c * 4 + i * 2 + j) as f32
        });
        let pooled = global_avg_pool(&x);
        assert_eq!(pooled, array![[1.5, 5.5]]);

        let dz = array![[4.0, 8.0]];
        let dx = global_avg_pool_backward(&dz, (2, 2));
        assert_eq!(dx[(0, 0, 0, 0)], 1.0);
        assert_eq!(dx[(0, 1, 1, 1)], 2.0);
    }

    #[test]
    fn head_logits_affine_in_embeddings() {
        let head = LinearHead {
            weight: array![[1.0, 0.0], [0.5, -0.5]],
            bias: array![0.1, -0.1],
        };
        let emb = array![[2.0, 4.0]];
        let logits = head.logits(&emb);
        assert_eq!(logits, array![[2.1, -1.1]]);
    }

    #[test]
    fn softmax_ce_matches_hand_computation() {
        // Logits [0, ln 3] with label 1: p = (1/4, 3/4), loss = -ln(3/4).
        let logits = array![[0.0, 3f32.ln()]];
        let (loss, dl) = softmax_cross_entropy(&logits, &[1]);
        assert!((loss - (-0.75f64.ln())).abs() < 1e-6, "loss {loss}");
        assert!((dl[(0, 0)] - 0.25).abs() < 1e-6);
        assert!((dl[(0, 1)] + 0.25).abs() < 1e-6);

        let each = cross_entropy_each(&logits, &[1]);
        assert!((f64::from(each[0]) - loss).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_gradient_rows_sum_to_zero() {
        let logits = array![[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]];
        let (_, dl) = softmax_cross_entropy(&logits, &[0, 2]);
        for row in dl.rows() {
            let s: f32 = row.sum();
            assert!(s.abs() < 1e-6, "softmax gradient row sums to {s}");
        }
    }
}
