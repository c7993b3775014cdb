//! Dense tensors and the small numeric kernel set everything else shares.
//!
//! Kernels are naive loops over contiguous row-major storage with fixed,
//! ascending accumulation order. That choice is load-bearing: sliced views and
//! extracted standalone weights run the same element order, so their outputs
//! are bit-identical, and cached/uncached attention differ only by which rows
//! feed the same loops. Generic over [`Real`] so production paths run f32
//! while gradient checks rerun identical code in f64.

pub mod rng;

pub use rng::Rng;

use crate::error::{Error, Result};

/// Scalar for numeric kernels; implemented by `f32` and `f64`.
pub trait Real:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Lossy f64 -> T conversion for constants and RNG draws.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 converts to Real")
}

/// Widening T -> f64 conversion for reporting and accumulation.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("Real converts to f64")
}

// =============================================================================
// Tensor
// =============================================================================

/// Contiguous row-major tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Tensor<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape {
                op: "Tensor::new",
                detail: format!("data length {} != shape product {}", data.len(), expect),
            });
        }
        Ok(Tensor { data, shape })
    }

    #[must_use]
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { data: vec![T::zero(); shape.iter().product()], shape: shape.to_vec() }
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[must_use]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[must_use]
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row `r` of a rank-2 tensor.
    #[must_use]
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Errors if any element is non-finite; `ctx` names the producing step.
    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        ensure_finite(&self.data, ctx)
    }
}

/// Errors if any element of `xs` is NaN or infinite.
pub fn ensure_finite<T: Real>(xs: &[T], ctx: &str) -> Result<()> {
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite value {x} at index {i} in {ctx}")));
        }
    }
    Ok(())
}

// =============================================================================
// Matmul kernels
// =============================================================================

/// `out[r, h*keep + j] = sum_k x[r, k] * w[k, h*head_dim + j]` for `j < keep`.
///
/// Keeps the leading `keep` columns of each of `n_heads` blocks of `w`
/// (shape `[d_in, n_heads * head_dim]`). With `n_heads = 1, keep = head_dim`
/// this is a plain matmul. Accumulation is ascending over `k`.
pub(crate) fn mm_cols_sliced<T: Real>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    n_heads: usize,
    head_dim: usize,
    keep: usize,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(w.len(), d_in * n_heads * head_dim);
    debug_assert!(keep <= head_dim);
    debug_assert_eq!(out.len(), rows * n_heads * keep);
    let w_cols = n_heads * head_dim;
    for r in 0..rows {
        let xr = &x[r * d_in..(r + 1) * d_in];
        let or = &mut out[r * n_heads * keep..(r + 1) * n_heads * keep];
        for h in 0..n_heads {
            for j in 0..keep {
                let col = h * head_dim + j;
                let mut s = T::zero();
                for (k, &xv) in xr.iter().enumerate() {
                    s = s + xv * w[k * w_cols + col];
                }
                or[h * keep + j] = s;
            }
        }
    }
}

/// `out[r, c] = sum_h sum_{j<keep} x[r, h*keep + j] * w[h*head_dim + j, c]`.
///
/// Keeps the leading `keep` rows of each of `n_heads` blocks of `w`
/// (shape `[n_heads * head_dim, d_out]`); `x` has the packed sliced width
/// `n_heads * keep`. With `keep = head_dim` the (h, j) enumeration visits the
/// rows of `w` in ascending order, matching a plain matmul exactly.
pub(crate) fn mm_rows_sliced<T: Real>(
    x: &[T],
    rows: usize,
    n_heads: usize,
    head_dim: usize,
    keep: usize,
    w: &[T],
    d_out: usize,
    out: &mut [T],
) {
    debug_assert_eq!(x.len(), rows * n_heads * keep);
    debug_assert_eq!(w.len(), n_heads * head_dim * d_out);
    debug_assert!(keep <= head_dim);
    debug_assert_eq!(out.len(), rows * d_out);
    for r in 0..rows {
        let xr = &x[r * n_heads * keep..(r + 1) * n_heads * keep];
        let or = &mut out[r * d_out..(r + 1) * d_out];
        for c in 0..d_out {
            let mut s = T::zero();
            for h in 0..n_heads {
                for j in 0..keep {
                    s = s + xr[h * keep + j] * w[(h * head_dim + j) * d_out + c];
                }
            }
            or[c] = s;
        }
    }
}

/// Matrix product of rank-2 tensors `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = vec![T::zero(); m * n];
    mm_cols_sliced(a.data(), m, k, b.data(), 1, n, n, &mut out);
    Tensor::new(out, vec![m, n])
}

// =============================================================================
// Softmax / layer norm / GELU
// =============================================================================

/// In-place softmax of one contiguous lane, with max subtraction.
pub(crate) fn softmax_lane<T: Real>(lane: &mut [T]) {
    let mut m = lane[0];
    for &v in lane.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for v in lane.iter_mut() {
        *v = (*v - m).exp();
        sum = sum + *v;
    }
    for v in lane.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax along `axis`. Stable under large magnitudes (max subtraction).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape {
            op: "softmax",
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let axis_len = shape[axis];
    if axis_len == 0 {
        return Err(Error::Shape { op: "softmax", detail: "empty softmax axis".into() });
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut lane = vec![T::zero(); axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = data[base + j * inner];
            }
            softmax_lane(&mut lane);
            for (j, l) in lane.iter().enumerate() {
                data[base + j * inner] = *l;
            }
        }
    }
    Ok(out)
}

/// Variance floor inside layer norm's reciprocal square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalize one row to zero mean, unit variance, then apply gain and bias.
/// Returns (mean, rstd) for backward passes.
pub(crate) fn layer_norm_lane<T: Real>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> (T, T) {
    let d = x.len();
    let inv_d = T::one() / real::<T>(d as f64);
    let mut mean = T::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean * inv_d;
    let mut var = T::zero();
    for &v in x {
        let c = v - mean;
        var = var + c * c;
    }
    var = var * inv_d;
    let rstd = T::one() / (var + real::<T>(LAYER_NORM_EPS)).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let d = *shape.last().ok_or(Error::Shape {
        op: "layer_norm",
        detail: "rank-0 input".into(),
    })?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!("gain/bias length {}/{} != last dim {d}", gain.len(), bias.len()),
        });
    }
    let rows = x.data().len() / d;
    let mut out = Tensor::zeros(shape);
    for r in 0..rows {
        let src = &x.data()[r * d..(r + 1) * d];
        let dst = &mut out.data_mut()[r * d..(r + 1) * d];
        layer_norm_lane(src, gain, bias, dst);
    }
    Ok(out)
}

/// sqrt(2/pi), the tanh-approximation GELU constant.
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

/// Elementwise GELU, tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = real::<T>(0.5);
    let c = real::<T>(GELU_C);
    let a = real::<T>(GELU_CUBIC);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// Elementwise GELU (tanh approximation) over a tensor.
#[must_use]
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

// =============================================================================
// Sampling primitives
// =============================================================================

/// One standard Gumbel draw: `-ln(-ln(u))` with `u` clamped to
/// `[1e-12, 1 - 1e-12]` so the result is always finite.
pub fn gumbel_noise(rng: &mut Rng) -> f64 {
    let u = rng.next_open01();
    -(-u.ln()).ln()
}

/// Temperature-scaled categorical draw by inverse CDF.
///
/// Probabilities come from `softmax(logits / temperature)` accumulated in f64;
/// a single uniform draw walks the CDF, falling back to the last index if
/// rounding leaves the walk short. Errors: empty logits or `temperature <= 0`.
pub fn categorical_sample<T: Real>(
    logits: &[T],
    temperature: f64,
    rng: &mut Rng,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Param("categorical_sample: empty logits".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Param(format!(
            "categorical_sample: temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut scaled: Vec<f64> = logits.iter().map(|&v| to_f64(v) / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut scaled {
        *v = (*v - m).exp();
        sum += *v;
    }
    let u = rng.next_f64() * sum;
    let mut cum = 0.0;
    for (i, &p) in scaled.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(scaled.len() - 1)
}

// =============================================================================
// Tests
// =============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(data: &[f32], rows: usize, cols: usize) -> Tensor<f32> {
        Tensor::new(data.to_vec(), vec![rows, cols]).unwrap()
    }

    #[test]
    fn tensor_shape_mismatch_rejected() {
        assert!(Tensor::new(vec![1.0f32; 5], vec![2, 3]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let id = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        assert_eq!(matmul(&a, &id).unwrap(), a);
    }

    #[test]
    fn matmul_rectangular_hand_case() {
        // [1 2 3; 4 5 6] x [1 0; 0 1; 1 1] = [4 5; 10 11]
        let a = t2(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let b = t2(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, 2);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = t2(&[1.0; 6], 2, 3);
        let b = t2(&[1.0; 8], 4, 2);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        let mut rng = Rng::new(17);
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f32> = (0..m * k).map(|_| rng.next_normal() as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.next_normal() as f32).collect();
        let got = matmul(&t2(&a, m, k), &t2(&b, k, n)).unwrap();
        // Independent ascending-k accumulation; equality must be bitwise.
        let mut want = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                want[i * n + j] = s;
            }
        }
        assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn sliced_cols_keeps_leading_block_per_head() {
        // 2 heads, head_dim 2, keep 1: output columns are w columns 0 and 2.
        let x = [1.0f32, 2.0, 3.0];
        let w = [
            1.0f32, 2.0, 3.0, 4.0, //
            5.0, 6.0, 7.0, 8.0, //
            9.0, 10.0, 11.0, 12.0,
        ];
        let mut out = vec![0.0f32; 2];
        mm_cols_sliced(&x, 1, 3, &w, 2, 2, 1, &mut out);
        let full_col0 = 1.0 + 2.0 * 5.0 + 3.0 * 9.0;
        let full_col2 = 3.0 + 2.0 * 7.0 + 3.0 * 11.0;
        assert_eq!(out, vec![full_col0, full_col2]);
    }

    #[test]
    fn sliced_rows_full_keep_equals_plain_matmul() {
        let mut rng = Rng::new(23);
        let (rows, nh, hd, dout) = (3, 4, 2, 5);
        let x: Vec<f32> = (0..rows * nh * hd).map(|_| rng.next_normal() as f32).collect();
        let w: Vec<f32> = (0..nh * hd * dout).map(|_| rng.next_normal() as f32).collect();
        let mut got = vec![0.0f32; rows * dout];
        mm_rows_sliced(&x, rows, nh, hd, hd, &w, dout, &mut got);
        let plain = matmul(&t2(&x, rows, nh * hd), &t2(&w, nh * hd, dout)).unwrap();
        assert_eq!(got, plain.into_data());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_preserved() {
        let x = t2(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 2, 3);
        let s = softmax(&x, 1).unwrap();
        for r in 0..2 {
            let row = s.row(r);
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row[0] < row[1] && row[1] < row[2]);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_overflow_safe() {
        let a = softmax(&t2(&[1.0, 2.0, 3.0], 1, 3), 1).unwrap();
        let b = softmax(&t2(&[1001.0, 1002.0, 1003.0], 1, 3), 1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let huge = softmax(&t2(&[3.0e38, 0.0], 1, 2), 1).unwrap();
        huge.ensure_finite("softmax").unwrap();
        assert!(huge.data()[0] > 0.999);
    }

    #[test]
    fn softmax_axis_zero() {
        let x = t2(&[0.0, 10.0, 0.0, 10.0], 2, 2);
        let s = softmax(&x, 0).unwrap();
        for c in 0..2 {
            let sum = s.data()[c] + s.data()[2 + c];
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_statistics() {
        let x = t2(&[1.0, 2.0, 3.0, 4.0], 1, 4);
        let gain = vec![1.0f32; 4];
        let bias = vec![0.0f32; 4];
        let y = layer_norm(&x, &gain, &bias).unwrap();
        let mean: f32 = y.data().iter().sum::<f32>() / 4.0;
        let var: f32 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let x = t2(&[5.0, 5.0, 5.0], 1, 3);
        let y = layer_norm(&x, &[2.0, 2.0, 2.0], &[0.25, 0.5, 0.75]).unwrap();
        for (got, want) in y.data().iter().zip(&[0.25f32, 0.5, 0.75]) {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_length_mismatch() {
        let x = t2(&[1.0, 2.0], 1, 2);
        assert!(layer_norm(&x, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let x = t2(&[0.0, 10.0, -10.0], 1, 3);
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
        assert!(y.data()[2].abs() < 1e-4);
    }

    #[test]
    fn gelu_f32_matches_f64_formula() {
        for &x in &[-2.5f64, -1.0, -0.1, 0.3, 1.0, 2.0] {
            let want = 0.5 * x * (1.0 + (GELU_C * (x + GELU_CUBIC * x * x * x)).tanh());
            let got = gelu_scalar(x as f32) as f64;
            assert!((got - want).abs() < 1e-6, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn gumbel_noise_finite_and_mean_near_euler_gamma() {
        let mut rng = Rng::new(29);
        let n = 60_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let g = gumbel_noise(&mut rng);
            assert!(g.is_finite());
            sum += g;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.577_215_664_901_532_9).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn categorical_degenerate_logit_dominates() {
        let mut rng = Rng::new(31);
        let logits = [0.0f32, 50.0, 0.0];
        for _ in 0..200 {
            assert_eq!(categorical_sample(&logits, 1.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn categorical_frequencies_track_probabilities() {
        let mut rng = Rng::new(37);
        let logits = [0.0f32, (2.0f32).ln(), (4.0f32).ln()];
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[categorical_sample(&logits, 1.0, &mut rng).unwrap()] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        for (f, p) in freq.iter().zip(&[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((f - p).abs() < 0.02, "freq {freq:?}");
        }
    }

    #[test]
    fn categorical_high_temperature_flattens() {
        let mut rng = Rng::new(41);
        let logits = [0.0f32, 3.0, 0.0];
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[categorical_sample(&logits, 1000.0, &mut rng).unwrap()] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 30_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "counts {counts:?}");
        }
    }

    #[test]
    fn categorical_parameter_errors() {
        let mut rng = Rng::new(1);
        assert!(categorical_sample::<f32>(&[], 1.0, &mut rng).is_err());
        assert!(categorical_sample(&[0.0f32], 0.0, &mut rng).is_err());
        assert!(categorical_sample(&[0.0f32], -1.0, &mut rng).is_err());
        assert!(categorical_sample(&[0.0f32], f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn categorical_deterministic_under_seed() {
        let logits = [0.1f32, 0.2, 0.3, 0.4];
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = Rng::new(seed);
            (0..50).map(|_| categorical_sample(&logits, 1.0, &mut rng).unwrap()).collect()
        };
        assert_eq!(draw(99), draw(99));
        assert_ne!(draw(99), draw(100));
    }

    #[test]
    fn ensure_finite_flags_nan() {
        assert!(ensure_finite(&[1.0f32, f32::NAN], "ctx").is_err());
        assert!(ensure_finite(&[1.0f32, 2.0], "ctx").is_ok());
    }
}
