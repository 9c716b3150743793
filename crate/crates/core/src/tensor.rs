//! Dense f32 tensors and the handful of kernels everything else is built on.
//!
//! Every matmul in this module accumulates each output element left to right
//! over the inner dimension, starting from `0.0`, so results are bit-stable
//! and comparable for exact equality against a scalar triple loop. The
//! non-transposed kernel uses i-k-j loop order, which keeps that per-element
//! order while streaming rows of `b`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::rng::SplitMix64;

/// Row-major f32 array with shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err("Tensor::new", &shape, &[data.len()]));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform values in `[-scale, scale)` drawn from `rng`.
    pub fn random(shape: &[usize], rng: &mut SplitMix64, scale: f32) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_uniform(&mut t.data, scale);
        t
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (product of all leading dims).
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Copy of columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start > end || end > c {
            return Err(Error::Range {
                what: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self::from_parts(vec![r, end - start], data))
    }

    /// Copy of rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(Error::Range {
                what: "slice_rows",
                index: end,
                bound: r,
            });
        }
        Ok(Self::from_parts(
            vec![end - start, c],
            self.data[start * c..end * c].to_vec(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }
}

/// `c = a · b` (or `a · bᵀ` when `transpose_b`).
pub fn matmul(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(dim_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_slices(a.data(), m, k, b.data(), n, transpose_b, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Slice-level matmul. `out` must hold `m * n` values; it is overwritten.
pub(crate) fn matmul_slices(
    a: &[f32],
    m: usize,
    k: usize,
    b: &[f32],
    n: usize,
    transpose_b: bool,
    out: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
    } else {
        out.fill(0.0);
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                let brow = &b[t * n..(t + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Sequential dot product (left to right, starting at zero).
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() || x.shape().is_empty() {
        return Err(dim_err("softmax_rows", x.shape(), &[1, 1]));
    }
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// INT8 payload with one f32 scale per row.
///
/// Every scale is positive; a row that was entirely zero is stored with
/// scale `1.0` and zero values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantRowsI8 {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantRowsI8 {
    pub fn from_parts(rows: usize, cols: usize, values: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || scales.len() != rows {
            return Err(dim_err(
                "QuantRowsI8::from_parts",
                &[rows, cols],
                &[values.len(), scales.len()],
            ));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NonFinite("QuantRowsI8 scale"));
        }
        Ok(Self {
            rows,
            cols,
            values,
            scales,
        })
    }

    pub(crate) fn with_row_capacity(cols: usize, rows: usize) -> Self {
        Self {
            rows: 0,
            cols,
            values: Vec::with_capacity(rows * cols),
            scales: Vec::with_capacity(rows),
        }
    }

    /// Quantizes `src` and appends it as a new row. Never reallocates while
    /// the row count stays within the reserved capacity.
    pub(crate) fn push_row(&mut self, src: &[f32]) {
        debug_assert_eq!(src.len(), self.cols);
        let start = self.values.len();
        self.values.resize(start + self.cols, 0);
        let scale = quantize_row_into(src, &mut self.values[start..]);
        self.scales.push(scale);
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn view(&self) -> QuantRowsView<'_> {
        QuantRowsView {
            values: &self.values,
            scales: &self.scales,
            rows: self.rows,
            cols: self.cols,
            stride: 1,
        }
    }
}

/// Borrowed, possibly strided, set of quantized rows.
///
/// Row `r` starts at `values[r * stride * cols]` and uses `scales[r * stride]`,
/// so a single head of an interleaved (token, head) store can be viewed
/// without copying.
#[derive(Debug, Clone, Copy)]
pub struct QuantRowsView<'a> {
    values: &'a [i8],
    scales: &'a [f32],
    rows: usize,
    cols: usize,
    stride: usize,
}

impl<'a> QuantRowsView<'a> {
    pub(crate) fn strided(
        values: &'a [i8],
        scales: &'a [f32],
        rows: usize,
        cols: usize,
        stride: usize,
    ) -> Self {
        debug_assert!(rows == 0 || values.len() >= ((rows - 1) * stride + 1) * cols);
        debug_assert!(rows == 0 || scales.len() > (rows - 1) * stride);
        Self {
            values,
            scales,
            rows,
            cols,
            stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&'a [i8], f32) {
        let off = r * self.stride * self.cols;
        (
            &self.values[off..off + self.cols],
            self.scales[r * self.stride],
        )
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n > self.rows {
            return Err(Error::Range {
                what: "QuantRowsView::prefix",
                index: n,
                bound: self.rows,
            });
        }
        Ok(Self { rows: n, ..*self })
    }

    /// Start of the row payload, for pointer-identity checks.
    pub fn payload_ptr(&self) -> *const i8 {
        self.values.as_ptr()
    }

    pub fn to_owned(&self) -> QuantRowsI8 {
        let mut values = Vec::with_capacity(self.rows * self.cols);
        let mut scales = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let (v, s) = self.row(r);
            values.extend_from_slice(v);
            scales.push(s);
        }
        QuantRowsI8 {
            rows: self.rows,
            cols: self.cols,
            values,
            scales,
        }
    }
}

impl<'a> From<&'a QuantRowsI8> for QuantRowsView<'a> {
    fn from(q: &'a QuantRowsI8) -> Self {
        q.view()
    }
}

/// Symmetric absmax quantization of one row into `dst`; returns the scale.
pub fn quantize_row_into(src: &[f32], dst: &mut [i8]) -> f32 {
    let absmax = src.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    let mut scale = absmax / 127.0;
    if scale == 0.0 {
        // all-zero row, or absmax so small that the scale underflows
        scale = 1.0;
    }
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = libm::roundf(x / scale).clamp(-127.0, 127.0) as i8;
    }
    scale
}

pub fn quantize_rows_i8(x: &Tensor) -> Result<QuantRowsI8> {
    let (r, c) = x.dims2("quantize_rows_i8")?;
    if r == 0 || c == 0 {
        return Err(dim_err("quantize_rows_i8", x.shape(), &[1, 1]));
    }
    let mut q = QuantRowsI8::with_row_capacity(c, r);
    for i in 0..r {
        q.push_row(x.row(i));
    }
    Ok(q)
}

pub fn dequantize<'a>(q: impl Into<QuantRowsView<'a>>) -> Tensor {
    let q = q.into();
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for r in 0..q.rows {
        let (v, s) = q.row(r);
        data.extend(v.iter().map(|&x| x as f32 * s));
    }
    Tensor::from_parts(vec![q.rows, q.cols], data)
}

/// `a · qᵀ` where `q` is INT8 with per-row scales.
///
/// Each INT8 element is widened to f32 and scaled as it is loaded, then fed
/// to the same left-to-right accumulation as [`matmul`]; the dequantized
/// matrix is never materialized. The result is bit-identical to
/// `matmul(a, dequantize(q), true)`.
pub fn matmul_hybrid<'a>(a: &Tensor, q: impl Into<QuantRowsView<'a>>) -> Result<Tensor> {
    let q = q.into();
    let (m, k) = a.dims2("matmul_hybrid")?;
    if k != q.cols {
        return Err(dim_err("matmul_hybrid", a.shape(), &[q.rows, q.cols]));
    }
    let n = q.rows;
    let mut out = vec![0.0f32; m * n];
    matmul_hybrid_slices(a.data(), m, k, q, &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_hybrid_slices(
    a: &[f32],
    m: usize,
    k: usize,
    q: QuantRowsView<'_>,
    out: &mut [f32],
) {
    let n = q.rows;
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let (v, s) = q.row(j);
            let mut acc = 0.0f32;
            for (x, &w) in ar.iter().zip(v) {
                acc += x * (w as f32 * s);
            }
            out[i * n + j] = acc;
        }
    }
}

/// `w · q` where `q` is INT8 `[n × c]`; the weighted-row accumulation of
/// decode attention. Bit-identical to `matmul(w, dequantize(q), false)`.
pub fn matmul_hybrid_rows<'a>(w: &Tensor, q: impl Into<QuantRowsView<'a>>) -> Result<Tensor> {
    let q = q.into();
    let (m, n) = w.dims2("matmul_hybrid_rows")?;
    if n != q.rows {
        return Err(dim_err("matmul_hybrid_rows", w.shape(), &[q.rows, q.cols]));
    }
    let c = q.cols;
    let mut out = vec![0.0f32; m * c];
    matmul_hybrid_rows_slices(w.data(), m, q, &mut out);
    Ok(Tensor::from_parts(vec![m, c], out))
}

pub(crate) fn matmul_hybrid_rows_slices(
    w: &[f32],
    m: usize,
    q: QuantRowsView<'_>,
    out: &mut [f32],
) {
    let n = q.rows;
    let c = q.cols;
    out.fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..n {
            let wv = w[i * n + j];
            let (v, s) = q.row(j);
            for (o, &x) in orow.iter_mut().zip(v) {
                *o += wv * (x as f32 * s);
            }
        }
    }
}

/// `a · qᵀ` with the row scale applied once per output element after the
/// integer-valued accumulation. Agrees with [`matmul_hybrid`] to within f32
/// rounding (exactly when scales are powers of two).
pub fn matmul_hybrid_deferred_scale<'a>(
    a: &Tensor,
    q: impl Into<QuantRowsView<'a>>,
) -> Result<Tensor> {
    let q = q.into();
    let (m, k) = a.dims2("matmul_hybrid_deferred_scale")?;
    if k != q.cols {
        return Err(dim_err(
            "matmul_hybrid_deferred_scale",
            a.shape(),
            &[q.rows, q.cols],
        ));
    }
    let n = q.rows;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let (v, s) = q.row(j);
            let mut acc = 0.0f32;
            for (x, &w) in ar.iter().zip(v) {
                acc += x * w as f32;
            }
            out[i * n + j] = acc * s;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for t in 0..k {
                    acc += a.data()[i * k + t] * b.data()[t * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    fn transpose(b: &Tensor) -> Tensor {
        let (r, c) = (b.shape()[0], b.shape()[1]);
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = b.data()[i * c + j];
            }
        }
        Tensor::matrix(c, r, d).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = matmul(&Tensor::identity(2), &b, false).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_dot() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b, false).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_seeded_matches_triple_loop() {
        let mut rng = SplitMix64::new(42);
        let a = Tensor::random(&[7, 5], &mut rng, 1.0);
        let b = Tensor::random(&[5, 3], &mut rng, 1.0);
        let c = matmul(&a, &b, false).unwrap();
        assert_eq!(c.data(), triple_loop(&a, &b).as_slice());
        let ct = matmul(&a, &transpose(&b), true).unwrap();
        assert_eq!(ct.data(), c.data());
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b, false) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matmul(&a, &b, true).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let x = [1.0f64, 2.0, 3.0];
        let denom: f64 = x.iter().map(|v| (v - 3.0).exp()).sum();
        let s = softmax_rows(&Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for (got, xv) in s.data().iter().zip(x) {
            let want = (xv - 3.0).exp() / denom;
            assert!((*got as f64 - want).abs() <= 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(matches!(
            softmax_rows(&Tensor::zeros(&[0, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_rows_i8(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        assert_eq!(q.values(), &[0, 0, 0]);
        assert_eq!(q.scales(), &[1.0]);

        let q = quantize_rows_i8(&Tensor::matrix(1, 2, vec![-127.0, 127.0]).unwrap()).unwrap();
        assert_eq!(q.values(), &[-127, 127]);
        assert_eq!(q.scales(), &[1.0]);

        let mut rng = SplitMix64::new(7);
        let x = Tensor::random(&[1, 64], &mut rng, 3.0);
        let q = quantize_rows_i8(&x).unwrap();
        let d = dequantize(&q);
        let s = q.scales()[0];
        for (a, b) in x.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= s / 2.0);
        }
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantRowsI8::from_parts(1, 1, vec![64], vec![0.5]).unwrap();
        assert_eq!(dequantize(&q).data(), &[32.0]);

        // multiples of a power-of-two scale round-trip exactly
        let scale = 0.25f32;
        let data: Vec<f32> = [-127i32, -3, 0, 5, 64, 127]
            .iter()
            .map(|&k| k as f32 * scale)
            .collect();
        let x = Tensor::matrix(1, 6, data).unwrap();
        let q = quantize_rows_i8(&x).unwrap();
        assert_eq!(q.scales(), &[scale]);
        assert_eq!(dequantize(&q), x);

        let mut rng = SplitMix64::new(3);
        let x = Tensor::random(&[4, 8], &mut rng, 2.0);
        let q = quantize_rows_i8(&x).unwrap();
        let d = dequantize(&q);
        for r in 0..4 {
            let s = q.scales()[r];
            for (a, b) in x.row(r).iter().zip(d.row(r)) {
                assert!((a - b).abs() <= s / 2.0);
            }
        }
    }

    #[test]
    fn from_parts_rejects_bad_scale() {
        assert!(QuantRowsI8::from_parts(1, 1, vec![1], vec![0.0]).is_err());
        assert!(QuantRowsI8::from_parts(1, 2, vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn hybrid_identity_recovers_dequantized() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::random(&[5, 5], &mut rng, 1.0);
        let q = quantize_rows_i8(&x).unwrap();
        let out = matmul_hybrid(&Tensor::identity(5), &q).unwrap();
        assert_eq!(out, transpose(&dequantize(&q)));
    }

    #[test]
    fn hybrid_gemv_matches_dequantize_then_matmul() {
        let mut rng = SplitMix64::new(11);
        let a = Tensor::random(&[1, 32], &mut rng, 1.0);
        let x = Tensor::random(&[20, 32], &mut rng, 1.0);
        let q = quantize_rows_i8(&x).unwrap();
        let oracle = matmul(&a, &dequantize(&q), true).unwrap();
        assert_eq!(matmul_hybrid(&a, &q).unwrap(), oracle);
    }

    #[test]
    fn hybrid_zero_input() {
        let mut rng = SplitMix64::new(12);
        let q = quantize_rows_i8(&Tensor::random(&[6, 4], &mut rng, 1.0)).unwrap();
        let out = matmul_hybrid(&Tensor::zeros(&[3, 4]), &q).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(matmul_hybrid(&Tensor::zeros(&[3, 5]), &q).is_err());
    }

    #[test]
    fn deferred_scale_close_to_hybrid() {
        let mut rng = SplitMix64::new(13);
        let a = Tensor::random(&[3, 16], &mut rng, 1.0);
        let q = quantize_rows_i8(&Tensor::random(&[9, 16], &mut rng, 1.0)).unwrap();
        let x = matmul_hybrid(&a, &q).unwrap();
        let y = matmul_hybrid_deferred_scale(&a, &q).unwrap();
        for (p, r) in x.data().iter().zip(y.data()) {
            assert!((p - r).abs() <= 1e-5 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn strided_view_rows() {
        // rows interleaved two-by-two: view every second row
        let mut rng = SplitMix64::new(5);
        let x = Tensor::random(&[6, 3], &mut rng, 1.0);
        let q = quantize_rows_i8(&x).unwrap();
        let v = QuantRowsView::strided(&q.values()[3..], &q.scales()[1..], 3, 3, 2);
        let d = dequantize(v);
        let full = dequantize(&q);
        for r in 0..3 {
            assert_eq!(d.row(r), full.row(2 * r + 1));
        }
        assert_eq!(v.prefix(2).unwrap().rows(), 2);
        assert!(v.prefix(4).is_err());
    }

    fn arb_matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-4.0f32..4.0, r * c)
            .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_equals_triple_loop((a, b) in (1usize..=16, 1usize..=16, 1usize..=16)
            .prop_flat_map(|(m, k, n)| (arb_matrix(m, k), arb_matrix(k, n)))) {
            let c = matmul(&a, &b, false).unwrap();
            let want = triple_loop(&a, &b);
            prop_assert_eq!(c.data(), want.as_slice());
            let ct = matmul(&a, &transpose(&b), true).unwrap();
            prop_assert_eq!(ct.data(), c.data());
        }

        #[test]
        fn softmax_rows_are_distributions(x in (1usize..6, 1usize..12)
            .prop_flat_map(|(r, c)| proptest::collection::vec(-20.0f32..20.0, r * c)
                .prop_map(move |d| Tensor::matrix(r, c, d).unwrap()))) {
            let s = softmax_rows(&x).unwrap();
            for i in 0..x.rows() {
                let row = s.row(i);
                let sum: f32 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
                let xr = x.row(i);
                for a in 0..row.len() {
                    for b in 0..row.len() {
                        if xr[a] < xr[b] {
                            prop_assert!(row[a] <= row[b]);
                        }
                    }
                }
            }
        }

        #[test]
        fn quantize_round_trip_bound(x in (1usize..5, 1usize..40)
            .prop_flat_map(|(r, c)| arb_matrix(r, c))) {
            let q = quantize_rows_i8(&x).unwrap();
            let d = dequantize(&q);
            for r in 0..x.rows() {
                let absmax = x.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs()));
                let s = q.scales()[r];
                if absmax > 0.0 {
                    prop_assert_eq!(s, absmax / 127.0);
                } else {
                    prop_assert_eq!(s, 1.0);
                }
                for (a, b) in x.row(r).iter().zip(d.row(r)) {
                    prop_assert!((a - b).abs() <= s / 2.0);
                }
            }
        }

        #[test]
        fn hybrid_equals_dequantize_matmul((a, w) in (1usize..6, 1usize..24, 1usize..10)
            .prop_flat_map(|(m, k, n)| (arb_matrix(m, k), arb_matrix(n, k)))) {
            let q = quantize_rows_i8(&w).unwrap();
            let deq = dequantize(&q);
            prop_assert_eq!(matmul_hybrid(&a, &q).unwrap(), matmul(&a, &deq, true).unwrap());
            // weighted-row form
            let weights = Tensor::random(&[2, q.rows()], &mut SplitMix64::new(1), 1.0);
            prop_assert_eq!(matmul_hybrid_rows(&weights, &q).unwrap(), matmul(&weights, &deq, false).unwrap());
        }
    }
}
