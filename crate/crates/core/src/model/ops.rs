//! Elementwise and normalization kernels used by the decoder block.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::{matmul_slices, Tensor};

pub const RMS_EPS: f32 = 1e-5;
pub const ROPE_THETA: f64 = 10_000.0;

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanhf(C * (x + 0.044_715 * x * x * x)))
}

/// Epilogue applied to each output element of [`fused_matmul`].
///
/// An empty bias slice means no bias.
#[derive(Debug, Clone, Copy)]
pub enum PostOp<'a> {
    None,
    BiasSilu(&'a [f32]),
    BiasGelu(&'a [f32]),
    ResidualAdd(&'a Tensor),
}

impl PostOp<'_> {
    fn check(&self, m: usize, n: usize) -> Result<()> {
        match self {
            PostOp::None => Ok(()),
            PostOp::BiasSilu(b) | PostOp::BiasGelu(b) => {
                if b.is_empty() || b.len() == n {
                    Ok(())
                } else {
                    Err(dim_err("fused_matmul bias", &[b.len()], &[n]))
                }
            }
            PostOp::ResidualAdd(r) => {
                if r.shape() == [m, n] {
                    Ok(())
                } else {
                    Err(dim_err("fused_matmul residual", r.shape(), &[m, n]))
                }
            }
        }
    }

    fn apply(&self, out: &mut [f32], n: usize) {
        debug_assert_eq!(out.len(), n);
        match self {
            PostOp::None => {}
            PostOp::BiasSilu(b) => {
                for (j, o) in out.iter_mut().enumerate() {
                    let bias = if b.is_empty() { 0.0 } else { b[j % n] };
                    *o = silu(*o + bias);
                }
            }
            PostOp::BiasGelu(b) => {
                for (j, o) in out.iter_mut().enumerate() {
                    let bias = if b.is_empty() { 0.0 } else { b[j % n] };
                    *o = gelu(*o + bias);
                }
            }
            PostOp::ResidualAdd(_) => unreachable!("residual is applied per row"),
        }
    }
}

/// `x · w` followed by `post`, one output row at a time.
pub fn fused_matmul(x: &Tensor, w: &Tensor, post: PostOp<'_>) -> Result<Tensor> {
    let (m, _) = x.dims2("fused_matmul")?;
    let (_, n) = w.dims2("fused_matmul")?;
    let mut out = vec![0.0; m * n];
    fused_matmul_into(x, w, post, &mut out)?;
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// [`fused_matmul`] writing into a caller-provided region of `m * n` values,
/// e.g. a registered communication buffer.
pub fn fused_matmul_into(x: &Tensor, w: &Tensor, post: PostOp<'_>, out: &mut [f32]) -> Result<()> {
    let (m, k) = x.dims2("fused_matmul")?;
    let (kw, n) = w.dims2("fused_matmul")?;
    if k != kw {
        return Err(dim_err("fused_matmul", x.shape(), w.shape()));
    }
    if out.len() != m * n {
        return Err(dim_err("fused_matmul output", &[out.len()], &[m, n]));
    }
    post.check(m, n)?;
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        matmul_slices(x.row(i), 1, k, w.data(), n, false, orow);
        match post {
            PostOp::ResidualAdd(r) => {
                for (o, &res) in orow.iter_mut().zip(r.row(i)) {
                    *o += res;
                }
            }
            p => p.apply(orow, n),
        }
    }
    Ok(())
}

pub fn rmsnorm_into(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / libm::sqrtf(ms + RMS_EPS);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

pub fn rmsnorm_rows(x: &Tensor, gain: &[f32]) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        rmsnorm_into(x.row(i), gain, out.row_mut(i));
    }
    out
}

/// Rotary embedding tables over interleaved pairs `(2i, 2i + 1)`.
#[derive(Debug, Clone)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(head_size: usize, max_seq: usize) -> Self {
        let half = head_size / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let freq = libm::pow(ROPE_THETA, -(2.0 * i as f64) / head_size as f64);
                let angle = pos as f64 * freq;
                cos.push(libm::cos(angle) as f32);
                sin.push(libm::sin(angle) as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every `head_size`-wide head in `row` for position `pos`.
    pub fn apply(&self, row: &mut [f32], pos: usize) {
        let hs = 2 * self.half;
        if hs == 0 {
            return;
        }
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(hs) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c[i] - b * s[i];
                head[2 * i + 1] = a * s[i] + b * c[i];
            }
        }
    }
}
