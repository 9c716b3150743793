//! Scaled dot-product attention kernels.
//!
//! * [`attention_naive`] materializes the full `Lq × Lk` score matrix; it is
//!   the reference the other kernels are checked against.
//! * [`attention_slim`] walks the queries in blocks of `slim_block_rows`.
//!   Each block computes complete score rows into a caller-owned
//!   [`ScoreBuffer`], applies an exact row softmax and multiplies by `v`,
//!   then the same buffer is reused for the next block. No rescaling is
//!   ever needed because every softmax sees its whole row.
//! * [`attention_flash`] tiles both queries and keys and keeps a running
//!   row max and row sum, rescaling the partial output after every key tile.
//!
//! With `causal` set, query row `i` may attend to key positions
//! `0..=Lk - Lq + i`; masked scores are set to `f32::MIN` before softmax.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    dot, matmul, matmul_hybrid_rows_slices, matmul_hybrid_slices, softmax_in_place, softmax_rows,
    QuantRowsView, Tensor,
};

const MASKED: f32 = f32::MIN;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub n_head: usize,
    /// Number of key/value heads; each serves `n_head / n_kv_head` query heads.
    pub n_kv_head: usize,
    pub head_size: usize,
    pub causal: bool,
    pub scale: f32,
    pub slim_block_rows: usize,
    pub flash_tile_q: usize,
    pub flash_tile_k: usize,
}

impl AttentionParams {
    /// Causal attention with scale `1/sqrt(head_size)` and 32-row blocks/tiles.
    pub fn new(n_head: usize, n_kv_head: usize, head_size: usize) -> Self {
        Self {
            n_head,
            n_kv_head,
            head_size,
            causal: true,
            scale: 1.0 / libm::sqrtf(head_size as f32),
            slim_block_rows: 32,
            flash_tile_q: 32,
            flash_tile_k: 32,
        }
    }

    pub fn single_head(head_size: usize) -> Self {
        Self::new(1, 1, head_size)
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn slim_block_rows(mut self, rows: usize) -> Self {
        self.slim_block_rows = rows;
        self
    }

    pub fn flash_tiles(mut self, tile_q: usize, tile_k: usize) -> Self {
        self.flash_tile_q = tile_q;
        self.flash_tile_k = tile_k;
        self
    }

    pub fn group_size(&self) -> usize {
        self.n_head / self.n_kv_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.n_kv_head == 0 || self.head_size == 0 {
            return Err(Error::Config(
                "head counts and head_size must be >= 1".into(),
            ));
        }
        if !self.n_head.is_multiple_of(self.n_kv_head) {
            return Err(Error::Config(alloc::format!(
                "n_head ({}) must be a multiple of n_kv_head ({})",
                self.n_head,
                self.n_kv_head
            )));
        }
        if self.slim_block_rows == 0 || self.flash_tile_q == 0 || self.flash_tile_k == 0 {
            return Err(Error::Config("block and tile sizes must be >= 1".into()));
        }
        if !(self.scale.is_finite()) {
            return Err(Error::NonFinite("AttentionParams::scale"));
        }
        Ok(())
    }

    /// f32 values of slim scratch for `lk` keys.
    pub fn slim_scratch_floats(&self, lk: usize) -> usize {
        self.slim_block_rows * lk
    }

    /// f32 values of flash scratch: one score tile plus running max and sum
    /// per tile row.
    pub fn flash_scratch_floats(&self) -> usize {
        self.flash_tile_q * self.flash_tile_k + 2 * self.flash_tile_q
    }
}

/// Score scratch for [`attention_slim`], reused across query blocks.
#[derive(Debug, Clone)]
pub struct ScoreBuffer {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ScoreBuffer {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn for_params(p: &AttentionParams, lk: usize) -> Self {
        Self::new(p.slim_block_rows, lk)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_ptr(&self) -> *const f32 {
        self.data.as_ptr()
    }
}

/// Which kernel [`multihead_attention`] dispatches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    Naive,
    Slim,
    Flash,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Naive, Kernel::Slim, Kernel::Flash];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Naive => "naive",
            Kernel::Slim => "slim",
            Kernel::Flash => "flash",
        }
    }
}

impl core::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Kernel::Naive),
            "slim" => Ok(Kernel::Slim),
            "flash" => Ok(Kernel::Flash),
            other => Err(Error::Config(alloc::format!("unknown kernel {other:?}"))),
        }
    }
}

/// Checks single-head operand shapes and returns `(lq, lk, d)`.
fn check_single_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
) -> Result<(usize, usize, usize)> {
    p.validate()?;
    let (lq, d) = q.dims2("attention")?;
    let (lk, dk) = k.dims2("attention")?;
    let (lv, dv) = v.dims2("attention")?;
    if d != p.head_size || dk != d {
        return Err(dim_err("attention q/k", q.shape(), k.shape()));
    }
    if lv != lk || dv != d {
        return Err(dim_err("attention k/v", k.shape(), v.shape()));
    }
    if lk == 0 || lq == 0 {
        return Err(dim_err("attention: empty operand", q.shape(), k.shape()));
    }
    if p.causal && lq > lk {
        return Err(dim_err(
            "attention: causal needs lq <= lk",
            q.shape(),
            k.shape(),
        ));
    }
    Ok((lq, lk, d))
}

/// Last key position query row `i` may see.
#[inline]
fn key_limit(p: &AttentionParams, lq: usize, lk: usize, i: usize) -> usize {
    if p.causal {
        lk - lq + i
    } else {
        lk - 1
    }
}

pub fn attention_naive(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (lq, lk, _) = check_single_head(q, k, v, p)?;
    let mut scores = matmul(q, k, true)?;
    for i in 0..lq {
        let limit = key_limit(p, lq, lk, i);
        for (j, s) in scores.row_mut(i).iter_mut().enumerate() {
            *s = if j <= limit { *s * p.scale } else { MASKED };
        }
    }
    let probs = softmax_rows(&scores)?;
    matmul(&probs, v, false)
}

pub fn attention_slim(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    buf: &mut ScoreBuffer,
) -> Result<Tensor> {
    let (lq, lk, d) = check_single_head(q, k, v, p)?;
    let mut out = Tensor::zeros(&[lq, d]);
    slim_into(
        q.data(),
        k.data(),
        v.data(),
        lq,
        lk,
        d,
        p,
        buf,
        out.data_mut(),
    )?;
    Ok(out)
}

/// Slim kernel over raw slices; `out` (`lq × d`) is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn slim_into(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    lq: usize,
    lk: usize,
    d: usize,
    p: &AttentionParams,
    buf: &mut ScoreBuffer,
    out: &mut [f32],
) -> Result<()> {
    if buf.rows != p.slim_block_rows || buf.cols < lk {
        return Err(Error::Capacity {
            what: "attention_slim score buffer",
            needed: p.slim_block_rows * lk,
            available: buf.rows * buf.cols,
        });
    }
    let stride = buf.cols;
    out.fill(0.0);
    let mut start = 0;
    while start < lq {
        let rows = p.slim_block_rows.min(lq - start);
        // horizontal score rows for the whole block, softmaxed over full width
        for r in 0..rows {
            let i = start + r;
            let limit = key_limit(p, lq, lk, i);
            let srow = &mut buf.data[r * stride..r * stride + lk];
            let qi = &q[i * d..(i + 1) * d];
            for (j, s) in srow.iter_mut().enumerate() {
                *s = if j <= limit {
                    dot(qi, &k[j * d..(j + 1) * d]) * p.scale
                } else {
                    MASKED
                };
            }
            softmax_in_place(srow);
        }
        // this block's slice of the output
        for r in 0..rows {
            let i = start + r;
            let srow = &buf.data[r * stride..r * stride + lk];
            let orow = &mut out[i * d..(i + 1) * d];
            for (j, &w) in srow.iter().enumerate() {
                for (o, &x) in orow.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *o += w * x;
                }
            }
        }
        start += rows;
    }
    Ok(())
}

pub fn attention_flash(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (lq, lk, d) = check_single_head(q, k, v, p)?;
    let mut out = Tensor::zeros(&[lq, d]);
    let mut scratch = FlashScratch::new(p);
    flash_into(
        q.data(),
        k.data(),
        v.data(),
        lq,
        lk,
        d,
        p,
        &mut scratch,
        out.data_mut(),
    );
    Ok(out)
}

pub(crate) struct FlashScratch {
    scores: Vec<f32>,
    row_max: Vec<f32>,
    row_sum: Vec<f32>,
}

impl FlashScratch {
    pub(crate) fn new(p: &AttentionParams) -> Self {
        Self {
            scores: vec![0.0; p.flash_tile_q * p.flash_tile_k],
            row_max: vec![0.0; p.flash_tile_q],
            row_sum: vec![0.0; p.flash_tile_q],
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn flash_into(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    lq: usize,
    lk: usize,
    d: usize,
    p: &AttentionParams,
    scratch: &mut FlashScratch,
    out: &mut [f32],
) {
    let (tq, tk) = (p.flash_tile_q, p.flash_tile_k);
    out.fill(0.0);
    let mut q0 = 0;
    while q0 < lq {
        let q_rows = tq.min(lq - q0);
        scratch.row_max[..q_rows].fill(f32::NEG_INFINITY);
        scratch.row_sum[..q_rows].fill(0.0);
        let mut k0 = 0;
        while k0 < lk {
            let k_cols = tk.min(lk - k0);
            for r in 0..q_rows {
                let i = q0 + r;
                let limit = key_limit(p, lq, lk, i);
                if k0 > limit {
                    continue;
                }
                let valid = k_cols.min(limit + 1 - k0);
                let qi = &q[i * d..(i + 1) * d];
                let s = &mut scratch.scores[r * tk..r * tk + valid];
                let mut tile_max = f32::NEG_INFINITY;
                for (c, sc) in s.iter_mut().enumerate() {
                    let j = k0 + c;
                    *sc = dot(qi, &k[j * d..(j + 1) * d]) * p.scale;
                    tile_max = tile_max.max(*sc);
                }
                let m_old = scratch.row_max[r];
                let m_new = m_old.max(tile_max);
                // exp(-inf) == 0 on the first tile
                let correction = libm::expf(m_old - m_new);
                let mut tile_sum = 0.0f32;
                for sc in s.iter_mut() {
                    *sc = libm::expf(*sc - m_new);
                    tile_sum += *sc;
                }
                scratch.row_sum[r] = scratch.row_sum[r] * correction + tile_sum;
                scratch.row_max[r] = m_new;
                let orow = &mut out[i * d..(i + 1) * d];
                for o in orow.iter_mut() {
                    *o *= correction;
                }
                for (c, &w) in s.iter().enumerate() {
                    let j = k0 + c;
                    for (o, &x) in orow.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                        *o += w * x;
                    }
                }
            }
            k0 += k_cols;
        }
        for r in 0..q_rows {
            let l = scratch.row_sum[r];
            for o in &mut out[(q0 + r) * d..(q0 + r + 1) * d] {
                *o /= l;
            }
        }
        q0 += q_rows;
    }
}

/// Single-query attention over the first `t` rows of an INT8 cache.
pub fn attention_decode(
    q_one: &Tensor,
    cache_k: QuantRowsView<'_>,
    cache_v: QuantRowsView<'_>,
    p: &AttentionParams,
    t: usize,
) -> Result<Tensor> {
    let (m, d) = q_one.dims2("attention_decode")?;
    if m != 1 || d != p.head_size || cache_k.cols() != d || cache_v.cols() != d {
        return Err(dim_err(
            "attention_decode",
            q_one.shape(),
            &[cache_k.rows(), cache_k.cols()],
        ));
    }
    let mut scores = vec![0.0; t];
    let mut out = Tensor::zeros(&[1, d]);
    attention_decode_into(
        q_one.data(),
        cache_k,
        cache_v,
        p.scale,
        t,
        &mut scores,
        out.data_mut(),
    )?;
    Ok(out)
}

/// Slice form of [`attention_decode`]: `scores` needs at least `t` slots.
pub fn attention_decode_into(
    q: &[f32],
    cache_k: QuantRowsView<'_>,
    cache_v: QuantRowsView<'_>,
    scale: f32,
    t: usize,
    scores: &mut [f32],
    out: &mut [f32],
) -> Result<()> {
    let available = cache_k.rows().min(cache_v.rows());
    if t == 0 || t > available {
        return Err(Error::Range {
            what: "attention_decode length",
            index: t,
            bound: available,
        });
    }
    let scores = &mut scores[..t];
    matmul_hybrid_slices(q, 1, q.len(), cache_k.prefix(t)?, scores);
    for s in scores.iter_mut() {
        *s *= scale;
    }
    softmax_in_place(scores);
    matmul_hybrid_rows_slices(scores, 1, cache_v.prefix(t)?, out);
    Ok(())
}

/// Single-query attention over `t` contiguous f32 key/value rows.
pub fn attention_decode_f32_into(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    scale: f32,
    t: usize,
    scores: &mut [f32],
    out: &mut [f32],
) -> Result<()> {
    let d = q.len();
    if t == 0 || keys.len() < t * d || values.len() < t * d {
        return Err(Error::Range {
            what: "attention_decode_f32 length",
            index: t,
            bound: keys.len().min(values.len()) / d.max(1),
        });
    }
    let scores = &mut scores[..t];
    for (j, s) in scores.iter_mut().enumerate() {
        *s = dot(q, &keys[j * d..(j + 1) * d]) * scale;
    }
    softmax_in_place(scores);
    out.fill(0.0);
    for (j, &w) in scores.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += w * x;
        }
    }
    Ok(())
}

fn head_columns(x: &Tensor, head: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.rows() * d);
    for r in 0..x.rows() {
        out.extend_from_slice(&x.row(r)[head * d..(head + 1) * d]);
    }
    out
}

/// Attention over packed heads: `q` is `L × (n_head·d)`, `k`/`v` are
/// `Lk × (n_kv_head·d)`. Query head `h` reads kv head `h / (n_head/n_kv_head)`.
pub fn multihead_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    kernel: Kernel,
) -> Result<Tensor> {
    p.validate()?;
    let d = p.head_size;
    if q.cols() != p.n_head * d || k.cols() != p.n_kv_head * d || v.cols() != p.n_kv_head * d {
        return Err(dim_err("multihead_attention", q.shape(), k.shape()));
    }
    multihead_attention_span(q, k, v, p, kernel, 0, 0)
}

/// Like [`multihead_attention`] but over a contiguous subset of heads:
/// local query head `i` is global head `q_head_offset + i`, and local kv
/// column block `g` is global kv head `kv_head_offset + g`.
pub fn multihead_attention_span(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    kernel: Kernel,
    q_head_offset: usize,
    kv_head_offset: usize,
) -> Result<Tensor> {
    p.validate()?;
    let d = p.head_size;
    let (lq, qw) = q.dims2("multihead_attention")?;
    let (lk, kw) = k.dims2("multihead_attention")?;
    if qw % d != 0 || kw % d != 0 || v.shape() != k.shape() {
        return Err(dim_err("multihead_attention", q.shape(), k.shape()));
    }
    let local_q = qw / d;
    let local_kv = kw / d;
    let group = p.group_size();
    let mut out = Tensor::zeros(&[lq, qw]);
    let mut buf = match kernel {
        Kernel::Slim => Some(ScoreBuffer::for_params(p, lk)),
        _ => None,
    };
    let mut head_out = vec![0.0f32; lq * d];
    for i in 0..local_q {
        let h = q_head_offset + i;
        let g = (h / group)
            .checked_sub(kv_head_offset)
            .filter(|g| *g < local_kv)
            .ok_or(Error::Range {
                what: "multihead_attention kv head",
                index: h / group,
                bound: kv_head_offset + local_kv,
            })?;
        let qh = Tensor::from_parts(vec![lq, d], head_columns(q, i, d));
        let kh = Tensor::from_parts(vec![lk, d], head_columns(k, g, d));
        let vh = Tensor::from_parts(vec![lk, d], head_columns(v, g, d));
        check_single_head(&qh, &kh, &vh, p)?;
        match kernel {
            Kernel::Naive => {
                head_out.copy_from_slice(attention_naive(&qh, &kh, &vh, p)?.data());
            }
            Kernel::Slim => slim_into(
                qh.data(),
                kh.data(),
                vh.data(),
                lq,
                lk,
                d,
                p,
                buf.as_mut().expect("slim buffer"),
                &mut head_out,
            )?,
            Kernel::Flash => {
                let mut scratch = FlashScratch::new(p);
                flash_into(
                    qh.data(),
                    kh.data(),
                    vh.data(),
                    lq,
                    lk,
                    d,
                    p,
                    &mut scratch,
                    &mut head_out,
                );
            }
        }
        for r in 0..lq {
            out.row_mut(r)[i * d..(i + 1) * d].copy_from_slice(&head_out[r * d..(r + 1) * d]);
        }
    }
    Ok(out)
}

/// Runs `kernel` on a single head.
pub fn attention_with(
    kernel: Kernel,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
) -> Result<Tensor> {
    match kernel {
        Kernel::Naive => attention_naive(q, k, v, p),
        Kernel::Slim => {
            let mut buf = ScoreBuffer::for_params(p, k.rows());
            attention_slim(q, k, v, p, &mut buf)
        }
        Kernel::Flash => attention_flash(q, k, v, p),
    }
}
