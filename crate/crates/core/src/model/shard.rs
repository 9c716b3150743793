//! Decoder layer computation over a contiguous slice of heads, FFN columns
//! and vocabulary. The single-process [`Model`](super::Model) is the shard
//! that owns everything; tensor-parallel workers each own one slice.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::ops::{fused_matmul, rmsnorm_into, rmsnorm_rows, PostOp, RopeTable};
use super::weights::DecoderWeights;
use super::{CacheDtype, ModelConfig};
use crate::attention::{
    attention_decode_f32_into, attention_decode_into, multihead_attention_span, AttentionParams,
    Kernel,
};
use crate::distributed::topk::TokenId;
use crate::error::{Error, Result};
use crate::kvcache::{F32KvCache, Int8KvCache};
use crate::tensor::{matmul, matmul_slices, Tensor};

/// Which part of the model a shard owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardSpec {
    pub q_heads: Range<usize>,
    pub kv_heads: Range<usize>,
    pub ffn: Range<usize>,
    pub vocab: Range<usize>,
}

impl ShardSpec {
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            q_heads: 0..config.n_head,
            kv_heads: 0..config.n_kv_head,
            ffn: 0..config.ffn_dim,
            vocab: 0..config.vocab,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ShardLayer {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Rows of the output projection for this shard's heads.
    pub wo: Tensor,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    /// Rows of the down projection for this shard's FFN columns.
    pub w_down: Tensor,
}

/// Immutable weights of one shard, shareable between model instances.
#[derive(Debug, Clone)]
pub(crate) struct ShardWeights {
    pub config: ModelConfig,
    pub spec: ShardSpec,
    /// Full table: every shard embeds tokens locally.
    pub embedding: Tensor,
    pub final_norm: Vec<f32>,
    pub layers: Vec<ShardLayer>,
    pub rope: RopeTable,
}

impl ShardWeights {
    pub fn new(config: &ModelConfig, weights: &DecoderWeights, spec: ShardSpec) -> Result<Self> {
        config.validate()?;
        let hs = config.head_size;
        let q = spec.q_heads.start * hs..spec.q_heads.end * hs;
        let kv = spec.kv_heads.start * hs..spec.kv_heads.end * hs;
        if weights.layers.len() != config.layers
            || weights.embedding.shape() != [config.vocab, config.d_model]
        {
            return Err(crate::error::dim_err(
                "ShardWeights",
                weights.embedding.shape(),
                &[config.vocab, config.d_model],
            ));
        }
        let layers = weights
            .layers
            .iter()
            .map(|l| {
                Ok(ShardLayer {
                    attn_norm: l.attn_norm.clone(),
                    wq: l.wq.slice_cols(q.start, q.end)?,
                    wk: l.wk.slice_cols(kv.start, kv.end)?,
                    wv: l.wv.slice_cols(kv.start, kv.end)?,
                    wo: l.wo.slice_rows(q.start, q.end)?,
                    ffn_norm: l.ffn_norm.clone(),
                    w_gate: l.w_gate.slice_cols(spec.ffn.start, spec.ffn.end)?,
                    w_up: l.w_up.slice_cols(spec.ffn.start, spec.ffn.end)?,
                    w_down: l.w_down.slice_rows(spec.ffn.start, spec.ffn.end)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            spec,
            embedding: weights.embedding.clone(),
            final_norm: weights.final_norm.clone(),
            layers,
            rope: RopeTable::new(hs, config.max_seq),
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum KvCache {
    F32(F32KvCache),
    Int8(Int8KvCache),
}

impl KvCache {
    fn new(config: &ModelConfig, kv_heads: usize) -> Result<Self> {
        Ok(match config.cache_dtype {
            CacheDtype::F32 => KvCache::F32(F32KvCache::new(
                config.layers,
                kv_heads,
                config.head_size,
                config.max_seq,
            )?),
            CacheDtype::Int8 => KvCache::Int8(Int8KvCache::new(
                config.layers,
                1,
                kv_heads,
                config.head_size,
                config.max_seq,
            )?),
        })
    }

    fn len(&self) -> usize {
        match self {
            KvCache::F32(c) => c.len(),
            KvCache::Int8(c) => c.len(0),
        }
    }

    fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<usize> {
        match self {
            KvCache::F32(c) => c.append_token_slices(layer, k, v),
            KvCache::Int8(c) => c.append_token_slices(layer, 0, k, v),
        }
    }
}

/// A shard plus its mutable per-sequence state.
#[derive(Debug, Clone)]
pub(crate) struct DecoderShard {
    pub weights: Arc<ShardWeights>,
    pub kernel: Kernel,
    cache: KvCache,
    scores: Vec<f32>,
}

impl DecoderShard {
    pub fn new(weights: Arc<ShardWeights>, kernel: Kernel) -> Result<Self> {
        let cache = KvCache::new(&weights.config, weights.spec.kv_heads.len())?;
        let scores = vec![0.0; weights.config.max_seq];
        Ok(Self {
            weights,
            kernel,
            cache,
            scores,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn reset(&mut self) -> Result<()> {
        self.cache = KvCache::new(&self.weights.config, self.weights.spec.kv_heads.len())?;
        Ok(())
    }

    pub fn attention_params(&self) -> AttentionParams {
        let c = self.config();
        AttentionParams::new(c.n_head, c.n_kv_head, c.head_size)
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        let vocab = self.config().vocab;
        if token as usize >= vocab {
            return Err(Error::Range {
                what: "token id",
                index: token as usize,
                bound: vocab,
            });
        }
        Ok(())
    }

    pub fn check_token_all(&self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    /// `[tokens.len() × d_model]` embedding rows.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let d = self.config().d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            self.check_token(t)?;
            data.extend_from_slice(self.weights.embedding.row(t as usize));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    /// Attention for `x` (`L × d_model`) at positions `pos0..pos0 + L`.
    ///
    /// Appends the new keys/values to the cache. In prefill mode the chosen
    /// kernel attends causally over the fresh K/V; in decode mode (`L == 1`)
    /// the single query attends over the cache. Returns the concatenated
    /// outputs of this shard's query heads, `L × (local heads · head_size)`.
    pub fn attention(
        &mut self,
        layer: usize,
        x: &Tensor,
        pos0: usize,
        decode: bool,
    ) -> Result<Tensor> {
        let w = Arc::clone(&self.weights);
        let lw = &w.layers[layer];
        let hs = w.config.head_size;
        let h = rmsnorm_rows(x, &lw.attn_norm);
        let mut q = matmul(&h, &lw.wq, false)?;
        let mut k = matmul(&h, &lw.wk, false)?;
        let v = matmul(&h, &lw.wv, false)?;
        let rows = x.rows();
        for i in 0..rows {
            w.rope.apply(q.row_mut(i), pos0 + i);
            w.rope.apply(k.row_mut(i), pos0 + i);
        }
        for i in 0..rows {
            self.cache.append(layer, k.row(i), v.row(i))?;
        }
        let p = self.attention_params();
        if !decode {
            return multihead_attention_span(
                &q,
                &k,
                &v,
                &p,
                self.kernel,
                w.spec.q_heads.start,
                w.spec.kv_heads.start,
            );
        }
        if rows != 1 {
            return Err(crate::error::dim_err(
                "decode attention",
                x.shape(),
                &[1, w.config.d_model],
            ));
        }
        let t = pos0 + 1;
        let local_q = w.spec.q_heads.len();
        let group = p.group_size();
        let mut out = Tensor::zeros(&[1, local_q * hs]);
        for i in 0..local_q {
            let g = (w.spec.q_heads.start + i) / group - w.spec.kv_heads.start;
            let qh = &q.row(0)[i * hs..(i + 1) * hs];
            let oh = &mut out.row_mut(0)[i * hs..(i + 1) * hs];
            match &self.cache {
                KvCache::Int8(c) => {
                    let view = c.read_head(layer, 0, g, t)?;
                    attention_decode_into(
                        qh,
                        view.keys,
                        view.values,
                        p.scale,
                        t,
                        &mut self.scores,
                        oh,
                    )?;
                }
                KvCache::F32(c) => {
                    let (keys, values) = c.head(layer, g);
                    attention_decode_f32_into(qh, keys, values, p.scale, t, &mut self.scores, oh)?;
                }
            }
        }
        Ok(out)
    }

    /// `silu(norm(x) · w_gate) ⊙ (norm(x) · w_up)` over this shard's FFN columns.
    pub fn ffn_hidden(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let lw = &self.weights.layers[layer];
        let h = rmsnorm_rows(x, &lw.ffn_norm);
        let mut gate = fused_matmul(&h, &lw.w_gate, PostOp::BiasSilu(&[]))?;
        let up = matmul(&h, &lw.w_up, false)?;
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g *= u;
        }
        Ok(gate)
    }

    /// Logits of this shard's vocab range for one hidden row.
    pub fn logits(&self, x_row: &[f32]) -> Vec<f32> {
        let w = &self.weights;
        let d = w.config.d_model;
        let mut h = vec![0.0; d];
        rmsnorm_into(x_row, &w.final_norm, &mut h);
        let range = w.spec.vocab.clone();
        let table = &w.embedding.data()[range.start * d..range.end * d];
        let mut out = vec![0.0; range.len()];
        matmul_slices(&h, 1, d, table, range.len(), true, &mut out);
        out
    }
}
