//! Llama-style toy decoder: RMSNorm → attention (RoPE, GQA) → residual,
//! RMSNorm → SwiGLU FFN → residual, tied LM head.

mod ops;
mod sampler;
pub(crate) mod shard;
mod weights;

use alloc::sync::Arc;
use alloc::vec::Vec;

pub use ops::{
    fused_matmul, fused_matmul_into, gelu, rmsnorm_into, silu, PostOp, RopeTable, RMS_EPS,
    ROPE_THETA,
};
pub use sampler::{argmax, sample, Sampler, SamplerConfig, SamplingMode};
pub use shard::ShardSpec;
pub use weights::{synth_weights, DecoderWeights, LayerWeights};

use crate::attention::Kernel;
use crate::distributed::topk::TokenId;
use crate::error::{Error, Result};
use crate::kvcache::KvCacheSpec;
use crate::tensor::Tensor;
use shard::{DecoderShard, ShardWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheDtype {
    F32,
    Int8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub head_size: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub cache_dtype: CacheDtype,
}

impl ModelConfig {
    /// 2 layers, d_model 64, 4 query heads sharing 2 KV heads of size 16,
    /// FFN 128, vocab 256, 256 positions, f32 cache.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            n_head: 4,
            n_kv_head: 2,
            head_size: 16,
            ffn_dim: 128,
            vocab: 256,
            max_seq: 256,
            cache_dtype: CacheDtype::F32,
        }
    }

    pub fn with_cache(mut self, dtype: CacheDtype) -> Self {
        self.cache_dtype = dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.d_model,
            self.n_head,
            self.n_kv_head,
            self.head_size,
            self.ffn_dim,
            self.vocab,
            self.max_seq,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d_model != self.n_head * self.head_size {
            return Err(Error::Config(alloc::format!(
                "d_model ({}) must equal n_head ({}) * head_size ({})",
                self.d_model,
                self.n_head,
                self.head_size
            )));
        }
        if !self.n_head.is_multiple_of(self.n_kv_head) {
            return Err(Error::Config(alloc::format!(
                "n_head ({}) must be a multiple of n_kv_head ({})",
                self.n_head,
                self.n_kv_head
            )));
        }
        if !self.head_size.is_multiple_of(2) {
            return Err(Error::Config(
                "head_size must be even for rotary embeddings".into(),
            ));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::Config("vocab must fit in a u32 token id".into()));
        }
        Ok(())
    }

    /// KV cache sizing inputs for `batch` sequences of `input_len + output_len`.
    pub fn kv_spec(&self, batch: u64, input_len: u64, output_len: u64) -> KvCacheSpec {
        KvCacheSpec {
            batch,
            input_len,
            output_len,
            layers: self.layers as u64,
            n_head: self.n_kv_head as u64,
            head_size: self.head_size as u64,
            dtype_bytes: match self.cache_dtype {
                CacheDtype::F32 => 4,
                CacheDtype::Int8 => 1,
            },
        }
    }
}

/// A decoder instance with its own KV cache. Weights are shared between
/// instances created with [`Model::fork`].
#[derive(Debug, Clone)]
pub struct Model {
    shard: DecoderShard,
}

impl Model {
    pub fn new(config: &ModelConfig, weights: &DecoderWeights) -> Result<Self> {
        let w = ShardWeights::new(config, weights, ShardSpec::full(config))?;
        Ok(Self {
            shard: DecoderShard::new(Arc::new(w), Kernel::Slim)?,
        })
    }

    pub fn from_seed(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::new(config, &synth_weights(config, seed))
    }

    /// A new instance over the same weights with an empty cache.
    pub fn fork(&self) -> Result<Self> {
        Ok(Self {
            shard: DecoderShard::new(Arc::clone(&self.shard.weights), self.shard.kernel)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.shard.config()
    }

    /// Attention kernel used for prefill (decode always uses the cache path).
    pub fn kernel(&self) -> Kernel {
        self.shard.kernel
    }

    pub fn set_kernel(&mut self, kernel: Kernel) {
        self.shard.kernel = kernel;
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.set_kernel(kernel);
        self
    }

    /// Tokens currently held in the KV cache.
    pub fn cache_len(&self) -> usize {
        self.shard.cache_len()
    }

    /// Clears the cache and runs the whole prompt; returns the logits of the
    /// last position as `[1 × vocab]`.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Tensor> {
        let max_seq = self.config().max_seq;
        if tokens.is_empty() {
            return Err(Error::Config("prefill needs at least one token".into()));
        }
        if tokens.len() > max_seq {
            return Err(Error::Capacity {
                what: "prefill prompt",
                needed: tokens.len(),
                available: max_seq,
            });
        }
        self.shard.reset()?;
        self.forward(tokens, 0, false)
    }

    /// Runs one token at the next cache position; returns `[1 × vocab]`
    /// logits.
    pub fn decode_step(&mut self, token: TokenId) -> Result<Tensor> {
        let pos = self.cache_len();
        if pos >= self.config().max_seq {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: pos + 1,
                available: self.config().max_seq,
            });
        }
        self.forward(&[token], pos, true)
    }

    fn forward(&mut self, tokens: &[TokenId], pos0: usize, decode: bool) -> Result<Tensor> {
        let mut x = self.shard.embed(tokens)?;
        let w = Arc::clone(&self.shard.weights);
        for (l, lw) in w.layers.iter().enumerate() {
            let attn = self.shard.attention(l, &x, pos0, decode)?;
            x = fused_matmul(&attn, &lw.wo, PostOp::ResidualAdd(&x))?;
            let hidden = self.shard.ffn_hidden(l, &x)?;
            x = fused_matmul(&hidden, &lw.w_down, PostOp::ResidualAdd(&x))?;
        }
        let logits = self.shard.logits(x.row(x.rows() - 1));
        let n = logits.len();
        let out = Tensor::matrix(1, n, logits)?;
        Ok(out)
    }
}

/// Observer callback argument for [`generate_with`].
#[derive(Debug)]
pub struct StepEvent<'a> {
    /// 0 for the token sampled from the prefill logits.
    pub step: usize,
    pub token: TokenId,
    pub logits: &'a Tensor,
}

/// Prefill `prompt`, then sample `n_out` tokens (the first from the prefill
/// logits, the rest from successive decode steps).
pub fn generate(
    model: &mut Model,
    prompt: &[TokenId],
    n_out: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<TokenId>> {
    generate_with(model, prompt, n_out, sampler, |_| {})
}

pub fn generate_with<F>(
    model: &mut Model,
    prompt: &[TokenId],
    n_out: usize,
    sampler: &SamplerConfig,
    mut on_step: F,
) -> Result<Vec<TokenId>>
where
    F: FnMut(&StepEvent<'_>),
{
    let max_seq = model.config().max_seq;
    sampler.validate(model.config().vocab)?;
    if prompt.len() + n_out > max_seq {
        return Err(Error::Capacity {
            what: "generation length",
            needed: prompt.len() + n_out,
            available: max_seq,
        });
    }
    if n_out == 0 {
        return Ok(Vec::new());
    }
    let mut sampler = Sampler::new(*sampler);
    let mut out = Vec::with_capacity(n_out);
    let mut logits = model.prefill(prompt)?;
    for step in 0..n_out {
        if step > 0 {
            logits = model.decode_step(out[step - 1])?;
        }
        let token = sampler.sample(logits.data())?;
        on_step(&StepEvent {
            step,
            token,
            logits: &logits,
        });
        out.push(token);
    }
    Ok(out)
}

/// Deterministic prompt of `len` tokens for experiments.
pub fn synthetic_prompt(vocab: usize, len: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = crate::rng::SplitMix64::new(seed ^ 0x005e_ed0f_70c3);
    (0..len).map(|_| rng.below(vocab) as TokenId).collect()
}
