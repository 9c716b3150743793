//! Synthetic decoder weights.
//!
//! Weights come from [`SplitMix64`] seeded with the caller's seed and are
//! drawn in this order, each tensor row-major:
//!
//! 1. `embedding` `[vocab × d_model]`
//! 2. per layer: `attn_norm` `[d_model]`, `wq` `[d_model × n_head·head_size]`,
//!    `wk` and `wv` `[d_model × n_kv_head·head_size]`,
//!    `wo` `[n_head·head_size × d_model]`, `ffn_norm` `[d_model]`,
//!    `w_gate` and `w_up` `[d_model × ffn_dim]`, `w_down` `[ffn_dim × d_model]`
//! 3. `final_norm` `[d_model]`
//!
//! Matrix entries are `uniform() / sqrt(d_model)`; norm gains are
//! `1 + 0.1 · uniform()`. The LM head is tied to the embedding.

use alloc::vec::Vec;

use super::ModelConfig;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `[vocab × d_model]`; also the LM head.
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
}

/// Deterministic weights for `config`; see the module docs for the layout.
pub fn synth_weights(config: &ModelConfig, seed: u64) -> DecoderWeights {
    let mut rng = SplitMix64::new(seed);
    let d = config.d_model;
    let scale = 1.0 / libm::sqrtf(d as f32);
    let q_width = config.n_head * config.head_size;
    let kv_width = config.n_kv_head * config.head_size;
    let gains = |rng: &mut SplitMix64| {
        (0..d)
            .map(|_| 1.0 + 0.1 * rng.uniform())
            .collect::<Vec<f32>>()
    };

    let embedding = Tensor::random(&[config.vocab, d], &mut rng, scale);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            attn_norm: gains(&mut rng),
            wq: Tensor::random(&[d, q_width], &mut rng, scale),
            wk: Tensor::random(&[d, kv_width], &mut rng, scale),
            wv: Tensor::random(&[d, kv_width], &mut rng, scale),
            wo: Tensor::random(&[q_width, d], &mut rng, scale),
            ffn_norm: gains(&mut rng),
            w_gate: Tensor::random(&[d, config.ffn_dim], &mut rng, scale),
            w_up: Tensor::random(&[d, config.ffn_dim], &mut rng, scale),
            w_down: Tensor::random(&[config.ffn_dim, d], &mut rng, scale),
        })
        .collect();
    let final_norm = gains(&mut rng);
    DecoderWeights {
        embedding,
        layers,
        final_norm,
    }
}

impl DecoderWeights {
    /// FNV-1a over the little-endian bits of every value in generation order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |xs: &[f32]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        feed(self.embedding.data());
        for l in &self.layers {
            feed(&l.attn_norm);
            feed(l.wq.data());
            feed(l.wk.data());
            feed(l.wv.data());
            feed(l.wo.data());
            feed(&l.ffn_norm);
            feed(l.w_gate.data());
            feed(l.w_up.data());
            feed(l.w_down.data());
        }
        feed(&self.final_norm);
        h
    }

    pub fn all_finite(&self) -> bool {
        self.embedding.all_finite()
            && self.final_norm.iter().all(|x| x.is_finite())
            && self.layers.iter().all(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down]
                    .iter()
                    .all(|t| t.all_finite())
            })
    }
}
