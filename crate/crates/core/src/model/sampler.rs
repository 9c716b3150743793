use alloc::vec::Vec;

use crate::distributed::topk::{local_topk, TokenId, TopKEntry};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Greedy,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub k: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            k: 1,
            seed: 0,
        }
    }

    pub fn top_k(k: usize, seed: u64) -> Self {
        Self {
            mode: SamplingMode::TopK,
            k,
            seed,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.mode == SamplingMode::TopK && (self.k == 0 || self.k > vocab) {
            return Err(Error::Config(alloc::format!(
                "top-k sampling needs 1 <= k <= vocab ({vocab}), got k = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Stateful sampler; the random stream advances once per top-k draw.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    rng: SplitMix64,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Self {
        Self {
            config,
            rng: SplitMix64::new(config.seed),
        }
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sample(&mut self, logits: &[f32]) -> Result<TokenId> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sample logits"));
        }
        self.config.validate(logits.len())?;
        match self.config.mode {
            SamplingMode::Greedy => Ok(argmax(logits)),
            SamplingMode::TopK => {
                let entries = local_topk(logits, self.config.k, 0);
                Ok(self.draw(&entries))
            }
        }
    }

    /// Samples from an already ranked candidate list (e.g. a merged
    /// distributed top-k). Greedy takes the first entry.
    pub fn sample_ranked(&mut self, ranked: &[TopKEntry]) -> Result<TokenId> {
        let first = ranked
            .first()
            .ok_or_else(|| Error::Config("empty candidate list".into()))?;
        match self.config.mode {
            SamplingMode::Greedy => Ok(first.token),
            SamplingMode::TopK => {
                let k = self.config.k.min(ranked.len());
                Ok(self.draw(&ranked[..k]))
            }
        }
    }

    /// Softmax over the ranked entries, then inverse-CDF with one uniform draw.
    fn draw(&mut self, ranked: &[TopKEntry]) -> TokenId {
        let max = ranked[0].logit;
        let weights: Vec<f32> = ranked.iter().map(|e| libm::expf(e.logit - max)).collect();
        let total: f32 = weights.iter().sum();
        let u = self.rng.next_f32() * total;
        let mut acc = 0.0;
        for (e, w) in ranked.iter().zip(&weights) {
            acc += w;
            if u < acc {
                return e.token;
            }
        }
        ranked[ranked.len() - 1].token
    }
}

/// One-shot sampling with a fresh stream seeded from `config.seed`.
pub fn sample(logits: &[f32], config: &SamplerConfig) -> Result<TokenId> {
    Sampler::new(*config).sample(logits)
}
