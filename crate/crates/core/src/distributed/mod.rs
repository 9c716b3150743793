//! Tensor-parallel decoding across workers that each own a slice of the
//! attention heads, FFN columns and vocabulary.
//!
//! Each step the root (worker 0) broadcasts token ids, every worker embeds
//! them from its own copy of the table, and the row-parallel projections
//! (`wo`, `w_down`) are summed with an all-reduce. At the end each worker
//! computes logits for its vocabulary shard and only the local top-k lists
//! travel to the root, where the next token is sampled.
//!
//! Workers run one after another inside the calling thread. The result does
//! not depend on scheduling and byte counts are exact.

pub mod topk;
pub mod transport;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::attention::Kernel;
use crate::error::{Error, Result};
use crate::model::shard::{DecoderShard, ShardWeights};
use crate::model::{
    fused_matmul_into, synth_weights, ModelConfig, PostOp, Sampler, SamplerConfig, SamplingMode,
    ShardSpec,
};
use crate::tensor::Tensor;
use topk::{local_topk, merge_topk, TokenId, TopKEntry};
pub use transport::{check_replicated, Collective, MetricRow, Payload, StepMetrics, Transport};

const SLOT_ATTN: usize = 0;
const SLOT_FFN: usize = 1;
const ROOT: usize = 0;

/// Contiguous near-equal split of `0..n` into `parts` ranges.
fn split(n: usize, parts: usize) -> Vec<Range<usize>> {
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    (0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Assignment of model slices to workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub n_workers: usize,
    pub shards: Vec<ShardSpec>,
}

impl ShardPlan {
    /// Query heads are split evenly, so `n_head` must be divisible by the
    /// worker count. KV heads are split along with their query groups; when
    /// there are more workers than KV heads, workers sharing a group each
    /// hold a replica of that group's KV head.
    pub fn new(config: &ModelConfig, n_workers: usize) -> Result<Self> {
        config.validate()?;
        if n_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if !config.n_head.is_multiple_of(n_workers) {
            return Err(Error::Config(alloc::format!(
                "n_head ({}) must be divisible by the number of workers ({n_workers})",
                config.n_head
            )));
        }
        if config.ffn_dim < n_workers || config.vocab < n_workers {
            return Err(Error::Config(alloc::format!(
                "ffn_dim ({}) and vocab ({}) must be at least the number of workers ({n_workers})",
                config.ffn_dim,
                config.vocab
            )));
        }
        let per = config.n_head / n_workers;
        let group = config.n_head / config.n_kv_head;
        if !per.is_multiple_of(group) && !group.is_multiple_of(per) {
            return Err(Error::Config(alloc::format!(
                "{per} query heads per worker straddle GQA groups of size {group}"
            )));
        }
        let ffn = split(config.ffn_dim, n_workers);
        let vocab = split(config.vocab, n_workers);
        let shards = (0..n_workers)
            .map(|w| {
                let q = w * per..(w + 1) * per;
                let kv = q.start / group..q.end.div_ceil(group);
                ShardSpec {
                    q_heads: q,
                    kv_heads: kv,
                    ffn: ffn[w].clone(),
                    vocab: vocab[w].clone(),
                }
            })
            .collect();
        Ok(Self { n_workers, shards })
    }

    /// KV heads held by more than one worker.
    pub fn replicated_kv_heads(&self) -> bool {
        self.shards
            .windows(2)
            .any(|p| p[0].kv_heads.end > p[1].kv_heads.start)
    }
}

/// Which communication optimizations are on. The defaults enable all of
/// them; switching one off selects the corresponding baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommConfig {
    /// Broadcast token ids instead of embedding rows.
    pub token_broadcast: bool,
    /// Gather local top-k lists instead of all-reducing full logits.
    pub topk_reduction: bool,
    /// Write projection outputs straight into transport slots.
    pub zero_copy: bool,
    /// Entries each worker sends in top-k mode.
    pub k: usize,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            token_broadcast: true,
            topk_reduction: true,
            zero_copy: true,
            k: 8,
        }
    }
}

impl CommConfig {
    pub fn baseline() -> Self {
        Self {
            token_broadcast: false,
            topk_reduction: false,
            zero_copy: false,
            k: 8,
        }
    }
}

/// Result of one prefill or decode step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub token: TokenId,
    /// Merged top-k at the root, best first.
    pub candidates: Vec<TopKEntry>,
    /// Full logits, only available when `topk_reduction` is off.
    pub logits: Option<Vec<f32>>,
    pub metrics: StepMetrics,
}

#[derive(Debug)]
pub struct Cluster {
    config: ModelConfig,
    plan: ShardPlan,
    comm: CommConfig,
    workers: Vec<DecoderShard>,
    transport: Transport,
    sampler: Sampler,
}

impl Cluster {
    /// Every worker synthesizes the same weights from `seed` and keeps its
    /// slice.
    pub fn new(
        config: &ModelConfig,
        seed: u64,
        n_workers: usize,
        comm: CommConfig,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        let plan = ShardPlan::new(config, n_workers)?;
        sampler.validate(config.vocab)?;
        if comm.k == 0 {
            return Err(Error::Config("top-k reduction needs k >= 1".into()));
        }
        if comm.topk_reduction && sampler.mode == SamplingMode::TopK && comm.k < sampler.k {
            return Err(Error::Config(alloc::format!(
                "reduction k ({}) is smaller than the sampling k ({})",
                comm.k,
                sampler.k
            )));
        }
        let weights = synth_weights(config, seed);
        let workers = plan
            .shards
            .iter()
            .map(|spec| {
                let w = ShardWeights::new(config, &weights, spec.clone())?;
                DecoderShard::new(Arc::new(w), Kernel::Slim)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            plan,
            comm,
            workers,
            transport: Transport::new(n_workers)?,
            sampler: Sampler::new(sampler),
        })
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    pub fn comm(&self) -> &CommConfig {
        &self.comm
    }

    pub fn n_workers(&self) -> usize {
        self.plan.n_workers
    }

    pub fn cache_len(&self) -> usize {
        self.workers[ROOT].cache_len()
    }

    pub fn transport_mut(&mut self) -> &mut Transport {
        &mut self.transport
    }

    pub fn set_kernel(&mut self, kernel: Kernel) {
        self.workers.iter_mut().for_each(|w| w.kernel = kernel);
    }

    /// Resets every worker's cache and runs the prompt.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<StepOutcome> {
        if tokens.is_empty() {
            return Err(Error::Config("prefill needs at least one token".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Capacity {
                what: "prefill prompt",
                needed: tokens.len(),
                available: self.config.max_seq,
            });
        }
        for w in &mut self.workers {
            w.reset()?;
        }
        self.step(tokens, 0, false)
    }

    pub fn decode_step(&mut self, token: TokenId) -> Result<StepOutcome> {
        let pos = self.cache_len();
        if pos >= self.config.max_seq {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: pos + 1,
                available: self.config.max_seq,
            });
        }
        self.step(&[token], pos, true)
    }

    /// Prefill, then `n_out` sampled tokens; also returns the metrics of
    /// every step (prefill first).
    pub fn generate(
        &mut self,
        prompt: &[TokenId],
        n_out: usize,
    ) -> Result<(Vec<TokenId>, Vec<StepMetrics>)> {
        if prompt.len() + n_out > self.config.max_seq {
            return Err(Error::Capacity {
                what: "generation length",
                needed: prompt.len() + n_out,
                available: self.config.max_seq,
            });
        }
        let mut tokens = Vec::with_capacity(n_out);
        let mut metrics = Vec::with_capacity(n_out);
        if n_out == 0 {
            return Ok((tokens, metrics));
        }
        let mut out = self.prefill(prompt)?;
        loop {
            tokens.push(out.token);
            metrics.push(out.metrics);
            if tokens.len() == n_out {
                break;
            }
            out = self.decode_step(out.token)?;
        }
        Ok((tokens, metrics))
    }

    fn step(&mut self, tokens: &[TokenId], pos0: usize, decode: bool) -> Result<StepOutcome> {
        self.workers[ROOT].check_token_all(tokens)?;
        let n = self.n_workers();
        let d = self.config.d_model;

        let mut xs: Vec<Tensor> = if self.comm.token_broadcast {
            let held = self.transport.broadcast_tokens(ROOT, tokens)?;
            self.workers
                .iter()
                .zip(&held)
                .map(|(w, t)| w.embed(t))
                .collect::<Result<_>>()?
        } else {
            let rows = self.workers[ROOT].embed(tokens)?;
            self.transport
                .broadcast_floats(ROOT, Collective::EmbeddingBroadcast, rows.data())?
                .into_iter()
                .map(|data| Tensor::matrix(tokens.len(), d, data))
                .collect::<Result<_>>()?
        };

        for l in 0..self.config.layers {
            for (i, w) in self.workers.iter_mut().enumerate() {
                let attn = w.attention(l, &xs[i], pos0, decode)?;
                let wo = &w.weights.layers[l].wo;
                reduce_input(
                    &mut self.transport,
                    self.comm.zero_copy,
                    i,
                    SLOT_ATTN,
                    &attn,
                    wo,
                )?;
            }
            let sums = self.transport.allreduce_slot(SLOT_ATTN)?;
            add_into(&mut xs, &sums);

            for (i, w) in self.workers.iter().enumerate() {
                let hidden = w.ffn_hidden(l, &xs[i])?;
                let w_down = &w.weights.layers[l].w_down;
                reduce_input(
                    &mut self.transport,
                    self.comm.zero_copy,
                    i,
                    SLOT_FFN,
                    &hidden,
                    w_down,
                )?;
            }
            let sums = self.transport.allreduce_slot(SLOT_FFN)?;
            add_into(&mut xs, &sums);

            let views: Vec<&[f32]> = xs.iter().map(|x| x.data()).collect();
            check_replicated("hidden state", &views)?;
        }

        let last: Vec<Vec<f32>> = self
            .workers
            .iter()
            .zip(&xs)
            .map(|(w, x)| w.logits(x.row(x.rows() - 1)))
            .collect();
        let (token, candidates, logits) = if self.comm.topk_reduction {
            let lists = last
                .iter()
                .zip(&self.plan.shards)
                .map(|(l, s)| local_topk(l, self.comm.k, s.vocab.start))
                .collect();
            let gathered = self.transport.gather_topk(ROOT, lists)?;
            let merged = merge_topk(&gathered, self.comm.k)?;
            (self.sampler.sample_ranked(&merged)?, merged, None)
        } else {
            let full: Vec<Tensor> = last
                .iter()
                .zip(&self.plan.shards)
                .map(|(l, s)| {
                    let mut v = vec![0.0; self.config.vocab];
                    v[s.vocab.clone()].copy_from_slice(l);
                    Tensor::matrix(1, self.config.vocab, v)
                })
                .collect::<Result<_>>()?;
            let reduced = self
                .transport
                .allreduce_sum_as(Collective::LogitAllReduce, &full)?;
            let logits = reduced
                .into_iter()
                .next()
                .map(Tensor::into_data)
                .unwrap_or_default();
            let token = self.sampler.sample(&logits)?;
            (token, local_topk(&logits, self.comm.k, 0), Some(logits))
        };
        debug_assert_eq!(n, self.transport.n_workers());
        Ok(StepOutcome {
            token,
            candidates,
            logits,
            metrics: self.transport.end_step(),
        })
    }
}

/// `x · w` for worker `i`, delivered into transport `slot`.
fn reduce_input(
    t: &mut Transport,
    zero_copy: bool,
    i: usize,
    slot: usize,
    x: &Tensor,
    w: &Tensor,
) -> Result<()> {
    let len = x.rows() * w.cols();
    if zero_copy {
        let region = t.register_output_buffer(i, slot, len)?;
        fused_matmul_into(x, w, PostOp::None, region)
    } else {
        let mut tmp = vec![0.0; len];
        fused_matmul_into(x, w, PostOp::None, &mut tmp)?;
        t.stage(i, slot, &tmp)
    }
}

fn add_into(xs: &mut [Tensor], sums: &[Vec<f32>]) {
    for (x, s) in xs.iter_mut().zip(sums) {
        for (a, b) in x.data_mut().iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// One decode step of `cluster` for `token`.
pub fn distributed_decode_step(cluster: &mut Cluster, token: TokenId) -> Result<StepOutcome> {
    cluster.decode_step(token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate, synthetic_prompt, Model};

    #[test]
    fn plan_rejects_indivisible_heads() {
        let err = ShardPlan::new(&ModelConfig::toy(), 3).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("n_head") && msg.contains('3')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plan_partitions_everything() {
        let cfg = ModelConfig::toy();
        for n in [1, 2, 4] {
            let plan = ShardPlan::new(&cfg, n).unwrap();
            let mut v = 0;
            let mut f = 0;
            for s in &plan.shards {
                assert_eq!(s.vocab.start, v);
                assert_eq!(s.ffn.start, f);
                v = s.vocab.end;
                f = s.ffn.end;
                assert!(!s.kv_heads.is_empty());
            }
            assert_eq!((v, f), (cfg.vocab, cfg.ffn_dim));
        }
        assert!(ShardPlan::new(&cfg, 4).unwrap().replicated_kv_heads());
        assert!(!ShardPlan::new(&cfg, 2).unwrap().replicated_kv_heads());
    }

    #[test]
    fn single_worker_matches_model_bitwise() {
        let cfg = ModelConfig::toy();
        let prompt = synthetic_prompt(cfg.vocab, 6, 4);
        let mut model = Model::from_seed(&cfg, 4).unwrap();
        let comm = CommConfig {
            topk_reduction: false,
            ..CommConfig::default()
        };
        let mut cluster = Cluster::new(&cfg, 4, 1, comm, SamplerConfig::greedy()).unwrap();
        let a = model.prefill(&prompt).unwrap();
        let b = cluster.prefill(&prompt).unwrap();
        assert_eq!(a.data(), b.logits.unwrap().as_slice());
        let a = model.decode_step(17).unwrap();
        let b = cluster.decode_step(17).unwrap();
        assert_eq!(a.data(), b.logits.unwrap().as_slice());
    }

    #[test]
    fn workers_agree_with_single_process_greedy() {
        let cfg = ModelConfig::toy();
        let prompt = synthetic_prompt(cfg.vocab, 5, 9);
        let mut model = Model::from_seed(&cfg, 9).unwrap();
        let want = generate(&mut model, &prompt, 8, &SamplerConfig::greedy()).unwrap();
        for n in [2, 4] {
            let mut c =
                Cluster::new(&cfg, 9, n, CommConfig::default(), SamplerConfig::greedy()).unwrap();
            assert_eq!(c.generate(&prompt, 8).unwrap().0, want, "{n} workers");
        }
    }

    #[test]
    fn copy_counts_by_mode() {
        let cfg = ModelConfig::toy();
        for (zero_copy, want) in [(true, 0), (false, 2 * cfg.layers as u64 * 2)] {
            let comm = CommConfig {
                zero_copy,
                ..CommConfig::default()
            };
            let mut c = Cluster::new(&cfg, 1, 2, comm, SamplerConfig::greedy()).unwrap();
            c.prefill(&[1, 2, 3]).unwrap();
            let m = c.decode_step(4).unwrap().metrics;
            assert_eq!(m.copy_count(), want);
        }
    }

    #[test]
    fn topk_gather_bytes() {
        let cfg = ModelConfig::toy();
        let mut c =
            Cluster::new(&cfg, 1, 2, CommConfig::default(), SamplerConfig::greedy()).unwrap();
        c.prefill(&[5]).unwrap();
        let m = c.decode_step(6).unwrap().metrics;
        assert_eq!(m.bytes_of(1, Collective::TopKGather), 8 * 8 + 8);
        assert_eq!(m.bytes_of(0, Collective::TokenBroadcast), 4);
    }
}
