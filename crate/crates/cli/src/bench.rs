//! The four benchmark experiments. Each one checks correctness before it
//! times anything and refuses to produce a report if the check fails.

use std::time::Instant;

use rayon::prelude::*;
use slimfer_core::attention::{multihead_attention, AttentionParams, Kernel};
use slimfer_core::distributed::{Cluster, Collective, CommConfig, ShardPlan, StepMetrics};
use slimfer_core::kvcache::{cache_bytes, cache_bytes_with_scales, KvCacheSpec};
use slimfer_core::model::{argmax, synthetic_prompt, Model, ModelConfig, SamplerConfig};
use slimfer_core::rng::SplitMix64;
use slimfer_core::Tensor;

use crate::error::BenchError;
use crate::report::{params, BenchReport};
use crate::timing::{measure, Timing};

/// Allowed max-abs difference against the naive kernel.
pub fn kernel_tolerance(kernel: Kernel) -> f32 {
    match kernel {
        Kernel::Naive => 0.0,
        Kernel::Slim => 1e-5,
        Kernel::Flash => 1e-4,
    }
}

#[derive(Debug, Clone)]
pub struct AttentionBench {
    pub lengths: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub head_size: usize,
    pub timing: Timing,
    pub seed: u64,
}

impl AttentionBench {
    pub fn for_model(config: &ModelConfig, lengths: Vec<usize>, timing: Timing, seed: u64) -> Self {
        Self {
            lengths,
            kernels: vec![Kernel::Flash, Kernel::Slim, Kernel::Naive],
            n_head: config.n_head,
            n_kv_head: config.n_kv_head,
            head_size: config.head_size,
            timing,
            seed,
        }
    }
}

/// Causal prefill-shaped attention (`Lq == Lk == input`) per input length.
pub fn bench_attention(b: &AttentionBench) -> Result<BenchReport, BenchError> {
    if b.lengths.is_empty() {
        return Err(BenchError::Config(
            "at least one input length is required".into(),
        ));
    }
    if b.lengths.contains(&0) {
        return Err(BenchError::Config("input lengths must be >= 1".into()));
    }
    let timing = Timing::new(b.timing.warmup, b.timing.reps)?;
    let p = AttentionParams::new(b.n_head, b.n_kv_head, b.head_size);
    p.validate()?;
    let mut report = BenchReport::new();
    for &len in &b.lengths {
        let mut rng = SplitMix64::new(b.seed ^ (len as u64).wrapping_mul(0x9E37_79B9));
        let q = Tensor::random(&[len, b.n_head * b.head_size], &mut rng, 1.0);
        let k = Tensor::random(&[len, b.n_kv_head * b.head_size], &mut rng, 1.0);
        let v = Tensor::random(&[len, b.n_kv_head * b.head_size], &mut rng, 1.0);
        let reference = multihead_attention(&q, &k, &v, &p, Kernel::Naive)?;
        let ps = params(&[("input", &len)]);

        for &kernel in b.kernels.iter().filter(|&&k| k != Kernel::Naive) {
            let out = multihead_attention(&q, &k, &v, &p, kernel)?;
            let err = out.max_abs_diff(&reference);
            let tol = kernel_tolerance(kernel);
            if err.is_nan() || err > tol {
                return Err(BenchError::gate(
                    format!("attention.{}", kernel.name()),
                    format!("input={len}: max-abs error {err:e} exceeds {tol:e}"),
                ));
            }
            report.push(
                "attention",
                &ps,
                &format!("max_abs_err_{}", kernel.name()),
                err as f64,
                "abs",
            );
        }
        report.push("attention", &ps, "correctness", 1.0, "pass");
        report.push(
            "attention",
            &ps,
            "scratch_floats_slim",
            p.slim_scratch_floats(len) as f64,
            "f32",
        );
        report.push(
            "attention",
            &ps,
            "scratch_floats_flash",
            p.flash_scratch_floats() as f64,
            "f32",
        );

        let mut means = Vec::new();
        for &kernel in &b.kernels {
            let stats = measure(timing, || {
                multihead_attention(&q, &k, &v, &p, kernel).expect("validated above");
            });
            let (it, wu) = (timing.reps, timing.warmup);
            report.push_timed(
                "attention",
                &ps,
                &format!("{}_ms", kernel.name()),
                stats.mean_ms(),
                "ms",
                it,
                wu,
            );
            report.push_timed(
                "attention",
                &ps,
                &format!("{}_median_ms", kernel.name()),
                stats.median_ms(),
                "ms",
                it,
                wu,
            );
            means.push((kernel, stats.mean_ms()));
        }
        let mean_of = |k: Kernel| means.iter().find(|m| m.0 == k).map(|m| m.1);
        if let (Some(f), Some(s)) = (mean_of(Kernel::Flash), mean_of(Kernel::Slim)) {
            report.push_timed(
                "attention",
                &ps,
                "flash_over_slim",
                f / s,
                "x",
                timing.reps,
                timing.warmup,
            );
        }
    }
    report.footer(format!(
        "heads={} kv_heads={} head_size={} causal=1",
        b.n_head, b.n_kv_head, b.head_size
    ));
    report.footer(
        "reference values (other hardware, not compared): input=1024 flash=61.57 ms slim=16.02 ms",
    );
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ThroughputBench {
    pub config: ModelConfig,
    pub batches: Vec<usize>,
    pub in_len: usize,
    pub out_len: usize,
    pub timing: Timing,
    pub seed: u64,
    /// Upper bound on KV cache bytes for the largest batch.
    pub memory_limit: u64,
}

impl ThroughputBench {
    pub const DEFAULT_MEMORY_LIMIT: u64 = 2 << 30;
}

/// Decode-only throughput: the prompt is prefilled untimed and the first
/// token is taken from the prefill logits, then `out_len` decode steps per
/// sequence are timed.
pub fn bench_throughput(b: &ThroughputBench) -> Result<BenchReport, BenchError> {
    if b.out_len == 0 {
        return Err(BenchError::Config("out_len must be at least 1".into()));
    }
    if b.in_len == 0 {
        return Err(BenchError::Config("in_len must be at least 1".into()));
    }
    if b.batches.is_empty() || b.batches.contains(&0) {
        return Err(BenchError::Config(
            "batch sizes must be non-empty and >= 1".into(),
        ));
    }
    let timing = Timing::new(b.timing.warmup, b.timing.reps)?;
    let cfg = &b.config;
    if b.in_len + b.out_len > cfg.max_seq {
        return Err(slimfer_core::Error::Capacity {
            what: "sequence length",
            needed: b.in_len + b.out_len,
            available: cfg.max_seq,
        }
        .into());
    }
    for &batch in &b.batches {
        let need = cache_bytes(&cfg.kv_spec(batch as u64, b.in_len as u64, b.out_len as u64))?;
        if need > b.memory_limit {
            return Err(slimfer_core::Error::Capacity {
                what: "kv cache memory guard (bytes)",
                needed: need as usize,
                available: b.memory_limit as usize,
            }
            .into());
        }
    }

    let base = Model::from_seed(cfg, b.seed)?;
    let cache = match cfg.cache_dtype {
        slimfer_core::model::CacheDtype::F32 => "f32",
        slimfer_core::model::CacheDtype::Int8 => "int8",
    };
    let mut report = BenchReport::new();
    for &batch in &b.batches {
        let mut seconds = Vec::new();
        for rep in 0..timing.warmup + timing.reps {
            let mut seqs: Vec<(Model, u32)> = (0..batch)
                .map(|i| {
                    let mut m = base.fork()?;
                    let prompt =
                        synthetic_prompt(cfg.vocab, b.in_len, b.seed.wrapping_add(i as u64));
                    let first = argmax(m.prefill(&prompt)?.data());
                    Ok((m, first))
                })
                .collect::<Result<_, slimfer_core::Error>>()?;
            let start = Instant::now();
            seqs.par_iter_mut().try_for_each(|(m, tok)| {
                for _ in 0..b.out_len {
                    *tok = argmax(m.decode_step(*tok)?.data());
                }
                Ok::<_, slimfer_core::Error>(())
            })?;
            let elapsed = start.elapsed().as_secs_f64();
            if rep >= timing.warmup {
                seconds.push(elapsed);
            }
        }
        let tokens = (batch * b.out_len) as f64;
        let rates: Vec<f64> = seconds.iter().map(|s| tokens / s).collect();
        let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
        let mean_ms = seconds.iter().sum::<f64>() * 1e3 / seconds.len() as f64;
        let ps = params(&[
            ("batch", &batch),
            ("in", &b.in_len),
            ("out", &b.out_len),
            ("cache", &cache),
        ]);
        let (it, wu) = (timing.reps, timing.warmup);
        report.push("throughput", &ps, "generated_tokens", tokens, "tokens");
        report.push_timed("throughput", &ps, "decode_ms", mean_ms, "ms", it, wu);
        report.push_timed(
            "throughput",
            &ps,
            "throughput_tokens_per_s",
            mean_rate,
            "tokens/s",
            it,
            wu,
        );
    }
    report.footer("first token excluded: prefill is not timed");
    report.footer("reference values (Llama2-7B, other hardware, not compared): batch=256 796.9 tokens/s; batch=512 853.6 tokens/s");
    report.footer("the reference values are sometimes labelled LATENCY but are tokens/s");
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DistributedBench {
    pub config: ModelConfig,
    pub workers: Vec<usize>,
    pub steps: usize,
    pub k: usize,
    pub prompt_len: usize,
    pub timing: Timing,
    pub seed: u64,
}

/// Fraction of per-worker logit bytes saved by sending a top-k list
/// instead of the full vocabulary.
pub fn topk_savings(vocab: u64, k: u64) -> f64 {
    let full = 4 * vocab;
    let topk = 8 * k + 8;
    1.0 - topk as f64 / full as f64
}

fn last_decode(metrics: &[StepMetrics]) -> &StepMetrics {
    metrics.last().expect("at least one step")
}

fn per_link(bytes: u64, n: usize) -> f64 {
    if n > 1 {
        bytes as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

pub fn bench_distributed(b: &DistributedBench) -> Result<BenchReport, BenchError> {
    if b.workers.is_empty() {
        return Err(BenchError::Config(
            "at least one worker count is required".into(),
        ));
    }
    if b.steps == 0 || b.prompt_len == 0 {
        return Err(BenchError::Config(
            "steps and prompt length must be >= 1".into(),
        ));
    }
    let timing = Timing::new(b.timing.warmup, b.timing.reps)?;
    for &n in &b.workers {
        ShardPlan::new(&b.config, n)?;
    }
    let cfg = &b.config;
    let greedy = SamplerConfig::greedy();
    let prompt = synthetic_prompt(cfg.vocab, b.prompt_len, b.seed);
    let comm = CommConfig {
        k: b.k,
        ..CommConfig::default()
    };
    let baseline = CommConfig {
        k: b.k,
        ..CommConfig::baseline()
    };

    let mut reference = Cluster::new(cfg, b.seed, 1, comm, greedy)?;
    let (want, _) = reference.generate(&prompt, b.steps + 1)?;

    let mut report = BenchReport::new();
    for &n in &b.workers {
        let ps = params(&[("workers", &n), ("steps", &b.steps), ("k", &b.k)]);
        let mut opt = Cluster::new(cfg, b.seed, n, comm, greedy)?;
        let (got, opt_metrics) = opt.generate(&prompt, b.steps + 1)?;
        if got != want {
            let at = got.iter().zip(&want).position(|(a, b)| a != b).unwrap_or(0);
            return Err(BenchError::gate(
                "distributed.equivalence",
                format!("{n} workers diverge from 1 worker at output token {at}"),
            ));
        }
        let mut base = Cluster::new(cfg, b.seed, n, baseline, greedy)?;
        let (base_tokens, base_metrics) = base.generate(&prompt, b.steps + 1)?;
        if base_tokens != want {
            return Err(BenchError::gate(
                "distributed.baseline_equivalence",
                format!("{n} workers in baseline mode diverge from 1 worker"),
            ));
        }
        report.push("distributed", &ps, "equivalence", 1.0, "pass");

        let m = last_decode(&opt_metrics);
        let mb = last_decode(&base_metrics);
        report.push(
            "distributed",
            &ps,
            "token_broadcast_bytes_per_link",
            per_link(m.bytes(Collective::TokenBroadcast), n),
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "embedding_broadcast_bytes_per_link",
            per_link(mb.bytes(Collective::EmbeddingBroadcast), n),
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "topk_gather_bytes",
            m.bytes(Collective::TopKGather) as f64,
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "logit_allreduce_bytes",
            mb.bytes(Collective::LogitAllReduce) as f64,
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "allreduce_bytes",
            m.bytes(Collective::AllReduce) as f64,
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "total_bytes_per_step",
            m.total_bytes() as f64,
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "baseline_total_bytes_per_step",
            mb.total_bytes() as f64,
            "bytes",
        );
        report.push(
            "distributed",
            &ps,
            "copy_count_zero_copy",
            m.copy_count() as f64,
            "copies",
        );
        report.push(
            "distributed",
            &ps,
            "copy_count_staging",
            mb.copy_count() as f64,
            "copies",
        );

        let mut step_ms = Vec::new();
        for rep in 0..timing.warmup + timing.reps {
            let mut c = Cluster::new(cfg, b.seed, n, comm, greedy)?;
            let mut tok = c.prefill(&prompt)?.token;
            let start = Instant::now();
            for _ in 0..b.steps {
                tok = c.decode_step(tok)?.token;
            }
            if rep >= timing.warmup {
                step_ms.push(start.elapsed().as_secs_f64() * 1e3 / b.steps as f64);
            }
        }
        let mean = step_ms.iter().sum::<f64>() / step_ms.len() as f64;
        report.push_timed(
            "distributed",
            &ps,
            "step_latency_ms",
            mean,
            "ms",
            timing.reps,
            timing.warmup,
        );
    }
    report.footer("workers run sequentially in one process; latency reflects total compute, not parallel speedup");
    report.footer(format!(
        "extrapolation: vocab=32000 k=50 top-k list saves {:.2}% of per-worker logit bytes",
        100.0 * topk_savings(32_000, 50)
    ));
    report.footer("reference values (Llama2-70B, other hardware, not compared): 2 sockets 249.7 ms, 8 sockets 87.7 ms (2.85x)");
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct KvPlan {
    pub spec: KvCacheSpec,
    /// Model parameter count, for the weight-traffic comparison line.
    pub params: u64,
    pub scale_bytes: u64,
}

impl KvPlan {
    pub fn llama2_7b() -> Self {
        Self {
            spec: KvCacheSpec::LLAMA2_7B_EXAMPLE,
            params: 6_738_415_616,
            scale_bytes: 4,
        }
    }
}

pub fn bench_kv_plan(p: &KvPlan) -> Result<BenchReport, BenchError> {
    let s = p.spec;
    s.validate()?;
    let ps = params(&[
        ("b", &s.batch),
        ("L_i", &s.input_len),
        ("L_o", &s.output_len),
        ("l", &s.layers),
        ("n_head", &s.n_head),
        ("s_head", &s.head_size),
        ("s_d", &s.dtype_bytes),
    ]);
    let requested = cache_bytes(&s)?;
    let fp16 = cache_bytes(&KvCacheSpec {
        dtype_bytes: 2,
        ..s
    })?;
    let int8_spec = KvCacheSpec {
        dtype_bytes: 1,
        ..s
    };
    let int8 = cache_bytes(&int8_spec)?;
    let int8_scaled = cache_bytes_with_scales(&int8_spec, p.scale_bytes)?;
    let weights = p
        .params
        .checked_mul(2)
        .ok_or(slimfer_core::Error::Overflow("weight bytes"))?;

    let mut r = BenchReport::new();
    r.push("kv_plan", &ps, "cache_bytes", requested as f64, "bytes");
    r.push("kv_plan", &ps, "fp16_bytes", fp16 as f64, "bytes");
    r.push("kv_plan", &ps, "int8_bytes", int8 as f64, "bytes");
    r.push(
        "kv_plan",
        &ps,
        "int8_with_scales_bytes",
        int8_scaled as f64,
        "bytes",
    );
    r.push(
        "kv_plan",
        &ps,
        "int8_with_scales_over_fp16",
        int8_scaled as f64 / fp16 as f64,
        "ratio",
    );
    r.push("kv_plan", &ps, "fp16_weight_bytes", weights as f64, "bytes");
    r.push(
        "kv_plan",
        &ps,
        "fp16_cache_over_weights",
        fp16 as f64 / weights as f64,
        "ratio",
    );
    r.footer(format!(
        "cache_bytes = 2*b*(L_i+L_o)*l*n_head*s_head*s_d = {requested} bytes = {:.2} GiB",
        requested as f64 / (1u64 << 30) as f64
    ));
    r.footer("the common ~128 GB estimate for the 7B example corresponds to L_i+L_o=1024, half of the 2048 used here");
    r.footer(format!(
        "weights: {} params at 2 bytes = {:.1} GB read per decode step",
        p.params,
        weights as f64 / 1e9
    ));
    r.footer(format!(
        "scales: one {}-byte scale per (token, head) slice",
        p.scale_bytes
    ));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> Timing {
        Timing { warmup: 0, reps: 1 }
    }

    #[test]
    fn attention_report_shape() {
        let b = AttentionBench::for_model(&ModelConfig::toy(), vec![8, 16], quick(), 1);
        let r = bench_attention(&b).unwrap();
        for len in [8, 16] {
            let ps = format!("input={len}");
            for m in [
                "flash_ms",
                "slim_ms",
                "naive_ms",
                "correctness",
                "scratch_floats_slim",
            ] {
                assert!(r.value(&ps, m).is_some(), "{m}");
            }
            assert_eq!(r.value(&ps, "scratch_floats_slim"), Some(32.0 * len as f64));
        }
        assert!(r.footers.iter().any(|f| f.contains("61.57")));
    }

    #[test]
    fn attention_rejects_empty_and_zero_reps() {
        let mut b = AttentionBench::for_model(&ModelConfig::toy(), vec![], quick(), 1);
        assert!(bench_attention(&b).is_err());
        b.lengths = vec![4];
        b.timing.reps = 0;
        assert!(matches!(bench_attention(&b), Err(BenchError::Config(_))));
    }

    fn throughput(batches: Vec<usize>, out_len: usize) -> ThroughputBench {
        ThroughputBench {
            config: ModelConfig::toy(),
            batches,
            in_len: 4,
            out_len,
            timing: quick(),
            seed: 3,
            memory_limit: ThroughputBench::DEFAULT_MEMORY_LIMIT,
        }
    }

    #[test]
    fn throughput_rows_and_errors() {
        let r = bench_throughput(&throughput(vec![2, 3], 3)).unwrap();
        assert_eq!(
            r.value("batch=3;in=4;out=3;cache=f32", "generated_tokens"),
            Some(9.0)
        );
        assert!(matches!(
            bench_throughput(&throughput(vec![2], 0)),
            Err(BenchError::Config(_))
        ));
        let mut guard = throughput(vec![1_000_000], 3);
        guard.memory_limit = 1 << 20;
        assert!(matches!(
            bench_throughput(&guard),
            Err(BenchError::Core(slimfer_core::Error::Capacity { .. }))
        ));
    }

    #[test]
    fn distributed_report() {
        let b = DistributedBench {
            config: ModelConfig::toy(),
            workers: vec![1, 2],
            steps: 3,
            k: 8,
            prompt_len: 4,
            timing: quick(),
            seed: 2,
        };
        let r = bench_distributed(&b).unwrap();
        let ps = "workers=2;steps=3;k=8";
        assert_eq!(r.value(ps, "token_broadcast_bytes_per_link"), Some(4.0));
        assert_eq!(
            r.value(ps, "embedding_broadcast_bytes_per_link"),
            Some(256.0)
        );
        assert_eq!(r.value(ps, "copy_count_zero_copy"), Some(0.0));
        let bad = DistributedBench {
            workers: vec![3],
            ..b
        };
        match bench_distributed(&bad) {
            Err(BenchError::Core(slimfer_core::Error::Config(msg))) => {
                assert!(msg.contains("n_head"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kv_plan_rows() {
        let r = bench_kv_plan(&KvPlan::llama2_7b()).unwrap();
        let ps = &r.rows[0].parameters;
        assert_eq!(r.value(ps, "cache_bytes"), Some(274_877_906_944.0));
        assert_eq!(r.value(ps, "int8_bytes"), Some(137_438_953_472.0));
        let unit = KvPlan {
            spec: KvCacheSpec::UNIT,
            params: 1,
            scale_bytes: 4,
        };
        let r = bench_kv_plan(&unit).unwrap();
        assert_eq!(r.rows[0].value, 2.0);
    }

    #[test]
    fn savings_extrapolation() {
        assert!(topk_savings(32_000, 50) >= 0.99);
        assert!(topk_savings(256, 8) > 0.9);
    }
}
