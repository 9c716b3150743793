//! Equivalence suites behind `slimfer verify` and the acceptance tests.
//! Each suite returns a [`Check`] instead of panicking so callers can report
//! every result.

use std::fmt::Write as _;

use slimfer_core::attention::{
    attention_flash, attention_naive, attention_slim, AttentionParams, ScoreBuffer,
};
use slimfer_core::distributed::topk::{local_topk, merge_topk, TopKEntry};
use slimfer_core::distributed::{Cluster, Collective, CommConfig};
use slimfer_core::kvcache::{cache_bytes, Int8KvCache, KvCacheSpec};
use slimfer_core::model::{
    generate, synthetic_prompt, CacheDtype, Model, ModelConfig, SamplerConfig,
};
use slimfer_core::rng::SplitMix64;
use slimfer_core::tensor::{
    dequantize, matmul, matmul_hybrid, matmul_hybrid_rows, quantize_rows_i8,
};
use slimfer_core::Tensor;

use crate::bench::topk_savings;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }

    fn error(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn random_case(rng: &mut SplitMix64, causal: bool) -> (usize, usize, usize) {
    let hs = [4, 8, 16][rng.below(3)];
    let lk = 1 + rng.below(64);
    let lq = if causal {
        1 + rng.below(lk)
    } else {
        1 + rng.below(64)
    };
    (lq, lk, hs)
}

fn qkv(
    rng: &mut SplitMix64,
    lq: usize,
    lk: usize,
    hs: usize,
    scale: f32,
) -> (Tensor, Tensor, Tensor) {
    (
        Tensor::random(&[lq, hs], rng, scale),
        Tensor::random(&[lk, hs], rng, scale),
        Tensor::random(&[lk, hs], rng, 1.0),
    )
}

/// Slim vs naive over random shapes and block sizes {1, 2, Lq}.
pub fn slim_equivalence(cases: usize, seed: u64) -> Check {
    const NAME: &str = "attention.slim";
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f32;
    for c in 0..cases {
        let causal = c % 2 == 0;
        let (lq, lk, hs) = random_case(&mut rng, causal);
        let (q, k, v) = qkv(&mut rng, lq, lk, hs, 1.0);
        let base = AttentionParams::single_head(hs).causal(causal);
        let want = match attention_naive(&q, &k, &v, &base) {
            Ok(t) => t,
            Err(e) => return Check::error(NAME, e),
        };
        for rows in [1, 2, lq] {
            let p = base.slim_block_rows(rows);
            let mut buf = ScoreBuffer::for_params(&p, lk);
            match attention_slim(&q, &k, &v, &p, &mut buf) {
                Ok(got) => worst = worst.max(got.max_abs_diff(&want)),
                Err(e) => return Check::error(NAME, e),
            }
        }
    }
    Check::new(
        NAME,
        worst <= 1e-5,
        format!("{cases} cases, max-abs {worst:e} (tol 1e-5)"),
    )
}

/// Flash vs naive over random shapes and tiles {1, 4, Lk}, plus a case
/// with scores spanning about ±40.
pub fn flash_equivalence(cases: usize, seed: u64) -> Check {
    const NAME: &str = "attention.flash";
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f32;
    let mut run = |q: &Tensor,
                   k: &Tensor,
                   v: &Tensor,
                   base: &AttentionParams,
                   lk: usize|
     -> Result<(), String> {
        let want = attention_naive(q, k, v, base).map_err(|e| e.to_string())?;
        for tile in [1, 4, lk] {
            let p = (*base).flash_tiles(tile, tile);
            let got = attention_flash(q, k, v, &p).map_err(|e| e.to_string())?;
            worst = worst.max(got.max_abs_diff(&want));
        }
        Ok(())
    };
    for c in 0..cases {
        let causal = c % 2 == 0;
        let (lq, lk, hs) = random_case(&mut rng, causal);
        let (q, k, v) = qkv(&mut rng, lq, lk, hs, 1.0);
        if let Err(e) = run(
            &q,
            &k,
            &v,
            &AttentionParams::single_head(hs).causal(causal),
            lk,
        ) {
            return Check::error(NAME, e);
        }
    }
    // rescale q so the largest |score| is exactly 40
    let (mut q, k, v) = qkv(&mut rng, 24, 40, 16, 1.0);
    let p = AttentionParams::single_head(16).causal(false);
    let max_score = |q: &Tensor| {
        matmul(q, &k, true)
            .map(|s| s.data().iter().fold(0.0f32, |m, x| m.max(x.abs())) * p.scale)
            .unwrap_or(0.0)
    };
    let f = 40.0 / max_score(&q);
    q.data_mut().iter_mut().for_each(|x| *x *= f);
    let spread = max_score(&q);
    if let Err(e) = run(&q, &k, &v, &p, 40) {
        return Check::error(NAME, e);
    }
    Check::new(
        NAME,
        worst <= 1e-4 && spread >= 39.0,
        format!("{cases} cases + stress (score range ±{spread:.1}), max-abs {worst:e} (tol 1e-4)"),
    )
}

/// Random (token, head) slices through the INT8 cache, plus per-head scale
/// isolation probes.
pub fn int8_kv_bound(slices: usize, seed: u64) -> Check {
    const NAME: &str = "kvcache.int8_bound";
    let (n_head, hs) = (4, 16);
    let tokens = slices.div_ceil(n_head);
    let mut rng = SplitMix64::new(seed);
    let mut cache = match Int8KvCache::new(1, 1, n_head, hs, tokens) {
        Ok(c) => c,
        Err(e) => return Check::error(NAME, e),
    };
    let mut src = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        // heads of very different magnitude in the same token
        let mut k = vec![0.0f32; n_head * hs];
        for (h, chunk) in k.chunks_mut(hs).enumerate() {
            let mag = 10f32.powi(h as i32 * 2 - 3) * (0.5 + rng.next_f32());
            rng.fill_uniform(chunk, mag);
        }
        let v: Vec<f32> = k.iter().map(|x| -x * 0.5).collect();
        if let Err(e) = cache.append_token_slices(0, 0, &k, &v) {
            return Check::error(NAME, e);
        }
        src.push((k, v));
    }
    let mut checked = 0;
    let mut violations = 0;
    for h in 0..n_head {
        let view = match cache.read_head(0, 0, h, tokens) {
            Ok(v) => v,
            Err(e) => return Check::error(NAME, e),
        };
        let (dk, dv) = (dequantize(view.keys), dequantize(view.values));
        for (t, (k, v)) in src.iter().enumerate() {
            for (orig, deq) in [
                (&k[h * hs..(h + 1) * hs], dk.row(t)),
                (&v[h * hs..(h + 1) * hs], dv.row(t)),
            ] {
                let absmax = orig.iter().fold(0.0f32, |m, x| m.max(x.abs()));
                violations += orig
                    .iter()
                    .zip(deq)
                    .filter(|(a, b)| (*a - *b).abs() > absmax / 254.0)
                    .count();
            }
            checked += 1;
        }
    }

    // isolation: scaling one head of a token leaves the others' codes alone
    let isolated = (|| -> Result<bool, slimfer_core::Error> {
        let mut a = Int8KvCache::new(1, 1, 2, 4, 1)?;
        let mut b = Int8KvCache::new(1, 1, 2, 4, 1)?;
        let x = [0.1f32, -0.2, 0.3, 0.05, 1.0, 2.0, -3.0, 0.5];
        let mut y = x;
        y[..4].iter_mut().for_each(|v| *v *= 1e4);
        a.append_token_slices(0, 0, &x, &x)?;
        b.append_token_slices(0, 0, &y, &y)?;
        let h1a = a.read_head(0, 0, 1, 1)?.keys.to_owned();
        let h1b = b.read_head(0, 0, 1, 1)?.keys.to_owned();
        let h0a = a.read_head(0, 0, 0, 1)?.keys.row(0).1;
        let h0b = b.read_head(0, 0, 0, 1)?.keys.row(0).1;
        Ok(h1a == h1b && (h0b / h0a - 1e4).abs() < 1.0)
    })();
    let isolated = match isolated {
        Ok(v) => v,
        Err(e) => return Check::error(NAME, e),
    };
    Check::new(
        NAME,
        violations == 0 && isolated && checked >= slices,
        format!(
            "{checked} slices, {violations} elements over absmax/254, head isolation {isolated}"
        ),
    )
}

/// Exact cache size of the 7B example and linearity in every field.
pub fn kv_planner() -> Check {
    const NAME: &str = "kvcache.planner";
    let s = KvCacheSpec::LLAMA2_7B_EXAMPLE;
    let base = match cache_bytes(&s) {
        Ok(b) => b,
        Err(e) => return Check::error(NAME, e),
    };
    let doubled = [
        KvCacheSpec {
            batch: 2 * s.batch,
            ..s
        },
        KvCacheSpec {
            input_len: 2 * s.input_len,
            output_len: 2 * s.output_len,
            ..s
        },
        KvCacheSpec {
            layers: 2 * s.layers,
            ..s
        },
        KvCacheSpec {
            n_head: 2 * s.n_head,
            ..s
        },
        KvCacheSpec {
            head_size: 2 * s.head_size,
            ..s
        },
        KvCacheSpec {
            dtype_bytes: 2 * s.dtype_bytes,
            ..s
        },
    ];
    let linear = doubled
        .iter()
        .all(|d| cache_bytes(d).ok() == Some(2 * base));
    let half = cache_bytes(&KvCacheSpec {
        dtype_bytes: 1,
        ..s
    })
    .ok()
        == Some(base / 2);
    let unit = cache_bytes(&KvCacheSpec::UNIT).ok() == Some(2);
    Check::new(
        NAME,
        base == 274_877_906_944 && linear && half && unit,
        format!(
            "7B example = {base} bytes (expect 274877906944); a ~128 GB estimate corresponds to L_i+L_o=1024; linear {linear}, s_d halving {half}, unit {unit}"
        ),
    )
}

/// Hybrid INT8 matmul vs dequantize-then-matmul, compared bit for bit.
pub fn hybrid_matmul(cases: usize, seed: u64) -> Check {
    const NAME: &str = "tensor.hybrid_matmul";
    let mut rng = SplitMix64::new(seed);
    let mut mismatches = 0;
    let mut gemv = 0;
    for c in 0..cases {
        let m = if c % 3 == 0 { 1 } else { 1 + rng.below(8) };
        let k = 1 + rng.below(48);
        let n = 1 + rng.below(48);
        gemv += usize::from(m == 1);
        let a = Tensor::random(&[m, k], &mut rng, 2.0);
        // rows of wildly different range
        let mut w = Tensor::random(&[n, k], &mut rng, 1.0);
        for r in 0..n {
            let s = 10f32.powi((r % 5) as i32 - 2);
            w.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let q = match quantize_rows_i8(&w) {
            Ok(q) => q,
            Err(e) => return Check::error(NAME, e),
        };
        let deq = dequantize(&q);
        let ok = (|| -> Result<bool, slimfer_core::Error> {
            let got = matmul_hybrid(&a, &q)?;
            let want = matmul(&a, &deq, true)?;
            // the row form: (m × n) · deq(q) with deq(q) as a (n × k) matrix
            let w2 = Tensor::random(&[m, n], &mut SplitMix64::new(c as u64), 1.0);
            let got_rows = matmul_hybrid_rows(&w2, &q)?;
            let want_rows = matmul(&w2, &deq, false)?;
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            Ok(bits(&got) == bits(&want) && bits(&got_rows) == bits(&want_rows))
        })();
        match ok {
            Ok(true) => {}
            Ok(false) => mismatches += 1,
            Err(e) => return Check::error(NAME, e),
        }
    }
    Check::new(
        NAME,
        mismatches == 0,
        format!("{cases} cases ({gemv} gemv), {mismatches} not bit-identical"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionStats {
    pub seeds: usize,
    pub identical_streams: usize,
    pub worst_logit_diff: f32,
}

/// Greedy streams with an INT8 cache vs an f32 cache, free-running; logits
/// compared step by step while both are fed the f32 stream.
pub fn int8_precision(
    seeds: u64,
    out_tokens: usize,
    prompt_len: usize,
) -> Result<PrecisionStats, slimfer_core::Error> {
    let cfg = ModelConfig::toy();
    let mut identical = 0;
    let mut worst = 0.0f32;
    for seed in 0..seeds {
        let prompt = synthetic_prompt(cfg.vocab, prompt_len, seed);
        let mut f = Model::from_seed(&cfg, seed)?;
        let mut q = Model::from_seed(&cfg.clone().with_cache(CacheDtype::Int8), seed)?;
        let a = generate(&mut f, &prompt, out_tokens, &SamplerConfig::greedy())?;
        let b = generate(&mut q, &prompt, out_tokens, &SamplerConfig::greedy())?;
        identical += usize::from(a == b);
        let mut lf = f.prefill(&prompt)?;
        let mut lq = q.prefill(&prompt)?;
        worst = worst.max(lf.max_abs_diff(&lq));
        for &t in &a[..a.len().saturating_sub(1)] {
            lf = f.decode_step(t)?;
            lq = q.decode_step(t)?;
            worst = worst.max(lf.max_abs_diff(&lq));
        }
    }
    Ok(PrecisionStats {
        seeds: seeds as usize,
        identical_streams: identical,
        worst_logit_diff: worst,
    })
}

pub fn end_to_end_precision(seeds: u64, out_tokens: usize) -> Check {
    match int8_precision(seeds, out_tokens, 16) {
        Ok(s) => end_to_end_precision_from(&s),
        Err(e) => Check::error(PRECISION, e),
    }
}

const PRECISION: &str = "model.int8_vs_f32";

pub fn end_to_end_precision_from(s: &PrecisionStats) -> Check {
    let need = (s.seeds * 95).div_ceil(100);
    Check::new(
        PRECISION,
        s.identical_streams >= need && s.worst_logit_diff <= 0.05,
        format!(
            "identical greedy streams {}/{} (need {need}), worst per-step logit diff {:.4} (tol 0.05)",
            s.identical_streams, s.seeds, s.worst_logit_diff
        ),
    )
}

/// Greedy streams for 1, 2 and 4 workers, and merge_topk against a brute
/// force global top-k.
pub fn distributed_exactness(seeds: u64, steps: usize, merge_cases: usize) -> Check {
    const NAME: &str = "distributed.exactness";
    let cfg = ModelConfig::toy();
    let mut diverged = Vec::new();
    for seed in 0..seeds {
        let prompt = synthetic_prompt(cfg.vocab, 8, seed);
        let streams: Result<Vec<Vec<u32>>, _> = [1, 2, 4]
            .into_iter()
            .map(|n| {
                Cluster::new(
                    &cfg,
                    seed,
                    n,
                    CommConfig::default(),
                    SamplerConfig::greedy(),
                )
                .and_then(|mut c| c.generate(&prompt, steps))
                .map(|r| r.0)
            })
            .collect();
        match streams {
            Ok(s) if s[0] == s[1] && s[0] == s[2] => {}
            Ok(_) => diverged.push(seed),
            Err(e) => return Check::error(NAME, e),
        }
    }

    let mut rng = SplitMix64::new(0xface);
    let mut merge_bad = 0;
    for _ in 0..merge_cases {
        let vocab = 1 + rng.below(300);
        let k = 1 + rng.below(16);
        let logits: Vec<f32> = (0..vocab)
            .map(|_| (rng.below(20) as f32 - 10.0) * 0.25)
            .collect();
        let mut cuts: Vec<usize> = (0..rng.below(6)).map(|_| rng.below(vocab + 1)).collect();
        cuts.extend([0, vocab]);
        cuts.sort_unstable();
        cuts.dedup();
        let lists: Vec<Vec<TopKEntry>> = cuts
            .windows(2)
            .map(|w| local_topk(&logits[w[0]..w[1]], k, w[0]))
            .collect();
        let mut brute: Vec<TopKEntry> = logits
            .iter()
            .enumerate()
            .map(|(i, &logit)| TopKEntry {
                token: i as u32,
                logit,
            })
            .collect();
        brute.sort_by(|a, b| a.rank_cmp(b));
        brute.truncate(k);
        if merge_topk(&lists, k).ok() != Some(brute) {
            merge_bad += 1;
        }
    }
    Check::new(
        NAME,
        diverged.is_empty() && merge_bad == 0,
        format!(
            "{seeds} seeds x {steps} steps over 1/2/4 workers, diverged seeds {diverged:?}; merge_topk {merge_bad}/{merge_cases} mismatches"
        ),
    )
}

/// Transport byte counters for token-id broadcast and top-k reduction
/// against their baselines (toy model, 2 workers, k = 8).
pub fn comm_reduction() -> Check {
    const NAME: &str = "distributed.comm_reduction";
    let cfg = ModelConfig::toy();
    let run =
        |comm: CommConfig| -> Result<slimfer_core::distributed::StepMetrics, slimfer_core::Error> {
            let mut c = Cluster::new(&cfg, 1, 2, comm, SamplerConfig::greedy())?;
            let t = c.prefill(&[3, 1, 4, 1, 5])?.token;
            Ok(c.decode_step(t)?.metrics)
        };
    let (opt, base) = match (run(CommConfig::default()), run(CommConfig::baseline())) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Check::error(NAME, e),
    };
    let tok = opt.bytes(Collective::TokenBroadcast);
    let emb = base.bytes(Collective::EmbeddingBroadcast);
    let topk = opt.bytes(Collective::TopKGather);
    let full = base.bytes(Collective::LogitAllReduce);
    let r1 = emb as f64 / tok.max(1) as f64;
    let r2 = full as f64 / topk.max(1) as f64;
    let extrapolated = topk_savings(32_000, 50);
    let mut detail = String::new();
    let _ = write!(
        detail,
        "token {tok} B vs embedding {emb} B ({r1:.0}x, need 32x); top-k {topk} B vs full logits {full} B ({r2:.1}x, need 10x); vocab=32000 k=50 saves {:.2}%",
        100.0 * extrapolated
    );
    Check::new(
        NAME,
        tok > 0 && r1 >= 32.0 && r2 >= 10.0 && extrapolated >= 0.99,
        detail,
    )
}

/// Copy counts and outputs in zero-copy vs staging mode.
pub fn zero_copy() -> Check {
    const NAME: &str = "distributed.zero_copy";
    let cfg = ModelConfig::toy();
    let reductions = 2 * cfg.layers as u64;
    let run = |zero_copy: bool| {
        let comm = CommConfig {
            zero_copy,
            topk_reduction: false,
            ..CommConfig::default()
        };
        let mut c = Cluster::new(&cfg, 5, 2, comm, SamplerConfig::greedy())?;
        let mut out = c.prefill(&[9, 8, 7])?;
        let mut logits = vec![out.logits.clone().unwrap_or_default()];
        let mut copies = Vec::new();
        for _ in 0..4 {
            out = c.decode_step(out.token)?;
            logits.push(out.logits.clone().unwrap_or_default());
            copies.push(
                (0..2)
                    .map(|w| worker_copies(&out.metrics, w))
                    .collect::<Vec<_>>(),
            );
        }
        Ok::<_, slimfer_core::Error>((logits, copies))
    };
    let ((lz, cz), (ls, cs)) = match (run(true), run(false)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Check::error(NAME, e),
    };
    let bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    let zero_ok = cz.iter().flatten().all(|&c| c == 0);
    let staging_ok = cs.iter().flatten().all(|&c| c == reductions);
    let same = bits(&lz) == bits(&ls);
    Check::new(
        NAME,
        zero_ok && staging_ok && same,
        format!(
            "per-worker copies per decode step: zero-copy {:?}, staging {:?} (expect {reductions}); logits bit-identical {same}",
            cz[0], cs[0]
        ),
    )
}

fn worker_copies(m: &slimfer_core::distributed::StepMetrics, worker: usize) -> u64 {
    m.rows
        .iter()
        .filter(|r| r.worker == worker)
        .map(|r| r.copy_count)
        .sum()
}

/// Every suite. `quick` shrinks the randomized sweeps for interactive use.
pub fn run_all(seed: u64, quick: bool) -> Vec<Check> {
    let (att, kv, hyb, prec, dist, merge) = if quick {
        (50, 200, 100, 10, 3, 200)
    } else {
        (200, 1000, 500, 100, 10, 1000)
    };
    vec![
        slim_equivalence(att, seed),
        flash_equivalence(att, seed.wrapping_add(1)),
        int8_kv_bound(kv, seed.wrapping_add(2)),
        kv_planner(),
        hybrid_matmul(hyb, seed.wrapping_add(3)),
        end_to_end_precision(prec, 32),
        distributed_exactness(dist, 16, merge),
        comm_reduction(),
        zero_copy(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        for c in [
            slim_equivalence(20, 1),
            flash_equivalence(20, 2),
            int8_kv_bound(100, 3),
            kv_planner(),
            hybrid_matmul(30, 4),
            comm_reduction(),
            zero_copy(),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn check_line_format() {
        let c = Check::new("x", false, "why".into());
        assert_eq!(c.line(), "FAIL x: why");
    }
}
