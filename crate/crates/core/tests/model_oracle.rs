//! The cached f32 decoder against an uncached f64 re-implementation.

use slimfer_core::attention::Kernel;
use slimfer_core::model::{
    generate, synth_weights, synthetic_prompt, CacheDtype, DecoderWeights, Model, ModelConfig,
    SamplerConfig,
};

fn matvec(x: &[f64], w: &slimfer_core::Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wv as f64;
        }
    }
    out
}

fn rmsnorm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, &g)| v * inv * g as f64).collect()
}

fn rope(x: &mut [f64], hs: usize, pos: usize) {
    for head in x.chunks_exact_mut(hs) {
        for i in 0..hs / 2 {
            let angle = pos as f64 * 10_000f64.powf(-(2.0 * i as f64) / hs as f64);
            let (c, s) = (angle.cos(), angle.sin());
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Logits of the last position, recomputing everything from scratch.
fn oracle_logits(cfg: &ModelConfig, w: &DecoderWeights, tokens: &[u32]) -> Vec<f64> {
    let hs = cfg.head_size;
    let group = cfg.n_head / cfg.n_kv_head;
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            w.embedding
                .row(t as usize)
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    for lw in &w.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, x) in xs.iter().enumerate() {
            let h = rmsnorm(x, &lw.attn_norm);
            let mut q = matvec(&h, &lw.wq);
            let mut k = matvec(&h, &lw.wk);
            rope(&mut q, hs, pos);
            rope(&mut k, hs, pos);
            qs.push(q);
            ks.push(k);
            vs.push(matvec(&h, &lw.wv));
        }
        for i in 0..xs.len() {
            let mut attn = vec![0.0; cfg.n_head * hs];
            for h in 0..cfg.n_head {
                let g = h / group;
                let q = &qs[i][h * hs..(h + 1) * hs];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &ks[j][g * hs..(g + 1) * hs];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hs as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in 0..hs {
                        attn[h * hs + c] += ej / z * vs[j][g * hs + c];
                    }
                }
            }
            let o = matvec(&attn, &lw.wo);
            xs[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
        for x in xs.iter_mut() {
            let h = rmsnorm(x, &lw.ffn_norm);
            let gate = matvec(&h, &lw.w_gate);
            let up = matvec(&h, &lw.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let o = matvec(&act, &lw.w_down);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        }
    }
    let h = rmsnorm(xs.last().unwrap(), &w.final_norm);
    (0..cfg.vocab)
        .map(|t| {
            w.embedding
                .row(t)
                .iter()
                .zip(&h)
                .map(|(&e, x)| e as f64 * x)
                .sum()
        })
        .collect()
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn prefill_matches_uncached_oracle() {
    let cfg = ModelConfig::toy();
    for seed in [1, 2, 3] {
        let w = synth_weights(&cfg, seed);
        let prompt = synthetic_prompt(cfg.vocab, 12, seed);
        let mut m = Model::new(&cfg, &w).unwrap();
        let got = m.prefill(&prompt).unwrap();
        let want = oracle_logits(&cfg, &w, &prompt);
        assert!(max_diff(got.data(), &want) <= 1e-4, "seed {seed}");
    }
}

#[test]
fn cached_decode_matches_recomputation() {
    let cfg = ModelConfig::toy();
    let w = synth_weights(&cfg, 7);
    let mut tokens = synthetic_prompt(cfg.vocab, 6, 7);
    let mut m = Model::new(&cfg, &w).unwrap();
    m.prefill(&tokens).unwrap();
    for step in 0..10u32 {
        let t = (step * 37 + 11) % cfg.vocab as u32;
        tokens.push(t);
        let got = m.decode_step(t).unwrap();
        let want = oracle_logits(&cfg, &w, &tokens);
        assert!(max_diff(got.data(), &want) <= 1e-4, "step {step}");
    }
}

#[test]
fn prefill_kernels_interchangeable() {
    let cfg = ModelConfig::toy();
    let prompt = synthetic_prompt(cfg.vocab, 40, 3);
    let base = Model::from_seed(&cfg, 3).unwrap();
    let mut outs = Vec::new();
    for kernel in Kernel::ALL {
        let mut m = base.fork().unwrap().with_kernel(kernel);
        outs.push(m.prefill(&prompt).unwrap());
    }
    for o in &outs[1..] {
        assert!(o.max_abs_diff(&outs[0]) <= 1e-4);
    }
}

#[test]
fn int8_cache_logits_close_to_f32() {
    let cfg = ModelConfig::toy();
    for seed in 0..5 {
        let prompt = synthetic_prompt(cfg.vocab, 16, seed);
        let mut f = Model::from_seed(&cfg, seed).unwrap();
        let mut q = Model::from_seed(&cfg.clone().with_cache(CacheDtype::Int8), seed).unwrap();
        let stream = generate(&mut f, &prompt, 16, &SamplerConfig::greedy()).unwrap();
        f.prefill(&prompt).unwrap();
        q.prefill(&prompt).unwrap();
        for &t in &stream {
            let a = f.decode_step(t).unwrap();
            let b = q.decode_step(t).unwrap();
            assert!(a.max_abs_diff(&b) <= 0.05);
        }
    }
}

#[test]
fn fork_shares_weights_not_state() {
    let cfg = ModelConfig::toy();
    let mut a = Model::from_seed(&cfg, 5).unwrap();
    let mut b = a.fork().unwrap();
    a.prefill(&[1, 2, 3]).unwrap();
    assert_eq!(b.cache_len(), 0);
    let la = a.decode_step(4).unwrap();
    b.prefill(&[1, 2, 3]).unwrap();
    assert_eq!(b.decode_step(4).unwrap(), la);
}
