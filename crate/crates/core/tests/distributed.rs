use proptest::prelude::*;

use slimfer_core::distributed::topk::{local_topk, merge_topk, TopKEntry};
use slimfer_core::distributed::{Cluster, Collective, CommConfig, ShardPlan, Transport};
use slimfer_core::model::{synthetic_prompt, ModelConfig, SamplerConfig};
use slimfer_core::{Error, Tensor};

fn brute_topk(logits: &[f32], k: usize) -> Vec<TopKEntry> {
    let mut all: Vec<TopKEntry> = logits
        .iter()
        .enumerate()
        .map(|(i, &logit)| TopKEntry {
            token: i as u32,
            logit,
        })
        .collect();
    all.sort_by(|a, b| a.rank_cmp(b));
    all.truncate(k);
    all
}

proptest! {
    #[test]
    fn merge_equals_global_topk(
        // coarse values so ties are common
        logits in prop::collection::vec((-8i32..8).prop_map(|x| x as f32 * 0.5), 1..200),
        cuts in prop::collection::vec(0usize..200, 0..6),
        k in 1usize..12,
    ) {
        let n = logits.len();
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % (n + 1)).collect();
        bounds.push(0);
        bounds.push(n);
        bounds.sort_unstable();
        bounds.dedup();
        let lists: Vec<Vec<TopKEntry>> = bounds
            .windows(2)
            .map(|w| local_topk(&logits[w[0]..w[1]], k, w[0]))
            .collect();
        prop_assert_eq!(merge_topk(&lists, k).unwrap(), brute_topk(&logits, k));
    }

    #[test]
    fn allreduce_is_replicated_ordered_sum(
        n in 1usize..5,
        len in 1usize..20,
        seed in any::<u64>(),
    ) {
        let mut rng = slimfer_core::rng::SplitMix64::new(seed);
        let inputs: Vec<Tensor> = (0..n).map(|_| Tensor::random(&[1, len], &mut rng, 10.0)).collect();
        let mut t = Transport::new(n).unwrap();
        let out = t.allreduce_sum(&inputs).unwrap();
        let mut want = inputs[0].data().to_vec();
        for x in &inputs[1..] {
            want.iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
        }
        for o in &out {
            prop_assert_eq!(o.data(), want.as_slice());
        }
        let m = t.end_step();
        prop_assert_eq!(m.bytes(Collective::AllReduce), (2 * (n - 1) * len * 4) as u64);
    }
}

#[test]
fn streams_identical_across_worker_counts() {
    let cfg = ModelConfig::toy();
    for seed in 0..3 {
        let prompt = synthetic_prompt(cfg.vocab, 8, seed);
        let mut streams = Vec::new();
        for n in [1, 2, 4] {
            let mut c = Cluster::new(
                &cfg,
                seed,
                n,
                CommConfig::default(),
                SamplerConfig::greedy(),
            )
            .unwrap();
            streams.push(c.generate(&prompt, 12).unwrap().0);
        }
        assert_eq!(streams[0], streams[1]);
        assert_eq!(streams[0], streams[2]);
    }
}

#[test]
fn topk_sampling_identical_across_worker_counts() {
    let cfg = ModelConfig::toy();
    let prompt = synthetic_prompt(cfg.vocab, 8, 4);
    let sampler = SamplerConfig::top_k(4, 77);
    let streams: Vec<Vec<u32>> = [1, 2, 4]
        .into_iter()
        .map(|n| {
            let mut c = Cluster::new(&cfg, 4, n, CommConfig::default(), sampler).unwrap();
            c.generate(&prompt, 12).unwrap().0
        })
        .collect();
    assert_eq!(streams[0], streams[1]);
    assert_eq!(streams[0], streams[2]);
}

#[test]
fn baseline_modes_give_same_tokens() {
    let cfg = ModelConfig::toy();
    let prompt = synthetic_prompt(cfg.vocab, 8, 6);
    let mut opt = Cluster::new(&cfg, 6, 2, CommConfig::default(), SamplerConfig::greedy()).unwrap();
    let mut base =
        Cluster::new(&cfg, 6, 2, CommConfig::baseline(), SamplerConfig::greedy()).unwrap();
    let (a, ma) = opt.generate(&prompt, 10).unwrap();
    let (b, mb) = base.generate(&prompt, 10).unwrap();
    assert_eq!(a, b);
    let last = |m: &Vec<slimfer_core::distributed::StepMetrics>| m.last().unwrap().clone();
    assert!(last(&ma).total_bytes() < last(&mb).total_bytes());
}

#[test]
fn config_errors() {
    let cfg = ModelConfig::toy();
    assert!(matches!(ShardPlan::new(&cfg, 3), Err(Error::Config(_))));
    let comm = CommConfig {
        k: 2,
        ..CommConfig::default()
    };
    assert!(Cluster::new(&cfg, 1, 2, comm, SamplerConfig::top_k(4, 0)).is_err());
}
