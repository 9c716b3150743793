//! Top-k selection over vocabulary shards and the exact merge of per-shard
//! lists.
//!
//! Entries are totally ordered by logit descending, then token ascending.
//! Because shards cover disjoint token ranges, the global top-k is always
//! contained in the union of the shards' local top-k lists, so the merge is
//! exact rather than approximate.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKEntry {
    pub token: TokenId,
    pub logit: f32,
}

impl TopKEntry {
    /// Bytes one entry occupies on the wire (u32 token + f32 logit).
    pub const WIRE_BYTES: usize = 8;

    /// `Less` means `self` ranks ahead of `other`.
    pub fn rank_cmp(&self, other: &TopKEntry) -> Ordering {
        other
            .logit
            .total_cmp(&self.logit)
            .then(self.token.cmp(&other.token))
    }
}

/// The `k` best entries of a logits shard whose first element is token
/// `vocab_offset`.
pub fn local_topk(logits_shard: &[f32], k: usize, vocab_offset: usize) -> Vec<TopKEntry> {
    let mut entries: Vec<TopKEntry> = logits_shard
        .iter()
        .enumerate()
        .map(|(i, &logit)| TopKEntry {
            token: (vocab_offset + i) as TokenId,
            logit,
        })
        .collect();
    let k = k.min(entries.len());
    if k == 0 {
        return Vec::new();
    }
    if k < entries.len() {
        entries.select_nth_unstable_by(k - 1, TopKEntry::rank_cmp);
        entries.truncate(k);
    }
    entries.sort_unstable_by(TopKEntry::rank_cmp);
    entries
}

/// Global top-k from per-worker lists built over disjoint vocab shards.
///
/// Returns a protocol error if the same token appears in two lists.
pub fn merge_topk(lists: &[Vec<TopKEntry>], k: usize) -> Result<Vec<TopKEntry>> {
    let mut spans: Vec<(TokenId, TokenId, usize)> = lists
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(w, l)| {
            let lo = l.iter().map(|e| e.token).min().unwrap_or(0);
            let hi = l.iter().map(|e| e.token).max().unwrap_or(0);
            (lo, hi, w)
        })
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 <= pair[0].1 {
            return Err(Error::Protocol(alloc::format!(
                "top-k lists of workers {} and {} overlap in vocab range",
                pair[0].2,
                pair[1].2
            )));
        }
    }
    // k-way merge of the sorted lists
    let mut heads: Vec<usize> = alloc::vec![0; lists.len()];
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut best: Option<(usize, TopKEntry)> = None;
        for (w, list) in lists.iter().enumerate() {
            if let Some(e) = list.get(heads[w]) {
                if best.is_none_or(|(_, b)| e.rank_cmp(&b) == Ordering::Less) {
                    best = Some((w, *e));
                }
            }
        }
        match best {
            Some((w, e)) => {
                heads[w] += 1;
                out.push(e);
            }
            None => break,
        }
    }
    Ok(out)
}
