//! INT8 key/value cache with one scale per (token, head) slice, and the
//! cache size planner.
//!
//! The planner evaluates `2 · b · (L_i + L_o) · l · n_head · s_head · s_d`
//! bytes literally. For a 7B-class configuration (b=256, L_i=L_o=1024,
//! l=32, n_head=32, s_head=128, s_d=2) this is 274,877,906,944 bytes
//! (256 GiB). The often quoted estimate of about
//! 128 GB corresponds to a total sequence length of 1024 rather than
//! 2048; the planner does not try to reproduce that figure.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{QuantRowsI8, QuantRowsView, Tensor};

/// Inputs of the cache size formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvCacheSpec {
    /// Batch size (sequences).
    pub batch: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub layers: u64,
    /// Key/value head count.
    pub n_head: u64,
    /// Elements per head.
    pub head_size: u64,
    /// Bytes per element.
    pub dtype_bytes: u64,
}

impl KvCacheSpec {
    /// A single one-token sequence with one layer, one head of one
    /// one-byte element: two bytes of cache.
    pub const UNIT: KvCacheSpec = KvCacheSpec {
        batch: 1,
        input_len: 1,
        output_len: 0,
        layers: 1,
        n_head: 1,
        head_size: 1,
        dtype_bytes: 1,
    };

    /// 7B-class example: 32 layers of 32 heads × 128, batch 256, 1024 in +
    /// 1024 out, 16-bit elements.
    pub const LLAMA2_7B_EXAMPLE: KvCacheSpec = KvCacheSpec {
        batch: 256,
        input_len: 1024,
        output_len: 1024,
        layers: 32,
        n_head: 32,
        head_size: 128,
        dtype_bytes: 2,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch", self.batch),
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("layers", self.layers),
            ("n_head", self.n_head),
            ("head_size", self.head_size),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (name, v) in fields {
            // L_o may legitimately be zero for a prompt-only run
            if v == 0 && name != "output_len" {
                return Err(Error::Config(alloc::format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Number of (token, head) slices across K and V: `2·b·(L_i+L_o)·l·n_head`.
    pub fn slices(&self) -> Result<u64> {
        self.validate()?;
        let tokens = self
            .input_len
            .checked_add(self.output_len)
            .ok_or(Error::Overflow("kv cache sequence length"))?;
        [self.batch, tokens, self.layers, self.n_head]
            .iter()
            .try_fold(2u64, |acc, &x| acc.checked_mul(x))
            .ok_or(Error::Overflow("kv cache slice count"))
    }
}

/// Payload bytes of the cache.
pub fn cache_bytes(spec: &KvCacheSpec) -> Result<u64> {
    spec.slices()?
        .checked_mul(spec.head_size)
        .and_then(|x| x.checked_mul(spec.dtype_bytes))
        .ok_or(Error::Overflow("cache_bytes"))
}

/// INT8 payload plus one `scale_bytes`-wide scale per (token, head) slice.
pub fn cache_bytes_with_scales(spec: &KvCacheSpec, scale_bytes: u64) -> Result<u64> {
    if scale_bytes == 0 {
        return Err(Error::Config("scale_bytes must be >= 1".into()));
    }
    let payload = cache_bytes(&KvCacheSpec {
        dtype_bytes: 1,
        ..*spec
    })?;
    let scales = spec
        .slices()?
        .checked_mul(scale_bytes)
        .ok_or(Error::Overflow("cache scale bytes"))?;
    payload
        .checked_add(scales)
        .ok_or(Error::Overflow("cache_bytes_with_scales"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvKind {
    Key,
    Value,
}

#[derive(Debug, Clone)]
struct SeqStore {
    keys: QuantRowsI8,
    values: QuantRowsI8,
    len: usize,
}

/// Borrowed K and V rows of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub keys: QuantRowsView<'a>,
    pub values: QuantRowsView<'a>,
}

/// Append-only INT8 KV cache.
///
/// Storage is one K and one V [`QuantRowsI8`] per (layer, sequence); logical
/// row `token * n_head + head` holds one head slice with its own scale. Rows
/// are reserved up front for `capacity` tokens, so appends never reallocate
/// and earlier rows are never touched.
///
/// A sequence's length is the number of tokens appended at layer 0. Layer
/// `l > 0` may only append a token layer 0 already holds, which allows
/// either layer-major (prefill) or token-major (decode) append order.
#[derive(Debug, Clone)]
pub struct Int8KvCache {
    layers: usize,
    n_head: usize,
    head_size: usize,
    capacity: usize,
    stores: Vec<SeqStore>,
    n_seqs: usize,
}

impl Int8KvCache {
    pub fn new(
        layers: usize,
        n_seqs: usize,
        n_head: usize,
        head_size: usize,
        capacity: usize,
    ) -> Result<Self> {
        if layers == 0 || n_seqs == 0 || n_head == 0 || head_size == 0 {
            return Err(Error::Config("kv cache dimensions must be >= 1".into()));
        }
        let rows = capacity
            .checked_mul(n_head)
            .ok_or(Error::Overflow("kv cache capacity"))?;
        let stores = (0..layers * n_seqs)
            .map(|_| SeqStore {
                keys: QuantRowsI8::with_row_capacity(head_size, rows),
                values: QuantRowsI8::with_row_capacity(head_size, rows),
                len: 0,
            })
            .collect();
        Ok(Self {
            layers,
            n_head,
            head_size,
            capacity,
            stores,
            n_seqs,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn n_head(&self) -> usize {
        self.n_head
    }

    pub fn head_size(&self) -> usize {
        self.head_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_seqs(&self) -> usize {
        self.n_seqs
    }

    /// Tokens held by `seq` (its layer-0 length).
    pub fn len(&self, seq: usize) -> usize {
        self.stores[seq].len
    }

    pub fn is_empty(&self, seq: usize) -> bool {
        self.len(seq) == 0
    }

    pub fn layer_len(&self, layer: usize, seq: usize) -> usize {
        self.stores[layer * self.n_seqs + seq].len
    }

    /// Payload plus scale bytes currently stored, across all layers and
    /// sequences.
    pub fn stored_bytes(&self) -> usize {
        self.stores
            .iter()
            .map(|s| {
                s.keys.values().len()
                    + s.values.values().len()
                    + 4 * (s.keys.rows() + s.values.rows())
            })
            .sum()
    }

    fn store_index(&self, layer: usize, seq: usize) -> Result<usize> {
        if layer >= self.layers {
            return Err(Error::Range {
                what: "kv cache layer",
                index: layer,
                bound: self.layers,
            });
        }
        if seq >= self.n_seqs {
            return Err(Error::Range {
                what: "kv cache sequence",
                index: seq,
                bound: self.n_seqs,
            });
        }
        Ok(layer * self.n_seqs + seq)
    }

    /// Quantizes and stores one token's `n_head × head_size` keys and values;
    /// returns the token's position.
    pub fn append_token(
        &mut self,
        layer: usize,
        seq: usize,
        k_heads: &Tensor,
        v_heads: &Tensor,
    ) -> Result<usize> {
        let idx = self.store_index(layer, seq)?;
        let want = [self.n_head, self.head_size];
        if k_heads.shape() != want || v_heads.shape() != want {
            return Err(crate::error::dim_err(
                "append_token",
                k_heads.shape(),
                &want,
            ));
        }
        self.append_slices(idx, layer, seq, k_heads.data(), v_heads.data())
    }

    /// Slice form of [`append_token`](Self::append_token): `k` and `v` hold
    /// `n_head * head_size` values each.
    pub fn append_token_slices(
        &mut self,
        layer: usize,
        seq: usize,
        k: &[f32],
        v: &[f32],
    ) -> Result<usize> {
        let idx = self.store_index(layer, seq)?;
        let n = self.n_head * self.head_size;
        if k.len() != n || v.len() != n {
            return Err(crate::error::dim_err(
                "append_token",
                &[k.len(), v.len()],
                &[n, n],
            ));
        }
        self.append_slices(idx, layer, seq, k, v)
    }

    fn append_slices(
        &mut self,
        idx: usize,
        layer: usize,
        seq: usize,
        k: &[f32],
        v: &[f32],
    ) -> Result<usize> {
        let pos = self.stores[idx].len;
        if pos >= self.capacity {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: pos + 1,
                available: self.capacity,
            });
        }
        if layer > 0 {
            let base = self.stores[seq].len;
            if pos >= base {
                return Err(Error::Range {
                    what: "kv cache layer ahead of layer 0",
                    index: pos,
                    bound: base,
                });
            }
        }
        let store = &mut self.stores[idx];
        for (kh, vh) in k
            .chunks_exact(self.head_size)
            .zip(v.chunks_exact(self.head_size))
        {
            store.keys.push_row(kh);
            store.values.push_row(vh);
        }
        store.len += 1;
        Ok(pos)
    }

    /// The first `upto` K and V rows of `head`, borrowed from the cache.
    pub fn read_head(
        &self,
        layer: usize,
        seq: usize,
        head: usize,
        upto: usize,
    ) -> Result<HeadView<'_>> {
        let idx = self.store_index(layer, seq)?;
        if head >= self.n_head {
            return Err(Error::Range {
                what: "kv cache head",
                index: head,
                bound: self.n_head,
            });
        }
        let store = &self.stores[idx];
        if upto > store.len {
            return Err(Error::Range {
                what: "kv cache read length",
                index: upto,
                bound: store.len,
            });
        }
        let (d, n_head) = (self.head_size, self.n_head);
        fn view(
            q: &QuantRowsI8,
            head: usize,
            upto: usize,
            d: usize,
            n_head: usize,
        ) -> QuantRowsView<'_> {
            QuantRowsView::strided(
                &q.values()[head * d..],
                &q.scales()[head..],
                upto,
                d,
                n_head,
            )
        }
        Ok(HeadView {
            keys: view(&store.keys, head, upto, d, n_head),
            values: view(&store.values, head, upto, d, n_head),
        })
    }

    /// One of the two stores of a head; see [`read_head`](Self::read_head).
    pub fn read(
        &self,
        layer: usize,
        seq: usize,
        head: usize,
        kind: KvKind,
        upto: usize,
    ) -> Result<QuantRowsView<'_>> {
        let v = self.read_head(layer, seq, head, upto)?;
        Ok(match kind {
            KvKind::Key => v.keys,
            KvKind::Value => v.values,
        })
    }

    /// Total scales held by one (layer, seq) K store; equals `len * n_head`.
    pub fn scale_count(&self, layer: usize, seq: usize) -> Result<usize> {
        let idx = self.store_index(layer, seq)?;
        Ok(self.stores[idx].keys.scales().len())
    }
}

/// Plain f32 cache with the same append rules, laid out head-major so each
/// head's rows are contiguous.
#[derive(Debug, Clone)]
pub struct F32KvCache {
    layers: usize,
    n_head: usize,
    head_size: usize,
    capacity: usize,
    // [layer][head] -> capacity * head_size values
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    lens: Vec<usize>,
}

impl F32KvCache {
    pub fn new(layers: usize, n_head: usize, head_size: usize, capacity: usize) -> Result<Self> {
        if layers == 0 || n_head == 0 || head_size == 0 {
            return Err(Error::Config("kv cache dimensions must be >= 1".into()));
        }
        let mk = || {
            (0..layers * n_head)
                .map(|_| Vec::with_capacity(capacity * head_size))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            layers,
            n_head,
            head_size,
            capacity,
            keys: mk(),
            values: mk(),
            lens: alloc::vec![0; layers],
        })
    }

    pub fn len(&self) -> usize {
        self.lens[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn append_token_slices(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<usize> {
        if layer >= self.layers {
            return Err(Error::Range {
                what: "kv cache layer",
                index: layer,
                bound: self.layers,
            });
        }
        let n = self.n_head * self.head_size;
        if k.len() != n || v.len() != n {
            return Err(crate::error::dim_err(
                "append_token",
                &[k.len(), v.len()],
                &[n, n],
            ));
        }
        let pos = self.lens[layer];
        if pos >= self.capacity {
            return Err(Error::Capacity {
                what: "kv cache",
                needed: pos + 1,
                available: self.capacity,
            });
        }
        if layer > 0 && pos >= self.lens[0] {
            return Err(Error::Range {
                what: "kv cache layer ahead of layer 0",
                index: pos,
                bound: self.lens[0],
            });
        }
        let d = self.head_size;
        for h in 0..self.n_head {
            self.keys[layer * self.n_head + h].extend_from_slice(&k[h * d..(h + 1) * d]);
            self.values[layer * self.n_head + h].extend_from_slice(&v[h * d..(h + 1) * d]);
        }
        self.lens[layer] += 1;
        Ok(pos)
    }

    /// Contiguous `(keys, values)` rows of one head.
    pub fn head(&self, layer: usize, head: usize) -> (&[f32], &[f32]) {
        let i = layer * self.n_head + head;
        (&self.keys[i], &self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::dequantize;

    #[test]
    fn unit_spec_is_two_bytes() {
        assert_eq!(cache_bytes(&KvCacheSpec::UNIT).unwrap(), 2);
    }

    #[test]
    fn llama_example_bytes() {
        let spec = KvCacheSpec::LLAMA2_7B_EXAMPLE;
        let fp16 = cache_bytes(&spec).unwrap();
        assert_eq!(fp16, 274_877_906_944);
        assert_eq!(fp16, 256 << 30);
        let int8 = cache_bytes(&KvCacheSpec {
            dtype_bytes: 1,
            ..spec
        })
        .unwrap();
        assert_eq!(int8 * 2, fp16);
        let with_scales = cache_bytes_with_scales(&spec, 4).unwrap();
        assert_eq!(with_scales, 137_438_953_472 + 4_294_967_296);
        assert_eq!(with_scales, 141_733_920_768);
        assert_eq!(with_scales as f64 / fp16 as f64, 0.515625);
    }

    #[test]
    fn scales_on_unit_spec() {
        let spec = KvCacheSpec::UNIT;
        assert_eq!(cache_bytes_with_scales(&spec, 4).unwrap(), 10);
        assert!(cache_bytes_with_scales(&spec, 0).is_err());
    }

    #[test]
    fn scale_overhead_fraction() {
        let spec = KvCacheSpec::LLAMA2_7B_EXAMPLE;
        let payload = cache_bytes(&KvCacheSpec {
            dtype_bytes: 1,
            ..spec
        })
        .unwrap();
        let overhead = cache_bytes_with_scales(&spec, 4).unwrap() - payload;
        // scale bytes per slice over payload bytes per slice
        assert_eq!(overhead as f64 / payload as f64, 4.0 / 128.0);
    }

    #[test]
    fn planner_overflow_and_validation() {
        let spec = KvCacheSpec {
            batch: u64::MAX / 2,
            ..KvCacheSpec::LLAMA2_7B_EXAMPLE
        };
        assert_eq!(
            cache_bytes(&spec),
            Err(Error::Overflow("kv cache slice count"))
        );
        let bad = KvCacheSpec {
            layers: 0,
            ..KvCacheSpec::UNIT
        };
        assert!(matches!(cache_bytes(&bad), Err(Error::Config(_))));
    }

    fn heads(rng: &mut SplitMix64, n: usize, d: usize) -> Tensor {
        Tensor::random(&[n, d], rng, 2.0)
    }

    #[test]
    fn append_then_read_within_bound() {
        let mut rng = SplitMix64::new(50);
        let mut cache = Int8KvCache::new(2, 1, 3, 8, 4).unwrap();
        let mut kept = Vec::new();
        for _ in 0..4 {
            let (k, v) = (heads(&mut rng, 3, 8), heads(&mut rng, 3, 8));
            for layer in 0..2 {
                cache.append_token(layer, 0, &k, &v).unwrap();
            }
            kept.push((k, v));
        }
        assert_eq!(cache.len(0), 4);
        assert_eq!(cache.scale_count(1, 0).unwrap(), 4 * 3);
        for h in 0..3 {
            let view = cache.read_head(1, 0, h, 4).unwrap();
            let (kd, vd) = (dequantize(view.keys), dequantize(view.values));
            for (t, (k, v)) in kept.iter().enumerate() {
                for (orig, got) in [(k, &kd), (v, &vd)] {
                    let src = orig.row(h);
                    let absmax = src.iter().fold(0.0f32, |m, x| m.max(x.abs()));
                    for (a, b) in src.iter().zip(got.row(t)) {
                        assert!((a - b).abs() <= absmax / 254.0);
                    }
                }
            }
        }
        assert_eq!(cache.read_head(0, 0, 0, 0).unwrap().keys.rows(), 0);
    }

    #[test]
    fn per_head_scales_isolate_ranges() {
        let mut rng = SplitMix64::new(51);
        let mut k = Tensor::zeros(&[2, 16]);
        rng.fill_uniform(k.row_mut(0), 0.01);
        k.row_mut(0)[0] = 0.01;
        rng.fill_uniform(k.row_mut(1), 100.0);
        k.row_mut(1)[0] = 100.0;
        let mut cache = Int8KvCache::new(1, 1, 2, 16, 1).unwrap();
        cache.append_token(0, 0, &k, &k).unwrap();
        let h0 = cache.read_head(0, 0, 0, 1).unwrap().keys;
        let h1 = cache.read_head(0, 0, 1, 1).unwrap().keys;
        let ratio = h1.row(0).1 / h0.row(0).1;
        assert!((ratio - 1e4).abs() / 1e4 < 1e-4);
        // relative to the head's own range, head 0 keeps 1% precision
        let d0 = dequantize(h0);
        for (a, b) in k.row(0).iter().zip(d0.row(0)) {
            assert!((a - b).abs() / 0.01 < 0.01);
        }
    }

    #[test]
    fn full_cache_rejects_and_is_unchanged() {
        let mut rng = SplitMix64::new(52);
        let mut cache = Int8KvCache::new(1, 1, 2, 4, 1).unwrap();
        let (k, v) = (heads(&mut rng, 2, 4), heads(&mut rng, 2, 4));
        cache.append_token(0, 0, &k, &v).unwrap();
        let before = dequantize(cache.read_head(0, 0, 1, 1).unwrap().keys);
        assert!(matches!(
            cache.append_token(0, 0, &k, &v),
            Err(Error::Capacity { .. })
        ));
        assert_eq!(cache.len(0), 1);
        assert_eq!(
            dequantize(cache.read_head(0, 0, 1, 1).unwrap().keys),
            before
        );
        assert!(matches!(
            cache.append_token(3, 0, &k, &v),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn views_are_stable_across_appends() {
        let mut rng = SplitMix64::new(53);
        let mut cache = Int8KvCache::new(1, 1, 2, 4, 8).unwrap();
        for _ in 0..3 {
            cache
                .append_token(0, 0, &heads(&mut rng, 2, 4), &heads(&mut rng, 2, 4))
                .unwrap();
        }
        let view = cache.read_head(0, 0, 1, 3).unwrap();
        let snapshot = (view.keys.to_owned(), view.values.to_owned());
        let ptr = view.keys.payload_ptr();
        for _ in 0..5 {
            cache
                .append_token(0, 0, &heads(&mut rng, 2, 4), &heads(&mut rng, 2, 4))
                .unwrap();
        }
        let again = cache.read_head(0, 0, 1, 3).unwrap();
        assert_eq!(again.keys.to_owned(), snapshot.0);
        assert_eq!(again.values.to_owned(), snapshot.1);
        // reserved storage: no reallocation, so the payload did not move
        assert_eq!(again.keys.payload_ptr(), ptr);
        assert!(cache.read_head(0, 0, 2, 1).is_err());
        assert!(cache.read_head(0, 0, 0, 9).is_err());
    }

    #[test]
    fn layers_cannot_run_ahead() {
        let mut rng = SplitMix64::new(54);
        let mut cache = Int8KvCache::new(2, 1, 1, 4, 4).unwrap();
        let (k, v) = (heads(&mut rng, 1, 4), heads(&mut rng, 1, 4));
        assert!(cache.append_token(1, 0, &k, &v).is_err());
        cache.append_token(0, 0, &k, &v).unwrap();
        cache.append_token(0, 0, &k, &v).unwrap();
        assert_eq!(cache.append_token(1, 0, &k, &v).unwrap(), 0);
        assert_eq!(cache.append_token(1, 0, &k, &v).unwrap(), 1);
        assert!(cache.append_token(1, 0, &k, &v).is_err());
    }

    #[test]
    fn f32_cache_basic() {
        let mut cache = F32KvCache::new(1, 2, 2, 2).unwrap();
        cache
            .append_token_slices(0, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let (k, v) = cache.head(0, 1);
        assert_eq!(k, &[3.0, 4.0]);
        assert_eq!(v, &[7.0, 8.0]);
        cache.append_token_slices(0, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(matches!(
            cache.append_token_slices(0, &[0.0; 4], &[0.0; 4]),
            Err(Error::Capacity { .. })
        ));
    }
}
