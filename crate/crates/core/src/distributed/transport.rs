//! In-process message fabric with exact byte and copy accounting.
//!
//! Every pair of workers has a FIFO channel. Collectives are built from
//! point-to-point sends, and each send is charged to the sending worker
//! under the collective it belongs to. Reductions run at worker 0 in
//! ascending worker order, so results are bit-stable for a given worker
//! count.
//!
//! Reduction inputs live in per-worker output slots. A producer either
//! writes straight into a slot obtained from
//! [`Transport::register_output_buffer`] (zero-copy), or computes into its
//! own buffer and hands it over with [`Transport::stage`], which is counted
//! as one copy.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::topk::{TokenId, TopKEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Collective {
    /// Token ids from the root to every worker.
    TokenBroadcast,
    /// Baseline: embedding rows from the root to every worker.
    EmbeddingBroadcast,
    /// Partial-sum reduction after a row-parallel projection.
    AllReduce,
    /// Per-worker top-k lists gathered at the root.
    TopKGather,
    /// Baseline: full-vocabulary logits reduced across workers.
    LogitAllReduce,
}

impl Collective {
    pub const ALL: [Collective; 5] = [
        Collective::TokenBroadcast,
        Collective::EmbeddingBroadcast,
        Collective::AllReduce,
        Collective::TopKGather,
        Collective::LogitAllReduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Collective::TokenBroadcast => "token_broadcast",
            Collective::EmbeddingBroadcast => "embedding_broadcast",
            Collective::AllReduce => "allreduce",
            Collective::TopKGather => "topk_gather",
            Collective::LogitAllReduce => "logit_allreduce",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tokens(Vec<TokenId>),
    Floats(Vec<f32>),
    TopK(Vec<TopKEntry>),
}

impl Payload {
    /// Length header preceding a top-k list.
    pub const TOPK_HEADER_BYTES: usize = 8;

    pub fn wire_bytes(&self) -> usize {
        match self {
            Payload::Tokens(t) => 4 * t.len(),
            Payload::Floats(x) => 4 * x.len(),
            Payload::TopK(e) => Self::TOPK_HEADER_BYTES + TopKEntry::WIRE_BYTES * e.len(),
        }
    }
}

#[derive(Debug, Clone)]
struct Message {
    collective: Collective,
    payload: Payload,
}

/// One CSV row of per-step accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricRow {
    pub step: u64,
    pub worker: usize,
    pub collective: Collective,
    pub bytes: u64,
    pub copy_count: u64,
}

/// Counters of one completed step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepMetrics {
    pub step: u64,
    pub rows: Vec<MetricRow>,
}

impl StepMetrics {
    pub fn bytes(&self, collective: Collective) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.collective == collective)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn bytes_of(&self, worker: usize, collective: Collective) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.worker == worker && r.collective == collective)
            .map(|r| r.bytes)
            .sum()
    }

    /// Largest per-worker byte count for `collective`.
    pub fn max_worker_bytes(&self, collective: Collective) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.collective == collective)
            .map(|r| r.bytes)
            .max()
            .unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes).sum()
    }

    pub fn copy_count(&self) -> u64 {
        self.rows.iter().map(|r| r.copy_count).sum()
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    buf: Vec<f32>,
    in_flight: bool,
}

#[derive(Debug)]
pub struct Transport {
    n_workers: usize,
    channels: Vec<VecDeque<Message>>,
    bytes: Vec<[u64; 5]>,
    copies: Vec<[u64; 5]>,
    used: Vec<[bool; 5]>,
    slots: Vec<Vec<Slot>>,
    step: u64,
    closed: bool,
}

impl Transport {
    pub fn new(n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("transport needs at least one worker".into()));
        }
        Ok(Self {
            n_workers,
            channels: (0..n_workers * n_workers)
                .map(|_| VecDeque::new())
                .collect(),
            bytes: vec![[0; 5]; n_workers],
            copies: vec![[0; 5]; n_workers],
            used: vec![[false; 5]; n_workers],
            slots: vec![Vec::new(); n_workers],
            step: 0,
            closed: false,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    fn check_open(&self) -> Result<()> {
        if self.closed {
            return Err(Error::Transport("transport is closed".into()));
        }
        Ok(())
    }

    fn check_worker(&self, w: usize) -> Result<()> {
        if w >= self.n_workers {
            return Err(Error::Range {
                what: "worker",
                index: w,
                bound: self.n_workers,
            });
        }
        Ok(())
    }

    /// Point-to-point send, charged to `from`.
    pub fn send(
        &mut self,
        from: usize,
        to: usize,
        collective: Collective,
        payload: Payload,
    ) -> Result<()> {
        self.check_open()?;
        self.check_worker(from)?;
        self.check_worker(to)?;
        self.bytes[from][collective.index()] += payload.wire_bytes() as u64;
        self.used[from][collective.index()] = true;
        self.channels[from * self.n_workers + to].push_back(Message {
            collective,
            payload,
        });
        Ok(())
    }

    pub fn recv(&mut self, to: usize, from: usize, collective: Collective) -> Result<Payload> {
        self.check_open()?;
        self.check_worker(from)?;
        self.check_worker(to)?;
        self.used[to][collective.index()] = true;
        let msg = self.channels[from * self.n_workers + to]
            .pop_front()
            .ok_or_else(|| {
                Error::Protocol(alloc::format!("worker {to}: no message from worker {from}"))
            })?;
        if msg.collective != collective {
            return Err(Error::Protocol(alloc::format!(
                "worker {to} expected {} from worker {from}, got {}",
                collective.name(),
                msg.collective.name()
            )));
        }
        Ok(msg.payload)
    }

    /// Sends `tokens` from `root` to all workers; returns what each worker
    /// holds afterwards.
    pub fn broadcast_tokens(
        &mut self,
        root: usize,
        tokens: &[TokenId],
    ) -> Result<Vec<Vec<TokenId>>> {
        self.check_open()?;
        self.check_worker(root)?;
        for w in (0..self.n_workers).filter(|&w| w != root) {
            self.send(
                root,
                w,
                Collective::TokenBroadcast,
                Payload::Tokens(tokens.to_vec()),
            )?;
        }
        (0..self.n_workers)
            .map(|w| {
                if w == root {
                    return Ok(tokens.to_vec());
                }
                match self.recv(w, root, Collective::TokenBroadcast)? {
                    Payload::Tokens(t) => Ok(t),
                    _ => Err(Error::Protocol(
                        "token broadcast carried a non-token payload".into(),
                    )),
                }
            })
            .collect()
    }

    pub fn broadcast_token(&mut self, root: usize, token: TokenId) -> Result<Vec<TokenId>> {
        Ok(self
            .broadcast_tokens(root, &[token])?
            .into_iter()
            .map(|t| t[0])
            .collect())
    }

    /// Baseline broadcast of float rows (e.g. looked-up embeddings).
    pub fn broadcast_floats(
        &mut self,
        root: usize,
        collective: Collective,
        data: &[f32],
    ) -> Result<Vec<Vec<f32>>> {
        self.check_open()?;
        self.check_worker(root)?;
        for w in (0..self.n_workers).filter(|&w| w != root) {
            self.send(root, w, collective, Payload::Floats(data.to_vec()))?;
        }
        (0..self.n_workers)
            .map(|w| {
                if w == root {
                    return Ok(data.to_vec());
                }
                match self.recv(w, root, collective)? {
                    Payload::Floats(x) => Ok(x),
                    _ => Err(Error::Protocol(
                        "float broadcast carried another payload".into(),
                    )),
                }
            })
            .collect()
    }

    /// Elementwise sum of one tensor per worker, reduced at worker 0 in
    /// worker order and replicated back.
    pub fn allreduce_sum(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.allreduce_sum_as(Collective::AllReduce, inputs)
    }

    pub fn allreduce_sum_as(
        &mut self,
        collective: Collective,
        inputs: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        self.check_open()?;
        if inputs.len() != self.n_workers {
            return Err(Error::Protocol(alloc::format!(
                "allreduce expects {} inputs, got {}",
                self.n_workers,
                inputs.len()
            )));
        }
        let shape = inputs[0].shape();
        if let Some(w) = inputs.iter().position(|t| t.shape() != shape) {
            return Err(Error::Protocol(alloc::format!(
                "allreduce shape mismatch: worker 0 has {:?}, worker {w} has {:?}",
                shape,
                inputs[w].shape()
            )));
        }
        let slices: Vec<&[f32]> = inputs.iter().map(|t| t.data()).collect();
        let out = self.reduce_replicate(collective, &slices)?;
        out.into_iter()
            .map(|d| Tensor::new(shape.to_vec(), d))
            .collect()
    }

    fn reduce_replicate(
        &mut self,
        collective: Collective,
        inputs: &[&[f32]],
    ) -> Result<Vec<Vec<f32>>> {
        for (w, x) in inputs.iter().enumerate().skip(1) {
            self.send(w, 0, collective, Payload::Floats(x.to_vec()))?;
        }
        let mut acc = inputs[0].to_vec();
        for w in 1..self.n_workers {
            match self.recv(0, w, collective)? {
                Payload::Floats(x) if x.len() == acc.len() => {
                    for (a, b) in acc.iter_mut().zip(&x) {
                        *a += b;
                    }
                }
                _ => {
                    return Err(Error::Protocol(alloc::format!(
                        "allreduce: bad contribution from worker {w}"
                    )))
                }
            }
        }
        for w in 1..self.n_workers {
            self.send(0, w, collective, Payload::Floats(acc.clone()))?;
        }
        let mut out = Vec::with_capacity(self.n_workers);
        out.push(acc);
        for w in 1..self.n_workers {
            match self.recv(w, 0, collective)? {
                Payload::Floats(x) => out.push(x),
                _ => return Err(Error::Protocol("allreduce: bad result payload".into())),
            }
        }
        Ok(out)
    }

    fn slot_mut(&mut self, worker: usize, slot: usize) -> Result<&mut Slot> {
        self.check_worker(worker)?;
        let slots = &mut self.slots[worker];
        if slots.len() <= slot {
            slots.resize_with(slot + 1, Slot::default);
        }
        Ok(&mut slots[slot])
    }

    /// Hands out the communication region of `(worker, slot)` for the
    /// producer to write its result into. The slot stays in flight until the
    /// next [`allreduce_slot`](Self::allreduce_slot).
    pub fn register_output_buffer(
        &mut self,
        worker: usize,
        slot: usize,
        len: usize,
    ) -> Result<&mut [f32]> {
        self.check_open()?;
        let s = self.slot_mut(worker, slot)?;
        if s.in_flight {
            return Err(Error::Contention { worker, slot });
        }
        s.in_flight = true;
        s.buf.resize(len, 0.0);
        Ok(&mut s.buf[..])
    }

    /// Copies `src` into `(worker, slot)`; counted as one staging copy.
    pub fn stage(&mut self, worker: usize, slot: usize, src: &[f32]) -> Result<()> {
        let region = self.register_output_buffer(worker, slot, src.len())?;
        region.copy_from_slice(src);
        self.copies[worker][Collective::AllReduce.index()] += 1;
        Ok(())
    }

    pub fn slot_in_flight(&self, worker: usize, slot: usize) -> bool {
        self.slots
            .get(worker)
            .and_then(|s| s.get(slot))
            .is_some_and(|s| s.in_flight)
    }

    /// All-reduce of every worker's registered `slot`; releases the slots
    /// and returns each worker's copy of the sum.
    pub fn allreduce_slot(&mut self, slot: usize) -> Result<Vec<Vec<f32>>> {
        self.check_open()?;
        let mut len = None;
        for w in 0..self.n_workers {
            let s = self.slots[w]
                .get(slot)
                .filter(|s| s.in_flight)
                .ok_or_else(|| {
                    Error::Protocol(alloc::format!("worker {w} has not filled slot {slot}"))
                })?;
            match len {
                None => len = Some(s.buf.len()),
                Some(l) if l != s.buf.len() => {
                    return Err(Error::Protocol(alloc::format!(
                        "allreduce shape mismatch: worker 0 has [{l}], worker {w} has [{}]",
                        s.buf.len()
                    )))
                }
                _ => {}
            }
        }
        let bufs: Vec<Vec<f32>> = (0..self.n_workers)
            .map(|w| core::mem::take(&mut self.slots[w][slot].buf))
            .collect();
        let views: Vec<&[f32]> = bufs.iter().map(|b| b.as_slice()).collect();
        let out = self.reduce_replicate(Collective::AllReduce, &views);
        for (w, b) in bufs.into_iter().enumerate() {
            let s = &mut self.slots[w][slot];
            s.buf = b;
            s.in_flight = false;
        }
        out
    }

    /// Gathers one top-k list per worker at `root`.
    pub fn gather_topk(
        &mut self,
        root: usize,
        lists: Vec<Vec<TopKEntry>>,
    ) -> Result<Vec<Vec<TopKEntry>>> {
        self.check_open()?;
        self.check_worker(root)?;
        if lists.len() != self.n_workers {
            return Err(Error::Protocol(alloc::format!(
                "gather expects {} lists, got {}",
                self.n_workers,
                lists.len()
            )));
        }
        let mut out: Vec<Vec<TopKEntry>> = vec![Vec::new(); self.n_workers];
        for (w, list) in lists.into_iter().enumerate() {
            if w == root {
                out[w] = list;
            } else {
                self.send(w, root, Collective::TopKGather, Payload::TopK(list))?;
            }
        }
        for w in (0..self.n_workers).filter(|&w| w != root) {
            match self.recv(root, w, Collective::TopKGather)? {
                Payload::TopK(l) => out[w] = l,
                _ => return Err(Error::Protocol("gather carried a non-top-k payload".into())),
            }
        }
        Ok(out)
    }

    /// Snapshot of the counters since the last call, then reset.
    pub fn end_step(&mut self) -> StepMetrics {
        let mut rows = Vec::new();
        for w in 0..self.n_workers {
            for c in Collective::ALL {
                let i = c.index();
                if self.used[w][i] || self.bytes[w][i] > 0 || self.copies[w][i] > 0 {
                    rows.push(MetricRow {
                        step: self.step,
                        worker: w,
                        collective: c,
                        bytes: self.bytes[w][i],
                        copy_count: self.copies[w][i],
                    });
                }
            }
        }
        self.bytes.iter_mut().for_each(|b| *b = [0; 5]);
        self.copies.iter_mut().for_each(|b| *b = [0; 5]);
        self.used.iter_mut().for_each(|b| *b = [false; 5]);
        let metrics = StepMetrics {
            step: self.step,
            rows,
        };
        self.step += 1;
        metrics
    }

    /// Messages sent but not yet received.
    pub fn pending(&self) -> usize {
        self.channels.iter().map(|c| c.len()).sum()
    }
}

/// Fails with the ids of the first pair of workers whose replicated values
/// differ bitwise.
pub fn check_replicated(what: &str, values: &[&[f32]]) -> Result<()> {
    let Some(first) = values.first() else {
        return Ok(());
    };
    for (w, v) in values.iter().enumerate().skip(1) {
        let same = v.len() == first.len()
            && v.iter()
                .zip(first.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            let mut msg = String::from(what);
            msg.push_str(&alloc::format!(": workers 0 and {w} diverged"));
            return Err(Error::Protocol(msg));
        }
    }
    Ok(())
}
