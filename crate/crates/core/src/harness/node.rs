use std::sync::Arc;

use crate::data::{epoch_order, Dataset};
use crate::derive_seed;
use crate::error::Result;
use crate::model::Mlp;
use crate::net::{Envelope, MessageKind, Outbox, Process};
use crate::server::{ClientState, Payload, PayloadKind, ShardState, Topology};

pub(crate) const TAG_INIT: u64 = 0x494e_4954;
pub(crate) const TAG_PUSH: u64 = 0x5055_5348;
pub(crate) const TAG_PULL: u64 = 0x5055_4c4c;
pub(crate) const TAG_SCHED: u64 = 0x5343_4844;

/// Counters a node accumulates for the metrics stream.
#[derive(Debug, Clone, Default)]
pub(crate) struct NodeCounters {
    pub loss_sum: f64,
    pub loss_count: u64,
    /// Entries carried by pushes, and the entries those pushes covered.
    pub push_entries: u64,
    pub push_coverage: u64,
    /// Uncompressed size of every push and pull response sent.
    pub dense_equivalent: u64,
    /// Frame payload bytes of pushes and of pull responses sent.
    pub push_payload: u64,
    pub pull_payload: u64,
    /// Per-epoch (loss sum, batches).
    pub epoch_loss: Vec<(f64, u64)>,
}

/// Iterates minibatches over a worker's data, reshuffling each epoch.
#[derive(Debug, Clone)]
pub(crate) struct BatchCursor {
    seed: u64,
    worker: usize,
    batch_size: usize,
    epoch: usize,
    pos: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    pub fn new(len: usize, batch_size: usize, seed: u64, worker: usize) -> Self {
        Self {
            seed,
            worker,
            batch_size,
            epoch: 0,
            pos: 0,
            order: epoch_order(len, seed, worker, 0),
        }
    }

    pub fn batches_per_epoch(len: usize, batch_size: usize) -> u64 {
        len.div_ceil(batch_size) as u64
    }

    /// Indices of the next batch and the epoch it belongs to.
    pub fn next_batch(&mut self) -> (usize, Vec<usize>) {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.order = epoch_order(self.order.len(), self.seed, self.worker, self.epoch);
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        (self.epoch, batch)
    }
}

/// One machine: a training worker with its replica, plus the server for one
/// shard.
pub(crate) struct Node<'a> {
    pub id: usize,
    pub client: ClientState,
    pub shard: ShardState,
    mlp: &'a Mlp,
    data: Dataset,
    cursor: BatchCursor,
    pub steps: u64,
    total_steps: u64,
    awaiting: usize,
    seed: u64,
    topology: Arc<Topology>,
    push_kind: PayloadKind,
    pull_kind: PayloadKind,
    pub counters: NodeCounters,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl<'a> Node<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        client: ClientState,
        shard: ShardState,
        mlp: &'a Mlp,
        data: Dataset,
        cursor: BatchCursor,
        total_steps: u64,
        seed: u64,
        topology: Arc<Topology>,
        push_kind: PayloadKind,
        pull_kind: PayloadKind,
    ) -> Self {
        Self {
            id,
            client,
            shard,
            mlp,
            data,
            cursor,
            steps: 0,
            total_steps,
            awaiting: 0,
            seed,
            topology,
            push_kind,
            pull_kind,
            counters: NodeCounters::default(),
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn envelope(&self, kind: MessageKind, shard: usize, step: u64, payload: Vec<u8>) -> Envelope {
        Envelope {
            kind,
            sender: self.id as u32,
            shard: shard as u32,
            step,
            payload,
        }
    }
}

impl Process for Node<'_> {
    fn ready(&self) -> bool {
        self.awaiting == 0 && self.steps < self.total_steps
    }

    fn done(&self) -> bool {
        self.awaiting == 0 && self.steps >= self.total_steps
    }

    fn step(&mut self) -> Result<Outbox> {
        let (epoch, batch) = self.cursor.next_batch();
        self.data.gather(&batch, &mut self.images, &mut self.labels);
        let (loss, grads) = self
            .mlp
            .loss_and_grad(self.client.replica(), &self.images, &self.labels)?;
        let step = self.steps;
        self.steps += 1;
        let c = &mut self.counters;
        c.loss_sum += loss as f64;
        c.loss_count += 1;
        if c.epoch_loss.len() <= epoch {
            c.epoch_loss.resize(epoch + 1, (0.0, 0));
        }
        c.epoch_loss[epoch].0 += loss as f64;
        c.epoch_loss[epoch].1 += 1;

        let seed = derive_seed(&[self.seed, TAG_PUSH, self.id as u64, step]);
        let push = self.client.push(grads.flat(), seed)?;
        let n = self.topology.nodes();
        let mut outbox = Vec::with_capacity(2 * n);
        for (k, payload) in push.payloads.iter().enumerate() {
            let c = &mut self.counters;
            c.push_entries += payload.entries() as u64;
            c.push_coverage += self.topology.shards.shard_len(k) as u64;
            c.dense_equivalent += 4 * self.topology.shards.shard_len(k) as u64;
            c.push_payload += payload.payload_len() as u64;
            outbox.push((k, self.envelope(MessageKind::Push, k, step, payload.encode())));
        }
        for k in 0..n {
            outbox.push((k, self.envelope(MessageKind::PullReq, k, step, Vec::new())));
        }
        self.awaiting = n;
        Ok(outbox)
    }

    fn deliver(&mut self, from: usize, envelope: Envelope) -> Result<Outbox> {
        match envelope.kind {
            MessageKind::Push => {
                let payload = Payload::decode(&envelope.payload, self.push_kind)?;
                self.shard.apply_push(&payload)?;
                Ok(Vec::new())
            }
            MessageKind::PullReq => {
                let seed = derive_seed(&[self.seed, TAG_PULL, self.id as u64, envelope.step]);
                let payload = self.shard.handle_pull(from, seed)?;
                self.counters.dense_equivalent += 4 * self.shard.params().len() as u64;
                self.counters.pull_payload += payload.payload_len() as u64;
                let reply = self.envelope(MessageKind::PullResp, self.id, envelope.step, payload.encode());
                Ok(vec![(from, reply)])
            }
            MessageKind::PullResp => {
                let payload = Payload::decode(&envelope.payload, self.pull_kind)?;
                self.client.apply_pull(envelope.shard as usize, &payload)?;
                self.awaiting = self.awaiting.saturating_sub(1);
                Ok(Vec::new())
            }
        }
    }
}
