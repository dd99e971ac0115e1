use std::collections::BTreeMap;
use std::sync::Arc;

use crate::compress::{dequantize, DenseFrame, DropConfig, ResidualStore};
use crate::error::Result;
use crate::model::{AdaGrad, AdaGradState};

use super::client::check_len;
use super::{drop_parts, protocol, Payload, Topology};

/// The server side of a node: one parameter shard, its optimizer state, and
/// what each client was last sent.
#[derive(Debug, Clone)]
pub struct ShardState {
    shard: usize,
    topology: Arc<Topology>,
    params: Vec<f32>,
    optimizer: AdaGradState,
    last_pulled: BTreeMap<usize, Vec<f32>>,
    pull_residuals: ResidualStore,
    config: DropConfig,
}

impl ShardState {
    /// `initial` is the full initial parameter vector every client starts from.
    pub fn new(
        shard: usize,
        topology: Arc<Topology>,
        initial: &[f32],
        optimizer: AdaGrad,
        pull_config: DropConfig,
    ) -> Result<Self> {
        pull_config.validate()?;
        if shard >= topology.nodes() || initial.len() != topology.shards.total() {
            return Err(crate::error::invalid(format!(
                "shard {shard} with {} initial values does not fit the topology",
                initial.len()
            )));
        }
        let range = topology.shards.range(shard);
        Ok(Self {
            shard,
            params: initial[range.clone()].to_vec(),
            optimizer: AdaGradState::new(range.len(), optimizer),
            topology,
            last_pulled: BTreeMap::new(),
            pull_residuals: ResidualStore::new(),
            config: pull_config,
        })
    }

    pub fn shard(&self) -> usize {
        self.shard
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn accumulators(&self) -> &[f32] {
        self.optimizer.accumulators()
    }

    pub fn last_pulled(&self, client: usize) -> Option<&[f32]> {
        self.last_pulled.get(&client).map(Vec::as_slice)
    }

    /// Delta entries held back from the most recent pull of each client.
    pub fn pull_residuals(&self) -> &ResidualStore {
        &self.pull_residuals
    }

    /// Starts tracking `client`, whose copy of this shard is `known`.
    pub fn register_client(&mut self, client: usize, known: &[f32]) -> Result<()> {
        check_len(known.len() as u32, self.params.len(), self.shard)?;
        self.last_pulled.insert(client, known.to_vec());
        Ok(())
    }

    /// Applies a pushed gradient with AdaGrad. A malformed push is rejected
    /// without touching the shard.
    pub fn apply_push(&mut self, payload: &Payload) -> Result<()> {
        let len = self.params.len();
        match payload {
            Payload::Dense(frame) => {
                check_len(frame.values.len() as u32, len, self.shard)?;
                self.optimizer.apply_dense(&mut self.params, &frame.values)
            }
            Payload::Sparse(u) => {
                check_len(u.total_length(), len, self.shard)?;
                self.optimizer.apply_sparse(&mut self.params, u)
            }
            Payload::Quantized(q) => {
                check_len(q.total_length, len, self.shard)?;
                let u = dequantize(q, Some(&self.topology.columns[self.shard]))?;
                self.optimizer.apply_sparse(&mut self.params, &u)
            }
        }
    }

    /// Answers a pull from `client` with the change since its last pull,
    /// compressed like a push, and records what the client now holds.
    pub fn handle_pull(&mut self, client: usize, seed: u64) -> Result<Payload> {
        let shard = self.shard;
        let last = self
            .last_pulled
            .get_mut(&client)
            .ok_or_else(|| protocol(format!("client {client} is not registered with shard {shard}")))?;
        if self.config.is_lossless() {
            last.copy_from_slice(&self.params);
            return Ok(Payload::Dense(DenseFrame::new(
                Topology::shard_id(shard),
                self.params.clone(),
            )));
        }
        let id = format!("pull:{client}");
        let delta = self.pull_residuals.entry(&id, self.params.len())?;
        for ((d, p), l) in delta.iter_mut().zip(&self.params).zip(last.iter()) {
            *d = p - l;
        }
        let topo = &self.topology;
        let range = topo.shards.range(shard);
        let (mut payloads, _) = drop_parts(
            topo,
            &[Topology::shard_id(shard)],
            &mut [delta.as_mut_slice()],
            &[range],
            &[&topo.columns[shard]],
            &self.config,
            seed,
        )?;
        let payload = payloads.pop().expect("one payload per part");
        let sent = match &payload {
            Payload::Sparse(u) => u.clone(),
            Payload::Quantized(q) => dequantize(q, Some(&topo.columns[shard]))?,
            Payload::Dense(_) => unreachable!("compressed pulls are never dense"),
        };
        for (i, v) in sent.entries() {
            last[i as usize] += v;
        }
        Ok(payload)
    }
}
