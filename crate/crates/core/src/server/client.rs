use std::sync::Arc;

use crate::compress::{dequantize, DenseFrame, DropConfig, ResidualStore};
use crate::error::{invalid, Result};
use crate::model::ModelParams;

use super::{drop_parts, protocol, Payload, Topology};

/// Result of splitting one gradient into per-shard pushes.
#[derive(Debug, Clone, PartialEq)]
pub struct PushOutcome {
    /// One payload per shard, indexed by shard.
    pub payloads: Vec<Payload>,
    /// Thresholds applied to each shard's payload. Empty for dense pushes.
    pub thresholds: Vec<Vec<f32>>,
}

/// The worker side of a node: a full parameter replica and the push residuals.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    topology: Arc<Topology>,
    replica: ModelParams,
    residuals: ResidualStore,
    config: DropConfig,
    steps: u64,
}

impl ClientState {
    pub fn new(id: usize, topology: Arc<Topology>, initial: ModelParams, config: DropConfig) -> Result<Self> {
        config.validate()?;
        if initial.len() != topology.shards.total() {
            return Err(invalid(format!(
                "replica has {} parameters, topology {}",
                initial.len(),
                topology.shards.total()
            )));
        }
        let mut residuals = ResidualStore::new();
        for k in 0..topology.nodes() {
            residuals.entry(&Topology::shard_id(k), topology.shards.shard_len(k))?;
        }
        Ok(Self {
            id,
            topology,
            replica: initial,
            residuals,
            config,
            steps: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn replica(&self) -> &ModelParams {
        &self.replica
    }

    pub fn residuals(&self) -> &ResidualStore {
        &self.residuals
    }

    pub fn config(&self) -> &DropConfig {
        &self.config
    }

    /// Pushes made so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Splits `gradient` into one payload per shard after dropping.
    pub fn push(&mut self, gradient: &[f32], seed: u64) -> Result<PushOutcome> {
        let topo = Arc::clone(&self.topology);
        if gradient.len() != topo.shards.total() {
            return Err(invalid(format!(
                "gradient has {} entries, model {}",
                gradient.len(),
                topo.shards.total()
            )));
        }
        if let Some(g) = gradient.iter().find(|g| !g.is_finite()) {
            return Err(invalid(format!("non-finite gradient entry {g}")));
        }
        self.steps += 1;
        let n = topo.nodes();
        let ids: Vec<String> = (0..n).map(Topology::shard_id).collect();
        if self.config.is_lossless() {
            let payloads = (0..n)
                .map(|k| Payload::Dense(DenseFrame::new(ids[k].clone(), gradient[topo.shards.range(k)].to_vec())))
                .collect();
            return Ok(PushOutcome {
                payloads,
                thresholds: vec![Vec::new(); n],
            });
        }
        let ranges: Vec<_> = (0..n).map(|k| topo.shards.range(k)).collect();
        let mut buffers: Vec<Vec<f32>> = Vec::with_capacity(n);
        for (k, id) in ids.iter().enumerate() {
            let mut buf = std::mem::take(self.residuals.entry(id, ranges[k].len())?);
            for (r, g) in buf.iter_mut().zip(&gradient[ranges[k].clone()]) {
                *r += g;
            }
            buffers.push(buf);
        }
        let columns: Vec<_> = topo.columns.iter().collect();
        let mut parts: Vec<&mut [f32]> = buffers.iter_mut().map(|b| b.as_mut_slice()).collect();
        let result = drop_parts(&topo, &ids, &mut parts, &ranges, &columns, &self.config, seed);
        for (id, buf) in ids.iter().zip(buffers) {
            self.residuals.replace(id, buf);
        }
        let (payloads, thresholds) = result?;
        Ok(PushOutcome { payloads, thresholds })
    }

    /// Applies a pull response from `shard` to the replica. Dense payloads
    /// replace the slice; compressed ones are added to it.
    pub fn apply_pull(&mut self, shard: usize, payload: &Payload) -> Result<()> {
        let topo = &self.topology;
        if shard >= topo.nodes() {
            return Err(protocol(format!("pull response from unknown shard {shard}")));
        }
        let range = topo.shards.range(shard);
        let slice = &mut self.replica.flat_mut()[range.clone()];
        match payload {
            Payload::Dense(frame) => {
                if frame.values.len() != range.len() {
                    return Err(protocol(format!(
                        "dense pull of {} values for shard {shard} of length {}",
                        frame.values.len(),
                        range.len()
                    )));
                }
                slice.copy_from_slice(&frame.values);
            }
            Payload::Sparse(u) => {
                check_len(u.total_length(), range.len(), shard)?;
                for (i, v) in u.entries() {
                    slice[i as usize] += v;
                }
            }
            Payload::Quantized(q) => {
                check_len(q.total_length, range.len(), shard)?;
                let u = dequantize(q, Some(&topo.columns[shard]))?;
                for (i, v) in u.entries() {
                    slice[i as usize] += v;
                }
            }
        }
        Ok(())
    }
}

pub(super) fn check_len(total_length: u32, expected: usize, shard: usize) -> Result<()> {
    if total_length as usize != expected {
        return Err(protocol(format!(
            "update of length {total_length} sent for shard {shard} of length {expected}"
        )));
    }
    Ok(())
}
