//! Sharded parameter server.
//!
//! Each of the N nodes is both a client holding a full replica and a server
//! owning one contiguous slice of the flattened parameter vector. Clients
//! push compressed gradients to every shard; shards answer pulls with
//! compressed deltas against the copy they last sent that client.

mod client;
mod shard;

use std::ops::Range;

use crate::compress::{
    extract_survivors_piecewise, fold_quantization_error, select_threshold, ColumnMap, DenseFrame, DropConfig,
    QuantContext, QuantizedUpdate, SparseUpdate, ThresholdScope,
};
use crate::data::split_ranges;
use crate::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::model::ParamLayout;

pub use client::{ClientState, PushOutcome};
pub use shard::ShardState;

/// Partition of the flat parameter index space into contiguous shards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    boundaries: Vec<usize>,
}

impl ShardMap {
    /// Near-equal contiguous ranges; the first `total % n` shards get one
    /// extra element.
    pub fn partition(total_params: usize, n: usize) -> Result<Self> {
        if n == 0 || n > total_params {
            return Err(invalid(format!(
                "cannot split {total_params} parameters into {n} shards"
            )));
        }
        let mut boundaries = vec![0];
        boundaries.extend(split_ranges(total_params, n).iter().map(|r| r.end));
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn range(&self, shard: usize) -> Range<usize> {
        self.boundaries[shard]..self.boundaries[shard + 1]
    }

    pub fn shard_len(&self, shard: usize) -> usize {
        self.range(shard).len()
    }
}

/// Everything about the parameter space that every node agrees on.
#[derive(Debug, Clone)]
pub struct Topology {
    pub layout: ParamLayout,
    pub shards: ShardMap,
    /// Column layout of each shard, for column-wise quantization.
    pub columns: Vec<ColumnMap>,
}

impl Topology {
    pub fn new(layout: ParamLayout, nodes: usize) -> Result<Self> {
        let shards = ShardMap::partition(layout.total(), nodes)?;
        let columns = (0..nodes)
            .map(|k| column_map_for_range(&layout, shards.range(k)))
            .collect::<Result<_>>()?;
        Ok(Self {
            layout,
            shards,
            columns,
        })
    }

    pub fn nodes(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_id(shard: usize) -> String {
        format!("shard:{shard}")
    }

    /// Pieces of each tensor that fall inside `range`, in shard-local
    /// coordinates, with the tensor's index in the layout.
    pub fn tensor_pieces(&self, range: Range<usize>) -> Vec<(usize, Range<usize>)> {
        tensor_pieces(&self.layout, range)
    }
}

fn tensor_pieces(layout: &ParamLayout, range: Range<usize>) -> Vec<(usize, Range<usize>)> {
    layout
        .slots()
        .iter()
        .enumerate()
        .filter_map(|(t, slot)| {
            let r = slot.range();
            let lo = r.start.max(range.start);
            let hi = r.end.min(range.end);
            (lo < hi).then(|| (t, lo - range.start..hi - range.start))
        })
        .collect()
}

/// Column slots for a slice of the flat parameter space; each tensor piece
/// keeps its own columns.
pub fn column_map_for_range(layout: &ParamLayout, range: Range<usize>) -> Result<ColumnMap> {
    let start = range.start;
    ColumnMap::from_pieces(tensor_pieces(layout, range).into_iter().map(|(t, local)| {
        let slot = &layout.slots()[t];
        let cols = slot.columns();
        (local.len(), cols, (local.start + start - slot.offset) % cols)
    }))
}

/// Wire encoding chosen for a direction of traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Dense,
    Sparse,
    Quantized,
}

impl PayloadKind {
    pub fn for_config(config: &DropConfig) -> Self {
        if config.is_lossless() {
            PayloadKind::Dense
        } else if config.quantization.is_some() {
            PayloadKind::Quantized
        } else {
            PayloadKind::Sparse
        }
    }
}

/// Contents of a push or pull response.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Uncompressed values: raw gradients on push, absolute parameters on pull.
    Dense(DenseFrame),
    Sparse(SparseUpdate),
    Quantized(QuantizedUpdate),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Dense(_) => PayloadKind::Dense,
            Payload::Sparse(_) => PayloadKind::Sparse,
            Payload::Quantized(_) => PayloadKind::Quantized,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::Dense(f) => f.encode(),
            Payload::Sparse(u) => u.encode(),
            Payload::Quantized(q) => q.encode(),
        }
    }

    pub fn decode(bytes: &[u8], kind: PayloadKind) -> Result<Self> {
        Ok(match kind {
            PayloadKind::Dense => Payload::Dense(DenseFrame::decode(bytes)?),
            PayloadKind::Sparse => Payload::Sparse(SparseUpdate::decode(bytes)?),
            PayloadKind::Quantized => Payload::Quantized(QuantizedUpdate::decode(bytes)?),
        })
    }

    /// Bytes after the frame header.
    pub fn payload_len(&self) -> usize {
        match self {
            Payload::Dense(f) => f.payload_len(),
            Payload::Sparse(u) => u.payload_len(),
            Payload::Quantized(q) => q.payload_len(),
        }
    }

    /// Number of values carried.
    pub fn entries(&self) -> usize {
        match self {
            Payload::Dense(f) => f.values.len(),
            Payload::Sparse(u) => u.len(),
            Payload::Quantized(q) => q.len(),
        }
    }
}

/// Drops each buffer in `parts` in place and returns what to send for it.
///
/// `ranges` gives each buffer's position in the flat parameter space. Under
/// global scope one threshold is chosen over all buffers together; under
/// local scope every tensor gets its own threshold over the pieces of it
/// that the buffers contain. The second return value lists, per buffer, the
/// thresholds that applied to it.
pub(crate) fn drop_parts(
    topology: &Topology,
    ids: &[String],
    parts: &mut [&mut [f32]],
    ranges: &[Range<usize>],
    columns: &[&ColumnMap],
    config: &DropConfig,
    seed: u64,
) -> Result<(Vec<Payload>, Vec<Vec<f32>>)> {
    let pieces: Vec<Vec<(Range<usize>, f32)>> = match config.scope {
        ThresholdScope::Global => {
            let views: Vec<&[f32]> = parts.iter().map(|p| &**p).collect();
            let t = select_threshold(&views, config, seed)?;
            parts.iter().map(|p| vec![(0..p.len(), t)]).collect()
        }
        ThresholdScope::Local => {
            let per_part: Vec<Vec<(usize, Range<usize>)>> =
                ranges.iter().map(|r| topology.tensor_pieces(r.clone())).collect();
            let mut thresholds = std::collections::BTreeMap::new();
            for t in 0..topology.layout.slots().len() {
                let views: Vec<&[f32]> = per_part
                    .iter()
                    .zip(parts.iter())
                    .flat_map(|(pp, buf)| pp.iter().filter(|(pt, _)| *pt == t).map(|(_, r)| &buf[r.clone()]))
                    .collect();
                if !views.is_empty() {
                    thresholds.insert(t, select_threshold(&views, config, derive_seed(&[seed, t as u64]))?);
                }
            }
            per_part
                .into_iter()
                .map(|pp| pp.into_iter().map(|(t, r)| (r, thresholds[&t])).collect())
                .collect()
        }
    };
    let mut payloads = Vec::with_capacity(parts.len());
    let mut used = Vec::with_capacity(parts.len());
    for (k, buf) in parts.iter_mut().enumerate() {
        let update = extract_survivors_piecewise(&ids[k], buf, &pieces[k]);
        let payload = match config.quantization {
            None => Payload::Sparse(update),
            Some(mode) => {
                let threshold = quant_center(&pieces[k], &update);
                let ctx = QuantContext {
                    threshold,
                    columns: Some(columns[k]),
                };
                Payload::Quantized(fold_quantization_error(&update, buf, mode, &ctx)?)
            }
        };
        payloads.push(payload);
        used.push(pieces[k].iter().map(|(_, t)| *t).collect());
    }
    Ok((payloads, used))
}

/// Magnitude sent for every survivor in threshold mode: the smallest positive
/// threshold that applied, or the smallest surviving magnitude when every
/// threshold was zero.
fn quant_center(pieces: &[(Range<usize>, f32)], update: &SparseUpdate) -> f32 {
    let positive = pieces
        .iter()
        .map(|(_, t)| *t)
        .filter(|t| *t > 0.0)
        .fold(f32::INFINITY, f32::min);
    if positive.is_finite() {
        return positive;
    }
    update.values().iter().map(|v| v.abs()).fold(f32::INFINITY, f32::min)
}

pub(crate) fn protocol(msg: impl Into<String>) -> Error {
    Error::Protocol(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_and_remainder_splits() {
        assert_eq!(ShardMap::partition(100, 4).unwrap().boundaries(), &[0, 25, 50, 75, 100]);
        let m = ShardMap::partition(10, 3).unwrap();
        let sizes: Vec<usize> = (0..3).map(|k| m.shard_len(k)).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(ShardMap::partition(7, 1).unwrap().boundaries(), &[0, 7]);
        assert!(ShardMap::partition(3, 4).is_err());
        assert!(ShardMap::partition(3, 0).is_err());
    }

    #[test]
    fn shard_columns_follow_tensors() {
        let layout = ParamLayout::new(vec![("w".into(), vec![2, 3]), ("b".into(), vec![2])]);
        let topo = Topology::new(layout, 2).unwrap();
        // shard 0: w[0..4]; shard 1: w[4..6] then b
        assert_eq!(topo.shards.boundaries(), &[0, 4, 8]);
        let slots0: Vec<usize> = (0..4).map(|i| topo.columns[0].slot(i)).collect();
        assert_eq!(slots0, vec![0, 1, 2, 0]);
        let slots1: Vec<usize> = (0..4).map(|i| topo.columns[1].slot(i)).collect();
        assert_eq!(slots1, vec![1, 2, 3, 3]);
        assert_eq!(topo.tensor_pieces(4..8), vec![(0, 0..2), (1, 2..4)]);
    }
}
