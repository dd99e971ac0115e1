//! Sign + shared-magnitude quantization of sparse updates.
//!
//! Frame layout after the common header:
//!
//! ```text
//! u8 mode | u32 n_centers | n_centers x f32 | count x u32 index
//!   | sign bitmap (ceil(count/8) bytes, 1 = positive)
//!   | selector bitmap (two-bit mode only, 1 = upper center)
//! ```
//!
//! Bitmaps are LSB-first: entry `e` lives in bit `e % 8` of byte `e / 8`.
//! For column averaging the centers are listed for occupied columns only, in
//! ascending column-slot order; the receiver recovers the slots from the
//! indices and its own copy of the [`ColumnMap`].

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{decode_err, invalid, Result};

use super::{write_frame_header, Reader, SparseUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Every survivor becomes `sign * threshold`.
    Threshold,
    /// Mean magnitude per column.
    ColumnAvg,
    /// Mean magnitude over all survivors.
    GlobalAvg,
    /// Two centers split at the median magnitude.
    TwoBit,
}

impl QuantMode {
    pub const ALL: [QuantMode; 4] = [
        QuantMode::Threshold,
        QuantMode::ColumnAvg,
        QuantMode::GlobalAvg,
        QuantMode::TwoBit,
    ];

    fn tag(self) -> u8 {
        match self {
            QuantMode::Threshold => 0,
            QuantMode::ColumnAvg => 1,
            QuantMode::GlobalAvg => 2,
            QuantMode::TwoBit => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => QuantMode::Threshold,
            1 => QuantMode::ColumnAvg,
            2 => QuantMode::GlobalAvg,
            3 => QuantMode::TwoBit,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Threshold => "threshold",
            QuantMode::ColumnAvg => "column-avg",
            QuantMode::GlobalAvg => "global-avg",
            QuantMode::TwoBit => "two-bit",
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuantMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        QuantMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown quantization mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    start: usize,
    len: usize,
    columns: usize,
    phase: usize,
    slot_base: usize,
}

/// Maps each position of an update's index space to a column slot.
///
/// An update over a single `rows x cols` matrix uses [`ColumnMap::uniform`].
/// Updates over a slice of the flattened parameter space cover pieces of
/// several tensors; each piece keeps its tensor's own columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMap {
    segments: Vec<Segment>,
    total_len: usize,
    slots: usize,
}

impl ColumnMap {
    pub fn uniform(total_len: usize, columns: usize) -> Result<Self> {
        if columns == 0 || !total_len.is_multiple_of(columns) {
            return Err(invalid(format!(
                "column count {columns} does not divide length {total_len}"
            )));
        }
        Ok(Self {
            segments: vec![Segment {
                start: 0,
                len: total_len,
                columns,
                phase: 0,
                slot_base: 0,
            }],
            total_len,
            slots: columns,
        })
    }

    /// Builds a map from consecutive pieces `(len, columns, phase)`, where
    /// `phase` is the column of the piece's first element.
    pub fn from_pieces(pieces: impl IntoIterator<Item = (usize, usize, usize)>) -> Result<Self> {
        let mut segments = Vec::new();
        let mut start = 0;
        let mut slots = 0;
        for (len, columns, phase) in pieces {
            if columns == 0 || phase >= columns {
                return Err(invalid(format!("bad column piece ({len}, {columns}, {phase})")));
            }
            if len == 0 {
                continue;
            }
            segments.push(Segment {
                start,
                len,
                columns,
                phase,
                slot_base: slots,
            });
            start += len;
            slots += columns;
        }
        Ok(Self {
            segments,
            total_len: start,
            slots,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn num_slots(&self) -> usize {
        self.slots
    }

    pub fn slot(&self, index: usize) -> usize {
        let seg_idx = self.segments.partition_point(|s| s.start + s.len <= index);
        let seg = &self.segments[seg_idx];
        seg.slot_base + (seg.phase + index - seg.start) % seg.columns
    }
}

/// Side information the quantizer needs.
#[derive(Debug, Clone, Copy)]
pub struct QuantContext<'a> {
    /// Dropping threshold, used as the center in threshold mode.
    pub threshold: f32,
    /// Column layout, required for column averaging.
    pub columns: Option<&'a ColumnMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedUpdate {
    pub tensor_id: String,
    pub total_length: u32,
    pub mode: QuantMode,
    pub indices: Vec<u32>,
    pub sign_bits: Vec<u8>,
    pub centers: Vec<f32>,
    /// Present in two-bit mode only.
    pub selector_bits: Option<Vec<u8>>,
}

fn bitmap_len(count: usize) -> usize {
    count.div_ceil(8)
}

fn get_bit(bits: &[u8], i: usize) -> bool {
    bits[i / 8] >> (i % 8) & 1 == 1
}

fn set_bit(bits: &mut [u8], i: usize) {
    bits[i / 8] |= 1 << (i % 8);
}

fn mean_abs(values: impl Iterator<Item = f32>) -> f32 {
    let (sum, n) = values.fold((0.0f64, 0usize), |(s, n), v| (s + v.abs() as f64, n + 1));
    (sum / n as f64) as f32
}

fn column_slots(columns: Option<&ColumnMap>, total_length: u32) -> Result<&ColumnMap> {
    let map = columns.ok_or_else(|| invalid("column averaging needs a column map"))?;
    if map.total_len() != total_length as usize {
        return Err(invalid(format!(
            "column map covers {} entries, update has {total_length}",
            map.total_len()
        )));
    }
    Ok(map)
}

/// Occupied slots in ascending order, and each entry's position among them.
fn occupied_slots(map: &ColumnMap, indices: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let slots: Vec<usize> = indices.iter().map(|&i| map.slot(i as usize)).collect();
    let mut occupied = slots.clone();
    occupied.sort_unstable();
    occupied.dedup();
    let rank = slots.iter().map(|s| occupied.binary_search(s).unwrap()).collect();
    (occupied, rank)
}

pub fn quantize(u: &SparseUpdate, mode: QuantMode, ctx: &QuantContext<'_>) -> Result<QuantizedUpdate> {
    let count = u.len();
    let mut sign_bits = vec![0u8; bitmap_len(count)];
    for (e, v) in u.values().iter().enumerate() {
        if *v > 0.0 {
            set_bit(&mut sign_bits, e);
        }
    }
    let mut selector_bits = None;
    let centers = if count == 0 {
        if mode == QuantMode::ColumnAvg {
            column_slots(ctx.columns, u.total_length())?;
        }
        if mode == QuantMode::TwoBit {
            selector_bits = Some(Vec::new());
        }
        Vec::new()
    } else {
        match mode {
            QuantMode::Threshold => {
                if !(ctx.threshold > 0.0 && ctx.threshold.is_finite()) {
                    return Err(invalid(format!(
                        "threshold quantization needs a positive threshold, got {}",
                        ctx.threshold
                    )));
                }
                vec![ctx.threshold]
            }
            QuantMode::GlobalAvg => vec![mean_abs(u.values().iter().copied())],
            QuantMode::ColumnAvg => {
                let map = column_slots(ctx.columns, u.total_length())?;
                let (occupied, rank) = occupied_slots(map, u.indices());
                let mut sums = vec![(0.0f64, 0usize); occupied.len()];
                for (v, r) in u.values().iter().zip(&rank) {
                    sums[*r].0 += v.abs() as f64;
                    sums[*r].1 += 1;
                }
                sums.iter().map(|(s, n)| (s / *n as f64) as f32).collect()
            }
            QuantMode::TwoBit => {
                let mut mags: Vec<f32> = u.values().iter().map(|v| v.abs()).collect();
                mags.sort_unstable_by(f32::total_cmp);
                let median = mags[(count - 1) / 2];
                let mut bits = vec![0u8; bitmap_len(count)];
                for (e, v) in u.values().iter().enumerate() {
                    if v.abs() > median {
                        set_bit(&mut bits, e);
                    }
                }
                let low = mean_abs(mags.iter().copied().filter(|m| *m <= median));
                let high_vals: Vec<f32> = mags.iter().copied().filter(|m| *m > median).collect();
                let high = if high_vals.is_empty() {
                    low
                } else {
                    mean_abs(high_vals.into_iter())
                };
                selector_bits = Some(bits);
                vec![low, high]
            }
        }
    };
    Ok(QuantizedUpdate {
        tensor_id: u.tensor_id().to_string(),
        total_length: u.total_length(),
        mode,
        indices: u.indices().to_vec(),
        sign_bits,
        centers,
        selector_bits,
    })
}

/// Receiver-side reconstruction: `sign * center` at every index.
pub fn dequantize(q: &QuantizedUpdate, columns: Option<&ColumnMap>) -> Result<SparseUpdate> {
    let count = q.indices.len();
    if q.sign_bits.len() != bitmap_len(count) {
        return Err(decode_err(
            0,
            format!(
                "sign bitmap has {} bytes, expected {}",
                q.sign_bits.len(),
                bitmap_len(count)
            ),
        ));
    }
    match (&q.selector_bits, q.mode) {
        (Some(bits), QuantMode::TwoBit) if bits.len() == bitmap_len(count) => {}
        (None, m) if m != QuantMode::TwoBit => {}
        _ => return Err(decode_err(0, "selector bitmap does not match mode")),
    }
    if let Some(c) = q.centers.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(decode_err(0, format!("non-positive center {c}")));
    }
    if count == 0 {
        return Ok(SparseUpdate::empty(q.tensor_id.clone(), q.total_length));
    }
    let magnitude: Vec<f32> = match q.mode {
        QuantMode::Threshold | QuantMode::GlobalAvg => {
            expect_centers(q, 1)?;
            vec![q.centers[0]; count]
        }
        QuantMode::TwoBit => {
            expect_centers(q, 2)?;
            let bits = q.selector_bits.as_ref().unwrap();
            (0..count).map(|e| q.centers[get_bit(bits, e) as usize]).collect()
        }
        QuantMode::ColumnAvg => {
            let map = column_slots(columns, q.total_length)?;
            let (occupied, rank) = occupied_slots(map, &q.indices);
            expect_centers(q, occupied.len())?;
            rank.iter().map(|&r| q.centers[r]).collect()
        }
    };
    let values = magnitude
        .into_iter()
        .enumerate()
        .map(|(e, m)| if get_bit(&q.sign_bits, e) { m } else { -m })
        .collect();
    SparseUpdate::new(q.tensor_id.clone(), q.total_length, q.indices.clone(), values)
}

fn expect_centers(q: &QuantizedUpdate, n: usize) -> Result<()> {
    if q.centers.len() != n {
        return Err(decode_err(
            0,
            format!("{} mode needs {n} centers, frame has {}", q.mode, q.centers.len()),
        ));
    }
    Ok(())
}

impl QuantizedUpdate {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Bytes after the common frame header.
    pub fn payload_len(&self) -> usize {
        1 + 4
            + 4 * self.centers.len()
            + 4 * self.indices.len()
            + self.sign_bits.len()
            + self.selector_bits.as_ref().map_or(0, Vec::len)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.tensor_id.len() + 8 + self.payload_len());
        write_frame_header(&mut out, &self.tensor_id, self.total_length, self.indices.len() as u32);
        out.push(self.mode.tag());
        out.write_u32::<LittleEndian>(self.centers.len() as u32).unwrap();
        for c in &self.centers {
            out.write_f32::<LittleEndian>(*c).unwrap();
        }
        for i in &self.indices {
            out.write_u32::<LittleEndian>(*i).unwrap();
        }
        out.extend_from_slice(&self.sign_bits);
        if let Some(bits) = &self.selector_bits {
            out.extend_from_slice(bits);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let (tensor_id, total_length, count) = r.frame_header()?;
        let count = count as usize;
        let at = r.pos();
        let mode = QuantMode::from_tag(r.u8()?).ok_or_else(|| decode_err(at, "unknown quantization mode"))?;
        let n_centers = r.u32()? as usize;
        r.ensure(4 * n_centers, "centers")?;
        let mut centers = Vec::with_capacity(n_centers);
        for _ in 0..n_centers {
            let at = r.pos();
            let c = r.f32()?;
            if !(c > 0.0 && c.is_finite()) {
                return Err(decode_err(at, format!("non-positive center {c}")));
            }
            centers.push(c);
        }
        r.ensure(4 * count, "indices")?;
        let mut indices: Vec<u32> = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos();
            let idx = r.u32()?;
            if idx >= total_length || indices.last().is_some_and(|&p| idx <= p) {
                return Err(decode_err(at, format!("index {idx} out of order or range")));
            }
            indices.push(idx);
        }
        let sign_bits = r.take(bitmap_len(count), "sign bitmap")?.to_vec();
        let selector_bits = if mode == QuantMode::TwoBit {
            Some(r.take(bitmap_len(count), "selector bitmap")?.to_vec())
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            tensor_id,
            total_length,
            mode,
            indices,
            sign_bits,
            centers,
            selector_bits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn upd(indices: Vec<u32>, values: Vec<f32>, total: u32) -> SparseUpdate {
        SparseUpdate::new("w", total, indices, values).unwrap()
    }

    fn ctx(threshold: f32) -> QuantContext<'static> {
        QuantContext {
            threshold,
            columns: None,
        }
    }

    #[test]
    fn global_average_example() {
        let u = upd(vec![0, 3], vec![0.3, -2.0], 4);
        let q = quantize(&u, QuantMode::GlobalAvg, &ctx(0.05)).unwrap();
        assert_eq!(q.centers, vec![1.15]);
        assert_eq!(dequantize(&q, None).unwrap().values(), &[1.15, -1.15]);
    }

    #[test]
    fn threshold_example() {
        let u = upd(vec![0, 3], vec![0.3, -2.0], 4);
        let q = quantize(&u, QuantMode::Threshold, &ctx(0.05)).unwrap();
        assert_eq!(dequantize(&q, None).unwrap().values(), &[0.05, -0.05]);
        assert!(quantize(&u, QuantMode::Threshold, &ctx(0.0)).is_err());
    }

    #[test]
    fn singleton_keeps_magnitude() {
        let u = upd(vec![2], vec![-0.7], 4);
        let map = ColumnMap::uniform(4, 2).unwrap();
        let c = QuantContext {
            threshold: 0.1,
            columns: Some(&map),
        };
        for mode in [QuantMode::GlobalAvg, QuantMode::ColumnAvg, QuantMode::TwoBit] {
            let q = quantize(&u, mode, &c).unwrap();
            let back = dequantize(&q, Some(&map)).unwrap();
            assert_eq!(back.values(), &[-0.7], "{mode}");
        }
        let q = quantize(&u, QuantMode::Threshold, &c).unwrap();
        assert_eq!(dequantize(&q, None).unwrap().values(), &[-0.1]);
    }

    #[test]
    fn column_average_per_column() {
        // 2 x 3 matrix, columns 0..3
        let u = upd(vec![0, 1, 3, 4], vec![1.0, -2.0, -3.0, 4.0], 6);
        let map = ColumnMap::uniform(6, 3).unwrap();
        let c = QuantContext {
            threshold: 0.1,
            columns: Some(&map),
        };
        let q = quantize(&u, QuantMode::ColumnAvg, &c).unwrap();
        assert_eq!(q.centers, vec![2.0, 3.0]);
        assert_eq!(dequantize(&q, Some(&map)).unwrap().values(), &[2.0, -3.0, -2.0, 3.0]);
        assert!(ColumnMap::uniform(6, 4).is_err());
        assert!(quantize(&u, QuantMode::ColumnAvg, &ctx(0.1)).is_err());
    }

    #[test]
    fn column_map_pieces() {
        // tail of a 3-column matrix starting at column 2, then a vector
        let map = ColumnMap::from_pieces([(4, 3, 2), (2, 1, 0)]).unwrap();
        let slots: Vec<usize> = (0..6).map(|i| map.slot(i)).collect();
        assert_eq!(slots, vec![2, 0, 1, 2, 3, 3]);
        assert_eq!(map.num_slots(), 4);
        assert_eq!(map.total_len(), 6);
    }

    #[test]
    fn two_bit_groups() {
        let u = upd(vec![0, 1, 2, 3], vec![0.1, -0.2, 1.0, -3.0], 4);
        let q = quantize(&u, QuantMode::TwoBit, &ctx(0.05)).unwrap();
        assert!((q.centers[0] - 0.15).abs() < 1e-7);
        assert_eq!(q.centers[1], 2.0);
        let back = dequantize(&q, None).unwrap();
        assert_eq!(back.values(), &[q.centers[0], -q.centers[0], 2.0, -2.0]);
    }

    #[test]
    fn empty_round_trip() {
        let u = SparseUpdate::empty("w", 10);
        for mode in [QuantMode::Threshold, QuantMode::GlobalAvg, QuantMode::TwoBit] {
            let q = quantize(&u, mode, &ctx(0.0)).unwrap();
            let q2 = QuantizedUpdate::decode(&q.encode()).unwrap();
            assert_eq!(q, q2);
            assert!(dequantize(&q2, None).unwrap().is_empty());
        }
    }

    #[test]
    fn malformed_bitmaps_are_rejected() {
        let u = upd(vec![0, 3], vec![0.3, -2.0], 4);
        let mut q = quantize(&u, QuantMode::GlobalAvg, &ctx(0.05)).unwrap();
        q.sign_bits.push(0);
        assert!(dequantize(&q, None).is_err());
        let mut q = quantize(&u, QuantMode::TwoBit, &ctx(0.05)).unwrap();
        q.selector_bits = None;
        assert!(dequantize(&q, None).is_err());
        let q = quantize(&u, QuantMode::TwoBit, &ctx(0.05)).unwrap();
        let bytes = q.encode();
        assert!(QuantizedUpdate::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn one_bit_payload_size() {
        let u = upd((0..100).collect(), vec![0.5; 100], 1000);
        let q = quantize(&u, QuantMode::GlobalAvg, &ctx(0.1)).unwrap();
        assert_eq!(q.payload_len(), 1 + 4 + 4 + 400 + 13);
        assert_eq!(q.encode().len(), 11 + q.payload_len());
    }

    fn arb_update() -> impl Strategy<Value = SparseUpdate> {
        (1u32..60).prop_flat_map(|rows| {
            let total = rows * 8;
            proptest::collection::btree_map(0..total, -10.0f32..10.0, 0..40).prop_map(move |m| {
                let (idx, vals): (Vec<u32>, Vec<f32>) =
                    m.into_iter().map(|(i, v)| (i, if v == 0.0 { 0.5 } else { v })).unzip();
                SparseUpdate::new("t", total, idx, vals).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn indices_and_signs_survive(u in arb_update(), mode_idx in 0usize..4) {
            let mode = QuantMode::ALL[mode_idx];
            let map = ColumnMap::uniform(u.total_length() as usize, 8).unwrap();
            let c = QuantContext { threshold: 0.25, columns: Some(&map) };
            let q = quantize(&u, mode, &c).unwrap();
            let wire = QuantizedUpdate::decode(&q.encode()).unwrap();
            prop_assert_eq!(&wire, &q);
            let back = dequantize(&wire, Some(&map)).unwrap();
            prop_assert_eq!(back.indices(), u.indices());
            for (a, b) in back.values().iter().zip(u.values()) {
                prop_assert_eq!(a.is_sign_positive(), b.is_sign_positive());
            }
        }
    }
}
