//! Coordinate-value wire format.
//!
//! Every frame starts with the same header:
//!
//! ```text
//! u16 id_len | id bytes (UTF-8) | u32 total_length | u32 count
//! ```
//!
//! A sparse frame follows it with `count` pairs of `u32 index, f32 value`.
//! A dense frame has `count == total_length` and carries the raw `f32`s.
//! All integers and floats are little-endian.

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{decode_err, invalid, Result};

/// Coordinate-value encoding of the entries that survived a drop.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    tensor_id: String,
    total_length: u32,
    indices: Vec<u32>,
    values: Vec<f32>,
}

impl SparseUpdate {
    /// Builds an update, checking that indices are strictly increasing and in
    /// range and that no value is zero.
    pub fn new(tensor_id: impl Into<String>, total_length: u32, indices: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        let tensor_id = tensor_id.into();
        if indices.len() != values.len() {
            return Err(invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        check_indices(&indices, total_length).map_err(invalid)?;
        if let Some(pos) = values.iter().position(|v| *v == 0.0 || !v.is_finite()) {
            return Err(invalid(format!("entry {pos} has value {}", values[pos])));
        }
        Ok(Self {
            tensor_id,
            total_length,
            indices,
            values,
        })
    }

    /// Caller guarantees the invariants checked by [`SparseUpdate::new`].
    pub(crate) fn from_parts(tensor_id: String, total_length: u32, indices: Vec<u32>, values: Vec<f32>) -> Self {
        debug_assert!(check_indices(&indices, total_length).is_ok());
        debug_assert!(values.iter().all(|v| *v != 0.0));
        Self {
            tensor_id,
            total_length,
            indices,
            values,
        }
    }

    pub fn empty(tensor_id: impl Into<String>, total_length: u32) -> Self {
        Self::from_parts(tensor_id.into(), total_length, Vec::new(), Vec::new())
    }

    pub fn tensor_id(&self) -> &str {
        &self.tensor_id
    }

    pub fn total_length(&self) -> u32 {
        self.total_length
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Dense vector with the update's values at its indices and zeros elsewhere.
    pub fn densify(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.total_length as usize];
        for (i, v) in self.entries() {
            out[i as usize] = v;
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        header_len(&self.tensor_id) + 8 * self.len()
    }

    /// Bytes after the header: 8 per entry.
    pub fn payload_len(&self) -> usize {
        8 * self.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        write_frame_header(&mut out, &self.tensor_id, self.total_length, self.len() as u32);
        for (i, v) in self.entries() {
            out.write_u32::<LittleEndian>(i).unwrap();
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let (tensor_id, total_length, count) = r.frame_header()?;
        let count = count as usize;
        r.ensure(count * 8, "sparse entries")?;
        let mut indices = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos();
            let idx = r.u32()?;
            if idx >= total_length {
                return Err(decode_err(at, format!("index {idx} >= total length {total_length}")));
            }
            if let Some(&prev) = indices.last() {
                if idx <= prev {
                    return Err(decode_err(at, format!("index {idx} not above previous {prev}")));
                }
            }
            let at = r.pos();
            let v = r.f32()?;
            if v == 0.0 || !v.is_finite() {
                return Err(decode_err(at, format!("invalid entry value {v}")));
            }
            indices.push(idx);
            values.push(v);
        }
        r.finish()?;
        Ok(Self::from_parts(tensor_id, total_length, indices, values))
    }
}

/// Uncompressed frame: every value of the buffer, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFrame {
    pub tensor_id: String,
    pub values: Vec<f32>,
}

impl DenseFrame {
    pub fn new(tensor_id: impl Into<String>, values: Vec<f32>) -> Self {
        Self {
            tensor_id: tensor_id.into(),
            values,
        }
    }

    pub fn payload_len(&self) -> usize {
        4 * self.values.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.values.len() as u32;
        let mut out = Vec::with_capacity(header_len(&self.tensor_id) + self.payload_len());
        write_frame_header(&mut out, &self.tensor_id, n, n);
        let start = out.len();
        out.resize(start + self.payload_len(), 0);
        LittleEndian::write_f32_into(&self.values, &mut out[start..]);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let at = r.pos();
        let (tensor_id, total_length, count) = r.frame_header()?;
        if count != total_length {
            return Err(decode_err(
                at,
                format!("dense frame count {count} != length {total_length}"),
            ));
        }
        let raw = r.take(4 * count as usize, "dense values")?;
        let mut values = vec![0.0f32; count as usize];
        LittleEndian::read_f32_into(raw, &mut values);
        r.finish()?;
        Ok(Self { tensor_id, values })
    }
}

fn check_indices(indices: &[u32], total_length: u32) -> Result<(), String> {
    for (pos, w) in indices.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(format!("indices not strictly increasing at entry {}", pos + 1));
        }
    }
    if let Some(&last) = indices.last() {
        if last >= total_length {
            return Err(format!("index {last} >= total length {total_length}"));
        }
    }
    Ok(())
}

fn header_len(id: &str) -> usize {
    2 + id.len() + 4 + 4
}

pub(crate) fn write_frame_header(out: &mut Vec<u8>, id: &str, total_length: u32, count: u32) {
    let id_len = u16::try_from(id.len()).expect("tensor id longer than 65535 bytes");
    out.write_u16::<LittleEndian>(id_len).unwrap();
    out.extend_from_slice(id.as_bytes());
    out.write_u32::<LittleEndian>(total_length).unwrap();
    out.write_u32::<LittleEndian>(count).unwrap();
}

/// Length of the common frame header at the start of `bytes`.
pub fn frame_header_len(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader::new(bytes);
    let id_len = r.u16()? as usize;
    let len = 2 + id_len + 8;
    if bytes.len() < len {
        return Err(decode_err(bytes.len(), "truncated frame header"));
    }
    Ok(len)
}

/// Bounds-checked little-endian cursor that reports failing byte offsets.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn ensure(&self, n: usize, what: &str) -> Result<()> {
        if self.remaining() < n {
            return Err(decode_err(
                self.buf.len(),
                format!("truncated {what}: need {n} bytes, have {}", self.remaining()),
            ));
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.ensure(n, what)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, "u16")?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, "u32")?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4, "f32")?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let at = self.pos;
        let raw = self.take(len, "string")?;
        String::from_utf8(raw.to_vec()).map_err(|_| decode_err(at, "invalid UTF-8"))
    }

    pub(crate) fn frame_header(&mut self) -> Result<(String, u32, u32)> {
        let id = self.string()?;
        let total = self.u32()?;
        let count = self.u32()?;
        Ok((id, total, count))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(decode_err(self.pos, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
