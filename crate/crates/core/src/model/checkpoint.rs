//! Checkpoint file: a manifest of tensor names and shapes followed by one
//! dense frame per tensor, all little-endian.
//!
//! ```text
//! b"GDCKPT01" | u32 n_tensors
//! n_tensors x (u16 name_len | name | u32 rank | rank x u32 extent)
//! n_tensors x dense frame
//! ```

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::compress::{DenseFrame, Reader};
use crate::error::{decode_err, Result};

use super::{ModelParams, ParamLayout};

const MAGIC: &[u8; 8] = b"GDCKPT01";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.len() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    let slots = params.layout().slots();
    out.write_u32::<LittleEndian>(slots.len() as u32).unwrap();
    for slot in slots {
        out.write_u16::<LittleEndian>(slot.name.len() as u16).unwrap();
        out.extend_from_slice(slot.name.as_bytes());
        out.write_u32::<LittleEndian>(slot.shape.len() as u32).unwrap();
        for &d in &slot.shape {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
    }
    for slot in slots {
        let frame = DenseFrame::new(slot.name.clone(), params.flat()[slot.range()].to_vec());
        out.extend_from_slice(&frame.encode());
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MAGIC {
        return Err(decode_err(0, "not a checkpoint file"));
    }
    let n = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        r.ensure(4 * rank, "shape")?;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let layout = ParamLayout::new(manifest);
    let mut values = Vec::with_capacity(layout.total());
    for slot in layout.slots() {
        let at = r.pos();
        let id_len = 2 + slot.name.len() + 8;
        r.ensure(id_len, "frame header")?;
        let frame_len = id_len + 4 * slot.len();
        let frame = DenseFrame::decode(r.take(frame_len, "tensor frame")?)
            .map_err(|e| decode_err(at, format!("tensor {}: {e}", slot.name)))?;
        if frame.tensor_id != slot.name || frame.values.len() != slot.len() {
            return Err(decode_err(
                at,
                format!("frame does not match manifest entry {}", slot.name),
            ));
        }
        values.extend_from_slice(&frame.values);
    }
    r.finish()?;
    ModelParams::from_flat(layout, values)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(&fs::read(path)?)
}
