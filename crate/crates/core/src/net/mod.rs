//! In-process message transport with exact byte accounting, and the
//! schedulers that decide which node acts next.

mod schedule;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::compress::frame_header_len;
use crate::error::{decode_err, Error, Result};

pub use schedule::{run_free, run_schedule, Event, Outbox, Process, ScheduleMode};

/// Bytes in the envelope header: kind, sender, shard, step, payload length.
pub const ENVELOPE_HEADER_LEN: usize = 1 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Push,
    PullReq,
    PullResp,
}

impl MessageKind {
    fn tag(self) -> u8 {
        match self {
            MessageKind::Push => 0,
            MessageKind::PullReq => 1,
            MessageKind::PullResp => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => MessageKind::Push,
            1 => MessageKind::PullReq,
            2 => MessageKind::PullResp,
            _ => return None,
        })
    }
}

/// A framed message. The payload is an encoded update frame, or empty for
/// pull requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: MessageKind,
    pub sender: u32,
    pub shard: u32,
    pub step: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_HEADER_LEN + self.payload.len());
        out.push(self.kind.tag());
        out.write_u32::<LittleEndian>(self.sender).unwrap();
        out.write_u32::<LittleEndian>(self.shard).unwrap();
        out.write_u64::<LittleEndian>(self.step).unwrap();
        out.write_u32::<LittleEndian>(self.payload.len() as u32).unwrap();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < ENVELOPE_HEADER_LEN {
            return Err(decode_err(bytes.len(), "truncated envelope header"));
        }
        let kind = MessageKind::from_tag(bytes[0])
            .ok_or_else(|| decode_err(0, format!("unknown message type {}", bytes[0])))?;
        let len = LittleEndian::read_u32(&bytes[17..21]) as usize;
        if bytes.len() - ENVELOPE_HEADER_LEN != len {
            return Err(decode_err(
                17,
                format!(
                    "payload length {len} but {} bytes follow",
                    bytes.len() - ENVELOPE_HEADER_LEN
                ),
            ));
        }
        Ok(Self {
            kind,
            sender: LittleEndian::read_u32(&bytes[1..5]),
            shard: LittleEndian::read_u32(&bytes[5..9]),
            step: LittleEndian::read_u64(&bytes[9..17]),
            payload: bytes[ENVELOPE_HEADER_LEN..].to_vec(),
        })
    }

    /// Split of the encoded size into (header bytes, payload bytes). Header
    /// bytes are the envelope header plus the update's frame header.
    pub fn byte_split(&self) -> Result<(u64, u64)> {
        let frame_header = if self.payload.is_empty() {
            0
        } else {
            frame_header_len(&self.payload)?
        };
        Ok((
            (ENVELOPE_HEADER_LEN + frame_header) as u64,
            (self.payload.len() - frame_header) as u64,
        ))
    }
}

/// Traffic counters for one direction of one link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub messages: u64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
}

impl LinkStats {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.header_bytes
    }

    fn record(&mut self, header: u64, payload: u64) {
        self.messages += 1;
        self.header_bytes += header;
        self.payload_bytes += payload;
    }

    pub fn add(&mut self, other: &LinkStats) {
        self.messages += other.messages;
        self.header_bytes += other.header_bytes;
        self.payload_bytes += other.payload_bytes;
    }
}

/// What the network hands back for a send.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub header_bytes: u64,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub step: u64,
    pub sender: u32,
    pub receiver: u32,
    #[serde(rename = "type")]
    pub kind: MessageKind,
    pub payload_bytes: u64,
}

/// Lossless FIFO links between every ordered pair of nodes, including a
/// node and itself.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: usize,
    queues: Vec<VecDeque<Vec<u8>>>,
    sent: Vec<LinkStats>,
    received: Vec<LinkStats>,
    trace: Option<Vec<TraceRecord>>,
}

impl Network {
    pub fn new(nodes: usize) -> Self {
        Self {
            nodes,
            queues: vec![VecDeque::new(); nodes * nodes],
            sent: vec![LinkStats::default(); nodes * nodes],
            received: vec![LinkStats::default(); nodes * nodes],
            trace: None,
        }
    }

    /// Keeps a record of every message sent from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    fn link(&self, from: usize, to: usize) -> Result<usize> {
        if from >= self.nodes || to >= self.nodes {
            return Err(Error::Config(format!(
                "link {from} -> {to} outside a network of {} nodes",
                self.nodes
            )));
        }
        Ok(from * self.nodes + to)
    }

    pub fn send(&mut self, from: usize, to: usize, envelope: &Envelope) -> Result<Receipt> {
        let link = self.link(from, to)?;
        let (header, payload) = envelope.byte_split()?;
        self.sent[link].record(header, payload);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                step: envelope.step,
                sender: from as u32,
                receiver: to as u32,
                kind: envelope.kind,
                payload_bytes: payload,
            });
        }
        self.queues[link].push_back(envelope.encode());
        Ok(Receipt {
            header_bytes: header,
            payload_bytes: payload,
        })
    }

    /// Takes the oldest message on `from -> to`.
    pub fn recv(&mut self, from: usize, to: usize) -> Result<Option<Envelope>> {
        let link = self.link(from, to)?;
        let Some(bytes) = self.queues[link].pop_front() else {
            return Ok(None);
        };
        let envelope = Envelope::decode(&bytes)?;
        let (header, payload) = envelope.byte_split()?;
        self.received[link].record(header, payload);
        Ok(Some(envelope))
    }

    /// Kind of the oldest message on `from -> to`, if any.
    pub fn peek_kind(&self, from: usize, to: usize) -> Option<MessageKind> {
        let link = from * self.nodes + to;
        self.queues.get(link)?.front().and_then(|b| MessageKind::from_tag(b[0]))
    }

    pub fn pending(&self, from: usize, to: usize) -> usize {
        self.queues[from * self.nodes + to].len()
    }

    pub fn is_idle(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Non-empty links as (from, to), in ascending order.
    pub fn busy_links(&self) -> Vec<(usize, usize)> {
        (0..self.queues.len())
            .filter(|&l| !self.queues[l].is_empty())
            .map(|l| (l / self.nodes, l % self.nodes))
            .collect()
    }

    pub fn sent_stats(&self, from: usize, to: usize) -> LinkStats {
        self.sent[from * self.nodes + to]
    }

    pub fn received_stats(&self, from: usize, to: usize) -> LinkStats {
        self.received[from * self.nodes + to]
    }

    /// Everything `node` has sent, over all its outgoing links.
    pub fn node_sent(&self, node: usize) -> LinkStats {
        let mut total = LinkStats::default();
        for to in 0..self.nodes {
            total.add(&self.sent_stats(node, to));
        }
        total
    }

    pub fn total_sent(&self) -> LinkStats {
        let mut total = LinkStats::default();
        self.sent.iter().for_each(|s| total.add(s));
        total
    }

    pub fn total_received(&self) -> LinkStats {
        let mut total = LinkStats::default();
        self.received.iter().for_each(|s| total.add(s));
        total
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Writes the trace as CSV with columns step, sender, receiver, type,
    /// payload_bytes.
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for record in self.trace.iter().flatten() {
            w.serialize(record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_trace(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_trace(std::fs::File::create(path)?)
    }
}
