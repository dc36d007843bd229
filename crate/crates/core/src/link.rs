//! Underlying links: the roster of reliable links a node can use, who has
//! been heard on which of them, and a stop-and-wait ARQ model of a reliable
//! link over a lossy channel.
//!
//! Simulated link frames look like this (all fields big-endian):
//!
//! ```text
//! [src: u32][dst: u32][kind: u8][seq: u16][protocol: u8][payload ...]
//! ```
//!
//! `dst` 0 is broadcast. Beacons and ACKs carry no payload.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{NodeAddr, Time};

pub const FRAME_HEADER_LEN: usize = 12;
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("link {0} does not support reliability")]
    Unreliable(LinkId),

    #[error("link {0} is already registered")]
    DuplicateLink(LinkId),

    #[error("link {0} has an MTU too small to carry a DTN header")]
    MtuTooSmall(LinkId),

    #[error("link {0} is not registered")]
    UnknownLink(LinkId),

    #[error("payload of {len} octets exceeds the {mtu}-octet MTU")]
    MtuExceeded { len: usize, mtu: usize },

    #[error("reliable send needs a unicast destination other than this node")]
    BadDestination,

    #[error("malformed link frame")]
    MalformedFrame,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub String);

impl From<&str> for LinkId {
    fn from(s: &str) -> Self {
        LinkId(s.to_owned())
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkDescriptor {
    pub link_id: LinkId,
    pub mtu: usize,
    pub data_rate_bps: f64,
    pub reliable: bool,
    pub last_tx_at: Option<Time>,
    pub last_rx_at: Option<Time>,
}

impl LinkDescriptor {
    pub fn new(link_id: impl Into<LinkId>, mtu: usize, data_rate_bps: f64, reliable: bool) -> Self {
        Self {
            link_id: link_id.into(),
            mtu,
            data_rate_bps,
            reliable,
            last_tx_at: None,
            last_rx_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborRecord {
    pub node: NodeAddr,
    pub link_id: LinkId,
    pub last_heard_at: Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Tx,
    Rx,
}

/// Registered links, their user-set priority and per-link neighbour table.
#[derive(Debug, Default)]
pub struct LinkManager {
    links: Vec<LinkDescriptor>,
    priority: Vec<LinkId>,
    neighbors: BTreeMap<(NodeAddr, LinkId), Time>,
}

impl LinkManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Only reliable links are accepted; new links go to the back of the
    /// priority list.
    pub fn register_link(&mut self, desc: LinkDescriptor) -> Result<(), LinkError> {
        if !desc.reliable {
            return Err(LinkError::Unreliable(desc.link_id));
        }
        if self.links.iter().any(|l| l.link_id == desc.link_id) {
            return Err(LinkError::DuplicateLink(desc.link_id));
        }
        if desc.mtu <= crate::pdu::HEADER_LEN {
            return Err(LinkError::MtuTooSmall(desc.link_id));
        }
        self.priority.push(desc.link_id.clone());
        self.links.push(desc);
        Ok(())
    }

    pub fn link(&self, id: &LinkId) -> Option<&LinkDescriptor> {
        self.links.iter().find(|l| &l.link_id == id)
    }

    fn link_mut(&mut self, id: &LinkId) -> Result<&mut LinkDescriptor, LinkError> {
        self.links
            .iter_mut()
            .find(|l| &l.link_id == id)
            .ok_or_else(|| LinkError::UnknownLink(id.clone()))
    }

    /// Links in current priority order.
    pub fn links(&self) -> impl Iterator<Item = &LinkDescriptor> {
        self.priority.iter().filter_map(|id| self.link(id))
    }

    pub fn priority(&self) -> &[LinkId] {
        &self.priority
    }

    pub fn note_activity(
        &mut self,
        node: NodeAddr,
        link: &LinkId,
        now: Time,
        dir: Direction,
    ) -> Result<(), LinkError> {
        let desc = self.link_mut(link)?;
        match dir {
            Direction::Tx => desc.last_tx_at = Some(desc.last_tx_at.map_or(now, |t| t.max(now))),
            Direction::Rx => {
                desc.last_rx_at = Some(desc.last_rx_at.map_or(now, |t| t.max(now)));
                let heard = self.neighbors.entry((node, link.clone())).or_insert(now);
                *heard = (*heard).max(now);
            }
        }
        Ok(())
    }

    pub fn neighbor(&self, node: NodeAddr, link: &LinkId) -> Option<NeighborRecord> {
        self.neighbors
            .get(&(node, link.clone()))
            .map(|&last_heard_at| NeighborRecord {
                node,
                link_id: link.clone(),
                last_heard_at,
            })
    }

    fn heard_recently(&self, node: NodeAddr, link: &LinkId, now: Time, expiry: Duration) -> bool {
        self.neighbors
            .get(&(node, link.clone()))
            .is_some_and(|&last| now - last < expiry)
    }

    /// Links on which `node` was heard less than `expiry` ago, in priority
    /// order.
    pub fn active_links_for(&self, node: NodeAddr, now: Time, expiry: Duration) -> Vec<LinkId> {
        self.priority
            .iter()
            .filter(|l| self.heard_recently(node, l, now, expiry))
            .cloned()
            .collect()
    }

    /// Nodes with at least one active link.
    pub fn active_neighbors(&self, now: Time, expiry: Duration) -> Vec<NodeAddr> {
        let mut nodes: Vec<NodeAddr> = self
            .neighbors
            .iter()
            .filter(|(_, &last)| now - last < expiry)
            .map(|((n, _), _)| *n)
            .collect();
        nodes.dedup();
        nodes
    }

    /// Links with no transmission for at least `idle`.
    pub fn idle_links(&self, now: Time, idle: Duration) -> Vec<LinkId> {
        self.links()
            .filter(|l| l.last_tx_at.is_none_or(|t| now - t >= idle))
            .map(|l| l.link_id.clone())
            .collect()
    }

    /// Replaces the priority order. Rejected (and ignored) unless every entry
    /// is present and registered; links not named keep their relative order
    /// after the named ones.
    pub fn set_link_priority(&mut self, order: &[Option<LinkId>]) -> bool {
        if order.is_empty() {
            return false;
        }
        let mut named = Vec::with_capacity(order.len());
        for entry in order {
            match entry {
                Some(id) if self.link(id).is_some() && !named.contains(id) => named.push(id.clone()),
                _ => return false,
            }
        }
        let rest: Vec<LinkId> = self
            .priority
            .iter()
            .filter(|id| !named.contains(id))
            .cloned()
            .collect();
        named.extend(rest);
        self.priority = named;
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Data = 1,
    Ack = 2,
    Beacon = 3,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeAddr,
    pub dst: NodeAddr,
    pub kind: FrameKind,
    pub seq: u16,
    pub protocol: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn beacon(src: NodeAddr) -> Self {
        Frame {
            src,
            dst: NodeAddr::BROADCAST,
            kind: FrameKind::Beacon,
            seq: 0,
            protocol: 0,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.src.0.to_be_bytes());
        out.extend_from_slice(&self.dst.0.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.push(self.protocol);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, LinkError> {
        if buf.len() < FRAME_HEADER_LEN {
            return Err(LinkError::MalformedFrame);
        }
        let kind = match buf[8] {
            1 => FrameKind::Data,
            2 => FrameKind::Ack,
            3 => FrameKind::Beacon,
            _ => return Err(LinkError::MalformedFrame),
        };
        Ok(Frame {
            src: NodeAddr(u32::from_be_bytes(buf[0..4].try_into().unwrap())),
            dst: NodeAddr(u32::from_be_bytes(buf[4..8].try_into().unwrap())),
            kind,
            seq: u16::from_be_bytes([buf[9], buf[10]]),
            protocol: buf[11],
            payload: buf[FRAME_HEADER_LEN..].to_vec(),
        })
    }
}

/// Retransmission timer derived from the delay model: time on air for the
/// frame and its ACK, a round trip at maximum range, processing at both
/// ends, plus a fixed margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArqTiming {
    pub data_rate_bps: f64,
    pub max_range_m: f64,
    pub sound_speed_mps: f64,
    pub proc_delay: Duration,
    pub margin: Duration,
}

impl ArqTiming {
    pub fn timeout_for(&self, frame_len: usize) -> Duration {
        let on_air = (frame_len + FRAME_HEADER_LEN) as f64 / self.data_rate_bps;
        let flight = 2.0 * self.max_range_m / self.sound_speed_mps;
        Duration::from_secs_f64(on_air + flight) + 2 * self.proc_delay + self.margin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SendHandle(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkSendOutcome {
    Delivered(SendHandle),
    Failed(SendHandle),
}

impl LinkSendOutcome {
    pub fn handle(self) -> SendHandle {
        match self {
            Self::Delivered(h) | Self::Failed(h) => h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArqEvent {
    Transmit(Frame),
    ArmTimer { seq: u16, at: Time },
    Outcome(LinkSendOutcome),
    Deliver { src: NodeAddr, protocol: u8, payload: Vec<u8> },
}

#[derive(Debug)]
struct Queued {
    handle: SendHandle,
    dst: NodeAddr,
    protocol: u8,
    payload: Vec<u8>,
}

#[derive(Debug)]
struct Outstanding {
    send: Queued,
    seq: u16,
    attempts: u32,
}

/// Stop-and-wait ARQ endpoint for one link on one node.
///
/// Sends are queued; exactly one data frame is unacknowledged at a time. A
/// send is reported `Failed` after `1 + max_retries` transmissions without an
/// ACK. The receiving side ACKs every data frame addressed to it and passes
/// every copy up, retransmissions included.
#[derive(Debug)]
pub struct ReliableLink {
    address: NodeAddr,
    link_id: LinkId,
    mtu: usize,
    max_retries: u32,
    timing: ArqTiming,
    next_handle: u64,
    next_seq: u16,
    queue: VecDeque<Queued>,
    outstanding: Option<Outstanding>,
    events: Vec<ArqEvent>,
}

impl ReliableLink {
    pub fn new(address: NodeAddr, link_id: LinkId, mtu: usize, max_retries: u32, timing: ArqTiming) -> Self {
        Self {
            address,
            link_id,
            mtu,
            max_retries,
            timing,
            next_handle: 0,
            next_seq: 0,
            queue: VecDeque::new(),
            outstanding: None,
            events: Vec::new(),
        }
    }

    pub fn link_id(&self) -> &LinkId {
        &self.link_id
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn is_busy(&self) -> bool {
        self.outstanding.is_some()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn reliable_send(
        &mut self,
        dst: NodeAddr,
        protocol: u8,
        payload: Vec<u8>,
        now: Time,
    ) -> Result<SendHandle, LinkError> {
        if payload.len() > self.mtu {
            return Err(LinkError::MtuExceeded {
                len: payload.len(),
                mtu: self.mtu,
            });
        }
        if dst == self.address || dst.is_broadcast() {
            return Err(LinkError::BadDestination);
        }
        let handle = SendHandle(self.next_handle);
        self.next_handle += 1;
        self.queue.push_back(Queued {
            handle,
            dst,
            protocol,
            payload,
        });
        self.start_next(now);
        Ok(handle)
    }

    fn start_next(&mut self, now: Time) {
        if self.outstanding.is_some() {
            return;
        }
        if let Some(send) = self.queue.pop_front() {
            let seq = self.next_seq;
            self.next_seq = self.next_seq.wrapping_add(1);
            self.outstanding = Some(Outstanding {
                send,
                seq,
                attempts: 0,
            });
            self.transmit_outstanding(now);
        }
    }

    fn transmit_outstanding(&mut self, now: Time) {
        let out = self.outstanding.as_mut().expect("outstanding send");
        out.attempts += 1;
        let frame = Frame {
            src: self.address,
            dst: out.send.dst,
            kind: FrameKind::Data,
            seq: out.seq,
            protocol: out.send.protocol,
            payload: out.send.payload.clone(),
        };
        let at = now + self.timing.timeout_for(frame.encoded_len());
        let seq = out.seq;
        self.events.push(ArqEvent::Transmit(frame));
        self.events.push(ArqEvent::ArmTimer { seq, at });
    }

    fn finish(&mut self, delivered: bool, now: Time) {
        let out = self.outstanding.take().expect("outstanding send");
        let h = out.send.handle;
        self.events.push(ArqEvent::Outcome(if delivered {
            LinkSendOutcome::Delivered(h)
        } else {
            LinkSendOutcome::Failed(h)
        }));
        self.start_next(now);
    }

    pub fn on_frame(&mut self, frame: &Frame, now: Time) {
        if frame.dst != self.address {
            return;
        }
        match frame.kind {
            FrameKind::Data => {
                self.events.push(ArqEvent::Transmit(Frame {
                    src: self.address,
                    dst: frame.src,
                    kind: FrameKind::Ack,
                    seq: frame.seq,
                    protocol: 0,
                    payload: Vec::new(),
                }));
                self.events.push(ArqEvent::Deliver {
                    src: frame.src,
                    protocol: frame.protocol,
                    payload: frame.payload.clone(),
                });
            }
            FrameKind::Ack => {
                let matches = self
                    .outstanding
                    .as_ref()
                    .is_some_and(|o| o.seq == frame.seq && o.send.dst == frame.src);
                if matches {
                    self.finish(true, now);
                }
            }
            FrameKind::Beacon => {}
        }
    }

    pub fn on_timeout(&mut self, seq: u16, now: Time) {
        let Some(out) = self.outstanding.as_ref() else {
            return;
        };
        if out.seq != seq {
            return;
        }
        if out.attempts <= self.max_retries {
            self.transmit_outstanding(now);
        } else {
            self.finish(false, now);
        }
    }

    pub fn drain(&mut self) -> Vec<ArqEvent> {
        std::mem::take(&mut self.events)
    }
}
