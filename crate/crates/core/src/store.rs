//! Non-volatile message spool.
//!
//! Every accepted message lives in its own file named after its message id:
//!
//! ```text
//! [next hop: u32 BE][expiry instant, ms: u64 BE][protocol: u8][body ...]
//! ```
//!
//! Message ids are `<counter:010>-<payload id:03>`, so the PDU payload id
//! survives a restart without a separate index. Files are written to a
//! temporary name and renamed into place before the in-memory entry exists.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeAddr;

pub const FILE_PREAMBLE_LEN: usize = 13;
pub const DEFAULT_BUDGET_BYTES: u64 = 16 * 1024 * 1024;

const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storing {needed} octets would exceed the {budget}-octet budget")]
    StorageFull { needed: u64, budget: u64 },

    #[error("TTL must be positive")]
    InvalidTtl,

    #[error("unknown message id {0}")]
    UnknownId(MessageId),

    #[error("message {0} is not pending")]
    NotPending(MessageId),

    #[error("corrupt spool file {path:?}: {reason}")]
    CorruptFile { path: PathBuf, reason: &'static str },

    #[error("fragment overlaps previously received data with different content")]
    OverlapMismatch,

    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessageId(String);

impl MessageId {
    fn new(seq: u64, payload_id: u8) -> Self {
        MessageId(format!("{seq:010}-{payload_id:03}"))
    }

    fn parse(name: &str) -> Option<(u64, u8)> {
        let (seq, pid) = name.split_once('-')?;
        if seq.len() != 10 || pid.len() != 3 {
            return None;
        }
        Some((seq.parse().ok()?, pid.parse().ok()?))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MessageState {
    Pending,
    Delivered,
    Expired,
}

/// Order in which pending messages are drained towards a neighbour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DatagramPriority {
    #[default]
    Arrival,
    Expiry,
    Random,
}

impl std::str::FromStr for DatagramPriority {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_uppercase().as_str() {
            "ARRIVAL" => Ok(Self::Arrival),
            "EXPIRY" => Ok(Self::Expiry),
            "RANDOM" => Ok(Self::Random),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DtnPduMetadata {
    pub message_id: MessageId,
    pub next_hop: NodeAddr,
    pub expiry_at_ms: u64,
    pub bytes_sent: usize,
    pub arrival_at_ms: u64,
    pub state: MessageState,
    pub protocol: u8,
    pub payload_id: u8,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredMessage {
    pub metadata: DtnPduMetadata,
    pub body: Vec<u8>,
    seq: u64,
}

impl StoredMessage {
    fn file_len(&self) -> u64 {
        (FILE_PREAMBLE_LEN + self.body.len()) as u64
    }

    fn to_file_bytes(&self) -> Vec<u8> {
        let m = &self.metadata;
        let mut out = Vec::with_capacity(FILE_PREAMBLE_LEN + self.body.len());
        out.extend_from_slice(&m.next_hop.0.to_be_bytes());
        out.extend_from_slice(&m.expiry_at_ms.to_be_bytes());
        out.push(m.protocol);
        out.extend_from_slice(&self.body);
        out
    }
}

/// Sender-side key of a payload under reassembly.
pub type ReassemblyKey = (NodeAddr, u8);

#[derive(Debug, PartialEq, Eq)]
pub enum FragmentStatus {
    Complete(Vec<u8>),
    Incomplete,
}

#[derive(Debug, Default)]
pub struct ReassemblyBuffer {
    /// Disjoint, non-adjacent `[start, end)` ranges keyed by start.
    spans: BTreeMap<usize, usize>,
    final_length: Option<usize>,
    data: Vec<u8>,
    last_update_ms: u64,
}

impl ReassemblyBuffer {
    fn insert(&mut self, start: usize, frag: &[u8], tbc: bool) -> Result<(), StoreError> {
        let end = start + frag.len();
        if !tbc {
            match self.final_length {
                Some(len) if len != end => return Err(StoreError::OverlapMismatch),
                _ => {}
            }
            if self.spans.values().any(|&e| e > end) {
                return Err(StoreError::OverlapMismatch);
            }
            self.final_length = Some(end);
        } else if self.final_length.is_some_and(|len| end > len) {
            return Err(StoreError::OverlapMismatch);
        }
        if frag.is_empty() {
            return Ok(());
        }

        for (&s, &e) in self.spans.range(..end) {
            let lo = s.max(start);
            let hi = e.min(end);
            if lo < hi && self.data[lo..hi] != frag[lo - start..hi - start] {
                return Err(StoreError::OverlapMismatch);
            }
        }

        if self.data.len() < end {
            self.data.resize(end, 0);
        }
        self.data[start..end].copy_from_slice(frag);

        let mut new_start = start;
        let mut new_end = end;
        let touching: Vec<usize> = self
            .spans
            .range(..=end)
            .filter(|(_, &e)| e >= start)
            .map(|(&s, _)| s)
            .collect();
        for s in touching {
            let e = self.spans.remove(&s).unwrap();
            new_start = new_start.min(s);
            new_end = new_end.max(e);
        }
        self.spans.insert(new_start, new_end);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        match self.final_length {
            Some(0) => true,
            Some(len) => self.spans.get(&0) == Some(&len),
            None => false,
        }
    }

    pub fn span_count(&self) -> usize {
        self.spans.len()
    }
}

pub struct DtnStore {
    dir: PathBuf,
    budget: u64,
    used: u64,
    next_seq: u64,
    messages: BTreeMap<MessageId, StoredMessage>,
    reassembly: HashMap<ReassemblyKey, ReassemblyBuffer>,
    skipped: Vec<PathBuf>,
}

impl DtnStore {
    /// Opens a spool over `dir`, creating it if needed. Existing files are
    /// not loaded until [`DtnStore::recover`] is called.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::with_budget(dir, DEFAULT_BUDGET_BYTES)
    }

    pub fn with_budget(dir: impl Into<PathBuf>, budget: u64) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            budget,
            used: 0,
            next_seq: 0,
            messages: BTreeMap::new(),
            reassembly: HashMap::new(),
            skipped: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    fn path_of(&self, id: &MessageId) -> PathBuf {
        self.dir.join(id.as_str())
    }

    pub fn put(
        &mut self,
        body: &[u8],
        next_hop: NodeAddr,
        ttl_s: u32,
        protocol: u8,
        now_ms: u64,
        rng: &mut dyn RngCore,
    ) -> Result<MessageId, StoreError> {
        if ttl_s == 0 {
            return Err(StoreError::InvalidTtl);
        }
        let needed = (FILE_PREAMBLE_LEN + body.len()) as u64;
        if self.used + needed > self.budget {
            return Err(StoreError::StorageFull {
                needed,
                budget: self.budget,
            });
        }

        let seq = self.next_seq;
        let payload_id: u8 = rng.gen();
        let id = MessageId::new(seq, payload_id);
        let msg = StoredMessage {
            metadata: DtnPduMetadata {
                message_id: id.clone(),
                next_hop,
                expiry_at_ms: now_ms + u64::from(ttl_s) * 1000,
                bytes_sent: 0,
                arrival_at_ms: now_ms,
                state: MessageState::Pending,
                protocol,
                payload_id,
                size: body.len(),
            },
            body: body.to_vec(),
            seq,
        };

        let tmp = self.dir.join(format!("{TMP_PREFIX}{id}"));
        fs::write(&tmp, msg.to_file_bytes())?;
        fs::rename(&tmp, self.path_of(&id))?;

        self.next_seq += 1;
        self.used += needed;
        self.messages.insert(id.clone(), msg);
        Ok(id)
    }

    pub fn get(&self, id: &MessageId) -> Option<&StoredMessage> {
        self.messages.get(id)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    fn is_live(m: &StoredMessage, now_ms: u64) -> bool {
        m.metadata.state == MessageState::Pending && m.metadata.expiry_at_ms > now_ms
    }

    pub fn pending(&self, now_ms: u64) -> impl Iterator<Item = &StoredMessage> {
        self.messages.values().filter(move |m| Self::is_live(m, now_ms))
    }

    pub fn has_pending_for(&self, next_hop: NodeAddr, now_ms: u64) -> bool {
        self.pending(now_ms).any(|m| m.metadata.next_hop == next_hop)
    }

    pub fn pending_for(
        &self,
        next_hop: NodeAddr,
        now_ms: u64,
        priority: DatagramPriority,
        rng: &mut dyn RngCore,
    ) -> Vec<MessageId> {
        let mut live: Vec<&StoredMessage> = self
            .pending(now_ms)
            .filter(|m| m.metadata.next_hop == next_hop)
            .collect();
        match priority {
            DatagramPriority::Arrival => live.sort_by_key(|m| (m.metadata.arrival_at_ms, m.seq)),
            DatagramPriority::Expiry => live.sort_by_key(|m| (m.metadata.expiry_at_ms, m.seq)),
            DatagramPriority::Random => live.shuffle(rng),
        }
        live.into_iter().map(|m| m.metadata.message_id.clone()).collect()
    }

    fn pending_mut(&mut self, id: &MessageId) -> Result<&mut StoredMessage, StoreError> {
        let msg = self
            .messages
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownId(id.clone()))?;
        if msg.metadata.state != MessageState::Pending {
            return Err(StoreError::NotPending(id.clone()));
        }
        Ok(msg)
    }

    /// Records `octets` more of the body as acknowledged by the next hop and
    /// returns the new total.
    pub fn record_progress(&mut self, id: &MessageId, octets: usize) -> Result<usize, StoreError> {
        let msg = self.pending_mut(id)?;
        let m = &mut msg.metadata;
        m.bytes_sent = (m.bytes_sent + octets).min(m.size);
        Ok(m.bytes_sent)
    }

    pub fn mark_delivered(&mut self, id: &MessageId) -> Result<(), StoreError> {
        self.pending_mut(id)?.metadata.state = MessageState::Delivered;
        Ok(())
    }

    pub fn mark_expired(&mut self, id: &MessageId) -> Result<(), StoreError> {
        self.pending_mut(id)?.metadata.state = MessageState::Expired;
        Ok(())
    }

    /// Marks every pending message with `expiry_at <= now` as expired and
    /// returns the ids that changed state.
    pub fn expire_due(&mut self, now_ms: u64) -> Vec<MessageId> {
        let mut out = Vec::new();
        for msg in self.messages.values_mut() {
            let m = &mut msg.metadata;
            if m.state == MessageState::Pending && m.expiry_at_ms <= now_ms {
                m.state = MessageState::Expired;
                out.push(m.message_id.clone());
            }
        }
        out
    }

    /// Expires due messages, then deletes every delivered or expired message
    /// from disk. Returns the removed ids.
    pub fn gc(&mut self, now_ms: u64) -> Vec<MessageId> {
        self.expire_due(now_ms);
        let doomed: Vec<MessageId> = self
            .messages
            .values()
            .filter(|m| m.metadata.state != MessageState::Pending)
            .map(|m| m.metadata.message_id.clone())
            .collect();
        for id in &doomed {
            let msg = self.messages.remove(id).unwrap();
            self.used -= msg.file_len();
            if let Err(e) = fs::remove_file(self.path_of(id)) {
                if e.kind() != io::ErrorKind::NotFound {
                    warn!("failed to remove spool file {id}: {e}");
                }
            }
        }
        doomed
    }

    /// Rebuilds the in-memory index from the spool directory. Expired files
    /// are deleted; unreadable ones are skipped and left in place.
    pub fn recover(&mut self, now_ms: u64) -> Result<usize, StoreError> {
        self.skipped.clear();
        let mut restored = 0;
        let mut names: Vec<_> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        names.sort();

        for path in names {
            match self.load_file(&path, now_ms) {
                Ok(Some(msg)) => {
                    self.next_seq = self.next_seq.max(msg.seq + 1);
                    self.used += msg.file_len();
                    self.messages.insert(msg.metadata.message_id.clone(), msg);
                    restored += 1;
                }
                Ok(None) => {}
                Err(e) => {
                    warn!("skipping during recovery: {e}");
                    self.skipped.push(path);
                }
            }
        }
        debug!("recovered {restored} messages from {:?}", self.dir);
        Ok(restored)
    }

    fn load_file(&self, path: &Path, now_ms: u64) -> Result<Option<StoredMessage>, StoreError> {
        let corrupt = |reason| StoreError::CorruptFile {
            path: path.to_path_buf(),
            reason,
        };
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| corrupt("file name is not valid UTF-8"))?;
        if name.starts_with(TMP_PREFIX) {
            fs::remove_file(path)?;
            return Ok(None);
        }
        let (seq, payload_id) = MessageId::parse(name).ok_or_else(|| corrupt("unrecognised file name"))?;
        let id = MessageId::new(seq, payload_id);
        if self.messages.contains_key(&id) {
            return Ok(None);
        }

        let bytes = fs::read(path)?;
        if bytes.len() < FILE_PREAMBLE_LEN {
            return Err(corrupt("file shorter than preamble"));
        }
        let next_hop = NodeAddr(u32::from_be_bytes(bytes[0..4].try_into().unwrap()));
        let expiry_at_ms = u64::from_be_bytes(bytes[4..12].try_into().unwrap());
        let protocol = bytes[12];
        if expiry_at_ms <= now_ms {
            fs::remove_file(path)?;
            return Ok(None);
        }
        let body = bytes[FILE_PREAMBLE_LEN..].to_vec();
        Ok(Some(StoredMessage {
            metadata: DtnPduMetadata {
                message_id: id,
                next_hop,
                expiry_at_ms,
                bytes_sent: 0,
                arrival_at_ms: now_ms,
                state: MessageState::Pending,
                protocol,
                payload_id,
                size: body.len(),
            },
            body,
            seq,
        }))
    }

    /// Files skipped as corrupt by the last [`DtnStore::recover`].
    pub fn skipped_files(&self) -> &[PathBuf] {
        &self.skipped
    }

    pub fn insert_fragment(
        &mut self,
        key: ReassemblyKey,
        start_ptr: u32,
        data: &[u8],
        tbc: bool,
        now_ms: u64,
    ) -> Result<FragmentStatus, StoreError> {
        let buf = self.reassembly.entry(key).or_default();
        buf.last_update_ms = now_ms;
        if let Err(e) = buf.insert(start_ptr as usize, data, tbc) {
            self.reassembly.remove(&key);
            return Err(e);
        }
        if buf.is_complete() {
            let mut buf = self.reassembly.remove(&key).unwrap();
            buf.data.truncate(buf.final_length.unwrap_or(0));
            return Ok(FragmentStatus::Complete(buf.data));
        }
        Ok(FragmentStatus::Incomplete)
    }

    pub fn reassembly_buffer(&self, key: &ReassemblyKey) -> Option<&ReassemblyBuffer> {
        self.reassembly.get(key)
    }

    /// Drops partial payloads that have not grown since `before_ms`.
    pub fn purge_stale_reassembly(&mut self, before_ms: u64) -> usize {
        let n = self.reassembly.len();
        self.reassembly.retain(|_, b| b.last_update_ms >= before_ms);
        n - self.reassembly.len()
    }
}
