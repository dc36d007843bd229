//! The DTN link agent.
//!
//! [`DtnEngine`] is a sans-IO state machine. Callers feed it application
//! requests, received frames, link outcomes and timer expiries; it answers
//! with [`Action`]s (frames to send, notifications for the application,
//! wake-ups to schedule) collected via [`DtnEngine::drain_actions`]. All
//! entry points take the caller's random generator so that a simulation
//! driven by one seeded generator is reproducible.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::time::Duration;

use log::{debug, trace};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::link::{Direction, LinkDescriptor, LinkError, LinkId, LinkManager, LinkSendOutcome};
use crate::pdu::{self, DtnPdu, Fingerprint};
use crate::store::{DatagramPriority, DtnStore, FragmentStatus, MessageId, StoreError};
use crate::{NodeAddr, Time};

pub const PROTOCOL_DATA: u8 = 0;
pub const PROTOCOL_ROUTING: u8 = 3;
pub const PROTOCOL_USER: u8 = 32;
/// Link-level protocol number of frames carrying a DTN PDU.
pub const PROTOCOL_DTN: u8 = 63;

pub const DEFAULT_DUPLICATE_CAPACITY: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// A link idle for this long broadcasts a beacon.
    pub beacon_timeout_s: u64,
    pub gc_period_s: u64,
    pub datagram_reset_period_s: u64,
    /// A neighbour not heard for this long is no longer sent to.
    pub link_expiry_s: u64,
    pub datagram_priority: DatagramPriority,
    pub short_circuit: bool,
    pub random_delay_max_ms: u64,
    pub short_circuit_protocols: BTreeSet<u8>,
    pub duplicate_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            beacon_timeout_s: 100,
            gc_period_s: 100,
            datagram_reset_period_s: 10,
            link_expiry_s: 1000,
            datagram_priority: DatagramPriority::Arrival,
            short_circuit: false,
            random_delay_max_ms: 5000,
            short_circuit_protocols: [PROTOCOL_DATA, PROTOCOL_USER].into_iter().collect(),
            duplicate_capacity: DEFAULT_DUPLICATE_CAPACITY,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.beacon_timeout_s == 0
            || self.gc_period_s == 0
            || self.datagram_reset_period_s == 0
            || self.link_expiry_s == 0
        {
            return Err("engine periods must be positive");
        }
        if self.duplicate_capacity == 0 {
            return Err("duplicate set capacity must be positive");
        }
        Ok(())
    }

    fn link_expiry(&self) -> Duration {
        Duration::from_secs(self.link_expiry_s)
    }
}

/// Bounded FIFO set of recently seen fingerprints.
#[derive(Debug)]
pub struct DuplicateSet {
    capacity: usize,
    seen: HashSet<Fingerprint>,
    order: VecDeque<Fingerprint>,
}

impl DuplicateSet {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            seen: HashSet::with_capacity(capacity),
            order: VecDeque::with_capacity(capacity),
        }
    }

    pub fn contains(&self, fp: &Fingerprint) -> bool {
        self.seen.contains(fp)
    }

    /// Returns false if `fp` was already present.
    pub fn insert(&mut self, fp: Fingerprint) -> bool {
        if !self.seen.insert(fp) {
            return false;
        }
        self.order.push_back(fp);
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatagramRequest {
    pub to: NodeAddr,
    pub data: Vec<u8>,
    pub protocol: u8,
    pub ttl_s: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefuseReason {
    MissingTtl,
    TtlTooLarge,
    InvalidProtocol,
    InvalidDestination,
    TooLarge,
    StorageFull,
    StorageError,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestResponse {
    Agree(MessageId),
    Refuse(RefuseReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppNotification {
    Delivery { to: NodeAddr, message_id: MessageId },
    Failure { to: NodeAddr, message_id: MessageId },
    /// `ttl_s` is the remaining lifetime carried by the PDU; absent for
    /// short-circuited frames.
    Received {
        from: NodeAddr,
        protocol: u8,
        data: Vec<u8>,
        ttl_s: Option<u32>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TimerKind {
    Beacon,
    Gc,
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Hand `payload` to the reliable link `link` for delivery to `to`.
    Send {
        link: LinkId,
        to: NodeAddr,
        protocol: u8,
        payload: Vec<u8>,
        message_id: MessageId,
    },
    Beacon { link: LinkId },
    Notify(AppNotification),
    /// Call [`DtnEngine::on_scheduled_send`] for `node` at `at`.
    ScheduleSend { node: NodeAddr, at: Time },
    /// Call [`DtnEngine::on_timer`] with `kind` at `at`.
    ScheduleTimer { kind: TimerKind, at: Time },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Text(String),
    Priority(DatagramPriority),
    Links(Vec<Option<LinkId>>),
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        Self::Bool(v)
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        Self::Int(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        Self::Text(v.to_owned())
    }
}

impl From<DatagramPriority> for ParamValue {
    fn from(v: DatagramPriority) -> Self {
        Self::Priority(v)
    }
}

impl From<Vec<Option<LinkId>>> for ParamValue {
    fn from(v: Vec<Option<LinkId>>) -> Self {
        Self::Links(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub pdus_sent: u64,
    pub short_circuited: u64,
    pub beacons_sent: u64,
    pub malformed_dropped: u64,
    pub duplicates_dropped: u64,
    pub fragments_rejected: u64,
}

#[derive(Clone, Debug)]
struct Transfer {
    message_id: MessageId,
    node: NodeAddr,
    len: usize,
}

pub struct DtnEngine {
    address: NodeAddr,
    config: EngineConfig,
    store: DtnStore,
    links: LinkManager,
    duplicates: DuplicateSet,
    transfers: HashMap<LinkId, Transfer>,
    scheduled: BTreeSet<NodeAddr>,
    actions: Vec<Action>,
    stats: EngineStats,
}

impl DtnEngine {
    pub fn new(address: NodeAddr, config: EngineConfig, store: DtnStore) -> Self {
        let duplicates = DuplicateSet::new(config.duplicate_capacity.max(1));
        Self {
            address,
            config,
            store,
            links: LinkManager::new(),
            duplicates,
            transfers: HashMap::new(),
            scheduled: BTreeSet::new(),
            actions: Vec::new(),
            stats: EngineStats::default(),
        }
    }

    pub fn address(&self) -> NodeAddr {
        self.address
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &DtnStore {
        &self.store
    }

    pub fn links(&self) -> &LinkManager {
        &self.links
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn duplicate_set(&self) -> &DuplicateSet {
        &self.duplicates
    }

    pub fn register_link(&mut self, desc: LinkDescriptor) -> Result<(), LinkError> {
        self.links.register_link(desc)
    }

    /// Rebuilds pending state from the spool after a restart.
    pub fn recover(&mut self, now: Time) -> Result<usize, StoreError> {
        self.store.recover(now.as_millis())
    }

    /// Arms the periodic timers. The first beacon check runs immediately.
    pub fn start(&mut self, now: Time) {
        self.schedule_timer(TimerKind::Beacon, now);
        self.schedule_timer(TimerKind::Gc, now + self.period(TimerKind::Gc));
        self.schedule_timer(TimerKind::Reset, now + self.period(TimerKind::Reset));
    }

    pub fn drain_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }

    pub fn transfer_in_progress(&self, node: NodeAddr) -> bool {
        self.transfers.values().any(|t| t.node == node)
    }

    pub fn busy_links(&self) -> usize {
        self.transfers.len()
    }

    fn notify(&mut self, n: AppNotification) {
        self.actions.push(Action::Notify(n));
    }

    fn period(&self, kind: TimerKind) -> Duration {
        Duration::from_secs(match kind {
            TimerKind::Beacon => self.config.beacon_timeout_s,
            TimerKind::Gc => self.config.gc_period_s,
            TimerKind::Reset => self.config.datagram_reset_period_s,
        })
    }

    fn schedule_timer(&mut self, kind: TimerKind, at: Time) {
        self.actions.push(Action::ScheduleTimer { kind, at });
    }

    pub fn on_datagram_request(
        &mut self,
        req: DatagramRequest,
        now: Time,
        rng: &mut dyn RngCore,
    ) -> RequestResponse {
        let ttl = match req.ttl_s {
            Some(t) if t > 0 => t,
            _ => return RequestResponse::Refuse(RefuseReason::MissingTtl),
        };
        if ttl > pdu::MAX_TTL {
            return RequestResponse::Refuse(RefuseReason::TtlTooLarge);
        }
        if req.protocol > pdu::MAX_PROTOCOL {
            return RequestResponse::Refuse(RefuseReason::InvalidProtocol);
        }
        if req.to == self.address || req.to.is_broadcast() {
            return RequestResponse::Refuse(RefuseReason::InvalidDestination);
        }
        if req.data.len() > pdu::MAX_START_PTR as usize {
            return RequestResponse::Refuse(RefuseReason::TooLarge);
        }
        let id = match self
            .store
            .put(&req.data, req.to, ttl, req.protocol, now.as_millis(), rng)
        {
            Ok(id) => id,
            Err(StoreError::StorageFull { .. }) => {
                return RequestResponse::Refuse(RefuseReason::StorageFull)
            }
            Err(e) => {
                debug!("node {}: store rejected datagram: {e}", self.address);
                return RequestResponse::Refuse(RefuseReason::StorageError);
            }
        };
        self.maybe_schedule_send(req.to, now, rng);
        RequestResponse::Agree(id)
    }

    /// A beacon or any other frame was heard from `node` on `link`.
    pub fn on_node_detected(&mut self, node: NodeAddr, link: &LinkId, now: Time, rng: &mut dyn RngCore) {
        if node == self.address || node.is_broadcast() {
            return;
        }
        if self.links.note_activity(node, link, now, Direction::Rx).is_err() {
            return;
        }
        self.maybe_schedule_send(node, now, rng);
    }

    fn maybe_schedule_send(&mut self, node: NodeAddr, now: Time, rng: &mut dyn RngCore) {
        if self.scheduled.contains(&node)
            || self.transfer_in_progress(node)
            || !self.store.has_pending_for(node, now.as_millis())
            || self
                .links
                .active_links_for(node, now, self.config.link_expiry())
                .is_empty()
        {
            return;
        }
        let delay = rng.gen_range(0..=self.config.random_delay_max_ms);
        self.scheduled.insert(node);
        self.actions.push(Action::ScheduleSend {
            node,
            at: now + Duration::from_millis(delay),
        });
    }

    /// A wake-up requested through [`Action::ScheduleSend`] has fired.
    pub fn on_scheduled_send(&mut self, node: NodeAddr, now: Time, rng: &mut dyn RngCore) {
        self.scheduled.remove(&node);
        self.send_next(node, now, rng);
    }

    /// Starts the next transfer towards `node` if a free active link exists.
    pub fn send_next(&mut self, node: NodeAddr, now: Time, rng: &mut dyn RngCore) {
        let now_ms = now.as_millis();
        let Some(link_id) = self
            .links
            .active_links_for(node, now, self.config.link_expiry())
            .into_iter()
            .find(|l| !self.transfers.contains_key(l))
        else {
            return;
        };
        let mtu = self.links.link(&link_id).map_or(0, |l| l.mtu);

        let in_flight: HashSet<&MessageId> = self.transfers.values().map(|t| &t.message_id).collect();
        let mut candidates: Vec<MessageId> = self
            .store
            .pending_for(node, now_ms, self.config.datagram_priority, rng)
            .into_iter()
            .filter(|id| !in_flight.contains(id))
            .collect();
        // A payload already part-way across goes first.
        candidates.sort_by_key(|id| self.store.get(id).map_or(0, |m| m.metadata.bytes_sent) == 0);

        for id in candidates {
            let msg = self.store.get(&id).expect("pending id");
            let meta = &msg.metadata;
            let ttl_s = (meta.expiry_at_ms.saturating_sub(now_ms) / 1000).min(pdu::MAX_TTL as u64) as u32;
            if ttl_s < 1 {
                self.store.mark_expired(&id).ok();
                self.notify(AppNotification::Failure { to: node, message_id: id });
                continue;
            }

            let short_circuit = self.config.short_circuit
                && meta.protocol != PROTOCOL_DTN
                && meta.protocol != PROTOCOL_ROUTING
                && self.config.short_circuit_protocols.contains(&meta.protocol)
                && meta.bytes_sent == 0
                && meta.size <= mtu;

            let (protocol, payload, len) = if short_circuit {
                self.stats.short_circuited += 1;
                (meta.protocol, msg.body.clone(), meta.size)
            } else {
                let start = meta.bytes_sent;
                let end = (start + (mtu - pdu::HEADER_LEN)).min(meta.size);
                let frag = DtnPdu {
                    ttl_s,
                    tbc: end < meta.size,
                    protocol: meta.protocol,
                    payload_id: meta.payload_id,
                    start_ptr: start as u32,
                    data: msg.body[start..end].to_vec(),
                };
                let bytes = pdu::encode(&frag).expect("fields validated on admission");
                self.stats.pdus_sent += 1;
                (PROTOCOL_DTN, bytes, end - start)
            };

            trace!(
                "node {} -> {node} via {link_id}: {id} ({len} octets, ttl {ttl_s}s)",
                self.address
            );
            self.links.note_activity(node, &link_id, now, Direction::Tx).ok();
            self.transfers.insert(
                link_id.clone(),
                Transfer {
                    message_id: id.clone(),
                    node,
                    len,
                },
            );
            self.actions.push(Action::Send {
                link: link_id,
                to: node,
                protocol,
                payload,
                message_id: id,
            });
            return;
        }
    }

    pub fn on_send_outcome(
        &mut self,
        link: &LinkId,
        outcome: LinkSendOutcome,
        now: Time,
        rng: &mut dyn RngCore,
    ) {
        let Some(t) = self.transfers.remove(link) else {
            return;
        };
        match outcome {
            LinkSendOutcome::Delivered(_) => {
                if let Ok(sent) = self.store.record_progress(&t.message_id, t.len) {
                    let size = self.store.get(&t.message_id).map_or(0, |m| m.metadata.size);
                    if sent >= size && self.store.mark_delivered(&t.message_id).is_ok() {
                        self.notify(AppNotification::Delivery {
                            to: t.node,
                            message_id: t.message_id,
                        });
                    }
                }
                self.send_next(t.node, now, rng);
            }
            LinkSendOutcome::Failed(_) => {
                debug!("node {}: transfer of {} to {} failed", self.address, t.message_id, t.node);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_frame_received(
        &mut self,
        src: NodeAddr,
        link: &LinkId,
        protocol: u8,
        payload: &[u8],
        addressed_to_self: bool,
        now: Time,
        rng: &mut dyn RngCore,
    ) {
        self.on_node_detected(src, link, now, rng);
        if !addressed_to_self {
            return;
        }
        if protocol != PROTOCOL_DTN {
            self.notify(AppNotification::Received {
                from: src,
                protocol,
                data: payload.to_vec(),
                ttl_s: None,
            });
            return;
        }

        let Ok(pdu) = pdu::decode(payload, src) else {
            self.stats.malformed_dropped += 1;
            return;
        };
        if !self.duplicates.insert(pdu::fingerprint(&pdu, src)) {
            self.stats.duplicates_dropped += 1;
            return;
        }

        if !pdu.tbc && pdu.start_ptr == 0 {
            self.notify(AppNotification::Received {
                from: src,
                protocol: pdu.protocol,
                data: pdu.data,
                ttl_s: Some(pdu.ttl_s),
            });
            return;
        }
        match self.store.insert_fragment(
            (src, pdu.payload_id),
            pdu.start_ptr,
            &pdu.data,
            pdu.tbc,
            now.as_millis(),
        ) {
            Ok(FragmentStatus::Complete(body)) => self.notify(AppNotification::Received {
                from: src,
                protocol: pdu.protocol,
                data: body,
                ttl_s: Some(pdu.ttl_s),
            }),
            Ok(FragmentStatus::Incomplete) => {}
            Err(e) => {
                debug!("node {}: dropping payload from {src}: {e}", self.address);
                self.stats.fragments_rejected += 1;
            }
        }
    }

    pub fn on_timer(&mut self, kind: TimerKind, now: Time, rng: &mut dyn RngCore) {
        match kind {
            TimerKind::Beacon => {
                let idle = Duration::from_secs(self.config.beacon_timeout_s);
                for link in self.links.idle_links(now, idle) {
                    self.links
                        .note_activity(NodeAddr::BROADCAST, &link, now, Direction::Tx)
                        .ok();
                    self.stats.beacons_sent += 1;
                    self.actions.push(Action::Beacon { link });
                }
            }
            TimerKind::Gc => {
                let now_ms = now.as_millis();
                for id in self.store.expire_due(now_ms) {
                    let to = self.store.get(&id).map_or(NodeAddr::BROADCAST, |m| m.metadata.next_hop);
                    self.notify(AppNotification::Failure { to, message_id: id });
                }
                self.store.gc(now_ms);
                let horizon = now_ms.saturating_sub(self.config.link_expiry_s * 1000);
                self.store.purge_stale_reassembly(horizon);
            }
            TimerKind::Reset => {
                for node in self.links.active_neighbors(now, self.config.link_expiry()) {
                    self.maybe_schedule_send(node, now, rng);
                }
            }
        }
        self.schedule_timer(kind, now + self.period(kind));
    }

    /// Runtime parameter update. Unknown names and invalid values are
    /// rejected without changing any state.
    pub fn set_parameter(&mut self, name: &str, value: impl Into<ParamValue>) -> bool {
        let value = value.into();
        let positive = |v: &ParamValue| match v {
            ParamValue::Int(n) if *n > 0 => Some(*n as u64),
            _ => None,
        };
        match name {
            "shortCircuit" => match value {
                ParamValue::Bool(b) => self.config.short_circuit = b,
                _ => return false,
            },
            "beaconTimeout" => match positive(&value) {
                Some(n) => self.config.beacon_timeout_s = n,
                None => return false,
            },
            "GCPeriod" => match positive(&value) {
                Some(n) => self.config.gc_period_s = n,
                None => return false,
            },
            "datagramResetPeriod" => match positive(&value) {
                Some(n) => self.config.datagram_reset_period_s = n,
                None => return false,
            },
            "linkExpiryTime" => match positive(&value) {
                Some(n) => self.config.link_expiry_s = n,
                None => return false,
            },
            "datagramPriority" => {
                let p = match value {
                    ParamValue::Priority(p) => p,
                    ParamValue::Text(s) => match s.parse() {
                        Ok(p) => p,
                        Err(()) => return false,
                    },
                    _ => return false,
                };
                self.config.datagram_priority = p;
            }
            "linkPriority" => match value {
                ParamValue::Links(order) => return self.links.set_link_priority(&order),
                _ => return false,
            },
            _ => return false,
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Rig {
        _dir: tempfile::TempDir,
        engine: DtnEngine,
        rng: ChaCha8Rng,
    }

    fn rig(config: EngineConfig, mtu: usize) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let store = DtnStore::open(dir.path()).unwrap();
        let mut engine = DtnEngine::new(NodeAddr(1), config, store);
        engine
            .register_link(LinkDescriptor::new("a", mtu, 5000.0, true))
            .unwrap();
        Rig {
            _dir: dir,
            engine,
            rng: ChaCha8Rng::seed_from_u64(3),
        }
    }

    fn req(to: u32, data: &[u8], ttl: Option<u32>) -> DatagramRequest {
        DatagramRequest {
            to: NodeAddr(to),
            data: data.to_vec(),
            protocol: PROTOCOL_DATA,
            ttl_s: ttl,
        }
    }

    fn sends(actions: &[Action]) -> Vec<(LinkId, u8, Vec<u8>)> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send {
                    link,
                    protocol,
                    payload,
                    ..
                } => Some((link.clone(), *protocol, payload.clone())),
                _ => None,
            })
            .collect()
    }

    fn link() -> LinkId {
        "a".into()
    }

    #[test]
    fn duplicate_set_evicts_oldest() {
        let mut d = DuplicateSet::new(2);
        assert!(d.insert(Fingerprint(1)));
        assert!(!d.insert(Fingerprint(1)));
        d.insert(Fingerprint(2));
        d.insert(Fingerprint(3));
        assert!(!d.contains(&Fingerprint(1)));
        assert!(d.contains(&Fingerprint(3)));
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn refuses_without_ttl() {
        let mut r = rig(EngineConfig::default(), 1600);
        for ttl in [None, Some(0)] {
            assert_eq!(
                r.engine
                    .on_datagram_request(req(2, b"x", ttl), Time::ZERO, &mut r.rng),
                RequestResponse::Refuse(RefuseReason::MissingTtl)
            );
        }
        assert!(r.engine.store().is_empty());
        assert_eq!(
            r.engine
                .on_datagram_request(req(1, b"x", Some(5)), Time::ZERO, &mut r.rng),
            RequestResponse::Refuse(RefuseReason::InvalidDestination)
        );
    }

    #[test]
    fn detection_schedules_send_only_with_pending() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::ZERO, &mut r.rng);
        assert!(r.engine.drain_actions().is_empty());

        r.engine
            .on_datagram_request(req(2, &[1; 40], Some(100)), Time::ZERO, &mut r.rng);
        let acts = r.engine.drain_actions();
        let Some(Action::ScheduleSend { node, at }) = acts.first() else {
            panic!("expected a scheduled send, got {acts:?}")
        };
        assert_eq!(*node, NodeAddr(2));
        assert!(*at <= Time::from_millis(5000));

        // Already scheduled: a second detection adds nothing.
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::from_secs(1), &mut r.rng);
        assert!(r.engine.drain_actions().is_empty());
    }

    #[test]
    fn snooped_frame_counts_as_detection() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine
            .on_datagram_request(req(2, &[1; 4], Some(100)), Time::ZERO, &mut r.rng);
        r.engine
            .on_frame_received(NodeAddr(2), &link(), PROTOCOL_DTN, &[0; 8], false, Time::ZERO, &mut r.rng);
        let acts = r.engine.drain_actions();
        assert!(matches!(acts.as_slice(), [Action::ScheduleSend { .. }]));
    }

    #[test]
    fn single_pdu_and_delivery_notification() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::ZERO, &mut r.rng);
        let RequestResponse::Agree(id) =
            r.engine
                .on_datagram_request(req(2, &[5; 40], Some(100)), Time::ZERO, &mut r.rng)
        else {
            panic!()
        };
        r.engine.drain_actions();
        r.engine
            .send_next(NodeAddr(2), Time::from_millis(2500), &mut r.rng);
        let s = sends(&r.engine.drain_actions());
        assert_eq!(s.len(), 1);
        let p = pdu::decode(&s[0].2, NodeAddr(1)).unwrap();
        assert_eq!((p.tbc, p.start_ptr, p.ttl_s), (false, 0, 97));
        assert_eq!(p.data, vec![5; 40]);

        // Stop-and-wait: nothing else goes out on the busy link.
        r.engine
            .send_next(NodeAddr(2), Time::from_secs(3), &mut r.rng);
        assert!(sends(&r.engine.drain_actions()).is_empty());

        r.engine.on_send_outcome(
            &link(),
            LinkSendOutcome::Delivered(crate::link::SendHandle(0)),
            Time::from_secs(4),
            &mut r.rng,
        );
        assert_eq!(
            r.engine.drain_actions(),
            vec![Action::Notify(AppNotification::Delivery {
                to: NodeAddr(2),
                message_id: id
            })]
        );
    }

    #[test]
    fn fragments_follow_mtu() {
        let mut r = rig(EngineConfig::default(), 108);
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::ZERO, &mut r.rng);
        let body: Vec<u8> = (0..300).map(|i| i as u8).collect();
        r.engine
            .on_datagram_request(req(2, &body, Some(100)), Time::ZERO, &mut r.rng);
        r.engine.drain_actions();
        let mut seen = Vec::new();
        r.engine.send_next(NodeAddr(2), Time::ZERO, &mut r.rng);
        for i in 0..3 {
            let s = sends(&r.engine.drain_actions());
            assert_eq!(s.len(), 1, "fragment {i}");
            let p = pdu::decode(&s[0].2, NodeAddr(1)).unwrap();
            seen.push((p.start_ptr, p.data.len(), p.tbc));
            r.engine.on_send_outcome(
                &link(),
                LinkSendOutcome::Delivered(crate::link::SendHandle(i)),
                Time::from_secs(i + 1),
                &mut r.rng,
            );
        }
        assert_eq!(seen, vec![(0, 100, true), (100, 100, true), (200, 100, false)]);
        let last = r.engine.drain_actions();
        assert!(matches!(
            last.as_slice(),
            [Action::Notify(AppNotification::Delivery { .. })]
        ));
    }

    #[test]
    fn expired_before_send_is_failed() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine
            .on_datagram_request(req(2, b"x", Some(2)), Time::ZERO, &mut r.rng);
        r.engine.drain_actions();
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::from_millis(1500), &mut r.rng);
        r.engine.drain_actions();
        r.engine
            .send_next(NodeAddr(2), Time::from_millis(1500), &mut r.rng);
        let acts = r.engine.drain_actions();
        assert!(sends(&acts).is_empty());
        assert!(matches!(
            acts.as_slice(),
            [Action::Notify(AppNotification::Failure { .. })]
        ));
        // GC later must not report it again.
        r.engine.on_timer(TimerKind::Gc, Time::from_secs(10), &mut r.rng);
        assert!(!r
            .engine
            .drain_actions()
            .iter()
            .any(|a| matches!(a, Action::Notify(_))));
    }

    #[test]
    fn failed_send_keeps_message() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::ZERO, &mut r.rng);
        r.engine
            .on_datagram_request(req(2, b"x", Some(100)), Time::ZERO, &mut r.rng);
        r.engine
            .on_scheduled_send(NodeAddr(2), Time::ZERO, &mut r.rng);
        r.engine.drain_actions();
        r.engine.on_send_outcome(
            &link(),
            LinkSendOutcome::Failed(crate::link::SendHandle(0)),
            Time::from_secs(9),
            &mut r.rng,
        );
        assert!(r.engine.drain_actions().is_empty());
        assert_eq!(r.engine.store().pending(9_000).count(), 1);
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::from_secs(20), &mut r.rng);
        assert!(matches!(
            r.engine.drain_actions().as_slice(),
            [Action::ScheduleSend { .. }]
        ));
    }

    #[test]
    fn beacon_timer_respects_idle_clock() {
        let mut r = rig(EngineConfig::default(), 1600);
        r.engine.on_timer(TimerKind::Beacon, Time::ZERO, &mut r.rng);
        let acts = r.engine.drain_actions();
        assert!(acts.contains(&Action::Beacon { link: link() }));
        assert!(acts.contains(&Action::ScheduleTimer {
            kind: TimerKind::Beacon,
            at: Time::from_secs(100)
        }));

        r.engine
            .on_timer(TimerKind::Beacon, Time::from_secs(99), &mut r.rng);
        assert!(!r.engine.drain_actions().contains(&Action::Beacon { link: link() }));
        r.engine
            .on_timer(TimerKind::Beacon, Time::from_secs(100), &mut r.rng);
        assert!(r.engine.drain_actions().contains(&Action::Beacon { link: link() }));

        // A datagram sent 10 s ago suppresses the beacon.
        r.engine
            .on_node_detected(NodeAddr(2), &link(), Time::from_secs(190), &mut r.rng);
        r.engine
            .on_datagram_request(req(2, b"x", Some(500)), Time::from_secs(190), &mut r.rng);
        r.engine
            .send_next(NodeAddr(2), Time::from_secs(190), &mut r.rng);
        r.engine.drain_actions();
        r.engine
            .on_timer(TimerKind::Beacon, Time::from_secs(200), &mut r.rng);
        assert!(!r.engine.drain_actions().contains(&Action::Beacon { link: link() }));
    }

    #[test]
    fn gc_reports_expiry_once() {
        let mut r = rig(EngineConfig::default(), 1600);
        let RequestResponse::Agree(id) =
            r.engine
                .on_datagram_request(req(2, b"x", Some(50)), Time::ZERO, &mut r.rng)
        else {
            panic!()
        };
        r.engine.on_timer(TimerKind::Gc, Time::from_secs(100), &mut r.rng);
        let fails: Vec<_> = r
            .engine
            .drain_actions()
            .into_iter()
            .filter(|a| matches!(a, Action::Notify(AppNotification::Failure { .. })))
            .collect();
        assert_eq!(
            fails,
            vec![Action::Notify(AppNotification::Failure {
                to: NodeAddr(2),
                message_id: id
            })]
        );
        r.engine.on_timer(TimerKind::Gc, Time::from_secs(200), &mut r.rng);
        assert!(!r
            .engine
            .drain_actions()
            .iter()
            .any(|a| matches!(a, Action::Notify(_))));
    }

    #[test]
    fn parameters() {
        let mut r = rig(EngineConfig::default(), 1600);
        assert!(r.engine.set_parameter("datagramPriority", DatagramPriority::Expiry));
        assert_eq!(r.engine.config().datagram_priority, DatagramPriority::Expiry);
        assert!(r.engine.set_parameter("datagramPriority", "random"));
        assert!(!r.engine.set_parameter("datagramPriority", "sideways"));
        assert!(!r.engine.set_parameter("beaconTimeout", -5i64));
        assert_eq!(r.engine.config().beacon_timeout_s, 100);
        assert!(r.engine.set_parameter("beaconTimeout", 30i64));
        assert!(r.engine.set_parameter("shortCircuit", true));
        assert!(!r.engine.set_parameter("shortCircuit", 1i64));
        assert!(!r.engine.set_parameter("noSuchThing", true));
        assert!(!r.engine.set_parameter("linkPriority", vec![Some(LinkId::from("zz"))]));
        assert!(r.engine.set_parameter("linkPriority", vec![Some(link())]));
    }

    #[test]
    fn received_pdu_and_duplicate() {
        let mut r = rig(EngineConfig::default(), 1600);
        let p = DtnPdu {
            ttl_s: 60,
            tbc: false,
            protocol: PROTOCOL_ROUTING,
            payload_id: 9,
            start_ptr: 0,
            data: b"hi".to_vec(),
        };
        let bytes = pdu::encode(&p).unwrap();
        for _ in 0..2 {
            r.engine
                .on_frame_received(NodeAddr(2), &link(), PROTOCOL_DTN, &bytes, true, Time::ZERO, &mut r.rng);
        }
        let received: Vec<_> = r
            .engine
            .drain_actions()
            .into_iter()
            .filter(|a| matches!(a, Action::Notify(AppNotification::Received { .. })))
            .collect();
        assert_eq!(
            received,
            vec![Action::Notify(AppNotification::Received {
                from: NodeAddr(2),
                protocol: PROTOCOL_ROUTING,
                data: b"hi".to_vec(),
                ttl_s: Some(60)
            })]
        );
        assert_eq!(r.engine.stats().duplicates_dropped, 1);

        r.engine
            .on_frame_received(NodeAddr(2), &link(), PROTOCOL_DTN, &[1, 2], true, Time::ZERO, &mut r.rng);
        assert_eq!(r.engine.stats().malformed_dropped, 1);
    }
}
