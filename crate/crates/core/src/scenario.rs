//! Scenario configuration, the simulation harness that wires engines, links
//! and the channel together, and metrics output.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    Action, AppNotification, DatagramRequest, DtnEngine, EngineConfig, EngineStats,
    RequestResponse, TimerKind, PROTOCOL_DTN, PROTOCOL_ROUTING,
};
use crate::link::{ArqEvent, ArqTiming, Frame, FrameKind, LinkDescriptor, LinkId, LinkSendOutcome, ReliableLink, SendHandle};
use crate::netsim::{seeded_rng, Channel, ChannelParams, EventQueue, NodeState, SimError};
use crate::pdu;
use crate::store::{DtnStore, MessageId, StoreError};
use crate::{NodeAddr, Time};

/// `[final destination][origin][message number]`, each a big-endian u32.
pub const APP_HEADER_LEN: usize = 12;
pub const LINK_NAME: &str = "acoustic";
pub const SAMPLE_INTERVAL_S: u64 = 10;

const MULTIHOP_JSON: &str = include_str!("../scenarios/multihop.json");
const DATAMULE_JSON: &str = include_str!("../scenarios/datamule.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{origin}:{line}:{column}: {msg}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("{origin}: {msg}")]
    Invalid { origin: String, msg: String },

    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Dtn,
    /// Plain stop-and-wait link with no storage: a send that exhausts its
    /// retries is dropped.
    Reliable,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dtn => "dtn",
            Mode::Reliable => "reliable",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dtn" => Ok(Mode::Dtn),
            "reliable" | "baseline" => Ok(Mode::Reliable),
            _ => Err(format!("unknown mode {s:?} (expected dtn or reliable)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkParams {
    pub mtu: usize,
    pub max_retries: u32,
    pub timeout_margin_ms: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            mtu: 1600,
            max_retries: 3,
            timeout_margin_ms: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Faults {
    /// Lose the first ACK sent for every data frame.
    pub drop_first_ack: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficSpec {
    pub source: NodeAddr,
    pub destination: NodeAddr,
    #[serde(rename = "message_size_B")]
    pub message_size_b: usize,
    pub period_s: f64,
    pub count: u32,
    pub ttl_s: u32,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_protocol")]
    pub protocol: u8,
}

fn default_protocol() -> u8 {
    PROTOCOL_ROUTING
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub node: NodeAddr,
    pub destination: NodeAddr,
    pub next_hop: NodeAddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(flatten)]
    pub state: NodeState,
    #[serde(default)]
    pub name: String,
    /// Overrides the scenario-wide engine settings for this node.
    #[serde(default)]
    pub engine: Option<EngineConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub channel: ChannelParams,
    #[serde(default)]
    pub link: LinkParams,
    pub traffic: Vec<TrafficSpec>,
    /// Entries absent from the table mean the destination is one hop away.
    #[serde(default)]
    pub next_hop_table: Vec<RouteEntry>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub mode: Mode,
    pub duration_s: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub faults: Faults,
}

/// Resolves a built-in name (`multihop`, `datamule`) or reads a JSON file.
pub fn load_scenario(name_or_path: &str) -> Result<ScenarioConfig, ScenarioError> {
    match name_or_path {
        "multihop" => ScenarioConfig::from_json(MULTIHOP_JSON, "multihop"),
        "datamule" => ScenarioConfig::from_json(DATAMULE_JSON, "datamule"),
        path => ScenarioConfig::from_file(Path::new(path)),
    }
}

impl ScenarioConfig {
    pub fn multihop() -> Self {
        load_scenario("multihop").expect("bundled config is valid")
    }

    pub fn datamule() -> Self {
        load_scenario("datamule").expect("bundled config is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            origin: origin.to_owned(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate().map_err(|msg| ScenarioError::Invalid {
            origin: origin.to_owned(),
            msg,
        })?;
        Ok(cfg)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("nodes: at least one node is required".into());
        }
        let mut seen = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            n.state.validate().map_err(|e| format!("nodes[{i}]: {e}"))?;
            if !seen.insert(n.state.address) {
                return Err(format!("nodes[{i}]: duplicate address {}", n.state.address));
            }
            if let Some(e) = &n.engine {
                e.validate().map_err(|e| format!("nodes[{i}].engine: {e}"))?;
            }
        }
        self.channel.validate().map_err(|e| format!("channel: {e}"))?;
        self.engine.validate().map_err(|e| format!("engine: {e}"))?;
        if self.link.mtu <= pdu::HEADER_LEN {
            return Err(format!("link.mtu: {} leaves no room for data", self.link.mtu));
        }
        if self.duration_s == 0 {
            return Err("duration_s: must be positive".into());
        }
        for (i, r) in self.next_hop_table.iter().enumerate() {
            for (field, a) in [("node", r.node), ("destination", r.destination), ("next_hop", r.next_hop)] {
                if !seen.contains(&a) {
                    return Err(format!("next_hop_table[{i}].{field}: unknown node {a}"));
                }
            }
            if r.next_hop == r.node {
                return Err(format!("next_hop_table[{i}]: node routes to itself"));
            }
        }
        for (i, t) in self.traffic.iter().enumerate() {
            let at = |field: &str| format!("traffic[{i}].{field}");
            if !seen.contains(&t.source) {
                return Err(format!("{}: unknown node {}", at("source"), t.source));
            }
            if !seen.contains(&t.destination) {
                return Err(format!("{}: unknown node {}", at("destination"), t.destination));
            }
            if t.source == t.destination {
                return Err(format!("{}: equals the source", at("destination")));
            }
            if t.message_size_b < APP_HEADER_LEN {
                return Err(format!("{}: must be at least {APP_HEADER_LEN}", at("message_size_B")));
            }
            if !(t.period_s > 0.0) || t.start_s < 0.0 {
                return Err(format!("{}: period must be positive, start non-negative", at("period_s")));
            }
            if t.ttl_s == 0 || t.ttl_s > pdu::MAX_TTL {
                return Err(format!("{}: out of range", at("ttl_s")));
            }
            if t.protocol > pdu::MAX_PROTOCOL || t.protocol == PROTOCOL_DTN {
                return Err(format!("{}: {} is not an application protocol", at("protocol"), t.protocol));
            }
            let hops = self.path(t.source, t.destination).ok_or_else(|| {
                format!("traffic[{i}]: no loop-free route {} -> {}", t.source, t.destination)
            })?;
            if hops > 1 && t.protocol != PROTOCOL_ROUTING {
                return Err(format!(
                    "{}: multi-hop traffic must use protocol {PROTOCOL_ROUTING}",
                    at("protocol")
                ));
            }
        }
        Ok(())
    }

    pub fn next_hop(&self, from: NodeAddr, to: NodeAddr) -> NodeAddr {
        self.next_hop_table
            .iter()
            .find(|r| r.node == from && r.destination == to)
            .map_or(to, |r| r.next_hop)
    }

    fn path(&self, from: NodeAddr, to: NodeAddr) -> Option<usize> {
        let mut at = from;
        for hops in 1..=self.nodes.len() {
            at = self.next_hop(at, to);
            if at == to {
                return Some(hops);
            }
        }
        None
    }

    pub fn with_p_detection(mut self, p: f64) -> Self {
        self.channel.p_detection = p;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_messages(mut self, count: u32) -> Self {
        for t in &mut self.traffic {
            t.count = count;
        }
        self
    }

    pub fn with_duration(mut self, duration_s: u64) -> Self {
        self.duration_s = duration_s;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    fn planned_messages(&self) -> u64 {
        self.traffic.iter().map(|t| t.count as u64).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub trace: bool,
    /// Parent directory for the per-node stores; a temporary directory is
    /// used when absent.
    pub storage_dir: Option<PathBuf>,
}

/// Life of one application message, end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageRecord {
    pub source: NodeAddr,
    pub destination: NodeAddr,
    pub generated_at: Time,
    pub delivered_at: Option<Time>,
    pub dropped_at: Option<Time>,
}

impl MessageRecord {
    pub fn delivered_by(&self, t: Time) -> bool {
        self.delivered_at.is_some_and(|d| d <= t)
    }

    pub fn dropped_by(&self, t: Time) -> bool {
        !self.delivered_by(t) && self.dropped_at.is_some_and(|d| d <= t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricsRow {
    pub t_s: u64,
    pub generated: u64,
    pub delivered: u64,
    pub expired: u64,
    pub pending: u64,
}

/// A DTN PDU put on a link, for checking TTL accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct PduRecord {
    pub node: NodeAddr,
    pub message_id: MessageId,
    pub at: Time,
    pub ttl_s: u32,
    pub start_ptr: u32,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub p_detection: f64,
    pub mode: Mode,
    pub duration_s: u64,
    pub planned_messages: u64,
    pub messages: Vec<MessageRecord>,
    pub duplicate_deliveries: u64,
    pub rows: Vec<MetricsRow>,
    pub events_executed: u64,
    pub pdu_log: Vec<PduRecord>,
    pub engine_stats: BTreeMap<NodeAddr, EngineStats>,
    pub trace: Option<String>,
}

impl RunResult {
    pub fn delivered_final(&self) -> u64 {
        self.messages.iter().filter(|m| m.delivered_at.is_some()).count() as u64
    }

    /// Instant of the last first-delivery, if every planned message arrived.
    pub fn t_all_delivered(&self) -> Option<Time> {
        if self.planned_messages == 0 || self.delivered_final() < self.planned_messages {
            return None;
        }
        self.messages.iter().filter_map(|m| m.delivered_at).max()
    }

    pub fn delivered_at(&self, t: Time) -> u64 {
        self.messages.iter().filter(|m| m.delivered_by(t)).count() as u64
    }

    pub fn csv_header(&self) -> String {
        format!(
            "# scenario={} seed={} pDetection={} mode={}",
            self.scenario, self.seed, self.p_detection, self.mode
        )
    }

    pub fn write_csv(&self, w: &mut dyn Write) -> io::Result<()> {
        writeln!(w, "{}", self.csv_header())?;
        writeln!(w, "t_s,generated,delivered,expired,pending")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.t_s, r.generated, r.delivered, r.expired, r.pending
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }

    pub fn summary_row(&self) -> String {
        let t = self
            .t_all_delivered()
            .map_or_else(|| "NA".to_owned(), |t| format!("{:.3}", t.as_secs_f64()));
        format!(
            "{},{},{},{},{}",
            self.p_detection,
            self.mode,
            self.seed,
            self.delivered_final(),
            t
        )
    }
}

pub const SUMMARY_HEADER: &str = "pdetection,mode,seed,delivered_final,t_all_delivered_s";

pub fn summary_csv(results: &[RunResult]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&r.summary_row());
        out.push('\n');
    }
    out
}

/// Parses `start:end:step` into an inclusive list of values.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [v] => Ok(vec![*v]),
        [start, end, step] if *step > 0.0 && end >= start => {
            let n = ((end - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n)
                .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                .collect())
        }
        _ => Err(format!("expected VALUE or START:END:STEP, got {spec:?}")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepCell {
    pub p_detection: f64,
    pub mode: Mode,
    pub seed: u64,
}

/// Runs every cell in parallel. Each run owns its generator and stores, so
/// the results do not depend on scheduling.
pub fn sweep(base: &ScenarioConfig, cells: &[SweepCell]) -> Vec<Result<RunResult, ScenarioError>> {
    cells
        .par_iter()
        .map(|c| {
            let cfg = base
                .clone()
                .with_p_detection(c.p_detection)
                .with_mode(c.mode)
                .with_seed(c.seed);
            run(&cfg, &RunOptions::default())
        })
        .collect()
}

fn app_header(final_dst: NodeAddr, origin: NodeAddr, msg: u32) -> [u8; APP_HEADER_LEN] {
    let mut h = [0; APP_HEADER_LEN];
    h[0..4].copy_from_slice(&final_dst.0.to_be_bytes());
    h[4..8].copy_from_slice(&origin.0.to_be_bytes());
    h[8..12].copy_from_slice(&msg.to_be_bytes());
    h
}

fn parse_app_header(data: &[u8]) -> Option<(NodeAddr, u32)> {
    if data.len() < APP_HEADER_LEN {
        return None;
    }
    let final_dst = NodeAddr(u32::from_be_bytes(data[0..4].try_into().ok()?));
    let msg = u32::from_be_bytes(data[8..12].try_into().ok()?);
    Some((final_dst, msg))
}

enum Event {
    Generate { traffic: usize, index: u32 },
    Arrival { node: NodeAddr, bytes: Vec<u8> },
    ArqTimeout { node: NodeAddr, seq: u16 },
    Timer { node: NodeAddr, kind: TimerKind },
    Wake { node: NodeAddr, peer: NodeAddr },
}

struct SimNode {
    engine: Option<DtnEngine>,
    arq: ReliableLink,
    /// Engine message id to application message number.
    carried: HashMap<MessageId, u32>,
    /// Baseline link handle to application message number.
    in_link: HashMap<SendHandle, u32>,
}

/// Baseline bookkeeping: a message counts as delivered once it has reached
/// its destination and every hop's send was acknowledged. A failed hop is
/// final.
#[derive(Default)]
struct HopState {
    open_hops: u32,
    failed: bool,
    received: bool,
    relayed_by: HashSet<NodeAddr>,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    link: LinkId,
    nodes: BTreeMap<NodeAddr, SimNode>,
    channel: Channel,
    rng: ChaCha8Rng,
    messages: Vec<MessageRecord>,
    hops: Vec<HopState>,
    duplicates: u64,
    acks_dropped: HashSet<(NodeAddr, NodeAddr, u16)>,
    pdu_log: Vec<PduRecord>,
}

/// Runs one scenario to completion.
pub fn run(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunResult, ScenarioError> {
    cfg.validate().map_err(|msg| ScenarioError::Invalid {
        origin: cfg.name.clone(),
        msg,
    })?;
    let _tmp;
    let root = match &opts.storage_dir {
        Some(d) => d.clone(),
        None => {
            let t = tempfile::tempdir().map_err(StoreError::Io)?;
            let p = t.path().to_owned();
            _tmp = t;
            p
        }
    };

    let mut channel = Channel::new(
        cfg.channel.clone(),
        cfg.nodes.iter().map(|n| n.state.clone()).collect(),
    )?;
    if opts.trace {
        channel.enable_trace();
    }
    let timing = ArqTiming {
        data_rate_bps: cfg.channel.data_rate_bps,
        max_range_m: cfg.channel.range_m,
        sound_speed_mps: cfg.channel.sound_speed_mps,
        proc_delay: cfg.channel.proc_delay(),
        margin: std::time::Duration::from_millis(cfg.link.timeout_margin_ms),
    };
    let link = LinkId::from(LINK_NAME);

    let mut nodes = BTreeMap::new();
    for n in &cfg.nodes {
        let addr = n.state.address;
        let engine = match cfg.mode {
            Mode::Dtn => {
                let store = DtnStore::open(root.join(format!("node-{}", addr.0)))?;
                let ecfg = n.engine.clone().unwrap_or_else(|| cfg.engine.clone());
                let mut e = DtnEngine::new(addr, ecfg, store);
                e.register_link(LinkDescriptor::new(
                    link.clone(),
                    cfg.link.mtu,
                    cfg.channel.data_rate_bps,
                    true,
                ))
                .expect("fresh engine accepts its only link");
                Some(e)
            }
            Mode::Reliable => None,
        };
        nodes.insert(
            addr,
            SimNode {
                engine,
                arq: ReliableLink::new(addr, link.clone(), cfg.link.mtu, cfg.link.max_retries, timing),
                carried: HashMap::new(),
                in_link: HashMap::new(),
            },
        );
    }

    let mut world = World {
        cfg,
        link,
        nodes,
        channel,
        rng: seeded_rng(cfg.seed),
        messages: Vec::new(),
        hops: Vec::new(),
        duplicates: 0,
        acks_dropped: HashSet::new(),
        pdu_log: Vec::new(),
    };
    let mut q = EventQueue::new();
    for (i, t) in cfg.traffic.iter().enumerate() {
        if t.count > 0 {
            q.schedule(Time::from_secs_f64(t.start_s), Event::Generate { traffic: i, index: 0 })?;
        }
    }
    let addrs: Vec<NodeAddr> = world.nodes.keys().copied().collect();
    for addr in addrs {
        if let Some(e) = world.node(addr).engine.as_mut() {
            e.start(Time::ZERO);
        }
        world.settle(addr, &mut q);
    }

    let end = Time::from_secs(cfg.duration_s);
    let events_executed = q.run_until(end, |q, ev| world.handle(q, ev));
    info!(
        "{} seed={} p={} mode={}: {} events, {}/{} delivered",
        cfg.name,
        cfg.seed,
        cfg.channel.p_detection,
        cfg.mode,
        events_executed,
        world.messages.iter().filter(|m| m.delivered_at.is_some()).count(),
        world.messages.len()
    );

    let rows = metrics_rows(&world.messages, cfg.duration_s);
    let engine_stats = world
        .nodes
        .iter()
        .filter_map(|(a, n)| n.engine.as_ref().map(|e| (*a, e.stats())))
        .collect();
    Ok(RunResult {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        p_detection: cfg.channel.p_detection,
        mode: cfg.mode,
        duration_s: cfg.duration_s,
        planned_messages: cfg.planned_messages(),
        messages: world.messages,
        duplicate_deliveries: world.duplicates,
        rows,
        events_executed,
        pdu_log: world.pdu_log,
        engine_stats,
        trace: world.channel.take_trace(),
    })
}

fn metrics_rows(messages: &[MessageRecord], duration_s: u64) -> Vec<MetricsRow> {
    (0..=duration_s)
        .step_by(SAMPLE_INTERVAL_S as usize)
        .map(|t_s| {
            let t = Time::from_secs(t_s);
            let mut row = MetricsRow {
                t_s,
                generated: 0,
                delivered: 0,
                expired: 0,
                pending: 0,
            };
            for m in messages.iter().filter(|m| m.generated_at <= t) {
                row.generated += 1;
                if m.delivered_by(t) {
                    row.delivered += 1;
                } else if m.dropped_by(t) {
                    row.expired += 1;
                } else {
                    row.pending += 1;
                }
            }
            row
        })
        .collect()
}

impl World<'_> {
    fn node(&mut self, addr: NodeAddr) -> &mut SimNode {
        self.nodes.get_mut(&addr).expect("known node")
    }

    fn handle(&mut self, q: &mut EventQueue<Event>, ev: Event) {
        let now = q.now();
        match ev {
            Event::Generate { traffic, index } => self.generate(q, traffic, index),
            Event::Arrival { node, bytes } => self.arrival(q, node, bytes),
            Event::ArqTimeout { node, seq } => {
                self.node(node).arq.on_timeout(seq, now);
                self.settle(node, q);
            }
            Event::Timer { node, kind } => {
                let n = self.nodes.get_mut(&node).expect("known node");
                if let Some(e) = n.engine.as_mut() {
                    e.on_timer(kind, now, &mut self.rng);
                }
                self.settle(node, q);
            }
            Event::Wake { node, peer } => {
                let n = self.nodes.get_mut(&node).expect("known node");
                if let Some(e) = n.engine.as_mut() {
                    e.on_scheduled_send(peer, now, &mut self.rng);
                }
                self.settle(node, q);
            }
        }
    }

    fn generate(&mut self, q: &mut EventQueue<Event>, traffic: usize, index: u32) {
        let now = q.now();
        let t = &self.cfg.traffic[traffic];
        let msg = self.messages.len() as u32;
        self.messages.push(MessageRecord {
            source: t.source,
            destination: t.destination,
            generated_at: now,
            delivered_at: None,
            dropped_at: None,
        });
        self.hops.push(HopState::default());
        let mut body = vec![0u8; t.message_size_b];
        body[..APP_HEADER_LEN].copy_from_slice(&app_header(t.destination, t.source, msg));
        self.rng.fill_bytes(&mut body[APP_HEADER_LEN..]);
        let next = self.cfg.next_hop(t.source, t.destination);
        let (src, protocol, ttl) = (t.source, t.protocol, t.ttl_s);
        self.forward(src, next, protocol, body, Some(ttl), msg, now);
        self.settle(src, q);

        if index + 1 < t.count {
            let at = Time::from_secs_f64(t.start_s + (index + 1) as f64 * t.period_s);
            q.schedule(
                at,
                Event::Generate {
                    traffic,
                    index: index + 1,
                },
            )
            .expect("generation times increase");
        }
    }

    /// Hands an application message to the node's link layer.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        addr: NodeAddr,
        next: NodeAddr,
        protocol: u8,
        data: Vec<u8>,
        ttl_s: Option<u32>,
        msg: u32,
        now: Time,
    ) {
        let n = self.nodes.get_mut(&addr).expect("known node");
        let accepted = match n.engine.as_mut() {
            Some(e) => {
                let req = DatagramRequest {
                    to: next,
                    data,
                    protocol,
                    ttl_s,
                };
                match e.on_datagram_request(req, now, &mut self.rng) {
                    RequestResponse::Agree(id) => {
                        n.carried.insert(id, msg);
                        true
                    }
                    RequestResponse::Refuse(r) => {
                        debug!("node {addr}: message {msg} refused: {r:?}");
                        false
                    }
                }
            }
            None => match n.arq.reliable_send(next, protocol, data, now) {
                Ok(h) => {
                    n.in_link.insert(h, msg);
                    self.hops[msg as usize].open_hops += 1;
                    true
                }
                Err(e) => {
                    debug!("node {addr}: message {msg} not sent: {e}");
                    false
                }
            },
        };
        if !accepted {
            self.dropped(msg, now);
        }
    }

    fn delivered(&mut self, msg: u32, now: Time) {
        let Some(hops) = self.hops.get_mut(msg as usize) else {
            return;
        };
        if hops.received {
            self.duplicates += 1;
            return;
        }
        hops.received = true;
        self.settle_message(msg, now);
    }

    fn hop_outcome(&mut self, msg: u32, delivered: bool, now: Time) {
        let hops = &mut self.hops[msg as usize];
        hops.open_hops = hops.open_hops.saturating_sub(1);
        if !delivered {
            hops.failed = true;
            self.dropped(msg, now);
        }
        self.settle_message(msg, now);
    }

    fn settle_message(&mut self, msg: u32, now: Time) {
        let hops = &self.hops[msg as usize];
        let confirmed = match self.cfg.mode {
            Mode::Dtn => hops.received,
            Mode::Reliable => hops.received && !hops.failed && hops.open_hops == 0,
        };
        let m = &mut self.messages[msg as usize];
        if confirmed && m.delivered_at.is_none() {
            m.delivered_at = Some(now);
        }
    }

    fn dropped(&mut self, msg: u32, now: Time) {
        if let Some(m) = self.messages.get_mut(msg as usize) {
            m.dropped_at.get_or_insert(now);
        }
    }

    fn app_receive(&mut self, addr: NodeAddr, protocol: u8, data: Vec<u8>, ttl_s: Option<u32>, now: Time) {
        let Some((final_dst, msg)) = parse_app_header(&data) else {
            debug!("node {addr}: ignoring {}-octet payload without app header", data.len());
            return;
        };
        if final_dst == addr {
            self.delivered(msg, now);
            return;
        }
        if self.cfg.mode == Mode::Reliable {
            let Some(h) = self.hops.get_mut(msg as usize) else {
                return;
            };
            if !h.relayed_by.insert(addr) {
                return;
            }
        }
        let next = self.cfg.next_hop(addr, final_dst);
        let ttl = match self.cfg.mode {
            Mode::Dtn => ttl_s.filter(|&t| t > 0),
            Mode::Reliable => None,
        };
        if self.cfg.mode == Mode::Dtn && ttl.is_none() {
            self.dropped(msg, now);
            return;
        }
        self.forward(addr, next, protocol, data, ttl, msg, now);
    }

    fn arrival(&mut self, q: &mut EventQueue<Event>, addr: NodeAddr, bytes: Vec<u8>) {
        let now = q.now();
        if !self.channel.receivable(addr, now, bytes.len()) {
            self.channel
                .trace_line(format_args!("{now} COLLIDE - {addr} {} -", bytes.len()));
            return;
        }
        let Ok(frame) = Frame::decode(&bytes) else {
            return;
        };
        let link = self.link.clone();
        let n = self.nodes.get_mut(&addr).expect("known node");
        match frame.kind {
            FrameKind::Beacon => {
                if let Some(e) = n.engine.as_mut() {
                    e.on_node_detected(frame.src, &link, now, &mut self.rng);
                }
            }
            FrameKind::Data if frame.dst == addr => n.arq.on_frame(&frame, now),
            FrameKind::Data => {
                if let Some(e) = n.engine.as_mut() {
                    e.on_frame_received(frame.src, &link, frame.protocol, &frame.payload, false, now, &mut self.rng);
                }
            }
            FrameKind::Ack => {
                if frame.dst == addr {
                    n.arq.on_frame(&frame, now);
                }
                if let Some(e) = n.engine.as_mut() {
                    e.on_node_detected(frame.src, &link, now, &mut self.rng);
                }
            }
        }
        self.settle(addr, q);
    }

    fn transmit(&mut self, q: &mut EventQueue<Event>, addr: NodeAddr, frame: Frame) {
        let now = q.now();
        let bytes = frame.encode();
        if self.cfg.faults.drop_first_ack
            && frame.kind == FrameKind::Ack
            && self.acks_dropped.insert((frame.src, frame.dst, frame.seq))
        {
            self.channel.trace_line(format_args!(
                "{now} DROP {} {} {} ack",
                frame.src,
                frame.dst,
                bytes.len()
            ));
            return;
        }
        match self
            .channel
            .transmit(addr, frame.dst, bytes.len(), now, &mut self.rng)
        {
            Ok(arrivals) => {
                for a in arrivals {
                    q.schedule(
                        a.at,
                        Event::Arrival {
                            node: a.node,
                            bytes: bytes.clone(),
                        },
                    )
                    .expect("arrivals are in the future");
                }
            }
            Err(e) => warn!("node {addr}: transmit failed: {e}"),
        }
    }

    /// Applies engine actions and link events for `addr` until both are
    /// quiet. Either side can produce work for the other.
    fn settle(&mut self, addr: NodeAddr, q: &mut EventQueue<Event>) {
        loop {
            let n = self.node(addr);
            let actions = n.engine.as_mut().map(|e| e.drain_actions()).unwrap_or_default();
            let events = n.arq.drain();
            if actions.is_empty() && events.is_empty() {
                return;
            }
            for a in actions {
                self.apply_action(q, addr, a);
            }
            for e in events {
                self.apply_link_event(q, addr, e);
            }
        }
    }

    fn apply_action(&mut self, q: &mut EventQueue<Event>, addr: NodeAddr, action: Action) {
        let now = q.now();
        match action {
            Action::Send {
                link,
                to,
                protocol,
                payload,
                message_id,
            } => {
                if protocol == PROTOCOL_DTN {
                    if let Ok(p) = pdu::decode(&payload, addr) {
                        self.pdu_log.push(PduRecord {
                            node: addr,
                            message_id,
                            at: now,
                            ttl_s: p.ttl_s,
                            start_ptr: p.start_ptr,
                        });
                    }
                }
                let n = self.nodes.get_mut(&addr).expect("known node");
                if let Err(err) = n.arq.reliable_send(to, protocol, payload, now) {
                    warn!("node {addr}: link refused engine frame: {err}");
                    if let Some(e) = n.engine.as_mut() {
                        e.on_send_outcome(&link, LinkSendOutcome::Failed(SendHandle(u64::MAX)), now, &mut self.rng);
                    }
                }
            }
            Action::Beacon { .. } => self.transmit(q, addr, Frame::beacon(addr)),
            Action::Notify(n) => match n {
                AppNotification::Received {
                    protocol,
                    data,
                    ttl_s,
                    ..
                } => self.app_receive(addr, protocol, data, ttl_s, now),
                AppNotification::Delivery { message_id, .. } => {
                    self.node(addr).carried.remove(&message_id);
                }
                AppNotification::Failure { message_id, .. } => {
                    if let Some(msg) = self.node(addr).carried.remove(&message_id) {
                        self.dropped(msg, now);
                    }
                }
            },
            Action::ScheduleSend { node, at } => q
                .schedule(at, Event::Wake { node: addr, peer: node })
                .expect("engine schedules forward in time"),
            Action::ScheduleTimer { kind, at } => q
                .schedule(at, Event::Timer { node: addr, kind })
                .expect("engine schedules forward in time"),
        }
    }

    fn apply_link_event(&mut self, q: &mut EventQueue<Event>, addr: NodeAddr, ev: ArqEvent) {
        let now = q.now();
        match ev {
            ArqEvent::Transmit(frame) => self.transmit(q, addr, frame),
            ArqEvent::ArmTimer { seq, at } => q
                .schedule(at, Event::ArqTimeout { node: addr, seq })
                .expect("timeouts are in the future"),
            ArqEvent::Outcome(outcome) => {
                let link = self.link.clone();
                let n = self.nodes.get_mut(&addr).expect("known node");
                match n.engine.as_mut() {
                    Some(e) => e.on_send_outcome(&link, outcome, now, &mut self.rng),
                    None => {
                        if let Some(msg) = n.in_link.remove(&outcome.handle()) {
                            let ok = matches!(outcome, LinkSendOutcome::Delivered(_));
                            self.hop_outcome(msg, ok, now);
                        }
                    }
                }
            }
            ArqEvent::Deliver {
                src,
                protocol,
                payload,
            } => {
                let link = self.link.clone();
                let n = self.nodes.get_mut(&addr).expect("known node");
                match n.engine.as_mut() {
                    Some(e) => e.on_frame_received(src, &link, protocol, &payload, true, now, &mut self.rng),
                    None => self.app_receive(addr, protocol, payload, None, now),
                }
            }
        }
    }
}
