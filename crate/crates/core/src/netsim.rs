//! Deterministic discrete-event simulation: an ordered event queue, node
//! mobility, and a protocol channel where each in-range receiver detects a
//! frame with a fixed probability.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{NodeAddr, Time};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event at {at} is earlier than the clock ({now})")]
    CausalityViolation { at: Time, now: Time },

    #[error("invalid channel parameters: {0}")]
    InvalidChannel(&'static str),

    #[error("node {0}: {1}")]
    InvalidTrajectory(NodeAddr, &'static str),

    #[error("unknown node {0}")]
    UnknownNode(NodeAddr),
}

/// The one generator every stochastic draw in a run comes from.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Scheduled<E> {
    at: Time,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Events run in `(at, seq)` order, where `seq` is the scheduling order.
pub struct EventQueue<E> {
    now: Time,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Scheduled<E>>>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            now: Time::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: Time, event: E) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::CausalityViolation { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Scheduled { at, seq, event }));
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: Duration, event: E) {
        let at = self.now + delay;
        self.schedule(at, event).expect("delay is non-negative");
    }

    /// Runs every event due at or before `t_end`, then advances the clock to
    /// `t_end`. Returns the number of events executed.
    pub fn run_until(&mut self, t_end: Time, mut handler: impl FnMut(&mut Self, E)) -> u64 {
        let mut executed = 0;
        while self.heap.peek().is_some_and(|Reverse(s)| s.at <= t_end) {
            let Reverse(s) = self.heap.pop().unwrap();
            debug_assert!(s.at >= self.now);
            self.now = s.at;
            handler(self, s.event);
            executed += 1;
        }
        self.now = self.now.max(t_end);
        executed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub p_detection: f64,
    pub range_m: f64,
    #[serde(default = "default_sound_speed")]
    pub sound_speed_mps: f64,
    #[serde(rename = "data_rate_Bps", default = "default_data_rate")]
    pub data_rate_bps: f64,
    #[serde(default)]
    pub proc_delay_ms: u64,
    /// Drop frames that arrive while the receiver is transmitting.
    #[serde(default)]
    pub half_duplex: bool,
}

fn default_sound_speed() -> f64 {
    1500.0
}

fn default_data_rate() -> f64 {
    5000.0
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            p_detection: 1.0,
            range_m: 1500.0,
            sound_speed_mps: default_sound_speed(),
            data_rate_bps: default_data_rate(),
            proc_delay_ms: 0,
            half_duplex: false,
        }
    }
}

impl ChannelParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.p_detection) {
            return Err(SimError::InvalidChannel("p_detection must lie in [0, 1]"));
        }
        if !(self.range_m > 0.0) {
            return Err(SimError::InvalidChannel("range must be positive"));
        }
        if !(self.sound_speed_mps > 0.0) || !(self.data_rate_bps > 0.0) {
            return Err(SimError::InvalidChannel("sound speed and data rate must be positive"));
        }
        Ok(())
    }

    pub fn transmission_delay(&self, len: usize) -> Duration {
        Duration::from_secs_f64(len as f64 / self.data_rate_bps)
    }

    pub fn proc_delay(&self) -> Duration {
        Duration::from_millis(self.proc_delay_ms)
    }

    /// `len / rate + distance / sound speed`, rounded to the microsecond,
    /// plus processing delay.
    pub fn end_to_end_delay(&self, len: usize, distance_m: f64) -> Duration {
        let secs = len as f64 / self.data_rate_bps + distance_m / self.sound_speed_mps;
        Duration::from_micros((secs * 1e6).round() as u64) + self.proc_delay()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Waypoint {
    pub fn pos(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub address: NodeAddr,
    pub trajectory: Vec<Waypoint>,
}

impl NodeState {
    pub fn fixed(address: NodeAddr, pos: [f64; 3]) -> Self {
        Self {
            address,
            trajectory: vec![Waypoint {
                t_s: 0.0,
                x: pos[0],
                y: pos[1],
                z: pos[2],
            }],
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SimError> {
        if self.address.is_broadcast() {
            return Err(SimError::InvalidTrajectory(self.address, "address 0 is reserved"));
        }
        if self.trajectory.is_empty() {
            return Err(SimError::InvalidTrajectory(self.address, "no waypoints"));
        }
        if self.trajectory.windows(2).any(|w| !(w[0].t_s < w[1].t_s)) {
            return Err(SimError::InvalidTrajectory(
                self.address,
                "waypoint instants must be strictly increasing",
            ));
        }
        Ok(())
    }

    /// Piecewise-linear position, clamped to the first and last waypoints.
    pub fn position_at(&self, t: Time) -> [f64; 3] {
        let t = t.as_secs_f64();
        let wps = &self.trajectory;
        let first = &wps[0];
        if t <= first.t_s {
            return first.pos();
        }
        for w in wps.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if t <= b.t_s {
                let f = (t - a.t_s) / (b.t_s - a.t_s);
                let (pa, pb) = (a.pos(), b.pos());
                return [0, 1, 2].map(|i| pa[i] + f * (pb[i] - pa[i]));
            }
        }
        wps[wps.len() - 1].pos()
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Intervals within `[0, until]` during which `a` and `b` are within
/// `range_m`, found by sampling every `step`.
pub fn contact_windows(
    a: &NodeState,
    b: &NodeState,
    range_m: f64,
    until: Time,
    step: Duration,
) -> Vec<(Time, Time)> {
    let mut windows = Vec::new();
    let mut open: Option<Time> = None;
    let mut t = Time::ZERO;
    let mut last = t;
    loop {
        let close = distance(a.position_at(t), b.position_at(t)) <= range_m;
        match (close, open) {
            (true, None) => open = Some(t),
            (false, Some(start)) => {
                windows.push((start, last));
                open = None;
            }
            _ => {}
        }
        if t >= until {
            break;
        }
        last = t;
        t = (t + step).min(until);
    }
    if let Some(start) = open {
        windows.push((start, until));
    }
    windows
}

/// A frame arriving at `node` once its last octet has been received.
#[derive(Clone, Debug, PartialEq)]
pub struct Arrival {
    pub node: NodeAddr,
    pub at: Time,
    pub addressed_to_self: bool,
}

/// Shared acoustic medium between a fixed set of nodes.
pub struct Channel {
    params: ChannelParams,
    nodes: BTreeMap<NodeAddr, NodeState>,
    transmitting: BTreeMap<NodeAddr, (Time, Time)>,
    trace: Option<String>,
}

impl Channel {
    pub fn new(params: ChannelParams, nodes: Vec<NodeState>) -> Result<Self, SimError> {
        params.validate()?;
        let mut map = BTreeMap::new();
        for n in nodes {
            n.validate()?;
            map.insert(n.address, n);
        }
        Ok(Self {
            params,
            nodes: map,
            transmitting: BTreeMap::new(),
            trace: None,
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }

    pub fn trace_line(&mut self, line: std::fmt::Arguments<'_>) {
        if let Some(t) = self.trace.as_mut() {
            t.write_fmt(line).ok();
            t.push('\n');
        }
    }

    pub fn position_at(&self, node: NodeAddr, t: Time) -> Result<[f64; 3], SimError> {
        self.nodes
            .get(&node)
            .map(|n| n.position_at(t))
            .ok_or(SimError::UnknownNode(node))
    }

    /// Puts a frame of `len` octets on the medium and returns where and when
    /// it is received. `dst` only decides the `addressed_to_self` flag; every
    /// in-range node gets an independent detection draw.
    pub fn transmit(
        &mut self,
        src: NodeAddr,
        dst: NodeAddr,
        len: usize,
        now: Time,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Arrival>, SimError> {
        let src_pos = self.position_at(src, now)?;
        self.transmitting
            .insert(src, (now, now + self.params.transmission_delay(len)));
        self.trace_line(format_args!("{now} TX {src} {dst} {len} -"));

        let mut arrivals = Vec::new();
        let receivers: Vec<(NodeAddr, [f64; 3])> = self
            .nodes
            .values()
            .filter(|n| n.address != src)
            .map(|n| (n.address, n.position_at(now)))
            .collect();
        for (node, pos) in receivers {
            let d = distance(src_pos, pos);
            if d > self.params.range_m {
                continue;
            }
            if !rng.gen_bool(self.params.p_detection) {
                self.trace_line(format_args!("{now} LOST {src} {node} {len} -"));
                continue;
            }
            let at = now + self.params.end_to_end_delay(len, d);
            self.trace_line(format_args!(
                "{at} RX {src} {node} {len} tx_ms={now} dist_m={d:.6} to={dst}"
            ));
            arrivals.push(Arrival {
                node,
                at,
                addressed_to_self: node == dst,
            });
        }
        Ok(arrivals)
    }

    /// False when half-duplex is on and `node` was transmitting while a
    /// `len`-octet frame ending at `at` was being received.
    pub fn receivable(&self, node: NodeAddr, at: Time, len: usize) -> bool {
        if !self.params.half_duplex {
            return true;
        }
        let rx_start = Time::from_micros(
            at.as_micros()
                .saturating_sub(self.params.transmission_delay(len).as_micros() as u64),
        );
        match self.transmitting.get(&node) {
            Some(&(start, end)) => end <= rx_start || start >= at,
            None => true,
        }
    }
}
