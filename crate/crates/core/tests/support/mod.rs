//! Engine-level regression cases. A test link and test application sit on
//! either side of the engine; each case feeds requests in and checks what
//! comes out on both sides.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use dtnlink::engine::{
    Action, AppNotification, DatagramRequest, DtnEngine, EngineConfig, RequestResponse, PROTOCOL_DTN,
    PROTOCOL_ROUTING, PROTOCOL_USER,
};
use dtnlink::link::{LinkDescriptor, LinkId, LinkSendOutcome, SendHandle};
use dtnlink::pdu::{self, DtnPdu};
use dtnlink::store::{DatagramPriority, DtnStore, MessageId};
use dtnlink::{NodeAddr, Time};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CaseResult = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub const ME: NodeAddr = NodeAddr(1);
pub const PEER: NodeAddr = NodeAddr(2);

#[derive(Clone, Debug, PartialEq)]
pub struct Sent {
    pub link: LinkId,
    pub to: NodeAddr,
    pub protocol: u8,
    pub payload: Vec<u8>,
    pub message_id: MessageId,
}

pub struct Node {
    pub engine: DtnEngine,
    pub rng: ChaCha8Rng,
    pub sent: Vec<Sent>,
    pub notes: Vec<AppNotification>,
}

impl Node {
    pub fn new(addr: NodeAddr, dir: &Path, config: EngineConfig, links: &[(&str, usize)], seed: u64) -> Self {
        let store = DtnStore::open(dir).expect("store opens");
        let mut engine = DtnEngine::new(addr, config, store);
        for (id, mtu) in links {
            engine
                .register_link(LinkDescriptor::new(*id, *mtu, 5000.0, true))
                .expect("link registers");
        }
        Node {
            engine,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sent: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Moves engine output into `sent` and `notes`; scheduled wake-ups are
    /// executed immediately.
    pub fn pump(&mut self, now: Time) {
        loop {
            let actions = self.engine.drain_actions();
            if actions.is_empty() {
                return;
            }
            for a in actions {
                match a {
                    Action::Send {
                        link,
                        to,
                        protocol,
                        payload,
                        message_id,
                    } => self.sent.push(Sent {
                        link,
                        to,
                        protocol,
                        payload,
                        message_id,
                    }),
                    Action::Notify(n) => self.notes.push(n),
                    Action::ScheduleSend { node, .. } => {
                        self.engine.on_scheduled_send(node, now, &mut self.rng)
                    }
                    Action::Beacon { .. } | Action::ScheduleTimer { .. } => {}
                }
            }
        }
    }

    pub fn request(&mut self, to: NodeAddr, data: &[u8], protocol: u8, ttl_s: Option<u32>, now: Time) -> RequestResponse {
        let r = self.engine.on_datagram_request(
            DatagramRequest {
                to,
                data: data.to_vec(),
                protocol,
                ttl_s,
            },
            now,
            &mut self.rng,
        );
        self.pump(now);
        r
    }

    pub fn detect(&mut self, node: NodeAddr, link: &str, now: Time) {
        self.engine
            .on_node_detected(node, &LinkId::from(link), now, &mut self.rng);
        self.pump(now);
    }

    pub fn outcome(&mut self, link: &str, delivered: bool, now: Time) {
        let h = SendHandle(0);
        let o = if delivered {
            LinkSendOutcome::Delivered(h)
        } else {
            LinkSendOutcome::Failed(h)
        };
        self.engine
            .on_send_outcome(&LinkId::from(link), o, now, &mut self.rng);
        self.pump(now);
    }

    pub fn take_sent(&mut self) -> Vec<Sent> {
        std::mem::take(&mut self.sent)
    }
}

fn agree(r: RequestResponse) -> Result<MessageId, String> {
    match r {
        RequestResponse::Agree(id) => Ok(id),
        RequestResponse::Refuse(why) => Err(format!("request refused: {why:?}")),
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn decode_one(s: &Sent) -> Result<DtnPdu, String> {
    if s.protocol != PROTOCOL_DTN {
        return Err(format!("expected a DTN PDU, got protocol {}", s.protocol));
    }
    pdu::decode(&s.payload, ME).map_err(|e| e.to_string())
}

/// Sends everything pending to `PEER`, acknowledging each transfer at once,
/// and returns the first octet of each body in send order.
fn drain_order(n: &mut Node, now: Time) -> Result<Vec<u8>, String> {
    let mut order = Vec::new();
    n.detect(PEER, "a", now);
    for _ in 0..64 {
        let sent = n.take_sent();
        match sent.as_slice() {
            [] => break,
            [s] => {
                let p = decode_one(s)?;
                order.push(*p.data.first().ok_or("empty body")?);
            }
            many => return Err(format!("{} frames outstanding on one link", many.len())),
        }
        n.outcome("a", true, now);
    }
    Ok(order)
}

pub fn trivial_message() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 1);
    let id = agree(n.request(PEER, &[], 0, Some(3600), Time::ZERO))?;
    let m = n.engine.store().get(&id).ok_or("message not stored")?;
    ensure!(m.metadata.expiry_at_ms == 3_600_000, "expiry {}", m.metadata.expiry_at_ms);
    ensure!(m.body.is_empty(), "body not empty");

    n.detect(PEER, "a", Time::ZERO);
    let sent = n.take_sent();
    ensure!(sent.len() == 1, "expected one frame, got {}", sent.len());
    let p = decode_one(&sent[0])?;
    ensure!(p.ttl_s == 3600 && p.data.is_empty() && !p.tbc, "unexpected PDU {p:?}");
    Ok(())
}

pub fn successful_delivery() -> CaseResult {
    let dir = tmp();
    let config = EngineConfig {
        short_circuit: true,
        ..Default::default()
    };
    let mut n = Node::new(ME, dir.path(), config, &[("a", 1600)], 2);
    let id = agree(n.request(PEER, b"hello", PROTOCOL_USER, Some(600), Time::ZERO))?;
    n.detect(PEER, "a", Time::ZERO);
    let sent = n.take_sent();
    ensure!(sent.len() == 1, "expected one frame, got {}", sent.len());
    ensure!(
        sent[0].protocol == PROTOCOL_USER,
        "short-circuited frame has protocol {}",
        sent[0].protocol
    );
    ensure!(sent[0].payload == b"hello", "payload carries extra octets: {:?}", sent[0].payload);
    ensure!(sent[0].to == PEER, "sent to {}", sent[0].to);

    n.outcome("a", true, Time::from_secs(1));
    ensure!(
        n.notes == vec![AppNotification::Delivery { to: PEER, message_id: id }],
        "notifications {:?}",
        n.notes
    );
    Ok(())
}

pub fn router_message() -> CaseResult {
    let dir = tmp();
    let config = EngineConfig {
        short_circuit: true,
        ..Default::default()
    };
    let mut n = Node::new(ME, dir.path(), config, &[("a", 1600)], 3);
    agree(n.request(PEER, b"route me", PROTOCOL_ROUTING, Some(100), Time::ZERO))?;
    n.detect(PEER, "a", Time::from_millis(2500));
    let sent = n.take_sent();
    ensure!(sent.len() == 1, "expected one frame, got {}", sent.len());
    let p = decode_one(&sent[0])?;
    ensure!(p.protocol == PROTOCOL_ROUTING, "protocol {}", p.protocol);
    ensure!(p.ttl_s == 97, "TTL {} after 2.5 s of 100 s", p.ttl_s);
    ensure!(p.data == b"route me", "data {:?}", p.data);
    ensure!(!p.tbc && p.start_ptr == 0, "single PDU expected");
    Ok(())
}

fn dir_snapshot(dir: &Path) -> BTreeSet<(String, Vec<u8>)> {
    std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(Result::ok)
                .map(|e| {
                    (
                        e.file_name().to_string_lossy().into_owned(),
                        std::fs::read(e.path()).unwrap_or_default(),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

pub fn bad_message() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 4);
    agree(n.request(PEER, b"keep", 0, Some(60), Time::ZERO))?;
    let before = dir_snapshot(dir.path());
    for ttl in [None, Some(0)] {
        match n.request(PEER, b"no ttl", 0, ttl, Time::ZERO) {
            RequestResponse::Refuse(_) => {}
            other => return Err(format!("ttl {ttl:?} answered {other:?}")),
        }
    }
    ensure!(dir_snapshot(dir.path()) == before, "refused request touched the store");
    ensure!(n.engine.store().len() == 1, "store holds {}", n.engine.store().len());
    Ok(())
}

pub fn expiry_priority() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 5);
    ensure!(
        n.engine.set_parameter("datagramPriority", DatagramPriority::Expiry),
        "parameter rejected"
    );
    for ttl in [30u32, 10, 20] {
        agree(n.request(PEER, &[ttl as u8], 0, Some(ttl), Time::ZERO))?;
    }
    let order = drain_order(&mut n, Time::ZERO)?;
    ensure!(order == vec![10, 20, 30], "order {order:?}");
    Ok(())
}

pub fn arrival_priority() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 6);
    for (i, ttl) in [(1u8, 300u32), (2, 200), (3, 100)] {
        agree(n.request(PEER, &[i], 0, Some(ttl), Time::from_secs(i as u64)))?;
    }
    let order = drain_order(&mut n, Time::from_secs(10))?;
    ensure!(order == vec![1, 2, 3], "order {order:?}");
    Ok(())
}

pub fn random_priority() -> CaseResult {
    let mut orders = BTreeSet::new();
    for seed in 0..100 {
        let dir = tmp();
        let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], seed);
        ensure!(n.engine.set_parameter("datagramPriority", "RANDOM"), "parameter rejected");
        for i in 0..5u8 {
            agree(n.request(PEER, &[i], 0, Some(100 + i as u32), Time::from_secs(i as u64)))?;
        }
        let order = drain_order(&mut n, Time::from_secs(10))?;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        ensure!(sorted == vec![0, 1, 2, 3, 4], "seed {seed}: {order:?} is not a permutation");
        orders.insert(order);
    }
    ensure!(orders.len() > 1, "all 100 shuffles produced the same order");
    Ok(())
}

pub fn link_timeout() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 7);
    let expiry = n.engine.config().link_expiry_s;
    n.detect(PEER, "a", Time::ZERO);

    agree(n.request(PEER, b"late", 0, Some(10_000), Time::from_secs(expiry)))?;
    n.engine
        .send_next(PEER, Time::from_secs(expiry), &mut n.rng);
    n.pump(Time::from_secs(expiry));
    ensure!(n.take_sent().is_empty(), "sent on a link idle for {expiry} s");
    ensure!(
        n.engine
            .links()
            .active_links_for(PEER, Time::from_secs(expiry), std::time::Duration::from_secs(expiry))
            .is_empty(),
        "expired link still listed as active"
    );

    // Hearing the neighbour again re-enables the link.
    n.detect(PEER, "a", Time::from_secs(expiry + 1));
    ensure!(n.take_sent().len() == 1, "link not re-enabled after fresh contact");
    Ok(())
}

pub fn multi_link() -> CaseResult {
    let dir = tmp();
    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600), ("b", 1600)], 8);
    n.detect(PEER, "a", Time::ZERO);
    n.detect(PEER, "b", Time::ZERO);
    agree(n.request(PEER, b"one", 0, Some(100), Time::ZERO))?;
    let sent = n.take_sent();
    ensure!(
        sent.len() == 1 && sent[0].link == LinkId::from("a"),
        "default priority should pick the first registered link: {sent:?}"
    );
    n.outcome("a", true, Time::ZERO);

    ensure!(
        !n.engine
            .set_parameter("linkPriority", vec![Some(LinkId::from("zz"))]),
        "unknown link accepted"
    );
    ensure!(
        n.engine.set_parameter(
            "linkPriority",
            vec![Some(LinkId::from("b")), Some(LinkId::from("a"))]
        ),
        "priority rejected"
    );
    agree(n.request(PEER, b"two", 0, Some(100), Time::from_secs(1)))?;
    let sent = n.take_sent();
    ensure!(
        sent.len() == 1 && sent[0].link == LinkId::from("b"),
        "after reprioritising expected link b: {sent:?}"
    );
    Ok(())
}

/// Fragments random bodies over random MTUs, delivers the fragments to a
/// second engine in a random order and checks the reassembled payload.
pub fn payload_message(cases: usize) -> CaseResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..cases {
        let mtu = rng.gen_range(pdu::HEADER_LEN + 1..=256);
        let len = rng.gen_range(0..=4 * mtu);
        let mut body = vec![0u8; len];
        rng.fill(&mut body[..]);

        let (da, db) = (tmp(), tmp());
        let mut tx = Node::new(ME, da.path(), EngineConfig::default(), &[("a", mtu)], case as u64);
        let mut rx = Node::new(PEER, db.path(), EngineConfig::default(), &[("a", mtu)], case as u64 + 1);
        tx.detect(PEER, "a", Time::ZERO);
        agree(tx.request(PEER, &body, PROTOCOL_ROUTING, Some(1000), Time::ZERO))?;

        let mut frags = Vec::new();
        for _ in 0..=len {
            let sent = tx.take_sent();
            let Some(s) = sent.first() else { break };
            ensure!(s.payload.len() <= mtu, "case {case}: frame {} > mtu {mtu}", s.payload.len());
            frags.push(s.payload.clone());
            tx.outcome("a", true, Time::ZERO);
        }
        let expected = len.div_ceil(mtu - pdu::HEADER_LEN).max(1);
        ensure!(frags.len() == expected, "case {case}: {} fragments, expected {expected}", frags.len());
        ensure!(
            matches!(tx.notes.as_slice(), [AppNotification::Delivery { .. }]),
            "case {case}: sender notes {:?}",
            tx.notes
        );

        frags.shuffle(&mut rng);
        for f in &frags {
            rx.engine
                .on_frame_received(ME, &LinkId::from("a"), PROTOCOL_DTN, f, true, Time::ZERO, &mut rx.rng);
            rx.pump(Time::ZERO);
        }
        let got: Vec<&Vec<u8>> = rx
            .notes
            .iter()
            .filter_map(|n| match n {
                AppNotification::Received { data, .. } => Some(data),
                _ => None,
            })
            .collect();
        ensure!(got.len() == 1, "case {case}: {} payloads delivered", got.len());
        ensure!(*got[0] == body, "case {case}: reassembled body differs (mtu {mtu}, len {len})");
    }
    Ok(())
}

pub fn reboot() -> CaseResult {
    let dir = tmp();
    let before = {
        let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 9);
        n.detect(PEER, "a", Time::ZERO);
        for i in 0..5u8 {
            agree(n.request(PEER, &[i; 20], 0, Some(1000), Time::ZERO))?;
        }
        agree(n.request(PEER, b"short-lived", 0, Some(5), Time::ZERO))?;
        // Every transfer attempt fails.
        for _ in 0..20 {
            if n.take_sent().is_empty() {
                n.detect(PEER, "a", Time::from_secs(1));
                if n.take_sent().is_empty() {
                    break;
                }
            }
            n.outcome("a", false, Time::from_secs(1));
        }
        let pending: BTreeSet<(MessageId, u64, Vec<u8>)> = n
            .engine
            .store()
            .pending(10_000)
            .map(|m| (m.metadata.message_id.clone(), m.metadata.expiry_at_ms, m.body.clone()))
            .collect();
        ensure!(pending.len() == 5, "{} unexpired messages before the crash", pending.len());
        pending
    };

    let mut n = Node::new(ME, dir.path(), EngineConfig::default(), &[("a", 1600)], 10);
    let restored = n.engine.recover(Time::from_secs(10)).map_err(|e| e.to_string())?;
    ensure!(restored == 5, "restored {restored} messages");
    let after: BTreeSet<(MessageId, u64, Vec<u8>)> = n
        .engine
        .store()
        .pending(10_000)
        .map(|m| (m.metadata.message_id.clone(), m.metadata.expiry_at_ms, m.body.clone()))
        .collect();
    ensure!(after == before, "restored set differs from the pre-crash set");

    n.detect(PEER, "a", Time::from_secs(10));
    let sent = n.take_sent();
    ensure!(sent.len() == 1, "restored messages not transmitted");
    let p = decode_one(&sent[0])?;
    ensure!(p.data == vec![0u8; 20], "first restored message out of order: {:?}", p.data);
    Ok(())
}

pub const PAYLOAD_CASES: usize = 1000;

pub type Case = (&'static str, fn() -> CaseResult);

/// Every case with its name.
pub fn all_cases() -> Vec<Case> {
    vec![
        ("TRIVIAL_MESSAGE", trivial_message),
        ("SUCCESSFUL_DELIVERY", successful_delivery),
        ("ROUTER_MESSAGE", router_message),
        ("BAD_MESSAGE", bad_message),
        ("EXPIRY_PRIORITY", expiry_priority),
        ("ARRIVAL_PRIORITY", arrival_priority),
        ("RANDOM_PRIORITY", random_priority),
        ("LINK_TIMEOUT", link_timeout),
        ("MULTI_LINK", multi_link),
        ("PAYLOAD_MESSAGE", || payload_message(PAYLOAD_CASES)),
        ("REBOOT", reboot),
    ]
}
