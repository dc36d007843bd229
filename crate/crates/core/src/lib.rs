//! Disruption-tolerant link layer for intermittently connected networks,
//! with a deterministic discrete-event simulator to exercise it.
//!
//! * [`pdu`]: the 8-octet PDU header and duplicate fingerprints.
//! * [`store`]: persistent per-message spool and fragment reassembly.
//! * [`link`]: link registry, frames and a stop-and-wait ARQ.
//! * [`engine`]: the store-carry-forward protocol state machine.
//! * [`netsim`]: event queue, mobility and the lossy channel.
//! * [`scenario`]: scenario configs, the simulation harness and metrics.

pub mod engine;
pub mod link;
pub mod netsim;
pub mod pdu;
pub mod scenario;
pub mod store;
mod time;

pub use time::{NodeAddr, Time};
