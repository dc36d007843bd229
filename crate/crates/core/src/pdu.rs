//! Wire format of the DTN protocol data unit.
//!
//! ```text
//!  0                   1                   2                   3
//!  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                  TTL (seconds)                |T|  protocol   |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |  payload ID   |                 start pointer                 |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                        fragment data ...
//! ```
//!
//! All multi-octet fields are big-endian. `T` is the to-be-continued bit,
//! set on every fragment except the last one of a payload.

use thiserror::Error;

use crate::NodeAddr;

pub const HEADER_LEN: usize = 8;
pub const MAX_TTL: u32 = (1 << 24) - 1;
pub const MAX_START_PTR: u32 = (1 << 24) - 1;
pub const MAX_PROTOCOL: u8 = 0x7f;

const TBC_BIT: u8 = 0x80;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PduError {
    #[error("{field} value {value} does not fit in the header field")]
    FieldOutOfRange { field: &'static str, value: u64 },

    #[error("buffer of {0} octets is shorter than the {HEADER_LEN}-octet header")]
    Truncated(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DtnPdu {
    pub ttl_s: u32,
    pub tbc: bool,
    pub protocol: u8,
    pub payload_id: u8,
    pub start_ptr: u32,
    pub data: Vec<u8>,
}

/// TTL-independent identity of a received PDU, used for duplicate detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub u64);

impl DtnPdu {
    pub fn validate(&self) -> Result<(), PduError> {
        if self.ttl_s > MAX_TTL {
            return Err(PduError::FieldOutOfRange {
                field: "ttl",
                value: self.ttl_s as u64,
            });
        }
        if self.protocol > MAX_PROTOCOL {
            return Err(PduError::FieldOutOfRange {
                field: "protocol",
                value: self.protocol as u64,
            });
        }
        if self.start_ptr > MAX_START_PTR {
            return Err(PduError::FieldOutOfRange {
                field: "start pointer",
                value: self.start_ptr as u64,
            });
        }
        Ok(())
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let ttl = self.ttl_s.to_be_bytes();
        let ptr = self.start_ptr.to_be_bytes();
        let flags = if self.tbc { TBC_BIT } else { 0 } | self.protocol;
        [ttl[1], ttl[2], ttl[3], flags, self.payload_id, ptr[1], ptr[2], ptr[3]]
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.data.len()
    }
}

pub fn encode(pdu: &DtnPdu) -> Result<Vec<u8>, PduError> {
    pdu.validate()?;
    let mut out = Vec::with_capacity(pdu.encoded_len());
    out.extend_from_slice(&pdu.header());
    out.extend_from_slice(&pdu.data);
    Ok(out)
}

/// Decodes a PDU. The sender address is not carried in the PDU itself; it is
/// accepted here so callers can pair decoding with [`fingerprint`].
pub fn decode(buf: &[u8], _src: NodeAddr) -> Result<DtnPdu, PduError> {
    if buf.len() < HEADER_LEN {
        return Err(PduError::Truncated(buf.len()));
    }
    Ok(DtnPdu {
        ttl_s: u32::from_be_bytes([0, buf[0], buf[1], buf[2]]),
        tbc: buf[3] & TBC_BIT != 0,
        protocol: buf[3] & MAX_PROTOCOL,
        payload_id: buf[4],
        start_ptr: u32::from_be_bytes([0, buf[5], buf[6], buf[7]]),
        data: buf[HEADER_LEN..].to_vec(),
    })
}

/// 64-bit FNV-1a over `src (4 octets BE) ‖ encode(pdu)` with the three TTL
/// octets forced to zero.
///
/// Fields are masked to their wire widths, so this never fails even for a
/// PDU that [`encode`] would reject.
pub fn fingerprint(pdu: &DtnPdu, src: NodeAddr) -> Fingerprint {
    let mut header = DtnPdu {
        ttl_s: 0,
        tbc: pdu.tbc,
        protocol: pdu.protocol & MAX_PROTOCOL,
        payload_id: pdu.payload_id,
        start_ptr: pdu.start_ptr & MAX_START_PTR,
        data: Vec::new(),
    }
    .header();
    header[..3].fill(0);

    let hash = [&src.0.to_be_bytes()[..], &header[..], &pdu.data[..]]
        .iter()
        .flat_map(|part| part.iter())
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME));
    Fingerprint(hash)
}
