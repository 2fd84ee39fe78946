//! Fixed 48-byte big-endian probe header carried by every data-plane datagram.
//!
//! ```text
//!  0..4   magic "STNG" (53 54 4E 47)
//!  4      version (1)
//!  5      type: 0 data, 1 echo request, 2 echo reply
//!  6..8   flow id            u16
//!  8..16  sequence number    u64
//! 16..24  sender tx time ns  u64
//! 24..32  responder rx ns    u64 (echo reply only)
//! 32..40  responder tx ns    u64 (echo reply only)
//! 40..44  frame id           u32
//! 44..46  fragment index     u16
//! 46..48  fragment count     u16 (>= 1)
//! ```
//!
//! Bytes past the header are zero padding up to the datagram size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = [0x53, 0x54, 0x4E, 0x47];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PacketType {
    Data = 0,
    EchoRequest = 1,
    EchoReply = 2,
}

impl TryFrom<u8> for PacketType {
    type Error = ProbeError;

    fn try_from(v: u8) -> Result<Self, ProbeError> {
        match v {
            0 => Ok(PacketType::Data),
            1 => Ok(PacketType::EchoRequest),
            2 => Ok(PacketType::EchoReply),
            other => Err(ProbeError::UnknownType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProbeError {
    #[error("datagram size {0} is smaller than the {HEADER_LEN}-byte header")]
    SizeTooSmall(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated datagram: {0} bytes")]
    Truncated(usize),
    #[error("unknown packet type {0}")]
    UnknownType(u8),
    #[error("fragment index {index} not below fragment count {count}")]
    BadFragment { index: u16, count: u16 },
    #[error("packet is not an echo request")]
    NotEchoRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProbePacket {
    pub packet_type: PacketType,
    pub flow_id: u16,
    pub seq: u64,
    pub tx_timestamp_ns: u64,
    pub responder_rx_ns: u64,
    pub responder_tx_ns: u64,
    pub frame_id: u32,
    pub fragment_index: u16,
    pub fragment_count: u16,
}

impl ProbePacket {
    pub fn data(flow_id: u16, seq: u64, tx_timestamp_ns: u64) -> Self {
        ProbePacket {
            packet_type: PacketType::Data,
            flow_id,
            seq,
            tx_timestamp_ns,
            responder_rx_ns: 0,
            responder_tx_ns: 0,
            frame_id: 0,
            fragment_index: 0,
            fragment_count: 1,
        }
    }

    pub fn echo_request(flow_id: u16, seq: u64, tx_timestamp_ns: u64) -> Self {
        ProbePacket {
            packet_type: PacketType::EchoRequest,
            ..Self::data(flow_id, seq, tx_timestamp_ns)
        }
    }

    fn check_fragment(&self) -> Result<(), ProbeError> {
        if self.fragment_count == 0 || self.fragment_index >= self.fragment_count {
            return Err(ProbeError::BadFragment {
                index: self.fragment_index,
                count: self.fragment_count,
            });
        }
        Ok(())
    }

    pub fn encode_header(&self) -> Result<[u8; HEADER_LEN], ProbeError> {
        self.check_fragment()?;
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = self.packet_type as u8;
        b[6..8].copy_from_slice(&self.flow_id.to_be_bytes());
        b[8..16].copy_from_slice(&self.seq.to_be_bytes());
        b[16..24].copy_from_slice(&self.tx_timestamp_ns.to_be_bytes());
        b[24..32].copy_from_slice(&self.responder_rx_ns.to_be_bytes());
        b[32..40].copy_from_slice(&self.responder_tx_ns.to_be_bytes());
        b[40..44].copy_from_slice(&self.frame_id.to_be_bytes());
        b[44..46].copy_from_slice(&self.fragment_index.to_be_bytes());
        b[46..48].copy_from_slice(&self.fragment_count.to_be_bytes());
        Ok(b)
    }

    /// Header followed by zero padding up to `payload_bytes`.
    pub fn encode(&self, payload_bytes: usize) -> Result<Vec<u8>, ProbeError> {
        if payload_bytes < HEADER_LEN {
            return Err(ProbeError::SizeTooSmall(payload_bytes));
        }
        let header = self.encode_header()?;
        let mut out = vec![0u8; payload_bytes];
        out[..HEADER_LEN].copy_from_slice(&header);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<ProbePacket, ProbeError> {
        if bytes.len() < HEADER_LEN {
            return Err(ProbeError::Truncated(bytes.len()));
        }
        if bytes[0..4] != MAGIC {
            return Err(ProbeError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(ProbeError::BadVersion(bytes[4]));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let packet = ProbePacket {
            packet_type: PacketType::try_from(bytes[5])?,
            flow_id: u16_at(6),
            seq: u64_at(8),
            tx_timestamp_ns: u64_at(16),
            responder_rx_ns: u64_at(24),
            responder_tx_ns: u64_at(32),
            frame_id: u32_at(40),
            fragment_index: u16_at(44),
            fragment_count: u16_at(46),
        };
        packet.check_fragment()?;
        Ok(packet)
    }

    /// Reply to an echo request, copying its identity and sender timestamp.
    pub fn make_echo_reply(&self, rx_ns: u64, tx_ns: u64) -> Result<ProbePacket, ProbeError> {
        if self.packet_type != PacketType::EchoRequest {
            return Err(ProbeError::NotEchoRequest);
        }
        Ok(ProbePacket {
            packet_type: PacketType::EchoReply,
            responder_rx_ns: rx_ns,
            responder_tx_ns: tx_ns,
            ..*self
        })
    }

    /// Round-trip time of an echo reply received at `receive_ns`, net of the
    /// responder's hold time. `None` for non-replies or inconsistent clocks.
    pub fn rtt_ns(&self, receive_ns: u64) -> Option<u64> {
        if self.packet_type != PacketType::EchoReply {
            return None;
        }
        let total = receive_ns.checked_sub(self.tx_timestamp_ns)?;
        let held = self.responder_tx_ns.checked_sub(self.responder_rx_ns)?;
        total.checked_sub(held)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_zero_header() {
        let bytes = ProbePacket::data(1, 0, 0).encode(48).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[..8], &[0x53, 0x54, 0x4E, 0x47, 0x01, 0x00, 0x00, 0x01]);
        assert!(bytes[8..46].iter().all(|&b| b == 0));
        assert_eq!(&bytes[46..48], &[0x00, 0x01]);
    }

    #[test]
    fn size_below_header_is_rejected() {
        assert_eq!(ProbePacket::data(1, 0, 0).encode(47), Err(ProbeError::SizeTooSmall(47)));
    }

    #[test]
    fn decode_errors() {
        let mut bytes = ProbePacket::data(1, 0, 0).encode(64).unwrap();
        assert_eq!(ProbePacket::decode(&bytes[..20]), Err(ProbeError::Truncated(20)));
        bytes[4] = 2;
        assert_eq!(ProbePacket::decode(&bytes), Err(ProbeError::BadVersion(2)));
        bytes[0] = 0x54;
        assert_eq!(ProbePacket::decode(&bytes), Err(ProbeError::BadMagic));
    }

    #[test]
    fn decode_rejects_fragment_outside_count() {
        let mut bytes = ProbePacket::data(1, 0, 0).encode(48).unwrap();
        bytes[44..46].copy_from_slice(&3u16.to_be_bytes());
        bytes[46..48].copy_from_slice(&3u16.to_be_bytes());
        assert_eq!(ProbePacket::decode(&bytes), Err(ProbeError::BadFragment { index: 3, count: 3 }));
    }

    #[test]
    fn full_size_datagram_recovers_header() {
        let p = ProbePacket {
            frame_id: 77,
            fragment_index: 2,
            fragment_count: 5,
            ..ProbePacket::data(9, 123_456, 1_700_000_000_000_000_000)
        };
        let bytes = p.encode(1500).unwrap();
        assert_eq!(bytes.len(), 1500);
        assert!(bytes[48..].iter().all(|&b| b == 0));
        assert_eq!(ProbePacket::decode(&bytes).unwrap(), p);
    }

    #[test]
    fn echo_reply_copies_identity() {
        let req = ProbePacket::echo_request(3, 5, 100);
        let reply = req.make_echo_reply(150, 160).unwrap();
        assert_eq!(reply.packet_type, PacketType::EchoReply);
        assert_eq!((reply.seq, reply.flow_id, reply.tx_timestamp_ns), (5, 3, 100));
        assert_eq!((reply.responder_rx_ns, reply.responder_tx_ns), (150, 160));
        assert_eq!(reply.rtt_ns(300), Some(190));
        assert_eq!(ProbePacket::data(3, 5, 100).make_echo_reply(1, 2), Err(ProbeError::NotEchoRequest));
    }
}
