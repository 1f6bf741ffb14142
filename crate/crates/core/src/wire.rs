//! Datagram framing shared by the daemon and clients.
//!
//! Every message is a 24-byte little-endian header followed by
//! `payload_len` bytes:
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0      | 4    | magic `0x48595052` (bytes `52 50 59 48`) |
//! | 4      | 1    | version, 1 |
//! | 5      | 1    | opcode |
//! | 6      | 2    | tenant id |
//! | 8      | 2    | slot id |
//! | 10     | 1    | status (responses; 0 in requests) |
//! | 11     | 1    | reserved: bit 0 asks for a timing trailer |
//! | 12     | 8    | request id, echoed in the response |
//! | 20     | 4    | payload length, at most 8192 |
//!
//! Worked example, `GET key=7` from tenant 1 to slot 2 with request id
//! `0x0102030405060708`:
//!
//! ```text
//! 52 50 59 48 01 01 01 00 02 00 00 00 08 07 06 05
//! 04 03 02 01 08 00 00 00 07 00 00 00 00 00 00 00
//! ```
//!
//! Payloads per opcode:
//!
//! | opcode | request | OK response |
//! |--------|---------|-------------|
//! | GET 0x01 | key u64 | 128-byte value |
//! | PUT 0x02 | key u64, 128-byte value | 1 byte: 0 inserted, 1 replaced |
//! | DEL 0x03 | key u64 | empty |
//! | RAW_DISPATCH 0x04 | any bytes | r0 u64, then emitted bytes |
//! | LOAD_PROG 0x10 | token[32], bytecode | program id u32 |
//! | CREATE_SLOT 0x11 | token[32], program id u32, blocks u64, budget u32 | slot id u16 |
//! | DELETE_SLOT 0x12 | token[32] (slot in header) | empty |
//! | STATS 0x20 | token[32] (slot in header) | requests u64, traps u64, busy_ns u64 |
//!
//! Non-OK responses carry a UTF-8 detail string; a `Trap` response prefixes
//! it with the trap code byte. When the request set the timing bit, the
//! response payload ends with `recv_ns u64, send_ns u64` in server virtual
//! time.

use std::fmt;

use thiserror::Error;

pub const MAGIC: u32 = 0x4859_5052;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_PAYLOAD: usize = 8192;
pub const TOKEN_LEN: usize = 32;
pub const FLAG_TIMING: u8 = 0x01;
pub const TIMING_TRAILER_LEN: usize = 16;

/// The worked example from the module docs.
pub const HEX_EXAMPLE: [u8; 32] = [
    0x52, 0x50, 0x59, 0x48, 0x01, 0x01, 0x01, 0x00, 0x02, 0x00, 0x00, 0x00, 0x08, 0x07, 0x06,
    0x05, //
    0x04, 0x03, 0x02, 0x01, 0x08, 0x00, 0x00, 0x00, 0x07, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Get,
    Put,
    Del,
    RawDispatch,
    LoadProg,
    CreateSlot,
    DeleteSlot,
    Stats,
    ErrorResp,
    Unknown(u8),
}

impl Opcode {
    pub fn code(self) -> u8 {
        match self {
            Opcode::Get => 0x01,
            Opcode::Put => 0x02,
            Opcode::Del => 0x03,
            Opcode::RawDispatch => 0x04,
            Opcode::LoadProg => 0x10,
            Opcode::CreateSlot => 0x11,
            Opcode::DeleteSlot => 0x12,
            Opcode::Stats => 0x20,
            Opcode::ErrorResp => 0x7F,
            Opcode::Unknown(c) => c,
        }
    }

    pub fn from_code(c: u8) -> Opcode {
        match c {
            0x01 => Opcode::Get,
            0x02 => Opcode::Put,
            0x03 => Opcode::Del,
            0x04 => Opcode::RawDispatch,
            0x10 => Opcode::LoadProg,
            0x11 => Opcode::CreateSlot,
            0x12 => Opcode::DeleteSlot,
            0x20 => Opcode::Stats,
            0x7F => Opcode::ErrorResp,
            c => Opcode::Unknown(c),
        }
    }

    pub fn is_control(self) -> bool {
        matches!(
            self,
            Opcode::LoadProg | Opcode::CreateSlot | Opcode::DeleteSlot | Opcode::Stats
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    NotFound,
    AuthFailed,
    SlotBusy,
    Trap,
    BadRequest,
    UnknownOpcode,
    UnknownSlot,
    NoCapacity,
    VerifierError,
    Unknown(u8),
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::NotFound => 1,
            Status::AuthFailed => 2,
            Status::SlotBusy => 3,
            Status::Trap => 4,
            Status::BadRequest => 5,
            Status::UnknownOpcode => 6,
            Status::UnknownSlot => 7,
            Status::NoCapacity => 8,
            Status::VerifierError => 9,
            Status::Unknown(c) => c,
        }
    }

    pub fn from_code(c: u8) -> Status {
        match c {
            0 => Status::Ok,
            1 => Status::NotFound,
            2 => Status::AuthFailed,
            3 => Status::SlotBusy,
            4 => Status::Trap,
            5 => Status::BadRequest,
            6 => Status::UnknownOpcode,
            7 => Status::UnknownSlot,
            8 => Status::NoCapacity,
            9 => Status::VerifierError,
            c => Status::Unknown(c),
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub opcode: Opcode,
    pub tenant: u16,
    pub slot: u16,
    pub status: Status,
    pub reserved: u8,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("datagram of {0} bytes is shorter than the 24-byte header")]
    Truncated(usize),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("payload length {0} exceeds 8192")]
    PayloadTooLarge(usize),
    #[error("header says {declared} payload bytes, datagram carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
}

/// Header fields that could still be read from an undecodable datagram,
/// enough to address a BadRequest reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveredHeader {
    pub tenant: u16,
    pub slot: u16,
    pub request_id: u64,
}

impl Message {
    pub fn request(
        opcode: Opcode,
        tenant: u16,
        slot: u16,
        request_id: u64,
        payload: Vec<u8>,
    ) -> Message {
        Message {
            opcode,
            tenant,
            slot,
            status: Status::Ok,
            reserved: 0,
            request_id,
            payload,
        }
    }

    /// Response to `req` with the same addressing and request id.
    pub fn reply(req: &Message, status: Status, payload: Vec<u8>) -> Message {
        Message {
            opcode: req.opcode,
            tenant: req.tenant,
            slot: req.slot,
            status,
            reserved: req.reserved,
            request_id: req.request_id,
            payload,
        }
    }

    /// Non-OK response carrying a detail string.
    pub fn error(req: &Message, status: Status, detail: &str) -> Message {
        let opcode = match req.opcode {
            Opcode::Unknown(_) => Opcode::ErrorResp,
            op => op,
        };
        Message {
            opcode,
            ..Message::reply(req, status, detail.as_bytes().to_vec())
        }
    }

    pub fn wants_timing(&self) -> bool {
        self.reserved & FLAG_TIMING != 0
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.opcode.code());
        out.extend_from_slice(&self.tenant.to_le_bytes());
        out.extend_from_slice(&self.slot.to_le_bytes());
        out.push(self.status.code());
        out.push(self.reserved);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(WireError::BadVersion(bytes[4]));
        }
        let len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(len));
        }
        if bytes.len() - HEADER_LEN != len {
            return Err(WireError::LengthMismatch {
                declared: len,
                actual: bytes.len() - HEADER_LEN,
            });
        }
        Ok(Message {
            opcode: Opcode::from_code(bytes[5]),
            tenant: u16_at(6),
            slot: u16_at(8),
            status: Status::from_code(bytes[10]),
            reserved: bytes[11],
            request_id: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    /// Addressing of a datagram whose magic and version are intact.
    pub fn recover_header(bytes: &[u8]) -> Option<RecoveredHeader> {
        if bytes.len() < HEADER_LEN
            || u32::from_le_bytes(bytes[0..4].try_into().unwrap()) != MAGIC
            || bytes[4] != VERSION
        {
            return None;
        }
        Some(RecoveredHeader {
            tenant: u16::from_le_bytes([bytes[6], bytes[7]]),
            slot: u16::from_le_bytes([bytes[8], bytes[9]]),
            request_id: u64::from_le_bytes(bytes[12..20].try_into().unwrap()),
        })
    }

    /// Payload without the timing trailer, plus the trailer if present.
    pub fn body_and_timing(&self) -> (&[u8], Option<(u64, u64)>) {
        if !self.wants_timing() || self.payload.len() < TIMING_TRAILER_LEN {
            return (&self.payload, None);
        }
        let split = self.payload.len() - TIMING_TRAILER_LEN;
        let t = &self.payload[split..];
        let recv = u64::from_le_bytes(t[0..8].try_into().unwrap());
        let send = u64::from_le_bytes(t[8..16].try_into().unwrap());
        (&self.payload[..split], Some((recv, send)))
    }

    /// Detail string of a non-OK response (after the trap code, if any).
    pub fn detail(&self) -> String {
        let (body, _) = self.body_and_timing();
        let text = if self.status == Status::Trap && !body.is_empty() {
            &body[1..]
        } else {
            body
        };
        String::from_utf8_lossy(text).into_owned()
    }
}

/// Payload builders and parsers.
pub mod payload {
    use super::TOKEN_LEN;
    use crate::kv::{Value, VALUE_SIZE};

    pub type Token = [u8; TOKEN_LEN];

    fn u64_at(b: &[u8], o: usize) -> Option<u64> {
        Some(u64::from_le_bytes(b.get(o..o + 8)?.try_into().ok()?))
    }

    fn u32_at(b: &[u8], o: usize) -> Option<u32> {
        Some(u32::from_le_bytes(b.get(o..o + 4)?.try_into().ok()?))
    }

    pub fn key(key: u64) -> Vec<u8> {
        key.to_le_bytes().to_vec()
    }

    pub fn parse_key(b: &[u8]) -> Option<u64> {
        if b.len() != 8 {
            return None;
        }
        u64_at(b, 0)
    }

    pub fn put(key: u64, value: &Value) -> Vec<u8> {
        let mut v = key.to_le_bytes().to_vec();
        v.extend_from_slice(value);
        v
    }

    pub fn parse_put(b: &[u8]) -> Option<(u64, Value)> {
        if b.len() != 8 + VALUE_SIZE {
            return None;
        }
        Some((u64_at(b, 0)?, b[8..].try_into().ok()?))
    }

    pub fn load_prog(token: &Token, image: &[u8]) -> Vec<u8> {
        let mut v = token.to_vec();
        v.extend_from_slice(image);
        v
    }

    pub fn parse_token(b: &[u8]) -> Option<(Token, &[u8])> {
        let t: Token = b.get(..TOKEN_LEN)?.try_into().ok()?;
        Some((t, &b[TOKEN_LEN..]))
    }

    pub fn create_slot(token: &Token, program_id: u32, blocks: u64, budget: u32) -> Vec<u8> {
        let mut v = token.to_vec();
        v.extend_from_slice(&program_id.to_le_bytes());
        v.extend_from_slice(&blocks.to_le_bytes());
        v.extend_from_slice(&budget.to_le_bytes());
        v
    }

    /// `(program_id, blocks, budget)` after the token.
    pub fn parse_create_slot(rest: &[u8]) -> Option<(u32, u64, u32)> {
        if rest.len() != 16 {
            return None;
        }
        Some((u32_at(rest, 0)?, u64_at(rest, 4)?, u32_at(rest, 12)?))
    }

    pub fn stats(requests: u64, traps: u64, busy_ns: u64) -> Vec<u8> {
        [requests, traps, busy_ns]
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect()
    }

    pub fn parse_stats(b: &[u8]) -> Option<(u64, u64, u64)> {
        if b.len() != 24 {
            return None;
        }
        Some((u64_at(b, 0)?, u64_at(b, 8)?, u64_at(b, 16)?))
    }

    pub fn parse_u32(b: &[u8]) -> Option<u32> {
        if b.len() != 4 {
            return None;
        }
        u32_at(b, 0)
    }

    pub fn parse_u16(b: &[u8]) -> Option<u16> {
        Some(u16::from_le_bytes(b.try_into().ok()?))
    }

    /// `(r0, emitted bytes)` from a RAW_DISPATCH response.
    pub fn parse_dispatch(b: &[u8]) -> Option<(u64, &[u8])> {
        Some((u64_at(b, 0)?, &b[8..]))
    }
}
