//! Canonical benchmark payloads and the length-prefixed frame codec.
//!
//! A frame on the wire is
//!
//! ```text
//! +----------------------+----------+-------------------+
//! | length (u32, BE)     | kind (1) | body (length - 1) |
//! +----------------------+----------+-------------------+
//! ```
//!
//! where `length` counts the kind byte plus the body, and the body is a JSON
//! document whose schema depends on `kind`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted frame body.
pub const MAX_BODY: usize = 1 << 24;

/// Topic used by the load generator unless per-user topics are configured.
pub const DEFAULT_TOPIC: &str = "bench";

/// Longest topic name in bytes.
pub const MAX_TOPIC_LEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {target} bytes is below the minimum encoding overhead of {minimum} bytes")]
    PayloadTooSmall { target: usize, minimum: usize },
    #[error("frame body of {0} bytes exceeds the {MAX_BODY}-byte limit")]
    Oversized(usize),
    #[error("incomplete frame: need {needed} bytes, have {available}")]
    Incomplete { needed: usize, available: usize },
    #[error("unknown frame kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("frame length field is zero")]
    EmptyFrame,
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("malformed {kind:?} body: {detail}")]
    MalformedBody { kind: Kind, detail: String },
}

/// 16-byte message identifier, rendered as 32 lowercase hex characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MsgId(pub [u8; 16]);

impl MsgId {
    /// Deterministic identifier for request `seq` of `user` in a run seeded
    /// with `seed`. The low eight bytes carry `(user, seq)` verbatim, so ids
    /// are unique within a run by construction.
    pub fn derive(seed: u64, user_id: u32, seq: u32) -> MsgId {
        let mut id = [0u8; 16];
        id[..8].copy_from_slice(&splitmix64(seed).to_be_bytes());
        id[8..12].copy_from_slice(&user_id.to_be_bytes());
        id[12..].copy_from_slice(&seq.to_be_bytes());
        MsgId(id)
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(32);
        for b in self.0 {
            s.push(hex_digit(b >> 4));
            s.push(hex_digit(b & 0x0f));
        }
        s
    }

    /// Stable 64-bit mix of the id, used to seed per-message random streams.
    pub fn fold(&self) -> u64 {
        let hi = u64::from_be_bytes(self.0[..8].try_into().unwrap());
        let lo = u64::from_be_bytes(self.0[8..].try_into().unwrap());
        splitmix64(hi ^ splitmix64(lo))
    }
}

/// SplitMix64 finalizer; a cheap bijective 64-bit mix.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hex_digit(n: u8) -> char {
    char::from_digit(n as u32, 16).unwrap()
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for MsgId {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WireError::MalformedPayload(format!("bad msg id {s:?}"));
        if s.len() != 32 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(bad());
        }
        let mut id = [0u8; 16];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16).ok_or_else(bad)?;
            let lo = (chunk[1] as char).to_digit(16).ok_or_else(bad)?;
            id[i] = (hi * 16 + lo) as u8;
        }
        Ok(MsgId(id))
    }
}

impl Serialize for MsgId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for MsgId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One benchmark message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg_id: MsgId,
    pub user_id: u32,
    pub seq: u32,
    pub topic: String,
    pub sent_ns: u64,
    /// Canonical JSON object bytes; this is what the broker stores and the
    /// cloud receives as the written value.
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn with_topic(mut self, topic: impl Into<String>) -> Result<Self, WireError> {
        let topic = topic.into();
        validate_topic(&topic)?;
        self.topic = topic;
        Ok(self)
    }
}

pub fn validate_topic(topic: &str) -> Result<(), WireError> {
    if topic.is_empty() || topic.len() > MAX_TOPIC_LEN {
        return Err(WireError::InvalidTopic(format!(
            "topic must be 1..={MAX_TOPIC_LEN} bytes, got {}",
            topic.len()
        )));
    }
    Ok(())
}

fn write_fields(out: &mut Vec<u8>, msg_id: &MsgId, user_id: u32, seq: u32, sent_ns: u64) {
    use std::io::Write;
    write!(
        out,
        r#"{{"id":"{msg_id}","user":"{user_id:06}","seq":"{seq:06}","sent_ns":"{sent_ns:019}","pad":""#
    )
    .unwrap();
}

/// Byte length of the canonical encoding with an empty pad.
pub fn payload_overhead(msg_id: &MsgId, user_id: u32, seq: u32, sent_ns: u64) -> usize {
    let mut buf = Vec::with_capacity(128);
    write_fields(&mut buf, msg_id, user_id, seq, sent_ns);
    buf.len() + 2
}

/// Overhead for fields that fit their fixed widths (user and seq < 10^6).
pub fn minimum_payload_bytes() -> usize {
    payload_overhead(&MsgId([0; 16]), 0, 0, 0)
}

/// Builds the canonical payload for one request, padded with ASCII `x` so
/// that its serialized length is exactly `target_bytes`.
///
/// Numeric fields are rendered as fixed-width zero-padded decimal strings:
/// `{"id":"<32 hex>","user":"000007","seq":"000000","sent_ns":"<19 digits>","pad":"xx..."}`.
pub fn build_payload(
    msg_id: MsgId,
    user_id: u32,
    seq: u32,
    sent_ns: u64,
    target_bytes: usize,
) -> Result<Envelope, WireError> {
    let mut payload = Vec::with_capacity(target_bytes);
    write_fields(&mut payload, &msg_id, user_id, seq, sent_ns);
    let minimum = payload.len() + 2;
    if target_bytes < minimum {
        return Err(WireError::PayloadTooSmall {
            target: target_bytes,
            minimum,
        });
    }
    payload.resize(target_bytes - 2, b'x');
    payload.extend_from_slice(b"\"}");
    debug_assert_eq!(payload.len(), target_bytes);
    Ok(Envelope {
        msg_id,
        user_id,
        seq,
        topic: DEFAULT_TOPIC.to_string(),
        sent_ns,
        payload,
    })
}

/// Identity fields recovered from a received payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadHeader {
    pub msg_id: MsgId,
    pub user_id: u32,
    pub seq: u32,
    pub sent_ns: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPayload<'a> {
    id: MsgId,
    #[serde(borrow)]
    user: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    seq: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    sent_ns: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    #[allow(dead_code)]
    pad: std::borrow::Cow<'a, str>,
}

impl<'a> RawPayload<'a> {
    fn header(&self) -> Result<PayloadHeader, WireError> {
        fn num<T: FromStr>(field: &str, s: &str) -> Result<T, WireError> {
            s.parse()
                .map_err(|_| WireError::MalformedPayload(format!("field {field} is not decimal: {s:?}")))
        }
        Ok(PayloadHeader {
            msg_id: self.id,
            user_id: num("user", &self.user)?,
            seq: num("seq", &self.seq)?,
            sent_ns: num("sent_ns", &self.sent_ns)?,
        })
    }
}

/// Parses a canonical payload from raw bytes.
pub fn parse_payload(bytes: &[u8]) -> Result<PayloadHeader, WireError> {
    let raw: RawPayload<'_> =
        serde_json::from_slice(bytes).map_err(|e| WireError::MalformedPayload(e.to_string()))?;
    raw.header()
}

/// Parses a canonical payload that has already been decoded into a JSON value
/// (as delivered by cloud notifications).
pub fn parse_payload_value(value: &serde_json::Value) -> Result<PayloadHeader, WireError> {
    let raw = RawPayload::deserialize(value).map_err(|e| WireError::MalformedPayload(e.to_string()))?;
    raw.header()
}

/// Closed set of frame kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Produce = 0x01,
    ProduceAck = 0x02,
    Fetch = 0x03,
    FetchResp = 0x04,
    CommitOffset = 0x05,
    DbPut = 0x06,
    DbPutAck = 0x07,
    DbSubscribe = 0x08,
    DbEvent = 0x09,
    DbReset = 0x0A,
    Error = 0x0B,
}

impl Kind {
    pub const ALL: [Kind; 11] = [
        Kind::Produce,
        Kind::ProduceAck,
        Kind::Fetch,
        Kind::FetchResp,
        Kind::CommitOffset,
        Kind::DbPut,
        Kind::DbPutAck,
        Kind::DbSubscribe,
        Kind::DbEvent,
        Kind::DbReset,
        Kind::Error,
    ];
}

impl TryFrom<u8> for Kind {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Kind::ALL
            .iter()
            .copied()
            .find(|k| *k as u8 == b)
            .ok_or(WireError::UnknownKind(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: Kind,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: Kind, body: Vec<u8>) -> Frame {
        Frame { kind, body }
    }

    /// Serializes `msg` as the frame body.
    pub fn json<T: Serialize>(kind: Kind, msg: &T) -> Frame {
        Frame {
            kind,
            body: serde_json::to_vec(msg).expect("frame bodies are plain data"),
        }
    }

    pub fn parse<'a, T: Deserialize<'a>>(&'a self) -> Result<T, WireError> {
        serde_json::from_slice(&self.body).map_err(|e| WireError::MalformedBody {
            kind: self.kind,
            detail: e.to_string(),
        })
    }

    /// Total bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> usize {
        4 + 1 + self.body.len()
    }
}

/// Encodes `4-byte BE length ‖ kind ‖ body`.
pub fn encode_frame(kind: Kind, body: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(5 + body.len());
    encode_frame_into(&mut out, kind, body)?;
    Ok(out)
}

pub fn encode_frame_into(out: &mut Vec<u8>, kind: Kind, body: &[u8]) -> Result<(), WireError> {
    if body.len() > MAX_BODY {
        return Err(WireError::Oversized(body.len()));
    }
    out.extend_from_slice(&((body.len() + 1) as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(body);
    Ok(())
}

/// Decodes the first frame in `bytes`, returning it together with the
/// remainder that follows it.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, &[u8]), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Incomplete {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(WireError::EmptyFrame);
    }
    if len - 1 > MAX_BODY {
        return Err(WireError::Oversized(len - 1));
    }
    if bytes.len() < 4 + len {
        return Err(WireError::Incomplete {
            needed: 4 + len,
            available: bytes.len(),
        });
    }
    let kind = Kind::try_from(bytes[4])?;
    let body = bytes[5..4 + len].to_vec();
    Ok((Frame { kind, body }, &bytes[4 + len..]))
}

/// Body of an ERROR frame.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ErrorBody {
    pub code: String,
    pub detail: String,
}

impl ErrorBody {
    pub fn frame(code: &str, detail: impl Into<String>) -> Frame {
        Frame::json(
            Kind::Error,
            &ErrorBody {
                code: code.to_string(),
                detail: detail.into(),
            },
        )
    }
}

/// Base64 helpers for envelope bytes embedded in JSON bodies.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(s)
    }

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        decode(&s).map_err(serde::de::Error::custom)
    }
}
