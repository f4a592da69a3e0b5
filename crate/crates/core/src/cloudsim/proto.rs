//! Cloud emulator frame bodies.

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::wire::MsgId;

/// Client flavour of a put. REST puts pay the front-end overhead of the
/// model; SDK puts (persistent admin connection) do not.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Api {
    #[default]
    Sdk,
    Rest,
}

impl Api {
    fn is_sdk(&self) -> bool {
        *self == Api::Sdk
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbPut {
    pub path: String,
    pub value: Box<RawValue>,
    pub msg_id: MsgId,
    #[serde(default, skip_serializing_if = "Api::is_sdk")]
    pub api: Api,
}

/// DB_PUT_ACK: `{"version":n}` on success or `{"error":"overload"}`. Acks
/// also echo the `msg_id` they answer, since puts on one connection may
/// complete out of order. A DB_RESET is answered with an ack carrying the
/// current version and no `msg_id`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DbPutAck {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<MsgId>,
}

pub const OVERLOAD: &str = "overload";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DbSubscribe {
    pub client: String,
    pub prefix: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Snapshot,
    Write,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbEvent {
    pub kind: EventKind,
    pub path: String,
    pub value: Box<RawValue>,
    pub version: u64,
    pub origin_msg_id: Option<MsgId>,
}
