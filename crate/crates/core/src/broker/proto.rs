//! Broker frame bodies.

use serde::{Deserialize, Serialize};

use crate::wire::b64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProduceReq {
    pub topic: String,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProduceAck {
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FetchReq {
    pub topic: String,
    pub from: u64,
    pub max: u32,
    pub wait_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct WireRecord {
    pub offset: u64,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FetchResp {
    pub records: Vec<WireRecord>,
    /// Set when the topic has not been created by any produce yet.
    #[serde(default)]
    pub topic_unknown: bool,
    /// High-water mark at response time.
    #[serde(default)]
    pub next_offset: u64,
}

/// COMMIT_OFFSET request. A `null` offset queries the stored value without
/// changing it. The broker answers with a COMMIT_OFFSET frame carrying the
/// stored offset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CommitReq {
    pub group: String,
    pub topic: String,
    pub offset: Option<u64>,
}

/// On-disk record body (the log file is a sequence of PRODUCE frames).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct StoredRecord {
    pub offset: u64,
    pub stored_ns: u64,
    #[serde(with = "b64")]
    pub envelope: Vec<u8>,
}
