//! In-process emulator of a managed realtime JSON database.
//!
//! Writes travel through a lognormal WAN delay, a bounded FIFO admission
//! queue in front of `workers` servers, and a payload-dependent service
//! time. Subscribers receive a snapshot followed by every write under their
//! prefix, in version order per subscriber.

mod client;
pub mod model;
pub mod proto;
mod server;
pub mod tree;

use serde::{Deserialize, Serialize};

pub use client::{CloudConn, Subscription};
pub use model::{CloudModel, ModelError, SaturationModel, WanModel};
pub use server::{CloudServer, CloudState, JournalEntry};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    pub port: u16,
    pub model: CloudModel,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            port: 7072,
            model: CloudModel::default(),
        }
    }
}
