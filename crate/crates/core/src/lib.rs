//! Edge/cloud benchmarking harness.
//!
//! The crate provides every moving part of a three-scenario latency testbed:
//!
//! * [`wire`]: canonical benchmark payloads and the length-prefixed framing
//!   shared by all networked components.
//! * [`broker`]: a single-node publish-subscribe commit log with offset-based
//!   fetch and committed consumer offsets.
//! * [`cloudsim`]: a realtime JSON-tree database emulator with push
//!   notifications, a WAN delay model and a worker-pool saturation model.
//! * [`aggregator`]: the bridge that consumes broker topics and synchronizes
//!   them to the cloud through a durable local queue.
//! * [`workload`]: the open-loop tester (users, senders, receivers).
//! * [`metrics`]: distribution summaries, ECDFs, scalability knees and
//!   per-second resource sampling.
//! * [`orchestrator`]: configuration, run lifecycle, sweeps and artifacts.
//!
//! The scenarios are `cloud_only` (tester talks to the cloud directly),
//! `edge_only` (tester produces to and consumes from the broker) and
//! `edge_cloud` (tester produces to the broker, the aggregator forwards to
//! the cloud, the tester receives cloud notifications).

pub mod aggregator;
pub mod broker;
pub mod clock;
pub mod cloudsim;
pub mod metrics;
pub mod net;
pub mod orchestrator;
pub mod serve;
pub mod wire;
pub mod workload;

pub use aggregator::{AggregatorConfig, DrainReport};
pub use broker::{Broker, BrokerConfig};
pub use cloudsim::{CloudConfig, CloudModel};
pub use metrics::{DistSummary, EcdfCurve, KneeReport, ResourceSample};
pub use orchestrator::{Config, RunMatrix};
pub use wire::{Envelope, Frame, Kind, MsgId};
pub use workload::{LatencySample, RunConfig, Scenario};
