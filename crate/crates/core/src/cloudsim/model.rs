//! WAN delay and saturation model of the emulated cloud database.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::splitmix64;

/// Calibration knobs of the emulated cloud. These are not claims about any
/// real service; they are recorded verbatim in run metadata.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CloudModel {
    /// Parallel servers behind the admission queue.
    pub workers: u32,
    pub service_ms_base: f64,
    pub service_ms_per_kb: f64,
    /// Extra front-end delay paid by REST-style puts (direct tester writes)
    /// before admission. SDK-style puts (the aggregator) skip it.
    pub rest_overhead_ms: f64,
    /// Requests allowed to wait for a server; arrivals beyond it are rejected
    /// with an overload error.
    pub queue_capacity: u32,
    /// One-way WAN delay is lognormal(wan_mu, wan_sigma) in milliseconds.
    pub wan_mu: f64,
    pub wan_sigma: f64,
    pub wan_enabled: bool,
    pub rng_seed: u64,
}

impl Default for CloudModel {
    fn default() -> Self {
        CloudModel {
            workers: 16,
            service_ms_base: 3.0,
            service_ms_per_kb: 2.0,
            rest_overhead_ms: 10.0,
            queue_capacity: 4096,
            wan_mu: 25f64.ln(),
            wan_sigma: 0.25,
            wan_enabled: true,
            rng_seed: 0x00c1_0d5e_ed00,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cloud model parameter {0} must be finite and >= 0")]
    Negative(&'static str),
    #[error("cloud model needs at least one worker")]
    NoWorkers,
}

impl CloudModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.workers == 0 {
            return Err(ModelError::NoWorkers);
        }
        for (name, v) in [
            ("service_ms_base", self.service_ms_base),
            ("service_ms_per_kb", self.service_ms_per_kb),
            ("rest_overhead_ms", self.rest_overhead_ms),
            ("wan_sigma", self.wan_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Negative(name));
            }
        }
        if !self.wan_mu.is_finite() {
            return Err(ModelError::Negative("wan_mu"));
        }
        Ok(())
    }

    pub fn service_ns(&self, value_bytes: usize) -> u64 {
        let ms = self.service_ms_base + self.service_ms_per_kb * value_bytes as f64 / 1024.0;
        (ms * 1e6).round() as u64
    }

    pub fn wan(&self) -> WanModel {
        WanModel {
            mu: self.wan_mu,
            sigma: self.wan_sigma,
            enabled: self.wan_enabled,
        }
    }

    /// A model whose WAN round trip is exactly `round_trip_ms` (half on the
    /// request path, half on the notification path).
    pub fn with_constant_round_trip(mut self, round_trip_ms: f64) -> CloudModel {
        self.wan_mu = (round_trip_ms / 2.0).ln();
        self.wan_sigma = 0.0;
        self.wan_enabled = true;
        self
    }
}

/// Lognormal one-way WAN delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WanModel {
    pub mu: f64,
    pub sigma: f64,
    pub enabled: bool,
}

impl WanModel {
    /// One delay draw in milliseconds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        if self.sigma == 0.0 {
            return self.mu.exp();
        }
        LogNormal::new(self.mu, self.sigma)
            .expect("validated parameters")
            .sample(rng)
    }

    /// Analytic mean `exp(mu + sigma^2 / 2)`.
    pub fn mean(&self) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }
}

/// Named random streams derived from the model seed. Each message gets its
/// own stream per purpose, so draws do not depend on arrival order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Request = 1,
    Ack = 2,
    Notify = 3,
    Snapshot = 4,
}

pub fn stream_rng(seed: u64, key: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(key ^ ((stream as u64) << 56))))
}

/// Admission decision for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub start_ns: u64,
    pub finish_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("admission queue full")]
pub struct Overloaded;

/// FIFO multi-server queue with a bounded waiting room, evaluated online as
/// requests arrive in non-decreasing time order.
#[derive(Debug, Clone)]
pub struct SaturationModel {
    free_at: BinaryHeap<Reverse<u64>>,
    /// Start times of admitted requests that had to wait, in admission order.
    waiting: VecDeque<u64>,
    capacity: usize,
}

impl SaturationModel {
    pub fn new(workers: u32, queue_capacity: u32) -> SaturationModel {
        SaturationModel {
            free_at: (0..workers.max(1)).map(|_| Reverse(0)).collect(),
            waiting: VecDeque::new(),
            capacity: queue_capacity as usize,
        }
    }

    /// Requests still waiting for a server at time `now_ns`.
    pub fn queue_len(&mut self, now_ns: u64) -> usize {
        while self.waiting.front().is_some_and(|&s| s <= now_ns) {
            self.waiting.pop_front();
        }
        self.waiting.len()
    }

    pub fn admit(&mut self, arrival_ns: u64, service_ns: u64) -> Result<Slot, Overloaded> {
        let Reverse(free) = *self.free_at.peek().expect("at least one worker");
        let start_ns = free.max(arrival_ns);
        if start_ns > arrival_ns && self.queue_len(arrival_ns) >= self.capacity {
            return Err(Overloaded);
        }
        self.free_at.pop();
        let finish_ns = start_ns + service_ns;
        self.free_at.push(Reverse(finish_ns));
        if start_ns > arrival_ns {
            self.waiting.push_back(start_ns);
        }
        Ok(Slot {
            start_ns,
            finish_ns,
        })
    }
}
