//! Deterministic in-memory message channel gated by link state.
//!
//! Frames queue per directed endpoint pair in FIFO order, are dropped when
//! the link is down or by seeded loss sampling, and are delivered when the
//! receiver polls at or past the delivery time. With a fixed seed and event
//! schedule the full delivery trace is identical across runs.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Endpoint key: a vehicle id or the base station's name.
pub type EndpointId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(EndpointId),
}

/// Directed link parameters. `connected` is driven by the range model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkState {
    pub connected: bool,
    pub loss_probability: f64,
    pub latency_ms: u64,
}

impl LinkState {
    pub fn new(connected: bool, loss_probability: f64, latency_ms: u64) -> Self {
        assert!(
            (0.0..=1.0).contains(&loss_probability),
            "loss probability must be within [0, 1]"
        );
        LinkState {
            connected,
            loss_probability,
            latency_ms,
        }
    }
}

impl Default for LinkState {
    fn default() -> Self {
        LinkState {
            connected: false,
            loss_probability: 0.0,
            latency_ms: 0,
        }
    }
}

/// Outcome of a send attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Queued { due_ms: u64 },
    Dropped { reason: DropReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Disconnected,
    Loss,
}

/// A frame delivered by [`SimNet::poll`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub from: EndpointId,
    pub bytes: Vec<u8>,
    pub delivered_ms: u64,
}

#[derive(Debug, Clone)]
struct QueuedFrame {
    due_ms: u64,
    send_index: u64,
    from: EndpointId,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
struct Endpoint {
    inbox: Vec<QueuedFrame>,
}

/// Accounting entry for conservation checks: every sent frame ends up
/// delivered exactly once or recorded here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropRecord {
    pub from: EndpointId,
    pub to: EndpointId,
    pub time_ms: u64,
    pub reason: DropReason,
}

/// The simulated network. Single-threaded, owned and stepped by the
/// scenario engine only.
#[derive(Debug)]
pub struct SimNet {
    endpoints: BTreeMap<EndpointId, Endpoint>,
    links: BTreeMap<(EndpointId, EndpointId), LinkState>,
    rng: ChaCha20Rng,
    send_counter: u64,
    drops: Vec<DropRecord>,
}

impl SimNet {
    pub fn new(rng: ChaCha20Rng) -> Self {
        SimNet {
            endpoints: BTreeMap::new(),
            links: BTreeMap::new(),
            rng,
            send_counter: 0,
            drops: Vec::new(),
        }
    }

    pub fn add_endpoint(&mut self, id: impl Into<EndpointId>) {
        self.endpoints.entry(id.into()).or_default();
    }

    pub fn has_endpoint(&self, id: &str) -> bool {
        self.endpoints.contains_key(id)
    }

    /// Sets the directed link state for `from -> to`.
    pub fn set_link(&mut self, from: &str, to: &str, state: LinkState) {
        self.links.insert((from.to_string(), to.to_string()), state);
    }

    /// Sets both directions at once; range gating is symmetric.
    pub fn set_link_symmetric(&mut self, a: &str, b: &str, state: LinkState) {
        self.set_link(a, b, state);
        self.set_link(b, a, state);
    }

    pub fn link(&self, from: &str, to: &str) -> LinkState {
        self.links
            .get(&(from.to_string(), to.to_string()))
            .copied()
            .unwrap_or_default()
    }

    /// Queues or drops a frame. Loss is sampled from the seeded generator;
    /// a disconnected link always drops.
    pub fn send(
        &mut self,
        from: &str,
        to: &str,
        bytes: Vec<u8>,
        now_ms: u64,
    ) -> Result<SendOutcome, TransportError> {
        if !self.endpoints.contains_key(from) {
            return Err(TransportError::UnknownEndpoint(from.to_string()));
        }
        if !self.endpoints.contains_key(to) {
            return Err(TransportError::UnknownEndpoint(to.to_string()));
        }
        let link = self.link(from, to);
        if !link.connected {
            self.drops.push(DropRecord {
                from: from.to_string(),
                to: to.to_string(),
                time_ms: now_ms,
                reason: DropReason::Disconnected,
            });
            return Ok(SendOutcome::Dropped {
                reason: DropReason::Disconnected,
            });
        }
        if link.loss_probability > 0.0 && self.rng.gen::<f64>() < link.loss_probability {
            self.drops.push(DropRecord {
                from: from.to_string(),
                to: to.to_string(),
                time_ms: now_ms,
                reason: DropReason::Loss,
            });
            return Ok(SendOutcome::Dropped {
                reason: DropReason::Loss,
            });
        }
        let due_ms = now_ms + link.latency_ms;
        let frame = QueuedFrame {
            due_ms,
            send_index: self.send_counter,
            from: from.to_string(),
            bytes,
        };
        self.send_counter += 1;
        self.endpoints.get_mut(to).unwrap().inbox.push(frame);
        Ok(SendOutcome::Queued { due_ms })
    }

    /// Returns all frames due by `now_ms` in delivery-time order (ties by
    /// send order) and removes them from the queue.
    pub fn poll(&mut self, endpoint: &str, now_ms: u64) -> Vec<Delivery> {
        let Some(ep) = self.endpoints.get_mut(endpoint) else {
            return Vec::new();
        };
        let mut due: Vec<QueuedFrame> = Vec::new();
        ep.inbox.retain(|frame| {
            if frame.due_ms <= now_ms {
                due.push(frame.clone());
                false
            } else {
                true
            }
        });
        due.sort_by_key(|f| (f.due_ms, f.send_index));
        due.into_iter()
            .map(|f| Delivery {
                from: f.from,
                bytes: f.bytes,
                delivered_ms: f.due_ms,
            })
            .collect()
    }

    pub fn drops(&self) -> &[DropRecord] {
        &self.drops
    }

    /// Frames still queueing, for conservation checks.
    pub fn pending(&self) -> usize {
        self.endpoints.values().map(|e| e.inbox.len()).sum()
    }
}
