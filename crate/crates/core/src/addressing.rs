//! Network-address assignment: the preset static scheme used in deployment
//! and a simulated four-message lease cycle (DISCOVER / OFFER / REQUEST /
//! ACK) for comparing time-to-address under loss.
//!
//! Addresses are opaque 4-byte tokens rendered dotted-quad. The lease cycle
//! reproduces the latency behavior of retransmission timers, not the RFC
//! wire format.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::domain::VehicleId;
use crate::wire::{encode_frame, MessageType};

/// Default first retransmission timer.
pub const DEFAULT_RETRY_INITIAL_MS: u64 = 500;
/// Default backoff factor per retry.
pub const DEFAULT_RETRY_BACKOFF: f64 = 2.0;
/// Default attempt budget per exchange phase.
pub const DEFAULT_RETRY_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressingError {
    #[error("vehicle {0} has no preset address")]
    UnknownVehicle(VehicleId),
    #[error("address pool exhausted")]
    PoolExhausted,
    #[error("lease exchange exceeded {0} attempts")]
    MaxRetriesExceeded(u32),
    #[error("address {0:?} is not a dotted quad")]
    BadAddress(String),
}

/// Opaque 4-byte network address, displayed dotted-quad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 4]);

impl Address {
    fn offset(self, n: u32) -> Address {
        Address((u32::from_be_bytes(self.0).wrapping_add(n)).to_be_bytes())
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}.{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl FromStr for Address {
    type Err = AddressingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('.').collect();
        if parts.len() != 4 {
            return Err(AddressingError::BadAddress(s.to_string()));
        }
        let mut bytes = [0u8; 4];
        for (i, part) in parts.iter().enumerate() {
            bytes[i] = part
                .parse::<u8>()
                .map_err(|_| AddressingError::BadAddress(s.to_string()))?;
        }
        Ok(Address(bytes))
    }
}

impl serde::Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An active lease on one address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub holder: VehicleId,
    pub expires_at_ms: u64,
}

/// A contiguous lease block with per-address expiries.
#[derive(Debug, Clone)]
pub struct LeasePool {
    pub base: Address,
    pub size: u32,
    pub lease_ms: u64,
    leases: BTreeMap<Address, Lease>,
}

impl LeasePool {
    pub fn new(base: Address, size: u32, lease_ms: u64) -> Self {
        assert!(size >= 1, "lease pool must hold at least one address");
        LeasePool {
            base,
            size,
            lease_ms,
            leases: BTreeMap::new(),
        }
    }

    /// Grants the lowest free address, renewing in place if the holder
    /// already has one.
    pub fn allocate(
        &mut self,
        holder: &VehicleId,
        now_ms: u64,
    ) -> Result<Address, AddressingError> {
        if let Some((addr, _)) = self.leases.iter().find(|(_, l)| &l.holder == holder) {
            let addr = *addr;
            self.leases.get_mut(&addr).unwrap().expires_at_ms = now_ms + self.lease_ms;
            return Ok(addr);
        }
        for i in 0..self.size {
            let addr = self.base.offset(i);
            if !self.leases.contains_key(&addr) {
                self.leases.insert(
                    addr,
                    Lease {
                        holder: holder.clone(),
                        expires_at_ms: now_ms + self.lease_ms,
                    },
                );
                return Ok(addr);
            }
        }
        Err(AddressingError::PoolExhausted)
    }

    /// Releases every lease with expiry <= now (closed boundary); released
    /// addresses are immediately reassignable.
    pub fn expire_leases(&mut self, now_ms: u64) -> Vec<Address> {
        let expired: Vec<Address> = self
            .leases
            .iter()
            .filter(|(_, l)| l.expires_at_ms <= now_ms)
            .map(|(a, _)| *a)
            .collect();
        for addr in &expired {
            self.leases.remove(addr);
        }
        expired
    }

    pub fn live_leases(&self) -> &BTreeMap<Address, Lease> {
        &self.leases
    }
}

/// Address assignment source: preset static map or lease pool.
#[derive(Debug, Clone)]
pub enum AddressPool {
    Static(BTreeMap<VehicleId, Address>),
    Lease(LeasePool),
}

impl AddressPool {
    /// Preset lookup: constant time, idempotent, never consumes anything.
    pub fn assign_static(&self, vehicle: &VehicleId) -> Result<Address, AddressingError> {
        match self {
            AddressPool::Static(map) => map
                .get(vehicle)
                .copied()
                .ok_or_else(|| AddressingError::UnknownVehicle(vehicle.clone())),
            AddressPool::Lease(_) => Err(AddressingError::UnknownVehicle(vehicle.clone())),
        }
    }

    /// Unified assignment used by the base station at registration time.
    pub fn assign(&mut self, vehicle: &VehicleId, now_ms: u64) -> Result<Address, AddressingError> {
        match self {
            AddressPool::Static(_) => self.assign_static(vehicle),
            AddressPool::Lease(pool) => pool.allocate(vehicle, now_ms),
        }
    }

    /// No two live holders may share an address; checked every step in
    /// every scenario.
    pub fn check_uniqueness(&self) -> bool {
        match self {
            AddressPool::Static(map) => {
                let mut seen = std::collections::HashSet::new();
                map.values().all(|a| seen.insert(*a))
            }
            // The lease map is keyed by address, so duplicates cannot exist;
            // verify holders are unique instead.
            AddressPool::Lease(pool) => {
                let mut seen = std::collections::HashSet::new();
                pool.leases.values().all(|l| seen.insert(l.holder.clone()))
            }
        }
    }
}

/// Retransmission parameters for the lease exchange.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetryPolicy {
    pub initial_ms: u64,
    pub backoff: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            initial_ms: DEFAULT_RETRY_INITIAL_MS,
            backoff: DEFAULT_RETRY_BACKOFF,
            max_attempts: DEFAULT_RETRY_MAX_ATTEMPTS,
        }
    }
}

/// Lease exchange state machine positions, in arrow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeaseState {
    Init,
    DiscoverSent,
    OfferReceived,
    RequestSent,
    Bound,
}

/// A lossy point-to-point link for the lease study: each one-way leg is
/// independently lost with probability `loss_p`.
#[derive(Debug)]
pub struct LossyLink {
    pub loss_p: f64,
    pub latency_ms: u64,
    rng: ChaCha20Rng,
}

impl LossyLink {
    pub fn new(loss_p: f64, latency_ms: u64, rng: ChaCha20Rng) -> Self {
        assert!((0.0..=1.0).contains(&loss_p));
        LossyLink {
            loss_p,
            latency_ms,
            rng,
        }
    }

    fn leg_survives(&mut self) -> bool {
        self.loss_p == 0.0 || self.rng.gen::<f64>() >= self.loss_p
    }
}

/// Result of a completed lease exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaseBinding {
    pub address: Address,
    pub time_to_address_ms: u64,
    /// Wire frames the exchange put on the link, in order, for trace logging.
    pub frames_sent: Vec<MessageType>,
}

/// Runs the four-message lease cycle over a lossy link, retransmitting with
/// exponential backoff. Each request/reply phase gets `max_attempts`
/// attempts; `time_to_address` is completion minus start.
pub fn run_lease(
    link: &mut LossyLink,
    policy: &RetryPolicy,
    pool: &mut LeasePool,
    client: &VehicleId,
    start_ms: u64,
) -> Result<LeaseBinding, AddressingError> {
    let mut now = start_ms;
    let mut frames_sent = Vec::new();
    let mut state = LeaseState::Init;
    let mut offered: Option<Address> = None;

    // Phase 1: DISCOVER out, OFFER back. Phase 2: REQUEST out, ACK back.
    for phase in 0..2 {
        let (request_type, reply_type) = if phase == 0 {
            (MessageType::AddrDiscover, MessageType::AddrOffer)
        } else {
            (MessageType::AddrRequest, MessageType::AddrAck)
        };
        let mut timer = policy.initial_ms;
        let mut done = false;
        for attempt in 0..policy.max_attempts {
            // Encode the real wire frame so this path exercises the codec.
            let body = serde_json::to_vec(&serde_json::json!({
                "client": client.as_str(),
                "address": offered.map(|a| a.to_string()),
            }))
            .expect("lease body serializes");
            let frame = encode_frame(request_type, &body).expect("lease bodies are tiny");
            debug_assert!(!frame.is_empty());
            frames_sent.push(request_type);
            state = if phase == 0 {
                LeaseState::DiscoverSent
            } else {
                LeaseState::RequestSent
            };

            let request_arrives = link.leg_survives();
            if request_arrives && phase == 0 && offered.is_none() {
                // Server picks the address on first DISCOVER that arrives.
                offered = Some(pool.allocate(client, now)?);
            }
            let reply_arrives = request_arrives && link.leg_survives();
            if reply_arrives {
                frames_sent.push(reply_type);
                now += 2 * link.latency_ms;
                state = if phase == 0 {
                    LeaseState::OfferReceived
                } else {
                    LeaseState::Bound
                };
                done = true;
                break;
            }
            // Timeout: wait, back off, re-enter the send state.
            if attempt + 1 < policy.max_attempts {
                now += timer;
                timer = (timer as f64 * policy.backoff).round() as u64;
            }
        }
        if !done {
            return Err(AddressingError::MaxRetriesExceeded(policy.max_attempts));
        }
    }
    debug_assert_eq!(state, LeaseState::Bound);
    let address = offered.expect("bound exchange has an offer");
    // Refresh the lease clock to the binding time.
    pool.allocate(client, now)?;
    Ok(LeaseBinding {
        address,
        time_to_address_ms: now - start_ms,
        frames_sent,
    })
}

/// One Monte Carlo lease run record for the CSV export:
/// `seed,p,time_to_address_ms,outcome`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaseStat {
    pub seed: u64,
    pub loss_p: f64,
    pub time_to_address_ms: Option<u64>,
    pub outcome: &'static str,
}

pub fn lease_stats_csv(stats: &[LeaseStat]) -> String {
    let mut out = String::from("seed,p,time_to_address_ms,outcome\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.seed,
            s.loss_p,
            s.time_to_address_ms
                .map_or(String::from(""), |t| t.to_string()),
            s.outcome
        ));
    }
    out
}
