//! Access control, pseudonymous identities with liability escrow, and
//! per-sender rate limiting.
//!
//! Authorization is a total default-deny table over (role, message type).
//! Pseudonyms hide long-term identity from observers; every issued pseudonym
//! is retained in an append-only escrow so the operator can recover the
//! issuing vehicle when liability demands it.

use rand::RngCore;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;
use thiserror::Error;

use crate::domain::VehicleId;
use crate::wire::{MessageType, Pseudonym};

/// Default token-bucket capacity per sender.
pub const DEFAULT_RATE_CAPACITY: f64 = 10.0;
/// Default token refill rate per sender, messages per second.
pub const DEFAULT_RATE_REFILL_PER_SEC: f64 = 2.0;
/// Default pseudonym lifetime.
pub const DEFAULT_PSEUDONYM_LIFETIME_MS: u64 = 600_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("pseudonym lifetime must be positive")]
    ZeroLifetime,
    #[error("unknown role {0:?}")]
    UnknownRole(String),
}

/// Node roles. Emergency vehicles are ordinary senders with a priority flag
/// honored in broadcast ordering; they get no extra message types, which is
/// what blocks the emergency-masquerade attack at the authorization layer.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Rsu,
    Obu,
    EmergencyObu,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Rsu => "rsu",
            Role::Obu => "obu",
            Role::EmergencyObu => "emergency_obu",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rsu" => Ok(Role::Rsu),
            "obu" => Ok(Role::Obu),
            "emergency_obu" => Ok(Role::EmergencyObu),
            other => Err(PolicyError::UnknownRole(other.to_string())),
        }
    }
}

/// Authorization decision of [`PolicyTable::authorize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// Role-to-allowed-message-types table. Lookup is total: any pair absent
/// from the configuration is denied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTable {
    allow: BTreeMap<Role, BTreeSet<MessageType>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyParseError {
    #[error("line {line}: expected `role: TYPE, TYPE, ...`")]
    BadLine { line: usize },
    #[error("line {line}: unknown role {role:?}")]
    UnknownRole { line: usize, role: String },
    #[error("line {line}: unknown message type {name:?}")]
    UnknownType { line: usize, name: String },
}

impl PolicyTable {
    pub fn empty() -> Self {
        PolicyTable {
            allow: BTreeMap::new(),
        }
    }

    /// Pure lookup; deny for any pair not explicitly allowed.
    pub fn authorize(&self, role: Role, msg_type: MessageType) -> Decision {
        match self.allow.get(&role) {
            Some(set) if set.contains(&msg_type) => Decision::Allow,
            _ => Decision::Deny,
        }
    }

    pub fn allow(&mut self, role: Role, msg_type: MessageType) {
        self.allow.entry(role).or_default().insert(msg_type);
    }

    /// Parses the policy file grammar: `role: TYPE, TYPE ...` per line,
    /// `#` comments and blank lines ignored, types comma- or
    /// whitespace-separated.
    pub fn parse(text: &str) -> Result<PolicyTable, PolicyParseError> {
        let mut table = PolicyTable::empty();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (role_part, types_part) = line
                .split_once(':')
                .ok_or(PolicyParseError::BadLine { line: line_no })?;
            let role =
                role_part
                    .trim()
                    .parse::<Role>()
                    .map_err(|_| PolicyParseError::UnknownRole {
                        line: line_no,
                        role: role_part.trim().to_string(),
                    })?;
            for name in types_part.split(',').flat_map(|s| s.split_whitespace()) {
                let msg_type =
                    MessageType::from_name(name).ok_or_else(|| PolicyParseError::UnknownType {
                        line: line_no,
                        name: name.to_string(),
                    })?;
                table.allow(role, msg_type);
            }
        }
        Ok(table)
    }

    /// Renders the table in the same grammar `parse` accepts.
    pub fn render(&self) -> String {
        let mut out = String::from("# role: allowed message types\n");
        for (role, set) in &self.allow {
            let names: Vec<&str> = set.iter().map(|t| t.name()).collect();
            out.push_str(&format!("{}: {}\n", role, names.join(", ")));
        }
        out
    }
}

impl Default for PolicyTable {
    /// The default table mirrors the base-station/vehicle information flow:
    /// only the base station broadcasts, vehicles report.
    fn default() -> Self {
        let mut table = PolicyTable::empty();
        for t in [
            MessageType::HazardBcast,
            MessageType::PeerList,
            MessageType::Relay,
            MessageType::AuthOk,
            MessageType::RegisterOk,
            MessageType::AddrOffer,
            MessageType::AddrAck,
        ] {
            table.allow(Role::Rsu, t);
        }
        let obu_types = [
            MessageType::Hello,
            MessageType::Auth,
            MessageType::Register,
            MessageType::Beacon,
            MessageType::Hazard,
            MessageType::Relay,
            MessageType::Disconnect,
            MessageType::AddrDiscover,
            MessageType::AddrRequest,
        ];
        for t in obu_types {
            table.allow(Role::Obu, t);
            table.allow(Role::EmergencyObu, t);
        }
        table
    }
}

/// One issued pseudonym with its escrow metadata.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PseudonymRecord {
    pub pseudonym: Pseudonym,
    pub vehicle_id: VehicleId,
    pub issued_at_ms: u64,
    pub expires_at_ms: u64,
}

/// Append-only log of every pseudonym ever issued. Nothing removes records,
/// so liability recovery works for the whole scenario history.
#[derive(Debug, Clone, Default)]
pub struct EscrowTable {
    records: Vec<PseudonymRecord>,
    index: HashMap<Pseudonym, usize>,
}

impl EscrowTable {
    pub fn new() -> Self {
        EscrowTable::default()
    }

    /// Issues a fresh pseudonym for `vehicle_id`, drawn from `rng`
    /// (a seeded generator in sim mode, an OS generator live) and therefore
    /// statistically independent of the identity. The record is appended to
    /// the escrow before being returned.
    pub fn issue_pseudonym(
        &mut self,
        vehicle_id: &VehicleId,
        now_ms: u64,
        lifetime_ms: u64,
        rng: &mut impl RngCore,
    ) -> Result<PseudonymRecord, PolicyError> {
        if lifetime_ms == 0 {
            return Err(PolicyError::ZeroLifetime);
        }
        let mut pseudonym = [0u8; 8];
        loop {
            rng.fill_bytes(&mut pseudonym);
            if !self.index.contains_key(&pseudonym) {
                break;
            }
        }
        let record = PseudonymRecord {
            pseudonym,
            vehicle_id: vehicle_id.clone(),
            issued_at_ms: now_ms,
            expires_at_ms: now_ms.saturating_add(lifetime_ms),
        };
        self.index.insert(pseudonym, self.records.len());
        self.records.push(record.clone());
        Ok(record)
    }

    /// Recovers the issuing vehicle for any pseudonym ever issued.
    pub fn recover(&self, pseudonym: &Pseudonym) -> Option<&VehicleId> {
        self.index
            .get(pseudonym)
            .map(|&i| &self.records[i].vehicle_id)
    }

    pub fn records(&self) -> &[PseudonymRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append-only line-delimited export for audit: one JSON object per
    /// record, in issue order.
    pub fn export_lines(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("escrow records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Rate-limit decision of [`RateLimiter::check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateDecision {
    Accept,
    Throttle,
}

#[derive(Debug, Clone)]
struct Bucket {
    tokens: f64,
    last_ms: u64,
}

/// Per-sender token buckets: capacity `C` messages, refill `r` per second.
/// Accepted messages from one sender over any window `[a, b]` never exceed
/// `C + r * (b - a)`; one sender's flood cannot spend another's tokens.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    buckets: HashMap<VehicleId, Bucket>,
}

impl RateLimiter {
    pub fn new(capacity: f64, refill_per_sec: f64) -> Self {
        assert!(capacity >= 1.0, "capacity must be >= 1");
        assert!(refill_per_sec > 0.0, "refill rate must be positive");
        RateLimiter {
            capacity,
            refill_per_sec,
            buckets: HashMap::new(),
        }
    }

    /// Accept consumes one token; throttle leaves the bucket unchanged.
    pub fn check(&mut self, sender: &VehicleId, now_ms: u64) -> RateDecision {
        let bucket = self.buckets.entry(sender.clone()).or_insert(Bucket {
            tokens: self.capacity,
            last_ms: now_ms,
        });
        if now_ms > bucket.last_ms {
            let elapsed_s = (now_ms - bucket.last_ms) as f64 / 1000.0;
            bucket.tokens = (bucket.tokens + elapsed_s * self.refill_per_sec).min(self.capacity);
            bucket.last_ms = now_ms;
        }
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            RateDecision::Accept
        } else {
            RateDecision::Throttle
        }
    }
}

impl Default for RateLimiter {
    fn default() -> Self {
        RateLimiter::new(DEFAULT_RATE_CAPACITY, DEFAULT_RATE_REFILL_PER_SEC)
    }
}
