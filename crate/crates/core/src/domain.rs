//! Central domain types shared by every other module. No I/O, no crypto.
//!
//! Everything here is an immutable value type, safe to clone and send
//! across threads. Positions are 2-D meters, speeds m/s, time integer
//! milliseconds of simulated (or wall) time so traces replay bit-for-bit.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Maximum license number length in characters.
pub const LICENSE_MAX_LEN: usize = 16;
/// Maximum vehicle name length in characters.
pub const NAME_MAX_LEN: usize = 32;
/// Maximum hazard description length in characters.
pub const DESCRIPTION_MAX_LEN: usize = 200;
/// Verification key length for the signature scheme in use (Ed25519).
pub const PUBLIC_KEY_LEN: usize = 32;

/// Opaque unique vehicle token, e.g. `"v2"`. Unique per scenario.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Self {
        VehicleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VehicleId {
    fn from(s: &str) -> Self {
        VehicleId(s.to_string())
    }
}

/// 2-D point or vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn distance(self, other: Vec2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn scaled(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn plus(self, other: Vec2) -> Vec2 {
        Vec2::new(self.x + other.x, self.y + other.y)
    }

    /// Unit vector in the same direction; `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        if n == 0.0 {
            None
        } else {
            Some(self.scaled(1.0 / n))
        }
    }
}

/// Long-term vehicle identity: what the base station displays, plus the
/// verification key that backs non-repudiation and liability recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleIdentity {
    pub vehicle_id: VehicleId,
    pub license_number: String,
    pub vehicle_name: String,
    /// Verification key bytes; length must match [`PUBLIC_KEY_LEN`].
    pub public_key: Vec<u8>,
}

/// A single identity-invariant violation. Violations are data, not errors:
/// [`validate_identity`] returns all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdentityViolation {
    EmptyLicense,
    LicenseTooLong { len: usize },
    LicenseNotPrintable,
    EmptyName,
    NameTooLong { len: usize },
    NameNotPrintable,
    BadKeyLength { expected: usize, got: usize },
}

impl fmt::Display for IdentityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IdentityViolation::EmptyLicense => write!(f, "license number is empty"),
            IdentityViolation::LicenseTooLong { len } => {
                write!(f, "license number too long ({len} > {LICENSE_MAX_LEN})")
            }
            IdentityViolation::LicenseNotPrintable => {
                write!(f, "license number contains non-printable characters")
            }
            IdentityViolation::EmptyName => write!(f, "vehicle name is empty"),
            IdentityViolation::NameTooLong { len } => {
                write!(f, "vehicle name too long ({len} > {NAME_MAX_LEN})")
            }
            IdentityViolation::NameNotPrintable => {
                write!(f, "vehicle name contains non-printable characters")
            }
            IdentityViolation::BadKeyLength { expected, got } => {
                write!(f, "public key length {got}, expected {expected}")
            }
        }
    }
}

fn printable(s: &str) -> bool {
    s.chars().all(|c| !c.is_control())
}

/// Checks every identity invariant and returns the full violation list;
/// an empty list means the identity is valid.
pub fn validate_identity(id: &VehicleIdentity) -> Vec<IdentityViolation> {
    let mut violations = Vec::new();
    let license_len = id.license_number.chars().count();
    if license_len == 0 {
        violations.push(IdentityViolation::EmptyLicense);
    } else if license_len > LICENSE_MAX_LEN {
        violations.push(IdentityViolation::LicenseTooLong { len: license_len });
    }
    if !printable(&id.license_number) {
        violations.push(IdentityViolation::LicenseNotPrintable);
    }
    let name_len = id.vehicle_name.chars().count();
    if name_len == 0 {
        violations.push(IdentityViolation::EmptyName);
    } else if name_len > NAME_MAX_LEN {
        violations.push(IdentityViolation::NameTooLong { len: name_len });
    }
    if !printable(&id.vehicle_name) {
        violations.push(IdentityViolation::NameNotPrintable);
    }
    if id.public_key.len() != PUBLIC_KEY_LEN {
        violations.push(IdentityViolation::BadKeyLength {
            expected: PUBLIC_KEY_LEN,
            got: id.public_key.len(),
        });
    }
    violations
}

/// Kinematic state driving range gating: position, speed and a unit heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinematics {
    /// Position in meters.
    pub position: Vec2,
    /// Speed in meters/second, never negative.
    pub speed: f64,
    /// Unit direction of travel (norm 1 within 1e-9).
    pub heading: Vec2,
}

pub const HEADING_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KinematicsError {
    #[error("speed must be >= 0")]
    NegativeSpeed,
    #[error("heading must be a unit vector (norm within 1e-9 of 1)")]
    NonUnitHeading,
}

impl Kinematics {
    pub fn new(position: Vec2, speed: f64, heading: Vec2) -> Result<Self, KinematicsError> {
        let k = Kinematics {
            position,
            speed,
            heading,
        };
        k.validate()?;
        Ok(k)
    }

    /// A parked vehicle; heading defaults to +x so the invariant holds.
    pub fn stationary(position: Vec2) -> Self {
        Kinematics {
            position,
            speed: 0.0,
            heading: Vec2::new(1.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.speed < 0.0 || !self.speed.is_finite() {
            return Err(KinematicsError::NegativeSpeed);
        }
        if (self.heading.norm() - 1.0).abs() > HEADING_NORM_TOLERANCE {
            return Err(KinematicsError::NonUnitHeading);
        }
        Ok(())
    }

    /// Speed converted for display boundaries; stored internally as m/s.
    pub fn speed_kmh(&self) -> f64 {
        self.speed * 3.6
    }
}

/// Hazard categories a vehicle or the base station may warn about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HazardKind {
    Ice,
    Accident,
    Obstacle,
    Congestion,
    Other,
}

impl fmt::Display for HazardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HazardKind::Ice => "ice",
            HazardKind::Accident => "accident",
            HazardKind::Obstacle => "obstacle",
            HazardKind::Congestion => "congestion",
            HazardKind::Other => "other",
        };
        f.write_str(s)
    }
}

/// A road-hazard warning: the message the whole system exists to carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardReport {
    pub kind: HazardKind,
    /// Where the hazard is, in meters.
    pub location: Vec2,
    /// Severity 1 (minor) to 5 (critical).
    pub severity: u8,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HazardViolation {
    #[error("severity {0} outside [1, 5]")]
    SeverityOutOfRange(u8),
    #[error("description length {0} exceeds {DESCRIPTION_MAX_LEN}")]
    DescriptionTooLong(usize),
}

impl HazardReport {
    pub fn validate(&self) -> Result<(), HazardViolation> {
        if !(1..=5).contains(&self.severity) {
            return Err(HazardViolation::SeverityOutOfRange(self.severity));
        }
        let len = self.description.chars().count();
        if len > DESCRIPTION_MAX_LEN {
            return Err(HazardViolation::DescriptionTooLong(len));
        }
        Ok(())
    }
}

/// Monotone simulated clock in milliseconds since scenario start.
///
/// There is deliberately no way to move it backwards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    now_ms: u64,
}

impl SimClock {
    pub fn new() -> Self {
        SimClock { now_ms: 0 }
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    /// Advances the clock by `dt_ms`. Saturates instead of wrapping so the
    /// monotonicity invariant can never be violated.
    pub fn advance(&mut self, dt_ms: u64) {
        self.now_ms = self.now_ms.saturating_add(dt_ms);
    }
}
