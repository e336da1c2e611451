//! Secure infrastructure-to-vehicle (I2V) and vehicle-to-vehicle (V2V)
//! messaging stack, plus a deterministic mobility/range simulator.
//!
//! The stack is split into layers that mirror the deployment:
//!
//! - [`domain`] — plain value types (identities, kinematics, hazards, clock)
//! - [`wire`] — the binary frame/envelope codec (see FORMAT.md)
//! - [`crypto`] — password records, session keys, AEAD sealing, signatures,
//!   freshness and replay checks
//! - [`policy`] — role-based authorization, pseudonyms with identity escrow,
//!   token-bucket rate limiting
//! - [`transport`] — deterministic in-memory simulated channel
//! - [`net`] — TCP transport for live runs
//! - [`mobility`] — kinematic stepping and circular-range connectivity
//! - [`addressing`] — preset static addresses and a simulated lease cycle
//! - [`rsu`] — the base-station service (registry, broadcasts, audit log)
//! - [`obu`] — the vehicle-side client
//! - [`scenario`] — config parsing and the deterministic scenario engine
//! - [`trace`] — replayable event traces and inspection

pub mod addressing;
pub mod crypto;
pub mod domain;
pub mod keyfile;
pub mod mobility;
pub mod net;
pub mod obu;
pub mod policy;
pub mod rsu;
pub mod scenario;
pub mod trace;
pub mod transport;
pub mod wire;
