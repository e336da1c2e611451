//! Scenario configuration and the deterministic simulation engine.
//!
//! A scenario is a TOML document (JSON is accepted as an alternate
//! encoding); see SCENARIOS.md for the field reference. Runs are
//! deterministic: the same config and seed produce byte-identical traces.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use thiserror::Error;

use crate::addressing::{
    lease_stats_csv, run_lease, Address, AddressPool, LeasePool, LeaseStat, LossyLink, RetryPolicy,
};
use crate::crypto::FreshnessPolicy;
use crate::domain::{HazardKind, HazardReport, Kinematics, Vec2, VehicleId};
use crate::keyfile::KeyRecord;
use crate::mobility::{ConnectivityKind, MobilityModel, RangeModel};
use crate::obu::{Obu, ReportOutcome, V2vDest};
use crate::policy::{PolicyTable, Role};
use crate::rsu::{AuditLog, AuditRecord, ClientRecord, GauntletCounters, Rsu, RsuConfig};
use crate::trace::{EventKind, EventTrace, V2vPathKind};
use crate::transport::{LinkState, SimNet};
use crate::wire::Pseudonym;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("config validation error in {field}: {detail}")]
    ConfigValidation { field: String, detail: String },
    #[error("engine error: {0}")]
    Engine(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_v2v_radius() -> f64 {
    -1.0 // sentinel: copy rsu_radius
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeConfig {
    pub rsu_position: [f64; 2],
    pub rsu_radius: f64,
    #[serde(default = "default_v2v_radius")]
    pub v2v_radius: f64,
}

fn default_step_ms() -> u64 {
    crate::mobility::DEFAULT_STEP_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeConfig {
    #[serde(default = "default_step_ms")]
    pub step_ms: u64,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecurityConfig {
    pub tau_ms: u64,
    pub replay_width: u64,
    pub rate_capacity: f64,
    pub rate_refill_per_sec: f64,
    pub client_timeout_ms: u64,
    pub pseudonym_lifetime_ms: u64,
    pub rotate_pseudonyms: bool,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        let rsu = RsuConfig::default();
        SecurityConfig {
            tau_ms: rsu.freshness.tau_ms,
            replay_width: rsu.replay_width,
            rate_capacity: rsu.rate_capacity,
            rate_refill_per_sec: rsu.rate_refill_per_sec,
            client_timeout_ms: rsu.client_timeout_ms,
            pseudonym_lifetime_ms: rsu.pseudonym_lifetime_ms,
            rotate_pseudonyms: rsu.rotate_pseudonyms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub loss_probability: f64,
    pub latency_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            loss_probability: 0.0,
            latency_ms: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddressingMode {
    Static,
    Lease,
}

fn default_lease_base() -> String {
    "10.0.1.0".into()
}

fn default_lease_size() -> u32 {
    64
}

fn default_lease_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressingConfig {
    pub mode: AddressingMode,
    #[serde(default)]
    pub static_map: BTreeMap<String, String>,
    #[serde(default = "default_lease_base")]
    pub lease_base: String,
    #[serde(default = "default_lease_size")]
    pub lease_size: u32,
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_heading() -> [f64; 2] {
    [1.0, 0.0]
}

fn default_role() -> String {
    "obu".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardEventConfig {
    pub time_ms: u64,
    pub kind: HazardKind,
    pub location: [f64; 2],
    pub severity: u8,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2vSendConfig {
    pub time_ms: u64,
    pub to: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleConfig {
    pub id: String,
    pub license: String,
    pub name: String,
    #[serde(default = "default_role")]
    pub role: String,
    pub position: [f64; 2],
    #[serde(default = "default_heading")]
    pub heading: [f64; 2],
    #[serde(default)]
    pub speed_mps: f64,
    #[serde(default)]
    pub hazards: Vec<HazardEventConfig>,
    #[serde(default)]
    pub v2v_sends: Vec<V2vSendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    /// Flip one bit in the next frame the vehicle transmits.
    Tamper { vehicle: String, at_ms: u64 },
    /// Re-inject the vehicle's last delivered data frame verbatim.
    Replay { vehicle: String, at_ms: u64 },
    /// Send signed beacons far above the rate limit.
    Flood {
        vehicle: String,
        start_ms: u64,
        duration_ms: u64,
        rate_hz: u32,
    },
    /// Inject the station-only broadcast type (emergency masquerade).
    ForgeBroadcast { vehicle: String, at_ms: u64 },
}

impl AttackConfig {
    fn vehicle(&self) -> &str {
        match self {
            AttackConfig::Tamper { vehicle, .. }
            | AttackConfig::Replay { vehicle, .. }
            | AttackConfig::Flood { vehicle, .. }
            | AttackConfig::ForgeBroadcast { vehicle, .. } => vehicle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub range: RangeConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub security: SecurityConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    pub addressing: AddressingConfig,
    pub vehicles: Vec<VehicleConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
}

/// Parses a scenario from TOML, falling back to JSON for `{`-led input.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let config: ScenarioConfig = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| ScenarioError::ConfigParse(e.to_string()))?
    } else {
        toml::from_str(text).map_err(|e| ScenarioError::ConfigParse(e.to_string()))?
    };
    validate_config(&config)?;
    Ok(config)
}

/// Renders a config back to TOML; `parse_config` inverts this.
pub fn render_config(config: &ScenarioConfig) -> String {
    toml::to_string(config).expect("configs serialize")
}

fn validate_config(config: &ScenarioConfig) -> Result<(), ScenarioError> {
    fn fail(field: &str, detail: String) -> Result<(), ScenarioError> {
        Err(ScenarioError::ConfigValidation {
            field: field.to_string(),
            detail,
        })
    }
    if config.range.rsu_radius <= 0.0 {
        return fail("range.rsu_radius", "must be positive".into());
    }
    if config.time.step_ms == 0 {
        return fail("time.step_ms", "must be positive".into());
    }
    if config.security.tau_ms == 0 {
        return fail("security.tau_ms", "must be positive".into());
    }
    if !(0.0..=1.0).contains(&config.transport.loss_probability) {
        return fail("transport.loss_probability", "must lie in [0, 1]".into());
    }
    let mut seen = HashSet::new();
    for vehicle in &config.vehicles {
        if !seen.insert(vehicle.id.clone()) {
            return fail("vehicles.id", format!("{} defined twice", vehicle.id));
        }
        vehicle
            .role
            .parse::<Role>()
            .map_err(|e| ScenarioError::ConfigValidation {
                field: format!("vehicles.{}.role", vehicle.id),
                detail: e.to_string(),
            })?;
        let heading = Vec2::new(vehicle.heading[0], vehicle.heading[1]);
        if heading.normalized().is_none() {
            return fail(
                "vehicles.heading",
                format!("{} has a zero heading vector", vehicle.id),
            );
        }
        if vehicle.speed_mps < 0.0 {
            return fail("vehicles.speed_mps", format!("{} is negative", vehicle.id));
        }
        for hazard in &vehicle.hazards {
            if !(1..=5).contains(&hazard.severity) {
                return fail(
                    "vehicles.hazards.severity",
                    format!("{} outside [1, 5]", hazard.severity),
                );
            }
        }
        for send in &vehicle.v2v_sends {
            if !config.vehicles.iter().any(|v| v.id == send.to) {
                return fail(
                    "vehicles.v2v_sends.to",
                    format!("unknown vehicle {}", send.to),
                );
            }
        }
    }
    for attack in &config.attacks {
        if !config.vehicles.iter().any(|v| v.id == attack.vehicle()) {
            return fail(
                "attacks.vehicle",
                format!("unknown vehicle {}", attack.vehicle()),
            );
        }
    }
    match config.addressing.mode {
        AddressingMode::Static => {
            for vehicle in &config.vehicles {
                let address = config
                    .addressing
                    .static_map
                    .get(&vehicle.id)
                    .ok_or_else(|| ScenarioError::ConfigValidation {
                        field: "addressing.static_map".into(),
                        detail: format!("no preset address for {}", vehicle.id),
                    })?;
                address
                    .parse::<Address>()
                    .map_err(|e| ScenarioError::ConfigValidation {
                        field: "addressing.static_map".into(),
                        detail: e.to_string(),
                    })?;
            }
        }
        AddressingMode::Lease => {
            config
                .addressing
                .lease_base
                .parse::<Address>()
                .map_err(|e| ScenarioError::ConfigValidation {
                    field: "addressing.lease_base".into(),
                    detail: e.to_string(),
                })?;
            if config.addressing.lease_size == 0 {
                return fail("addressing.lease_size", "must be positive".into());
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Everything a finished run exposes for assertions and files.
pub struct SimOutput {
    pub trace: EventTrace,
    pub registry: Vec<ClientRecord>,
    pub audit: Vec<AuditRecord>,
    pub escrow_export: String,
    pub lease_csv: Option<String>,
    pub rsu_counters: GauntletCounters,
    pub obu_hazards: BTreeMap<VehicleId, Vec<crate::obu::ReceivedHazard>>,
    pub obu_counters: BTreeMap<VehicleId, GauntletCounters>,
    /// Offline evidence for audit re-verification.
    pub verify_keys: BTreeMap<VehicleId, [u8; 32]>,
    pub session_tokens: std::collections::HashMap<Pseudonym, VehicleId>,
    pub escrow: crate::policy::EscrowTable,
}

fn subseed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

struct AttackState {
    config: AttackConfig,
    fired: bool,
    flood_emitted: u64,
}

struct EngineVehicle {
    id: VehicleId,
    obu: Obu,
    hazards: VecDeque<HazardEventConfig>,
    v2v_sends: VecDeque<V2vSendConfig>,
    lease_done: bool,
}

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<SimOutput, ScenarioError> {
    validate_config(config)?;
    let mut trace = EventTrace::new();
    let dt = config.time.step_ms;

    // Key material, deterministic from the scenario seed.
    let mut key_rng = ChaCha20Rng::seed_from_u64(subseed(config.seed, "keys"));
    let mut records = vec![KeyRecord::generate(
        Role::Rsu,
        VehicleId::new("rsu"),
        &mut key_rng,
    )];
    for vehicle in &config.vehicles {
        let role: Role = vehicle.role.parse().expect("validated");
        records.push(KeyRecord::generate(
            role,
            VehicleId::new(&vehicle.id),
            &mut key_rng,
        ));
    }

    let addr_pool = match config.addressing.mode {
        AddressingMode::Static => {
            let map: BTreeMap<VehicleId, Address> = config
                .addressing
                .static_map
                .iter()
                .map(|(id, addr)| (VehicleId::new(id), addr.parse().expect("validated")))
                .collect();
            AddressPool::Static(map)
        }
        AddressingMode::Lease => AddressPool::Lease(LeasePool::new(
            config.addressing.lease_base.parse().expect("validated"),
            config.addressing.lease_size,
            config.addressing.lease_ms,
        )),
    };

    let rsu_config = RsuConfig {
        freshness: FreshnessPolicy::new(config.security.tau_ms).expect("validated"),
        replay_width: config.security.replay_width,
        rate_capacity: config.security.rate_capacity,
        rate_refill_per_sec: config.security.rate_refill_per_sec,
        client_timeout_ms: config.security.client_timeout_ms,
        pseudonym_lifetime_ms: config.security.pseudonym_lifetime_ms,
        rotate_pseudonyms: config.security.rotate_pseudonyms,
    };
    let mut rsu = Rsu::new(
        rsu_config,
        PolicyTable::default(),
        &records,
        addr_pool,
        AuditLog::new(),
        ChaCha20Rng::seed_from_u64(subseed(config.seed, "rsu")),
    )
    .map_err(ScenarioError::Engine)?;

    let mut net = SimNet::new(ChaCha20Rng::seed_from_u64(subseed(config.seed, "net")));
    net.add_endpoint("rsu");

    let mut mobility = MobilityModel::new(RangeModel::new(
        Vec2::new(config.range.rsu_position[0], config.range.rsu_position[1]),
        config.range.rsu_radius,
        if config.range.v2v_radius > 0.0 {
            config.range.v2v_radius
        } else {
            config.range.rsu_radius
        },
    ));

    let mut vehicles: Vec<EngineVehicle> = Vec::new();
    for (idx, vc) in config.vehicles.iter().enumerate() {
        let id = VehicleId::new(&vc.id);
        net.add_endpoint(vc.id.clone());
        let heading = Vec2::new(vc.heading[0], vc.heading[1])
            .normalized()
            .expect("validated");
        mobility.insert_vehicle(
            id.clone(),
            Kinematics::new(
                Vec2::new(vc.position[0], vc.position[1]),
                vc.speed_mps,
                heading,
            )
            .map_err(|e| ScenarioError::ConfigValidation {
                field: format!("vehicles.{}", vc.id),
                detail: e.to_string(),
            })?,
        );
        let mut obu = Obu::new(
            records[idx + 1].clone(),
            vc.license.clone(),
            vc.name.clone(),
            ChaCha20Rng::seed_from_u64(subseed(config.seed, &format!("obu:{}", vc.id))),
        );
        obu.set_kinematics(vc.speed_mps, vc.position);
        let mut hazards: Vec<HazardEventConfig> = vc.hazards.clone();
        hazards.sort_by_key(|h| h.time_ms);
        let mut v2v_sends: Vec<V2vSendConfig> = vc.v2v_sends.clone();
        v2v_sends.sort_by_key(|s| s.time_ms);
        vehicles.push(EngineVehicle {
            id,
            obu,
            hazards: hazards.into(),
            v2v_sends: v2v_sends.into(),
            lease_done: false,
        });
    }

    let mut attacks: Vec<AttackState> = config
        .attacks
        .iter()
        .map(|a| AttackState {
            config: a.clone(),
            fired: false,
            flood_emitted: 0,
        })
        .collect();
    let mut tamper_pending: BTreeSet<VehicleId> = BTreeSet::new();
    let mut last_frame: BTreeMap<VehicleId, Vec<u8>> = BTreeMap::new();
    let mut lease_stats: Vec<LeaseStat> = Vec::new();

    if config.time.duration_ms == 0 {
        return Ok(finish(rsu, vehicles, trace, lease_stats, config));
    }

    let steps = config.time.duration_ms / dt;
    for step in 0..=steps {
        let now = step * dt;

        // 1. Mobility: advance and collect range transitions.
        let connectivity = if step == 0 {
            mobility.seed_events(now)
        } else {
            mobility.step(dt, now)
        };
        for event in &connectivity {
            trace.push(
                now,
                EventKind::Connectivity {
                    kind: event.kind,
                    subject: event.subject.clone(),
                    peer: event.peer.clone(),
                },
            );
        }

        // 2. Link states follow the range model.
        let in_range: BTreeSet<VehicleId> = mobility
            .vehicles()
            .filter(|v| v.in_rsu_range)
            .map(|v| v.id.clone())
            .collect();
        let link = |connected: bool| LinkState {
            connected,
            loss_probability: config.transport.loss_probability,
            latency_ms: config.transport.latency_ms,
        };
        for vehicle in &vehicles {
            net.set_link_symmetric(
                "rsu",
                vehicle.id.as_str(),
                link(in_range.contains(&vehicle.id)),
            );
        }
        for i in 0..vehicles.len() {
            for j in i + 1..vehicles.len() {
                let a = vehicles[i].id.clone();
                let b = vehicles[j].id.clone();
                net.set_link_symmetric(
                    a.as_str(),
                    b.as_str(),
                    link(mobility.pair_in_v2v_range(&a, &b)),
                );
            }
        }
        rsu.set_in_range(in_range.clone());

        // 3. Range transitions drive the client state machines.
        for event in &connectivity {
            if event.peer.is_some() {
                continue;
            }
            let Some(vehicle) = vehicles.iter_mut().find(|v| v.id == event.subject) else {
                continue;
            };
            match event.kind {
                ConnectivityKind::EnterRsu => {
                    for frame in vehicle.obu.on_enter_range(now) {
                        send_from(
                            &mut net,
                            &mut last_frame,
                            &mut tamper_pending,
                            &vehicle.id,
                            "rsu",
                            frame,
                            now,
                        );
                    }
                }
                ConnectivityKind::ExitRsu => vehicle.obu.on_exit_range(now),
                _ => {}
            }
            drain_obu_events(&mut trace, &mut vehicle.obu);
        }

        // 4. Lease study: time-to-address per vehicle on first range entry.
        if config.addressing.mode == AddressingMode::Lease {
            for vehicle in vehicles.iter_mut().filter(|v| !v.lease_done) {
                if !in_range.contains(&vehicle.id) {
                    continue;
                }
                vehicle.lease_done = true;
                let lease_seed = subseed(config.seed, &format!("lease:{}", vehicle.id));
                let mut pool = LeasePool::new(
                    config.addressing.lease_base.parse().expect("validated"),
                    config.addressing.lease_size,
                    config.addressing.lease_ms,
                );
                let mut link = LossyLink::new(
                    config.transport.loss_probability,
                    config.transport.latency_ms,
                    ChaCha20Rng::seed_from_u64(lease_seed),
                );
                let (outcome, time_to_address) = match run_lease(
                    &mut link,
                    &config.addressing.retry,
                    &mut pool,
                    &vehicle.id,
                    now,
                ) {
                    Ok(binding) => ("bound", Some(binding.time_to_address_ms)),
                    Err(_) => ("max_retries", None),
                };
                lease_stats.push(LeaseStat {
                    seed: lease_seed,
                    loss_p: config.transport.loss_probability,
                    time_to_address_ms: time_to_address,
                    outcome,
                });
                trace.push(
                    now,
                    EventKind::LeaseOutcome {
                        vehicle: vehicle.id.clone(),
                        outcome: outcome.into(),
                        time_to_address_ms: time_to_address,
                    },
                );
            }
        }

        // 5. Neighbor sets, kinematics, periodic work, scripted events.
        let pseudonyms: BTreeMap<VehicleId, Option<Pseudonym>> = vehicles
            .iter()
            .map(|v| (v.id.clone(), v.obu.current_pseudonym()))
            .collect();
        for i in 0..vehicles.len() {
            let id = vehicles[i].id.clone();
            let neighbors: HashSet<Pseudonym> = vehicles
                .iter()
                .filter(|other| other.id != id && other.obu.is_registered())
                .filter(|other| mobility.pair_in_v2v_range(&id, &other.id))
                .filter_map(|other| pseudonyms[&other.id])
                .collect();
            let vehicle = &mut vehicles[i];
            vehicle.obu.set_v2v_neighbors(neighbors);
            if let Some(state) = mobility.vehicle(&id) {
                vehicle.obu.set_kinematics(
                    state.kinematics.speed,
                    [state.kinematics.position.x, state.kinematics.position.y],
                );
            }
            for frame in vehicle.obu.tick(now) {
                send_from(
                    &mut net,
                    &mut last_frame,
                    &mut tamper_pending,
                    &id,
                    "rsu",
                    frame,
                    now,
                );
            }
            while vehicle.hazards.front().is_some_and(|h| h.time_ms <= now) {
                let hazard = vehicle.hazards.pop_front().unwrap();
                let report = HazardReport {
                    kind: hazard.kind,
                    location: Vec2::new(hazard.location[0], hazard.location[1]),
                    severity: hazard.severity,
                    description: hazard.description.clone(),
                };
                match vehicle.obu.report_hazard(report, now) {
                    ReportOutcome::Sent(frame) => {
                        send_from(
                            &mut net,
                            &mut last_frame,
                            &mut tamper_pending,
                            &id,
                            "rsu",
                            frame,
                            now,
                        );
                    }
                    ReportOutcome::QueuedOffline => {
                        trace.push(
                            now,
                            EventKind::Note {
                                node: id.to_string(),
                                text: "hazard_queued_offline".into(),
                            },
                        );
                    }
                }
            }
            while vehicle.v2v_sends.front().is_some_and(|s| s.time_ms <= now) {
                let send = vehicle.v2v_sends.pop_front().unwrap();
                let target = VehicleId::new(&send.to);
                let target_pseudonym = pseudonyms.get(&target).copied().flatten();
                let outcome = target_pseudonym
                    .ok_or(crate::obu::ObuError::UnknownPeer)
                    .and_then(|p| vehicle.obu.send_v2v(p, send.payload.as_bytes(), now));
                match outcome {
                    Ok((path, frames)) => {
                        trace.push(
                            now,
                            EventKind::V2vPath {
                                from: id.clone(),
                                to: target.clone(),
                                path,
                            },
                        );
                        for (dest, frame) in frames {
                            let to = match dest {
                                V2vDest::Rsu => "rsu".to_string(),
                                V2vDest::Peer(p) => {
                                    match pseudonyms.iter().find(|(_, v)| **v == Some(p)) {
                                        Some((vid, _)) => vid.to_string(),
                                        None => continue,
                                    }
                                }
                            };
                            send_from(
                                &mut net,
                                &mut last_frame,
                                &mut tamper_pending,
                                &id,
                                &to,
                                frame,
                                now,
                            );
                        }
                    }
                    Err(_) => {
                        trace.push(
                            now,
                            EventKind::V2vPath {
                                from: id.clone(),
                                to: target.clone(),
                                path: V2vPathKind::Undeliverable,
                            },
                        );
                    }
                }
            }
            drain_obu_events(&mut trace, &mut vehicles[i].obu);
        }

        // 6. Attacks.
        for attack in attacks.iter_mut() {
            match &attack.config {
                AttackConfig::Tamper { vehicle, at_ms } => {
                    if !attack.fired && now >= *at_ms {
                        attack.fired = true;
                        tamper_pending.insert(VehicleId::new(vehicle));
                    }
                }
                AttackConfig::Replay { vehicle, at_ms } => {
                    if !attack.fired && now >= *at_ms {
                        let id = VehicleId::new(vehicle);
                        if let Some(frame) = last_frame.get(&id).cloned() {
                            attack.fired = true;
                            let _ = net.send(id.as_str(), "rsu", frame, now);
                            trace.push(
                                now,
                                EventKind::Note {
                                    node: vehicle.clone(),
                                    text: "replay_injected".into(),
                                },
                            );
                        }
                    }
                }
                AttackConfig::Flood {
                    vehicle,
                    start_ms,
                    duration_ms,
                    rate_hz,
                } => {
                    if now >= *start_ms && now < start_ms + duration_ms {
                        let id = VehicleId::new(vehicle);
                        let elapsed = now - start_ms;
                        let due = (u64::from(*rate_hz) * (elapsed + dt)) / 1000;
                        let Some(v) = vehicles.iter_mut().find(|v| v.id == id) else {
                            continue;
                        };
                        if !v.obu.is_registered() {
                            continue;
                        }
                        while attack.flood_emitted < due {
                            attack.flood_emitted += 1;
                            let frame = v.obu.craft_beacon(30.0, [0.0, 0.0], now);
                            send_from(
                                &mut net,
                                &mut last_frame,
                                &mut tamper_pending,
                                &id,
                                "rsu",
                                frame,
                                now,
                            );
                        }
                    }
                }
                AttackConfig::ForgeBroadcast { vehicle, at_ms } => {
                    if !attack.fired && now >= *at_ms {
                        let id = VehicleId::new(vehicle);
                        let Some(v) = vehicles.iter_mut().find(|v| v.id == id) else {
                            continue;
                        };
                        if !v.obu.is_registered() {
                            continue;
                        }
                        attack.fired = true;
                        let report = HazardReport {
                            kind: HazardKind::Accident,
                            location: Vec2::ZERO,
                            severity: 5,
                            description: "forged emergency broadcast".into(),
                        };
                        let frame = v.obu.craft_forged_broadcast(&report, now);
                        send_from(
                            &mut net,
                            &mut last_frame,
                            &mut tamper_pending,
                            &id,
                            "rsu",
                            frame,
                            now,
                        );
                    }
                }
            }
        }

        // 7. Station inbound, then its replies, broadcasts, peer lists.
        for delivery in net.poll("rsu", now) {
            let replies = rsu.handle_frame(&delivery.from, &delivery.bytes, now);
            drain_rsu_events(&mut trace, &mut rsu);
            for out in replies {
                let _ = net.send("rsu", &out.to, out.bytes, now);
            }
        }
        for out in rsu.flush_broadcasts(now) {
            let _ = net.send("rsu", &out.to, out.bytes, now);
        }
        drain_rsu_events(&mut trace, &mut rsu);
        if rsu.take_registry_dirty() {
            for out in rsu.send_peer_lists(now) {
                let _ = net.send("rsu", &out.to, out.bytes, now);
            }
        }

        // 8. Vehicle inbound.
        for vehicle in vehicles.iter_mut() {
            for delivery in net.poll(vehicle.id.as_str(), now) {
                for frame in vehicle.obu.handle_frame(&delivery.bytes, now) {
                    send_from(
                        &mut net,
                        &mut last_frame,
                        &mut tamper_pending,
                        &vehicle.id,
                        "rsu",
                        frame,
                        now,
                    );
                }
            }
            drain_obu_events(&mut trace, &mut vehicle.obu);
        }

        // 9. Housekeeping: expiry and the address-uniqueness invariant.
        rsu.expire_stale_clients(now);
        drain_rsu_events(&mut trace, &mut rsu);
        if rsu.take_registry_dirty() {
            for out in rsu.send_peer_lists(now) {
                let _ = net.send("rsu", &out.to, out.bytes, now);
            }
        }
        let addresses: Vec<String> = rsu
            .list_clients()
            .iter()
            .map(|c| c.address.clone())
            .collect();
        let unique: HashSet<&String> = addresses.iter().collect();
        assert_eq!(
            addresses.len(),
            unique.len(),
            "two live holders share an address"
        );
    }

    Ok(finish(rsu, vehicles, trace, lease_stats, config))
}

fn send_from(
    net: &mut SimNet,
    last_frame: &mut BTreeMap<VehicleId, Vec<u8>>,
    tamper_pending: &mut BTreeSet<VehicleId>,
    from: &VehicleId,
    to: &str,
    mut frame: Vec<u8>,
    now: u64,
) {
    last_frame.insert(from.clone(), frame.clone());
    if tamper_pending.remove(from) {
        // Flip one bit mid-frame, past the frame header.
        let at = (frame.len() / 2).max(crate::wire::FRAME_HEADER_LEN);
        if at < frame.len() {
            frame[at] ^= 0x01;
        }
    }
    let _ = net.send(from.as_str(), to, frame, now);
}

fn drain_rsu_events(trace: &mut EventTrace, rsu: &mut Rsu) {
    for (time, kind) in rsu.take_events() {
        trace.push(time, kind);
    }
}

fn drain_obu_events(trace: &mut EventTrace, obu: &mut Obu) {
    for (time, kind) in obu.take_events() {
        trace.push(time, kind);
    }
}

fn finish(
    rsu: Rsu,
    vehicles: Vec<EngineVehicle>,
    trace: EventTrace,
    lease_stats: Vec<LeaseStat>,
    config: &ScenarioConfig,
) -> SimOutput {
    let lease_csv = if config.addressing.mode == AddressingMode::Lease {
        Some(lease_stats_csv(&lease_stats))
    } else {
        None
    };
    SimOutput {
        registry: rsu.list_clients(),
        audit: rsu.audit().records().to_vec(),
        escrow_export: rsu.escrow().export_lines(),
        rsu_counters: rsu.counters().clone(),
        verify_keys: rsu.verify_keys(),
        session_tokens: rsu.session_tokens().clone(),
        escrow: rsu.escrow().clone(),
        obu_hazards: vehicles
            .iter()
            .map(|v| (v.id.clone(), v.obu.hazards().to_vec()))
            .collect(),
        obu_counters: vehicles
            .iter()
            .map(|v| (v.id.clone(), v.obu.counters().clone()))
            .collect(),
        trace,
        lease_csv,
    }
}
