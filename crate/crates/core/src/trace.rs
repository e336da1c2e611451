//! Replayable event traces: one JSON object per line, totally ordered by
//! (time, emission index). Identical scenario and seed produce identical
//! trace bytes, which is what the golden tests diff.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::domain::VehicleId;
use crate::mobility::ConnectivityKind;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace at line {line}: {detail}")]
    CorruptTrace { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where an event was observed.
pub type NodeName = String;

/// The security-gauntlet stage that rejected an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStage {
    Decode,
    Signature,
    Freshness,
    Replay,
    Authorization,
    RateLimit,
    Decrypt,
    Credentials,
    ProtocolOrder,
}

impl RejectStage {
    pub fn name(self) -> &'static str {
        match self {
            RejectStage::Decode => "decode",
            RejectStage::Signature => "signature",
            RejectStage::Freshness => "freshness",
            RejectStage::Replay => "replay",
            RejectStage::Authorization => "authorization",
            RejectStage::RateLimit => "rate_limit",
            RejectStage::Decrypt => "decrypt",
            RejectStage::Credentials => "credentials",
            RejectStage::ProtocolOrder => "protocol_order",
        }
    }
}

/// Everything a scenario run can log. Field names are part of the trace
/// format; changing them breaks committed golden traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Connectivity {
        kind: ConnectivityKind,
        subject: VehicleId,
        #[serde(skip_serializing_if = "Option::is_none")]
        peer: Option<VehicleId>,
    },
    HandshakeStage {
        node: NodeName,
        vehicle: VehicleId,
        stage: String,
    },
    EnvelopeVerdict {
        node: NodeName,
        sender_pseudonym: String,
        sequence: u64,
        msg_type: String,
        accepted: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        reject_stage: Option<RejectStage>,
    },
    RegistryChange {
        change: RegistryChange,
        vehicle: VehicleId,
        #[serde(skip_serializing_if = "Option::is_none")]
        address: Option<String>,
    },
    AddressAssigned {
        vehicle: VehicleId,
        address: String,
        mode: String,
        time_to_address_ms: u64,
    },
    BroadcastDelivery {
        to: VehicleId,
        origin_pseudonym: String,
        origin_sequence: u64,
        priority: bool,
    },
    HazardAccepted {
        node: NodeName,
        origin_pseudonym: String,
        origin_sequence: u64,
        kind: String,
    },
    V2vPath {
        from: VehicleId,
        to: VehicleId,
        path: V2vPathKind,
    },
    LeaseOutcome {
        vehicle: VehicleId,
        outcome: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        time_to_address_ms: Option<u64>,
    },
    Note {
        node: NodeName,
        text: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistryChange {
    Registered,
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum V2vPathKind {
    Direct,
    ViaRelay,
    Undeliverable,
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_ms: u64,
    pub index: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Ordered, replayable event log. The writer assigns emission indices so
/// the (time, index) order is total and file order equals logical order.
#[derive(Debug, Default)]
pub struct EventTrace {
    events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn new() -> Self {
        EventTrace::default()
    }

    pub fn push(&mut self, time_ms: u64, kind: EventKind) {
        let index = self.events.len() as u64;
        self.events.push(TraceEvent {
            time_ms,
            index,
            kind,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<EventTrace, TraceError> {
        let mut events = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: TraceEvent =
                serde_json::from_str(line).map_err(|e| TraceError::CorruptTrace {
                    line: idx + 1,
                    detail: e.to_string(),
                })?;
            events.push(event);
        }
        Ok(EventTrace { events })
    }
}

/// Filters for `trace inspect`.
#[derive(Debug, Clone, Default)]
pub struct TraceFilter {
    pub vehicle: Option<VehicleId>,
    pub kind: Option<String>,
    pub from_ms: Option<u64>,
    pub to_ms: Option<u64>,
}

fn event_kind_name(kind: &EventKind) -> &'static str {
    match kind {
        EventKind::Connectivity { .. } => "connectivity",
        EventKind::HandshakeStage { .. } => "handshake_stage",
        EventKind::EnvelopeVerdict { .. } => "envelope_verdict",
        EventKind::RegistryChange { .. } => "registry_change",
        EventKind::AddressAssigned { .. } => "address_assigned",
        EventKind::BroadcastDelivery { .. } => "broadcast_delivery",
        EventKind::HazardAccepted { .. } => "hazard_accepted",
        EventKind::V2vPath { .. } => "v2v_path",
        EventKind::LeaseOutcome { .. } => "lease_outcome",
        EventKind::Note { .. } => "note",
    }
}

fn connectivity_kind_name(kind: ConnectivityKind) -> &'static str {
    match kind {
        ConnectivityKind::EnterRsu => "ENTER_RSU",
        ConnectivityKind::ExitRsu => "EXIT_RSU",
        ConnectivityKind::EnterV2v => "ENTER_V2V",
        ConnectivityKind::ExitV2v => "EXIT_V2V",
    }
}

fn mentions_vehicle(kind: &EventKind, vehicle: &VehicleId) -> bool {
    match kind {
        EventKind::Connectivity { subject, peer, .. } => {
            subject == vehicle || peer.as_ref() == Some(vehicle)
        }
        EventKind::HandshakeStage { vehicle: v, .. } => v == vehicle,
        EventKind::EnvelopeVerdict { node, .. } => node == vehicle.as_str(),
        EventKind::RegistryChange { vehicle: v, .. } => v == vehicle,
        EventKind::AddressAssigned { vehicle: v, .. } => v == vehicle,
        EventKind::BroadcastDelivery { to, .. } => to == vehicle,
        EventKind::HazardAccepted { node, .. } => node == vehicle.as_str(),
        EventKind::V2vPath { from, to, .. } => from == vehicle || to == vehicle,
        EventKind::LeaseOutcome { vehicle: v, .. } => v == vehicle,
        EventKind::Note { node, .. } => node == vehicle.as_str(),
    }
}

impl TraceFilter {
    pub fn matches(&self, event: &TraceEvent) -> bool {
        if let Some(from) = self.from_ms {
            if event.time_ms < from {
                return false;
            }
        }
        if let Some(to) = self.to_ms {
            if event.time_ms > to {
                return false;
            }
        }
        if let Some(vehicle) = &self.vehicle {
            if !mentions_vehicle(&event.kind, vehicle) {
                return false;
            }
        }
        if let Some(kind) = &self.kind {
            let matches_kind = event_kind_name(&event.kind) == kind
                || matches!(
                    &event.kind,
                    EventKind::Connectivity { kind: ck, .. }
                        if connectivity_kind_name(*ck) == kind
                );
            if !matches_kind {
                return false;
            }
        }
        true
    }
}

/// Aggregate counts for the inspect summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub total_events: usize,
    pub events_by_kind: BTreeMap<String, usize>,
    pub deliveries: usize,
    pub rejections_total: usize,
    pub rejections_by_stage: BTreeMap<String, usize>,
    /// Closed-form from ENTER/EXIT pairs; open intervals close at the last
    /// event time in the trace.
    pub time_in_rsu_range_ms: BTreeMap<String, u64>,
}

pub fn summarize(trace: &EventTrace) -> TraceSummary {
    let mut events_by_kind = BTreeMap::new();
    let mut deliveries = 0;
    let mut rejections_total = 0;
    let mut rejections_by_stage: BTreeMap<String, usize> = BTreeMap::new();
    let mut enters: BTreeMap<String, u64> = BTreeMap::new();
    let mut in_range: BTreeMap<String, u64> = BTreeMap::new();
    let end_time = trace.events().last().map_or(0, |e| e.time_ms);

    for event in trace.events() {
        *events_by_kind
            .entry(event_kind_name(&event.kind).to_string())
            .or_default() += 1;
        match &event.kind {
            EventKind::BroadcastDelivery { .. } => deliveries += 1,
            EventKind::EnvelopeVerdict {
                accepted,
                reject_stage,
                ..
            } => {
                if !accepted {
                    rejections_total += 1;
                    if let Some(stage) = reject_stage {
                        *rejections_by_stage
                            .entry(stage.name().to_string())
                            .or_default() += 1;
                    }
                }
            }
            EventKind::Connectivity { kind, subject, .. } => match kind {
                ConnectivityKind::EnterRsu => {
                    enters.insert(subject.to_string(), event.time_ms);
                }
                ConnectivityKind::ExitRsu => {
                    if let Some(start) = enters.remove(subject.as_str()) {
                        *in_range.entry(subject.to_string()).or_default() += event.time_ms - start;
                    }
                }
                _ => {}
            },
            _ => {}
        }
    }
    for (vehicle, start) in enters {
        *in_range.entry(vehicle).or_default() += end_time.saturating_sub(start);
    }
    TraceSummary {
        total_events: trace.events().len(),
        events_by_kind,
        deliveries,
        rejections_total,
        rejections_by_stage,
        time_in_rsu_range_ms: in_range,
    }
}
