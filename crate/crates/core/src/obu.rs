//! Vehicle-side client: detects range entry, authenticates, registers,
//! beacons, reports hazards, receives broadcasts, and talks V2V directly
//! or through the base-station relay.
//!
//! All methods are I/O-free: they take the current time and return frames
//! to transmit. The scenario engine (or the live socket loop) moves bytes.

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, HashSet, VecDeque};
use thiserror::Error;

use crate::crypto::{
    check_freshness, establish_session, key_confirmation, open_envelope, seal_envelope, verify,
    Freshness, FreshnessPolicy, NonceCounter, ReplayGuard, ReplayVerdict, SessionKey, SigningKey,
};
use crate::domain::{HazardReport, VehicleId};
use crate::keyfile::KeyRecord;
use crate::policy::{Decision, PolicyTable, RateDecision, RateLimiter, Role};
use crate::rsu::GauntletCounters;
use crate::trace::{EventKind, RejectStage, V2vPathKind};
use crate::wire::{
    body, decode_envelope, decode_frame, encode_envelope, encode_frame, Envelope, MessageType,
    Pseudonym,
};

/// Beacon cadence while registered.
pub const BEACON_INTERVAL_MS: u64 = 1_000;
/// Handshake retry budget while in range.
pub const HANDSHAKE_RETRIES: u32 = 3;
/// First handshake retry timer; doubles per retry.
pub const HANDSHAKE_TIMEOUT_MS: u64 = 1_000;
/// Offline hazard buffer capacity; the oldest report drops first.
pub const OFFLINE_BUFFER_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObuError {
    #[error("not registered with the base station")]
    NotRegistered,
    #[error("unknown peer")]
    UnknownPeer,
}

/// Client state machine positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObuPhase {
    OutOfRange,
    Connecting,
    Authenticating,
    Registered,
}

/// Outcome of [`Obu::report_hazard`].
#[derive(Debug, Clone, PartialEq)]
pub enum ReportOutcome {
    /// The sealed, signed HAZARD frame to transmit.
    Sent(Vec<u8>),
    /// Out of range; buffered for the next registration.
    QueuedOffline,
}

/// Destination for a frame produced by [`Obu::send_v2v`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum V2vDest {
    Rsu,
    Peer(Pseudonym),
}

/// A hazard accepted from a broadcast, with receipt bookkeeping.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReceivedHazard {
    pub origin_pseudonym_hex: String,
    pub origin_sequence: u64,
    pub report: HazardReport,
    pub received_at_ms: u64,
}

#[derive(Debug, Clone)]
struct PeerInfo {
    verify_key: [u8; 32],
}

#[derive(Debug)]
struct ObuSession {
    key: SessionKey,
    token: Pseudonym,
    pseudonyms: Vec<Pseudonym>,
    pseudonym_cursor: usize,
    rotate: bool,
    address: Option<String>,
    rsu_pseudonym: Option<Pseudonym>,
    rsu_verify_key: Option<[u8; 32]>,
    group_key: Option<SessionKey>,
    seq: NonceCounter,
}

impl ObuSession {
    fn current_pseudonym(&mut self) -> Pseudonym {
        if self.pseudonyms.is_empty() {
            return self.token;
        }
        let p = self.pseudonyms[self.pseudonym_cursor % self.pseudonyms.len()];
        if self.rotate {
            self.pseudonym_cursor += 1;
        }
        p
    }
}

/// The on-board unit. One per vehicle; stepped by the scenario engine in
/// deterministic order, or driven by its own socket loop in live mode.
pub struct Obu {
    record: KeyRecord,
    license_number: String,
    vehicle_name: String,
    signing: SigningKey,
    record_hash: [u8; 32],
    phase: ObuPhase,
    session: Option<ObuSession>,
    pending_client_nonce: Option<Vec<u8>>,
    handshake_sent_at: Option<u64>,
    handshake_retries: u32,
    last_beacon_ms: Option<u64>,
    speed_mps: f64,
    position: [f64; 2],
    offline_buffer: VecDeque<HazardReport>,
    hazard_cache: HashSet<(Pseudonym, u64)>,
    hazards: Vec<ReceivedHazard>,
    v2v_inbox: Vec<(Pseudonym, Vec<u8>)>,
    v2v_neighbors: HashSet<Pseudonym>,
    peers: BTreeMap<Pseudonym, PeerInfo>,
    policy: PolicyTable,
    freshness: FreshnessPolicy,
    replay: ReplayGuard,
    limiter: RateLimiter,
    counters: GauntletCounters,
    events: Vec<(u64, EventKind)>,
    credentials_rejected: bool,
    rng: ChaCha20Rng,
}

impl Obu {
    pub fn new(
        record: KeyRecord,
        license_number: String,
        vehicle_name: String,
        rng: ChaCha20Rng,
    ) -> Self {
        let signing = record.signing_key();
        // The credential hash is expensive to derive; do it once.
        let salt = crate::crypto::salt_for_username(record.id.as_str());
        let record_hash = crate::crypto::pbkdf2_sha256(
            record.password().as_bytes(),
            &salt,
            crate::crypto::PASSWORD_ITERATIONS,
        );
        Obu {
            record,
            license_number,
            vehicle_name,
            signing,
            record_hash,
            phase: ObuPhase::OutOfRange,
            session: None,
            pending_client_nonce: None,
            handshake_sent_at: None,
            handshake_retries: 0,
            last_beacon_ms: None,
            speed_mps: 0.0,
            position: [0.0, 0.0],
            offline_buffer: VecDeque::new(),
            hazard_cache: HashSet::new(),
            hazards: Vec::new(),
            v2v_inbox: Vec::new(),
            v2v_neighbors: HashSet::new(),
            peers: BTreeMap::new(),
            policy: PolicyTable::default(),
            freshness: FreshnessPolicy::default(),
            replay: ReplayGuard::new(crate::crypto::DEFAULT_REPLAY_WIDTH),
            limiter: RateLimiter::default(),
            counters: GauntletCounters::default(),
            events: Vec::new(),
            credentials_rejected: false,
            rng,
        }
    }

    pub fn vehicle_id(&self) -> &VehicleId {
        &self.record.id
    }

    pub fn phase(&self) -> ObuPhase {
        self.phase
    }

    pub fn is_registered(&self) -> bool {
        self.phase == ObuPhase::Registered
    }

    pub fn credentials_rejected(&self) -> bool {
        self.credentials_rejected
    }

    pub fn session_key(&self) -> Option<&SessionKey> {
        self.session.as_ref().map(|s| &s.key)
    }

    pub fn address(&self) -> Option<&str> {
        self.session.as_ref().and_then(|s| s.address.as_deref())
    }

    pub fn current_pseudonym(&self) -> Option<Pseudonym> {
        let session = self.session.as_ref()?;
        Some(if session.pseudonyms.is_empty() {
            session.token
        } else {
            session.pseudonyms[session.pseudonym_cursor % session.pseudonyms.len()]
        })
    }

    pub fn hazards(&self) -> &[ReceivedHazard] {
        &self.hazards
    }

    /// Local hazard list as JSON, for assertions and the live CLI.
    pub fn hazards_json(&self) -> String {
        serde_json::to_string_pretty(&self.hazards).expect("hazards serialize")
    }

    pub fn v2v_inbox(&self) -> &[(Pseudonym, Vec<u8>)] {
        &self.v2v_inbox
    }

    pub fn counters(&self) -> &GauntletCounters {
        &self.counters
    }

    pub fn take_events(&mut self) -> Vec<(u64, EventKind)> {
        std::mem::take(&mut self.events)
    }

    pub fn set_kinematics(&mut self, speed_mps: f64, position: [f64; 2]) {
        self.speed_mps = speed_mps;
        self.position = position;
    }

    /// Range bridge: pseudonyms of peers currently within direct V2V range.
    pub fn set_v2v_neighbors(&mut self, neighbors: HashSet<Pseudonym>) {
        self.v2v_neighbors = neighbors;
    }

    pub fn enable_rotation(&mut self) {
        if let Some(session) = &mut self.session {
            session.rotate = true;
        }
    }

    fn event(&mut self, now_ms: u64, kind: EventKind) {
        self.events.push((now_ms, kind));
    }

    // -- handshake ---------------------------------------------------------

    /// Range-entry hook: begins the handshake when out of range, otherwise
    /// does nothing.
    pub fn on_enter_range(&mut self, now_ms: u64) -> Vec<Vec<u8>> {
        if self.phase != ObuPhase::OutOfRange {
            return Vec::new();
        }
        self.handshake_retries = 0;
        self.credentials_rejected = false;
        self.start_handshake(now_ms)
    }

    /// Emits HELLO plus AUTH and arms the retry timer.
    pub fn start_handshake(&mut self, now_ms: u64) -> Vec<Vec<u8>> {
        self.phase = ObuPhase::Connecting;
        let mut client_nonce = vec![0u8; 16];
        self.rng.fill_bytes(&mut client_nonce);
        self.pending_client_nonce = Some(client_nonce.clone());
        let proof = crate::crypto::password_proof(
            &self.record_hash,
            self.record.id.as_str(),
            &client_nonce,
        );
        let auth = body::Auth {
            username: self.record.id.to_string(),
            proof_hex: hex::encode(proof),
            client_nonce_hex: hex::encode(client_nonce),
        };
        self.phase = ObuPhase::Authenticating;
        self.handshake_sent_at = Some(now_ms);
        self.event(
            now_ms,
            EventKind::HandshakeStage {
                node: self.record.id.to_string(),
                vehicle: self.record.id.clone(),
                stage: "hello".into(),
            },
        );
        vec![
            encode_frame(MessageType::Hello, &[]).expect("empty body"),
            encode_frame(MessageType::Auth, &body::encode(&auth)).expect("small body"),
        ]
    }

    /// Range-exit hook: drops the session. A later re-entry runs a fresh
    /// handshake with a fresh sequence space.
    pub fn on_exit_range(&mut self, _now_ms: u64) {
        self.phase = ObuPhase::OutOfRange;
        self.session = None;
        self.pending_client_nonce = None;
        self.handshake_sent_at = None;
        self.last_beacon_ms = None;
    }

    /// Test/scenario hook: forget the session without a range transition.
    pub fn reset_session(&mut self) {
        self.on_exit_range(0);
    }

    /// Periodic driver: handshake retries with backoff and the beacon
    /// cadence. Returns frames to transmit.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        match self.phase {
            ObuPhase::Authenticating => {
                if let Some(sent_at) = self.handshake_sent_at {
                    let timeout = HANDSHAKE_TIMEOUT_MS << self.handshake_retries;
                    if now_ms.saturating_sub(sent_at) >= timeout
                        && self.handshake_retries < HANDSHAKE_RETRIES
                        && !self.credentials_rejected
                    {
                        self.handshake_retries += 1;
                        out.extend(self.start_handshake(now_ms));
                    }
                }
            }
            ObuPhase::Registered => {
                let due = match self.last_beacon_ms {
                    Some(last) => now_ms.saturating_sub(last) >= BEACON_INTERVAL_MS,
                    None => true,
                };
                if due {
                    out.push(self.craft_beacon(self.speed_mps, self.position, now_ms));
                    self.last_beacon_ms = Some(now_ms);
                }
            }
            _ => {}
        }
        out
    }

    // -- sealed senders ----------------------------------------------------

    fn seal_frame(
        &mut self,
        msg_type: MessageType,
        plaintext: &[u8],
        now_ms: u64,
        use_group_key: bool,
    ) -> Vec<u8> {
        let session = self.session.as_mut().expect("sealing requires a session");
        let seq = session
            .seq
            .next_sequence()
            .expect("session sequence space exhausted");
        let pseudonym = session.current_pseudonym();
        let key = if use_group_key {
            session
                .group_key
                .clone()
                .expect("group key is set after registration")
        } else {
            session.key.clone()
        };
        let env = seal_envelope(
            &self.signing,
            &key,
            pseudonym,
            seq,
            now_ms,
            msg_type.code(),
            plaintext,
        );
        encode_frame(msg_type, &encode_envelope(&env)).expect("bounded body")
    }

    /// REGISTER envelope under the session token; also used to re-send when
    /// the grant was lost.
    pub fn craft_register(&mut self, now_ms: u64) -> Vec<u8> {
        let register = body::Register {
            license_number: self.license_number.clone(),
            vehicle_name: self.vehicle_name.clone(),
            speed_mps: self.speed_mps,
        };
        self.seal_frame(
            MessageType::Register,
            &body::encode(&register),
            now_ms,
            false,
        )
    }

    pub fn craft_beacon(&mut self, speed_mps: f64, position: [f64; 2], now_ms: u64) -> Vec<u8> {
        let beacon = body::Beacon {
            speed_mps,
            position,
        };
        self.seal_frame(MessageType::Beacon, &body::encode(&beacon), now_ms, false)
    }

    pub fn craft_hazard(&mut self, report: &HazardReport, now_ms: u64) -> Vec<u8> {
        let hazard = body::Hazard {
            report: report.clone(),
        };
        self.seal_frame(MessageType::Hazard, &body::encode(&hazard), now_ms, false)
    }

    /// Attack hook: a vehicle forging the station-only broadcast type. The
    /// envelope is valid in every respect except authorization.
    pub fn craft_forged_broadcast(&mut self, report: &HazardReport, now_ms: u64) -> Vec<u8> {
        let bcast = body::HazardBcast {
            origin_pseudonym_hex: hex::encode(self.current_pseudonym().unwrap_or_default()),
            origin_sequence: 0,
            priority: true,
            report: report.clone(),
        };
        self.seal_frame(
            MessageType::HazardBcast,
            &body::encode(&bcast),
            now_ms,
            false,
        )
    }

    /// Reports a hazard: sealed and sent when registered, buffered offline
    /// otherwise (capacity 32, oldest dropped).
    pub fn report_hazard(&mut self, report: HazardReport, now_ms: u64) -> ReportOutcome {
        if self.phase == ObuPhase::Registered {
            ReportOutcome::Sent(self.craft_hazard(&report, now_ms))
        } else {
            if self.offline_buffer.len() == OFFLINE_BUFFER_CAP {
                self.offline_buffer.pop_front();
            }
            self.offline_buffer.push_back(report);
            ReportOutcome::QueuedOffline
        }
    }

    pub fn offline_buffer_len(&self) -> usize {
        self.offline_buffer.len()
    }

    /// V2V send: direct when the peer is a radio neighbor, relayed through
    /// the base station otherwise. `peer` must come from the peer list.
    pub fn send_v2v(
        &mut self,
        peer: Pseudonym,
        payload: &[u8],
        now_ms: u64,
    ) -> Result<(V2vPathKind, Vec<(V2vDest, Vec<u8>)>), ObuError> {
        if self.phase != ObuPhase::Registered {
            return Err(ObuError::NotRegistered);
        }
        if !self.peers.contains_key(&peer) {
            return Err(ObuError::UnknownPeer);
        }
        let own = self.current_pseudonym().expect("registered");
        if self.v2v_neighbors.contains(&peer) {
            let forward = body::RelayForward {
                from_pseudonym_hex: hex::encode(own),
                payload_hex: hex::encode(payload),
            };
            let frame = self.seal_frame(MessageType::Relay, &body::encode(&forward), now_ms, true);
            Ok((V2vPathKind::Direct, vec![(V2vDest::Peer(peer), frame)]))
        } else {
            let request = body::RelayRequest {
                to_pseudonym_hex: hex::encode(peer),
                payload_hex: hex::encode(payload),
            };
            let frame = self.seal_frame(MessageType::Relay, &body::encode(&request), now_ms, false);
            Ok((V2vPathKind::ViaRelay, vec![(V2vDest::Rsu, frame)]))
        }
    }

    // -- inbound -----------------------------------------------------------

    /// Handles one inbound frame and returns any frames to transmit in
    /// response (REGISTER after AUTH_OK, buffered hazards after the grant).
    pub fn handle_frame(&mut self, bytes: &[u8], now_ms: u64) -> Vec<Vec<u8>> {
        let Ok((msg_type, frame_body)) = decode_frame(bytes) else {
            return Vec::new();
        };
        match msg_type {
            MessageType::AuthOk => self.handle_auth_ok(&frame_body, now_ms),
            MessageType::Error => {
                if let Ok(err) = body::decode::<body::ErrorBody>(&frame_body) {
                    if err.code == "bad_credentials" {
                        self.credentials_rejected = true;
                        self.phase = ObuPhase::OutOfRange;
                    }
                }
                Vec::new()
            }
            MessageType::RegisterOk => self.handle_register_ok(&frame_body, now_ms),
            _ => self.handle_envelope(msg_type, &frame_body, now_ms),
        }
    }

    fn handle_auth_ok(&mut self, frame_body: &[u8], now_ms: u64) -> Vec<Vec<u8>> {
        if self.phase != ObuPhase::Authenticating {
            return Vec::new();
        }
        let Ok(auth_ok) = body::decode::<body::AuthOk>(frame_body) else {
            return Vec::new();
        };
        let Some(client_nonce) = self.pending_client_nonce.clone() else {
            return Vec::new();
        };
        let Ok(server_nonce) = hex::decode(&auth_ok.server_nonce_hex) else {
            return Vec::new();
        };
        let Ok(key) = establish_session(&client_nonce, &server_nonce, &self.record.psk, now_ms)
        else {
            return Vec::new();
        };
        // The confirmation tag proves the station knows the pre-shared
        // secret; without it anyone could speak AUTH_OK.
        if hex::decode(&auth_ok.confirm_hex).as_deref() != Ok(key_confirmation(&key).as_slice()) {
            return Vec::new();
        }
        let token = key.session_token();
        self.session = Some(ObuSession {
            key,
            token,
            pseudonyms: Vec::new(),
            pseudonym_cursor: 0,
            rotate: false,
            address: None,
            rsu_pseudonym: None,
            rsu_verify_key: None,
            group_key: None,
            seq: NonceCounter::new(),
        });
        self.event(
            now_ms,
            EventKind::HandshakeStage {
                node: self.record.id.to_string(),
                vehicle: self.record.id.clone(),
                stage: "auth_ok".into(),
            },
        );
        vec![self.craft_register(now_ms)]
    }

    fn handle_register_ok(&mut self, frame_body: &[u8], now_ms: u64) -> Vec<Vec<u8>> {
        // Sealed under the pairwise key derived from the pre-shared secret;
        // AEAD authenticity stands in for the signature until the station's
        // verify key (delivered here) is known.
        let Ok(env) = decode_envelope(frame_body) else {
            return Vec::new();
        };
        if env.payload_type != MessageType::RegisterOk.code() {
            return Vec::new();
        }
        let Some(session) = self.session.as_mut() else {
            return Vec::new();
        };
        let Ok(plaintext) = open_envelope(&session.key, &env) else {
            return Vec::new();
        };
        let Ok(grant) = body::decode::<body::RegisterOk>(&plaintext) else {
            return Vec::new();
        };
        let pseudonyms: Vec<Pseudonym> = grant
            .pseudonyms_hex
            .iter()
            .filter_map(|h| hex::decode(h).ok())
            .filter_map(|b| <Pseudonym>::try_from(b.as_slice()).ok())
            .collect();
        let rsu_pseudonym = hex::decode(&grant.rsu_pseudonym_hex)
            .ok()
            .and_then(|b| <Pseudonym>::try_from(b.as_slice()).ok());
        let rsu_verify_key = hex::decode(&grant.rsu_verify_key_hex)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b.as_slice()).ok());
        let group_key = hex::decode(&grant.group_key_hex)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b.as_slice()).ok());
        let group_id = hex::decode(&grant.group_key_id_hex)
            .ok()
            .and_then(|b| <[u8; 16]>::try_from(b.as_slice()).ok());
        let (Some(rsu_pseudonym), Some(rsu_verify_key), Some(group_key), Some(group_id)) =
            (rsu_pseudonym, rsu_verify_key, group_key, group_id)
        else {
            return Vec::new();
        };
        if pseudonyms.is_empty() {
            return Vec::new();
        }
        session.pseudonyms = pseudonyms;
        session.pseudonym_cursor = 0;
        session.address = Some(grant.address.clone());
        session.rsu_pseudonym = Some(rsu_pseudonym);
        session.rsu_verify_key = Some(rsu_verify_key);
        session.group_key = Some(SessionKey {
            key: group_key,
            established_at_ms: now_ms,
            session_id: group_id,
        });
        self.phase = ObuPhase::Registered;
        self.handshake_sent_at = None;
        self.event(
            now_ms,
            EventKind::HandshakeStage {
                node: self.record.id.to_string(),
                vehicle: self.record.id.clone(),
                stage: "registered".into(),
            },
        );
        // Flush hazards queued while out of range.
        let buffered: Vec<HazardReport> = self.offline_buffer.drain(..).collect();
        buffered
            .into_iter()
            .map(|report| self.craft_hazard(&report, now_ms))
            .collect()
    }

    /// Inbound security gauntlet, same stage order as the base station.
    fn vet_envelope(
        &mut self,
        msg_type: MessageType,
        frame_body: &[u8],
        now_ms: u64,
    ) -> Result<(Envelope, Vec<u8>), RejectStage> {
        let node = self.record.id.to_string();
        macro_rules! reject {
            ($stage:expr, $env:expr) => {{
                let stage = $stage;
                self.counters.reject(stage);
                let (pseudonym, sequence) = match &$env {
                    Some(e) => {
                        let e: &Envelope = e;
                        (hex::encode(e.sender_pseudonym), e.sequence)
                    }
                    None => (String::new(), 0),
                };
                self.event(
                    now_ms,
                    EventKind::EnvelopeVerdict {
                        node: node.clone(),
                        sender_pseudonym: pseudonym,
                        sequence,
                        msg_type: msg_type.name().into(),
                        accepted: false,
                        reject_stage: Some(stage),
                    },
                );
                return Err(stage);
            }};
        }
        self.counters.enter(RejectStage::Decode);
        let env = match decode_envelope(frame_body) {
            Ok(env) if env.payload_type == msg_type.code() => env,
            _ => reject!(RejectStage::Decode, None::<Envelope>),
        };
        self.counters.enter(RejectStage::ProtocolOrder);
        if self.phase != ObuPhase::Registered {
            reject!(RejectStage::ProtocolOrder, Some(&env));
        }
        let (rsu_pseudonym, rsu_unicast_token, rsu_verify_key) = {
            let session = self.session.as_ref().expect("registered implies session");
            (
                session.rsu_pseudonym.expect("registered"),
                session.key.rsu_token(),
                session.rsu_verify_key.expect("registered"),
            )
        };
        let from_rsu =
            env.sender_pseudonym == rsu_pseudonym || env.sender_pseudonym == rsu_unicast_token;
        self.counters.enter(RejectStage::Signature);
        let signer_key = if from_rsu {
            Some(rsu_verify_key)
        } else {
            self.peers.get(&env.sender_pseudonym).map(|p| p.verify_key)
        };
        let verified =
            signer_key.is_some_and(|key| verify(&key, &env.signed_bytes(), &env.signature));
        if !verified {
            reject!(RejectStage::Signature, Some(&env));
        }
        self.counters.enter(RejectStage::Freshness);
        if check_freshness(now_ms, env.timestamp_ms, &self.freshness) != Freshness::Fresh {
            reject!(RejectStage::Freshness, Some(&env));
        }
        self.counters.enter(RejectStage::Replay);
        if self.replay.check(&env.sender_pseudonym, env.sequence) == ReplayVerdict::Replay {
            reject!(RejectStage::Replay, Some(&env));
        }
        self.counters.enter(RejectStage::Authorization);
        let sender_role = if from_rsu { Role::Rsu } else { Role::Obu };
        if self.policy.authorize(sender_role, msg_type) == Decision::Deny {
            reject!(RejectStage::Authorization, Some(&env));
        }
        self.counters.enter(RejectStage::RateLimit);
        let sender_id = if from_rsu {
            VehicleId::new("rsu")
        } else {
            VehicleId::new(hex::encode(env.sender_pseudonym))
        };
        if self.limiter.check(&sender_id, now_ms) == RateDecision::Throttle {
            reject!(RejectStage::RateLimit, Some(&env));
        }
        self.counters.enter(RejectStage::Decrypt);
        let key = {
            let session = self.session.as_ref().expect("registered");
            // Station unicast is pairwise-sealed; broadcasts and direct V2V
            // use the group key.
            if env.sender_pseudonym == rsu_unicast_token {
                session.key.clone()
            } else {
                session.group_key.clone().expect("registered")
            }
        };
        let Ok(plaintext) = open_envelope(&key, &env) else {
            reject!(RejectStage::Decrypt, Some(&env));
        };
        self.event(
            now_ms,
            EventKind::EnvelopeVerdict {
                node,
                sender_pseudonym: hex::encode(env.sender_pseudonym),
                sequence: env.sequence,
                msg_type: msg_type.name().into(),
                accepted: true,
                reject_stage: None,
            },
        );
        Ok((env, plaintext))
    }

    fn handle_envelope(
        &mut self,
        msg_type: MessageType,
        frame_body: &[u8],
        now_ms: u64,
    ) -> Vec<Vec<u8>> {
        let Ok((_env, plaintext)) = self.vet_envelope(msg_type, frame_body, now_ms) else {
            return Vec::new();
        };
        match msg_type {
            MessageType::HazardBcast => {
                if let Ok(bcast) = body::decode::<body::HazardBcast>(&plaintext) {
                    self.accept_broadcast(bcast, now_ms);
                }
            }
            MessageType::PeerList => {
                if let Ok(list) = body::decode::<body::PeerList>(&plaintext) {
                    self.peers.clear();
                    for entry in list.peers {
                        let pseudonym = hex::decode(&entry.pseudonym_hex)
                            .ok()
                            .and_then(|b| <Pseudonym>::try_from(b.as_slice()).ok());
                        let key = hex::decode(&entry.verify_key_hex)
                            .ok()
                            .and_then(|b| <[u8; 32]>::try_from(b.as_slice()).ok());
                        if let (Some(pseudonym), Some(verify_key)) = (pseudonym, key) {
                            self.peers.insert(pseudonym, PeerInfo { verify_key });
                        }
                    }
                }
            }
            MessageType::Relay => {
                if let Ok(forward) = body::decode::<body::RelayForward>(&plaintext) {
                    let from = hex::decode(&forward.from_pseudonym_hex)
                        .ok()
                        .and_then(|b| <Pseudonym>::try_from(b.as_slice()).ok());
                    let payload = hex::decode(&forward.payload_hex).ok();
                    if let (Some(from), Some(payload)) = (from, payload) {
                        self.v2v_inbox.push((from, payload));
                    }
                }
            }
            _ => {}
        }
        Vec::new()
    }

    fn accept_broadcast(&mut self, bcast: body::HazardBcast, now_ms: u64) {
        let origin = hex::decode(&bcast.origin_pseudonym_hex)
            .ok()
            .and_then(|b| <Pseudonym>::try_from(b.as_slice()).ok())
            .unwrap_or_default();
        // De-duplicate by originating (pseudonym, sequence): the station may
        // rebroadcast the same hazard in fresh envelopes.
        if !self.hazard_cache.insert((origin, bcast.origin_sequence)) {
            return;
        }
        self.hazards.push(ReceivedHazard {
            origin_pseudonym_hex: bcast.origin_pseudonym_hex.clone(),
            origin_sequence: bcast.origin_sequence,
            report: bcast.report.clone(),
            received_at_ms: now_ms,
        });
        self.event(
            now_ms,
            EventKind::HazardAccepted {
                node: self.record.id.to_string(),
                origin_pseudonym: bcast.origin_pseudonym_hex,
                origin_sequence: bcast.origin_sequence,
                kind: bcast.report.kind.to_string(),
            },
        );
    }
}
