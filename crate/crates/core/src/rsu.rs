//! The base-station service: authenticates vehicles, keeps the client
//! registry, broadcasts hazards, relays V2V traffic, enforces policy, and
//! retains the non-repudiation audit log.
//!
//! Every inbound data envelope runs the security gauntlet in a fixed order:
//! decode, signature, freshness, replay, authorization, rate limit, decrypt.
//! The first failure rejects, is audited with its stage, and later stages
//! never run. Signature comes before decrypt so the audit log holds
//! verifiable evidence even for traffic the base station never opens.

use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use crate::addressing::AddressPool;
use crate::crypto::{
    self, check_freshness, establish_session, key_confirmation, open_envelope, seal_envelope,
    verify, verify_password_proof, Freshness, FreshnessPolicy, NonceCounter, PasswordRecord,
    ReplayGuard, ReplayVerdict, SessionKey, SigningKey, DEFAULT_REPLAY_WIDTH,
};
use crate::domain::{HazardReport, VehicleId};
use crate::keyfile::KeyRecord;
use crate::policy::{
    Decision, EscrowTable, PolicyTable, RateDecision, RateLimiter, Role,
    DEFAULT_PSEUDONYM_LIFETIME_MS, DEFAULT_RATE_CAPACITY, DEFAULT_RATE_REFILL_PER_SEC,
};
use crate::trace::{EventKind, RegistryChange, RejectStage};
use crate::wire::{
    body, decode_envelope, decode_frame, encode_envelope, encode_frame, Envelope, MessageType,
    Pseudonym,
};

/// Default client expiry: sessions silent longer than this are closed.
pub const DEFAULT_CLIENT_TIMEOUT_MS: u64 = 3_000;
/// Pseudonym batch size when per-message rotation is enabled.
pub const ROTATION_BATCH: usize = 128;

/// Connection identifier: the transport endpoint name.
pub type ConnId = String;

/// An outbound frame addressed to one connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    pub to: ConnId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct RsuConfig {
    pub freshness: FreshnessPolicy,
    pub replay_width: u64,
    pub rate_capacity: f64,
    pub rate_refill_per_sec: f64,
    pub client_timeout_ms: u64,
    pub pseudonym_lifetime_ms: u64,
    /// Issue a batch of pseudonyms so clients can rotate per message.
    pub rotate_pseudonyms: bool,
}

impl Default for RsuConfig {
    fn default() -> Self {
        RsuConfig {
            freshness: FreshnessPolicy::default(),
            replay_width: DEFAULT_REPLAY_WIDTH,
            rate_capacity: DEFAULT_RATE_CAPACITY,
            rate_refill_per_sec: DEFAULT_RATE_REFILL_PER_SEC,
            client_timeout_ms: DEFAULT_CLIENT_TIMEOUT_MS,
            pseudonym_lifetime_ms: DEFAULT_PSEUDONYM_LIFETIME_MS,
            rotate_pseudonyms: false,
        }
    }
}

/// What the base station knows about one provisioned vehicle.
#[derive(Debug, Clone)]
pub struct DirectoryEntry {
    pub role: Role,
    pub verify_key: [u8; 32],
    pub psk: [u8; 32],
    pub credential: PasswordRecord,
}

/// Registry row: the fields the base station displays per connected client.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ClientRecord {
    pub vehicle_id: VehicleId,
    pub vehicle_name: String,
    pub license_number: String,
    pub speed_mps: f64,
    pub address: String,
    pub pseudonym_hex: String,
    pub last_seen_ms: u64,
    pub registered_at_ms: u64,
    pub session_id_hex: String,
    pub role: Role,
    #[serde(skip)]
    pub conn: ConnId,
}

impl ClientRecord {
    /// Display line: name, license, speed (km/h at the display boundary),
    /// address, last seen.
    pub fn display_row(&self) -> String {
        format!(
            "{}  {}  {:.1} km/h  {}  last_seen={} ms",
            self.vehicle_name,
            self.license_number,
            self.speed_mps * 3.6,
            self.address,
            self.last_seen_ms
        )
    }
}

/// One audit entry. Accepted and rejected envelopes are both logged;
/// handshake-frame verdicts are logged with `kind = "handshake"`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditRecord {
    pub time_ms: u64,
    pub kind: String,
    pub msg_type: String,
    pub pseudonym_hex: String,
    pub envelope_hex: String,
    pub signature_hex: String,
    pub verdict: String,
}

/// Append-only audit log, optionally mirrored line-by-line to a file
/// (flushed per record, so an interrupted process leaves a valid prefix).
#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<std::io::BufWriter<std::fs::File>>,
}

impl AuditLog {
    pub fn new() -> Self {
        AuditLog::default()
    }

    pub fn with_file(path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(AuditLog {
            records: Vec::new(),
            sink: Some(std::io::BufWriter::new(file)),
        })
    }

    fn append(&mut self, record: AuditRecord) {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("audit records serialize");
            let _ = writeln!(sink, "{line}");
            let _ = sink.flush();
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn envelope_entries(&self) -> usize {
        self.records.iter().filter(|r| r.kind == "envelope").count()
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("audit records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<AuditRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

/// Offline re-verification of audit evidence: every accepted envelope must
/// decode, its signature must verify under the escrow-recovered sender's
/// key, and the escrow must name a provisioned vehicle. Returns the number
/// of records re-verified.
pub fn reverify_audit(
    records: &[AuditRecord],
    escrow: &EscrowTable,
    verify_keys: &BTreeMap<VehicleId, [u8; 32]>,
    session_tokens: &HashMap<Pseudonym, VehicleId>,
) -> Result<usize, String> {
    let mut verified = 0;
    for record in records {
        if record.kind != "envelope" || record.verdict != "accepted" {
            continue;
        }
        let bytes = hex::decode(&record.envelope_hex)
            .map_err(|e| format!("bad envelope hex at t={}: {e}", record.time_ms))?;
        let env = decode_envelope(&bytes)
            .map_err(|e| format!("undecodable envelope at t={}: {e}", record.time_ms))?;
        let sender = escrow
            .recover(&env.sender_pseudonym)
            .or_else(|| session_tokens.get(&env.sender_pseudonym))
            .ok_or_else(|| {
                format!(
                    "pseudonym {} not recoverable at t={}",
                    hex::encode(env.sender_pseudonym),
                    record.time_ms
                )
            })?;
        let key = verify_keys
            .get(sender)
            .ok_or_else(|| format!("no verify key for {sender}"))?;
        if !verify(key, &env.signed_bytes(), &env.signature) {
            return Err(format!(
                "signature failed for {} at t={}",
                sender, record.time_ms
            ));
        }
        verified += 1;
    }
    Ok(verified)
}

/// Gauntlet stages in execution order, including the protocol-order gate
/// that sits between decode and signature.
pub const GAUNTLET_STAGES: [RejectStage; 8] = [
    RejectStage::Decode,
    RejectStage::ProtocolOrder,
    RejectStage::Signature,
    RejectStage::Freshness,
    RejectStage::Replay,
    RejectStage::Authorization,
    RejectStage::RateLimit,
    RejectStage::Decrypt,
];

fn stage_index(stage: RejectStage) -> usize {
    GAUNTLET_STAGES
        .iter()
        .position(|s| *s == stage)
        .expect("stage is a gauntlet stage")
}

/// Instrumented per-stage counters proving the short-circuit property:
/// a stage is entered exactly as often as the previous stage passed.
#[derive(Debug, Clone, Default)]
pub struct GauntletCounters {
    pub entered: [u64; 8],
    pub rejected: [u64; 8],
}

impl GauntletCounters {
    pub(crate) fn enter(&mut self, stage: RejectStage) {
        self.entered[stage_index(stage)] += 1;
    }

    pub(crate) fn reject(&mut self, stage: RejectStage) {
        self.rejected[stage_index(stage)] += 1;
    }

    /// Checks that later stages ran only for envelopes every earlier stage
    /// passed.
    pub fn short_circuit_holds(&self) -> bool {
        (1..GAUNTLET_STAGES.len())
            .all(|i| self.entered[i] == self.entered[i - 1] - self.rejected[i - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Connected { hello_seen: bool },
    Authenticated,
    Registered,
    Closed,
}

#[derive(Debug)]
struct Session {
    phase: Phase,
    vehicle: Option<VehicleId>,
    key: Option<SessionKey>,
    session_token: Option<Pseudonym>,
    out_seq: NonceCounter,
    cached_register_ok: Option<body::RegisterOk>,
}

impl Session {
    fn new() -> Self {
        Session {
            phase: Phase::Connected { hello_seen: false },
            vehicle: None,
            key: None,
            session_token: None,
            out_seq: NonceCounter::new(),
            cached_register_ok: None,
        }
    }
}

/// Where a hazard broadcast originated.
#[derive(Debug, Clone, PartialEq)]
pub enum BroadcastOrigin {
    /// The base station itself raised the hazard.
    Rsu,
    /// Relayed from a vehicle's accepted HAZARD envelope.
    Vehicle {
        pseudonym: Pseudonym,
        sequence: u64,
        vehicle: VehicleId,
        priority: bool,
    },
}

#[derive(Debug)]
struct PendingBroadcast {
    origin: BroadcastOrigin,
    report: HazardReport,
}

/// The base-station service. Single logical owner of registry, audit log,
/// escrow, and rate limiters; feed it frames through one serialized queue.
pub struct Rsu {
    config: RsuConfig,
    policy: PolicyTable,
    signing: SigningKey,
    verify_key: [u8; 32],
    rsu_pseudonym: Pseudonym,
    group_key: SessionKey,
    group_seq: NonceCounter,
    directory: BTreeMap<VehicleId, DirectoryEntry>,
    sessions: BTreeMap<ConnId, Session>,
    registry: Vec<ClientRecord>,
    escrow: EscrowTable,
    replay: ReplayGuard,
    limiter: RateLimiter,
    audit: AuditLog,
    counters: GauntletCounters,
    addr_pool: AddressPool,
    /// Vehicles currently inside the range circle; `None` until the range
    /// bridge reports (live mode treats connected as in range).
    in_range: Option<BTreeSet<VehicleId>>,
    pending_broadcasts: Vec<PendingBroadcast>,
    registry_dirty: bool,
    session_tokens: HashMap<Pseudonym, VehicleId>,
    events: Vec<(u64, EventKind)>,
    rng: ChaCha20Rng,
}

impl Rsu {
    /// Builds the service from the fleet key file contents. `records` must
    /// include exactly one `rsu` entry (the station's own keys); every
    /// other record provisions a vehicle.
    pub fn new(
        config: RsuConfig,
        policy: PolicyTable,
        records: &[KeyRecord],
        addr_pool: AddressPool,
        audit: AuditLog,
        mut rng: ChaCha20Rng,
    ) -> Result<Self, String> {
        let rsu_record = records
            .iter()
            .find(|r| r.role == Role::Rsu)
            .ok_or("key file has no rsu record")?;
        let mut directory = BTreeMap::new();
        for record in records.iter().filter(|r| r.role != Role::Rsu) {
            let salt = crypto::salt_for_username(record.id.as_str());
            let credential = crypto::hash_password(&record.password(), &salt)
                .expect("derived salt meets the length minimum");
            directory.insert(
                record.id.clone(),
                DirectoryEntry {
                    role: record.role,
                    verify_key: record.verifying_key(),
                    psk: record.psk,
                    credential,
                },
            );
        }
        let mut rsu_pseudonym = [0u8; 8];
        rng.fill_bytes(&mut rsu_pseudonym);
        let mut group = [0u8; 32];
        rng.fill_bytes(&mut group);
        let mut group_id = [0u8; 16];
        rng.fill_bytes(&mut group_id);
        let signing = rsu_record.signing_key();
        let verify_key = signing.verifying_key_bytes();
        let replay = ReplayGuard::new(config.replay_width);
        let limiter = RateLimiter::new(config.rate_capacity, config.rate_refill_per_sec);
        Ok(Rsu {
            config,
            policy,
            signing,
            verify_key,
            rsu_pseudonym,
            group_key: SessionKey {
                key: group,
                established_at_ms: 0,
                session_id: group_id,
            },
            group_seq: NonceCounter::new(),
            directory,
            sessions: BTreeMap::new(),
            registry: Vec::new(),
            escrow: EscrowTable::new(),
            replay,
            limiter,
            audit,
            counters: GauntletCounters::default(),
            addr_pool,
            in_range: None,
            pending_broadcasts: Vec::new(),
            registry_dirty: false,
            session_tokens: HashMap::new(),
            events: Vec::new(),
            rng,
        })
    }

    pub fn rsu_pseudonym(&self) -> Pseudonym {
        self.rsu_pseudonym
    }

    pub fn verify_key(&self) -> [u8; 32] {
        self.verify_key
    }

    pub fn group_key(&self) -> &SessionKey {
        &self.group_key
    }

    pub fn escrow(&self) -> &EscrowTable {
        &self.escrow
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn counters(&self) -> &GauntletCounters {
        &self.counters
    }

    pub fn session_tokens(&self) -> &HashMap<Pseudonym, VehicleId> {
        &self.session_tokens
    }

    pub fn verify_keys(&self) -> BTreeMap<VehicleId, [u8; 32]> {
        self.directory
            .iter()
            .map(|(id, e)| (id.clone(), e.verify_key))
            .collect()
    }

    /// Consistent snapshot of the registry, ordered by registration time.
    pub fn list_clients(&self) -> Vec<ClientRecord> {
        self.registry.clone()
    }

    /// Range bridge from the mobility model, refreshed every step.
    pub fn set_in_range(&mut self, vehicles: BTreeSet<VehicleId>) {
        self.in_range = Some(vehicles);
    }

    pub fn take_events(&mut self) -> Vec<(u64, EventKind)> {
        std::mem::take(&mut self.events)
    }

    fn event(&mut self, now_ms: u64, kind: EventKind) {
        self.events.push((now_ms, kind));
    }

    fn vehicle_in_range(&self, vehicle: &VehicleId) -> bool {
        match &self.in_range {
            Some(set) => set.contains(vehicle),
            None => true,
        }
    }

    fn record_index_of(&self, vehicle: &VehicleId) -> Option<usize> {
        self.registry.iter().position(|r| &r.vehicle_id == vehicle)
    }

    fn error_frame(&self, code: &str, stage: Option<RejectStage>, detail: &str) -> Vec<u8> {
        let body = body::ErrorBody {
            code: code.to_string(),
            stage: stage.map(|s| s.name().to_string()),
            detail: detail.to_string(),
        };
        encode_frame(MessageType::Error, &body::encode(&body)).expect("error bodies are small")
    }

    fn audit_handshake(
        &mut self,
        now_ms: u64,
        msg_type: MessageType,
        bytes: &[u8],
        verdict: String,
    ) {
        self.audit.append(AuditRecord {
            time_ms: now_ms,
            kind: "handshake".into(),
            msg_type: msg_type.name().into(),
            pseudonym_hex: String::new(),
            envelope_hex: hex::encode(bytes),
            signature_hex: String::new(),
            verdict,
        });
    }

    fn audit_envelope(
        &mut self,
        now_ms: u64,
        msg_type: &str,
        env_bytes: &[u8],
        env: Option<&Envelope>,
        verdict: String,
    ) {
        let (pseudonym_hex, signature_hex) = match env {
            Some(e) => (hex::encode(e.sender_pseudonym), hex::encode(&e.signature)),
            None => (String::new(), String::new()),
        };
        self.audit.append(AuditRecord {
            time_ms: now_ms,
            kind: "envelope".into(),
            msg_type: msg_type.to_string(),
            pseudonym_hex,
            envelope_hex: hex::encode(env_bytes),
            signature_hex,
            verdict,
        });
    }

    /// Entry point for one inbound frame. Returns the frames to send back.
    pub fn handle_frame(&mut self, conn: &str, bytes: &[u8], now_ms: u64) -> Vec<Outbound> {
        let (msg_type, frame_body) = match decode_frame(bytes) {
            Ok(decoded) => decoded,
            Err(e) => {
                self.audit_handshake(
                    now_ms,
                    MessageType::Error,
                    bytes,
                    format!("rejected:decode:{e}"),
                );
                return Vec::new();
            }
        };
        match msg_type {
            MessageType::Hello => self.handle_hello(conn, now_ms),
            MessageType::Auth => self.handle_auth(conn, &frame_body, now_ms),
            _ => self.handle_envelope_frame(conn, msg_type, &frame_body, now_ms),
        }
    }

    fn handle_hello(&mut self, conn: &str, now_ms: u64) -> Vec<Outbound> {
        // A new HELLO always restarts the session state machine; an
        // existing registry record survives (range flapping must not tear
        // the row down).
        let session = Session {
            phase: Phase::Connected { hello_seen: true },
            ..Session::new()
        };
        self.sessions.insert(conn.to_string(), session);
        self.audit_handshake(now_ms, MessageType::Hello, &[], "accepted".into());
        Vec::new()
    }

    fn handle_auth(&mut self, conn: &str, frame_body: &[u8], now_ms: u64) -> Vec<Outbound> {
        let hello_seen = matches!(
            self.sessions.get(conn).map(|s| s.phase),
            Some(Phase::Connected { hello_seen: true })
        );
        if !hello_seen {
            self.audit_handshake(
                now_ms,
                MessageType::Auth,
                frame_body,
                "rejected:protocol_order".into(),
            );
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame(
                    "protocol_order",
                    Some(RejectStage::ProtocolOrder),
                    "AUTH before HELLO",
                ),
            }];
        }
        let auth: body::Auth = match body::decode(frame_body) {
            Ok(a) => a,
            Err(_) => {
                self.audit_handshake(
                    now_ms,
                    MessageType::Auth,
                    frame_body,
                    "rejected:decode".into(),
                );
                return vec![Outbound {
                    to: conn.to_string(),
                    bytes: self.error_frame(
                        "bad_auth_body",
                        Some(RejectStage::Decode),
                        "unparseable AUTH",
                    ),
                }];
            }
        };
        let vehicle = VehicleId::new(auth.username.clone());
        let Ok(client_nonce) = hex::decode(&auth.client_nonce_hex) else {
            self.audit_handshake(
                now_ms,
                MessageType::Auth,
                frame_body,
                "rejected:decode".into(),
            );
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("bad_nonce", Some(RejectStage::Decode), "nonce not hex"),
            }];
        };
        let Ok(proof) = hex::decode(&auth.proof_hex) else {
            self.audit_handshake(
                now_ms,
                MessageType::Auth,
                frame_body,
                "rejected:decode".into(),
            );
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("bad_proof", Some(RejectStage::Decode), "proof not hex"),
            }];
        };
        let credential_ok = self
            .directory
            .get(&vehicle)
            .map(|entry| {
                verify_password_proof(&entry.credential, &auth.username, &client_nonce, &proof)
            })
            .unwrap_or(false);
        if !credential_ok || client_nonce.len() < crypto::MIN_SESSION_NONCE_LEN {
            self.audit_handshake(
                now_ms,
                MessageType::Auth,
                frame_body,
                "rejected:credentials".into(),
            );
            self.event(
                now_ms,
                EventKind::HandshakeStage {
                    node: "rsu".into(),
                    vehicle: vehicle.clone(),
                    stage: "auth_reject".into(),
                },
            );
            if let Some(session) = self.sessions.get_mut(conn) {
                session.phase = Phase::Closed;
            }
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame(
                    "bad_credentials",
                    Some(RejectStage::Credentials),
                    "authentication failed",
                ),
            }];
        }
        let mut server_nonce = [0u8; 16];
        self.rng.fill_bytes(&mut server_nonce);
        let psk = self.directory[&vehicle].psk;
        let key = establish_session(&client_nonce, &server_nonce, &psk, now_ms)
            .expect("nonce lengths were checked");
        let token = key.session_token();
        let confirm = key_confirmation(&key);
        {
            let session = self.sessions.get_mut(conn).expect("session exists");
            session.phase = Phase::Authenticated;
            session.vehicle = Some(vehicle.clone());
            session.key = Some(key);
            session.session_token = Some(token);
        }
        self.session_tokens.insert(token, vehicle.clone());
        self.audit_handshake(now_ms, MessageType::Auth, frame_body, "accepted".into());
        self.event(
            now_ms,
            EventKind::HandshakeStage {
                node: "rsu".into(),
                vehicle,
                stage: "auth_ok".into(),
            },
        );
        let reply = body::AuthOk {
            server_nonce_hex: hex::encode(server_nonce),
            confirm_hex: hex::encode(confirm),
        };
        vec![Outbound {
            to: conn.to_string(),
            bytes: encode_frame(MessageType::AuthOk, &body::encode(&reply)).expect("small body"),
        }]
    }

    /// The security gauntlet. Returns the decrypted payload and the sender,
    /// or the stage that rejected.
    fn vet_envelope(
        &mut self,
        conn: &str,
        msg_type: MessageType,
        env_bytes: &[u8],
        now_ms: u64,
    ) -> Result<(Envelope, Vec<u8>, VehicleId, Role), RejectStage> {
        // Stage 1: decode. The signed payload_type must match the outer
        // frame label, or a flipped type byte could relabel a signed
        // message.
        self.counters.enter(RejectStage::Decode);
        let env = match decode_envelope(env_bytes) {
            Ok(env) if env.payload_type == msg_type.code() => env,
            _ => {
                self.counters.reject(RejectStage::Decode);
                self.audit_envelope(
                    now_ms,
                    msg_type.name(),
                    env_bytes,
                    None,
                    "rejected:decode".into(),
                );
                self.reject_event(now_ms, msg_type, None, RejectStage::Decode);
                return Err(RejectStage::Decode);
            }
        };
        // Stage 2: protocol order. Envelopes are only meaningful on an
        // authenticated session.
        self.counters.enter(RejectStage::ProtocolOrder);
        let session_ok = matches!(
            self.sessions.get(conn).map(|s| s.phase),
            Some(Phase::Authenticated) | Some(Phase::Registered)
        );
        if !session_ok {
            self.counters.reject(RejectStage::ProtocolOrder);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:protocol_order".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::ProtocolOrder);
            return Err(RejectStage::ProtocolOrder);
        }
        // Stage 3: signature, under the key of whoever owns the pseudonym.
        // An unresolvable pseudonym is unverifiable, which is a signature
        // failure.
        self.counters.enter(RejectStage::Signature);
        let sender = self
            .session_tokens
            .get(&env.sender_pseudonym)
            .cloned()
            .or_else(|| self.escrow.recover(&env.sender_pseudonym).cloned());
        let verified = sender.as_ref().is_some_and(|vehicle| {
            self.directory
                .get(vehicle)
                .is_some_and(|entry| verify(&entry.verify_key, &env.signed_bytes(), &env.signature))
        });
        if !verified {
            self.counters.reject(RejectStage::Signature);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:signature".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::Signature);
            return Err(RejectStage::Signature);
        }
        let vehicle = sender.expect("verified implies resolved");
        let role = self.directory[&vehicle].role;
        // Stage 4: freshness.
        self.counters.enter(RejectStage::Freshness);
        if check_freshness(now_ms, env.timestamp_ms, &self.config.freshness) != Freshness::Fresh {
            self.counters.reject(RejectStage::Freshness);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:freshness".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::Freshness);
            return Err(RejectStage::Freshness);
        }
        // Stage 5: replay.
        self.counters.enter(RejectStage::Replay);
        if self.replay.check(&env.sender_pseudonym, env.sequence) == ReplayVerdict::Replay {
            self.counters.reject(RejectStage::Replay);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:replay".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::Replay);
            return Err(RejectStage::Replay);
        }
        // Stage 6: authorization.
        self.counters.enter(RejectStage::Authorization);
        if self.policy.authorize(role, msg_type) == Decision::Deny {
            self.counters.reject(RejectStage::Authorization);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:authorization".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::Authorization);
            return Err(RejectStage::Authorization);
        }
        // Stage 7: rate limit, keyed by vehicle so pseudonym rotation
        // cannot reset the bucket.
        self.counters.enter(RejectStage::RateLimit);
        if self.limiter.check(&vehicle, now_ms) == RateDecision::Throttle {
            self.counters.reject(RejectStage::RateLimit);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:rate_limit".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::RateLimit);
            return Err(RejectStage::RateLimit);
        }
        // Stage 8: decrypt, under the sender's pairwise session key.
        self.counters.enter(RejectStage::Decrypt);
        let key = self
            .sessions
            .values()
            .find(|s| s.vehicle.as_ref() == Some(&vehicle))
            .and_then(|s| s.key.clone());
        let plaintext = key.and_then(|k| open_envelope(&k, &env).ok());
        let Some(plaintext) = plaintext else {
            self.counters.reject(RejectStage::Decrypt);
            self.audit_envelope(
                now_ms,
                msg_type.name(),
                env_bytes,
                Some(&env),
                "rejected:decrypt".into(),
            );
            self.reject_event(now_ms, msg_type, Some(&env), RejectStage::Decrypt);
            return Err(RejectStage::Decrypt);
        };
        self.audit_envelope(
            now_ms,
            msg_type.name(),
            env_bytes,
            Some(&env),
            "accepted".into(),
        );
        self.event(
            now_ms,
            EventKind::EnvelopeVerdict {
                node: "rsu".into(),
                sender_pseudonym: hex::encode(env.sender_pseudonym),
                sequence: env.sequence,
                msg_type: msg_type.name().into(),
                accepted: true,
                reject_stage: None,
            },
        );
        Ok((env, plaintext, vehicle, role))
    }

    fn reject_event(
        &mut self,
        now_ms: u64,
        msg_type: MessageType,
        env: Option<&Envelope>,
        stage: RejectStage,
    ) {
        self.event(
            now_ms,
            EventKind::EnvelopeVerdict {
                node: "rsu".into(),
                sender_pseudonym: env
                    .map(|e| hex::encode(e.sender_pseudonym))
                    .unwrap_or_default(),
                sequence: env.map(|e| e.sequence).unwrap_or_default(),
                msg_type: msg_type.name().into(),
                accepted: false,
                reject_stage: Some(stage),
            },
        );
    }

    fn handle_envelope_frame(
        &mut self,
        conn: &str,
        msg_type: MessageType,
        frame_body: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        let (env, plaintext, vehicle, role) =
            match self.vet_envelope(conn, msg_type, frame_body, now_ms) {
                Ok(vetted) => vetted,
                Err(stage) => {
                    return vec![Outbound {
                        to: conn.to_string(),
                        bytes: self.error_frame("rejected", Some(stage), msg_type.name()),
                    }];
                }
            };
        match msg_type {
            MessageType::Register => {
                self.dispatch_register(conn, &vehicle, role, &plaintext, now_ms)
            }
            MessageType::Beacon => self.dispatch_beacon(&vehicle, &plaintext, now_ms),
            MessageType::Hazard => self.dispatch_hazard(&vehicle, role, &env, &plaintext, now_ms),
            MessageType::Relay => self.dispatch_relay(conn, &vehicle, &env, &plaintext, now_ms),
            MessageType::Disconnect => self.dispatch_disconnect(conn, &vehicle, now_ms),
            MessageType::AddrDiscover => self.dispatch_addr_discover(conn, &vehicle, now_ms),
            MessageType::AddrRequest => {
                self.dispatch_addr_request(conn, &vehicle, &plaintext, now_ms)
            }
            // Anything else a client is allowed to send has no server-side
            // meaning; acceptance was already audited.
            _ => Vec::new(),
        }
    }

    fn seal_to_session(
        &mut self,
        conn: &str,
        msg_type: MessageType,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Option<Outbound> {
        let session = self.sessions.get_mut(conn)?;
        let key = session.key.clone()?;
        let seq = session.out_seq.next_sequence().ok()?;
        let env = seal_envelope(
            &self.signing,
            &key,
            key.rsu_token(),
            seq,
            now_ms,
            msg_type.code(),
            plaintext,
        );
        Some(Outbound {
            to: conn.to_string(),
            bytes: encode_frame(msg_type, &encode_envelope(&env)).expect("bounded body"),
        })
    }

    fn dispatch_register(
        &mut self,
        conn: &str,
        vehicle: &VehicleId,
        role: Role,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        let Ok(register) = body::decode::<body::Register>(plaintext) else {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("bad_register_body", None, "unparseable REGISTER"),
            }];
        };
        if register.license_number.is_empty()
            || register.license_number.chars().count() > crate::domain::LICENSE_MAX_LEN
            || register.vehicle_name.is_empty()
            || register.vehicle_name.chars().count() > crate::domain::NAME_MAX_LEN
        {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("invalid_identity", None, "license or name out of bounds"),
            }];
        }
        // Duplicate REGISTER on the same session is idempotent: re-send the
        // cached grant, keep the single record.
        if let Some(cached) = self
            .sessions
            .get(conn)
            .and_then(|s| s.cached_register_ok.clone())
        {
            if let Some(idx) = self.record_index_of(vehicle) {
                self.registry[idx].last_seen_ms = now_ms;
            }
            return self
                .seal_to_session(
                    conn,
                    MessageType::RegisterOk,
                    &body::encode(&cached),
                    now_ms,
                )
                .into_iter()
                .collect();
        }
        let batch = if self.config.rotate_pseudonyms {
            ROTATION_BATCH
        } else {
            1
        };
        let mut pseudonyms = Vec::with_capacity(batch);
        for _ in 0..batch {
            let record = self
                .escrow
                .issue_pseudonym(
                    vehicle,
                    now_ms,
                    self.config.pseudonym_lifetime_ms,
                    &mut self.rng,
                )
                .expect("lifetime is validated positive");
            pseudonyms.push(record.pseudonym);
        }
        let address = match self.addr_pool.assign(vehicle, now_ms) {
            Ok(a) => a,
            Err(e) => {
                return vec![Outbound {
                    to: conn.to_string(),
                    bytes: self.error_frame("address_unavailable", None, &e.to_string()),
                }];
            }
        };
        let session_id = self
            .sessions
            .get(conn)
            .and_then(|s| s.key.as_ref())
            .map(|k| k.session_id)
            .expect("authenticated session has a key");
        let reply = body::RegisterOk {
            pseudonyms_hex: pseudonyms.iter().map(hex::encode).collect(),
            address: address.to_string(),
            pseudonym_expires_at_ms: now_ms + self.config.pseudonym_lifetime_ms,
            rsu_pseudonym_hex: hex::encode(self.rsu_pseudonym),
            rsu_verify_key_hex: hex::encode(self.verify_key),
            group_key_hex: hex::encode(self.group_key.key),
            group_key_id_hex: hex::encode(self.group_key.session_id),
        };
        {
            let session = self.sessions.get_mut(conn).expect("session exists");
            session.phase = Phase::Registered;
            session.cached_register_ok = Some(reply.clone());
        }
        self.registry_dirty = true;
        match self.record_index_of(vehicle) {
            // Re-registration after range flapping: one continuous record.
            Some(idx) => {
                let record = &mut self.registry[idx];
                record.speed_mps = register.speed_mps;
                record.last_seen_ms = now_ms;
                record.session_id_hex = hex::encode(session_id);
                record.pseudonym_hex = hex::encode(pseudonyms[0]);
                record.conn = conn.to_string();
            }
            None => {
                self.registry.push(ClientRecord {
                    vehicle_id: vehicle.clone(),
                    vehicle_name: register.vehicle_name.clone(),
                    license_number: register.license_number.clone(),
                    speed_mps: register.speed_mps,
                    address: address.to_string(),
                    pseudonym_hex: hex::encode(pseudonyms[0]),
                    last_seen_ms: now_ms,
                    registered_at_ms: now_ms,
                    session_id_hex: hex::encode(session_id),
                    role,
                    conn: conn.to_string(),
                });
                self.event(
                    now_ms,
                    EventKind::RegistryChange {
                        change: RegistryChange::Registered,
                        vehicle: vehicle.clone(),
                        address: Some(address.to_string()),
                    },
                );
                self.event(
                    now_ms,
                    EventKind::AddressAssigned {
                        vehicle: vehicle.clone(),
                        address: address.to_string(),
                        mode: match self.addr_pool {
                            AddressPool::Static(_) => "static".into(),
                            AddressPool::Lease(_) => "lease".into(),
                        },
                        time_to_address_ms: 0,
                    },
                );
            }
        }
        self.event(
            now_ms,
            EventKind::HandshakeStage {
                node: "rsu".into(),
                vehicle: vehicle.clone(),
                stage: "register_ok".into(),
            },
        );
        self.seal_to_session(conn, MessageType::RegisterOk, &body::encode(&reply), now_ms)
            .into_iter()
            .collect()
    }

    fn dispatch_beacon(
        &mut self,
        vehicle: &VehicleId,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        let Some(idx) = self.record_index_of(vehicle) else {
            // Authenticated but never registered: order violation.
            self.audit_handshake(
                now_ms,
                MessageType::Beacon,
                &[],
                "rejected:protocol_order".into(),
            );
            return Vec::new();
        };
        if let Ok(beacon) = body::decode::<body::Beacon>(plaintext) {
            let record = &mut self.registry[idx];
            record.speed_mps = beacon.speed_mps;
            record.last_seen_ms = now_ms;
        }
        Vec::new()
    }

    fn dispatch_hazard(
        &mut self,
        vehicle: &VehicleId,
        role: Role,
        env: &Envelope,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        if self.record_index_of(vehicle).is_none() {
            self.audit_handshake(
                now_ms,
                MessageType::Hazard,
                &[],
                "rejected:protocol_order".into(),
            );
            return Vec::new();
        }
        let Ok(hazard) = body::decode::<body::Hazard>(plaintext) else {
            return Vec::new();
        };
        if hazard.report.validate().is_err() {
            return Vec::new();
        }
        if let Some(idx) = self.record_index_of(vehicle) {
            self.registry[idx].last_seen_ms = now_ms;
        }
        self.event(
            now_ms,
            EventKind::HazardAccepted {
                node: "rsu".into(),
                origin_pseudonym: hex::encode(env.sender_pseudonym),
                origin_sequence: env.sequence,
                kind: hazard.report.kind.to_string(),
            },
        );
        self.pending_broadcasts.push(PendingBroadcast {
            origin: BroadcastOrigin::Vehicle {
                pseudonym: env.sender_pseudonym,
                sequence: env.sequence,
                vehicle: vehicle.clone(),
                priority: role == Role::EmergencyObu,
            },
            report: hazard.report,
        });
        Vec::new()
    }

    fn dispatch_relay(
        &mut self,
        conn: &str,
        vehicle: &VehicleId,
        env: &Envelope,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        let Ok(request) = body::decode::<body::RelayRequest>(plaintext) else {
            return Vec::new();
        };
        let target = hex::decode(&request.to_pseudonym_hex)
            .ok()
            .and_then(|b| <Pseudonym>::try_from(b.as_slice()).ok())
            .and_then(|p| self.escrow.recover(&p).cloned());
        let Some(target_vehicle) = target else {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("unknown_peer", None, "relay target not registered"),
            }];
        };
        let Some(target_idx) = self.record_index_of(&target_vehicle) else {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("unknown_peer", None, "relay target not registered"),
            }];
        };
        if !self.vehicle_in_range(&target_vehicle) {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("unreachable_peer", None, "relay target out of range"),
            }];
        }
        if let Some(idx) = self.record_index_of(vehicle) {
            self.registry[idx].last_seen_ms = now_ms;
        }
        let forward = body::RelayForward {
            from_pseudonym_hex: hex::encode(env.sender_pseudonym),
            payload_hex: request.payload_hex,
        };
        let target_conn = self.registry[target_idx].conn.clone();
        self.seal_to_session(
            &target_conn,
            MessageType::Relay,
            &body::encode(&forward),
            now_ms,
        )
        .into_iter()
        .collect()
    }

    fn dispatch_disconnect(
        &mut self,
        conn: &str,
        vehicle: &VehicleId,
        now_ms: u64,
    ) -> Vec<Outbound> {
        if let Some(session) = self.sessions.get_mut(conn) {
            session.phase = Phase::Closed;
        }
        if let Some(idx) = self.record_index_of(vehicle) {
            let record = self.registry.remove(idx);
            self.registry_dirty = true;
            self.event(
                now_ms,
                EventKind::RegistryChange {
                    change: RegistryChange::Removed,
                    vehicle: record.vehicle_id,
                    address: Some(record.address),
                },
            );
        }
        Vec::new()
    }

    fn dispatch_addr_discover(
        &mut self,
        conn: &str,
        vehicle: &VehicleId,
        now_ms: u64,
    ) -> Vec<Outbound> {
        let offer = match self.addr_pool.assign(vehicle, now_ms) {
            Ok(address) => body::AddrOffer {
                address: address.to_string(),
            },
            Err(e) => {
                return vec![Outbound {
                    to: conn.to_string(),
                    bytes: self.error_frame("pool_exhausted", None, &e.to_string()),
                }];
            }
        };
        self.seal_to_session(conn, MessageType::AddrOffer, &body::encode(&offer), now_ms)
            .into_iter()
            .collect()
    }

    fn dispatch_addr_request(
        &mut self,
        conn: &str,
        vehicle: &VehicleId,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Vec<Outbound> {
        let Ok(request) = body::decode::<body::AddrRequest>(plaintext) else {
            return Vec::new();
        };
        let confirmed = match self.addr_pool.assign(vehicle, now_ms) {
            Ok(address) => address,
            Err(e) => {
                return vec![Outbound {
                    to: conn.to_string(),
                    bytes: self.error_frame("pool_exhausted", None, &e.to_string()),
                }];
            }
        };
        let lease_ms = match &self.addr_pool {
            AddressPool::Lease(pool) => pool.lease_ms,
            AddressPool::Static(_) => 0,
        };
        if request.address != confirmed.to_string() {
            return vec![Outbound {
                to: conn.to_string(),
                bytes: self.error_frame("address_mismatch", None, "requested address not held"),
            }];
        }
        let ack = body::AddrAck {
            address: confirmed.to_string(),
            lease_ms,
        };
        self.seal_to_session(conn, MessageType::AddrAck, &body::encode(&ack), now_ms)
            .into_iter()
            .collect()
    }

    /// Emits queued hazard rebroadcasts, emergency-originated ones first.
    /// Call once per step after processing inbound traffic.
    pub fn flush_broadcasts(&mut self, now_ms: u64) -> Vec<Outbound> {
        let mut pending = std::mem::take(&mut self.pending_broadcasts);
        // Stable sort keeps arrival order within each priority class.
        pending.sort_by_key(|p| match &p.origin {
            BroadcastOrigin::Vehicle { priority: true, .. } => 0u8,
            _ => 1u8,
        });
        let mut out = Vec::new();
        for broadcast in pending {
            out.extend(self.broadcast_hazard(&broadcast.report, broadcast.origin.clone(), now_ms));
        }
        out
    }

    /// Builds and addresses one HAZARD_BCAST to every registered, in-range
    /// client except the originator. The envelope is sealed once under the
    /// group key and signed by the station.
    pub fn broadcast_hazard(
        &mut self,
        report: &HazardReport,
        origin: BroadcastOrigin,
        now_ms: u64,
    ) -> Vec<Outbound> {
        let (origin_pseudonym, origin_sequence, exclude, priority) = match &origin {
            BroadcastOrigin::Rsu => (self.rsu_pseudonym, self.group_seq_peek(), None, false),
            BroadcastOrigin::Vehicle {
                pseudonym,
                sequence,
                vehicle,
                priority,
            } => (*pseudonym, *sequence, Some(vehicle.clone()), *priority),
        };
        let body = body::HazardBcast {
            origin_pseudonym_hex: hex::encode(origin_pseudonym),
            origin_sequence,
            priority,
            report: report.clone(),
        };
        let seq = self
            .group_seq
            .next_sequence()
            .expect("broadcast sequence space is not exhaustible in practice");
        let env = seal_envelope(
            &self.signing,
            &self.group_key.clone(),
            self.rsu_pseudonym,
            seq,
            now_ms,
            MessageType::HazardBcast.code(),
            &body::encode(&body),
        );
        let frame =
            encode_frame(MessageType::HazardBcast, &encode_envelope(&env)).expect("bounded");
        let recipients: Vec<(VehicleId, ConnId)> = self
            .registry
            .iter()
            .filter(|r| Some(&r.vehicle_id) != exclude.as_ref())
            .filter(|r| self.vehicle_in_range(&r.vehicle_id))
            .filter(|r| {
                matches!(
                    self.sessions.get(&r.conn).map(|s| s.phase),
                    Some(Phase::Registered)
                )
            })
            .map(|r| (r.vehicle_id.clone(), r.conn.clone()))
            .collect();
        let mut out = Vec::with_capacity(recipients.len());
        for (vehicle, conn) in recipients {
            self.event(
                now_ms,
                EventKind::BroadcastDelivery {
                    to: vehicle,
                    origin_pseudonym: hex::encode(origin_pseudonym),
                    origin_sequence,
                    priority,
                },
            );
            out.push(Outbound {
                to: conn,
                bytes: frame.clone(),
            });
        }
        out
    }

    fn group_seq_peek(&mut self) -> u64 {
        // Station-originated hazards are identified by their broadcast
        // sequence; claim one eagerly.
        self.group_seq
            .next_sequence()
            .unwrap_or(u64::from(u32::MAX))
    }

    /// Sends each registered, in-range client the current list of its
    /// peers: pseudonym, address, and verify key, enough to address and
    /// authenticate direct V2V traffic.
    pub fn send_peer_lists(&mut self, now_ms: u64) -> Vec<Outbound> {
        let rows: Vec<(VehicleId, ConnId)> = self
            .registry
            .iter()
            .filter(|r| self.vehicle_in_range(&r.vehicle_id))
            .filter(|r| {
                matches!(
                    self.sessions.get(&r.conn).map(|s| s.phase),
                    Some(Phase::Registered)
                )
            })
            .map(|r| (r.vehicle_id.clone(), r.conn.clone()))
            .collect();
        let mut out = Vec::new();
        for (vehicle, conn) in &rows {
            let peers: Vec<body::PeerEntry> = self
                .registry
                .iter()
                .filter(|r| &r.vehicle_id != vehicle)
                .map(|r| body::PeerEntry {
                    pseudonym_hex: r.pseudonym_hex.clone(),
                    address: r.address.clone(),
                    verify_key_hex: hex::encode(self.directory[&r.vehicle_id].verify_key),
                })
                .collect();
            let list = body::PeerList { peers };
            out.extend(self.seal_to_session(
                conn,
                MessageType::PeerList,
                &body::encode(&list),
                now_ms,
            ));
        }
        out
    }

    /// Closes and removes sessions silent for longer than the timeout.
    pub fn expire_stale_clients(&mut self, now_ms: u64) -> Vec<ClientRecord> {
        let timeout = self.config.client_timeout_ms;
        let mut removed = Vec::new();
        let mut keep = Vec::with_capacity(self.registry.len());
        for record in std::mem::take(&mut self.registry) {
            if now_ms.saturating_sub(record.last_seen_ms) > timeout {
                if let Some(session) = self.sessions.get_mut(&record.conn) {
                    session.phase = Phase::Closed;
                }
                self.events.push((
                    now_ms,
                    EventKind::RegistryChange {
                        change: RegistryChange::Removed,
                        vehicle: record.vehicle_id.clone(),
                        address: Some(record.address.clone()),
                    },
                ));
                self.registry_dirty = true;
                removed.push(record);
            } else {
                keep.push(record);
            }
        }
        self.registry = keep;
        removed
    }

    /// Live-transport hook: a connection dropped without DISCONNECT. The
    /// registry entry stays until the silence timeout expires it.
    pub fn on_disconnect(&mut self, conn: &str) {
        if let Some(session) = self.sessions.get_mut(conn) {
            session.phase = Phase::Closed;
        }
    }

    /// True once after any registry mutation; the engine uses this to
    /// push fresh peer lists.
    pub fn take_registry_dirty(&mut self) -> bool {
        std::mem::take(&mut self.registry_dirty)
    }

    /// Registry invariant: every registered client was seen within the
    /// timeout window.
    pub fn registry_within_timeout(&self, now_ms: u64) -> bool {
        self.registry
            .iter()
            .all(|r| now_ms.saturating_sub(r.last_seen_ms) <= self.config.client_timeout_ms)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::obu::Obu;
    use rand::SeedableRng;

    pub(crate) fn fleet(n: usize) -> Vec<KeyRecord> {
        let mut rng = ChaCha20Rng::seed_from_u64(1000);
        let mut records = vec![KeyRecord::generate(
            Role::Rsu,
            VehicleId::new("rsu"),
            &mut rng,
        )];
        for i in 1..=n {
            records.push(KeyRecord::generate(
                Role::Obu,
                VehicleId::new(format!("v{i}")),
                &mut rng,
            ));
        }
        records
    }

    pub(crate) fn static_pool(n: usize) -> AddressPool {
        let mut map = BTreeMap::new();
        for i in 1..=n {
            map.insert(
                VehicleId::new(format!("v{i}")),
                format!("10.0.0.{i}").parse().unwrap(),
            );
        }
        AddressPool::Static(map)
    }

    pub(crate) fn rsu_with(records: &[KeyRecord], pool: AddressPool) -> Rsu {
        Rsu::new(
            RsuConfig::default(),
            PolicyTable::default(),
            records,
            pool,
            AuditLog::new(),
            ChaCha20Rng::seed_from_u64(2000),
        )
        .unwrap()
    }

    fn obu_for(records: &[KeyRecord], idx: usize) -> Obu {
        Obu::new(
            records[idx].clone(),
            format!("lic-{idx}"),
            format!("car{idx}"),
            ChaCha20Rng::seed_from_u64(3000 + idx as u64),
        )
    }

    /// Drives HELLO/AUTH/REGISTER to completion over a direct function-call
    /// link and returns the registered client.
    pub(crate) fn register(rsu: &mut Rsu, obu: &mut Obu, now: u64) {
        let conn = obu.vehicle_id().to_string();
        let mut inbound: Vec<Vec<u8>> = obu.start_handshake(now);
        let mut guard = 0;
        while !inbound.is_empty() {
            guard += 1;
            assert!(guard < 20, "handshake did not converge");
            let mut next = Vec::new();
            for frame in inbound.drain(..) {
                for reply in rsu.handle_frame(&conn, &frame, now) {
                    next.extend(obu.handle_frame(&reply.bytes, now));
                }
            }
            inbound = next;
        }
        assert!(obu.is_registered(), "handshake should register the client");
    }

    #[test]
    fn handshake_derives_matching_keys() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 100);
        let session_key = rsu
            .sessions
            .values()
            .find(|s| s.vehicle == Some(obu.vehicle_id().clone()))
            .and_then(|s| s.key.clone())
            .expect("rsu side has a key");
        assert_eq!(Some(&session_key), obu.session_key());
        assert_eq!(rsu.list_clients().len(), 1);
    }

    #[test]
    fn wrong_password_is_rejected_closed_and_audited() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut bad_record = records[1].clone();
        bad_record.password_secret = [0xAB; 16];
        let mut obu = Obu::new(
            bad_record,
            "lic".into(),
            "car".into(),
            ChaCha20Rng::seed_from_u64(9),
        );
        let frames = obu.start_handshake(0);
        let mut rejected = false;
        for frame in frames {
            for reply in rsu.handle_frame("v1", &frame, 0) {
                let (t, body) = decode_frame(&reply.bytes).unwrap();
                if t == MessageType::Error {
                    let err: body::ErrorBody = body::decode(&body).unwrap();
                    assert_eq!(err.code, "bad_credentials");
                    rejected = true;
                }
            }
        }
        assert!(rejected);
        assert_eq!(rsu.sessions["v1"].phase, Phase::Closed);
        assert!(rsu
            .audit()
            .records()
            .iter()
            .any(|r| r.verdict == "rejected:credentials"));
        assert!(rsu.list_clients().is_empty());
    }

    #[test]
    fn register_before_auth_is_order_violation() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        // Craft a syntactically valid envelope on an unauthenticated
        // connection; the order gate must reject before signature handling.
        let key = SessionKey {
            key: [1; 32],
            established_at_ms: 0,
            session_id: [2; 16],
        };
        let env = seal_envelope(
            &records[1].signing_key(),
            &key,
            [9; 8],
            0,
            0,
            MessageType::Register.code(),
            b"{}",
        );
        let frame = encode_frame(MessageType::Register, &encode_envelope(&env)).unwrap();
        let replies = rsu.handle_frame("v1", &frame, 0);
        let (t, body_bytes) = decode_frame(&replies[0].bytes).unwrap();
        assert_eq!(t, MessageType::Error);
        let err: body::ErrorBody = body::decode(&body_bytes).unwrap();
        assert_eq!(err.stage.as_deref(), Some("protocol_order"));
        assert!(rsu.counters().short_circuit_holds());
    }

    #[test]
    fn registry_row_has_the_displayed_fields() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 500);
        let clients = rsu.list_clients();
        assert_eq!(clients.len(), 1);
        let row = &clients[0];
        assert_eq!(row.vehicle_id, VehicleId::new("v1"));
        assert_eq!(row.license_number, "lic-1");
        assert_eq!(row.vehicle_name, "car1");
        assert_eq!(row.address, "10.0.0.1");
        assert_eq!(row.last_seen_ms, 500);
        assert!(row.display_row().contains("km/h"));
    }

    #[test]
    fn duplicate_register_is_idempotent() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        // Client re-sends REGISTER (reply lost); one record, same grant.
        let frame = obu.craft_register(10);
        let replies = rsu.handle_frame("v1", &frame, 10);
        assert_eq!(replies.len(), 1);
        let (t, _) = decode_frame(&replies[0].bytes).unwrap();
        assert_eq!(t, MessageType::RegisterOk);
        assert_eq!(rsu.list_clients().len(), 1);
        assert_eq!(rsu.escrow().len(), 1, "no second pseudonym batch issued");
    }

    #[test]
    fn stale_register_is_rejected_at_freshness() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut obu = obu_for(&records, 1);
        // Authenticate at t=0 but send REGISTER stamped far in the past.
        let conn = "v1".to_string();
        for frame in obu.start_handshake(0) {
            for reply in rsu.handle_frame(&conn, &frame, 0) {
                obu.handle_frame(&reply.bytes, 0);
            }
        }
        assert!(obu.session_key().is_some());
        let stale = obu.craft_register(0);
        let replies = rsu.handle_frame(&conn, &stale, 100_000);
        let (t, body_bytes) = decode_frame(&replies[0].bytes).unwrap();
        assert_eq!(t, MessageType::Error);
        let err: body::ErrorBody = body::decode(&body_bytes).unwrap();
        assert_eq!(err.stage.as_deref(), Some("freshness"));
        assert!(rsu.list_clients().is_empty());
    }

    #[test]
    fn beacon_updates_speed_and_last_seen() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        let beacon = obu.craft_beacon(25.0, [5.0, 6.0], 1000);
        rsu.handle_frame("v1", &beacon, 1000);
        let row = &rsu.list_clients()[0];
        assert_eq!(row.speed_mps, 25.0);
        assert_eq!(row.last_seen_ms, 1000);
    }

    #[test]
    fn eleventh_message_in_burst_is_throttled() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        // Registration consumed tokens; refill fully first.
        let start = 100_000u64;
        let mut throttled = 0;
        for i in 0..11u64 {
            let beacon = obu.craft_beacon(10.0, [0.0, 0.0], start);
            let replies = rsu.handle_frame("v1", &beacon, start + i);
            for r in &replies {
                let (t, b) = decode_frame(&r.bytes).unwrap();
                if t == MessageType::Error {
                    let err: body::ErrorBody = body::decode(&b).unwrap();
                    if err.stage.as_deref() == Some("rate_limit") {
                        throttled += 1;
                    }
                }
            }
        }
        assert_eq!(throttled, 1, "exactly the 11th message throttles");
        assert!(rsu.counters().short_circuit_holds());
    }

    #[test]
    fn hazard_is_rebroadcast_to_others_but_not_echoed() {
        let records = fleet(3);
        let mut rsu = rsu_with(&records, static_pool(3));
        let mut v1 = obu_for(&records, 1);
        let mut v2 = obu_for(&records, 2);
        let mut v3 = obu_for(&records, 3);
        register(&mut rsu, &mut v1, 0);
        register(&mut rsu, &mut v2, 0);
        register(&mut rsu, &mut v3, 0);
        let report = HazardReport {
            kind: crate::domain::HazardKind::Ice,
            location: crate::domain::Vec2::new(1.0, 2.0),
            severity: 4,
            description: "ice on the pavement".into(),
        };
        let frame = v2.craft_hazard(&report, 1000);
        rsu.handle_frame("v2", &frame, 1000);
        let out = rsu.flush_broadcasts(1000);
        let destinations: Vec<&str> = out.iter().map(|o| o.to.as_str()).collect();
        assert_eq!(destinations, vec!["v1", "v3"], "no echo to the originator");
    }

    #[test]
    fn out_of_range_client_gets_no_broadcasts() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut v1 = obu_for(&records, 1);
        let mut v2 = obu_for(&records, 2);
        register(&mut rsu, &mut v1, 0);
        register(&mut rsu, &mut v2, 0);
        rsu.set_in_range([VehicleId::new("v1")].into_iter().collect());
        let report = HazardReport {
            kind: crate::domain::HazardKind::Obstacle,
            location: crate::domain::Vec2::ZERO,
            severity: 2,
            description: "debris".into(),
        };
        let out = rsu.broadcast_hazard(&report, BroadcastOrigin::Rsu, 100);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, "v1");
    }

    #[test]
    fn emergency_hazards_flush_first() {
        let mut records = fleet(3);
        records[3].role = Role::EmergencyObu;
        let mut rsu = rsu_with(&records, static_pool(3));
        let mut v1 = obu_for(&records, 1);
        let mut v2 = obu_for(&records, 2);
        let mut amb = Obu::new(
            records[3].clone(),
            "amb-lic".into(),
            "ambulance".into(),
            ChaCha20Rng::seed_from_u64(77),
        );
        register(&mut rsu, &mut v1, 0);
        register(&mut rsu, &mut v2, 0);
        register(&mut rsu, &mut amb, 0);
        let ordinary = HazardReport {
            kind: crate::domain::HazardKind::Congestion,
            location: crate::domain::Vec2::ZERO,
            severity: 1,
            description: "slow traffic".into(),
        };
        let urgent = HazardReport {
            kind: crate::domain::HazardKind::Accident,
            location: crate::domain::Vec2::ZERO,
            severity: 5,
            description: "pileup".into(),
        };
        rsu.handle_frame("v1", &v1.craft_hazard(&ordinary, 1000), 1000);
        rsu.handle_frame("v3", &amb.craft_hazard(&urgent, 1000), 1000);
        let out = rsu.flush_broadcasts(1000);
        // First deliveries belong to the emergency broadcast.
        let first = decode_frame(&out[0].bytes).unwrap();
        let env = decode_envelope(&first.1).unwrap();
        let plaintext = open_envelope(&rsu.group_key.clone(), &env).unwrap();
        let bcast: body::HazardBcast = body::decode(&plaintext).unwrap();
        assert!(bcast.priority);
        assert_eq!(bcast.report.description, "pileup");
    }

    #[test]
    fn silent_clients_expire_but_active_ones_stay() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut v1 = obu_for(&records, 1);
        let mut v2 = obu_for(&records, 2);
        register(&mut rsu, &mut v1, 0);
        register(&mut rsu, &mut v2, 0);
        // v1 beacons at t=2000; v2 stays silent.
        rsu.handle_frame("v1", &v1.craft_beacon(1.0, [0.0, 0.0], 2000), 2000);
        let removed = rsu.expire_stale_clients(3500);
        assert_eq!(removed.len(), 1);
        assert_eq!(removed[0].vehicle_id, VehicleId::new("v2"));
        let remaining = rsu.list_clients();
        assert_eq!(remaining.len(), 1);
        assert_eq!(remaining[0].vehicle_id, VehicleId::new("v1"));
        assert!(rsu.registry_within_timeout(3500));
    }

    #[test]
    fn exit_and_reenter_before_timeout_is_one_record() {
        let records = fleet(1);
        let mut rsu = rsu_with(&records, static_pool(1));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        let registered_at = rsu.list_clients()[0].registered_at_ms;
        // Exit range briefly: new handshake within the timeout window.
        obu.reset_session();
        register(&mut rsu, &mut obu, 1000);
        rsu.expire_stale_clients(1500);
        let clients = rsu.list_clients();
        assert_eq!(clients.len(), 1);
        assert_eq!(clients[0].registered_at_ms, registered_at);
        assert_eq!(clients[0].last_seen_ms, 1000);
    }

    #[test]
    fn fresh_rsu_lists_no_clients() {
        let records = fleet(1);
        let rsu = rsu_with(&records, static_pool(1));
        assert!(rsu.list_clients().is_empty());
    }

    #[test]
    fn audit_counts_every_envelope_exactly_once() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        let mut envelopes_sent = 1; // the REGISTER
        for i in 0..5u64 {
            rsu.handle_frame("v1", &obu.craft_beacon(1.0, [0.0, 0.0], 100 + i), 100 + i);
            envelopes_sent += 1;
        }
        // One replayed beacon (same bytes twice).
        let beacon = obu.craft_beacon(2.0, [0.0, 0.0], 200);
        rsu.handle_frame("v1", &beacon, 200);
        rsu.handle_frame("v1", &beacon, 201);
        envelopes_sent += 2;
        assert_eq!(rsu.audit().envelope_entries(), envelopes_sent);
        let rejected: Vec<_> = rsu
            .audit()
            .records()
            .iter()
            .filter(|r| r.verdict == "rejected:replay")
            .collect();
        assert_eq!(rejected.len(), 1);
        assert!(rsu.counters().short_circuit_holds());
    }

    #[test]
    fn audit_reverifies_offline() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut obu = obu_for(&records, 1);
        register(&mut rsu, &mut obu, 0);
        for i in 0..3u64 {
            rsu.handle_frame("v1", &obu.craft_beacon(1.0, [0.0, 0.0], 100 + i), 100 + i);
        }
        let verified = reverify_audit(
            rsu.audit().records(),
            rsu.escrow(),
            &rsu.verify_keys(),
            rsu.session_tokens(),
        )
        .unwrap();
        assert_eq!(verified, 4); // REGISTER + 3 beacons
    }

    #[test]
    fn obu_injected_broadcast_rejected_at_authorization() {
        let records = fleet(2);
        let mut rsu = rsu_with(&records, static_pool(2));
        let mut attacker = obu_for(&records, 1);
        let mut victim = obu_for(&records, 2);
        register(&mut rsu, &mut attacker, 0);
        register(&mut rsu, &mut victim, 0);
        let report = HazardReport {
            kind: crate::domain::HazardKind::Accident,
            location: crate::domain::Vec2::ZERO,
            severity: 5,
            description: "fake emergency".into(),
        };
        let forged = attacker.craft_forged_broadcast(&report, 500);
        let replies = rsu.handle_frame("v1", &forged, 500);
        let (t, b) = decode_frame(&replies[0].bytes).unwrap();
        assert_eq!(t, MessageType::Error);
        let err: body::ErrorBody = body::decode(&b).unwrap();
        assert_eq!(err.stage.as_deref(), Some("authorization"));
        assert!(rsu
            .audit()
            .records()
            .iter()
            .any(|r| r.verdict == "rejected:authorization"));
        assert!(rsu.counters().short_circuit_holds());
    }
}
