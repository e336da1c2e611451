//! Bit-exact encoding and decoding of frames and envelopes.
//!
//! This module is the single source of truth for the on-wire format, shared
//! by the simulated channel and the TCP transport. All integers are
//! big-endian and fixed-width; see FORMAT.md for worked hex examples.
//!
//! Frame layout:
//!
//! ```text
//! magic(2) = 56 43 | version(1) = 01 | msg_type(1) | length(4, BE) | body
//! ```
//!
//! Envelope layout (carried as the body of data frames):
//!
//! ```text
//! sender_pseudonym(8) | sequence(8, BE) | timestamp_ms(8, BE) |
//! payload_type(1) | payload_len(4, BE) | sealed_payload |
//! sig_len(2, BE) | signature | check(4)
//! ```
//!
//! The signature covers every byte from the header through the ciphertext,
//! so integrity and origin are checkable before decryption. `check` is the
//! first four bytes of SHA-256 over everything before it; length fields
//! alone cannot detect every byte deletion (a deleted length byte can
//! conspire with payload bytes to reparse cleanly), the trailer can.

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Fixed frame magic, the ASCII bytes `VC`.
pub const FRAME_MAGIC: [u8; 2] = [0x56, 0x43];
/// Only protocol version in existence. Decoding rejects anything else.
pub const WIRE_VERSION: u8 = 1;
/// Frame header length: magic + version + type + length.
pub const FRAME_HEADER_LEN: usize = 8;
/// Frame bodies are capped to bound adversarial memory use.
pub const MAX_BODY_LEN: usize = 65536;
/// Sender pseudonym width in bytes.
pub const PSEUDONYM_LEN: usize = 8;
/// Fixed part of an envelope before the variable-length payload.
pub const ENVELOPE_FIXED_LEN: usize = PSEUDONYM_LEN + 8 + 8 + 1 + 4;
/// Width of the envelope integrity trailer.
pub const ENVELOPE_CHECK_LEN: usize = 4;

/// An 8-byte sender token. Short-lived for vehicles, fixed per scenario for
/// the base station.
pub type Pseudonym = [u8; PSEUDONYM_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame body of {len} bytes exceeds the {MAX_BODY_LEN}-byte cap")]
    OversizeBody { len: usize },
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported wire version {got}")]
    BadVersion { got: u8 },
    #[error("unknown message type code {code}")]
    UnknownType { code: u8 },
    #[error("frame truncated")]
    TruncatedFrame,
    #[error("trailing bytes after frame body")]
    TrailingBytes,
    #[error("envelope truncated")]
    Truncated,
    #[error("envelope length fields inconsistent with buffer")]
    MalformedLength,
}

/// Every message type on the wire. Unknown codes never decode.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub enum MessageType {
    Hello = 1,
    Auth = 2,
    AuthOk = 3,
    Register = 4,
    RegisterOk = 5,
    Beacon = 6,
    Hazard = 7,
    HazardBcast = 8,
    PeerList = 9,
    Relay = 10,
    Disconnect = 11,
    AddrDiscover = 12,
    AddrOffer = 13,
    AddrRequest = 14,
    AddrAck = 15,
    Error = 255,
}

impl MessageType {
    pub const ALL: [MessageType; 16] = [
        MessageType::Hello,
        MessageType::Auth,
        MessageType::AuthOk,
        MessageType::Register,
        MessageType::RegisterOk,
        MessageType::Beacon,
        MessageType::Hazard,
        MessageType::HazardBcast,
        MessageType::PeerList,
        MessageType::Relay,
        MessageType::Disconnect,
        MessageType::AddrDiscover,
        MessageType::AddrOffer,
        MessageType::AddrRequest,
        MessageType::AddrAck,
        MessageType::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<MessageType> {
        MessageType::ALL.iter().copied().find(|t| t.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageType::Hello => "HELLO",
            MessageType::Auth => "AUTH",
            MessageType::AuthOk => "AUTH_OK",
            MessageType::Register => "REGISTER",
            MessageType::RegisterOk => "REGISTER_OK",
            MessageType::Beacon => "BEACON",
            MessageType::Hazard => "HAZARD",
            MessageType::HazardBcast => "HAZARD_BCAST",
            MessageType::PeerList => "PEER_LIST",
            MessageType::Relay => "RELAY",
            MessageType::Disconnect => "DISCONNECT",
            MessageType::AddrDiscover => "ADDR_DISCOVER",
            MessageType::AddrOffer => "ADDR_OFFER",
            MessageType::AddrRequest => "ADDR_REQUEST",
            MessageType::AddrAck => "ADDR_ACK",
            MessageType::Error => "ERROR",
        }
    }

    pub fn from_name(name: &str) -> Option<MessageType> {
        MessageType::ALL.iter().copied().find(|t| t.name() == name)
    }
}

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Encodes `magic ‖ version ‖ type ‖ length ‖ body`, exactly.
pub fn encode_frame(msg_type: MessageType, body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > MAX_BODY_LEN {
        return Err(WireError::OversizeBody { len: body.len() });
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(WIRE_VERSION);
    out.push(msg_type.code());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Decodes a full frame. The buffer must contain exactly one frame;
/// anything after the declared body is `TrailingBytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(MessageType, Vec<u8>), WireError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(WireError::TruncatedFrame);
    }
    if bytes[0..2] != FRAME_MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes[2] != WIRE_VERSION {
        return Err(WireError::BadVersion { got: bytes[2] });
    }
    let msg_type =
        MessageType::from_code(bytes[3]).ok_or(WireError::UnknownType { code: bytes[3] })?;
    let length = u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if length > MAX_BODY_LEN {
        return Err(WireError::OversizeBody { len: length });
    }
    let rest = &bytes[FRAME_HEADER_LEN..];
    if rest.len() < length {
        return Err(WireError::TruncatedFrame);
    }
    if rest.len() > length {
        return Err(WireError::TrailingBytes);
    }
    Ok((msg_type, rest.to_vec()))
}

/// The on-wire secured message. `sequence` is strictly increasing per
/// pseudonym within a session; the signature covers all preceding fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub sender_pseudonym: Pseudonym,
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub payload_type: u8,
    pub sealed_payload: Vec<u8>,
    pub signature: Vec<u8>,
}

impl Envelope {
    /// The bytes the signature is computed over: header through ciphertext.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_FIXED_LEN + self.sealed_payload.len());
        out.extend_from_slice(&self.sender_pseudonym);
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.push(self.payload_type);
        out.extend_from_slice(&(self.sealed_payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.sealed_payload);
        out
    }

    /// Associated data binding the AEAD ciphertext to the envelope header.
    pub fn aead_ad(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PSEUDONYM_LEN + 8 + 8 + 1);
        out.extend_from_slice(&self.sender_pseudonym);
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.push(self.payload_type);
        out
    }
}

fn envelope_check(preceding: &[u8]) -> [u8; ENVELOPE_CHECK_LEN] {
    let digest = Sha256::digest(preceding);
    digest[..ENVELOPE_CHECK_LEN].try_into().unwrap()
}

/// Encodes an envelope; a pure function, equal inputs yield identical bytes.
pub fn encode_envelope(env: &Envelope) -> Vec<u8> {
    let mut out = env.signed_bytes();
    out.extend_from_slice(&(env.signature.len() as u16).to_be_bytes());
    out.extend_from_slice(&env.signature);
    let check = envelope_check(&out);
    out.extend_from_slice(&check);
    out
}

/// Decodes an envelope. The buffer must be consumed exactly and the
/// integrity trailer must match: missing bytes are `Truncated`, any other
/// inconsistency is `MalformedLength`, so no single-byte deletion can ever
/// decode silently.
pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, WireError> {
    if bytes.len() < ENVELOPE_FIXED_LEN + 2 + ENVELOPE_CHECK_LEN {
        return Err(WireError::Truncated);
    }
    let mut pseudonym = [0u8; PSEUDONYM_LEN];
    pseudonym.copy_from_slice(&bytes[0..8]);
    let sequence = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
    let timestamp_ms = u64::from_be_bytes(bytes[16..24].try_into().unwrap());
    let payload_type = bytes[24];
    let payload_len = u32::from_be_bytes(bytes[25..29].try_into().unwrap()) as usize;
    if payload_len > MAX_BODY_LEN {
        return Err(WireError::MalformedLength);
    }
    let after_header = &bytes[ENVELOPE_FIXED_LEN..];
    if after_header.len() < payload_len + 2 {
        return Err(WireError::Truncated);
    }
    let sealed_payload = after_header[..payload_len].to_vec();
    let sig_len = u16::from_be_bytes(
        after_header[payload_len..payload_len + 2]
            .try_into()
            .unwrap(),
    ) as usize;
    let sig_start = payload_len + 2;
    if after_header.len() < sig_start + sig_len + ENVELOPE_CHECK_LEN {
        return Err(WireError::Truncated);
    }
    if after_header.len() > sig_start + sig_len + ENVELOPE_CHECK_LEN {
        return Err(WireError::MalformedLength);
    }
    let signature = after_header[sig_start..sig_start + sig_len].to_vec();
    let check: [u8; ENVELOPE_CHECK_LEN] = after_header[sig_start + sig_len..].try_into().unwrap();
    let body_len = bytes.len() - ENVELOPE_CHECK_LEN;
    if envelope_check(&bytes[..body_len]) != check {
        return Err(WireError::MalformedLength);
    }
    Ok(Envelope {
        sender_pseudonym: pseudonym,
        sequence,
        timestamp_ms,
        payload_type,
        sealed_payload,
        signature,
    })
}

/// JSON payload schemas carried as frame bodies and sealed envelope
/// payloads. Struct field order fixes the serialized key order, so equal
/// values always encode to identical bytes.
pub mod body {
    use serde::{Deserialize, Serialize};

    use crate::domain::HazardReport;

    /// Encodes a body value to its wire bytes.
    pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
        serde_json::to_vec(value).expect("bodies contain no non-serializable values")
    }

    /// Decodes a body; any malformation is a decode-stage failure.
    pub fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, super::WireError> {
        serde_json::from_slice(bytes).map_err(|_| super::WireError::MalformedLength)
    }

    /// AUTH: credential proof plus the client half of the nonce exchange.
    /// The proof is an HMAC under the password-record hash; the password
    /// itself never crosses the wire.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct Auth {
        pub username: String,
        pub proof_hex: String,
        pub client_nonce_hex: String,
    }

    /// AUTH_OK: the server nonce and a key-confirmation tag proving the
    /// server knows the pre-shared secret.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AuthOk {
        pub server_nonce_hex: String,
        pub confirm_hex: String,
    }

    /// REGISTER: what the base station displays for each vehicle.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Register {
        pub license_number: String,
        pub vehicle_name: String,
        pub speed_mps: f64,
    }

    /// REGISTER_OK: pseudonym material, the assigned address, and the
    /// broadcast-group key, all sealed under the pairwise session key.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct RegisterOk {
        pub pseudonyms_hex: Vec<String>,
        pub address: String,
        pub pseudonym_expires_at_ms: u64,
        pub rsu_pseudonym_hex: String,
        pub rsu_verify_key_hex: String,
        pub group_key_hex: String,
        pub group_key_id_hex: String,
    }

    /// BEACON: periodic kinematic update.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Beacon {
        pub speed_mps: f64,
        pub position: [f64; 2],
    }

    /// HAZARD: a vehicle-originated warning.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Hazard {
        pub report: HazardReport,
    }

    /// HAZARD_BCAST: the base station's rebroadcast, tagged with the
    /// originating pseudonym and sequence for deduplication.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct HazardBcast {
        pub origin_pseudonym_hex: String,
        pub origin_sequence: u64,
        pub priority: bool,
        pub report: HazardReport,
    }

    /// PEER_LIST entry: enough for a vehicle to address and verify a peer.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct PeerEntry {
        pub pseudonym_hex: String,
        pub address: String,
        pub verify_key_hex: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct PeerList {
        pub peers: Vec<PeerEntry>,
    }

    /// RELAY request (vehicle to base station): deliver `payload_hex` to
    /// the peer holding `to_pseudonym_hex`.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct RelayRequest {
        pub to_pseudonym_hex: String,
        pub payload_hex: String,
    }

    /// RELAY forward (base station to vehicle) and direct V2V payloads.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct RelayForward {
        pub from_pseudonym_hex: String,
        pub payload_hex: String,
    }

    /// ERROR: typed reject sent back to the peer.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub code: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        pub stage: Option<String>,
        pub detail: String,
    }

    /// ADDR_* bodies for the simulated lease cycle.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AddrDiscover {
        pub client: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AddrOffer {
        pub address: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AddrRequest {
        pub address: String,
    }

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AddrAck {
        pub address: String,
        pub lease_ms: u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_empty_frame_bytes() {
        let bytes = encode_frame(MessageType::Hello, &[]).unwrap();
        assert_eq!(bytes, [0x56, 0x43, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn hazard_three_byte_frame_bytes() {
        let bytes = encode_frame(MessageType::Hazard, &[0xAA, 0xBB, 0xCC]).unwrap();
        assert_eq!(
            bytes,
            [0x56, 0x43, 0x01, 0x07, 0x00, 0x00, 0x00, 0x03, 0xAA, 0xBB, 0xCC]
        );
    }

    #[test]
    fn oversize_body_is_rejected() {
        let body = vec![0u8; 70_000];
        assert_eq!(
            encode_frame(MessageType::Beacon, &body),
            Err(WireError::OversizeBody { len: 70_000 })
        );
        // The cap itself is allowed.
        assert!(encode_frame(MessageType::Beacon, &vec![0u8; MAX_BODY_LEN]).is_ok());
    }

    #[test]
    fn frame_round_trip() {
        let bytes = encode_frame(MessageType::Hello, &[]).unwrap();
        assert_eq!(decode_frame(&bytes).unwrap(), (MessageType::Hello, vec![]));
    }

    #[test]
    fn bad_magic_detected() {
        let mut bytes = encode_frame(MessageType::Hello, &[1, 2]).unwrap();
        bytes[0] = 0x57;
        assert_eq!(decode_frame(&bytes), Err(WireError::BadMagic));
    }

    #[test]
    fn bad_version_detected() {
        let mut bytes = encode_frame(MessageType::Hello, &[]).unwrap();
        bytes[2] = 2;
        assert_eq!(decode_frame(&bytes), Err(WireError::BadVersion { got: 2 }));
    }

    #[test]
    fn unknown_type_detected() {
        let mut bytes = encode_frame(MessageType::Hello, &[]).unwrap();
        bytes[3] = 99;
        assert_eq!(
            decode_frame(&bytes),
            Err(WireError::UnknownType { code: 99 })
        );
    }

    #[test]
    fn truncated_frame_detected() {
        // Valid header claiming 10 body bytes with only 9 present.
        let bytes = encode_frame(MessageType::Beacon, &[7u8; 10]).unwrap();
        let short = &bytes[..bytes.len() - 1];
        assert_eq!(decode_frame(short), Err(WireError::TruncatedFrame));
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut bytes = encode_frame(MessageType::Beacon, &[7u8; 3]).unwrap();
        bytes.push(0);
        assert_eq!(decode_frame(&bytes), Err(WireError::TrailingBytes));
    }

    fn sample_envelope(seq: u64) -> Envelope {
        Envelope {
            sender_pseudonym: [1, 2, 3, 4, 5, 6, 7, 8],
            sequence: seq,
            timestamp_ms: 123_456,
            payload_type: MessageType::Hazard.code(),
            sealed_payload: vec![0xDE, 0xAD, 0xBE, 0xEF, 0x42],
            signature: vec![9u8; 64],
        }
    }

    #[test]
    fn envelope_round_trip() {
        let env = sample_envelope(17);
        let bytes = encode_envelope(&env);
        assert_eq!(decode_envelope(&bytes).unwrap(), env);
    }

    #[test]
    fn envelope_sequence_zero_is_legal() {
        let env = sample_envelope(0);
        let bytes = encode_envelope(&env);
        assert_eq!(decode_envelope(&bytes).unwrap().sequence, 0);
    }

    #[test]
    fn single_byte_deletion_never_decodes() {
        // Deleting any byte must yield Truncated or MalformedLength,
        // never a silent success.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for _ in 0..100 {
            let env = Envelope {
                sender_pseudonym: rng.gen(),
                sequence: rng.gen(),
                timestamp_ms: rng.gen(),
                payload_type: rng.gen(),
                sealed_payload: (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
                signature: (0..64).map(|_| rng.gen()).collect(),
            };
            let bytes = encode_envelope(&env);
            for i in 0..bytes.len() {
                let mut mutated = bytes.clone();
                mutated.remove(i);
                match decode_envelope(&mutated) {
                    Err(WireError::Truncated) | Err(WireError::MalformedLength) => {}
                    other => panic!("deletion at {i} yielded {other:?}"),
                }
            }
        }
    }

    #[test]
    fn signed_bytes_exclude_signature() {
        let env = sample_envelope(3);
        let signed = env.signed_bytes();
        let full = encode_envelope(&env);
        assert_eq!(&full[..signed.len()], &signed[..]);
        assert_eq!(
            full.len(),
            signed.len() + 2 + env.signature.len() + ENVELOPE_CHECK_LEN
        );
    }

    #[test]
    fn message_type_codes_round_trip() {
        for t in MessageType::ALL {
            assert_eq!(MessageType::from_code(t.code()), Some(t));
            assert_eq!(MessageType::from_name(t.name()), Some(t));
        }
        assert_eq!(MessageType::from_code(0), None);
        assert_eq!(MessageType::from_code(16), None);
    }
}
