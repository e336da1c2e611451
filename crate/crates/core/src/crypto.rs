//! Security services: password records, session-key establishment,
//! authenticated encryption, digital signatures, freshness and replay checks.
//!
//! Cipher choice: AES-256-GCM. The requirement set demands integrity as well
//! as confidentiality, which bare AES does not give, so sealing always runs
//! through an AEAD with a 128-bit tag. Signatures are Ed25519. Session keys
//! come from HKDF-SHA256 over a pre-shared secret and a fresh nonce pair,
//! standing in at the application layer for a WPA2-class pairwise key.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hmac::{Hmac, Mac};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

use crate::wire::Pseudonym;

type HmacSha256 = Hmac<Sha256>;

/// Minimum salt length accepted by [`hash_password`].
pub const MIN_SALT_LEN: usize = 16;
/// Minimum handshake nonce length accepted by [`establish_session`].
pub const MIN_SESSION_NONCE_LEN: usize = 16;
/// Symmetric key length: 256 bits.
pub const SESSION_KEY_LEN: usize = 32;
/// Session identifier length.
pub const SESSION_ID_LEN: usize = 16;
/// AES-GCM nonce length.
pub const AEAD_NONCE_LEN: usize = 12;
/// Ed25519 signature length.
pub const SIGNATURE_LEN: usize = 64;
/// PBKDF2 iteration count for password records.
pub const PASSWORD_ITERATIONS: u32 = 10_000;
/// Default freshness tolerance in milliseconds of simulated time.
pub const DEFAULT_TAU_MS: u64 = 5_000;
/// Default replay window width.
pub const DEFAULT_REPLAY_WIDTH: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("salt of {len} bytes is below the {MIN_SALT_LEN}-byte minimum")]
    WeakSalt { len: usize },
    #[error("nonce of {len} bytes is below the {MIN_SESSION_NONCE_LEN}-byte minimum")]
    ShortNonce { len: usize },
    #[error("authentication failure")]
    AuthFailure,
    #[error("nonce reuse detected")]
    NonceReuse,
    #[error("freshness tolerance must be positive")]
    ZeroTau,
    #[error("bad key material: {0}")]
    BadKeyMaterial(String),
}

// ---------------------------------------------------------------------------
// Password records
// ---------------------------------------------------------------------------

/// Salted, iterated password record. The plaintext password is never stored.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PasswordRecord {
    pub salt: Vec<u8>,
    pub iterations: u32,
    pub hash: [u8; 32],
}

/// PBKDF2-HMAC-SHA256, single 32-byte block (RFC 8018 with dkLen = hLen).
pub fn pbkdf2_sha256(password: &[u8], salt: &[u8], iterations: u32) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(password).expect("hmac accepts any key length");
    mac.update(salt);
    mac.update(&1u32.to_be_bytes());
    let mut u: [u8; 32] = mac.finalize().into_bytes().into();
    let mut out = u;
    for _ in 1..iterations {
        let mut mac = HmacSha256::new_from_slice(password).expect("hmac accepts any key length");
        mac.update(&u);
        u = mac.finalize().into_bytes().into();
        for (o, b) in out.iter_mut().zip(u.iter()) {
            *o ^= b;
        }
    }
    out
}

/// Derives a salted password record. Rejects salts shorter than 16 bytes.
pub fn hash_password(password: &str, salt: &[u8]) -> Result<PasswordRecord, CryptoError> {
    if salt.len() < MIN_SALT_LEN {
        return Err(CryptoError::WeakSalt { len: salt.len() });
    }
    Ok(PasswordRecord {
        salt: salt.to_vec(),
        iterations: PASSWORD_ITERATIONS,
        hash: pbkdf2_sha256(password.as_bytes(), salt, PASSWORD_ITERATIONS),
    })
}

/// Constant-time check of a candidate password against a stored record.
pub fn verify_password(password: &str, record: &PasswordRecord) -> bool {
    let candidate = pbkdf2_sha256(password.as_bytes(), &record.salt, record.iterations);
    candidate.ct_eq(&record.hash).into()
}

/// Deterministic per-username salt so a client can reproduce its own record
/// hash without a challenge round trip.
pub fn salt_for_username(username: &str) -> [u8; 16] {
    let mut mac = HmacSha256::new_from_slice(b"vanet password salt").unwrap();
    mac.update(username.as_bytes());
    let digest = mac.finalize().into_bytes();
    digest[..16].try_into().unwrap()
}

/// Client-side authentication proof: HMAC of the handshake nonce under the
/// password-record hash, so the password itself never crosses the wire.
pub fn password_proof(record_hash: &[u8; 32], username: &str, client_nonce: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(record_hash).unwrap();
    mac.update(b"auth proof");
    mac.update(username.as_bytes());
    mac.update(client_nonce);
    mac.finalize().into_bytes().into()
}

/// Server-side check of a client's [`password_proof`].
pub fn verify_password_proof(
    record: &PasswordRecord,
    username: &str,
    client_nonce: &[u8],
    proof: &[u8],
) -> bool {
    let expected = password_proof(&record.hash, username, client_nonce);
    expected.ct_eq(proof).into()
}

// ---------------------------------------------------------------------------
// Session keys
// ---------------------------------------------------------------------------

/// 256-bit symmetric key plus the handshake metadata that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub key: [u8; SESSION_KEY_LEN],
    pub established_at_ms: u64,
    pub session_id: [u8; SESSION_ID_LEN],
}

impl SessionKey {
    /// The first 8 bytes of the session id, used as the client's envelope
    /// sender token between authentication and registration.
    pub fn session_token(&self) -> Pseudonym {
        self.session_id[..8].try_into().unwrap()
    }

    /// The second 8 bytes of the session id: the station's sender token
    /// for unicast replies on this session. Distinct from both the client
    /// token and the broadcast pseudonym, so no two sequence streams ever
    /// share a replay window or an AEAD nonce.
    pub fn rsu_token(&self) -> Pseudonym {
        self.session_id[8..].try_into().unwrap()
    }
}

/// Derives a session key from a pre-shared secret and the handshake nonce
/// pair via HKDF-SHA256. Deterministic in its inputs; differing nonces give
/// differing keys.
pub fn establish_session(
    client_nonce: &[u8],
    server_nonce: &[u8],
    shared_secret: &[u8],
    now_ms: u64,
) -> Result<SessionKey, CryptoError> {
    if client_nonce.len() < MIN_SESSION_NONCE_LEN {
        return Err(CryptoError::ShortNonce {
            len: client_nonce.len(),
        });
    }
    if server_nonce.len() < MIN_SESSION_NONCE_LEN {
        return Err(CryptoError::ShortNonce {
            len: server_nonce.len(),
        });
    }
    let mut salt = Vec::with_capacity(client_nonce.len() + server_nonce.len());
    salt.extend_from_slice(client_nonce);
    salt.extend_from_slice(server_nonce);
    let hk = hkdf::Hkdf::<Sha256>::new(Some(&salt), shared_secret);
    let mut key = [0u8; SESSION_KEY_LEN];
    hk.expand(b"vanet session key", &mut key)
        .expect("32 bytes is a valid hkdf output length");
    let mut session_id = [0u8; SESSION_ID_LEN];
    hk.expand(b"vanet session id", &mut session_id)
        .expect("16 bytes is a valid hkdf output length");
    Ok(SessionKey {
        key,
        established_at_ms: now_ms,
        session_id,
    })
}

/// Key-confirmation tag sent with AUTH_OK, proving the server knows the
/// pre-shared secret before the client trusts the session.
pub fn key_confirmation(key: &SessionKey) -> [u8; 16] {
    let mut mac = HmacSha256::new_from_slice(&key.key).unwrap();
    mac.update(b"key confirm");
    mac.update(&key.session_id);
    let digest = mac.finalize().into_bytes();
    digest[..16].try_into().unwrap()
}

// ---------------------------------------------------------------------------
// Authenticated encryption
// ---------------------------------------------------------------------------

/// AES-256-GCM seal: returns ciphertext with the 16-byte tag appended.
/// The nonce must be unique per key; see [`NonceCounter`].
pub fn seal(
    key: &SessionKey,
    associated_data: &[u8],
    plaintext: &[u8],
    nonce: &[u8; AEAD_NONCE_LEN],
) -> Vec<u8> {
    let cipher =
        <Aes256Gcm as aes_gcm::KeyInit>::new_from_slice(&key.key).expect("key is exactly 32 bytes");
    cipher
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad: associated_data,
            },
        )
        .expect("aes-gcm encryption is infallible for in-memory buffers")
}

/// AES-256-GCM open. Any modification of ciphertext, tag, or associated
/// data yields `AuthFailure`.
pub fn open(
    key: &SessionKey,
    associated_data: &[u8],
    ciphertext: &[u8],
    nonce: &[u8; AEAD_NONCE_LEN],
) -> Result<Vec<u8>, CryptoError> {
    let cipher =
        <Aes256Gcm as aes_gcm::KeyInit>::new_from_slice(&key.key).expect("key is exactly 32 bytes");
    cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ciphertext,
                aad: associated_data,
            },
        )
        .map_err(|_| CryptoError::AuthFailure)
}

/// Envelope nonces are derived, not random: `pseudonym ‖ low 32 bits of
/// sequence`. Unique per key as long as pseudonyms are unique and each
/// pseudonym's sequence stays below 2^32, which [`NonceCounter`] enforces.
pub fn envelope_nonce(pseudonym: &Pseudonym, sequence: u64) -> [u8; AEAD_NONCE_LEN] {
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    nonce[..8].copy_from_slice(pseudonym);
    nonce[8..].copy_from_slice(&(sequence as u32).to_be_bytes());
    nonce
}

/// Caller-side counter discipline for envelope sequence numbers. Detects
/// reuse and exhaustion instead of silently repeating a nonce.
#[derive(Debug, Clone, Default)]
pub struct NonceCounter {
    next: u64,
}

impl NonceCounter {
    pub fn new() -> Self {
        NonceCounter { next: 0 }
    }

    /// Returns the next sequence number, refusing to exceed the 2^32 - 1
    /// bound baked into [`envelope_nonce`].
    pub fn next_sequence(&mut self) -> Result<u64, CryptoError> {
        if self.next > u32::MAX as u64 {
            return Err(CryptoError::NonceReuse);
        }
        let seq = self.next;
        self.next += 1;
        Ok(seq)
    }

    /// Explicitly claims `seq`; rejects anything at or below a value already
    /// handed out.
    pub fn claim(&mut self, seq: u64) -> Result<(), CryptoError> {
        if seq < self.next || seq > u32::MAX as u64 {
            return Err(CryptoError::NonceReuse);
        }
        self.next = seq + 1;
        Ok(())
    }
}

/// Builds a sealed, signed envelope: the payload is sealed under `key` with
/// the header as associated data and a nonce derived from (pseudonym,
/// sequence), then the whole header-through-ciphertext span is signed.
pub fn seal_envelope(
    signing: &SigningKey,
    key: &SessionKey,
    pseudonym: crate::wire::Pseudonym,
    sequence: u64,
    timestamp_ms: u64,
    payload_type: u8,
    plaintext: &[u8],
) -> crate::wire::Envelope {
    let mut env = crate::wire::Envelope {
        sender_pseudonym: pseudonym,
        sequence,
        timestamp_ms,
        payload_type,
        sealed_payload: Vec::new(),
        signature: Vec::new(),
    };
    let nonce = envelope_nonce(&pseudonym, sequence);
    env.sealed_payload = seal(key, &env.aead_ad(), plaintext, &nonce);
    env.signature = sign(signing, &env.signed_bytes());
    env
}

/// Opens a sealed envelope payload. Signature verification is the caller's
/// responsibility (it happens earlier in the inbound pipeline).
pub fn open_envelope(
    key: &SessionKey,
    env: &crate::wire::Envelope,
) -> Result<Vec<u8>, CryptoError> {
    let nonce = envelope_nonce(&env.sender_pseudonym, env.sequence);
    open(key, &env.aead_ad(), &env.sealed_payload, &nonce)
}

// ---------------------------------------------------------------------------
// Signatures
// ---------------------------------------------------------------------------

/// Ed25519 signing key, deterministic from a 32-byte seed.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl SigningKey {
    pub fn from_seed(seed: &[u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(seed))
    }

    pub fn verifying_key_bytes(&self) -> [u8; 32] {
        self.0.verifying_key().to_bytes()
    }
}

/// Signs a message; the signature is retained in the base-station audit log
/// as the non-repudiation evidence.
pub fn sign(key: &SigningKey, message: &[u8]) -> Vec<u8> {
    use ed25519_dalek::Signer;
    key.0.sign(message).to_bytes().to_vec()
}

/// Verifies a signature. Returns `false` for malformed keys or signatures;
/// never panics.
pub fn verify(public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    use ed25519_dalek::Verifier;
    let Ok(key_bytes) = <[u8; 32]>::try_from(public_key) else {
        return false;
    };
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key_bytes) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; SIGNATURE_LEN]>::try_from(signature) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
    vk.verify(message, &sig).is_ok()
}

// ---------------------------------------------------------------------------
// Freshness
// ---------------------------------------------------------------------------

/// Acceptance window for message timestamps: a message is fresh iff its
/// timestamp lies in the closed interval `[now - tau, now]` of the
/// receiver's clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FreshnessPolicy {
    pub tau_ms: u64,
}

impl FreshnessPolicy {
    pub fn new(tau_ms: u64) -> Result<Self, CryptoError> {
        if tau_ms == 0 {
            return Err(CryptoError::ZeroTau);
        }
        Ok(FreshnessPolicy { tau_ms })
    }
}

impl Default for FreshnessPolicy {
    fn default() -> Self {
        FreshnessPolicy {
            tau_ms: DEFAULT_TAU_MS,
        }
    }
}

/// Freshness verdict; exactly one branch holds for any input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    Stale,
    Future,
}

/// Classifies a message timestamp against the receiver clock. Both interval
/// ends are inclusive; anything ahead of the receiver clock is `Future`.
pub fn check_freshness(
    receiver_now_ms: u64,
    msg_timestamp_ms: u64,
    policy: &FreshnessPolicy,
) -> Freshness {
    if msg_timestamp_ms > receiver_now_ms {
        Freshness::Future
    } else if msg_timestamp_ms < receiver_now_ms.saturating_sub(policy.tau_ms) {
        Freshness::Stale
    } else {
        Freshness::Fresh
    }
}

// ---------------------------------------------------------------------------
// Replay defense
// ---------------------------------------------------------------------------

/// Replay verdict for a (pseudonym, sequence) presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayVerdict {
    Accept,
    Replay,
}

/// Sliding-window replay filter over one pseudonym's sequence stream.
/// A sequence is accepted at most once; sequences older than
/// `highest - width` are rejected outright.
#[derive(Debug, Clone)]
pub struct ReplayWindow {
    width: u64,
    highest: Option<u64>,
    /// Bit `i` set means `highest - i` has been accepted; covers offsets
    /// `0..=width`.
    bitmap: Vec<u64>,
}

impl ReplayWindow {
    pub fn new(width: u64) -> Self {
        assert!(width >= 1, "replay window width must be >= 1");
        let words = (width as usize + 1).div_ceil(64);
        ReplayWindow {
            width,
            highest: None,
            bitmap: vec![0; words],
        }
    }

    fn bit(&self, offset: u64) -> bool {
        let idx = (offset / 64) as usize;
        self.bitmap[idx] & (1u64 << (offset % 64)) != 0
    }

    fn set_bit(&mut self, offset: u64) {
        let idx = (offset / 64) as usize;
        self.bitmap[idx] |= 1u64 << (offset % 64);
    }

    fn shift_left(&mut self, by: u64) {
        // Shifting the window forward by `by` positions; offsets grow.
        if by > self.width {
            self.bitmap.iter_mut().for_each(|w| *w = 0);
            return;
        }
        let total_bits = self.bitmap.len() * 64;
        let mut next = vec![0u64; self.bitmap.len()];
        for offset in 0..=self.width {
            if self.bit(offset) {
                let shifted = offset + by;
                if (shifted as usize) < total_bits && shifted <= self.width {
                    let idx = (shifted / 64) as usize;
                    next[idx] |= 1u64 << (shifted % 64);
                }
            }
        }
        self.bitmap = next;
    }

    pub fn check(&mut self, sequence: u64) -> ReplayVerdict {
        match self.highest {
            None => {
                self.highest = Some(sequence);
                self.set_bit(0);
                ReplayVerdict::Accept
            }
            Some(highest) => {
                if sequence > highest {
                    let advance = sequence - highest;
                    self.shift_left(advance);
                    self.highest = Some(sequence);
                    self.set_bit(0);
                    ReplayVerdict::Accept
                } else {
                    let offset = highest - sequence;
                    if offset > self.width {
                        // Older than highest - width.
                        ReplayVerdict::Replay
                    } else if self.bit(offset) {
                        ReplayVerdict::Replay
                    } else {
                        self.set_bit(offset);
                        ReplayVerdict::Accept
                    }
                }
            }
        }
    }
}

/// Per-pseudonym replay windows, one writer at a time (the owning event
/// loop serializes all mutations).
#[derive(Debug, Clone)]
pub struct ReplayGuard {
    width: u64,
    windows: std::collections::HashMap<Pseudonym, ReplayWindow>,
}

impl ReplayGuard {
    pub fn new(width: u64) -> Self {
        ReplayGuard {
            width,
            windows: std::collections::HashMap::new(),
        }
    }

    pub fn check(&mut self, pseudonym: &Pseudonym, sequence: u64) -> ReplayVerdict {
        self.windows
            .entry(*pseudonym)
            .or_insert_with(|| ReplayWindow::new(self.width))
            .check(sequence)
    }
}
