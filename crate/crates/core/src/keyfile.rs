//! Hex-encoded key files: one record per line, `role id hex-bytes`.
//!
//! The hex blob per node is 80 bytes: a 32-byte signing seed, a 32-byte
//! pre-shared secret, and a 16-byte password secret (its hex rendering is
//! the node's password). Lines starting with `#` and blank lines are
//! ignored. The base station loads the whole fleet file; a vehicle is given
//! only its own record.

use rand::RngCore;
use thiserror::Error;

use crate::crypto::SigningKey;
use crate::domain::VehicleId;
use crate::policy::Role;

pub const SEED_LEN: usize = 32;
pub const PSK_LEN: usize = 32;
pub const PASSWORD_SECRET_LEN: usize = 16;
pub const RECORD_LEN: usize = SEED_LEN + PSK_LEN + PASSWORD_SECRET_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyFileError {
    #[error("line {line}: expected `role id hex`, got {field_count} fields")]
    FieldCount { line: usize, field_count: usize },
    #[error("line {line}: unknown role {role:?}")]
    UnknownRole { line: usize, role: String },
    #[error("line {line}: bad hex: {detail}")]
    BadHex { line: usize, detail: String },
    #[error("line {line}: record must be {RECORD_LEN} bytes, got {got}")]
    BadLength { line: usize, got: usize },
    #[error("duplicate record for {0}")]
    Duplicate(String),
}

/// One node's key material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub role: Role,
    pub id: VehicleId,
    pub signing_seed: [u8; SEED_LEN],
    pub psk: [u8; PSK_LEN],
    pub password_secret: [u8; PASSWORD_SECRET_LEN],
}

impl KeyRecord {
    pub fn generate(role: Role, id: VehicleId, rng: &mut impl RngCore) -> Self {
        let mut signing_seed = [0u8; SEED_LEN];
        let mut psk = [0u8; PSK_LEN];
        let mut password_secret = [0u8; PASSWORD_SECRET_LEN];
        rng.fill_bytes(&mut signing_seed);
        rng.fill_bytes(&mut psk);
        rng.fill_bytes(&mut password_secret);
        KeyRecord {
            role,
            id,
            signing_seed,
            psk,
            password_secret,
        }
    }

    pub fn signing_key(&self) -> SigningKey {
        SigningKey::from_seed(&self.signing_seed)
    }

    pub fn verifying_key(&self) -> [u8; 32] {
        self.signing_key().verifying_key_bytes()
    }

    /// The node's password string: hex of the password secret.
    pub fn password(&self) -> String {
        hex::encode(self.password_secret)
    }

    fn to_line(&self) -> String {
        let mut blob = Vec::with_capacity(RECORD_LEN);
        blob.extend_from_slice(&self.signing_seed);
        blob.extend_from_slice(&self.psk);
        blob.extend_from_slice(&self.password_secret);
        format!("{} {} {}", self.role, self.id, hex::encode(blob))
    }
}

/// Parses a key file. Order of records is preserved.
pub fn parse_key_file(text: &str) -> Result<Vec<KeyRecord>, KeyFileError> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(KeyFileError::FieldCount {
                line: line_no,
                field_count: fields.len(),
            });
        }
        let role = fields[0]
            .parse::<Role>()
            .map_err(|_| KeyFileError::UnknownRole {
                line: line_no,
                role: fields[0].to_string(),
            })?;
        let id = VehicleId::new(fields[1]);
        let blob = hex::decode(fields[2]).map_err(|e| KeyFileError::BadHex {
            line: line_no,
            detail: e.to_string(),
        })?;
        if blob.len() != RECORD_LEN {
            return Err(KeyFileError::BadLength {
                line: line_no,
                got: blob.len(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(KeyFileError::Duplicate(id.to_string()));
        }
        records.push(KeyRecord {
            role,
            id,
            signing_seed: blob[..SEED_LEN].try_into().unwrap(),
            psk: blob[SEED_LEN..SEED_LEN + PSK_LEN].try_into().unwrap(),
            password_secret: blob[SEED_LEN + PSK_LEN..].try_into().unwrap(),
        });
    }
    Ok(records)
}

/// Renders records back to the line format; `parse_key_file` inverts this.
pub fn render_key_file(records: &[KeyRecord]) -> String {
    let mut out = String::from("# vanet key file: role id hex(seed32 || psk32 || pwsecret16)\n");
    for record in records {
        out.push_str(&record.to_line());
        out.push('\n');
    }
    out
}
