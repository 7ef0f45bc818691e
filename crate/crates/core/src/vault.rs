//! Trusted third-party provider: the only place passwords live, issuer and
//! verifier of access tokens, and custodian of the symmetric signing keys.
//!
//! Access tokens are opaque random strings checked by server-side lookup.
//! Nothing in this module ever moves a token's `expires_at`.

use std::fmt;

use argon2::{Algorithm, Argon2, Params, Version};
use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::clock::{SharedClock, Timestamp};
use crate::names::is_slug;
use crate::store::{Namespace, SharedStore, StoreError, StoreExt, StoreKey};

pub const DEFAULT_ACCESS_TTL: u64 = 3600;
pub const MIN_PASSWORD_LEN: usize = 8;
const SALT_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum VaultError {
    #[error("username already registered")]
    DuplicateUsername,
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("username must match [a-z0-9._-]+ and be at most 64 characters")]
    InvalidUsername,
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("unknown signing key {0}")]
    UnknownKey(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl Default for HashParams {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
            parallelism: 1,
        }
    }
}

impl HashParams {
    /// Small but still memory-hard settings for tests and benchmarks.
    pub fn light() -> Self {
        Self {
            memory_kib: 1024,
            iterations: 1,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaultConfig {
    pub access_ttl: u64,
    pub hash: HashParams,
}

impl Default for VaultConfig {
    fn default() -> Self {
        Self {
            access_ttl: DEFAULT_ACCESS_TTL,
            hash: HashParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub username: String,
    /// Hex-encoded Argon2id output.
    pub password_digest: String,
    /// Hex-encoded 16-byte salt.
    pub salt: String,
    pub params: HashParams,
    pub created_at: Timestamp,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub token_value: String,
    pub subject: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

impl fmt::Debug for AccessToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessToken")
            .field("token_value", &"[redacted]")
            .field("subject", &self.subject)
            .field("issued_at", &self.issued_at)
            .field("expires_at", &self.expires_at)
            .finish()
    }
}

/// Server-side row for an issued access token, keyed by the token's SHA-256.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenRow {
    subject: String,
    issued_at: Timestamp,
    expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedToken {
    pub subject: String,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum TokenRejection {
    #[error("invalid access token")]
    Invalid,
    #[error("access token expired")]
    Expired,
}

#[derive(Clone)]
pub struct SigningKey {
    pub key_id: String,
    pub key_bytes: [u8; 32],
    pub created_at: Timestamp,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("key_id", &self.key_id)
            .field("key_bytes", &"[redacted]")
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct KeyRow {
    key_id: String,
    key: String,
    created_at: Timestamp,
}

pub struct Vault {
    store: SharedStore,
    clock: SharedClock,
    config: VaultConfig,
}

impl Vault {
    pub fn new(store: SharedStore, clock: SharedClock, config: VaultConfig) -> Self {
        Self {
            store,
            clock,
            config,
        }
    }

    pub fn access_ttl(&self) -> u64 {
        self.config.access_ttl
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn register_credentials(
        &self,
        username: &str,
        password: &str,
    ) -> Result<CredentialRecord, VaultError> {
        if !is_slug(username) {
            return Err(VaultError::InvalidUsername);
        }
        check_strength(password)?;
        let mut salt = [0u8; SALT_LEN];
        OsRng.fill_bytes(&mut salt);
        let record = CredentialRecord {
            username: username.to_string(),
            password_digest: hex(&self.digest(password, &salt, self.config.hash)),
            salt: hex(&salt),
            params: self.config.hash,
            created_at: self.clock.now(),
        };
        match self.store.create_json(&cred_key(username)?, &record) {
            Ok(_) => Ok(record),
            Err(StoreError::AlreadyExists(_)) => Err(VaultError::DuplicateUsername),
            Err(e) => Err(e.into()),
        }
    }

    /// Removes a credential. Idempotent; used as a saga compensation and when
    /// an owner removes a member.
    pub fn delete_credentials(&self, username: &str) -> Result<bool, VaultError> {
        let Ok(key) = cred_key(username) else {
            return Ok(false);
        };
        Ok(self.store.delete(&key)?)
    }

    pub fn has_credentials(&self, username: &str) -> Result<bool, VaultError> {
        let Ok(key) = cred_key(username) else {
            return Ok(false);
        };
        Ok(self.store.get(&key)?.is_some())
    }

    pub fn authenticate(&self, username: &str, password: &str) -> Result<AccessToken, VaultError> {
        self.check_password(username, password)?;

        let mut raw = [0u8; 32];
        OsRng.fill_bytes(&mut raw);
        let token_value = URL_SAFE_NO_PAD.encode(raw);
        let issued_at = self.clock.now();
        let row = TokenRow {
            subject: username.to_string(),
            issued_at,
            expires_at: issued_at + self.config.access_ttl,
        };
        self.store.create_json(&token_key(&token_value)?, &row)?;
        Ok(AccessToken {
            token_value,
            subject: row.subject,
            issued_at,
            expires_at: row.expires_at,
        })
    }

    pub fn verify_token(&self, token_value: &str) -> Result<VerifiedToken, TokenRejection> {
        let row: TokenRow = match token_key(token_value).ok().map(|k| self.store.get_json(&k)) {
            Some(Ok(Some(row))) => row,
            Some(Err(e)) => {
                tracing::warn!(error = %e, "token lookup failed");
                return Err(TokenRejection::Invalid);
            }
            _ => return Err(TokenRejection::Invalid),
        };
        if self.clock.now() >= row.expires_at {
            return Err(TokenRejection::Expired);
        }
        Ok(VerifiedToken {
            subject: row.subject,
            expires_at: row.expires_at,
        })
    }

    /// Replaces the stored digest. Tokens issued earlier stay valid until
    /// they expire on their own.
    pub fn update_password(
        &self,
        username: &str,
        old_password: &str,
        new_password: &str,
    ) -> Result<(), VaultError> {
        check_strength(new_password)?;
        let mut record = self.check_password(username, old_password)?;
        let mut salt = [0u8; SALT_LEN];
        OsRng.fill_bytes(&mut salt);
        record.password_digest = hex(&self.digest(new_password, &salt, self.config.hash));
        record.salt = hex(&salt);
        record.params = self.config.hash;
        self.store.put_json(&cred_key(username)?, &record)?;
        Ok(())
    }

    pub fn create_signing_key(&self) -> Result<String, VaultError> {
        let mut key = [0u8; 32];
        OsRng.fill_bytes(&mut key);
        let key_id = format!("k-{}", uuid::Uuid::new_v4().simple());
        let row = KeyRow {
            key_id: key_id.clone(),
            key: STANDARD.encode(key),
            created_at: self.clock.now(),
        };
        self.store.create_json(&key_key(&key_id)?, &row)?;
        Ok(key_id)
    }

    pub fn get_signing_key(&self, key_id: &str) -> Result<SigningKey, VaultError> {
        let unknown = || VaultError::UnknownKey(key_id.to_string());
        let key = key_key(key_id).map_err(|_| unknown())?;
        let row: KeyRow = self.store.get_json(&key)?.ok_or_else(unknown)?;
        let bytes = STANDARD
            .decode(&row.key)
            .ok()
            .and_then(|b| <[u8; 32]>::try_from(b).ok())
            .ok_or_else(|| StoreError::Corrupt(key.to_string()))?;
        Ok(SigningKey {
            key_id: row.key_id,
            key_bytes: bytes,
            created_at: row.created_at,
        })
    }

    /// Identifiers of every stored signing key, oldest id first.
    pub fn signing_key_ids(&self) -> Result<Vec<String>, VaultError> {
        Ok(self
            .store
            .list_prefix(Namespace::Keys, "")?
            .into_iter()
            .map(|r| r.key.id().to_string())
            .collect())
    }

    fn check_password(
        &self,
        username: &str,
        password: &str,
    ) -> Result<CredentialRecord, VaultError> {
        let record: Option<CredentialRecord> = match cred_key(username) {
            Ok(k) => self.store.get_json(&k)?,
            Err(_) => None,
        };
        let Some(record) = record else {
            // Burn the same work as a real check so unknown users are not
            // distinguishable by timing.
            let _ = self.digest(password, &[0u8; SALT_LEN], self.config.hash);
            return Err(VaultError::InvalidCredentials);
        };
        let salt = unhex(&record.salt).ok_or_else(|| StoreError::Corrupt(username.to_string()))?;
        let expected = unhex(&record.password_digest)
            .ok_or_else(|| StoreError::Corrupt(username.to_string()))?;
        let actual = self.digest(password, &salt, record.params);
        if bool::from(actual.as_slice().ct_eq(&expected)) {
            Ok(record)
        } else {
            Err(VaultError::InvalidCredentials)
        }
    }

    fn digest(&self, password: &str, salt: &[u8], p: HashParams) -> [u8; DIGEST_LEN] {
        let params = Params::new(p.memory_kib, p.iterations, p.parallelism, Some(DIGEST_LEN))
            .expect("valid argon2 parameters");
        let mut out = [0u8; DIGEST_LEN];
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
            .hash_password_into(password.as_bytes(), salt, &mut out)
            .expect("argon2 output length is fixed");
        out
    }
}

fn check_strength(password: &str) -> Result<(), VaultError> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(VaultError::WeakPassword);
    }
    Ok(())
}

fn cred_key(username: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(Namespace::Users, username)
}

fn token_key(token_value: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(
        Namespace::Tokens,
        hex(&Sha256::digest(token_value.as_bytes())),
    )
}

fn key_key(key_id: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(Namespace::Keys, key_id)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}
