//! Non-transactional key-value persistence shared by the identity and policy
//! services.
//!
//! Every operation is atomic for a single key and nothing more: there is no
//! batch or transaction API. Multi-step writers (the registration saga) have
//! to compensate by hand when a later step fails.

mod fault;
mod file;
mod memory;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::value::RawValue;

pub use fault::{FaultInjector, FaultRule, StoreOp};
pub use file::FileStore;
pub use memory::MemoryStore;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid store key: {0}")]
    InvalidKey(String),
    #[error("value for {0} is not a JSON document")]
    NotJson(StoreKey),
    #[error("{0} already exists")]
    AlreadyExists(StoreKey),
    #[error("injected fault on {op:?} {key}")]
    Injected { op: StoreOp, key: String },
    #[error("corrupt record at {0}")]
    Corrupt(String),
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Namespace {
    Users,
    Orgs,
    Grants,
    Inherit,
    Configs,
    Tokens,
    Keys,
}

impl Namespace {
    pub const ALL: [Namespace; 7] = [
        Namespace::Users,
        Namespace::Orgs,
        Namespace::Grants,
        Namespace::Inherit,
        Namespace::Configs,
        Namespace::Tokens,
        Namespace::Keys,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::Users => "users",
            Namespace::Orgs => "orgs",
            Namespace::Grants => "grants",
            Namespace::Inherit => "inherit",
            Namespace::Configs => "configs",
            Namespace::Tokens => "tokens",
            Namespace::Keys => "keys",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Namespace {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Namespace::ALL
            .into_iter()
            .find(|ns| ns.as_str() == s)
            .ok_or_else(|| StoreError::InvalidKey(format!("unknown namespace {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StoreKey {
    namespace: Namespace,
    id: String,
}

impl StoreKey {
    pub fn new(namespace: Namespace, id: impl Into<String>) -> Result<Self, StoreError> {
        let id = id.into();
        if id.is_empty() || id.contains('/') || id.contains('\0') {
            return Err(StoreError::InvalidKey(format!("bad id {id:?}")));
        }
        Ok(Self { namespace, id })
    }

    /// Parses the namespace from its string name; unknown names are rejected.
    pub fn parse(namespace: &str, id: impl Into<String>) -> Result<Self, StoreError> {
        Self::new(namespace.parse()?, id)
    }

    pub fn namespace(&self) -> Namespace {
        self.namespace
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl fmt::Display for StoreKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreRecord {
    pub key: StoreKey,
    pub value: Vec<u8>,
    pub version: u64,
}

impl StoreRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, StoreError> {
        serde_json::from_slice(&self.value).map_err(|_| StoreError::Corrupt(self.key.to_string()))
    }
}

pub trait Store: Send + Sync {
    /// Writes `value` and returns the new version (1 on first write).
    fn put(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError>;

    /// Like `put`, but fails with `AlreadyExists` if the key is present. The
    /// check and the insert happen atomically.
    fn put_if_absent(&self, key: &StoreKey, value: &[u8]) -> Result<u64, StoreError>;

    fn get(&self, key: &StoreKey) -> Result<Option<StoreRecord>, StoreError>;

    /// Idempotent; returns whether the key existed.
    fn delete(&self, key: &StoreKey) -> Result<bool, StoreError>;

    /// Records in `namespace` whose id starts with `id_prefix`, ordered by id.
    fn list_prefix(
        &self,
        namespace: Namespace,
        id_prefix: &str,
    ) -> Result<Vec<StoreRecord>, StoreError>;

    fn faults(&self) -> &FaultInjector;
}

pub type SharedStore = Arc<dyn Store>;

/// Serialization helpers over any [`Store`].
pub trait StoreExt: Store {
    fn put_json<T: Serialize>(&self, key: &StoreKey, value: &T) -> Result<u64, StoreError> {
        self.put(key, &to_json(value))
    }

    fn create_json<T: Serialize>(&self, key: &StoreKey, value: &T) -> Result<u64, StoreError> {
        self.put_if_absent(key, &to_json(value))
    }

    fn get_json<T: DeserializeOwned>(&self, key: &StoreKey) -> Result<Option<T>, StoreError> {
        self.get(key)?.map(|r| r.decode()).transpose()
    }

    /// Every visible record across all namespaces, for snapshots and audits.
    fn dump(&self) -> Result<Vec<StoreRecord>, StoreError> {
        let mut all = Vec::new();
        for ns in Namespace::ALL {
            all.extend(self.list_prefix(ns, "")?);
        }
        Ok(all)
    }
}

impl<S: Store + ?Sized> StoreExt for S {}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("entity serialization is infallible")
}

/// Validates that `value` is one JSON document and returns it without
/// surrounding whitespace, so both backends hand back identical bytes.
fn canonical_value(key: &StoreKey, value: &[u8]) -> Result<Vec<u8>, StoreError> {
    let raw: &RawValue =
        serde_json::from_slice(value).map_err(|_| StoreError::NotJson(key.clone()))?;
    Ok(raw.get().as_bytes().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_rules() {
        assert!(StoreKey::parse("orgs", "acme").is_ok());
        assert!(matches!(
            StoreKey::parse("x", "y"),
            Err(StoreError::InvalidKey(_))
        ));
        assert!(StoreKey::new(Namespace::Users, "").is_err());
        assert!(StoreKey::new(Namespace::Users, "a/b").is_err());
    }

    #[test]
    fn namespace_names_roundtrip() {
        for ns in Namespace::ALL {
            assert_eq!(ns.as_str().parse::<Namespace>().unwrap(), ns);
        }
    }
}
