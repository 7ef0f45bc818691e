//! Authorization service: ALLOW/DENY grants over a user -> organization
//! hierarchy, resolved on every query straight from the store.
//!
//! Resolution order for a permission name:
//! 1. if the user holds any direct grant for the name, only direct grants count;
//! 2. otherwise the parent organization's grants count;
//! 3. within the level that counts, DENY beats ALLOW;
//! 4. a name with no grant at either level is denied.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::names::{is_permission_name, is_slug};
use crate::store::{Namespace, SharedStore, StoreError, StoreExt, StoreKey};

/// Every permission name the system knows about. Owners receive all of them
/// at registration.
pub const SYSTEM_PERMISSIONS: [&str; 8] = [
    "config.put",
    "config.get",
    "ns.create",
    "ns.read",
    "org.member.add",
    "org.member.remove",
    "org.perm.grant",
    "org.perm.revoke",
];

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown subject {0}")]
    UnknownSubject(Subject),
    #[error("malformed permission name {0:?}")]
    MalformedName(String),
    #[error("{0} already inherits from an organization")]
    AlreadyInherits(String),
    #[error("policy service unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PermissionKind {
    Allow,
    Deny,
}

impl PermissionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PermissionKind::Allow => "ALLOW",
            PermissionKind::Deny => "DENY",
        }
    }
}

impl fmt::Display for PermissionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PermissionKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ALLOW" => Ok(PermissionKind::Allow),
            "DENY" => Ok(PermissionKind::Deny),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permission {
    pub id: String,
    pub name: String,
    pub kind: PermissionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SubjectKind {
    User,
    Org,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Subject {
    pub kind: SubjectKind,
    pub id: String,
}

impl Subject {
    pub fn user(id: impl Into<String>) -> Self {
        Self {
            kind: SubjectKind::User,
            id: id.into(),
        }
    }

    pub fn org(id: impl Into<String>) -> Self {
        Self {
            kind: SubjectKind::Org,
            id: id.into(),
        }
    }

    fn grant_prefix(&self) -> String {
        let tag = match self.kind {
            SubjectKind::User => 'u',
            SubjectKind::Org => 'o',
        };
        format!("{tag}:{}:", self.id)
    }

    fn entity_key(&self) -> Result<StoreKey, StoreError> {
        let ns = match self.kind {
            SubjectKind::User => Namespace::Users,
            SubjectKind::Org => Namespace::Orgs,
        };
        StoreKey::new(ns, &self.id)
    }
}

/// `user:<name>` or `org:<name>`.
impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SubjectKind::User => write!(f, "user:{}", self.id),
            SubjectKind::Org => write!(f, "org:{}", self.id),
        }
    }
}

impl FromStr for Subject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = match s.split_once(':') {
            Some(("user", id)) => (SubjectKind::User, id),
            Some(("org", id)) => (SubjectKind::Org, id),
            _ => {
                return Err(format!(
                    "subject must be user:<name> or org:<name>, got {s:?}"
                ))
            }
        };
        if !is_slug(id) {
            return Err(format!("bad subject name {id:?}"));
        }
        Ok(Subject {
            kind,
            id: id.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InheritanceEdge {
    pub child: String,
    pub parent: String,
}

// Internal message contract. Any transport carrying these as JSON is valid.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckRequest {
    pub user: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub decision: PermissionKind,
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self.decision == PermissionKind::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListRequest {
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionList {
    pub permissions: Vec<Permission>,
}

impl PermissionList {
    /// ALLOW iff the list holds `name` with kind ALLOW.
    pub fn decide(&self, name: &str) -> PermissionKind {
        let allowed = self
            .permissions
            .iter()
            .any(|p| p.name == name && p.kind == PermissionKind::Allow);
        if allowed {
            PermissionKind::Allow
        } else {
            PermissionKind::Deny
        }
    }
}

/// The policy engine as seen by its callers, whatever sits in between.
pub trait PolicyService: Send + Sync {
    fn list(&self, req: &ListRequest) -> Result<PermissionList, PolicyError>;
    fn check(&self, req: &CheckRequest) -> Decision;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyCounters {
    pub effective_calls: u64,
    pub check_calls: u64,
}

pub struct PolicyEngine {
    store: SharedStore,
    effective_calls: AtomicU64,
    check_calls: AtomicU64,
}

impl PolicyEngine {
    pub fn new(store: SharedStore) -> Self {
        Self {
            store,
            effective_calls: AtomicU64::new(0),
            check_calls: AtomicU64::new(0),
        }
    }

    pub fn counters(&self) -> PolicyCounters {
        PolicyCounters {
            effective_calls: self.effective_calls.load(Ordering::SeqCst),
            check_calls: self.check_calls.load(Ordering::SeqCst),
        }
    }

    pub fn reset_counters(&self) {
        self.effective_calls.store(0, Ordering::SeqCst);
        self.check_calls.store(0, Ordering::SeqCst);
    }

    /// Idempotent on (subject, name, kind): a repeated grant returns the
    /// stored permission and its original id.
    pub fn grant(
        &self,
        subject: &Subject,
        name: &str,
        kind: PermissionKind,
    ) -> Result<Permission, PolicyError> {
        if !is_permission_name(name) {
            return Err(PolicyError::MalformedName(name.to_string()));
        }
        self.require(subject)?;
        let key = grant_key(subject, name, kind)?;
        let perm = Permission {
            id: uuid::Uuid::new_v4().to_string(),
            name: name.to_string(),
            kind,
        };
        match self.store.create_json(&key, &perm) {
            Ok(_) => Ok(perm),
            Err(StoreError::AlreadyExists(_)) => self
                .store
                .get_json(&key)?
                .ok_or_else(|| StoreError::Corrupt(key.to_string()).into()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn revoke(
        &self,
        subject: &Subject,
        name: &str,
        kind: PermissionKind,
    ) -> Result<bool, PolicyError> {
        self.require(subject)?;
        if !is_permission_name(name) {
            return Ok(false);
        }
        Ok(self.store.delete(&grant_key(subject, name, kind)?)?)
    }

    /// Direct grants held by `subject`, ordered by (name, kind).
    pub fn direct_grants(&self, subject: &Subject) -> Result<Vec<Permission>, PolicyError> {
        self.store
            .list_prefix(Namespace::Grants, &subject.grant_prefix())?
            .iter()
            .map(|r| r.decode().map_err(PolicyError::from))
            .collect()
    }

    /// Deletes every direct grant of `subject`, returning how many existed.
    /// Does not require the subject to exist, so it can run as a compensation.
    pub fn revoke_all(&self, subject: &Subject) -> Result<usize, PolicyError> {
        let mut n = 0;
        for rec in self
            .store
            .list_prefix(Namespace::Grants, &subject.grant_prefix())?
        {
            if self.store.delete(&rec.key)? {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn add_inheritance(&self, child: &str, parent: &str) -> Result<(), PolicyError> {
        self.require(&Subject::user(child))?;
        self.require(&Subject::org(parent))?;
        let edge = InheritanceEdge {
            child: child.to_string(),
            parent: parent.to_string(),
        };
        match self.store.create_json(&inherit_key(child)?, &edge) {
            Ok(_) => Ok(()),
            Err(StoreError::AlreadyExists(_)) => Err(PolicyError::AlreadyInherits(child.into())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn remove_inheritance(&self, child: &str) -> Result<bool, PolicyError> {
        let Ok(key) = inherit_key(child) else {
            return Ok(false);
        };
        Ok(self.store.delete(&key)?)
    }

    pub fn parent_of(&self, user: &str) -> Result<Option<String>, PolicyError> {
        let Ok(key) = inherit_key(user) else {
            return Ok(None);
        };
        Ok(self
            .store
            .get_json::<InheritanceEdge>(&key)?
            .map(|e| e.parent))
    }

    /// Grants ALLOW for every catalog permission. Returns the catalog size.
    pub fn assign_all(&self, user: &str, org: &str) -> Result<usize, PolicyError> {
        let subject = Subject::user(user);
        self.require(&subject)?;
        self.require(&Subject::org(org))?;
        for name in SYSTEM_PERMISSIONS {
            self.grant(&subject, name, PermissionKind::Allow)?;
        }
        Ok(SYSTEM_PERMISSIONS.len())
    }

    pub fn effective_permissions(&self, user: &str) -> Result<Vec<Permission>, PolicyError> {
        self.effective_calls.fetch_add(1, Ordering::Relaxed);
        self.resolve(user)
    }

    /// Default-deny. An unknown user is denied and logged.
    pub fn check(&self, user: &str, name: &str) -> PermissionKind {
        self.check_calls.fetch_add(1, Ordering::Relaxed);
        match self.resolve(user) {
            Ok(perms) => PermissionList { permissions: perms }.decide(name),
            Err(e) => {
                tracing::warn!(target: "audit", user, name, error = %e, "policy check denied");
                PermissionKind::Deny
            }
        }
    }

    fn resolve(&self, user: &str) -> Result<Vec<Permission>, PolicyError> {
        let subject = Subject::user(user);
        self.require(&subject)?;
        let direct = self.direct_grants(&subject)?;
        let inherited = match self.parent_of(user)? {
            Some(org) => self.direct_grants(&Subject::org(org))?,
            None => Vec::new(),
        };

        let mut by_name: BTreeMap<&str, (Option<&Permission>, Option<&Permission>)> =
            BTreeMap::new();
        for p in &direct {
            let slot = &mut by_name.entry(&p.name).or_default().0;
            *slot = Some(stronger(*slot, p));
        }
        for p in &inherited {
            let slot = &mut by_name.entry(&p.name).or_default().1;
            *slot = Some(stronger(*slot, p));
        }
        Ok(by_name
            .into_values()
            .filter_map(|(d, i)| d.or(i).cloned())
            .collect())
    }

    fn require(&self, subject: &Subject) -> Result<(), PolicyError> {
        let unknown = || PolicyError::UnknownSubject(subject.clone());
        let key = subject.entity_key().map_err(|_| unknown())?;
        match self.store.get(&key)? {
            Some(_) => Ok(()),
            None => Err(unknown()),
        }
    }
}

fn stronger<'a>(current: Option<&'a Permission>, candidate: &'a Permission) -> &'a Permission {
    match current {
        Some(c) if c.kind == PermissionKind::Deny => c,
        _ => candidate,
    }
}

fn grant_key(subject: &Subject, name: &str, kind: PermissionKind) -> Result<StoreKey, StoreError> {
    StoreKey::new(
        Namespace::Grants,
        format!("{}{name}:{kind}", subject.grant_prefix()),
    )
}

fn inherit_key(user: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(Namespace::Inherit, user)
}

impl PolicyService for PolicyEngine {
    fn list(&self, req: &ListRequest) -> Result<PermissionList, PolicyError> {
        Ok(PermissionList {
            permissions: self.effective_permissions(&req.user)?,
        })
    }

    fn check(&self, req: &CheckRequest) -> Decision {
        Decision {
            decision: PolicyEngine::check(self, &req.user, &req.name),
        }
    }
}
