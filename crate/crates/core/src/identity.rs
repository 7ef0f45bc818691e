//! User accounts and organizations.
//!
//! Registration touches three systems that share no transaction: the vault,
//! the identity records and the policy graph. It runs as a saga:
//!
//! 1. credential stored in the vault
//! 2. organization record (owner = user) and user record stored
//! 3. inheritance edge user -> org
//! 4. every catalog permission granted to the user
//!
//! Each effect pushes an idempotent compensation once it has happened. When a
//! step fails the stack unwinds in reverse, leaving the stores as they were.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::audit::AuditLog;
use crate::clock::{SharedClock, Timestamp};
use crate::names::is_slug;
use crate::policy::{PolicyEngine, PolicyError, Subject};
use crate::store::{Namespace, SharedStore, StoreError, StoreExt, StoreKey};
use crate::vault::{Vault, VaultError, MIN_PASSWORD_LEN};

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("username must match [a-z0-9._-]+ and be at most 64 characters")]
    InvalidUsername,
    #[error("password must be at least {MIN_PASSWORD_LEN} characters")]
    WeakPassword,
    #[error("organization name must match [a-z0-9._-]+")]
    InvalidOrganization,
    #[error("username already registered")]
    DuplicateUsername,
    #[error("organization already exists")]
    OrganizationExists,
    #[error("registration failed at step {step}: {cause}")]
    RegistrationFailed { step: u8, cause: String },
    #[error("adding member failed at step {step}: {cause}")]
    MemberAddFailed { step: u8, cause: String },
    #[error("rollback failed while compensating step {step}: {cause}")]
    RollbackFailed { step: u8, cause: String },
    #[error("caller is not the owner of the organization")]
    NotOwner,
    #[error("the owner cannot be removed")]
    CannotRemoveOwner,
    #[error("not a member of the organization")]
    UnknownMember,
    #[error("not found")]
    NotFound,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Vault(#[from] VaultError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRequest {
    pub username: String,
    pub password: String,
    #[serde(default)]
    pub personal_info: BTreeMap<String, String>,
    #[serde(default)]
    pub org_name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Owner,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub username: String,
    pub personal_info: BTreeMap<String, String>,
    pub org: String,
    pub role: Role,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganizationRecord {
    pub name: String,
    pub owner: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganizationView {
    #[serde(flatten)]
    pub org: OrganizationRecord,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdentityConfig {
    /// Run steps 3 and 4 of registration in the background.
    #[serde(default)]
    pub async_grants: bool,
}

#[derive(Debug, Clone)]
enum Undo {
    Credential(String),
    Org(String),
    User(String),
    Inheritance(String),
    Grants(String),
}

impl Undo {
    fn step(&self) -> u8 {
        match self {
            Undo::Credential(_) => 1,
            Undo::Org(_) | Undo::User(_) => 2,
            Undo::Inheritance(_) => 3,
            Undo::Grants(_) => 4,
        }
    }
}

impl fmt::Display for Undo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Undo::Credential(u) => write!(f, "delete credential {u}"),
            Undo::Org(o) => write!(f, "delete org {o}"),
            Undo::User(u) => write!(f, "delete user {u}"),
            Undo::Inheritance(u) => write!(f, "remove inheritance of {u}"),
            Undo::Grants(u) => write!(f, "revoke grants of {u}"),
        }
    }
}

/// Services a saga touches. Cheap to clone into a background task.
#[derive(Clone)]
struct Deps {
    store: SharedStore,
    vault: Arc<Vault>,
    policy: Arc<PolicyEngine>,
    audit: Arc<AuditLog>,
    clock: SharedClock,
}

impl Deps {
    fn undo(&self, u: &Undo) -> Result<(), String> {
        match u {
            Undo::Credential(name) => self
                .vault
                .delete_credentials(name)
                .map(drop)
                .map_err(|e| e.to_string()),
            Undo::Org(name) => org_key(name)
                .and_then(|k| self.store.delete(&k))
                .map(drop)
                .map_err(|e| e.to_string()),
            Undo::User(name) => user_key(name)
                .and_then(|k| self.store.delete(&k))
                .map(drop)
                .map_err(|e| e.to_string()),
            Undo::Inheritance(name) => self
                .policy
                .remove_inheritance(name)
                .map(drop)
                .map_err(|e| e.to_string()),
            Undo::Grants(name) => self
                .policy
                .revoke_all(&Subject::user(name.as_str()))
                .map(drop)
                .map_err(|e| e.to_string()),
        }
    }

    /// Runs compensations newest first. Keeps going past a failing one and
    /// reports the first failure.
    fn unwind(&self, stack: &mut Vec<Undo>) -> Result<(), IdentityError> {
        let mut first_err = None;
        while let Some(u) = stack.pop() {
            if let Err(cause) = self.undo(&u) {
                self.audit.record(
                    self.clock.now(),
                    "rollback_failed",
                    format!("{u} (step {}): {cause}", u.step()),
                );
                first_err.get_or_insert(IdentityError::RollbackFailed {
                    step: u.step(),
                    cause,
                });
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn grant_steps(
        &self,
        username: &str,
        org: &str,
        stack: &mut Vec<Undo>,
    ) -> Result<(), (u8, String)> {
        self.policy
            .add_inheritance(username, org)
            .map_err(|e| (3, e.to_string()))?;
        stack.push(Undo::Inheritance(username.to_string()));
        // assign_all may stop halfway; the compensation is pushed first so
        // partial grants are covered. The user is new, so every grant it
        // removes was written by this saga.
        stack.push(Undo::Grants(username.to_string()));
        self.policy
            .assign_all(username, org)
            .map_err(|e| (4, e.to_string()))?;
        Ok(())
    }
}

pub struct Identity {
    deps: Deps,
    config: IdentityConfig,
    background: Mutex<Vec<JoinHandle<()>>>,
}

impl Identity {
    pub fn new(
        store: SharedStore,
        vault: Arc<Vault>,
        policy: Arc<PolicyEngine>,
        clock: SharedClock,
        config: IdentityConfig,
    ) -> Self {
        Self {
            deps: Deps {
                store,
                vault,
                policy,
                audit: Arc::new(AuditLog::default()),
                clock,
            },
            config,
            background: Mutex::new(Vec::new()),
        }
    }

    pub fn audit(&self) -> &AuditLog {
        &self.deps.audit
    }

    pub fn register_user(&self, req: &RegistrationRequest) -> Result<UserRecord, IdentityError> {
        validate_account(&req.username, &req.password)?;
        let org = req.org_name.clone().unwrap_or_else(|| req.username.clone());
        if !is_slug(&org) {
            return Err(IdentityError::InvalidOrganization);
        }
        if self.deps.store.get(&org_key(&org)?)?.is_some() {
            return Err(IdentityError::OrganizationExists);
        }

        let now = self.deps.clock.now();
        let d = &self.deps;
        let mut stack = Vec::new();
        let fail = |step: u8, cause: String, stack: &mut Vec<Undo>| -> IdentityError {
            match d.unwind(stack) {
                Ok(()) => IdentityError::RegistrationFailed { step, cause },
                Err(e) => e,
            }
        };

        // 1: credentials at the vault. Only username and password go there.
        match d.vault.register_credentials(&req.username, &req.password) {
            Ok(_) => stack.push(Undo::Credential(req.username.clone())),
            Err(VaultError::DuplicateUsername) => return Err(IdentityError::DuplicateUsername),
            Err(e) => return Err(fail(1, e.to_string(), &mut stack)),
        }

        // 2: organization with the user as owner, then the user record.
        let org_rec = OrganizationRecord {
            name: org.clone(),
            owner: req.username.clone(),
            created_at: now,
        };
        match d.store.create_json(&org_key(&org)?, &org_rec) {
            Ok(_) => stack.push(Undo::Org(org.clone())),
            Err(StoreError::AlreadyExists(_)) => {
                d.unwind(&mut stack)?;
                return Err(IdentityError::OrganizationExists);
            }
            Err(e) => return Err(fail(2, e.to_string(), &mut stack)),
        }
        let user = UserRecord {
            username: req.username.clone(),
            personal_info: req.personal_info.clone(),
            org: org.clone(),
            role: Role::Owner,
            created_at: now,
        };
        match d.store.create_json(&user_key(&user.username)?, &user) {
            Ok(_) => stack.push(Undo::User(user.username.clone())),
            Err(StoreError::AlreadyExists(_)) => {
                d.unwind(&mut stack)?;
                return Err(IdentityError::DuplicateUsername);
            }
            Err(e) => return Err(fail(2, e.to_string(), &mut stack)),
        }

        // 3 + 4: inheritance and the full catalog.
        if self.config.async_grants {
            let bg = self.deps.clone();
            let username = user.username.clone();
            let handle = std::thread::spawn(move || {
                let mut stack = stack;
                if let Err((step, cause)) = bg.grant_steps(&username, &org, &mut stack) {
                    let rolled_back = bg.unwind(&mut stack).is_ok();
                    bg.audit.record(
                        bg.clock.now(),
                        "registration_background_failed",
                        format!(
                            "user {username} step {step}: {cause}; rollback {}",
                            if rolled_back {
                                "complete"
                            } else {
                                "incomplete"
                            }
                        ),
                    );
                }
            });
            self.background.lock().push(handle);
        } else if let Err((step, cause)) = d.grant_steps(&user.username, &org, &mut stack) {
            return Err(fail(step, cause, &mut stack));
        }
        Ok(user)
    }

    /// Joins every background registration task started so far.
    pub fn wait_background(&self) {
        let handles: Vec<_> = std::mem::take(&mut *self.background.lock());
        for h in handles {
            let _ = h.join();
        }
    }

    /// Creates a MEMBER of `org` with no direct grants; it only inherits the
    /// organization's grants.
    pub fn add_member(
        &self,
        org: &str,
        caller: &str,
        new_username: &str,
        temp_password: &str,
    ) -> Result<UserRecord, IdentityError> {
        self.require_owner(org, caller)?;
        validate_account(new_username, temp_password)?;

        let d = &self.deps;
        let mut stack = Vec::new();
        let fail = |step: u8, cause: String, stack: &mut Vec<Undo>| -> IdentityError {
            match d.unwind(stack) {
                Ok(()) => IdentityError::MemberAddFailed { step, cause },
                Err(e) => e,
            }
        };

        match d.vault.register_credentials(new_username, temp_password) {
            Ok(_) => stack.push(Undo::Credential(new_username.to_string())),
            Err(VaultError::DuplicateUsername) => return Err(IdentityError::DuplicateUsername),
            Err(e) => return Err(fail(1, e.to_string(), &mut stack)),
        }
        let user = UserRecord {
            username: new_username.to_string(),
            personal_info: BTreeMap::new(),
            org: org.to_string(),
            role: Role::Member,
            created_at: d.clock.now(),
        };
        match d.store.create_json(&user_key(new_username)?, &user) {
            Ok(_) => stack.push(Undo::User(new_username.to_string())),
            Err(StoreError::AlreadyExists(_)) => {
                d.unwind(&mut stack)?;
                return Err(IdentityError::DuplicateUsername);
            }
            Err(e) => return Err(fail(2, e.to_string(), &mut stack)),
        }
        if let Err(e) = d.policy.add_inheritance(new_username, org) {
            return Err(fail(3, e.to_string(), &mut stack));
        }
        Ok(user)
    }

    /// Deletes the member's inheritance edge, direct grants, record and
    /// credential. Live access tokens are left alone; they stop working at
    /// the gateway because the user no longer resolves.
    pub fn remove_member(
        &self,
        org: &str,
        caller: &str,
        target: &str,
    ) -> Result<(), IdentityError> {
        self.require_owner(org, caller)?;
        if target == caller {
            return Err(IdentityError::CannotRemoveOwner);
        }
        let member = match self.get_user(target) {
            Ok(u) if u.org == org => u,
            Ok(_) | Err(IdentityError::NotFound) => return Err(IdentityError::UnknownMember),
            Err(e) => return Err(e),
        };
        if member.role == Role::Owner {
            return Err(IdentityError::CannotRemoveOwner);
        }
        let d = &self.deps;
        d.policy.remove_inheritance(target)?;
        d.policy.revoke_all(&Subject::user(target))?;
        d.store.delete(&user_key(target)?)?;
        d.vault.delete_credentials(target)?;
        Ok(())
    }

    pub fn get_user(&self, username: &str) -> Result<UserRecord, IdentityError> {
        let key = user_key(username).map_err(|_| IdentityError::NotFound)?;
        self.deps
            .store
            .get_json(&key)?
            .ok_or(IdentityError::NotFound)
    }

    pub fn get_organization(&self, name: &str) -> Result<OrganizationView, IdentityError> {
        let key = org_key(name).map_err(|_| IdentityError::NotFound)?;
        let org: OrganizationRecord = self
            .deps
            .store
            .get_json(&key)?
            .ok_or(IdentityError::NotFound)?;
        let mut members = Vec::new();
        for rec in self.deps.store.list_prefix(Namespace::Users, "")? {
            let u: UserRecord = rec.decode()?;
            if u.org == name {
                members.push(u.username);
            }
        }
        Ok(OrganizationView { org, members })
    }

    /// Ok when `caller` is the recorded owner of `org`.
    pub fn require_owner(
        &self,
        org: &str,
        caller: &str,
    ) -> Result<OrganizationRecord, IdentityError> {
        let key = org_key(org).map_err(|_| IdentityError::NotOwner)?;
        match self.deps.store.get_json::<OrganizationRecord>(&key)? {
            Some(rec) if rec.owner == caller => Ok(rec),
            _ => Err(IdentityError::NotOwner),
        }
    }
}

fn validate_account(username: &str, password: &str) -> Result<(), IdentityError> {
    if !is_slug(username) {
        return Err(IdentityError::InvalidUsername);
    }
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(IdentityError::WeakPassword);
    }
    Ok(())
}

fn user_key(username: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(Namespace::Users, username)
}

fn org_key(name: &str) -> Result<StoreKey, StoreError> {
    StoreKey::new(Namespace::Orgs, name)
}
