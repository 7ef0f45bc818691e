//! Demo configuration service standing in for the platform backend that
//! receives `PutStandaloneConfig`.
//!
//! In its default mode the service never talks to the vault, identity or
//! policy: the permission JWT is its only authorization input.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::clock::{SharedClock, Timestamp};
use crate::http::{match_path, Backend, Request, Response, TransportError, X_USERNAME};
use crate::policy::{CheckRequest, PolicyService};
use crate::services::{bad_request, request_id, PermissionGate};
use crate::store::{Namespace, SharedStore, StoreError, StoreExt, StoreKey};

pub const CONFIG_PATTERN: &str = "/api/v1/configs/{namespace}/{name}";
pub const X_CONFIG_VERSION: &str = "x-config-version";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub namespace: String,
    pub name: String,
    /// Base64 of the raw payload.
    pub payload: String,
    pub version: u64,
    pub created_by: String,
    pub created_at: Timestamp,
}

impl ConfigEntry {
    pub fn payload_bytes(&self) -> Vec<u8> {
        STANDARD.decode(&self.payload).unwrap_or_default()
    }
}

/// Persisted form; the version is the store record's own version.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    namespace: String,
    name: String,
    payload: String,
    created_by: String,
    created_at: Timestamp,
}

impl StoredConfig {
    fn with_version(self, version: u64) -> ConfigEntry {
        ConfigEntry {
            namespace: self.namespace,
            name: self.name,
            payload: self.payload,
            version,
            created_by: self.created_by,
            created_at: self.created_at,
        }
    }
}

/// Body of a successful put.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigReceipt {
    pub namespace: String,
    pub name: String,
    pub version: u64,
    pub created_by: String,
    pub created_at: Timestamp,
}

/// How the service decides whether a caller may act.
pub enum IngressAuth {
    /// Verify the permission JWT and read permissions from it.
    PermissionToken(PermissionGate),
    /// Read the username from a plain header and ask the policy engine.
    /// Only the benchmark's without-IAM baseline uses this.
    PolicyLookup(Arc<dyn PolicyService>),
}

impl IngressAuth {
    /// The caller's username when it may use `name`, else the refusal.
    pub fn authorize(&self, req: &Request, name: &str) -> Result<String, Response> {
        match self {
            Self::PermissionToken(gate) => gate.authorize(req, name).map(|c| c.sub),
            Self::PolicyLookup(policy) => {
                let rid = request_id(req);
                let Some(user) = req.header(X_USERNAME) else {
                    return Err(Response::error(401, "MissingIdentity", "no username", &rid));
                };
                let decision = policy.check(&CheckRequest {
                    user: user.to_string(),
                    name: name.to_string(),
                });
                if decision.is_allow() {
                    Ok(user.to_string())
                } else {
                    Err(Response::error(
                        403,
                        "PermissionAbsent",
                        format!("missing permission {name}"),
                        &rid,
                    ))
                }
            }
        }
    }
}

pub struct ConfigService {
    store: SharedStore,
    clock: SharedClock,
    auth: IngressAuth,
    invocations: AtomicU64,
}

impl ConfigService {
    pub fn new(store: SharedStore, clock: SharedClock, auth: IngressAuth) -> Self {
        Self {
            store,
            clock,
            auth,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::SeqCst);
    }

    pub fn handle(&self, req: &Request) -> Response {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let Some(vars) = match_path(CONFIG_PATTERN, req.route_path()) else {
            return Response::error(
                404,
                "UnknownRoute",
                "no such config endpoint",
                &request_id(req),
            );
        };
        let (ns, name) = (vars[0].1, vars[1].1);
        if !is_config_segment(ns) || !is_config_segment(name) {
            return bad_request(req, "namespace and name must match [A-Za-z0-9._-]+");
        }
        match req.method.as_str() {
            "PUT" => self.put_standalone_config(req, ns, name),
            "GET" => self.get_config(req, ns, name),
            _ => Response::error(405, "MethodNotAllowed", "use PUT or GET", &request_id(req)),
        }
    }

    fn authorize(&self, req: &Request, name: &str) -> Result<String, Response> {
        self.auth.authorize(req, name)
    }

    pub fn put_standalone_config(&self, req: &Request, ns: &str, name: &str) -> Response {
        let user = match self.authorize(req, "config.put") {
            Ok(u) => u,
            Err(r) => return r,
        };
        let stored = StoredConfig {
            namespace: ns.to_string(),
            name: name.to_string(),
            payload: STANDARD.encode(&req.body),
            created_by: user,
            created_at: self.clock.now(),
        };
        match self.store.put_json(&config_key(ns, name), &stored) {
            Ok(version) => {
                let mut resp = Response::json(
                    201,
                    &ConfigReceipt {
                        namespace: stored.namespace,
                        name: stored.name,
                        version,
                        created_by: stored.created_by,
                        created_at: stored.created_at,
                    },
                );
                resp.headers
                    .insert(X_CONFIG_VERSION.into(), version.to_string());
                resp
            }
            Err(e) => Response::error(500, "Internal", e.to_string(), &request_id(req)),
        }
    }

    pub fn get_config(&self, req: &Request, ns: &str, name: &str) -> Response {
        if let Err(r) = self.authorize(req, "config.get") {
            return r;
        }
        match self.load(&config_key(ns, name)) {
            Ok(Some(entry)) => {
                let mut resp = Response::empty(200);
                resp.headers
                    .insert(X_CONFIG_VERSION.into(), entry.version.to_string());
                resp.headers
                    .insert("content-type".into(), "application/octet-stream".into());
                resp.body = entry.payload_bytes();
                resp
            }
            Ok(None) => Response::error(404, "NotFound", "no such configuration", &request_id(req)),
            Err(e) => Response::error(500, "Internal", e.to_string(), &request_id(req)),
        }
    }

    pub fn entry(&self, ns: &str, name: &str) -> Option<ConfigEntry> {
        self.load(&config_key(ns, name)).ok().flatten()
    }

    /// All stored entries, ordered by key.
    pub fn entries(&self) -> Vec<ConfigEntry> {
        self.store
            .list_prefix(Namespace::Configs, "")
            .map(|recs| {
                recs.iter()
                    .filter_map(|r| Some(r.decode::<StoredConfig>().ok()?.with_version(r.version)))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn load(&self, key: &StoreKey) -> Result<Option<ConfigEntry>, StoreError> {
        match self.store.get(key)? {
            Some(rec) => Ok(Some(
                rec.decode::<StoredConfig>()?.with_version(rec.version),
            )),
            None => Ok(None),
        }
    }
}

impl Backend for ConfigService {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        Ok(self.handle(&req))
    }
}

fn is_config_segment(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn config_key(ns: &str, name: &str) -> StoreKey {
    StoreKey::new(Namespace::Configs, format!("{ns}:{name}")).expect("validated segments")
}
