//! Edge proxy. Every external request passes through [`Gateway::handle`]:
//!
//! 1. match a route, else 404;
//! 2. public routes (register, login, credentials) go straight to their service;
//! 3. take the Bearer access token, else 401;
//! 4. verify it at the vault, 401 when unknown or expired;
//! 5. fetch the caller's effective permissions and check the route's
//!    required one, 403 on DENY without touching any backend;
//! 6. mint a permission JWT from that same permission set;
//! 7. forward with `x-permission-token`, without `authorization`;
//! 8. relay the backend response as is.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::http::{
    match_path, Backend, Request, Response, AUTHORIZATION, X_PERMISSION_TOKEN, X_REQUEST_ID,
    X_USERNAME,
};
use crate::policy::{ListRequest, PermissionKind, PolicyError, PolicyService, SYSTEM_PERMISSIONS};
use crate::ptoken;
use crate::vault::{SigningKey, TokenRejection, Vault};

pub const DEFAULT_ROUTES: &str = include_str!("../assets/routes.json");
pub const NO_PERMISSION: &str = "NONE";

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("route table: {0}")]
    ConfigParse(String),
    #[error("reading route table: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub method: String,
    pub path_pattern: String,
    pub target: String,
    /// A catalog permission name, or `NONE` for public endpoints.
    pub required_permission: String,
}

impl Route {
    pub fn required(&self) -> Option<&str> {
        (self.required_permission != NO_PERMISSION).then_some(self.required_permission.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RouteTable {
    routes: Vec<Route>,
}

impl RouteTable {
    pub fn parse(json: &str) -> Result<Self, GatewayError> {
        if json.trim().is_empty() {
            return Ok(Self::default());
        }
        let routes: Vec<Route> =
            serde_json::from_str(json).map_err(|e| GatewayError::ConfigParse(e.to_string()))?;
        for (i, r) in routes.iter().enumerate() {
            if !r.path_pattern.starts_with('/') || r.target.is_empty() {
                return Err(GatewayError::ConfigParse(format!(
                    "route {i}: bad pattern or empty target"
                )));
            }
            if let Some(p) = r.required() {
                if !SYSTEM_PERMISSIONS.contains(&p) {
                    return Err(GatewayError::ConfigParse(format!(
                        "route {i}: unknown permission {p:?}"
                    )));
                }
            }
            for (j, other) in routes[..i].iter().enumerate() {
                if other.method.eq_ignore_ascii_case(&r.method)
                    && patterns_overlap(&other.path_pattern, &r.path_pattern)
                {
                    return Err(GatewayError::ConfigParse(format!(
                        "routes {j} and {i} both match {} {}",
                        r.method, r.path_pattern
                    )));
                }
            }
        }
        Ok(Self { routes })
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_ROUTES).expect("bundled route table is valid")
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn find(&self, req: &Request) -> Option<&Route> {
        let path = req.route_path();
        self.routes.iter().find(|r| {
            r.method.eq_ignore_ascii_case(&req.method)
                && match_path(&r.path_pattern, path).is_some()
        })
    }
}

/// Two patterns overlap when some concrete path matches both.
fn patterns_overlap(a: &str, b: &str) -> bool {
    let a: Vec<&str> = a.trim_end_matches('/').split('/').collect();
    let b: Vec<&str> = b.trim_end_matches('/').split('/').collect();
    let is_var = |s: &str| s.starts_with('{') && s.ends_with('}');
    a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|(x, y)| x == y || is_var(x) || is_var(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatewayMode {
    /// Full pipeline: authenticate, authorize, mint, forward.
    EdgeAuthorization,
    /// Authenticate only and forward the username in a plain header; the
    /// services authorize for themselves. Used as the benchmark baseline.
    PassThrough,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayCounters {
    pub requests: u64,
    pub forwarded: u64,
    pub policy_calls: u64,
    pub rejected: u64,
}

pub struct Gateway {
    routes: RwLock<Arc<RouteTable>>,
    vault: Arc<Vault>,
    policy: Arc<dyn PolicyService>,
    key: SigningKey,
    clock: SharedClock,
    perm_ttl: u64,
    mode: GatewayMode,
    backends: HashMap<String, Arc<dyn Backend>>,
    requests: AtomicU64,
    forwarded: AtomicU64,
    policy_calls: AtomicU64,
    rejected: AtomicU64,
}

pub struct GatewayBuilder {
    vault: Arc<Vault>,
    policy: Arc<dyn PolicyService>,
    key: SigningKey,
    clock: SharedClock,
    perm_ttl: u64,
    mode: GatewayMode,
    routes: RouteTable,
    backends: HashMap<String, Arc<dyn Backend>>,
}

impl GatewayBuilder {
    pub fn perm_ttl(mut self, secs: u64) -> Self {
        self.perm_ttl = secs;
        self
    }

    pub fn mode(mut self, mode: GatewayMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn routes(mut self, routes: RouteTable) -> Self {
        self.routes = routes;
        self
    }

    pub fn backend(mut self, target: &str, backend: Arc<dyn Backend>) -> Self {
        self.backends.insert(target.to_string(), backend);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            routes: RwLock::new(Arc::new(self.routes)),
            vault: self.vault,
            policy: self.policy,
            key: self.key,
            clock: self.clock,
            perm_ttl: self.perm_ttl,
            mode: self.mode,
            backends: self.backends,
            requests: AtomicU64::new(0),
            forwarded: AtomicU64::new(0),
            policy_calls: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
        }
    }
}

impl Gateway {
    pub fn builder(
        vault: Arc<Vault>,
        policy: Arc<dyn PolicyService>,
        key: SigningKey,
        clock: SharedClock,
    ) -> GatewayBuilder {
        GatewayBuilder {
            vault,
            policy,
            key,
            clock,
            perm_ttl: ptoken::DEFAULT_PERM_TTL,
            mode: GatewayMode::EdgeAuthorization,
            routes: RouteTable::bundled(),
            backends: HashMap::new(),
        }
    }

    /// Replaces the route table. On error the current table stays in place.
    pub fn load_routes(&self, path: impl AsRef<Path>) -> Result<usize, GatewayError> {
        let text = std::fs::read_to_string(path)?;
        self.load_routes_str(&text)
    }

    pub fn load_routes_str(&self, json: &str) -> Result<usize, GatewayError> {
        let table = RouteTable::parse(json)?;
        let n = table.len();
        *self.routes.write() = Arc::new(table);
        Ok(n)
    }

    pub fn route_table(&self) -> Arc<RouteTable> {
        self.routes.read().clone()
    }

    pub fn counters(&self) -> GatewayCounters {
        GatewayCounters {
            requests: self.requests.load(Ordering::SeqCst),
            forwarded: self.forwarded.load(Ordering::SeqCst),
            policy_calls: self.policy_calls.load(Ordering::SeqCst),
            rejected: self.rejected.load(Ordering::SeqCst),
        }
    }

    pub fn reset_counters(&self) {
        for c in [
            &self.requests,
            &self.forwarded,
            &self.policy_calls,
            &self.rejected,
        ] {
            c.store(0, Ordering::SeqCst);
        }
    }

    pub fn handle(&self, mut req: Request) -> Response {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let request_id = uuid::Uuid::new_v4().to_string();
        let reject = |status: u16, code: &str, msg: &str| {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            tracing::debug!(status, code, request_id = %request_id, "rejected");
            Response::error(status, code, msg, &request_id)
        };

        // The table is cloned out so a concurrent reload cannot split a request.
        let table = self.route_table();
        let Some(route) = table.find(&req) else {
            return reject(404, "UnknownRoute", "no route for this method and path");
        };
        req.headers.remove(X_PERMISSION_TOKEN);
        req.headers.remove(X_USERNAME);
        req.headers
            .insert(X_REQUEST_ID.to_string(), request_id.clone());

        let Some(required) = route.required() else {
            return self.forward(&route.target, req, &request_id);
        };

        let Some(token) = req.bearer_token() else {
            return reject(401, "MissingToken", "missing bearer access token");
        };
        let subject = match self.vault.verify_token(token) {
            Ok(v) => v.subject,
            Err(TokenRejection::Invalid) => {
                return reject(401, "InvalidToken", "access token is not valid")
            }
            Err(TokenRejection::Expired) => {
                return reject(401, "ExpiredToken", "access token has expired")
            }
        };
        req.headers.remove(AUTHORIZATION);

        if self.mode == GatewayMode::PassThrough {
            req.headers.insert(X_USERNAME.to_string(), subject);
            return self.forward(&route.target, req, &request_id);
        }

        self.policy_calls.fetch_add(1, Ordering::Relaxed);
        let perms = match self.policy.list(&ListRequest {
            user: subject.clone(),
        }) {
            Ok(list) => list,
            // The account was removed after the token was issued.
            Err(PolicyError::UnknownSubject(_)) => {
                return reject(401, "InvalidToken", "account no longer exists")
            }
            Err(e) => {
                tracing::error!(error = %e, "policy lookup failed");
                return reject(502, "BackendUnavailable", "policy service unavailable");
            }
        };
        if perms.decide(required) == PermissionKind::Deny {
            return reject(
                403,
                "PermissionDenied",
                &format!("missing permission {required}"),
            );
        }

        let jwt = ptoken::mint(
            &subject,
            &perms.permissions,
            &self.key.key_bytes,
            self.clock.now(),
            self.perm_ttl,
        );
        req.headers.insert(X_PERMISSION_TOKEN.to_string(), jwt);
        self.forward(&route.target, req, &request_id)
    }

    fn forward(&self, target: &str, req: Request, request_id: &str) -> Response {
        let Some(backend) = self.backends.get(target) else {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return Response::error(
                502,
                "BackendUnavailable",
                "no backend for route",
                request_id,
            );
        };
        self.forwarded.fetch_add(1, Ordering::Relaxed);
        match backend.call(req) {
            Ok(resp) => resp,
            Err(e) => {
                tracing::warn!(target, error = %e, "backend call failed");
                Response::error(502, "BackendUnavailable", "backend unavailable", request_id)
            }
        }
    }
}

impl Backend for Gateway {
    fn call(&self, req: Request) -> Result<Response, crate::http::TransportError> {
        Ok(self.handle(req))
    }
}
