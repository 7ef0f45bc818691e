//! Internal services behind the gateway.
//!
//! [`AuthService`] serves the public auth endpoints. [`AdminService`] serves
//! member and permission administration and, like every protected service,
//! trusts nothing but the permission JWT the gateway attached.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::http::{
    match_path, Backend, Request, Response, TransportError, X_PERMISSION_TOKEN, X_REQUEST_ID,
};
use crate::identity::{Identity, IdentityError, RegistrationRequest, Role};
use crate::policy::{PermissionKind, PolicyEngine, PolicyError, Subject, SubjectKind};
use crate::ptoken::{self, PermissionClaims, PtokenError, ReplayGuard};
use crate::vault::{TokenRejection, Vault, VaultError};

pub(crate) fn request_id(req: &Request) -> String {
    req.header(X_REQUEST_ID).unwrap_or_default().to_string()
}

pub(crate) fn bad_request(req: &Request, msg: impl Into<String>) -> Response {
    Response::error(400, "BadRequest", msg, &request_id(req))
}

fn parse_json<'a, T: Deserialize<'a>>(req: &'a Request) -> Result<T, Response> {
    serde_json::from_slice(&req.body)
        .map_err(|e| bad_request(req, format!("invalid JSON body: {e}")))
}

/// Verifies the permission JWT on an incoming request and checks that it
/// carries `name` with kind ALLOW.
pub struct PermissionGate {
    key: [u8; 32],
    clock: SharedClock,
    replay: Option<ReplayGuard>,
}

impl PermissionGate {
    pub fn new(key: [u8; 32], clock: SharedClock, replay_strict: bool) -> Self {
        Self {
            key,
            clock,
            replay: replay_strict.then(ReplayGuard::default),
        }
    }

    pub fn authorize(&self, req: &Request, name: &str) -> Result<PermissionClaims, Response> {
        let rid = request_id(req);
        let Some(jwt) = req.header(X_PERMISSION_TOKEN) else {
            return Err(Response::error(
                401,
                "MissingPermissionToken",
                "no permission token",
                &rid,
            ));
        };
        let now = self.clock.now();
        let claims = ptoken::verify(jwt, &self.key, now).map_err(|e| {
            let code = match e {
                PtokenError::BadSignature => "BadSignature",
                PtokenError::TokenExpired => "TokenExpired",
                _ => "MalformedToken",
            };
            tracing::info!(target: "audit", code, request_id = %rid, "permission token refused");
            Response::error(401, code, "permission token refused", &rid)
        })?;
        if let Some(guard) = &self.replay {
            if !guard.admit(&claims, now) {
                return Err(Response::error(
                    401,
                    "TokenReplayed",
                    "permission token already used",
                    &rid,
                ));
            }
        }
        if !claims.allows(name) {
            return Err(Response::error(
                403,
                "PermissionAbsent",
                format!("missing permission {name}"),
                &rid,
            ));
        }
        Ok(claims)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginResponse {
    pub access_token: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CredentialsUpdate {
    pub old_password: String,
    pub new_password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberRequest {
    pub username: String,
    pub temp_password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrantRequest {
    /// `user:<name>` or `org:<name>`.
    pub subject: String,
    pub name: String,
    pub kind: PermissionKind,
}

pub(crate) fn identity_error(req: &Request, e: &IdentityError) -> Response {
    let (status, code) = match e {
        IdentityError::InvalidUsername => (400, "InvalidUsername"),
        IdentityError::WeakPassword => (400, "WeakPassword"),
        IdentityError::InvalidOrganization => (400, "InvalidOrganization"),
        IdentityError::DuplicateUsername => (409, "DuplicateUsername"),
        IdentityError::OrganizationExists => (409, "OrganizationExists"),
        IdentityError::NotOwner => (403, "NotOwner"),
        IdentityError::CannotRemoveOwner => (409, "CannotRemoveOwner"),
        IdentityError::UnknownMember => (404, "UnknownMember"),
        IdentityError::NotFound => (404, "NotFound"),
        IdentityError::RegistrationFailed { .. } => (500, "RegistrationFailed"),
        IdentityError::MemberAddFailed { .. } => (500, "MemberAddFailed"),
        IdentityError::RollbackFailed { .. } => (500, "RollbackFailed"),
        IdentityError::Vault(VaultError::DuplicateUsername) => (409, "DuplicateUsername"),
        IdentityError::Store(_) | IdentityError::Policy(_) | IdentityError::Vault(_) => {
            (500, "Internal")
        }
    };
    Response::error(status, code, e.to_string(), &request_id(req))
}

pub struct AuthService {
    identity: Arc<Identity>,
    vault: Arc<Vault>,
}

impl AuthService {
    pub fn new(identity: Arc<Identity>, vault: Arc<Vault>) -> Self {
        Self { identity, vault }
    }

    pub fn handle(&self, req: &Request) -> Response {
        match (req.method.as_str(), req.route_path()) {
            ("POST", "/api/v1/auth/register") => self.register(req),
            ("POST", "/api/v1/auth/login") => self.login(req),
            ("PUT", "/api/v1/auth/credentials") => self.update_credentials(req),
            _ => Response::error(
                404,
                "UnknownRoute",
                "no such auth endpoint",
                &request_id(req),
            ),
        }
    }

    fn register(&self, req: &Request) -> Response {
        let body: RegistrationRequest = match parse_json(req) {
            Ok(b) => b,
            Err(r) => return r,
        };
        match self.identity.register_user(&body) {
            Ok(user) => Response::json(201, &user),
            Err(e) => identity_error(req, &e),
        }
    }

    fn login(&self, req: &Request) -> Response {
        let body: LoginRequest = match parse_json(req) {
            Ok(b) => b,
            Err(r) => return r,
        };
        match self.vault.authenticate(&body.username, &body.password) {
            Ok(tok) => Response::json(
                200,
                &LoginResponse {
                    access_token: tok.token_value,
                    expires_at: tok.expires_at,
                },
            ),
            Err(VaultError::InvalidCredentials) => Response::error(
                401,
                "InvalidCredentials",
                "invalid username or password",
                &request_id(req),
            ),
            Err(e) => Response::error(500, "Internal", e.to_string(), &request_id(req)),
        }
    }

    fn update_credentials(&self, req: &Request) -> Response {
        let rid = request_id(req);
        let Some(token) = req.bearer_token() else {
            return Response::error(401, "MissingToken", "missing bearer access token", &rid);
        };
        let subject = match self.vault.verify_token(token) {
            Ok(v) => v.subject,
            Err(TokenRejection::Invalid) => {
                return Response::error(401, "InvalidToken", "access token is not valid", &rid)
            }
            Err(TokenRejection::Expired) => {
                return Response::error(401, "ExpiredToken", "access token has expired", &rid)
            }
        };
        let body: CredentialsUpdate = match parse_json(req) {
            Ok(b) => b,
            Err(r) => return r,
        };
        match self
            .vault
            .update_password(&subject, &body.old_password, &body.new_password)
        {
            Ok(()) => Response::empty(204),
            Err(VaultError::InvalidCredentials) => Response::error(
                401,
                "InvalidCredentials",
                "old password does not match",
                &rid,
            ),
            Err(VaultError::WeakPassword) => Response::error(
                400,
                "WeakPassword",
                VaultError::WeakPassword.to_string(),
                &rid,
            ),
            Err(e) => Response::error(500, "Internal", e.to_string(), &rid),
        }
    }
}

impl Backend for AuthService {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        Ok(self.handle(&req))
    }
}

/// Member and permission administration inside one organization. Callers
/// must own the organization on top of holding the route's permission.
pub struct AdminService {
    identity: Arc<Identity>,
    policy: Arc<PolicyEngine>,
    gate: PermissionGate,
}

impl AdminService {
    pub fn new(identity: Arc<Identity>, policy: Arc<PolicyEngine>, gate: PermissionGate) -> Self {
        Self {
            identity,
            policy,
            gate,
        }
    }

    pub fn handle(&self, req: &Request) -> Response {
        let path = req.route_path();
        if let Some(v) = match_path("/api/v1/orgs/{org}/members", path) {
            if req.method == "POST" {
                return self.add_member(req, v[0].1);
            }
        }
        if let Some(v) = match_path("/api/v1/orgs/{org}/members/{username}", path) {
            if req.method == "DELETE" {
                return self.remove_member(req, v[0].1, v[1].1);
            }
        }
        if let Some(v) = match_path("/api/v1/orgs/{org}/permissions", path) {
            match req.method.as_str() {
                "POST" => return self.change_grant(req, v[0].1, true),
                "DELETE" => return self.change_grant(req, v[0].1, false),
                _ => {}
            }
        }
        Response::error(
            404,
            "UnknownRoute",
            "no such admin endpoint",
            &request_id(req),
        )
    }

    fn add_member(&self, req: &Request, org: &str) -> Response {
        let claims = match self.gate.authorize(req, "org.member.add") {
            Ok(c) => c,
            Err(r) => return r,
        };
        let body: MemberRequest = match parse_json(req) {
            Ok(b) => b,
            Err(r) => return r,
        };
        match self
            .identity
            .add_member(org, &claims.sub, &body.username, &body.temp_password)
        {
            Ok(user) => Response::json(201, &user),
            Err(e) => identity_error(req, &e),
        }
    }

    fn remove_member(&self, req: &Request, org: &str, username: &str) -> Response {
        let claims = match self.gate.authorize(req, "org.member.remove") {
            Ok(c) => c,
            Err(r) => return r,
        };
        match self.identity.remove_member(org, &claims.sub, username) {
            Ok(()) => Response::empty(204),
            Err(e) => identity_error(req, &e),
        }
    }

    fn change_grant(&self, req: &Request, org: &str, grant: bool) -> Response {
        let needed = if grant {
            "org.perm.grant"
        } else {
            "org.perm.revoke"
        };
        let claims = match self.gate.authorize(req, needed) {
            Ok(c) => c,
            Err(r) => return r,
        };
        let body: GrantRequest = match parse_json(req) {
            Ok(b) => b,
            Err(r) => return r,
        };
        let subject: Subject = match body.subject.parse() {
            Ok(s) => s,
            Err(msg) => return bad_request(req, msg),
        };
        if let Err(e) = self.identity.require_owner(org, &claims.sub) {
            return identity_error(req, &e);
        }
        // Owners administer their own organization only.
        let in_org = match subject.kind {
            SubjectKind::Org => subject.id == org,
            SubjectKind::User => self
                .identity
                .get_user(&subject.id)
                .map(|u| u.org == org && (u.role == Role::Member || u.role == Role::Owner))
                .unwrap_or(false),
        };
        if !in_org {
            return Response::error(
                404,
                "UnknownSubject",
                format!("{subject} is not part of {org}"),
                &request_id(req),
            );
        }
        let result = if grant {
            self.policy
                .grant(&subject, &body.name, body.kind)
                .map(|p| Response::json(201, &p))
        } else {
            self.policy
                .revoke(&subject, &body.name, body.kind)
                .map(|_| Response::empty(204))
        };
        result.unwrap_or_else(|e| {
            let (status, code) = match e {
                PolicyError::UnknownSubject(_) => (404, "UnknownSubject"),
                PolicyError::MalformedName(_) => (400, "MalformedName"),
                _ => (500, "Internal"),
            };
            Response::error(status, code, e.to_string(), &request_id(req))
        })
    }
}

impl Backend for AdminService {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        Ok(self.handle(&req))
    }
}
