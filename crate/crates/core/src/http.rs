//! Transport-neutral request/response messages.
//!
//! The gateway and every backend speak these types. They serialize to JSON
//! (body as base64) so the same message crosses an in-process call, a
//! channel, or an HTTP hop unchanged.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const AUTHORIZATION: &str = "authorization";
pub const X_PERMISSION_TOKEN: &str = "x-permission-token";
pub const X_REQUEST_ID: &str = "x-request-id";
/// Plain username header used only by the benchmark's without-IAM flow.
pub const X_USERNAME: &str = "x-username";
pub const CONTENT_TYPE: &str = "content-type";

/// Header names are stored lowercase.
pub type Headers = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub headers: Headers,
    #[serde(default, with = "b64")]
    pub body: Vec<u8>,
}

/// A request after the gateway has authorized it: the original method, path
/// and body plus `x-permission-token` and `x-request-id`.
pub type ForwardedRequest = Request;

impl Request {
    pub fn new(method: &str, path: &str) -> Self {
        Self {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.into());
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn with_json<T: Serialize>(self, value: &T) -> Self {
        self.with_header(CONTENT_TYPE, "application/json")
            .with_body(serde_json::to_vec(value).expect("json body"))
    }

    pub fn bearer(self, token: &str) -> Self {
        self.with_header(AUTHORIZATION, format!("Bearer {token}"))
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).map(String::as_str)
    }

    /// The token from `Authorization: Bearer <token>`, if well-formed.
    pub fn bearer_token(&self) -> Option<&str> {
        let v = self.header(AUTHORIZATION)?;
        let (scheme, token) = v.split_once(' ')?;
        let token = token.trim();
        (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then_some(token)
    }

    /// Path without any query string.
    pub fn route_path(&self) -> &str {
        self.path.split('?').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    #[serde(default)]
    pub headers: Headers,
    #[serde(default, with = "b64")]
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub code: String,
    pub request_id: String,
}

impl Response {
    pub fn empty(status: u16) -> Self {
        Self {
            status,
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        let mut r = Self::empty(status);
        r.headers
            .insert(CONTENT_TYPE.into(), "application/json".into());
        r.body = serde_json::to_vec(value).expect("json body");
        r
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>, request_id: &str) -> Self {
        Self::json(
            status,
            &ErrorBody {
                error: message.into(),
                code: code.to_string(),
                request_id: request_id.to_string(),
            },
        )
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn error_body(&self) -> Option<ErrorBody> {
        serde_json::from_slice(&self.body).ok()
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

/// Anything that can serve a request: a service, a remote hop, the gateway.
pub trait Backend: Send + Sync {
    fn call(&self, req: Request) -> Result<Response, TransportError>;
}

impl<F> Backend for F
where
    F: Fn(Request) -> Response + Send + Sync,
{
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        Ok(self(req))
    }
}

/// Matches `path` against a pattern with `{var}` segments. Returns the
/// captured variables in order.
pub fn match_path<'a>(pattern: &'a str, path: &'a str) -> Option<Vec<(&'a str, &'a str)>> {
    let mut pat = pattern.trim_end_matches('/').split('/');
    let mut segs = path.trim_end_matches('/').split('/');
    let mut vars = Vec::new();
    loop {
        match (pat.next(), segs.next()) {
            (None, None) => return Some(vars),
            (Some(p), Some(s)) => {
                if let Some(name) = p.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
                    if s.is_empty() {
                        return None;
                    }
                    vars.push((name, s));
                } else if p != s {
                    return None;
                }
            }
            _ => return None,
        }
    }
}

mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}
