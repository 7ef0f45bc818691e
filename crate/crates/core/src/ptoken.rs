//! Per-request permission token: an HS256 JWT carrying the username and the
//! caller's effective permissions, each encoded as `name|KIND|id`.

use std::collections::HashMap;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::clock::Timestamp;
use crate::policy::{Permission, PermissionKind};

pub const DEFAULT_PERM_TTL: u64 = 5;
pub const HEADER_JSON: &str = r#"{"alg":"HS256","typ":"JWT"}"#;
pub const DELIMITER: char = '|';

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PtokenError {
    #[error("malformed permission string {0:?}")]
    MalformedPermissionString(String),
    #[error("malformed token")]
    MalformedToken,
    #[error("bad signature")]
    BadSignature,
    #[error("token expired")]
    TokenExpired,
}

/// JWT payload. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionClaims {
    pub sub: String,
    pub iat: Timestamp,
    pub exp: Timestamp,
    pub jti: String,
    pub permissions: Vec<String>,
}

impl PermissionClaims {
    pub fn decode_permissions(&self) -> Result<Vec<Permission>, PtokenError> {
        self.permissions
            .iter()
            .map(|s| decode_permission(s))
            .collect()
    }

    /// True when some entry names `name` with kind ALLOW. Malformed entries
    /// never authorize anything.
    pub fn allows(&self, name: &str) -> bool {
        self.permissions
            .iter()
            .filter_map(|s| decode_permission(s).ok())
            .any(|p| p.name == name && p.kind == PermissionKind::Allow)
    }
}

pub fn encode_permission(p: &Permission) -> String {
    format!("{}{DELIMITER}{}{DELIMITER}{}", p.name, p.kind, p.id)
}

pub fn decode_permission(s: &str) -> Result<Permission, PtokenError> {
    let bad = || PtokenError::MalformedPermissionString(s.to_string());
    let mut parts = s.split(DELIMITER);
    let (Some(name), Some(kind), Some(id), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(bad());
    };
    if name.is_empty() || id.is_empty() {
        return Err(bad());
    }
    Ok(Permission {
        id: id.to_string(),
        name: name.to_string(),
        kind: kind.parse().map_err(|_| bad())?,
    })
}

/// Builds claims for `user` with a fresh `jti`.
pub fn claims_for(user: &str, perms: &[Permission], now: Timestamp, ttl: u64) -> PermissionClaims {
    PermissionClaims {
        sub: user.to_string(),
        iat: now,
        exp: now + ttl,
        jti: uuid::Uuid::new_v4().to_string(),
        permissions: perms.iter().map(encode_permission).collect(),
    }
}

pub fn mint(user: &str, perms: &[Permission], key: &[u8; 32], now: Timestamp, ttl: u64) -> String {
    sign(&claims_for(user, perms, now, ttl), key)
}

/// Compact serialization of `claims` signed with `key`. Deterministic.
pub fn sign(claims: &PermissionClaims, key: &[u8; 32]) -> String {
    let payload = serde_json::to_vec(claims).expect("claims serialize");
    let mut out = URL_SAFE_NO_PAD.encode(HEADER_JSON);
    out.push('.');
    out.push_str(&URL_SAFE_NO_PAD.encode(payload));
    let sig = mac(key, out.as_bytes()).finalize().into_bytes();
    out.push('.');
    out.push_str(&URL_SAFE_NO_PAD.encode(sig));
    out
}

/// Checks structure, then signature (constant time), then expiry. The token
/// is valid while `now < exp`.
pub fn verify(jwt: &str, key: &[u8; 32], now: Timestamp) -> Result<PermissionClaims, PtokenError> {
    let mut parts = jwt.split('.');
    let (Some(h), Some(p), Some(s), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return Err(PtokenError::MalformedToken);
    };
    let sig = URL_SAFE_NO_PAD
        .decode(s)
        .map_err(|_| PtokenError::MalformedToken)?;
    let signing_input = &jwt[..h.len() + 1 + p.len()];
    mac(key, signing_input.as_bytes())
        .verify_slice(&sig)
        .map_err(|_| PtokenError::BadSignature)?;

    let header = URL_SAFE_NO_PAD
        .decode(h)
        .map_err(|_| PtokenError::MalformedToken)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header).map_err(|_| PtokenError::MalformedToken)?;
    if header.get("alg").and_then(|v| v.as_str()) != Some("HS256") {
        return Err(PtokenError::MalformedToken);
    }
    let payload = URL_SAFE_NO_PAD
        .decode(p)
        .map_err(|_| PtokenError::MalformedToken)?;
    let claims: PermissionClaims =
        serde_json::from_slice(&payload).map_err(|_| PtokenError::MalformedToken)?;
    if now >= claims.exp {
        return Err(PtokenError::TokenExpired);
    }
    Ok(claims)
}

fn mac(key: &[u8; 32], data: &[u8]) -> HmacSha256 {
    let mut m = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(data);
    m
}

/// Optional strict mode: remembers every `jti` until its token expires and
/// refuses a second presentation.
#[derive(Debug, Default)]
pub struct ReplayGuard {
    seen: Mutex<HashMap<String, Timestamp>>,
}

impl ReplayGuard {
    /// Returns false if `claims.jti` was already presented and has not expired.
    pub fn admit(&self, claims: &PermissionClaims, now: Timestamp) -> bool {
        let mut seen = self.seen.lock();
        seen.retain(|_, exp| *exp > now);
        if seen.contains_key(&claims.jti) {
            return false;
        }
        seen.insert(claims.jti.clone(), claims.exp);
        true
    }

    pub fn len(&self) -> usize {
        self.seen.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    const KEY: [u8; 32] = [0x0b; 32];
    const T: Timestamp = 1_700_000_000;

    fn perm(name: &str, kind: PermissionKind, id: &str) -> Permission {
        Permission {
            id: id.into(),
            name: name.into(),
            kind,
        }
    }

    fn decode_payload(jwt: &str) -> serde_json::Value {
        let p = jwt.split('.').nth(1).unwrap();
        serde_json::from_slice(&URL_SAFE_NO_PAD.decode(p).unwrap()).unwrap()
    }

    #[test]
    fn encode_decode_examples() {
        let p = perm("config.put", PermissionKind::Allow, "p1");
        assert_eq!(encode_permission(&p), "config.put|ALLOW|p1");
        assert_eq!(decode_permission("config.put|ALLOW|p1").unwrap(), p);
        for bad in [
            "config.put|MAYBE|p1",
            "config.put|ALLOW",
            "config.put|ALLOW|p1|x",
            "|ALLOW|p1",
            "config.put|ALLOW|",
            "",
        ] {
            assert!(
                matches!(
                    decode_permission(bad),
                    Err(PtokenError::MalformedPermissionString(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn mint_empty_permissions() {
        let jwt = mint("alice", &[], &KEY, T, DEFAULT_PERM_TTL);
        let payload = decode_payload(&jwt);
        assert_eq!(payload["sub"], "alice");
        assert_eq!(payload["permissions"], serde_json::json!([]));
        assert_eq!(payload["exp"], T + 5);
        let header = URL_SAFE_NO_PAD
            .decode(jwt.split('.').next().unwrap())
            .unwrap();
        assert_eq!(header, HEADER_JSON.as_bytes());
    }

    #[test]
    fn mint_one_permission() {
        let jwt = mint(
            "alice",
            &[perm("config.put", PermissionKind::Allow, "p1")],
            &KEY,
            T,
            DEFAULT_PERM_TTL,
        );
        assert_eq!(
            decode_payload(&jwt)["permissions"],
            serde_json::json!(["config.put|ALLOW|p1"])
        );
    }

    #[test]
    fn verify_outcomes() {
        let jwt = mint("alice", &[], &KEY, T, 5);
        let claims = verify(&jwt, &KEY, T).unwrap();
        assert_eq!(claims.sub, "alice");
        assert_eq!(verify(&jwt, &KEY, T + 4).unwrap(), claims);
        assert_eq!(verify(&jwt, &KEY, T + 5), Err(PtokenError::TokenExpired));
        assert_eq!(verify("a.b", &KEY, T), Err(PtokenError::MalformedToken));
        assert_eq!(verify("a.b.c.d", &KEY, T), Err(PtokenError::MalformedToken));
        assert_eq!(verify(&jwt, &[1; 32], T), Err(PtokenError::BadSignature));

        let mut parts: Vec<String> = jwt.split('.').map(str::to_string).collect();
        let mut payload = parts[1].clone().into_bytes();
        payload[3] = if payload[3] == b'A' { b'B' } else { b'A' };
        parts[1] = String::from_utf8(payload).unwrap();
        assert_eq!(
            verify(&parts.join("."), &KEY, T),
            Err(PtokenError::BadSignature)
        );
    }

    #[test]
    fn signed_garbage_payload_is_malformed() {
        let h = URL_SAFE_NO_PAD.encode(HEADER_JSON);
        let p = URL_SAFE_NO_PAD.encode(b"{\"sub\":1}");
        let input = format!("{h}.{p}");
        let sig = mac(&KEY, input.as_bytes()).finalize().into_bytes();
        let jwt = format!("{input}.{}", URL_SAFE_NO_PAD.encode(sig));
        assert_eq!(verify(&jwt, &KEY, T), Err(PtokenError::MalformedToken));
    }

    #[test]
    fn jti_unique() {
        let n = 1000;
        let ids: HashSet<String> = (0..n).map(|_| claims_for("a", &[], T, 5).jti).collect();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn replay_guard() {
        let g = ReplayGuard::default();
        let c = claims_for("a", &[], T, 5);
        assert!(g.admit(&c, T));
        assert!(!g.admit(&c, T + 1));
        assert!(g.admit(&claims_for("a", &[], T, 5), T + 1));
        // After expiry the entry is evicted.
        assert!(g.admit(&claims_for("a", &[], T + 10, 5), T + 10));
        assert_eq!(g.len(), 1);
    }

    fn arb_perm() -> impl Strategy<Value = Permission> {
        (
            "[a-z0-9_]{1,8}(\\.[a-z0-9_]{1,8}){0,2}",
            prop_oneof![Just(PermissionKind::Allow), Just(PermissionKind::Deny)],
            "[A-Za-z0-9-]{1,36}",
        )
            .prop_map(|(name, kind, id)| Permission { id, name, kind })
    }

    proptest! {
        #[test]
        fn permission_roundtrip(p in arb_perm()) {
            prop_assert_eq!(decode_permission(&encode_permission(&p)).unwrap(), p);
        }

        #[test]
        fn token_roundtrip_and_tamper(
            user in "[a-z0-9._-]{1,20}",
            perms in proptest::collection::vec(arb_perm(), 0..6),
            key in proptest::array::uniform32(any::<u8>()),
            other in proptest::array::uniform32(any::<u8>()),
            now in 0u64..4_000_000_000,
            ttl in 1u64..100,
            pos in any::<prop::sample::Index>(),
        ) {
            let claims = claims_for(&user, &perms, now, ttl);
            let jwt = sign(&claims, &key);
            prop_assert_eq!(verify(&jwt, &key, now + ttl - 1).unwrap(), claims.clone());
            prop_assert_eq!(claims.decode_permissions().unwrap(), perms);
            if other != key {
                prop_assert!(verify(&jwt, &other, now).is_err());
            }
            // Mutate one byte of the header or payload.
            let signed_len = jwt.rfind('.').unwrap();
            let i = pos.index(signed_len);
            let mut bytes = jwt.clone().into_bytes();
            bytes[i] = if bytes[i] == b'x' { b'y' } else { b'x' };
            let tampered = String::from_utf8(bytes).unwrap();
            if tampered != jwt {
                prop_assert!(verify(&tampered, &key, now).is_err());
            }
        }
    }
}
