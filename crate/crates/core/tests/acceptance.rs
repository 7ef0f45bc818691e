//! Acceptance criteria. Runs as a plain binary (harness = false) so every
//! criterion prints exactly one PASS/FAIL line, and exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edge_iam::app::{DeploymentConfig, HashPreset, StoreBackend, System};
use edge_iam::bench::{self, FlowMode, FlowSpec, HarnessConfig};
use edge_iam::clock::{ManualClock, SharedClock};
use edge_iam::http::{Request, Response};
use edge_iam::identity::{IdentityError, RegistrationRequest};
use edge_iam::policy::{Permission, PermissionKind, PolicyEngine, Subject, SYSTEM_PERMISSIONS};
use edge_iam::ptoken;
use edge_iam::services::{GrantRequest, LoginRequest, LoginResponse, MemberRequest};
use edge_iam::store::{
    FaultRule, MemoryStore, Namespace, SharedStore, StoreExt, StoreKey, StoreRecord,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Deserialize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const T0: u64 = 1_750_000_000;
const PASSWORD: &str = "s3cret-pass";

fn config(backend: StoreBackend, root: Option<&Path>) -> DeploymentConfig {
    DeploymentConfig {
        store_backend: backend,
        store_root: root.map(Path::to_path_buf),
        hash: HashPreset::Light,
        listen: "127.0.0.1:0".into(),
        ..DeploymentConfig::default()
    }
}

fn system_at(clock: &ManualClock) -> System {
    let shared: SharedClock = Arc::new(clock.clone());
    System::build_with_clock(config(StoreBackend::Memory, None), shared).expect("system builds")
}

fn registration(username: &str, org: Option<&str>) -> RegistrationRequest {
    RegistrationRequest {
        username: username.into(),
        password: PASSWORD.into(),
        personal_info: BTreeMap::new(),
        org_name: org.map(str::to_string),
    }
}

fn login(sys: &System, username: &str) -> Result<String, String> {
    let resp =
        sys.gateway.handle(
            Request::new("POST", "/api/v1/auth/login").with_json(&LoginRequest {
                username: username.into(),
                password: PASSWORD.into(),
            }),
        );
    ensure!(
        resp.status == 200,
        "login for {username} returned {}",
        resp.status
    );
    let body: LoginResponse = serde_json::from_slice(&resp.body).map_err(|e| e.to_string())?;
    Ok(body.access_token)
}

fn put_config(sys: &System, token: Option<&str>, ns: &str, name: &str, body: &[u8]) -> Response {
    let mut req =
        Request::new("PUT", &format!("/api/v1/configs/{ns}/{name}")).with_body(body.to_vec());
    if let Some(t) = token {
        req = req.bearer(t);
    }
    sys.gateway.handle(req)
}

// 1. A permission change applies to the very next request made with an
// unchanged, still-valid access token.
fn freshness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let reps = 100;
    for rep in 0..reps {
        let clock = ManualClock::new(T0 + rng.gen_range(0..1_000_000));
        let sys = system_at(&clock);
        let owner = format!("owner{}-{}", rep, rng.gen_range(0..10_000));
        sys.identity
            .register_user(&registration(&owner, None))
            .map_err(|e| e.to_string())?;
        let token = login(&sys, &owner)?;
        let ns = ["dev", "prod", "staging"]
            .choose(&mut rng)
            .unwrap()
            .to_string();
        let name = format!("app{}.yaml", rng.gen_range(0..1000));
        let payload: Vec<u8> = (0..rng.gen_range(1..64)).map(|_| rng.gen()).collect();

        let first = put_config(&sys, Some(&token), &ns, &name, &payload);
        ensure!(
            first.status == 201,
            "rep {rep}: first put returned {}",
            first.status
        );

        clock.advance(rng.gen_range(0..3));
        let revoke = sys.gateway.handle(
            Request::new("DELETE", &format!("/api/v1/orgs/{owner}/permissions"))
                .bearer(&token)
                .with_json(&GrantRequest {
                    subject: format!("user:{owner}"),
                    name: "config.put".into(),
                    kind: PermissionKind::Allow,
                }),
        );
        ensure!(
            revoke.status == 204,
            "rep {rep}: revoke returned {}",
            revoke.status
        );

        ensure!(
            sys.vault.verify_token(&token).is_ok(),
            "rep {rep}: access token no longer valid"
        );
        let retry = put_config(&sys, Some(&token), &ns, &name, b"second");
        ensure!(
            retry.status == 403,
            "rep {rep}: retry returned {}",
            retry.status
        );
        let entry = sys.configsvc.entry(&ns, &name).ok_or("config vanished")?;
        ensure!(
            entry.version == 1 && entry.payload_bytes() == payload,
            "rep {rep}: store holds version {}",
            entry.version
        );
    }
    Ok(format!("{reps}/{reps} repetitions"))
}

fn snapshot(
    store: &SharedStore,
    root: Option<&Path>,
) -> (Vec<StoreRecord>, Vec<(String, Vec<u8>)>) {
    let records = store.dump().expect("dump");
    let files = match root {
        Some(root) => walkdir::WalkDir::new(root)
            .sort_by_file_name()
            .into_iter()
            .map(|e| e.expect("walk"))
            .map(|e| {
                let rel = e.path().strip_prefix(root).unwrap().display().to_string();
                let bytes = if e.file_type().is_file() {
                    std::fs::read(e.path()).unwrap()
                } else {
                    Vec::new()
                };
                (rel, bytes)
            })
            .collect(),
        None => Vec::new(),
    };
    (records, files)
}

// 2. A failure at any registration step leaves no trace.
fn saga_rollback() -> Outcome {
    let mut cases = 0;
    for backend in [StoreBackend::Memory, StoreBackend::File] {
        for k in 1..=4u8 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let root = (backend == StoreBackend::File).then(|| dir.path());
            let clock: SharedClock = Arc::new(ManualClock::new(T0));
            let sys = System::build_with_clock(config(backend, root), clock)
                .map_err(|e| e.to_string())?;
            sys.identity
                .register_user(&registration("existing", None))
                .map_err(|e| e.to_string())?;
            let vault_store = sys.vault.store().clone();
            let before = snapshot(&sys.store, root);
            let vault_before = vault_store.dump().map_err(|e| e.to_string())?;

            match k {
                1 => vault_store
                    .faults()
                    .arm(FaultRule::on_put(Namespace::Users)),
                2 => sys.store.faults().arm(FaultRule::on_put(Namespace::Users)),
                3 => sys
                    .store
                    .faults()
                    .arm(FaultRule::on_put(Namespace::Inherit)),
                _ => sys
                    .store
                    .faults()
                    .arm(FaultRule::on_put(Namespace::Grants).skip(3)),
            }
            let result = sys.identity.register_user(&registration("newcomer", None));
            let fired = sys.store.faults().fired() + vault_store.faults().fired();
            ensure!(fired == 1, "{backend:?} k={k}: fault fired {fired} times");
            match result {
                Err(IdentityError::RegistrationFailed { step, .. }) if step == k => {}
                other => return Err(format!("{backend:?} k={k}: unexpected result {other:?}")),
            }
            ensure!(
                snapshot(&sys.store, root) == before,
                "{backend:?} k={k}: store differs from snapshot"
            );
            ensure!(
                vault_store.dump().map_err(|e| e.to_string())? == vault_before,
                "{backend:?} k={k}: vault store differs"
            );
            ensure!(
                !sys.vault
                    .has_credentials("newcomer")
                    .map_err(|e| e.to_string())?,
                "{backend:?} k={k}: credential left in vault"
            );
            cases += 1;
        }
    }
    Ok(format!("{cases}/8 injection cases rolled back"))
}

// 3. Edge authorization scales better than per-hop policy calls.
fn table_ordering() -> Outcome {
    let cfg = HarnessConfig {
        trials: 5,
        reject_requests: 0,
        ..HarnessConfig::default()
    };
    let report = bench::compare_flows(&[10, 500, 1000], 3, 8, &cfg).map_err(|e| e.to_string())?;
    for row in &report.rows {
        let n = row.n as u64;
        ensure!(
            row.with_iam_policy_calls == n && row.without_iam_policy_calls == 3 * n,
            "n={}: policy calls {} vs {}",
            row.n,
            row.with_iam_policy_calls,
            row.without_iam_policy_calls
        );
        if row.n >= 500 {
            ensure!(
                row.with_iam_total_ms <= row.without_iam_total_ms,
                "n={}: with IAM {:.1} ms > without {:.1} ms",
                row.n,
                row.with_iam_total_ms,
                row.without_iam_total_ms
            );
        }
    }
    let ratio = |n| report.rows.iter().find(|r| r.n == n).unwrap().ratio;
    ensure!(
        ratio(1000) <= ratio(10),
        "ratio(1000) = {:.3} > ratio(10) = {:.3}",
        ratio(1000),
        ratio(10)
    );
    let cells: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "n={} {:.0}/{:.0}ms r={:.3}",
                r.n, r.with_iam_total_ms, r.without_iam_total_ms, r.ratio
            )
        })
        .collect();
    Ok(cells.join(", "))
}

// 4. Unauthorized requests are turned away at the edge.
fn fast_reject() -> Outcome {
    let cfg = HarnessConfig::default();
    let mut spec = FlowSpec::new(FlowMode::WithIam, 200);
    spec.authorized_fraction = 0.0;
    spec.concurrency = 1;
    let with = bench::run_flow(&spec, &cfg).map_err(|e| e.to_string())?;
    spec.mode = FlowMode::WithoutIam;
    let without = bench::run_flow(&spec, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (
        with.reject_latency_mean_ms.ok_or("no rejects measured")?,
        without
            .reject_latency_mean_ms
            .ok_or("no rejects measured")?,
    );
    ensure!(
        with.rejected == 200 && without.rejected == 200,
        "not every request was rejected"
    );
    ensure!(
        a < b,
        "with IAM mean {a:.3} ms >= without IAM mean {b:.3} ms"
    );
    ensure!(
        with.backend_invocations == 0,
        "{} backend invocations with IAM",
        with.backend_invocations
    );
    Ok(format!(
        "mean {a:.3} ms vs {b:.3} ms, 0 backend invocations"
    ))
}

#[derive(Deserialize)]
struct Vector {
    name: String,
    key_hex: String,
    sub: String,
    iat: u64,
    exp: u64,
    jti: String,
    permissions: Vec<String>,
    jwt: String,
}

// 5. Byte-exact agreement with an independent JWT implementation.
fn golden_vectors() -> Outcome {
    let text = include_str!("vectors/jwt_golden.json");
    let vectors: Vec<Vector> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    ensure!(
        vectors.len() == 3,
        "expected 3 vectors, found {}",
        vectors.len()
    );
    let mut mutations = 0;
    for v in &vectors {
        let key: [u8; 32] = hex::decode(&v.key_hex)
            .map_err(|e| e.to_string())?
            .try_into()
            .map_err(|_| "key is not 32 bytes")?;
        let perms: Vec<Permission> = v
            .permissions
            .iter()
            .map(|s| ptoken::decode_permission(s).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        let mut claims = ptoken::claims_for(&v.sub, &perms, v.iat, v.exp - v.iat);
        claims.jti = v.jti.clone();
        let minted = ptoken::sign(&claims, &key);
        ensure!(minted == v.jwt, "{}: minted token differs", v.name);
        let verified =
            ptoken::verify(&v.jwt, &key, v.iat).map_err(|e| format!("{}: {e}", v.name))?;
        ensure!(verified == claims, "{}: verified claims differ", v.name);

        let bytes = v.jwt.as_bytes();
        for i in 0..24 {
            let pos = i * (bytes.len() - 1) / 23;
            let mut m = bytes.to_vec();
            m[pos] = if m[pos] == b'A' { b'B' } else { b'A' };
            let m = String::from_utf8(m).unwrap();
            ensure!(
                ptoken::verify(&m, &key, v.iat).is_err(),
                "{}: mutation at byte {pos} accepted",
                v.name
            );
            mutations += 1;
        }
    }
    Ok(format!("3 vectors, {mutations} mutations rejected"))
}

/// Reference resolver: per name, direct grants decide if present, else the
/// organization's; DENY wins within a level; nothing means no entry.
fn brute_force(
    grants: &[(Subject, Permission)],
    user: &str,
    parent: Option<&str>,
) -> Vec<Permission> {
    let names: std::collections::BTreeSet<&str> =
        grants.iter().map(|(_, p)| p.name.as_str()).collect();
    let pick = |subject: &Subject, name: &str| -> Option<Permission> {
        let level: Vec<&Permission> = grants
            .iter()
            .filter(|(s, p)| s == subject && p.name == name)
            .map(|(_, p)| p)
            .collect();
        level
            .iter()
            .find(|p| p.kind == PermissionKind::Deny)
            .or_else(|| level.first())
            .map(|p| (*p).clone())
    };
    names
        .into_iter()
        .filter_map(|name| {
            pick(&Subject::user(user), name)
                .or_else(|| parent.and_then(|o| pick(&Subject::org(o), name)))
        })
        .collect()
}

// 6. The engine agrees with the reference resolver on random instances.
fn policy_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x0a1c_1e06);
    let names = [
        "config.put",
        "config.get",
        "org.member.add",
        "alpha",
        "beta.x",
        "gamma_y",
    ];
    let mut compared = 0;
    for _ in 0..500 {
        let store: SharedStore = Arc::new(MemoryStore::new());
        let users: Vec<String> = (0..rng.gen_range(1..=5)).map(|i| format!("u{i}")).collect();
        let orgs: Vec<String> = (0..rng.gen_range(1..=3)).map(|i| format!("o{i}")).collect();
        for u in &users {
            store
                .put(&StoreKey::new(Namespace::Users, u.as_str()).unwrap(), b"{}")
                .unwrap();
        }
        for o in &orgs {
            store
                .put(&StoreKey::new(Namespace::Orgs, o.as_str()).unwrap(), b"{}")
                .unwrap();
        }
        let engine = PolicyEngine::new(store);
        let universe = &names[..rng.gen_range(1..=names.len())];
        let mut parents = BTreeMap::new();
        for u in &users {
            if rng.gen_bool(0.7) {
                let o = orgs.choose(&mut rng).unwrap().clone();
                engine.add_inheritance(u, &o).map_err(|e| e.to_string())?;
                parents.insert(u.clone(), o);
            }
        }
        let mut grants: Vec<(Subject, Permission)> = Vec::new();
        for _ in 0..rng.gen_range(0..20) {
            let subject = if rng.gen_bool(0.5) {
                Subject::user(users.choose(&mut rng).unwrap().clone())
            } else {
                Subject::org(orgs.choose(&mut rng).unwrap().clone())
            };
            let name = *universe.choose(&mut rng).unwrap();
            let kind = if rng.gen_bool(0.5) {
                PermissionKind::Allow
            } else {
                PermissionKind::Deny
            };
            let p = engine
                .grant(&subject, name, kind)
                .map_err(|e| e.to_string())?;
            if !grants.iter().any(|(s, g)| s == &subject && g == &p) {
                grants.push((subject, p));
            }
        }
        // Some revocations, so removed grants are exercised too.
        for _ in 0..rng.gen_range(0..3) {
            if grants.is_empty() {
                break;
            }
            let (s, p) = grants.swap_remove(rng.gen_range(0..grants.len()));
            engine
                .revoke(&s, &p.name, p.kind)
                .map_err(|e| e.to_string())?;
        }
        for u in &users {
            let got = engine.effective_permissions(u).map_err(|e| e.to_string())?;
            let want = brute_force(&grants, u, parents.get(u).map(String::as_str));
            ensure!(got == want, "user {u}: engine {got:?} != oracle {want:?}");
            compared += 1;
        }
    }
    Ok(format!("500 instances, {compared} users compared"))
}

// 7. The gateway rejects with the right status and never forwards a reject.
fn gateway_statuses() -> Outcome {
    let clock = ManualClock::new(T0);
    let sys = system_at(&clock);
    sys.identity
        .register_user(&registration("boss", None))
        .map_err(|e| e.to_string())?;
    let boss = login(&sys, "boss")?;
    for member in ["plain", "denied", "allowed"] {
        let resp = sys.gateway.handle(
            Request::new("POST", "/api/v1/orgs/boss/members")
                .bearer(&boss)
                .with_json(&MemberRequest {
                    username: member.into(),
                    temp_password: PASSWORD.into(),
                }),
        );
        ensure!(
            resp.status == 201,
            "adding {member} returned {}",
            resp.status
        );
    }
    sys.policy
        .grant(&Subject::user("denied"), "config.put", PermissionKind::Deny)
        .map_err(|e| e.to_string())?;
    sys.policy
        .grant(
            &Subject::user("allowed"),
            "config.put",
            PermissionKind::Allow,
        )
        .map_err(|e| e.to_string())?;

    let stale = login(&sys, "allowed")?;
    clock.advance(sys.vault.access_ttl());
    let plain = login(&sys, "plain")?;
    let denied = login(&sys, "denied")?;
    let allowed = login(&sys, "allowed")?;

    let cases: [(&str, Option<&str>); 6] = [
        ("no token", None),
        ("garbage token", Some("not-a-real-token")),
        ("expired token", Some(&stale)),
        ("no grant", Some(&plain)),
        ("DENY grant", Some(&denied)),
        ("ALLOW grant", Some(&allowed)),
    ];
    let mut statuses = Vec::new();
    let mut invocations = Vec::new();
    for (i, (_, token)) in cases.iter().enumerate() {
        let before = sys.configsvc.invocations();
        let resp = put_config(&sys, *token, "dev", &format!("case{i}"), b"x: 1");
        statuses.push(resp.status);
        invocations.push(sys.configsvc.invocations() - before);
    }
    let class_ok = statuses[..3] == [401, 401, 401]
        && statuses[3..5] == [403, 403]
        && (200..300).contains(&statuses[5]);
    ensure!(class_ok, "statuses {statuses:?}");
    ensure!(
        invocations == [0, 0, 0, 0, 0, 1],
        "backend invocations {invocations:?}"
    );
    Ok(format!(
        "statuses {statuses:?}, invocations {invocations:?}"
    ))
}

// 8. Registration creates a default organization and grants the catalog.
fn registration_contract() -> Outcome {
    let clock = ManualClock::new(T0);
    let sys = system_at(&clock);
    let user = sys
        .identity
        .register_user(&registration("dora", None))
        .map_err(|e| e.to_string())?;
    ensure!(user.org == "dora", "default org is {}", user.org);
    let org = sys
        .identity
        .get_organization("dora")
        .map_err(|e| e.to_string())?;
    ensure!(org.org.owner == "dora", "org owner is {}", org.org.owner);

    match sys
        .identity
        .register_user(&registration("erin", Some("dora")))
    {
        Err(IdentityError::OrganizationExists) => {}
        other => return Err(format!("duplicate org gave {other:?}")),
    }
    ensure!(
        !sys.vault
            .has_credentials("erin")
            .map_err(|e| e.to_string())?,
        "rejected registration left a credential"
    );

    let eff = sys
        .policy
        .effective_permissions("dora")
        .map_err(|e| e.to_string())?;
    let mut names: Vec<&str> = eff
        .iter()
        .filter(|p| p.kind == PermissionKind::Allow)
        .map(|p| p.name.as_str())
        .collect();
    names.sort_unstable();
    let mut catalog = SYSTEM_PERMISSIONS.to_vec();
    catalog.sort_unstable();
    ensure!(eff.len() == 8 && names == catalog, "owner holds {names:?}");
    let count = sys
        .policy
        .assign_all("dora", "dora")
        .map_err(|e| e.to_string())?;
    ensure!(count == 8, "assign_all returned {count}");
    Ok("org = username, duplicate org refused, 8 catalog grants".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("freshness after revoke", freshness, Duration::from_secs(10)),
        ("saga rollback", saga_rollback, Duration::from_secs(5)),
        ("flow ordering", table_ordering, Duration::from_secs(300)),
        ("fast reject", fast_reject, Duration::from_secs(30)),
        ("jwt golden vectors", golden_vectors, Duration::from_secs(1)),
        ("policy oracle", policy_oracle, Duration::from_secs(10)),
        (
            "gateway status discipline",
            gateway_statuses,
            Duration::from_secs(5),
        ),
        (
            "registration contract",
            registration_contract,
            Duration::from_secs(2),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let took = t0.elapsed();
        let outcome = match outcome {
            Ok(detail) if took <= *limit => Ok(detail),
            Ok(detail) => Err(format!("{detail}; took {took:?}, limit {limit:?}")),
            Err(e) => Err(e),
        };
        match outcome {
            Ok(detail) => println!(
                "PASS {} {name}: {detail} ({:.2}s)",
                i + 1,
                took.as_secs_f64()
            ),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name}: {e} ({:.2}s)", i + 1, took.as_secs_f64());
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
