//! End-to-end over real sockets, in both deployment shapes.

use std::path::Path;

use edge_iam::app::{DeploymentConfig, HashPreset, Running, Shape, StoreBackend, System};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

trait JsonBody {
    fn json_body(self, v: Value) -> Self;
}

impl JsonBody for RequestBuilder {
    fn json_body(self, v: Value) -> Self {
        self.header("content-type", "application/json")
            .body(v.to_string())
    }
}

fn config(shape: Shape, root: &Path) -> DeploymentConfig {
    DeploymentConfig {
        store_backend: StoreBackend::File,
        store_root: Some(root.to_path_buf()),
        hash: HashPreset::Light,
        listen: "127.0.0.1:0".into(),
        shape,
        ..DeploymentConfig::default()
    }
}

/// Runs a fixed scenario against `base` and returns every status code seen.
fn scenario(base: &str) -> Vec<(String, u16)> {
    let http = Client::new();
    let mut seen = Vec::new();
    let mut got_version = None;
    let mut step = |label: &str, req: RequestBuilder| -> Value {
        let resp = req.send().unwrap();
        seen.push((label.to_string(), resp.status().as_u16()));
        if let Some(v) = resp.headers().get("x-config-version") {
            got_version = Some(v.to_str().unwrap().to_string());
        }
        let text = resp.text().unwrap();
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    let url = |p: &str| format!("{base}{p}");

    step(
        "register",
        http.post(url("/api/v1/auth/register"))
            .json_body(json!({"username": "carol", "password": "long-enough-pw"})),
    );
    step(
        "register again",
        http.post(url("/api/v1/auth/register"))
            .json_body(json!({"username": "carol", "password": "long-enough-pw"})),
    );
    step(
        "bad login",
        http.post(url("/api/v1/auth/login"))
            .json_body(json!({"username": "carol", "password": "nope-nope-nope"})),
    );
    let login = step(
        "login",
        http.post(url("/api/v1/auth/login"))
            .json_body(json!({"username": "carol", "password": "long-enough-pw"})),
    );
    let token = login["access_token"].as_str().unwrap().to_string();

    step(
        "anonymous put",
        http.put(url("/api/v1/configs/dev/app")).body("a: 1"),
    );
    step(
        "put",
        http.put(url("/api/v1/configs/dev/app"))
            .bearer_auth(&token)
            .body("a: 1"),
    );
    let got = step(
        "get",
        http.get(url("/api/v1/configs/dev/app")).bearer_auth(&token),
    );
    assert_eq!(got, Value::String("a: 1".into()));
    step(
        "missing config",
        http.get(url("/api/v1/configs/dev/none"))
            .bearer_auth(&token),
    );
    step(
        "add member",
        http.post(url("/api/v1/orgs/carol/members"))
            .bearer_auth(&token)
            .json_body(json!({"username": "dave", "temp_password": "temporary-pw"})),
    );
    let dave = step(
        "member login",
        http.post(url("/api/v1/auth/login"))
            .json_body(json!({"username": "dave", "password": "temporary-pw"})),
    );
    let dave = dave["access_token"].as_str().unwrap().to_string();
    step(
        "member put",
        http.put(url("/api/v1/configs/dev/app"))
            .bearer_auth(&dave)
            .body("b"),
    );
    step(
        "revoke",
        http.delete(url("/api/v1/orgs/carol/permissions"))
            .bearer_auth(&token)
            .json_body(json!({"subject": "user:carol", "name": "config.put", "kind": "ALLOW"})),
    );
    step(
        "put after revoke",
        http.put(url("/api/v1/configs/dev/app"))
            .bearer_auth(&token)
            .body("c"),
    );
    step("unknown route", http.get(url("/api/v1/whatever")));
    step(
        "forged header",
        http.get(url("/api/v1/configs/dev/app"))
            .header("x-permission-token", "a.b.c")
            .header("x-username", "carol"),
    );
    assert_eq!(got_version.as_deref(), Some("1"));
    seen
}

#[test]
fn single_process_and_split_deployment_answer_alike() {
    let one = tempfile::tempdir().unwrap();
    let single = System::build(config(Shape::Single, one.path()))
        .unwrap()
        .listen()
        .unwrap();
    let single_statuses = scenario(&single.url());
    single.shutdown();

    let two = tempfile::tempdir().unwrap();
    let backends: Running = System::build(config(Shape::Backends, two.path()))
        .unwrap()
        .listen()
        .unwrap();
    let gateway = System::build(DeploymentConfig {
        backend_url: Some(backends.url()),
        ..config(Shape::Gateway, two.path())
    })
    .unwrap()
    .listen()
    .unwrap();
    let split_statuses = scenario(&gateway.url());
    gateway.shutdown();
    backends.shutdown();

    let expected: Vec<u16> = vec![
        201, 409, 401, 200, 401, 201, 200, 404, 201, 200, 403, 204, 403, 404, 401,
    ];
    let codes: Vec<u16> = single_statuses.iter().map(|s| s.1).collect();
    assert_eq!(codes, expected, "{single_statuses:?}");
    assert_eq!(single_statuses, split_statuses);
}

#[test]
fn a_taken_port_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let first = System::build(config(Shape::Single, dir.path()))
        .unwrap()
        .listen()
        .unwrap();
    let taken = first.server.addr().to_string();
    let other = tempfile::tempdir().unwrap();
    let err = System::build(DeploymentConfig {
        listen: taken,
        ..config(Shape::Single, other.path())
    })
    .unwrap()
    .listen()
    .err()
    .unwrap();
    assert!(
        matches!(err, edge_iam::app::AppError::PortInUse(_)),
        "{err}"
    );
    first.shutdown();
}
