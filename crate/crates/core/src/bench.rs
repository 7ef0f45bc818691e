//! Load harness comparing the two authorization flows.
//!
//! WITH_IAM: the gateway resolves permissions once, mints a permission JWT
//! and every service in the chain verifies it locally. WITHOUT_IAM: the
//! gateway only authenticates and every service in the chain asks the policy
//! engine itself. Services, the gateway and the policy engine each run on
//! their own actor threads so every hop pays for a message round trip.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::clock::{ManualClock, SharedClock};
use crate::configsvc::{ConfigEntry, ConfigService, IngressAuth};
use crate::exec::Executor;
use crate::gateway::{Gateway, GatewayMode};
use crate::http::{Backend, Request};
use crate::identity::{Identity, IdentityConfig, RegistrationRequest};
use crate::mesh::{ActorBackend, PolicyClient, RelayService};
use crate::policy::{PolicyEngine, PolicyService};
use crate::services::PermissionGate;
use crate::store::{FileStore, MemoryStore, SharedStore};
use crate::vault::{HashParams, Vault, VaultConfig};

pub const DEFAULT_WARMUP: usize = 50;
pub const DEFAULT_DEPTH: usize = 3;

const OWNER: &str = "bench-owner";
const STRANGER: &str = "bench-stranger";
const PASSWORD: &str = "bench-password";
const START: u64 = 1_700_000_000;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid flow spec: {0}")]
    InvalidSpec(String),
    #[error("harness setup failed: {0}")]
    HarnessSetup(String),
    #[error("run discarded: {0}")]
    PartialFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlowMode {
    WithIam,
    WithoutIam,
}

impl FlowMode {
    pub fn label(self) -> &'static str {
        match self {
            FlowMode::WithIam => "with IAM",
            FlowMode::WithoutIam => "without IAM",
        }
    }
}

impl std::str::FromStr for FlowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "with-iam" => Ok(FlowMode::WithIam),
            "without-iam" => Ok(FlowMode::WithoutIam),
            _ => Err(format!(
                "unknown mode {s:?}, expected with-iam or without-iam"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSpec {
    pub mode: FlowMode,
    pub n_requests: usize,
    pub chain_depth: usize,
    pub concurrency: usize,
    pub authorized_fraction: f64,
}

impl FlowSpec {
    pub fn new(mode: FlowMode, n_requests: usize) -> Self {
        Self {
            mode,
            n_requests,
            chain_depth: DEFAULT_DEPTH,
            concurrency: 8,
            authorized_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.n_requests == 0 {
            return Err(BenchError::InvalidSpec(
                "n_requests must be positive".into(),
            ));
        }
        if self.chain_depth == 0 {
            return Err(BenchError::InvalidSpec(
                "chain_depth must be at least 1".into(),
            ));
        }
        if self.concurrency == 0 {
            return Err(BenchError::InvalidSpec(
                "concurrency must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.authorized_fraction) {
            return Err(BenchError::InvalidSpec(
                "authorized_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum BenchStore {
    Memory,
    File { root: PathBuf },
}

/// Settings shared by every run of a comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub store: BenchStore,
    /// Worker threads of the policy engine actor.
    pub policy_workers: usize,
    /// Simulated cost of one hop between services, in microseconds.
    pub hop_cost_us: u64,
    pub warmup: usize,
    pub seed: u64,
    /// Runs per flow in [`compare_flows`]; the median total is reported.
    pub trials: usize,
    /// Requests in the all-unauthorized reject comparison. These run one at
    /// a time: under load both flows queue on the same policy engine and the
    /// comparison would measure the queue rather than the flow.
    pub reject_requests: usize,
    /// Force the sequential executor even when `concurrency` > 1.
    pub sequential: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            store: BenchStore::Memory,
            policy_workers: 2,
            hop_cost_us: 500,
            warmup: DEFAULT_WARMUP,
            seed: 7,
            trials: 5,
            reject_requests: 200,
            sequential: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub mode: FlowMode,
    pub n_requests: usize,
    pub chain_depth: usize,
    pub concurrency: usize,
    pub executor: String,
    pub per_request_latency_ms: Vec<f64>,
    pub total_wall_time_ms: f64,
    pub throughput_per_min: f64,
    /// Mean latency of the unauthorized subset, if any.
    pub reject_latency_mean_ms: Option<f64>,
    pub authorized: usize,
    pub rejected: usize,
    pub policy_effective_calls: u64,
    pub policy_check_calls: u64,
    /// Calls that reached any service behind the gateway.
    pub backend_invocations: u64,
    pub config_invocations: u64,
}

impl FlowMetrics {
    pub fn mean_latency_ms(&self) -> f64 {
        mean(&self.per_request_latency_ms).unwrap_or(0.0)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// A fully wired stack for one flow. Dropping it stops every actor.
pub struct Harness {
    mode: FlowMode,
    entry: ActorBackend,
    gateway: Arc<Gateway>,
    policy: Arc<PolicyEngine>,
    config: Arc<ConfigService>,
    relays: Vec<Arc<RelayService>>,
    owner_token: String,
    stranger_token: String,
}

impl Harness {
    pub fn build(
        mode: FlowMode,
        depth: usize,
        concurrency: usize,
        cfg: &HarnessConfig,
    ) -> Result<Self, BenchError> {
        let setup = |e: &dyn std::fmt::Display| BenchError::HarnessSetup(e.to_string());
        let (store, vault_store): (SharedStore, SharedStore) = match &cfg.store {
            BenchStore::Memory => (Arc::new(MemoryStore::new()), Arc::new(MemoryStore::new())),
            BenchStore::File { root } => {
                // Every harness registers the same fixture users, so each
                // gets its own directory.
                let run = root.join(format!("run-{}", uuid::Uuid::new_v4().simple()));
                (
                    Arc::new(FileStore::open(run.join("data")).map_err(|e| setup(&e))?),
                    Arc::new(FileStore::open(run.join("vault")).map_err(|e| setup(&e))?),
                )
            }
        };
        let clock: SharedClock = Arc::new(ManualClock::new(START));
        let vault = Arc::new(Vault::new(
            vault_store,
            clock.clone(),
            VaultConfig {
                hash: HashParams::light(),
                ..VaultConfig::default()
            },
        ));
        let policy = Arc::new(PolicyEngine::new(store.clone()));
        let identity = Identity::new(
            store.clone(),
            vault.clone(),
            policy.clone(),
            clock.clone(),
            IdentityConfig::default(),
        );
        identity
            .register_user(&RegistrationRequest {
                username: OWNER.into(),
                password: PASSWORD.into(),
                personal_info: Default::default(),
                org_name: None,
            })
            .map_err(|e| setup(&e))?;
        // A member with no grants of their own: every request is denied.
        identity
            .add_member(OWNER, OWNER, STRANGER, PASSWORD)
            .map_err(|e| setup(&e))?;
        let login = |u: &str| vault.authenticate(u, PASSWORD).map(|t| t.token_value);
        let owner_token = login(OWNER).map_err(|e| setup(&e))?;
        let stranger_token = login(STRANGER).map_err(|e| setup(&e))?;

        let key_id = vault.create_signing_key().map_err(|e| setup(&e))?;
        let key = vault.get_signing_key(&key_id).map_err(|e| setup(&e))?;
        let hop = Duration::from_micros(cfg.hop_cost_us);
        let policy_client: Arc<dyn PolicyService> =
            Arc::new(PolicyClient::spawn(policy.clone(), cfg.policy_workers, hop));
        let ingress = || match mode {
            FlowMode::WithIam => IngressAuth::PermissionToken(PermissionGate::new(
                key.key_bytes,
                clock.clone(),
                false,
            )),
            FlowMode::WithoutIam => IngressAuth::PolicyLookup(policy_client.clone()),
        };

        // Innermost first: the config service, then depth - 1 relays in front.
        let config = Arc::new(ConfigService::new(store.clone(), clock.clone(), ingress()));
        let mut next: Arc<dyn Backend> = Arc::new(ActorBackend::spawn(
            "configsvc",
            concurrency,
            hop,
            config.clone(),
        ));
        let mut relays = Vec::new();
        for i in 1..depth {
            let relay = Arc::new(RelayService::new(ingress(), "config.put", next));
            relays.push(relay.clone());
            next = Arc::new(ActorBackend::spawn(
                &format!("relay-{i}"),
                concurrency,
                hop,
                relay,
            ));
        }

        let gw_mode = match mode {
            FlowMode::WithIam => GatewayMode::EdgeAuthorization,
            FlowMode::WithoutIam => GatewayMode::PassThrough,
        };
        let gateway = Arc::new(
            Gateway::builder(vault.clone(), policy_client.clone(), key, clock)
                .mode(gw_mode)
                .backend("configsvc", next)
                .build(),
        );
        let entry = ActorBackend::spawn("gateway", concurrency, hop, gateway.clone());
        Ok(Self {
            mode,
            entry,
            gateway,
            policy,
            config,
            relays,
            owner_token,
            stranger_token,
        })
    }

    pub fn mode(&self) -> FlowMode {
        self.mode
    }

    fn request(&self, name: &str, authorized: bool) -> Request {
        let token = if authorized {
            &self.owner_token
        } else {
            &self.stranger_token
        };
        Request::new("PUT", &format!("/api/v1/configs/bench/{name}"))
            .bearer(token)
            .with_body(format!("key: {name}\nreplicas: 3\n"))
    }

    /// Sends one request through the gateway; returns status and latency.
    pub fn send(&self, name: &str, authorized: bool) -> (u16, Duration) {
        let req = self.request(name, authorized);
        let t0 = Instant::now();
        let status = match self.entry.call(req) {
            Ok(resp) => resp.status,
            Err(_) => 0,
        };
        (status, t0.elapsed())
    }

    pub fn reset_counters(&self) {
        self.policy.reset_counters();
        self.gateway.reset_counters();
        self.config.reset_invocations();
        for r in &self.relays {
            r.reset_invocations();
        }
    }

    pub fn backend_invocations(&self) -> u64 {
        self.config.invocations() + self.relays.iter().map(|r| r.invocations()).sum::<u64>()
    }

    pub fn config_entries(&self) -> Vec<ConfigEntry> {
        self.config.entries()
    }
}

/// Deterministic choice of which requests carry an authorized token.
pub fn authorization_plan(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen::<f64>() < fraction).collect()
}

pub fn run_flow(spec: &FlowSpec, cfg: &HarnessConfig) -> Result<FlowMetrics, BenchError> {
    spec.validate()?;
    let harness = Harness::build(spec.mode, spec.chain_depth, spec.concurrency, cfg)?;
    run_on(&harness, spec, cfg)
}

/// Runs `spec` against an already built harness (whose mode must match).
pub fn run_on(
    harness: &Harness,
    spec: &FlowSpec,
    cfg: &HarnessConfig,
) -> Result<FlowMetrics, BenchError> {
    spec.validate()?;
    if harness.mode() != spec.mode {
        return Err(BenchError::InvalidSpec(
            "harness mode differs from spec mode".into(),
        ));
    }
    let exec = if cfg.sequential {
        Executor::Sequential
    } else {
        Executor::with_workers(spec.concurrency)
    };

    let warm = exec.map(cfg.warmup, |i| harness.send(&format!("warmup-{i}"), true).0);
    if let Some(s) = warm.iter().find(|&&s| s != 201) {
        return Err(BenchError::PartialFailure(format!(
            "warm-up request returned {s}"
        )));
    }
    harness.reset_counters();

    let plan = authorization_plan(spec.n_requests, spec.authorized_fraction, cfg.seed);
    let t0 = Instant::now();
    let results = exec.map(spec.n_requests, |i| {
        harness.send(&format!("cfg-{i}"), plan[i])
    });
    let total = t0.elapsed();

    let mut latencies = Vec::with_capacity(results.len());
    let mut rejects = Vec::new();
    for (i, (status, lat)) in results.iter().enumerate() {
        let ms = lat.as_secs_f64() * 1e3;
        let expected = if plan[i] { 201 } else { 403 };
        if *status != expected {
            return Err(BenchError::PartialFailure(format!(
                "request {i} returned {status}, expected {expected}"
            )));
        }
        if !plan[i] {
            rejects.push(ms);
        }
        latencies.push(ms);
    }

    let counters = harness.policy.counters();
    let total_ms = total.as_secs_f64() * 1e3;
    Ok(FlowMetrics {
        mode: spec.mode,
        n_requests: spec.n_requests,
        chain_depth: spec.chain_depth,
        concurrency: spec.concurrency,
        executor: exec.name().to_string(),
        per_request_latency_ms: latencies,
        total_wall_time_ms: total_ms,
        throughput_per_min: spec.n_requests as f64 / total.as_secs_f64().max(1e-9) * 60.0,
        reject_latency_mean_ms: mean(&rejects),
        authorized: plan.iter().filter(|&&a| a).count(),
        rejected: rejects.len(),
        policy_effective_calls: counters.effective_calls,
        policy_check_calls: counters.check_calls,
        backend_invocations: harness.backend_invocations(),
        config_invocations: harness.config.invocations(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub with_iam_total_ms: f64,
    pub without_iam_total_ms: f64,
    pub ratio: f64,
    pub with_iam_throughput_per_min: f64,
    pub without_iam_throughput_per_min: f64,
    pub with_iam_policy_calls: u64,
    pub without_iam_policy_calls: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectComparison {
    pub requests: usize,
    pub with_iam_mean_ms: f64,
    pub without_iam_mean_ms: f64,
    pub with_iam_backend_invocations: u64,
    pub without_iam_backend_invocations: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub chain_depth: usize,
    pub concurrency: usize,
    pub executor: String,
    pub trials: usize,
    pub rows: Vec<ReportRow>,
    pub reject: Option<RejectComparison>,
}

fn median_by_total(mut runs: Vec<FlowMetrics>) -> FlowMetrics {
    runs.sort_by(|a, b| a.total_wall_time_ms.total_cmp(&b.total_wall_time_ms));
    let mid = runs.len() / 2;
    runs.swap_remove(mid)
}

fn median_run(spec: &FlowSpec, cfg: &HarnessConfig) -> Result<FlowMetrics, BenchError> {
    let harness = Harness::build(spec.mode, spec.chain_depth, spec.concurrency, cfg)?;
    let runs = (0..cfg.trials.max(1))
        .map(|_| run_on(&harness, spec, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(median_by_total(runs))
}

/// Runs both flows for every n (median of `cfg.trials` runs each), then the
/// all-unauthorized reject comparison.
pub fn compare_flows(
    n_list: &[usize],
    depth: usize,
    concurrency: usize,
    cfg: &HarnessConfig,
) -> Result<Report, BenchError> {
    if n_list.is_empty() {
        return Err(BenchError::InvalidSpec("n_list must not be empty".into()));
    }
    let spec = |mode, n| FlowSpec {
        mode,
        n_requests: n,
        chain_depth: depth,
        concurrency,
        authorized_fraction: 1.0,
    };
    let mut rows = Vec::new();
    let mut executor = String::new();
    for &n in n_list {
        let with = median_run(&spec(FlowMode::WithIam, n), cfg)?;
        let without = median_run(&spec(FlowMode::WithoutIam, n), cfg)?;
        executor = with.executor.clone();
        rows.push(ReportRow {
            n,
            with_iam_total_ms: with.total_wall_time_ms,
            without_iam_total_ms: without.total_wall_time_ms,
            ratio: with.total_wall_time_ms / without.total_wall_time_ms,
            with_iam_throughput_per_min: with.throughput_per_min,
            without_iam_throughput_per_min: without.throughput_per_min,
            with_iam_policy_calls: with.policy_effective_calls + with.policy_check_calls,
            without_iam_policy_calls: without.policy_effective_calls + without.policy_check_calls,
        });
    }
    let reject = if cfg.reject_requests > 0 {
        let mut s = spec(FlowMode::WithIam, cfg.reject_requests);
        s.authorized_fraction = 0.0;
        s.concurrency = 1;
        let with = run_flow(&s, cfg)?;
        s.mode = FlowMode::WithoutIam;
        let without = run_flow(&s, cfg)?;
        Some(RejectComparison {
            requests: cfg.reject_requests,
            with_iam_mean_ms: with.reject_latency_mean_ms.unwrap_or(0.0),
            without_iam_mean_ms: without.reject_latency_mean_ms.unwrap_or(0.0),
            with_iam_backend_invocations: with.backend_invocations,
            without_iam_backend_invocations: without.backend_invocations,
        })
    } else {
        None
    };
    Ok(Report {
        chain_depth: depth,
        concurrency,
        executor,
        trials: cfg.trials.max(1),
        rows,
        reject,
    })
}

pub fn format_duration_ms(ms: f64) -> String {
    if ms >= 60_000.0 {
        let secs = (ms / 1000.0).round() as u64;
        format!("{}m{}s", secs / 60, secs % 60)
    } else if ms >= 100.0 {
        format!("{ms:.0}ms")
    } else {
        format!("{ms:.2}ms")
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "chain depth {}, concurrency {}, executor {}, median of {} trial(s)",
            self.chain_depth, self.concurrency, self.executor, self.trials
        );
        let _ = writeln!(
            out,
            "{:>8}  {:>16}  {:>18}  {:>7}  {:>13}",
            "n", "with_iam_total", "without_iam_total", "ratio", "policy calls"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8}  {:>16}  {:>18}  {:>7.3}  {:>13}",
                r.n,
                format_duration_ms(r.with_iam_total_ms),
                format_duration_ms(r.without_iam_total_ms),
                r.ratio,
                format!("{}/{}", r.with_iam_policy_calls, r.without_iam_policy_calls),
            );
        }
        if let Some(last) = self.rows.last() {
            let _ = writeln!(
                out,
                "throughput at n={}: with IAM ~ {:.0} req/min, without IAM ~ {:.0} req/min",
                last.n, last.with_iam_throughput_per_min, last.without_iam_throughput_per_min
            );
        }
        if let Some(r) = &self.reject {
            let _ = writeln!(
                out,
                "unauthorized reject latency over {} requests: with IAM {:.3} ms, without IAM {:.3} ms",
                r.requests, r.with_iam_mean_ms, r.without_iam_mean_ms
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl FlowMetrics {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: n={} depth={} concurrency={} executor={}",
            self.mode.label(),
            self.n_requests,
            self.chain_depth,
            self.concurrency,
            self.executor
        );
        let _ = writeln!(
            out,
            "total wall time {}",
            format_duration_ms(self.total_wall_time_ms)
        );
        let _ = writeln!(out, "mean latency {:.3} ms", self.mean_latency_ms());
        let _ = writeln!(out, "throughput ~ {:.0} req/min", self.throughput_per_min);
        if let Some(m) = self.reject_latency_mean_ms {
            let _ = writeln!(
                out,
                "reject latency mean {m:.3} ms over {} requests",
                self.rejected
            );
        }
        let _ = writeln!(
            out,
            "policy calls: {} effective, {} check",
            self.policy_effective_calls, self.policy_check_calls
        );
        out
    }
}
