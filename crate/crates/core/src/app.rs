//! Composition root: builds the whole system from one [`DeploymentConfig`].
//!
//! Three shapes are supported. `single` runs every service in one process
//! behind the gateway. `gateway` and `backends` split it in two: the gateway
//! process forwards over HTTP to the backends process, and both open the
//! same file store so they share users, grants and the signing key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{BenchStore, HarnessConfig};
use crate::clock::{SharedClock, SystemClock};
use crate::configsvc::{ConfigService, IngressAuth};
use crate::gateway::{Gateway, RouteTable};
use crate::http::Backend;
use crate::identity::{Identity, IdentityConfig, RegistrationRequest};
use crate::mesh::RelayService;
use crate::policy::{PermissionKind, PolicyEngine, PolicyService, Subject};
use crate::server::{self, HttpBackend, ServeError, ServerHandle, ServiceRouter};
use crate::services::{AdminService, AuthService, PermissionGate};
use crate::store::{FileStore, MemoryStore, SharedStore};
use crate::vault::{HashParams, SigningKey, Vault, VaultConfig};

pub const ENV_PREFIX: &str = "EDGE_IAM_";

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("address {0} is already in use")]
    PortInUse(String),
    #[error("startup failed: {0}")]
    Startup(String),
}

impl From<ServeError> for AppError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::PortInUse(a) => AppError::PortInUse(a),
            other => AppError::Startup(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreBackend {
    Memory,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashPreset {
    Default,
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Single,
    Gateway,
    Backends,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeploymentConfig {
    pub store_backend: StoreBackend,
    pub store_root: Option<PathBuf>,
    pub access_ttl_s: i64,
    pub perm_ttl_s: i64,
    pub async_grants: bool,
    pub replay_strict: bool,
    pub chain_depth: usize,
    pub listen: String,
    pub route_table: Option<PathBuf>,
    pub hash: HashPreset,
    pub shape: Shape,
    /// Base URL of the backends process, for the `gateway` shape.
    pub backend_url: Option<String>,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            store_backend: StoreBackend::Memory,
            store_root: None,
            access_ttl_s: crate::vault::DEFAULT_ACCESS_TTL as i64,
            perm_ttl_s: crate::ptoken::DEFAULT_PERM_TTL as i64,
            async_grants: false,
            replay_strict: false,
            chain_depth: 1,
            listen: "127.0.0.1:8080".into(),
            route_table: None,
            hash: HashPreset::Default,
            shape: Shape::Single,
            backend_url: None,
        }
    }
}

impl DeploymentConfig {
    pub fn from_json(text: &str) -> Result<Self, AppError> {
        serde_json::from_str(text).map_err(|e| AppError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `EDGE_IAM_<FIELD>` overrides. Values are read as JSON when
    /// they parse and as plain strings otherwise.
    pub fn apply_env<I, K, V>(self, vars: I) -> Result<Self, AppError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc = serde_json::to_value(&self).expect("config serializes");
        let fields = doc.as_object_mut().expect("config is an object");
        for (k, v) in vars {
            let Some(field) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = field.to_ascii_lowercase();
            if field == "token_file" {
                continue; // read by the CLI
            }
            if !fields.contains_key(&field) {
                return Err(AppError::ConfigInvalid(format!(
                    "unknown variable {}",
                    k.as_ref()
                )));
            }
            let raw = v.as_ref();
            let value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            fields.insert(field, value);
        }
        serde_json::from_value(doc).map_err(|e| AppError::ConfigInvalid(e.to_string()))
    }

    pub fn with_process_env(self) -> Result<Self, AppError> {
        self.apply_env(std::env::vars())
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let bad = |m: &str| Err(AppError::ConfigInvalid(m.to_string()));
        if self.access_ttl_s <= 0 {
            return bad("access_ttl_s must be positive");
        }
        if self.perm_ttl_s <= 0 {
            return bad("perm_ttl_s must be positive");
        }
        if self.chain_depth == 0 {
            return bad("chain_depth must be at least 1");
        }
        if self.store_backend == StoreBackend::File && self.store_root.is_none() {
            return bad("store_root is required for the file backend");
        }
        if self.shape != Shape::Single && self.store_backend != StoreBackend::File {
            return bad("split shapes need the file store so both processes share state");
        }
        if self.shape == Shape::Gateway && self.backend_url.is_none() {
            return bad("backend_url is required for the gateway shape");
        }
        if let Some(p) = &self.route_table {
            if !p.is_file() {
                return Err(AppError::ConfigInvalid(format!(
                    "route table {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn hash_params(&self) -> HashParams {
        match self.hash {
            HashPreset::Default => HashParams::default(),
            HashPreset::Light => HashParams::light(),
        }
    }

    /// Benchmark settings derived from this deployment.
    pub fn harness_config(&self) -> HarnessConfig {
        let store = match (&self.store_backend, &self.store_root) {
            (StoreBackend::File, Some(root)) => BenchStore::File {
                root: root.join("bench"),
            },
            _ => BenchStore::Memory,
        };
        HarnessConfig {
            store,
            ..HarnessConfig::default()
        }
    }
}

/// Users, members and grants loaded at boot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fixtures {
    pub users: Vec<RegistrationRequest>,
    pub members: Vec<FixtureMember>,
    pub grants: Vec<FixtureGrant>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureMember {
    pub org: String,
    pub owner: String,
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureGrant {
    pub subject: String,
    pub name: String,
    pub kind: PermissionKind,
}

impl Fixtures {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::ConfigInvalid(format!("fixtures: {e}")))
    }
}

/// Every component of a running deployment, before any socket is opened.
pub struct System {
    pub config: DeploymentConfig,
    pub clock: SharedClock,
    pub store: SharedStore,
    pub vault: Arc<Vault>,
    pub policy: Arc<PolicyEngine>,
    pub identity: Arc<Identity>,
    pub configsvc: Arc<ConfigService>,
    pub gateway: Arc<Gateway>,
    /// Entry point of the backends process; `None` in other shapes.
    pub router: Option<Arc<ServiceRouter>>,
    pub signing_key_id: String,
}

impl System {
    pub fn build(config: DeploymentConfig) -> Result<Self, AppError> {
        Self::build_with_clock(config, Arc::new(SystemClock))
    }

    pub fn build_with_clock(
        config: DeploymentConfig,
        clock: SharedClock,
    ) -> Result<Self, AppError> {
        config.validate()?;
        let startup = |e: &dyn std::fmt::Display| AppError::Startup(e.to_string());
        let (store, vault_store): (SharedStore, SharedStore) = match config.store_backend {
            StoreBackend::Memory => (Arc::new(MemoryStore::new()), Arc::new(MemoryStore::new())),
            StoreBackend::File => {
                let root = config.store_root.as_ref().expect("validated");
                (
                    Arc::new(FileStore::open(root.join("data")).map_err(|e| startup(&e))?),
                    Arc::new(FileStore::open(root.join("vault")).map_err(|e| startup(&e))?),
                )
            }
        };
        let vault = Arc::new(Vault::new(
            vault_store,
            clock.clone(),
            VaultConfig {
                access_ttl: config.access_ttl_s as u64,
                hash: config.hash_params(),
            },
        ));
        let key = load_or_create_key(&vault)?;
        let policy = Arc::new(PolicyEngine::new(store.clone()));
        let identity = Arc::new(Identity::new(
            store.clone(),
            vault.clone(),
            policy.clone(),
            clock.clone(),
            IdentityConfig {
                async_grants: config.async_grants,
            },
        ));
        let routes = match &config.route_table {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| startup(&e))?;
                RouteTable::parse(&text).map_err(|e| AppError::ConfigInvalid(e.to_string()))?
            }
            None => RouteTable::bundled(),
        };
        let gate = || PermissionGate::new(key.key_bytes, clock.clone(), config.replay_strict);
        let configsvc = Arc::new(ConfigService::new(
            store.clone(),
            clock.clone(),
            IngressAuth::PermissionToken(gate()),
        ));
        let mut config_chain: Arc<dyn Backend> = configsvc.clone();
        for _ in 1..config.chain_depth {
            config_chain = Arc::new(RelayService::by_route(
                IngressAuth::PermissionToken(gate()),
                routes.clone(),
                config_chain,
            ));
        }
        let auth: Arc<dyn Backend> = Arc::new(AuthService::new(identity.clone(), vault.clone()));
        let admin: Arc<dyn Backend> =
            Arc::new(AdminService::new(identity.clone(), policy.clone(), gate()));

        let policy_service: Arc<dyn PolicyService> = policy.clone();
        let mut builder =
            Gateway::builder(vault.clone(), policy_service, key.clone(), clock.clone())
                .perm_ttl(config.perm_ttl_s as u64)
                .routes(routes.clone());
        let mut router = None;
        match config.shape {
            Shape::Gateway => {
                let url = config.backend_url.as_deref().expect("validated");
                let remote: Arc<dyn Backend> =
                    Arc::new(HttpBackend::new(url).map_err(|e| AppError::Startup(e.0))?);
                for target in targets(&routes) {
                    builder = builder.backend(&target, remote.clone());
                }
            }
            Shape::Single | Shape::Backends => {
                let services = [
                    ("auth", auth),
                    ("identity", admin.clone()),
                    ("policy", admin),
                    ("configsvc", config_chain),
                ];
                let mut r = ServiceRouter::new(routes.clone());
                for (name, svc) in services {
                    builder = builder.backend(name, svc.clone());
                    r = r.target(name, svc);
                }
                if config.shape == Shape::Backends {
                    router = Some(Arc::new(r));
                }
            }
        }
        Ok(Self {
            config,
            clock,
            store,
            vault,
            policy,
            identity,
            configsvc,
            gateway: Arc::new(builder.build()),
            router,
            signing_key_id: key.key_id.clone(),
        })
    }

    pub fn seed(&self, fixtures: &Fixtures) -> Result<(), AppError> {
        let seed = |what: &str, e: &dyn std::fmt::Display| {
            AppError::Startup(format!("seeding {what}: {e}"))
        };
        for u in &fixtures.users {
            self.identity
                .register_user(u)
                .map_err(|e| seed(&u.username, &e))?;
        }
        self.identity.wait_background();
        for m in &fixtures.members {
            self.identity
                .add_member(&m.org, &m.owner, &m.username, &m.password)
                .map_err(|e| seed(&m.username, &e))?;
        }
        for g in &fixtures.grants {
            let subject: Subject = g
                .subject
                .parse()
                .map_err(|e: String| seed(&g.subject, &e))?;
            self.policy
                .grant(&subject, &g.name, g.kind)
                .map_err(|e| seed(&g.subject, &e))?;
        }
        Ok(())
    }

    /// The service this process exposes: the gateway, or the service router
    /// in the backends shape.
    pub fn entry(&self) -> Arc<dyn Backend> {
        match &self.router {
            Some(r) => r.clone(),
            None => self.gateway.clone(),
        }
    }

    /// Opens the listening socket.
    pub fn listen(self) -> Result<Running, AppError> {
        let server = server::serve(&self.config.listen, self.entry())?;
        Ok(Running {
            system: self,
            server,
        })
    }
}

fn targets(routes: &RouteTable) -> Vec<String> {
    let mut t: Vec<String> = routes.routes().iter().map(|r| r.target.clone()).collect();
    t.sort();
    t.dedup();
    t
}

/// Uses the oldest signing key in the vault, creating one on first boot.
fn load_or_create_key(vault: &Vault) -> Result<SigningKey, AppError> {
    let startup = |e: &dyn std::fmt::Display| AppError::Startup(e.to_string());
    let ids = vault.signing_key_ids().map_err(|e| startup(&e))?;
    let mut keys = ids
        .iter()
        .map(|id| vault.get_signing_key(id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| startup(&e))?;
    keys.sort_by(|a, b| (a.created_at, &a.key_id).cmp(&(b.created_at, &b.key_id)));
    match keys.into_iter().next() {
        Some(k) => Ok(k),
        None => {
            let id = vault.create_signing_key().map_err(|e| startup(&e))?;
            vault.get_signing_key(&id).map_err(|e| startup(&e))
        }
    }
}

/// A booted system with its socket open.
pub struct Running {
    pub system: System,
    pub server: ServerHandle,
}

impl Running {
    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn wait(self) {
        self.server.wait();
    }

    pub fn shutdown(self) {
        self.server.shutdown();
    }
}

/// Builds, seeds and starts listening.
pub fn boot(config: DeploymentConfig, fixtures: Option<&Fixtures>) -> Result<Running, AppError> {
    let system = System::build(config)?;
    if let Some(f) = fixtures {
        system.seed(f)?;
    }
    system.listen()
}

/// Parses `key=value` pairs into registration personal info.
pub fn parse_personal_info(pairs: &[String]) -> Result<BTreeMap<String, String>, AppError> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| AppError::ConfigInvalid(format!("expected key=value, got {p:?}")))
        })
        .collect()
}
