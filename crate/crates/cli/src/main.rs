mod session;

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use edge_iam::app::{self, DeploymentConfig, Fixtures};
use edge_iam::bench::{self, FlowMode, FlowSpec, HarnessConfig};
use edge_iam::identity::RegistrationRequest;
use edge_iam::policy::PermissionKind;
use edge_iam::services::{GrantRequest, LoginRequest, LoginResponse, MemberRequest};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::{json, Value};

use crate::session::{default_token_file, Session, TOKEN_FILE_ENV};

const DEFAULT_GATEWAY: &str = "http://127.0.0.1:8080";

#[derive(Parser)]
#[command(name = "edge-iam", version, about = "Client for the edge IAM gateway")]
struct Cli {
    /// Base URL of the gateway.
    #[arg(long, global = true, default_value = DEFAULT_GATEWAY)]
    gateway: String,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Where the access token is kept [default: ~/.edge-iam/token].
    #[arg(long, global = true, env = TOKEN_FILE_ENV)]
    token_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway and services.
    Serve {
        /// Deployment config (JSON). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fixtures to load after boot.
        #[arg(long)]
        seed: Option<PathBuf>,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Create an account and its organization.
    Register {
        #[arg(short, long)]
        username: String,
        /// Read from stdin when omitted.
        #[arg(short, long)]
        password: Option<String>,
        /// Organization name; defaults to the username.
        #[arg(long)]
        org: Option<String>,
        /// Personal information as key=value, repeatable.
        #[arg(long = "info")]
        info: Vec<String>,
    },
    /// Obtain an access token and store it in the token file.
    Login {
        #[arg(short, long)]
        username: String,
        /// Read from stdin when omitted.
        #[arg(short, long)]
        password: Option<String>,
    },
    /// Show who the stored token belongs to.
    Whoami,
    /// Manage organization members.
    #[command(subcommand)]
    Member(MemberCommand),
    /// Grant or revoke permissions.
    #[command(subcommand)]
    Perm(PermCommand),
    /// Store and fetch configurations.
    #[command(subcommand)]
    Config(ConfigCommand),
    /// Compare request flows with and without edge authorization.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum MemberCommand {
    Add {
        org: String,
        username: String,
        /// Temporary password; read from stdin when omitted.
        #[arg(short, long)]
        password: Option<String>,
    },
    Rm {
        org: String,
        username: String,
    },
}

#[derive(Subcommand)]
enum PermCommand {
    Grant(PermArgs),
    Revoke(PermArgs),
}

#[derive(Args)]
struct PermArgs {
    /// Organization the caller owns.
    org: String,
    /// `user:<name>` or `org:<name>`.
    #[arg(long)]
    subject: String,
    /// Permission name, e.g. config.put.
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "allow", value_parser = parse_kind)]
    kind: PermissionKind,
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Upload FILE (or `-` for stdin) as namespace/name.
    Put {
        namespace: String,
        name: String,
        file: PathBuf,
    },
    /// Download namespace/name to stdout or --out.
    Get {
        namespace: String,
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run one flow.
    Run {
        #[arg(long, default_value = "with-iam")]
        mode: FlowMode,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = bench::DEFAULT_DEPTH)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long, default_value_t = 1.0)]
        authorized_fraction: f64,
        #[command(flatten)]
        harness: HarnessArgs,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both flows for each n and print the comparison table.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "10,500,1000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = bench::DEFAULT_DEPTH)]
        depth: usize,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        harness: HarnessArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct HarnessArgs {
    /// Simulated cost of one hop between services, in microseconds.
    #[arg(long)]
    hop_cost_us: Option<u64>,
    /// Use the sequential executor.
    #[arg(long)]
    sequential: bool,
}

impl HarnessArgs {
    fn config(&self) -> HarnessConfig {
        let mut cfg = HarnessConfig::default();
        if let Some(us) = self.hop_cost_us {
            cfg.hop_cost_us = us;
        }
        cfg.sequential = self.sequential;
        cfg
    }
}

fn parse_kind(s: &str) -> Result<PermissionKind, String> {
    s.to_ascii_uppercase()
        .parse()
        .map_err(|()| format!("kind must be allow or deny, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// A gateway answer.
struct Reply {
    status: u16,
    version: Option<String>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Result<Value> {
        serde_json::from_slice(&self.body).context("gateway sent a body that is not JSON")
    }
}

struct Ctx {
    http: Client,
    gateway: String,
    json: bool,
    token_file: PathBuf,
}

impl Ctx {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.gateway.trim_end_matches('/'))
    }

    fn send(&self, req: RequestBuilder) -> Result<Reply> {
        let resp = req
            .send()
            .with_context(|| format!("cannot reach gateway at {}", self.gateway))?;
        let status = resp.status().as_u16();
        let version = resp
            .headers()
            .get("x-config-version")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.bytes().context("reading response")?.to_vec();
        Ok(Reply {
            status,
            version,
            body,
        })
    }

    fn authed(&self, req: RequestBuilder) -> Result<Reply> {
        let Some(session) = Session::load(&self.token_file)? else {
            eprintln!(
                "error: login required or token expired (no token in {})",
                self.token_file.display()
            );
            return Ok(Reply {
                status: 401,
                version: None,
                body: Vec::new(),
            });
        };
        self.send(req.bearer_auth(session.access_token))
    }

    /// Prints the outcome and returns the exit code. `ok` renders a 2xx reply.
    fn finish(&self, reply: Reply, ok: impl FnOnce(&Reply) -> Result<String>) -> Result<u8> {
        if (200..300).contains(&reply.status) {
            let text = ok(&reply)?;
            if !text.is_empty() {
                println!("{text}");
            }
            return Ok(0);
        }
        let err: Value = serde_json::from_slice(&reply.body).unwrap_or(Value::Null);
        if self.json && !reply.body.is_empty() {
            println!("{err}");
        }
        let detail = match (err["code"].as_str(), err["message"].as_str()) {
            (Some(c), Some(m)) => format!("{c}: {m}"),
            _ => String::from_utf8_lossy(&reply.body).trim().to_string(),
        };
        if reply.status == 401 {
            eprintln!("error: login required or token expired ({detail})");
        } else if !reply.body.is_empty() {
            eprintln!("error: {} {detail}", reply.status);
        }
        Ok(if (400..500).contains(&reply.status) {
            1
        } else {
            2
        })
    }
}

fn read_password(given: Option<String>) -> Result<String> {
    if let Some(p) = given {
        return Ok(p);
    }
    let mut line = String::new();
    std::io::stdin()
        .lock()
        .read_line(&mut line)
        .context("reading password from stdin")?;
    let p = line.trim_end_matches(['\r', '\n']).to_string();
    if p.is_empty() {
        bail!("no password given");
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<u8> {
    let token_file = cli.token_file.clone().unwrap_or_else(default_token_file);
    let ctx = Ctx {
        http: Client::new(),
        gateway: cli.gateway.clone(),
        json: cli.json,
        token_file,
    };
    match cli.command {
        Command::Serve {
            config,
            seed,
            listen,
        } => serve(config, seed, listen),
        Command::Register {
            username,
            password,
            org,
            info,
        } => {
            let body = RegistrationRequest {
                username,
                password: read_password(password)?,
                personal_info: app::parse_personal_info(&info)?,
                org_name: org,
            };
            let reply = ctx.send(ctx.http.post(ctx.url("/api/v1/auth/register")).json(&body))?;
            ctx.finish(reply, |r| {
                let v = r.json()?;
                Ok(if ctx.json {
                    v.to_string()
                } else {
                    format!("registered {} in organization {}", v["username"], v["org"])
                        .replace('"', "")
                })
            })
        }
        Command::Login { username, password } => {
            let body = LoginRequest {
                username: username.clone(),
                password: read_password(password)?,
            };
            let reply = ctx.send(ctx.http.post(ctx.url("/api/v1/auth/login")).json(&body))?;
            ctx.finish(reply, |r| {
                let login: LoginResponse =
                    serde_json::from_slice(&r.body).context("unexpected login response")?;
                let session = Session {
                    gateway: ctx.gateway.clone(),
                    username: username.clone(),
                    access_token: login.access_token,
                    expires_at: login.expires_at,
                };
                session.save(&ctx.token_file)?;
                Ok(if ctx.json {
                    json!({
                        "username": username,
                        "expires_at": login.expires_at,
                        "token_file": ctx.token_file,
                    })
                    .to_string()
                } else {
                    format!(
                        "logged in as {username}; token expires at {}",
                        login.expires_at
                    )
                })
            })
        }
        Command::Whoami => whoami(&ctx),
        Command::Member(cmd) => member(&ctx, cmd),
        Command::Perm(cmd) => perm(&ctx, cmd),
        Command::Config(cmd) => config(&ctx, cmd),
        Command::Bench(cmd) => run_bench(&ctx, cmd),
    }
}

fn serve(config: Option<PathBuf>, seed: Option<PathBuf>, listen: Option<String>) -> Result<u8> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let mut cfg = match &config {
        Some(p) => DeploymentConfig::load(p)?,
        None => DeploymentConfig::default(),
    }
    .with_process_env()?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    let fixtures = seed.as_deref().map(Fixtures::load).transpose()?;
    let running = app::boot(cfg, fixtures.as_ref())?;
    println!("listening on {}", running.url());
    std::io::stdout().flush()?;
    running.wait();
    Ok(0)
}

fn whoami(ctx: &Ctx) -> Result<u8> {
    let Some(s) = Session::load(&ctx.token_file)? else {
        eprintln!("error: login required or token expired (not logged in)");
        return Ok(1);
    };
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)?
        .as_secs();
    let expired = now >= s.expires_at;
    if ctx.json {
        println!(
            "{}",
            json!({"username": s.username, "gateway": s.gateway, "expires_at": s.expires_at, "expired": expired})
        );
    } else {
        let state = if expired { "expired" } else { "valid" };
        println!(
            "{} at {} (token {state}, expires at {})",
            s.username, s.gateway, s.expires_at
        );
    }
    Ok(if expired { 1 } else { 0 })
}

fn member(ctx: &Ctx, cmd: MemberCommand) -> Result<u8> {
    match cmd {
        MemberCommand::Add {
            org,
            username,
            password,
        } => {
            let body = MemberRequest {
                username: username.clone(),
                temp_password: read_password(password)?,
            };
            let url = ctx.url(&format!("/api/v1/orgs/{org}/members"));
            let reply = ctx.authed(ctx.http.post(url).json(&body))?;
            ctx.finish(reply, |r| {
                Ok(if ctx.json {
                    r.json()?.to_string()
                } else {
                    format!("added {username} to {org}")
                })
            })
        }
        MemberCommand::Rm { org, username } => {
            let url = ctx.url(&format!("/api/v1/orgs/{org}/members/{username}"));
            let reply = ctx.authed(ctx.http.delete(url))?;
            ctx.finish(reply, |_| {
                Ok(if ctx.json {
                    json!({"removed": username, "org": org}).to_string()
                } else {
                    format!("removed {username} from {org}")
                })
            })
        }
    }
}

fn perm(ctx: &Ctx, cmd: PermCommand) -> Result<u8> {
    let (revoke, args) = match cmd {
        PermCommand::Grant(a) => (false, a),
        PermCommand::Revoke(a) => (true, a),
    };
    let body = GrantRequest {
        subject: args.subject.clone(),
        name: args.name.clone(),
        kind: args.kind,
    };
    let url = ctx.url(&format!("/api/v1/orgs/{}/permissions", args.org));
    let req = if revoke {
        ctx.http.delete(url)
    } else {
        ctx.http.post(url)
    };
    let reply = ctx.authed(req.json(&body))?;
    ctx.finish(reply, |r| {
        Ok(match (ctx.json, revoke) {
            (true, false) => r.json()?.to_string(),
            (true, true) => json!({"revoked": body}).to_string(),
            (false, false) => format!(
                "granted {} {} to {}",
                body.kind.as_str(),
                body.name,
                body.subject
            ),
            (false, true) => format!(
                "revoked {} {} from {}",
                body.kind.as_str(),
                body.name,
                body.subject
            ),
        })
    })
}

fn config(ctx: &Ctx, cmd: ConfigCommand) -> Result<u8> {
    match cmd {
        ConfigCommand::Put {
            namespace,
            name,
            file,
        } => {
            let payload = read_payload(&file)?;
            let url = ctx.url(&format!("/api/v1/configs/{namespace}/{name}"));
            let reply = ctx.authed(ctx.http.put(url).body(payload))?;
            ctx.finish(reply, |r| {
                let v = r.json()?;
                Ok(if ctx.json {
                    v.to_string()
                } else {
                    format!("version {}", v["version"])
                })
            })
        }
        ConfigCommand::Get {
            namespace,
            name,
            out,
        } => {
            let url = ctx.url(&format!("/api/v1/configs/{namespace}/{name}"));
            let reply = ctx.authed(ctx.http.get(url))?;
            ctx.finish(reply, |r| {
                if let Some(path) = &out {
                    std::fs::write(path, &r.body)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
                if ctx.json {
                    let version: Option<u64> = r.version.as_deref().and_then(|v| v.parse().ok());
                    return Ok(json!({
                        "namespace": namespace,
                        "name": name,
                        "version": version,
                        "payload_base64": STANDARD.encode(&r.body),
                    })
                    .to_string());
                }
                if out.is_none() {
                    std::io::stdout().write_all(&r.body)?;
                }
                Ok(String::new())
            })
        }
    }
}

fn read_payload(file: &Path) -> Result<Vec<u8>> {
    if file == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    std::fs::read(file).with_context(|| format!("reading {}", file.display()))
}

fn run_bench(ctx: &Ctx, cmd: BenchCommand) -> Result<u8> {
    match cmd {
        BenchCommand::Run {
            mode,
            n,
            depth,
            concurrency,
            authorized_fraction,
            harness,
            out,
        } => {
            let spec = FlowSpec {
                mode,
                n_requests: n,
                chain_depth: depth,
                concurrency,
                authorized_fraction,
            };
            let metrics = bench::run_flow(&spec, &harness.config())?;
            let json = serde_json::to_string_pretty(&metrics)?;
            if let Some(path) = out {
                std::fs::write(&path, &json)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if ctx.json {
                println!("{json}");
            } else {
                print!("{}", metrics.to_text());
            }
            Ok(0)
        }
        BenchCommand::Compare {
            n,
            depth,
            concurrency,
            trials,
            harness,
            out,
        } => {
            let mut cfg = harness.config();
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let report = bench::compare_flows(&n, depth, concurrency, &cfg)?;
            if let Some(path) = out {
                std::fs::write(&path, report.to_json())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            if ctx.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            Ok(0)
        }
    }
}
