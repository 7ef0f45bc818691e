//! Local service mesh: each service runs on its own worker threads and is
//! reached by JSON messages over channels. A call costs a serialization, a
//! thread hand-off and a reply, the same shape as a hop between processes.
//!
//! The benchmark wires the policy engine and a chain of services this way.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, unbounded, Sender};
use serde::{Deserialize, Serialize};

use crate::configsvc::IngressAuth;
use crate::gateway::RouteTable;
use crate::http::{Backend, Request, Response, TransportError};
use crate::policy::{
    CheckRequest, Decision, ListRequest, PermissionKind, PermissionList, PolicyEngine, PolicyError,
    PolicyService, Subject,
};

struct Envelope {
    payload: Vec<u8>,
    reply: Sender<Vec<u8>>,
}

/// Handle to a running actor. Workers exit once every handle is dropped.
#[derive(Clone)]
pub struct Actor {
    name: Arc<str>,
    tx: Sender<Envelope>,
}

impl Actor {
    /// Starts `workers` threads serving `handler`. A non-zero `hop_cost` is
    /// slept by the worker before each message, standing in for the network
    /// and framing cost of a real hop.
    pub fn spawn<H>(name: &str, workers: usize, hop_cost: Duration, handler: H) -> Self
    where
        H: Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    {
        let (tx, rx) = unbounded::<Envelope>();
        let handler = Arc::new(handler);
        for i in 0..workers.max(1) {
            let rx = rx.clone();
            let handler = handler.clone();
            std::thread::Builder::new()
                .name(format!("{name}-{i}"))
                .spawn(move || {
                    while let Ok(env) = rx.recv() {
                        if !hop_cost.is_zero() {
                            std::thread::sleep(hop_cost);
                        }
                        let out = handler(&env.payload);
                        let _ = env.reply.send(out);
                    }
                })
                .expect("spawn actor worker");
        }
        Self {
            name: name.into(),
            tx,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn request(&self, payload: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        let (reply, rx) = bounded(1);
        self.tx
            .send(Envelope { payload, reply })
            .map_err(|_| TransportError(format!("{} is down", self.name)))?;
        rx.recv()
            .map_err(|_| TransportError(format!("{} dropped the request", self.name)))
    }
}

/// A [`Backend`] hosted on an actor.
#[derive(Clone)]
pub struct ActorBackend(Actor);

impl ActorBackend {
    pub fn spawn(
        name: &str,
        workers: usize,
        hop_cost: Duration,
        backend: Arc<dyn Backend>,
    ) -> Self {
        Self(Actor::spawn(name, workers, hop_cost, move |bytes| {
            let resp = match serde_json::from_slice::<Request>(bytes) {
                Ok(req) => backend
                    .call(req)
                    .unwrap_or_else(|e| Response::error(502, "BackendUnavailable", e.0, "")),
                Err(e) => Response::error(400, "BadMessage", e.to_string(), ""),
            };
            serde_json::to_vec(&resp).expect("response serializes")
        }))
    }
}

impl Backend for ActorBackend {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        let bytes = serde_json::to_vec(&req).expect("request serializes");
        let out = self.0.request(bytes)?;
        serde_json::from_slice(&out).map_err(|e| TransportError(e.to_string()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
enum PolicyCall {
    List(ListRequest),
    Check(CheckRequest),
}

#[derive(Debug, Serialize, Deserialize)]
enum PolicyReply {
    List(PermissionList),
    Check(Decision),
    UnknownSubject(Subject),
    Error(String),
}

/// Client side of the policy engine hosted on an actor.
#[derive(Clone)]
pub struct PolicyClient(Actor);

impl PolicyClient {
    pub fn spawn(engine: Arc<PolicyEngine>, workers: usize, hop_cost: Duration) -> Self {
        Self(Actor::spawn("policy", workers, hop_cost, move |bytes| {
            let reply = match serde_json::from_slice::<PolicyCall>(bytes) {
                Ok(PolicyCall::List(req)) => match PolicyService::list(&*engine, &req) {
                    Ok(list) => PolicyReply::List(list),
                    Err(PolicyError::UnknownSubject(s)) => PolicyReply::UnknownSubject(s),
                    Err(e) => PolicyReply::Error(e.to_string()),
                },
                Ok(PolicyCall::Check(req)) => {
                    PolicyReply::Check(PolicyService::check(&*engine, &req))
                }
                Err(e) => PolicyReply::Error(e.to_string()),
            };
            serde_json::to_vec(&reply).expect("reply serializes")
        }))
    }

    fn call(&self, call: &PolicyCall) -> Result<PolicyReply, PolicyError> {
        let out = self
            .0
            .request(serde_json::to_vec(call).expect("call serializes"))
            .map_err(|e| PolicyError::Unavailable(e.0))?;
        serde_json::from_slice(&out).map_err(|e| PolicyError::Unavailable(e.to_string()))
    }
}

impl PolicyService for PolicyClient {
    fn list(&self, req: &ListRequest) -> Result<PermissionList, PolicyError> {
        match self.call(&PolicyCall::List(req.clone()))? {
            PolicyReply::List(l) => Ok(l),
            PolicyReply::UnknownSubject(s) => Err(PolicyError::UnknownSubject(s)),
            PolicyReply::Error(e) => Err(PolicyError::Unavailable(e)),
            PolicyReply::Check(_) => Err(PolicyError::Unavailable("unexpected reply".into())),
        }
    }

    fn check(&self, req: &CheckRequest) -> Decision {
        match self.call(&PolicyCall::Check(req.clone())) {
            Ok(PolicyReply::Check(d)) => d,
            other => {
                tracing::warn!(target: "audit", user = %req.user, "policy check failed: {other:?}");
                Decision {
                    decision: PermissionKind::Deny,
                }
            }
        }
    }
}

/// An intermediate service in a request chain: authorizes the call it
/// received, then calls the next service with the same request.
pub struct RelayService {
    auth: IngressAuth,
    required: Required,
    next: Arc<dyn Backend>,
    invocations: AtomicU64,
}

enum Required {
    Fixed(String),
    ByRoute(RouteTable),
}

impl RelayService {
    /// Requires `required` on every call.
    pub fn new(auth: IngressAuth, required: &str, next: Arc<dyn Backend>) -> Self {
        Self::with(auth, Required::Fixed(required.to_string()), next)
    }

    /// Requires whatever permission the matching route requires.
    pub fn by_route(auth: IngressAuth, routes: RouteTable, next: Arc<dyn Backend>) -> Self {
        Self::with(auth, Required::ByRoute(routes), next)
    }

    fn with(auth: IngressAuth, required: Required, next: Arc<dyn Backend>) -> Self {
        Self {
            auth,
            required,
            next,
            invocations: AtomicU64::new(0),
        }
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::SeqCst);
    }
}

impl Backend for RelayService {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let name = match &self.required {
            Required::Fixed(n) => n.as_str(),
            Required::ByRoute(t) => match t.find(&req).and_then(|r| r.required()) {
                Some(n) => n,
                None => return self.next.call(req),
            },
        };
        match self.auth.authorize(&req, name) {
            Ok(_) => self.next.call(req),
            Err(refusal) => Ok(refusal),
        }
    }
}
