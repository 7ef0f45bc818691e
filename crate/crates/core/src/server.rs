//! HTTP transport: an axum front end for any [`Backend`], a [`Backend`] that
//! forwards over HTTP, and a router that dispatches by route target.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use tokio::sync::oneshot;

use crate::gateway::RouteTable;
use crate::http::{Backend, Request, Response, TransportError};
use crate::services::request_id;

const MAX_BODY: usize = 4 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    PortInUse(String),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("runtime: {0}")]
    Runtime(#[from] std::io::Error),
}

/// A server running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    // Held so the last reference is dropped outside the runtime; blocking
    // HTTP clients inside the backend must not be dropped on async threads.
    backend: Option<Arc<dyn Backend>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.backend.take();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `listen` and serves `backend` on a background thread.
pub fn serve(listen: &str, backend: Arc<dyn Backend>) -> Result<ServerHandle, ServeError> {
    let std_listener = std::net::TcpListener::bind(listen).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ServeError::PortInUse(listen.to_string())
        } else {
            ServeError::Bind {
                addr: listen.to_string(),
                source: e,
            }
        }
    })?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("http")
        .build()?;
    let (tx, rx) = oneshot::channel();
    let app = axum::Router::new()
        .fallback(dispatch)
        .with_state(backend.clone());
    let thread = std::thread::Builder::new()
        .name(format!("server-{addr}"))
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(std_listener) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::error!("listener: {e}");
                        return;
                    }
                };
                let shutdown = async {
                    let _ = rx.await;
                };
                if let Err(e) = axum::serve(listener, app)
                    .with_graceful_shutdown(shutdown)
                    .await
                {
                    tracing::error!("server stopped: {e}");
                }
            });
            runtime.shutdown_timeout(Duration::from_secs(5));
        })?;
    tracing::info!(%addr, "listening");
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
        backend: Some(backend),
    })
}

async fn dispatch(
    State(backend): State<Arc<dyn Backend>>,
    req: axum::http::Request<Body>,
) -> axum::response::Response {
    let (parts, body) = req.into_parts();
    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b.to_vec(),
        Err(_) => {
            return into_axum(Response::error(
                413,
                "PayloadTooLarge",
                "body too large",
                "",
            ))
        }
    };
    let path = parts
        .uri
        .path_and_query()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| parts.uri.path().to_string());
    let mut request = Request::new(parts.method.as_str(), &path).with_body(body);
    for (name, value) in &parts.headers {
        if let Ok(v) = value.to_str() {
            request
                .headers
                .insert(name.as_str().to_string(), v.to_string());
        }
    }
    let resp = tokio::task::spawn_blocking(move || backend.call(request)).await;
    let resp = match resp {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Response::error(502, "BackendUnavailable", e.0, ""),
        Err(e) => Response::error(500, "Internal", e.to_string(), ""),
    };
    into_axum(resp)
}

fn into_axum(resp: Response) -> axum::response::Response {
    let mut out = axum::response::Response::new(Body::from(resp.body));
    *out.status_mut() =
        StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (k, v) in resp.headers {
        if let (Ok(name), Ok(value)) = (HeaderName::try_from(k), HeaderValue::try_from(v)) {
            out.headers_mut().insert(name, value);
        }
    }
    out
}

/// Forwards requests to another process over HTTP.
pub struct HttpBackend {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Must be called outside any async runtime.
    pub fn new(base: &str) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
        })
    }
}

impl Backend for HttpBackend {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        let method = reqwest::Method::from_bytes(req.method.as_bytes())
            .map_err(|e| TransportError(e.to_string()))?;
        let mut builder = self
            .client
            .request(method, format!("{}{}", self.base, req.path))
            .body(req.body);
        for (k, v) in &req.headers {
            if k != "host" && k != "content-length" {
                builder = builder.header(k, v);
            }
        }
        let resp = builder.send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .bytes()
            .map_err(|e| TransportError(e.to_string()))?
            .to_vec();
        Ok(Response {
            status,
            headers,
            body,
        })
    }
}

/// Dispatches to a service by the target of the matching route. This is the
/// entry point of the backends process in the multi-process shape.
pub struct ServiceRouter {
    routes: RouteTable,
    targets: HashMap<String, Arc<dyn Backend>>,
}

impl ServiceRouter {
    pub fn new(routes: RouteTable) -> Self {
        Self {
            routes,
            targets: HashMap::new(),
        }
    }

    pub fn target(mut self, name: &str, backend: Arc<dyn Backend>) -> Self {
        self.targets.insert(name.to_string(), backend);
        self
    }
}

impl Backend for ServiceRouter {
    fn call(&self, req: Request) -> Result<Response, TransportError> {
        let Some(route) = self.routes.find(&req) else {
            return Ok(Response::error(
                404,
                "UnknownRoute",
                "no route for this method and path",
                &request_id(&req),
            ));
        };
        match self.targets.get(&route.target) {
            Some(b) => b.call(req),
            None => Ok(Response::error(
                502,
                "BackendUnavailable",
                format!("no service {}", route.target),
                &request_id(&req),
            )),
        }
    }
}
