//! Minimal HTTP+JSON plumbing shared by the services and the agent.
//!
//! Services implement [`Endpoint`], a synchronous request handler. The same
//! handler can be mounted on a loopback socket with [`serve`] or called
//! directly through a [`LocalChannel`]. The session cookie is always named
//! `sid`.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const COOKIE_NAME: &str = "sid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Get => "GET",
            Method::Post => "POST",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub method: Method,
    pub path: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub query: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cookie: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub body: Value,
}

impl Request {
    pub fn get(path: &str) -> Self {
        Request { method: Method::Get, path: path.to_string(), query: BTreeMap::new(), cookie: None, body: Value::Null }
    }

    pub fn post(path: &str, body: Value) -> Self {
        Request { method: Method::Post, path: path.to_string(), query: BTreeMap::new(), cookie: None, body }
    }

    pub fn with_query(mut self, key: &str, value: impl Into<String>) -> Self {
        self.query.insert(key.to_string(), value.into());
        self
    }

    pub fn with_cookie(mut self, cookie: Option<String>) -> Self {
        self.cookie = cookie;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_cookie: Option<String>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub body: Value,
}

impl Response {
    pub fn ok(body: Value) -> Self {
        Response { status: 200, location: None, set_cookie: None, body }
    }

    pub fn redirect(location: &str) -> Self {
        Response { status: 302, location: Some(location.to_string()), set_cookie: None, body: Value::Null }
    }

    /// `{"result": "Fail", "error": <error>}` with the given status.
    pub fn fail(status: u16, error: &str) -> Self {
        Response::with_status(status, serde_json::json!({"result": "Fail", "error": error}))
    }

    pub fn with_status(status: u16, body: Value) -> Self {
        Response { status, location: None, set_cookie: None, body }
    }

    pub fn with_set_cookie(mut self, cookie: Option<String>) -> Self {
        self.set_cookie = cookie;
        self
    }

    /// The `error` field of a failure body.
    pub fn error(&self) -> Option<&str> {
        self.body.get("error").and_then(Value::as_str)
    }
}

pub trait Endpoint: Send + Sync {
    fn handle(&self, req: &Request) -> Response;
}

impl<E: Endpoint + ?Sized> Endpoint for Arc<E> {
    fn handle(&self, req: &Request) -> Response {
        (**self).handle(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: Request,
    pub response: Response,
}

/// Logs every request an endpoint receives together with its reply.
pub struct RecordingEndpoint<E> {
    inner: E,
    log: Mutex<Vec<Exchange>>,
}

impl<E: Endpoint> RecordingEndpoint<E> {
    pub fn new(inner: E) -> Self {
        RecordingEndpoint { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn take_log(&self) -> Vec<Exchange> {
        std::mem::take(&mut *self.log.lock())
    }

    pub fn log_len(&self) -> usize {
        self.log.lock().len()
    }
}

impl<E: Endpoint> Endpoint for RecordingEndpoint<E> {
    fn handle(&self, req: &Request) -> Response {
        let response = self.inner.handle(req);
        self.log.lock().push(Exchange { request: req.clone(), response: response.clone() });
        response
    }
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("undecodable response: {0}")]
    Decode(String),
}

/// Something that delivers requests to one origin.
pub trait Channel: Send + Sync {
    fn origin(&self) -> &str;
    fn send(&self, req: &Request) -> Result<Response, ChannelError>;
}

/// Calls an in-process endpoint. Requests still round-trip through JSON so
/// both transports see byte-identical bodies.
pub struct LocalChannel {
    origin: String,
    endpoint: Arc<dyn Endpoint>,
}

impl LocalChannel {
    pub fn new(origin: &str, endpoint: Arc<dyn Endpoint>) -> Self {
        LocalChannel { origin: origin.to_string(), endpoint }
    }
}

impl Channel for LocalChannel {
    fn origin(&self) -> &str {
        &self.origin
    }

    fn send(&self, req: &Request) -> Result<Response, ChannelError> {
        let wire = serde_json::to_vec(req).map_err(|e| ChannelError::Transport(e.to_string()))?;
        let req: Request = serde_json::from_slice(&wire).map_err(|e| ChannelError::Transport(e.to_string()))?;
        Ok(self.endpoint.handle(&req))
    }
}

/// Blocking HTTP client for one origin. Redirects are returned, not followed.
pub struct HttpChannel {
    origin: String,
    client: reqwest::blocking::Client,
}

impl HttpChannel {
    pub fn new(origin: &str) -> Result<Self, ChannelError> {
        let client = reqwest::blocking::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .map_err(|e| ChannelError::Transport(e.to_string()))?;
        Ok(HttpChannel { origin: origin.trim_end_matches('/').to_string(), client })
    }
}

impl Channel for HttpChannel {
    fn origin(&self) -> &str {
        &self.origin
    }

    fn send(&self, req: &Request) -> Result<Response, ChannelError> {
        let url = format!("{}{}", self.origin, req.path);
        let mut builder = match req.method {
            Method::Get => self.client.get(&url),
            Method::Post => self.client.post(&url).json(&req.body),
        };
        if !req.query.is_empty() {
            builder = builder.query(&req.query);
        }
        if let Some(c) = &req.cookie {
            builder = builder.header(reqwest::header::COOKIE, format!("{COOKIE_NAME}={c}"));
        }
        let resp = builder.send().map_err(|e| ChannelError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let header = |name| resp.headers().get(name).and_then(|v: &reqwest::header::HeaderValue| v.to_str().ok()).map(str::to_string);
        let location = header(reqwest::header::LOCATION);
        let set_cookie = header(reqwest::header::SET_COOKIE).and_then(|v| parse_cookie(&v));
        let bytes = resp.bytes().map_err(|e| ChannelError::Transport(e.to_string()))?;
        let body =
            if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).map_err(|e| ChannelError::Decode(e.to_string()))? };
        Ok(Response { status, location, set_cookie, body })
    }
}

/// Extracts the `sid` value from a `Cookie` or `Set-Cookie` header.
pub fn parse_cookie(header: &str) -> Option<String> {
    header.split(';').find_map(|part| {
        let (k, v) = part.trim().split_once('=')?;
        (k == COOKIE_NAME && !v.is_empty()).then(|| v.to_string())
    })
}

/// `scheme://host[:port]` of an absolute URL.
pub fn origin_of(url: &str) -> Option<String> {
    let parsed = url::Url::parse(url).ok()?;
    match parsed.origin() {
        o @ url::Origin::Tuple(..) => Some(o.ascii_serialization()),
        url::Origin::Opaque(_) => None,
    }
}

/// A running loopback server. Dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn origin(&self) -> String {
        format!("http://{}", self.addr)
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
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `endpoint` on an already-bound listener from a background thread.
pub fn serve(listener: TcpListener, endpoint: Arc<dyn Endpoint>) -> std::io::Result<ServerHandle> {
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(format!("http-{addr}")).spawn(move || {
        runtime.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("listener {addr}: {e}");
                    return;
                }
            };
            let app = axum::Router::new().fallback(dispatch).with_state(endpoint);
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                eprintln!("server {addr}: {e}");
            }
        });
    })?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

async fn dispatch(
    axum::extract::State(endpoint): axum::extract::State<Arc<dyn Endpoint>>,
    method: axum::http::Method,
    uri: axum::http::Uri,
    headers: axum::http::HeaderMap,
    body: axum::body::Bytes,
) -> axum::response::Response {
    use axum::http::{header, StatusCode};
    use axum::response::IntoResponse;

    let method = match method {
        axum::http::Method::GET => Method::Get,
        axum::http::Method::POST => Method::Post,
        _ => return StatusCode::METHOD_NOT_ALLOWED.into_response(),
    };
    let query = uri.query().map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect()).unwrap_or_default();
    let cookie = headers.get(header::COOKIE).and_then(|v| v.to_str().ok()).and_then(parse_cookie);
    let body = if body.is_empty() {
        Value::Null
    } else {
        match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(_) => return Response::fail(400, "MalformedRequest").into_axum(),
        }
    };
    let req = Request { method, path: uri.path().to_string(), query, cookie, body };
    match tokio::task::spawn_blocking(move || endpoint.handle(&req)).await {
        Ok(resp) => resp.into_axum(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

impl Response {
    fn into_axum(self) -> axum::response::Response {
        use axum::http::{header, HeaderValue, StatusCode};
        let mut out = axum::response::Response::new(axum::body::Body::from(if self.body.is_null() {
            Vec::new()
        } else {
            serde_json::to_vec(&self.body).expect("json value serializes")
        }));
        *out.status_mut() = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let headers = out.headers_mut();
        if !self.body.is_null() {
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
        }
        if let Some(loc) = self.location.and_then(|l| HeaderValue::from_str(&l).ok()) {
            headers.insert(header::LOCATION, loc);
        }
        if let Some(c) = self.set_cookie.and_then(|c| HeaderValue::from_str(&format!("{COOKIE_NAME}={c}; Path=/; HttpOnly")).ok()) {
            headers.insert(header::SET_COOKIE, c);
        }
        out
    }
}
