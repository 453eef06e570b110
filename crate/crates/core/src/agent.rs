//! Headless user agent.
//!
//! A browser is modeled as windows with origins and a message bus that
//! honours `postMessage` target-origin restrictions. Two scripts run in it:
//! the IdP script (in the IdP window) and the RP script (in the RP window).
//! Both are pure state machines: [`idp_script_step`] and [`rp_script_step`]
//! map `(state, input)` to `(state', commands)` and never perform I/O. The
//! [`run_login_flow`] driver executes the commands: it delivers bus messages,
//! sends each script's XHRs to that script's own origin, and follows window
//! navigation.
//!
//! Scripts are "downloaded" by fetching `GET /script` and instantiating the
//! state machine named by the descriptor, so the RP script never contacts the
//! IdP origin.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::crypto::{hash, hash_scalar, PublicKey};
use crate::group::{GroupId, GroupParams, Scalar};
use crate::http::{origin_of, Channel, Exchange, Request, Response};
use crate::idp::{Credential, IDP_SCRIPT_NAME, SCRIPT_VERSION};
use crate::rng::random_hex;
use crate::rp::{TokenRequest, RP_SCRIPT_NAME};
use crate::token::{verify_cert, IdentityToken, PidRegistrationRequest, PidRegistrationResult, RegistrationStatus, RpCertificate};
use crate::transform::{derive_pid_rp, Account, RpPseudoId, Trapdoor, UserPseudoId};

pub type WindowId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScriptInput {
    /// Self-trigger after the script loads.
    Trigger,
    Message {
        origin: String,
        content: Value,
    },
    XhrResponse {
        ref_id: u64,
        status: u16,
        body: Value,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    /// The window that opened this one.
    Parent,
    /// The first window this one opened.
    Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Command {
    PostMessage {
        target: Target,
        content: Value,
        origin: Option<String>,
    },
    /// An XHR to the script's own origin.
    Xhr {
        ref_id: u64,
        request: Request,
    },
    OpenWindow {
        path: String,
    },
    LoadHomepage {
        account: Option<String>,
    },
    Halt {
        step: String,
        reason: String,
    },
}

fn fork_rng(seed: &[u8; 32], counter: &mut u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::from_seed(*seed);
    rng.set_stream(*counter);
    *counter += 1;
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdpPhase {
    Start,
    ExpectCert,
    ExpectRegistrationResult,
    ExpectTokenRequest,
    ExpectLoginState,
    ExpectLoginResult,
    ExpectToken,
    Stop,
}

/// Values the IdP script accumulates during one login.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdpScriptParams {
    pub t: Option<Trapdoor>,
    pub cert: Option<RpCertificate>,
    pub pid_rp: Option<RpPseudoId>,
    pub pseudo_endpoint: Option<String>,
    pub rp_endpoint: Option<String>,
    pub nonce: Option<String>,
    /// The identity-token request as sent to the IdP.
    pub authorize: Option<TokenRequest>,
    pub token: Option<IdentityToken>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdpScriptState {
    pub phase: IdpPhase,
    pub idp_origin: String,
    pub public_key: PublicKey,
    pub group: GroupParams,
    pub plain: bool,
    pub credential: Credential,
    /// Forces the trapdoor instead of drawing it; only for negative controls.
    pub fixed_t: Option<Scalar>,
    pub params: IdpScriptParams,
    pub ref_xhr: Option<u64>,
    seed: [u8; 32],
    counter: u64,
}

impl IdpScriptState {
    pub fn new(idp_origin: &str, public_key: PublicKey, group: GroupId, credential: Credential, seed: [u8; 32]) -> Self {
        IdpScriptState {
            phase: IdpPhase::Start,
            idp_origin: idp_origin.to_string(),
            public_key,
            group: GroupParams::new(group),
            plain: false,
            credential,
            fixed_t: None,
            params: IdpScriptParams::default(),
            ref_xhr: None,
            seed,
            counter: 0,
        }
    }

    fn xhr(&mut self, request: Request) -> Command {
        let ref_id = fork_rng(&self.seed, &mut self.counter).next_u64();
        self.ref_xhr = Some(ref_id);
        Command::Xhr { ref_id, request }
    }

    fn halt(&mut self, step: &str, reason: impl Into<String>) -> Option<Vec<Command>> {
        self.phase = IdpPhase::Stop;
        Some(vec![Command::Halt { step: step.to_string(), reason: reason.into() }])
    }

    fn authorize_request(&self) -> Request {
        let a = self.params.authorize.as_ref().expect("set before authentication");
        Request::get("/authorize")
            .with_query("PID_RP", a.pid_rp.to_string())
            .with_query("Enpt", a.endpoint.clone())
            .with_query("Nonce", a.nonce.clone())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("token request names endpoint {requested}, certificate says {certified}")]
pub struct EndpointMismatch {
    pub requested: String,
    pub certified: String,
}

/// Replaces `Enpt_RP` with `PEnpt_U` after checking it against the certificate.
pub fn endpoint_substitution(request: &TokenRequest, cert_endpoint: &str, pseudo_endpoint: &str) -> Result<TokenRequest, EndpointMismatch> {
    if request.endpoint != cert_endpoint {
        return Err(EndpointMismatch { requested: request.endpoint.clone(), certified: cert_endpoint.to_string() });
    }
    Ok(TokenRequest { endpoint: pseudo_endpoint.to_string(), ..request.clone() })
}

fn xhr_body(input: &ScriptInput, expected: Option<u64>) -> Option<&Value> {
    match input {
        ScriptInput::XhrResponse { ref_id, body, .. } if Some(*ref_id) == expected => Some(body),
        _ => None,
    }
}

fn message_with<'a>(input: &'a ScriptInput, key: &str) -> Option<&'a Value> {
    match input {
        ScriptInput::Message { content, .. } if content.get(key).is_some() => Some(content),
        _ => None,
    }
}

/// One IdP-script transition. Inputs that do not match the current phase
/// leave the state unchanged and emit nothing.
pub fn idp_script_step(state: &IdpScriptState, input: &ScriptInput) -> (IdpScriptState, Vec<Command>) {
    let mut next = state.clone();
    match idp_transition(&mut next, input) {
        Some(commands) => (next, commands),
        None => (state.clone(), Vec::new()),
    }
}

fn idp_transition(s: &mut IdpScriptState, input: &ScriptInput) -> Option<Vec<Command>> {
    match s.phase {
        IdpPhase::Start => {
            if *input != ScriptInput::Trigger {
                return None;
            }
            let content = if s.plain {
                json!({ "t": Value::Null })
            } else {
                let t = match s.fixed_t {
                    Some(t) => match Trapdoor::new(t) {
                        Ok(t) => t,
                        Err(e) => return s.halt("2.1", e.to_string()),
                    },
                    None => Trapdoor::random(&s.group, &mut fork_rng(&s.seed, &mut s.counter)),
                };
                s.params.t = Some(t);
                json!({ "t": t.value().to_string() })
            };
            s.phase = IdpPhase::ExpectCert;
            Some(vec![Command::PostMessage { target: Target::Parent, content, origin: None }])
        }
        IdpPhase::ExpectCert => {
            let content = message_with(input, "Cert")?;
            let cert = match RpCertificate::from_json(&content["Cert"]) {
                Ok(c) => c,
                Err(e) => return s.halt("2.3", format!("certificate: {e}")),
            };
            if cert.content.id_rp.params() != s.group || !verify_cert(&cert, &s.public_key) {
                return s.halt("2.3", "certificate does not verify under the IdP key");
            }
            if s.plain {
                s.params.pid_rp = Some(RpPseudoId::new(*cert.content.id_rp.point()).expect("RP ids are never the identity"));
                s.params.cert = Some(cert);
                s.phase = IdpPhase::ExpectTokenRequest;
                return Some(Vec::new());
            }
            let t = s.params.t.expect("drawn at start");
            let pid_rp = match derive_pid_rp(&cert.content.id_rp, &t) {
                Ok(p) => p,
                Err(e) => return s.halt("2.3", e.to_string()),
            };
            let pseudo_endpoint = random_hex(&mut fork_rng(&s.seed, &mut s.counter), 16);
            let request = PidRegistrationRequest { pid_rp, pseudo_endpoint: pseudo_endpoint.clone(), nonce: hash_scalar(t.value()) };
            s.params.cert = Some(cert);
            s.params.pid_rp = Some(pid_rp);
            s.params.pseudo_endpoint = Some(pseudo_endpoint);
            s.phase = IdpPhase::ExpectRegistrationResult;
            let body = serde_json::to_value(&request).expect("request serializes");
            Some(vec![s.xhr(Request::post("/dynamicRegistration", body))])
        }
        IdpPhase::ExpectRegistrationResult => {
            let body = xhr_body(input, s.ref_xhr)?;
            let raw = &body["RegistrationResult"];
            let result = match PidRegistrationResult::from_json(raw) {
                Ok(r) => r,
                Err(_) => return s.halt("3.2", format!("no registration result: {body}")),
            };
            if result.content.status != RegistrationStatus::Ok {
                return s.halt("3", "PID_RP registration refused");
            }
            s.phase = IdpPhase::ExpectTokenRequest;
            Some(vec![Command::PostMessage { target: Target::Parent, content: json!({ "RegistrationResult": raw }), origin: None }])
        }
        IdpPhase::ExpectTokenRequest => {
            let content = message_with(input, "PID_RP")?;
            let request: TokenRequest = match serde_json::from_value(content.clone()) {
                Ok(r) => r,
                Err(e) => return s.halt("4.1", format!("token request: {e}")),
            };
            if Some(request.pid_rp) != s.params.pid_rp {
                return s.halt("4.1", "PID_RP differs from the registered one");
            }
            let cert_endpoint = s.params.cert.as_ref().expect("verified before").content.endpoint.clone();
            let target = if s.plain { cert_endpoint.clone() } else { s.params.pseudo_endpoint.clone().expect("set with PID_RP") };
            let outgoing = match endpoint_substitution(&request, &cert_endpoint, &target) {
                Ok(r) => r,
                Err(e) => return s.halt("4.1", e.to_string()),
            };
            s.params.rp_endpoint = Some(request.endpoint);
            s.params.nonce = Some(request.nonce);
            s.params.authorize = Some(outgoing);
            s.phase = IdpPhase::ExpectLoginState;
            Some(vec![s.xhr(Request::get("/loginInfo"))])
        }
        IdpPhase::ExpectLoginState => {
            let body = xhr_body(input, s.ref_xhr)?;
            match body["result"].as_str() {
                Some("Unlogged") => {
                    s.phase = IdpPhase::ExpectLoginResult;
                    let body = json!({ "credential": s.credential });
                    Some(vec![s.xhr(Request::post("/login", body))])
                }
                Some("Logged") => {
                    s.phase = IdpPhase::ExpectToken;
                    let req = s.authorize_request();
                    Some(vec![s.xhr(req)])
                }
                _ => s.halt("4.2", format!("login state: {body}")),
            }
        }
        IdpPhase::ExpectLoginResult => {
            let body = xhr_body(input, s.ref_xhr)?;
            if body["result"] != "LoginSuccess" {
                return s.halt("4.2", "authentication failed");
            }
            s.phase = IdpPhase::ExpectToken;
            let req = s.authorize_request();
            Some(vec![s.xhr(req)])
        }
        IdpPhase::ExpectToken => {
            let body = xhr_body(input, s.ref_xhr)?;
            if body["result"] != "OK" {
                return s.halt("4.3", format!("token refused: {}", body["error"]));
            }
            let token = match IdentityToken::from_json(&body["Token"]) {
                Ok(t) => t,
                Err(e) => return s.halt("4.3", e.to_string()),
            };
            let addressed_to = s.params.authorize.as_ref().map(|a| a.endpoint.as_str());
            if body["Enpt"].as_str() != addressed_to {
                return s.halt("4.4", "token addressed to another endpoint");
            }
            let rp_origin = match s.params.rp_endpoint.as_deref().and_then(origin_of) {
                Some(o) => o,
                None => return s.halt("5.1", "RP endpoint has no origin"),
            };
            s.params.token = Some(token);
            s.phase = IdpPhase::Stop;
            Some(vec![Command::PostMessage { target: Target::Parent, content: json!({ "Token": body["Token"] }), origin: Some(rp_origin) }])
        }
        IdpPhase::Stop => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpPhase {
    Start,
    ExpectT,
    ExpectCert,
    ExpectRegistrationResult,
    ExpectTokenRequest,
    ExpectToken,
    ExpectLoginResult,
    Done,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpScriptState {
    pub phase: RpPhase,
    pub idp_origin: String,
    pub ref_xhr: Option<u64>,
    seed: [u8; 32],
    counter: u64,
}

impl RpScriptState {
    pub fn new(idp_origin: &str, seed: [u8; 32]) -> Self {
        RpScriptState { phase: RpPhase::Start, idp_origin: idp_origin.to_string(), ref_xhr: None, seed, counter: 0 }
    }

    fn xhr(&mut self, request: Request) -> Command {
        let ref_id = fork_rng(&self.seed, &mut self.counter).next_u64();
        self.ref_xhr = Some(ref_id);
        Command::Xhr { ref_id, request }
    }

    fn to_idp(&self, content: Value) -> Command {
        Command::PostMessage { target: Target::Child, content, origin: Some(self.idp_origin.clone()) }
    }

    fn halt(&mut self, step: &str, body: &Value) -> Option<Vec<Command>> {
        self.phase = RpPhase::Stop;
        let reason = body["error"].as_str().unwrap_or("unexpected response").to_string();
        Some(vec![Command::Halt { step: step.to_string(), reason }])
    }
}

/// One RP-script transition; unmatched inputs are absorbed.
pub fn rp_script_step(state: &RpScriptState, input: &ScriptInput) -> (RpScriptState, Vec<Command>) {
    let mut next = state.clone();
    match rp_transition(&mut next, input) {
        Some(commands) => (next, commands),
        None => (state.clone(), Vec::new()),
    }
}

fn rp_transition(s: &mut RpScriptState, input: &ScriptInput) -> Option<Vec<Command>> {
    match s.phase {
        RpPhase::Start => {
            if *input != ScriptInput::Trigger {
                return None;
            }
            s.phase = RpPhase::ExpectT;
            Some(vec![Command::OpenWindow { path: "/login".into() }])
        }
        RpPhase::ExpectT => {
            let content = message_with(input, "t")?;
            s.phase = RpPhase::ExpectCert;
            Some(vec![s.xhr(Request::post("/startNegotiation", json!({ "t": content["t"] })))])
        }
        RpPhase::ExpectCert => {
            let body = xhr_body(input, s.ref_xhr)?;
            if body.get("Cert").is_none() {
                return s.halt("2.2", body);
            }
            let mut out = vec![s.to_idp(json!({ "Cert": body["Cert"] }))];
            match body.get("TokenRequest") {
                Some(tr) => {
                    out.push(s.to_idp(tr.clone()));
                    s.phase = RpPhase::ExpectToken;
                }
                None => s.phase = RpPhase::ExpectRegistrationResult,
            }
            Some(out)
        }
        RpPhase::ExpectRegistrationResult => {
            let content = message_with(input, "RegistrationResult")?;
            s.phase = RpPhase::ExpectTokenRequest;
            let body = json!({ "RegistrationResult": content["RegistrationResult"] });
            Some(vec![s.xhr(Request::post("/registrationResult", body))])
        }
        RpPhase::ExpectTokenRequest => {
            let body = xhr_body(input, s.ref_xhr)?;
            if body.get("PID_RP").is_none() {
                return s.halt("3.4", body);
            }
            s.phase = RpPhase::ExpectToken;
            Some(vec![s.to_idp(json!({ "PID_RP": body["PID_RP"], "Enpt": body["Enpt"], "Nonce": body["Nonce"] }))])
        }
        RpPhase::ExpectToken => {
            let content = message_with(input, "Token")?;
            s.phase = RpPhase::ExpectLoginResult;
            Some(vec![s.xhr(Request::post("/uploadToken", json!({ "Token": content["Token"] })))])
        }
        RpPhase::ExpectLoginResult => {
            let body = xhr_body(input, s.ref_xhr)?;
            if body["result"] != "LoginSuccess" {
                return s.halt("5.2", body);
            }
            s.phase = RpPhase::Done;
            Some(vec![Command::LoadHomepage { account: body["account"].as_str().map(str::to_string) }])
        }
        RpPhase::Done | RpPhase::Stop => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub source: WindowId,
    pub target: WindowId,
    pub content: Value,
    pub origin_restriction: Option<String>,
}

#[derive(Debug, Clone)]
struct WindowInfo {
    origin: String,
    parent: Option<WindowId>,
    first_child: Option<WindowId>,
}

/// Windows plus `postMessage` delivery.
#[derive(Debug, Default)]
pub struct MessageBus {
    windows: Vec<WindowInfo>,
    inboxes: HashMap<WindowId, Vec<BusMessage>>,
    dropped: Vec<BusMessage>,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_window(&mut self, origin: &str, parent: Option<WindowId>) -> WindowId {
        let id = self.windows.len();
        self.windows.push(WindowInfo { origin: origin.to_string(), parent, first_child: None });
        if let Some(p) = parent {
            self.windows[p].first_child.get_or_insert(id);
        }
        id
    }

    pub fn origin(&self, w: WindowId) -> &str {
        &self.windows[w].origin
    }

    pub fn resolve(&self, from: WindowId, target: Target) -> Option<WindowId> {
        let w = self.windows.get(from)?;
        match target {
            Target::Parent => w.parent,
            Target::Child => w.first_child,
        }
    }

    /// Delivers unless the restriction names another origin. Returns whether
    /// the message reached its target.
    pub fn post(&mut self, msg: BusMessage) -> bool {
        let Some(target) = self.windows.get(msg.target) else {
            self.dropped.push(msg);
            return false;
        };
        if msg.origin_restriction.as_deref().is_some_and(|o| o != target.origin) {
            self.dropped.push(msg);
            return false;
        }
        self.inboxes.entry(msg.target).or_default().push(msg);
        true
    }

    /// Everything delivered to `w`.
    pub fn received(&self, w: WindowId) -> &[BusMessage] {
        self.inboxes.get(&w).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn dropped(&self) -> &[BusMessage] {
        &self.dropped
    }
}

/// Origin → channel.
#[derive(Clone, Default)]
pub struct Network {
    channels: HashMap<String, Arc<dyn Channel>>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, channel: Arc<dyn Channel>) {
        self.channels.insert(channel.origin().to_string(), channel);
    }

    pub fn get(&self, origin: &str) -> Option<&Arc<dyn Channel>> {
        self.channels.get(origin)
    }
}

/// Per-origin `sid` cookies, kept across logins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Browser {
    cookies: HashMap<String, String>,
}

impl Browser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cookie(&self, origin: &str) -> Option<String> {
        self.cookies.get(origin).cloned()
    }

    pub fn set_cookie(&mut self, origin: &str, value: &str) {
        self.cookies.insert(origin.to_string(), value.to_string());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Initiator {
    Navigation,
    IdpScript,
    RpScript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub initiator: Initiator,
    pub exchange: Exchange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentEvent {
    Http { origin: String, initiator: Initiator, exchange: Exchange },
    Message { from: String, to: String, restriction: Option<String>, delivered: bool, content: Value },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    /// Script download through the IdP script receiving the token request.
    pub prepare_request_ms: f64,
    /// `/loginInfo` and, if needed, `/login`. Not part of any phase.
    pub authentication_ms: f64,
    /// The `/authorize` round trip.
    pub token_generation_ms: f64,
    /// Token forwarding, verification and account derivation.
    pub token_acceptance_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Outcome {
    LoginSuccess,
    Halted { step: String, cause: String },
}

/// Everything each party saw during one login.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoginTranscript {
    pub instance: u64,
    pub user: String,
    pub rp_origin: String,
    pub idp_origin: String,
    pub trapdoor: Option<Scalar>,
    pub pid_rp: Option<RpPseudoId>,
    pub pseudo_endpoint: Option<String>,
    pub pid_u: Option<UserPseudoId>,
    pub account: Option<Account>,
    pub outcome: Outcome,
    pub timings: PhaseTimings,
    pub idp_view: Vec<ViewEntry>,
    pub rp_view: Vec<ViewEntry>,
    pub agent_view: Vec<AgentEvent>,
}

impl LoginTranscript {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::LoginSuccess
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow halted at step {step}: {cause}")]
    Halted { step: String, cause: String, transcript: Box<LoginTranscript> },
    #[error("no channel for origin {0}")]
    UnknownOrigin(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("flow stalled after {events} events")]
    Stalled { events: usize, transcript: Box<LoginTranscript> },
}

impl FlowError {
    pub fn transcript(&self) -> Option<&LoginTranscript> {
        match self {
            FlowError::Halted { transcript, .. } | FlowError::Stalled { transcript, .. } => Some(transcript),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub instance: u64,
    pub seed: [u8; 32],
    pub fixed_t: Option<Scalar>,
    pub max_events: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { instance: 0, seed: [0; 32], fixed_t: None, max_events: 256 }
    }
}

enum Script {
    Idp(Box<IdpScriptState>),
    Rp(RpScriptState),
}

#[derive(Default)]
struct Marks {
    token_request: Option<Instant>,
    authorize_start: Option<Instant>,
    authorize_end: Option<Instant>,
    done: Option<Instant>,
}

struct Driver<'a> {
    network: &'a Network,
    browser: &'a mut Browser,
    credential: Credential,
    options: &'a FlowOptions,
    bus: MessageBus,
    scripts: HashMap<WindowId, Script>,
    events: VecDeque<(WindowId, ScriptInput)>,
    rp_origin: String,
    idp_origin: String,
    idp_view: Vec<ViewEntry>,
    rp_view: Vec<ViewEntry>,
    agent_view: Vec<AgentEvent>,
    account: Option<Account>,
    started: Instant,
    marks: Marks,
}

fn sub_seed(seed: &[u8; 32], label: &str) -> [u8; 32] {
    let mut buf = seed.to_vec();
    buf.extend_from_slice(label.as_bytes());
    *hash(&buf).as_bytes()
}

fn split_url(url: &str) -> Option<(String, String)> {
    let parsed = url::Url::parse(url).ok()?;
    let origin = origin_of(url)?;
    Some((origin, parsed.path().to_string()))
}

impl<'a> Driver<'a> {
    fn fetch(&mut self, origin: &str, mut req: Request, initiator: Initiator) -> Result<Response, FlowError> {
        let channel = self.network.get(origin).ok_or_else(|| FlowError::UnknownOrigin(origin.to_string()))?;
        req.cookie = self.browser.cookie(origin);
        let resp = channel.send(&req).map_err(|e| FlowError::Transport(e.to_string()))?;
        if let Some(c) = &resp.set_cookie {
            self.browser.set_cookie(origin, c);
        }
        let exchange = Exchange { request: req, response: resp.clone() };
        if origin == self.idp_origin {
            self.idp_view.push(ViewEntry { initiator, exchange: exchange.clone() });
        }
        if origin == self.rp_origin {
            self.rp_view.push(ViewEntry { initiator, exchange: exchange.clone() });
        }
        self.agent_view.push(AgentEvent::Http { origin: origin.to_string(), initiator, exchange });
        Ok(resp)
    }

    /// Loads `origin + path` in a new window, following redirects, and starts
    /// the script it serves.
    fn navigate(&mut self, origin: &str, path: &str, opener: Option<WindowId>) -> Result<(), FlowError> {
        let (mut origin, mut path) = (origin.to_string(), path.to_string());
        for _ in 0..4 {
            let resp = self.fetch(&origin, Request::get(&path), Initiator::Navigation)?;
            if resp.status == 302 {
                let location = resp.location.unwrap_or_default();
                (origin, path) = split_url(&location).ok_or_else(|| self.halted("1.2", format!("bad redirect {location}")))?;
                continue;
            }
            let script = self.instantiate(&origin, &resp.body)?;
            let w = self.bus.open_window(&origin, opener);
            self.scripts.insert(w, script);
            self.events.push_back((w, ScriptInput::Trigger));
            return Ok(());
        }
        Err(self.halted("1.2", "redirect loop".into()))
    }

    fn instantiate(&mut self, origin: &str, descriptor: &Value) -> Result<Script, FlowError> {
        if descriptor["version"] != SCRIPT_VERSION {
            return Err(self.halted("1", format!("unsupported script {descriptor}")));
        }
        let plain = descriptor["mode"] == "plain";
        match descriptor["script"].as_str() {
            Some(RP_SCRIPT_NAME) => {
                let idp_origin = descriptor["idp_origin"].as_str().unwrap_or_default().to_string();
                self.idp_origin = idp_origin.clone();
                Ok(Script::Rp(RpScriptState::new(&idp_origin, sub_seed(&self.options.seed, "rp-script"))))
            }
            Some(IDP_SCRIPT_NAME) => {
                let key = descriptor["public_key"].as_str().and_then(|pem| PublicKey::from_pem(pem).ok());
                let group: Option<GroupId> = serde_json::from_value(descriptor["group"].clone()).ok();
                let (Some(key), Some(group)) = (key, group) else {
                    return Err(self.halted("1.3", "IdP script descriptor lacks key or group".into()));
                };
                let mut st = IdpScriptState::new(origin, key, group, self.credential.clone(), sub_seed(&self.options.seed, "idp-script"));
                st.plain = plain;
                st.fixed_t = self.options.fixed_t;
                Ok(Script::Idp(Box::new(st)))
            }
            _ => Err(self.halted("1", format!("unknown script {descriptor}"))),
        }
    }

    fn idp_params(&self) -> Option<&IdpScriptParams> {
        self.scripts.values().find_map(|s| match s {
            Script::Idp(st) => Some(&st.params),
            Script::Rp(_) => None,
        })
    }

    fn transcript(&self, outcome: Outcome) -> LoginTranscript {
        let params = self.idp_params();
        let ms = |a: Option<Instant>, b: Option<Instant>| match (a, b) {
            (Some(a), Some(b)) => b.saturating_duration_since(a).as_secs_f64() * 1e3,
            _ => 0.0,
        };
        let m = &self.marks;
        LoginTranscript {
            instance: self.options.instance,
            user: self.credential.username.clone(),
            rp_origin: self.rp_origin.clone(),
            idp_origin: self.idp_origin.clone(),
            trapdoor: params.and_then(|p| p.t.map(|t| *t.value())),
            pid_rp: params.and_then(|p| p.pid_rp),
            pseudo_endpoint: params.and_then(|p| p.pseudo_endpoint.clone()),
            pid_u: params.and_then(|p| p.token.as_ref().map(|t| t.content.pid_u)),
            account: self.account,
            outcome,
            timings: PhaseTimings {
                prepare_request_ms: ms(Some(self.started), m.token_request),
                authentication_ms: ms(m.token_request, m.authorize_start),
                token_generation_ms: ms(m.authorize_start, m.authorize_end),
                token_acceptance_ms: ms(m.authorize_end, m.done),
                total_ms: ms(Some(self.started), m.done),
            },
            idp_view: self.idp_view.clone(),
            rp_view: self.rp_view.clone(),
            agent_view: self.agent_view.clone(),
        }
    }

    fn halted(&self, step: &str, cause: String) -> FlowError {
        let transcript = self.transcript(Outcome::Halted { step: step.to_string(), cause: cause.clone() });
        FlowError::Halted { step: step.to_string(), cause, transcript: Box::new(transcript) }
    }

    fn step(&mut self, w: WindowId, input: &ScriptInput) -> Vec<Command> {
        match self.scripts.get_mut(&w) {
            Some(Script::Idp(st)) => {
                let (next, cmds) = idp_script_step(st, input);
                **st = next;
                cmds
            }
            Some(Script::Rp(st)) => {
                let (next, cmds) = rp_script_step(st, input);
                *st = next;
                cmds
            }
            None => Vec::new(),
        }
    }

    fn run(mut self) -> Result<LoginTranscript, FlowError> {
        let rp_origin = self.rp_origin.clone();
        self.navigate(&rp_origin, "/script", None)?;
        let mut processed = 0;
        while let Some((w, input)) = self.events.pop_front() {
            processed += 1;
            if processed > self.options.max_events {
                break;
            }
            let is_idp = matches!(self.scripts.get(&w), Some(Script::Idp(_)));
            if is_idp && self.marks.token_request.is_none() && message_with(&input, "PID_RP").is_some() {
                self.marks.token_request = Some(Instant::now());
            }
            for cmd in self.step(w, &input) {
                match cmd {
                    Command::PostMessage { target, content, origin } => {
                        let from = self.bus.origin(w).to_string();
                        let Some(t) = self.bus.resolve(w, target) else {
                            self.agent_view.push(AgentEvent::Message {
                                from,
                                to: String::new(),
                                restriction: origin,
                                delivered: false,
                                content,
                            });
                            continue;
                        };
                        let to = self.bus.origin(t).to_string();
                        let delivered = self.bus.post(BusMessage {
                            source: w,
                            target: t,
                            content: content.clone(),
                            origin_restriction: origin.clone(),
                        });
                        self.agent_view.push(AgentEvent::Message {
                            from: from.clone(),
                            to,
                            restriction: origin,
                            delivered,
                            content: content.clone(),
                        });
                        if delivered && self.scripts.contains_key(&t) {
                            self.events.push_back((t, ScriptInput::Message { origin: from, content }));
                        }
                    }
                    Command::Xhr { ref_id, request } => {
                        let origin = self.bus.origin(w).to_string();
                        let initiator = if is_idp { Initiator::IdpScript } else { Initiator::RpScript };
                        let authorize = request.path == "/authorize";
                        if authorize {
                            self.marks.authorize_start = Some(Instant::now());
                        }
                        let resp = self.fetch(&origin, request, initiator)?;
                        if authorize {
                            self.marks.authorize_end = Some(Instant::now());
                        }
                        self.events.push_back((w, ScriptInput::XhrResponse { ref_id, status: resp.status, body: resp.body }));
                    }
                    Command::OpenWindow { path } => {
                        let origin = self.bus.origin(w).to_string();
                        self.navigate(&origin, &path, Some(w))?;
                    }
                    Command::LoadHomepage { account } => {
                        self.marks.done = Some(Instant::now());
                        self.account = account.and_then(|a| serde_json::from_value(Value::String(a)).ok());
                        return Ok(self.transcript(Outcome::LoginSuccess));
                    }
                    Command::Halt { step, reason } => return Err(self.halted(&step, reason)),
                }
            }
        }
        let transcript = self.transcript(Outcome::Halted { step: "stalled".into(), cause: format!("{processed} events") });
        Err(FlowError::Stalled { events: processed, transcript: Box::new(transcript) })
    }
}

/// Runs one login of `credential.username` at the RP served on `rp_origin`.
pub fn run_login_flow(
    network: &Network,
    rp_origin: &str,
    browser: &mut Browser,
    credential: &Credential,
    options: &FlowOptions,
) -> Result<LoginTranscript, FlowError> {
    let driver = Driver {
        network,
        browser,
        credential: credential.clone(),
        options,
        bus: MessageBus::new(),
        scripts: HashMap::new(),
        events: VecDeque::new(),
        rp_origin: rp_origin.to_string(),
        idp_origin: String::new(),
        idp_view: Vec::new(),
        rp_view: Vec::new(),
        agent_view: Vec::new(),
        account: None,
        started: Instant::now(),
        marks: Marks::default(),
    };
    driver.run()
}
