//! Relying party service and SDK.
//!
//! A login at the RP moves one session through three states:
//!
//! ```text
//! startNegotiation(t) -> ExpectRegistration
//!   registrationResult -> ExpectToken        (build_token_request)
//!     uploadToken      -> LoggedIn           (derive_account)
//! ```
//!
//! [`build_token_request`] and [`derive_account`] are the whole SDK; the HTTP
//! service is a thin session store around them.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::Clock;
use crate::crypto::{hash_scalar, PublicKey};
use crate::group::{GroupId, Scalar};
use crate::http::{origin_of, Endpoint, Method, Request, Response};
use crate::rng::{random_hex, RngHandle};
use crate::token::{verify_cert, IdentityToken, PidRegistrationResult, RegistrationStatus, RpCertificate};
use crate::transform::{derive_pid_rp, Account, RpId, RpPseudoId, TransformError, Trapdoor};

pub const RP_SCRIPT_NAME: &str = "pseudosso-rp";

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RpError {
    #[error("request does not match the session state")]
    BadState,
    #[error("trapdoor must satisfy 1 < t < n")]
    TrapdoorOutOfRange,
    #[error("IdP signature does not verify")]
    SignatureInvalid,
    #[error("IdP refused the PID_RP registration")]
    RegistrationRejected,
    #[error("registration result is for another PID_RP or nonce")]
    Mismatch,
    #[error("validity period has passed")]
    Expired,
    #[error("token was issued for another PID_RP")]
    PidMismatch,
    #[error("malformed request")]
    MalformedRequest,
}

impl RpError {
    pub fn code(&self) -> &'static str {
        match self {
            RpError::BadState => "BadState",
            RpError::TrapdoorOutOfRange => "TrapdoorOutOfRange",
            RpError::SignatureInvalid => "SignatureInvalid",
            RpError::RegistrationRejected => "RegistrationRejected",
            RpError::Mismatch => "Mismatch",
            RpError::Expired => "Expired",
            RpError::PidMismatch => "PidMismatch",
            RpError::MalformedRequest => "MalformedRequest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    ExpectRegistration,
    ExpectToken,
    LoggedIn,
}

/// Per-login RP state.
#[derive(Debug, Clone)]
pub struct RpSession {
    /// `None` in plain mode, where no blinding happens.
    trapdoor: Option<Trapdoor>,
    pid_rp: RpPseudoId,
    pid_validity: Option<u64>,
    state: SessionState,
    nonce_out: Option<String>,
    account: Option<Account>,
}

impl RpSession {
    /// Checks `1 < t < n`, computes `PID_RP = [t]ID_RP` and `t^-1`.
    pub fn negotiate(id_rp: &RpId, t: Scalar) -> Result<Self, RpError> {
        if t.group() != id_rp.params().id() {
            return Err(RpError::MalformedRequest);
        }
        let trapdoor = Trapdoor::new(t).map_err(|e| match e {
            TransformError::TrapdoorOutOfRange => RpError::TrapdoorOutOfRange,
            _ => RpError::MalformedRequest,
        })?;
        let pid_rp = derive_pid_rp(id_rp, &trapdoor).map_err(|_| RpError::MalformedRequest)?;
        Ok(RpSession {
            trapdoor: Some(trapdoor),
            pid_rp,
            pid_validity: None,
            state: SessionState::ExpectRegistration,
            nonce_out: None,
            account: None,
        })
    }

    /// Baseline session: the token names `ID_RP` itself.
    pub fn plain(id_rp: &RpId) -> Self {
        RpSession {
            trapdoor: None,
            pid_rp: RpPseudoId::new(*id_rp.point()).expect("RP ids are never the identity"),
            pid_validity: None,
            state: SessionState::ExpectToken,
            nonce_out: None,
            account: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn pid_rp(&self) -> &RpPseudoId {
        &self.pid_rp
    }

    pub fn trapdoor(&self) -> Option<&Trapdoor> {
        self.trapdoor.as_ref()
    }

    pub fn pid_validity(&self) -> Option<u64> {
        self.pid_validity
    }

    pub fn account(&self) -> Option<&Account> {
        self.account.as_ref()
    }
}

/// `{PID_RP, Enpt, Nonce'}` as sent back to the RP script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    #[serde(rename = "PID_RP")]
    pub pid_rp: RpPseudoId,
    #[serde(rename = "Enpt")]
    pub endpoint: String,
    /// Fresh and random. Nothing downstream checks it.
    #[serde(rename = "Nonce")]
    pub nonce: String,
}

/// Accepts the IdP's registration result and builds the token request.
pub fn build_token_request<R: RngCore + CryptoRng + ?Sized>(
    session: &mut RpSession,
    result: &PidRegistrationResult,
    idp_pk: &PublicKey,
    endpoint: &str,
    now: u64,
    rng: &mut R,
) -> Result<TokenRequest, RpError> {
    if session.state != SessionState::ExpectRegistration {
        return Err(RpError::BadState);
    }
    if !result.signature_valid(idp_pk) {
        return Err(RpError::SignatureInvalid);
    }
    let c = &result.content;
    if c.status != RegistrationStatus::Ok {
        return Err(RpError::RegistrationRejected);
    }
    let t = session.trapdoor.as_ref().ok_or(RpError::BadState)?;
    if c.pid_rp != session.pid_rp || c.nonce != hash_scalar(t.value()) {
        return Err(RpError::Mismatch);
    }
    let validity = c.validity.ok_or(RpError::Mismatch)?;
    if now > validity {
        return Err(RpError::Expired);
    }
    let nonce = random_hex(rng, 16);
    session.pid_validity = Some(validity);
    session.state = SessionState::ExpectToken;
    session.nonce_out = Some(nonce.clone());
    Ok(TokenRequest { pid_rp: session.pid_rp, endpoint: endpoint.to_string(), nonce })
}

/// Verifies the token against the session and returns `[t^-1]PID_U`.
pub fn derive_account(session: &mut RpSession, token: &IdentityToken, idp_pk: &PublicKey, now: u64) -> Result<Account, RpError> {
    if session.state != SessionState::ExpectToken {
        return Err(RpError::BadState);
    }
    let c = &token.content;
    if c.pid_rp.params() != c.pid_u.params() {
        return Err(RpError::MalformedRequest);
    }
    if !token.signature_valid(idp_pk) {
        return Err(RpError::SignatureInvalid);
    }
    if c.pid_rp != session.pid_rp {
        return Err(RpError::PidMismatch);
    }
    if now > c.validity || session.pid_validity.is_some_and(|v| now > v) {
        return Err(RpError::Expired);
    }
    let account = match &session.trapdoor {
        Some(t) => crate::transform::derive_account(&c.pid_u, t).map_err(|_| RpError::MalformedRequest)?,
        None => Account::new(*c.pid_u.point()).map_err(|_| RpError::MalformedRequest)?,
    };
    session.state = SessionState::LoggedIn;
    session.account = Some(account);
    Ok(account)
}

/// The RP's user list, optionally backed by a JSON-lines file.
pub struct AccountStore {
    accounts: Mutex<HashSet<Account>>,
    file: Option<Mutex<File>>,
}

impl AccountStore {
    pub fn in_memory() -> Self {
        AccountStore { accounts: Mutex::new(HashSet::new()), file: None }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut accounts = HashSet::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let acct: Account = serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                accounts.insert(acct);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AccountStore { accounts: Mutex::new(accounts), file: Some(Mutex::new(file)) })
    }

    /// Returns true if the account was new.
    pub fn insert(&self, account: Account) -> std::io::Result<bool> {
        let mut accounts = self.accounts.lock();
        if !accounts.insert(account) {
            return Ok(false);
        }
        if let Some(f) = &self.file {
            let mut f = f.lock();
            writeln!(f, "{}", serde_json::to_string(&account).expect("account serializes"))?;
            f.flush()?;
        }
        Ok(true)
    }

    pub fn contains(&self, account: &Account) -> bool {
        self.accounts.lock().contains(account)
    }

    pub fn len(&self) -> usize {
        self.accounts.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpConfig {
    /// `Enpt_RP`, the absolute URL that receives identity tokens.
    pub endpoint: String,
    pub idp_script_url: String,
    pub group: GroupId,
    #[serde(default)]
    pub plain_mode: bool,
}

#[derive(Debug, Error)]
pub enum RpConfigError {
    #[error("certificate does not verify under the IdP key")]
    BadCertificate,
    #[error("certificate endpoint {cert} differs from configured {configured}")]
    EndpointMismatch { cert: String, configured: String },
    #[error("certificate is for group {0}")]
    GroupMismatch(GroupId),
    #[error("IdP script URL has no origin: {0}")]
    BadScriptUrl(String),
}

type SessionSlot = Arc<Mutex<Option<RpSession>>>;

pub struct RpService {
    config: RpConfig,
    cert: RpCertificate,
    idp_pk: PublicKey,
    idp_origin: String,
    clock: Arc<dyn Clock>,
    rng: RngHandle,
    sessions: Mutex<HashMap<String, SessionSlot>>,
    accounts: AccountStore,
}

impl RpService {
    pub fn new(
        config: RpConfig,
        cert: RpCertificate,
        idp_pk: PublicKey,
        clock: Arc<dyn Clock>,
        rng: RngHandle,
        accounts: AccountStore,
    ) -> Result<Self, RpConfigError> {
        if !verify_cert(&cert, &idp_pk) {
            return Err(RpConfigError::BadCertificate);
        }
        if cert.content.endpoint != config.endpoint {
            return Err(RpConfigError::EndpointMismatch { cert: cert.content.endpoint.clone(), configured: config.endpoint.clone() });
        }
        let group = cert.content.id_rp.params().id();
        if group != config.group {
            return Err(RpConfigError::GroupMismatch(group));
        }
        let idp_origin = origin_of(&config.idp_script_url).ok_or_else(|| RpConfigError::BadScriptUrl(config.idp_script_url.clone()))?;
        Ok(RpService { config, cert, idp_pk, idp_origin, clock, rng, sessions: Mutex::new(HashMap::new()), accounts })
    }

    pub fn id_rp(&self) -> &RpId {
        &self.cert.content.id_rp
    }

    pub fn cert(&self) -> &RpCertificate {
        &self.cert
    }

    pub fn endpoint(&self) -> &str {
        &self.config.endpoint
    }

    pub fn accounts(&self) -> &AccountStore {
        &self.accounts
    }

    pub fn session_state(&self, cookie: &str) -> Option<SessionState> {
        let slot = self.sessions.lock().get(cookie).cloned()?;
        let state = slot.lock().as_ref().map(|s| s.state);
        state
    }

    pub fn session_account(&self, cookie: &str) -> Option<Account> {
        let slot = self.sessions.lock().get(cookie).cloned()?;
        let account = slot.lock().as_ref().and_then(|s| s.account);
        account
    }

    pub fn script_descriptor(&self) -> Value {
        json!({
            "script": RP_SCRIPT_NAME,
            "version": crate::idp::SCRIPT_VERSION,
            "idp_origin": self.idp_origin,
            "group": self.config.group,
            "mode": if self.config.plain_mode { "plain" } else { "pseudonymous" },
        })
    }

    fn ensure_session(&self, cookie: Option<&str>) -> (String, bool, SessionSlot) {
        let mut sessions = self.sessions.lock();
        if let Some(slot) = cookie.and_then(|c| sessions.get(c)) {
            return (cookie.unwrap().to_string(), false, slot.clone());
        }
        let cookie = random_hex(&mut self.rng.clone(), 16);
        let slot = SessionSlot::default();
        sessions.insert(cookie.clone(), slot.clone());
        (cookie, true, slot)
    }

    /// Stores a new negotiated session, replacing any earlier one.
    pub fn handle_start_negotiation(&self, slot: &SessionSlot, t: Option<Scalar>) -> Result<Value, RpError> {
        match (t, self.config.plain_mode) {
            (Some(t), false) => {
                let session = RpSession::negotiate(self.id_rp(), t)?;
                *slot.lock() = Some(session);
                Ok(json!({ "Cert": self.cert.to_json() }))
            }
            (None, true) => {
                let mut session = RpSession::plain(self.id_rp());
                let nonce = random_hex(&mut self.rng.clone(), 16);
                session.nonce_out = Some(nonce.clone());
                *slot.lock() = Some(session);
                let request = TokenRequest {
                    pid_rp: RpPseudoId::new(*self.id_rp().point()).expect("non-identity"),
                    endpoint: self.config.endpoint.clone(),
                    nonce,
                };
                Ok(json!({ "Cert": self.cert.to_json(), "TokenRequest": request }))
            }
            _ => Err(RpError::MalformedRequest),
        }
    }

    /// Any failure after the state check discards the session.
    pub fn handle_registration_result(&self, slot: &SessionSlot, result: &PidRegistrationResult) -> Result<TokenRequest, RpError> {
        let mut guard = slot.lock();
        let session = guard.as_mut().ok_or(RpError::BadState)?;
        let outcome = build_token_request(session, result, &self.idp_pk, &self.config.endpoint, self.clock.now(), &mut self.rng.clone());
        if matches!(outcome, Err(e) if e != RpError::BadState) {
            *guard = None;
        }
        outcome
    }

    pub fn handle_upload_token(&self, slot: &SessionSlot, token: &IdentityToken) -> Result<Account, RpError> {
        let mut guard = slot.lock();
        let session = guard.as_mut().ok_or(RpError::BadState)?;
        let account = derive_account(session, token, &self.idp_pk, self.clock.now())?;
        if let Err(e) = self.accounts.insert(account) {
            eprintln!("account store: {e}");
        }
        Ok(account)
    }

    fn parse_scalar(&self, v: &Value) -> Result<Option<Scalar>, RpError> {
        match v {
            Value::Null => Ok(None),
            Value::String(s) => {
                let t: Scalar = s.parse().map_err(|_| RpError::MalformedRequest)?;
                if t.group() != self.config.group {
                    return Err(RpError::MalformedRequest);
                }
                Ok(Some(t))
            }
            _ => Err(RpError::MalformedRequest),
        }
    }
}

fn fail(e: RpError) -> Response {
    Response::fail(if e == RpError::MalformedRequest { 400 } else { 200 }, e.code())
}

impl Endpoint for RpService {
    fn handle(&self, req: &Request) -> Response {
        if (req.method, req.path.as_str()) == (Method::Get, "/script") {
            return Response::ok(self.script_descriptor());
        }
        let (cookie, fresh, slot) = self.ensure_session(req.cookie.as_deref());
        let resp = match (req.method, req.path.as_str()) {
            (Method::Get, "/login") => Response::redirect(&self.config.idp_script_url),
            (Method::Post, "/startNegotiation") => {
                match self.parse_scalar(&req.body["t"]).and_then(|t| self.handle_start_negotiation(&slot, t)) {
                    Ok(body) => Response::ok(body),
                    Err(e) => fail(e),
                }
            }
            (Method::Post, "/registrationResult") => {
                let parsed = PidRegistrationResult::from_json(&req.body["RegistrationResult"]).map_err(|_| RpError::MalformedRequest);
                match parsed.and_then(|r| self.handle_registration_result(&slot, &r)) {
                    Ok(tr) => Response::ok(serde_json::to_value(tr).expect("token request serializes")),
                    Err(e) => fail(e),
                }
            }
            (Method::Post, "/uploadToken") => {
                let parsed = IdentityToken::from_json(&req.body["Token"]).map_err(|_| RpError::MalformedRequest);
                match parsed.and_then(|t| self.handle_upload_token(&slot, &t)) {
                    Ok(acct) => Response::ok(json!({ "result": "LoginSuccess", "account": acct })),
                    Err(e) => fail(e),
                }
            }
            _ => Response::fail(404, "NotFound"),
        };
        resp.with_set_cookie(fresh.then_some(cookie))
    }
}
