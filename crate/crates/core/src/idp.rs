//! Identity provider.
//!
//! Holds users (`ID_U`), issues RP identities and certificates, keeps the list
//! of unexpired `PID_RP` registrations and signs identity tokens. The HTTP
//! surface is:
//!
//! | request                                  | response body                                   |
//! |------------------------------------------|-------------------------------------------------|
//! | `GET /script`                            | script descriptor (public key, group, issuer)   |
//! | `POST /login {credential}`               | `{"result": "LoginSuccess" \| "LoginFailure"}`  |
//! | `GET /loginInfo`                         | `{"result": "Logged" \| "Unlogged"}`            |
//! | `POST /dynamicRegistration {PID_RP, Enpt, Nonce}` | `{"RegistrationResult": <signed>}`     |
//! | `GET /authorize?PID_RP&Enpt&Nonce`       | `{"result": "OK", "Token", "Enpt", "Nonce"}` or `Fail` |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::Clock;
use crate::crypto::{hash, Digest, PublicKey, SigningKeyPair};
use crate::group::{GroupElement, GroupId, GroupParams};
use crate::http::{Endpoint, Method, Request, Response};
use crate::rng::{random_hex, RngHandle};
use crate::token::{
    issue_cert, issue_registration_result, issue_token, Attributes, IdentityToken, PidRegistrationRequest, PidRegistrationResult,
    RpCertificate, TokenError, Validity,
};
use crate::transform::{derive_pid_u, new_rp_id, new_user_id, IdRegistry, RpId, RpPseudoId, TransformError, UserId};

pub const IDP_SCRIPT_NAME: &str = "pseudosso-idp";
pub const SCRIPT_VERSION: u32 = 1;
const MAX_ENDPOINT_LEN: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdpConfig {
    pub issuer: String,
    pub group: GroupId,
    #[serde(default)]
    pub validity: Validity,
    #[serde(default = "default_session_ttl")]
    pub session_ttl_secs: u64,
    /// Baseline without identity transformation: tokens carry `[u]ID_RP`.
    #[serde(default)]
    pub plain_mode: bool,
}

fn default_session_ttl() -> u64 {
    3600
}

impl IdpConfig {
    pub fn new(issuer: &str, group: GroupId) -> Self {
        IdpConfig {
            issuer: issuer.to_string(),
            group,
            validity: Validity::default(),
            session_ttl_secs: default_session_ttl(),
            plain_mode: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum IdpError {
    #[error("already registered: {0}")]
    Duplicate(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCredential {
    pub salt: String,
    pub digest: Digest,
}

/// Password storage. Swappable; the protocol does not depend on it.
pub trait CredentialVerifier: Send + Sync {
    fn enroll(&self, password: &str, rng: &mut RngHandle) -> StoredCredential;
    fn verify(&self, stored: &StoredCredential, password: &str) -> bool;
}

/// `SHA-256(salt || password)` with a 128-bit random salt.
#[derive(Debug, Default, Clone, Copy)]
pub struct SaltedSha256;

impl SaltedSha256 {
    fn digest(salt: &str, password: &str) -> Digest {
        let mut buf = Vec::with_capacity(salt.len() + password.len());
        buf.extend_from_slice(salt.as_bytes());
        buf.extend_from_slice(password.as_bytes());
        hash(&buf)
    }
}

impl CredentialVerifier for SaltedSha256 {
    fn enroll(&self, password: &str, rng: &mut RngHandle) -> StoredCredential {
        let salt = random_hex(rng, 16);
        let digest = Self::digest(&salt, password);
        StoredCredential { salt, digest }
    }

    fn verify(&self, stored: &StoredCredential, password: &str) -> bool {
        Self::digest(&stored.salt, password) == stored.digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoginOutcome {
    LoginSuccess,
    LoginFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoginState {
    Logged,
    Unlogged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AuthorizeError {
    #[error("no authenticated user on this session")]
    Unauthenticated,
    #[error("PID_RP and endpoint are not an unexpired registration")]
    UnknownPid,
}

impl AuthorizeError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthorizeError::Unauthenticated => "Unauthenticated",
            AuthorizeError::UnknownPid => "UnknownPid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub token: IdentityToken,
    /// `PEnpt_U`, where the token is addressed.
    pub deliver_to: String,
    /// The request's nonce, echoed outside the signed content.
    pub nonce: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRecord {
    pub credential: StoredCredential,
    pub uid: UserId,
    #[serde(default)]
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub pseudo_endpoint: String,
    pub nonce: Digest,
    pub validity: u64,
}

#[derive(Debug, Clone)]
struct Session {
    uid: Option<UserId>,
    expires_at: u64,
}

#[derive(Default)]
struct IdpState {
    sessions: HashMap<String, Session>,
    users: BTreeMap<String, UserRecord>,
    user_ids: IdRegistry<UserId>,
    rp_ids: IdRegistry<RpId>,
    rps: Vec<RpCertificate>,
    rp_registry: HashMap<RpPseudoId, RegistryEntry>,
    token_log: Vec<IdentityToken>,
}

/// Durable part of the IdP state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdpSnapshot {
    pub issuer: String,
    pub group: GroupId,
    pub users: BTreeMap<String, UserRecord>,
    pub rps: Vec<RpCertificate>,
}

pub struct IdpService {
    config: IdpConfig,
    params: GroupParams,
    keypair: Arc<SigningKeyPair>,
    clock: Arc<dyn Clock>,
    rng: RngHandle,
    verifier: Box<dyn CredentialVerifier>,
    state: Mutex<IdpState>,
}

impl IdpService {
    pub fn new(config: IdpConfig, keypair: Arc<SigningKeyPair>, clock: Arc<dyn Clock>, rng: RngHandle) -> Self {
        IdpService {
            params: GroupParams::new(config.group),
            config,
            keypair,
            clock,
            rng,
            verifier: Box::new(SaltedSha256),
            state: Mutex::new(IdpState::default()),
        }
    }

    pub fn with_verifier(mut self, verifier: Box<dyn CredentialVerifier>) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn config(&self) -> &IdpConfig {
        &self.config
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public_key()
    }

    pub fn register_user(&self, username: &str, password: &str, attributes: Attributes) -> Result<UserId, IdpError> {
        let credential = self.verifier.enroll(password, &mut self.rng.clone());
        let mut st = self.state.lock();
        if st.users.contains_key(username) {
            return Err(IdpError::Duplicate(username.to_string()));
        }
        let uid = new_user_id(&mut st.user_ids, &self.params, &mut self.rng.clone())?;
        st.users.insert(username.to_string(), UserRecord { credential, uid, attributes });
        Ok(uid)
    }

    /// Registers a user under a given `ID_U`, e.g. when migrating accounts.
    pub fn import_user(&self, username: &str, password: &str, uid: UserId, attributes: Attributes) -> Result<(), IdpError> {
        if uid.scalar().group() != self.config.group {
            return Err(IdpError::Transform(TransformError::Group(crate::group::GroupError::GroupMismatch)));
        }
        let credential = self.verifier.enroll(password, &mut self.rng.clone());
        let mut st = self.state.lock();
        if st.users.contains_key(username) || st.user_ids.contains(&uid) {
            return Err(IdpError::Duplicate(username.to_string()));
        }
        st.user_ids.insert(uid);
        st.users.insert(username.to_string(), UserRecord { credential, uid, attributes });
        Ok(())
    }

    /// Assigns `ID_RP = [r]G` and signs `Cert_RP`. `r` is not retained.
    pub fn register_rp(&self, endpoint: &str, supplementary: BTreeMap<String, String>) -> Result<RpCertificate, IdpError> {
        crate::token::check_endpoint(endpoint)?;
        let id_rp = {
            let mut st = self.state.lock();
            if st.rps.iter().any(|c| c.content.endpoint == endpoint) {
                return Err(IdpError::Duplicate(endpoint.to_string()));
            }
            new_rp_id(&mut st.rp_ids, &self.params, &mut self.rng.clone())?
        };
        let cert = issue_cert(id_rp, endpoint, supplementary, &self.keypair)?;
        self.state.lock().rps.push(cert.clone());
        Ok(cert)
    }

    pub fn user_id(&self, username: &str) -> Option<UserId> {
        self.state.lock().users.get(username).map(|u| u.uid)
    }

    pub fn certificates(&self) -> Vec<RpCertificate> {
        self.state.lock().rps.clone()
    }

    /// A fresh, unauthenticated session; returns its cookie.
    pub fn open_session(&self) -> String {
        let cookie = random_hex(&mut self.rng.clone(), 16);
        let expires_at = self.clock.now().saturating_add(self.config.session_ttl_secs);
        self.state.lock().sessions.insert(cookie.clone(), Session { uid: None, expires_at });
        cookie
    }

    /// The live session for `cookie`, or a new one. The flag is true when a
    /// new cookie was issued.
    fn ensure_session(&self, cookie: Option<&str>) -> (String, bool) {
        let now = self.clock.now();
        if let Some(c) = cookie {
            let mut st = self.state.lock();
            match st.sessions.get(c) {
                Some(s) if s.expires_at >= now => return (c.to_string(), false),
                Some(_) => {
                    st.sessions.remove(c);
                }
                None => {}
            }
        }
        (self.open_session(), true)
    }

    pub fn handle_login(&self, cookie: &str, credential: &Credential) -> LoginOutcome {
        let now = self.clock.now();
        let mut st = self.state.lock();
        let uid = match st.users.get(&credential.username) {
            Some(u) if self.verifier.verify(&u.credential, &credential.password) => u.uid,
            _ => return LoginOutcome::LoginFailure,
        };
        match st.sessions.get_mut(cookie) {
            Some(s) if s.expires_at >= now => {
                s.uid = Some(uid);
                s.expires_at = now.saturating_add(self.config.session_ttl_secs);
                LoginOutcome::LoginSuccess
            }
            _ => LoginOutcome::LoginFailure,
        }
    }

    pub fn handle_login_info(&self, cookie: &str) -> LoginState {
        let now = self.clock.now();
        match self.state.lock().sessions.get(cookie) {
            Some(Session { uid: Some(_), expires_at }) if *expires_at >= now => LoginState::Logged,
            _ => LoginState::Unlogged,
        }
    }

    /// Checks the unexpired list and appends atomically. Duplicates get a
    /// signed `Fail`.
    pub fn handle_dynamic_registration(&self, req: &PidRegistrationRequest) -> PidRegistrationResult {
        let now = self.clock.now();
        let ok = {
            let mut st = self.state.lock();
            match st.rp_registry.get(&req.pid_rp) {
                Some(e) if e.validity >= now => false,
                _ => {
                    let entry = RegistryEntry {
                        pseudo_endpoint: req.pseudo_endpoint.clone(),
                        nonce: req.nonce,
                        validity: self.config.validity.expiry(now),
                    };
                    st.rp_registry.insert(req.pid_rp, entry);
                    true
                }
            }
        };
        issue_registration_result(req, ok, now, self.config.validity, &self.keypair)
    }

    /// Issues `[PID_RP, [u]PID_RP, Issuer, Validity, Attr]` for the session's
    /// user, addressed to the registered pseudo-endpoint.
    pub fn handle_authorize(
        &self,
        cookie: &str,
        pid_rp: &RpPseudoId,
        endpoint: &str,
        nonce: Option<&str>,
    ) -> Result<Authorization, AuthorizeError> {
        let now = self.clock.now();
        let (uid, attributes) = {
            let st = self.state.lock();
            let uid = match st.sessions.get(cookie) {
                Some(Session { uid: Some(uid), expires_at }) if *expires_at >= now => *uid,
                _ => return Err(AuthorizeError::Unauthenticated),
            };
            let registered = if self.config.plain_mode {
                st.rps.iter().any(|c| c.content.id_rp.point() == pid_rp.point() && c.content.endpoint == endpoint)
            } else {
                st.rp_registry.get(pid_rp).is_some_and(|e| e.validity >= now && e.pseudo_endpoint == endpoint)
            };
            if !registered {
                return Err(AuthorizeError::UnknownPid);
            }
            let attributes = st.users.values().find(|u| u.uid == uid).map(|u| u.attributes.clone()).unwrap_or_default();
            (uid, attributes)
        };
        let pid_u = derive_pid_u(&uid, pid_rp).map_err(|_| AuthorizeError::UnknownPid)?;
        let token = issue_token(*pid_rp, pid_u, &self.config.issuer, attributes, now, self.config.validity, &self.keypair);
        self.state.lock().token_log.push(token.clone());
        Ok(Authorization { token, deliver_to: endpoint.to_string(), nonce: nonce.map(str::to_string) })
    }

    /// Drops registrations with `validity < now`; returns how many.
    pub fn prune_expired(&self, now: u64) -> usize {
        let mut st = self.state.lock();
        let before = st.rp_registry.len();
        st.rp_registry.retain(|_, e| e.validity >= now);
        before - st.rp_registry.len()
    }

    /// Drops sessions past their lifetime; returns how many.
    pub fn purge_sessions(&self, now: u64) -> usize {
        let mut st = self.state.lock();
        let before = st.sessions.len();
        st.sessions.retain(|_, s| s.expires_at >= now);
        before - st.sessions.len()
    }

    pub fn registry_len(&self) -> usize {
        self.state.lock().rp_registry.len()
    }

    pub fn registry_entry(&self, pid_rp: &RpPseudoId) -> Option<RegistryEntry> {
        self.state.lock().rp_registry.get(pid_rp).cloned()
    }

    pub fn token_log(&self) -> Vec<IdentityToken> {
        self.state.lock().token_log.clone()
    }

    pub fn snapshot(&self) -> IdpSnapshot {
        let st = self.state.lock();
        IdpSnapshot { issuer: self.config.issuer.clone(), group: self.config.group, users: st.users.clone(), rps: st.rps.clone() }
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), IdpError> {
        let text = serde_json::to_string_pretty(&self.snapshot()).map_err(|e| IdpError::Snapshot(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| IdpError::Snapshot(format!("{}: {e}", path.display())))
    }

    /// Restores users and RP certificates. Sessions and registrations start
    /// empty.
    pub fn restore(&self, snapshot: IdpSnapshot) -> Result<(), IdpError> {
        if snapshot.group != self.config.group {
            return Err(IdpError::Snapshot(format!("snapshot is for group {}, service uses {}", snapshot.group, self.config.group)));
        }
        let mut st = self.state.lock();
        for record in snapshot.users.values() {
            if !st.user_ids.insert(record.uid) {
                return Err(IdpError::Snapshot("duplicate user id in snapshot".into()));
            }
        }
        for cert in &snapshot.rps {
            if !st.rp_ids.insert(cert.content.id_rp) {
                return Err(IdpError::Snapshot("duplicate RP id in snapshot".into()));
            }
        }
        st.users.extend(snapshot.users);
        st.rps.extend(snapshot.rps);
        Ok(())
    }

    pub fn load_snapshot(&self, path: &Path) -> Result<(), IdpError> {
        let text = std::fs::read_to_string(path).map_err(|e| IdpError::Snapshot(format!("{}: {e}", path.display())))?;
        let snapshot: IdpSnapshot = serde_json::from_str(&text).map_err(|e| IdpError::Snapshot(e.to_string()))?;
        self.restore(snapshot)
    }

    pub fn script_descriptor(&self) -> Value {
        json!({
            "script": IDP_SCRIPT_NAME,
            "version": SCRIPT_VERSION,
            "issuer": self.config.issuer,
            "group": self.config.group,
            "mode": if self.config.plain_mode { "plain" } else { "pseudonymous" },
            "public_key": self.keypair.public_key().to_pem(),
        })
    }

    fn parse_element(&self, value: Option<&str>) -> Option<RpPseudoId> {
        let e: GroupElement = value?.parse().ok()?;
        if e.group() != self.config.group {
            return None;
        }
        RpPseudoId::new(e).ok()
    }

    fn parse_registration(&self, body: &Value) -> Option<PidRegistrationRequest> {
        let req: PidRegistrationRequest = serde_json::from_value(body.clone()).ok()?;
        let endpoint_ok = !req.pseudo_endpoint.is_empty() && req.pseudo_endpoint.len() <= MAX_ENDPOINT_LEN;
        (req.pid_rp.params().id() == self.config.group && endpoint_ok).then_some(req)
    }
}

impl Endpoint for IdpService {
    fn handle(&self, req: &Request) -> Response {
        match (req.method, req.path.as_str()) {
            (Method::Get, "/script") => Response::ok(self.script_descriptor()),
            (Method::Post, "/login") => {
                let (cookie, fresh) = self.ensure_session(req.cookie.as_deref());
                let outcome = match serde_json::from_value::<Credential>(req.body["credential"].clone()) {
                    Ok(c) => self.handle_login(&cookie, &c),
                    Err(_) => LoginOutcome::LoginFailure,
                };
                Response::ok(json!({ "result": outcome })).with_set_cookie(fresh.then_some(cookie))
            }
            (Method::Get, "/loginInfo") => {
                let (cookie, fresh) = self.ensure_session(req.cookie.as_deref());
                let state = self.handle_login_info(&cookie);
                Response::ok(json!({ "result": state })).with_set_cookie(fresh.then_some(cookie))
            }
            (Method::Post, "/dynamicRegistration") => match self.parse_registration(&req.body) {
                Some(r) => Response::ok(json!({ "RegistrationResult": self.handle_dynamic_registration(&r).to_json() })),
                None => Response::fail(400, "MalformedRequest"),
            },
            (Method::Get, "/authorize") => {
                let (cookie, fresh) = self.ensure_session(req.cookie.as_deref());
                let pid = self.parse_element(req.query.get("PID_RP").map(String::as_str));
                let endpoint = req.query.get("Enpt");
                let resp = match (pid, endpoint) {
                    (Some(pid), Some(endpoint)) => {
                        match self.handle_authorize(&cookie, &pid, endpoint, req.query.get("Nonce").map(String::as_str)) {
                            Ok(a) => Response::ok(json!({
                                "result": "OK",
                                "Token": a.token.to_json(),
                                "Enpt": a.deliver_to,
                                "Nonce": a.nonce,
                            })),
                            Err(e) => Response::fail(200, e.code()),
                        }
                    }
                    _ => Response::fail(400, "MalformedRequest"),
                };
                resp.with_set_cookie(fresh.then_some(cookie))
            }
            _ => Response::fail(404, "NotFound"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::crypto::hash_scalar;
    use crate::http::{Channel, LocalChannel};
    use crate::testing::fixture_keypair;
    use crate::token::{verify_cert, verify_registration_result, verify_token, RegistrationStatus};
    use crate::transform::UserPseudoId;

    const TOY: GroupParams = GroupParams::TOY;

    fn g(k: u64) -> GroupElement {
        TOY.mul_generator(&TOY.scalar(k)).unwrap()
    }

    fn idp(group: GroupId) -> (Arc<IdpService>, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1000));
        let svc = IdpService::new(
            IdpConfig::new("https://idp.test", group),
            Arc::new(fixture_keypair().clone()),
            clock.clone(),
            RngHandle::seeded(9),
        );
        (Arc::new(svc), clock)
    }

    fn alice() -> Credential {
        Credential { username: "alice".into(), password: "correct horse".into() }
    }

    fn request(pid: u64, endpoint: &str) -> PidRegistrationRequest {
        PidRegistrationRequest {
            pid_rp: RpPseudoId::new(g(pid)).unwrap(),
            pseudo_endpoint: endpoint.into(),
            nonce: hash_scalar(&TOY.scalar(3)),
        }
    }

    #[test]
    fn login_outcomes() {
        let (svc, _) = idp(GroupId::Toy);
        svc.register_user("alice", "correct horse", Attributes::new()).unwrap();
        let cookie = svc.open_session();
        let wrong = Credential { password: "nope".into(), ..alice() };
        assert_eq!(svc.handle_login(&cookie, &wrong), LoginOutcome::LoginFailure);
        assert_eq!(svc.handle_login_info(&cookie), LoginState::Unlogged);
        let unknown = Credential { username: "mallory".into(), ..alice() };
        assert_eq!(svc.handle_login(&cookie, &unknown), LoginOutcome::LoginFailure);

        assert_eq!(svc.handle_login(&cookie, &alice()), LoginOutcome::LoginSuccess);
        assert_eq!(svc.handle_login(&cookie, &alice()), LoginOutcome::LoginSuccess);
        assert_eq!(svc.handle_login_info(&cookie), LoginState::Logged);
    }

    #[test]
    fn sessions_expire() {
        let (svc, clock) = idp(GroupId::Toy);
        svc.register_user("alice", "correct horse", Attributes::new()).unwrap();
        let fresh = svc.open_session();
        assert_eq!(svc.handle_login_info(&fresh), LoginState::Unlogged);
        svc.handle_login(&fresh, &alice());
        clock.advance(3601);
        assert_eq!(svc.purge_sessions(clock.now()), 1);
        assert_eq!(svc.handle_login_info(&fresh), LoginState::Unlogged);
    }

    #[test]
    fn dynamic_registration_uniqueness_and_expiry() {
        let (svc, clock) = idp(GroupId::Toy);
        let pk = svc.public_key();
        let first = svc.handle_dynamic_registration(&request(21, "penpt-a"));
        assert_eq!(first.content.status, RegistrationStatus::Ok);
        assert_eq!(first.content.validity, Some(1180));
        assert!(verify_registration_result(&first, pk));

        let dup = svc.handle_dynamic_registration(&request(21, "penpt-b"));
        assert_eq!(dup.content.status, RegistrationStatus::Fail);
        assert!(verify_registration_result(&dup, pk));
        assert_eq!(svc.registry_entry(&request(21, "").pid_rp).unwrap().pseudo_endpoint, "penpt-a");

        clock.set(1180);
        assert_eq!(svc.handle_dynamic_registration(&request(21, "penpt-c")).content.status, RegistrationStatus::Fail);
        clock.set(1181);
        assert_eq!(svc.prune_expired(clock.now()), 1);
        assert_eq!(svc.handle_dynamic_registration(&request(21, "penpt-c")).content.status, RegistrationStatus::Ok);
    }

    #[test]
    fn prune_boundaries() {
        let (svc, clock) = idp(GroupId::Toy);
        assert_eq!(svc.prune_expired(0), 0);
        svc.handle_dynamic_registration(&request(21, "a"));
        clock.set(1100);
        svc.handle_dynamic_registration(&request(22, "b"));
        assert_eq!(svc.prune_expired(1180), 0, "validity == now is retained");
        assert_eq!(svc.prune_expired(1181), 1);
        assert_eq!(svc.registry_len(), 1);
        assert!(svc.registry_entry(&request(22, "").pid_rp).is_some());
    }

    #[test]
    fn authorize_binds_pid_u_to_session_user() {
        let (svc, _) = idp(GroupId::Toy);
        svc.import_user("alice", "correct horse", UserId::new(TOY.scalar(5)).unwrap(), Attributes::new()).unwrap();
        let cookie = svc.open_session();
        svc.handle_dynamic_registration(&request(21, "penpt-a"));
        let pid = request(21, "").pid_rp;

        assert_eq!(svc.handle_authorize(&cookie, &pid, "penpt-a", None), Err(AuthorizeError::Unauthenticated));
        svc.handle_login(&cookie, &alice());
        assert_eq!(svc.handle_authorize(&cookie, &pid, "https://rp.test/uploadToken", None), Err(AuthorizeError::UnknownPid));
        let other = RpPseudoId::new(g(22)).unwrap();
        assert_eq!(svc.handle_authorize(&cookie, &other, "penpt-a", None), Err(AuthorizeError::UnknownPid));

        let a = svc.handle_authorize(&cookie, &pid, "penpt-a", Some("n0")).unwrap();
        assert_eq!(a.token.content.pid_u, UserPseudoId::new(g(105)).unwrap());
        assert_eq!(a.deliver_to, "penpt-a");
        assert_eq!(a.nonce.as_deref(), Some("n0"));
        for t in svc.token_log() {
            assert!(verify_token(&t, svc.public_key(), 1000).is_ok());
        }
    }

    #[test]
    fn registration_of_users_and_rps() {
        let (svc, _) = idp(GroupId::Toy);
        let a = svc.register_user("alice", "pw", Attributes::new()).unwrap();
        let b = svc.register_user("bob", "pw", Attributes::new()).unwrap();
        assert_ne!(a, b);
        assert!(matches!(svc.register_user("alice", "pw2", Attributes::new()), Err(IdpError::Duplicate(_))));

        let c1 = svc.register_rp("https://rp1.test/uploadToken", BTreeMap::new()).unwrap();
        let c2 = svc.register_rp("https://rp2.test/uploadToken", BTreeMap::new()).unwrap();
        assert_ne!(c1.content.id_rp, c2.content.id_rp);
        assert!(verify_cert(&c1, svc.public_key()));
        assert!(TOY.contains(c1.content.id_rp.point()));
        assert!(matches!(svc.register_rp("https://rp1.test/uploadToken", BTreeMap::new()), Err(IdpError::Duplicate(_))));
        assert!(matches!(svc.register_rp("rp3", BTreeMap::new()), Err(IdpError::Token(TokenError::MalformedEndpoint(_)))));
    }

    #[test]
    fn concurrent_registration_issues_one_ok() {
        let (svc, _) = idp(GroupId::Toy);
        for round in 0..5u64 {
            let req = request(30 + round, "penpt");
            let oks: usize = std::thread::scope(|s| {
                let handles: Vec<_> =
                    (0..64).map(|_| s.spawn(|| svc.handle_dynamic_registration(&req).content.status == RegistrationStatus::Ok)).collect();
                handles.into_iter().map(|h| h.join().unwrap() as usize).sum()
            });
            assert_eq!(oks, 1);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let (svc, _) = idp(GroupId::Toy);
        let uid = svc.register_user("alice", "correct horse", Attributes::new()).unwrap();
        let cert = svc.register_rp("https://rp.test/uploadToken", BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idp.json");
        svc.save_snapshot(&path).unwrap();

        let (restored, _) = idp(GroupId::Toy);
        restored.load_snapshot(&path).unwrap();
        assert_eq!(restored.user_id("alice"), Some(uid));
        assert_eq!(restored.certificates(), vec![cert]);
        let cookie = restored.open_session();
        assert_eq!(restored.handle_login(&cookie, &alice()), LoginOutcome::LoginSuccess);

        let (p256, _) = idp(GroupId::P256);
        assert!(matches!(p256.load_snapshot(&path), Err(IdpError::Snapshot(_))));
    }

    #[test]
    fn http_surface() {
        let (svc, _) = idp(GroupId::Toy);
        svc.import_user("alice", "correct horse", UserId::new(TOY.scalar(5)).unwrap(), Attributes::new()).unwrap();
        let ch = LocalChannel::new("http://idp.test", svc.clone());

        let script = ch.send(&Request::get("/script")).unwrap();
        assert_eq!(script.body["script"], IDP_SCRIPT_NAME);
        assert_eq!(PublicKey::from_pem(script.body["public_key"].as_str().unwrap()).unwrap(), *svc.public_key());

        let info = ch.send(&Request::get("/loginInfo")).unwrap();
        assert_eq!(info.body["result"], "Unlogged");
        let cookie = info.set_cookie.clone();
        assert!(cookie.is_some());

        let login = ch.send(&Request::post("/login", json!({"credential": alice()})).with_cookie(cookie.clone())).unwrap();
        assert_eq!(login.body["result"], "LoginSuccess");
        assert_eq!(login.set_cookie, None);

        let reg = ch
            .send(&Request::post(
                "/dynamicRegistration",
                json!({"PID_RP": g(21).to_string(), "Enpt": "penpt", "Nonce": hash_scalar(&TOY.scalar(3))}),
            ))
            .unwrap();
        assert_eq!(reg.body["RegistrationResult"]["content"]["status"], "OK");

        let authz =
            Request::get("/authorize").with_query("PID_RP", g(21).to_string()).with_query("Enpt", "penpt").with_query("Nonce", "xyz");
        let token = ch.send(&authz.clone().with_cookie(cookie)).unwrap();
        assert_eq!(token.body["result"], "OK");
        assert_eq!(token.body["Token"]["content"]["pid_u"], g(105).to_string());
        assert_eq!(token.body["Enpt"], "penpt");
        assert_eq!(token.body["Nonce"], "xyz");

        let anon = ch.send(&authz).unwrap();
        assert_eq!(anon.error(), Some("Unauthenticated"));

        let bad = ch.send(&Request::post("/dynamicRegistration", json!({"PID_RP": g(21).to_string()}))).unwrap();
        assert_eq!((bad.status, bad.error()), (400, Some("MalformedRequest")));
        let p256_pid = GroupParams::P256.generator().to_string();
        let wrong_group =
            ch.send(&Request::post("/dynamicRegistration", json!({"PID_RP": p256_pid, "Enpt": "e", "Nonce": hash(b"")}))).unwrap();
        assert_eq!(wrong_group.error(), Some("MalformedRequest"));
        assert_eq!(ch.send(&Request::get("/nowhere")).unwrap().status, 404);
    }

    #[test]
    fn forged_cookie_gets_a_fresh_session() {
        let (svc, _) = idp(GroupId::Toy);
        let ch = LocalChannel::new("http://idp.test", svc.clone());
        let resp = ch.send(&Request::get("/loginInfo").with_cookie(Some("attacker-chosen".into()))).unwrap();
        assert!(resp.set_cookie.is_some());
        assert_ne!(resp.set_cookie.as_deref(), Some("attacker-chosen"));
    }
}
