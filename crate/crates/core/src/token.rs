//! IdP-signed artifacts: RP certificates, PID-registration results and
//! identity tokens.
//!
//! On the wire each artifact is `{"content": {...}, "sig": "<base64>"}`. The
//! signature never covers the JSON text. It covers the canonical encoding of
//! the content, which is:
//!
//! ```text
//! tag      := u32_be(len) || ascii domain tag
//! field    := u32_be(len) || bytes
//! u64      := 8 bytes big-endian
//! option   := 0x00 | 0x01 || u64
//! map      := u32_be(count) || (field(key) || field(value))*   sorted by key
//! ```
//!
//! Group elements are encoded with [`GroupElement::to_bytes`](crate::group::GroupElement::to_bytes).
//!
//! | artifact            | tag                       | fields, in order                          |
//! |---------------------|---------------------------|-------------------------------------------|
//! | RP certificate      | `pseudosso/cert/v1`       | id_rp, endpoint, supplementary (map)      |
//! | registration result | `pseudosso/pid-result/v1` | status (`OK`/`Fail`), pid_rp, nonce, validity (option) |
//! | identity token      | `pseudosso/token/v1`      | pid_rp, pid_u, issuer, validity, attributes (map) |

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};
use crate::transform::{RpId, RpPseudoId, UserPseudoId};

pub const DEFAULT_VALIDITY_SECS: u64 = 180;

pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("endpoint is not an absolute http(s) URL: {0}")]
    MalformedEndpoint(String),
    #[error("validity duration must be positive")]
    InvalidValidity,
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("expired at {validity}, now {now}")]
    Expired { validity: u64, now: u64 },
    #[error("malformed token: {0}")]
    MalformedToken(String),
}

/// How long IdP signatures stay valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Validity {
    secs: u64,
}

impl Validity {
    pub fn new(secs: u64) -> Result<Self, TokenError> {
        if secs == 0 {
            Err(TokenError::InvalidValidity)
        } else {
            Ok(Validity { secs })
        }
    }

    pub fn secs(&self) -> u64 {
        self.secs
    }

    pub fn expiry(&self, now: u64) -> u64 {
        now.saturating_add(self.secs)
    }
}

impl Default for Validity {
    fn default() -> Self {
        Validity { secs: DEFAULT_VALIDITY_SECS }
    }
}

impl TryFrom<u64> for Validity {
    type Error = TokenError;
    fn try_from(secs: u64) -> Result<Self, Self::Error> {
        Validity::new(secs)
    }
}

impl From<Validity> for u64 {
    fn from(v: Validity) -> u64 {
        v.secs
    }
}

struct CanonicalWriter(Vec<u8>);

impl CanonicalWriter {
    fn new(tag: &str) -> Self {
        let mut w = CanonicalWriter(Vec::with_capacity(256));
        w.field(tag.as_bytes());
        w
    }

    fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field shorter than 4 GiB");
        self.0.extend_from_slice(&len.to_be_bytes());
        self.0.extend_from_slice(bytes);
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        match v {
            None => self.0.push(0),
            Some(v) => {
                self.0.push(1);
                self.u64(v);
            }
        }
        self
    }

    fn map(&mut self, m: &BTreeMap<String, String>) -> &mut Self {
        let count = u32::try_from(m.len()).expect("map smaller than 4G entries");
        self.0.extend_from_slice(&count.to_be_bytes());
        for (k, v) in m {
            self.field(k.as_bytes());
            self.field(v.as_bytes());
        }
        self
    }

    fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

/// Content that can be signed.
pub trait CanonicalContent {
    fn canonical_bytes(&self) -> Vec<u8>;
}

/// A content object plus the IdP signature over its canonical bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signed<C> {
    pub content: C,
    pub sig: Signature,
}

impl<C: CanonicalContent> Signed<C> {
    pub fn sign(content: C, kp: &SigningKeyPair) -> Self {
        let sig = crypto::sign(&content.canonical_bytes(), kp);
        Signed { content, sig }
    }

    pub fn signature_valid(&self, pk: &PublicKey) -> bool {
        crypto::verify(&self.content.canonical_bytes(), &self.sig, pk)
    }
}

impl<C: Serialize + DeserializeOwned> Signed<C> {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("artifact serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, TokenError> {
        C::deserialize(value.get("content").ok_or_else(|| TokenError::MalformedToken("missing content".into()))?)
            .map_err(|e| TokenError::MalformedToken(e.to_string()))
            .and_then(|content| {
                let sig = value.get("sig").and_then(|s| s.as_str()).ok_or_else(|| TokenError::MalformedToken("missing sig".into()))?;
                let sig = Signature::from_base64(sig).map_err(|e| TokenError::MalformedToken(e.to_string()))?;
                Ok(Signed { content, sig })
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertContent {
    pub id_rp: RpId,
    pub endpoint: String,
    #[serde(default)]
    pub supplementary: BTreeMap<String, String>,
}

impl CanonicalContent for CertContent {
    fn canonical_bytes(&self) -> Vec<u8> {
        CanonicalWriter::new("pseudosso/cert/v1")
            .field(&self.id_rp.point().to_bytes())
            .field(self.endpoint.as_bytes())
            .map(&self.supplementary)
            .finish()
    }
}

/// `Cert_RP = [ID_RP, Enpt_RP, *]_SK`.
pub type RpCertificate = Signed<CertContent>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistrationStatus {
    #[serde(rename = "OK")]
    Ok,
    Fail,
}

impl RegistrationStatus {
    fn as_str(&self) -> &'static str {
        match self {
            RegistrationStatus::Ok => "OK",
            RegistrationStatus::Fail => "Fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationContent {
    pub status: RegistrationStatus,
    pub pid_rp: RpPseudoId,
    pub nonce: Digest,
    /// Expiry of the registration; absent on `Fail`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<u64>,
}

impl CanonicalContent for RegistrationContent {
    fn canonical_bytes(&self) -> Vec<u8> {
        CanonicalWriter::new("pseudosso/pid-result/v1")
            .field(self.status.as_str().as_bytes())
            .field(&self.pid_rp.point().to_bytes())
            .field(self.nonce.as_bytes())
            .opt_u64(self.validity)
            .finish()
    }
}

/// `[PID_RP, H(t), Validity]_SK` (or the `Fail` variant).
pub type PidRegistrationResult = Signed<RegistrationContent>;

/// What the user's agent sends to `/dynamicRegistration`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PidRegistrationRequest {
    #[serde(rename = "PID_RP")]
    pub pid_rp: RpPseudoId,
    /// `PEnpt_U`, the per-login pseudo-endpoint.
    #[serde(rename = "Enpt")]
    pub pseudo_endpoint: String,
    /// `H(t)`.
    #[serde(rename = "Nonce")]
    pub nonce: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenContent {
    pub pid_rp: RpPseudoId,
    pub pid_u: UserPseudoId,
    pub issuer: String,
    pub validity: u64,
    #[serde(default)]
    pub attributes: Attributes,
}

impl CanonicalContent for TokenContent {
    fn canonical_bytes(&self) -> Vec<u8> {
        CanonicalWriter::new("pseudosso/token/v1")
            .field(&self.pid_rp.point().to_bytes())
            .field(&self.pid_u.point().to_bytes())
            .field(self.issuer.as_bytes())
            .u64(self.validity)
            .map(&self.attributes)
            .finish()
    }
}

/// `[PID_RP, PID_U, Issuer, Validity, Attr]_SK`.
pub type IdentityToken = Signed<TokenContent>;

/// Token content that passed signature and expiry checks.
pub type VerifiedToken = TokenContent;

/// Absolute http(s) URL with a host.
pub fn check_endpoint(endpoint: &str) -> Result<url::Url, TokenError> {
    let parsed = url::Url::parse(endpoint).map_err(|e| TokenError::MalformedEndpoint(format!("{endpoint}: {e}")))?;
    if !matches!(parsed.scheme(), "http" | "https") || parsed.host_str().is_none() {
        return Err(TokenError::MalformedEndpoint(endpoint.to_string()));
    }
    Ok(parsed)
}

pub fn issue_cert(
    id_rp: RpId,
    endpoint: &str,
    supplementary: BTreeMap<String, String>,
    kp: &SigningKeyPair,
) -> Result<RpCertificate, TokenError> {
    check_endpoint(endpoint)?;
    Ok(Signed::sign(CertContent { id_rp, endpoint: endpoint.to_string(), supplementary }, kp))
}

pub fn verify_cert(cert: &RpCertificate, pk: &PublicKey) -> bool {
    !cert.content.id_rp.point().is_identity() && cert.signature_valid(pk)
}

/// Signs `OK` with `validity = now + duration`, or `Fail` without a validity.
pub fn issue_registration_result(
    req: &PidRegistrationRequest,
    ok: bool,
    now: u64,
    validity: Validity,
    kp: &SigningKeyPair,
) -> PidRegistrationResult {
    let content = RegistrationContent {
        status: if ok { RegistrationStatus::Ok } else { RegistrationStatus::Fail },
        pid_rp: req.pid_rp,
        nonce: req.nonce,
        validity: ok.then(|| validity.expiry(now)),
    };
    Signed::sign(content, kp)
}

pub fn verify_registration_result(result: &PidRegistrationResult, pk: &PublicKey) -> bool {
    result.signature_valid(pk)
}

pub fn issue_token(
    pid_rp: RpPseudoId,
    pid_u: UserPseudoId,
    issuer: &str,
    attributes: Attributes,
    now: u64,
    validity: Validity,
    kp: &SigningKeyPair,
) -> IdentityToken {
    let content = TokenContent { pid_rp, pid_u, issuer: issuer.to_string(), validity: validity.expiry(now), attributes };
    Signed::sign(content, kp)
}

/// Accepts iff the signature verifies and `now <= validity`.
pub fn verify_token(token: &IdentityToken, pk: &PublicKey, now: u64) -> Result<VerifiedToken, TokenError> {
    let c = &token.content;
    if c.pid_rp.params() != c.pid_u.params() {
        return Err(TokenError::MalformedToken("pseudonyms from different groups".into()));
    }
    if !token.signature_valid(pk) {
        return Err(TokenError::SignatureInvalid);
    }
    if now > c.validity {
        return Err(TokenError::Expired { validity: c.validity, now });
    }
    Ok(c.clone())
}
