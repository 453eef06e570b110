//! Hashing and the IdP signature scheme (RSA-2048, PKCS#1 v1.5, SHA-256).

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{CryptoRng, RngCore};
use rsa::pkcs1v15::{SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::group::Scalar;

pub const RSA_BITS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("malformed signature")]
    MalformedSignature,
}

/// A SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// `H(t)` over the canonical scalar encoding.
pub fn hash_scalar(t: &Scalar) -> Digest {
    hash(&t.to_bytes())
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({self})")
    }
}

impl FromStr for Digest {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Raw signature bytes; base64 in JSON.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Signature(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(&self.0)
    }

    pub fn from_base64(s: &str) -> Result<Self, KeyError> {
        BASE64.decode(s).map(Signature).map_err(|_| KeyError::MalformedSignature)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b64 = self.to_base64();
        write!(f, "Signature({}…)", &b64[..b64.len().min(12)])
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_base64())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Signature::from_base64(&s).map_err(de::Error::custom)
    }
}

/// The IdP verification key `PK`.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey(RsaPublicKey);

impl PublicKey {
    pub fn to_pem(&self) -> String {
        self.0.to_public_key_pem(LineEnding::LF).expect("RSA public key encodes")
    }

    pub fn from_pem(pem: &str) -> Result<Self, KeyError> {
        RsaPublicKey::from_public_key_pem(pem).map(PublicKey).map_err(|e| KeyError::MalformedKey(e.to_string()))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let der = self.0.to_public_key_der().map(|d| d.as_bytes().to_vec()).unwrap_or_default();
        write!(f, "PublicKey({})", &hash(&der).to_string()[..16])
    }
}

/// The IdP signing key pair `(SK, PK)`.
#[derive(Clone)]
pub struct SigningKeyPair {
    sk: RsaPrivateKey,
    pk: PublicKey,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<Self, KeyError> {
        let sk = RsaPrivateKey::new(&mut RngAdapter(rng), RSA_BITS).map_err(|e| KeyError::MalformedKey(e.to_string()))?;
        Ok(Self::from_private(sk))
    }

    fn from_private(sk: RsaPrivateKey) -> Self {
        let pk = PublicKey(sk.to_public_key());
        SigningKeyPair { sk, pk }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    /// PKCS#8 PEM of the private key.
    pub fn to_pem(&self) -> String {
        self.sk.to_pkcs8_pem(LineEnding::LF).expect("RSA private key encodes").to_string()
    }

    pub fn from_pem(pem: &str) -> Result<Self, KeyError> {
        RsaPrivateKey::from_pkcs8_pem(pem).map(Self::from_private).map_err(|e| KeyError::MalformedKey(e.to_string()))
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

pub fn sign(msg: &[u8], kp: &SigningKeyPair) -> Signature {
    let key = SigningKey::<Sha256>::new(kp.sk.clone());
    Signature(key.sign(msg).to_vec())
}

pub fn verify(msg: &[u8], sig: &Signature, pk: &PublicKey) -> bool {
    let Ok(sig) = rsa::pkcs1v15::Signature::try_from(sig.as_bytes()) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(pk.0.clone()).verify(msg, &sig).is_ok()
}

/// Lets an unsized RNG reference satisfy the sized bounds of the `rsa` API.
struct RngAdapter<'a, R: ?Sized>(&'a mut R);

impl<R: RngCore + ?Sized> RngCore for RngAdapter<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

impl<R: CryptoRng + ?Sized> CryptoRng for RngAdapter<'_, R> {}
