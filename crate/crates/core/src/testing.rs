//! Shared fixtures for tests and benchmarks.
//!
//! RSA-2048 generation takes a noticeable fraction of a second, so the keys
//! are generated once per process from fixed seeds.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::SigningKeyPair;

fn generate(seed: u64) -> SigningKeyPair {
    SigningKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed)).expect("RSA keygen")
}

/// The IdP key used throughout the test suites.
pub fn fixture_keypair() -> &'static SigningKeyPair {
    static KEY: OnceLock<SigningKeyPair> = OnceLock::new();
    KEY.get_or_init(|| generate(0x1d9))
}

/// An unrelated key, for "signed by someone else" cases.
pub fn second_keypair() -> &'static SigningKeyPair {
    static KEY: OnceLock<SigningKeyPair> = OnceLock::new();
    KEY.get_or_init(|| generate(0xbad))
}
