//! Pseudonymous single sign-on.
//!
//! An identity provider (IdP) vouches for users to relying parties (RPs)
//! without learning which RP a user visits, and RPs cannot link one user's
//! accounts across sites. Both properties come from blinding identities with
//! scalar multiplication in a prime-order group (see [`transform`]).
//!
//! The crate contains the whole system: group arithmetic, the signed
//! artifacts, the IdP and RP services (usable in-process or over HTTP), a
//! headless user agent that drives the login flow, and a harness that checks
//! security and privacy properties over recorded transcripts.

pub mod agent;
pub mod clock;
pub mod crypto;
pub mod group;
pub mod harness;
pub mod http;
pub mod idp;
pub mod rng;
pub mod rp;
pub mod stats;
pub mod testing;
pub mod token;
pub mod transform;

pub use clock::{Clock, ManualClock, SystemClock};
pub use crypto::{hash, Digest, PublicKey, Signature, SigningKeyPair};
pub use group::{GroupElement, GroupError, GroupId, GroupParams, Scalar};
pub use rng::RngHandle;
pub use token::{IdentityToken, PidRegistrationRequest, PidRegistrationResult, RpCertificate, Validity};
pub use transform::{Account, RpId, RpPseudoId, Trapdoor, UserId, UserPseudoId};
