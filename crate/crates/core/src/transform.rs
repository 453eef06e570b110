//! Identity transformations.
//!
//! A user `u` and an RP `ID_RP = [r]G` never appear together in a login:
//!
//! * the user blinds the RP identity with a fresh trapdoor `t`:
//!   `PID_RP = [t]ID_RP`;
//! * the IdP binds the authenticated user to that pseudonym:
//!   `PID_U = [u]PID_RP = [utr]G`;
//! * the RP, knowing `t`, removes the blinding:
//!   `Acct = [t^-1]PID_U = [ur]G`, which is the same in every login.

use std::collections::HashSet;
use std::fmt;
use std::hash::Hash;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{GroupElement, GroupError, GroupParams, Scalar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("trapdoor must satisfy 1 < t < n")]
    TrapdoorOutOfRange,
    #[error("user identifier must satisfy 1 < u < n")]
    UserIdOutOfRange,
    #[error("identity element is not a valid identifier")]
    DegenerateElement,
    #[error("identifier space exhausted")]
    RegistryExhausted,
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// True when `1 < s < n`.
fn above_one(s: &Scalar) -> bool {
    !matches!(s.to_u64(), Some(0) | Some(1))
}

macro_rules! point_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(try_from = "GroupElement", into = "GroupElement")]
        pub struct $name(GroupElement);

        impl $name {
            /// Rejects the identity element.
            pub fn new(point: GroupElement) -> Result<Self, TransformError> {
                if point.is_identity() {
                    Err(TransformError::DegenerateElement)
                } else {
                    Ok($name(point))
                }
            }

            pub fn point(&self) -> &GroupElement {
                &self.0
            }

            pub fn params(&self) -> GroupParams {
                self.0.params()
            }
        }

        impl TryFrom<GroupElement> for $name {
            type Error = TransformError;
            fn try_from(p: GroupElement) -> Result<Self, Self::Error> {
                $name::new(p)
            }
        }

        impl From<$name> for GroupElement {
            fn from(v: $name) -> GroupElement {
                v.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({:?})"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(&self.0, f)
            }
        }
    };
}

point_newtype!(
    /// `ID_RP = [r]G`, assigned by the IdP at RP registration.
    RpId
);
point_newtype!(
    /// `PID_RP = [t]ID_RP`, the per-login RP pseudonym the IdP sees.
    RpPseudoId
);
point_newtype!(
    /// `PID_U = [u]PID_RP`, the per-login user pseudonym in identity tokens.
    UserPseudoId
);
point_newtype!(
    /// `Acct = [u]ID_RP`, the user's permanent account at one RP.
    Account
);

/// `ID_U = u` with `1 < u < n`. Known only to the IdP.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Scalar", into = "Scalar")]
pub struct UserId(Scalar);

impl UserId {
    pub fn new(u: Scalar) -> Result<Self, TransformError> {
        if above_one(&u) {
            Ok(UserId(u))
        } else {
            Err(TransformError::UserIdOutOfRange)
        }
    }

    pub fn scalar(&self) -> &Scalar {
        &self.0
    }
}

impl TryFrom<Scalar> for UserId {
    type Error = TransformError;
    fn try_from(s: Scalar) -> Result<Self, Self::Error> {
        UserId::new(s)
    }
}

impl From<UserId> for Scalar {
    fn from(u: UserId) -> Scalar {
        u.0
    }
}

impl fmt::Debug for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UserId({:?})", self.0)
    }
}

/// The per-login trapdoor `t` together with `t^-1 mod n`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Trapdoor {
    t: Scalar,
    t_inv: Scalar,
}

impl Trapdoor {
    /// Checks `1 < t < n` and computes the inverse eagerly.
    pub fn new(t: Scalar) -> Result<Self, TransformError> {
        if !above_one(&t) {
            return Err(TransformError::TrapdoorOutOfRange);
        }
        let t_inv = GroupParams::new(t.group()).scalar_inverse(&t)?;
        Ok(Trapdoor { t, t_inv })
    }

    pub fn random<R: RngCore + CryptoRng + ?Sized>(params: &GroupParams, rng: &mut R) -> Self {
        Trapdoor::new(params.random_scalar(1, rng)).expect("random_scalar honours the lower bound")
    }

    pub fn value(&self) -> &Scalar {
        &self.t
    }

    pub fn inverse(&self) -> &Scalar {
        &self.t_inv
    }
}

impl fmt::Debug for Trapdoor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Trapdoor({:?})", self.t)
    }
}

/// `PID_RP = [t]ID_RP`.
pub fn derive_pid_rp(id_rp: &RpId, t: &Trapdoor) -> Result<RpPseudoId, TransformError> {
    let p = id_rp.params().scalar_mul(id_rp.point(), t.value())?;
    RpPseudoId::new(p)
}

/// `PID_U = [ID_U]PID_RP`.
pub fn derive_pid_u(id_u: &UserId, pid_rp: &RpPseudoId) -> Result<UserPseudoId, TransformError> {
    let p = pid_rp.params().scalar_mul(pid_rp.point(), id_u.scalar())?;
    UserPseudoId::new(p)
}

/// `Acct = [t^-1]PID_U`.
pub fn derive_account(pid_u: &UserPseudoId, t: &Trapdoor) -> Result<Account, TransformError> {
    let p = pid_u.params().scalar_mul(pid_u.point(), t.inverse())?;
    Account::new(p)
}

/// `[ID_U]ID_RP` computed directly; what `derive_account` must reproduce.
pub fn direct_account(id_u: &UserId, id_rp: &RpId) -> Result<Account, TransformError> {
    let p = id_rp.params().scalar_mul(id_rp.point(), id_u.scalar())?;
    Account::new(p)
}

/// Identifiers issued so far, for uniqueness.
#[derive(Debug, Clone)]
pub struct IdRegistry<T> {
    issued: HashSet<T>,
}

impl<T> Default for IdRegistry<T> {
    fn default() -> Self {
        IdRegistry { issued: HashSet::new() }
    }
}

impl<T: Hash + Eq> IdRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: &T) -> bool {
        self.issued.contains(id)
    }

    pub fn len(&self) -> usize {
        self.issued.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issued.is_empty()
    }

    /// Records an externally known identifier (e.g. restored from disk).
    /// Returns false if it was already present.
    pub fn insert(&mut self, id: T) -> bool {
        self.issued.insert(id)
    }
}

/// Both identifier kinds are drawn from the `n - 2` values `1 < x < n`.
fn capacity(params: &GroupParams) -> Option<usize> {
    params.order_u64().map(|n| (n - 2) as usize)
}

/// Fresh uniform `u` with `1 < u < n`, distinct from every issued one.
pub fn new_user_id<R: RngCore + CryptoRng + ?Sized>(
    registry: &mut IdRegistry<UserId>,
    params: &GroupParams,
    rng: &mut R,
) -> Result<UserId, TransformError> {
    if capacity(params).is_some_and(|c| registry.len() >= c) {
        return Err(TransformError::RegistryExhausted);
    }
    loop {
        let u = UserId::new(params.random_scalar(1, rng))?;
        if registry.insert(u) {
            return Ok(u);
        }
    }
}

/// Fresh `ID_RP = [r]G` for uniform `1 < r < n`. `r` is dropped on return.
pub fn new_rp_id<R: RngCore + CryptoRng + ?Sized>(
    registry: &mut IdRegistry<RpId>,
    params: &GroupParams,
    rng: &mut R,
) -> Result<RpId, TransformError> {
    if capacity(params).is_some_and(|c| registry.len() >= c) {
        return Err(TransformError::RegistryExhausted);
    }
    loop {
        let r = params.random_scalar(1, rng);
        let id = RpId::new(params.mul_generator(&r)?)?;
        if registry.insert(id) {
            return Ok(id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{TOY_GENERATOR, TOY_MODULUS, TOY_ORDER};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const TOY: GroupParams = GroupParams::TOY;

    /// `g^k` by repeated multiplication.
    fn g_pow(k: u64) -> GroupElement {
        let mut acc = 1u32;
        for _ in 0..(k % TOY_ORDER as u64) {
            acc = acc * TOY_GENERATOR % TOY_MODULUS;
        }
        GroupElement::Toy(acc)
    }

    fn trapdoor(t: u64) -> Trapdoor {
        Trapdoor::new(TOY.scalar(t)).unwrap()
    }

    fn rp(r: u64) -> RpId {
        RpId::new(g_pow(r)).unwrap()
    }

    fn user(u: u64) -> UserId {
        UserId::new(TOY.scalar(u)).unwrap()
    }

    #[test]
    fn pid_rp_examples() {
        assert_eq!(*derive_pid_rp(&rp(7), &trapdoor(3)).unwrap().point(), g_pow(21));
        assert_eq!(Trapdoor::new(TOY.scalar(1)), Err(TransformError::TrapdoorOutOfRange));
        assert_eq!(Trapdoor::new(TOY.scalar(0)), Err(TransformError::TrapdoorOutOfRange));
        // t = n-1: 7*(n-1) = -7 = 1012 (mod n)
        let pid = derive_pid_rp(&rp(7), &trapdoor(TOY_ORDER as u64 - 1)).unwrap();
        assert_eq!(*pid.point(), g_pow(1012));
    }

    #[test]
    fn pid_u_examples() {
        let pid_rp = RpPseudoId::new(g_pow(21)).unwrap();
        assert_eq!(*derive_pid_u(&user(5), &pid_rp).unwrap().point(), g_pow(105));
        assert_ne!(derive_pid_u(&user(5), &pid_rp).unwrap(), derive_pid_u(&user(6), &pid_rp).unwrap());
        assert_eq!(RpPseudoId::new(TOY.identity()), Err(TransformError::DegenerateElement));
        // identity absorbs any exponent
        assert!(TOY.scalar_mul(&TOY.identity(), &TOY.scalar(5)).unwrap().is_identity());
    }

    #[test]
    fn account_example() {
        let pid_u = UserPseudoId::new(g_pow(105)).unwrap();
        let t = trapdoor(3);
        assert_eq!(*t.inverse(), TOY.scalar(340));
        assert_eq!(*derive_account(&pid_u, &t).unwrap().point(), g_pow(35));
        // re-decoding t gives the same account
        let t2 = Trapdoor::new(t.value().to_string().parse().unwrap()).unwrap();
        assert_eq!(derive_account(&pid_u, &t2).unwrap(), derive_account(&pid_u, &t).unwrap());
    }

    #[test]
    fn round_trip_matches_dlog_oracle() {
        let table = TOY.enumerate().unwrap();
        let dlog: std::collections::HashMap<_, _> = table.iter().enumerate().map(|(k, e)| (*e, k as u64)).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let u = TOY.random_scalar(1, &mut rng).to_u64().unwrap();
            let r = TOY.random_scalar(1, &mut rng).to_u64().unwrap();
            let t = trapdoor(TOY.random_scalar(1, &mut rng).to_u64().unwrap());
            let id_rp = rp(r);
            let pid_rp = derive_pid_rp(&id_rp, &t).unwrap();
            let acct = derive_account(&derive_pid_u(&user(u), &pid_rp).unwrap(), &t).unwrap();
            assert_eq!(dlog[acct.point()], u * r % TOY_ORDER as u64);
            assert_eq!(acct, direct_account(&user(u), &id_rp).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn account_is_stable_across_trapdoors(
            u in 2u64..TOY_ORDER as u64,
            r in 2u64..TOY_ORDER as u64,
            t1 in 2u64..TOY_ORDER as u64,
            t2 in 2u64..TOY_ORDER as u64,
        ) {
            prop_assume!(t1 != t2);
            let id_rp = rp(r);
            let a1 = derive_account(&derive_pid_u(&user(u), &derive_pid_rp(&id_rp, &trapdoor(t1)).unwrap()).unwrap(), &trapdoor(t1)).unwrap();
            let a2 = derive_account(&derive_pid_u(&user(u), &derive_pid_rp(&id_rp, &trapdoor(t2)).unwrap()).unwrap(), &trapdoor(t2)).unwrap();
            prop_assert_eq!(a1, a2);
        }
    }

    #[test]
    fn p256_account_is_stable() {
        let params = GroupParams::P256;
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut reg = IdRegistry::new();
        let id_rp = new_rp_id(&mut reg, &params, &mut rng).unwrap();
        let mut ureg = IdRegistry::new();
        let u = new_user_id(&mut ureg, &params, &mut rng).unwrap();
        let expected = direct_account(&u, &id_rp).unwrap();
        for _ in 0..10 {
            let t = Trapdoor::random(&params, &mut rng);
            let pid_u = derive_pid_u(&u, &derive_pid_rp(&id_rp, &t).unwrap()).unwrap();
            assert_eq!(derive_account(&pid_u, &t).unwrap(), expected);
        }
    }

    #[test]
    fn accounts_unique_per_rp_and_per_user() {
        let id_rp = rp(7);
        let accounts: HashSet<_> = (2..64).map(|u| direct_account(&user(u), &id_rp).unwrap()).collect();
        assert_eq!(accounts.len(), 62);
        let u = user(5);
        let per_rp: HashSet<_> = (2..TOY_ORDER as u64).map(|r| direct_account(&u, &rp(r)).unwrap()).collect();
        assert_eq!(per_rp.len(), TOY_ORDER as usize - 2);
    }

    #[test]
    fn trapdoor_map_is_injective() {
        for r in [2u64, 7, 500, 1018] {
            let id_rp = rp(r);
            let pids: HashSet<_> = (2..TOY_ORDER as u64).map(|t| derive_pid_rp(&id_rp, &trapdoor(t)).unwrap()).collect();
            assert_eq!(pids.len(), TOY_ORDER as usize - 2);
        }
    }

    #[test]
    fn issuance_is_unique_and_exhausts() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut users = IdRegistry::new();
        let a = new_user_id(&mut users, &TOY, &mut rng).unwrap();
        let b = new_user_id(&mut users, &TOY, &mut rng).unwrap();
        assert_ne!(a, b);
        while users.len() < TOY_ORDER as usize - 2 {
            new_user_id(&mut users, &TOY, &mut rng).unwrap();
        }
        assert_eq!(new_user_id(&mut users, &TOY, &mut rng), Err(TransformError::RegistryExhausted));

        let mut rps = IdRegistry::new();
        let id = new_rp_id(&mut rps, &TOY, &mut rng).unwrap();
        assert!(TOY.decode_element(&id.point().to_bytes()).is_ok());
        assert!(!id.point().is_identity());
        while rps.len() < TOY_ORDER as usize - 2 {
            new_rp_id(&mut rps, &TOY, &mut rng).unwrap();
        }
        assert_eq!(new_rp_id(&mut rps, &TOY, &mut rng), Err(TransformError::RegistryExhausted));
        assert!(!rps.contains(&RpId::new(TOY.generator()).unwrap()), "r = 1 is never issued");
    }

    #[test]
    fn user_id_range() {
        assert_eq!(UserId::new(TOY.scalar(1)), Err(TransformError::UserIdOutOfRange));
        assert!(serde_json::from_str::<UserId>("\"1\"").is_err());
        assert_eq!(serde_json::from_str::<UserId>("\"5\"").unwrap(), user(5));
        assert!(serde_json::from_str::<RpId>("\"1\"").is_err());
    }
}
