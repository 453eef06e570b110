//! Prime-order groups used for identity blinding.
//!
//! Two instantiations share one interface. NIST P-256 is used for real
//! deployments. The toy group is the order-1019 subgroup of the multiplicative
//! group modulo the safe prime 2039; it is small enough that every discrete log
//! can be brute-forced, which lets the tests check protocol properties
//! exhaustively.
//!
//! Elements and scalars carry the group they belong to. Mixing groups is an
//! error rather than a silent coercion.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use p256::elliptic_curve::ff::{Field, PrimeField};
use p256::elliptic_curve::group::Group as _;
use p256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use p256::{AffinePoint, EncodedPoint, FieldBytes, ProjectivePoint};
use rand::{CryptoRng, Rng, RngCore};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Safe prime `p = 2n + 1` defining the toy group.
pub const TOY_MODULUS: u32 = 2039;
/// Prime order `n` of the toy group.
pub const TOY_ORDER: u32 = 1019;
/// Generator of the toy group. Any quadratic residue other than 1 works.
pub const TOY_GENERATOR: u32 = 4;

/// Length of a compressed SEC1 P-256 point.
const P256_POINT_LEN: usize = 33;
const P256_SCALAR_LEN: usize = 32;
const P256_ORDER_HEX: &str = "ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("value is not a member of the group")]
    InvalidElement,
    #[error("scalar is not invertible")]
    NonInvertible,
    #[error("operands belong to different groups")]
    GroupMismatch,
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupId {
    P256,
    Toy,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupId::P256 => "p256",
            GroupId::Toy => "toy",
        })
    }
}

impl FromStr for GroupId {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p256" | "p-256" => Ok(GroupId::P256),
            "toy" => Ok(GroupId::Toy),
            other => Err(GroupError::Malformed(format!("unknown group `{other}`"))),
        }
    }
}

/// A member of one of the supported groups.
///
/// Constructed only through decoding (which checks membership) or through
/// group operations, so every value is a valid element.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum GroupElement {
    P256(AffinePoint),
    Toy(u32),
}

/// An exponent in `[0, n)`.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Scalar {
    P256(p256::Scalar),
    Toy(u32),
}

/// Public parameters of a group: generator `G` and prime order `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupParams {
    id: GroupId,
}

impl GroupParams {
    pub const P256: GroupParams = GroupParams { id: GroupId::P256 };
    pub const TOY: GroupParams = GroupParams { id: GroupId::Toy };

    pub fn new(id: GroupId) -> Self {
        GroupParams { id }
    }

    pub fn id(&self) -> GroupId {
        self.id
    }

    pub fn generator(&self) -> GroupElement {
        match self.id {
            GroupId::P256 => GroupElement::P256(AffinePoint::GENERATOR),
            GroupId::Toy => GroupElement::Toy(TOY_GENERATOR),
        }
    }

    pub fn identity(&self) -> GroupElement {
        match self.id {
            GroupId::P256 => GroupElement::P256(AffinePoint::IDENTITY),
            GroupId::Toy => GroupElement::Toy(1),
        }
    }

    /// The group order as an integer, when it fits in 64 bits (toy group only).
    pub fn order_u64(&self) -> Option<u64> {
        match self.id {
            GroupId::P256 => None,
            GroupId::Toy => Some(TOY_ORDER as u64),
        }
    }

    /// Big-endian bytes of the group order.
    pub fn order_be_bytes(&self) -> Vec<u8> {
        match self.id {
            GroupId::P256 => hex::decode(P256_ORDER_HEX).expect("constant"),
            GroupId::Toy => TOY_ORDER.to_be_bytes().to_vec(),
        }
    }

    /// Scalar for a small integer, reduced modulo `n`.
    pub fn scalar(&self, value: u64) -> Scalar {
        match self.id {
            GroupId::P256 => Scalar::P256(p256::Scalar::from(value)),
            GroupId::Toy => Scalar::Toy((value % TOY_ORDER as u64) as u32),
        }
    }

    /// `[k]p`.
    pub fn scalar_mul(&self, p: &GroupElement, k: &Scalar) -> Result<GroupElement, GroupError> {
        match (self.id, p, k) {
            (GroupId::P256, GroupElement::P256(p), Scalar::P256(k)) => Ok(GroupElement::P256((ProjectivePoint::from(*p) * k).to_affine())),
            (GroupId::Toy, GroupElement::Toy(p), Scalar::Toy(k)) => Ok(GroupElement::Toy(pow_mod(*p, *k, TOY_MODULUS))),
            _ => Err(GroupError::GroupMismatch),
        }
    }

    /// `[k]G`.
    pub fn mul_generator(&self, k: &Scalar) -> Result<GroupElement, GroupError> {
        self.scalar_mul(&self.generator(), k)
    }

    /// `k^{-1} mod n`.
    pub fn scalar_inverse(&self, k: &Scalar) -> Result<Scalar, GroupError> {
        match (self.id, k) {
            (GroupId::P256, Scalar::P256(k)) => Option::<p256::Scalar>::from(k.invert()).map(Scalar::P256).ok_or(GroupError::NonInvertible),
            (GroupId::Toy, Scalar::Toy(0)) => Err(GroupError::NonInvertible),
            // n is prime, so k^(n-2) is the inverse by Fermat.
            (GroupId::Toy, Scalar::Toy(k)) => Ok(Scalar::Toy(pow_mod(*k, TOY_ORDER - 2, TOY_ORDER))),
            _ => Err(GroupError::GroupMismatch),
        }
    }

    /// Uniform scalar in `(lo_exclusive, n)`.
    ///
    /// Panics if the interval is empty.
    pub fn random_scalar<R: RngCore + CryptoRng + ?Sized>(&self, lo_exclusive: u64, rng: &mut R) -> Scalar {
        match self.id {
            GroupId::Toy => {
                assert!(lo_exclusive + 1 < TOY_ORDER as u64, "empty scalar range");
                Scalar::Toy(rng.gen_range(lo_exclusive as u32 + 1..TOY_ORDER))
            }
            GroupId::P256 => loop {
                let s = p256::Scalar::random(&mut *rng);
                let candidate = Scalar::P256(s);
                match candidate.to_u64() {
                    Some(v) if v <= lo_exclusive => continue,
                    _ => return candidate,
                }
            },
        }
    }

    /// Decode the canonical byte encoding of an element, checking membership.
    pub fn decode_element(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        match self.id {
            GroupId::P256 => decode_p256_point(bytes),
            GroupId::Toy => {
                let text = std::str::from_utf8(bytes).map_err(|e| GroupError::Malformed(e.to_string()))?;
                decode_toy_element(text)
            }
        }
    }

    /// Decode the canonical byte encoding of a scalar, rejecting values `>= n`.
    pub fn decode_scalar(&self, bytes: &[u8]) -> Result<Scalar, GroupError> {
        match self.id {
            GroupId::P256 => decode_p256_scalar(bytes),
            GroupId::Toy => {
                let text = std::str::from_utf8(bytes).map_err(|e| GroupError::Malformed(e.to_string()))?;
                decode_toy_scalar(text)
            }
        }
    }

    pub fn contains(&self, e: &GroupElement) -> bool {
        e.group() == self.id
    }

    /// Every element of the toy group, indexed by discrete log: entry `k` is `g^k`.
    ///
    /// Returns `None` for P-256.
    pub fn enumerate(&self) -> Option<Vec<GroupElement>> {
        match self.id {
            GroupId::P256 => None,
            GroupId::Toy => {
                let mut out = Vec::with_capacity(TOY_ORDER as usize);
                let mut acc = 1u32;
                for _ in 0..TOY_ORDER {
                    out.push(GroupElement::Toy(acc));
                    acc = (acc * TOY_GENERATOR) % TOY_MODULUS;
                }
                Some(out)
            }
        }
    }
}

fn pow_mod(base: u32, mut exp: u32, modulus: u32) -> u32 {
    let m = modulus as u64;
    let mut b = base as u64 % m;
    let mut acc = 1u64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc as u32
}

fn decode_p256_point(bytes: &[u8]) -> Result<GroupElement, GroupError> {
    if bytes.len() != P256_POINT_LEN {
        return Err(GroupError::Malformed(format!("expected {P256_POINT_LEN} bytes, got {}", bytes.len())));
    }
    if bytes.iter().all(|b| *b == 0) {
        return Ok(GroupElement::P256(AffinePoint::IDENTITY));
    }
    let encoded = EncodedPoint::from_bytes(bytes).map_err(|_| GroupError::InvalidElement)?;
    Option::<AffinePoint>::from(AffinePoint::from_encoded_point(&encoded)).map(GroupElement::P256).ok_or(GroupError::InvalidElement)
}

fn decode_p256_scalar(bytes: &[u8]) -> Result<Scalar, GroupError> {
    if bytes.len() != P256_SCALAR_LEN {
        return Err(GroupError::Malformed(format!("expected {P256_SCALAR_LEN} bytes, got {}", bytes.len())));
    }
    let mut repr = FieldBytes::default();
    repr.copy_from_slice(bytes);
    Option::<p256::Scalar>::from(p256::Scalar::from_repr(repr))
        .map(Scalar::P256)
        .ok_or_else(|| GroupError::Malformed("scalar not below group order".into()))
}

fn decode_toy_element(text: &str) -> Result<GroupElement, GroupError> {
    let v = parse_decimal(text)?;
    if v == 0 || v >= TOY_MODULUS || pow_mod(v, TOY_ORDER, TOY_MODULUS) != 1 {
        return Err(GroupError::InvalidElement);
    }
    Ok(GroupElement::Toy(v))
}

fn decode_toy_scalar(text: &str) -> Result<Scalar, GroupError> {
    let v = parse_decimal(text)?;
    if v >= TOY_ORDER {
        return Err(GroupError::Malformed("scalar not below group order".into()));
    }
    Ok(Scalar::Toy(v))
}

/// Strict decimal: no sign, no leading zeros, at most 10 digits.
fn parse_decimal(text: &str) -> Result<u32, GroupError> {
    let ok = !text.is_empty() && text.len() <= 10 && text.bytes().all(|b| b.is_ascii_digit()) && (text == "0" || !text.starts_with('0'));
    if !ok {
        return Err(GroupError::Malformed(format!("not a canonical decimal: `{text}`")));
    }
    text.parse::<u32>().map_err(|e| GroupError::Malformed(e.to_string()))
}

impl GroupElement {
    pub fn group(&self) -> GroupId {
        match self {
            GroupElement::P256(_) => GroupId::P256,
            GroupElement::Toy(_) => GroupId::Toy,
        }
    }

    pub fn params(&self) -> GroupParams {
        GroupParams::new(self.group())
    }

    pub fn is_identity(&self) -> bool {
        match self {
            GroupElement::P256(p) => bool::from(ProjectivePoint::from(*p).is_identity()),
            GroupElement::Toy(v) => *v == 1,
        }
    }

    /// Canonical bytes: 33-byte compressed SEC1 for P-256 (all zeros for the
    /// identity), decimal ASCII for the toy group.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            GroupElement::P256(p) => {
                if self.is_identity() {
                    vec![0u8; P256_POINT_LEN]
                } else {
                    p.to_encoded_point(true).as_bytes().to_vec()
                }
            }
            GroupElement::Toy(v) => v.to_string().into_bytes(),
        }
    }

    /// Raw residue of a toy element.
    pub fn toy_value(&self) -> Option<u32> {
        match self {
            GroupElement::Toy(v) => Some(*v),
            GroupElement::P256(_) => None,
        }
    }
}

/// Text form: lowercase hex of the compressed point for P-256, decimal for toy.
impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupElement::P256(_) => f.write_str(&hex::encode(self.to_bytes())),
            GroupElement::Toy(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.group(), self)
    }
}

/// The text form is self-describing: 66 hex digits is a P-256 point, anything
/// else must be a toy-group decimal.
impl FromStr for GroupElement {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 2 * P256_POINT_LEN {
            let bytes = hex::decode(s).map_err(|e| GroupError::Malformed(e.to_string()))?;
            decode_p256_point(&bytes)
        } else {
            decode_toy_element(s)
        }
    }
}

impl Hash for GroupElement {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.group().hash(state);
        self.to_bytes().hash(state);
    }
}

impl Serialize for GroupElement {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GroupElement {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

impl Scalar {
    pub fn group(&self) -> GroupId {
        match self {
            Scalar::P256(_) => GroupId::P256,
            Scalar::Toy(_) => GroupId::Toy,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Scalar::P256(s) => bool::from(s.is_zero()),
            Scalar::Toy(v) => *v == 0,
        }
    }

    /// The value as an integer if it fits in 64 bits.
    pub fn to_u64(&self) -> Option<u64> {
        match self {
            Scalar::Toy(v) => Some(*v as u64),
            Scalar::P256(s) => {
                let repr = s.to_repr();
                let (high, low) = repr.split_at(P256_SCALAR_LEN - 8);
                if high.iter().any(|b| *b != 0) {
                    None
                } else {
                    Some(u64::from_be_bytes(low.try_into().expect("8 bytes")))
                }
            }
        }
    }

    /// `self * other mod n`.
    pub fn mul(&self, other: &Scalar) -> Result<Scalar, GroupError> {
        match (self, other) {
            (Scalar::P256(a), Scalar::P256(b)) => Ok(Scalar::P256(a * b)),
            (Scalar::Toy(a), Scalar::Toy(b)) => Ok(Scalar::Toy(((*a as u64 * *b as u64) % TOY_ORDER as u64) as u32)),
            _ => Err(GroupError::GroupMismatch),
        }
    }

    /// Canonical bytes: 32-byte big-endian for P-256, decimal ASCII for toy.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Scalar::P256(s) => s.to_repr().to_vec(),
            Scalar::Toy(v) => v.to_string().into_bytes(),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::P256(_) => f.write_str(&hex::encode(self.to_bytes())),
            Scalar::Toy(v) => write!(f, "{v}"),
        }
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.group(), self)
    }
}

/// 64 hex digits is a P-256 scalar, anything else a toy-group decimal.
impl FromStr for Scalar {
    type Err = GroupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 2 * P256_SCALAR_LEN {
            let bytes = hex::decode(s).map_err(|e| GroupError::Malformed(e.to_string()))?;
            decode_p256_scalar(&bytes)
        } else {
            decode_toy_scalar(s)
        }
    }
}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.group().hash(state);
        self.to_bytes().hash(state);
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const TOY: GroupParams = GroupParams::TOY;
    const P256: GroupParams = GroupParams::P256;

    /// Element `g^k` computed by repeated multiplication, independent of `pow_mod`.
    fn toy_power(k: u32) -> GroupElement {
        let mut acc = 1u32;
        for _ in 0..k {
            acc = acc * TOY_GENERATOR % TOY_MODULUS;
        }
        GroupElement::Toy(acc)
    }

    #[test]
    fn toy_parameters_are_consistent() {
        assert_eq!(TOY_MODULUS, 2 * TOY_ORDER + 1);
        assert!(is_prime(TOY_MODULUS) && is_prime(TOY_ORDER));
        assert_eq!(toy_power(TOY_ORDER), TOY.identity());
        assert_ne!(toy_power(1), TOY.identity());
    }

    fn is_prime(n: u32) -> bool {
        n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
    }

    #[test]
    fn zero_and_one_scalars() {
        for params in [TOY, P256] {
            let g = params.generator();
            assert!(params.scalar_mul(&g, &params.scalar(0)).unwrap().is_identity());
            assert_eq!(params.scalar_mul(&g, &params.scalar(1)).unwrap(), g);
        }
    }

    #[test]
    fn generator_has_group_order() {
        let n = TOY.scalar(TOY_ORDER as u64);
        assert!(n.is_zero());
        // [n-1]G + G = identity, i.e. [n-1]G is the inverse of G.
        let minus_one = TOY.scalar(TOY_ORDER as u64 - 1);
        let inv = TOY.mul_generator(&minus_one).unwrap();
        assert_eq!(inv.toy_value().unwrap() * TOY_GENERATOR % TOY_MODULUS, 1);

        let p256_minus_one = P256.scalar_inverse(&P256.scalar(1)).unwrap();
        assert_eq!(p256_minus_one, P256.scalar(1));
        let neg = Scalar::P256(-p256::Scalar::ONE);
        let lhs = ProjectivePoint::from(match P256.mul_generator(&neg).unwrap() {
            GroupElement::P256(p) => p,
            _ => unreachable!(),
        }) + ProjectivePoint::GENERATOR;
        assert!(bool::from(lhs.is_identity()));
    }

    #[test]
    fn nested_exponents_compose() {
        // (g^3)^7 = g^21
        let g3 = TOY.scalar_mul(&TOY.generator(), &TOY.scalar(3)).unwrap();
        let g21 = TOY.scalar_mul(&g3, &TOY.scalar(7)).unwrap();
        assert_eq!(g21, toy_power(21));
    }

    #[test]
    fn toy_inverse_of_three() {
        // extended Euclid: 1019 = 3*339 + 2, 3 = 2 + 1  =>  1 = 3*340 - 1019
        assert_eq!(TOY.scalar_inverse(&TOY.scalar(3)).unwrap(), TOY.scalar(340));
        assert_eq!(TOY.scalar_inverse(&TOY.scalar(1)).unwrap(), TOY.scalar(1));
        let m1 = TOY.scalar(TOY_ORDER as u64 - 1);
        assert_eq!(TOY.scalar_inverse(&m1).unwrap(), m1);
        assert_eq!(TOY.scalar_inverse(&TOY.scalar(0)), Err(GroupError::NonInvertible));
        assert_eq!(P256.scalar_inverse(&P256.scalar(0)), Err(GroupError::NonInvertible));
    }

    #[test]
    fn inverse_is_exhaustively_correct_on_toy() {
        for k in 1..TOY_ORDER as u64 {
            let s = TOY.scalar(k);
            let inv = TOY.scalar_inverse(&s).unwrap();
            assert_eq!(s.mul(&inv).unwrap(), TOY.scalar(1), "k={k}");
        }
    }

    #[test]
    fn p256_inverse_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            let k = P256.random_scalar(0, &mut rng);
            let inv = P256.scalar_inverse(&k).unwrap();
            assert_eq!(k.mul(&inv).unwrap(), P256.scalar(1));
        }
        let m1 = Scalar::P256(-p256::Scalar::ONE);
        assert_eq!(P256.scalar_inverse(&m1).unwrap(), m1);
    }

    #[test]
    fn group_laws_exhaustive_small_exponents() {
        let enumerated = TOY.enumerate().unwrap();
        for a in 0..64u64 {
            let pa = TOY.mul_generator(&TOY.scalar(a)).unwrap();
            assert_eq!(pa, enumerated[a as usize]);
            for b in 0..64u64 {
                let lhs = TOY.scalar_mul(&pa, &TOY.scalar(b)).unwrap();
                let rhs = TOY.mul_generator(&TOY.scalar(a * b % TOY_ORDER as u64)).unwrap();
                assert_eq!(lhs, rhs, "a={a} b={b}");
                // associativity of the underlying multiplication
                let pb = enumerated[b as usize].toy_value().unwrap();
                let pc = enumerated[((a + b) % 64) as usize].toy_value().unwrap();
                let x = pa.toy_value().unwrap();
                assert_eq!((x * pb % TOY_MODULUS) * pc % TOY_MODULUS, x * (pb * pc % TOY_MODULUS) % TOY_MODULUS);
            }
        }
    }

    #[test]
    fn random_scalar_respects_lower_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let s = TOY.random_scalar(1, &mut rng);
            let v = s.to_u64().unwrap();
            assert!(v > 1 && v < TOY_ORDER as u64);
        }
        let a = P256.random_scalar(1, &mut rng);
        let b = P256.random_scalar(1, &mut rng);
        assert_ne!(a, b);
        // from_repr only accepts values below n, so a round trip proves a < n.
        assert_eq!(P256.decode_scalar(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn random_scalar_is_uniform_on_toy() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let mut counts = vec![0u64; TOY_ORDER as usize];
        let draws = 100_000;
        for _ in 0..draws {
            counts[TOY.random_scalar(0, &mut rng).to_u64().unwrap() as usize] += 1;
        }
        let support = &counts[1..];
        let p = crate::stats::chi_square_uniform(support).p_value;
        assert!(p > 0.001, "p = {p}");
    }

    #[test]
    fn membership_rejects_non_subgroup_values() {
        // Quadratic non-residues have order 2038 or 2, not 1019.
        let mut rejected = 0;
        for v in 1..TOY_MODULUS {
            let in_subgroup = (1..=TOY_ORDER).any(|k| toy_power(k).toy_value() == Some(v));
            let decoded = TOY.decode_element(v.to_string().as_bytes());
            assert_eq!(decoded.is_ok(), in_subgroup, "v={v}");
            if !in_subgroup {
                rejected += 1;
            }
        }
        assert_eq!(rejected, TOY_MODULUS - 1 - TOY_ORDER);
        assert!(TOY.decode_element(b"0").is_err());
        assert!(TOY.decode_element(b"2039").is_err());
        assert!(TOY.decode_element(b"016").is_err());
    }

    #[test]
    fn p256_rejects_off_curve_points() {
        let mut bytes = P256.generator().to_bytes();
        // G.x xor 2 has no square root for y^2 (checked offline); G.x xor 1 does.
        bytes[32] ^= 2;
        assert!(P256.decode_element(&bytes).is_err());
        assert!(P256.decode_element(&[2u8; 10]).is_err());
    }

    #[test]
    fn encode_decode_round_trip_both_groups() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for params in [TOY, P256] {
            for _ in 0..1000 {
                let k = params.random_scalar(0, &mut rng);
                let e = params.mul_generator(&k).unwrap();
                assert_eq!(params.decode_element(&e.to_bytes()).unwrap(), e);
                assert_eq!(e.to_string().parse::<GroupElement>().unwrap(), e);
                assert_eq!(k.to_string().parse::<Scalar>().unwrap(), k);
                assert_eq!(params.decode_scalar(&k.to_bytes()).unwrap(), k);
            }
            let id = params.identity();
            assert_eq!(params.decode_element(&id.to_bytes()).unwrap(), id);
        }
        let json = serde_json::to_string(&P256.generator()).unwrap();
        assert_eq!(json.len(), 66 + 2);
        assert_eq!(serde_json::from_str::<GroupElement>(&json).unwrap(), P256.generator());
    }

    #[test]
    fn mixing_groups_is_rejected() {
        assert_eq!(TOY.scalar_mul(&P256.generator(), &TOY.scalar(2)), Err(GroupError::GroupMismatch));
        assert_eq!(TOY.scalar(2).mul(&P256.scalar(2)), Err(GroupError::GroupMismatch));
    }
}
