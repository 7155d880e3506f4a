//! Protected comparison backends.
//!
//! A backend encrypts templates so that the squared Euclidean distance of
//! two ciphertexts can be evaluated without decrypting either of them; only
//! the resulting score is decrypted by the key holder. The repository ships
//! an insecure plaintext reference and one mock per scheme class. The mocks
//! emulate a randomized public-key encoding with a degree-2 homomorphism
//! over the integers modulo `2^61 - 1`; they provide no security and exist
//! to exercise the contract.
//!
//! Mock ciphertext of a slot value `m` under public key `(b, a)`:
//! `(m + r·b, r·a)` for a fresh random `r`, which decrypts as `c0 + c1·s`.
//! The difference of two ciphertexts encrypts the difference of the values;
//! its square is the degree-2 ciphertext `(d0², 2·d0·d1, d1²)`, decrypted as
//! `e0 + e1·s + e2·s²`.

mod encoding;
mod field;
mod index;
mod keys;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data_io::{Decoder, Encoder};
use crate::error::{Error, Result};

pub use encoding::{
    binarize, dequantize, quantize, QuantizationParams, Quantized, TemplateEncoding, DEFAULT_BITS,
};
pub use index::{
    encrypt_probe, protect_index, rekey, ProtectedComparator, ProtectedIndex, ProtectedNode,
};
pub use keys::{KeyMaterial, PublicKey, SecretKey, SecurityLevel, KEY_MAGIC, MOCK_PARAMS_ID};

/// Default tolerance for the approximate-real scheme, for both
/// decrypt∘encrypt and decrypted comparison scores.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Fixed-point scale of the approximate-real mock.
pub const APPROX_SCALE: f64 = (1u64 << 20) as f64;
/// Encryption noise of the approximate-real mock is uniform in
/// `[-APPROX_NOISE, APPROX_NOISE]` scaled units.
pub const APPROX_NOISE: i64 = 4;
/// Largest magnitude accepted by the approximate-real mock.
pub const APPROX_MAX_ABS: f64 = 1024.0;
/// Largest magnitude accepted by the exact-integer mock.
pub const INT_MAX_ABS: i64 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Stores plaintext; insecure reference.
    #[serde(rename = "plaintext")]
    PlaintextRef,
    /// Approximate arithmetic on reals.
    ApproxReal,
    /// Exact arithmetic on integers.
    ExactInt,
    /// Per-bit arithmetic; the Hamming weight is summed after decryption,
    /// so the key holder sees which bits differ, not only how many.
    Binary,
}

impl Scheme {
    pub const ALL: [Scheme; 4] =
        [Scheme::PlaintextRef, Scheme::ApproxReal, Scheme::ExactInt, Scheme::Binary];

    pub fn id(self) -> u8 {
        match self {
            Scheme::PlaintextRef => 0,
            Scheme::ApproxReal => 1,
            Scheme::ExactInt => 2,
            Scheme::Binary => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PlaintextRef => "plaintext",
            Scheme::ApproxReal => "approx_real",
            Scheme::ExactInt => "exact_int",
            Scheme::Binary => "binary",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme {s:?}")))
    }
}

/// A template in the representation a scheme operates on.
#[derive(Clone, Debug, PartialEq)]
pub enum Plaintext {
    Real(Vec<f64>),
    Integer(Vec<i64>),
    /// Values are 0 or 1.
    Binary(Vec<u8>),
}

impl Plaintext {
    pub fn len(&self) -> usize {
        match self {
            Plaintext::Real(v) => v.len(),
            Plaintext::Integer(v) => v.len(),
            Plaintext::Binary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Squared Euclidean distance in the plaintext domain; the Hamming
    /// distance for bit vectors.
    pub fn squared_distance(&self, other: &Plaintext) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dims(self.len(), other.len()));
        }
        Ok(match (self, other) {
            (Plaintext::Real(a), Plaintext::Real(b)) => crate::model::squared_distance_slices(a, b),
            (Plaintext::Integer(a), Plaintext::Integer(b)) => {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<i64>() as f64
            }
            (Plaintext::Binary(a), Plaintext::Binary(b)) => {
                a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
            }
            _ => return Err(Error::Representation("mixed plaintext kinds".into())),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    Plain(Vec<f64>),
    /// `(c0, c1)` per slot.
    Cipher(Vec<[u64; 2]>),
}

/// An encrypted template. The `c1` half of every slot is the encryption
/// randomizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedTemplate {
    scheme: Scheme,
    key_id: u64,
    payload: Payload,
}

impl ProtectedTemplate {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Plain(v) => v.len(),
            Payload::Cipher(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Opaque serialized form: u8 scheme, u64 key id, u32 slots, then an
    /// f64 per slot (plaintext reference) or two u64 per slot.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        self.write(&mut enc);
        enc.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let t = Self::read(&mut dec)?;
        dec.finish()?;
        Ok(t)
    }

    pub(crate) fn write(&self, enc: &mut Encoder) {
        enc.u8(self.scheme.id());
        enc.u64(self.key_id);
        enc.u32(self.len() as u32);
        match &self.payload {
            Payload::Plain(v) => v.iter().for_each(|x| enc.bytes(&x.to_le_bytes())),
            Payload::Cipher(v) => v.iter().flatten().for_each(|&c| enc.u64(c)),
        }
    }

    pub(crate) fn read(dec: &mut Decoder<'_>) -> Result<Self> {
        let scheme =
            Scheme::from_id(dec.u8()?).ok_or_else(|| Error::Corrupt("unknown scheme id".into()))?;
        let key_id = dec.u64()?;
        let len = dec.u32()? as usize;
        let payload = if scheme == Scheme::PlaintextRef {
            Payload::Plain(
                (0..len)
                    .map(|_| Ok(f64::from_le_bytes(dec.take(8)?.try_into().expect("8 bytes"))))
                    .collect::<Result<_>>()?,
            )
        } else {
            Payload::Cipher(
                (0..len)
                    .map(|_| {
                        let c = [dec.u64()?, dec.u64()?];
                        if c.iter().any(|&x| x >= field::Q) {
                            return Err(Error::Corrupt("ciphertext out of range".into()));
                        }
                        Ok(c)
                    })
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Self { scheme, key_id, payload })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ScoreData {
    Plain(f64),
    /// Degree-2 ciphertexts: one in total, or one per bit for [`Scheme::Binary`].
    Cipher(Vec<[u64; 3]>),
}

/// Encrypted comparison result.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtectedScore {
    scheme: Scheme,
    key_id: u64,
    data: ScoreData,
}

impl ProtectedScore {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

/// A protected-comparison backend.
pub trait Backend: Send + Sync {
    fn scheme(&self) -> Scheme;

    fn encrypt(
        &self,
        plaintext: &Plaintext,
        keys: &KeyMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<ProtectedTemplate>;

    fn decrypt(&self, template: &ProtectedTemplate, keys: &KeyMaterial) -> Result<Plaintext>;

    /// Squared Euclidean distance, or per-position differences for
    /// [`Scheme::Binary`], evaluated on ciphertexts.
    fn compare(&self, a: &ProtectedTemplate, b: &ProtectedTemplate) -> Result<ProtectedScore>;

    /// The plaintext score; for [`Scheme::Binary`] the Hamming weight of the
    /// decrypted difference vector.
    fn decrypt_score(&self, score: &ProtectedScore, keys: &KeyMaterial) -> Result<f64>;
}

struct PlaintextBackend;

struct MockBackend(Scheme);

static PLAINTEXT: PlaintextBackend = PlaintextBackend;
static APPROX_REAL: MockBackend = MockBackend(Scheme::ApproxReal);
static EXACT_INT: MockBackend = MockBackend(Scheme::ExactInt);
static BINARY: MockBackend = MockBackend(Scheme::Binary);

pub fn backend(scheme: Scheme) -> &'static dyn Backend {
    match scheme {
        Scheme::PlaintextRef => &PLAINTEXT,
        Scheme::ApproxReal => &APPROX_REAL,
        Scheme::ExactInt => &EXACT_INT,
        Scheme::Binary => &BINARY,
    }
}

fn check_key(keys: &KeyMaterial, scheme: Scheme) -> Result<()> {
    if keys.scheme != scheme {
        return Err(Error::SchemeMismatch {
            expected: scheme.to_string(),
            found: keys.scheme.to_string(),
        });
    }
    Ok(())
}

fn check_template(t: &ProtectedTemplate, keys: &KeyMaterial) -> Result<()> {
    check_key(keys, t.scheme)?;
    if t.key_id != keys.key_id {
        return Err(Error::KeyMismatch { template: t.key_id, supplied: keys.key_id });
    }
    Ok(())
}

fn check_pair(a: &ProtectedTemplate, b: &ProtectedTemplate, scheme: Scheme) -> Result<()> {
    for t in [a, b] {
        if t.scheme != scheme {
            return Err(Error::SchemeMismatch {
                expected: scheme.to_string(),
                found: t.scheme.to_string(),
            });
        }
    }
    if a.key_id != b.key_id {
        return Err(Error::KeyMismatch { template: b.key_id, supplied: a.key_id });
    }
    if a.len() != b.len() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

fn representation_error(scheme: Scheme) -> Error {
    Error::Representation(scheme.to_string())
}

impl Backend for PlaintextBackend {
    fn scheme(&self) -> Scheme {
        Scheme::PlaintextRef
    }

    fn encrypt(
        &self,
        plaintext: &Plaintext,
        keys: &KeyMaterial,
        _rng: &mut dyn RngCore,
    ) -> Result<ProtectedTemplate> {
        check_key(keys, Scheme::PlaintextRef)?;
        let Plaintext::Real(values) = plaintext else {
            return Err(representation_error(Scheme::PlaintextRef));
        };
        Ok(ProtectedTemplate {
            scheme: Scheme::PlaintextRef,
            key_id: keys.key_id,
            payload: Payload::Plain(values.clone()),
        })
    }

    fn decrypt(&self, template: &ProtectedTemplate, keys: &KeyMaterial) -> Result<Plaintext> {
        check_template(template, keys)?;
        match &template.payload {
            Payload::Plain(v) => Ok(Plaintext::Real(v.clone())),
            Payload::Cipher(_) => {
                Err(Error::Corrupt("cipher payload in plaintext template".into()))
            }
        }
    }

    fn compare(&self, a: &ProtectedTemplate, b: &ProtectedTemplate) -> Result<ProtectedScore> {
        check_pair(a, b, Scheme::PlaintextRef)?;
        let (Payload::Plain(x), Payload::Plain(y)) = (&a.payload, &b.payload) else {
            return Err(Error::Corrupt("cipher payload in plaintext template".into()));
        };
        Ok(ProtectedScore {
            scheme: Scheme::PlaintextRef,
            key_id: a.key_id,
            data: ScoreData::Plain(crate::model::squared_distance_slices(x, y)),
        })
    }

    fn decrypt_score(&self, score: &ProtectedScore, keys: &KeyMaterial) -> Result<f64> {
        check_key(keys, Scheme::PlaintextRef)?;
        match score.data {
            ScoreData::Plain(v) => Ok(v),
            ScoreData::Cipher(_) => Err(Error::Corrupt("cipher score for plaintext scheme".into())),
        }
    }
}

impl MockBackend {
    /// Slot values as field elements.
    fn encode(&self, plaintext: &Plaintext, rng: &mut dyn RngCore) -> Result<Vec<u64>> {
        match (self.0, plaintext) {
            (Scheme::ApproxReal, Plaintext::Real(v)) => v
                .iter()
                .map(|&x| {
                    if !(x.is_finite() && x.abs() <= APPROX_MAX_ABS) {
                        return Err(Error::InvalidParameter(format!(
                            "value {x} outside the approximate-real range"
                        )));
                    }
                    let noise = rng.random_range(-APPROX_NOISE..=APPROX_NOISE);
                    Ok(field::from_signed((x * APPROX_SCALE).round() as i64 + noise))
                })
                .collect(),
            (Scheme::ExactInt, Plaintext::Integer(v)) => v
                .iter()
                .map(|&x| {
                    if x.abs() > INT_MAX_ABS {
                        return Err(Error::InvalidParameter(format!(
                            "integer {x} outside the exact-integer range"
                        )));
                    }
                    Ok(field::from_signed(x))
                })
                .collect(),
            (Scheme::Binary, Plaintext::Binary(v)) => v
                .iter()
                .map(|&b| match b {
                    0 | 1 => Ok(u64::from(b)),
                    _ => Err(Error::InvalidParameter(format!("bit value {b}"))),
                })
                .collect(),
            _ => Err(representation_error(self.0)),
        }
    }

    fn decode(&self, slots: Vec<i64>) -> Plaintext {
        match self.0 {
            Scheme::ApproxReal => {
                Plaintext::Real(slots.into_iter().map(|m| m as f64 / APPROX_SCALE).collect())
            }
            Scheme::ExactInt => Plaintext::Integer(slots),
            _ => Plaintext::Binary(slots.into_iter().map(|m| m as u8).collect()),
        }
    }

    fn cipher(t: &ProtectedTemplate) -> Result<&[[u64; 2]]> {
        match &t.payload {
            Payload::Cipher(c) => Ok(c),
            Payload::Plain(_) => Err(Error::Corrupt("plaintext payload in mock template".into())),
        }
    }

    /// Per-slot decrypted degree-2 values.
    fn open(&self, score: &ProtectedScore, keys: &KeyMaterial) -> Result<Vec<i64>> {
        check_key(keys, self.0)?;
        if score.key_id != keys.key_id {
            return Err(Error::KeyMismatch { template: score.key_id, supplied: keys.key_id });
        }
        let s = keys.secret()?.s;
        let s2 = field::mul(s, s);
        let ScoreData::Cipher(terms) = &score.data else {
            return Err(Error::Corrupt("plaintext score for mock scheme".into()));
        };
        Ok(terms
            .iter()
            .map(|t| {
                field::to_signed(field::add(
                    t[0],
                    field::add(field::mul(t[1], s), field::mul(t[2], s2)),
                ))
            })
            .collect())
    }
}

impl Backend for MockBackend {
    fn scheme(&self) -> Scheme {
        self.0
    }

    fn encrypt(
        &self,
        plaintext: &Plaintext,
        keys: &KeyMaterial,
        rng: &mut dyn RngCore,
    ) -> Result<ProtectedTemplate> {
        check_key(keys, self.0)?;
        let slots = self.encode(plaintext, rng)?;
        let pk = keys.public;
        let cipher = slots
            .into_iter()
            .map(|m| {
                let r = field::random(&mut *rng);
                [field::add(m, field::mul(r, pk.b)), field::mul(r, pk.a)]
            })
            .collect();
        Ok(ProtectedTemplate {
            scheme: self.0,
            key_id: keys.key_id,
            payload: Payload::Cipher(cipher),
        })
    }

    fn decrypt(&self, template: &ProtectedTemplate, keys: &KeyMaterial) -> Result<Plaintext> {
        check_template(template, keys)?;
        let s = keys.secret()?.s;
        let slots = Self::cipher(template)?
            .iter()
            .map(|c| field::to_signed(field::add(c[0], field::mul(c[1], s))))
            .collect();
        Ok(self.decode(slots))
    }

    fn compare(&self, a: &ProtectedTemplate, b: &ProtectedTemplate) -> Result<ProtectedScore> {
        check_pair(a, b, self.0)?;
        let squares = Self::cipher(a)?.iter().zip(Self::cipher(b)?).map(|(x, y)| {
            let d0 = field::sub(x[0], y[0]);
            let d1 = field::sub(x[1], y[1]);
            let cross = field::mul(d0, d1);
            [field::mul(d0, d0), field::add(cross, cross), field::mul(d1, d1)]
        });
        let terms = if self.0 == Scheme::Binary {
            squares.collect()
        } else {
            vec![squares.fold([0; 3], |acc, t| {
                [field::add(acc[0], t[0]), field::add(acc[1], t[1]), field::add(acc[2], t[2])]
            })]
        };
        Ok(ProtectedScore { scheme: self.0, key_id: a.key_id, data: ScoreData::Cipher(terms) })
    }

    fn decrypt_score(&self, score: &ProtectedScore, keys: &KeyMaterial) -> Result<f64> {
        let values = self.open(score, keys)?;
        Ok(match self.0 {
            Scheme::ApproxReal => values[0] as f64 / (APPROX_SCALE * APPROX_SCALE),
            Scheme::ExactInt => values[0] as f64,
            _ => values.iter().sum::<i64>() as f64,
        })
    }
}

pub fn encrypt(
    plaintext: &Plaintext,
    keys: &KeyMaterial,
    rng: &mut dyn RngCore,
) -> Result<ProtectedTemplate> {
    backend(keys.scheme).encrypt(plaintext, keys, rng)
}

pub fn decrypt(template: &ProtectedTemplate, keys: &KeyMaterial) -> Result<Plaintext> {
    backend(template.scheme).decrypt(template, keys)
}

pub fn compare_protected(a: &ProtectedTemplate, b: &ProtectedTemplate) -> Result<ProtectedScore> {
    backend(a.scheme).compare(a, b)
}

pub fn decrypt_score(score: &ProtectedScore, keys: &KeyMaterial) -> Result<f64> {
    backend(score.scheme).decrypt_score(score, keys)
}

/// The decrypted per-position XOR vector of a binary comparison.
pub fn decrypt_differences(score: &ProtectedScore, keys: &KeyMaterial) -> Result<Vec<u8>> {
    if score.scheme != Scheme::Binary {
        return Err(Error::SchemeMismatch {
            expected: Scheme::Binary.to_string(),
            found: score.scheme.to_string(),
        });
    }
    Ok(BINARY.open(score, keys)?.into_iter().map(|v| v as u8).collect())
}
