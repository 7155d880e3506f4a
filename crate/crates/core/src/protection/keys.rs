//! Key material and the `BKEY` key file.
//!
//! Layout: magic, u16 version, u8 scheme, u8 sections (bit 0: secret
//! present), u16 security level, u16 params id, u64 key id, u64 public b,
//! u64 public a, then u64 secret s when present.

use std::fmt;
use std::path::Path;

use rand::RngCore;

use super::{field, Scheme};
use crate::data_io::{write_atomic, FORMAT_VERSION};
use crate::data_io::{Decoder, Encoder};
use crate::error::{Error, Result};

pub const KEY_MAGIC: [u8; 4] = *b"BKEY";

/// Parameter set of the mock schemes. Bumped if the encoding changes.
pub const MOCK_PARAMS_ID: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SecurityLevel {
    Bits128,
    Bits192,
    Bits256,
}

impl SecurityLevel {
    pub fn bits(self) -> u16 {
        match self {
            SecurityLevel::Bits128 => 128,
            SecurityLevel::Bits192 => 192,
            SecurityLevel::Bits256 => 256,
        }
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        match bits {
            128 => Ok(SecurityLevel::Bits128),
            192 => Ok(SecurityLevel::Bits192),
            256 => Ok(SecurityLevel::Bits256),
            _ => Err(Error::InvalidParameter(format!(
                "security level {bits} is not one of 128, 192, 256"
            ))),
        }
    }
}

/// `b = -a·s`, so that `b + a·s = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PublicKey {
    pub b: u64,
    pub a: u64,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    pub(crate) s: u64,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMaterial {
    pub key_id: u64,
    pub scheme: Scheme,
    pub params_id: u16,
    pub security_level: SecurityLevel,
    pub public: PublicKey,
    pub secret: Option<SecretKey>,
}

impl KeyMaterial {
    pub fn generate(scheme: Scheme, security_level: SecurityLevel, rng: &mut dyn RngCore) -> Self {
        let s = 1 + field::random(&mut *rng) % (field::Q - 1);
        let a = field::random(&mut *rng);
        let key_id = rng.next_u64();
        Self {
            key_id,
            scheme,
            params_id: MOCK_PARAMS_ID,
            security_level,
            public: PublicKey { b: field::neg(field::mul(a, s)), a },
            secret: Some(SecretKey { s }),
        }
    }

    /// A copy without the secret section.
    pub fn public_only(&self) -> Self {
        Self { secret: None, ..self.clone() }
    }

    pub(crate) fn secret(&self) -> Result<&SecretKey> {
        self.secret.as_ref().ok_or(Error::MissingSecret)
    }

    /// Byte pattern of the secret, for leak scans.
    pub fn secret_fingerprint(&self) -> Option<[u8; 8]> {
        self.secret.as_ref().map(|s| s.s.to_le_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::default();
        enc.bytes(&KEY_MAGIC);
        enc.u16(FORMAT_VERSION);
        enc.u8(self.scheme.id());
        enc.u8(self.secret.is_some() as u8);
        enc.u16(self.security_level.bits());
        enc.u16(self.params_id);
        enc.u64(self.key_id);
        enc.u64(self.public.b);
        enc.u64(self.public.a);
        if let Some(secret) = &self.secret {
            enc.u64(secret.s);
        }
        enc.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        dec.magic(KEY_MAGIC)?;
        dec.version()?;
        let scheme =
            Scheme::from_id(dec.u8()?).ok_or_else(|| Error::Corrupt("unknown scheme id".into()))?;
        let sections = dec.u8()?;
        if sections > 1 {
            return Err(Error::Corrupt(format!("unknown key sections {sections:#x}")));
        }
        let security_level =
            SecurityLevel::from_bits(dec.u16()?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let params_id = dec.u16()?;
        let key_id = dec.u64()?;
        let public = PublicKey { b: dec.u64()?, a: dec.u64()? };
        let secret = if sections & 1 == 1 { Some(SecretKey { s: dec.u64()? }) } else { None };
        dec.finish()?;
        if public.a >= field::Q || public.b >= field::Q {
            return Err(Error::Corrupt("public key out of range".into()));
        }
        if let Some(s) = &secret {
            let check = field::add(public.b, field::mul(public.a, s.s));
            if s.s == 0 || s.s >= field::Q || check != 0 {
                return Err(Error::Corrupt("secret does not match the public key".into()));
            }
        }
        Ok(Self { key_id, scheme, params_id, security_level, public, secret })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn keys() -> KeyMaterial {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        KeyMaterial::generate(Scheme::ExactInt, SecurityLevel::Bits192, &mut rng)
    }

    #[test]
    fn round_trip_with_and_without_secret() {
        let k = keys();
        assert_eq!(KeyMaterial::from_bytes(&k.to_bytes()).unwrap(), k);
        let p = k.public_only();
        let bytes = p.to_bytes();
        assert_eq!(KeyMaterial::from_bytes(&bytes).unwrap(), p);
        let secret = k.secret_fingerprint().unwrap();
        assert!(!bytes.windows(8).any(|w| w == secret));
        assert_eq!(bytes.len() + 8, k.to_bytes().len());
    }

    #[test]
    fn debug_hides_secret() {
        let k = keys();
        let s = k.secret.as_ref().unwrap().s;
        assert!(!format!("{k:?}").contains(&s.to_string()));
    }

    #[test]
    fn rejects_tampered_files() {
        let k = keys();
        let mut bytes = k.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(KeyMaterial::from_bytes(&bytes).is_err());
        let mut bytes = k.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(KeyMaterial::from_bytes(&bytes), Err(Error::BadMagic { .. })));
        assert!(SecurityLevel::from_bits(100).is_err());
    }
}
