//! Arithmetic modulo the Mersenne prime 2^61 - 1.

pub const Q: u64 = (1 << 61) - 1;

#[inline]
fn fold(x: u64) -> u64 {
    let s = (x & Q) + (x >> 61);
    if s >= Q {
        s - Q
    } else {
        s
    }
}

#[inline]
pub fn add(a: u64, b: u64) -> u64 {
    fold(a + b)
}

#[inline]
pub fn sub(a: u64, b: u64) -> u64 {
    fold(a + (Q - b))
}

#[inline]
pub fn neg(a: u64) -> u64 {
    fold(Q - a)
}

#[inline]
pub fn mul(a: u64, b: u64) -> u64 {
    let p = a as u128 * b as u128;
    fold(((p as u64) & Q) + (p >> 61) as u64)
}

pub fn from_signed(v: i64) -> u64 {
    let r = v.rem_euclid(Q as i64);
    r as u64
}

/// Centered representative in `(-Q/2, Q/2]`.
pub fn to_signed(v: u64) -> i64 {
    if v > Q / 2 {
        v as i64 - Q as i64
    } else {
        v as i64
    }
}

pub fn random(rng: &mut (impl rand::Rng + ?Sized)) -> u64 {
    rng.random_range(0..Q)
}
