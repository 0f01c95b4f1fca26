//! Fixed-width 512-bit modular arithmetic in Montgomery form.
//!
//! Values are eight little-endian `u64` limbs. A [`MontField`] is built once
//! per odd modulus below 2^512 and serves both the curve's base field and its
//! scalar field.

pub type Limbs = [u64; 8];

pub const ZERO: Limbs = [0; 8];
pub const ONE: Limbs = [1, 0, 0, 0, 0, 0, 0, 0];

#[inline(always)]
fn mac(acc: u64, a: u64, b: u64, carry: u64) -> (u64, u64) {
    let t = (acc as u128) + (a as u128) * (b as u128) + (carry as u128);
    (t as u64, (t >> 64) as u64)
}

#[inline(always)]
fn adc(a: u64, b: u64, carry: u64) -> (u64, u64) {
    let t = (a as u128) + (b as u128) + (carry as u128);
    (t as u64, (t >> 64) as u64)
}

#[inline(always)]
fn sbb(a: u64, b: u64, borrow: u64) -> (u64, u64) {
    let t = (a as u128).wrapping_sub((b as u128) + (borrow as u128));
    (t as u64, ((t >> 64) as u64) & 1)
}

/// `a - b`, returning the final borrow.
pub fn sub_with_borrow(a: &Limbs, b: &Limbs) -> (Limbs, u64) {
    let mut out = ZERO;
    let mut borrow = 0;
    for i in 0..8 {
        let (d, br) = sbb(a[i], b[i], borrow);
        out[i] = d;
        borrow = br;
    }
    (out, borrow)
}

/// `a + b`, returning the final carry.
pub fn add_with_carry(a: &Limbs, b: &Limbs) -> (Limbs, u64) {
    let mut out = ZERO;
    let mut carry = 0;
    for i in 0..8 {
        let (s, c) = adc(a[i], b[i], carry);
        out[i] = s;
        carry = c;
    }
    (out, carry)
}

pub fn is_zero(a: &Limbs) -> bool {
    a.iter().all(|&w| w == 0)
}

/// `a < b` as unsigned integers.
pub fn less_than(a: &Limbs, b: &Limbs) -> bool {
    sub_with_borrow(a, b).1 == 1
}

pub fn from_be_bytes(bytes: &[u8; 64]) -> Limbs {
    let mut out = ZERO;
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        out[7 - i] = u64::from_be_bytes(chunk.try_into().expect("8 bytes"));
    }
    out
}

pub fn to_be_bytes(a: &Limbs) -> [u8; 64] {
    let mut out = [0u8; 64];
    for (i, chunk) in out.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&a[7 - i].to_be_bytes());
    }
    out
}

pub fn from_le_bytes(bytes: &[u8; 64]) -> Limbs {
    let mut out = ZERO;
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        out[i] = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    out
}

/// Parses a big-endian hex constant of at most 128 digits.
pub const fn from_hex(s: &str) -> Limbs {
    let bytes = s.as_bytes();
    assert!(bytes.len() <= 128, "hex constant too long");
    let mut out = ZERO;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[bytes.len() - 1 - i];
        let v = match c {
            b'0'..=b'9' => c - b'0',
            b'a'..=b'f' => c - b'a' + 10,
            b'A'..=b'F' => c - b'A' + 10,
            _ => panic!("invalid hex digit"),
        } as u64;
        out[i / 16] |= v << (4 * (i % 16));
        i += 1;
    }
    out
}

/// Montgomery arithmetic modulo an odd `modulus < 2^512`, with R = 2^512.
#[derive(Clone, Debug)]
pub struct MontField {
    modulus: Limbs,
    /// `-modulus^-1 mod 2^64`
    inv: u64,
    /// `R^2 mod modulus`
    r2: Limbs,
    /// `R mod modulus`, the Montgomery form of one.
    one: Limbs,
}

impl MontField {
    pub fn new(modulus: Limbs) -> Self {
        assert!(modulus[0] & 1 == 1, "modulus must be odd");
        // Newton iteration for the inverse of modulus[0] modulo 2^64.
        let mut inv: u64 = 1;
        for _ in 0..6 {
            inv = inv.wrapping_mul(2u64.wrapping_sub(modulus[0].wrapping_mul(inv)));
        }
        let inv = inv.wrapping_neg();

        // R mod m and R^2 mod m by repeated modular doubling of 1.
        let mut acc = ONE;
        let mut one = ZERO;
        for step in 1..=1024 {
            let (doubled, carry) = add_with_carry(&acc, &acc);
            let (reduced, borrow) = sub_with_borrow(&doubled, &modulus);
            acc = if carry == 1 || borrow == 0 {
                reduced
            } else {
                doubled
            };
            if step == 512 {
                one = acc;
            }
        }
        Self {
            modulus,
            inv,
            r2: acc,
            one,
        }
    }

    pub fn modulus(&self) -> &Limbs {
        &self.modulus
    }

    pub fn one(&self) -> Limbs {
        self.one
    }

    /// Montgomery product `a * b * R^-1 mod m`. Inputs may be any values below
    /// 2^512 provided one of them is below the modulus; the output is fully
    /// reduced.
    pub fn mul(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let m = &self.modulus;
        let mut t = [0u64; 10];
        for &bi in b.iter() {
            let mut carry = 0;
            for j in 0..8 {
                let (lo, hi) = mac(t[j], a[j], bi, carry);
                t[j] = lo;
                carry = hi;
            }
            let (s, c) = adc(t[8], carry, 0);
            t[8] = s;
            t[9] = c;

            let q = t[0].wrapping_mul(self.inv);
            let (_, mut carry) = mac(t[0], q, m[0], 0);
            for j in 1..8 {
                let (lo, hi) = mac(t[j], q, m[j], carry);
                t[j - 1] = lo;
                carry = hi;
            }
            let (s, c) = adc(t[8], carry, 0);
            t[7] = s;
            t[8] = t[9] + c;
        }
        let mut out = ZERO;
        out.copy_from_slice(&t[..8]);
        let (reduced, borrow) = sub_with_borrow(&out, m);
        if t[8] != 0 || borrow == 0 {
            reduced
        } else {
            out
        }
    }

    #[inline]
    pub fn square(&self, a: &Limbs) -> Limbs {
        self.mul(a, a)
    }

    pub fn add(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let (sum, carry) = add_with_carry(a, b);
        let (reduced, borrow) = sub_with_borrow(&sum, &self.modulus);
        if carry == 1 || borrow == 0 {
            reduced
        } else {
            sum
        }
    }

    pub fn sub(&self, a: &Limbs, b: &Limbs) -> Limbs {
        let (diff, borrow) = sub_with_borrow(a, b);
        if borrow == 1 {
            add_with_carry(&diff, &self.modulus).0
        } else {
            diff
        }
    }

    pub fn neg(&self, a: &Limbs) -> Limbs {
        self.sub(&ZERO, a)
    }

    pub fn double(&self, a: &Limbs) -> Limbs {
        self.add(a, a)
    }

    /// Converts a canonical value into Montgomery form. Any value below 2^512
    /// is accepted and reduced along the way.
    pub fn to_mont(&self, a: &Limbs) -> Limbs {
        self.mul(a, &self.r2)
    }

    pub fn from_mont(&self, a: &Limbs) -> Limbs {
        self.mul(a, &ONE)
    }

    /// Canonical `a mod m` for any `a < 2^512`.
    pub fn reduce(&self, a: &Limbs) -> Limbs {
        self.from_mont(&self.to_mont(a))
    }

    /// Canonical `(hi * 2^512 + lo) mod m`.
    pub fn reduce_wide(&self, hi: &Limbs, lo: &Limbs) -> Limbs {
        // to_mont(hi) is hi * R mod m read as a plain integer.
        let hi_shifted = self.to_mont(hi);
        self.add(&hi_shifted, &self.reduce(lo))
    }

    /// `base^exp` for a Montgomery-form base; result in Montgomery form.
    pub fn pow(&self, base: &Limbs, exp: &Limbs) -> Limbs {
        let mut acc = self.one;
        for i in (0..512).rev() {
            acc = self.square(&acc);
            if (exp[i / 64] >> (i % 64)) & 1 == 1 {
                acc = self.mul(&acc, base);
            }
        }
        acc
    }

    /// Inverse of a Montgomery-form value via Fermat; the modulus must be
    /// prime. Zero maps to zero.
    pub fn invert(&self, a: &Limbs) -> Limbs {
        let two = [2, 0, 0, 0, 0, 0, 0, 0];
        let exp = sub_with_borrow(&self.modulus, &two).0;
        self.pow(a, &exp)
    }

    pub fn is_valid(&self, a: &Limbs) -> bool {
        less_than(a, &self.modulus)
    }
}
