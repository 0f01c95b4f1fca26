//! Short Weierstrass curves `y^2 = x^3 + a x + b` with `a = -3` over 512-bit
//! prime fields, in Jacobian coordinates.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::field::{self, from_hex, Limbs, MontField};

/// Identifier of an agreed curve and base point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CurveId {
    /// id-tc26-gost-3410-12-512-paramSetA
    #[serde(rename = "tc26-512-a")]
    Tc26A,
    /// id-tc26-gost-3410-12-512-paramSetB
    #[serde(rename = "tc26-512-b")]
    Tc26B,
}

impl CurveId {
    pub const ALL: [CurveId; 2] = [CurveId::Tc26A, CurveId::Tc26B];

    pub fn name(self) -> &'static str {
        match self {
            CurveId::Tc26A => "tc26-512-a",
            CurveId::Tc26B => "tc26-512-b",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn params(self) -> &'static Curve {
        static A: OnceLock<Curve> = OnceLock::new();
        static B: OnceLock<Curve> = OnceLock::new();
        match self {
            CurveId::Tc26A => A.get_or_init(|| {
                Curve::new(
                    self,
                    from_hex(
                        "FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF\
                         FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFDC7",
                    ),
                    from_hex(
                        "E8C2505DEDFC86DDC1BD0B2B6667F1DA34B82574761CB0E879BD081CFD0B6265\
                         EE3CB090F30D27614CB4574010DA90DD862EF9D4EBEE4761503190785A71C760",
                    ),
                    from_hex(
                        "FFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFF\
                         27E69532F48D89116FF22B8D4E0560609B4B38ABFAD2B85DCACDB1411F10B275",
                    ),
                    from_hex("3"),
                    from_hex(
                        "7503CFE87A836AE3A61B8816E25450E6CE5E1C93ACF1ABC1778064FDCBEFA921\
                         DF1626BE4FD036E93D75E6A50E3A41E98028FE5FC235F5B889A589CB5215F2A4",
                    ),
                )
            }),
            CurveId::Tc26B => B.get_or_init(|| {
                Curve::new(
                    self,
                    from_hex(
                        "8000000000000000000000000000000000000000000000000000000000000000\
                         000000000000000000000000000000000000000000000000000000000000006F",
                    ),
                    from_hex(
                        "687D1B459DC841457E3E06CF6F5E2517B97C7D614AF138BCBF85DC806C4B289F\
                         3E965D2DB1416D217F8B276FAD1AB69C50F78BEE1FA3106EFB8CCBC7C5140116",
                    ),
                    from_hex(
                        "8000000000000000000000000000000000000000000000000000000000000001\
                         49A1EC142565A545ACFDB77BD9D40CFA8B996712101BEA0EC6346C54374F25BD",
                    ),
                    from_hex("2"),
                    from_hex(
                        "1A8F7EDA389B094C2C071E3647A8940F3C123B697578C213BE6DD9E6C8EC7335\
                         DCB228FD1EDF4A39152CBCAAF8C0398828041055F94CEEEC7E21340780FE41BD",
                    ),
                )
            }),
        }
    }
}

impl std::fmt::Display for CurveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Jacobian point `(X : Y : Z)` representing `(X/Z^2, Y/Z^3)`; coordinates are
/// in Montgomery form. `Z = 0` is the point at infinity.
#[derive(Clone, Copy, Debug)]
pub struct Point {
    x: Limbs,
    y: Limbs,
    z: Limbs,
}

/// Curve parameters plus a fixed-base table for the base point.
pub struct Curve {
    pub id: CurveId,
    pub fp: MontField,
    pub fq: MontField,
    b: Limbs,
    base: Point,
    /// `base_table[i][d] = d * 16^i * G` for 4-bit digits `d`.
    base_table: OnceLock<Vec<[Point; 16]>>,
}

/// Affine coordinates in canonical (non-Montgomery) form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub x: Limbs,
    pub y: Limbs,
}

impl Curve {
    fn new(id: CurveId, p: Limbs, b: Limbs, q: Limbs, gx: Limbs, gy: Limbs) -> Self {
        let fp = MontField::new(p);
        let fq = MontField::new(q);
        let b = fp.to_mont(&b);
        let base = Point {
            x: fp.to_mont(&gx),
            y: fp.to_mont(&gy),
            z: fp.one(),
        };
        Self {
            id,
            fp,
            fq,
            b,
            base,
            base_table: OnceLock::new(),
        }
    }

    pub fn order(&self) -> &Limbs {
        self.fq.modulus()
    }

    pub fn infinity(&self) -> Point {
        Point {
            x: self.fp.one(),
            y: self.fp.one(),
            z: field::ZERO,
        }
    }

    pub fn base_point(&self) -> Affine {
        self.to_affine(&self.base).expect("base point is finite")
    }

    pub fn is_infinity(p: &Point) -> bool {
        field::is_zero(&p.z)
    }

    /// Checks range and the curve equation for canonical affine coordinates.
    pub fn is_on_curve(&self, pt: &Affine) -> bool {
        let fp = &self.fp;
        if !fp.is_valid(&pt.x) || !fp.is_valid(&pt.y) {
            return false;
        }
        let x = fp.to_mont(&pt.x);
        let y = fp.to_mont(&pt.y);
        let lhs = fp.square(&y);
        let x3 = fp.mul(&fp.square(&x), &x);
        let three_x = fp.add(&fp.double(&x), &x);
        let rhs = fp.add(&fp.sub(&x3, &three_x), &self.b);
        lhs == rhs
    }

    pub fn from_affine(&self, pt: &Affine) -> Point {
        Point {
            x: self.fp.to_mont(&pt.x),
            y: self.fp.to_mont(&pt.y),
            z: self.fp.one(),
        }
    }

    pub fn to_affine(&self, p: &Point) -> Option<Affine> {
        if Self::is_infinity(p) {
            return None;
        }
        let fp = &self.fp;
        let zinv = fp.invert(&p.z);
        let zinv2 = fp.square(&zinv);
        let zinv3 = fp.mul(&zinv2, &zinv);
        Some(Affine {
            x: fp.from_mont(&fp.mul(&p.x, &zinv2)),
            y: fp.from_mont(&fp.mul(&p.y, &zinv3)),
        })
    }

    /// Doubling specialised to `a = -3`.
    pub fn double(&self, p: &Point) -> Point {
        if Self::is_infinity(p) || field::is_zero(&p.y) {
            return self.infinity();
        }
        let fp = &self.fp;
        let delta = fp.square(&p.z);
        let gamma = fp.square(&p.y);
        let beta = fp.mul(&p.x, &gamma);
        let t = fp.mul(&fp.sub(&p.x, &delta), &fp.add(&p.x, &delta));
        let alpha = fp.add(&fp.double(&t), &t);
        let beta4 = fp.double(&fp.double(&beta));
        let x3 = fp.sub(&fp.square(&alpha), &fp.double(&beta4));
        let yz = fp.add(&p.y, &p.z);
        let z3 = fp.sub(&fp.sub(&fp.square(&yz), &gamma), &delta);
        let gamma2 = fp.square(&gamma);
        let gamma2_8 = fp.double(&fp.double(&fp.double(&gamma2)));
        let y3 = fp.sub(&fp.mul(&alpha, &fp.sub(&beta4, &x3)), &gamma2_8);
        Point {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    pub fn add(&self, p: &Point, q: &Point) -> Point {
        if Self::is_infinity(p) {
            return *q;
        }
        if Self::is_infinity(q) {
            return *p;
        }
        let fp = &self.fp;
        let z1z1 = fp.square(&p.z);
        let z2z2 = fp.square(&q.z);
        let u1 = fp.mul(&p.x, &z2z2);
        let u2 = fp.mul(&q.x, &z1z1);
        let s1 = fp.mul(&fp.mul(&p.y, &q.z), &z2z2);
        let s2 = fp.mul(&fp.mul(&q.y, &p.z), &z1z1);
        let h = fp.sub(&u2, &u1);
        let r = fp.double(&fp.sub(&s2, &s1));
        if field::is_zero(&h) {
            return if field::is_zero(&r) {
                self.double(p)
            } else {
                self.infinity()
            };
        }
        let i = fp.square(&fp.double(&h));
        let j = fp.mul(&h, &i);
        let v = fp.mul(&u1, &i);
        let x3 = fp.sub(&fp.sub(&fp.square(&r), &j), &fp.double(&v));
        let y3 = fp.sub(&fp.mul(&r, &fp.sub(&v, &x3)), &fp.double(&fp.mul(&s1, &j)));
        let zz = fp.add(&p.z, &q.z);
        let z3 = fp.mul(&fp.sub(&fp.sub(&fp.square(&zz), &z1z1), &z2z2), &h);
        Point {
            x: x3,
            y: y3,
            z: z3,
        }
    }

    pub fn negate(&self, p: &Point) -> Point {
        Point {
            x: p.x,
            y: self.fp.neg(&p.y),
            z: p.z,
        }
    }

    /// `k * P` with a 4-bit fixed window; `k` is a canonical scalar.
    pub fn mul(&self, p: &Point, k: &Limbs) -> Point {
        let mut table = [self.infinity(); 16];
        table[1] = *p;
        for d in 2..16 {
            table[d] = self.add(&table[d - 1], p);
        }
        let mut acc = self.infinity();
        for nibble in (0..128).rev() {
            for _ in 0..4 {
                acc = self.double(&acc);
            }
            let d = digit(k, nibble);
            if d != 0 {
                acc = self.add(&acc, &table[d]);
            }
        }
        acc
    }

    fn base_table(&self) -> &[[Point; 16]] {
        self.base_table.get_or_init(|| {
            let mut rows = Vec::with_capacity(128);
            let mut step = self.base;
            for _ in 0..128 {
                let mut row = [self.infinity(); 16];
                row[1] = step;
                for d in 2..16 {
                    row[d] = self.add(&row[d - 1], &step);
                }
                rows.push(row);
                for _ in 0..4 {
                    step = self.double(&step);
                }
            }
            rows
        })
    }

    /// `k * G` using the precomputed table.
    pub fn mul_base(&self, k: &Limbs) -> Point {
        let table = self.base_table();
        let mut acc = self.infinity();
        for (nibble, row) in table.iter().enumerate() {
            let d = digit(k, nibble);
            if d != 0 {
                acc = self.add(&acc, &row[d]);
            }
        }
        acc
    }

    /// `a * G + b * P`.
    pub fn mul_base_add(&self, a: &Limbs, b: &Limbs, p: &Point) -> Point {
        self.add(&self.mul_base(a), &self.mul(p, b))
    }
}

#[inline]
fn digit(k: &Limbs, nibble: usize) -> usize {
    ((k[nibble / 16] >> (4 * (nibble % 16))) & 0xf) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::field::{sub_with_borrow, to_be_bytes, ONE};
    use num_bigint::{BigInt, BigUint};
    use rand::{Rng, SeedableRng};

    /// Affine double-and-add over arbitrary-precision integers; shares nothing
    /// with the Montgomery/Jacobian path under test.
    struct Reference {
        p: BigInt,
        a: BigInt,
    }

    impl Reference {
        fn for_curve(c: &Curve) -> Self {
            let p = BigInt::from(BigUint::from_bytes_be(&to_be_bytes(c.fp.modulus())));
            Self { a: &p - 3, p }
        }

        fn modp(&self, v: BigInt) -> BigInt {
            ((v % &self.p) + &self.p) % &self.p
        }

        fn inv(&self, v: &BigInt) -> BigInt {
            v.modpow(&(&self.p - 2), &self.p)
        }

        fn add(
            &self,
            a: Option<(BigInt, BigInt)>,
            b: Option<(BigInt, BigInt)>,
        ) -> Option<(BigInt, BigInt)> {
            let (a, b) = match (a, b) {
                (None, x) | (x, None) => return x,
                (Some(a), Some(b)) => (a, b),
            };
            if a.0 == b.0 && self.modp(&a.1 + &b.1) == BigInt::from(0) {
                return None;
            }
            let l = if a == b {
                self.modp(
                    (BigInt::from(3) * &a.0 * &a.0 + &self.a)
                        * self.inv(&self.modp(BigInt::from(2) * &a.1)),
                )
            } else {
                self.modp((&b.1 - &a.1) * self.inv(&self.modp(&b.0 - &a.0)))
            };
            let x3 = self.modp(&l * &l - &a.0 - &b.0);
            let y3 = self.modp(&l * (&a.0 - &x3) - &a.1);
            Some((x3, y3))
        }

        fn mul(&self, k: &BigUint, pt: (BigInt, BigInt)) -> Option<(BigInt, BigInt)> {
            let mut acc = None;
            let mut cur = Some(pt);
            for i in 0..k.bits() {
                if k.bit(i) {
                    acc = self.add(acc, cur.clone());
                }
                cur = self.add(cur.clone(), cur);
            }
            acc
        }
    }

    fn to_big(l: &Limbs) -> BigInt {
        BigInt::from(BigUint::from_bytes_be(&to_be_bytes(l)))
    }

    #[test]
    fn base_points_are_on_curve_with_prime_order() {
        for id in CurveId::ALL {
            let c = id.params();
            assert!(c.is_on_curve(&c.base_point()), "{id}");
            let g = c.from_affine(&c.base_point());
            assert!(Curve::is_infinity(&c.mul(&g, c.order())), "{id}");
            let q_minus_1 = sub_with_borrow(c.order(), &ONE).0;
            let neg = c.to_affine(&c.mul_base(&q_minus_1)).unwrap();
            let neg_ref = c.to_affine(&c.negate(&g)).unwrap();
            assert_eq!(neg, neg_ref);
        }
    }

    #[test]
    fn scalar_multiplication_matches_reference() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(42);
        for id in CurveId::ALL {
            let c = id.params();
            let r = Reference::for_curve(c);
            let g = c.base_point();
            let g_ref = (to_big(&g.x), to_big(&g.y));
            for _ in 0..4 {
                let mut k = [0u64; 8];
                rng.fill(&mut k[..]);
                let k = c.fq.reduce(&k);
                let expected = r
                    .mul(&BigUint::from_bytes_be(&to_be_bytes(&k)), g_ref.clone())
                    .unwrap();
                let fixed = c.to_affine(&c.mul_base(&k)).unwrap();
                let windowed = c.to_affine(&c.mul(&c.from_affine(&g), &k)).unwrap();
                assert_eq!((to_big(&fixed.x), to_big(&fixed.y)), expected);
                assert_eq!(fixed, windowed);
                assert!(c.is_on_curve(&fixed));
            }
        }
    }

    #[test]
    fn addition_edge_cases() {
        let c = CurveId::Tc26A.params();
        let g = c.from_affine(&c.base_point());
        let inf = c.infinity();
        assert_eq!(c.to_affine(&c.add(&g, &inf)), c.to_affine(&g));
        assert_eq!(c.to_affine(&c.add(&inf, &g)), c.to_affine(&g));
        assert!(Curve::is_infinity(&c.add(&g, &c.negate(&g))));
        assert_eq!(c.to_affine(&c.add(&g, &g)), c.to_affine(&c.double(&g)));
    }
}
