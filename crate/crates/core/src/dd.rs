//! Double-double reals: an unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`,
//! about 106 significant bits. Used for reference evaluations.
//!
//! `+ − × ÷` and `sqrt` are accurate to double-double precision, `exp`
//! and `ln` to about 1e-28 relative. Trigonometric and other rarely used
//! functions fall back to f64 on the leading component.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

impl Dd {
    pub const fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Dd::new(hi);
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// `self · 2^k`, exact barring overflow and underflow.
    fn ldexp(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Dd::norm(p, e + self.lo * b)
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, y: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, y.hi);
        if !s1.is_finite() {
            return Dd::new(s1);
        }
        let (t1, t2) = two_sum(self.lo, y.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        Dd::norm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        if !q1.is_finite() {
            return Dd::new(q1);
        }
        let r = self - y.mul_f64(q1);
        let q2 = r.hi / y.hi;
        let r = r - y.mul_f64(q2);
        let q3 = r.hi / y.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, y: Dd) -> Dd {
        self - (self / y).trunc() * y
    }
}

macro_rules! assign_ops {
    ($(($tr:ident, $am:ident, $op:tt)),*) => {$(
        impl $tr for Dd {
            #[inline]
            fn $am(&mut self, rhs: Dd) {
                *self = *self $op rhs;
            }
        }
    )*};
}

assign_ops!(
    (AddAssign, add_assign, +),
    (SubAssign, sub_assign, -),
    (MulAssign, mul_assign, *),
    (DivAssign, div_assign, /),
    (RemAssign, rem_assign, %)
);

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.hi)
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::new(0.0)
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::new(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = num_traits::ParseFloatError;

    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }

    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::new)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Dd::norm(hi, (n - hi as i64) as f64))
    }

    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd::new(n as f64))
    }

    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::new(n))
    }
}

macro_rules! via_f64 {
    (unary: $($m:ident),*) => {$(
        fn $m(self) -> Self { Dd::new(self.hi.$m()) }
    )*};
    (binary: $($m:ident),*) => {$(
        fn $m(self, o: Self) -> Self { Dd::new(self.hi.$m(o.hi)) }
    )*};
    (pred: $($m:ident),*) => {$(
        fn $m(self) -> bool { self.hi.$m() }
    )*};
}

impl Float for Dd {
    via_f64!(unary: exp2, log2, log10, cbrt, sin, cos, tan, asin, acos, atan, sinh, cosh,
        tanh, asinh, acosh, atanh);
    via_f64!(binary: powf, hypot, atan2);
    via_f64!(pred: is_nan, is_infinite, is_finite, is_normal, is_sign_positive, is_sign_negative);

    fn nan() -> Self {
        Dd::new(f64::NAN)
    }

    fn infinity() -> Self {
        Dd::new(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Dd::new(f64::NEG_INFINITY)
    }

    fn neg_zero() -> Self {
        Dd::new(-0.0)
    }

    fn min_value() -> Self {
        Dd::new(f64::MIN)
    }

    fn min_positive_value() -> Self {
        Dd::new(f64::MIN_POSITIVE)
    }

    fn max_value() -> Self {
        Dd::new(f64::MAX)
    }

    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Dd::norm(h, self.lo.floor())
        } else {
            Dd::new(h)
        }
    }

    fn ceil(self) -> Self {
        -(-self).floor()
    }

    fn round(self) -> Self {
        if self.hi < 0.0 {
            -(-self).round()
        } else {
            (self + Dd::new(0.5)).floor()
        }
    }

    fn trunc(self) -> Self {
        if self.hi < 0.0 {
            self.ceil()
        } else {
            self.floor()
        }
    }

    fn fract(self) -> Self {
        self - self.trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        Dd::new(self.hi.signum())
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    fn recip(self) -> Self {
        Dd::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut k = n.unsigned_abs();
        let mut acc = Dd::one();
        while k > 0 {
            if k & 1 == 1 {
                acc *= base;
            }
            base *= base;
            k >>= 1;
        }
        acc
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::new(self.hi.sqrt());
        }
        let a = self.hi.sqrt();
        let (p, e) = two_prod(a, a);
        Dd::norm(a, ((self.hi - p) - e + self.lo) / (2.0 * a))
    }

    /// Reduce by `k·ln 2` and `2^-9`, sum a Taylor series, square back.
    fn exp(self) -> Self {
        let x = self.hi;
        if !x.is_finite() {
            return Dd::new(x.exp());
        }
        if x > 709.0 {
            return Dd::infinity();
        }
        if x < -745.0 {
            return Dd::zero();
        }
        let k = (x / std::f64::consts::LN_2).round();
        let r = (self - LN2.mul_f64(k)).ldexp(-9);
        let mut term = Dd::one();
        let mut sum = Dd::one();
        for n in 1..=12 {
            term = term * r / Dd::new(n as f64);
            sum += term;
        }
        for _ in 0..9 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    /// One Newton step on `exp(y) = x` from the f64 logarithm.
    fn ln(self) -> Self {
        let x = self.hi;
        if x <= 0.0 || !x.is_finite() {
            return Dd::new(x.ln());
        }
        let y0 = Dd::new(x.ln());
        y0 + self * (-y0).exp() - Dd::one()
    }

    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }

    fn exp_m1(self) -> Self {
        self.exp() - Dd::one()
    }

    fn ln_1p(self) -> Self {
        (self + Dd::one()).ln()
    }

    fn max(self, o: Self) -> Self {
        if self.is_nan() || o > self {
            o
        } else {
            self
        }
    }

    fn min(self, o: Self) -> Self {
        if self.is_nan() || o < self {
            o
        } else {
            self
        }
    }

    fn abs_sub(self, o: Self) -> Self {
        if self > o {
            self - o
        } else {
            Dd::zero()
        }
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Real for Dd {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // e to 32 digits, split into two doubles
    const E: Dd = Dd {
        hi: std::f64::consts::E,
        lo: 1.445_646_891_729_250_2e-16,
    };

    fn err(a: Dd, b: Dd) -> f64 {
        (a - b).abs().hi
    }

    #[test]
    fn division_is_exact_to_working_precision() {
        let third = Dd::one() / Dd::new(3.0);
        assert!(err(third * Dd::new(3.0), Dd::one()) < 1e-31);
        assert!(third.lo != 0.0);
    }

    #[test]
    fn exp_one_matches_e() {
        assert!(
            err(Dd::one().exp(), E) < 1e-28,
            "{:e}",
            err(Dd::one().exp(), E)
        );
    }

    #[test]
    fn exp_ln_round_trip() {
        for &x in &[-30.0, -1.7, -1e-3, 0.3, 2.9, 40.0] {
            let d = Dd::new(x);
            let e = err(d.exp().ln(), d);
            assert!(e < 1e-28 * x.abs().max(1.0), "{x}: {e:e}");
        }
    }

    #[test]
    fn central_difference_is_noise_free() {
        let h = Dd::new(1e-6);
        for &x in &[-1.7, 0.3, 2.9] {
            let d = Dd::new(x);
            let fd = ((d + h).exp() - (d - h).exp()) / (Dd::new(2.0) * h);
            // what remains is the h²/6 truncation term
            let rel = (fd / d.exp() - Dd::one()).hi;
            assert!((rel - 1e-12 / 6.0).abs() < 1e-20, "{x}: {rel:e}");
        }
    }

    #[test]
    fn small_and_masked_values() {
        assert_eq!(Dd::new(-800.0).exp(), Dd::zero());
        assert!(Dd::min_value().is_masked());
        assert_eq!(Dd::lit(0.25).as_f64(), 0.25);
        assert_eq!(Dd::new(2.5).round(), Dd::new(3.0));
        assert_eq!(Dd::new(-2.5).floor(), Dd::new(-3.0));
    }

    proptest! {
        #[test]
        fn sqrt_squares_back(x in 1e-6f64..1e6) {
            let r = Dd::new(x).sqrt();
            prop_assert!(err(r * r, Dd::new(x)) <= 1e-30 * x);
        }

        #[test]
        fn product_matches_fma_residual(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let p = Dd::new(a) * Dd::new(b);
            prop_assert_eq!(p.hi + p.lo, a * b);
            prop_assert_eq!(p.lo, a.mul_add(b, -(a * b)));
        }
    }
}
