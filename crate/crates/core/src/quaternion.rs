//! Scalar quaternion algebra.

use std::ops::{Add, Mul, Neg, Sub};

use crate::tensor::Real;

/// `a + b·i + c·j + d·k`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion<T = f64> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
}

impl<T: Real> Quaternion<T> {
    pub const fn new(a: T, b: T, c: T, d: T) -> Self {
        Quaternion { a, b, c, d }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn one() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn i() -> Self {
        Self::new(T::zero(), T::one(), T::zero(), T::zero())
    }

    pub fn j() -> Self {
        Self::new(T::zero(), T::zero(), T::one(), T::zero())
    }

    pub fn k() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::one())
    }

    pub fn from_components(v: [T; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn components(&self) -> [T; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite())
    }

    /// Hamilton product `self ⊗ rhs` (non-commutative).
    pub fn hamilton(self, rhs: Self) -> Self {
        let (a1, b1, c1, d1) = (self.a, self.b, self.c, self.d);
        let (a2, b2, c2, d2) = (rhs.a, rhs.b, rhs.c, rhs.d);
        Self::new(
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        )
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.a, -self.b, -self.c, -self.d)
    }

    pub fn norm_squared(self) -> T {
        self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d
    }

    pub fn modulus(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.a * s, self.b * s, self.c * s, self.d * s)
    }
}

/// Free-function form of [`Quaternion::hamilton`].
pub fn hamilton<T: Real>(x: Quaternion<T>, y: Quaternion<T>) -> Quaternion<T> {
    x.hamilton(y)
}

pub fn conjugate<T: Real>(q: Quaternion<T>) -> Quaternion<T> {
    q.conjugate()
}

pub fn modulus<T: Real>(q: Quaternion<T>) -> T {
    q.modulus()
}

impl<T: Real> Add for Quaternion<T> {
    type Output = Self;
    fn add(self, r: Self) -> Self {
        Self::new(self.a + r.a, self.b + r.b, self.c + r.c, self.d + r.d)
    }
}

impl<T: Real> Sub for Quaternion<T> {
    type Output = Self;
    fn sub(self, r: Self) -> Self {
        Self::new(self.a - r.a, self.b - r.b, self.c - r.c, self.d - r.d)
    }
}

impl<T: Real> Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.a, -self.b, -self.c, -self.d)
    }
}

impl<T: Real> Mul for Quaternion<T> {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        self.hamilton(r)
    }
}
