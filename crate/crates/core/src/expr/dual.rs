//! Forward-mode dual numbers, nestable to any order.
//!
//! `Dual<T>` carries a value and one directional derivative. Nesting gives
//! higher orders: `Dual<Dual<T>>` (alias [`Dual2`]) seeded with
//! `x + d(e1 + e2)` carries the second directional derivative in its
//! `e1 e2` coefficient, and `Dual<Dual<Dual<T>>>` carries the third.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::real::Real;

/// Numbers the expression evaluator can run on: plain scalars and (nested) duals over them.
pub trait Number<T>:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(c: T) -> Self;
    /// Seeds the variable `x` moving along `dir` in every infinitesimal direction.
    fn seed(x: T, dir: T) -> Self;
    fn primal(&self) -> T;
    fn all_finite(&self) -> bool;
    fn vanishes(&self) -> bool;
    /// True when every derivative part vanishes.
    fn is_constant(&self) -> bool;

    fn exponential(self) -> Self;
    fn logarithm(self) -> Self;
    fn sine(self) -> Self;
    fn cosine(self) -> Self;
    fn square_root(self) -> Self;
    fn magnitude(self) -> Self;
    /// `self^c` for a constant exponent.
    fn power_const(self, c: T) -> Self;
}

macro_rules! impl_number_for_float {
    ($f:ty) => {
        impl Number<$f> for $f {
            #[inline]
            fn constant(c: $f) -> Self {
                c
            }
            #[inline]
            fn seed(x: $f, _dir: $f) -> Self {
                x
            }
            #[inline]
            fn primal(&self) -> $f {
                *self
            }
            #[inline]
            fn all_finite(&self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn vanishes(&self) -> bool {
                *self == 0.0
            }
            #[inline]
            fn is_constant(&self) -> bool {
                true
            }
            #[inline]
            fn exponential(self) -> Self {
                <$f>::exp(self)
            }
            #[inline]
            fn logarithm(self) -> Self {
                <$f>::ln(self)
            }
            #[inline]
            fn sine(self) -> Self {
                <$f>::sin(self)
            }
            #[inline]
            fn cosine(self) -> Self {
                <$f>::cos(self)
            }
            #[inline]
            fn square_root(self) -> Self {
                <$f>::sqrt(self)
            }
            #[inline]
            fn magnitude(self) -> Self {
                <$f>::abs(self)
            }
            #[inline]
            fn power_const(self, c: $f) -> Self {
                if c == 0.0 {
                    1.0
                } else {
                    self.powf(c)
                }
            }
        }
    };
}

impl_number_for_float!(f32);
impl_number_for_float!(f64);

/// `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual<N> {
    pub re: N,
    pub eps: N,
}

/// Dual-of-dual: value, first and second directional derivative.
pub type Dual2<T> = Dual<Dual<T>>;

/// Three nested levels, for third directional derivatives.
pub type Dual3<T> = Dual<Dual<Dual<T>>>;

impl<N> Dual<N> {
    pub const fn new(re: N, eps: N) -> Self {
        Dual { re, eps }
    }
}

impl<T: Real> Dual<Dual<T>> {
    /// Builds a second-order dual from its three coefficients.
    pub fn from_parts(value: T, first: T, second: T) -> Self {
        Dual::new(Dual::new(value, first), Dual::new(first, second))
    }

    pub fn value(&self) -> T {
        self.re.re
    }

    pub fn first(&self) -> T {
        self.re.eps
    }

    pub fn second(&self) -> T {
        self.eps.eps
    }
}

impl<T: Real> Dual3<T> {
    pub fn third(&self) -> T {
        self.eps.eps.eps
    }
}

impl<N: Add<Output = N>> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl<N: Sub<Output = N>> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl<N: Copy + Add<Output = N> + Mul<Output = N>> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.re * rhs.eps + self.eps * rhs.re)
    }
}

impl<N: Copy + Sub<Output = N> + Mul<Output = N> + Div<Output = N>> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let re = self.re / rhs.re;
        Dual::new(re, (self.eps - re * rhs.eps) / rhs.re)
    }
}

impl<N: Neg<Output = N>> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Real, N: Number<T>> Number<T> for Dual<N> {
    #[inline]
    fn constant(c: T) -> Self {
        Dual::new(N::constant(c), N::constant(T::zero()))
    }

    #[inline]
    fn seed(x: T, dir: T) -> Self {
        Dual::new(N::seed(x, dir), N::seed(dir, T::zero()))
    }

    #[inline]
    fn primal(&self) -> T {
        self.re.primal()
    }

    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.eps.all_finite()
    }

    fn vanishes(&self) -> bool {
        self.re.vanishes() && self.eps.vanishes()
    }

    fn is_constant(&self) -> bool {
        self.eps.vanishes() && self.re.is_constant()
    }

    fn exponential(self) -> Self {
        let e = self.re.exponential();
        Dual::new(e, self.eps * e)
    }

    fn logarithm(self) -> Self {
        Dual::new(self.re.logarithm(), self.eps / self.re)
    }

    fn sine(self) -> Self {
        Dual::new(self.re.sine(), self.eps * self.re.cosine())
    }

    fn cosine(self) -> Self {
        Dual::new(self.re.cosine(), -(self.eps * self.re.sine()))
    }

    fn square_root(self) -> Self {
        let s = self.re.square_root();
        Dual::new(s, self.eps / (s + s))
    }

    fn magnitude(self) -> Self {
        let p = self.re.primal();
        let sign = if p > T::zero() {
            T::one()
        } else if p < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        Dual::new(self.re.magnitude(), self.eps * N::constant(sign))
    }

    fn power_const(self, c: T) -> Self {
        if c == T::zero() {
            return Self::constant(T::one());
        }
        let slope = N::constant(c) * self.re.power_const(c - T::one());
        Dual::new(self.re.power_const(c), self.eps * slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_second_order() {
        // f(x) = x^3 at x = 2 along d = 1: f' = 12, f'' = 12
        let x = Dual2::<f64>::seed(2.0, 1.0);
        let y = x * x * x;
        assert_eq!(y.value(), 8.0);
        assert_eq!(y.first(), 12.0);
        assert_eq!(y.second(), 12.0);
    }

    #[test]
    fn third_order_of_cube_is_six() {
        let x = Dual3::<f64>::seed(-1.3, 1.0);
        let y = x * x * x;
        assert!((y.third() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constants_have_no_derivative() {
        let c = Dual2::<f64>::constant(3.5);
        assert!(c.is_constant());
        assert_eq!(c.first(), 0.0);
        assert_eq!(c.second(), 0.0);
    }

    #[test]
    fn powc_at_zero_keeps_second_derivative_finite() {
        // d²/dx² x^2 at 0 requires 0^0 in the nested level
        let x = Dual2::<f64>::seed(0.0, 1.0);
        let y = x.power_const(2.0);
        assert!(y.all_finite());
        assert_eq!(y.second(), 2.0);
        let z = x.power_const(1.0);
        assert!(z.all_finite());
        assert_eq!(z.first(), 1.0);
        assert_eq!(z.second(), 0.0);
    }

    #[test]
    fn chain_rule_exp_sin() {
        let x0 = 0.4_f64;
        let x = Dual2::<f64>::seed(x0, 1.0);
        let y = x.sine().exponential();
        let e = x0.sin().exp();
        assert!((y.first() - e * x0.cos()).abs() < 1e-14);
        let second = e * x0.cos() * x0.cos() - e * x0.sin();
        assert!((y.second() - second).abs() < 1e-14);
    }
}
