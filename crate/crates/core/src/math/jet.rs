//! Forward-mode dual numbers with a fixed number of derivative slots.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::SVector;

use super::Real;

/// Value plus first derivatives with respect to `N` independent variables.
///
/// Comparison operators look at the value part only, so branch conditions in
/// generic code behave exactly as they would with `f64`.
#[derive(Clone, Copy, PartialEq)]
pub struct Jet<const N: usize> {
    pub v: f64,
    pub d: SVector<f64, N>,
}

impl<const N: usize> Jet<N> {
    pub fn constant(v: f64) -> Self {
        Jet {
            v,
            d: SVector::zeros(),
        }
    }

    /// A jet seeded as the `slot`-th independent variable.
    pub fn variable(v: f64, slot: usize) -> Self {
        let mut d = SVector::zeros();
        d[slot] = 1.0;
        Jet { v, d }
    }
}

impl<const N: usize> fmt::Debug for Jet<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+[", self.v)?;
        for (i, x) in self.d.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, "]")
    }
}

impl<const N: usize> PartialOrd for Jet<N> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.v.partial_cmp(&other.v)
    }
}

impl<const N: usize> Add for Jet<N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Jet {
            v: self.v + rhs.v,
            d: self.d + rhs.d,
        }
    }
}

impl<const N: usize> Sub for Jet<N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Jet {
            v: self.v - rhs.v,
            d: self.d - rhs.d,
        }
    }
}

impl<const N: usize> Mul for Jet<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Jet {
            v: self.v * rhs.v,
            d: self.d * rhs.v + rhs.d * self.v,
        }
    }
}

impl<const N: usize> Div for Jet<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        Jet {
            v: self.v * inv,
            d: (self.d - rhs.d * (self.v * inv)) * inv,
        }
    }
}

impl<const N: usize> Neg for Jet<N> {
    type Output = Self;
    fn neg(self) -> Self {
        Jet {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl<const N: usize> AddAssign for Jet<N> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<const N: usize> SubAssign for Jet<N> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}
impl<const N: usize> MulAssign for Jet<N> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}
impl<const N: usize> DivAssign for Jet<N> {
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl<const N: usize> Real for Jet<N> {
    fn from_f64(x: f64) -> Self {
        Jet::constant(x)
    }

    fn value(&self) -> f64 {
        self.v
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Jet {
            v: s,
            d: self.d * (0.5 / s),
        }
    }

    fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }

    fn sin(self) -> Self {
        Jet {
            v: self.v.sin(),
            d: self.d * self.v.cos(),
        }
    }

    fn cos(self) -> Self {
        Jet {
            v: self.v.cos(),
            d: self.d * (-self.v.sin()),
        }
    }

    fn is_finite_value(&self) -> bool {
        self.v.is_finite() && self.d.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-7 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let x0 = 0.73;
        let cases: Vec<(fn(Jet<1>) -> Jet<1>, fn(f64) -> f64)> = vec![
            (|x| x * x * x, |x| x * x * x),
            (|x| x.sqrt(), |x| x.sqrt()),
            (|x| Jet::constant(1.0) / x, |x| 1.0 / x),
            (|x| x.sin() * x.cos(), |x| x.sin() * x.cos()),
            (
                |x| (x * x + Jet::constant(2.0) * x).sqrt(),
                |x| (x * x + 2.0 * x).sqrt(),
            ),
        ];
        for (fj, ff) in cases {
            let j = fj(Jet::variable(x0, 0));
            assert!((j.v - ff(x0)).abs() < 1e-14);
            assert!(
                (j.d[0] - fd(ff, x0)).abs() < 1e-6,
                "ad {} vs fd {}",
                j.d[0],
                fd(ff, x0)
            );
        }
    }

    #[test]
    fn multi_slot_partials() {
        // f(a, b) = a * b + sqrt(a)
        let a = Jet::<2>::variable(4.0, 0);
        let b = Jet::<2>::variable(3.0, 1);
        let f = a * b + a.sqrt();
        assert_eq!(f.v, 14.0);
        assert!((f.d[0] - (3.0 + 0.25)).abs() < 1e-15);
        assert!((f.d[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn comparisons_use_value_part() {
        let a = Jet::<2>::variable(1.0, 0);
        let b = Jet::<2>::variable(2.0, 1);
        assert!(a < b);
        assert!(b.abs() > a);
        assert!((-b).abs() == b.abs());
    }
}
