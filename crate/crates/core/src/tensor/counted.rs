//! An `f64` that counts the multiply-accumulates of the `axpy` and `dot`
//! kernels, used to audit analytic MAC formulas.

use std::cell::Cell;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use super::Scalar;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Counted {
    pub fn reset() {
        MACS.with(|m| m.set(0));
    }

    /// Multiply-accumulates performed on this thread since the last reset.
    pub fn macs() -> u64 {
        MACS.with(Cell::get)
    }

    /// Runs `f` and returns its result with the MACs it performed.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let before = Self::macs();
        let r = f();
        (r, Self::macs() - before)
    }

    fn add_macs(n: usize) {
        MACS.with(|m| m.set(m.get() + n as u64));
    }
}

macro_rules! binop {
    ($tr:ident, $f:ident, $atr:ident, $af:ident, $op:tt) => {
        impl $tr for Counted {
            type Output = Counted;
            #[inline]
            fn $f(self, rhs: Counted) -> Counted {
                Counted(self.0 $op rhs.0)
            }
        }
        impl $atr for Counted {
            #[inline]
            fn $af(&mut self, rhs: Counted) {
                self.0 = self.0 $op rhs.0;
            }
        }
    };
}

binop!(Add, add, AddAssign, add_assign, +);
binop!(Sub, sub, SubAssign, sub_assign, -);
binop!(Mul, mul, MulAssign, mul_assign, *);
binop!(Div, div, DivAssign, div_assign, /);

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl Scalar for Counted {
    const NAME: &'static str = "counted";

    fn from_f64(v: f64) -> Self {
        Counted(v)
    }
    fn to_f64(self) -> f64 {
        self.0
    }
    fn exp(self) -> Self {
        Counted(self.0.exp())
    }
    fn ln(self) -> Self {
        Counted(self.0.ln())
    }
    fn sqrt(self) -> Self {
        Counted(self.0.sqrt())
    }
    fn tanh(self) -> Self {
        Counted(self.0.tanh())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        Self::add_macs(x.len());
        for (yi, &xi) in y.iter_mut().zip(x) {
            yi.0 += alpha.0 * xi.0;
        }
    }

    fn dot(x: &[Self], y: &[Self]) -> Self {
        Self::add_macs(x.len());
        Counted(x.iter().zip(y).map(|(a, b)| a.0 * b.0).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn counts_kernel_work() {
        let a = Tensor::<Counted>::ones([3, 4]);
        let b = Tensor::<Counted>::ones([4, 5]);
        let (c, macs) = Counted::measure(|| a.matmul(&b).unwrap());
        assert_eq!(macs, 3 * 4 * 5);
        assert_eq!(c.data()[0], Counted(4.0));
        let ((), dot) = Counted::measure(|| {
            Counted::dot(&[Counted(1.0); 7], &[Counted(2.0); 7]);
        });
        assert_eq!(dot, 7);
    }
}
