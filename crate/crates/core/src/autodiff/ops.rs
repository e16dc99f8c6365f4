//! Operator overloads and math primitives for [`DVar`].
//!
//! Every primitive records its local partials at the forward values.
//! Results of two untracked constants are folded and never touch a tape.

use super::{DVar, Op, Tape};

fn tape_of<'a>(a: &'a DVar, b: &'a DVar) -> Option<&'a Tape> {
    a.tape().or_else(|| b.tape())
}

fn binary(op: Op, a: &DVar, b: &DVar, value: f64, da: f64, db: f64) -> DVar {
    match tape_of(a, b) {
        Some(t) => t.record(op, &[(a, da), (b, db)], value),
        None => DVar::constant(value),
    }
}

fn unary(op: Op, a: &DVar, value: f64, da: f64) -> DVar {
    match a.tape() {
        Some(t) => t.record(op, &[(a, da)], value),
        None => DVar::constant(value),
    }
}

impl DVar {
    /// Elementwise minimum; at a tie the first operand carries the partial.
    pub fn min(&self, other: &DVar) -> DVar {
        if self.value() <= other.value() {
            binary(Op::Min, self, other, self.value(), 1.0, 0.0)
        } else {
            binary(Op::Min, self, other, other.value(), 0.0, 1.0)
        }
    }

    /// Elementwise maximum; at a tie the first operand carries the partial.
    pub fn max(&self, other: &DVar) -> DVar {
        if self.value() >= other.value() {
            binary(Op::Max, self, other, self.value(), 1.0, 0.0)
        } else {
            binary(Op::Max, self, other, other.value(), 0.0, 1.0)
        }
    }

    pub fn min_const(&self, c: f64) -> DVar {
        self.min(&DVar::constant(c))
    }

    pub fn max_const(&self, c: f64) -> DVar {
        self.max(&DVar::constant(c))
    }

    /// |x| with the one-sided partial of the branch taken (`+1` at zero).
    pub fn abs(&self) -> DVar {
        if self.value() >= 0.0 {
            unary(Op::Abs, self, self.value(), 1.0)
        } else {
            unary(Op::Abs, self, -self.value(), -1.0)
        }
    }

    pub fn exp(&self) -> DVar {
        let e = self.value().exp();
        unary(Op::Exp, self, e, e)
    }

    /// Square root. The partial at exactly zero is `+inf`; callers on a
    /// possibly-zero argument should gate the branch themselves.
    pub fn sqrt(&self) -> DVar {
        let s = self.value().sqrt();
        unary(Op::Sqrt, self, s, 0.5 / s)
    }

    /// `sqrt` that refuses non-positive-definite inputs instead of
    /// producing NaN.
    pub fn sqrt_checked(&self) -> Option<DVar> {
        if self.value() > 0.0 {
            Some(self.sqrt())
        } else {
            None
        }
    }

    pub fn recip(&self) -> DVar {
        let v = self.value();
        unary(Op::Recip, self, 1.0 / v, -1.0 / (v * v))
    }

    /// Numerically stable logistic `1 / (1 + e^-x)` with partial
    /// `s (1 - s)`. Saturates cleanly to exactly 0 or 1 for large |x|.
    pub fn sigmoid(&self) -> DVar {
        let x = self.value();
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        unary(Op::Sigmoid, self, s, s * (1.0 - s))
    }

    /// `x * x`, recorded as a single multiply.
    pub fn square(&self) -> DVar {
        binary(Op::Mul, self, self, self.value() * self.value(), self.value(), self.value())
    }

    /// Comparison-gated select: takes the value of the chosen branch and
    /// records one-sided partials, so the untaken branch contributes no
    /// gradient. The condition itself is opaque to differentiation — this
    /// is where branch surfaces enter the tape.
    pub fn select(cond: bool, on_true: &DVar, on_false: &DVar) -> DVar {
        if cond {
            binary(Op::Select, on_true, on_false, on_true.value(), 1.0, 0.0)
        } else {
            binary(Op::Select, on_true, on_false, on_false.value(), 0.0, 1.0)
        }
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $op:expr, $valf:expr, $daf:expr, $dbf:expr) => {
        impl std::ops::$trait<&DVar> for &DVar {
            type Output = DVar;
            fn $method(self, rhs: &DVar) -> DVar {
                let (a, b) = (self.value(), rhs.value());
                binary($op, self, rhs, $valf(a, b), $daf(a, b), $dbf(a, b))
            }
        }
        impl std::ops::$trait<DVar> for DVar {
            type Output = DVar;
            fn $method(self, rhs: DVar) -> DVar {
                (&self).$method(&rhs)
            }
        }
        impl std::ops::$trait<&DVar> for DVar {
            type Output = DVar;
            fn $method(self, rhs: &DVar) -> DVar {
                (&self).$method(rhs)
            }
        }
        impl std::ops::$trait<DVar> for &DVar {
            type Output = DVar;
            fn $method(self, rhs: DVar) -> DVar {
                self.$method(&rhs)
            }
        }
        impl std::ops::$trait<f64> for &DVar {
            type Output = DVar;
            fn $method(self, rhs: f64) -> DVar {
                self.$method(&DVar::constant(rhs))
            }
        }
        impl std::ops::$trait<f64> for DVar {
            type Output = DVar;
            fn $method(self, rhs: f64) -> DVar {
                (&self).$method(&DVar::constant(rhs))
            }
        }
        impl std::ops::$trait<&DVar> for f64 {
            type Output = DVar;
            fn $method(self, rhs: &DVar) -> DVar {
                (&DVar::constant(self)).$method(rhs)
            }
        }
        impl std::ops::$trait<DVar> for f64 {
            type Output = DVar;
            fn $method(self, rhs: DVar) -> DVar {
                (&DVar::constant(self)).$method(&rhs)
            }
        }
    };
}

impl_binop!(Add, add, Op::Add, |a: f64, b: f64| a + b, |_, _| 1.0, |_, _| 1.0);
impl_binop!(Sub, sub, Op::Sub, |a: f64, b: f64| a - b, |_, _| 1.0, |_, _| -1.0);
impl_binop!(Mul, mul, Op::Mul, |a: f64, b: f64| a * b, |_, b: f64| b, |a: f64, _| a);
impl_binop!(
    Div,
    div,
    Op::Div,
    |a: f64, b: f64| a / b,
    |_, b: f64| 1.0 / b,
    |a: f64, b: f64| -a / (b * b)
);

impl std::ops::Neg for &DVar {
    type Output = DVar;
    fn neg(self) -> DVar {
        unary(Op::Neg, self, -self.value(), -1.0)
    }
}

impl std::ops::Neg for DVar {
    type Output = DVar;
    fn neg(self) -> DVar {
        -&self
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use crate::autodiff::DVar;

    #[test]
    fn constant_folding_stays_off_tape() {
        let tape = Tape::new();
        let n0 = tape.len();
        let c = DVar::constant(3.0) * DVar::constant(4.0) + 1.0;
        assert_eq!(c.value(), 13.0);
        assert!(!c.is_tracked());
        assert_eq!(tape.len(), n0);
    }

    #[test]
    fn mixed_scalar_ops() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = 3.0 * &x + 1.0 - &x / 2.0;
        assert_eq!(y.value(), 6.0);
        let g = y.backward();
        assert_eq!(g.get(&x), 2.5);
    }

    #[test]
    fn division_partials() {
        let tape = Tape::new();
        let a = tape.var(3.0);
        let b = tape.var(4.0);
        let q = &a / &b;
        let g = q.backward();
        assert!((g.get(&a) - 0.25).abs() < 1e-15);
        assert!((g.get(&b) + 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn square_matches_product() {
        let tape = Tape::new();
        let x = tape.var(-1.7);
        let s = x.square();
        assert_eq!(s.value(), 1.7 * 1.7);
        let g = s.backward();
        assert_eq!(g.get(&x), -3.4);
    }
}
