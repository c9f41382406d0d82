//! One arithmetic interface over plain numbers, tape variables and jets.
//!
//! Constraint wrappers and user-supplied condition functions are written
//! once against [`Algebra`] and then evaluated as `f64` (plain values), as
//! [`Var`] (differentiable tapes) or as [`Jet`] (batched training).

use crate::autodiff::Var;
use crate::eqparser::{BinOp, DerivKey, Expr, Func, FunctionExpr};
use crate::jet::Jet;

pub trait Algebra: Clone {
    /// A constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn abs(&self) -> Self;
    fn powi(&self, n: i32) -> Self;

    fn pow(&self, p: &Self) -> Self {
        p.mul(&self.ln()).exp()
    }

    fn add_f(&self, c: f64) -> Self {
        self.add(&self.lift(c))
    }

    fn mul_f(&self, c: f64) -> Self {
        self.mul(&self.lift(c))
    }
}

impl Algebra for f64 {
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tan(&self) -> Self {
        f64::tan(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn powi(&self, n: i32) -> Self {
        f64::powi(*self, n)
    }
    fn pow(&self, p: &Self) -> Self {
        self.powf(*p)
    }
}

impl<'g> Algebra for Var<'g> {
    fn lift(&self, c: f64) -> Self {
        self.graph().constant(c)
    }
    fn add(&self, o: &Self) -> Self {
        *self + *o
    }
    fn sub(&self, o: &Self) -> Self {
        *self - *o
    }
    fn mul(&self, o: &Self) -> Self {
        *self * *o
    }
    fn div(&self, o: &Self) -> Self {
        *self / *o
    }
    fn neg(&self) -> Self {
        -*self
    }
    fn sin(&self) -> Self {
        Var::sin(*self)
    }
    fn cos(&self) -> Self {
        Var::cos(*self)
    }
    fn tan(&self) -> Self {
        Var::tan(*self)
    }
    fn tanh(&self) -> Self {
        Var::tanh(*self)
    }
    fn exp(&self) -> Self {
        Var::exp(*self)
    }
    fn ln(&self) -> Self {
        Var::ln(*self)
    }
    fn sqrt(&self) -> Self {
        Var::sqrt(*self)
    }
    fn abs(&self) -> Self {
        Var::abs(*self)
    }
    fn powi(&self, n: i32) -> Self {
        Var::powi(*self, n)
    }
    fn pow(&self, p: &Self) -> Self {
        Var::pow(*self, *p)
    }
}

impl<'s> Algebra for Jet<'s> {
    fn lift(&self, c: f64) -> Self {
        Jet::constant(self.set(), c)
    }
    fn add(&self, o: &Self) -> Self {
        Jet::add(self, o)
    }
    fn sub(&self, o: &Self) -> Self {
        Jet::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Self {
        Jet::mul(self, o)
    }
    fn div(&self, o: &Self) -> Self {
        Jet::mul(self, &o.recip())
    }
    fn neg(&self) -> Self {
        self.scale(-1.0)
    }
    fn sin(&self) -> Self {
        Jet::sin(self)
    }
    fn cos(&self) -> Self {
        Jet::cos(self)
    }
    fn tan(&self) -> Self {
        Jet::tan(self)
    }
    fn tanh(&self) -> Self {
        Jet::tanh(self)
    }
    fn exp(&self) -> Self {
        Jet::exp(self)
    }
    fn ln(&self) -> Self {
        Jet::ln(self)
    }
    fn sqrt(&self) -> Self {
        Jet::sqrt(self)
    }
    fn abs(&self) -> Self {
        Jet::abs(self)
    }
    fn powi(&self, n: i32) -> Self {
        Jet::powi(self, n)
    }
    fn add_f(&self, c: f64) -> Self {
        self.add_const(c)
    }
    fn mul_f(&self, c: f64) -> Self {
        self.scale(c)
    }
}

/// Evaluates an expression tree in any algebra. `zero` supplies the
/// context for literals.
pub fn eval_expr<A: Algebra>(expr: &Expr, zero: &A, coords: &[A], deriv: &mut dyn FnMut(&DerivKey) -> A) -> A {
    match expr {
        Expr::Num(v) => zero.lift(*v),
        Expr::Const(c) => zero.lift(c.value()),
        Expr::Coord(i) => coords[*i].clone(),
        Expr::Deriv(k) => deriv(k),
        Expr::Neg(a) => eval_expr(a, zero, coords, deriv).neg(),
        Expr::Func(f, a) => {
            let a = eval_expr(a, zero, coords, deriv);
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => a.tan(),
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Log => a.ln(),
                Func::Sqrt => a.sqrt(),
                Func::Abs => a.abs(),
            }
        }
        Expr::Bin(op, a, b) => {
            let l = eval_expr(a, zero, coords, deriv);
            if let (BinOp::Pow, Some(n)) = (op, pow_literal(b)) {
                return l.powi(n);
            }
            let r = eval_expr(b, zero, coords, deriv);
            match op {
                BinOp::Add => l.add(&r),
                BinOp::Sub => l.sub(&r),
                BinOp::Mul => l.mul(&r),
                BinOp::Div => l.div(&r),
                BinOp::Pow => l.pow(&r),
            }
        }
    }
}

fn pow_literal(e: &Expr) -> Option<i32> {
    let v = match e {
        Expr::Num(v) => *v,
        Expr::Neg(inner) => match **inner {
            Expr::Num(v) => -v,
            _ => return None,
        },
        _ => return None,
    };
    (v.fract() == 0.0 && v.abs() <= 1024.0).then_some(v as i32)
}

/// Evaluates a condition function in any algebra.
pub fn eval_function<A: Algebra>(f: &FunctionExpr, coords: &[A]) -> A {
    let zero = coords.first().map(|c| c.lift(0.0)).expect("at least one coordinate");
    eval_expr(f.expr(), &zero, coords, &mut |_| unreachable!("function expressions have no derivatives"))
}
