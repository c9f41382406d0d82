use thiserror::Error;

use super::{BinOp, DerivKey, Expr, Func};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no value supplied for derivative {0}")]
    MissingDerivative(String),
    #[error("no value supplied for coordinate {0}")]
    MissingCoordinate(String),
    #[error("{op} is undefined for argument {value}")]
    Domain { op: &'static str, value: f64 },
}

/// Direct tree-walking evaluation. Shares its domain rules with the tape
/// lowering in `Expr::lower`, so both routes fail on the same inputs.
pub(crate) fn evaluate(
    expr: &Expr,
    coord: &dyn Fn(usize) -> Result<f64, EvalError>,
    deriv: &dyn Fn(&DerivKey) -> Result<f64, EvalError>,
) -> Result<f64, EvalError> {
    let rec = |e: &Expr| evaluate(e, coord, deriv);
    Ok(match expr {
        Expr::Num(v) => *v,
        Expr::Const(c) => c.value(),
        Expr::Coord(i) => coord(*i)?,
        Expr::Deriv(k) => deriv(k)?,
        Expr::Neg(a) => -rec(a)?,
        Expr::Func(f, a) => {
            let a = rec(a)?;
            match f {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Tan => {
                    let c = a.cos();
                    if c == 0.0 {
                        return Err(EvalError::Domain { op: "tan", value: a });
                    }
                    a.sin() / c
                }
                Func::Tanh => a.tanh(),
                Func::Exp => a.exp(),
                Func::Log => {
                    if a <= 0.0 {
                        return Err(EvalError::Domain { op: "log", value: a });
                    }
                    a.ln()
                }
                Func::Sqrt => {
                    if a < 0.0 {
                        return Err(EvalError::Domain { op: "sqrt", value: a });
                    }
                    a.sqrt()
                }
                Func::Abs => a.abs(),
            }
        }
        Expr::Bin(op, a, b) => {
            let l = rec(a)?;
            if *op == BinOp::Pow {
                return match b.integer_literal() {
                    Some(n) => {
                        if n < 0 && l == 0.0 {
                            return Err(EvalError::Domain { op: "pow", value: l });
                        }
                        Ok(l.powi(n))
                    }
                    None => {
                        if l <= 0.0 {
                            return Err(EvalError::Domain { op: "log", value: l });
                        }
                        Ok((rec(b)? * l.ln()).exp())
                    }
                };
            }
            let r = rec(b)?;
            match op {
                BinOp::Add => l + r,
                BinOp::Sub => l - r,
                BinOp::Mul => l * r,
                BinOp::Div => {
                    if r == 0.0 {
                        return Err(EvalError::Domain { op: "div", value: r });
                    }
                    l / r
                }
                BinOp::Pow => unreachable!(),
            }
        }
    })
}
