//! Hard-constraint wrappers.
//!
//! Each wrapper is affine in the raw network output, `u = offset + mult · raw`,
//! and reproduces its initial/boundary data for every value of `raw`. The
//! batched path exploits the affinity: it evaluates a wrapper at `raw = 0`
//! and `raw = 1` once per point to get the offset and multiplier jets.

use std::f64::consts::PI;

use crate::algebra::{eval_function, Algebra};
use crate::geometry::{BoundarySpec, Domain, DomainKind, InitialSpec};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    Soft,
    Hard,
}

/// Which wrapper a hard constraint uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnsatzKind {
    /// Initial data in time (PDE tx and ODE initial value problems).
    TimePolynomial,
    /// Dirichlet data on the four edges of an xy rectangle.
    DirichletXy,
    /// Values at both ends of an ODE interval.
    BoundaryBlend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeKind {
    Ivp,
    Bvp,
}

/// `Σ_{k<n} c_k (t−t0)^k / k! + raw · ((t−t0)/(tf−t0))^n` with `n =
/// conds.len()`, where `conds[k]` is the k-th time derivative at `t0`.
pub fn time_polynomial<A: Algebra>(raw: &A, t: &A, t0: f64, tf: f64, conds: &[A]) -> Result<A, ModelError> {
    let n = conds.len();
    if !(1..=2).contains(&n) {
        return Err(ModelError::UnsupportedOrder(n));
    }
    let dt = t.add_f(-t0);
    let mut out = conds[0].clone();
    let mut power = dt.lift(1.0);
    let mut fact = 1.0;
    for (k, c) in conds.iter().enumerate().skip(1) {
        power = power.mul(&dt);
        fact *= k as f64;
        out = out.add(&c.mul(&power).mul_f(1.0 / fact));
    }
    let s = dt.mul_f(1.0 / (tf - t0));
    Ok(out.add(&raw.mul(&s.powi(n as i32))))
}

/// Time-polynomial wrapper for variable `var` of `spec` at `point` (`(t)` or
/// `(t, x)`).
pub fn apply_time_ansatz<A: Algebra>(
    raw: &A,
    point: &[A],
    spec: &InitialSpec,
    var: usize,
    domain: &Domain,
) -> Result<A, ModelError> {
    let (t0, tf) = domain.time().ok_or_else(|| ModelError::Architecture("time ansatz needs a time axis".into()))?;
    let spatial: &[A] = match domain.kind() {
        DomainKind::EvolutionTx => &point[1..2],
        _ => &point[0..1],
    };
    let conds: Vec<A> = spec.functions()[var].iter().map(|f| eval_function(f, spatial)).collect();
    time_polynomial(raw, &point[0], t0, tf, &conds)
}

/// `(1−s)·ua + s·ub + s(1−s)·raw` with `s = (t−t0)/(tf−t0)`.
pub fn bvp_blend<A: Algebra>(raw: &A, t: &A, t0: f64, tf: f64, ua: &A, ub: &A) -> A {
    let s = t.add_f(-t0).mul_f(1.0 / (tf - t0));
    let one_minus = s.neg().add_f(1.0);
    one_minus.mul(ua).add(&s.mul(ub)).add(&s.mul(&one_minus).mul(raw))
}

/// ODE wrapper. `values` holds `(u(t0), u'(t0), ...)` for an initial value
/// problem and `(u(t0), u(tf))` for a boundary value problem.
pub fn apply_ode_ansatz<A: Algebra>(
    raw: &A,
    t: &A,
    values: &[f64],
    domain: &Domain,
    kind: OdeKind,
) -> Result<A, ModelError> {
    let (t0, tf) = domain.bounds()[0];
    match kind {
        OdeKind::Ivp => {
            let conds: Vec<A> = values.iter().map(|&v| t.lift(v)).collect();
            time_polynomial(raw, t, t0, tf, &conds)
        }
        OdeKind::Bvp => {
            if values.len() != 2 {
                return Err(ModelError::Architecture(format!(
                    "boundary blend needs two endpoint values, got {}",
                    values.len()
                )));
            }
            Ok(bvp_blend(raw, t, t0, tf, &t.lift(values[0]), &t.lift(values[1])))
        }
    }
}

/// `A(x,y) + x*(1−x*) y*(1−y*) raw`. `edge(i, x, y)` evaluates the edge
/// functions in the order left (`x = xl`), right, bottom (`y = yl`), top; it
/// is only ever called with the fixed coordinate set to the edge value.
/// The top edge enters `A` through `g_{yu}` throughout.
pub fn dirichlet_xy<A: Algebra>(
    raw: &A,
    x: &A,
    y: &A,
    (xl, xr): (f64, f64),
    (yl, yu): (f64, f64),
    edge: &dyn Fn(usize, &A, &A) -> A,
) -> A {
    let xs = x.add_f(-xl).mul_f(1.0 / (xr - xl));
    let ys = y.add_f(-yl).mul_f(1.0 / (yu - yl));
    let one_x = xs.neg().add_f(1.0);
    let one_y = ys.neg().add_f(1.0);
    let c = |v: f64| x.lift(v);
    let left = edge(0, &c(xl), y);
    let right = edge(1, &c(xr), y);
    let bottom = edge(2, x, &c(yl));
    let top = edge(3, x, &c(yu));
    let bottom_ends = one_x.mul(&edge(2, &c(xl), &c(yl))).add(&xs.mul(&edge(2, &c(xr), &c(yl))));
    let top_ends = one_x.mul(&edge(3, &c(xl), &c(yu))).add(&xs.mul(&edge(3, &c(xr), &c(yu))));
    let a = one_x
        .mul(&left)
        .add(&xs.mul(&right))
        .add(&one_y.mul(&bottom.sub(&bottom_ends)))
        .add(&ys.mul(&top.sub(&top_ends)));
    a.add(&xs.mul(&one_x).mul(&ys).mul(&one_y).mul(raw))
}

/// Dirichlet wrapper with the edge functions of `spec`, after checking
/// corner compatibility to 1e-9.
pub fn apply_dirichlet_xy_ansatz<A: Algebra>(
    raw: &A,
    point: &[A],
    spec: &BoundarySpec,
    domain: &Domain,
) -> Result<A, ModelError> {
    spec.check_corners(domain, 1e-9).map_err(|e| match e {
        crate::geometry::GeometryError::CornerMismatch { x, y, gap } => ModelError::CornerMismatch { x, y, gap },
        other => ModelError::Architecture(other.to_string()),
    })?;
    let b = domain.bounds();
    Ok(dirichlet_xy(raw, &point[0], &point[1], b[0], b[1], &|i, x, y| {
        eval_function(spec.function(i), &[x.clone(), y.clone()])
    }))
}

/// Cardinal functions of trigonometric interpolation on `n` equispaced
/// nodes `θ_j = 2πj/n`: `L_j(θ_k) = δ_jk`, and any trigonometric polynomial
/// of degree below `n/2` is reproduced exactly by `Σ f(θ_j) L_j`.
pub fn trig_cardinals<A: Algebra>(theta: &A, n: usize) -> Vec<A> {
    let half = n / 2;
    let top = if n.is_multiple_of(2) { half.saturating_sub(1) } else { half };
    let harmonics: Vec<(A, A)> = (1..=half)
        .map(|k| {
            let a = theta.mul_f(k as f64);
            (a.cos(), a.sin())
        })
        .collect();
    (0..n)
        .map(|j| {
            let tj = 2.0 * PI * j as f64 / n as f64;
            let mut acc = theta.lift(1.0);
            for k in 1..=top {
                let (c, s) = &harmonics[k - 1];
                let kt = k as f64 * tj;
                acc = acc.add(&c.mul_f(2.0 * kt.cos())).add(&s.mul_f(2.0 * kt.sin()));
            }
            if n.is_multiple_of(2) && half > 0 {
                let (c, _) = &harmonics[half - 1];
                acc = acc.add(&c.mul_f((half as f64 * tj).cos()));
            }
            acc.mul_f(1.0 / n as f64)
        })
        .collect()
}
