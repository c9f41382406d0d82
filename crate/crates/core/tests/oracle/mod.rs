//! Reference computations for the integration tests: one scalar tape per
//! point, central finite differences, and plain accumulation loops.
#![allow(dead_code)]

use std::f64::consts::PI;

use diffnet::algebra::Algebra;
use diffnet::autodiff::{derive, Graph, Var};
use diffnet::models::{deeponet_forward, mlp_forward, Architecture};

/// Network inputs for raw coordinates, embedding periodic ones as
/// `(cos θ, sin θ)` with `θ = 2πc/(hi − lo)`.
fn embedded<'g>(coords: &[Var<'g>], embed: &[Option<(f64, f64)>]) -> Vec<Var<'g>> {
    let mut out = Vec::new();
    for (c, e) in coords.iter().zip(embed) {
        match e {
            Some((lo, hi)) => {
                let theta = c.mul_f(2.0 * PI / (hi - lo));
                out.push(theta.cos());
                out.push(theta.sin());
            }
            None => out.push(*c),
        }
    }
    out
}

/// `∂^α` of every raw network output at `point`, by differentiating a
/// per-point tape.
pub fn tape_derivative(
    arch: &Architecture,
    params: &[f64],
    branch: Option<&[f64]>,
    embed: &[Option<(f64, f64)>],
    point: &[f64],
    alpha: &[u8],
) -> Vec<f64> {
    let g = Graph::new();
    let coords: Vec<Var> = point.iter().map(|_| g.input()).collect();
    let inputs = embedded(&coords, embed);
    let p: Vec<Var> = params.iter().map(|&v| g.constant(v)).collect();
    let outputs = match arch {
        Architecture::Mlp(a) => mlp_forward(a, &p, &inputs).unwrap(),
        Architecture::DeepOnet(a) => {
            let b: Vec<Var> = branch.expect("deeponet needs a branch input").iter().map(|&v| g.constant(v)).collect();
            deeponet_forward(a, &p, &b, &inputs).unwrap()
        }
    };
    outputs
        .into_iter()
        .map(|out| {
            let mut tape = g.finish(out);
            for (axis, &k) in alpha.iter().enumerate() {
                for _ in 0..k {
                    tape = derive(&tape, axis);
                }
            }
            tape.forward(point).unwrap()
        })
        .collect()
}

/// Raw network outputs at `point` in plain `f64`.
pub fn net_value(
    arch: &Architecture,
    params: &[f64],
    branch: Option<&[f64]>,
    embed: &[Option<(f64, f64)>],
    point: &[f64],
) -> Vec<f64> {
    let mut inputs = Vec::new();
    for (&c, e) in point.iter().zip(embed) {
        match e {
            Some((lo, hi)) => {
                let theta = c * 2.0 * PI / (hi - lo);
                inputs.push(theta.cos());
                inputs.push(theta.sin());
            }
            None => inputs.push(c),
        }
    }
    match arch {
        Architecture::Mlp(a) => mlp_forward(a, params, &inputs).unwrap(),
        Architecture::DeepOnet(a) => deeponet_forward(a, params, branch.unwrap(), &inputs).unwrap(),
    }
}

/// Central difference of `f` along `axis`.
pub fn fd_first(f: &dyn Fn(&[f64]) -> f64, x: &[f64], axis: usize, h: f64) -> f64 {
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[axis] += h;
    b[axis] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

/// Central second difference; `i == j` gives the three-point stencil,
/// otherwise the four-point mixed stencil.
pub fn fd_second(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, j: usize, h: f64) -> f64 {
    let shifted = |di: f64, dj: f64| {
        let mut y = x.to_vec();
        y[i] += di;
        y[j] += dj;
        f(&y)
    };
    if i == j {
        (shifted(h, 0.0) - 2.0 * f(x) + shifted(-h, 0.0)) / (h * h)
    } else {
        (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4.0 * h * h)
    }
}

/// `|a − b| / max(|b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
