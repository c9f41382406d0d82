//! Network architectures, parameters and the generic forward passes.
//!
//! Every forward function here is written against [`Algebra`], so the same
//! code builds a differentiable tape (`Var`), evaluates plain numbers
//! (`f64`) or propagates Taylor jets. The batched training path in
//! [`batched`] reimplements the MLP as matrix products over jets and is
//! checked against these scalar versions in the tests.
//!
//! Parameter layout: for each layer in order, the weight matrix
//! (`fan_in × fan_out`, row-major) followed by its bias vector. A DeepONet
//! stores the branch network first, then the trunk.

pub mod batched;
pub mod constraints;

use rand::Rng;
use thiserror::Error;

use crate::algebra::Algebra;
use crate::geometry::{rng_for, Stream};

pub use constraints::{
    apply_dirichlet_xy_ansatz, apply_ode_ansatz, apply_time_ansatz, bvp_blend, dirichlet_xy, time_polynomial,
    trig_cardinals, AnsatzKind, ConstraintMode, OdeKind,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("expected {expected} inputs, got {got}")]
    Width { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("hard constraint of temporal order {0} is not supported (orders 1 and 2 are)")]
    UnsupportedOrder(usize),
    #[error("Dirichlet edge functions disagree at corner ({x}, {y}) by {gap:e}")]
    CornerMismatch { x: f64, y: f64, gap: f64 },
}

/// A fully connected tanh network: `layers` hidden layers of `units` each,
/// linear output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpArchitecture {
    pub input: usize,
    pub layers: usize,
    pub units: usize,
    pub output: usize,
}

impl MlpArchitecture {
    pub fn new(input: usize, layers: usize, units: usize, output: usize) -> Result<Self, ModelError> {
        if input == 0 || layers == 0 || units == 0 || output == 0 {
            return Err(ModelError::Architecture(format!(
                "widths and layer count must be positive (input {input}, layers {layers}, units {units}, output {output})"
            )));
        }
        Ok(MlpArchitecture { input, layers, units, output })
    }

    /// `(fan_in, fan_out)` of every affine map, input to output.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.input, self.units)];
        out.extend((1..self.layers).map(|_| (self.units, self.units)));
        out.push((self.units, self.output));
        out
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Branch and trunk networks combined by a dot product. With `outputs`
/// dependent variables both sub-networks emit `p · outputs` features and
/// variable `l` uses the `l`-th group of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeepOnetArchitecture {
    pub branch: MlpArchitecture,
    pub trunk: MlpArchitecture,
    pub p: usize,
    pub outputs: usize,
}

impl DeepOnetArchitecture {
    pub fn new(branch: MlpArchitecture, trunk: MlpArchitecture, p: usize, outputs: usize) -> Result<Self, ModelError> {
        if p == 0 || outputs == 0 {
            return Err(ModelError::Architecture("p and the output count must be positive".into()));
        }
        if branch.output != p * outputs || trunk.output != p * outputs {
            return Err(ModelError::Architecture(format!(
                "branch and trunk must both emit p·outputs = {} features (got {} and {})",
                p * outputs,
                branch.output,
                trunk.output
            )));
        }
        Ok(DeepOnetArchitecture { branch, trunk, p, outputs })
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp(MlpArchitecture),
    DeepOnet(DeepOnetArchitecture),
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        match self {
            Architecture::Mlp(a) => a.param_count(),
            Architecture::DeepOnet(a) => a.param_count(),
        }
    }

    /// Number of dependent variables produced.
    pub fn outputs(&self) -> usize {
        match self {
            Architecture::Mlp(a) => a.output,
            Architecture::DeepOnet(a) => a.outputs,
        }
    }

    /// Width of the coordinate (trunk) input.
    pub fn point_width(&self) -> usize {
        match self {
            Architecture::Mlp(a) => a.input,
            Architecture::DeepOnet(a) => a.trunk.input,
        }
    }
}

/// Weights and biases together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl NetworkParams {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != arch.param_count() {
            return Err(ModelError::ParamCount { expected: arch.param_count(), got: values.len() });
        }
        Ok(NetworkParams { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Self {
        NetworkParams { arch, values: vec![0.0; arch.param_count()] }
    }
}

/// Glorot-uniform weights (bound `√(6/(fan_in+fan_out))`) and zero biases.
pub fn init_params(arch: Architecture, seed: u64) -> NetworkParams {
    let mut rng = rng_for(seed, Stream::Parameters);
    let mut values = Vec::with_capacity(arch.param_count());
    let mlps = match arch {
        Architecture::Mlp(a) => vec![a],
        Architecture::DeepOnet(a) => vec![a.branch, a.trunk],
    };
    for mlp in mlps {
        for (fan_in, fan_out) in mlp.shapes() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
    }
    NetworkParams { arch, values }
}

/// Forward pass of a tanh MLP in any algebra.
pub fn mlp_forward<A: Algebra>(arch: &MlpArchitecture, params: &[A], input: &[A]) -> Result<Vec<A>, ModelError> {
    if input.len() != arch.input {
        return Err(ModelError::Width { expected: arch.input, got: input.len() });
    }
    if params.len() != arch.param_count() {
        return Err(ModelError::ParamCount { expected: arch.param_count(), got: params.len() });
    }
    let shapes = arch.shapes();
    let mut h: Vec<A> = input.to_vec();
    let mut at = 0;
    for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let w = &params[at..at + fan_in * fan_out];
        let b = &params[at + fan_in * fan_out..at + (fan_in + 1) * fan_out];
        at += (fan_in + 1) * fan_out;
        let mut next = Vec::with_capacity(fan_out);
        for j in 0..fan_out {
            let mut z = b[j].clone();
            for i in 0..fan_in {
                z = z.add(&h[i].mul(&w[i * fan_out + j]));
            }
            next.push(if layer + 1 < shapes.len() { z.tanh() } else { z });
        }
        h = next;
    }
    Ok(h)
}

/// `Σ_k B_k(sensors) · T_k(point)` for each output group.
pub fn deeponet_forward<A: Algebra>(
    arch: &DeepOnetArchitecture,
    params: &[A],
    sensors: &[A],
    point: &[A],
) -> Result<Vec<A>, ModelError> {
    if params.len() != arch.param_count() {
        return Err(ModelError::ParamCount { expected: arch.param_count(), got: params.len() });
    }
    let split = arch.branch.param_count();
    let b = mlp_forward(&arch.branch, &params[..split], sensors)?;
    let t = mlp_forward(&arch.trunk, &params[split..], point)?;
    Ok(dot_groups(&b, &t, arch.p))
}

/// Group-wise dot products of two equally long feature vectors.
pub fn dot_groups<A: Algebra>(b: &[A], t: &[A], p: usize) -> Vec<A> {
    b.chunks(p)
        .zip(t.chunks(p))
        .map(|(bg, tg)| {
            let mut acc = bg[0].mul(&tg[0]);
            for k in 1..p {
                acc = acc.add(&bg[k].mul(&tg[k]));
            }
            acc
        })
        .collect()
}

/// `(cos θ, sin θ)` with `θ = 2πx/(xr − xl)`. The phase is taken from the
/// origin, not from `xl`, so at `xl = 0` the quarter point maps to `(0, 1)`.
pub fn periodic_embed<A: Algebra>(x: &A, xl: f64, xr: f64) -> (A, A) {
    let theta = x.mul_f(2.0 * std::f64::consts::PI / (xr - xl));
    (theta.cos(), theta.sin())
}

/// Network input for a point: each coordinate is passed through, or
/// replaced by its periodic embedding when `embed[i]` names its period
/// interval.
pub fn network_inputs<A: Algebra>(coords: &[A], embed: &[Option<(f64, f64)>]) -> Vec<A> {
    let mut out = Vec::with_capacity(coords.len() + 2);
    for (c, e) in coords.iter().zip(embed) {
        match e {
            Some((lo, hi)) => {
                let (a, b) = periodic_embed(c, *lo, *hi);
                out.push(a);
                out.push(b);
            }
            None => out.push(c.clone()),
        }
    }
    out
}

/// Input width after embedding.
pub fn embedded_width(embed: &[Option<(f64, f64)>]) -> usize {
    embed.iter().map(|e| if e.is_some() { 2 } else { 1 }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{derive, Graph, Var};

    #[test]
    fn tiny_net_has_three_params_within_bound() {
        let arch = MlpArchitecture::new(1, 1, 1, 1).unwrap();
        assert_eq!(arch.param_count(), 4);
        let p = init_params(Architecture::Mlp(arch), 7);
        assert!(p.values[0].abs() <= 3f64.sqrt() && p.values[2].abs() <= 3f64.sqrt());
        assert_eq!((p.values[1], p.values[3]), (0.0, 0.0));
        assert_eq!(p, init_params(Architecture::Mlp(arch), 7));
    }

    #[test]
    fn four_by_sixty_param_count() {
        let arch = MlpArchitecture::new(2, 4, 60, 1).unwrap();
        assert_eq!(arch.param_count(), 2 * 60 + 60 + 3 * (60 * 60 + 60) + 60 + 1);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let arch = MlpArchitecture::new(2, 2, 5, 1).unwrap();
        let p = vec![0.0; arch.param_count()];
        assert_eq!(mlp_forward(&arch, &p, &[0.3, -2.0]).unwrap(), vec![0.0]);
        assert!(matches!(mlp_forward(&arch, &p, &[0.3]), Err(ModelError::Width { expected: 2, got: 1 })));
    }

    #[test]
    fn deeponet_is_dot_of_subnets() {
        let branch = MlpArchitecture::new(3, 2, 8, 10).unwrap();
        let trunk = MlpArchitecture::new(2, 2, 8, 10).unwrap();
        let arch = DeepOnetArchitecture::new(branch, trunk, 10, 1).unwrap();
        let p = init_params(Architecture::DeepOnet(arch), 3).values;
        let s = [0.2, -1.0, 0.7];
        let x = [0.1, 0.9];
        let out = deeponet_forward(&arch, &p, &s, &x).unwrap()[0];
        let split = branch.param_count();
        let b = mlp_forward(&branch, &p[..split], &s).unwrap();
        let t = mlp_forward(&trunk, &p[split..], &x).unwrap();
        let dot: f64 = b.iter().zip(&t).map(|(a, c)| a * c).sum();
        assert!((out - dot).abs() < 1e-12);
    }

    #[test]
    fn embedding_convention() {
        let (c, s) = periodic_embed(&0.25, 0.0, 1.0);
        assert!(c.abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
        let (a, b) = periodic_embed(&-1.0, -1.0, 1.0);
        let (c, d) = periodic_embed(&1.0, -1.0, 1.0);
        assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
    }

    #[test]
    fn input_derivative_matches_finite_differences() {
        let arch = MlpArchitecture::new(2, 2, 6, 1).unwrap();
        let p = init_params(Architecture::Mlp(arch), 1).values;
        let g = Graph::new();
        let x: Vec<Var> = (0..2).map(|_| g.input()).collect();
        let pv: Vec<Var> = p.iter().map(|&v| g.constant(v)).collect();
        let out = mlp_forward(&arch, &pv, &x).unwrap()[0];
        let tape = g.finish(out);
        let dx = derive(&tape, 0);
        let pt = [0.3, -0.4];
        let h = 1e-6;
        let fd = (mlp_forward(&arch, &p, &[pt[0] + h, pt[1]]).unwrap()[0]
            - mlp_forward(&arch, &p, &[pt[0] - h, pt[1]]).unwrap()[0])
            / (2.0 * h);
        let an = dx.forward(&pt).unwrap();
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3));
    }
}
