//! Batched forward and backward passes over Taylor jets.
//!
//! Inputs for `M` points are stored as an `(s·M) × width` matrix whose
//! `α`-th block of `M` rows holds the `α` coefficients (see
//! [`crate::jet::JetBatch`]). An affine layer maps every block with the same
//! weights and adds the bias to block 0 only; tanh layers use the jet
//! composition in [`crate::jet`]. The output blocks are therefore the
//! normalized input derivatives of the network for every point at once.
//!
//! Fields handed to the loss code are `F × (s·M)` matrices, one row per
//! input function (a single row for a plain MLP).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::jet::{
    mul_point_jets, mul_point_jets_backward, tanh_backward, tanh_forward, Jet, JetBatch, JetSet, TanhCache,
};

use super::{network_inputs, Architecture, MlpArchitecture};

/// Intermediates of [`mlp_jet_forward`].
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    tanh: Vec<TanhCache>,
    rows: usize,
}

fn weights<'a>(params: &'a [f64], at: usize, fan_in: usize, fan_out: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((fan_in, fan_out), &params[at..at + fan_in * fan_out]).expect("weight shape")
}

/// Propagates input jets `x` (`(s·rows) × input`) through the MLP.
pub fn mlp_jet_forward(
    arch: &MlpArchitecture,
    params: &[f64],
    set: &JetSet,
    rows: usize,
    x: Array2<f64>,
) -> (Array2<f64>, MlpCache) {
    debug_assert_eq!(x.nrows(), set.len() * rows);
    let shapes = arch.shapes();
    let mut cache = MlpCache { inputs: Vec::with_capacity(shapes.len()), tanh: Vec::new(), rows };
    let mut h = x;
    let mut at = 0;
    for (layer, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let w = weights(params, at, fan_in, fan_out);
        let b = &params[at + fan_in * fan_out..at + (fan_in + 1) * fan_out];
        at += (fan_in + 1) * fan_out;
        let mut z = Array2::zeros((h.nrows(), fan_out));
        general_mat_mul(1.0, &h, &w, 0.0, &mut z);
        for mut row in z.slice_mut(s![..rows, ..]).rows_mut() {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        cache.inputs.push(h);
        if layer + 1 < shapes.len() {
            let (y, tc) = tanh_forward(set, JetBatch { rows, data: z });
            cache.tanh.push(tc);
            h = y.data;
        } else {
            h = z;
        }
    }
    (h, cache)
}

/// Accumulates parameter gradients of `Σ dout ⊙ out` into `grad`.
pub fn mlp_jet_backward(
    arch: &MlpArchitecture,
    params: &[f64],
    set: &JetSet,
    cache: &MlpCache,
    dout: Array2<f64>,
    grad: &mut [f64],
) {
    let shapes = arch.shapes();
    let rows = cache.rows;
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(i, o) in &shapes {
        offsets.push(at);
        at += (i + 1) * o;
    }
    let mut dz = dout;
    for layer in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[layer];
        let at = offsets[layer];
        let h = &cache.inputs[layer];
        {
            let mut dw = ndarray::ArrayViewMut2::from_shape((fan_in, fan_out), &mut grad[at..at + fan_in * fan_out])
                .expect("weight shape");
            general_mat_mul(1.0, &h.t(), &dz, 1.0, &mut dw);
        }
        let db = dz.slice(s![..rows, ..]).sum_axis(Axis(0));
        for (g, v) in grad[at + fan_in * fan_out..at + (fan_in + 1) * fan_out].iter_mut().zip(db.iter()) {
            *g += v;
        }
        if layer == 0 {
            break;
        }
        let w = weights(params, at, fan_in, fan_out);
        let mut dh = Array2::zeros((dz.nrows(), fan_in));
        general_mat_mul(1.0, &dz, &w.t(), 0.0, &mut dh);
        dz = tanh_backward(set, &cache.tanh[layer - 1], JetBatch { rows, data: dh }).data;
    }
}

/// Network input jets for the rows of `points`, after the optional
/// periodic embedding of each coordinate.
pub fn input_jets(set: &JetSet, points: &Array2<f64>, embed: &[Option<(f64, f64)>]) -> Array2<f64> {
    let m = points.nrows();
    let width = super::embedded_width(embed);
    let mut out = Array2::zeros((set.len() * m, width));
    for (p, row) in points.rows().into_iter().enumerate() {
        let coords: Vec<Jet> = row.iter().enumerate().map(|(i, &v)| Jet::variable(set, i, v)).collect();
        for (j, f) in network_inputs(&coords, embed).iter().enumerate() {
            for (a, c) in f.coeffs().iter().enumerate() {
                out[[a * m + p, j]] = *c;
            }
        }
    }
    out
}

/// Jets of a scalar function of the coordinates at every point, laid out
/// block-major (`s·M` entries).
pub fn point_function_jets<'s>(set: &'s JetSet, points: &Array2<f64>, f: impl Fn(&[Jet<'s>]) -> Jet<'s>) -> Vec<f64> {
    let m = points.nrows();
    let mut out = vec![0.0; set.len() * m];
    for (p, row) in points.rows().into_iter().enumerate() {
        let coords: Vec<Jet> = row.iter().enumerate().map(|(i, &v)| Jet::variable(set, i, v)).collect();
        for (a, c) in f(&coords).coeffs().iter().enumerate() {
            out[a * m + p] = *c;
        }
    }
    out
}

/// Branch network outputs for every function sample (`F × p·q`).
pub struct BranchState {
    pub out: Array2<f64>,
    cache: MlpCache,
}

pub fn branch_forward(arch: &Architecture, params: &[f64], inputs: &Array2<f64>) -> Option<BranchState> {
    let Architecture::DeepOnet(a) = arch else { return None };
    let set = JetSet::value_only(1);
    let (out, cache) =
        mlp_jet_forward(&a.branch, &params[..a.branch.param_count()], &set, inputs.nrows(), inputs.clone());
    Some(BranchState { out, cache })
}

pub fn branch_backward(arch: &Architecture, params: &[f64], state: &BranchState, dout: Array2<f64>, grad: &mut [f64]) {
    let Architecture::DeepOnet(a) = arch else { return };
    let split = a.branch.param_count();
    let set = JetSet::value_only(1);
    mlp_jet_backward(&a.branch, &params[..split], &set, &state.cache, dout, &mut grad[..split]);
}

/// Intermediates of [`raw_fields`].
pub struct FieldCache {
    mlp: MlpCache,
    trunk_out: Array2<f64>,
}

/// Raw network fields `U_l` (`F × s·M`) for each output `l`, before any
/// constraint wrapper.
pub fn raw_fields(
    arch: &Architecture,
    params: &[f64],
    set: &JetSet,
    points: usize,
    inputs: Array2<f64>,
    branch: Option<&BranchState>,
) -> (Vec<Array2<f64>>, FieldCache) {
    match arch {
        Architecture::Mlp(a) => {
            let (out, mlp) = mlp_jet_forward(a, params, set, points, inputs);
            let fields = (0..a.output).map(|l| out.column(l).to_owned().insert_axis(Axis(0))).collect();
            (fields, FieldCache { mlp, trunk_out: out })
        }
        Architecture::DeepOnet(a) => {
            let split = a.branch.param_count();
            let (t, mlp) = mlp_jet_forward(&a.trunk, &params[split..], set, points, inputs);
            let b = &branch.expect("DeepONet fields need branch outputs").out;
            let fields = (0..a.outputs)
                .map(|l| {
                    let cols = s![.., l * a.p..(l + 1) * a.p];
                    b.slice(cols).dot(&t.slice(cols).t())
                })
                .collect();
            (fields, FieldCache { mlp, trunk_out: t })
        }
    }
}

/// Backward pass of [`raw_fields`]: accumulates trunk/MLP gradients into
/// `grad` and branch-output gradients into `dbranch`.
#[allow(clippy::too_many_arguments)]
pub fn raw_fields_backward(
    arch: &Architecture,
    params: &[f64],
    set: &JetSet,
    cache: &FieldCache,
    branch: Option<&BranchState>,
    dfields: &[Array2<f64>],
    grad: &mut [f64],
    dbranch: Option<&mut Array2<f64>>,
) {
    match arch {
        Architecture::Mlp(a) => {
            let mut dout = Array2::zeros(cache.trunk_out.raw_dim());
            for (l, d) in dfields.iter().enumerate() {
                dout.column_mut(l).assign(&d.row(0));
            }
            mlp_jet_backward(a, params, set, &cache.mlp, dout, grad);
        }
        Architecture::DeepOnet(a) => {
            let split = a.branch.param_count();
            let b = &branch.expect("DeepONet fields need branch outputs").out;
            let t = &cache.trunk_out;
            let mut dt = Array2::zeros(t.raw_dim());
            let db = dbranch.expect("DeepONet backward needs a branch gradient buffer");
            for (l, d) in dfields.iter().enumerate() {
                let cols = s![.., l * a.p..(l + 1) * a.p];
                general_mat_mul(1.0, &d.t(), &b.slice(cols), 0.0, &mut dt.slice_mut(cols));
                general_mat_mul(1.0, d, &t.slice(cols), 1.0, &mut db.slice_mut(cols));
            }
            mlp_jet_backward(&a.trunk, &params[split..], set, &cache.mlp, dt, &mut grad[split..]);
        }
    }
}

/// Hard-constraint data for one output on one point set:
/// `wrapped = coeffs · basisᵀ + mult ⊙ raw`.
#[derive(Debug, Clone)]
pub struct AnsatzJets {
    /// `s·M` multiplier jets.
    pub mult: Vec<f64>,
    /// `K × s·M` jets of the offset basis functions.
    pub basis: Array2<f64>,
}

impl AnsatzJets {
    /// Offsets for `F` functions with basis coefficients `coeffs` (`F × K`).
    pub fn offsets(&self, coeffs: &Array2<f64>) -> Array2<f64> {
        coeffs.dot(&self.basis)
    }

    pub fn wrap(&self, set: &JetSet, points: usize, raw: &Array2<f64>, offsets: &Array2<f64>) -> Array2<f64> {
        let mut out = mul_point_jets(set, &self.mult, raw, points);
        if offsets.nrows() == out.nrows() {
            out += offsets;
        } else {
            // One offset row shared by every function.
            out += &offsets.row(0);
        }
        out
    }

    pub fn unwrap_grad(&self, set: &JetSet, points: usize, dwrapped: &Array2<f64>) -> Array2<f64> {
        mul_point_jets_backward(set, &self.mult, dwrapped, points)
    }
}
