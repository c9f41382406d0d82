//! Composite physics-informed loss and its minimization with Adam.
//!
//! A [`LossProblem`] holds everything the loss needs with the network
//! parameters factored out: compiled residuals, the point sets (already
//! turned into input jets and constraint-wrapper jets) and the condition
//! targets. Point sets are split into chunks that are processed
//! independently (in parallel when rayon has threads) and reduced in chunk
//! order, so results do not depend on the thread count.
//!
//! For a DeepONet every chunk is evaluated against all `F` input functions
//! at once: the branch runs once per evaluation and the trunk once per
//! chunk, and the field of function `f` at point `m` is row `f` of
//! `B · Tᵀ`.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{gradient_batch, AutodiffError};
use crate::eqparser::CompiledResidual;
use crate::jet::JetSet;
use crate::models::batched::{
    branch_backward, branch_forward, input_jets, raw_fields, raw_fields_backward, AnsatzJets, BranchState,
};
use crate::models::{Architecture, NetworkParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch} (residual {residual}, initial {initial}, boundary {boundary})")]
    NonFinite { epoch: usize, residual: f64, initial: f64, boundary: f64 },
    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("residual evaluation failed: {0}")]
    Residual(#[from] AutodiffError),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

/// `γ_i` and `γ_b` of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub initial: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { initial: 1.0, boundary: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.initial >= 0.0 && self.initial.is_finite() && self.boundary >= 0.0 && self.boundary.is_finite()) {
            return Err(TrainError::Config(format!(
                "loss weights must be finite and nonnegative (got {}, {})",
                self.initial, self.boundary
            )));
        }
        Ok(())
    }
}

/// Full-batch Adam settings. One epoch is one optimizer step over all
/// collocation points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 1000, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "need lr > 0, 0 < beta1, beta2 < 1 and epsilon > 0 (got lr {}, beta1 {}, beta2 {}, epsilon {})",
                self.learning_rate, self.beta1, self.beta2, self.epsilon
            )))
        }
    }
}

/// Loss components at one parameter vector. Components that the
/// constraint mode drops are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub residual: f64,
    pub initial: Option<f64>,
    pub boundary: Option<f64>,
}

/// `L_Δ + γ_i L_i + γ_b L_b`, skipping absent components.
pub fn composite_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.residual + w.initial * c.initial.unwrap_or(0.0) + w.boundary * c.boundary.unwrap_or(0.0)
}

/// One mismatch term of an initial or boundary loss:
/// `coeff[m] · ∂^α u_output(point m) − target[f, m]`.
#[derive(Debug, Clone)]
pub struct Condition {
    pub output: usize,
    /// Position of `α` in the block's jet set.
    pub deriv: usize,
    /// Per-point factor (e.g. the outward normal sign).
    pub coeff: Vec<f64>,
    /// `F × M` targets.
    pub target: Array2<f64>,
}

/// A chunk of points with everything parameter-independent precomputed.
#[derive(Debug, Clone)]
pub struct FieldBlock {
    pub set: JetSet,
    pub points: Array2<f64>,
    pub inputs: Array2<f64>,
    /// Per output: wrapper jets and the matching offsets (`F × s·M`, or a
    /// single shared row). `None` for an unconstrained output.
    pub ansatz: Vec<Option<(AnsatzJets, Array2<f64>)>>,
}

impl FieldBlock {
    pub fn new(
        set: JetSet,
        points: Array2<f64>,
        embed: &[Option<(f64, f64)>],
        ansatz: Vec<Option<(AnsatzJets, Array2<f64>)>>,
    ) -> Self {
        let inputs = input_jets(&set, &points, embed);
        FieldBlock { set, points, inputs, ansatz }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Wrapped fields `F × s·M` per output, plus what the backward pass needs.
    pub fn forward(
        &self,
        arch: &Architecture,
        params: &[f64],
        branch: Option<&BranchState>,
    ) -> (Vec<Array2<f64>>, crate::models::batched::FieldCache) {
        let m = self.len();
        let (raw, cache) = raw_fields(arch, params, &self.set, m, self.inputs.clone(), branch);
        let wrapped = raw
            .into_iter()
            .zip(&self.ansatz)
            .map(|(u, a)| match a {
                Some((jets, offsets)) => jets.wrap(&self.set, m, &u, offsets),
                None => u,
            })
            .collect();
        (wrapped, cache)
    }

    fn unwrap_grads(&self, dwrapped: Vec<Array2<f64>>) -> Vec<Array2<f64>> {
        dwrapped
            .into_iter()
            .zip(&self.ansatz)
            .map(|(d, a)| match a {
                Some((jets, _)) => jets.unwrap_grad(&self.set, self.len(), &d),
                None => d,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Residual,
    Initial,
    Boundary,
}

#[derive(Debug, Clone)]
enum ChunkKind {
    Residual,
    Conditions(Vec<Condition>),
}

#[derive(Debug, Clone)]
struct Chunk {
    block: FieldBlock,
    kind: ChunkKind,
    term: Term,
}

/// Counts of loss-component evaluations, for checking that hard constraints
/// really skip their terms.
#[derive(Debug, Default)]
pub struct Counters {
    residual: AtomicUsize,
    initial: AtomicUsize,
    boundary: AtomicUsize,
}

impl Counters {
    pub fn residual(&self) -> usize {
        self.residual.load(Ordering::Relaxed)
    }
    pub fn initial(&self) -> usize {
        self.initial.load(Ordering::Relaxed)
    }
    pub fn boundary(&self) -> usize {
        self.boundary.load(Ordering::Relaxed)
    }
    fn bump(&self, term: Term) {
        let c = match term {
            Term::Residual => &self.residual,
            Term::Initial => &self.initial,
            Term::Boundary => &self.boundary,
        };
        c.fetch_add(1, Ordering::Relaxed);
    }
}

/// The assembled loss for one problem.
#[derive(Debug)]
pub struct LossProblem {
    arch: Architecture,
    residuals: Vec<CompiledResidual>,
    functions: usize,
    branch_inputs: Option<Array2<f64>>,
    weights: LossWeights,
    chunks: Vec<Chunk>,
    totals: [usize; 3],
    counters: Counters,
}

/// Rows (function × point pairs) per chunk; bounds memory per chunk.
const CHUNK_ROWS: usize = 1 << 16;
/// Upper bound on points per chunk for a single function.
const CHUNK_POINTS: usize = 256;

/// Point count per chunk for `functions` input functions.
pub fn chunk_points(functions: usize) -> usize {
    (CHUNK_ROWS / functions.max(1)).clamp(8, CHUNK_POINTS)
}

impl LossProblem {
    /// `branch_inputs` (`F × width`) is required for DeepONets and must be
    /// `None` for plain MLPs (`F = 1`).
    pub fn new(
        arch: Architecture,
        residuals: Vec<CompiledResidual>,
        branch_inputs: Option<Array2<f64>>,
        weights: LossWeights,
    ) -> Result<Self, TrainError> {
        weights.validate()?;
        let functions = match (&arch, &branch_inputs) {
            (Architecture::Mlp(_), None) => 1,
            (Architecture::DeepOnet(a), Some(b)) if b.ncols() == a.branch.input && b.nrows() > 0 => b.nrows(),
            _ => return Err(TrainError::Config("branch inputs must match the architecture".into())),
        };
        Ok(LossProblem {
            arch,
            residuals,
            functions,
            branch_inputs,
            weights,
            chunks: Vec::new(),
            totals: [0; 3],
            counters: Counters::default(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn functions(&self) -> usize {
        self.functions
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn has_term(&self, term: Term) -> bool {
        self.totals[term as usize] > 0
    }

    /// Adds a block of interior collocation points.
    pub fn add_interior(&mut self, block: FieldBlock) {
        self.totals[Term::Residual as usize] += block.len();
        self.chunks.push(Chunk { block, kind: ChunkKind::Residual, term: Term::Residual });
    }

    /// Adds initial or boundary points with their mismatch terms.
    pub fn add_conditions(&mut self, term: Term, block: FieldBlock, conditions: Vec<Condition>) {
        assert!(term != Term::Residual, "conditions belong to the initial or boundary term");
        self.totals[term as usize] += block.len();
        self.chunks.push(Chunk { block, kind: ChunkKind::Conditions(conditions), term });
    }

    /// Loss components without gradients.
    pub fn components(&self, params: &[f64]) -> Result<LossComponents, TrainError> {
        Ok(self.run(params, false)?.0)
    }

    /// Loss components and the gradient of the composite loss.
    pub fn loss_and_grad(&self, params: &[f64]) -> Result<(LossComponents, Vec<f64>), TrainError> {
        let (c, g) = self.run(params, true)?;
        Ok((c, g.expect("gradient requested")))
    }

    fn run(&self, params: &[f64], want_grad: bool) -> Result<(LossComponents, Option<Vec<f64>>), TrainError> {
        let branch = self.branch_inputs.as_ref().and_then(|b| branch_forward(&self.arch, params, b));
        let results: Vec<Result<ChunkResult, TrainError>> =
            self.chunks.par_iter().map(|c| self.chunk(c, params, branch.as_ref(), want_grad)).collect();
        let mut sums = [0.0; 3];
        let mut grad = want_grad.then(|| vec![0.0; params.len()]);
        let mut dbranch = branch.as_ref().filter(|_| want_grad).map(|b| Array2::zeros(b.out.raw_dim()));
        for (c, r) in self.chunks.iter().zip(results) {
            let r = r?;
            sums[c.term as usize] += r.value;
            if let (Some(g), Some(rg)) = (grad.as_mut(), r.grad) {
                for (a, b) in g.iter_mut().zip(rg) {
                    *a += b;
                }
            }
            if let (Some(db), Some(rdb)) = (dbranch.as_mut(), r.dbranch) {
                *db += &rdb;
            }
        }
        if let (Some(g), Some(b), Some(db)) = (grad.as_mut(), branch.as_ref(), dbranch) {
            branch_backward(&self.arch, params, b, db, g);
        }
        let comp = |t: Term| (self.totals[t as usize] > 0).then_some(sums[t as usize]);
        Ok((
            LossComponents {
                residual: sums[Term::Residual as usize],
                initial: comp(Term::Initial),
                boundary: comp(Term::Boundary),
            },
            grad,
        ))
    }

    /// Normalizer `1/(F·N_term)` and the composite weight of a term.
    fn scale(&self, term: Term) -> (f64, f64) {
        let n = (self.functions * self.totals[term as usize]).max(1) as f64;
        let w = match term {
            Term::Residual => 1.0,
            Term::Initial => self.weights.initial,
            Term::Boundary => self.weights.boundary,
        };
        (1.0 / n, w)
    }

    fn chunk(
        &self,
        chunk: &Chunk,
        params: &[f64],
        branch: Option<&BranchState>,
        want_grad: bool,
    ) -> Result<ChunkResult, TrainError> {
        self.counters.bump(chunk.term);
        let block = &chunk.block;
        let (fields, cache) = block.forward(&self.arch, params, branch);
        let (scale, weight) = self.scale(chunk.term);
        let mut dfields: Vec<Array2<f64>> =
            if want_grad { fields.iter().map(|f| Array2::zeros(f.raw_dim())).collect() } else { Vec::new() };
        let value = match &chunk.kind {
            ChunkKind::Residual => self.residual_chunk(block, &fields, scale, want_grad.then_some(&mut dfields))?,
            ChunkKind::Conditions(conds) => {
                condition_chunk(block, conds, &fields, scale, weight, want_grad.then_some(&mut dfields))
            }
        };
        if !want_grad {
            return Ok(ChunkResult { value, grad: None, dbranch: None });
        }
        let draw = block.unwrap_grads(dfields);
        let mut grad = vec![0.0; params.len()];
        let mut dbranch = branch.map(|b| Array2::zeros(b.out.raw_dim()));
        raw_fields_backward(&self.arch, params, &block.set, &cache, branch, &draw, &mut grad, dbranch.as_mut());
        Ok(ChunkResult { value, grad: Some(grad), dbranch })
    }

    fn residual_chunk(
        &self,
        block: &FieldBlock,
        fields: &[Array2<f64>],
        scale: f64,
        mut dfields: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<f64, TrainError> {
        let m = block.len();
        let f = self.functions;
        let rows = f * m;
        let nvars = block.set.nvars();
        let coords: Vec<Vec<f64>> = (0..block.points.ncols())
            .map(|i| {
                let col = block.points.column(i);
                (0..rows).map(|r| col[r % m]).collect()
            })
            .collect();
        let mut total = 0.0;
        for res in &self.residuals {
            let lookups: Vec<(usize, usize, f64)> = res
                .requirements
                .iter()
                .map(|k| {
                    let idx = block.set.index_of(&k.multi_index(nvars)).expect("jet set covers every requirement");
                    (k.var, idx, block.set.factorial(idx))
                })
                .collect();
            let derivs: Vec<Vec<f64>> = lookups
                .iter()
                .map(|&(var, idx, fact)| {
                    let field = &fields[var];
                    let mut col = Vec::with_capacity(rows);
                    for fi in 0..f {
                        let row = field.row(fi);
                        col.extend((0..m).map(|p| fact * row[idx * m + p]));
                    }
                    col
                })
                .collect();
            let mut columns: Vec<&[f64]> = coords[..res.coord_count()].iter().map(|c| c.as_slice()).collect();
            columns.extend(derivs.iter().map(|c| c.as_slice()));
            let eval = res.tape.evaluate_batch(&columns)?;
            let r = eval.root_values();
            total += r.iter().map(|v| v * v).sum::<f64>() * scale;
            if let Some(df) = dfields.as_deref_mut() {
                let wrt: Vec<usize> = (0..lookups.len()).map(|j| res.deriv_leaf(j)).collect();
                let partials = gradient_batch(&res.tape, &eval, &wrt);
                for ((var, idx, fact), dcol) in lookups.iter().zip(&partials) {
                    let target = &mut df[*var];
                    for fi in 0..f {
                        let mut row = target.row_mut(fi);
                        for p in 0..m {
                            let k = fi * m + p;
                            row[idx * m + p] += 2.0 * scale * r[k] * dcol[k] * fact;
                        }
                    }
                }
            }
        }
        Ok(total)
    }
}

struct ChunkResult {
    value: f64,
    grad: Option<Vec<f64>>,
    dbranch: Option<Array2<f64>>,
}

fn condition_chunk(
    block: &FieldBlock,
    conditions: &[Condition],
    fields: &[Array2<f64>],
    scale: f64,
    weight: f64,
    mut dfields: Option<&mut Vec<Array2<f64>>>,
) -> f64 {
    let m = block.len();
    let mut total = 0.0;
    for c in conditions {
        let fact = block.set.factorial(c.deriv);
        let field = &fields[c.output];
        for fi in 0..field.nrows() {
            let row = field.row(fi);
            for p in 0..m {
                let e = c.coeff[p] * fact * row[c.deriv * m + p] - c.target[[fi, p]];
                total += e * e * scale;
                if let Some(df) = dfields.as_deref_mut() {
                    df[c.output][[fi, c.deriv * m + p]] += 2.0 * scale * weight * e * c.coeff[p] * fact;
                }
            }
        }
    }
    total
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { epoch: state.step as usize });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Per-epoch losses (recorded before each update), final parameters and
/// timing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub composite: Vec<f64>,
    pub residual: Vec<f64>,
    pub initial: Vec<f64>,
    pub boundary: Vec<f64>,
    pub params: NetworkParams,
    pub elapsed_secs: f64,
    pub seed: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.composite.last().copied()
    }

    /// `epoch,L_residual,L_initial,L_boundary,composite`, one row per epoch.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,L_residual,L_initial,L_boundary,composite")?;
        for e in 0..self.composite.len() {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                e + 1,
                self.residual[e],
                self.initial[e],
                self.boundary[e],
                self.composite[e]
            )?;
        }
        Ok(())
    }
}

/// Runs `config.epochs` full-batch Adam steps from `params`.
pub fn train(problem: &LossProblem, params: NetworkParams, config: &TrainConfig) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let mut values = params.values;
    let mut state = AdamState::new(values.len());
    let mut report = TrainReport {
        composite: Vec::with_capacity(config.epochs),
        residual: Vec::with_capacity(config.epochs),
        initial: Vec::with_capacity(config.epochs),
        boundary: Vec::with_capacity(config.epochs),
        params: NetworkParams { arch: params.arch, values: Vec::new() },
        elapsed_secs: 0.0,
        seed: config.seed,
    };
    let log_every = (config.epochs / 20).max(1);
    for epoch in 0..config.epochs {
        let (c, grad) = problem.loss_and_grad(&values)?;
        let total = composite_loss(&c, problem.weights());
        let (li, lb) = (c.initial.unwrap_or(0.0), c.boundary.unwrap_or(0.0));
        if !total.is_finite() {
            return Err(TrainError::NonFinite { epoch: epoch + 1, residual: c.residual, initial: li, boundary: lb });
        }
        report.composite.push(total);
        report.residual.push(c.residual);
        report.initial.push(li);
        report.boundary.push(lb);
        adam_step(&mut values, &grad, &mut state, config)
            .map_err(|_| TrainError::NonFiniteGradient { epoch: epoch + 1 })?;
        if (epoch + 1) % log_every == 0 {
            log::info!(
                "epoch {:>6}  loss {:.3e}  (residual {:.3e}, initial {:.3e}, boundary {:.3e})",
                epoch + 1,
                total,
                c.residual,
                li,
                lb
            );
        }
    }
    report.params.values = values;
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        let w = LossWeights::default();
        let all = LossComponents { residual: 1.0, initial: Some(1.0), boundary: Some(1.0) };
        assert_eq!(composite_loss(&all, &w), 3.0);
        let w2 = LossWeights { initial: 2.0, boundary: 1.0 };
        let c = LossComponents { residual: 0.0, initial: Some(0.5), boundary: None };
        assert_eq!(composite_loss(&c, &w2), 1.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.2], &mut s, &cfg).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8 && (p[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_square() {
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut w = vec![1.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = 2.0 * w[0];
            adam_step(&mut w, &[g], &mut s, &cfg).unwrap();
        }
        assert!(w[0].abs() < 0.05, "{}", w[0]);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(adam_step(&mut p, &[f64::NAN], &mut s, &TrainConfig::default()).is_err());
    }
}
