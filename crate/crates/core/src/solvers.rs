//! Problem assembly, training entry point, evaluation and time-stepping.
//!
//! A [`ProblemSpec`] describes one of the five problem kinds with either
//! model. [`solve`] checks it, samples every point set, builds the network
//! and the loss, and trains. The returned [`SolutionHandle`] evaluates the
//! surrogate (constraint wrappers included) and, for DeepONets on a time
//! window, rolls the learned operator forward with [`time_step`].

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

use crate::algebra::Algebra;
use crate::eqparser::{parse, CompiledResidual, EvalError, FunctionExpr, ParseError, VarConfig};
use crate::geometry::{
    equispaced, sample_boundary_points, sample_initial_points, sample_interior, sample_sensors, sensor_locations,
    BoundaryKind, BoundarySpec, Domain, DomainKind, Edge, FourierBasis, GeometryError, InitialSpec, SampledFunction,
    SensorConfig, SensorFamily, SensorSet,
};
use crate::jet::{Jet, JetSet};
use crate::models::batched::{branch_forward, point_function_jets, AnsatzJets};
use crate::models::{
    apply_dirichlet_xy_ansatz, apply_time_ansatz, bvp_blend, dirichlet_xy, embedded_width, init_params, trig_cardinals,
    Architecture, ConstraintMode, DeepOnetArchitecture, MlpArchitecture, ModelError, NetworkParams,
};
use crate::training::{
    chunk_points, train, Condition, FieldBlock, LossProblem, LossWeights, Term, TrainConfig, TrainError, TrainReport,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("{model} {problem} with {boundary} boundaries has no {constraint} constraint")]
    Inadmissible { problem: ProblemKind, model: ModelKind, boundary: String, constraint: &'static str },
    #[error("cannot parse '{source_text}': {error}")]
    Parse { source_text: String, error: ParseError },
    #[error("invalid problem: {0}")]
    Spec(String),
    #[error("deeponet evaluation needs sensor values")]
    MissingSensors,
    #[error("sensor row has width {got}, the branch expects {expected}")]
    SensorWidth { expected: usize, got: usize },
    #[error("time-stepping needs a deeponet on a time window with initial data, not {0}")]
    NotTimeStepping(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl SolveError {
    /// Whether training stopped on a non-finite loss or gradient.
    pub fn is_divergence(&self) -> bool {
        matches!(self, SolveError::Train(TrainError::NonFinite { .. } | TrainError::NonFiniteGradient { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    OdeIvp,
    OdeBvp,
    OdeSystemIvp,
    PdeTx,
    PdeXy,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 5] =
        [ProblemKind::OdeIvp, ProblemKind::OdeBvp, ProblemKind::OdeSystemIvp, ProblemKind::PdeTx, ProblemKind::PdeXy];

    pub fn domain_kind(self) -> DomainKind {
        match self {
            ProblemKind::OdeIvp | ProblemKind::OdeBvp | ProblemKind::OdeSystemIvp => DomainKind::OdeTime,
            ProblemKind::PdeTx => DomainKind::EvolutionTx,
            ProblemKind::PdeXy => DomainKind::SpatialXy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::OdeIvp => "ode-ivp",
            ProblemKind::OdeBvp => "ode-bvp",
            ProblemKind::OdeSystemIvp => "ode-system-ivp",
            ProblemKind::PdeTx => "pde-tx",
            ProblemKind::PdeXy => "pde-xy",
        }
    }

    fn has_initial(self) -> bool {
        matches!(self, ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp | ProblemKind::PdeTx)
    }

    fn has_boundary(self) -> bool {
        matches!(self, ProblemKind::OdeBvp | ProblemKind::PdeTx | ProblemKind::PdeXy)
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pinn,
    DeepOnet,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Pinn => "pinn",
            ModelKind::DeepOnet => "deeponet",
        })
    }
}

fn mode_name(mode: ConstraintMode) -> &'static str {
    match mode {
        ConstraintMode::Soft => "soft",
        ConstraintMode::Hard => "hard",
    }
}

/// Whether `mode` is available for this combination. Soft constraints always
/// are; hard ones exist for single ODE initial and boundary value problems,
/// periodic problems and Dirichlet data on an xy rectangle. The model kind
/// does not matter.
pub fn admissible(
    problem: ProblemKind,
    _model: ModelKind,
    boundary: Option<BoundaryKind>,
    mode: ConstraintMode,
) -> bool {
    if mode == ConstraintMode::Soft {
        return true;
    }
    match problem {
        ProblemKind::OdeIvp | ProblemKind::OdeBvp => true,
        ProblemKind::OdeSystemIvp => false,
        ProblemKind::PdeTx => boundary == Some(BoundaryKind::Periodic),
        ProblemKind::PdeXy => matches!(boundary, Some(BoundaryKind::Periodic | BoundaryKind::Dirichlet)),
    }
}

/// Hidden-layer sizes. DeepONets use the same depth and width for branch
/// and trunk; `p` defaults to `units`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub layers: usize,
    pub units: usize,
    pub p: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { layers: 4, units: 40, p: None }
    }
}

/// Everything needed to set up and train one problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub model: ModelKind,
    /// Residual sources, one per dependent variable.
    pub equations: Vec<String>,
    /// Dependent variable names in declaration order.
    pub variables: Vec<String>,
    /// Time order of each equation (for initial data); unused for xy.
    pub orders: Vec<usize>,
    pub domain: Domain,
    pub initial: Option<InitialSpec>,
    pub boundary: Option<BoundarySpec>,
    pub sensors: Option<SensorConfig>,
    pub constraint: ConstraintMode,
    /// Interior collocation count `N_Δ`. Initial and boundary counts live in
    /// their specs.
    pub interior: usize,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

const DEFAULT_NAMES: [&str; 3] = ["u", "v", "w"];

impl ProblemSpec {
    /// Spec with default variable names (`u`, `v`, `w`), first-order
    /// equations, soft constraints and default network and training settings.
    pub fn new(kind: ProblemKind, model: ModelKind, equations: &[&str], domain: Domain) -> Self {
        ProblemSpec {
            kind,
            model,
            equations: equations.iter().map(|s| s.to_string()).collect(),
            variables: DEFAULT_NAMES.iter().take(equations.len()).map(|s| s.to_string()).collect(),
            orders: vec![1; equations.len()],
            domain,
            initial: None,
            boundary: None,
            sensors: None,
            constraint: ConstraintMode::Soft,
            interior: 1000,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }

    pub fn boundary_kind(&self) -> Option<BoundaryKind> {
        self.boundary.as_ref().map(BoundarySpec::kind)
    }

    pub fn coordinates(&self) -> &'static [&'static str] {
        self.domain.kind().coordinates()
    }

    /// Sensor family a DeepONet for this problem is trained on.
    pub fn expected_family(&self) -> SensorFamily {
        match self.kind {
            ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp => {
                SensorFamily::ScalarTuple { width: self.orders.iter().sum() }
            }
            ProblemKind::OdeBvp => SensorFamily::ScalarTuple { width: 2 },
            ProblemKind::PdeTx => {
                let basis = match self.boundary.as_ref() {
                    Some(b) if b.kind() == BoundaryKind::Dirichlet => {
                        let (t0, _) = self.domain.bounds()[0];
                        let (xl, xr) = self.domain.bounds()[1];
                        let left = b.function(0).eval(&[t0, xl]).unwrap_or(f64::NAN);
                        let right = b.function(1).eval(&[t0, xr]).unwrap_or(f64::NAN);
                        FourierBasis::Sine { left, right }
                    }
                    Some(b) if b.kind() == BoundaryKind::Neumann => FourierBasis::Cosine,
                    _ => FourierBasis::Periodic,
                };
                SensorFamily::Fourier { basis, components: self.orders.first().copied().unwrap_or(1) }
            }
            ProblemKind::PdeXy => match self.boundary_kind() {
                Some(BoundaryKind::Periodic) | None => {
                    SensorFamily::ScalarTuple { width: self.sensors.as_ref().map_or(1, |s| s.sensors) }
                }
                _ => SensorFamily::Perimeter,
            },
        }
    }

    fn var_config(&self) -> Result<VarConfig, SolveError> {
        let coords: Vec<String> = self.coordinates().iter().map(|c| c.to_string()).collect();
        VarConfig::new(&self.variables, &coords)
            .map_err(|error| SolveError::Parse { source_text: self.variables.join(", "), error })
    }

    /// Parses and compiles every equation.
    pub fn compile(&self) -> Result<Vec<CompiledResidual>, SolveError> {
        let config = self.var_config()?;
        self.equations
            .iter()
            .map(|src| {
                parse(src, &config)
                    .map(|ast| ast.compile())
                    .map_err(|error| SolveError::Parse { source_text: src.clone(), error })
            })
            .collect()
    }

    /// First problem found, if any.
    pub fn validate(&self) -> Result<(), SolveError> {
        match self.issues().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every problem with the spec, not just the first.
    pub fn issues(&self) -> Vec<SolveError> {
        let mut out = Vec::new();
        let spec_err = |m: String| SolveError::Spec(m);
        let n = self.equations.len();
        if n == 0 {
            out.push(spec_err("at least one equation is required".into()));
        }
        if n > 1 && self.kind != ProblemKind::OdeSystemIvp {
            out.push(spec_err(format!("{} takes a single equation, got {n}", self.kind)));
        }
        if self.variables.len() != n {
            out.push(spec_err(format!("{n} equations need {n} dependent variables, got {}", self.variables.len())));
        }
        if self.orders.len() != n {
            out.push(spec_err(format!("{n} equations need {n} orders, got {}", self.orders.len())));
        }
        if self.orders.contains(&0) {
            out.push(spec_err("equation orders must be positive".into()));
        }
        if self.domain.kind() != self.kind.domain_kind() {
            out.push(spec_err(format!(
                "{} needs a {:?} domain, got {:?}",
                self.kind,
                self.kind.domain_kind(),
                self.domain.kind()
            )));
        }
        if self.variables.len() == n && n > 0 {
            match self.var_config() {
                Ok(config) => {
                    for src in &self.equations {
                        if let Err(error) = parse(src, &config) {
                            out.push(SolveError::Parse { source_text: src.clone(), error });
                        }
                    }
                }
                Err(e) => out.push(e),
            }
        }
        if self.interior == 0 {
            out.push(spec_err("interior point count must be positive".into()));
        }
        match (&self.initial, self.kind.has_initial()) {
            (None, true) => out.push(spec_err(format!("{} needs initial conditions", self.kind))),
            (Some(_), false) => out.push(spec_err(format!("{} takes no initial conditions", self.kind))),
            (Some(init), true) => {
                if init.functions().len() != n {
                    out.push(spec_err(format!(
                        "initial conditions given for {} variables, expected {n}",
                        init.functions().len()
                    )));
                } else {
                    for (v, &order) in self.orders.iter().enumerate() {
                        if init.order(v) != order {
                            out.push(spec_err(format!(
                                "variable '{}' has order {order} but {} initial conditions",
                                self.variables.get(v).map_or("?", |s| s.as_str()),
                                init.order(v)
                            )));
                        }
                    }
                }
            }
            (None, false) => {}
        }
        match (&self.boundary, self.kind.has_boundary()) {
            (None, true) => out.push(spec_err(format!("{} needs boundary conditions", self.kind))),
            (Some(_), false) => out.push(spec_err(format!("{} takes no boundary conditions", self.kind))),
            (Some(b), true) => {
                if self.kind == ProblemKind::OdeBvp && b.kind() != BoundaryKind::Dirichlet {
                    out.push(spec_err("ode-bvp takes endpoint values (dirichlet)".into()));
                }
            }
            (None, false) => {}
        }
        if !admissible(self.kind, self.model, self.boundary_kind(), self.constraint) {
            out.push(SolveError::Inadmissible {
                problem: self.kind,
                model: self.model,
                boundary: self.boundary_kind().map_or("no".into(), |k| format!("{k:?}").to_lowercase()),
                constraint: mode_name(self.constraint),
            });
        } else if self.constraint == ConstraintMode::Hard {
            if let Hard::Time { order } = self.hard_kind() {
                if !(1..=2).contains(&order) {
                    out.push(SolveError::Model(ModelError::UnsupportedOrder(order)));
                }
            }
            if let (Hard::DirichletXy, Some(b)) = (self.hard_kind(), &self.boundary) {
                if let Err(e) = b.check_corners(&self.domain, 1e-9) {
                    out.push(e.into());
                }
            }
        }
        match (self.model, &self.sensors) {
            (ModelKind::DeepOnet, None) => out.push(spec_err("a deeponet needs a sensor configuration".into())),
            (ModelKind::DeepOnet, Some(cfg)) => {
                if let Err(e) = cfg.validate() {
                    out.push(e.into());
                }
                let want = self.expected_family();
                let ok = match (cfg.family, want) {
                    (SensorFamily::ScalarTuple { .. }, SensorFamily::ScalarTuple { .. })
                        if self.kind == ProblemKind::PdeXy =>
                    {
                        true
                    }
                    (
                        SensorFamily::Fourier { basis: a, components: ca },
                        SensorFamily::Fourier { basis: b, components: cb },
                    ) => ca == cb && std::mem::discriminant(&a) == std::mem::discriminant(&b),
                    (a, b) => a == b,
                };
                if !ok {
                    out.push(spec_err(format!(
                        "sensor family {:?} does not fit {}; expected {:?}",
                        cfg.family, self.kind, want
                    )));
                }
                if self.constraint == ConstraintMode::Hard
                    && matches!(self.hard_kind(), Hard::Time { .. } | Hard::DirichletXy)
                    && matches!(self.kind, ProblemKind::PdeTx | ProblemKind::PdeXy)
                    && cfg.sensors < 2 * crate::geometry::FOURIER_MODES
                {
                    out.push(spec_err(format!(
                        "hard constraints interpolate the sensors and need at least {} of them",
                        2 * crate::geometry::FOURIER_MODES
                    )));
                }
            }
            (ModelKind::Pinn, _) => {}
        }
        if self.network.layers == 0 || self.network.units == 0 || self.network.p == Some(0) {
            out.push(spec_err("network layers, units and p must be positive".into()));
        }
        if let Err(e) = self.train.validate() {
            out.push(e.into());
        }
        if let Err(e) = self.weights.validate() {
            out.push(e.into());
        }
        out
    }

    fn hard_kind(&self) -> Hard {
        if self.constraint == ConstraintMode::Soft {
            return Hard::None;
        }
        match self.kind {
            ProblemKind::OdeIvp | ProblemKind::PdeTx => Hard::Time { order: self.orders.first().copied().unwrap_or(1) },
            ProblemKind::OdeBvp => Hard::Blend,
            ProblemKind::PdeXy if self.boundary_kind() == Some(BoundaryKind::Dirichlet) => Hard::DirichletXy,
            _ => Hard::None,
        }
    }

    /// Coordinates passed through a periodic embedding.
    pub fn embedding(&self) -> Vec<Option<(f64, f64)>> {
        let periodic = self.boundary_kind() == Some(BoundaryKind::Periodic);
        let b = self.domain.bounds();
        match self.domain.kind() {
            DomainKind::OdeTime => vec![None],
            DomainKind::EvolutionTx => vec![None, periodic.then_some(b[1])],
            DomainKind::SpatialXy => vec![periodic.then_some(b[0]), periodic.then_some(b[1])],
        }
    }

    /// Network architecture for this spec.
    pub fn architecture(&self) -> Result<Architecture, SolveError> {
        let input = embedded_width(&self.embedding());
        let outputs = self.equations.len();
        let NetworkConfig { layers, units, p } = self.network;
        Ok(match self.model {
            ModelKind::Pinn => Architecture::Mlp(MlpArchitecture::new(input, layers, units, outputs)?),
            ModelKind::DeepOnet => {
                let p = p.unwrap_or(units);
                let width = self.sensors.as_ref().ok_or(SolveError::MissingSensors)?.input_width();
                let branch = MlpArchitecture::new(width, layers, units, p * outputs)?;
                let trunk = MlpArchitecture::new(input, layers, units, p * outputs)?;
                Architecture::DeepOnet(DeepOnetArchitecture::new(branch, trunk, p, outputs)?)
            }
        })
    }

    fn tuple_offset(&self, v: usize) -> usize {
        self.orders[..v].iter().sum()
    }

    /// Branch input for the spec's own initial/boundary data, i.e. the input
    /// function the problem was posed with.
    pub fn default_sensor_row(&self) -> Result<Vec<f64>, SolveError> {
        let cfg = self.sensors.as_ref().ok_or(SolveError::MissingSensors)?;
        let b = self.domain.bounds();
        Ok(match self.kind {
            ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp => {
                let init =
                    self.initial.as_ref().ok_or_else(|| SolveError::Spec("missing initial conditions".into()))?;
                let mut row = Vec::new();
                for fs in init.functions() {
                    for f in fs {
                        row.push(f.eval(&[b[0].0])?);
                    }
                }
                row
            }
            ProblemKind::OdeBvp => {
                let bd = self.boundary.as_ref().ok_or_else(|| SolveError::Spec("missing boundary values".into()))?;
                vec![bd.function(0).eval(&[b[0].0])?, bd.function(1).eval(&[b[0].1])?]
            }
            ProblemKind::PdeTx => {
                let init =
                    self.initial.as_ref().ok_or_else(|| SolveError::Spec("missing initial conditions".into()))?;
                let locs = sensor_locations(cfg, &self.domain);
                let mut row = Vec::new();
                for f in &init.functions()[0] {
                    for &x in locs.column(0) {
                        row.push(f.eval(&[x])?);
                    }
                }
                row
            }
            ProblemKind::PdeXy => match self.boundary.as_ref() {
                Some(bd) if bd.kind() != BoundaryKind::Periodic => {
                    let locs = sensor_locations(cfg, &self.domain);
                    let mut row = Vec::new();
                    for p in locs.rows() {
                        let e = edge_index(&self.domain, p[0], p[1]);
                        row.push(bd.function(e).eval(&[p[0], p[1]])?);
                    }
                    row
                }
                _ => vec![0.5 * (cfg.range.0 + cfg.range.1); cfg.input_width()],
            },
        })
    }
}

/// Index in [`Domain::edges`] order of the xy edge containing `(x, y)`,
/// following the counter-clockwise arc-length convention at corners.
fn edge_index(domain: &Domain, x: f64, y: f64) -> usize {
    let p = domain.perimeter();
    let s = domain.arc_length(x, y);
    let (xl, xr) = domain.bounds()[0];
    let (yl, yu) = domain.bounds()[1];
    let (w, h) = (xr - xl, yu - yl);
    if s < w {
        2
    } else if s < w + h {
        1
    } else if s < 2.0 * w + h {
        3
    } else {
        debug_assert!(s <= p + 1e-9);
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hard {
    None,
    Time { order: usize },
    Blend,
    DirichletXy,
}

/// Jets of several functions per point, as a `K × s·M` block-major array.
fn multi_function_jets<'s>(
    set: &'s JetSet,
    points: &Array2<f64>,
    k: usize,
    f: impl Fn(&[Jet<'s>]) -> Vec<Jet<'s>>,
) -> Array2<f64> {
    let m = points.nrows();
    let mut out = Array2::zeros((k, set.len() * m));
    for (p, row) in points.rows().into_iter().enumerate() {
        let coords: Vec<Jet> = row.iter().enumerate().map(|(i, &v)| Jet::variable(set, i, v)).collect();
        for (r, jet) in f(&coords).iter().enumerate() {
            for (a, c) in jet.coeffs().iter().enumerate() {
                out[[r, a * m + p]] = *c;
            }
        }
    }
    out
}

fn taylor_monomials<A: Algebra>(dt: &A, n: usize) -> Vec<A> {
    let mut out = Vec::with_capacity(n);
    let mut term = dt.lift(1.0);
    for k in 0..n {
        if k > 0 {
            term = term.mul(dt).mul_f(1.0 / k as f64);
        }
        out.push(term.clone());
    }
    out
}

/// Perimeter arc length along edge `i` (left, right, bottom, top) as a
/// function of the free coordinate.
fn edge_arc<A: Algebra>(domain: &Domain, i: usize, x: &A, y: &A) -> A {
    let (xl, xr) = domain.bounds()[0];
    let (yl, yu) = domain.bounds()[1];
    let (w, h) = (xr - xl, yu - yl);
    match i {
        0 => y.neg().add_f(2.0 * w + h + yu),
        1 => y.add_f(w - yl),
        2 => x.add_f(-xl),
        _ => x.neg().add_f(w + h + xr),
    }
}

impl ProblemSpec {
    /// Hard-constraint jets of output `v` on `points`, or `None` when the
    /// output is unconstrained.
    fn ansatz_jets(&self, set: &JetSet, points: &Array2<f64>, v: usize) -> Option<AnsatzJets> {
        let hard = self.hard_kind();
        let b = self.domain.bounds().to_vec();
        let deeponet = self.model == ModelKind::DeepOnet;
        match hard {
            Hard::None => None,
            Hard::Time { order } => {
                let (t0, tf) = self.domain.time().expect("time ansatz on a time domain");
                let mult =
                    point_function_jets(set, points, |c| c[0].add_f(-t0).mul_f(1.0 / (tf - t0)).powi(order as i32));
                let basis = if !deeponet {
                    let init = self.initial.as_ref().expect("validated initial spec");
                    multi_function_jets(set, points, 1, |c| {
                        vec![apply_time_ansatz(&c[0].lift(0.0), c, init, v, &self.domain).expect("validated order")]
                    })
                } else if self.kind == ProblemKind::PdeTx {
                    let ns = self.sensors.as_ref().expect("validated sensors").sensors;
                    let (xl, xr) = b[1];
                    multi_function_jets(set, points, order * ns, |c| {
                        let theta = c[1].add_f(-xl).mul_f(2.0 * PI / (xr - xl));
                        let cards = trig_cardinals(&theta, ns);
                        let mono = taylor_monomials(&c[0].add_f(-t0), order);
                        mono.iter().flat_map(|m| cards.iter().map(move |l| l.mul(m))).collect()
                    })
                } else {
                    multi_function_jets(set, points, order, |c| taylor_monomials(&c[0].add_f(-t0), order))
                };
                Some(AnsatzJets { mult, basis })
            }
            Hard::Blend => {
                let (t0, tf) = b[0];
                fn s_of<'s>(t: &Jet<'s>, t0: f64, tf: f64) -> Jet<'s> {
                    t.add_f(-t0).mul_f(1.0 / (tf - t0))
                }
                let mult = point_function_jets(set, points, |c| {
                    let s = s_of(&c[0], t0, tf);
                    s.mul(&s.neg().add_f(1.0))
                });
                let basis = if deeponet {
                    multi_function_jets(set, points, 2, |c| {
                        let s = s_of(&c[0], t0, tf);
                        vec![s.neg().add_f(1.0), s]
                    })
                } else {
                    let bd = self.boundary.as_ref().expect("validated boundary");
                    let ua = bd.function(0).eval(&[t0]).unwrap_or(f64::NAN);
                    let ub = bd.function(1).eval(&[tf]).unwrap_or(f64::NAN);
                    multi_function_jets(set, points, 1, |c| {
                        let z = c[0].lift(0.0);
                        vec![bvp_blend(&z, &c[0], t0, tf, &z.lift(ua), &z.lift(ub))]
                    })
                };
                Some(AnsatzJets { mult, basis })
            }
            Hard::DirichletXy => {
                let (xl, xr) = b[0];
                let (yl, yu) = b[1];
                let mult = point_function_jets(set, points, |c| {
                    let xs = c[0].add_f(-xl).mul_f(1.0 / (xr - xl));
                    let ys = c[1].add_f(-yl).mul_f(1.0 / (yu - yl));
                    xs.mul(&xs.neg().add_f(1.0)).mul(&ys).mul(&ys.neg().add_f(1.0))
                });
                let bd = self.boundary.as_ref().expect("validated boundary");
                let basis = if deeponet {
                    let ns = self.sensors.as_ref().expect("validated sensors").sensors;
                    let per = self.domain.perimeter();
                    multi_function_jets(set, points, ns, |c| {
                        let z = c[0].lift(0.0);
                        (0..ns)
                            .map(|j| {
                                dirichlet_xy(&z, &c[0], &c[1], b[0], b[1], &|i, x, y| {
                                    let theta = edge_arc(&self.domain, i, x, y).mul_f(2.0 * PI / per);
                                    trig_cardinals(&theta, ns).swap_remove(j)
                                })
                            })
                            .collect()
                    })
                } else {
                    multi_function_jets(set, points, 1, |c| {
                        vec![apply_dirichlet_xy_ansatz(&c[0].lift(0.0), c, bd, &self.domain).expect("validated corners")]
                    })
                };
                Some(AnsatzJets { mult, basis })
            }
        }
    }

    /// Basis coefficients of the hard-constraint offset of output `v`, one
    /// row per input function.
    fn ansatz_coeffs(&self, v: usize, sensor_rows: Option<&Array2<f64>>) -> Array2<f64> {
        match (self.model, sensor_rows) {
            (ModelKind::DeepOnet, Some(rows)) => match (self.hard_kind(), self.kind) {
                (Hard::Time { order }, ProblemKind::OdeIvp) => {
                    let off = self.tuple_offset(v);
                    rows.slice(s![.., off..off + order]).to_owned()
                }
                (Hard::Blend, _) => rows.slice(s![.., 0..2]).to_owned(),
                _ => rows.clone(),
            },
            _ => Array2::ones((1, 1)),
        }
    }

    /// A point block with hard-constraint data for `sensor_rows` attached.
    fn block(&self, set: JetSet, points: Array2<f64>, sensor_rows: Option<&Array2<f64>>) -> FieldBlock {
        let ansatz = (0..self.equations.len())
            .map(|v| {
                self.ansatz_jets(&set, &points, v).map(|jets| {
                    let offsets = jets.offsets(&self.ansatz_coeffs(v, sensor_rows));
                    (jets, offsets)
                })
            })
            .collect();
        FieldBlock::new(set, points, &self.embedding(), ansatz)
    }
}

fn chunks(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size.max(1)).map(|a| a..(a + size).min(n)).collect()
}

fn rows_of(points: &Array2<f64>, r: Range<usize>) -> Array2<f64> {
    points.slice(s![r, ..]).to_owned()
}

/// The loss for a spec, ready to train, plus what went into it.
pub struct Assembly {
    pub problem: LossProblem,
    pub arch: Architecture,
    pub sensors: Option<SensorSet>,
    pub interior: Array2<f64>,
}

/// Samples all point sets and builds the loss for `spec`.
pub fn assemble(spec: &ProblemSpec) -> Result<Assembly, SolveError> {
    spec.validate()?;
    let residuals = spec.compile()?;
    let arch = spec.architecture()?;
    let seed = spec.train.seed;
    let domain = &spec.domain;
    let nvars = domain.dims();
    let sensors = match spec.model {
        ModelKind::DeepOnet => Some(sample_sensors(spec.sensors.as_ref().expect("validated"), domain)?),
        ModelKind::Pinn => None,
    };
    let branch_inputs = sensors.as_ref().map(|s| s.values.clone());
    let functions = branch_inputs.as_ref().map_or(1, |b| b.nrows());
    let size = chunk_points(functions);
    let mut problem = LossProblem::new(arch, residuals.clone(), branch_inputs.clone(), spec.weights)?;

    let interior = sample_interior(domain, spec.interior, seed);
    let required: Vec<Vec<u8>> =
        residuals.iter().flat_map(|r| r.requirements.iter().map(|k| k.multi_index(nvars))).collect();
    let interior_set = JetSet::closure(nvars, required);
    for r in chunks(interior.nrows(), size) {
        problem.add_interior(spec.block(interior_set.clone(), rows_of(&interior, r), branch_inputs.as_ref()));
    }

    if spec.constraint == ConstraintMode::Soft {
        if let Some(init) = &spec.initial {
            add_initial(spec, init, sensors.as_ref(), &mut problem, size)?;
        }
        if let Some(bd) = spec.boundary.as_ref().filter(|b| b.kind() != BoundaryKind::Periodic) {
            add_boundary(spec, bd, sensors.as_ref(), &mut problem, size)?;
        }
    }
    Ok(Assembly { problem, arch, sensors, interior })
}

fn add_initial(
    spec: &ProblemSpec,
    init: &InitialSpec,
    sensors: Option<&SensorSet>,
    problem: &mut LossProblem,
    size: usize,
) -> Result<(), SolveError> {
    let domain = &spec.domain;
    let nvars = domain.dims();
    let points = sample_initial_points(domain, init, spec.train.seed)?;
    let max_order = spec.orders.iter().copied().max().unwrap_or(1);
    let mut top = vec![0u8; nvars];
    top[0] = (max_order - 1) as u8;
    let set = JetSet::closure(nvars, vec![top]);
    let functions = sensors.map_or(1, |s| s.values.nrows());
    for r in chunks(points.nrows(), size) {
        let pts = rows_of(&points, r);
        let m = pts.nrows();
        let mut conditions = Vec::new();
        for v in 0..spec.equations.len() {
            for k in 0..init.order(v) {
                let mut idx = vec![0u8; nvars];
                idx[0] = k as u8;
                let deriv = set.index_of(&idx).expect("closure covers lower time derivatives");
                let mut target = Array2::zeros((functions, m));
                for f in 0..functions {
                    for p in 0..m {
                        target[[f, p]] = match sensors.map(|s| &s.functions[f]) {
                            None => {
                                let arg: Vec<f64> = match domain.kind() {
                                    DomainKind::EvolutionTx => vec![pts[[p, 1]]],
                                    _ => vec![pts[[p, 0]]],
                                };
                                init.functions()[v][k].eval(&arg)?
                            }
                            Some(SampledFunction::Tuple(vals)) => vals[spec.tuple_offset(v) + k],
                            Some(SampledFunction::Series(parts)) => parts[k].value(pts[[p, 1]]),
                        };
                    }
                }
                conditions.push(Condition { output: v, deriv, coeff: vec![1.0; m], target });
            }
        }
        let block = spec.block(set.clone(), pts, sensors.map(|s| &s.values));
        problem.add_conditions(Term::Initial, block, conditions);
    }
    Ok(())
}

fn add_boundary(
    spec: &ProblemSpec,
    bd: &BoundarySpec,
    sensors: Option<&SensorSet>,
    problem: &mut LossProblem,
    size: usize,
) -> Result<(), SolveError> {
    let domain = &spec.domain;
    let nvars = domain.dims();
    let samples = sample_boundary_points(domain, bd, spec.train.seed)?;
    let functions = sensors.map_or(1, |s| s.values.nrows());
    let neumann = bd.kind() == BoundaryKind::Neumann;
    for &edge in domain.edges() {
        let rows: Vec<usize> = (0..samples.len()).filter(|&i| samples.edges[i] == edge).collect();
        let axis = domain.edge_axis(edge);
        let set = if neumann {
            let mut unit = vec![0u8; nvars];
            unit[axis] = 1;
            JetSet::closure(nvars, vec![unit])
        } else {
            JetSet::value_only(nvars)
        };
        let deriv = if neumann { set.unit(axis).expect("unit direction") } else { 0 };
        let sign = if neumann { edge.outward_sign() } else { 1.0 };
        for r in chunks(rows.len(), size) {
            let idx = &rows[r];
            let pts = samples.points.select(Axis(0), idx);
            let m = pts.nrows();
            let mut target = Array2::zeros((functions, m));
            for f in 0..functions {
                for (p, &i) in idx.iter().enumerate() {
                    target[[f, p]] = match sensors.map(|s| &s.functions[f]) {
                        Some(SampledFunction::Tuple(vals)) if spec.kind == ProblemKind::OdeBvp => {
                            vals[if edge == Edge::Left { 0 } else { 1 }]
                        }
                        Some(SampledFunction::Series(parts)) if spec.kind == ProblemKind::PdeXy => {
                            parts[0].value(domain.arc_length(pts[[p, 0]], pts[[p, 1]]))
                        }
                        _ => samples.targets[i],
                    };
                }
            }
            let outputs = spec.equations.len();
            let conditions = (0..outputs)
                .map(|v| Condition { output: v, deriv, coeff: vec![sign; m], target: target.clone() })
                .collect();
            let block = spec.block(set.clone(), pts, sensors.map(|s| &s.values));
            problem.add_conditions(Term::Boundary, block, conditions);
        }
    }
    Ok(())
}

/// A trained (or loaded) surrogate.
#[derive(Debug, Clone)]
pub struct SolutionHandle {
    pub spec: ProblemSpec,
    pub params: NetworkParams,
    pub report: Option<TrainReport>,
    /// Loss-term evaluation counts during training: residual, initial, boundary.
    pub term_evaluations: [usize; 3],
}

/// Checks `spec`, builds and trains the model.
pub fn solve(spec: &ProblemSpec) -> Result<SolutionHandle, SolveError> {
    let assembly = assemble(spec)?;
    let init = init_params(assembly.arch, spec.train.seed);
    let report = train(&assembly.problem, init, &spec.train)?;
    let c = assembly.problem.counters();
    Ok(SolutionHandle {
        spec: spec.clone(),
        params: report.params.clone(),
        report: Some(report),
        term_evaluations: [c.residual(), c.initial(), c.boundary()],
    })
}

const EVAL_CHUNK: usize = 4096;

impl SolutionHandle {
    /// Handle around previously trained parameters.
    pub fn from_params(spec: ProblemSpec, params: NetworkParams) -> Result<Self, SolveError> {
        spec.validate()?;
        let arch = spec.architecture()?;
        if arch != params.arch {
            return Err(SolveError::Spec("parameters do not match the spec's architecture".into()));
        }
        Ok(SolutionHandle { spec, params, report: None, term_evaluations: [0; 3] })
    }

    fn sensor_rows(&self, sensor_values: Option<&[f64]>) -> Result<Option<Array2<f64>>, SolveError> {
        match (&self.params.arch, sensor_values) {
            (Architecture::Mlp(_), _) => Ok(None),
            (Architecture::DeepOnet(_), None) => Err(SolveError::MissingSensors),
            (Architecture::DeepOnet(a), Some(v)) => {
                if v.len() != a.branch.input {
                    return Err(SolveError::SensorWidth { expected: a.branch.input, got: v.len() });
                }
                Ok(Some(Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")))
            }
        }
    }

    /// Wrapped output jets on `points` for a single input function:
    /// one `s·M` row per output.
    fn jets(&self, set: &JetSet, points: &Array2<f64>, rows: Option<&Array2<f64>>) -> Vec<Vec<f64>> {
        let block = self.spec.block(set.clone(), points.clone(), rows);
        let branch = rows.and_then(|r| branch_forward(&self.params.arch, &self.params.values, r));
        let (fields, _) = block.forward(&self.params.arch, &self.params.values, branch.as_ref());
        fields.into_iter().map(|f| f.row(0).to_vec()).collect()
    }

    /// Surrogate values (`N × L`) at `points`, with constraint wrappers.
    pub fn evaluate(&self, points: &Array2<f64>, sensor_values: Option<&[f64]>) -> Result<Array2<f64>, SolveError> {
        let rows = self.sensor_rows(sensor_values)?;
        let outputs = self.spec.equations.len();
        let set = JetSet::value_only(self.spec.domain.dims());
        let mut out = Array2::zeros((points.nrows(), outputs));
        for r in chunks(points.nrows(), EVAL_CHUNK) {
            let start = r.start;
            let pts = rows_of(points, r);
            for (l, col) in self.jets(&set, &pts, rows.as_ref()).into_iter().enumerate() {
                for (p, v) in col.into_iter().enumerate() {
                    out[[start + p, l]] = v;
                }
            }
        }
        Ok(out)
    }

    /// `∂^α u_l` (`N × L`) at `points`, e.g. `alpha = [1, 0]` for `u_t` on a
    /// tx domain.
    pub fn evaluate_derivative(
        &self,
        points: &Array2<f64>,
        sensor_values: Option<&[f64]>,
        alpha: &[u8],
    ) -> Result<Array2<f64>, SolveError> {
        let dims = self.spec.domain.dims();
        if alpha.len() != dims {
            return Err(SolveError::Spec(format!(
                "derivative index has {} entries for {dims} coordinates",
                alpha.len()
            )));
        }
        let rows = self.sensor_rows(sensor_values)?;
        let set = JetSet::closure(dims, vec![alpha.to_vec()]);
        let i = set.index_of(alpha).expect("index is in its own closure");
        let fact = set.factorial(i);
        let outputs = self.spec.equations.len();
        let mut out = Array2::zeros((points.nrows(), outputs));
        for r in chunks(points.nrows(), EVAL_CHUNK) {
            let (start, m) = (r.start, r.len());
            let pts = rows_of(points, r);
            for (l, jets) in self.jets(&set, &pts, rows.as_ref()).into_iter().enumerate() {
                for p in 0..m {
                    out[[start + p, l]] = fact * jets[i * m + p];
                }
            }
        }
        Ok(out)
    }

    /// Values on a grid with the analytic solution alongside.
    pub fn evaluate_error(
        &self,
        analytic: &[String],
        resolution: &[usize],
        sensor_values: Option<&[f64]>,
    ) -> Result<SolutionField, SolveError> {
        let points = grid_points(&self.spec.domain, resolution)?;
        let predicted = self.evaluate(&points, sensor_values)?;
        let mut field = SolutionField::new(self.coord_names(), self.spec.variables.clone(), points, predicted);
        field.attach_analytic(&parse_analytic(analytic, self.spec.coordinates())?)?;
        Ok(field)
    }

    fn coord_names(&self) -> Vec<String> {
        self.spec.coordinates().iter().map(|s| s.to_string()).collect()
    }
}

/// Parses analytic-solution expressions over `coords`.
pub fn parse_analytic<S: AsRef<str>>(sources: &[S], coords: &[&str]) -> Result<Vec<FunctionExpr>, SolveError> {
    sources
        .iter()
        .map(|s| {
            FunctionExpr::parse(s.as_ref(), coords)
                .map_err(|error| SolveError::Parse { source_text: s.as_ref().to_string(), error })
        })
        .collect()
}

/// Tensor grid with `resolution[i]` equispaced values (ends included) along
/// axis `i`; the first axis varies slowest.
pub fn grid_points(domain: &Domain, resolution: &[usize]) -> Result<Array2<f64>, SolveError> {
    let dims = domain.dims();
    if resolution.len() != dims || resolution.contains(&0) {
        return Err(SolveError::Spec(format!("grid needs {dims} positive resolutions, got {resolution:?}")));
    }
    let axes: Vec<Vec<f64>> = domain
        .bounds()
        .iter()
        .zip(resolution)
        .map(|(&(lo, hi), &n)| if n == 1 { vec![lo] } else { equispaced(n, lo, hi, false) })
        .collect();
    let total: usize = resolution.iter().product();
    let mut out = Array2::zeros((total, dims));
    for i in 0..total {
        let mut rem = i;
        for a in (0..dims).rev() {
            out[[i, a]] = axes[a][rem % resolution[a]];
            rem /= resolution[a];
        }
    }
    Ok(out)
}

/// Predicted values on a point set, optionally with analytic values.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub coords: Vec<String>,
    pub variables: Vec<String>,
    pub points: Array2<f64>,
    pub predicted: Array2<f64>,
    pub analytic: Option<Array2<f64>>,
    /// Rollout window of each row, for time-stepped fields.
    pub window: Option<Vec<usize>>,
    /// Non-fatal notes, such as fed-back states outside the sensor range.
    pub warnings: Vec<String>,
}

impl SolutionField {
    pub fn new(coords: Vec<String>, variables: Vec<String>, points: Array2<f64>, predicted: Array2<f64>) -> Self {
        SolutionField { coords, variables, points, predicted, analytic: None, window: None, warnings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    /// Evaluates one analytic expression per variable at every point.
    pub fn attach_analytic(&mut self, exprs: &[FunctionExpr]) -> Result<(), SolveError> {
        if exprs.len() != self.variables.len() {
            return Err(SolveError::Spec(format!(
                "{} analytic expressions for {} variables",
                exprs.len(),
                self.variables.len()
            )));
        }
        let mut a = Array2::zeros(self.predicted.raw_dim());
        for (i, p) in self.points.rows().into_iter().enumerate() {
            let p = p.to_vec();
            for (l, e) in exprs.iter().enumerate() {
                a[[i, l]] = e.eval(&p)?;
            }
        }
        self.analytic = Some(a);
        Ok(())
    }

    pub fn squared_error(&self) -> Option<Array2<f64>> {
        self.analytic.as_ref().map(|a| (&self.predicted - a).mapv(|d| d * d))
    }

    /// Mean squared error over all points and variables.
    pub fn mse(&self) -> Option<f64> {
        self.squared_error().map(|e| e.mean().unwrap_or(0.0))
    }

    /// Mean squared error of each variable.
    pub fn mse_per_variable(&self) -> Option<Vec<f64>> {
        self.squared_error().map(|e| e.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default())
    }

    pub fn max_abs_error(&self) -> Option<f64> {
        self.squared_error().map(|e| e.iter().fold(0.0_f64, |m, v| m.max(v.sqrt())))
    }

    /// CSV with coordinate columns, an optional window column, then per
    /// variable the prediction and, when available, `_exact` and `_sqerr`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header: Vec<String> = self.coords.clone();
        if self.window.is_some() {
            header.push("window".into());
        }
        for v in &self.variables {
            header.push(v.clone());
            if self.analytic.is_some() {
                header.push(format!("{v}_exact"));
                header.push(format!("{v}_sqerr"));
            }
        }
        writeln!(out, "{}", header.join(","))?;
        let sq = self.squared_error();
        for i in 0..self.len() {
            let mut cells: Vec<String> = self.points.row(i).iter().map(|v| format!("{v:e}")).collect();
            if let Some(w) = &self.window {
                cells.push(w[i].to_string());
            }
            for l in 0..self.variables.len() {
                cells.push(format!("{:e}", self.predicted[[i, l]]));
                if let (Some(a), Some(e)) = (&self.analytic, &sq) {
                    cells.push(format!("{:e}", a[[i, l]]));
                    cells.push(format!("{:e}", e[[i, l]]));
                }
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// A learned map from a window's initial state to the solution on that
/// window, as used by [`rollout`].
pub trait WindowOperator {
    /// Time interval of one window.
    fn window(&self) -> (f64, f64);
    /// Solution values (`N × L`) at window-local `points` for `state`.
    fn evaluate_window(&self, points: &Array2<f64>, state: &[f64]) -> Result<Array2<f64>, SolveError>;
    /// State at the end of the window, in the same layout as `state`.
    fn end_state(&self, state: &[f64]) -> Result<Vec<f64>, SolveError>;
    /// Range the operator was trained on, if any.
    fn state_range(&self) -> Option<(f64, f64)> {
        None
    }
}

/// Sampling of each window for [`rollout`].
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    /// Time samples per window, ends included.
    pub times: usize,
    /// Spatial samples (empty for ODEs).
    pub space: Vec<f64>,
}

/// Applies `op` `n_steps` times from `initial`, feeding each window's end
/// state into the next. Later windows drop their first time sample, which
/// duplicates the previous window's last one.
pub fn rollout<O: WindowOperator>(
    op: &O,
    initial: &[f64],
    n_steps: usize,
    grid: &WindowGrid,
    coords: Vec<String>,
    variables: Vec<String>,
) -> Result<SolutionField, SolveError> {
    if n_steps == 0 {
        return Err(SolveError::Spec("time-stepping needs at least one step".into()));
    }
    if grid.times < 2 {
        return Err(SolveError::Spec("each window needs at least two time samples".into()));
    }
    let (t0, tf) = op.window();
    let span = tf - t0;
    let local_t = equispaced(grid.times, t0, tf, false);
    let dims = if grid.space.is_empty() { 1 } else { 2 };
    let mut all_points: Vec<f64> = Vec::new();
    let mut all_values: Vec<f64> = Vec::new();
    let mut windows = Vec::new();
    let mut warnings = Vec::new();
    let mut state = initial.to_vec();
    let mut outputs = 0;
    for w in 0..n_steps {
        let times = if w == 0 { &local_t[..] } else { &local_t[1..] };
        let mut pts = Vec::new();
        for &t in times {
            if grid.space.is_empty() {
                pts.push(t);
            } else {
                for &x in &grid.space {
                    pts.push(t);
                    pts.push(x);
                }
            }
        }
        let n = pts.len() / dims;
        let local = Array2::from_shape_vec((n, dims), pts).expect("grid shape");
        let values = op.evaluate_window(&local, &state)?;
        outputs = values.ncols();
        for (i, row) in local.rows().into_iter().enumerate() {
            all_points.push(row[0] + w as f64 * span);
            all_points.extend(row.iter().skip(1));
            all_values.extend(values.row(i).iter());
            windows.push(w);
        }
        if w + 1 < n_steps {
            state = op.end_state(&state)?;
            if let Some((lo, hi)) = op.state_range() {
                let outside = state.iter().filter(|v| !(**v >= lo && **v <= hi)).count();
                if outside > 0 {
                    let msg =
                        format!("window {}: {outside} state value(s) outside the trained range [{lo}, {hi}]", w + 1);
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
    }
    let n = windows.len();
    let points = Array2::from_shape_vec((n, dims), all_points).expect("points shape");
    let predicted = Array2::from_shape_vec((n, outputs), all_values).expect("values shape");
    let mut field = SolutionField::new(coords, variables, points, predicted);
    field.window = Some(windows);
    field.warnings = warnings;
    Ok(field)
}

impl SolutionHandle {
    fn check_time_stepping(&self) -> Result<(), SolveError> {
        let ok = self.spec.model == ModelKind::DeepOnet
            && matches!(self.spec.kind, ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp | ProblemKind::PdeTx);
        if ok {
            Ok(())
        } else {
            Err(SolveError::NotTimeStepping(format!("{} {}", self.spec.model, self.spec.kind)))
        }
    }

    /// Rolls the operator forward from the spec's own initial data over
    /// `n_steps` windows, `times` samples per window and `space` samples
    /// along x for tx problems.
    pub fn time_step(&self, n_steps: usize, times: usize, space: usize) -> Result<SolutionField, SolveError> {
        self.check_time_stepping()?;
        let initial = self.spec.default_sensor_row()?;
        let space = if self.spec.kind == ProblemKind::PdeTx {
            let (xl, xr) = self.spec.domain.bounds()[1];
            if space == 0 {
                return Err(SolveError::Spec("time-stepping a tx problem needs spatial samples".into()));
            }
            if space == 1 {
                vec![xl]
            } else {
                equispaced(space, xl, xr, false)
            }
        } else {
            Vec::new()
        };
        rollout(self, &initial, n_steps, &WindowGrid { times, space }, self.coord_names(), self.spec.variables.clone())
    }
}

impl WindowOperator for SolutionHandle {
    fn window(&self) -> (f64, f64) {
        self.spec.domain.time().expect("time-stepping handles have a time axis")
    }

    fn evaluate_window(&self, points: &Array2<f64>, state: &[f64]) -> Result<Array2<f64>, SolveError> {
        self.evaluate(points, Some(state))
    }

    fn end_state(&self, state: &[f64]) -> Result<Vec<f64>, SolveError> {
        self.check_time_stepping()?;
        let rows = self.sensor_rows(Some(state))?;
        let (_, tf) = self.window();
        let nvars = self.spec.domain.dims();
        let max_order = self.spec.orders.iter().copied().max().unwrap_or(1);
        let mut top = vec![0u8; nvars];
        top[0] = (max_order - 1) as u8;
        let set = JetSet::closure(nvars, vec![top]);
        let index = |k: usize| {
            let mut idx = vec![0u8; nvars];
            idx[0] = k as u8;
            let i = set.index_of(&idx).expect("time derivative in closure");
            (i, set.factorial(i))
        };
        match self.spec.kind {
            ProblemKind::PdeTx => {
                let cfg = self.spec.sensors.as_ref().ok_or(SolveError::MissingSensors)?;
                let locs = sensor_locations(cfg, &self.spec.domain);
                let ns = locs.nrows();
                let mut pts = Array2::zeros((ns, 2));
                for j in 0..ns {
                    pts[[j, 0]] = tf;
                    pts[[j, 1]] = locs[[j, 0]];
                }
                let jets = self.jets(&set, &pts, rows.as_ref());
                let mut out = Vec::with_capacity(max_order * ns);
                for k in 0..self.spec.orders[0] {
                    let (i, fact) = index(k);
                    out.extend((0..ns).map(|j| fact * jets[0][i * ns + j]));
                }
                Ok(out)
            }
            _ => {
                let pts = Array2::from_elem((1, 1), tf);
                let jets = self.jets(&set, &pts, rows.as_ref());
                let mut out = Vec::new();
                for (v, &order) in self.spec.orders.iter().enumerate() {
                    for k in 0..order {
                        let (i, fact) = index(k);
                        out.push(fact * jets[v][i]);
                    }
                }
                Ok(out)
            }
        }
    }

    fn state_range(&self) -> Option<(f64, f64)> {
        self.spec.sensors.as_ref().map(|s| s.range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major_with_first_axis_slowest() {
        let d = Domain::tx((0.0, 1.0), (-1.0, 1.0)).unwrap();
        let g = grid_points(&d, &[2, 3]).unwrap();
        assert_eq!(g.nrows(), 6);
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.row(3).to_vec(), vec![1.0, -1.0]);
    }

    #[test]
    fn edge_index_follows_arc_length() {
        let d = Domain::xy((-1.0, 1.0), (-1.0, 1.0)).unwrap();
        assert_eq!(edge_index(&d, 0.0, -1.0), 2);
        assert_eq!(edge_index(&d, 1.0, 0.0), 1);
        assert_eq!(edge_index(&d, 0.0, 1.0), 3);
        assert_eq!(edge_index(&d, -1.0, 0.0), 0);
    }

    #[test]
    fn edge_arc_matches_domain_arc_length() {
        let d = Domain::xy((-1.0, 2.0), (0.5, 1.5)).unwrap();
        let probes = [(0, -1.0, 0.8), (1, 2.0, 0.9), (2, 0.3, 0.5), (3, 0.3, 1.5)];
        for (i, x, y) in probes {
            assert!((edge_arc(&d, i, &x, &y) - d.arc_length(x, y)).abs() < 1e-12, "edge {i}");
        }
    }

    #[test]
    fn constant_offset_gives_squared_mse() {
        let pts = Array2::zeros((4, 1));
        let mut f = SolutionField::new(vec!["t".into()], vec!["u".into()], pts, Array2::from_elem((4, 1), 1.5));
        f.attach_analytic(&[FunctionExpr::parse("1", &["t"]).unwrap()]).unwrap();
        assert!((f.mse().unwrap() - 0.25).abs() < 1e-15);
    }
}
