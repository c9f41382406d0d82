//! Rectangular domains, initial/boundary specifications and every sampler
//! that feeds training: Latin hypercube collocation, initial slices,
//! labelled boundary points and DeepONet input functions.
//!
//! All randomness comes from ChaCha8 seeded with the user seed, with a
//! separate stream per sampler (see [`Stream`]), so changing e.g. the
//! number of boundary points never perturbs the interior points.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::eqparser::{EvalError, FunctionExpr};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("interval for {axis} must have positive length, got [{lo}, {hi}]")]
    EmptyInterval { axis: &'static str, lo: f64, hi: f64 },
    #[error("{op} is not defined on a {kind:?} domain")]
    WrongDomain { op: &'static str, kind: DomainKind },
    #[error("periodic boundaries have no boundary points; periodicity is built into the network")]
    PeriodicBoundary,
    #[error("boundary spec needs 1 or {expected} edge functions, got {got}")]
    EdgeCount { expected: usize, got: usize },
    #[error("edge functions disagree at corner ({x}, {y}) by {gap:e}")]
    CornerMismatch { x: f64, y: f64, gap: f64 },
    #[error("invalid sensor configuration: {0}")]
    Sensors(String),
    #[error("point count for {0} must be positive")]
    ZeroCount(&'static str),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    OdeTime,
    EvolutionTx,
    SpatialXy,
}

impl DomainKind {
    /// Names of the independent variables, in coordinate order.
    pub fn coordinates(self) -> &'static [&'static str] {
        match self {
            DomainKind::OdeTime => &["t"],
            DomainKind::EvolutionTx => &["t", "x"],
            DomainKind::SpatialXy => &["x", "y"],
        }
    }

    /// Coordinates a boundary/initial function of this domain depends on.
    pub fn spatial(self) -> &'static [&'static str] {
        match self {
            DomainKind::OdeTime => &["t"],
            DomainKind::EvolutionTx => &["x"],
            DomainKind::SpatialXy => &["x", "y"],
        }
    }

    pub fn has_time(self) -> bool {
        self != DomainKind::SpatialXy
    }
}

/// A closed box `[t0, tf]`, `[t0, tf] × [xl, xr]` or `[xl, xr] × [yl, yu]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    kind: DomainKind,
    bounds: Vec<(f64, f64)>,
}

impl Domain {
    fn checked(kind: DomainKind, bounds: Vec<(f64, f64)>) -> Result<Self, GeometryError> {
        for (&(lo, hi), axis) in bounds.iter().zip(kind.coordinates()) {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(GeometryError::EmptyInterval { axis, lo, hi });
            }
        }
        Ok(Domain { kind, bounds })
    }

    pub fn ode(t0: f64, tf: f64) -> Result<Self, GeometryError> {
        Domain::checked(DomainKind::OdeTime, vec![(t0, tf)])
    }

    pub fn tx(t: (f64, f64), x: (f64, f64)) -> Result<Self, GeometryError> {
        Domain::checked(DomainKind::EvolutionTx, vec![t, x])
    }

    pub fn xy(x: (f64, f64), y: (f64, f64)) -> Result<Self, GeometryError> {
        Domain::checked(DomainKind::SpatialXy, vec![x, y])
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    /// Bounds in coordinate order.
    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn time(&self) -> Option<(f64, f64)> {
        self.kind.has_time().then(|| self.bounds[0])
    }

    /// Index of the coordinate that carries spatial axis `x` (tx and xy) or
    /// time (ODE).
    pub fn first_axis(&self) -> usize {
        match self.kind {
            DomainKind::EvolutionTx => 1,
            _ => 0,
        }
    }

    /// Edges of the domain that carry boundary conditions, in the order edge
    /// functions are listed.
    pub fn edges(&self) -> &'static [Edge] {
        match self.kind {
            DomainKind::SpatialXy => &[Edge::Left, Edge::Right, Edge::Bottom, Edge::Top],
            _ => &[Edge::Left, Edge::Right],
        }
    }

    /// Coordinate index held fixed on `edge`.
    pub fn edge_axis(&self, edge: Edge) -> usize {
        match edge {
            Edge::Left | Edge::Right => self.first_axis(),
            Edge::Bottom | Edge::Top => 1,
        }
    }

    /// Value of the fixed coordinate on `edge`.
    pub fn edge_value(&self, edge: Edge) -> f64 {
        let (lo, hi) = self.bounds[self.edge_axis(edge)];
        if edge.outward_sign() < 0.0 {
            lo
        } else {
            hi
        }
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }

    /// Length of the boundary of an xy domain.
    pub fn perimeter(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| 2.0 * (hi - lo)).sum()
    }

    /// Counter-clockwise arc length from `(xl, yl)` to the boundary point
    /// `(x, y)` of an xy domain.
    pub fn arc_length(&self, x: f64, y: f64) -> f64 {
        let (xl, xr) = self.bounds[0];
        let (yl, yu) = self.bounds[1];
        let (w, h) = (xr - xl, yu - yl);
        let tol = 1e-12 * (w + h);
        if (y - yl).abs() <= tol {
            x - xl
        } else if (x - xr).abs() <= tol {
            w + (y - yl)
        } else if (y - yu).abs() <= tol {
            w + h + (xr - x)
        } else {
            2.0 * w + h + (yu - y)
        }
    }

    /// Inverse of [`Domain::arc_length`].
    pub fn perimeter_point(&self, s: f64) -> (f64, f64) {
        let (xl, xr) = self.bounds[0];
        let (yl, yu) = self.bounds[1];
        let (w, h) = (xr - xl, yu - yl);
        let s = s.rem_euclid(2.0 * (w + h));
        if s < w {
            (xl + s, yl)
        } else if s < w + h {
            (xr, yl + s - w)
        } else if s < 2.0 * w + h {
            (xr - (s - w - h), yu)
        } else {
            (xl, yu - (s - 2.0 * w - h))
        }
    }
}

/// A face of the domain. For ODE and tx domains only `Left`/`Right` exist
/// (t = t0/tf and x = xl/xr respectively).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

impl Edge {
    /// Sign of the outward normal along the edge's fixed axis.
    pub fn outward_sign(self) -> f64 {
        match self {
            Edge::Left | Edge::Bottom => -1.0,
            Edge::Right | Edge::Top => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Edge::Left => "left",
            Edge::Right => "right",
            Edge::Bottom => "bottom",
            Edge::Top => "top",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Periodic,
    Dirichlet,
    Neumann,
}

/// Boundary conditions. Edge functions are expressions over the domain's
/// coordinates ([`DomainKind::coordinates`]); Neumann functions give the
/// outward normal derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    kind: BoundaryKind,
    functions: Vec<FunctionExpr>,
    count: usize,
}

impl BoundarySpec {
    pub fn periodic() -> Self {
        BoundarySpec { kind: BoundaryKind::Periodic, functions: Vec::new(), count: 0 }
    }

    /// One function per edge of `domain` (in [`Domain::edges`] order) or a
    /// single function shared by all edges.
    pub fn new(
        kind: BoundaryKind,
        domain: &Domain,
        functions: Vec<FunctionExpr>,
        count: usize,
    ) -> Result<Self, GeometryError> {
        if kind == BoundaryKind::Periodic {
            return Ok(BoundarySpec::periodic());
        }
        let expected = domain.edges().len();
        if functions.len() != 1 && functions.len() != expected {
            return Err(GeometryError::EdgeCount { expected, got: functions.len() });
        }
        if count == 0 {
            return Err(GeometryError::ZeroCount("boundary points"));
        }
        Ok(BoundarySpec { kind, functions, count })
    }

    pub fn dirichlet(domain: &Domain, functions: Vec<FunctionExpr>, count: usize) -> Result<Self, GeometryError> {
        BoundarySpec::new(BoundaryKind::Dirichlet, domain, functions, count)
    }

    pub fn neumann(domain: &Domain, functions: Vec<FunctionExpr>, count: usize) -> Result<Self, GeometryError> {
        BoundarySpec::new(BoundaryKind::Neumann, domain, functions, count)
    }

    pub fn kind(&self) -> BoundaryKind {
        self.kind
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn functions(&self) -> &[FunctionExpr] {
        &self.functions
    }

    /// Condition function for the `i`-th edge.
    pub fn function(&self, i: usize) -> &FunctionExpr {
        if self.functions.len() == 1 {
            &self.functions[0]
        } else {
            &self.functions[i]
        }
    }

    /// Checks that adjacent Dirichlet edge functions of an xy domain agree
    /// at the four corners.
    pub fn check_corners(&self, domain: &Domain, tol: f64) -> Result<(), GeometryError> {
        if domain.kind() != DomainKind::SpatialXy || self.kind != BoundaryKind::Dirichlet {
            return Ok(());
        }
        let (xl, xr) = domain.bounds()[0];
        let (yl, yu) = domain.bounds()[1];
        let corners = [(xl, yl, 0, 2), (xr, yl, 1, 2), (xl, yu, 0, 3), (xr, yu, 1, 3)];
        for (x, y, a, b) in corners {
            let gap = (self.function(a).eval(&[x, y])? - self.function(b).eval(&[x, y])?).abs();
            if gap.is_nan() || gap > tol {
                return Err(GeometryError::CornerMismatch { x, y, gap });
            }
        }
        Ok(())
    }
}

/// Initial conditions: `functions[v][k]` is `∂^k v/∂t^k` at `t0`, a
/// function of `x` for tx problems and a constant for ODEs.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialSpec {
    functions: Vec<Vec<FunctionExpr>>,
    count: usize,
}

impl InitialSpec {
    pub fn new(functions: Vec<Vec<FunctionExpr>>, count: usize) -> Result<Self, GeometryError> {
        if count == 0 {
            return Err(GeometryError::ZeroCount("initial points"));
        }
        Ok(InitialSpec { functions, count })
    }

    /// Constant initial values for an ODE system, e.g. `[[0.5, 1.0], [2.0]]`.
    pub fn values(values: &[Vec<f64>]) -> Self {
        let functions = values.iter().map(|v| v.iter().map(|&c| FunctionExpr::constant(c, &["t"])).collect()).collect();
        InitialSpec { functions, count: 1 }
    }

    pub fn functions(&self) -> &[Vec<FunctionExpr>] {
        &self.functions
    }

    /// Temporal order of variable `v` (number of supplied conditions).
    pub fn order(&self, v: usize) -> usize {
        self.functions[v].len()
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// Independent random streams, one per sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Interior = 1,
    Initial = 2,
    Boundary = 3,
    Sensors = 4,
    Parameters = 5,
    Probe = 6,
}

/// The generator for `stream` under `seed`.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `n` points with exactly one point per stratum `[lo + i·h, lo + (i+1)·h)`
/// on every axis.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], seed: u64) -> Array2<f64> {
    lhs_with(n, bounds, &mut rng_for(seed, Stream::Interior))
}

fn lhs_with(n: usize, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((n, bounds.len()));
    let mut strata: Vec<usize> = (0..n).collect();
    for (axis, &(lo, hi)) in bounds.iter().enumerate() {
        strata.shuffle(rng);
        let h = (hi - lo) / n as f64;
        for (row, &k) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            // Clamp guards the top stratum against rounding past `hi`.
            out[[row, axis]] = (lo + (k as f64 + u) * h).min(hi);
        }
    }
    out
}

/// Interior collocation points for the whole domain.
pub fn sample_interior(domain: &Domain, n: usize, seed: u64) -> Array2<f64> {
    latin_hypercube(n, domain.bounds(), seed)
}

/// Points on the initial slice `t = t0`.
pub fn sample_initial_points(domain: &Domain, spec: &InitialSpec, seed: u64) -> Result<Array2<f64>, GeometryError> {
    match domain.kind() {
        DomainKind::OdeTime => Ok(Array2::from_elem((1, 1), domain.bounds()[0].0)),
        DomainKind::EvolutionTx => {
            let mut rng = rng_for(seed, Stream::Initial);
            let xs = lhs_with(spec.count(), &domain.bounds()[1..], &mut rng);
            let mut out = Array2::zeros((spec.count(), 2));
            for i in 0..spec.count() {
                out[[i, 0]] = domain.bounds()[0].0;
                out[[i, 1]] = xs[[i, 0]];
            }
            Ok(out)
        }
        kind => Err(GeometryError::WrongDomain { op: "initial sampling", kind }),
    }
}

/// Boundary points with their edge labels and condition targets (values for
/// Dirichlet, outward normal derivatives for Neumann).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySamples {
    pub points: Array2<f64>,
    pub edges: Vec<Edge>,
    pub targets: Vec<f64>,
}

impl BoundarySamples {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub fn sample_boundary_points(
    domain: &Domain,
    spec: &BoundarySpec,
    seed: u64,
) -> Result<BoundarySamples, GeometryError> {
    if spec.kind() == BoundaryKind::Periodic {
        return Err(GeometryError::PeriodicBoundary);
    }
    let mut rng = rng_for(seed, Stream::Boundary);
    let dims = domain.dims();
    let per_edge = if domain.kind() == DomainKind::OdeTime { 1 } else { spec.count() };
    let edges = domain.edges();
    let mut points = Array2::zeros((per_edge * edges.len(), dims));
    let mut labels = Vec::with_capacity(points.nrows());
    let mut targets = Vec::with_capacity(points.nrows());
    for (e, &edge) in edges.iter().enumerate() {
        let fixed = domain.edge_axis(edge);
        let free: Vec<(f64, f64)> = (0..dims).filter(|&a| a != fixed).map(|a| domain.bounds()[a]).collect();
        let along = lhs_with(per_edge, &free, &mut rng);
        for i in 0..per_edge {
            let row = e * per_edge + i;
            let mut k = 0;
            for a in 0..dims {
                points[[row, a]] = if a == fixed {
                    domain.edge_value(edge)
                } else {
                    k += 1;
                    along[[i, k - 1]]
                };
            }
            let p: Vec<f64> = points.row(row).to_vec();
            targets.push(spec.function(e).eval(&p)?);
            labels.push(edge);
        }
    }
    Ok(BoundarySamples { points, edges: labels, targets })
}

/// `n` equispaced points on `[lo, hi]`; a periodic grid omits `hi`.
pub fn equispaced(n: usize, lo: f64, hi: f64, periodic: bool) -> Vec<f64> {
    if n == 1 {
        return vec![if periodic { lo } else { 0.5 * (lo + hi) }];
    }
    let steps = if periodic { n } else { n - 1 };
    (0..n).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect()
}

/// Basis of the random series used for DeepONet input functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FourierBasis {
    /// `a0 + Σ a_k cos kθ + b_k sin kθ`; periodic on the interval.
    Periodic,
    /// Straight line from `left` to `right` plus `Σ b_k sin kπs`, so the end
    /// values are kept exactly.
    Sine { left: f64, right: f64 },
    /// `Σ a_k cos kπs`; zero slope at both ends.
    Cosine,
}

/// Number of Fourier modes (0 through 4).
pub const FOURIER_MODES: usize = 5;

/// One random truncated Fourier series on `[lo, hi]`, already rescaled:
/// `value(x) = shift + scale · raw(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierSeries {
    pub basis: FourierBasis,
    pub interval: (f64, f64),
    pub cos: [f64; FOURIER_MODES],
    pub sin: [f64; FOURIER_MODES],
    pub scale: f64,
    pub shift: f64,
}

impl FourierSeries {
    /// `k`-th derivative at `x`.
    pub fn derivative(&self, x: f64, k: u32) -> f64 {
        let (lo, hi) = self.interval;
        let len = hi - lo;
        let s = (x - lo) / len;
        let (freq, phase) = match self.basis {
            FourierBasis::Periodic => (2.0 * PI, 2.0 * PI * s),
            _ => (PI, PI * s),
        };
        let mut raw = 0.0;
        for m in 0..FOURIER_MODES {
            let w = m as f64 * freq / len;
            // d^k/dx^k of cos(wx) = w^k cos(wx + kπ/2), likewise for sin.
            let shift = k as f64 * PI / 2.0;
            let arg = m as f64 * phase;
            raw += self.cos[m] * w.powi(k as i32) * (arg + shift).cos();
            raw += self.sin[m] * w.powi(k as i32) * (arg + shift).sin();
        }
        let mut out = self.scale * raw;
        if k == 0 {
            out += self.shift;
        }
        if let FourierBasis::Sine { left, right } = self.basis {
            match k {
                0 => out += left + (right - left) * s,
                1 => out += (right - left) / len,
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, x: f64) -> f64 {
        self.derivative(x, 0)
    }
}

/// A sampled DeepONet input.
#[derive(Debug, Clone, PartialEq)]
pub enum SampledFunction {
    /// Initial scalars `(u(t0), u'(t0), ..., v(t0), ...)` or endpoint values.
    Tuple(Vec<f64>),
    /// One series per component (e.g. `u0` and `∂u/∂t|t0`).
    Series(Vec<FourierSeries>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensorFamily {
    /// Independent uniform scalars, `width` per sample.
    ScalarTuple { width: usize },
    /// Random series over the x interval, `components` functions per sample.
    Fourier { basis: FourierBasis, components: usize },
    /// Periodic random series over the arc length of an xy boundary.
    Perimeter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub sensors: usize,
    pub samples: usize,
    pub range: (f64, f64),
    pub family: SensorFamily,
    pub seed: u64,
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let (lo, hi) = self.range;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(GeometryError::Sensors(format!("range [{lo}, {hi}] is empty")));
        }
        if self.sensors == 0 {
            return Err(GeometryError::Sensors("sensor count must be positive".into()));
        }
        if self.samples == 0 {
            return Err(GeometryError::Sensors("sample count must be positive".into()));
        }
        Ok(())
    }

    /// Width of the branch input.
    pub fn input_width(&self) -> usize {
        match self.family {
            SensorFamily::ScalarTuple { width } => width,
            SensorFamily::Fourier { components, .. } => components * self.sensors,
            SensorFamily::Perimeter => self.sensors,
        }
    }
}

/// Sensor locations and the sampled functions evaluated there.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSet {
    /// One row per sensor (empty for scalar tuples).
    pub locations: Array2<f64>,
    /// One row per function sample: the branch input.
    pub values: Array2<f64>,
    pub functions: Vec<SampledFunction>,
}

/// Sensor locations for `config` on `domain`.
pub fn sensor_locations(config: &SensorConfig, domain: &Domain) -> Array2<f64> {
    match config.family {
        SensorFamily::ScalarTuple { .. } => Array2::zeros((0, 1)),
        SensorFamily::Fourier { basis, .. } => {
            let (lo, hi) = domain.bounds()[domain.first_axis()];
            let xs = equispaced(config.sensors, lo, hi, basis == FourierBasis::Periodic);
            Array2::from_shape_vec((xs.len(), 1), xs).expect("column shape")
        }
        SensorFamily::Perimeter => {
            let p = domain.perimeter();
            let mut out = Array2::zeros((config.sensors, 2));
            for (i, s) in equispaced(config.sensors, 0.0, p, true).into_iter().enumerate() {
                let (x, y) = domain.perimeter_point(s);
                out[[i, 0]] = x;
                out[[i, 1]] = y;
            }
            out
        }
    }
}

/// Evaluates a sampled function at the sensors, giving one branch input row.
pub fn sensor_row(
    function: &SampledFunction,
    config: &SensorConfig,
    domain: &Domain,
    locations: &Array2<f64>,
) -> Vec<f64> {
    match function {
        SampledFunction::Tuple(v) => v.clone(),
        SampledFunction::Series(parts) => match config.family {
            SensorFamily::Perimeter => (0..locations.nrows())
                .map(|i| parts[0].value(domain.arc_length(locations[[i, 0]], locations[[i, 1]])))
                .collect(),
            _ => {
                parts.iter().flat_map(|p| locations.column(0).iter().map(|&x| p.value(x)).collect::<Vec<_>>()).collect()
            }
        },
    }
}

pub fn sample_sensors(config: &SensorConfig, domain: &Domain) -> Result<SensorSet, GeometryError> {
    config.validate()?;
    let mut rng = rng_for(config.seed, Stream::Sensors);
    let locations = sensor_locations(config, domain);
    let (lo, hi) = config.range;
    let mut functions = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let f = match config.family {
            SensorFamily::ScalarTuple { width } => {
                SampledFunction::Tuple((0..width).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect())
            }
            SensorFamily::Fourier { basis, components } => {
                let interval = domain.bounds()[domain.first_axis()];
                let grid: Vec<f64> = locations.column(0).to_vec();
                SampledFunction::Series(
                    (0..components).map(|_| random_series(&mut rng, basis, interval, &grid, config.range)).collect(),
                )
            }
            SensorFamily::Perimeter => {
                let interval = (0.0, domain.perimeter());
                let grid = equispaced(config.sensors.max(64), 0.0, interval.1, true);
                SampledFunction::Series(vec![random_series(
                    &mut rng,
                    FourierBasis::Periodic,
                    interval,
                    &grid,
                    config.range,
                )])
            }
        };
        functions.push(f);
    }
    let width = config.input_width();
    let mut values = Array2::zeros((config.samples, width));
    for (i, f) in functions.iter().enumerate() {
        for (j, v) in sensor_row(f, config, domain, &locations).into_iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    Ok(SensorSet { locations, values, functions })
}

fn random_series(
    rng: &mut ChaCha8Rng,
    basis: FourierBasis,
    interval: (f64, f64),
    grid: &[f64],
    (lo, hi): (f64, f64),
) -> FourierSeries {
    let mut cos = [0.0; FOURIER_MODES];
    let mut sin = [0.0; FOURIER_MODES];
    for m in 0..FOURIER_MODES {
        match basis {
            FourierBasis::Periodic => {
                cos[m] = rng.sample(StandardNormal);
                if m > 0 {
                    sin[m] = rng.sample(StandardNormal);
                }
            }
            FourierBasis::Sine { .. } => {
                if m > 0 {
                    sin[m] = rng.sample(StandardNormal);
                }
            }
            FourierBasis::Cosine => cos[m] = rng.sample(StandardNormal),
        }
    }
    let mut series = FourierSeries { basis, interval, cos, sin, scale: 1.0, shift: 0.0 };
    let raw: Vec<f64> = grid.iter().map(|&x| series.value(x)).collect();
    let (rmin, rmax) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    match basis {
        FourierBasis::Sine { left, right } => {
            // End values stay fixed; the oscillating part is scaled to keep
            // line ± amplitude inside the range.
            let lmin = left.min(right);
            let lmax = left.max(right);
            let room = (hi - lmax).min(lmin - lo).max(0.0);
            let amp = room * rng.random::<f64>();
            let peak = raw
                .iter()
                .zip(grid)
                .map(|(v, &x)| {
                    let s = (x - interval.0) / (interval.1 - interval.0);
                    (v - (left + (right - left) * s)).abs()
                })
                .fold(0.0, f64::max);
            series.scale = if peak > 1e-12 { amp / peak } else { 0.0 };
        }
        _ => {
            let half = 0.5 * (hi - lo) * (1.0 - rng.random::<f64>());
            let centre = (lo + half) + (hi - lo - 2.0 * half).max(0.0) * rng.random::<f64>();
            let spread = rmax - rmin;
            if spread > 1e-12 {
                series.scale = 2.0 * half / spread;
                series.shift = centre - half - series.scale * rmin;
            } else {
                series.scale = 0.0;
                series.shift = centre;
            }
        }
    }
    series
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strata_ok(points: &Array2<f64>, bounds: &[(f64, f64)]) -> bool {
        let n = points.nrows();
        bounds.iter().enumerate().all(|(axis, &(lo, hi))| {
            let mut seen = vec![0usize; n];
            for v in points.column(axis) {
                let k = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
                seen[k.min(n - 1)] += 1;
            }
            seen.iter().all(|&c| c == 1)
        })
    }

    #[test]
    fn lhs_four_points_one_per_quarter() {
        let p = latin_hypercube(4, &[(0.0, 1.0)], 3);
        let mut v: Vec<f64> = p.column(0).to_vec();
        v.sort_by(f64::total_cmp);
        for (i, x) in v.iter().enumerate() {
            assert!(*x >= i as f64 * 0.25 && *x <= (i + 1) as f64 * 0.25);
        }
    }

    #[test]
    fn lhs_large_occupancy_is_all_ones() {
        let b = [(0.0, 1.0), (-1.0, 1.0)];
        assert!(strata_ok(&latin_hypercube(10000, &b, 11), &b));
    }

    #[test]
    fn initial_points_sit_on_t0() {
        let d = Domain::tx((0.0, 1.0), (-1.0, 1.0)).unwrap();
        let spec = InitialSpec::new(vec![vec![FunctionExpr::parse("cos(pi*x)", &["x"]).unwrap()]], 100).unwrap();
        let p = sample_initial_points(&d, &spec, 1).unwrap();
        assert_eq!(p.dim(), (100, 2));
        assert!(p.column(0).iter().all(|&t| t == 0.0));
        assert!(p.column(1).iter().all(|&x| (-1.0..=1.0).contains(&x)));
        let ode = Domain::ode(0.0, 1.0).unwrap();
        assert_eq!(sample_initial_points(&ode, &spec, 1).unwrap().dim(), (1, 1));
    }

    #[test]
    fn two_initial_points_split_the_interval() {
        let d = Domain::tx((0.0, 1.0), (0.0, 1.0)).unwrap();
        let spec = InitialSpec::new(vec![vec![FunctionExpr::constant(0.0, &["x"])]], 2).unwrap();
        let p = sample_initial_points(&d, &spec, 5).unwrap();
        let mut xs: Vec<f64> = p.column(1).to_vec();
        xs.sort_by(f64::total_cmp);
        assert!(xs[0] < 0.5 && xs[1] >= 0.5);
    }

    #[test]
    fn dirichlet_edges_and_targets() {
        let d = Domain::tx((0.0, 1.0), (0.0, 1.0)).unwrap();
        let spec = BoundarySpec::dirichlet(&d, vec![FunctionExpr::constant(0.0, &["t", "x"])], 100).unwrap();
        let b = sample_boundary_points(&d, &spec, 2).unwrap();
        assert_eq!(b.len(), 200);
        assert_eq!(b.points.column(1).iter().filter(|&&x| x == 0.0).count(), 100);
        assert_eq!(b.points.column(1).iter().filter(|&&x| x == 1.0).count(), 100);
        assert!(b.targets.iter().all(|&v| v == 0.0));

        let sq = Domain::xy((-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let f = FunctionExpr::parse("cos(pi*x)*sin(pi*y)", &["x", "y"]).unwrap();
        let spec = BoundarySpec::dirichlet(&sq, vec![f.clone()], 1).unwrap();
        let b = sample_boundary_points(&sq, &spec, 2).unwrap();
        assert_eq!(b.len(), 4);
        for i in 0..4 {
            let p = [b.points[[i, 0]], b.points[[i, 1]]];
            assert!(sq.contains(&p));
            assert_eq!(b.targets[i], f.eval(&p).unwrap());
        }
        assert_eq!(sample_boundary_points(&sq, &BoundarySpec::periodic(), 0), Err(GeometryError::PeriodicBoundary));
    }

    #[test]
    fn corner_check() {
        let sq = Domain::xy((-1.0, 1.0), (-1.0, 1.0)).unwrap();
        let bad = vec![
            FunctionExpr::constant(1.0, &["x", "y"]),
            FunctionExpr::constant(0.0, &["x", "y"]),
            FunctionExpr::constant(0.0, &["x", "y"]),
            FunctionExpr::constant(0.0, &["x", "y"]),
        ];
        let spec = BoundarySpec::dirichlet(&sq, bad, 10).unwrap();
        assert!(matches!(spec.check_corners(&sq, 1e-9), Err(GeometryError::CornerMismatch { .. })));
    }

    #[test]
    fn scalar_tuples_in_range() {
        let d = Domain::ode(0.0, 1.0).unwrap();
        let cfg = SensorConfig {
            sensors: 3,
            samples: 5000,
            range: (-3.0, 3.0),
            family: SensorFamily::ScalarTuple { width: 3 },
            seed: 4,
        };
        let s = sample_sensors(&cfg, &d).unwrap();
        assert_eq!(s.values.dim(), (5000, 3));
        assert!(s.values.iter().all(|v| (-3.0..=3.0).contains(v)));
    }

    #[test]
    fn fourier_families_respect_range_and_ends() {
        let d = Domain::tx((0.0, 1.0), (0.0, 1.0)).unwrap();
        for basis in [FourierBasis::Periodic, FourierBasis::Sine { left: 0.0, right: 0.0 }, FourierBasis::Cosine] {
            let cfg = SensorConfig {
                sensors: 50,
                samples: 200,
                range: (-2.0, 2.0),
                family: SensorFamily::Fourier { basis, components: 1 },
                seed: 9,
            };
            let s = sample_sensors(&cfg, &d).unwrap();
            assert!(s.values.iter().all(|v| (-2.0 - 1e-12..=2.0 + 1e-12).contains(v)), "{basis:?}");
            if let FourierBasis::Sine { .. } = basis {
                for f in &s.functions {
                    let SampledFunction::Series(p) = f else { panic!() };
                    assert!(p[0].value(0.0).abs() < 1e-12 && p[0].value(1.0).abs() < 1e-12);
                }
            }
        }
        let zero = SensorConfig {
            sensors: 10,
            samples: 20,
            range: (0.0, 0.0),
            family: SensorFamily::Fourier { basis: FourierBasis::Periodic, components: 1 },
            seed: 1,
        };
        assert!(sample_sensors(&zero, &d).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn series_derivatives_match_finite_differences() {
        let mut rng = rng_for(3, Stream::Probe);
        for basis in [FourierBasis::Periodic, FourierBasis::Sine { left: 1.0, right: -0.5 }, FourierBasis::Cosine] {
            let grid = equispaced(40, -1.0, 2.0, false);
            let s = random_series(&mut rng, basis, (-1.0, 2.0), &grid, (-2.0, 2.0));
            let (x, h) = (0.37, 1e-5);
            for k in 1..3 {
                let fd = (s.derivative(x + h, k - 1) - s.derivative(x - h, k - 1)) / (2.0 * h);
                assert!((fd - s.derivative(x, k)).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn perimeter_round_trip() {
        let d = Domain::xy((-1.0, 2.0), (0.0, 1.0)).unwrap();
        for s in equispaced(37, 0.0, d.perimeter(), true) {
            let (x, y) = d.perimeter_point(s);
            assert!((d.arc_length(x, y) - s).abs() < 1e-12);
        }
    }
}
