//! Declarative run configuration.
//!
//! A config is a TOML document. Expressions are quoted strings in the
//! equation grammar, so a config never depends on a host language:
//!
//! ```toml
//! solver = "solvePDE_tx"
//! seed = 7
//!
//! [equations]
//! residuals = ["ut+ux"]
//!
//! [domain]
//! t = [0.0, 1.0]
//! x = [-1.0, 1.0]
//!
//! [initial]
//! conditions = [["cos(pi*x)"]]
//! points = 100
//!
//! [boundary]
//! kind = "periodic"
//!
//! [training]
//! epochs = 3000
//! interior_points = 10000
//!
//! [output]
//! resolution = [101, 101]
//! analytic = ["cos(pi*(x-t))"]
//! ```

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use diffnet::eqparser::FunctionExpr;
use diffnet::geometry::{BoundaryKind, BoundarySpec, Domain, InitialSpec, SensorConfig, SensorFamily};
use diffnet::models::ConstraintMode;
use diffnet::solvers::{ModelKind, NetworkConfig, ProblemKind, ProblemSpec, SolveError};
use diffnet::training::{LossWeights, TrainConfig};

/// The ten solver names of the original library, mapped onto kinds.
pub const SOLVER_ALIASES: [(&str, ProblemKind, ModelKind); 10] = [
    ("solveODE_IVP", ProblemKind::OdeIvp, ModelKind::Pinn),
    ("solveODE_BVP", ProblemKind::OdeBvp, ModelKind::Pinn),
    ("solveODE_System_IVP", ProblemKind::OdeSystemIvp, ModelKind::Pinn),
    ("solveODE_DeepONet_IVP", ProblemKind::OdeIvp, ModelKind::DeepOnet),
    ("solveODE_DeepONet_BVP", ProblemKind::OdeBvp, ModelKind::DeepOnet),
    ("solveODE_DeepONetSystem_IVP", ProblemKind::OdeSystemIvp, ModelKind::DeepOnet),
    ("solvePDE_tx", ProblemKind::PdeTx, ModelKind::Pinn),
    ("solvePDE_xy", ProblemKind::PdeXy, ModelKind::Pinn),
    ("solvePDE_DeepONet_tx", ProblemKind::PdeTx, ModelKind::DeepOnet),
    ("solvePDE_DeepONet_xy", ProblemKind::PdeXy, ModelKind::DeepOnet),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One of [`SOLVER_ALIASES`]; alternatively give `problem` and `model`.
    pub solver: Option<String>,
    pub problem: Option<String>,
    pub model: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub equations: Equations,
    pub domain: DomainConfig,
    pub initial: Option<InitialConfig>,
    pub boundary: Option<BoundaryConfig>,
    pub sensors: Option<SensorsConfig>,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Equations {
    pub residuals: Vec<String>,
    pub variables: Option<Vec<String>>,
    pub orders: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub t: Option<[f64; 2]>,
    pub x: Option<[f64; 2]>,
    pub y: Option<[f64; 2]>,
}

/// `conditions[v][k]` is the `k`-th time derivative of variable `v` at the
/// initial time: a constant for ODEs, a function of `x` for tx problems.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub conditions: Vec<Vec<String>>,
    #[serde(default = "default_points")]
    pub points: usize,
}

/// One function per edge or a single shared one. ODE boundary values are
/// functions of `t`, tx ones of `(t, x)` and xy ones of `(x, y)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub kind: String,
    #[serde(default)]
    pub functions: Vec<String>,
    #[serde(default = "default_points")]
    pub points: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorsConfig {
    /// Sensor count; ODE problems default to the width of their tuple.
    pub count: Option<usize>,
    pub samples: usize,
    pub range: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_units")]
    pub units: usize,
    pub p: Option<usize>,
    #[serde(default = "default_constraint")]
    pub constraint: String,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection { layers: default_layers(), units: default_units(), p: None, constraint: default_constraint() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_interior")]
    pub interior_points: usize,
    #[serde(default = "one")]
    pub initial_weight: f64,
    #[serde(default = "one")]
    pub boundary_weight: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            interior_points: default_interior(),
            initial_weight: 1.0,
            boundary_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// Samples per coordinate axis; defaults to 101 each.
    pub resolution: Option<Vec<usize>>,
    /// Exact solution per variable, over the coordinates.
    pub analytic: Option<Vec<String>>,
    /// Windows for `timestep` when `--steps` is not given.
    pub steps: Option<usize>,
}

fn default_points() -> usize {
    100
}
fn default_layers() -> usize {
    NetworkConfig::default().layers
}
fn default_units() -> usize {
    NetworkConfig::default().units
}
fn default_constraint() -> String {
    "soft".into()
}
fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn default_beta1() -> f64 {
    TrainConfig::default().beta1
}
fn default_beta2() -> f64 {
    TrainConfig::default().beta2
}
fn default_epsilon() -> f64 {
    TrainConfig::default().epsilon
}
fn default_interior() -> usize {
    1000
}
fn one() -> f64 {
    1.0
}

/// Category of a configuration problem; decides the exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IssueKind {
    Config,
    Expression,
    Inadmissible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub kind: IssueKind,
    /// Config key the issue is about, when it can be pinned down.
    pub field: Option<String>,
    pub message: String,
}

impl Issue {
    fn config(field: &str, message: impl Into<String>) -> Self {
        Issue { kind: IssueKind::Config, field: Some(field.into()), message: message.into() }
    }

    fn expression(field: String, source: &str, error: impl fmt::Display) -> Self {
        Issue { kind: IssueKind::Expression, field: Some(field), message: format!("cannot parse '{source}': {error}") }
    }

    fn from_solve(e: SolveError) -> Self {
        let kind = match e {
            SolveError::Parse { .. } => IssueKind::Expression,
            SolveError::Inadmissible { .. } => IssueKind::Inadmissible,
            _ => IssueKind::Config,
        };
        let mut message = e.to_string();
        if kind == IssueKind::Inadmissible {
            message.push_str(&format!(" (available: {})", availability_summary()));
        }
        Issue { kind, field: None, message }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// One line listing where hard constraints are available.
pub fn availability_summary() -> &'static str {
    "hard constraints exist for ode-ivp and ode-bvp, periodic pde-tx, and periodic or dirichlet pde-xy; \
     soft constraints are available everywhere"
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<(Self, String), LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io(path.display().to_string(), e))?;
        let cfg = RunConfig::parse(&text).map_err(|e| LoadError::Syntax(path.display().to_string(), e))?;
        Ok((cfg, text))
    }

    /// Problem and model kinds, from `solver` or from `problem` + `model`.
    pub fn kinds(&self) -> Result<(ProblemKind, ModelKind), Issue> {
        match (&self.solver, &self.problem, &self.model) {
            (Some(name), None, None) => SOLVER_ALIASES
                .iter()
                .find(|(alias, _, _)| alias.eq_ignore_ascii_case(name))
                .map(|&(_, p, m)| (p, m))
                .ok_or_else(|| {
                    let names: Vec<&str> = SOLVER_ALIASES.iter().map(|a| a.0).collect();
                    Issue::config("solver", format!("unknown solver '{name}'; expected one of {}", names.join(", ")))
                }),
            (None, Some(p), Some(m)) => {
                let problem = ProblemKind::ALL
                    .into_iter()
                    .find(|k| k.name() == p)
                    .ok_or_else(|| Issue::config("problem", format!("unknown problem kind '{p}'")))?;
                let model = match m.as_str() {
                    "pinn" => ModelKind::Pinn,
                    "deeponet" => ModelKind::DeepOnet,
                    _ => return Err(Issue::config("model", format!("unknown model '{m}'; expected pinn or deeponet"))),
                };
                Ok((problem, model))
            }
            _ => Err(Issue::config("solver", "give either `solver` or both `problem` and `model`")),
        }
    }

    /// Builds the problem spec and reports every issue found on the way.
    /// The spec is `None` only when issues prevented building it.
    pub fn build(&self) -> (Option<ProblemSpec>, Vec<Issue>) {
        let mut issues = Vec::new();
        let kinds = self.kinds().map_err(|e| issues.push(e)).ok();
        let domain = self.domain(kinds.map(|k| k.0)).map_err(|e| issues.push(e)).ok();

        let n = self.equations.residuals.len();
        let variables = self
            .equations
            .variables
            .clone()
            .unwrap_or_else(|| ["u", "v", "w"].iter().take(n).map(|s| s.to_string()).collect());
        let orders = self.equations.orders.clone().unwrap_or_else(|| vec![1; n]);

        self.check_counts(&mut issues);
        let constraint = match self.network.constraint.as_str() {
            "soft" => Some(ConstraintMode::Soft),
            "hard" => Some(ConstraintMode::Hard),
            other => {
                issues.push(Issue::config(
                    "network.constraint",
                    format!("unknown mode '{other}'; expected soft or hard"),
                ));
                None
            }
        };

        let (Some((kind, model)), Some(domain)) = (kinds, domain) else {
            return (None, issues);
        };
        let coords = kind.domain_kind().coordinates();
        let initial = self.initial_spec(kind, &mut issues);
        let boundary = self.boundary_spec(kind, &domain, &mut issues);
        self.check_analytic(coords, &mut issues);

        let mut spec = ProblemSpec::new(
            kind,
            model,
            &self.equations.residuals.iter().map(String::as_str).collect::<Vec<_>>(),
            domain,
        );
        spec.variables = variables;
        spec.orders = orders;
        spec.initial = initial.flatten();
        spec.boundary = boundary.flatten();
        spec.constraint = constraint.unwrap_or(ConstraintMode::Soft);
        spec.interior = self.training.interior_points.max(1);
        spec.network = NetworkConfig { layers: self.network.layers, units: self.network.units, p: self.network.p };
        spec.train = TrainConfig {
            epochs: self.training.epochs,
            learning_rate: self.training.learning_rate,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            epsilon: self.training.epsilon,
            seed: self.seed,
        };
        spec.weights = LossWeights { initial: self.training.initial_weight, boundary: self.training.boundary_weight };

        match (model, &self.sensors) {
            (ModelKind::DeepOnet, Some(s)) => {
                let tuple_width = match kind {
                    ProblemKind::OdeBvp => Some(2),
                    ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp => Some(spec.orders.iter().sum()),
                    _ => None,
                };
                let sensors = match (s.count, tuple_width) {
                    (Some(c), _) => c,
                    (None, Some(w)) => w,
                    (None, None) => {
                        issues.push(Issue::config("sensors.count", "pde problems need an explicit sensor count"));
                        1
                    }
                };
                spec.sensors = Some(SensorConfig {
                    sensors,
                    samples: s.samples,
                    range: (s.range[0], s.range[1]),
                    family: SensorFamily::ScalarTuple { width: sensors },
                    seed: self.seed,
                });
                let family = spec.expected_family();
                if let Some(cfg) = spec.sensors.as_mut() {
                    cfg.family = family;
                }
            }
            (ModelKind::Pinn, Some(_)) => {
                issues.push(Issue::config("sensors", "sensor settings only apply to deeponet solvers"))
            }
            _ => {}
        }

        let broken_inputs = issues
            .iter()
            .any(|i| matches!(i.field.as_deref(), Some(f) if f.starts_with("initial") || f.starts_with("boundary")));
        for e in spec.issues() {
            let field = match &e {
                SolveError::Parse { source_text, .. } => self
                    .equations
                    .residuals
                    .iter()
                    .position(|r| r == source_text)
                    .map(|i| format!("equations.residuals[{i}]")),
                SolveError::Inadmissible { .. } => Some("network.constraint".into()),
                _ => None,
            };
            let issue = Issue { field, ..Issue::from_solve(e) };
            let duplicate = issues.iter().any(|i| i.message == issue.message)
                || (self.training.interior_points == 0 && issue.message.contains("interior point count"))
                || (broken_inputs && issue.message.contains(" needs ") && issue.message.contains(" conditions"));
            if !duplicate {
                issues.push(issue);
            }
        }
        (Some(spec), issues)
    }

    fn domain(&self, kind: Option<ProblemKind>) -> Result<Domain, Issue> {
        let d = &self.domain;
        let iv = |v: [f64; 2]| (v[0], v[1]);
        let found = match (d.t, d.x, d.y) {
            (Some(t), None, None) => Domain::ode(t[0], t[1]),
            (Some(t), Some(x), None) => Domain::tx(iv(t), iv(x)),
            (None, Some(x), Some(y)) => Domain::xy(iv(x), iv(y)),
            _ => return Err(Issue::config("domain", "give `t` (ode), `t` and `x` (pde-tx) or `x` and `y` (pde-xy)")),
        }
        .map_err(|e| Issue::config("domain", e.to_string()))?;
        if let Some(k) = kind {
            if found.kind() != k.domain_kind() {
                return Err(Issue::config(
                    "domain",
                    format!(
                        "{k} needs coordinates ({}), got ({})",
                        k.domain_kind().coordinates().join(", "),
                        found.kind().coordinates().join(", ")
                    ),
                ));
            }
        }
        Ok(found)
    }

    fn check_counts(&self, issues: &mut Vec<Issue>) {
        if self.training.interior_points == 0 {
            issues.push(Issue::config("training.interior_points", "interior collocation count N_pde must be positive"));
        }
        if let Some(i) = &self.initial {
            if i.points == 0 {
                issues.push(Issue::config("initial.points", "initial point count N_iv must be positive"));
            }
        }
        if let Some(b) = &self.boundary {
            if b.points == 0 && b.kind != "periodic" {
                issues.push(Issue::config("boundary.points", "boundary point count N_bc must be positive"));
            }
        }
        if let Some(s) = &self.sensors {
            if s.samples == 0 {
                issues.push(Issue::config("sensors.samples", "function sample count must be positive"));
            }
            if s.count == Some(0) {
                issues.push(Issue::config("sensors.count", "sensor count must be positive"));
            }
        }
        if let Some(res) = &self.output.resolution {
            if res.contains(&0) {
                issues.push(Issue::config("output.resolution", "grid resolution must be positive on every axis"));
            }
        }
        if self.output.steps == Some(0) {
            issues.push(Issue::config("output.steps", "time-stepping needs at least one step"));
        }
    }

    fn initial_spec(&self, kind: ProblemKind, issues: &mut Vec<Issue>) -> Option<Option<InitialSpec>> {
        let init = self.initial.as_ref()?;
        let vars: &[&str] = if kind == ProblemKind::PdeTx { &["x"] } else { &["t"] };
        let mut functions = Vec::new();
        let mut ok = true;
        for (v, conds) in init.conditions.iter().enumerate() {
            let mut row = Vec::new();
            for (k, src) in conds.iter().enumerate() {
                match FunctionExpr::parse(src, vars) {
                    Ok(f) => row.push(f),
                    Err(e) => {
                        ok = false;
                        issues.push(Issue::expression(format!("initial.conditions[{v}][{k}]"), src, e));
                    }
                }
            }
            functions.push(row);
        }
        if !ok || init.points == 0 {
            return Some(None);
        }
        match InitialSpec::new(functions, init.points) {
            Ok(s) => Some(Some(s)),
            Err(e) => {
                issues.push(Issue::config("initial", e.to_string()));
                Some(None)
            }
        }
    }

    fn boundary_spec(
        &self,
        kind: ProblemKind,
        domain: &Domain,
        issues: &mut Vec<Issue>,
    ) -> Option<Option<BoundarySpec>> {
        let b = self.boundary.as_ref()?;
        let bk = match b.kind.as_str() {
            "periodic" => BoundaryKind::Periodic,
            "dirichlet" => BoundaryKind::Dirichlet,
            "neumann" => BoundaryKind::Neumann,
            other => {
                issues.push(Issue::config(
                    "boundary.kind",
                    format!("unknown kind '{other}'; expected periodic, dirichlet or neumann"),
                ));
                return Some(None);
            }
        };
        if bk == BoundaryKind::Periodic {
            if !b.functions.is_empty() {
                issues.push(Issue::config("boundary.functions", "periodic boundaries take no functions"));
            }
            return Some(Some(BoundarySpec::periodic()));
        }
        let vars = kind.domain_kind().coordinates();
        let mut functions = Vec::new();
        let mut ok = true;
        for (i, src) in b.functions.iter().enumerate() {
            match FunctionExpr::parse(src, vars) {
                Ok(f) => functions.push(f),
                Err(e) => {
                    ok = false;
                    issues.push(Issue::expression(format!("boundary.functions[{i}]"), src, e));
                }
            }
        }
        if !ok || b.points == 0 {
            return Some(None);
        }
        match BoundarySpec::new(bk, domain, functions, b.points) {
            Ok(s) => Some(Some(s)),
            Err(e) => {
                issues.push(Issue::config("boundary.functions", e.to_string()));
                Some(None)
            }
        }
    }

    fn check_analytic(&self, coords: &[&str], issues: &mut Vec<Issue>) {
        let Some(exprs) = &self.output.analytic else { return };
        if exprs.len() != self.equations.residuals.len() {
            issues.push(Issue::config(
                "output.analytic",
                format!("{} expressions for {} variables", exprs.len(), self.equations.residuals.len()),
            ));
        }
        for (i, src) in exprs.iter().enumerate() {
            if let Err(e) = FunctionExpr::parse(src, coords) {
                issues.push(Issue::expression(format!("output.analytic[{i}]"), src, e));
            }
        }
    }

    /// Grid resolution per coordinate axis.
    pub fn resolution(&self, dims: usize) -> Vec<usize> {
        match &self.output.resolution {
            Some(r) if r.len() == dims => r.clone(),
            Some(r) if r.len() == 1 => vec![r[0]; dims],
            _ => vec![101; dims],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}: {1}")]
    Syntax(String, toml::de::Error),
}
