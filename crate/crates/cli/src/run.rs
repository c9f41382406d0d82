//! The `run`, `validate` and `timestep` subcommands as library calls.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diffnet::eqparser::FunctionExpr;
use diffnet::solvers::{solve, ModelKind, ProblemKind, ProblemSpec, SolutionField, SolutionHandle, SolveError};

use crate::config::{Issue, IssueKind, LoadError, RunConfig};
use crate::model_file::{fingerprint, read_model, write_model, ModelFileError, Provenance};

pub const SOLUTION_CSV: &str = "solution.csv";
pub const LOSS_CSV: &str = "loss.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const MODEL_BIN: &str = "model.bin";
pub const TIMESTEP_CSV: &str = "timestep_solution.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{}", render_issues(.0))]
    Invalid(Vec<Issue>),
    #[error("training diverged: {0}")]
    Divergence(SolveError),
    #[error("{0}")]
    NotOperator(String),
    #[error(transparent)]
    Solve(SolveError),
    #[error("cannot write {0}: {1}")]
    Io(String, io::Error),
    #[error("cannot load {0}: {1}")]
    Model(String, ModelFileError),
}

fn render_issues(issues: &[Issue]) -> String {
    let mut s = format!("{} issue(s)", issues.len());
    for i in issues {
        let _ = write!(s, "\n  {i}");
    }
    s
}

impl CliError {
    /// Process exit status: 2 config, 3 expression, 4 inadmissible,
    /// 5 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Load(_) => 2,
            CliError::Invalid(issues) => match issues.iter().map(|i| i.kind).min() {
                Some(IssueKind::Expression) => 3,
                Some(IssueKind::Inadmissible) => 4,
                _ => 2,
            },
            CliError::Divergence(_) => 5,
            CliError::NotOperator(_) => 4,
            CliError::Solve(_) | CliError::Io(..) | CliError::Model(..) => 1,
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        if e.is_divergence() {
            CliError::Divergence(e)
        } else {
            CliError::Solve(e)
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
}

/// A loaded config with overrides applied.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub text: String,
    pub spec: ProblemSpec,
    pub out: PathBuf,
}

/// Reads, overrides and fully checks a config. Any issue is an error.
pub fn prepare(path: &Path, overrides: &Overrides) -> Result<Prepared, CliError> {
    let (mut config, text) = RunConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(epochs) = overrides.epochs {
        config.training.epochs = epochs;
    }
    let (spec, issues) = config.build();
    if !issues.is_empty() {
        return Err(CliError::Invalid(issues));
    }
    let spec = spec.expect("a spec is built whenever there are no issues");
    let out = overrides
        .out
        .clone()
        .or_else(|| config.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Prepared { config, text, spec, out })
}

/// Every issue with the config at `path`, without training.
pub fn validate(path: &Path) -> Result<Vec<Issue>, CliError> {
    let (config, _) = RunConfig::load(path)?;
    Ok(config.build().1)
}

/// What a successful run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub handle: SolutionHandle,
    pub field: SolutionField,
    pub out: PathBuf,
    pub elapsed_secs: f64,
}

impl RunSummary {
    pub fn mse(&self) -> Option<f64> {
        self.field.mse()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(path.display().to_string(), e)
}

fn analytic_exprs(config: &RunConfig, spec: &ProblemSpec) -> Option<Vec<FunctionExpr>> {
    let coords = spec.coordinates();
    config.output.analytic.as_ref().map(|a| {
        a.iter().map(|s| FunctionExpr::parse(s, coords).expect("analytic expressions were validated")).collect()
    })
}

fn provenance(spec: &ProblemSpec) -> Provenance {
    Provenance { seed: spec.train.seed, fingerprint: fingerprint(format!("{spec:?}").as_bytes()) }
}

fn sensor_row(spec: &ProblemSpec) -> Result<Option<Vec<f64>>, SolveError> {
    match spec.model {
        ModelKind::DeepOnet => spec.default_sensor_row().map(Some),
        ModelKind::Pinn => Ok(None),
    }
}

/// Trains the configured problem and writes `solution.csv`, `loss.csv`,
/// `report.txt` and `model.bin` into the output directory.
pub fn run(path: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let prepared = prepare(path, overrides)?;
    let Prepared { config, text, spec, out } = prepared;
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let start = Instant::now();
    let handle = solve(&spec)?;
    let field = solution_field(&handle, &config)?;
    let elapsed_secs = start.elapsed().as_secs_f64();

    let p = out.join(SOLUTION_CSV);
    field.write_csv(create(&p)?).map_err(io_err(&p))?;
    if let Some(report) = &handle.report {
        let p = out.join(LOSS_CSV);
        report.write_csv(create(&p)?).map_err(io_err(&p))?;
    }
    let p = out.join(MODEL_BIN);
    write_model(create(&p)?, &handle.params, provenance(&spec)).map_err(io_err(&p))?;
    let p = out.join(REPORT_TXT);
    fs::write(&p, report_text(&handle, &field, elapsed_secs, &text)).map_err(io_err(&p))?;

    Ok(RunSummary { handle, field, out, elapsed_secs })
}

/// The trained surrogate on the output grid, with analytic columns when
/// the config gives an exact solution.
pub fn solution_field(handle: &SolutionHandle, config: &RunConfig) -> Result<SolutionField, CliError> {
    let spec = &handle.spec;
    let resolution = config.resolution(spec.domain.dims());
    let row = sensor_row(spec)?;
    let analytic: Vec<String> = config.output.analytic.clone().unwrap_or_default();
    if analytic.is_empty() {
        let points = diffnet::solvers::grid_points(&spec.domain, &resolution)?;
        let predicted = handle.evaluate(&points, row.as_deref())?;
        let coords = spec.coordinates().iter().map(|s| s.to_string()).collect();
        Ok(SolutionField::new(coords, spec.variables.clone(), points, predicted))
    } else {
        Ok(handle.evaluate_error(&analytic, &resolution, row.as_deref())?)
    }
}

fn report_text(handle: &SolutionHandle, field: &SolutionField, elapsed: f64, config_text: &str) -> String {
    let spec = &handle.spec;
    let mut s = String::new();
    let _ = writeln!(s, "problem: {} ({})", spec.kind, spec.model);
    let _ = writeln!(s, "constraint: {:?}", spec.constraint);
    let _ = writeln!(s, "seed: {}", spec.train.seed);
    let _ = writeln!(s, "threads: {}", rayon::current_num_threads());
    let _ = writeln!(s, "grid points: {}", field.len());
    match (field.mse(), field.mse_per_variable(), field.max_abs_error()) {
        (Some(mse), Some(per), Some(max)) => {
            let _ = writeln!(s, "mse: {mse:e}");
            for (v, m) in spec.variables.iter().zip(per) {
                let _ = writeln!(s, "mse[{v}]: {m:e}");
            }
            let _ = writeln!(s, "max abs error: {max:e}");
        }
        _ => {
            let _ = writeln!(s, "mse: n/a (no analytic solution given)");
        }
    }
    let [res, init, bound] = handle.term_evaluations;
    if let Some(r) = &handle.report {
        let last = |v: &[f64], used: bool| match v.last() {
            Some(x) if used => format!("{x:e}"),
            _ => "n/a".to_string(),
        };
        let _ = writeln!(s, "epochs: {}", r.composite.len());
        let _ = writeln!(s, "final loss: {}", last(&r.composite, true));
        let _ = writeln!(s, "final residual loss: {}", last(&r.residual, res > 0));
        let _ = writeln!(s, "final initial loss: {}", last(&r.initial, init > 0));
        let _ = writeln!(s, "final boundary loss: {}", last(&r.boundary, bound > 0));
        let _ = writeln!(s, "training time: {:.3} s", r.elapsed_secs);
    }
    let _ = writeln!(s, "chunk evaluations: residual {res}, initial {init}, boundary {bound}");
    let _ = writeln!(s, "total time: {elapsed:.3} s");
    for w in &field.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = writeln!(s, "\n# config\n{}", config_text.trim_end());
    s
}

/// Loads `model.bin` from the output directory when it was trained on
/// exactly this spec.
fn load_handle(spec: &ProblemSpec, out: &Path) -> Result<Option<SolutionHandle>, CliError> {
    let p = out.join(MODEL_BIN);
    let Ok(file) = File::open(&p) else { return Ok(None) };
    let (params, tag) =
        read_model(io::BufReader::new(file)).map_err(|e| CliError::Model(p.display().to_string(), e))?;
    if tag != provenance(spec) || (spec.architecture() != Ok(params.arch)) {
        return Ok(None);
    }
    Ok(Some(SolutionHandle::from_params(spec.clone(), params)?))
}

/// Rolls a DeepONet forward over `steps` windows and writes
/// `timestep_solution.csv`. Reuses a saved `model.bin` for the same spec
/// and seed, otherwise trains first.
pub fn timestep(path: &Path, overrides: &Overrides) -> Result<SolutionField, CliError> {
    if overrides.steps == Some(0) {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let Prepared { config, spec, out, .. } = prepare(path, overrides)?;
    let operator = spec.model == ModelKind::DeepOnet
        && matches!(spec.kind, ProblemKind::OdeIvp | ProblemKind::OdeSystemIvp | ProblemKind::PdeTx);
    if !operator {
        return Err(CliError::NotOperator(format!(
            "timestep needs a deeponet on a time window (ode-ivp, ode-system-ivp or pde-tx), got {} {}",
            spec.model, spec.kind
        )));
    }
    let steps = overrides.steps.or(config.output.steps).unwrap_or(10);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let handle = match load_handle(&spec, &out)? {
        Some(h) => h,
        None => {
            let h = solve(&spec)?;
            let p = out.join(MODEL_BIN);
            write_model(create(&p)?, &h.params, provenance(&spec)).map_err(io_err(&p))?;
            h
        }
    };
    let res = config.resolution(spec.domain.dims());
    let mut field = handle.time_step(steps, res[0], res.get(1).copied().unwrap_or(0))?;
    if let Some(exprs) = analytic_exprs(&config, &spec) {
        field.attach_analytic(&exprs)?;
    }
    for w in &field.warnings {
        log::warn!("{w}");
    }
    let p = out.join(TIMESTEP_CSV);
    field.write_csv(create(&p)?).map_err(io_err(&p))?;
    Ok(field)
}
