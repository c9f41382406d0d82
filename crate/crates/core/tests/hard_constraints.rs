//! Hard-constrained surrogates hit their constraint data for arbitrary
//! network parameters, and periodic embeddings make the two ends agree.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffnet::eqparser::FunctionExpr;
use diffnet::geometry::{sample_sensors, BoundarySpec, Domain, InitialSpec, SampledFunction, SensorConfig};
use diffnet::models::{init_params, ConstraintMode};
use diffnet::solvers::{ModelKind, NetworkConfig, ProblemKind, ProblemSpec, SolutionHandle};

const DRAWS: u64 = 1000;

fn f(src: &str, vars: &[&str]) -> FunctionExpr {
    FunctionExpr::parse(src, vars).unwrap()
}

/// Handle with random parameters: the default initialization plus a
/// uniform perturbation of each weight.
fn random_handle(spec: &ProblemSpec, seed: u64) -> SolutionHandle {
    let mut p = init_params(spec.architecture().unwrap(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in &mut p.values {
        *v += rng.random_range(-0.5..0.5);
    }
    SolutionHandle::from_params(spec.clone(), p).unwrap()
}

fn ode_ivp_spec(model: ModelKind) -> ProblemSpec {
    let d = Domain::ode(0.0, 2.0).unwrap();
    let mut s = ProblemSpec::new(ProblemKind::OdeIvp, model, &["utt + u"], d);
    s.orders = vec![2];
    s.initial = Some(InitialSpec::values(&[vec![0.5, 1.0]]));
    s.constraint = ConstraintMode::Hard;
    s.network = NetworkConfig { layers: 3, units: 20, p: None };
    if model == ModelKind::DeepOnet {
        s.sensors =
            Some(SensorConfig { sensors: 2, samples: 8, range: (-3.0, 3.0), family: s.expected_family(), seed: 1 });
    }
    s
}

fn wave_spec() -> ProblemSpec {
    let d = Domain::tx((0.0, 1.0), (-1.0, 1.0)).unwrap();
    let mut s = ProblemSpec::new(ProblemKind::PdeTx, ModelKind::Pinn, &["utt - uxx"], d);
    s.orders = vec![2];
    s.initial = Some(InitialSpec::new(vec![vec![f("cos(pi*x)", &["x"]), f("0.3*sin(2*pi*x)", &["x"])]], 10).unwrap());
    s.boundary = Some(BoundarySpec::periodic());
    s.constraint = ConstraintMode::Hard;
    s.network = NetworkConfig { layers: 4, units: 60, p: None };
    s
}

fn poisson_spec() -> ProblemSpec {
    let d = Domain::xy((-1.0, 1.0), (-1.0, 1.0)).unwrap();
    let mut s = ProblemSpec::new(
        ProblemKind::PdeXy,
        ModelKind::Pinn,
        &["uxx + uyy - (-2*pi^2*cos(pi*x)*sin(pi*y))"],
        d.clone(),
    );
    s.boundary = Some(BoundarySpec::dirichlet(&d, vec![f("cos(pi*x)*sin(pi*y)", &["x", "y"])], 100).unwrap());
    s.constraint = ConstraintMode::Hard;
    s.network = NetworkConfig { layers: 5, units: 40, p: None };
    s
}

fn column(values: &[f64], t: f64) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 2), |(i, j)| if j == 0 { t } else { values[i] })
}

#[test]
fn ode_time_polynomial_reproduces_initial_tuple() {
    let spec = ode_ivp_spec(ModelKind::Pinn);
    let t0 = Array2::from_elem((1, 1), 0.0);
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let h = random_handle(&spec, seed);
        worst = worst.max((h.evaluate(&t0, None).unwrap()[[0, 0]] - 0.5).abs());
        worst = worst.max((h.evaluate_derivative(&t0, None, &[1]).unwrap()[[0, 0]] - 1.0).abs());
    }
    assert!(worst <= 1e-10, "worst mismatch {worst:e}");
}

#[test]
fn deeponet_time_polynomial_reproduces_every_input_tuple() {
    let spec = ode_ivp_spec(ModelKind::DeepOnet);
    let t0 = Array2::from_elem((1, 1), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let h = random_handle(&spec, seed);
        let tuple = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        worst = worst.max((h.evaluate(&t0, Some(&tuple)).unwrap()[[0, 0]] - tuple[0]).abs());
        worst = worst.max((h.evaluate_derivative(&t0, Some(&tuple), &[1]).unwrap()[[0, 0]] - tuple[1]).abs());
    }
    assert!(worst <= 1e-10, "worst mismatch {worst:e}");
}

#[test]
fn tx_time_polynomial_reproduces_value_and_velocity() {
    let spec = wave_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let h = random_handle(&spec, seed);
        let xs: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pts = column(&xs, 0.0);
        let u = h.evaluate(&pts, None).unwrap();
        let ut = h.evaluate_derivative(&pts, None, &[1, 0]).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            worst = worst.max((u[[i, 0]] - (std::f64::consts::PI * x).cos()).abs());
            worst = worst.max((ut[[i, 0]] - 0.3 * (2.0 * std::f64::consts::PI * x).sin()).abs());
        }
    }
    assert!(worst <= 1e-10, "worst mismatch {worst:e}");
}

#[test]
fn dirichlet_xy_matches_all_four_edges() {
    let spec = poisson_spec();
    let exact = |x: f64, y: f64| (std::f64::consts::PI * x).cos() * (std::f64::consts::PI * y).sin();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let h = random_handle(&spec, seed);
        let mut pts = Array2::zeros((400, 2));
        for i in 0..400 {
            let s: f64 = rng.random_range(-1.0..1.0);
            let (x, y) = match i % 4 {
                0 => (-1.0, s),
                1 => (1.0, s),
                2 => (s, -1.0),
                _ => (s, 1.0),
            };
            pts[[i, 0]] = x;
            pts[[i, 1]] = y;
        }
        let u = h.evaluate(&pts, None).unwrap();
        for i in 0..400 {
            worst = worst.max((u[[i, 0]] - exact(pts[[i, 0]], pts[[i, 1]])).abs());
        }
    }
    assert!(worst <= 1e-10, "worst mismatch {worst:e}");
}

#[test]
fn dirichlet_xy_with_separate_edge_functions_on_an_offset_rectangle() {
    let d = Domain::xy((0.0, 2.0), (-1.0, 0.5)).unwrap();
    let mut spec = poisson_spec();
    spec.domain = d.clone();
    // Restrictions of x*y + x^2 to the left, right, bottom and top edges.
    let edges = ["0*y", "2*y + 4", "x^2 - x", "x^2 + 0.5*x"];
    spec.boundary = Some(BoundarySpec::dirichlet(&d, edges.iter().map(|e| f(e, &["x", "y"])).collect(), 40).unwrap());
    let h = random_handle(&spec, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (x, y) = match rng.random_range(0..4) {
            0 => (0.0, rng.random_range(-1.0..0.5)),
            1 => (2.0, rng.random_range(-1.0..0.5)),
            2 => (rng.random_range(0.0..2.0), -1.0),
            _ => (rng.random_range(0.0..2.0), 0.5),
        };
        let u = h.evaluate(&Array2::from_shape_vec((1, 2), vec![x, y]).unwrap(), None).unwrap()[[0, 0]];
        assert!((u - (x * y + x * x)).abs() <= 1e-10, "({x}, {y}): {u}");
    }
}

#[test]
fn periodic_embedding_identifies_the_ends() {
    let d = Domain::tx((0.0, 1.0), (-1.0, 1.0)).unwrap();
    let mut spec = ProblemSpec::new(ProblemKind::PdeTx, ModelKind::Pinn, &["ut+ux"], d);
    spec.initial = Some(InitialSpec::new(vec![vec![f("cos(pi*x)", &["x"])]], 10).unwrap());
    spec.boundary = Some(BoundarySpec::periodic());
    spec.network = NetworkConfig { layers: 4, units: 60, p: None };
    let ts: Vec<f64> = (0..10).map(|i| i as f64 / 9.0).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..DRAWS {
        let h = random_handle(&spec, seed);
        let mut pts = Array2::zeros((20, 2));
        for (i, &t) in ts.iter().enumerate() {
            pts[[2 * i, 0]] = t;
            pts[[2 * i, 1]] = -1.0;
            pts[[2 * i + 1, 0]] = t;
            pts[[2 * i + 1, 1]] = 1.0;
        }
        let u = h.evaluate(&pts, None).unwrap();
        for i in 0..ts.len() {
            worst = worst.max((u[[2 * i, 0]] - u[[2 * i + 1, 0]]).abs());
        }
    }
    assert!(worst <= 1e-9, "worst gap {worst:e}");
}

#[test]
fn hard_deeponet_tx_reproduces_sampled_initial_functions() {
    let d = Domain::tx((0.0, 1.0), (0.0, 2.0)).unwrap();
    let mut spec = ProblemSpec::new(ProblemKind::PdeTx, ModelKind::DeepOnet, &["ut+ux"], d.clone());
    spec.initial = Some(InitialSpec::new(vec![vec![f("sin(pi*x)", &["x"])]], 10).unwrap());
    spec.boundary = Some(BoundarySpec::periodic());
    spec.constraint = ConstraintMode::Hard;
    spec.network = NetworkConfig { layers: 2, units: 20, p: None };
    spec.sensors =
        Some(SensorConfig { sensors: 16, samples: 20, range: (-2.0, 2.0), family: spec.expected_family(), seed: 4 });
    let set = sample_sensors(spec.sensors.as_ref().unwrap(), &d).unwrap();
    let xs: Vec<f64> = (0..25).map(|i| 2.0 * i as f64 / 24.0).collect();
    let pts = column(&xs, 0.0);
    for seed in 0..50 {
        let h = random_handle(&spec, seed);
        for (row, func) in set.values.rows().into_iter().zip(&set.functions) {
            let SampledFunction::Series(parts) = func else { panic!("series input expected") };
            let u = h.evaluate(&pts, Some(row.as_slice().unwrap())).unwrap();
            for (i, &x) in xs.iter().enumerate() {
                assert!((u[[i, 0]] - parts[0].value(x)).abs() <= 1e-10, "x = {x}");
            }
        }
    }
}

#[test]
fn hard_constraints_survive_training() {
    let mut spec = poisson_spec();
    spec.interior = 200;
    spec.network = NetworkConfig { layers: 2, units: 10, p: None };
    spec.train.epochs = 20;
    spec.train.learning_rate = 1e-2;
    let h = diffnet::solvers::solve(&spec).unwrap();
    assert_eq!(h.term_evaluations[2], 0, "boundary loss must never run");
    let mut pts = Array2::zeros((40, 2));
    for i in 0..40 {
        let s = -1.0 + 2.0 * i as f64 / 39.0;
        pts[[i, 0]] = s;
        pts[[i, 1]] = if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let u = h.evaluate(&pts, None).unwrap();
    for i in 0..40 {
        let exact = (std::f64::consts::PI * pts[[i, 0]]).cos() * (std::f64::consts::PI * pts[[i, 1]]).sin();
        assert!((u[[i, 0]] - exact).abs() <= 1e-10);
    }
}
