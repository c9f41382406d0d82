//! Residual-expression grammar.
//!
//! Equations are written as the left-hand side of `expr = 0`, e.g.
//! `"ut+ux"` for the advection equation. Identifiers made of a dependent
//! variable name followed by independent-variable letters are partial
//! derivatives: with dependent `u` and independent `t, x`, `uxx` is
//! ∂²u/∂x² and `utx` the mixed partial. The full grammar:
//!
//! ```text
//! expr    = term { ("+" | "-") term } ;
//! term    = unary { ("*" | "/") unary } ;
//! unary   = "-" unary | power ;
//! power   = primary [ ("^" | "**") unary ] ;
//! primary = number | constant | coordinate | derivative
//!         | function "(" expr ")" | "(" expr ")" ;
//! function = "sin" | "cos" | "tan" | "tanh" | "exp" | "log" | "sqrt" | "abs" ;
//! constant = "pi" | "e" ;
//! ```
//!
//! `^` binds tighter than unary minus and is right-associative, so `-x^2`
//! is `-(x^2)` and `2^-1` is `0.5`.

mod eval;
mod lexer;
mod parser;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{Graph, Tape, Var};

pub use eval::EvalError;

/// Letters that may name an independent variable.
pub const INDEPENDENT_LETTERS: [&str; 3] = ["t", "x", "y"];

const FUNCTIONS: [&str; 8] = ["sin", "cos", "tan", "tanh", "exp", "log", "sqrt", "abs"];
const CONSTANTS: [&str; 2] = ["pi", "e"];

/// Default derivative-order cap when none is given.
pub const DEFAULT_ORDER_CAP: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("column {}: {message}", position + 1)]
    Lexical { position: usize, message: String },
    #[error("column {}: {message}", position + 1)]
    Syntax { position: usize, message: String },
    #[error("column {}: derivative of '{variable}' has order {order}, above the cap of {cap}", position + 1)]
    OrderCap { position: usize, variable: String, order: usize, cap: usize },
    #[error("column {}: independent variable '{name}' is not declared for this problem", position + 1)]
    UndeclaredVariable { position: usize, name: String },
    #[error("invalid variable configuration: {0}")]
    Config(String),
    #[error("empty expression")]
    Empty,
}

impl ParseError {
    pub fn position(&self) -> Option<usize> {
        match self {
            ParseError::Lexical { position, .. }
            | ParseError::Syntax { position, .. }
            | ParseError::OrderCap { position, .. }
            | ParseError::UndeclaredVariable { position, .. } => Some(*position),
            ParseError::Config(_) | ParseError::Empty => None,
        }
    }
}

/// Names of the dependent and independent variables of a problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarConfig {
    dependent: Vec<String>,
    independent: Vec<String>,
    caps: Vec<usize>,
}

impl VarConfig {
    pub fn new<S: AsRef<str>>(dependent: &[S], independent: &[S]) -> Result<Self, ParseError> {
        if dependent.is_empty() {
            return Err(ParseError::Config("at least one dependent variable is required".into()));
        }
        Self::build(dependent, independent)
    }

    /// Configuration for plain functions of the independent variables, such
    /// as initial conditions or analytic solutions.
    pub fn functions_of<S: AsRef<str>>(independent: &[S]) -> Result<Self, ParseError> {
        Self::build::<S>(&[], independent)
    }

    fn build<S: AsRef<str>>(dependent: &[S], independent: &[S]) -> Result<Self, ParseError> {
        let dependent: Vec<String> = dependent.iter().map(|s| s.as_ref().to_string()).collect();
        let independent: Vec<String> = independent.iter().map(|s| s.as_ref().to_string()).collect();
        if independent.is_empty() {
            return Err(ParseError::Config("at least one independent variable is required".into()));
        }
        for name in &independent {
            if !INDEPENDENT_LETTERS.contains(&name.as_str()) {
                return Err(ParseError::Config(format!("independent variable '{name}' must be one of t, x, y")));
            }
        }
        for name in &dependent {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(ParseError::Config(format!("dependent variable '{name}' must be lowercase alphabetic")));
            }
            if independent.contains(name)
                || INDEPENDENT_LETTERS.contains(&name.as_str())
                || FUNCTIONS.contains(&name.as_str())
                || CONSTANTS.contains(&name.as_str())
            {
                return Err(ParseError::Config(format!("dependent variable name '{name}' is reserved")));
            }
        }
        let mut seen = BTreeSet::new();
        for name in dependent.iter().chain(&independent) {
            if !seen.insert(name) {
                return Err(ParseError::Config(format!("variable '{name}' declared twice")));
            }
        }
        let caps = vec![DEFAULT_ORDER_CAP; dependent.len()];
        Ok(VarConfig { dependent, independent, caps })
    }

    /// Sets the maximum total derivative order for each dependent variable.
    pub fn with_caps(mut self, caps: &[usize]) -> Result<Self, ParseError> {
        if caps.len() != self.dependent.len() {
            return Err(ParseError::Config(format!(
                "{} order caps given for {} dependent variables",
                caps.len(),
                self.dependent.len()
            )));
        }
        self.caps = caps.to_vec();
        Ok(self)
    }

    pub fn dependent(&self) -> &[String] {
        &self.dependent
    }

    pub fn independent(&self) -> &[String] {
        &self.independent
    }

    pub fn caps(&self) -> &[usize] {
        &self.caps
    }

    pub fn independent_index(&self, name: &str) -> Option<usize> {
        self.independent.iter().position(|n| n == name)
    }
}

/// Reference to a partial derivative of a dependent variable. `partials`
/// holds independent-variable indices, sorted, one entry per
/// differentiation; an empty list is the variable itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DerivKey {
    pub var: usize,
    pub partials: Vec<usize>,
}

impl DerivKey {
    pub fn new(var: usize, mut partials: Vec<usize>) -> Self {
        partials.sort_unstable();
        DerivKey { var, partials }
    }

    pub fn value(var: usize) -> Self {
        DerivKey { var, partials: Vec::new() }
    }

    pub fn order(&self) -> usize {
        self.partials.len()
    }

    /// Differentiation count per independent variable.
    pub fn multi_index(&self, nvars: usize) -> Vec<u8> {
        let mut m = vec![0u8; nvars];
        for &p in &self.partials {
            m[p] += 1;
        }
        m
    }

    /// Source spelling, e.g. `uxx`.
    pub fn label(&self, config: &VarConfig) -> String {
        let mut s = config.dependent[self.var].clone();
        for &p in &self.partials {
            s.push_str(&config.independent[p]);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constant {
    Pi,
    E,
}

impl Constant {
    pub fn value(self) -> f64 {
        match self {
            Constant::Pi => std::f64::consts::PI,
            Constant::E => std::f64::consts::E,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Const(Constant),
    /// Independent variable by index.
    Coord(usize),
    Deriv(DerivKey),
    Func(Func, Box<Expr>),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Func(_, a) | Expr::Neg(a) => a.visit(f),
            Expr::Bin(_, a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }

    /// Integer value of a literal exponent, if it is one.
    pub(crate) fn integer_literal(&self) -> Option<i32> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Neg(inner) => match **inner {
                Expr::Num(v) => -v,
                _ => return None,
            },
            _ => return None,
        };
        (v.fract() == 0.0 && v.abs() <= 1024.0).then_some(v as i32)
    }

    /// Lowers the expression into `graph`. `coords[i]` is the node of
    /// independent variable `i`; `deriv` supplies nodes for derivative
    /// references.
    pub fn lower<'g>(
        &self,
        graph: &'g Graph,
        coords: &[Var<'g>],
        deriv: &mut dyn FnMut(&DerivKey) -> Var<'g>,
    ) -> Var<'g> {
        match self {
            Expr::Num(v) => graph.constant(*v),
            Expr::Const(c) => graph.constant(c.value()),
            Expr::Coord(i) => coords[*i],
            Expr::Deriv(k) => deriv(k),
            Expr::Neg(a) => -a.lower(graph, coords, deriv),
            Expr::Func(f, a) => {
                let a = a.lower(graph, coords, deriv);
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Tanh => a.tanh(),
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Sqrt => a.sqrt(),
                    Func::Abs => a.abs(),
                }
            }
            Expr::Bin(op, a, b) => {
                let l = a.lower(graph, coords, deriv);
                if *op == BinOp::Pow {
                    return match b.integer_literal() {
                        Some(n) => l.powi(n),
                        None => l.pow(b.lower(graph, coords, deriv)),
                    };
                }
                let r = b.lower(graph, coords, deriv);
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => l / r,
                    BinOp::Pow => unreachable!(),
                }
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }

    fn write(&self, out: &mut String, config: &VarConfig, min_prec: u8) {
        let wrap = self.precedence() < min_prec;
        if wrap {
            out.push('(');
        }
        match self {
            Expr::Num(v) => {
                if v.is_sign_negative() {
                    out.push('-');
                    out.push_str(&format!("{}", -v));
                } else {
                    out.push_str(&format!("{v}"));
                }
            }
            Expr::Const(Constant::Pi) => out.push_str("pi"),
            Expr::Const(Constant::E) => out.push('e'),
            Expr::Coord(i) => out.push_str(&config.independent[*i]),
            Expr::Deriv(k) => out.push_str(&k.label(config)),
            Expr::Func(f, a) => {
                out.push_str(f.name());
                out.push('(');
                a.write(out, config, 0);
                out.push(')');
            }
            Expr::Neg(a) => {
                out.push('-');
                a.write(out, config, 3);
            }
            Expr::Bin(op, a, b) => {
                let (sym, lp, rp) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                a.write(out, config, lp);
                out.push_str(sym);
                b.write(out, config, rp);
            }
        }
        if wrap {
            out.push(')');
        }
    }
}

/// A parsed residual `Δ(t, x, u, ...)`, the left-hand side of `Δ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAst {
    expr: Expr,
    config: Arc<VarConfig>,
}

impl ResidualAst {
    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn config(&self) -> &VarConfig {
        &self.config
    }

    /// Highest total derivative order referenced.
    pub fn max_order(&self) -> usize {
        derivative_requirements(self).iter().map(DerivKey::order).max().unwrap_or(0)
    }

    /// Canonical source text; parsing it again yields an identical tree.
    pub fn to_source(&self) -> String {
        let mut s = String::new();
        self.expr.write(&mut s, &self.config, 0);
        s
    }

    /// Lowers the residual into a tape whose leaves are the independent
    /// variables (in declaration order) followed by the derivative values
    /// listed in [`CompiledResidual::requirements`].
    pub fn compile(&self) -> CompiledResidual {
        let requirements: Vec<DerivKey> = derivative_requirements(self).into_iter().collect();
        let g = Graph::new();
        let coords: Vec<Var> = self.config.independent.iter().map(|_| g.input()).collect();
        let derivs: Vec<Var> = requirements.iter().map(|_| g.input()).collect();
        let root = self.expr.lower(&g, &coords, &mut |k| {
            let i = requirements.binary_search(k).expect("requirement collected from the same tree");
            derivs[i]
        });
        CompiledResidual { tape: g.finish(root), requirements, ncoords: coords.len() }
    }
}

impl fmt::Display for ResidualAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_source())
    }
}

/// A residual lowered to an autodiff tape.
#[derive(Debug, Clone)]
pub struct CompiledResidual {
    pub tape: Tape,
    pub requirements: Vec<DerivKey>,
    ncoords: usize,
}

impl CompiledResidual {
    /// Leaf index of independent variable `i`.
    pub fn coord_leaf(&self, i: usize) -> usize {
        i
    }

    /// Leaf index of the `j`-th requirement.
    pub fn deriv_leaf(&self, j: usize) -> usize {
        self.ncoords + j
    }

    pub fn coord_count(&self) -> usize {
        self.ncoords
    }
}

/// Parses a residual expression.
pub fn parse(source: &str, config: &VarConfig) -> Result<ResidualAst, ParseError> {
    let expr = parser::parse_expr(source, config)?;
    Ok(ResidualAst { expr, config: Arc::new(config.clone()) })
}

/// Every derivative reference in the tree, deduplicated.
pub fn derivative_requirements(ast: &ResidualAst) -> BTreeSet<DerivKey> {
    let mut set = BTreeSet::new();
    ast.expr.visit(&mut |e| {
        if let Expr::Deriv(k) = e {
            set.insert(k.clone());
        }
    });
    set
}

/// Evaluates a residual at one point. `coords` maps independent-variable
/// names to values and `derivs` supplies every derivative reference.
pub fn eval_residual(
    ast: &ResidualAst,
    coords: &HashMap<String, f64>,
    derivs: &HashMap<DerivKey, f64>,
) -> Result<f64, EvalError> {
    let config = &ast.config;
    let coord_values: Vec<Option<f64>> = config.independent.iter().map(|n| coords.get(n).copied()).collect();
    eval::evaluate(
        &ast.expr,
        &|i| coord_values[i].ok_or_else(|| EvalError::MissingCoordinate(config.independent[i].clone())),
        &|k| derivs.get(k).copied().ok_or_else(|| EvalError::MissingDerivative(k.label(config))),
    )
}

/// A function of the independent variables only, such as an initial
/// condition, boundary function or analytic solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionExpr {
    expr: Expr,
    config: Arc<VarConfig>,
    source: String,
}

impl FunctionExpr {
    pub fn parse<S: AsRef<str>>(source: &str, independent: &[S]) -> Result<Self, ParseError> {
        let config = VarConfig::functions_of(independent)?;
        let expr = parser::parse_expr(source, &config)?;
        Ok(FunctionExpr { expr, config: Arc::new(config), source: source.to_string() })
    }

    /// The constant function `value`.
    pub fn constant<S: AsRef<str>>(value: f64, independent: &[S]) -> Self {
        let config = VarConfig::functions_of(independent).expect("valid independent variables");
        let expr = if value.is_sign_negative() { Expr::Neg(Box::new(Expr::Num(-value))) } else { Expr::Num(value) };
        FunctionExpr { expr, config: Arc::new(config), source: format!("{value}") }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn independent(&self) -> &[String] {
        &self.config.independent
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// Evaluates at `point`, given in the order of [`Self::independent`].
    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        eval::evaluate(&self.expr, &|i| Ok(point[i]), &|k| Err(EvalError::MissingDerivative(format!("{k:?}"))))
    }

    /// Inlines the function into `graph` with the given coordinate nodes.
    pub fn lower<'g>(&self, graph: &'g Graph, coords: &[Var<'g>]) -> Var<'g> {
        self.expr.lower(graph, coords, &mut |_| unreachable!("function expressions have no derivatives"))
    }

    /// Tape with one input leaf per independent variable.
    pub fn compile(&self) -> Tape {
        let g = Graph::new();
        let coords: Vec<Var> = self.config.independent.iter().map(|_| g.input()).collect();
        let root = self.lower(&g, &coords);
        g.finish(root)
    }

    /// Whether the function reads independent variable `i` at all.
    pub fn depends_on(&self, i: usize) -> bool {
        let mut found = false;
        self.expr.visit(&mut |e| {
            if matches!(e, Expr::Coord(j) if *j == i) {
                found = true;
            }
        });
        found
    }
}

/// Rewrites framework-qualified spellings such as `tf.cos(np.pi*x)` into the
/// plain grammar (`cos(pi*x)`).
pub fn normalize_source(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let chars: Vec<char> = source.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let at_word_start = i == 0 || !(chars[i - 1].is_ascii_alphanumeric() || chars[i - 1] == '_');
        if at_word_start {
            let rest: String = chars[i..].iter().take(6).collect();
            if let Some(prefix) = ["math.", "np.", "tf.", "jnp."].iter().find(|p| rest.starts_with(**p)) {
                i += prefix.len();
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dep: &[&str], ind: &[&str]) -> VarConfig {
        VarConfig::new(dep, ind).unwrap()
    }

    fn d(var: usize, partials: &[usize]) -> DerivKey {
        DerivKey::new(var, partials.to_vec())
    }

    #[test]
    fn advection_residual() {
        let ast = parse("ut+ux", &cfg(&["u"], &["t", "x"])).unwrap();
        assert_eq!(
            *ast.expr(),
            Expr::Bin(BinOp::Add, Box::new(Expr::Deriv(d(0, &[0]))), Box::new(Expr::Deriv(d(0, &[1]))))
        );
    }

    #[test]
    fn second_order_ode_residual() {
        let ast = parse("utt + u", &cfg(&["u"], &["t"])).unwrap();
        assert_eq!(
            *ast.expr(),
            Expr::Bin(BinOp::Add, Box::new(Expr::Deriv(d(0, &[0, 0]))), Box::new(Expr::Deriv(d(0, &[]))))
        );
    }

    #[test]
    fn poisson_requirements() {
        let ast = parse("uxx + uyy + 2*pi^2*cos(pi*x)*sin(pi*y)", &cfg(&["u"], &["x", "y"])).unwrap();
        let req = derivative_requirements(&ast);
        assert_eq!(req.into_iter().collect::<Vec<_>>(), vec![d(0, &[0, 0]), d(0, &[1, 1])]);
    }

    #[test]
    fn heat_requirements() {
        let ast = parse("0.1*uxx - ut", &cfg(&["u"], &["t", "x"])).unwrap();
        let req: Vec<_> = derivative_requirements(&ast).into_iter().collect();
        assert_eq!(req, vec![d(0, &[0]), d(0, &[1, 1])]);
        let constant = parse("2*pi - 1", &cfg(&["u"], &["t", "x"])).unwrap();
        assert!(derivative_requirements(&constant).is_empty());
    }

    #[test]
    fn mixed_partials_are_canonical() {
        let c = cfg(&["u"], &["x", "y"]);
        let a = parse("uxy", &c).unwrap();
        let b = parse("uyx", &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_source(), "uxy");
    }

    #[test]
    fn longest_dependent_prefix_wins() {
        let c = cfg(&["u", "uu"], &["t", "x"]);
        let ast = parse("uut", &c).unwrap();
        assert_eq!(*ast.expr(), Expr::Deriv(d(1, &[0])));
    }

    #[test]
    fn precedence_and_associativity() {
        let c = cfg(&["u"], &["x"]);
        let p = |s: &str| parse(s, &c).unwrap().to_source();
        assert_eq!(p("-x^2"), "-x^2");
        assert_eq!(
            parse("-x^2", &c).unwrap().expr(),
            &Expr::Neg(Box::new(Expr::Bin(BinOp::Pow, Box::new(Expr::Coord(0)), Box::new(Expr::Num(2.0)))))
        );
        assert_eq!(p("2^3^2"), "2^3^2");
        assert_eq!(p("(2^3)^2"), "(2^3)^2");
        assert_eq!(p("1-(2-3)"), "1 - (2 - 3)");
        assert_eq!(p("1-2-3"), "1 - 2 - 3");
        assert_eq!(p("x*(1+x)/2"), "x*(1 + x)/2");
        assert_eq!(p("x**2"), "x^2");
    }

    #[test]
    fn syntax_errors_report_position() {
        let c = cfg(&["u"], &["t", "x"]);
        let err = parse("ut+++ux", &c).unwrap_err();
        assert!(matches!(err, ParseError::Syntax { position: 3, .. }), "{err:?}");
        assert!(matches!(parse("(ut", &c), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("ut)", &c), Err(ParseError::Syntax { position: 2, .. })));
        assert!(matches!(parse("sin ut", &c), Err(ParseError::Syntax { .. })));
        assert_eq!(parse("   ", &c), Err(ParseError::Empty));
    }

    #[test]
    fn identifier_errors() {
        let c = cfg(&["u"], &["t", "x"]);
        assert!(matches!(parse("ut + q", &c), Err(ParseError::Lexical { position: 5, .. })));
        assert!(matches!(
            parse("uy + ut", &c),
            Err(ParseError::UndeclaredVariable { position: 0, ref name }) if name == "y"
        ));
        assert!(matches!(parse("y", &c), Err(ParseError::UndeclaredVariable { .. })));
        let capped = cfg(&["u"], &["t", "x"]).with_caps(&[2]).unwrap();
        assert!(matches!(parse("uxxx", &capped), Err(ParseError::OrderCap { order: 3, cap: 2, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(VarConfig::new(&["u", "x"], &["t", "x"]).is_err());
        assert!(VarConfig::new(&["U"], &["t"]).is_err());
        assert!(VarConfig::new(&["sin"], &["t"]).is_err());
        assert!(VarConfig::new::<&str>(&[], &["t"]).is_err());
        assert!(VarConfig::new(&["u"], &["z"]).is_err());
        assert!(VarConfig::new(&["u", "u"], &["t"]).is_err());
    }

    #[test]
    fn evaluates_known_cancellations() {
        let c = cfg(&["u"], &["t", "x"]);
        let ast = parse("ut+ux", &c).unwrap();
        let coords = HashMap::from([("t".to_string(), 0.2), ("x".to_string(), 0.4)]);
        let derivs = HashMap::from([(d(0, &[0]), 1.0), (d(0, &[1]), -1.0)]);
        assert_eq!(eval_residual(&ast, &coords, &derivs).unwrap(), 0.0);

        let ode = parse("utt + u", &cfg(&["u"], &["t"])).unwrap();
        let derivs = HashMap::from([(d(0, &[0, 0]), -0.5), (d(0, &[]), 0.5)]);
        let coords = HashMap::from([("t".to_string(), 0.0)]);
        assert_eq!(eval_residual(&ode, &coords, &derivs).unwrap(), 0.0);
    }

    #[test]
    fn heat_residual_vanishes_on_analytic_solution() {
        // u = exp(-ν π² t) sin(πx): at t = 0, x = 0.5 we have u_xx = -π² and
        // u_t = -ν π².
        let ast = parse("0.1*uxx - ut", &cfg(&["u"], &["t", "x"])).unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        let coords = HashMap::from([("t".to_string(), 0.0), ("x".to_string(), 0.5)]);
        let derivs = HashMap::from([(d(0, &[1, 1]), -pi2), (d(0, &[0]), -0.1 * pi2)]);
        assert!(eval_residual(&ast, &coords, &derivs).unwrap().abs() < 1e-12);
    }

    #[test]
    fn missing_inputs_are_errors() {
        let ast = parse("ut + x", &cfg(&["u"], &["t", "x"])).unwrap();
        let coords = HashMap::from([("t".to_string(), 0.0)]);
        let derivs = HashMap::from([(d(0, &[0]), 1.0)]);
        assert!(matches!(eval_residual(&ast, &coords, &derivs), Err(EvalError::MissingCoordinate(_))));
        let coords = HashMap::from([("t".to_string(), 0.0), ("x".to_string(), 1.0)]);
        assert!(matches!(
            eval_residual(&ast, &coords, &HashMap::new()),
            Err(EvalError::MissingDerivative(ref s)) if s == "ut"
        ));
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let ast = parse("u/(x-1)", &cfg(&["u"], &["x"])).unwrap();
        let coords = HashMap::from([("x".to_string(), 1.0)]);
        let derivs = HashMap::from([(d(0, &[]), 1.0)]);
        assert!(matches!(eval_residual(&ast, &coords, &derivs), Err(EvalError::Domain { .. })));
    }

    #[test]
    fn compiled_tape_agrees_with_interpreter() {
        let c = cfg(&["u", "v"], &["t", "x"]);
        let ast = parse("ut*v + sin(x)*vxx - u^3/exp(t) + 2^x", &c).unwrap();
        let compiled = ast.compile();
        let coords = [0.3, -0.7];
        let vals: Vec<f64> = (0..compiled.requirements.len()).map(|j| 0.5 + j as f64).collect();
        let mut leaves = coords.to_vec();
        leaves.extend(&vals);
        let via_tape = compiled.tape.forward(&leaves).unwrap();
        let coord_map = HashMap::from([("t".to_string(), 0.3), ("x".to_string(), -0.7)]);
        let deriv_map: HashMap<DerivKey, f64> =
            compiled.requirements.iter().cloned().zip(vals.iter().copied()).collect();
        let direct = eval_residual(&ast, &coord_map, &deriv_map).unwrap();
        assert!((via_tape - direct).abs() < 1e-14, "{via_tape} vs {direct}");
    }

    #[test]
    fn function_expressions() {
        let f = FunctionExpr::parse("cos(pi*x)*sin(pi*y)", &["x", "y"]).unwrap();
        assert!((f.eval(&[0.0, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        assert!(f.depends_on(0) && f.depends_on(1));
        assert!(FunctionExpr::parse("ux", &["x"]).is_err());
        let c = FunctionExpr::constant(-2.0, &["t"]);
        assert_eq!(c.eval(&[3.0]).unwrap(), -2.0);
    }

    #[test]
    fn normalizes_framework_prefixes() {
        assert_eq!(
            normalize_source("uxx + uyy - (-2*np.pi**2*tf.cos(np.pi*x)*tf.sin(np.pi*y))"),
            "uxx + uyy - (-2*pi**2*cos(pi*x)*sin(pi*y))"
        );
        assert_eq!(normalize_source("np.e**(-((np.pi**2) * 0.1 * t))"), "e**(-((pi**2) * 0.1 * t))");
    }
}
