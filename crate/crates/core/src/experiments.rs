//! The numerical experiments: parameters, manufactured solutions, data
//! files and convergence tables.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::adaptivity::{
    adaptive_loop_with, compute_eoc, mean_last_rates, AdaptConfig, Column, ConvergenceRecord, LoopStatus,
};
use crate::error::ExperimentError;
use crate::mesh::{build_lshape, build_rectangle_spacetime, build_unit_square, Mesh, Point};
use crate::problems::{ControlConstraints, OptimalControlProblem, ProblemKind, ScalarFn};
use crate::vi_solver::{ExactSolution, SolverConfig};

pub const EXPERIMENTS: [&str; 5] = ["poisson-unconstrained", "poisson-constrained", "lshape", "stokes", "heat"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinementMode {
    Uniform,
    Adaptive,
}

impl RefinementMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefinementMode::Uniform => "uniform",
            RefinementMode::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for RefinementMode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(RefinementMode::Uniform),
            "adaptive" => Ok(RefinementMode::Adaptive),
            _ => Err(ExperimentError::Config(format!("unknown refinement mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    UnitSquare,
    /// `(-1, 1)² \ [-1, 0]²`.
    LShape,
    /// `(0, t_end) × (0, 1)`, coordinates `(t, x)`.
    SpaceTime { t_end: f64 },
}

impl Domain {
    pub fn mesh(self, n: usize) -> Mesh {
        match self {
            Domain::UnitSquare => build_unit_square(n),
            Domain::LShape => build_lshape(n),
            Domain::SpaceTime { t_end } => build_rectangle_spacetime(t_end, n),
        }
    }

    fn describe(self) -> String {
        match self {
            Domain::UnitSquare => "(0,1)^2".into(),
            Domain::LShape => "(-1,1)^2 \\ [-1,0]^2".into(),
            Domain::SpaceTime { t_end } => format!("(0,{t_end}) x (0,1)"),
        }
    }
}

/// Parameters of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: &'static str,
    pub kind: ProblemKind,
    pub domain: Domain,
    pub lambda: f64,
    pub lambda0: f64,
    pub bounds: ControlConstraints,
    pub gamma: f64,
    pub theta: f64,
    pub mode: RefinementMode,
    /// Cells per unit length of the initial mesh.
    pub n0: usize,
    pub max_dofs: usize,
    pub levels: Option<usize>,
}

impl ExperimentSpec {
    pub fn by_name(name: &str) -> Result<Self, ExperimentError> {
        let base = |name, kind, domain, lambda, bounds, max_dofs| ExperimentSpec {
            name,
            kind,
            domain,
            lambda,
            lambda0: 0.0,
            bounds,
            gamma: 5.0,
            theta: 0.25,
            mode: RefinementMode::Uniform,
            n0: 2,
            max_dofs,
            levels: None,
        };
        let free = ControlConstraints::unconstrained();
        let box_ = |a, b| ControlConstraints::new(a, b).expect("valid bounds");
        Ok(match name {
            "poisson-unconstrained" => base(
                "poisson-unconstrained",
                ProblemKind::DiffusionReactionConvection,
                Domain::UnitSquare,
                1e-2,
                free,
                100_000,
            ),
            "poisson-constrained" => base(
                "poisson-constrained",
                ProblemKind::DiffusionReactionConvection,
                Domain::UnitSquare,
                1e-2,
                box_(-1.0, 0.0),
                100_000,
            ),
            "lshape" => ExperimentSpec {
                mode: RefinementMode::Adaptive,
                ..base(
                    "lshape",
                    ProblemKind::DiffusionReactionConvection,
                    Domain::LShape,
                    1.0,
                    box_(0.1, 0.12),
                    100_000,
                )
            },
            "stokes" => base(
                "stokes",
                ProblemKind::StokesPseudostress,
                Domain::UnitSquare,
                1e-1,
                free,
                60_000,
            ),
            "heat" => ExperimentSpec {
                lambda0: 1e-1,
                bounds: box_(-1.0, 0.0).with_initial_bounds(-1.0, 0.0).expect("valid bounds"),
                ..base(
                    "heat",
                    ProblemKind::HeatSpaceTime1D,
                    Domain::SpaceTime { t_end: 1.0 },
                    1e-1,
                    free,
                    50_000,
                )
            },
            other => return Err(ExperimentError::UnknownExperiment(other.to_string())),
        })
    }

    pub fn apply(&mut self, opts: &RunOptions) -> Result<(), ExperimentError> {
        if let Some(n0) = opts.n0 {
            if n0 == 0 {
                return Err(ExperimentError::Config("n0 must be positive".into()));
            }
            self.n0 = n0;
        }
        if let Some(m) = opts.max_dofs {
            self.max_dofs = m;
        }
        if let Some(k) = opts.levels {
            if k == 0 {
                return Err(ExperimentError::Config("levels must be positive".into()));
            }
            self.levels = Some(k);
            self.max_dofs = usize::MAX;
        }
        if let Some(t) = opts.theta {
            self.theta = t;
        }
        if let Some(g) = opts.gamma {
            self.gamma = g;
        }
        if let Some(m) = opts.mode {
            self.mode = m;
        }
        SolverConfig::with_gamma(self.gamma)?;
        self.adapt_config()?;
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            gamma: self.gamma,
            ..SolverConfig::default()
        }
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, ExperimentError> {
        Ok(AdaptConfig::new(
            self.theta,
            self.max_dofs,
            self.levels,
            self.mode == RefinementMode::Uniform,
        )?)
    }

    pub fn initial_mesh(&self) -> Mesh {
        self.domain.mesh(self.n0)
    }

    pub fn case(&self) -> Option<ManufacturedCase> {
        exact_fields(self.name).ok()
    }

    pub fn problem(&self) -> Result<OptimalControlProblem, ExperimentError> {
        let mut p = match self.case() {
            Some(case) => case.problem()?,
            None => {
                let c = |v: f64| -> ScalarFn { Arc::new(move |_| v) };
                OptimalControlProblem::poisson(self.lambda, self.bounds, c(0.0), c(1.0))?
            }
        };
        p.lambda = self.lambda;
        p.lambda0 = self.lambda0;
        p.bounds = self.bounds;
        Ok(p)
    }

    /// Self-describing parameter dump.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let b = &self.bounds;
        let _ = writeln!(s, "experiment = {}", self.name);
        let _ = writeln!(s, "problem = {:?}", self.kind);
        let _ = writeln!(s, "domain = {}", self.domain.describe());
        let _ = writeln!(s, "lambda = {}", self.lambda);
        if self.kind == ProblemKind::HeatSpaceTime1D {
            let _ = writeln!(s, "lambda0 = {}", self.lambda0);
        }
        let _ = writeln!(s, "bounds = [{}, {}]", b.lower, b.upper);
        if self.kind == ProblemKind::HeatSpaceTime1D {
            let _ = writeln!(s, "bounds0 = [{}, {}]", b.lower0, b.upper0);
        }
        let _ = writeln!(
            s,
            "solver = {}",
            if b.is_unconstrained() { "unconstrained" } else { "active-set" }
        );
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "theta = {}", self.theta);
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "n0 = {}", self.n0);
        match self.levels {
            Some(k) => {
                let _ = writeln!(s, "levels = {k}");
            }
            None => {
                let _ = writeln!(s, "max_dofs = {}", self.max_dofs);
            }
        }
        let _ = writeln!(s, "manufactured = {}", self.case().is_some());
        s
    }
}

/// Values, gradients and Laplacians of up to two components. For the heat
/// problem the gradient is `(∂_t, ∂_x)` and `lap` is `∂_xx`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: [f64; 2],
    pub grad: [[f64; 2]; 2],
    pub lap: [f64; 2],
}

/// Closed-form optimal triple with the data derived from it.
#[derive(Clone, Copy, Debug)]
pub struct ManufacturedCase {
    pub name: &'static str,
    pub kind: ProblemKind,
    pub lambda: f64,
    pub lambda0: f64,
    pub bounds: ControlConstraints,
    pub t_end: f64,
    pub y: fn(Point) -> Jet,
    pub p: fn(Point) -> Jet,
}

fn g(s: f64) -> f64 {
    s * (1.0 - s)
}

fn poisson_y(x: Point) -> Jet {
    let (sx, cx) = (PI * x[0]).sin_cos();
    let (sy, cy) = (PI * x[1]).sin_cos();
    Jet {
        value: [sx * sy, 0.0],
        grad: [[PI * cx * sy, PI * sx * cy], [0.0; 2]],
        lap: [-2.0 * PI * PI * sx * sy, 0.0],
    }
}

fn poisson_p(x: Point) -> Jet {
    let (gx, gy) = (g(x[0]), g(x[1]));
    Jet {
        value: [gx * gy, 0.0],
        grad: [[(1.0 - 2.0 * x[0]) * gy, gx * (1.0 - 2.0 * x[1])], [0.0; 2]],
        lap: [-2.0 * (gx + gy), 0.0],
    }
}

/// `G = g²` and its first three derivatives.
fn bump(s: f64) -> [f64; 4] {
    [
        s * s * (1.0 - s) * (1.0 - s),
        2.0 * s - 6.0 * s * s + 4.0 * s * s * s,
        2.0 - 12.0 * s + 12.0 * s * s,
        -12.0 + 24.0 * s,
    ]
}

/// `curl (G(x) G(y)) = (G(x) G'(y), -G'(x) G(y))`.
fn stokes_field(x: Point) -> Jet {
    let a = bump(x[0]);
    let b = bump(x[1]);
    Jet {
        value: [a[0] * b[1], -a[1] * b[0]],
        grad: [[a[1] * b[1], a[0] * b[2]], [-a[2] * b[0], -a[1] * b[1]]],
        lap: [a[2] * b[1] + a[0] * b[3], -a[3] * b[0] - a[1] * b[2]],
    }
}

fn heat_y(x: Point) -> Jet {
    let (t, s) = (x[0], x[1]);
    let (ss, cs) = (PI * s).sin_cos();
    Jet {
        value: [t * ss, 0.0],
        grad: [[ss, PI * t * cs], [0.0; 2]],
        lap: [-PI * PI * t * ss, 0.0],
    }
}

fn heat_p(x: Point) -> Jet {
    let (t, s) = (x[0], x[1]);
    Jet {
        value: [(1.0 - t) * g(s), 0.0],
        grad: [[-g(s), (1.0 - t) * (1.0 - 2.0 * s)], [0.0; 2]],
        lap: [-2.0 * (1.0 - t), 0.0],
    }
}

/// Manufactured solution of a named experiment.
pub fn exact_fields(name: &str) -> Result<ManufacturedCase, ExperimentError> {
    let spec = ExperimentSpec::by_name(name)?;
    let (y, p): (fn(Point) -> Jet, fn(Point) -> Jet) = match name {
        "poisson-unconstrained" | "poisson-constrained" => (poisson_y, poisson_p),
        "stokes" => (stokes_field, stokes_field),
        "heat" => (heat_y, heat_p),
        _ => {
            return Err(ExperimentError::Config(format!(
                "experiment '{name}' has no manufactured solution"
            )))
        }
    };
    Ok(ManufacturedCase {
        name: spec.name,
        kind: spec.kind,
        lambda: spec.lambda,
        lambda0: spec.lambda0,
        bounds: spec.bounds,
        t_end: match spec.domain {
            Domain::SpaceTime { t_end } => t_end,
            _ => 0.0,
        },
        y,
        p,
    })
}

impl ManufacturedCase {
    fn dim(&self) -> usize {
        if self.kind == ProblemKind::StokesPseudostress {
            2
        } else {
            1
        }
    }

    /// `u = Π(-p/λ)`, per component.
    pub fn control_value(&self, x: Point) -> [f64; 2] {
        let p = (self.p)(x).value;
        let b = &self.bounds;
        [
            (-p[0] / self.lambda).clamp(b.lower, b.upper),
            (-p[1] / self.lambda).clamp(b.lower, b.upper),
        ]
    }

    /// `u₀ = Π₀(-p(0)/λ₀)` at the spatial coordinate of `x`.
    pub fn control0_value(&self, x: Point) -> Option<f64> {
        if self.kind != ProblemKind::HeatSpaceTime1D || self.lambda0 <= 0.0 {
            return None;
        }
        let p = (self.p)([0.0, x[1]]).value[0];
        Some((-p / self.lambda0).clamp(self.bounds.lower0, self.bounds.upper0))
    }

    /// Right-hand side component `c`.
    pub fn f(&self, x: Point, c: usize) -> f64 {
        let y = (self.y)(x);
        let u = self.control_value(x)[c];
        match self.kind {
            ProblemKind::HeatSpaceTime1D => y.grad[0][0] - y.lap[0] - u,
            _ => -y.lap[c] - u,
        }
    }

    /// Desired state component `c`.
    pub fn z_d(&self, x: Point, c: usize) -> f64 {
        let y = (self.y)(x);
        let p = (self.p)(x);
        match self.kind {
            ProblemKind::HeatSpaceTime1D => p.grad[0][0] + p.lap[0] + y.value[0],
            _ => p.lap[c] + y.value[c],
        }
    }

    /// `z_{d,T} = y(T) - p(T)`.
    pub fn z_dt(&self, x: Point) -> f64 {
        let t = [self.t_end, x[1]];
        (self.y)(t).value[0] - (self.p)(t).value[0]
    }

    /// Initial datum `y₀ = y(0) - u₀` so that `y(0) = y₀ + u₀`.
    pub fn y0(&self, x: Point) -> f64 {
        (self.y)([0.0, x[1]]).value[0] - self.control0_value(x).unwrap_or(0.0)
    }

    pub fn problem(&self) -> Result<OptimalControlProblem, ExperimentError> {
        let me = *self;
        let comp = |c: usize, which: fn(&ManufacturedCase, Point, usize) -> f64| -> ScalarFn {
            Arc::new(move |x| which(&me, x, c))
        };
        let p = match self.kind {
            ProblemKind::DiffusionReactionConvection => {
                OptimalControlProblem::poisson(self.lambda, self.bounds, comp(0, Self::f), comp(0, Self::z_d))?
            }
            ProblemKind::StokesPseudostress => OptimalControlProblem::stokes(
                self.lambda,
                self.bounds,
                [comp(0, Self::f), comp(1, Self::f)],
                [comp(0, Self::z_d), comp(1, Self::z_d)],
            )?,
            ProblemKind::HeatSpaceTime1D => OptimalControlProblem::heat(
                self.t_end,
                self.lambda,
                self.lambda0,
                self.bounds,
                comp(0, Self::f),
                comp(0, Self::z_d),
                Arc::new(move |x| me.y0(x)),
                Arc::new(move |x| me.z_dt(x)),
            )?,
        };
        Ok(p)
    }
}

impl ExactSolution for ManufacturedCase {
    fn state_norm(&self, x: Point, out: &mut [f64]) {
        let y = (self.y)(x);
        match self.kind {
            ProblemKind::DiffusionReactionConvection => {
                out[..5].copy_from_slice(&[y.grad[0][0], y.grad[0][1], -y.grad[0][0], -y.grad[0][1], -y.lap[0]]);
            }
            ProblemKind::StokesPseudostress => stokes_norm(&y, out),
            ProblemKind::HeatSpaceTime1D => {
                out[..3].copy_from_slice(&[y.grad[0][1], y.grad[0][1], y.grad[0][0] - y.lap[0]]);
            }
        }
    }

    fn adjoint_norm(&self, x: Point, out: &mut [f64]) {
        let p = (self.p)(x);
        match self.kind {
            ProblemKind::DiffusionReactionConvection => {
                out[..5].copy_from_slice(&[p.grad[0][0], p.grad[0][1], p.grad[0][0], p.grad[0][1], p.lap[0]]);
            }
            ProblemKind::StokesPseudostress => stokes_norm(&p, out),
            ProblemKind::HeatSpaceTime1D => {
                out[..3].copy_from_slice(&[p.grad[0][1], p.grad[0][1], p.grad[0][0] + p.lap[0]]);
            }
        }
    }

    fn control(&self, x: Point, out: &mut [f64]) {
        let u = self.control_value(x);
        out[..self.dim()].copy_from_slice(&u[..self.dim()]);
    }

    fn control0(&self, x: Point) -> Option<f64> {
        self.control0_value(x)
    }
}

/// `[∇v (row-major), M = ∇v, div M = Δv]`.
fn stokes_norm(v: &Jet, out: &mut [f64]) {
    let gr = [v.grad[0][0], v.grad[0][1], v.grad[1][0], v.grad[1][1]];
    out[..4].copy_from_slice(&gr);
    out[4..8].copy_from_slice(&gr);
    out[8..10].copy_from_slice(&v.lap);
}

pub const DATA_HEADER: &str = "dofLSQ estLSQ errState errAdjoint errU errU0 iterAS hMax level";

/// Plain decimal with 16 significant digits.
fn plain(v: f64) -> String {
    if !v.is_finite() {
        return "nan".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (15 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), plain)
}

pub fn format_datafile(records: &[ConvergenceRecord]) -> String {
    let mut s = String::from(DATA_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {}",
            r.n_dofs,
            plain(r.estimator),
            opt(r.err_state),
            opt(r.err_adjoint),
            opt(r.err_u),
            opt(r.err_u0),
            r.iterations.map_or_else(|| "nan".into(), |k| k.to_string()),
            plain(r.h_max),
            r.level
        );
    }
    s
}

pub fn emit_datafile(records: &[ConvergenceRecord], path: &Path) -> Result<(), ExperimentError> {
    if records.is_empty() {
        return Err(ExperimentError::Config("no records to write".into()));
    }
    std::fs::write(path, format_datafile(records)).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_datafile(text: &str) -> Result<Vec<ConvergenceRecord>, ExperimentError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DATA_HEADER) {
        return Err(ExperimentError::Parse("missing or unexpected header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>, ExperimentError> {
        if s == "nan" {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| ExperimentError::Parse(format!("'{s}': {e}")))
    };
    let int = |s: &str| -> Result<usize, ExperimentError> {
        s.parse::<usize>().map_err(|e| ExperimentError::Parse(format!("'{s}': {e}")))
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(ExperimentError::Parse(format!("line {}: expected 9 columns, got {}", i + 2, f.len())));
        }
        out.push(ConvergenceRecord {
            n_dofs: int(f[0])?,
            estimator: num(f[1])?.unwrap_or(f64::NAN),
            err_state: num(f[2])?,
            err_adjoint: num(f[3])?,
            err_u: num(f[4])?,
            err_u0: num(f[5])?,
            iterations: if f[6] == "nan" { None } else { Some(int(f[6])?) },
            complementarity: None,
            h_max: num(f[7])?.unwrap_or(f64::NAN),
            level: int(f[8])?,
        });
    }
    Ok(out)
}

/// Per-step rates for every populated column, with the mean of the last
/// two steps.
pub fn eoc_table(records: &[ConvergenceRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8}  rates vs N (per step)", "column", "last-2");
    for col in Column::ALL {
        if records.iter().all(|r| r.value(col).is_none()) {
            continue;
        }
        let rates = compute_eoc(records, col);
        let mean = mean_last_rates(&rates, 2).map_or_else(|| "-".into(), |m| format!("{m:.3}"));
        let steps: Vec<String> = rates
            .iter()
            .map(|r| r.map_or_else(|| "-".into(), |v| format!("{v:.3}")))
            .collect();
        let _ = writeln!(s, "{:<12} {:>8}  {}", col.name(), mean, steps.join(" "));
    }
    s
}

/// Overrides of an experiment's defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub n0: Option<usize>,
    pub levels: Option<usize>,
    pub max_dofs: Option<usize>,
    pub theta: Option<f64>,
    pub gamma: Option<f64>,
    pub mode: Option<RefinementMode>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub spec: ExperimentSpec,
    pub records: Vec<ConvergenceRecord>,
    pub status: LoopStatus,
    /// Fraction of elements with centroid within 0.1 of the origin, per
    /// level.
    pub corner_fraction: Vec<f64>,
    pub n_elements: Vec<usize>,
}

impl RunReport {
    pub fn eoc_table(&self) -> String {
        eoc_table(&self.records)
    }
}

/// Runs an experiment, writing the data file when `opts.out` is set.
pub fn run(name: &str, opts: &RunOptions) -> Result<RunReport, ExperimentError> {
    let mut spec = ExperimentSpec::by_name(name)?;
    spec.apply(opts)?;
    let problem = spec.problem()?;
    let case = spec.case();
    let mut corner_fraction = Vec::new();
    let mut n_elements = Vec::new();
    let out = adaptive_loop_with(
        &problem,
        spec.initial_mesh(),
        &spec.solver_config(),
        &spec.adapt_config()?,
        case.as_ref().map(|c| c as &dyn ExactSolution),
        |mesh, _| {
            corner_fraction.push(mesh.fraction_near([0.0, 0.0], 0.1));
            n_elements.push(mesh.n_elements());
        },
    )?;
    if let Some(path) = &opts.out {
        emit_datafile(&out.records, path)?;
    }
    Ok(RunReport {
        spec,
        records: out.records,
        status: out.status,
        corner_fraction,
        n_elements,
    })
}
