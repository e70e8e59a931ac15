//! Operator families and their elementwise evaluation.
//!
//! Every operator is exposed through [`ResidualBlock`]: a list of basis
//! functions (with global dof indices) evaluated componentwise at the
//! quadrature points of one element or trace segment. Residual component
//! layouts:
//!
//! * second order: `[s, v_x, v_y]`
//! * Stokes: `[v_1, v_2, m_11, m_12, m_21, m_22]`
//! * heat: `[s, v]` on the space-time element, a single component on trace
//!   segments.
//!
//! The control always acts on the leading `control_dim` components.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FemError, SolverError};
use crate::fem_spaces::{
    build_dof_map, gauss_legendre, quadrature, trace_mesh, DofMap, ElementGeometry, QuadratureRule,
    SpaceKind, TraceMesh, TraceSegment,
};
use crate::mesh::{BoundaryLabel, Mesh, Point};

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;

/// Gauss points per trace segment.
pub const TRACE_POINTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    DiffusionReactionConvection,
    StokesPseudostress,
    HeatSpaceTime1D,
}

/// Coefficients of `-div(A∇y - A b y) + c y` written as a first-order system.
#[derive(Clone)]
pub struct Coefficients {
    pub a: MatrixFn,
    pub b: VectorFn,
    pub c: ScalarFn,
}

impl Coefficients {
    pub fn laplace() -> Self {
        Coefficients {
            a: Arc::new(|_| [[1.0, 0.0], [0.0, 1.0]]),
            b: Arc::new(|_| [0.0, 0.0]),
            c: Arc::new(|_| 0.0),
        }
    }
}

#[derive(Clone)]
pub enum Operator {
    SecondOrder(Coefficients),
    Stokes,
    /// Space-time heat equation on `(0, t_end) x (0, 1)`.
    Heat {
        t_end: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlConstraints {
    pub lower: f64,
    pub upper: f64,
    pub lower0: f64,
    pub upper0: f64,
}

impl ControlConstraints {
    pub fn unconstrained() -> Self {
        ControlConstraints {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            lower0: f64::NEG_INFINITY,
            upper0: f64::INFINITY,
        }
    }

    pub fn new(lower: f64, upper: f64) -> Result<Self, SolverError> {
        Self::unconstrained().with_bounds(lower, upper)
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Result<Self, SolverError> {
        check_bounds(lower, upper)?;
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn with_initial_bounds(mut self, lower0: f64, upper0: f64) -> Result<Self, SolverError> {
        check_bounds(lower0, upper0)?;
        self.lower0 = lower0;
        self.upper0 = upper0;
        Ok(self)
    }

    pub fn is_unconstrained(&self) -> bool {
        [self.lower, self.lower0].iter().all(|v| *v == f64::NEG_INFINITY)
            && [self.upper, self.upper0].iter().all(|v| *v == f64::INFINITY)
    }
}

fn check_bounds(lower: f64, upper: f64) -> Result<(), SolverError> {
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return Err(SolverError::Config(format!(
            "control bounds must satisfy lower < upper, got [{lower}, {upper}]"
        )));
    }
    Ok(())
}

#[derive(Clone)]
pub struct OptimalControlProblem {
    pub operator: Operator,
    pub lambda: f64,
    /// Cost of the initial control (heat only); zero removes it.
    pub lambda0: f64,
    pub bounds: ControlConstraints,
    /// Right-hand side, one callback per control component.
    pub f: Vec<ScalarFn>,
    /// Desired state, one callback per control component.
    pub z_d: Vec<ScalarFn>,
    /// Heat initial datum as a function of the space-time point.
    pub y0: Option<ScalarFn>,
    /// Heat terminal observation target.
    pub z_dt: Option<ScalarFn>,
    pub quad_degree: usize,
}

impl fmt::Debug for OptimalControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OptimalControlProblem")
            .field("kind", &self.kind())
            .field("lambda", &self.lambda)
            .field("lambda0", &self.lambda0)
            .field("bounds", &self.bounds)
            .field("quad_degree", &self.quad_degree)
            .finish_non_exhaustive()
    }
}

fn zero_fn() -> ScalarFn {
    Arc::new(|_| 0.0)
}

impl OptimalControlProblem {
    pub fn second_order(
        coefficients: Coefficients,
        lambda: f64,
        bounds: ControlConstraints,
        f: ScalarFn,
        z_d: ScalarFn,
    ) -> Result<Self, SolverError> {
        check_lambda(lambda)?;
        Ok(OptimalControlProblem {
            operator: Operator::SecondOrder(coefficients),
            lambda,
            lambda0: 0.0,
            bounds,
            f: vec![f],
            z_d: vec![z_d],
            y0: None,
            z_dt: None,
            quad_degree: 4,
        })
    }

    pub fn poisson(lambda: f64, bounds: ControlConstraints, f: ScalarFn, z_d: ScalarFn) -> Result<Self, SolverError> {
        Self::second_order(Coefficients::laplace(), lambda, bounds, f, z_d)
    }

    pub fn stokes(
        lambda: f64,
        bounds: ControlConstraints,
        f: [ScalarFn; 2],
        z_d: [ScalarFn; 2],
    ) -> Result<Self, SolverError> {
        check_lambda(lambda)?;
        Ok(OptimalControlProblem {
            operator: Operator::Stokes,
            lambda,
            lambda0: 0.0,
            bounds,
            f: f.to_vec(),
            z_d: z_d.to_vec(),
            y0: None,
            z_dt: None,
            quad_degree: 4,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn heat(
        t_end: f64,
        lambda: f64,
        lambda0: f64,
        bounds: ControlConstraints,
        f: ScalarFn,
        z_d: ScalarFn,
        y0: ScalarFn,
        z_dt: ScalarFn,
    ) -> Result<Self, SolverError> {
        check_lambda(lambda)?;
        if !(lambda0 >= 0.0) || !(t_end > 0.0) {
            return Err(SolverError::Config("heat requires lambda0 >= 0 and t_end > 0".into()));
        }
        Ok(OptimalControlProblem {
            operator: Operator::Heat { t_end },
            lambda,
            lambda0,
            bounds,
            f: vec![f],
            z_d: vec![z_d],
            y0: Some(y0),
            z_dt: Some(z_dt),
            quad_degree: 4,
        })
    }

    /// Same problem with all data set to zero.
    pub fn homogeneous(&self) -> Self {
        let mut p = self.clone();
        p.f = p.f.iter().map(|_| zero_fn()).collect();
        p.z_d = p.z_d.iter().map(|_| zero_fn()).collect();
        p.y0 = p.y0.as_ref().map(|_| zero_fn());
        p.z_dt = p.z_dt.as_ref().map(|_| zero_fn());
        p
    }

    pub fn kind(&self) -> ProblemKind {
        match self.operator {
            Operator::SecondOrder(_) => ProblemKind::DiffusionReactionConvection,
            Operator::Stokes => ProblemKind::StokesPseudostress,
            Operator::Heat { .. } => ProblemKind::HeatSpaceTime1D,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self.operator {
            Operator::Stokes => 2,
            _ => 1,
        }
    }

    /// Number of residual components on elements.
    pub fn n_comp(&self) -> usize {
        match self.operator {
            Operator::SecondOrder(_) => 3,
            Operator::Stokes => 6,
            Operator::Heat { .. } => 2,
        }
    }

    pub fn has_initial_control(&self) -> bool {
        matches!(self.operator, Operator::Heat { .. }) && self.lambda0 > 0.0
    }

    /// Coercivity constant of the control cost operator.
    pub fn kappa(&self) -> f64 {
        if self.has_initial_control() {
            self.lambda.min(self.lambda0)
        } else {
            self.lambda
        }
    }

    pub fn rule(&self) -> QuadratureRule {
        quadrature(self.quad_degree).expect("validated quadrature degree")
    }
}

fn check_lambda(lambda: f64) -> Result<(), SolverError> {
    if !(lambda > 0.0) {
        return Err(SolverError::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Discrete spaces of a problem on a mesh.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub kind: ProblemKind,
    pub control: DofMap,
    /// `[y, σ]` (`[y, M]` for Stokes).
    pub state: [DofMap; 2],
    /// `[p, ξ]` (`[p, N]` for Stokes).
    pub adjoint: [DofMap; 2],
    /// Segments on `t = 0` (heat only).
    pub initial: TraceMesh,
    /// Segments on `t = T` (heat only).
    pub terminal: TraceMesh,
    pub has_control0: bool,
    pub area: f64,
}

impl Discretization {
    pub fn new(problem: &OptimalControlProblem, mesh: &Mesh) -> Result<Self, FemError> {
        let dirichlet = SpaceKind::s1_zero(&[BoundaryLabel::Dirichlet]);
        let (control, y, s) = match problem.operator {
            Operator::SecondOrder(ref co) => {
                let c_min = mesh
                    .vertices()
                    .iter()
                    .map(|&p| (co.c)(p))
                    .fold(f64::INFINITY, f64::min);
                if c_min < 0.0 {
                    log::warn!("negative reaction coefficient: well-posedness unchecked");
                }
                (SpaceKind::P0Scalar, dirichlet, SpaceKind::Rt0)
            }
            Operator::Stokes => (
                SpaceKind::P0Vector(2),
                SpaceKind::S1ZeroVector([BoundaryLabel::Dirichlet].into_iter().collect(), 2),
                SpaceKind::Rt0Rows(2),
            ),
            Operator::Heat { .. } => (
                SpaceKind::P0Scalar,
                SpaceKind::s1_zero(&[BoundaryLabel::SpatialBoundary]),
                SpaceKind::S1,
            ),
        };
        let heat = problem.kind() == ProblemKind::HeatSpaceTime1D;
        let state = [build_dof_map(mesh, y.clone())?, build_dof_map(mesh, s.clone())?];
        let adjoint = [build_dof_map(mesh, y)?, build_dof_map(mesh, s)?];
        Ok(Discretization {
            kind: problem.kind(),
            control: build_dof_map(mesh, control)?,
            state,
            adjoint,
            initial: if heat {
                trace_mesh(mesh, BoundaryLabel::InitialTime)
            } else {
                TraceMesh::default()
            },
            terminal: if heat {
                trace_mesh(mesh, BoundaryLabel::FinalTime)
            } else {
                TraceMesh::default()
            },
            has_control0: problem.has_initial_control(),
            area: mesh.total_area(),
        })
    }

    pub fn n_control(&self) -> usize {
        self.control.n_dofs()
    }

    pub fn n_state(&self) -> usize {
        self.state[0].n_dofs() + self.state[1].n_dofs()
    }

    pub fn n_adjoint(&self) -> usize {
        self.adjoint[0].n_dofs() + self.adjoint[1].n_dofs()
    }

    pub fn n_control0(&self) -> usize {
        if self.has_control0 {
            self.initial.n_segments()
        } else {
            0
        }
    }

    /// `dim X_h + dim Y_h + dim Y⋆_h` (initial control included).
    pub fn n_total(&self) -> usize {
        self.n_control() + self.n_state() + self.n_adjoint() + self.n_control0()
    }
}

/// Quadrature points of one element or one trace segment.
#[derive(Clone, Debug)]
pub struct EvalPoints {
    pub element: usize,
    pub geom: ElementGeometry,
    pub bary: Vec<[f64; 3]>,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl EvalPoints {
    pub fn volume(mesh: &Mesh, e: usize, rule: &QuadratureRule) -> Self {
        let geom = ElementGeometry::new(mesh, e);
        EvalPoints {
            element: e,
            points: rule.points.iter().map(|&b| geom.point(b)).collect(),
            weights: rule.weights.iter().map(|w| 2.0 * geom.area * w).collect(),
            bary: rule.points.clone(),
            geom,
        }
    }

    pub fn segment(mesh: &Mesh, seg: &TraceSegment) -> Self {
        let geom = ElementGeometry::new(mesh, seg.element);
        let (x, w) = gauss_legendre(TRACE_POINTS);
        let bary: Vec<_> = x.iter().map(|&s| seg.bary(s)).collect();
        EvalPoints {
            element: seg.element,
            points: bary.iter().map(|&b| geom.point(b)).collect(),
            weights: w.iter().map(|w| w * seg.length).collect(),
            bary,
            geom,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Basis functions evaluated componentwise at quadrature points.
///
/// `values[(j * n_q + q) * n_comp + c]` is component `c` of basis `j` at
/// point `q`; `data[q * n_comp + c]` is the matching data value, so the
/// residual of a coefficient vector `x` is `Σ_j x[dofs[j]] values_j - data`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub n_comp: usize,
    pub n_q: usize,
    pub weights: Vec<f64>,
    pub points: Vec<Point>,
    pub dofs: Vec<usize>,
    pub values: Vec<f64>,
    pub data: Vec<f64>,
}

impl ResidualBlock {
    pub fn new(n_comp: usize, pts: &EvalPoints) -> Self {
        ResidualBlock {
            n_comp,
            n_q: pts.len(),
            weights: pts.weights.clone(),
            points: pts.points.clone(),
            dofs: Vec::new(),
            values: Vec::new(),
            data: vec![0.0; pts.len() * n_comp],
        }
    }

    pub fn n_basis(&self) -> usize {
        self.dofs.len()
    }

    /// Appends a zero basis function for `dof` and returns its value slice.
    pub fn push_basis(&mut self, dof: usize) -> &mut [f64] {
        self.dofs.push(dof);
        let len = self.n_q * self.n_comp;
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        &mut self.values[start..]
    }

    #[inline]
    pub fn value(&self, j: usize, q: usize, c: usize) -> f64 {
        self.values[(j * self.n_q + q) * self.n_comp + c]
    }

    pub fn basis_values(&self, j: usize) -> &[f64] {
        let len = self.n_q * self.n_comp;
        &self.values[j * len..(j + 1) * len]
    }

    /// Sets data by a callback filling the `n_comp` values at a point.
    pub fn set_data(&mut self, f: impl Fn(Point, &mut [f64])) {
        for q in 0..self.n_q {
            let slot = &mut self.data[q * self.n_comp..(q + 1) * self.n_comp];
            f(self.points[q], slot);
        }
    }

    /// `Σ_j x[dofs[j]] values_j` at every point.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_q * self.n_comp];
        for (j, &d) in self.dofs.iter().enumerate() {
            let c = x[d];
            if c != 0.0 {
                for (o, v) in out.iter_mut().zip(self.basis_values(j)) {
                    *o += c * v;
                }
            }
        }
        out
    }

    /// `∫ |Σ_j x_j values_j - data - shift|²` with an optional constant shift
    /// per component.
    pub fn residual_sq(&self, x: &[f64], shift: Option<&[f64]>) -> f64 {
        let r = self.eval(x);
        let mut sum = 0.0;
        for q in 0..self.n_q {
            let mut s = 0.0;
            for c in 0..self.n_comp {
                let mut v = r[q * self.n_comp + c] - self.data[q * self.n_comp + c];
                if let Some(shift) = shift {
                    v -= shift[c];
                }
                s += v * v;
            }
            sum += self.weights[q] * s;
        }
        sum
    }

    /// `∫ |data|²`.
    pub fn data_sq(&self) -> f64 {
        (0..self.n_q)
            .map(|q| {
                self.weights[q]
                    * self.data[q * self.n_comp..(q + 1) * self.n_comp]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
            })
            .sum()
    }

    /// `∫ u·v` of two evaluated fields on this block's points.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        (0..self.n_q)
            .map(|q| {
                let r = q * self.n_comp..(q + 1) * self.n_comp;
                self.weights[q] * u[r.clone()].iter().zip(&v[r]).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    /// Concatenates the basis functions of `other` (same points).
    pub fn append(&mut self, other: &ResidualBlock) {
        assert_eq!((self.n_comp, self.n_q), (other.n_comp, other.n_q));
        self.dofs.extend_from_slice(&other.dofs);
        self.values.extend_from_slice(&other.values);
    }
}

fn for_each_basis(map: &DofMap, pts: &EvalPoints, base: usize, mut f: impl FnMut(usize, usize, usize)) {
    for copy in 0..map.copies() {
        for i in 0..map.local_size() {
            if let Some(g) = map.global(pts.element, copy, i) {
                f(base + g, copy, i);
            }
        }
    }
}

fn inv2(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
}

/// Stokes matrix component index of entry `(r, k)`.
#[inline]
fn mi(r: usize, k: usize) -> usize {
    2 + 2 * r + k
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    State,
    Adjoint,
}

fn first_order(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    side: Side,
    base: usize,
    scale: f64,
    block: &mut ResidualBlock,
) {
    let maps = match side {
        Side::State => &disc.state,
        Side::Adjoint => &disc.adjoint,
    };
    let nc = block.n_comp;
    let geom = &pts.geom;
    let e = pts.element;
    let off_flux = base + maps[0].n_dofs();
    match &problem.operator {
        Operator::SecondOrder(co) => {
            let cs: Vec<f64> = pts.points.iter().map(|&p| (co.c)(p)).collect();
            let bs: Vec<[f64; 2]> = pts.points.iter().map(|&p| (co.b)(p)).collect();
            let ainv: Vec<[[f64; 2]; 2]> = pts.points.iter().map(|&p| inv2((co.a)(p))).collect();
            for_each_basis(&maps[0], pts, base, |g, _, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let phi = pts.bary[q][i];
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[0] = scale * cs[q] * phi;
                    match side {
                        Side::State => {
                            v[1] = scale * (grad[0] - bs[q][0] * phi);
                            v[2] = scale * (grad[1] - bs[q][1] * phi);
                        }
                        Side::Adjoint => {
                            v[1] = -scale * grad[0];
                            v[2] = -scale * grad[1];
                        }
                    }
                }
            });
            for_each_basis(&maps[1], pts, off_flux, |g, _, i| {
                let sign = maps[1].sign(e, i);
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let (psi, div) = geom.rt0(i, sign, pts.points[q]);
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[0] = match side {
                        Side::State => scale * div,
                        Side::Adjoint => -scale * (div + bs[q][0] * psi[0] + bs[q][1] * psi[1]),
                    };
                    let a = ainv[q];
                    v[1] = scale * (a[0][0] * psi[0] + a[0][1] * psi[1]);
                    v[2] = scale * (a[1][0] * psi[0] + a[1][1] * psi[1]);
                }
            });
        }
        Operator::Stokes => {
            // self-adjoint: identical on both sides
            for_each_basis(&maps[0], pts, base, |g, c, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[mi(c, 0)] = scale * grad[0];
                    v[mi(c, 1)] = scale * grad[1];
                }
            });
            for_each_basis(&maps[1], pts, off_flux, |g, r, i| {
                let sign = maps[1].sign(e, i);
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let (psi, div) = geom.rt0(i, sign, pts.points[q]);
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    // -div M, then -Dev M = -M + tr(M)/2 I with tr M = psi_r
                    v[r] = -scale * div;
                    v[mi(r, 0)] -= scale * psi[0];
                    v[mi(r, 1)] -= scale * psi[1];
                    v[mi(0, 0)] += 0.5 * scale * psi[r];
                    v[mi(1, 1)] += 0.5 * scale * psi[r];
                }
            });
        }
        Operator::Heat { .. } => {
            let dt = match side {
                Side::State => 1.0,
                Side::Adjoint => -1.0,
            };
            for_each_basis(&maps[0], pts, base, |g, _, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[0] = scale * dt * grad[0];
                    v[1] = scale * grad[1];
                }
            });
            for_each_basis(&maps[1], pts, off_flux, |g, _, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[0] = -scale * grad[1];
                    v[1] = -scale * pts.bary[q][i];
                }
            });
        }
    }
}

/// `scale · ℒ` on the state basis (`y` dofs at `base`, flux dofs after them).
pub fn state_residual(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    base: usize,
    scale: f64,
    block: &mut ResidualBlock,
) {
    first_order(problem, disc, pts, Side::State, base, scale, block);
}

/// `scale · ℒ⋆` on the adjoint basis.
pub fn adjoint_residual(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    base: usize,
    scale: f64,
    block: &mut ResidualBlock,
) {
    first_order(problem, disc, pts, Side::Adjoint, base, scale, block);
}

/// Values of a scalar-per-component space (P0 or S1 copies) placed in the
/// leading components: copy `c` goes to component `c`.
pub fn scalar_basis(map: &DofMap, pts: &EvalPoints, base: usize, scale: f64, block: &mut ResidualBlock) {
    let nc = block.n_comp;
    let p0 = matches!(map.kind(), SpaceKind::P0Scalar | SpaceKind::P0Vector(_));
    for_each_basis(map, pts, base, |g, c, i| {
        let vals = block.push_basis(g);
        for q in 0..pts.len() {
            vals[q * nc + c] = scale * if p0 { 1.0 } else { pts.bary[q][i] };
        }
    });
}

/// `scale · 𝒜*𝒜ℐ` on the state basis: the observed part of `y`.
pub fn observation_map(disc: &Discretization, pts: &EvalPoints, base: usize, scale: f64, block: &mut ResidualBlock) {
    scalar_basis(&disc.state[0], pts, base, scale, block);
}

/// `scale · ℬ` on the P0 control basis (`ℬu = -(u, 0)`).
pub fn control_maps(disc: &Discretization, pts: &EvalPoints, base: usize, scale: f64, block: &mut ResidualBlock) {
    scalar_basis(&disc.control, pts, base, -scale, block);
}

/// `scale · (-ℬ*ℐ⋆)` on the adjoint basis: the scalar part of `p`.
pub fn adjoint_pairing(disc: &Discretization, pts: &EvalPoints, base: usize, scale: f64, block: &mut ResidualBlock) {
    scalar_basis(&disc.adjoint[0], pts, base, scale, block);
}

/// One P0 basis function on a trace segment.
pub fn segment_basis(dof: usize, pts: &EvalPoints, scale: f64, block: &mut ResidualBlock) {
    let nc = block.n_comp;
    let vals = block.push_basis(dof);
    for q in 0..pts.len() {
        vals[q * nc] = scale;
    }
}

/// `scale · ℐ` on the state (or with `adjoint = true`, `ℐ⋆` on the adjoint)
/// basis: the embedding of `(y, σ)` into the residual space.
pub fn embedding(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    adjoint: bool,
    base: usize,
    scale: f64,
    block: &mut ResidualBlock,
) {
    let maps = if adjoint { &disc.adjoint } else { &disc.state };
    let nc = block.n_comp;
    let e = pts.element;
    let off_flux = base + maps[0].n_dofs();
    scalar_basis(&maps[0], pts, base, scale, block);
    match problem.operator {
        Operator::SecondOrder(_) | Operator::Stokes => {
            let stokes = problem.kind() == ProblemKind::StokesPseudostress;
            for_each_basis(&maps[1], pts, off_flux, |g, r, i| {
                let sign = maps[1].sign(e, i);
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let (psi, _) = pts.geom.rt0(i, sign, pts.points[q]);
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    let (i0, i1) = if stokes { (mi(r, 0), mi(r, 1)) } else { (1, 2) };
                    v[i0] = scale * psi[0];
                    v[i1] = scale * psi[1];
                }
            });
        }
        Operator::Heat { .. } => {
            for_each_basis(&maps[1], pts, off_flux, |g, _, i| {
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    vals[q * nc + 1] = scale * pts.bary[q][i];
                }
            });
        }
    }
}

/// Number of components of the Y-norm blocks.
pub fn norm_comp(problem: &OptimalControlProblem) -> usize {
    match problem.operator {
        Operator::SecondOrder(_) => 5,
        Operator::Stokes => 10,
        Operator::Heat { .. } => 3,
    }
}

/// Components whose squared integral is the Y (Y⋆) norm:
///
/// * second order: `[∇y, σ, div σ]`
/// * Stokes: `[∇y (row-major), M (row-major), div M]`
/// * heat: `[∂_x y, σ, ∂_t y - ∂_x σ]` (adjoint: `∂_t p + ∂_x ξ`).
pub fn norm_block(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    adjoint: bool,
    base: usize,
    block: &mut ResidualBlock,
) {
    let maps = if adjoint { &disc.adjoint } else { &disc.state };
    let nc = block.n_comp;
    let e = pts.element;
    let geom = &pts.geom;
    let off_flux = base + maps[0].n_dofs();
    match problem.operator {
        Operator::SecondOrder(_) | Operator::Stokes => {
            let stokes = problem.kind() == ProblemKind::StokesPseudostress;
            for_each_basis(&maps[0], pts, base, |g, c, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    vals[q * nc + 2 * c] = grad[0];
                    vals[q * nc + 2 * c + 1] = grad[1];
                }
            });
            let (off_m, off_div) = if stokes { (4, 8) } else { (2, 4) };
            for_each_basis(&maps[1], pts, off_flux, |g, r, i| {
                let sign = maps[1].sign(e, i);
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    let (psi, div) = geom.rt0(i, sign, pts.points[q]);
                    let v = &mut vals[q * nc..(q + 1) * nc];
                    v[off_m + 2 * r] = psi[0];
                    v[off_m + 2 * r + 1] = psi[1];
                    v[off_div + r] = div;
                }
            });
        }
        Operator::Heat { .. } => {
            let sx = if adjoint { 1.0 } else { -1.0 };
            for_each_basis(&maps[0], pts, base, |g, _, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    vals[q * nc] = grad[1];
                    vals[q * nc + 2] = grad[0];
                }
            });
            for_each_basis(&maps[1], pts, off_flux, |g, _, i| {
                let grad = geom.grads[i];
                let vals = block.push_basis(g);
                for q in 0..pts.len() {
                    vals[q * nc + 1] = pts.bary[q][i];
                    vals[q * nc + 2] = sx * grad[1];
                }
            });
        }
    }
}

/// Stokes mean-trace functional: `(dof, ∫_T tr ψ)` for the matrix-valued
/// basis functions of the state (or adjoint) space on one element.
pub fn trace_functional(disc: &Discretization, pts: &EvalPoints, adjoint: bool, base: usize) -> Vec<(usize, f64)> {
    let maps = if adjoint { &disc.adjoint } else { &disc.state };
    let mut out = Vec::new();
    if disc.kind != ProblemKind::StokesPseudostress {
        return out;
    }
    let e = pts.element;
    for_each_basis(&maps[1], pts, base + maps[0].n_dofs(), |g, r, i| {
        let sign = maps[1].sign(e, i);
        let int: f64 = (0..pts.len())
            .map(|q| pts.weights[q] * pts.geom.rt0(i, sign, pts.points[q]).0[r])
            .sum();
        out.push((g, int));
    });
    out
}

/// Coefficient of the rank-one term `‖Π_Ω tr M / d · I‖² = c (∫ tr M)²`.
pub fn rank_one_scale(disc: &Discretization) -> f64 {
    0.5 / disc.area
}

/// Maximum relative defect of `⟨ℒy, ℐ⋆p⟩ = ⟨ℐy, ℒ⋆p⟩` over random discrete
/// pairs.
pub fn adjoint_identity_check(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    pairs: usize,
    seed: u64,
) -> Result<f64, FemError> {
    let disc = Discretization::new(problem, mesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = disc.n_state();
    let na = disc.n_adjoint();
    let mut worst = 0.0f64;
    for pair in 0..pairs {
        // the first pair is the zero pair
        let (y, p): (Vec<f64>, Vec<f64>) = if pair == 0 {
            (vec![0.0; ns], vec![0.0; na])
        } else {
            (
                (0..ns).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..na).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        let (lhs, rhs) = adjoint_pair(problem, mesh, &disc, &y, &p);
        worst = worst.max((lhs - rhs).abs() / (lhs.abs() + rhs.abs() + 1e-30));
    }
    Ok(worst)
}

/// `(⟨ℒy, ℐ⋆p⟩, ⟨ℐy, ℒ⋆p⟩)` for state coefficients `y` and adjoint
/// coefficients `p`.
pub fn adjoint_pair(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    disc: &Discretization,
    y: &[f64],
    p: &[f64],
) -> (f64, f64) {
    let rule = problem.rule();
    let nc = problem.n_comp();
    let c = rank_one_scale(disc);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let (mut tr_y, mut tr_p) = (0.0, 0.0);
    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        let mut ly = ResidualBlock::new(nc, &pts);
        state_residual(problem, disc, &pts, 0, 1.0, &mut ly);
        let mut ip = ResidualBlock::new(nc, &pts);
        embedding(problem, disc, &pts, true, 0, 1.0, &mut ip);
        let mut iy = ResidualBlock::new(nc, &pts);
        embedding(problem, disc, &pts, false, 0, 1.0, &mut iy);
        let mut lp = ResidualBlock::new(nc, &pts);
        adjoint_residual(problem, disc, &pts, 0, 1.0, &mut lp);
        lhs += ly.inner(&ly.eval(y), &ip.eval(p));
        rhs += iy.inner(&iy.eval(y), &lp.eval(p));
        tr_y += trace_functional(disc, &pts, false, 0).iter().map(|&(g, v)| v * y[g]).sum::<f64>();
        tr_p += trace_functional(disc, &pts, true, 0).iter().map(|&(g, v)| v * p[g]).sum::<f64>();
    }
    // the mean-trace part of ℒ contributes -c (∫tr M)(∫tr N) to both sides
    lhs -= c * tr_y * tr_p;
    rhs -= c * tr_y * tr_p;
    let trace_product = |trace: &TraceMesh| {
        let mut s = 0.0;
        for seg in &trace.segments {
            let pts = EvalPoints::segment(mesh, seg);
            let mut by = ResidualBlock::new(1, &pts);
            scalar_basis(&disc.state[0], &pts, 0, 1.0, &mut by);
            let mut bp = ResidualBlock::new(1, &pts);
            scalar_basis(&disc.adjoint[0], &pts, 0, 1.0, &mut bp);
            s += by.inner(&by.eval(y), &bp.eval(p));
        }
        s
    };
    lhs += trace_product(&disc.initial);
    rhs += trace_product(&disc.terminal);
    (lhs, rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_spaces::{interpolate_rt0, interpolate_s1};
    use crate::mesh::{build_lshape, build_rectangle_spacetime, build_unit_square, refine_nvb};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn poisson() -> OptimalControlProblem {
        OptimalControlProblem::poisson(0.01, ControlConstraints::unconstrained(), zero_fn(), zero_fn()).unwrap()
    }

    fn stokes() -> OptimalControlProblem {
        OptimalControlProblem::stokes(0.1, ControlConstraints::unconstrained(), [zero_fn(), zero_fn()], [zero_fn(), zero_fn()])
            .unwrap()
    }

    fn heat(t_end: f64) -> OptimalControlProblem {
        OptimalControlProblem::heat(
            t_end,
            0.1,
            0.1,
            ControlConstraints::unconstrained(),
            zero_fn(),
            zero_fn(),
            zero_fn(),
            zero_fn(),
        )
        .unwrap()
    }

    fn general_second_order() -> OptimalControlProblem {
        let co = Coefficients {
            a: Arc::new(|p| [[2.0 + p[0], 0.3], [0.3, 1.0 + p[1] * p[1]]]),
            b: Arc::new(|p| [0.5 * p[1], -0.2]),
            c: Arc::new(|p| 1.0 + p[0] * p[1]),
        };
        let mut p = OptimalControlProblem::second_order(co, 0.1, ControlConstraints::unconstrained(), zero_fn(), zero_fn())
            .unwrap();
        p.quad_degree = 6;
        p
    }

    #[test]
    fn invalid_parameters() {
        assert!(ControlConstraints::new(0.0, 0.0).is_err());
        assert!(ControlConstraints::new(1.0, -1.0).is_err());
        assert!(OptimalControlProblem::poisson(0.0, ControlConstraints::unconstrained(), zero_fn(), zero_fn()).is_err());
        assert!(ControlConstraints::unconstrained().is_unconstrained());
        assert!(!ControlConstraints::new(-1.0, 0.0).unwrap().is_unconstrained());
    }

    #[test]
    fn kappa() {
        assert_eq!(poisson().kappa(), 0.01);
        let mut h = heat(1.0);
        h.lambda0 = 0.05;
        assert_eq!(h.kappa(), 0.05);
        h.lambda0 = 0.0;
        assert_eq!(h.kappa(), 0.1);
        assert!(!h.has_initial_control());
    }

    #[test]
    fn poisson_basis_residuals() {
        let p = poisson();
        let m = build_unit_square(2);
        let disc = Discretization::new(&p, &m).unwrap();
        let rule = quadrature(2).unwrap();
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(&m, e, &rule);
            let mut b = ResidualBlock::new(3, &pts);
            state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
            let mut a = ResidualBlock::new(3, &pts);
            adjoint_residual(&p, &disc, &pts, 0, 1.0, &mut a);
            let n_y = disc.state[0].n_dofs();
            for j in 0..b.n_basis() {
                for q in 0..pts.len() {
                    if b.dofs[j] < n_y {
                        // hat function: (0, ∇φ) and ℒ⋆: (0, -∇φ)
                        assert_eq!(b.value(j, q, 0), 0.0);
                        assert_eq!(a.value(j, q, 1), -b.value(j, q, 1));
                    } else {
                        let i = (0..3)
                            .find(|&i| disc.state[1].global(e, 0, i) == Some(b.dofs[j] - n_y))
                            .unwrap();
                        let s = disc.state[1].sign(e, i);
                        let div = s * pts.geom.edge_lengths[i] / pts.geom.area;
                        let (psi, _) = pts.geom.rt0(i, s, pts.points[q]);
                        assert!((b.value(j, q, 0) - div).abs() < 1e-12);
                        assert!((a.value(j, q, 0) + div).abs() < 1e-12);
                        assert!((b.value(j, q, 1) - psi[0]).abs() < 1e-14);
                        assert!((a.value(j, q, 2) - psi[1]).abs() < 1e-14);
                    }
                }
            }
            let mut cb = ResidualBlock::new(3, &pts);
            control_maps(&disc, &pts, 0, 1.0, &mut cb);
            assert_eq!(cb.dofs, vec![e]);
            assert!((0..pts.len()).all(|q| cb.value(0, q, 0) == -1.0 && cb.value(0, q, 1) == 0.0));
        }
    }

    #[test]
    fn control_cost_of_constant() {
        let p = poisson();
        let m = build_lshape(1);
        let disc = Discretization::new(&p, &m).unwrap();
        let rule = p.rule();
        let mut total = 0.0;
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(&m, e, &rule);
            let mut b = ResidualBlock::new(3, &pts);
            scalar_basis(&disc.control, &pts, 0, 1.0, &mut b);
            let u = b.eval(&vec![1.0; m.n_elements()]);
            total += p.lambda * b.inner(&u, &u);
        }
        assert!((total - 0.01 * 3.0).abs() < 1e-14);
    }

    #[test]
    fn heat_basis_residuals() {
        let p = heat(1.0);
        let m = build_rectangle_spacetime(1.0, 2);
        let disc = Discretization::new(&p, &m).unwrap();
        let rule = quadrature(2).unwrap();
        let pts = EvalPoints::volume(&m, 0, &rule);
        let mut b = ResidualBlock::new(2, &pts);
        state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
        let mut a = ResidualBlock::new(2, &pts);
        adjoint_residual(&p, &disc, &pts, 0, 1.0, &mut a);
        let n_y = disc.state[0].n_dofs();
        for j in 0..b.n_basis() {
            if b.dofs[j] >= n_y {
                continue;
            }
            let i = (0..3).find(|&i| disc.state[0].global(0, 0, i) == Some(b.dofs[j])).unwrap();
            let g = pts.geom.grads[i];
            for q in 0..pts.len() {
                assert!((b.value(j, q, 0) - g[0]).abs() < 1e-14);
                assert!((b.value(j, q, 1) - g[1]).abs() < 1e-14);
                assert!((a.value(j, q, 0) + g[0]).abs() < 1e-14);
                assert!((a.value(j, q, 1) - g[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stokes_adjoint_equals_state_residual() {
        let p = stokes();
        let m = build_unit_square(2);
        let disc = Discretization::new(&p, &m).unwrap();
        let rule = p.rule();
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(&m, e, &rule);
            let mut b = ResidualBlock::new(6, &pts);
            state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
            let mut a = ResidualBlock::new(6, &pts);
            adjoint_residual(&p, &disc, &pts, 0, 1.0, &mut a);
            assert_eq!(a.dofs, b.dofs);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn stokes_deviator_is_trace_free() {
        let p = stokes();
        let m = build_unit_square(2);
        let disc = Discretization::new(&p, &m).unwrap();
        let rule = p.rule();
        let pts = EvalPoints::volume(&m, 3, &rule);
        let mut b = ResidualBlock::new(6, &pts);
        state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
        let n_y = disc.state[0].n_dofs();
        for j in 0..b.n_basis() {
            if b.dofs[j] < n_y {
                continue;
            }
            for q in 0..pts.len() {
                assert!((b.value(j, q, mi(0, 0)) + b.value(j, q, mi(1, 1))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let meshes = |p: &OptimalControlProblem| -> Vec<Mesh> {
            match p.operator {
                Operator::Heat { t_end } => {
                    let m = build_rectangle_spacetime(t_end, 2);
                    vec![m.clone(), refine_nvb(&m, &[0, 5]).unwrap(), build_rectangle_spacetime(t_end, 3)]
                }
                _ => {
                    let m = build_lshape(1);
                    vec![m.clone(), refine_nvb(&m, &[1]).unwrap(), build_unit_square(3)]
                }
            }
        };
        for p in [poisson(), general_second_order(), stokes(), heat(1.0), heat(0.6)] {
            for m in meshes(&p) {
                let d = adjoint_identity_check(&p, &m, 20, 3).unwrap();
                assert!(d <= 1e-12, "{:?}: defect {d}", p.kind());
            }
        }
    }

    #[test]
    fn zero_pair_has_zero_sides() {
        let p = poisson();
        let m = build_unit_square(2);
        let disc = Discretization::new(&p, &m).unwrap();
        let (l, r) = adjoint_pair(&p, &m, &disc, &vec![0.0; disc.n_state()], &vec![0.0; disc.n_adjoint()]);
        assert_eq!((l, r), (0.0, 0.0));
    }

    #[test]
    fn heat_trace_of_time_coordinate() {
        let t_end = 0.8;
        let p = heat(t_end);
        let m = build_rectangle_spacetime(t_end, 3);
        let disc = Discretization::new(&p, &m).unwrap();
        let s1 = build_dof_map(&m, SpaceKind::S1).unwrap();
        let t = interpolate_s1(&m, &s1, |x| x[0]);
        for (trace, expected) in [(&disc.initial, 0.0), (&disc.terminal, t_end)] {
            for seg in &trace.segments {
                let pts = EvalPoints::segment(&m, seg);
                let mut b = ResidualBlock::new(1, &pts);
                scalar_basis(&s1, &pts, 0, 1.0, &mut b);
                for v in b.eval(&t) {
                    assert!((v - expected).abs() < 1e-15);
                }
            }
        }
    }

    /// Dense Gram matrix of ℒ on Y_h including the mean-trace term.
    fn stokes_gram(m: &Mesh) -> DMatrix<f64> {
        let p = stokes();
        let disc = Discretization::new(&p, m).unwrap();
        let n = disc.n_state();
        let mut k = DMatrix::zeros(n, n);
        let mut ell = vec![0.0; n];
        let rule = p.rule();
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(m, e, &rule);
            let mut b = ResidualBlock::new(6, &pts);
            state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
            for i in 0..b.n_basis() {
                for j in 0..b.n_basis() {
                    let v = b.inner(b.basis_values(i), b.basis_values(j));
                    k[(b.dofs[i], b.dofs[j])] += v;
                }
            }
            for (g, v) in trace_functional(&disc, &pts, false, 0) {
                ell[g] += v;
            }
        }
        let c = rank_one_scale(&disc);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] += c * ell[i] * ell[j];
            }
        }
        k
    }

    #[test]
    fn stokes_least_squares_operator_is_injective() {
        for m in [build_unit_square(2), build_unit_square(4), refine_nvb(&build_lshape(1), &[0, 2]).unwrap()] {
            let k = stokes_gram(&m);
            let eig = k.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 1e-10, "smallest eigenvalue {min}");
        }
    }

    #[test]
    fn stokes_gram_without_mean_term_is_singular() {
        // M = I lies in the kernel of the local part: -div I = 0, Dev I = 0
        let m = build_unit_square(2);
        let p = stokes();
        let disc = Discretization::new(&p, &m).unwrap();
        let ny = disc.state[0].n_dofs();
        let rt = &disc.state[1];
        let mut x = vec![0.0; disc.n_state()];
        let ones = interpolate_rt0(&m, |_| [1.0, 0.0]);
        let twos = interpolate_rt0(&m, |_| [0.0, 1.0]);
        for k in 0..rt.n_base() {
            x[ny + k] = ones[k];
            x[ny + rt.n_base() + k] = twos[k];
        }
        let rule = p.rule();
        let mut local = 0.0;
        let mut trace = 0.0;
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(&m, e, &rule);
            let mut b = ResidualBlock::new(6, &pts);
            state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
            local += b.residual_sq(&x, None);
            trace += trace_functional(&disc, &pts, false, 0).iter().map(|&(g, v)| v * x[g]).sum::<f64>();
        }
        assert!(local < 1e-24);
        assert!((trace - 2.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_consistency_rate() {
        let p = poisson();
        let y = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin();
        let grad = |x: Point| {
            [
                PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
            ]
        };
        let f = |x: Point| 2.0 * PI * PI * y(x);
        let mut errs = Vec::new();
        let mut m = build_unit_square(2);
        for _ in 0..4 {
            let disc = Discretization::new(&p, &m).unwrap();
            let mut x = interpolate_s1(&m, &disc.state[0], y);
            x.extend(interpolate_rt0(&m, |q| {
                let g = grad(q);
                [-g[0], -g[1]]
            }));
            let rule = p.rule();
            let mut r = 0.0;
            for e in 0..m.n_elements() {
                let pts = EvalPoints::volume(&m, e, &rule);
                let mut b = ResidualBlock::new(3, &pts);
                state_residual(&p, &disc, &pts, 0, 1.0, &mut b);
                b.set_data(|q, d| d[0] = f(q));
                r += b.residual_sq(&x, None);
            }
            errs.push(r.sqrt());
            let all: Vec<_> = (0..m.n_elements()).collect();
            m = refine_nvb(&m, &all).unwrap();
        }
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 0.9, "rate {rate} from {errs:?}");
        }
    }

    #[test]
    fn norm_block_of_linear_field() {
        let p = poisson();
        let m = build_unit_square(2);
        let disc = Discretization::new(&p, &m).unwrap();
        let mut x = vec![0.0; disc.n_adjoint()];
        let ny = disc.state[0].n_dofs();
        for (k, v) in interpolate_rt0(&m, |q| [q[0], q[1]]).into_iter().enumerate() {
            x[ny + k] = v;
        }
        let rule = p.rule();
        let mut s = 0.0;
        for e in 0..m.n_elements() {
            let pts = EvalPoints::volume(&m, e, &rule);
            let mut b = ResidualBlock::new(5, &pts);
            norm_block(&p, &disc, &pts, false, 0, &mut b);
            b.set_data(|q, d| {
                d[2] = q[0];
                d[3] = q[1];
                d[4] = 2.0;
            });
            s += b.residual_sq(&x, None);
        }
        assert!(s < 1e-26);
    }
}
