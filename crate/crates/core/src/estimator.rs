//! Elementwise a posteriori error indicators.
//!
//! The constrained estimator is
//! `η² = ‖ℒy_h + ℬu_h - f‖² + ‖ℒ⋆p_h - 𝒜*(𝒜ℐy_h - z_d)‖² + ‖ũ_h - u_h‖²`
//! with `ũ_h = Π(-p_h/λ)`; the unconstrained one is the least-squares
//! functional with `ũ_h` substituted for the control.

use crate::error::SolverError;
use crate::mesh::Mesh;
use crate::problems::{
    rank_one_scale, scalar_basis, state_residual, trace_functional, EvalPoints, OptimalControlProblem, ProblemKind,
    ResidualBlock,
};
use crate::vi_solver::{control0_block, control_block, initial_block, ls1_block, ls2_block, terminal_block, Solution};

/// `min{b, max{v, a}}`.
pub fn box_project(v: f64, a: f64, b: f64) -> Result<f64, SolverError> {
    if !(a <= b) {
        return Err(SolverError::Config(format!("empty box [{a}, {b}]")));
    }
    Ok(v.max(a).min(b))
}

/// Pointwise [`box_project`] of sampled values.
pub fn box_project_field(values: &mut [f64], a: f64, b: f64) -> Result<(), SolverError> {
    if !(a <= b) {
        return Err(SolverError::Config(format!("empty box [{a}, {b}]")));
    }
    for v in values {
        *v = v.max(a).min(b);
    }
    Ok(())
}

/// Squared indicator contributions. Trace terms (heat) are kept per
/// segment and attributed to the owning element by [`Self::indicators`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorBreakdown {
    pub lsq_state: Vec<f64>,
    pub lsq_adjoint: Vec<f64>,
    pub control_mismatch: Vec<f64>,
    /// `‖y_h(0) - u₀,h - y₀‖²` plus the initial-control mismatch, per
    /// segment on `t = 0`.
    pub initial: Vec<f64>,
    pub initial_owner: Vec<usize>,
    /// `‖p_h(T) - y_h(T) + z_{d,T}‖²` per segment on `t = T`.
    pub terminal: Vec<f64>,
    pub terminal_owner: Vec<usize>,
}

impl EstimatorBreakdown {
    fn with_elements(n: usize) -> Self {
        EstimatorBreakdown {
            lsq_state: vec![0.0; n],
            lsq_adjoint: vec![0.0; n],
            control_mismatch: vec![0.0; n],
            ..Default::default()
        }
    }

    /// Element indicators `ξ(T)²`.
    pub fn indicators(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.lsq_state.len())
            .map(|e| self.lsq_state[e] + self.lsq_adjoint[e] + self.control_mismatch[e])
            .collect();
        for (v, &e) in self.initial.iter().zip(&self.initial_owner) {
            out[e] += v;
        }
        for (v, &e) in self.terminal.iter().zip(&self.terminal_owner) {
            out[e] += v;
        }
        out
    }

    /// `η²` (or `G`).
    pub fn total(&self) -> f64 {
        self.lsq_state.iter().sum::<f64>()
            + self.lsq_adjoint.iter().sum::<f64>()
            + self.control_mismatch.iter().sum::<f64>()
            + self.initial.iter().sum::<f64>()
            + self.terminal.iter().sum::<f64>()
    }

    pub fn eta(&self) -> f64 {
        self.total().sqrt()
    }
}

fn mismatch(block: &ResidualBlock, a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(u, v)| u - v).collect();
    block.inner(&d, &d)
}

/// `Π(-p_h/λ)` sampled at the block's points, per control component.
fn projected_control(
    problem: &OptimalControlProblem,
    sol: &Solution,
    pts: &EvalPoints,
    lambda: f64,
    lower: f64,
    upper: f64,
) -> (ResidualBlock, Vec<f64>) {
    let mut b = ResidualBlock::new(problem.control_dim(), pts);
    scalar_basis(&sol.disc.adjoint[0], pts, sol.layout.adjoint.start, -1.0 / lambda, &mut b);
    let mut v = b.eval(&sol.x);
    v.iter_mut().for_each(|x| *x = x.max(lower).min(upper));
    (b, v)
}

/// Stokes mean-trace term `c (∫ tr M_h)²` for state and adjoint, to be
/// distributed by area.
fn mean_trace_terms(mesh: &Mesh, sol: &Solution) -> (f64, f64) {
    if sol.disc.kind != ProblemKind::StokesPseudostress {
        return (0.0, 0.0);
    }
    let rule = crate::fem_spaces::quadrature(2).expect("degree 2 rule");
    let (mut ls, mut la) = (0.0, 0.0);
    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        ls += trace_functional(&sol.disc, &pts, false, sol.layout.state.start)
            .into_iter()
            .map(|(g, v)| v * sol.x[g])
            .sum::<f64>();
        la += trace_functional(&sol.disc, &pts, true, sol.layout.adjoint.start)
            .into_iter()
            .map(|(g, v)| v * sol.x[g])
            .sum::<f64>();
    }
    let c = rank_one_scale(&sol.disc);
    (c * ls * ls, c * la * la)
}

fn distribute_mean(mesh: &Mesh, sol: &Solution, out: &mut EstimatorBreakdown) {
    let (ms, ma) = mean_trace_terms(mesh, sol);
    if ms == 0.0 && ma == 0.0 {
        return;
    }
    let area = sol.disc.area;
    for e in 0..mesh.n_elements() {
        let w = mesh.area(e) / area;
        out.lsq_state[e] += w * ms;
        out.lsq_adjoint[e] += w * ma;
    }
}

/// Constrained estimator `η` for a solution with discrete controls.
pub fn estimate_constrained(problem: &OptimalControlProblem, mesh: &Mesh, sol: &Solution) -> EstimatorBreakdown {
    let rule = problem.rule();
    let b = &problem.bounds;
    let mut out = EstimatorBreakdown::with_elements(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        out.lsq_state[e] = ls1_block(problem, &sol.disc, &pts, &sol.layout, sol.mode).residual_sq(&sol.x, None);
        out.lsq_adjoint[e] = ls2_block(problem, &sol.disc, &pts, &sol.layout).residual_sq(&sol.x, None);
        let (pb, ut) = projected_control(problem, sol, &pts, problem.lambda, b.lower, b.upper);
        let uh = control_block(problem, sol, &pts).eval(&sol.x);
        out.control_mismatch[e] = mismatch(&pb, &ut, &uh);
    }
    distribute_mean(mesh, sol, &mut out);
    for (k, seg) in sol.disc.initial.segments.iter().enumerate() {
        let pts = EvalPoints::segment(mesh, seg);
        let mut v = initial_block(problem, &sol.disc, &pts, k, &sol.layout, sol.mode).residual_sq(&sol.x, None);
        if sol.disc.has_control0 {
            let (pb, ut) = projected_control(problem, sol, &pts, problem.lambda0, b.lower0, b.upper0);
            let uh = control0_block(problem, sol, &pts, k).eval(&sol.x);
            v += mismatch(&pb, &ut[..pts.len()], &uh);
        }
        out.initial.push(v);
        out.initial_owner.push(seg.element);
    }
    push_terminal(problem, mesh, sol, &mut out);
    out
}

fn push_terminal(problem: &OptimalControlProblem, mesh: &Mesh, sol: &Solution, out: &mut EstimatorBreakdown) {
    for seg in &sol.disc.terminal.segments {
        let pts = EvalPoints::segment(mesh, seg);
        out.terminal
            .push(terminal_block(problem, &sol.disc, &pts, &sol.layout).residual_sq(&sol.x, None));
        out.terminal_owner.push(seg.element);
    }
}

/// Least-squares functional `G(y_h, p_h; f, z_d)` with the control
/// replaced by `Π(-p_h/λ)`.
pub fn estimate_unconstrained(problem: &OptimalControlProblem, mesh: &Mesh, sol: &Solution) -> EstimatorBreakdown {
    let rule = problem.rule();
    let b = &problem.bounds;
    let dc = problem.control_dim();
    let mut out = EstimatorBreakdown::with_elements(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        let mut s = ResidualBlock::new(problem.n_comp(), &pts);
        state_residual(problem, &sol.disc, &pts, sol.layout.state.start, 1.0, &mut s);
        s.set_data(|p, d| {
            for (c, f) in problem.f.iter().enumerate() {
                d[c] = f(p);
            }
        });
        let (_, ut) = projected_control(problem, sol, &pts, problem.lambda, b.lower, b.upper);
        // ℬũ = -(ũ, 0) moves into the data
        for q in 0..pts.len() {
            for c in 0..dc {
                s.data[q * s.n_comp + c] += ut[q * dc + c];
            }
        }
        out.lsq_state[e] = s.residual_sq(&sol.x, None);
        out.lsq_adjoint[e] = ls2_block(problem, &sol.disc, &pts, &sol.layout).residual_sq(&sol.x, None);
    }
    distribute_mean(mesh, sol, &mut out);
    for seg in &sol.disc.initial.segments {
        let pts = EvalPoints::segment(mesh, seg);
        let mut s = ResidualBlock::new(1, &pts);
        scalar_basis(&sol.disc.state[0], &pts, sol.layout.state.start, 1.0, &mut s);
        if let Some(y0) = &problem.y0 {
            s.set_data(|p, d| d[0] = y0(p));
        }
        if sol.disc.has_control0 {
            let (_, ut) = projected_control(problem, sol, &pts, problem.lambda0, b.lower0, b.upper0);
            for q in 0..pts.len() {
                s.data[q] += ut[q];
            }
        }
        out.initial.push(s.residual_sq(&sol.x, None));
        out.initial_owner.push(seg.element);
    }
    push_terminal(problem, mesh, sol, &mut out);
    out
}
