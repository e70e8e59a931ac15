//! Assembly of the coupled least-squares system and its solution:
//! primal-dual active set iteration for box constraints and the reduced
//! least-squares system for unconstrained controls.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::SolverError;
use crate::fem_spaces::interpolate_rt0;
use crate::linalg::{norm2, solve_labeled, solve_spd_labeled, SparseMatrix, TripletBuffer};
use crate::mesh::{Mesh, Point};
use crate::problems::{
    adjoint_pairing, adjoint_residual, control_maps, norm_block, norm_comp, observation_map, rank_one_scale,
    scalar_basis, segment_basis, state_residual, trace_functional, Discretization, EvalPoints,
    OptimalControlProblem, ResidualBlock,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub max_iterations: usize,
    pub residual_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 5.0,
            max_iterations: 50,
            residual_tol: crate::linalg::RESIDUAL_TOL,
        }
    }
}

impl SolverConfig {
    pub fn with_gamma(gamma: f64) -> Result<Self, SolverError> {
        if !(gamma > 0.0) {
            return Err(SolverError::Config(format!("gamma must be positive, got {gamma}")));
        }
        Ok(SolverConfig {
            gamma,
            ..Self::default()
        })
    }
}

/// How the control enters the unknowns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlMode {
    /// Piecewise constant control (and initial control) as unknowns.
    Discrete,
    /// Control eliminated as `u = -p/λ`; the unknowns are `(y, p)` only.
    Eliminated,
    /// Control as an unknown in the adjoint scalar space, coupled by
    /// `⟨p + λu, v⟩ = 0`.
    Nodal,
}

/// Index ranges of the unknown blocks, in order `[u | (y, σ) | (p, ξ) | u₀]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub control: Range<usize>,
    pub state: Range<usize>,
    pub adjoint: Range<usize>,
    pub control0: Range<usize>,
}

impl Layout {
    fn new(disc: &Discretization, mode: ControlMode) -> Self {
        let nu = match mode {
            ControlMode::Discrete => disc.n_control(),
            ControlMode::Eliminated => 0,
            ControlMode::Nodal => disc.adjoint[0].n_dofs(),
        };
        let nu0 = if mode == ControlMode::Discrete { disc.n_control0() } else { 0 };
        let s = nu..nu + disc.n_state();
        let a = s.end..s.end + disc.n_adjoint();
        let c0 = a.end..a.end + nu0;
        Layout {
            control: 0..nu,
            state: s,
            adjoint: a,
            control0: c0,
        }
    }

    pub fn total(&self) -> usize {
        self.control0.end
    }

    pub fn describe(&self) -> String {
        format!(
            "u {:?} | y {:?} | p {:?} | u0 {:?}",
            self.control, self.state, self.adjoint, self.control0
        )
    }
}

/// Stokes mean-trace term `weight · (ℓ·x)²` with `ℓ·x = ∫ tr M_h`.
///
/// The rest of the form is blind to `M_h ↦ M_h + tI`, so instead of the
/// dense rank-one update the solver pins one dof of the flux block and
/// afterwards shifts along `kernel` (the coefficients of `I`) to `ℓ·x = 0`,
/// which is the minimizer of the full form.
#[derive(Clone, Debug)]
pub struct MeanTrace {
    pub ell: Vec<(usize, f64)>,
    pub weight: f64,
    pub kernel: Vec<(usize, f64)>,
    pub pin: usize,
}

impl MeanTrace {
    /// `ℓ·e_I`, the trace integral of the identity field.
    pub fn ell_kernel(&self) -> f64 {
        let k: std::collections::HashMap<usize, f64> = self.kernel.iter().copied().collect();
        self.ell.iter().map(|(i, v)| v * k.get(i).copied().unwrap_or(0.0)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct BlockSystem {
    /// Matrix of the bilinear form without the mean-trace terms.
    pub matrix: SparseMatrix,
    /// Load vector.
    pub rhs: Vec<f64>,
    pub layout: Layout,
    pub mode: ControlMode,
    pub rank_one: Vec<MeanTrace>,
    /// Weighted squared norm of all data.
    pub data_sq: f64,
}

impl BlockSystem {
    /// The bilinear form `a(x; z)`.
    pub fn form(&self, x: &[f64], z: &[f64]) -> f64 {
        let mut s = 0.0;
        for (r, &zr) in z.iter().enumerate() {
            if zr == 0.0 {
                continue;
            }
            s += zr * self.matrix.row(r).map(|(c, v)| v * x[c]).sum::<f64>();
        }
        for r1 in &self.rank_one {
            let lx: f64 = r1.ell.iter().map(|&(i, v)| v * x[i]).sum();
            let lz: f64 = r1.ell.iter().map(|&(i, v)| v * z[i]).sum();
            s += r1.weight * lx * lz;
        }
        s
    }

    /// `a(x; x) - 2ℓ(x) + ‖data‖²`, which equals the least-squares
    /// functional for symmetric assembly modes.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        let l: f64 = self.rhs.iter().zip(x).map(|(a, b)| a * b).sum();
        self.form(x, x) - 2.0 * l + self.data_sq
    }

    /// Solves `matrix · x = rhs` for a matrix that differs from
    /// [`Self::matrix`] at most in rows without flux dofs, then adds the
    /// mean-trace terms by pinning and shifting.
    pub fn solve_with(&self, matrix: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>, SolverError> {
        let pins: Vec<(usize, f64)> = self
            .rank_one
            .iter()
            .map(|m| {
                let d = matrix.get(m.pin, m.pin);
                (m.pin, if d > 0.0 { d } else { 1.0 })
            })
            .collect();
        let pinned;
        let a = if pins.is_empty() {
            matrix
        } else {
            pinned = matrix.with_diagonal_added(&pins);
            &pinned
        };
        let blocks = self.layout.describe();
        let mut x = if self.mode == ControlMode::Eliminated {
            solve_spd_labeled(a, rhs, &blocks)?
        } else {
            solve_labeled(a, rhs, &blocks)?
        };
        for m in &self.rank_one {
            let lx: f64 = m.ell.iter().map(|&(i, v)| v * x[i]).sum();
            let t = -lx / m.ell_kernel();
            for &(i, v) in &m.kernel {
                x[i] += t * v;
            }
        }
        Ok(x)
    }
}

/// Adds `scale · ∫ test_i · trial_j` to the matrix and `scale · ∫ test_i ·
/// data` (data of `test`) to the load.
fn add_cross(
    t: &mut TripletBuffer,
    rhs: &mut [f64],
    test: &ResidualBlock,
    trial: &ResidualBlock,
    scale: f64,
    with_rhs: bool,
) {
    let nc = test.n_comp;
    let nq = test.n_q;
    let mut weighted = vec![0.0; nq * nc];
    for i in 0..test.n_basis() {
        let vi = test.basis_values(i);
        for q in 0..nq {
            for c in 0..nc {
                weighted[q * nc + c] = scale * test.weights[q] * vi[q * nc + c];
            }
        }
        for j in 0..trial.n_basis() {
            let v: f64 = weighted.iter().zip(trial.basis_values(j)).map(|(a, b)| a * b).sum();
            if v != 0.0 {
                t.push(test.dofs[i], trial.dofs[j], v);
            }
        }
        if with_rhs {
            rhs[test.dofs[i]] += weighted.iter().zip(&test.data).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn add_gram(t: &mut TripletBuffer, rhs: &mut [f64], block: &ResidualBlock, scale: f64) {
    add_cross(t, rhs, block, block, scale, true);
}

fn fill_data(block: &mut ResidualBlock, fs: &[crate::problems::ScalarFn], sign: f64) {
    block.set_data(|p, d| {
        for (c, f) in fs.iter().enumerate() {
            d[c] = sign * f(p);
        }
    });
}

/// First least-squares residual `ℒy + ℬu - f` on one element, with the
/// control represented according to `mode`.
pub(crate) fn ls1_block(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    layout: &Layout,
    mode: ControlMode,
) -> ResidualBlock {
    let mut b = ResidualBlock::new(problem.n_comp(), pts);
    state_residual(problem, disc, pts, layout.state.start, 1.0, &mut b);
    match mode {
        ControlMode::Discrete => control_maps(disc, pts, layout.control.start, 1.0, &mut b),
        // ℬ(−p/λ) = (p/λ, 0)
        ControlMode::Eliminated => {
            scalar_basis(&disc.adjoint[0], pts, layout.adjoint.start, 1.0 / problem.lambda, &mut b)
        }
        ControlMode::Nodal => scalar_basis(&disc.adjoint[0], pts, layout.control.start, -1.0, &mut b),
    }
    fill_data(&mut b, &problem.f, 1.0);
    b
}

/// Second least-squares residual `ℒ⋆p - 𝒜*(𝒜ℐy - z_d)` on one element.
pub(crate) fn ls2_block(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    layout: &Layout,
) -> ResidualBlock {
    let mut b = ResidualBlock::new(problem.n_comp(), pts);
    adjoint_residual(problem, disc, pts, layout.adjoint.start, 1.0, &mut b);
    observation_map(disc, pts, layout.state.start, -1.0, &mut b);
    fill_data(&mut b, &problem.z_d, -1.0);
    b
}

/// Initial trace residual `y(0) - u₀ - y₀` on segment `k`.
pub(crate) fn initial_block(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    k: usize,
    layout: &Layout,
    mode: ControlMode,
) -> ResidualBlock {
    let mut b = ResidualBlock::new(1, pts);
    scalar_basis(&disc.state[0], pts, layout.state.start, 1.0, &mut b);
    if disc.has_control0 {
        match mode {
            ControlMode::Discrete => segment_basis(layout.control0.start + k, pts, -1.0, &mut b),
            _ => scalar_basis(&disc.adjoint[0], pts, layout.adjoint.start, 1.0 / problem.lambda0, &mut b),
        }
    }
    if let Some(y0) = &problem.y0 {
        b.set_data(|p, d| d[0] = y0(p));
    }
    b
}

/// Terminal trace residual `p(T) - y(T) + z_{d,T}`.
pub(crate) fn terminal_block(
    problem: &OptimalControlProblem,
    disc: &Discretization,
    pts: &EvalPoints,
    layout: &Layout,
) -> ResidualBlock {
    let mut b = ResidualBlock::new(1, pts);
    scalar_basis(&disc.adjoint[0], pts, layout.adjoint.start, 1.0, &mut b);
    scalar_basis(&disc.state[0], pts, layout.state.start, -1.0, &mut b);
    if let Some(z) = &problem.z_dt {
        b.set_data(|p, d| d[0] = -z(p));
    }
    b
}

/// Assembles the system for the given control representation. The
/// discrete mode realizes the bilinear form `a` with weight `γ`; the
/// eliminated mode realizes the least-squares functional with unit weight.
pub fn assemble_system(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    gamma: f64,
    mode: ControlMode,
) -> Result<(BlockSystem, Discretization), SolverError> {
    let disc = Discretization::new(problem, mesh)?;
    if mode == ControlMode::Nodal && disc.kind == crate::problems::ProblemKind::HeatSpaceTime1D {
        return Err(SolverError::Config(
            "the nodal control representation is available for stationary problems only".into(),
        ));
    }
    let stokes = disc.kind == crate::problems::ProblemKind::StokesPseudostress;
    let layout = Layout::new(&disc, mode);
    let n = layout.total();
    let scale = match mode {
        ControlMode::Eliminated => 1.0,
        _ => gamma,
    };
    let rule = problem.rule();
    let mut t = TripletBuffer::with_capacity(n, n, 60 * mesh.n_elements());
    let mut rhs = vec![0.0; n];
    let mut data_sq = 0.0;
    let mut ell_state = vec![0.0; n];
    let mut ell_adjoint = vec![0.0; n];

    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        let ls1 = ls1_block(problem, &disc, &pts, &layout, mode);
        let ls2 = ls2_block(problem, &disc, &pts, &layout);
        data_sq += scale * (ls1.data_sq() + ls2.data_sq());
        match mode {
            ControlMode::Nodal => {
                // test functions of the reduced functional: (z, −q/λ)
                let mut test = ResidualBlock::new(problem.n_comp(), &pts);
                state_residual(problem, &disc, &pts, layout.state.start, 1.0, &mut test);
                scalar_basis(&disc.adjoint[0], &pts, layout.adjoint.start, 1.0 / problem.lambda, &mut test);
                test.data.clone_from(&ls1.data);
                add_cross(&mut t, &mut rhs, &test, &ls1, scale, true);
            }
            _ => add_gram(&mut t, &mut rhs, &ls1, scale),
        }
        add_gram(&mut t, &mut rhs, &ls2, scale);

        if mode != ControlMode::Eliminated {
            let control_map = match mode {
                ControlMode::Discrete => &disc.control,
                _ => &disc.adjoint[0],
            };
            let mut test = ResidualBlock::new(problem.n_comp(), &pts);
            scalar_basis(control_map, &pts, layout.control.start, 1.0, &mut test);
            let mut trial = ResidualBlock::new(problem.n_comp(), &pts);
            adjoint_pairing(&disc, &pts, layout.adjoint.start, 1.0, &mut trial);
            scalar_basis(control_map, &pts, layout.control.start, problem.lambda, &mut trial);
            add_cross(&mut t, &mut rhs, &test, &trial, 1.0, false);
        }

        if stokes {
            for (g, v) in trace_functional(&disc, &pts, false, layout.state.start) {
                ell_state[g] += v;
            }
            for (g, v) in trace_functional(&disc, &pts, true, layout.adjoint.start) {
                ell_adjoint[g] += v;
            }
        }
    }

    for (k, seg) in disc.initial.segments.iter().enumerate() {
        let pts = EvalPoints::segment(mesh, seg);
        let b = initial_block(problem, &disc, &pts, k, &layout, mode);
        data_sq += scale * b.data_sq();
        add_gram(&mut t, &mut rhs, &b, scale);
        if mode == ControlMode::Discrete && disc.has_control0 {
            let dof = layout.control0.start + k;
            let mut test = ResidualBlock::new(1, &pts);
            segment_basis(dof, &pts, 1.0, &mut test);
            let mut trial = ResidualBlock::new(1, &pts);
            scalar_basis(&disc.adjoint[0], &pts, layout.adjoint.start, 1.0, &mut trial);
            segment_basis(dof, &pts, problem.lambda0, &mut trial);
            add_cross(&mut t, &mut rhs, &test, &trial, 1.0, false);
        }
    }
    for seg in &disc.terminal.segments {
        let pts = EvalPoints::segment(mesh, seg);
        let b = terminal_block(problem, &disc, &pts, &layout);
        data_sq += scale * b.data_sq();
        add_gram(&mut t, &mut rhs, &b, scale);
    }

    let mut rank_one = Vec::new();
    if stokes {
        let c = rank_one_scale(&disc);
        let rows = [interpolate_rt0(mesh, |_| [1.0, 0.0]), interpolate_rt0(mesh, |_| [0.0, 1.0])];
        for (ell, maps, start) in [
            (ell_state, &disc.state, layout.state.start),
            (ell_adjoint, &disc.adjoint, layout.adjoint.start),
        ] {
            let ell: Vec<(usize, f64)> = ell.into_iter().enumerate().filter(|&(_, v)| v != 0.0).collect();
            let base = start + maps[0].n_dofs();
            let nb = maps[1].n_base();
            let kernel: Vec<(usize, f64)> = rows
                .iter()
                .enumerate()
                .flat_map(|(r, vals)| vals.iter().enumerate().map(move |(g, &v)| (base + r * nb + g, v)))
                .filter(|&(_, v)| v != 0.0)
                .collect();
            let pin = kernel
                .iter()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|&(i, _)| i)
                .ok_or_else(|| SolverError::Dimension("empty flux space".into()))?;
            rank_one.push(MeanTrace {
                ell,
                weight: scale * c,
                kernel,
                pin,
            });
        }
    }

    let matrix = t.assemble()?;
    if matrix.rows() != n {
        return Err(SolverError::Dimension(format!("matrix has {} rows, layout {}", matrix.rows(), n)));
    }
    Ok((
        BlockSystem {
            matrix,
            rhs,
            layout,
            mode,
            rank_one,
            data_sq,
        },
        disc,
    ))
}

/// Assembles `a(·;·)` and `ℓ` with piecewise constant controls.
pub fn assemble_coupled(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    config: &SolverConfig,
) -> Result<(BlockSystem, Discretization), SolverError> {
    assemble_system(problem, mesh, config.gamma, ControlMode::Discrete)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSetState {
    /// Control dofs (indices into the unknown vector) at the lower bound.
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub iterations: usize,
    /// Multipliers `μ = ℓ - Kx` on all control dofs, in the order of
    /// `dofs`.
    pub multipliers: Vec<f64>,
    pub dofs: Vec<usize>,
    /// Sizes `(|A_a|, |A_b|)` after each iteration.
    pub history: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub disc: Discretization,
    pub layout: Layout,
    pub mode: ControlMode,
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub active: Option<ActiveSetState>,
}

impl Solution {
    pub fn control(&self) -> &[f64] {
        &self.x[self.layout.control.clone()]
    }

    pub fn state(&self) -> &[f64] {
        &self.x[self.layout.state.clone()]
    }

    pub fn adjoint(&self) -> &[f64] {
        &self.x[self.layout.adjoint.clone()]
    }

    pub fn control0(&self) -> &[f64] {
        &self.x[self.layout.control0.clone()]
    }

    /// Number of unknowns of the discrete least-squares problem (`X_h ×
    /// Y_h × Y⋆_h`, or `Y_h × Y⋆_h` when the control is eliminated).
    pub fn n_lsq(&self) -> usize {
        self.layout.total()
    }
}

impl BlockSystem {
    /// `‖∇Q(x)‖ / ‖ℓ‖`, the mean-trace terms included.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        relative_residual_of(&self.apply(x), &self.rhs)
    }

    /// `K x` for the full form.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut kx = self.matrix.matvec(x);
        self.add_mean_trace(x, &mut kx);
        kx
    }

    /// Adds the mean-trace part of `K x` to `out`.
    pub fn add_mean_trace(&self, x: &[f64], out: &mut [f64]) {
        for m in &self.rank_one {
            let lx: f64 = m.ell.iter().map(|&(i, v)| v * x[i]).sum();
            for &(i, v) in &m.ell {
                out[i] += m.weight * lx * v;
            }
        }
    }
}

fn relative_residual_of(kx: &[f64], b: &[f64]) -> f64 {
    let r: Vec<f64> = kx.iter().zip(b).map(|(u, v)| u - v).collect();
    let s = norm2(b);
    if s > 0.0 {
        norm2(&r) / s
    } else {
        norm2(&r)
    }
}

fn solve_linear(sys: &BlockSystem, disc: Discretization) -> Result<Solution, SolverError> {
    let x = sys.solve_with(&sys.matrix, &sys.rhs)?;
    Ok(Solution {
        residual: sys.relative_residual(&x),
        disc,
        layout: sys.layout.clone(),
        mode: sys.mode,
        x,
        iterations: 1,
        active: None,
    })
}

fn warn_if_not_coercive(sys: &BlockSystem, gamma: f64) {
    let w = coercivity_witness(sys, 3, 1);
    if w <= 0.0 {
        log::warn!("coercivity witness failed (min a(x;x)/|x|^2 = {w:e}) at gamma = {gamma}; consider a larger gamma");
    }
}

/// Minimizer of the least-squares functional for unconstrained controls;
/// the control is recovered as `u = -p/λ`.
pub fn solve_unconstrained(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    if !problem.bounds.is_unconstrained() {
        return Err(SolverError::Config("solve_unconstrained requires infinite control bounds".into()));
    }
    let (sys, disc) = assemble_system(problem, mesh, config.gamma, ControlMode::Eliminated)?;
    solve_linear(&sys, disc)
}

/// Same minimizer as [`solve_unconstrained`], computed from the coupled
/// system with the control kept as an unknown in the adjoint scalar space.
pub fn solve_unconstrained_coupled(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    let (sys, disc) = assemble_system(problem, mesh, config.gamma, ControlMode::Nodal)?;
    solve_linear(&sys, disc)
}

/// Solution of the linear problem `a(x; z) = ℓ(z)` with piecewise
/// constant controls and no constraints.
pub fn solve_coupled(problem: &OptimalControlProblem, mesh: &Mesh, config: &SolverConfig) -> Result<Solution, SolverError> {
    let (sys, disc) = assemble_coupled(problem, mesh, config)?;
    warn_if_not_coercive(&sys, config.gamma);
    solve_linear(&sys, disc)
}

/// Control dofs of a discrete-mode system with their bounds.
pub fn control_bounds(problem: &OptimalControlProblem, layout: &Layout) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let b = &problem.bounds;
    let mut dofs = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for i in layout.control.clone() {
        dofs.push(i);
        lo.push(b.lower);
        hi.push(b.upper);
    }
    for i in layout.control0.clone() {
        dofs.push(i);
        lo.push(b.lower0);
        hi.push(b.upper0);
    }
    (dofs, lo, hi)
}

/// Primal-dual active set iteration on a linear system whose rows `dofs`
/// carry box-constrained unknowns. Returns the solution (clamped) and the
/// final active sets.
pub fn primal_dual_active_set(
    matrix: &SparseMatrix,
    rhs: &[f64],
    dofs: &[usize],
    lower: &[f64],
    upper: &[f64],
    max_iterations: usize,
    blocks: &str,
) -> Result<(Vec<f64>, ActiveSetState), SolverError> {
    active_set_loop(
        matrix,
        rhs,
        dofs,
        lower,
        upper,
        max_iterations,
        |a, b| Ok(solve_labeled(a, b, blocks)?),
        |x| matrix.matvec(x),
    )
}

/// [`primal_dual_active_set`] with a custom linear solver and operator, so
/// that terms kept outside `matrix` enter both.
#[allow(clippy::too_many_arguments)]
fn active_set_loop(
    matrix: &SparseMatrix,
    rhs: &[f64],
    dofs: &[usize],
    lower: &[f64],
    upper: &[f64],
    max_iterations: usize,
    mut solve: impl FnMut(&SparseMatrix, &[f64]) -> Result<Vec<f64>, SolverError>,
    apply: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, ActiveSetState), SolverError> {
    let n = matrix.rows();
    let diag = matrix.diagonal();
    let mut at_lower = vec![false; dofs.len()];
    let mut at_upper = vec![false; dofs.len()];
    let mut history = Vec::new();
    for it in 1..=max_iterations {
        let mut replace = vec![false; n];
        let mut b = rhs.to_vec();
        for (k, &i) in dofs.iter().enumerate() {
            if at_lower[k] {
                replace[i] = true;
                b[i] = lower[k];
            } else if at_upper[k] {
                replace[i] = true;
                b[i] = upper[k];
            }
        }
        let reduced = matrix.with_identity_rows(&replace);
        let mut x = solve(&reduced, &b)?;
        let kx = apply(&x);
        let mu: Vec<f64> = dofs.iter().map(|&i| rhs[i] - kx[i]).collect();
        let mut new_lower = vec![false; dofs.len()];
        let mut new_upper = vec![false; dofs.len()];
        for (k, &i) in dofs.iter().enumerate() {
            let trial = x[i] + mu[k] / diag[i];
            new_lower[k] = trial < lower[k];
            new_upper[k] = !new_lower[k] && trial > upper[k];
        }
        let sizes = (
            new_lower.iter().filter(|&&v| v).count(),
            new_upper.iter().filter(|&&v| v).count(),
        );
        history.push(sizes);
        log::debug!("active set iteration {it}: |A_a| = {}, |A_b| = {}", sizes.0, sizes.1);
        if new_lower == at_lower && new_upper == at_upper {
            for (k, &i) in dofs.iter().enumerate() {
                x[i] = x[i].clamp(lower[k], upper[k]);
            }
            let state = ActiveSetState {
                lower: dofs.iter().zip(&at_lower).filter(|(_, &a)| a).map(|(&i, _)| i).collect(),
                upper: dofs.iter().zip(&at_upper).filter(|(_, &a)| a).map(|(&i, _)| i).collect(),
                iterations: it,
                multipliers: mu,
                dofs: dofs.to_vec(),
                history,
            };
            return Ok((x, state));
        }
        at_lower = new_lower;
        at_upper = new_upper;
    }
    let last = history.last().copied().unwrap_or((0, 0));
    Err(SolverError::ActiveSetDiverged {
        iterations: max_iterations,
        lower: last.0,
        upper: last.1,
    })
}

/// Discrete variational inequality with box constraints on the piecewise
/// constant control, solved by the primal-dual active set method started
/// from empty active sets.
pub fn solve_active_set(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    config: &SolverConfig,
) -> Result<Solution, SolverError> {
    let (sys, disc) = assemble_coupled(problem, mesh, config)?;
    warn_if_not_coercive(&sys, config.gamma);
    let (dofs, lo, hi) = control_bounds(problem, &sys.layout);
    let (x, state) = active_set_loop(
        &sys.matrix,
        &sys.rhs,
        &dofs,
        &lo,
        &hi,
        config.max_iterations,
        |a, b| sys.solve_with(a, b),
        |x| sys.apply(x),
    )?;
    let mask = active_mask(&sys, &state);
    let mut kx = sys.matrix.with_identity_rows(&mask).matvec(&x);
    sys.add_mean_trace(&x, &mut kx);
    Ok(Solution {
        residual: relative_residual_of(&kx, &active_rhs(&sys, &state, &x)),
        disc,
        layout: sys.layout.clone(),
        mode: sys.mode,
        x,
        iterations: state.iterations,
        active: Some(state),
    })
}

fn active_mask(sys: &BlockSystem, state: &ActiveSetState) -> Vec<bool> {
    let mut m = vec![false; sys.layout.total()];
    for &i in state.lower.iter().chain(&state.upper) {
        m[i] = true;
    }
    m
}

fn active_rhs(sys: &BlockSystem, state: &ActiveSetState, x: &[f64]) -> Vec<f64> {
    let mut b = sys.rhs.clone();
    for &i in state.lower.iter().chain(&state.upper) {
        b[i] = x[i];
    }
    b
}

/// Smallest value of `a(x; v - x) - ℓ(v - x)` over the extreme admissible
/// directions of every control dof. Nonnegative (up to rounding) at a
/// solution of the variational inequality.
pub fn vi_residual_min(sys: &BlockSystem, problem: &OptimalControlProblem, x: &[f64]) -> f64 {
    let (dofs, lo, hi) = control_bounds(problem, &sys.layout);
    let kx = sys.apply(x);
    let mut min = f64::INFINITY;
    for (k, &i) in dofs.iter().enumerate() {
        let g = kx[i] - sys.rhs[i];
        for v in [lo[k], hi[k]] {
            let d = if v.is_finite() { v - x[i] } else { v.signum() };
            min = min.min(g * d);
        }
    }
    min
}

/// Checks sign conditions of the multipliers at a converged active set:
/// `μ = 0` on inactive dofs, `μ ≤ 0` at the lower and `μ ≥ 0` at the upper
/// bound. Returns the largest violation.
pub fn complementarity_violation(state: &ActiveSetState, x: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let lo: std::collections::HashSet<_> = state.lower.iter().copied().collect();
    let hi: std::collections::HashSet<_> = state.upper.iter().copied().collect();
    let mut worst = 0.0f64;
    for (k, &i) in state.dofs.iter().enumerate() {
        let mu = state.multipliers[k];
        let v = if lo.contains(&i) {
            worst = worst.max((x[i] - lower[k]).abs());
            mu.max(0.0)
        } else if hi.contains(&i) {
            worst = worst.max((x[i] - upper[k]).abs());
            (-mu).max(0.0)
        } else {
            worst = worst.max((lower[k] - x[i]).max(0.0)).max((x[i] - upper[k]).max(0.0));
            mu.abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// `min a(x;x)/|x|²` over random vectors.
pub fn coercivity_witness(sys: &BlockSystem, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sys.layout.total();
    let mut min = f64::INFINITY;
    for _ in 0..samples {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nx: f64 = x.iter().map(|v| v * v).sum();
        min = min.min(sys.form(&x, &x) / nx);
    }
    min
}

/// Closed-form reference fields for error computation.
pub trait ExactSolution {
    /// Norm components of the exact state in the layout of
    /// [`norm_block`].
    fn state_norm(&self, x: Point, out: &mut [f64]);
    fn adjoint_norm(&self, x: Point, out: &mut [f64]);
    /// Exact control components.
    fn control(&self, x: Point, out: &mut [f64]);
    /// Exact initial control (heat).
    fn control0(&self, _x: Point) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolutionNorms {
    pub err_u: f64,
    pub err_u0: Option<f64>,
    pub err_state: f64,
    pub err_adjoint: f64,
}

/// Control field of a solution as a residual block (values of `u_h`).
pub(crate) fn control_block(
    problem: &OptimalControlProblem,
    sol: &Solution,
    pts: &EvalPoints,
) -> ResidualBlock {
    let disc = &sol.disc;
    let mut b = ResidualBlock::new(problem.control_dim(), pts);
    match sol.mode {
        ControlMode::Discrete => scalar_basis(&disc.control, pts, sol.layout.control.start, 1.0, &mut b),
        ControlMode::Eliminated => {
            scalar_basis(&disc.adjoint[0], pts, sol.layout.adjoint.start, -1.0 / problem.lambda, &mut b)
        }
        ControlMode::Nodal => scalar_basis(&disc.adjoint[0], pts, sol.layout.control.start, 1.0, &mut b),
    }
    b
}

/// Initial control `u₀,h` on trace segment `k`.
pub(crate) fn control0_block(
    problem: &OptimalControlProblem,
    sol: &Solution,
    pts: &EvalPoints,
    k: usize,
) -> ResidualBlock {
    let mut b = ResidualBlock::new(1, pts);
    match sol.mode {
        ControlMode::Discrete => segment_basis(sol.layout.control0.start + k, pts, 1.0, &mut b),
        _ => scalar_basis(&sol.disc.adjoint[0], pts, sol.layout.adjoint.start, -1.0 / problem.lambda0, &mut b),
    }
    b
}

/// Errors in `L²` (control) and `Y`, `Y⋆` norms (state, adjoint).
pub fn solution_norms(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    sol: &Solution,
    exact: &dyn ExactSolution,
) -> SolutionNorms {
    let rule = problem.rule();
    let disc = &sol.disc;
    let nn = norm_comp(problem);
    let (mut eu, mut es, mut ea) = (0.0, 0.0, 0.0);
    for e in 0..mesh.n_elements() {
        let pts = EvalPoints::volume(mesh, e, &rule);
        let mut b = ResidualBlock::new(nn, &pts);
        norm_block(problem, disc, &pts, false, sol.layout.state.start, &mut b);
        b.set_data(|p, d| exact.state_norm(p, d));
        es += b.residual_sq(&sol.x, None);
        let mut b = ResidualBlock::new(nn, &pts);
        norm_block(problem, disc, &pts, true, sol.layout.adjoint.start, &mut b);
        b.set_data(|p, d| exact.adjoint_norm(p, d));
        ea += b.residual_sq(&sol.x, None);
        let mut b = control_block(problem, sol, &pts);
        b.set_data(|p, d| exact.control(p, d));
        eu += b.residual_sq(&sol.x, None);
    }
    let err_u0 = if disc.has_control0 {
        let mut s = 0.0;
        for (k, seg) in disc.initial.segments.iter().enumerate() {
            let pts = EvalPoints::segment(mesh, seg);
            let mut b = control0_block(problem, sol, &pts, k);
            b.set_data(|p, d| d[0] = exact.control0(p).unwrap_or(0.0));
            s += b.residual_sq(&sol.x, None);
        }
        Some(s.sqrt())
    } else {
        None
    };
    SolutionNorms {
        err_u: eu.sqrt(),
        err_u0,
        err_state: es.sqrt(),
        err_adjoint: ea.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_lshape, build_rectangle_spacetime, build_unit_square, refine_nvb};
    use crate::problems::{ControlConstraints, ScalarFn};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn sf(f: impl Fn(Point) -> f64 + Send + Sync + 'static) -> ScalarFn {
        Arc::new(f)
    }

    fn poisson(bounds: ControlConstraints) -> OptimalControlProblem {
        let g = |s: f64| s * (1.0 - s);
        OptimalControlProblem::poisson(
            0.01,
            bounds,
            sf(move |x| 2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin() + 100.0 * g(x[0]) * g(x[1])),
            sf(move |x| -2.0 * g(x[1]) - 2.0 * g(x[0]) + (PI * x[0]).sin() * (PI * x[1]).sin()),
        )
        .unwrap()
    }

    fn stokes() -> OptimalControlProblem {
        OptimalControlProblem::stokes(
            0.1,
            ControlConstraints::unconstrained(),
            [sf(|x| (3.0 * x[0]).sin() * x[1]), sf(|x| x[0] * x[1])],
            [sf(|x| x[0] + x[1]), sf(|x| (2.0 * x[1]).cos())],
        )
        .unwrap()
    }

    fn heat(bounds: ControlConstraints) -> OptimalControlProblem {
        OptimalControlProblem::heat(
            1.0,
            0.1,
            0.1,
            bounds,
            sf(|x| x[0] * (PI * x[1]).sin()),
            sf(|x| 1.0 + x[0]),
            sf(|x| x[1] * (1.0 - x[1])),
            sf(|x| (PI * x[1]).sin()),
        )
        .unwrap()
    }

    fn three_level(m: Mesh) -> Mesh {
        let m = refine_nvb(&m, &[0]).unwrap();
        let m = refine_nvb(&m, &[1, 3]).unwrap();
        refine_nvb(&m, &[2, 5, 7]).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let cfg = SolverConfig::default();
        let m = build_unit_square(2);
        for p in [poisson(ControlConstraints::unconstrained()).homogeneous(), stokes().homogeneous()] {
            for mode in [ControlMode::Discrete, ControlMode::Eliminated, ControlMode::Nodal] {
                let (sys, disc) = assemble_system(&p, &m, 5.0, mode).unwrap();
                assert!(sys.rhs.iter().all(|&v| v == 0.0));
                let s = solve_linear(&sys, disc).unwrap();
                assert!(s.x.iter().all(|&v| v == 0.0));
            }
            let s = solve_unconstrained(&p, &m, &cfg).unwrap();
            assert!(s.x.iter().all(|&v| v == 0.0));
        }
        let h = heat(ControlConstraints::unconstrained()).homogeneous();
        let s = solve_coupled(&h, &build_rectangle_spacetime(1.0, 2), &cfg).unwrap();
        assert!(s.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_flux_is_in_the_kernel_without_mean_term() {
        let m = three_level(build_unit_square(2));
        for mode in [ControlMode::Discrete, ControlMode::Eliminated, ControlMode::Nodal] {
            let (sys, _) = assemble_system(&stokes(), &m, 5.0, mode).unwrap();
            assert_eq!(sys.rank_one.len(), 2);
            for mt in &sys.rank_one {
                let mut e = vec![0.0; sys.layout.total()];
                for &(i, v) in &mt.kernel {
                    e[i] = v;
                }
                let ke = sys.matrix.matvec(&e);
                assert!(norm2(&ke) < 1e-9, "{mode:?}: {}", norm2(&ke));
                // ∫ tr I = 2|Ω|
                assert!((mt.ell_kernel() - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_block_is_symmetric() {
        let p = poisson(ControlConstraints::unconstrained());
        let m = build_lshape(1);
        let (sys, _) = assemble_coupled(&p, &m, &SolverConfig::default()).unwrap();
        let r = sys.layout.state.clone();
        for i in r.clone() {
            for j in r.clone() {
                assert!((sys.matrix.get(i, j) - sys.matrix.get(j, i)).abs() < 1e-14);
            }
        }
        // the eliminated system is a Gram matrix
        let (sys, _) = assemble_system(&p, &m, 5.0, ControlMode::Eliminated).unwrap();
        assert!(sys.matrix.asymmetry() < 1e-12);
    }

    #[test]
    fn control_mass_block() {
        let p = poisson(ControlConstraints::unconstrained());
        let m = build_unit_square(1);
        for gamma in [5.0, 1.0, 0.25] {
            let (sys, _) = assemble_system(&p, &m, gamma, ControlMode::Discrete).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let expected = if i == j { (gamma + p.lambda) * m.area(i) } else { 0.0 };
                    assert!((sys.matrix.get(i, j) - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn elimination_and_coupled_paths_agree() {
        let cfg = SolverConfig::default();
        for (p, m) in [
            (poisson(ControlConstraints::unconstrained()), three_level(build_unit_square(2))),
            (stokes(), three_level(build_unit_square(2))),
        ] {
            let a = solve_unconstrained(&p, &m, &cfg).unwrap();
            let b = solve_unconstrained_coupled(&p, &m, &cfg).unwrap();
            let scale = a.x.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            for (u, v) in a.state().iter().zip(b.state()) {
                assert!((u - v).abs() <= 1e-9 * scale);
            }
            for (u, v) in a.adjoint().iter().zip(b.adjoint()) {
                assert!((u - v).abs() <= 1e-9 * scale);
            }
            let pn = &a.adjoint()[..a.disc.adjoint[0].n_dofs()];
            for (u, pv) in b.control().iter().zip(pn) {
                assert!((u + pv / p.lambda).abs() <= 1e-9 * scale / p.lambda);
            }
        }
    }

    #[test]
    fn quadratic_form_matches_minimum() {
        // the minimizer of the quadratic has zero gradient: perturbations increase it
        let p = poisson(ControlConstraints::unconstrained());
        let m = build_unit_square(3);
        let (sys, disc) = assemble_system(&p, &m, 1.0, ControlMode::Eliminated).unwrap();
        let s = solve_linear(&sys, disc).unwrap();
        let g0 = sys.quadratic(&s.x);
        let mut y = s.x.clone();
        y[3] += 1e-3;
        assert!(sys.quadratic(&y) > g0);
        assert!(g0 > 0.0);
    }

    #[test]
    fn wide_bounds_reproduce_linear_solve() {
        let cfg = SolverConfig::default();
        let m = build_unit_square(4);
        let wide = ControlConstraints::new(-1e6, 1e6).unwrap();
        let a = solve_active_set(&poisson(wide), &m, &cfg).unwrap();
        let b = solve_coupled(&poisson(ControlConstraints::unconstrained()), &m, &cfg).unwrap();
        assert_eq!(a.iterations, 1);
        let scale = norm2(&b.x);
        let diff: Vec<f64> = a.x.iter().zip(&b.x).map(|(u, v)| u - v).collect();
        assert!(norm2(&diff) <= 1e-8 * scale);
    }

    #[test]
    fn scalar_clamp_toy() {
        // [λ 1; 0 1] (u, p) = (0, p0): u = clamp(-p0/λ, a, b)
        let lambda = 0.5;
        for p0 in [-2.0, -0.3, 0.0, 0.2, 1.0] {
            let mut t = TripletBuffer::new(2, 2);
            t.push(0, 0, lambda);
            t.push(0, 1, 1.0);
            t.push(1, 1, 1.0);
            let k = t.assemble().unwrap();
            let (x, st) = primal_dual_active_set(&k, &[0.0, p0], &[0], &[-1.0], &[0.2], 10, "toy").unwrap();
            assert!((x[0] - (-p0 / lambda).clamp(-1.0, 0.2)).abs() < 1e-14);
            assert!(st.iterations <= 3);
        }
    }

    #[test]
    fn constrained_poisson_complementarity() {
        let cfg = SolverConfig::default();
        let p = poisson(ControlConstraints::new(-1.0, 0.0).unwrap());
        let m = build_unit_square(8);
        let s = solve_active_set(&p, &m, &cfg).unwrap();
        let st = s.active.as_ref().unwrap();
        assert!(st.iterations <= 10, "{} iterations", st.iterations);
        assert!(!st.lower.is_empty());
        assert_eq!(st.history[st.history.len() - 1], (st.lower.len(), st.upper.len()));
        assert!(s.control().iter().all(|&u| (-1.0..=0.0).contains(&u)));
        let (_, lo, hi) = control_bounds(&p, &s.layout);
        let viol = complementarity_violation(st, &s.x, &lo, &hi);
        assert!(viol < 1e-10, "violation {viol}");
        let (sys, _) = assemble_coupled(&p, &m, &cfg).unwrap();
        assert!(vi_residual_min(&sys, &p, &s.x) >= -1e-9);
    }

    #[test]
    fn constrained_heat_respects_both_bounds() {
        let cfg = SolverConfig::default();
        let bounds = ControlConstraints::new(-1.0, 0.0).unwrap().with_initial_bounds(-0.05, 0.0).unwrap();
        let p = heat(bounds);
        let m = build_rectangle_spacetime(1.0, 4);
        let s = solve_active_set(&p, &m, &cfg).unwrap();
        assert_eq!(s.control0().len(), 4);
        assert!(s.control0().iter().all(|&u| (-0.05..=0.0).contains(&u)));
        let st = s.active.as_ref().unwrap();
        let (_, lo, hi) = control_bounds(&p, &s.layout);
        assert!(complementarity_violation(st, &s.x, &lo, &hi) < 1e-10);
        let (sys, _) = assemble_coupled(&p, &m, &cfg).unwrap();
        assert!(vi_residual_min(&sys, &p, &s.x) >= -1e-9);
    }

    #[test]
    fn heat_without_initial_control_drops_the_block() {
        let mut p = heat(ControlConstraints::unconstrained());
        p.lambda0 = 0.0;
        let m = build_rectangle_spacetime(1.0, 2);
        let (sys, _) = assemble_coupled(&p, &m, &SolverConfig::default()).unwrap();
        assert!(sys.layout.control0.is_empty());
        assert!(solve_coupled(&p, &m, &SolverConfig::default()).is_ok());
    }

    #[test]
    fn coercivity_on_small_systems() {
        let cfg = SolverConfig::default();
        let cases = [
            (poisson(ControlConstraints::unconstrained()), build_lshape(2)),
            (stokes(), build_unit_square(3)),
            (heat(ControlConstraints::unconstrained()), build_rectangle_spacetime(1.0, 4)),
        ];
        for (p, m) in cases {
            let (sys, _) = assemble_coupled(&p, &m, &cfg).unwrap();
            assert!(coercivity_witness(&sys, 50, 9) > 0.0);
        }
    }

    #[test]
    fn linear_exact_solution_has_zero_norm_error() {
        struct Affine;
        impl ExactSolution for Affine {
            fn state_norm(&self, _: Point, out: &mut [f64]) {
                out.iter_mut().for_each(|v| *v = 0.0);
            }
            fn adjoint_norm(&self, _: Point, out: &mut [f64]) {
                out.iter_mut().for_each(|v| *v = 0.0);
                // ξ = (1, 0) is an RT0 field with zero divergence
                out[2] = 1.0;
            }
            fn control(&self, _: Point, out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let p = poisson(ControlConstraints::unconstrained());
        let m = build_unit_square(2);
        let (sys, disc) = assemble_system(&p, &m, 1.0, ControlMode::Discrete).unwrap();
        let mut s = solve_linear(&sys, disc).unwrap();
        s.x.iter_mut().for_each(|v| *v = 0.0);
        let xi = crate::fem_spaces::interpolate_rt0(&m, |_| [1.0, 0.0]);
        let off = s.layout.adjoint.start + s.disc.adjoint[0].n_dofs();
        s.x[off..off + xi.len()].copy_from_slice(&xi);
        let n = solution_norms(&p, &m, &s, &Affine);
        assert!(n.err_state < 1e-12 && n.err_adjoint < 1e-12 && n.err_u < 1e-12);
    }

    #[test]
    fn invalid_gamma() {
        assert!(SolverConfig::with_gamma(0.0).is_err());
        assert!(SolverConfig::with_gamma(-1.0).is_err());
        assert_eq!(SolverConfig::with_gamma(2.0).unwrap().gamma, 2.0);
    }

    #[test]
    fn constrained_problem_rejected_by_unconstrained_solver() {
        let p = poisson(ControlConstraints::new(-1.0, 0.0).unwrap());
        assert!(matches!(
            solve_unconstrained(&p, &build_unit_square(2), &SolverConfig::default()),
            Err(SolverError::Config(_))
        ));
    }
}
