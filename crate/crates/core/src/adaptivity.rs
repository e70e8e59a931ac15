//! Solve, estimate, mark, refine.

use crate::error::{ExperimentError, SolverError};
use crate::estimator::{estimate_constrained, estimate_unconstrained, EstimatorBreakdown};
use crate::mesh::{mesh_stats, refine_nvb, Mesh};
use crate::problems::OptimalControlProblem;
use crate::vi_solver::{complementarity_violation, control_bounds, solution_norms, solve_active_set, solve_unconstrained, ExactSolution, Solution, SolverConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub theta: f64,
    /// Stop once a level has more unknowns than this.
    pub max_dofs: usize,
    /// Optional cap on the number of levels.
    pub max_levels: Option<usize>,
    /// Mark every element.
    pub uniform: bool,
}

impl AdaptConfig {
    pub fn new(theta: f64, max_dofs: usize, max_levels: Option<usize>, uniform: bool) -> Result<Self, SolverError> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(SolverError::Config(format!("theta must lie in (0, 1], got {theta}")));
        }
        if max_levels == Some(0) {
            return Err(SolverError::Config("at least one level is required".into()));
        }
        Ok(AdaptConfig {
            theta,
            max_dofs,
            max_levels,
            uniform,
        })
    }
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            theta: 0.25,
            max_dofs: 100_000,
            max_levels: None,
            uniform: false,
        }
    }
}

/// One row of a convergence history.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub level: usize,
    /// `dim X_h + dim Y_h + dim Y⋆_h`.
    pub n_dofs: usize,
    pub h_max: f64,
    /// `η` for constrained problems, `√G` otherwise.
    pub estimator: f64,
    pub err_u: Option<f64>,
    pub err_u0: Option<f64>,
    pub err_state: Option<f64>,
    pub err_adjoint: Option<f64>,
    pub iterations: Option<usize>,
    /// Largest violation of the sign and bound conditions at the converged
    /// active set.
    pub complementarity: Option<f64>,
}

impl ConvergenceRecord {
    pub fn value(&self, column: Column) -> Option<f64> {
        match column {
            Column::Estimator => Some(self.estimator),
            Column::ErrU => self.err_u,
            Column::ErrU0 => self.err_u0,
            Column::ErrState => self.err_state,
            Column::ErrAdjoint => self.err_adjoint,
        }
    }

    /// `sqrt(err_u² + err_u0² + err_state² + err_adjoint²)` when errors are
    /// known.
    pub fn total_error(&self) -> Option<f64> {
        let s = self.err_state?;
        let a = self.err_adjoint?;
        let u = self.err_u.unwrap_or(0.0);
        let u0 = self.err_u0.unwrap_or(0.0);
        Some((s * s + a * a + u * u + u0 * u0).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Estimator,
    ErrU,
    ErrU0,
    ErrState,
    ErrAdjoint,
}

impl Column {
    pub const ALL: [Column; 5] = [
        Column::Estimator,
        Column::ErrU,
        Column::ErrU0,
        Column::ErrState,
        Column::ErrAdjoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::Estimator => "estLSQ",
            Column::ErrU => "errU",
            Column::ErrU0 => "errU0",
            Column::ErrState => "errState",
            Column::ErrAdjoint => "errAdjoint",
        }
    }
}

/// Why the loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopStatus {
    DofLimit,
    LevelLimit,
    /// The estimator vanished at quadrature resolution.
    QuadratureFloor,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub records: Vec<ConvergenceRecord>,
    pub status: LoopStatus,
    pub mesh: Mesh,
}

/// Smallest set of elements carrying a `θ` fraction of the total, taken as
/// a prefix of the indicators sorted descending (ties by lower index).
/// Returned in ascending index order.
pub fn mark_doerfler(indicators: &[f64], theta: f64) -> Result<Vec<usize>, SolverError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(SolverError::Config(format!("theta must lie in (0, 1], got {theta}")));
    }
    if let Some(bad) = indicators.iter().find(|v| !(**v >= 0.0)) {
        return Err(SolverError::Config(format!("invalid indicator {bad}")));
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&i, &j| indicators[j].total_cmp(&indicators[i]).then(i.cmp(&j)));
    let total: f64 = order.iter().map(|&i| indicators[i]).sum();
    if total == 0.0 {
        return Ok(Vec::new());
    }
    let target = theta * total;
    let mut acc = 0.0;
    let mut marked = Vec::new();
    for &i in &order {
        acc += indicators[i];
        marked.push(i);
        if acc >= target {
            break;
        }
    }
    marked.sort_unstable();
    Ok(marked)
}

/// Whether `set` satisfies the bulk criterion and loses it when its
/// smallest indicator is removed.
pub fn is_minimal_bulk(indicators: &[f64], theta: f64, set: &[usize]) -> bool {
    let total: f64 = indicators.iter().sum();
    let sum: f64 = set.iter().map(|&i| indicators[i]).sum();
    if set.is_empty() {
        return total == 0.0;
    }
    let min = set.iter().map(|&i| indicators[i]).fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * total;
    sum >= theta * total - slack && sum - min < theta * total + slack
}

/// Solves with the path matching the problem's constraints and returns the
/// estimator breakdown.
pub fn solve_and_estimate(
    problem: &OptimalControlProblem,
    mesh: &Mesh,
    solver: &SolverConfig,
) -> Result<(Solution, EstimatorBreakdown), SolverError> {
    if problem.bounds.is_unconstrained() {
        let s = solve_unconstrained(problem, mesh, solver)?;
        let est = estimate_unconstrained(problem, mesh, &s);
        Ok((s, est))
    } else {
        let s = solve_active_set(problem, mesh, solver)?;
        let est = estimate_constrained(problem, mesh, &s);
        Ok((s, est))
    }
}

pub fn adaptive_loop(
    problem: &OptimalControlProblem,
    mesh: Mesh,
    solver: &SolverConfig,
    adapt: &AdaptConfig,
    exact: Option<&dyn ExactSolution>,
) -> Result<AdaptOutcome, ExperimentError> {
    adaptive_loop_with(problem, mesh, solver, adapt, exact, |_, _| {})
}

/// [`adaptive_loop`] with an observer called on every level's mesh and
/// record before refinement.
pub fn adaptive_loop_with(
    problem: &OptimalControlProblem,
    mut mesh: Mesh,
    solver: &SolverConfig,
    adapt: &AdaptConfig,
    exact: Option<&dyn ExactSolution>,
    mut observe: impl FnMut(&Mesh, &ConvergenceRecord),
) -> Result<AdaptOutcome, ExperimentError> {
    let mut records = Vec::new();
    for level in 0.. {
        let at = |source: SolverError| ExperimentError::Level { level, source };
        let (sol, est) = solve_and_estimate(problem, &mesh, solver).map_err(at)?;
        let norms = exact.map(|x| solution_norms(problem, &mesh, &sol, x));
        let rec = ConvergenceRecord {
            level,
            n_dofs: sol.disc.n_total(),
            h_max: mesh_stats(&mesh).h_max,
            estimator: est.eta(),
            err_u: norms.map(|n| n.err_u),
            err_u0: norms.and_then(|n| n.err_u0),
            err_state: norms.map(|n| n.err_state),
            err_adjoint: norms.map(|n| n.err_adjoint),
            iterations: sol.active.as_ref().map(|a| a.iterations),
            complementarity: sol.active.as_ref().map(|a| {
                let (_, lo, hi) = control_bounds(problem, &sol.layout);
                complementarity_violation(a, &sol.x, &lo, &hi)
            }),
        };
        log::info!(
            "level {level}: N = {}, estimator = {:.6e}, elements = {}",
            rec.n_dofs,
            rec.estimator,
            mesh.n_elements()
        );
        observe(&mesh, &rec);
        let n = rec.n_dofs;
        records.push(rec);
        let status = if n > adapt.max_dofs {
            Some(LoopStatus::DofLimit)
        } else if adapt.max_levels.is_some_and(|k| records.len() >= k) {
            Some(LoopStatus::LevelLimit)
        } else if est.total() == 0.0 {
            Some(LoopStatus::QuadratureFloor)
        } else {
            None
        };
        if let Some(status) = status {
            return Ok(AdaptOutcome { records, status, mesh });
        }
        let marked = if adapt.uniform {
            (0..mesh.n_elements()).collect()
        } else {
            mark_doerfler(&est.indicators(), adapt.theta).map_err(at)?
        };
        mesh = refine_nvb(&mesh, &marked)?;
    }
    unreachable!("the level loop only exits by returning")
}

/// Rates `-log(e_{k+1}/e_k) / log(N_{k+1}/N_k)`; `None` where one of the
/// values is missing or nonpositive.
pub fn compute_eoc(records: &[ConvergenceRecord], column: Column) -> Vec<Option<f64>> {
    records
        .windows(2)
        .map(|w| {
            let a = w[0].value(column)?;
            let b = w[1].value(column)?;
            if !(a > 0.0 && b > 0.0) || w[1].n_dofs == w[0].n_dofs {
                return None;
            }
            Some(-(b / a).ln() / (w[1].n_dofs as f64 / w[0].n_dofs as f64).ln())
        })
        .collect()
}

/// Mean of the last `steps` available rates.
pub fn mean_last_rates(rates: &[Option<f64>], steps: usize) -> Option<f64> {
    let tail: Vec<f64> = rates.iter().rev().take(steps).map(|r| r.ok_or(())).collect::<Result<_, _>>().ok()?;
    if tail.len() < steps || steps == 0 {
        return None;
    }
    Some(tail.iter().sum::<f64>() / steps as f64)
}
