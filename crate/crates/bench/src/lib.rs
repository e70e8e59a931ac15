//! Shared fixtures for the benchmarks.

use lsopt_core::{refine_nvb, ExperimentSpec, Mesh, OptimalControlProblem};

/// Problem and mesh of a named experiment after `levels` uniform
/// refinements of its initial mesh.
pub fn fixture(name: &str, levels: usize) -> (OptimalControlProblem, Mesh) {
    let spec = ExperimentSpec::by_name(name).expect("known experiment");
    let problem = spec.problem().expect("experiment problem");
    let mut mesh = spec.initial_mesh();
    for _ in 0..levels {
        let all: Vec<usize> = (0..mesh.n_elements()).collect();
        mesh = refine_nvb(&mesh, &all).expect("uniform refinement");
    }
    (problem, mesh)
}

/// Random indicator vector for marking benchmarks.
pub fn indicators(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64).powi(3)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_refines_uniformly() {
        let (_, m0) = fixture("poisson-unconstrained", 0);
        let (_, m2) = fixture("poisson-unconstrained", 2);
        assert_eq!(m2.n_elements(), 16 * m0.n_elements());
    }

    #[test]
    fn indicators_are_reproducible() {
        let a = indicators(50, 3);
        assert_eq!(a, indicators(50, 3));
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    }
}
