use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("element {element} has non-positive signed area {area:e}")]
    NonPositiveArea { element: usize, area: f64 },
    #[error("vertex index out of range in element {element}")]
    VertexOutOfRange { element: usize },
    #[error("marked element {0} out of range")]
    ElementOutOfRange(usize),
    #[error("marked edge {0} out of range")]
    EdgeOutOfRange(usize),
    #[error("refinement closure did not terminate (broken refinement-edge assignment)")]
    ClosureDiverged,
    #[error("unknown boundary label `{0}`")]
    UnknownLabel(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("unsupported quadrature degree {0} (supported: 1..=6)")]
    UnsupportedDegree(usize),
    #[error("boundary label `{0}` does not occur on the mesh")]
    MissingLabel(String),
    #[error("field length {got} does not match dof count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("triplet ({row}, {col}) outside a {rows}x{cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("right-hand side length {got} does not match dimension {expected}")]
    RhsLength { expected: usize, got: usize },
    #[error("factorization failed for system with blocks [{blocks}]: {reason}")]
    Singular { blocks: String, reason: String },
    #[error("relative residual {residual:e} exceeds tolerance {tol:e} for blocks [{blocks}]")]
    Residual {
        residual: f64,
        tol: f64,
        blocks: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("active set did not reach a fixpoint in {iterations} iterations (|A_a| = {lower}, |A_b| = {upper})")]
    ActiveSetDiverged {
        iterations: usize,
        lower: usize,
        upper: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("assembly dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed data file: {0}")]
    Parse(String),
}
