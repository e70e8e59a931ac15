//! Lowest-order finite element spaces, dof numbering, basis evaluation and
//! quadrature.

use std::collections::BTreeSet;

use crate::error::FemError;
use crate::mesh::{BoundaryLabel, EdgeTable, Mesh, Point};

/// Quadrature on the reference triangle, points in barycentric coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    /// Weights relative to the reference triangle (sum 1/2).
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn orbit3(a: f64) -> [[f64; 3]; 3] {
    let b = 1.0 - 2.0 * a;
    [[a, a, b], [a, b, a], [b, a, a]]
}

fn orbit6(a: f64, b: f64) -> [[f64; 3]; 6] {
    let c = 1.0 - a - b;
    [
        [a, b, c],
        [a, c, b],
        [b, a, c],
        [b, c, a],
        [c, a, b],
        [c, b, a],
    ]
}

/// Symmetric Gaussian rule exact for polynomials of total degree `degree`.
pub fn quadrature(degree: usize) -> Result<QuadratureRule, FemError> {
    let (points, weights, exact): (Vec<[f64; 3]>, Vec<f64>, usize) = match degree {
        1 => (vec![[1.0 / 3.0; 3]], vec![0.5], 1),
        2 => {
            let p = orbit3(1.0 / 6.0).to_vec();
            (p, vec![1.0 / 6.0; 3], 2)
        }
        3 | 4 => {
            let mut p = orbit3(0.445_948_490_915_964_886_32).to_vec();
            p.extend(orbit3(0.091_576_213_509_770_743_46));
            let mut w = vec![0.5 * 0.223_381_589_678_011_465_70; 3];
            w.extend([0.5 * 0.109_951_743_655_321_867_64; 3]);
            (p, w, 4)
        }
        5 | 6 => {
            let mut p = orbit3(0.063_089_014_491_502_228_340).to_vec();
            p.extend(orbit3(0.249_286_745_170_910_421_29));
            p.extend(orbit6(0.053_145_049_844_816_947_353, 0.310_352_451_033_784_405_42));
            let mut w = vec![0.5 * 0.050_844_906_370_206_816_921; 3];
            w.extend([0.5 * 0.116_786_275_726_379_366_03; 3]);
            w.extend([0.5 * 0.082_851_075_618_373_575_194; 6]);
            (p, w, 6)
        }
        d => return Err(FemError::UnsupportedDegree(d)),
    };
    Ok(QuadratureRule {
        points,
        weights,
        degree: exact,
    })
}

/// Gauss-Legendre rule on `[0, 1]` with `n` points (`n` in 1..=4), weights
/// summing to 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w): (Vec<f64>, Vec<f64>) = match n {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = (1.0f64 / 3.0).sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = 0.6f64.sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let s = (6.0f64 / 5.0).sqrt() * 2.0 / 7.0;
            let a = (3.0 / 7.0 - s).sqrt();
            let b = (3.0 / 7.0 + s).sqrt();
            let wa = (18.0 + 30.0f64.sqrt()) / 36.0;
            let wb = (18.0 - 30.0f64.sqrt()) / 36.0;
            (vec![-b, -a, a, b], vec![wb, wa, wa, wb])
        }
        _ => panic!("gauss_legendre supports 1..=4 points"),
    };
    (
        x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|w| 0.5 * w).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpaceKind {
    P0Scalar,
    P0Vector(usize),
    S1,
    /// Continuous piecewise linears vanishing on edges with the listed labels.
    S1Zero(BTreeSet<BoundaryLabel>),
    /// `d` independent copies of `S1Zero`.
    S1ZeroVector(BTreeSet<BoundaryLabel>, usize),
    Rt0,
    /// Matrix field whose `d` rows are independent RT0 fields.
    Rt0Rows(usize),
}

impl SpaceKind {
    pub fn s1_zero(labels: &[BoundaryLabel]) -> Self {
        SpaceKind::S1Zero(labels.iter().copied().collect())
    }

    pub fn copies(&self) -> usize {
        match self {
            SpaceKind::P0Vector(d) | SpaceKind::S1ZeroVector(_, d) | SpaceKind::Rt0Rows(d) => *d,
            _ => 1,
        }
    }

    /// Local basis functions per element and copy.
    pub fn local_size(&self) -> usize {
        match self {
            SpaceKind::P0Scalar | SpaceKind::P0Vector(_) => 1,
            _ => 3,
        }
    }

    pub fn is_rt0(&self) -> bool {
        matches!(self, SpaceKind::Rt0 | SpaceKind::Rt0Rows(_))
    }
}

/// Global dof numbering. Copies are numbered copy-major:
/// `global = copy * n_base + base`.
#[derive(Clone, Debug)]
pub struct DofMap {
    kind: SpaceKind,
    n_base: usize,
    local: Vec<Option<usize>>,
    signs: Vec<[f64; 3]>,
}

impl DofMap {
    pub fn kind(&self) -> &SpaceKind {
        &self.kind
    }

    pub fn n_dofs(&self) -> usize {
        self.n_base * self.kind.copies()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn copies(&self) -> usize {
        self.kind.copies()
    }

    pub fn local_size(&self) -> usize {
        self.kind.local_size()
    }

    /// Global index of local basis `i` of copy `copy` on element `e`, `None`
    /// for constrained dofs.
    pub fn global(&self, e: usize, copy: usize, i: usize) -> Option<usize> {
        let nloc = self.kind.local_size();
        self.local[e * nloc + i].map(|g| copy * self.n_base + g)
    }

    /// RT0 orientation sign of local edge `i` of element `e`; 1 for other
    /// spaces.
    pub fn sign(&self, e: usize, i: usize) -> f64 {
        if self.signs.is_empty() {
            1.0
        } else {
            self.signs[e][i]
        }
    }
}

fn constrained_vertices(
    mesh: &Mesh,
    labels: &BTreeSet<BoundaryLabel>,
) -> Result<Vec<bool>, FemError> {
    let present = mesh.labels();
    if let Some(l) = labels.iter().find(|l| !present.contains(l)) {
        return Err(FemError::MissingLabel(l.to_string()));
    }
    let mut fixed = vec![false; mesh.n_vertices()];
    for b in mesh.boundary() {
        if labels.contains(&b.label) {
            fixed[b.vertices[0]] = true;
            fixed[b.vertices[1]] = true;
        }
    }
    Ok(fixed)
}

pub fn build_dof_map(mesh: &Mesh, kind: SpaceKind) -> Result<DofMap, FemError> {
    let ne = mesh.n_elements();
    let (n_base, local, signs) = match &kind {
        SpaceKind::P0Scalar | SpaceKind::P0Vector(_) => {
            (ne, (0..ne).map(Some).collect(), Vec::new())
        }
        SpaceKind::S1 => (
            mesh.n_vertices(),
            mesh.elements().iter().flat_map(|el| el.map(Some)).collect(),
            Vec::new(),
        ),
        SpaceKind::S1Zero(labels) | SpaceKind::S1ZeroVector(labels, _) => {
            let fixed = constrained_vertices(mesh, labels)?;
            let mut number = vec![None; mesh.n_vertices()];
            let mut n = 0;
            for (v, slot) in number.iter_mut().enumerate() {
                if !fixed[v] {
                    *slot = Some(n);
                    n += 1;
                }
            }
            let local = mesh
                .elements()
                .iter()
                .flat_map(|el| el.map(|v| number[v]))
                .collect();
            (n, local, Vec::new())
        }
        SpaceKind::Rt0 | SpaceKind::Rt0Rows(_) => {
            let edges = EdgeTable::new(mesh);
            let local = (0..ne)
                .flat_map(|e| edges.element_edges(e).map(Some))
                .collect();
            let signs = (0..ne)
                .map(|e| [edges.sign(e, 0), edges.sign(e, 1), edges.sign(e, 2)])
                .collect();
            (edges.n_edges(), local, signs)
        }
    };
    Ok(DofMap {
        kind,
        n_base,
        local,
        signs,
    })
}

/// Affine element geometry.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub vertices: [Point; 3],
    pub area: f64,
    /// Gradients of the barycentric coordinates.
    pub grads: [[f64; 2]; 3],
    /// Length of the edge opposite each vertex.
    pub edge_lengths: [f64; 3],
}

impl ElementGeometry {
    pub fn new(mesh: &Mesh, e: usize) -> Self {
        Self::from_vertices(mesh.element_vertices(e))
    }

    pub fn from_vertices(v: [Point; 3]) -> Self {
        let area = crate::mesh::signed_area(v[0], v[1], v[2]);
        let mut grads = [[0.0; 2]; 3];
        let mut edge_lengths = [0.0; 3];
        for i in 0..3 {
            let a = v[(i + 1) % 3];
            let b = v[(i + 2) % 3];
            // rotate the opposite edge by -90 degrees
            grads[i] = [(a[1] - b[1]) / (2.0 * area), (b[0] - a[0]) / (2.0 * area)];
            edge_lengths[i] = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
        ElementGeometry {
            vertices: v,
            area,
            grads,
            edge_lengths,
        }
    }

    pub fn point(&self, bary: [f64; 3]) -> Point {
        let v = &self.vertices;
        [
            bary[0] * v[0][0] + bary[1] * v[1][0] + bary[2] * v[2][0],
            bary[0] * v[0][1] + bary[1] * v[1][1] + bary[2] * v[2][1],
        ]
    }

    /// RT0 basis of the edge opposite vertex `i` at `x`, with its divergence.
    pub fn rt0(&self, i: usize, sign: f64, x: Point) -> ([f64; 2], f64) {
        let a = self.vertices[i];
        let s = sign * self.edge_lengths[i] / (2.0 * self.area);
        ([s * (x[0] - a[0]), s * (x[1] - a[1])], 2.0 * s)
    }
}

/// Basis values of one component at a point: value vector (length 1 or 2)
/// plus derivative data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisValue {
    Scalar { value: f64, grad: [f64; 2] },
    Vector { value: [f64; 2], div: f64 },
}

/// Evaluates the `local_size` basis functions of one copy of `map` on
/// element `e` at the barycentric points.
pub fn eval_basis(
    map: &DofMap,
    geom: &ElementGeometry,
    e: usize,
    points: &[[f64; 3]],
) -> Vec<Vec<BasisValue>> {
    let nloc = map.local_size();
    (0..nloc)
        .map(|i| {
            points
                .iter()
                .map(|&bary| match map.kind() {
                    SpaceKind::P0Scalar | SpaceKind::P0Vector(_) => BasisValue::Scalar {
                        value: 1.0,
                        grad: [0.0, 0.0],
                    },
                    SpaceKind::S1 | SpaceKind::S1Zero(_) | SpaceKind::S1ZeroVector(..) => {
                        BasisValue::Scalar {
                            value: bary[i],
                            grad: geom.grads[i],
                        }
                    }
                    SpaceKind::Rt0 | SpaceKind::Rt0Rows(_) => {
                        let (value, div) = geom.rt0(i, map.sign(e, i), geom.point(bary));
                        BasisValue::Vector { value, div }
                    }
                })
                .collect()
        })
        .collect()
}

/// Coefficient vector in a space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteField {
    pub space: SpaceKind,
    pub coefficients: Vec<f64>,
}

impl DiscreteField {
    pub fn new(map: &DofMap, coefficients: Vec<f64>) -> Result<Self, FemError> {
        if coefficients.len() != map.n_dofs() {
            return Err(FemError::LengthMismatch {
                expected: map.n_dofs(),
                got: coefficients.len(),
            });
        }
        Ok(DiscreteField {
            space: map.kind().clone(),
            coefficients,
        })
    }

    pub fn zeros(map: &DofMap) -> Self {
        DiscreteField {
            space: map.kind().clone(),
            coefficients: vec![0.0; map.n_dofs()],
        }
    }

    /// Value and (elementwise constant) derivative of copy `copy` on element
    /// `e`. Scalars return `(value, grad)`; RT0 returns the vector in
    /// `value`/`grad` slots as `([v0, v1], [div, 0])`.
    pub fn eval(
        &self,
        map: &DofMap,
        geom: &ElementGeometry,
        e: usize,
        copy: usize,
        bary: [f64; 3],
    ) -> ([f64; 2], [f64; 2]) {
        let mut out = ([0.0; 2], [0.0; 2]);
        let x = geom.point(bary);
        for i in 0..map.local_size() {
            let Some(g) = map.global(e, copy, i) else {
                continue;
            };
            let c = self.coefficients[g];
            match map.kind() {
                SpaceKind::P0Scalar | SpaceKind::P0Vector(_) => out.0[0] += c,
                SpaceKind::Rt0 | SpaceKind::Rt0Rows(_) => {
                    let (v, div) = geom.rt0(i, map.sign(e, i), x);
                    out.0[0] += c * v[0];
                    out.0[1] += c * v[1];
                    out.1[0] += c * div;
                }
                _ => {
                    out.0[0] += c * bary[i];
                    out.1[0] += c * geom.grads[i][0];
                    out.1[1] += c * geom.grads[i][1];
                }
            }
        }
        out
    }
}

/// Elementwise mean values of `f`.
pub fn project_p0(mesh: &Mesh, f: impl Fn(Point) -> f64, degree: usize) -> Result<Vec<f64>, FemError> {
    let rule = quadrature(degree)?;
    Ok((0..mesh.n_elements())
        .map(|e| {
            let geom = ElementGeometry::new(mesh, e);
            let sum: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(&b, &w)| w * f(geom.point(b)))
                .sum();
            2.0 * sum
        })
        .collect())
}

/// Nodal interpolation into (one copy of) an S1-type map; constrained
/// vertices are skipped.
pub fn interpolate_s1(mesh: &Mesh, map: &DofMap, f: impl Fn(Point) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; map.n_base()];
    for (e, el) in mesh.elements().iter().enumerate() {
        for (i, &v) in el.iter().enumerate() {
            if let Some(g) = map.global(e, 0, i) {
                out[g] = f(mesh.vertices()[v]);
            }
        }
    }
    out
}

/// RT0 interpolation: the coefficient of edge `e` is the mean normal flux
/// through `e`, normal pointing out of the edge's first incident element.
pub fn interpolate_rt0(mesh: &Mesh, f: impl Fn(Point) -> [f64; 2]) -> Vec<f64> {
    let edges = EdgeTable::new(mesh);
    let (gx, gw) = gauss_legendre(4);
    (0..edges.n_edges())
        .map(|idx| {
            let (e, _) = edges.incident(idx);
            let local = edges
                .element_edges(e)
                .iter()
                .position(|&k| k == idx)
                .expect("edge belongs to its incident element");
            let v = mesh.element_vertices(e);
            let a = v[(local + 1) % 3];
            let b = v[(local + 2) % 3];
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let n = [(b[1] - a[1]) / len, (a[0] - b[0]) / len];
            gx.iter()
                .zip(&gw)
                .map(|(t, w)| {
                    let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    let s = f(x);
                    w * (s[0] * n[0] + s[1] * n[1])
                })
                .sum()
        })
        .collect()
}

/// One boundary edge of a labeled part, seen from its owning element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSegment {
    pub element: usize,
    /// Local index (in the element) of the two endpoints.
    pub local_vertices: [usize; 2],
    pub vertices: [usize; 2],
    pub length: f64,
}

impl TraceSegment {
    /// Barycentric coordinates (in the owning element) of the segment point
    /// with parameter `s` in `[0, 1]`.
    pub fn bary(&self, s: f64) -> [f64; 3] {
        let mut b = [0.0; 3];
        b[self.local_vertices[0]] = 1.0 - s;
        b[self.local_vertices[1]] = s;
        b
    }
}

/// The 1D mesh induced on a labeled boundary part, with S1 trace dofs
/// (vertices on the line, numbered in order of first appearance) and one P0
/// dof per segment.
#[derive(Clone, Debug, Default)]
pub struct TraceMesh {
    pub segments: Vec<TraceSegment>,
    /// Mesh vertex index of each trace S1 dof.
    pub vertices: Vec<usize>,
}

impl TraceMesh {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }
}

pub fn trace_mesh(mesh: &Mesh, label: BoundaryLabel) -> TraceMesh {
    let edges = EdgeTable::new(mesh);
    let mut out = TraceMesh::default();
    let mut seen = std::collections::HashMap::new();
    let mut segments = Vec::new();
    for idx in 0..edges.n_edges() {
        if edges.label(idx) != Some(label) {
            continue;
        }
        let (e, _) = edges.incident(idx);
        let local_edge = edges
            .element_edges(e)
            .iter()
            .position(|&k| k == idx)
            .expect("edge belongs to its incident element");
        let el = mesh.elements()[e];
        let lv = [(local_edge + 1) % 3, (local_edge + 2) % 3];
        let v = [el[lv[0]], el[lv[1]]];
        let p = mesh.vertices()[v[0]];
        let q = mesh.vertices()[v[1]];
        segments.push(TraceSegment {
            element: e,
            local_vertices: lv,
            vertices: v,
            length: ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(),
        });
    }
    for s in &segments {
        for &v in &s.vertices {
            seen.entry(v).or_insert_with(|| {
                out.vertices.push(v);
                out.vertices.len() - 1
            });
        }
    }
    out.segments = segments;
    out
}

/// Trace of an S1 map on a labeled boundary part.
pub fn trace_dofs(mesh: &Mesh, map: &DofMap, label: BoundaryLabel) -> (TraceMesh, Vec<[Option<usize>; 2]>) {
    let trace = trace_mesh(mesh, label);
    let dofs = trace
        .segments
        .iter()
        .map(|s| {
            [
                map.global(s.element, 0, s.local_vertices[0]),
                map.global(s.element, 0, s.local_vertices[1]),
            ]
        })
        .collect();
    (trace, dofs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_lshape, build_rectangle_spacetime, build_unit_square, refine_nvb};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// ∫ over the reference triangle of x^i y^j = i! j! / (i + j + 2)!
    fn monomial_integral(i: u32, j: u32) -> f64 {
        let f = |n: u32| (1..=n).map(f64::from).product::<f64>();
        f(i) * f(j) / f(i + j + 2)
    }

    #[test]
    fn quadrature_weights_and_exactness() {
        for degree in 1..=6 {
            let rule = quadrature(degree).unwrap();
            let sum: f64 = rule.weights.iter().sum();
            assert!((sum - 0.5).abs() < 1e-14, "degree {degree}");
            for (p, _) in rule.points.iter().zip(&rule.weights) {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
            for i in 0..=degree as u32 {
                for j in 0..=(degree as u32 - i) {
                    let q: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(b, w)| w * b[1].powi(i as i32) * b[2].powi(j as i32))
                        .sum();
                    let exact = monomial_integral(i, j);
                    assert!((q - exact).abs() < 1e-14, "degree {degree} x^{i} y^{j}: {q} vs {exact}");
                }
            }
        }
        assert_eq!(quadrature(1).unwrap().len(), 1);
        assert_eq!(quadrature(2).unwrap().len(), 3);
        assert_eq!(quadrature(4).unwrap().len(), 6);
        assert_eq!(quadrature(6).unwrap().len(), 12);
        assert!(quadrature(0).is_err());
        assert!(quadrature(7).is_err());
    }

    #[test]
    fn x2y2_integral() {
        let rule = quadrature(4).unwrap();
        let q: f64 = rule
            .points
            .iter()
            .zip(&rule.weights)
            .map(|(b, w)| w * b[1].powi(2) * b[2].powi(2))
            .sum();
        assert!((q - 1.0 / 180.0).abs() < 1e-15);
    }

    #[test]
    fn gauss_legendre_exactness() {
        for n in 1..=4 {
            let (x, w) = gauss_legendre(n);
            for k in 0..2 * n as i32 {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
                assert!((q - 1.0 / (k + 1) as f64).abs() < 1e-14);
            }
        }
    }

    fn dirichlet() -> SpaceKind {
        SpaceKind::s1_zero(&[BoundaryLabel::Dirichlet])
    }

    #[test]
    fn dof_counts() {
        let m = build_unit_square(1);
        assert_eq!(build_dof_map(&m, SpaceKind::P0Scalar).unwrap().n_dofs(), 2);
        assert_eq!(build_dof_map(&m, dirichlet()).unwrap().n_dofs(), 0);
        assert_eq!(build_dof_map(&m, SpaceKind::Rt0).unwrap().n_dofs(), 5);
        assert_eq!(build_dof_map(&m, SpaceKind::Rt0Rows(2)).unwrap().n_dofs(), 10);
        let m = build_unit_square(4);
        assert_eq!(build_dof_map(&m, dirichlet()).unwrap().n_dofs(), 9);
        assert_eq!(build_dof_map(&m, SpaceKind::S1).unwrap().n_dofs(), 25);
        let st = build_rectangle_spacetime(1.0, 2);
        let map = build_dof_map(&st, SpaceKind::s1_zero(&[BoundaryLabel::SpatialBoundary])).unwrap();
        assert_eq!(map.n_dofs(), 3);
        assert!(matches!(
            build_dof_map(&m, SpaceKind::s1_zero(&[BoundaryLabel::FinalTime])),
            Err(FemError::MissingLabel(_))
        ));
    }

    #[test]
    fn every_dof_is_referenced() {
        let m = build_lshape(2);
        for kind in [SpaceKind::P0Scalar, SpaceKind::S1, dirichlet(), SpaceKind::Rt0, SpaceKind::Rt0Rows(2)] {
            let map = build_dof_map(&m, kind).unwrap();
            let mut hit = vec![false; map.n_dofs()];
            for e in 0..m.n_elements() {
                for c in 0..map.copies() {
                    for i in 0..map.local_size() {
                        if let Some(g) = map.global(e, c, i) {
                            hit[g] = true;
                        }
                    }
                }
            }
            assert!(hit.iter().all(|&h| h));
        }
    }

    #[test]
    fn s1_partition_of_unity_and_gradients() {
        let m = build_lshape(1);
        let map = build_dof_map(&m, SpaceKind::S1).unwrap();
        let rule = quadrature(4).unwrap();
        for e in 0..m.n_elements() {
            let geom = ElementGeometry::new(&m, e);
            let vals = eval_basis(&map, &geom, e, &rule.points);
            for q in 0..rule.len() {
                let mut s = 0.0;
                let mut g = [0.0; 2];
                for v in &vals {
                    if let BasisValue::Scalar { value, grad } = v[q] {
                        s += value;
                        g[0] += grad[0];
                        g[1] += grad[1];
                    }
                }
                assert!((s - 1.0).abs() < 1e-14);
                assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
            }
            // lambda_i(v_j) = delta_ij through the gradients
            for i in 0..3 {
                for j in 0..3 {
                    let d = [
                        geom.vertices[j][0] - geom.vertices[(i + 1) % 3][0],
                        geom.vertices[j][1] - geom.vertices[(i + 1) % 3][1],
                    ];
                    let val = geom.grads[i][0] * d[0] + geom.grads[i][1] * d[1];
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((val - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rt0_flux_and_divergence() {
        let m = build_lshape(1);
        let map = build_dof_map(&m, SpaceKind::Rt0).unwrap();
        let rule = quadrature(2).unwrap();
        let (gx, gw) = gauss_legendre(2);
        for e in 0..m.n_elements() {
            let geom = ElementGeometry::new(&m, e);
            for i in 0..3 {
                let s = map.sign(e, i);
                // divergence integrated over T by quadrature
                let int_div: f64 = rule
                    .points
                    .iter()
                    .zip(&rule.weights)
                    .map(|(&b, w)| 2.0 * geom.area * w * geom.rt0(i, s, geom.point(b)).1)
                    .sum();
                let a = geom.vertices[(i + 1) % 3];
                let b = geom.vertices[(i + 2) % 3];
                let len = geom.edge_lengths[i];
                // outward normal of edge (a, b) for positive orientation
                let n = [(b[1] - a[1]) / len, (a[0] - b[0]) / len];
                let mut flux = 0.0;
                for (t, w) in gx.iter().zip(&gw) {
                    let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                    let v = geom.rt0(i, s, x).0;
                    let vn = v[0] * n[0] + v[1] * n[1];
                    assert!((vn - s).abs() < 1e-12, "normal component is the sign");
                    flux += w * len * vn;
                }
                assert!((int_div - flux).abs() < 1e-12);
                assert!((flux - s * len).abs() < 1e-12);
                // zero normal component on the other two edges
                for k in 1..3 {
                    let a = geom.vertices[(i + k) % 3];
                    let c = geom.vertices[i];
                    let len = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)).sqrt();
                    let n = [(c[1] - a[1]) / len, (a[0] - c[0]) / len];
                    let mid = [0.5 * (a[0] + c[0]), 0.5 * (a[1] + c[1])];
                    let v = geom.rt0(i, s, mid).0;
                    assert!((v[0] * n[0] + v[1] * n[1]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rt0_normal_continuity_of_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = build_unit_square(2);
        m = refine_nvb(&m, &[0, 3]).unwrap();
        let edges = EdgeTable::new(&m);
        let map = build_dof_map(&m, SpaceKind::Rt0).unwrap();
        let field = DiscreteField::new(&map, (0..map.n_dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for idx in 0..edges.n_edges() {
            let (e1, Some(e2)) = edges.incident(idx) else { continue };
            let [a, b] = edges.edge(idx);
            let pa = m.vertices()[a];
            let pb = m.vertices()[b];
            let n = [pb[1] - pa[1], pa[0] - pb[0]];
            let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            let trace = |e: usize| {
                let geom = ElementGeometry::new(&m, e);
                let bary = barycentric(&geom, mid);
                let (v, _) = field.eval(&map, &geom, e, 0, bary);
                v[0] * n[0] + v[1] * n[1]
            };
            assert!((trace(e1) - trace(e2)).abs() < 1e-12);
        }
    }

    fn barycentric(geom: &ElementGeometry, x: Point) -> [f64; 3] {
        let mut b = [0.0; 3];
        for i in 0..3 {
            let v = geom.vertices[(i + 1) % 3];
            b[i] = geom.grads[i][0] * (x[0] - v[0]) + geom.grads[i][1] * (x[1] - v[1]);
        }
        b
    }

    #[test]
    fn s1_interpolation_of_affine_function_is_exact() {
        let m = build_lshape(2);
        let map = build_dof_map(&m, SpaceKind::S1).unwrap();
        let f = |p: Point| 0.3 - 1.7 * p[0] + 2.2 * p[1];
        let field = DiscreteField::new(&map, m.vertices().iter().map(|&p| f(p)).collect()).unwrap();
        let rule = quadrature(6).unwrap();
        for e in 0..m.n_elements() {
            let geom = ElementGeometry::new(&m, e);
            for &b in &rule.points {
                let (v, g) = field.eval(&map, &geom, e, 0, b);
                assert!((v[0] - f(geom.point(b))).abs() < 1e-13);
                assert!((g[0] + 1.7).abs() < 1e-12 && (g[1] - 2.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p0_projection() {
        let m = build_unit_square(1);
        let c = project_p0(&m, |_| 2.5, 4).unwrap();
        assert!(c.iter().all(|&v| (v - 2.5).abs() < 1e-14));
        let c = project_p0(&m, |p| p[0], 4).unwrap();
        for e in 0..2 {
            let area = m.area(e);
            assert!((c[e] * area / area - m.centroid(e)[0]).abs() < 1e-14);
        }
        let m = build_lshape(2);
        let f = |p: Point| (3.0 * p[0]).sin() * p[1].exp();
        let c = project_p0(&m, f, 6).unwrap();
        let rule = quadrature(6).unwrap();
        for e in 0..m.n_elements() {
            let geom = ElementGeometry::new(&m, e);
            let defect: f64 = rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(&b, w)| 2.0 * geom.area * w * (f(geom.point(b)) - c[e]))
                .sum();
            assert!(defect.abs() < 1e-14);
        }
        let again = project_p0(&m, |p| {
            let e = (0..m.n_elements())
                .find(|&e| {
                    let b = barycentric(&ElementGeometry::new(&m, e), p);
                    b.iter().all(|&x| x > 1e-9)
                })
                .unwrap();
            c[e]
        }, 4)
        .unwrap();
        for (a, b) in again.iter().zip(&c) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn rt0_interpolation_reproduces_rt0_fields() {
        // f(x) = (α, β) + γ x lies in RT0
        let f = |p: Point| [0.4 + 1.3 * p[0], -0.7 + 1.3 * p[1]];
        let m = build_lshape(2);
        let map = build_dof_map(&m, SpaceKind::Rt0).unwrap();
        let field = DiscreteField::new(&map, interpolate_rt0(&m, f)).unwrap();
        let rule = quadrature(4).unwrap();
        for e in 0..m.n_elements() {
            let geom = ElementGeometry::new(&m, e);
            for &b in &rule.points {
                let (v, d) = field.eval(&map, &geom, e, 0, b);
                let exact = f(geom.point(b));
                assert!((v[0] - exact[0]).abs() < 1e-12 && (v[1] - exact[1]).abs() < 1e-12);
                assert!((d[0] - 2.6).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn trace_meshes() {
        let t_end = 0.75;
        let m = build_rectangle_spacetime(t_end, 2);
        let map = build_dof_map(&m, SpaceKind::S1).unwrap();
        let (trace, dofs) = trace_dofs(&m, &map, BoundaryLabel::FinalTime);
        assert!((trace.total_length() - 1.0).abs() < 1e-14);
        assert_eq!(trace.vertices.len(), 3);
        let field = DiscreteField::new(&map, m.vertices().iter().map(|p| p[0]).collect()).unwrap();
        for (s, d) in trace.segments.iter().zip(&dofs) {
            assert!(d.iter().all(|g| g.is_some()));
            let geom = ElementGeometry::new(&m, s.element);
            for t in [0.0, 0.3, 1.0] {
                let (v, _) = field.eval(&map, &geom, s.element, 0, s.bary(t));
                assert!((v[0] - t_end).abs() < 1e-15);
            }
        }
        let sq = build_unit_square(2);
        assert_eq!(trace_mesh(&sq, BoundaryLabel::InitialTime).n_segments(), 0);
    }
}
