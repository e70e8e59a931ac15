//! Conforming triangulations of polygonal 2D domains and newest-vertex
//! bisection.
//!
//! Every element is stored as a positively oriented vertex triple
//! `(v0, v1, v2)` whose refinement edge is `{v0, v1}`. Space-time meshes use
//! the coordinate order `(t, x)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::error::MeshError;

pub type Point = [f64; 2];

const AREA_TOL: f64 = 1e-14;

/// Label attached to a boundary edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryLabel {
    Dirichlet,
    SpatialBoundary,
    InitialTime,
    FinalTime,
}

impl BoundaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryLabel::Dirichlet => "dirichlet",
            BoundaryLabel::SpatialBoundary => "spatial-boundary",
            BoundaryLabel::InitialTime => "initial-time",
            BoundaryLabel::FinalTime => "final-time",
        }
    }
}

impl fmt::Display for BoundaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundaryLabel {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dirichlet" => Ok(BoundaryLabel::Dirichlet),
            "spatial-boundary" => Ok(BoundaryLabel::SpatialBoundary),
            "initial-time" => Ok(BoundaryLabel::InitialTime),
            "final-time" => Ok(BoundaryLabel::FinalTime),
            other => Err(MeshError::UnknownLabel(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub label: BoundaryLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    vertices: Vec<Point>,
    elements: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    generation: Vec<u32>,
}

#[inline]
fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Mesh {
    /// Builds a mesh from raw data. Rejects elements with non-positive area and
    /// out-of-range vertex indices.
    pub fn new(
        vertices: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let generation = vec![0; elements.len()];
        Self::with_generation(vertices, elements, boundary, generation)
    }

    fn with_generation(
        vertices: Vec<Point>,
        elements: Vec<[usize; 3]>,
        boundary: Vec<BoundaryEdge>,
        generation: Vec<u32>,
    ) -> Result<Self, MeshError> {
        let nv = vertices.len();
        for (k, el) in elements.iter().enumerate() {
            if el.iter().any(|&v| v >= nv) {
                return Err(MeshError::VertexOutOfRange { element: k });
            }
            let area = signed_area(vertices[el[0]], vertices[el[1]], vertices[el[2]]);
            if area <= AREA_TOL {
                return Err(MeshError::NonPositiveArea { element: k, area });
            }
        }
        if boundary.iter().any(|b| b.vertices.iter().any(|&v| v >= nv)) {
            return Err(MeshError::VertexOutOfRange { element: usize::MAX });
        }
        Ok(Mesh {
            vertices,
            elements,
            boundary,
            generation,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn boundary(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn generation(&self) -> &[u32] {
        &self.generation
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn element_vertices(&self, e: usize) -> [Point; 3] {
        let [a, b, c] = self.elements[e];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn area(&self, e: usize) -> f64 {
        let [a, b, c] = self.element_vertices(e);
        signed_area(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.area(e)).sum()
    }

    /// Longest edge of element `e`.
    pub fn diameter(&self, e: usize) -> f64 {
        let [a, b, c] = self.element_vertices(e);
        dist(a, b).max(dist(b, c)).max(dist(c, a))
    }

    pub fn centroid(&self, e: usize) -> Point {
        let [a, b, c] = self.element_vertices(e);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Smallest interior angle over all elements, in radians.
    pub fn min_angle(&self) -> f64 {
        let mut min = f64::INFINITY;
        for e in 0..self.n_elements() {
            let p = self.element_vertices(e);
            for i in 0..3 {
                let a = p[i];
                let b = p[(i + 1) % 3];
                let c = p[(i + 2) % 3];
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / (dist(a, b) * dist(a, c));
                min = min.min(cos.clamp(-1.0, 1.0).acos());
            }
        }
        min
    }

    pub fn labels(&self) -> Vec<BoundaryLabel> {
        let mut labels: Vec<_> = self.boundary.iter().map(|b| b.label).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Checks conformity: every edge is shared by at most two elements, and
    /// the edges with a single incident element are exactly the tagged
    /// boundary edges (so no hanging nodes exist).
    pub fn is_conforming(&self) -> bool {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for el in &self.elements {
            for i in 0..3 {
                *count.entry(edge_key(el[i], el[(i + 1) % 3])).or_default() += 1;
            }
        }
        if count.values().any(|&c| c > 2) {
            return false;
        }
        let mut boundary: Vec<_> = self
            .boundary
            .iter()
            .map(|b| edge_key(b.vertices[0], b.vertices[1]))
            .collect();
        boundary.sort_unstable();
        let len = boundary.len();
        boundary.dedup();
        if boundary.len() != len {
            return false;
        }
        let mut single: Vec<_> = count
            .iter()
            .filter(|(_, &c)| c == 1)
            .map(|(&k, _)| k)
            .collect();
        single.sort_unstable();
        single == boundary
    }

    /// Writes the plain-text debug dump (`vertices <n>`, coordinates,
    /// `elements <n>`, 0-based triples).
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "vertices {}", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{} {}", v[0], v[1])?;
        }
        writeln!(w, "elements {}", self.elements.len())?;
        for el in &self.elements {
            writeln!(w, "{} {} {}", el[0], el[1], el[2])?;
        }
        Ok(())
    }

    /// Fraction of elements whose centroid lies within `radius` of `center`.
    pub fn fraction_near(&self, center: Point, radius: f64) -> f64 {
        if self.elements.is_empty() {
            return 0.0;
        }
        let near = (0..self.n_elements())
            .filter(|&e| dist(self.centroid(e), center) < radius)
            .count();
        near as f64 / self.n_elements() as f64
    }
}

/// Unique edges, their incident elements and boundary labels.
#[derive(Clone, Debug)]
pub struct EdgeTable {
    edges: Vec<[usize; 2]>,
    /// Local edge `i` of an element is the edge opposite local vertex `i`.
    element_edges: Vec<[usize; 3]>,
    edge_elements: Vec<(usize, Option<usize>)>,
    labels: Vec<Option<BoundaryLabel>>,
}

impl EdgeTable {
    pub fn new(mesh: &Mesh) -> Self {
        let mut index: HashMap<(usize, usize), usize> =
            HashMap::with_capacity(mesh.n_elements() * 2);
        let mut edges = Vec::new();
        let mut element_edges = Vec::with_capacity(mesh.n_elements());
        let mut edge_elements: Vec<(usize, Option<usize>)> = Vec::new();
        for (e, el) in mesh.elements.iter().enumerate() {
            let mut local = [0usize; 3];
            for (i, slot) in local.iter_mut().enumerate() {
                let key = edge_key(el[(i + 1) % 3], el[(i + 2) % 3]);
                let idx = *index.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_elements.push((e, None));
                    edges.len() - 1
                });
                if edge_elements[idx].0 != e {
                    edge_elements[idx].1 = Some(e);
                }
                *slot = idx;
            }
            element_edges.push(local);
        }
        let mut labels = vec![None; edges.len()];
        for b in &mesh.boundary {
            if let Some(&idx) = index.get(&edge_key(b.vertices[0], b.vertices[1])) {
                labels[idx] = Some(b.label);
            }
        }
        EdgeTable {
            edges,
            element_edges,
            edge_elements,
            labels,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, idx: usize) -> [usize; 2] {
        self.edges[idx]
    }

    pub fn element_edges(&self, e: usize) -> [usize; 3] {
        self.element_edges[e]
    }

    pub fn incident(&self, idx: usize) -> (usize, Option<usize>) {
        self.edge_elements[idx]
    }

    pub fn label(&self, idx: usize) -> Option<BoundaryLabel> {
        self.labels[idx]
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.edge_elements[idx].1.is_none()
    }

    /// Orientation sign of local edge `i` of element `e`: `+1` for the edge's
    /// first incident element, `-1` otherwise.
    pub fn sign(&self, e: usize, i: usize) -> f64 {
        if self.edge_elements[self.element_edges[e][i]].0 == e {
            1.0
        } else {
            -1.0
        }
    }

    pub fn n_boundary(&self) -> usize {
        self.edge_elements.iter().filter(|(_, o)| o.is_none()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshStats {
    pub h_max: f64,
    pub n_elements: usize,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub n_boundary_edges: usize,
}

pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    let edges = EdgeTable::new(mesh);
    let h_max = (0..mesh.n_elements())
        .map(|e| mesh.diameter(e))
        .fold(0.0, f64::max);
    MeshStats {
        h_max,
        n_elements: mesh.n_elements(),
        n_vertices: mesh.n_vertices(),
        n_edges: edges.n_edges(),
        n_boundary_edges: edges.n_boundary(),
    }
}

/// Builds a triangulation from axis-aligned cells on an integer lattice.
/// Every cell `(i, j)` is split along the diagonal from `(i, j)` to
/// `(i + 1, j + 1)`, which becomes the refinement edge of both halves.
fn from_cells(
    cells: &[(i64, i64)],
    coord: impl Fn(i64, i64) -> Point,
    label: impl Fn(Point) -> BoundaryLabel,
) -> Mesh {
    let mut index: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut vertices = Vec::new();
    let mut vid = |i: i64, j: i64, vertices: &mut Vec<Point>| -> usize {
        *index.entry((i, j)).or_insert_with(|| {
            vertices.push(coord(i, j));
            vertices.len() - 1
        })
    };
    let mut elements = Vec::with_capacity(2 * cells.len());
    for &(i, j) in cells {
        let a = vid(i, j, &mut vertices);
        let b = vid(i + 1, j, &mut vertices);
        let c = vid(i + 1, j + 1, &mut vertices);
        let d = vid(i, j + 1, &mut vertices);
        elements.push([c, a, b]);
        elements.push([a, c, d]);
    }
    let mut mesh = Mesh {
        vertices,
        elements,
        boundary: Vec::new(),
        generation: vec![0; 2 * cells.len()],
    };
    let edges = EdgeTable::new(&mesh);
    let mut boundary = Vec::new();
    for idx in 0..edges.n_edges() {
        if edges.is_boundary(idx) {
            let [a, b] = edges.edge(idx);
            let pa = mesh.vertices[a];
            let pb = mesh.vertices[b];
            let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            boundary.push(BoundaryEdge {
                vertices: [a, b],
                label: label(mid),
            });
        }
    }
    mesh.boundary = boundary;
    mesh
}

/// Uniform triangulation of `(0,1)^2` with `n x n` cells.
pub fn build_unit_square(n: usize) -> Mesh {
    assert!(n >= 1, "n must be positive");
    let n = n as i64;
    let cells: Vec<_> = (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect();
    let h = 1.0 / n as f64;
    from_cells(
        &cells,
        |i, j| [i as f64 * h, j as f64 * h],
        |_| BoundaryLabel::Dirichlet,
    )
}

/// L-shaped domain `(-1,1)^2 \ [-1,0]^2` made of three unit squares, each
/// with `n x n` cells.
pub fn build_lshape(n: usize) -> Mesh {
    assert!(n >= 1, "n must be positive");
    let n = n as i64;
    let cells: Vec<_> = (0..2 * n)
        .flat_map(|j| (0..2 * n).map(move |i| (i, j)))
        .filter(|&(i, j)| i >= n || j >= n)
        .collect();
    let h = 1.0 / n as f64;
    from_cells(
        &cells,
        |i, j| [(i - n) as f64 * h, (j - n) as f64 * h],
        |_| BoundaryLabel::Dirichlet,
    )
}

/// Space-time rectangle `(0, t_end) x (0, 1)` in `(t, x)` coordinates with
/// `n x n` cells.
pub fn build_rectangle_spacetime(t_end: f64, n: usize) -> Mesh {
    assert!(n >= 1, "n must be positive");
    assert!(t_end > 0.0, "t_end must be positive");
    let n = n as i64;
    let cells: Vec<_> = (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect();
    let ht = t_end / n as f64;
    let hx = 1.0 / n as f64;
    let tol = 1e-12 * t_end.max(1.0);
    from_cells(
        &cells,
        |i, j| {
            let t = if i == n { t_end } else { i as f64 * ht };
            [t, j as f64 * hx]
        },
        |mid| {
            if mid[0].abs() < tol {
                BoundaryLabel::InitialTime
            } else if (mid[0] - t_end).abs() < tol {
                BoundaryLabel::FinalTime
            } else {
                BoundaryLabel::SpatialBoundary
            }
        },
    )
}

/// Newest-vertex bisection. All edges of marked elements are marked; the
/// closure then marks refinement edges until every element with a marked
/// edge also has its refinement edge marked. Marked elements are thus
/// bisected three times, other elements between zero and three times.
pub fn refine_nvb(mesh: &Mesh, marked: &[usize]) -> Result<Mesh, MeshError> {
    if let Some(&bad) = marked.iter().find(|&&e| e >= mesh.n_elements()) {
        return Err(MeshError::ElementOutOfRange(bad));
    }
    if marked.is_empty() {
        return Ok(mesh.clone());
    }
    let edges = EdgeTable::new(mesh);
    let mut marked_edges = vec![false; edges.n_edges()];
    for &e in marked {
        for idx in edges.element_edges(e) {
            marked_edges[idx] = true;
        }
    }
    close_marking(mesh, &edges, &mut marked_edges)?;
    Ok(bisect_marked(mesh, &edges, &marked_edges))
}

/// Bisects exactly the given edges (plus closure). A single round with only
/// refinement edges marked halves each affected element once.
pub fn refine_edges(mesh: &Mesh, marked: &[usize]) -> Result<Mesh, MeshError> {
    let edges = EdgeTable::new(mesh);
    let mut marked_edges = vec![false; edges.n_edges()];
    for &idx in marked {
        if idx >= edges.n_edges() {
            return Err(MeshError::EdgeOutOfRange(idx));
        }
        marked_edges[idx] = true;
    }
    close_marking(mesh, &edges, &mut marked_edges)?;
    Ok(bisect_marked(mesh, &edges, &marked_edges))
}

fn close_marking(mesh: &Mesh, edges: &EdgeTable, marked: &mut [bool]) -> Result<(), MeshError> {
    let mut stack: Vec<usize> = (0..mesh.n_elements())
        .filter(|&e| edges.element_edges(e).iter().any(|&i| marked[i]))
        .collect();
    // each pass over the stack marks at most one new edge per pop
    let budget = edges.n_edges() + mesh.n_elements() * 4 + 1;
    let mut steps = 0usize;
    while let Some(e) = stack.pop() {
        steps += 1;
        if steps > budget {
            return Err(MeshError::ClosureDiverged);
        }
        let local = edges.element_edges(e);
        // local edge 2 is {v0, v1}
        let refinement = local[2];
        if !marked[refinement] && local.iter().any(|&i| marked[i]) {
            marked[refinement] = true;
            let (a, b) = edges.incident(refinement);
            let other = if a == e { b } else { Some(a) };
            if let Some(o) = other {
                stack.push(o);
            }
        }
    }
    Ok(())
}

fn bisect_marked(mesh: &Mesh, edges: &EdgeTable, marked: &[bool]) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    for idx in 0..edges.n_edges() {
        if marked[idx] {
            let [a, b] = edges.edge(idx);
            let pa = vertices[a];
            let pb = vertices[b];
            vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            midpoint.insert((a, b), vertices.len() - 1);
        }
    }

    let mut elements = Vec::with_capacity(mesh.n_elements() * 2);
    let mut generation = Vec::with_capacity(mesh.n_elements() * 2);
    let mut stack = Vec::with_capacity(8);
    for (e, &el) in mesh.elements.iter().enumerate() {
        stack.push((el, mesh.generation[e]));
        while let Some((t, g)) = stack.pop() {
            match midpoint.get(&edge_key(t[0], t[1])) {
                Some(&m) => {
                    stack.push(([t[1], t[2], m], g + 1));
                    stack.push(([t[2], t[0], m], g + 1));
                }
                None => {
                    elements.push(t);
                    generation.push(g);
                }
            }
        }
    }

    let mut boundary = Vec::with_capacity(mesh.boundary.len() * 2);
    for b in &mesh.boundary {
        let [a, c] = b.vertices;
        match midpoint.get(&edge_key(a, c)) {
            Some(&m) => {
                boundary.push(BoundaryEdge {
                    vertices: [a, m],
                    label: b.label,
                });
                boundary.push(BoundaryEdge {
                    vertices: [m, c],
                    label: b.label,
                });
            }
            None => boundary.push(*b),
        }
    }

    Mesh {
        vertices,
        elements,
        boundary,
        generation,
    }
}
