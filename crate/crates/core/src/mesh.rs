//! Structured P1 triangulation of the reference rectangle `(0, Lx) x (0, Ly)`.
//!
//! Vertex `(i, j)` (column `i` along x, row `j` along y) has index
//! `i * (ny + 1) + j`. Numbering along the short edge keeps the profile of the
//! assembled operators narrow, which the skyline Cholesky relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Barycentric coordinates of the three mid-edge quadrature points.
pub const MID_EDGE_BARY: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

/// Two-point Gauss-Legendre rule on `[0, 1]`.
pub const EDGE_GAUSS: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Bottom,
    Top,
    Left,
    Right,
}

impl std::str::FromStr for BoundaryTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(BoundaryTag::Bottom),
            "top" => Ok(BoundaryTag::Top),
            "left" => Ok(BoundaryTag::Left),
            "right" => Ok(BoundaryTag::Right),
            other => Err(Error::invalid(format!("unknown boundary tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    /// Endpoints, ordered by increasing coordinate along the edge.
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
    /// The unique triangle owning this edge.
    pub triangle: usize,
}

/// Per-triangle geometric data that P1 assembly needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Element {
    pub vertices: [usize; 3],
    pub area: f64,
    /// Constant reference gradients of the three barycentric basis functions.
    pub grads: [[f64; 2]; 3],
    /// Mid-edge quadrature points in reference coordinates.
    pub quad_points: [Point; 3],
}

impl Element {
    /// Quadrature weight of each mid-edge point.
    pub fn quad_weight(&self) -> f64 {
        self.area / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    spec: MeshSpec,
    vertices: Vec<Point>,
    elements: Vec<Element>,
    boundary_edges: Vec<BoundaryEdge>,
}

/// Builds the right-diagonal split triangulation of `(0, lx) x (0, ly)`.
pub fn build_rect_mesh(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::invalid(format!("mesh resolution must be positive, got {nx}x{ny}")));
    }
    if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
        return Err(Error::invalid(format!("mesh extents must be positive, got {lx}x{ly}")));
    }
    let idx = |i: usize, j: usize| i * (ny + 1) + j;
    let hx = lx / nx as f64;
    let hy = ly / ny as f64;

    let mut vertices = vec![[0.0; 2]; (nx + 1) * (ny + 1)];
    for i in 0..=nx {
        for j in 0..=ny {
            // Pin the far edges to the exact extents.
            let x = if i == nx { lx } else { i as f64 * hx };
            let y = if j == ny { ly } else { j as f64 * hy };
            vertices[idx(i, j)] = [x, y];
        }
    }

    let mut elements = Vec::with_capacity(2 * nx * ny);
    let mut boundary_edges = Vec::with_capacity(2 * (nx + ny));
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            let lower = elements.len();
            elements.push(make_element([v00, v10, v11], &vertices));
            let upper = elements.len();
            elements.push(make_element([v00, v11, v01], &vertices));
            if j == 0 {
                boundary_edges.push(BoundaryEdge { vertices: [v00, v10], tag: BoundaryTag::Bottom, triangle: lower });
            }
            if j + 1 == ny {
                boundary_edges.push(BoundaryEdge { vertices: [v01, v11], tag: BoundaryTag::Top, triangle: upper });
            }
            if i == 0 {
                boundary_edges.push(BoundaryEdge { vertices: [v00, v01], tag: BoundaryTag::Left, triangle: upper });
            }
            if i + 1 == nx {
                boundary_edges.push(BoundaryEdge { vertices: [v10, v11], tag: BoundaryTag::Right, triangle: lower });
            }
        }
    }

    Ok(Mesh { spec: MeshSpec { nx, ny, lx, ly }, vertices, elements, boundary_edges })
}

fn make_element(vertices: [usize; 3], coords: &[Point]) -> Element {
    let [a, b, c] = vertices.map(|v| coords[v]);
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let area = 0.5 * det;
    // grad lambda_k = rot90(opposite edge) / (2 area)
    let grads = [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ];
    let quad_points = MID_EDGE_BARY.map(|w| {
        [w[0] * a[0] + w[1] * b[0] + w[2] * c[0], w[0] * a[1] + w[1] * b[1] + w[2] * c[1]]
    });
    Element { vertices, area, grads, quad_points }
}

impl Mesh {
    pub fn spec(&self) -> MeshSpec {
        self.spec
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.elements.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn triangles(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.elements.iter().map(|e| e.vertices)
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn edges_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryEdge> + '_ {
        self.boundary_edges.iter().filter(move |e| e.tag == tag)
    }

    pub fn area(&self) -> f64 {
        self.spec.lx * self.spec.ly
    }

    /// Sorted, duplicate-free vertex indices on the tagged segment.
    pub fn boundary_dofs(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut dofs: Vec<usize> = self.edges_with_tag(tag).flat_map(|e| e.vertices).collect();
        dofs.sort_unstable();
        dofs.dedup();
        dofs
    }

    /// Every quadrature point of the mesh with its weight.
    pub fn quadrature(&self) -> impl Iterator<Item = (Point, f64)> + '_ {
        self.elements
            .iter()
            .flat_map(|e| e.quad_points.iter().map(move |&p| (p, e.quad_weight())))
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        self.vertices.iter().map(|&p| f(p)).collect()
    }
}

/// Boundary-tag lookup by name, for config files and CLI arguments.
pub fn boundary_dofs(mesh: &Mesh, tag: &str) -> Result<Vec<usize>> {
    Ok(mesh.boundary_dofs(tag.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_mesh() {
        let mesh = build_rect_mesh(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(mesh.num_vertices(), 4);
        assert_eq!(mesh.num_triangles(), 2);
        assert_eq!(mesh.boundary_edges().len(), 4);
    }

    #[test]
    fn desk_mesh_counts() {
        let mesh = build_rect_mesh(32, 8, 4.0, 1.0).unwrap();
        assert_eq!(mesh.num_vertices(), 297);
        assert_eq!(mesh.num_triangles(), 512);
        assert_eq!(mesh.boundary_dofs(BoundaryTag::Bottom).len(), 33);
    }

    #[test]
    fn areas_positive_and_sum_to_rectangle() {
        for (nx, ny, lx, ly) in [(2, 1, 4.0, 1.0), (7, 3, 4.0, 1.0), (5, 9, 0.3, 2.5)] {
            let mesh = build_rect_mesh(nx, ny, lx, ly).unwrap();
            assert!(mesh.elements().iter().all(|e| e.area > 0.0));
            let total: f64 = mesh.elements().iter().map(|e| e.area).sum();
            assert!((total - lx * ly).abs() <= 1e-12 * lx * ly);
        }
    }

    #[test]
    fn every_boundary_edge_has_one_owner() {
        let mesh = build_rect_mesh(4, 3, 4.0, 1.0).unwrap();
        for edge in mesh.boundary_edges() {
            let owners = mesh
                .triangles()
                .filter(|t| edge.vertices.iter().all(|v| t.contains(v)))
                .count();
            assert_eq!(owners, 1);
            assert!(mesh.elements()[edge.triangle].vertices.contains(&edge.vertices[0]));
            assert!(mesh.elements()[edge.triangle].vertices.contains(&edge.vertices[1]));
        }
    }

    #[test]
    fn boundary_tags() {
        let mesh = build_rect_mesh(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(boundary_dofs(&mesh, "top").unwrap().len(), 2);
        assert!(boundary_dofs(&mesh, "front").is_err());
        let mesh = build_rect_mesh(6, 2, 4.0, 1.0).unwrap();
        let bottom = mesh.boundary_dofs(BoundaryTag::Bottom);
        let top = mesh.boundary_dofs(BoundaryTag::Top);
        assert!(bottom.iter().all(|v| !top.contains(v)));
        assert!(bottom.windows(2).all(|w| w[0] < w[1]));
        assert!(bottom.iter().all(|&v| mesh.vertices()[v][1] == 0.0));
    }

    #[test]
    fn rejects_empty_resolution() {
        assert!(matches!(build_rect_mesh(0, 2, 1.0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(build_rect_mesh(2, 2, -1.0, 1.0).is_err());
    }
}
