//! Camera projection, triangle meshes, barycentric coordinates and
//! metric-tensor algebra shared by the rest of the crate.
//!
//! Conventions: right-handed camera frame with z pointing forward
//! (positive depth), pixel origin at the top-left corner. All vertex
//! coordinates are in the template's length units (meters for the
//! built-in generators), parametrization coordinates live in the closed
//! unit square.

use nalgebra::{Matrix2, Matrix3x2, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest depth accepted by [`project`]; points at or behind this plane
/// cannot be projected.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("non-positive depth z = {z} (point at or behind the camera)")]
    NonPositiveDepth { z: f64 },
    #[error("facet index {facet} out of range (mesh has {n_faces} faces)")]
    BadFacet { facet: usize, n_faces: usize },
    #[error("barycentric weights sum to {sum}, expected 1")]
    BadWeights { sum: f64 },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
}

/// Pinhole intrinsics. The assembled matrix K is upper-triangular with
/// K[2][2] = 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy, skew: 0.0 }
    }

    /// The 3x3 intrinsic matrix.
    pub fn matrix(&self) -> nalgebra::Matrix3<f64> {
        nalgebra::Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
/// The depth along the line of sight is discarded.
pub fn project(k: &CameraIntrinsics, s: &Point3<f64>) -> Result<Point2<f64>, GeomError> {
    let z = s.z;
    if z <= MIN_DEPTH {
        return Err(GeomError::NonPositiveDepth { z });
    }
    let u = (k.fx * s.x + k.skew * s.y) / z + k.cx;
    let v = k.fy * s.y / z + k.cy;
    Ok(Point2::new(u, v))
}

/// Jacobian of [`project`] with respect to the 3D point, a 2x3 matrix.
pub fn project_jacobian(
    k: &CameraIntrinsics,
    s: &Point3<f64>,
) -> Result<nalgebra::Matrix2x3<f64>, GeomError> {
    let z = s.z;
    if z <= MIN_DEPTH {
        return Err(GeomError::NonPositiveDepth { z });
    }
    let inv_z = 1.0 / z;
    let inv_z2 = inv_z * inv_z;
    Ok(nalgebra::Matrix2x3::new(
        k.fx * inv_z,
        k.skew * inv_z,
        -(k.fx * s.x + k.skew * s.y) * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * s.y * inv_z2,
    ))
}

/// Triangle mesh with a per-vertex parametrization in the unit square.
/// Edges are derived from the faces at construction.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub edges: Vec<[usize; 2]>,
    pub param_coords: Vec<Point2<f64>>,
}

impl TriMesh {
    pub fn new(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[usize; 3]>,
        param_coords: Vec<Point2<f64>>,
    ) -> Result<Self, GeomError> {
        if vertices.is_empty() {
            return Err(GeomError::InvalidMesh("mesh has no vertices".into()));
        }
        if vertices.len() != param_coords.len() {
            return Err(GeomError::InvalidMesh(format!(
                "{} vertices but {} param_coords",
                vertices.len(),
                param_coords.len()
            )));
        }
        for f in &faces {
            for &i in f {
                if i >= vertices.len() {
                    return Err(GeomError::InvalidMesh(format!(
                        "face index {i} out of range ({} vertices)",
                        vertices.len()
                    )));
                }
            }
        }
        for (i, p) in param_coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(GeomError::InvalidMesh(format!(
                    "param_coords[{i}] = ({}, {}) outside [0,1]^2",
                    p.x, p.y
                )));
            }
        }
        let edges = derive_edges(&faces);
        Ok(Self { vertices, faces, edges, param_coords })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Diagonal of the axis-aligned bounding box of the vertices.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for i in 0..3 {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
        (hi - lo).norm()
    }

    /// Template edge lengths, in the order of `self.edges`.
    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&[i, j]| (self.vertices[i] - self.vertices[j]).norm())
            .collect()
    }
}

/// Unique undirected edges of a face list, sorted index pairs, deduplicated.
fn derive_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut edges: Vec<[usize; 2]> = faces
        .iter()
        .flat_map(|&[a, b, c]| {
            [[a.min(b), a.max(b)], [b.min(c), b.max(c)], [a.min(c), a.max(c)]]
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// One 2D-3D correspondence: a point on the template surface in barycentric
/// form together with its parametrization-space location and observed pixel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Match {
    pub facet: usize,
    pub bary: [f64; 3],
    pub param_point: [f64; 2],
    pub pixel: [f64; 2],
}

pub type MatchSet = Vec<Match>;

/// Point Σ bᵢ·v_{f,i} on facet `facet` of `mesh`.
pub fn barycentric_embed(
    mesh: &TriMesh,
    facet: usize,
    bary: [f64; 3],
) -> Result<Point3<f64>, GeomError> {
    let face = mesh
        .faces
        .get(facet)
        .ok_or(GeomError::BadFacet { facet, n_faces: mesh.faces.len() })?;
    let sum: f64 = bary.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GeomError::BadWeights { sum });
    }
    let mut out = Vector3::zeros();
    for i in 0..3 {
        out += bary[i] * mesh.vertices[face[i]].coords;
    }
    Ok(Point3::from(out))
}

/// Barycentric combination over an arbitrary vertex array (used to embed a
/// template-space match into a deformed frame).
pub fn barycentric_embed_in(
    vertices: &[Point3<f64>],
    face: [usize; 3],
    bary: [f64; 3],
) -> Point3<f64> {
    let mut out = nalgebra::Vector3::zeros();
    for i in 0..3 {
        out += bary[i] * vertices[face[i]].coords;
    }
    Point3::from(out)
}

/// First fundamental form J^T J of a parametrization Jacobian.
pub fn metric_tensor(j: &Matrix3x2<f64>) -> Matrix2<f64> {
    j.transpose() * j
}

/// Per-vertex first fundamental forms of a mesh: each facet spans an affine
/// map from parametrization space to 3D whose metric J^T J is constant over
/// the facet; a vertex gets the average over its incident facets. Facets that
/// are degenerate in parametrization space are skipped.
pub fn vertex_metrics(mesh: &TriMesh) -> Result<Vec<Matrix2<f64>>, GeomError> {
    let mut sums = vec![Matrix2::<f64>::zeros(); mesh.n_vertices()];
    let mut counts = vec![0usize; mesh.n_vertices()];
    for &[a, b, c] in &mesh.faces {
        let pa = mesh.param_coords[a];
        let du = [
            mesh.param_coords[b][0] - pa[0],
            mesh.param_coords[c][0] - pa[0],
        ];
        let dv = [
            mesh.param_coords[b][1] - pa[1],
            mesh.param_coords[c][1] - pa[1],
        ];
        let u = Matrix2::new(du[0], du[1], dv[0], dv[1]);
        let Some(u_inv) = u.try_inverse() else {
            continue;
        };
        let p = Matrix3x2::from_columns(&[
            mesh.vertices[b] - mesh.vertices[a],
            mesh.vertices[c] - mesh.vertices[a],
        ]);
        let g = metric_tensor(&(p * u_inv));
        for &v in &[a, b, c] {
            sums[v] += g;
            counts[v] += 1;
        }
    }
    for (v, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(GeomError::InvalidMesh(format!(
                "vertex {v} has no parametrization-regular incident facet"
            )));
        }
        sums[v] /= n as f64;
    }
    Ok(sums)
}
