//! Classical baseline: re-projection rows assembled into a sparse linear
//! system, per-edge squared-length isometry constraints, and an outer loop
//! of linearized KKT solves with Lagrange multipliers.
//!
//! The vertex unknowns are stacked as x = vec(v_1 .. v_n), vertex i at
//! indices 3i..3i+3. Preserving every edge length of a triangle mesh
//! preserves each facet's first fundamental form, so the per-edge residual
//! C_e = ||x_i - x_j||^2 - l_e^2 is the discrete metric constraint; squared
//! lengths keep C polynomial and its Jacobian linear in x.

use crate::geom::{CameraIntrinsics, GeomError, MatchSet, TriMesh};
use crate::solver::Config;
use nalgebra::{DMatrix, DVector, Point3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassicalError {
    #[error("vertex vector has length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("KKT system singular even after Tikhonov damping")]
    SingularSystem,
    #[error("diverged: ||C||_inf grew from {initial} to {current}")]
    Diverged { initial: f64, current: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Minimal compressed-sparse-row matrix; rows are built in order.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(ncols: usize) -> Self {
        Self { nrows: 0, ncols, row_ptr: vec![0], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Append one row given (column, value) pairs.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            self.col_idx.push(c);
            self.values.push(v);
        }
        self.nrows += 1;
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn nnz_in_row(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut out = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[(r, self.col_idx[k])] += self.values[k];
            }
        }
        out
    }

    /// Dense A^T A without forming the dense A.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, self.ncols);
        for r in 0..self.nrows {
            for a in self.row_ptr[r]..self.row_ptr[r + 1] {
                for b in self.row_ptr[r]..self.row_ptr[r + 1] {
                    out[(self.col_idx[a], self.col_idx[b])] += self.values[a] * self.values[b];
                }
            }
        }
        out
    }
}

/// Sparse re-projection system M x = 0; two rows per match.
#[derive(Debug, Clone)]
pub struct ProjectionSystem {
    pub m: CsrMatrix,
    /// Match feeding each row pair: rows 2i and 2i+1 come from match i.
    pub match_index: Vec<usize>,
}

/// Assemble M from barycentric matches: for match (f, b, (u, v)) the rows
/// encode (k1 - u k3) . s = 0 and (k2 - v k3) . s = 0 with s the barycentric
/// point, coefficients distributed over the three facet vertices.
pub fn build_projection_matrix(
    k: &CameraIntrinsics,
    mesh: &TriMesh,
    matches: &MatchSet,
) -> Result<ProjectionSystem, ClassicalError> {
    let n_cols = 3 * mesh.n_vertices();
    let mut m = CsrMatrix::new(n_cols);
    let mut match_index = Vec::with_capacity(matches.len());
    for (mi, mt) in matches.iter().enumerate() {
        let face = *mesh
            .faces
            .get(mt.facet)
            .ok_or(GeomError::BadFacet { facet: mt.facet, n_faces: mesh.faces.len() })?;
        let sum: f64 = mt.bary.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GeomError::BadWeights { sum }.into());
        }
        let (u, v) = (mt.pixel[0], mt.pixel[1]);
        // rows of K: k1 = (fx, skew, cx), k2 = (0, fy, cy), k3 = (0, 0, 1)
        let row_u = [k.fx, k.skew, k.cx - u];
        let row_v = [0.0, k.fy, k.cy - v];
        for row in [row_u, row_v] {
            let mut entries = Vec::with_capacity(9);
            for (slot, &vi) in face.iter().enumerate() {
                for (c, &rc) in row.iter().enumerate() {
                    entries.push((3 * vi + c, mt.bary[slot] * rc));
                }
            }
            m.push_row(&entries);
        }
        match_index.push(mi);
    }
    Ok(ProjectionSystem { m, match_index })
}

fn vertex_at(x: &DVector<f64>, i: usize) -> Point3<f64> {
    Point3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

/// Stack mesh vertices into the solver layout.
pub fn stack_vertices(vertices: &[Point3<f64>]) -> DVector<f64> {
    let mut x = DVector::zeros(3 * vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        for c in 0..3 {
            x[3 * i + c] = v[c];
        }
    }
    x
}

pub fn unstack_vertices(x: &DVector<f64>) -> Vec<Point3<f64>> {
    (0..x.len() / 3).map(|i| vertex_at(x, i)).collect()
}

fn check_len(x: &DVector<f64>, template: &TriMesh) -> Result<(), ClassicalError> {
    let expected = 3 * template.n_vertices();
    if x.len() != expected {
        return Err(ClassicalError::LengthMismatch { got: x.len(), expected });
    }
    Ok(())
}

/// Per-edge squared-length residual C_e = ||x_i - x_j||^2 - l_e^2.
pub fn constraint_c(x: &DVector<f64>, template: &TriMesh) -> Result<DVector<f64>, ClassicalError> {
    check_len(x, template)?;
    let lengths = template.edge_lengths();
    let mut c = DVector::zeros(template.edges.len());
    for (e, &[i, j]) in template.edges.iter().enumerate() {
        let d = vertex_at(x, i) - vertex_at(x, j);
        c[e] = d.norm_squared() - lengths[e] * lengths[e];
    }
    Ok(c)
}

/// Sparse gradient of [`constraint_c`]: row e holds 2(x_i - x_j) on vertex
/// i's coordinates and the negation on vertex j's (6 structural nonzeros;
/// a zero-length edge yields a zero row, degenerate but not an error).
pub fn constraint_jacobian(
    x: &DVector<f64>,
    template: &TriMesh,
) -> Result<CsrMatrix, ClassicalError> {
    check_len(x, template)?;
    let mut jac = CsrMatrix::new(x.len());
    for &[i, j] in &template.edges {
        let d = vertex_at(x, i) - vertex_at(x, j);
        let mut entries = Vec::with_capacity(6);
        for c in 0..3 {
            entries.push((3 * i + c, 2.0 * d[c]));
        }
        for c in 0..3 {
            entries.push((3 * j + c, -2.0 * d[c]));
        }
        jac.push_row(&entries);
    }
    Ok(jac)
}

/// Solver diagnostics for one frame.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ClassicalDiagnostics {
    pub outer_iterations: usize,
    pub c_inf: f64,
    pub mx_norm: f64,
    pub singular_retries: usize,
    /// Largest relative normal-equation residual among the outer solves.
    pub worst_solve_residual: f64,
}

/// Solve the KKT system A y = rhs in the least-squares sense and report
/// the relative normal-equation residual ||A^T(A y - rhs)|| / ||A^T rhs||.
/// A direct full-pivot LU is tried first (the KKT matrix is far better
/// conditioned than its Gram matrix); the damped normal equations are the
/// fallback for a singular A. Returns (solution, residual, retry count).
fn solve_kkt(
    a: &DMatrix<f64>,
    rhs: &DVector<f64>,
    max_refine: usize,
) -> Result<(DVector<f64>, f64, usize), ClassicalError> {
    let b0 = a.transpose() * a;
    let g = a.transpose() * rhs;
    let g_norm = g.norm().max(1e-300);

    let lu = a.clone().full_piv_lu();
    if let Some(y) = lu.solve(rhs) {
        let rel = (&g - &b0 * &y).norm() / g_norm;
        if rel < 1e-8 {
            return Ok((y, rel, 0));
        }
    }

    let mut retries = 0usize;
    let mut damping = 0.0;
    loop {
        let mut b = b0.clone();
        if damping > 0.0 {
            for i in 0..b.nrows() {
                b[(i, i)] += damping;
            }
        }
        match b.clone().cholesky() {
            Some(chol) => {
                let mut y = chol.solve(&g);
                let mut res = &g - &b0 * &y;
                let mut rel = res.norm() / g_norm;
                for _ in 0..max_refine {
                    if rel < 1e-10 {
                        break;
                    }
                    let dy = chol.solve(&res);
                    let y_next = &y + &dy;
                    let res_next = &g - &b0 * &y_next;
                    let rel_next = res_next.norm() / g_norm;
                    if rel_next >= rel {
                        break;
                    }
                    y = y_next;
                    res = res_next;
                    rel = rel_next;
                }
                return Ok((y, rel, retries));
            }
            None => {
                retries += 1;
                if retries > 8 {
                    return Err(ClassicalError::SingularSystem);
                }
                // scale-aware Tikhonov ramp from a tiny baseline
                let base = 1e-10 * (b0.trace() / b0.nrows() as f64).max(1.0);
                damping = if damping == 0.0 { base } else { damping * 100.0 };
            }
        }
    }
}

/// One frame of the classical baseline: repeated linearization of C and a
/// least-squares KKT solve until ||C||_inf < c_tol or the outer cap.
pub fn solve_frame_classical(
    prev_x: &DVector<f64>,
    system: &ProjectionSystem,
    template: &TriMesh,
    config: &Config,
) -> Result<(DVector<f64>, ClassicalDiagnostics), ClassicalError> {
    check_len(prev_x, template)?;
    let n = prev_x.len();
    let n_e = template.edges.len();
    let lengths = template.edge_lengths();
    let mean_l2 = lengths.iter().map(|l| l * l).sum::<f64>() / lengths.len().max(1) as f64;
    let c_tol = config.c_tol * mean_l2;

    let mtm = system.m.gram();
    let mut x = prev_x.clone();
    let c0_inf = constraint_c(&x, template)?.amax();
    // The first full KKT step from a far start legitimately violates C at
    // second order, so the divergence baseline is set after it; only
    // growth past that transient counts as the blow-up this guards.
    let mut divergence_limit = f64::INFINITY;

    let mut diags = ClassicalDiagnostics {
        outer_iterations: 0,
        c_inf: c0_inf,
        mx_norm: system.m.mul_vec(&x).norm(),
        singular_retries: 0,
        worst_solve_residual: 0.0,
    };

    for outer in 0..config.max_outer {
        let c = constraint_c(&x, template)?;
        let jac = constraint_jacobian(&x, template)?.to_dense();

        // KKT of the linearized problem:
        //   [ M^T M   J^T ] [dx]   [ -M^T M x ]
        //   [   J      0  ] [ l ] = [   -C     ]
        let dim = n + n_e;
        let mut a = DMatrix::zeros(dim, dim);
        a.view_mut((0, 0), (n, n)).copy_from(&mtm);
        a.view_mut((0, n), (n, n_e)).copy_from(&jac.transpose());
        a.view_mut((n, 0), (n_e, n)).copy_from(&jac);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-(&mtm * &x)));
        rhs.rows_mut(n, n_e).copy_from(&(-c));

        let (y, rel_res, retries) = solve_kkt(&a, &rhs, config.max_inner)?;
        diags.singular_retries += retries;
        diags.worst_solve_residual = diags.worst_solve_residual.max(rel_res);
        x += y.rows(0, n);

        diags.outer_iterations = outer + 1;
        diags.c_inf = constraint_c(&x, template)?.amax();
        diags.mx_norm = system.m.mul_vec(&x).norm();
        if outer == 0 {
            divergence_limit = 10.0 * c0_inf.max(diags.c_inf).max(c_tol);
        }
        if diags.c_inf > divergence_limit {
            return Err(ClassicalError::Diverged { initial: c0_inf, current: diags.c_inf });
        }
        if diags.c_inf < c_tol {
            break;
        }
    }
    Ok((x, diags))
}

/// Singular values of M, a conditioning diagnostic for the re-projection
/// system (no contract attached).
pub fn projection_spectrum(system: &ProjectionSystem) -> Vec<f64> {
    let dense = system.m.to_dense();
    if dense.nrows() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = dense.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}
