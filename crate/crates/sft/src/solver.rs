//! Online per-frame optimization of the neural parametric surface: template
//! overfit with cached template metric tensors, the three loss terms
//! (re-projection, metric preservation, temporal), and the warm-started
//! frame loop driven by Adam.

use crate::geom::{self, CameraIntrinsics, Match, MatchSet, TriMesh};
use crate::surfnet::{BatchCache, Gradients, SurfNet, SurfNetError};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("match set is empty")]
    EmptyMatches,
    #[error("non-positive depth at match {match_index} (z = {z})")]
    NonPositiveDepth { match_index: usize, z: f64 },
    #[error("template fit did not converge: error {fit_error} > tol {tol} after {iters} iterations")]
    DidNotConverge { fit_error: f64, tol: f64, iters: usize },
    #[error("non-finite gradient in frame {frame}")]
    NonFiniteGradient { frame: usize },
    #[error("nets have different architectures")]
    ArchitectureMismatch,
    #[error(transparent)]
    Geom(#[from] geom::GeomError),
    #[error(transparent)]
    Net(#[from] SurfNetError),
}

/// Weights of the metric and temporal terms in the total loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_metric: f64,
    pub lambda_time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_metric: 0.01, lambda_time: 0.001 }
    }
}

/// The default grid for the lambda search.
pub fn lambda_grid_default() -> Vec<f64> {
    vec![0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0]
}

fn default_lr() -> f64 {
    1e-3
}
fn default_max_frame_iters() -> usize {
    1500
}
fn default_max_template_iters() -> usize {
    20000
}
fn default_template_tol() -> f64 {
    1e-3
}
fn default_layer_dims() -> Vec<usize> {
    vec![2, 128, 256, 128, 3]
}
fn default_early_stop_window() -> usize {
    1500
}
fn default_early_stop_min_improve() -> f64 {
    1e-6
}
fn default_c_tol() -> f64 {
    1e-6
}
fn default_max_outer() -> usize {
    20
}
fn default_max_inner() -> usize {
    100
}

/// Run configuration shared by the neural solver and the classical
/// baseline. `template_tol` is relative to the template bounding-box
/// diagonal; `c_tol` is relative to the mean squared template edge length.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub lambda_metric: f64,
    pub lambda_time: f64,
    pub lr: f64,
    pub max_frame_iters: usize,
    pub max_template_iters: usize,
    pub template_tol: f64,
    pub seed: u64,
    pub layer_dims: Vec<usize>,
    pub early_stop_window: usize,
    pub early_stop_min_improve: f64,
    pub c_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for Config {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_metric: w.lambda_metric,
            lambda_time: w.lambda_time,
            lr: default_lr(),
            max_frame_iters: default_max_frame_iters(),
            max_template_iters: default_max_template_iters(),
            template_tol: default_template_tol(),
            seed: 0,
            layer_dims: default_layer_dims(),
            early_stop_window: default_early_stop_window(),
            early_stop_min_improve: default_early_stop_min_improve(),
            c_tol: default_c_tol(),
            max_outer: default_max_outer(),
            max_inner: default_max_inner(),
        }
    }
}

impl Config {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_metric: self.lambda_metric, lambda_time: self.lambda_time }
    }
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: DVector::zeros(n_params),
            v: DVector::zeros(n_params),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam step; returns the additive parameter update.
    pub fn step(&mut self, grad: &DVector<f64>) -> DVector<f64> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut delta = DVector::zeros(grad.len());
        for k in 0..grad.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            delta[k] = -self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        delta
    }
}

/// Loss breakdown of one optimization state.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub projection: f64,
    pub metric: f64,
    pub time: f64,
    pub total: f64,
}

/// Result of the template overfit: fitted net plus the cached per-vertex
/// template metric tensors (in `param_coords` order).
#[derive(Debug, Clone)]
pub struct TemplateFit {
    pub net: SurfNet,
    pub template_metrics: Vec<Matrix2<f64>>,
    pub fit_error: f64,
    pub param_points: DMatrix<f64>,
}

/// Reconstruction of one frame.
#[derive(Debug, Clone)]
pub struct FrameSolution {
    pub net: SurfNet,
    pub vertex_estimates: Vec<Point3<f64>>,
    pub losses: LossBreakdown,
    pub iterations: usize,
    pub wall_time: f64,
    pub failed: bool,
}

/// 2xN matrix of the mesh parametrization coordinates P_V.
pub fn param_matrix(mesh: &TriMesh) -> DMatrix<f64> {
    DMatrix::from_fn(2, mesh.param_coords.len(), |r, c| mesh.param_coords[c][r])
}

fn match_param_matrix(matches: &[Match]) -> DMatrix<f64> {
    DMatrix::from_fn(2, matches.len(), |r, c| matches[c].param_point[r])
}

/// Mean re-projection distance (pixels) and its gradient with respect to
/// the batch output. `cache` must hold the forward pass at the matches'
/// parametrization points, in order.
fn projection_loss_grad(
    cache: &BatchCache,
    k: &CameraIntrinsics,
    matches: &[Match],
) -> Result<(f64, DMatrix<f64>), SolverError> {
    if matches.is_empty() {
        return Err(SolverError::EmptyMatches);
    }
    let n = matches.len() as f64;
    let y = cache.output();
    let mut d_y = DMatrix::zeros(3, matches.len());
    let mut loss = 0.0;
    for (c, m) in matches.iter().enumerate() {
        let s = Point3::new(y[(0, c)], y[(1, c)], y[(2, c)]);
        let map_depth = |e: geom::GeomError| match e {
            geom::GeomError::NonPositiveDepth { z } => {
                SolverError::NonPositiveDepth { match_index: c, z }
            }
            other => SolverError::Geom(other),
        };
        let proj = geom::project(k, &s).map_err(map_depth)?;
        let r = nalgebra::Vector2::new(proj.x - m.pixel[0], proj.y - m.pixel[1]);
        let norm = r.norm();
        loss += norm / n;
        if norm > 1e-300 {
            let jp = geom::project_jacobian(k, &s).map_err(map_depth)?;
            let g = jp.transpose() * (r / norm) / n;
            for r3 in 0..3 {
                d_y[(r3, c)] = g[r3];
            }
        }
    }
    Ok((loss, d_y))
}

/// Mean squared Frobenius deviation of J^T J from the cached template
/// tensors, and its gradient with respect to the Jacobian columns.
fn metric_loss_grad(
    cache: &BatchCache,
    template_metrics: &[Matrix2<f64>],
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let n = template_metrics.len();
    assert_eq!(cache.batch_size(), n);
    let nf = n as f64;
    let mut d_ju = DMatrix::zeros(3, n);
    let mut d_jv = DMatrix::zeros(3, n);
    let mut loss = 0.0;
    for c in 0..n {
        let j = cache.jacobian_at(c);
        let diff = geom::metric_tensor(&j) - template_metrics[c];
        loss += diff.norm_squared() / nf;
        let d_j: Matrix3x2<f64> = 4.0 * j * diff / nf;
        for r in 0..3 {
            d_ju[(r, c)] = d_j[(r, 0)];
            d_jv[(r, c)] = d_j[(r, 1)];
        }
    }
    (loss, d_ju, d_jv)
}

/// Mean Euclidean distance between the batch output and the previous
/// frame's values at the same points, with its output gradient.
fn time_loss_grad(output: &DMatrix<f64>, prev_values: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    assert_eq!(output.shape(), prev_values.shape());
    let n = output.ncols() as f64;
    let mut d_y = DMatrix::zeros(3, output.ncols());
    let mut loss = 0.0;
    for c in 0..output.ncols() {
        let r = output.column(c) - prev_values.column(c);
        let norm = r.norm();
        loss += norm / n;
        if norm > 1e-300 {
            for k in 0..3 {
                d_y[(k, c)] = r[k] / (norm * n);
            }
        }
    }
    (loss, d_y)
}

/// Mean re-projection error (pixels) of `net` on `matches`.
pub fn loss_projection(
    net: &SurfNet,
    k: &CameraIntrinsics,
    matches: &MatchSet,
) -> Result<f64, SolverError> {
    if matches.is_empty() {
        return Err(SolverError::EmptyMatches);
    }
    let cache = net.forward_batch(&match_param_matrix(matches), false)?;
    Ok(projection_loss_grad(&cache, k, matches)?.0)
}

/// Mean squared Frobenius deviation of the net's metric from the template.
pub fn loss_metric(net: &SurfNet, fit: &TemplateFit) -> Result<f64, SolverError> {
    let cache = net.forward_batch(&fit.param_points, true)?;
    Ok(metric_loss_grad(&cache, &fit.template_metrics).0)
}

/// Mean displacement between two nets evaluated at `points` (2xN).
pub fn loss_time(
    net: &SurfNet,
    prev_net: &SurfNet,
    points: &DMatrix<f64>,
) -> Result<f64, SolverError> {
    if !net.same_architecture(prev_net) {
        return Err(SolverError::ArchitectureMismatch);
    }
    let cur = net.forward_batch(points, false)?;
    let prev = prev_net.forward_batch(points, false)?;
    Ok(time_loss_grad(cur.output(), prev.output()).0)
}

/// Mean distance between the net's values at `fit.param_points` and the
/// mesh vertices (the template-fit objective), with its output gradient.
fn vertex_fit_loss_grad(output: &DMatrix<f64>, targets: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    time_loss_grad(output, targets)
}

fn vertex_matrix(mesh: &TriMesh) -> DMatrix<f64> {
    DMatrix::from_fn(3, mesh.n_vertices(), |r, c| mesh.vertices[c][r])
}

/// Overfit a fresh net to the template vertices and cache the template
/// metric tensors at every point of P_V.
pub fn fit_template(mesh: &TriMesh, config: &Config) -> Result<TemplateFit, SolverError> {
    let points = param_matrix(mesh);
    let targets = vertex_matrix(mesh);
    let tol = config.template_tol * mesh.bbox_diagonal();
    // Metric targets come from the mesh geometry, not from the fitted net:
    // the fit carries a small derivative (waviness) error that would
    // otherwise become the target every frame is pulled toward.
    let template_metrics = geom::vertex_metrics(mesh)?;

    let mut net = SurfNet::new_seeded(&config.layer_dims, config.seed);
    // Start the random net at the template centroid: a fresh net outputs
    // O(1) values, and walking a bias across a large offset costs ~lr per
    // Adam step.
    let centroid = targets.column_mean();
    net.offset_output_bias(&nalgebra::Vector3::new(centroid[0], centroid[1], centroid[2]));
    let mut adam = AdamState::new(net.n_params(), config.lr);
    let mut fit_error = f64::INFINITY;
    let mut iters = 0;
    // Mean-of-norms objectives keep unit-size per-point gradients near the
    // optimum, so Adam stalls at a floor proportional to lr. Halving lr on
    // plateaus lowers that floor until the tolerance is reachable.
    let mut best = f64::INFINITY;
    let mut since_improve = 0usize;
    for it in 0..config.max_template_iters {
        let cache = net.forward_batch(&points, false)?;
        let (loss, d_y) = vertex_fit_loss_grad(cache.output(), &targets);
        fit_error = loss;
        iters = it;
        if loss < tol {
            break;
        }
        if loss < 0.99 * best {
            best = loss;
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= 300 {
                adam.lr = (adam.lr * 0.5).max(1e-7);
                since_improve = 0;
            }
        }
        let grads = net.backward_batch(&cache, Some(&d_y), None)?;
        let delta = adam.step(&grads.to_flat());
        net.apply_flat_update(&delta);
    }
    if fit_error >= tol {
        return Err(SolverError::DidNotConverge { fit_error, tol, iters });
    }

    // Polish phase: a vertex-only fit leaves a wavy surface whose Jacobians
    // miss the template metric — a residual the per-frame optimization never
    // recovers from. Keep optimizing fit + lambda_metric * metric, and keep
    // the net with the lowest metric residual among those still inside the
    // vertex tolerance.
    let polish_iters = config.max_template_iters / 4;
    let mut adam = AdamState::new(net.n_params(), config.lr);
    let mut candidate = net.clone();
    let mut candidate_metric = f64::INFINITY;
    for it in 0..polish_iters {
        adam.lr = config.lr * 1e-2f64.powf(it as f64 / polish_iters.max(1) as f64);
        let cache = net.forward_batch(&points, true)?;
        let (loss, d_y) = vertex_fit_loss_grad(cache.output(), &targets);
        let (l_metric, mut d_ju, mut d_jv) = metric_loss_grad(&cache, &template_metrics);
        if loss < tol && l_metric < candidate_metric {
            candidate = net.clone();
            candidate_metric = l_metric;
            fit_error = loss;
        }
        d_ju *= config.lambda_metric;
        d_jv *= config.lambda_metric;
        let grads = net.backward_batch(&cache, Some(&d_y), Some((&d_ju, &d_jv)))?;
        let delta = adam.step(&grads.to_flat());
        net.apply_flat_update(&delta);
    }
    if candidate_metric.is_finite() {
        net = candidate;
    }

    Ok(TemplateFit { net, template_metrics, fit_error, param_points: points })
}

/// Total loss and gradient of L_total at the current net.
pub fn total_loss_grad(
    net: &SurfNet,
    k: &CameraIntrinsics,
    matches: &[Match],
    match_points: &DMatrix<f64>,
    fit: &TemplateFit,
    prev_values: &DMatrix<f64>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients), SolverError> {
    // projection term over the matches
    let cache_m = net.forward_batch(match_points, false)?;
    let (l_proj, d_y_proj) = projection_loss_grad(&cache_m, k, matches)?;
    let mut grads = net.backward_batch(&cache_m, Some(&d_y_proj), None)?;

    // metric and temporal terms over P_V share one forward pass
    let cache_v = net.forward_batch(&fit.param_points, true)?;
    let (l_metric, mut d_ju, mut d_jv) = metric_loss_grad(&cache_v, &fit.template_metrics);
    let (l_time, mut d_y_time) = time_loss_grad(cache_v.output(), prev_values);
    d_ju *= weights.lambda_metric;
    d_jv *= weights.lambda_metric;
    d_y_time *= weights.lambda_time;
    let g_v = net.backward_batch(&cache_v, Some(&d_y_time), Some((&d_ju, &d_jv)))?;
    grads.add_assign(&g_v, 1.0);

    let total = l_proj + weights.lambda_metric * l_metric + weights.lambda_time * l_time;
    Ok((LossBreakdown { projection: l_proj, metric: l_metric, time: l_time, total }, grads))
}

/// Algorithm main loop: warm-started per-frame minimization of the total
/// loss. A frame whose gradient turns non-finite is marked failed and the
/// previous parameters are carried forward.
pub fn reconstruct_sequence(
    fit: &TemplateFit,
    k: &CameraIntrinsics,
    frames: &[MatchSet],
    weights: &LossWeights,
    config: &Config,
) -> Result<Vec<FrameSolution>, SolverError> {
    let mut net = fit.net.clone();
    let mut solutions = Vec::with_capacity(frames.len());
    // Adam moments carry across frames: a fresh optimizer's first steps move
    // every parameter by the full lr, which kicks a warm-started net off the
    // previous frame's solution before re-converging.
    let mut adam = AdamState::new(net.n_params(), config.lr);

    for matches in frames.iter() {
        let start = std::time::Instant::now();
        if matches.is_empty() {
            return Err(SolverError::EmptyMatches);
        }
        let match_points = match_param_matrix(matches);
        let prev_values = net.forward_batch(&fit.param_points, false)?.output().clone();

        let mut best_net = net.clone();
        let mut best_losses = LossBreakdown::default();
        let mut best_total = f64::INFINITY;
        let mut best_iter = 0usize;
        let mut failed = false;
        let mut iterations = 0;
        // Two-phase schedule: constant lr explores (the mean-of-norms
        // losses make Adam bounce around the optimum), then a geometric
        // decay anneals the bounce away for the final precision.
        let decay_iters = config.max_frame_iters.max(1);

        for it in 0..config.max_frame_iters {
            iterations = it + 1;
            adam.lr = config.lr * 1e-2f64.powf(it as f64 / decay_iters as f64);
            let step = total_loss_grad(
                &net, k, matches, &match_points, fit, &prev_values, weights,
            );
            let (losses, grads) = match step {
                Ok(v) => v,
                Err(SolverError::NonFiniteGradient { .. })
                | Err(SolverError::Net(SurfNetError::NonFiniteGradient)) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if losses.total < best_total {
                // any strict improvement keeps the window open; the
                // min_improve threshold only guards against f64 noise
                if best_total - losses.total > config.early_stop_min_improve * losses.total.abs() {
                    best_iter = it;
                }
                best_total = losses.total;
                best_losses = losses;
                best_net = net.clone();
            }
            if it.saturating_sub(best_iter) >= config.early_stop_window {
                break;
            }
            let delta = adam.step(&grads.to_flat());
            net.apply_flat_update(&delta);
        }

        if failed {
            // carry the previous frame's parameters forward
            net = solutions
                .last()
                .map(|s: &FrameSolution| s.net.clone())
                .unwrap_or_else(|| fit.net.clone());
        } else {
            net = best_net;
        }

        let out = net.forward_batch(&fit.param_points, false)?.output().clone();
        let vertex_estimates = (0..out.ncols())
            .map(|c| Point3::new(out[(0, c)], out[(1, c)], out[(2, c)]))
            .collect();
        solutions.push(FrameSolution {
            net: net.clone(),
            vertex_estimates,
            losses: best_losses,
            iterations,
            wall_time: start.elapsed().as_secs_f64(),
            failed,
        });
    }
    Ok(solutions)
}

/// Serialized checkpoint: net weights plus the cached template metrics.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    /// Row-major entries per weight layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    /// Row-major 2x2 template metric tensors, one per point of P_V.
    pub template_metrics: Vec<[f64; 4]>,
    /// Parametrization points (u, v) in P_V order.
    pub param_points: Vec<[f64; 2]>,
    pub fit_error: f64,
}

impl Checkpoint {
    pub fn from_fit(fit: &TemplateFit, seed: u64) -> Self {
        let dims = fit.net.layer_dims().to_vec();
        let weights = fit
            .net
            .weights()
            .iter()
            .map(|w| {
                let mut out = Vec::with_capacity(w.len());
                for r in 0..w.nrows() {
                    for c in 0..w.ncols() {
                        out.push(w[(r, c)]);
                    }
                }
                out
            })
            .collect();
        let biases = fit.net.biases().iter().map(|b| b.as_slice().to_vec()).collect();
        let template_metrics = fit
            .template_metrics
            .iter()
            .map(|g| [g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)]])
            .collect();
        let param_points = (0..fit.param_points.ncols())
            .map(|c| [fit.param_points[(0, c)], fit.param_points[(1, c)]])
            .collect();
        Self {
            layer_dims: dims,
            weights,
            biases,
            seed,
            template_metrics,
            param_points,
            fit_error: fit.fit_error,
        }
    }

    pub fn into_fit(self) -> TemplateFit {
        let mut weights = Vec::new();
        for (l, flat) in self.weights.iter().enumerate() {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            assert_eq!(flat.len(), rows * cols, "weight layer {l} shape mismatch");
            weights.push(DMatrix::from_row_slice(rows, cols, flat));
        }
        let biases = self.biases.iter().map(|b| DVector::from_column_slice(b)).collect();
        let net = SurfNet::from_parts(self.layer_dims, weights, biases);
        let template_metrics = self
            .template_metrics
            .iter()
            .map(|g| Matrix2::new(g[0], g[1], g[2], g[3]))
            .collect();
        let param_points =
            DMatrix::from_fn(2, self.param_points.len(), |r, c| self.param_points[c][r]);
        TemplateFit { net, template_metrics, fit_error: self.fit_error, param_points }
    }
}
