//! Feed-forward parametric surface: a Softplus MLP mapping the unit square
//! to 3D, with an analytic Jacobian with respect to the input point and
//! parameter gradients for scalar losses built from both the value and the
//! Jacobian (the metric term needs gradients *through* J^T J, which is the
//! second-order path handled by [`SurfNet::backward_batch`]).
//!
//! All batched quantities are stored column-per-point: a batch of N input
//! points is a 2xN matrix, outputs are 3xN, and the input Jacobian is kept
//! as two matrices holding the du- and dv-columns for every point.

use nalgebra::{DMatrix, DVector, Matrix3x2, Point2, Point3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurfNetError {
    #[error("input point ({u}, {v}) outside the unit square")]
    OutOfDomain { u: f64, v: f64 },
    #[error("non-finite gradient component encountered")]
    NonFiniteGradient,
    #[error("architecture mismatch: {0:?} vs {1:?}")]
    ArchitectureMismatch(Vec<usize>, Vec<usize>),
}

/// Overflow-safe Softplus ln(1 + e^x); linear branch above 30.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// First derivative of Softplus, the logistic sigmoid.
pub fn softplus_prime(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Second derivative of Softplus, sigma * (1 - sigma).
pub fn softplus_second(x: f64) -> f64 {
    let s = softplus_prime(x);
    s * (1.0 - s)
}

/// Softplus MLP from the unit square to R^3. Hidden layers use Softplus,
/// the output layer is linear. `weights[l]` maps layer l to layer l+1.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfNet {
    layer_dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Forward-pass cache for one batch, consumed by the backward pass.
pub struct BatchCache {
    /// A^0 .. A^L; A^0 is the 2xN input batch.
    activations: Vec<DMatrix<f64>>,
    /// Z^1 .. Z^L (pre-activations per weight layer).
    pre_activations: Vec<DMatrix<f64>>,
    jac: Option<JacCache>,
}

struct JacCache {
    /// du-columns of the Jacobian of A^l, l = 0..L.
    ju: Vec<DMatrix<f64>>,
    jv: Vec<DMatrix<f64>>,
    /// Raw products W^l * Ju^l for hidden layers (before the sigma' scaling).
    uu: Vec<DMatrix<f64>>,
    uv: Vec<DMatrix<f64>>,
}

impl BatchCache {
    /// Network output for the batch, 3xN.
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }

    /// du- and dv-columns of the input Jacobian for the batch (3xN each).
    pub fn jacobian(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        let jac = self.jac.as_ref().expect("forward pass was run without Jacobian");
        (jac.ju.last().unwrap(), jac.jv.last().unwrap())
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].ncols()
    }

    /// 3x2 input Jacobian of point `c` in the batch.
    pub fn jacobian_at(&self, c: usize) -> Matrix3x2<f64> {
        let (ju, jv) = self.jacobian();
        Matrix3x2::new(
            ju[(0, c)],
            jv[(0, c)],
            ju[(1, c)],
            jv[(1, c)],
            ju[(2, c)],
            jv[(2, c)],
        )
    }
}

/// Value and input Jacobian of the surface at one point.
#[derive(Debug, Clone)]
pub struct EvalBundle {
    pub value: Point3<f64>,
    pub jacobian: Matrix3x2<f64>,
}

/// Parameter gradient with the same layout as [`SurfNet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<DMatrix<f64>>,
    pub d_biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &SurfNet) -> Self {
        Self {
            d_weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            d_biases: net.biases.iter().map(|b| DVector::zeros(b.nrows())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.zip_apply(b, |x, y| *x += scale * y);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            a.zip_apply(b, |x, y| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            *w *= s;
        }
        for b in &mut self.d_biases {
            *b *= s;
        }
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let n: usize = self.d_weights.iter().map(|w| w.len()).sum::<usize>()
            + self.d_biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = DVector::zeros(n);
        let mut k = 0;
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            for v in w.iter() {
                out[k] = *v;
                k += 1;
            }
            for v in b.iter() {
                out[k] = *v;
                k += 1;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.d_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.d_biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl SurfNet {
    /// Glorot-uniform initialization, seeded. Biases start at zero.
    pub fn new_seeded(layer_dims: &[usize], seed: u64) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output layers");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in layer_dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                rng.random_range(-bound..bound)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Self { layer_dims: layer_dims.to_vec(), weights, biases }
    }

    /// All-zero parameters (useful as a degenerate reference in tests).
    pub fn zeros(layer_dims: &[usize]) -> Self {
        let weights = layer_dims
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims.windows(2).map(|w| DVector::zeros(w[1])).collect();
        Self { layer_dims: layer_dims.to_vec(), weights, biases }
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
    ) -> Self {
        Self { layer_dims, weights, biases }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    /// Shift the output-layer bias, e.g. to start the surface at a
    /// centroid instead of the origin.
    pub fn offset_output_bias(&mut self, offset: &nalgebra::Vector3<f64>) {
        let last = self.biases.len() - 1;
        assert_eq!(self.biases[last].len(), 3, "output layer must be 3-dimensional");
        for c in 0..3 {
            self.biases[last][c] += offset[c];
        }
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn same_architecture(&self, other: &SurfNet) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub fn check_domain(p: &Point2<f64>) -> Result<(), SurfNetError> {
        let tol = 1e-9;
        if p.x < -tol || p.x > 1.0 + tol || p.y < -tol || p.y > 1.0 + tol {
            return Err(SurfNetError::OutOfDomain { u: p.x, v: p.y });
        }
        Ok(())
    }

    /// Batched forward pass over a 2xN point matrix. Domain is checked per
    /// column. With `with_jacobian` the input-Jacobian recurrence runs too.
    pub fn forward_batch(
        &self,
        points: &DMatrix<f64>,
        with_jacobian: bool,
    ) -> Result<BatchCache, SurfNetError> {
        assert_eq!(points.nrows(), 2, "points must be a 2xN matrix");
        for c in 0..points.ncols() {
            SurfNet::check_domain(&Point2::new(points[(0, c)], points[(1, c)]))?;
        }
        let n = points.ncols();
        let last = self.n_layers() - 1;

        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        let mut pre_activations = Vec::with_capacity(self.n_layers());
        activations.push(points.clone());

        let mut jac = with_jacobian.then(|| {
            let mut ju0 = DMatrix::zeros(2, n);
            let mut jv0 = DMatrix::zeros(2, n);
            ju0.row_mut(0).fill(1.0);
            jv0.row_mut(1).fill(1.0);
            JacCache { ju: vec![ju0], jv: vec![jv0], uu: Vec::new(), uv: Vec::new() }
        });

        for l in 0..self.n_layers() {
            let mut z = &self.weights[l] * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let a = if l == last {
                z.clone()
            } else {
                z.map(softplus)
            };
            if let Some(jac) = jac.as_mut() {
                let uu = &self.weights[l] * jac.ju.last().unwrap();
                let uv = &self.weights[l] * jac.jv.last().unwrap();
                if l == last {
                    jac.ju.push(uu.clone());
                    jac.jv.push(uv.clone());
                } else {
                    let sp = z.map(softplus_prime);
                    jac.ju.push(uu.component_mul(&sp));
                    jac.jv.push(uv.component_mul(&sp));
                }
                jac.uu.push(uu);
                jac.uv.push(uv);
            }
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(BatchCache { activations, pre_activations, jac })
    }

    /// Deterministic forward pass at one point.
    pub fn eval(&self, p: &Point2<f64>) -> Result<Point3<f64>, SurfNetError> {
        let batch = DMatrix::from_column_slice(2, 1, &[p.x, p.y]);
        let cache = self.forward_batch(&batch, false)?;
        let y = cache.output();
        Ok(Point3::new(y[(0, 0)], y[(1, 0)], y[(2, 0)]))
    }

    /// Value plus analytic 3x2 input Jacobian at one point.
    pub fn eval_with_jacobian(&self, p: &Point2<f64>) -> Result<EvalBundle, SurfNetError> {
        let batch = DMatrix::from_column_slice(2, 1, &[p.x, p.y]);
        let cache = self.forward_batch(&batch, true)?;
        let y = cache.output();
        let (ju, jv) = cache.jacobian();
        Ok(EvalBundle {
            value: Point3::new(y[(0, 0)], y[(1, 0)], y[(2, 0)]),
            jacobian: Matrix3x2::new(
                ju[(0, 0)],
                jv[(0, 0)],
                ju[(1, 0)],
                jv[(1, 0)],
                ju[(2, 0)],
                jv[(2, 0)],
            ),
        })
    }

    /// Parameter gradient of a scalar loss given its gradients with respect
    /// to the batch output (`d_output`, 3xN) and, optionally, with respect
    /// to the input-Jacobian columns (`d_ju`/`d_jv`, 3xN). The Jacobian path
    /// contributes second-order terms through sigma'' of each hidden layer.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        d_output: Option<&DMatrix<f64>>,
        d_jac: Option<(&DMatrix<f64>, &DMatrix<f64>)>,
    ) -> Result<Gradients, SurfNetError> {
        let n_layers = self.n_layers();
        let last = n_layers - 1;
        let n = cache.batch_size();
        let out_dim = *self.layer_dims.last().unwrap();
        let mut grads = Gradients::zeros_like(self);

        // Gradient on each hidden pre-activation coming from the Jacobian
        // path, to be merged into the value backward sweep below.
        let mut z_extra: Vec<Option<DMatrix<f64>>> = vec![None; n_layers];

        if let Some((d_ju, d_jv)) = d_jac {
            let jac = cache.jac.as_ref().expect("backward with d_jac needs a Jacobian forward");
            // Output layer is linear: J^L = W^last * J^{last}.
            grads.d_weights[last] += d_ju * jac.ju[last].transpose();
            grads.d_weights[last] += d_jv * jac.jv[last].transpose();
            let mut gu = self.weights[last].transpose() * d_ju;
            let mut gv = self.weights[last].transpose() * d_jv;
            for l in (0..last).rev() {
                let z = &cache.pre_activations[l];
                let sp = z.map(softplus_prime);
                let spp = z.map(softplus_second);
                // J^{l+1} = sigma'(Z^l) .* U, U = W^l * J^l
                let d_uu = gu.component_mul(&sp);
                let d_uv = gv.component_mul(&sp);
                let s = spp.component_mul(&(gu.component_mul(&jac.uu[l]) + gv.component_mul(&jac.uv[l])));
                z_extra[l] = Some(s);
                grads.d_weights[l] += &d_uu * jac.ju[l].transpose();
                grads.d_weights[l] += &d_uv * jac.jv[l].transpose();
                if l > 0 {
                    gu = self.weights[l].transpose() * d_uu;
                    gv = self.weights[l].transpose() * d_uv;
                }
            }
        }

        // Value sweep; the output layer is linear so dL/dZ^last = d_output.
        let mut eps = match d_output {
            Some(d) => d.clone(),
            None => DMatrix::zeros(out_dim, n),
        };
        for l in (0..n_layers).rev() {
            if l < last {
                let mut prop = self.weights[l + 1].transpose() * &eps;
                prop.component_mul_assign(&cache.pre_activations[l].map(softplus_prime));
                if let Some(s) = &z_extra[l] {
                    prop += s;
                }
                eps = prop;
            }
            grads.d_weights[l] += &eps * cache.activations[l].transpose();
            grads.d_biases[l] += eps.column_sum();
        }

        if !grads.is_finite() {
            return Err(SurfNetError::NonFiniteGradient);
        }
        Ok(grads)
    }

    /// Apply a flat additive update in the [`Gradients::to_flat`] layout.
    pub fn apply_flat_update(&mut self, delta: &DVector<f64>) {
        let mut k = 0;
        for l in 0..self.weights.len() {
            for v in self.weights[l].iter_mut() {
                *v += delta[k];
                k += 1;
            }
            for v in self.biases[l].iter_mut() {
                *v += delta[k];
                k += 1;
            }
        }
        debug_assert_eq!(k, delta.len());
    }

    pub fn params_flat(&self) -> DVector<f64> {
        Gradients {
            d_weights: self.weights.clone(),
            d_biases: self.biases.clone(),
        }
        .to_flat()
    }

    pub fn set_params_flat(&mut self, flat: &DVector<f64>) {
        let mut k = 0;
        for l in 0..self.weights.len() {
            for v in self.weights[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in self.biases[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        assert_eq!(k, flat.len());
    }
}
