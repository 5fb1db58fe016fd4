//! Geometry of small dense networks: training, Hessian, Fisher-Rao metric,
//! influence functions, data reweighting, curve-length complexity and the
//! input-output Jacobian spectrum.
//!
//! Everything runs in `f64` on dense nalgebra matrices. The objective for
//! weighted data `(x_i, y_i, ε_i)` is
//!
//! ```text
//! L(θ) = Σ_i ε_i ℓ(f_θ(x_i), y_i) + (l2/2) ‖θ‖²
//! ```
//!
//! with `ε_i = 1/n` by default. Removing a point means setting its weight to
//! zero and leaving the others alone, which is the perturbation the influence
//! functions linearise.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{GeoError, Result};

/// Largest parameter count for which dense Hessians are formed.
pub const MAX_PARAMS: usize = 2000;

pub type ParamVector = DVector<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Binary cross-entropy on the logit `f_θ(x)[0]`, labels in {0, 1}.
    CrossEntropy,
    /// `½ (f_θ(x)[0] − y)²`.
    Squared,
}

/// Layer widths `[d_in, h_1, …, d_out]`. Hidden layers use `tanh`, the last
/// layer is affine. In residual mode every layer is a block
/// `x ← x + tanh(W x + b)` and all widths must agree.
///
/// Losses read the first output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub loss: Loss,
    pub residual: bool,
    pub bias: bool,
    /// Ridge coefficient added to the training objective and its Hessian.
    pub l2: f64,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>, loss: Loss) -> Result<Self> {
        let s = Self {
            widths,
            loss,
            residual: false,
            bias: true,
            l2: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    /// `blocks` residual blocks of width `width`.
    pub fn residual(width: usize, blocks: usize, loss: Loss) -> Result<Self> {
        let s = Self {
            widths: vec![width; blocks + 1],
            loss,
            residual: true,
            bias: true,
            l2: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(GeoError::InvalidInput("a network needs at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(GeoError::InvalidInput("layer widths must be positive".into()));
        }
        if self.residual && self.widths.iter().any(|&w| w != self.widths[0]) {
            return Err(GeoError::InvalidInput("residual blocks need equal widths".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(GeoError::InvalidInput(format!("ridge coefficient {} must be finite and non-negative", self.l2)));
        }
        let d = self.param_count();
        if d > MAX_PARAMS {
            return Err(GeoError::InvalidInput(format!("{d} parameters exceed the dense limit {MAX_PARAMS}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layer_size(&self, l: usize) -> usize {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        o * i + if self.bias { o } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        (0..self.layers()).map(|l| self.layer_size(l)).sum()
    }

    /// Slice of θ holding layer `l`: the weight matrix row-major, then the bias.
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let start: usize = (0..l).map(|k| self.layer_size(k)).sum();
        start..start + self.layer_size(l)
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = DVector::zeros(self.param_count());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let a = 1.0 / (i as f64).sqrt();
            let r = self.layer_range(l);
            for k in 0..o * i {
                theta[r.start + k] = rng.gen_range(-a..a);
            }
        }
        theta
    }

    fn check(&self, theta: &ParamVector, x: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(GeoError::InvalidInput(format!("θ has {} entries, spec needs {}", theta.len(), self.param_count())));
        }
        if x.len() != self.input_dim() {
            return Err(GeoError::InvalidInput(format!("input has {} features, spec needs {}", x.len(), self.input_dim())));
        }
        Ok(())
    }

    fn weights<'a>(&self, theta: &'a ParamVector, l: usize) -> (&'a [f64], Option<&'a [f64]>) {
        let (i, o) = (self.widths[l], self.widths[l + 1]);
        let s = &theta.as_slice()[self.layer_range(l)];
        let (w, b) = s.split_at(o * i);
        (w, self.bias.then_some(b))
    }

    fn activates(&self, l: usize) -> bool {
        self.residual || l + 1 < self.layers()
    }

    /// Activations `a_0 = x, …, a_L` and the per-layer `tanh` outputs.
    fn forward_trace(&self, theta: &ParamVector, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut tanhs = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (w, b) = self.weights(theta, l);
            let a = &acts[l];
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let mut z: Vec<f64> = (0..o).map(|r| (0..i).map(|c| w[r * i + c] * a[c]).sum::<f64>()).collect();
            if let Some(b) = b {
                for (zr, br) in z.iter_mut().zip(b) {
                    *zr += br;
                }
            }
            let next = if self.activates(l) {
                let t: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
                let next = if self.residual { a.iter().zip(&t).map(|(a, t)| a + t).collect() } else { t.clone() };
                tanhs.push(t);
                next
            } else {
                tanhs.push(Vec::new());
                z
            };
            acts.push(next);
        }
        (acts, tanhs)
    }

    pub fn forward(&self, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check(theta, x)?;
        Ok(self.forward_trace(theta, x).0.pop().unwrap())
    }

    /// Model prediction: the probability for cross-entropy, the raw output otherwise.
    pub fn predict(&self, theta: &ParamVector, x: &[f64]) -> Result<f64> {
        let o = self.forward(theta, x)?[0];
        Ok(match self.loss {
            Loss::CrossEntropy => sigmoid(o),
            Loss::Squared => o,
        })
    }

    fn point_loss(&self, o: f64, y: f64) -> (f64, f64) {
        match self.loss {
            // log(1 + e^o) − y o, written to stay finite for large |o|.
            Loss::CrossEntropy => (o.max(0.0) + (-o.abs()).exp().ln_1p() - y * o, sigmoid(o) - y),
            Loss::Squared => (0.5 * (o - y) * (o - y), o - y),
        }
    }

    /// Loss of one point, without the ridge term.
    pub fn net_loss(&self, theta: &ParamVector, x: &[f64], y: f64) -> Result<f64> {
        let o = self.forward(theta, x)?[0];
        Ok(self.point_loss(o, y).0)
    }

    /// Loss of one point and its exact parameter gradient (no ridge term).
    pub fn net_grad(&self, theta: &ParamVector, x: &[f64], y: f64) -> Result<(f64, ParamVector)> {
        self.check(theta, x)?;
        let (acts, tanhs) = self.forward_trace(theta, x);
        let (loss, dl) = self.point_loss(acts[self.layers()][0], y);
        let mut grad = DVector::zeros(self.param_count());
        let mut da = vec![0.0; self.output_dim()];
        da[0] = dl;
        for l in (0..self.layers()).rev() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let dz: Vec<f64> = if self.activates(l) { da.iter().zip(&tanhs[l]).map(|(d, t)| d * (1.0 - t * t)).collect() } else { da.clone() };
            let r = self.layer_range(l);
            let a = &acts[l];
            for row in 0..o {
                for c in 0..i {
                    grad[r.start + row * i + c] = dz[row] * a[c];
                }
                if self.bias {
                    grad[r.start + o * i + row] = dz[row];
                }
            }
            let (w, _) = self.weights(theta, l);
            let mut prev = if self.residual { da.clone() } else { vec![0.0; i] };
            for row in 0..o {
                for c in 0..i {
                    prev[c] += w[row * i + c] * dz[row];
                }
            }
            da = prev;
        }
        Ok((loss, grad))
    }

    /// Input-output Jacobian `∂f/∂x` (d_out × d_in) by forward differentiation.
    pub fn input_jacobian(&self, theta: &ParamVector, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(theta, x)?;
        let (_, tanhs) = self.forward_trace(theta, x);
        let mut jac = DMatrix::<f64>::identity(self.input_dim(), self.input_dim());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let (w, _) = self.weights(theta, l);
            let w = DMatrix::from_row_slice(o, i, w);
            let mut step = w * &jac;
            if self.activates(l) {
                for (r, t) in tanhs[l].iter().enumerate() {
                    step.row_mut(r).scale_mut(1.0 - t * t);
                }
            }
            jac = if self.residual { jac + step } else { step };
        }
        Ok(jac)
    }
}

fn sigmoid(o: f64) -> f64 {
    if o >= 0.0 {
        1.0 / (1.0 + (-o).exp())
    } else {
        let e = o.exp();
        e / (1.0 + e)
    }
}

/// Feature vectors with scalar labels and non-negative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LabeledDataset {
    /// Uniform weights `1/n`.
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let n = features.len();
        Self::with_weights(features, labels, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_weights(features: Vec<Vec<f64>>, labels: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(GeoError::InvalidInput(format!("dataset needs at least 2 points, got {n}")));
        }
        if labels.len() != n || weights.len() != n {
            return Err(GeoError::InvalidInput("features, labels and weights differ in length".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(GeoError::InvalidInput("ragged feature rows".into()));
        }
        if features.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidInput("non-finite feature or label".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|&w| w == 0.0) {
            return Err(GeoError::InvalidInput("weights must be finite, non-negative and not all zero".into()));
        }
        Ok(Self { features, labels, weights })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Same points with point `i`'s weight set to zero.
    pub fn without(&self, i: usize) -> Result<Self> {
        let mut w = self.weights.clone();
        w[i] = 0.0;
        Self::with_weights(self.features.clone(), self.labels.clone(), w)
    }

    fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.is_empty() {
            return Err(GeoError::InvalidInput("empty dataset".into()));
        }
        if self.dim() != spec.input_dim() {
            return Err(GeoError::InvalidInput(format!("dataset has {} features, network expects {}", self.dim(), spec.input_dim())));
        }
        Ok(())
    }
}

/// Weighted data loss plus ridge.
pub fn objective(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<f64> {
    data.check(spec)?;
    let mut total = 0.5 * spec.l2 * theta.norm_squared();
    for ((x, &y), &w) in data.features.iter().zip(&data.labels).zip(&data.weights) {
        if w != 0.0 {
            total += w * spec.net_loss(theta, x, y)?;
        }
    }
    Ok(total)
}

pub fn objective_grad(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    data.check(spec)?;
    let mut total = 0.5 * spec.l2 * theta.norm_squared();
    let mut grad = theta * spec.l2;
    for ((x, &y), &w) in data.features.iter().zip(&data.labels).zip(&data.weights) {
        if w != 0.0 {
            let (l, g) = spec.net_grad(theta, x, y)?;
            total += w * l;
            grad.axpy(w, &g, 1.0);
        }
    }
    Ok((total, grad))
}

/// Per-point loss gradients (no ridge), one column per point.
pub fn point_gradients(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<DMatrix<f64>> {
    data.check(spec)?;
    let mut g = DMatrix::zeros(spec.param_count(), data.len());
    for (i, (x, &y)) in data.features.iter().zip(&data.labels).enumerate() {
        g.set_column(i, &spec.net_grad(theta, x, y)?.1);
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Initial step of the backtracking line search.
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the objective gradient norm drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1.0,
            max_iters: 5000,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub theta: ParamVector,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Full-batch gradient descent with Armijo backtracking from the seeded init.
pub fn train(spec: &NetSpec, data: &LabeledDataset, opts: &TrainOptions) -> Result<TrainResult> {
    train_from(spec, data, spec.init(opts.seed), opts)
}

pub fn train_from(spec: &NetSpec, data: &LabeledDataset, theta0: ParamVector, opts: &TrainOptions) -> Result<TrainResult> {
    spec.validate()?;
    data.check(spec)?;
    let mut theta = theta0;
    let (mut loss, mut grad) = objective_grad(spec, data, &theta)?;
    let mut eta = opts.lr;
    for iter in 0..opts.max_iters {
        if !loss.is_finite() {
            return Err(GeoError::Diverged { iteration: iter });
        }
        let gn = grad.norm();
        if gn < opts.tol {
            return Ok(TrainResult { theta, loss, grad_norm: gn, iterations: iter, converged: true });
        }
        let slope = gn * gn;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &theta - &grad * eta;
            let lt = objective(spec, data, &trial)?;
            if lt.is_finite() && lt <= loss - 1e-4 * eta * slope {
                theta = trial;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            // No representable decrease left: report where we stand.
            break;
        }
        (loss, grad) = objective_grad(spec, data, &theta)?;
        eta *= 2.0;
    }
    if !loss.is_finite() {
        return Err(GeoError::Diverged { iteration: opts.max_iters });
    }
    let gn = grad.norm();
    Ok(TrainResult {
        theta,
        loss,
        grad_norm: gn,
        iterations: opts.max_iters,
        converged: gn < opts.tol,
    })
}

/// Symmetrised central-difference Jacobian of a gradient map.
///
/// Coordinate `j` is perturbed by `1e-4 · max(1, |θ_j|)`.
pub fn fd_hessian<F>(theta: &ParamVector, mut grad: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&ParamVector) -> Result<ParamVector>,
{
    let d = theta.len();
    let mut h = DMatrix::zeros(d, d);
    let mut probe = theta.clone();
    for j in 0..d {
        let step = 1e-4 * theta[j].abs().max(1.0);
        probe[j] = theta[j] + step;
        let gp = grad(&probe)?;
        probe[j] = theta[j] - step;
        let gm = grad(&probe)?;
        probe[j] = theta[j];
        h.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    let h = (&h + h.transpose()) * 0.5;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(GeoError::NonFinite { step: 0 });
    }
    Ok(h)
}

/// Hessian of [`objective`], ridge included.
pub fn hessian(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<DMatrix<f64>> {
    spec.validate()?;
    fd_hessian(theta, |t| Ok(objective_grad(spec, data, t)?.1))
}

/// `Σ_i ε_i ∇ℓ_i ∇ℓ_iᵀ` at `θ` (no ridge).
pub fn fisher_metric(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<DMatrix<f64>> {
    let g = point_gradients(spec, data, theta)?;
    let mut scaled = g.clone();
    for (i, &w) in data.weights.iter().enumerate() {
        scaled.column_mut(i).scale_mut(w);
    }
    let f = &scaled * g.transpose();
    Ok((&f + f.transpose()) * 0.5)
}

pub fn metric_norm(metric: &DMatrix<f64>, theta: &ParamVector) -> f64 {
    (theta.transpose() * metric * theta)[(0, 0)]
}

/// `θᵀ I(θ) θ`.
pub fn fisher_rao_norm(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<f64> {
    Ok(metric_norm(&fisher_metric(spec, data, theta)?, theta).max(0.0))
}

/// Factorisation of `H + δ I` reused across influence queries.
#[derive(Clone, Debug)]
pub struct DampedSolver {
    pub delta: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DampedSolver {
    /// `delta = None` picks `1e-3 · trace(H)/d`.
    pub fn new(h: &DMatrix<f64>, delta: Option<f64>) -> Result<Self> {
        let d = h.nrows();
        let delta = delta.unwrap_or_else(|| 1e-3 * h.trace().abs() / d as f64);
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(GeoError::InvalidInput(format!("damping {delta} must be finite and non-negative")));
        }
        let m = h + DMatrix::identity(d, d) * delta;
        let chol = m.clone().cholesky();
        let lu = m.clone().lu();
        // Pivot spread bounds the condition number from below.
        let spread = match &chol {
            Some(c) => pivot_spread(&c.l_dirty().diagonal()).powi(2),
            None => pivot_spread(&lu.u().diagonal()),
        };
        if !(spread < MAX_CONDITION) {
            return Err(GeoError::SolveFailed { condition: condition_estimate(&m) });
        }
        Ok(Self { delta, chol, lu })
    }

    pub fn solve(&self, rhs: &ParamVector) -> Result<ParamVector> {
        let x = match &self.chol {
            Some(c) => c.solve(rhs),
            None => self.lu.solve(rhs).ok_or(GeoError::SolveFailed { condition: f64::INFINITY })?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::SolveFailed { condition: f64::INFINITY });
        }
        Ok(x)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.chol.is_some()
    }
}

const MAX_CONDITION: f64 = 1e13;

fn pivot_spread(diag: &DVector<f64>) -> f64 {
    let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `−(H + δI)⁻¹ ∇ℓ(z, θ̂)`.
pub fn influence_params_with(solver: &DampedSolver, spec: &NetSpec, theta: &ParamVector, x: &[f64], y: f64) -> Result<ParamVector> {
    let g = spec.net_grad(theta, x, y)?.1;
    Ok(-solver.solve(&g)?)
}

/// `−∇ℓ(z_test)ᵀ (H + δI)⁻¹ ∇ℓ(z)`.
pub fn influence_loss_with(solver: &DampedSolver, spec: &NetSpec, theta: &ParamVector, z: (&[f64], f64), z_test: (&[f64], f64)) -> Result<f64> {
    let gt = spec.net_grad(theta, z_test.0, z_test.1)?.1;
    let v = influence_params_with(solver, spec, theta, z.0, z.1)?;
    Ok(gt.dot(&v))
}

pub fn influence_params(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector, x: &[f64], y: f64, delta: Option<f64>) -> Result<ParamVector> {
    let solver = DampedSolver::new(&hessian(spec, data, theta)?, delta)?;
    influence_params_with(&solver, spec, theta, x, y)
}

pub fn influence_loss(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector, z: (&[f64], f64), z_test: (&[f64], f64), delta: Option<f64>) -> Result<f64> {
    let solver = DampedSolver::new(&hessian(spec, data, theta)?, delta)?;
    influence_loss_with(&solver, spec, theta, z, z_test)
}

#[derive(Clone, Debug)]
pub struct InfluenceReport {
    pub delta: f64,
    /// Parameter influence of every training point, one column each.
    pub params: DMatrix<f64>,
    /// `I_up,loss(z_i, z_i)`.
    pub self_influence: Vec<f64>,
    /// `I_up,loss(z_i, z_test_j)`, training points by rows.
    pub loss: DMatrix<f64>,
}

pub fn influence_report(spec: &NetSpec, train: &LabeledDataset, theta: &ParamVector, test: &LabeledDataset, delta: Option<f64>) -> Result<InfluenceReport> {
    test.check(spec)?;
    let solver = DampedSolver::new(&hessian(spec, train, theta)?, delta)?;
    let g = point_gradients(spec, train, theta)?;
    let gt = point_gradients(spec, test, theta)?;
    let mut params = DMatrix::zeros(g.nrows(), g.ncols());
    for i in 0..g.ncols() {
        params.set_column(i, &-solver.solve(&g.column(i).into_owned())?);
    }
    let self_influence = (0..g.ncols()).map(|i| g.column(i).dot(&params.column(i))).collect();
    let loss = params.transpose() * gt;
    Ok(InfluenceReport {
        delta: solver.delta,
        params,
        self_influence,
        loss,
    })
}

/// Minimiser of the objective with point `i` removed, by damped Newton from
/// `theta` until the gradient norm is below `tol`.
pub fn loo_retrain(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector, i: usize, tol: f64) -> Result<ParamVector> {
    if i >= data.len() {
        return Err(GeoError::InvalidInput(format!("point {i} out of range")));
    }
    newton_minimise(spec, &data.without(i)?, theta.clone(), tol, 100)
}

fn newton_minimise(spec: &NetSpec, data: &LabeledDataset, mut theta: ParamVector, tol: f64, max_iters: usize) -> Result<ParamVector> {
    let (mut loss, mut grad) = objective_grad(spec, data, &theta)?;
    for iter in 0..max_iters {
        if grad.norm() < tol {
            return Ok(theta);
        }
        let h = hessian(spec, data, &theta)?;
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone(),
        };
        let mut eta = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &theta - &step * eta;
            let (lt, gt) = objective_grad(spec, data, &trial)?;
            // Near the optimum the loss stops resolving; the gradient still does.
            if lt < loss || (lt <= loss + 1e-14 * loss.abs() && gt.norm() < grad.norm()) {
                theta = trial;
                (loss, grad) = (lt, gt);
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            return Err(GeoError::NotConverged { iterations: iter, residual: grad.norm() });
        }
    }
    if grad.norm() < tol {
        Ok(theta)
    } else {
        Err(GeoError::NotConverged { iterations: max_iters, residual: grad.norm() })
    }
}

#[derive(Clone, Debug)]
pub struct ReweightOptions {
    pub outer_iters: usize,
    pub inner_lr: f64,
    pub seed: u64,
}

impl Default for ReweightOptions {
    fn default() -> Self {
        Self {
            outer_iters: 50,
            inner_lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReweightResult {
    pub theta: ParamVector,
    pub weights: Vec<f64>,
    /// Validation loss after every outer iteration.
    pub valid_loss: Vec<f64>,
}

/// Two-level descent: one weighted gradient step on θ, then every training
/// weight is set to its clipped alignment `max(0, ⟨∇ℓ_i, ∇L_valid⟩)` and the
/// weights are normalised to sum to one (uniform if all clip to zero).
pub fn reweight_train(spec: &NetSpec, train: &LabeledDataset, valid: &LabeledDataset, opts: &ReweightOptions) -> Result<ReweightResult> {
    spec.validate()?;
    train.check(spec)?;
    valid.check(spec)?;
    let n = train.len();
    let mut data = train.clone();
    data.weights = vec![1.0 / n as f64; n];
    let mut theta = spec.init(opts.seed);
    let mut valid_loss = Vec::with_capacity(opts.outer_iters);
    for iter in 0..opts.outer_iters {
        let (_, g) = objective_grad(spec, &data, &theta)?;
        theta.axpy(-opts.inner_lr, &g, 1.0);
        let (lv, gv) = objective_grad(&NetSpec { l2: 0.0, ..spec.clone() }, valid, &theta)?;
        if !lv.is_finite() {
            return Err(GeoError::Diverged { iteration: iter });
        }
        let per = point_gradients(spec, &data, &theta)?;
        let mut w: Vec<f64> = (0..n).map(|i| per.column(i).dot(&gv).max(0.0)).collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 && s.is_finite() {
            w.iter_mut().for_each(|v| *v /= s);
        } else {
            w = vec![1.0 / n as f64; n];
        }
        data.weights = w;
        valid_loss.push(lv);
    }
    Ok(ReweightResult {
        theta,
        weights: data.weights,
        valid_loss,
    })
}

/// Mean of `θ_lᵀ M θ_l` over residual blocks, `θ_l` being block `l`'s
/// parameters zero-padded to the full length.
pub fn curve_complexity_with(spec: &NetSpec, metric: &DMatrix<f64>, theta: &ParamVector) -> Result<f64> {
    if !spec.residual {
        return Err(GeoError::InvalidInput("curve complexity needs a residual network".into()));
    }
    let blocks = spec.layers();
    let mut total = 0.0;
    for l in 0..blocks {
        let mut padded = DVector::zeros(theta.len());
        let r = spec.layer_range(l);
        padded.rows_mut(r.start, r.len()).copy_from(&theta.rows(r.start, r.len()));
        total += metric_norm(metric, &padded);
    }
    Ok(total / blocks as f64)
}

/// Curve length of the residual flow under the Fisher metric at `theta`.
pub fn curve_complexity(spec: &NetSpec, data: &LabeledDataset, theta: &ParamVector) -> Result<f64> {
    if !spec.residual {
        return Err(GeoError::InvalidInput("curve complexity needs a residual network".into()));
    }
    curve_complexity_with(spec, &fisher_metric(spec, data, theta)?, theta)
}

/// Singular values of the input-output Jacobian at `x`, descending.
pub fn dynamic_isometry(spec: &NetSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let jac = spec.input_jacobian(theta, x)?;
    let mut sv: Vec<f64> = jac.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Largest over smallest singular value.
pub fn condition_number(sv: &[f64]) -> f64 {
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_1d() -> (NetSpec, LabeledDataset) {
        let spec = NetSpec::new(vec![1, 1], Loss::CrossEntropy).unwrap().without_bias();
        let data = LabeledDataset::new(vec![vec![-1.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        (spec, data)
    }

    fn quadratic_toy() -> (NetSpec, LabeledDataset) {
        let spec = NetSpec::new(vec![1, 1], Loss::Squared).unwrap().without_bias();
        let data = LabeledDataset::new(vec![vec![1.0]; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        (spec, data)
    }

    #[test]
    fn layout_and_counts() {
        let s = NetSpec::new(vec![3, 4, 2], Loss::Squared).unwrap();
        assert_eq!(s.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(s.layer_range(1), 16..26);
        assert!(NetSpec::new(vec![3], Loss::Squared).is_err());
        assert!(NetSpec::residual(40, 2, Loss::Squared).is_err());
        assert!(NetSpec { residual: true, ..s.clone() }.validate().is_err());
    }

    #[test]
    fn trivial_linear_model_at_zero_costs_ln2() {
        let spec = NetSpec::new(vec![2, 1], Loss::CrossEntropy).unwrap();
        let theta = DVector::zeros(spec.param_count());
        for y in [0.0, 1.0] {
            let l = spec.net_loss(&theta, &[0.3, -1.2], y).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_squared_prediction_has_zero_loss_and_gradient() {
        let spec = NetSpec::new(vec![2, 3, 1], Loss::Squared).unwrap();
        let theta = spec.init(4);
        let x = [0.4, -0.7];
        let y = spec.forward(&theta, &x).unwrap()[0];
        let (l, g) = spec.net_grad(&theta, &x, y).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn rejects_mismatched_input() {
        let spec = NetSpec::new(vec![2, 1], Loss::Squared).unwrap();
        assert!(spec.net_loss(&spec.init(0), &[1.0], 0.0).is_err());
        assert!(spec.net_loss(&DVector::zeros(2), &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(LabeledDataset::new(vec![vec![1.0]], vec![0.0]).is_err());
        assert!(LabeledDataset::new(vec![vec![1.0], vec![f64::NAN]], vec![0.0, 1.0]).is_err());
        assert!(LabeledDataset::with_weights(vec![vec![1.0], vec![2.0]], vec![0.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(LabeledDataset::with_weights(vec![vec![1.0], vec![2.0]], vec![0.0, 1.0], vec![-1.0, 2.0]).is_err());
    }

    #[test]
    fn one_dimensional_logistic_matches_bisection() {
        let (spec, data) = logistic_1d();
        let spec = spec.with_l2(0.1);
        let r = train(&spec, &data, &TrainOptions { tol: 1e-10, ..Default::default() }).unwrap();
        assert!(r.converged);
        // Stationarity of log(1 + e^-θ) + 0.05 θ²: 0.1 θ = σ(−θ).
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 0.1 * mid - 1.0 / (1.0 + mid.exp()) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(r.theta[0] > 0.0);
        assert!((r.theta[0] - lo).abs() < 1e-8, "{} vs {lo}", r.theta[0]);
        let data_loss = objective(&spec.clone().with_l2(0.0), &data, &r.theta).unwrap();
        assert!(data_loss < 0.4);
    }

    #[test]
    fn equal_targets_give_a_constant_predictor() {
        let spec = NetSpec::new(vec![2, 1], Loss::Squared).unwrap();
        let data = LabeledDataset::new(vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![2.0, 0.5]], vec![0.7; 3]).unwrap();
        let opts = TrainOptions { tol: 1e-8, ..Default::default() };
        let r = train(&spec, &data, &opts).unwrap();
        assert!(r.converged && r.grad_norm <= opts.tol);
        for x in &data.features {
            assert!((spec.predict(&r.theta, x).unwrap() - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_of_half_square_norm_is_identity() {
        let theta = DVector::from_vec(vec![0.3, -2.0, 5.0]);
        let h = fd_hessian(&theta, |t| Ok(t.clone())).unwrap();
        assert!((h - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn logistic_hessian_matches_analytic() {
        let spec = NetSpec::new(vec![2, 1], Loss::CrossEntropy).unwrap().without_bias();
        let xs = vec![vec![0.5, -1.0], vec![1.5, 0.2], vec![-0.3, 0.8], vec![1.0, 1.0]];
        let data = LabeledDataset::new(xs.clone(), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let theta = DVector::from_vec(vec![0.4, -0.9]);
        let h = hessian(&spec, &data, &theta).unwrap();
        let mut exact = DMatrix::zeros(2, 2);
        for x in &xs {
            let x = DVector::from_column_slice(x);
            let s = sigmoid(theta.dot(&x));
            exact += &x * x.transpose() * (s * (1.0 - s) / 4.0);
        }
        assert!((&h - &exact).amax() < 1e-4);
        assert_eq!((&h - h.transpose()).amax(), 0.0);
    }

    #[test]
    fn fisher_of_one_point_is_rank_one() {
        let spec = NetSpec::new(vec![2, 3, 1], Loss::CrossEntropy).unwrap();
        let data = LabeledDataset::with_weights(vec![vec![0.1, 0.2], vec![1.0, -1.0]], vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let f = fisher_metric(&spec, &data, &spec.init(1)).unwrap();
        let sv = f.singular_values();
        let top = sv.max();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-12 * top).count(), 1);
    }

    #[test]
    fn fisher_rao_norm_is_a_direct_sum() {
        let spec = NetSpec::new(vec![2, 3, 1], Loss::CrossEntropy).unwrap();
        let data = LabeledDataset::new(vec![vec![0.1, 0.2], vec![1.0, -1.0], vec![-0.5, 0.3]], vec![1.0, 0.0, 1.0]).unwrap();
        let theta = spec.init(7);
        let direct: f64 = (0..3)
            .map(|i| {
                let g = spec.net_grad(&theta, &data.features[i], data.labels[i]).unwrap().1;
                data.weights[i] * g.dot(&theta).powi(2)
            })
            .sum();
        let n = fisher_rao_norm(&spec, &data, &theta).unwrap();
        assert!((n - direct).abs() < 1e-8 * direct.max(1.0));
        assert_eq!(fisher_rao_norm(&spec, &data, &DVector::zeros(spec.param_count())).unwrap(), 0.0);
        let m = fisher_metric(&spec, &data, &theta).unwrap();
        let c = 2.5;
        assert!((metric_norm(&m, &(&theta * c)) - c * c * metric_norm(&m, &theta)).abs() < 1e-12 * n.max(1.0));
    }

    #[test]
    fn quadratic_toy_influence_is_closed_form() {
        let (spec, data) = quadratic_toy();
        let theta = DVector::from_vec(vec![3.0]);
        let ip = influence_params(&spec, &data, &theta, &[1.0], 5.0, Some(0.0)).unwrap();
        assert!((ip[0] - 2.0).abs() < 1e-8);
        let il = influence_loss(&spec, &data, &theta, (&[1.0], 5.0), (&[1.0], 4.0), Some(0.0)).unwrap();
        assert!((il + 2.0).abs() < 1e-8);
        let zero = influence_params(&spec, &data, &theta, &[1.0], 3.0, Some(0.0)).unwrap();
        assert_eq!(zero[0], 0.0);
        let loo = loo_retrain(&spec, &data, &theta, 4, 1e-10).unwrap();
        assert!((loo[0] - 2.5).abs() < 1e-10);
    }

    #[test]
    fn default_damping_scales_with_trace() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let s = DampedSolver::new(&h, None).unwrap();
        assert!((s.delta - 3e-3).abs() < 1e-15);
        assert!(DampedSolver::new(&DMatrix::zeros(2, 2), Some(0.0)).is_err());
    }

    #[test]
    fn removing_a_duplicate_keeps_the_optimum() {
        let spec = NetSpec::new(vec![1, 1], Loss::CrossEntropy).unwrap().with_l2(0.1);
        let data = LabeledDataset::with_weights(vec![vec![-1.0], vec![0.5], vec![1.0], vec![1.0]], vec![0.0, 0.0, 1.0, 1.0], vec![0.25, 0.25, 0.25, 0.0]).unwrap();
        let full = train(&spec, &data, &TrainOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let loo = loo_retrain(&spec, &data, &full.theta, 3, 1e-10).unwrap();
        assert!((&loo - &full.theta).amax() < 1e-8);
    }

    #[test]
    fn curve_complexity_definitions() {
        let one = NetSpec::residual(2, 1, Loss::Squared).unwrap();
        let data = LabeledDataset::new(vec![vec![0.2, 0.4], vec![-1.0, 0.3], vec![0.7, -0.1]], vec![0.5, -0.2, 0.1]).unwrap();
        let theta = one.init(3);
        let c = curve_complexity(&one, &data, &theta).unwrap();
        assert!((c - fisher_rao_norm(&one, &data, &theta).unwrap()).abs() < 1e-14 * c.max(1.0));
        assert_eq!(curve_complexity(&one, &data, &DVector::zeros(one.param_count())).unwrap(), 0.0);
        assert!(curve_complexity(&NetSpec::new(vec![2, 1], Loss::Squared).unwrap(), &data, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn identity_and_orthogonal_networks_are_isometric() {
        let res = NetSpec::residual(3, 4, Loss::Squared).unwrap();
        let sv = dynamic_isometry(&res, &DVector::zeros(res.param_count()), &[0.3, -1.0, 2.0]).unwrap();
        assert!(sv.iter().all(|s| (s - 1.0).abs() < 1e-14));
        let lin = NetSpec::new(vec![2, 2], Loss::Squared).unwrap();
        let (c, s) = (0.6f64, 0.8f64);
        let theta = DVector::from_vec(vec![c, -s, s, c, 0.1, -0.2]);
        let sv = dynamic_isometry(&lin, &theta, &[1.0, 1.0]).unwrap();
        assert!(sv.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }
}
