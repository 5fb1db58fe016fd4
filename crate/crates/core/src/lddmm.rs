//! LDDMM registration: energy, adjoint state, Sobolev gradient, descent loop
//! and the optimality-condition residual.
//!
//! The energy of a velocity path sampled at `t_k = k/Nt` is
//!
//! ```text
//! E(u) = ½ Σ_k w_k ⟨L u_k, u_k⟩ + β ‖I1 − J_1‖²,    J_1 = I0 ∘ φ_{1,0}
//! ```
//!
//! with trapezoid weights `w_k`. The gradient returned by [`energy_gradient`]
//! is the exact derivative of this discrete energy (the RK4 characteristics
//! and the bilinear sampling are differentiated in reverse), expressed in the
//! `⟨L·,·⟩` metric: `dE[δu] = Σ_k w_k ⟨L g_k, δu_k⟩`. Its matching part is the
//! discrete counterpart of `K(λ_t ∇J_t)`, where `λ` is the density returned
//! by [`adjoint_state`].

use crate::fields::{check_path_grid, trapezoid_weights, zero_velocity_path, DeformationMap, ScalarField, TimePath, VectorField};
use crate::kernel::SobolevKernel;
use crate::optim::{armijo_descent, DescentOptions, EnergyValue};
use crate::transport::{self, advect_final, integrate_flow, midpoints, rk4_step_reverse, Pos, VelocityAdjoint};
use crate::{GeoError, Real, Result};

#[derive(Clone, Debug)]
pub struct RegistrationProblem<T: Real> {
    pub source: ScalarField<T>,
    pub target: ScalarField<T>,
    pub beta: T,
    pub kernel: SobolevKernel<T>,
    pub steps: usize,
    pub max_iters: usize,
    /// Relative energy decrease below which the descent stops.
    pub tol: f64,
}

impl<T: Real> RegistrationProblem<T> {
    pub fn new(source: ScalarField<T>, target: ScalarField<T>, beta: T, kernel: SobolevKernel<T>, steps: usize) -> Result<Self> {
        let p = Self {
            source,
            target,
            beta,
            kernel,
            steps,
            max_iters: 200,
            tol: 1e-6,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || !self.beta.is_finite() {
            return Err(GeoError::InvalidInput(format!("beta must be positive, got {}", self.beta)));
        }
        if self.steps < 1 {
            return Err(GeoError::InvalidInput("need at least one time step".into()));
        }
        self.source.grid().check_same(self.target.grid())?;
        self.source.grid().check_same(self.kernel.grid())?;
        Ok(())
    }

    fn check_path(&self, u_path: &TimePath<VectorField<T>>) -> Result<()> {
        check_path_grid(self.source.grid(), u_path)?;
        self.source.grid().check_same(self.target.grid())
    }

    pub fn zero_path(&self) -> Result<TimePath<VectorField<T>>> {
        zero_velocity_path(self.source.grid(), self.steps)
    }
}

/// Energy split into its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Energy<T> {
    pub kinetic: T,
    pub matching: T,
    pub total: T,
}

impl<T: Real> EnergyValue for Energy<T> {
    fn total(&self) -> f64 {
        self.total.to_f64_lossy()
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationResult<T: Real> {
    pub u_path: TimePath<VectorField<T>>,
    /// Forward maps `φ_{0,t_k}`.
    pub phi_path: TimePath<DeformationMap<T>>,
    pub energy_trace: Vec<Energy<T>>,
    pub ep_residual: T,
    pub converged: bool,
    pub iterations: usize,
}

/// `½ Σ_k w_k ⟨L u_k, u_k⟩`.
pub fn kinetic_energy<T: Real>(kernel: &SobolevKernel<T>, u_path: &TimePath<VectorField<T>>) -> Result<T> {
    let w = trapezoid_weights::<T>(u_path.steps());
    let mut acc = T::zero();
    for (u, &wk) in u_path.iter().zip(&w) {
        acc = acc + wk * kernel.metric_norm_sq(u)?;
    }
    Ok(acc * T::lit(0.5))
}

/// Forward state of the matching term: the transported image at `t = 1` and
/// the node trajectories traced back from `t = 1`.
pub(crate) struct MatchForward<T> {
    pub j1: ScalarField<T>,
    pub traj: Vec<Vec<Pos<T>>>,
}

/// `J_1(x) = I0(X_0(x)) + Σ_k w_k z_k(X_k(x))` along the characteristic through
/// `(x, 1)`; without a source this is plain advection.
pub(crate) fn match_forward<T: Real>(
    source: &ScalarField<T>,
    u_path: &TimePath<VectorField<T>>,
    mids: &[VectorField<T>],
    z_path: Option<&TimePath<ScalarField<T>>>,
) -> Result<MatchForward<T>> {
    let (mut j1, traj) = advect_final(source, u_path, mids)?;
    if let Some(z) = z_path {
        let w = trapezoid_weights::<T>(u_path.steps());
        let vals = j1.values_mut();
        for (k, zk) in z.iter().enumerate() {
            for (i, v) in vals.iter_mut().enumerate() {
                *v = *v + w[k] * zk.sample_at(traj[k][i]);
            }
        }
    }
    Ok(MatchForward { j1, traj })
}

/// Reverse sweep of [`match_forward`]. `j1_bar` is the adjoint of `J_1` per
/// node; returns the raw (Euclidean, per node) adjoints of every velocity
/// sample and, with a source, of every source sample.
pub(crate) fn match_reverse<T: Real>(
    source: &ScalarField<T>,
    u_path: &TimePath<VectorField<T>>,
    mids: &[VectorField<T>],
    z_path: Option<&TimePath<ScalarField<T>>>,
    fwd: &MatchForward<T>,
    j1_bar: &[T],
) -> (Vec<VectorField<T>>, Option<Vec<Vec<T>>>) {
    let grid = source.grid();
    let steps = u_path.steps();
    let dt = T::one() / T::from_usize_lossy(steps);
    let w = trapezoid_weights::<T>(steps);
    let mut u_bar: Vec<VectorField<T>> = vec![VectorField::zeros(grid); steps + 1];
    let mut m_bar: Vec<VectorField<T>> = vec![VectorField::zeros(grid); steps];
    let mut z_bar: Option<Vec<Vec<T>>> = z_path.map(|_| vec![vec![T::zero(); grid.len()]; steps + 1]);

    let mut add_source = |k: usize, p: Pos<T>, a: T, xbar: &mut Pos<T>| {
        if let (Some(z), Some(zb)) = (z_path, z_bar.as_mut()) {
            let st = grid.stencil(p);
            let c = a * w[k];
            st.scatter(&mut zb[k], c);
            let g = st.grad(z[k].values());
            xbar[0] = xbar[0] + c * g[0];
            xbar[1] = xbar[1] + c * g[1];
        }
    };

    for i in 0..grid.len() {
        let a = j1_bar[i];
        if a == T::zero() {
            continue;
        }
        let p0 = fwd.traj[0][i];
        let g = grid.stencil(p0).grad(source.values());
        let mut xbar = [a * g[0], a * g[1]];
        add_source(0, p0, a, &mut xbar);
        for j in 0..steps {
            let (lo, hi) = u_bar.split_at_mut(j + 1);
            let mut acc = VelocityAdjoint {
                ua: &mut hi[0],
                um: &mut m_bar[j],
                ub: &mut lo[j],
            };
            xbar = rk4_step_reverse(fwd.traj[j + 1][i], &u_path[j + 1], &mids[j], &u_path[j], -dt, xbar, &mut acc);
            add_source(j + 1, fwd.traj[j + 1][i], a, &mut xbar);
        }
    }
    let half = T::lit(0.5);
    for (j, m) in m_bar.iter().enumerate() {
        u_bar[j].axpy(half, m);
        u_bar[j + 1].axpy(half, m);
    }
    (u_bar, z_bar)
}

fn matching_term<T: Real>(target: &ScalarField<T>, j1: &ScalarField<T>, beta: T) -> Result<T> {
    Ok(beta * target.sub(j1)?.norm_sq())
}

/// Energy split into kinetic and matching terms.
pub fn energy_parts<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<Energy<T>> {
    problem.check_path(u_path)?;
    let kinetic = kinetic_energy(&problem.kernel, u_path)?;
    let mids = midpoints(u_path);
    let fwd = match_forward(&problem.source, u_path, &mids, None)?;
    let matching = matching_term(&problem.target, &fwd.j1, problem.beta)?;
    Ok(Energy {
        kinetic,
        matching,
        total: kinetic + matching,
    })
}

/// `E = ½ Σ_k w_k ⟨L u_k, u_k⟩ + β ‖I1 − J_1‖²`.
pub fn energy<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<T> {
    Ok(energy_parts(problem, u_path)?.total)
}

/// Terminal adjoint density `λ_1 = 2β (I1 − J_1)`, the negated `L²` derivative
/// of the matching term with respect to `J_1`.
pub fn terminal_adjoint<T: Real>(problem: &RegistrationProblem<T>, j1: &ScalarField<T>) -> Result<ScalarField<T>> {
    let c = T::lit(2.0) * problem.beta;
    problem.target.zip_map(j1, |i1, j| c * (i1 - j))
}

/// The adjoint density `λ_t`, transported backward from `λ_1` by the continuity equation.
pub fn adjoint_state<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<TimePath<ScalarField<T>>> {
    problem.check_path(u_path)?;
    let mids = midpoints(u_path);
    let fwd = match_forward(&problem.source, u_path, &mids, None)?;
    let lambda1 = terminal_adjoint(problem, &fwd.j1)?;
    transport::continuity(&lambda1, u_path)
}

/// Momentum forces `F_k = ū_k / (w_k · cellVolume)` from raw per-node adjoints:
/// the discrete counterpart of `λ_t ∇J_t`, so that `dE_match[δu] = Σ_k w_k ⟨F_k, δu_k⟩`.
pub(crate) fn forces_from_raw<T: Real>(raw: Vec<VectorField<T>>) -> Vec<VectorField<T>> {
    let steps = raw.len() - 1;
    let w = trapezoid_weights::<T>(steps);
    let cv = raw[0].grid().cell_volume();
    raw.into_iter().enumerate().map(|(k, r)| r.scale(T::one() / (w[k] * cv))).collect()
}

/// `g_k = u_k + K F_k`.
pub(crate) fn sobolev_gradient<T: Real>(
    kernel: &SobolevKernel<T>,
    u_path: &TimePath<VectorField<T>>,
    forces: &[VectorField<T>],
) -> Result<TimePath<VectorField<T>>> {
    let mut out = Vec::with_capacity(forces.len());
    for (f, u) in forces.iter().zip(u_path.iter()) {
        let mut g = kernel.apply_k(f)?;
        g.axpy(T::one(), u);
        out.push(g);
    }
    TimePath::new(out)
}

/// Squared norm of a velocity path in the time-integrated `⟨L·,·⟩` metric.
pub(crate) fn path_metric_sq<T: Real>(kernel: &SobolevKernel<T>, g: &TimePath<VectorField<T>>) -> Result<T> {
    let w = trapezoid_weights::<T>(g.steps());
    let mut s = T::zero();
    for (gk, &wk) in g.iter().zip(&w) {
        s = s + wk * kernel.metric_norm_sq(gk)?;
    }
    Ok(s)
}

/// Discrete momentum forces `F_t ≈ λ_t ∇J_t` of the matching term, obtained
/// by the exact reverse sweep through the characteristics.
pub fn matching_forces<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<Vec<VectorField<T>>> {
    problem.check_path(u_path)?;
    let mids = midpoints(u_path);
    let fwd = match_forward(&problem.source, u_path, &mids, None)?;
    let c = T::lit(-2.0) * problem.beta * problem.source.grid().cell_volume();
    let j1_bar: Vec<T> = problem
        .target
        .values()
        .iter()
        .zip(fwd.j1.values())
        .map(|(&i1, &j)| c * (i1 - j))
        .collect();
    let (raw, _) = match_reverse(&problem.source, u_path, &mids, None, &fwd, &j1_bar);
    Ok(forces_from_raw(raw))
}

/// Sobolev gradient of [`energy`]: `dE[δu] = Σ_k w_k ⟨L g_k, δu_k⟩`.
pub fn energy_gradient<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<TimePath<VectorField<T>>> {
    let forces = matching_forces(problem, u_path)?;
    sobolev_gradient(&problem.kernel, u_path, &forces)
}

/// `Σ_k w_k ⟨L g_k, δu_k⟩`, the directional derivative predicted by a Sobolev gradient.
pub fn directional_derivative<T: Real>(
    kernel: &SobolevKernel<T>,
    gradient: &TimePath<VectorField<T>>,
    direction: &TimePath<VectorField<T>>,
) -> Result<T> {
    let w = trapezoid_weights::<T>(gradient.steps());
    let mut s = T::zero();
    for k in 0..=gradient.steps() {
        s = s + w[k] * kernel.metric_inner(&gradient[k], &direction[k])?;
    }
    Ok(s)
}

pub(crate) fn path_axpy<T: Real>(u: &TimePath<VectorField<T>>, c: T, g: &TimePath<VectorField<T>>) -> TimePath<VectorField<T>> {
    let out = u
        .iter()
        .zip(g.iter())
        .map(|(a, b)| {
            let mut out = a.clone();
            out.axpy(c, b);
            out
        })
        .collect::<Vec<_>>();
    TimePath::new(out).expect("non-empty path")
}

pub(crate) fn descent_options(max_iters: usize, tol: f64) -> DescentOptions {
    DescentOptions {
        max_iters,
        tol,
        ..Default::default()
    }
}

/// Sobolev gradient descent from the identity path `u ≡ 0`.
pub fn register<T: Real>(problem: &RegistrationProblem<T>) -> Result<RegistrationResult<T>> {
    problem.validate()?;
    register_from(problem, problem.zero_path()?)
}

/// Like [`register`], starting from a given velocity path.
pub fn register_from<T: Real>(problem: &RegistrationProblem<T>, u_init: TimePath<VectorField<T>>) -> Result<RegistrationResult<T>> {
    problem.validate()?;
    problem.check_path(&u_init)?;
    if u_init.steps() != problem.steps {
        return Err(GeoError::InvalidInput("initial path has the wrong number of steps".into()));
    }
    let opts = descent_options(problem.max_iters, problem.tol);
    let kernel = &problem.kernel;
    let (u_path, trace) = armijo_descent(
        u_init,
        &opts,
        |u| energy_parts(problem, u),
        |u| {
            let g = energy_gradient(problem, u)?;
            let slope = path_metric_sq(kernel, &g)?.to_f64_lossy();
            Ok((g, slope))
        },
        |u, g, eta| path_axpy(u, -T::lit(eta), g),
    )?;
    let phi_path = integrate_flow(&u_path)?.forward;
    let ep = ep_residual_of_path(problem, &u_path)?;
    Ok(RegistrationResult {
        u_path,
        phi_path,
        energy_trace: trace.energies,
        ep_residual: ep,
        converged: trace.converged,
        iterations: trace.iterations,
    })
}

/// Normalised violation of the optimality condition `L u_t = −λ_t ∇J_t`:
/// `max_t ‖L u_t + F_t‖ / max_t ‖L u_t‖`, or the absolute `max_t ‖F_t‖` when
/// `u ≡ 0`. `F_t` is the discrete momentum force of [`matching_forces`], the
/// realisation of `λ_t ∇J_t` consistent with the implemented transport.
pub fn ep_residual<T: Real>(problem: &RegistrationProblem<T>, result: &RegistrationResult<T>) -> Result<T> {
    ep_residual_of_path(problem, &result.u_path)
}

pub fn ep_residual_of_path<T: Real>(problem: &RegistrationProblem<T>, u_path: &TimePath<VectorField<T>>) -> Result<T> {
    let forces = matching_forces(problem, u_path)?;
    residual_of(&problem.kernel, u_path, &forces)
}

pub(crate) fn residual_of<T: Real>(kernel: &SobolevKernel<T>, u_path: &TimePath<VectorField<T>>, forces: &[VectorField<T>]) -> Result<T> {
    let mut num = T::zero();
    let mut den = T::zero();
    let mut force = T::zero();
    for (u, f) in u_path.iter().zip(forces) {
        let lu = kernel.apply_l(u)?;
        num = num.max(lu.add(f)?.norm_sq().sqrt());
        den = den.max(lu.norm_sq().sqrt());
        force = force.max(f.norm_sq().sqrt());
    }
    Ok(if den > T::zero() { num / den } else { force })
}
