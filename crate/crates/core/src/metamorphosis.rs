//! Metamorphosis: registration by a diffeomorphic flow plus an additive
//! intensity source.
//!
//! The image obeys `J̇_t + ∇J_t · u_t = z_t`, so along a characteristic
//! `J_1(x) = I0(X_0(x)) + ∫ z_t(X_t(x)) dt`, and the energy is
//!
//! ```text
//! E(u, z) = ½ ∫ ⟨L u_t, u_t⟩ dt + 1/(2σ²) ∫ ‖z_t‖² dt + β ‖J_1 − I1‖²
//! ```
//!
//! Both time integrals use the trapezoid rule on the velocity samples. With
//! `z ≡ 0` every quantity here coincides bit for bit with [`crate::lddmm`].

use crate::fields::{check_path_grid, trapezoid_weights, ScalarField, TimePath, VectorField};
use crate::kernel::SobolevKernel;
use crate::lddmm::{descent_options, forces_from_raw, kinetic_energy, match_forward, match_reverse, path_axpy, path_metric_sq, sobolev_gradient};
use crate::optim::{armijo_descent, DescentOptions, EnergyValue};
use crate::transport::{backtrace, midpoints};
use crate::{GeoError, Real, Result};

#[derive(Clone, Debug)]
pub struct MorphProblem<T: Real> {
    pub source: ScalarField<T>,
    pub target: ScalarField<T>,
    pub beta: T,
    /// Variance of the intensity source; small values forbid appearance change.
    pub sigma2: T,
    pub kernel: SobolevKernel<T>,
    pub steps: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Alternate between `u` and `z` steps instead of moving both at once.
    pub alternate: bool,
}

impl<T: Real> MorphProblem<T> {
    pub fn new(source: ScalarField<T>, target: ScalarField<T>, beta: T, sigma2: T, kernel: SobolevKernel<T>, steps: usize) -> Result<Self> {
        let p = Self {
            source,
            target,
            beta,
            sigma2,
            kernel,
            steps,
            max_iters: 200,
            tol: 1e-6,
            alternate: false,
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

    pub fn alternating(mut self, alternate: bool) -> Self {
        self.alternate = alternate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || !self.beta.is_finite() {
            return Err(GeoError::InvalidInput(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.sigma2 > T::zero()) || !self.sigma2.is_finite() {
            return Err(GeoError::InvalidInput(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.steps < 1 {
            return Err(GeoError::InvalidInput("need at least one time step".into()));
        }
        self.source.grid().check_same(self.target.grid())?;
        self.source.grid().check_same(self.kernel.grid())
    }

    fn check_paths(&self, u_path: &TimePath<VectorField<T>>, z_path: &TimePath<ScalarField<T>>) -> Result<()> {
        check_path_grid(self.source.grid(), u_path)?;
        if z_path.steps() != u_path.steps() {
            return Err(GeoError::InvalidInput(format!(
                "source path has {} steps, velocity path has {}",
                z_path.steps(),
                u_path.steps()
            )));
        }
        for z in z_path.iter() {
            z.grid().check_same(self.source.grid())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MorphEnergy<T> {
    pub kinetic: T,
    /// `1/(2σ²) ∫ ‖z_t‖² dt`.
    pub source: T,
    pub matching: T,
    pub total: T,
}

impl<T: Real> EnergyValue for MorphEnergy<T> {
    fn total(&self) -> f64 {
        self.total.to_f64_lossy()
    }
}

#[derive(Clone, Debug)]
pub struct MorphResult<T: Real> {
    pub u_path: TimePath<VectorField<T>>,
    pub z_path: TimePath<ScalarField<T>>,
    /// The image along the metamorphosis, `J_0 = I0`.
    pub j_path: TimePath<ScalarField<T>>,
    pub energy_trace: Vec<MorphEnergy<T>>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn zero_source_path<T: Real>(problem: &MorphProblem<T>) -> Result<TimePath<ScalarField<T>>> {
    TimePath::new(vec![ScalarField::zeros(problem.source.grid()); problem.steps + 1])
}

fn source_penalty<T: Real>(z_path: &TimePath<ScalarField<T>>, sigma2: T) -> T {
    let w = trapezoid_weights::<T>(z_path.steps());
    let s = z_path.iter().zip(&w).fold(T::zero(), |acc, (z, &wk)| acc + wk * z.norm_sq());
    s / (T::lit(2.0) * sigma2)
}

pub fn morph_energy_parts<T: Real>(
    problem: &MorphProblem<T>,
    u_path: &TimePath<VectorField<T>>,
    z_path: &TimePath<ScalarField<T>>,
) -> Result<MorphEnergy<T>> {
    problem.check_paths(u_path, z_path)?;
    let kinetic = kinetic_energy(&problem.kernel, u_path)?;
    let source = source_penalty(z_path, problem.sigma2);
    let mids = midpoints(u_path);
    let fwd = match_forward(&problem.source, u_path, &mids, Some(z_path))?;
    let matching = problem.beta * problem.target.sub(&fwd.j1)?.norm_sq();
    Ok(MorphEnergy {
        kinetic,
        source,
        matching,
        total: kinetic + source + matching,
    })
}

/// `½ ∫ ⟨L u_t, u_t⟩ dt + 1/(2σ²) ∫ ‖z_t‖² dt + β ‖J_1 − I1‖²`.
pub fn morph_energy<T: Real>(
    problem: &MorphProblem<T>,
    u_path: &TimePath<VectorField<T>>,
    z_path: &TimePath<ScalarField<T>>,
) -> Result<T> {
    Ok(morph_energy_parts(problem, u_path, z_path)?.total)
}

/// Weight `c = 1/σ² + 2β` of the metric `c ∫ ⟨·,·⟩ dt` in which the source
/// gradient is taken: the curvature of the energy along sources that are
/// constant in time. The plain `1/σ²` metric makes the source block so stiff
/// for large `σ²` that a joint step can barely move the velocity.
fn source_metric_weight<T: Real>(problem: &MorphProblem<T>) -> T {
    T::one() / problem.sigma2 + T::lit(2.0) * problem.beta
}

/// Natural gradients of [`morph_energy`]: `g_u` in the `⟨L·,·⟩` metric and
/// `g_z` in the metric `c ∫ ⟨·,·⟩ dt` with `c = 1/σ² + 2β`, so that
/// `dE[δu, δz] = Σ_k w_k (⟨L g_u,k, δu_k⟩ + c ⟨g_z,k, δz_k⟩)`.
pub fn morph_gradient<T: Real>(
    problem: &MorphProblem<T>,
    u_path: &TimePath<VectorField<T>>,
    z_path: &TimePath<ScalarField<T>>,
) -> Result<(TimePath<VectorField<T>>, TimePath<ScalarField<T>>)> {
    problem.check_paths(u_path, z_path)?;
    let mids = midpoints(u_path);
    let fwd = match_forward(&problem.source, u_path, &mids, Some(z_path))?;
    let cv = problem.source.grid().cell_volume();
    let c = T::lit(-2.0) * problem.beta * cv;
    let j1_bar: Vec<T> = problem
        .target
        .values()
        .iter()
        .zip(fwd.j1.values())
        .map(|(&i1, &j)| c * (i1 - j))
        .collect();
    let (raw_u, raw_z) = match_reverse(&problem.source, u_path, &mids, Some(z_path), &fwd, &j1_bar);
    let g_u = sobolev_gradient(&problem.kernel, u_path, &forces_from_raw(raw_u))?;
    let w = trapezoid_weights::<T>(u_path.steps());
    let inv_s2 = T::one() / problem.sigma2;
    let inv_c = T::one() / source_metric_weight(problem);
    let raw_z = raw_z.expect("source adjoint requested");
    let g_z = z_path
        .iter()
        .zip(raw_z)
        .enumerate()
        .map(|(k, (z, r))| {
            let s = T::one() / (w[k] * cv);
            let v = z.values().iter().zip(r).map(|(&zv, rv)| inv_c * (inv_s2 * zv + s * rv)).collect();
            ScalarField::new(z.grid().clone(), v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((g_u, TimePath::new(g_z)?))
}

fn source_metric_sq<T: Real>(g: &TimePath<ScalarField<T>>, weight: T) -> T {
    let w = trapezoid_weights::<T>(g.steps());
    g.iter().zip(&w).fold(T::zero(), |acc, (z, &wk)| acc + wk * z.norm_sq()) * weight
}

fn source_axpy<T: Real>(z: &TimePath<ScalarField<T>>, c: T, g: &TimePath<ScalarField<T>>) -> TimePath<ScalarField<T>> {
    let out: Vec<ScalarField<T>> = z
        .iter()
        .zip(g.iter())
        .map(|(a, b)| {
            let mut o = a.clone();
            for (x, &y) in o.values_mut().iter_mut().zip(b.values()) {
                *x = *x + c * y;
            }
            o
        })
        .collect();
    TimePath::new(out).expect("non-empty path")
}

/// The image along the metamorphosis at every time sample.
pub fn morph_images<T: Real>(
    problem: &MorphProblem<T>,
    u_path: &TimePath<VectorField<T>>,
    z_path: &TimePath<ScalarField<T>>,
) -> Result<TimePath<ScalarField<T>>> {
    problem.check_paths(u_path, z_path)?;
    let mids = midpoints(u_path);
    let grid = problem.source.grid();
    let mut out = vec![problem.source.clone()];
    for k in 1..=u_path.steps() {
        let traj = backtrace(u_path, &mids, k)?;
        // trapezoid rule over [0, t_k] on the samples 0..=k
        let dt = T::one() / T::from_usize_lossy(u_path.steps());
        let vals = (0..grid.len())
            .map(|i| {
                let mut v = problem.source.sample_at(traj[0][i]);
                for j in 0..=k {
                    let wj = if j == 0 || j == k { dt * T::lit(0.5) } else { dt };
                    v = v + wj * z_path[j].sample_at(traj[j][i]);
                }
                v
            })
            .collect();
        out.push(ScalarField::new(grid.clone(), vals)?);
    }
    TimePath::new(out)
}

type State<T> = (TimePath<VectorField<T>>, TimePath<ScalarField<T>>);

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Both,
    Velocity,
    Source,
}

fn descend<T: Real>(problem: &MorphProblem<T>, x0: State<T>, opts: &DescentOptions, block: Block) -> Result<(State<T>, crate::optim::DescentTrace<MorphEnergy<T>>)> {
    let kernel = &problem.kernel;
    armijo_descent(
        x0,
        opts,
        |(u, z)| morph_energy_parts(problem, u, z),
        |(u, z)| {
            let (mut gu, mut gz) = morph_gradient(problem, u, z)?;
            match block {
                Block::Both => {}
                Block::Velocity => gz = gz.map(|f| ScalarField::zeros(f.grid())),
                Block::Source => gu = gu.map(|f| VectorField::zeros(f.grid())),
            }
            let slope = path_metric_sq(kernel, &gu)? + source_metric_sq(&gz, source_metric_weight(problem));
            Ok(((gu, gz), slope.to_f64_lossy()))
        },
        |(u, z), (gu, gz), eta| (path_axpy(u, -T::lit(eta), gu), source_axpy(z, -T::lit(eta), gz)),
    )
}

/// The minimiser over `z` of the energy at `u ≡ 0`: the constant-in-time
/// source `z = 2βσ² / (1 + 2βσ²) · (I1 − I0)`.
pub fn initial_source_path<T: Real>(problem: &MorphProblem<T>) -> Result<TimePath<ScalarField<T>>> {
    let a = T::lit(2.0) * problem.beta * problem.sigma2;
    let z = problem.target.sub(&problem.source)?.scale(a / (T::one() + a));
    TimePath::new(vec![z; problem.steps + 1])
}

/// Gradient descent on `(u, z)`, jointly or alternating between the two
/// blocks, starting from `u ≡ 0` and the matching [`initial_source_path`].
pub fn morph_register<T: Real>(problem: &MorphProblem<T>) -> Result<MorphResult<T>> {
    problem.validate()?;
    let x0 = (zero_velocity(problem)?, initial_source_path(problem)?);
    let opts = descent_options(problem.max_iters, problem.tol);
    let (state, trace, converged, iterations) = if problem.alternate {
        alternate(problem, x0, &opts)?
    } else {
        let (s, t) = descend(problem, x0, &opts, Block::Both)?;
        let (c, i) = (t.converged, t.iterations);
        (s, t.energies, c, i)
    };
    let (u_path, z_path) = state;
    let j_path = morph_images(problem, &u_path, &z_path)?;
    Ok(MorphResult {
        u_path,
        z_path,
        j_path,
        energy_trace: trace,
        converged,
        iterations,
    })
}

fn zero_velocity<T: Real>(problem: &MorphProblem<T>) -> Result<TimePath<VectorField<T>>> {
    crate::fields::zero_velocity_path(problem.source.grid(), problem.steps)
}

#[allow(clippy::type_complexity)]
fn alternate<T: Real>(problem: &MorphProblem<T>, x0: State<T>, opts: &DescentOptions) -> Result<(State<T>, Vec<MorphEnergy<T>>, bool, usize)> {
    let mut state = x0;
    let mut energies = vec![morph_energy_parts(problem, &state.0, &state.1)?];
    let mut steps = [opts.initial_step; 2];
    for iter in 0..opts.max_iters {
        let before = energies.last().expect("initial energy").total;
        let mut moved = false;
        for (b, block) in [Block::Velocity, Block::Source].into_iter().enumerate() {
            let one = DescentOptions {
                max_iters: 1,
                tol: 0.0,
                initial_step: steps[b],
                ..opts.clone()
            };
            let (next, trace) = descend(problem, state, &one, block)?;
            state = next;
            if trace.iterations > 0 {
                moved = true;
                steps[b] = trace.final_step * opts.growth;
                energies.push(*trace.energies.last().expect("accepted energy"));
            }
        }
        let after = energies.last().expect("energy").total;
        let rel = (before - after).to_f64_lossy() / before.to_f64_lossy().abs().max(f64::MIN_POSITIVE);
        if !moved || rel < opts.tol {
            return Ok((state, energies, moved || before == T::zero() || rel < opts.tol, iter));
        }
    }
    Ok((state, energies, false, opts.max_iters))
}
