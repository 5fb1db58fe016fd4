//! Geodesic shooting from a scalar initial momentum.
//!
//! The state is an image `J` and a scalar momentum density `p` on the same
//! grid; the velocity is `u = −K(p ∇J)`. The integrator carries the backward
//! map `ψ_t = φ_{t,0}` and resamples the initial data through it, so
//! `J_t = I0 ∘ ψ_t` (pullback) and `p_t = (p0 ∘ ψ_t) · det Dψ_t`
//! (Jacobian-weighted pullback). Each step of [`shoot_forward`] is a two-stage
//! midpoint scheme: the map is first advanced half a step with the current
//! velocity, the velocity is re-evaluated there, and the full step is taken
//! from the start with that midpoint velocity.
//!
//! [`shoot_gradient`] is the exact reverse sweep through those discrete steps.

use crate::fields::{Grid, ScalarField, TimePath, VectorField};
use crate::kernel::SobolevKernel;
use crate::lddmm::Energy;
use crate::optim::armijo_descent;
use crate::{GeoError, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ShootState<T> {
    pub j: ScalarField<T>,
    pub p: ScalarField<T>,
    pub u: VectorField<T>,
}

#[derive(Clone, Debug)]
pub struct ShootingResult<T: Real> {
    pub p0: ScalarField<T>,
    pub states: TimePath<ShootState<T>>,
    pub energy_trace: Vec<Energy<T>>,
    pub converged: bool,
    pub iterations: usize,
}

/// `u = −K(p ∇J)` along with `∇J`.
fn velocity<T: Real>(kernel: &SobolevKernel<T>, j: &ScalarField<T>, p: &ScalarField<T>) -> (VectorField<T>, VectorField<T>) {
    let grid = j.grid();
    let g: Vec<Vec<T>> = (0..grid.dim()).map(|a| diff4(grid, j.values(), a)).collect();
    let pv = p.values();
    let comps = g
        .iter()
        .map(|c| {
            let mut m: Vec<T> = c.iter().zip(pv).map(|(&a, &b)| -(a * b)).collect();
            kernel.apply_raw(&mut m, true);
            m
        })
        .collect();
    (VectorField::from_raw(grid.clone(), g), VectorField::from_raw(grid.clone(), comps))
}

fn node_plus<T: Real>(grid: &Grid<T>, i: usize, d: [T; 2]) -> [T; 2] {
    let x = grid.node(i);
    [x[0] + d[0], x[1] + d[1]]
}

/// Displacement of the backward sub-step map over time `tau`:
/// `s(x) = −τ v(x − (τ/2) v(x))`.
fn backmap<T: Real>(v: &VectorField<T>, tau: T) -> VectorField<T> {
    let grid = v.grid();
    let dim = grid.dim();
    let half = tau * T::lit(0.5);
    let mut comps = vec![vec![T::zero(); grid.len()]; dim];
    for i in 0..grid.len() {
        let vi = v.at(i);
        let q = node_plus(grid, i, [-half * vi[0], -half * vi[1]]);
        let w = v.sample_at(q);
        for c in 0..dim {
            comps[c][i] = -tau * w[c];
        }
    }
    VectorField::from_raw(grid.clone(), comps)
}

fn backmap_reverse<T: Real>(v: &VectorField<T>, tau: T, s_bar: &VectorField<T>, v_bar: &mut VectorField<T>) {
    let grid = v.grid();
    let dim = grid.dim();
    let half = tau * T::lit(0.5);
    for i in 0..grid.len() {
        let vi = v.at(i);
        let q = node_plus(grid, i, [-half * vi[0], -half * vi[1]]);
        let st = grid.stencil(q);
        let mut q_bar = [T::zero(); 2];
        for c in 0..dim {
            let a = -tau * s_bar.component(c)[i];
            st.scatter(v_bar.component_mut(c), a);
            let g = st.grad(v.component(c));
            q_bar[0] = q_bar[0] + a * g[0];
            q_bar[1] = q_bar[1] + a * g[1];
        }
        for c in 0..dim {
            let vb = v_bar.component_mut(c);
            vb[i] = vb[i] - half * q_bar[c];
        }
    }
}

/// `f(x + s(x))`, sampled with the cubic interpolant.
fn pull<T: Real>(f: &ScalarField<T>, s: &VectorField<T>) -> ScalarField<T> {
    let grid = f.grid();
    let values = (0..grid.len())
        .map(|i| grid.cubic_stencil(node_plus(grid, i, s.at(i))).eval(f.values()))
        .collect();
    ScalarField::from_raw(grid.clone(), values)
}

fn pull_reverse<T: Real>(f: &ScalarField<T>, s: &VectorField<T>, out_bar: &[T], f_bar: Option<&mut [T]>, s_bar: &mut VectorField<T>) {
    let grid = f.grid();
    let dim = grid.dim();
    let mut f_bar = f_bar;
    for i in 0..grid.len() {
        let a = out_bar[i];
        if a == T::zero() {
            continue;
        }
        let st = grid.cubic_stencil(node_plus(grid, i, s.at(i)));
        if let Some(fb) = f_bar.as_deref_mut() {
            st.scatter(fb, a);
        }
        let g = st.grad(f.values());
        for c in 0..dim {
            let sb = s_bar.component_mut(c);
            sb[i] = sb[i] + a * g[c];
        }
    }
}

/// Fourth-order central difference along `axis` with periodic wrap.
fn diff4<T: Real>(grid: &Grid<T>, f: &[T], axis: usize) -> Vec<T> {
    let inv = T::one() / (T::lit(12.0) * grid.spacing()[axis]);
    let eight = T::lit(8.0);
    (0..grid.len())
        .map(|i| {
            let p1 = grid.shift(i, axis, 1);
            let p2 = grid.shift(i, axis, 2);
            let m1 = grid.shift(i, axis, -1);
            let m2 = grid.shift(i, axis, -2);
            (f[m2] - f[p2] + eight * (f[p1] - f[m1])) * inv
        })
        .collect()
}

/// `det(I + ∇s)` with fourth-order differences.
fn jacobian_det<T: Real>(s: &VectorField<T>) -> ScalarField<T> {
    let grid = s.grid();
    let one = T::one();
    let a = diff4(grid, s.component(0), 0);
    let values = if grid.dim() == 1 {
        a.into_iter().map(|v| one + v).collect()
    } else {
        let b = diff4(grid, s.component(0), 1);
        let c = diff4(grid, s.component(1), 0);
        let d = diff4(grid, s.component(1), 1);
        (0..grid.len()).map(|i| (one + a[i]) * (one + d[i]) - b[i] * c[i]).collect()
    };
    ScalarField::from_raw(grid.clone(), values)
}

/// Adjoint of [`jacobian_det`]; the difference operator is antisymmetric.
fn det_reverse<T: Real>(s: &VectorField<T>, d_bar: &[T], s_bar: &mut VectorField<T>) {
    let grid = s.grid();
    let n = grid.len();
    if grid.dim() == 1 {
        let t = diff4(grid, d_bar, 0);
        let sb = s_bar.component_mut(0);
        for i in 0..n {
            sb[i] = sb[i] - t[i];
        }
        return;
    }
    let a = diff4(grid, s.component(0), 0);
    let b = diff4(grid, s.component(0), 1);
    let c = diff4(grid, s.component(1), 0);
    let d = diff4(grid, s.component(1), 1);
    let one = T::one();
    let a_bar: Vec<T> = (0..n).map(|i| d_bar[i] * (one + d[i])).collect();
    let d_bar2: Vec<T> = (0..n).map(|i| d_bar[i] * (one + a[i])).collect();
    let b_bar: Vec<T> = (0..n).map(|i| -d_bar[i] * c[i]).collect();
    let c_bar: Vec<T> = (0..n).map(|i| -d_bar[i] * b[i]).collect();
    let t0 = diff4(grid, &a_bar, 0);
    let t1 = diff4(grid, &b_bar, 1);
    let t2 = diff4(grid, &c_bar, 0);
    let t3 = diff4(grid, &d_bar2, 1);
    {
        let s0 = s_bar.component_mut(0);
        for i in 0..n {
            s0[i] = s0[i] - t0[i] - t1[i];
        }
    }
    let s1 = s_bar.component_mut(1);
    for i in 0..n {
        s1[i] = s1[i] - t2[i] - t3[i];
    }
}

/// Adjoint of `u = −K(p ∇J)`: adds into `p_bar` and, when given, `j_bar`.
fn velocity_reverse<T: Real>(
    kernel: &SobolevKernel<T>,
    p: &ScalarField<T>,
    g: &VectorField<T>,
    u_bar: &VectorField<T>,
    p_bar: &mut [T],
    j_bar: Option<&mut [T]>,
) {
    let grid = p.grid();
    let n = grid.len();
    let mut div = vec![T::zero(); n];
    for c in 0..grid.dim() {
        let mut m_bar: Vec<T> = u_bar.component(c).iter().map(|&v| -v).collect();
        kernel.apply_raw(&mut m_bar, true);
        let gc = g.component(c);
        for i in 0..n {
            p_bar[i] = p_bar[i] + m_bar[i] * gc[i];
        }
        if j_bar.is_some() {
            let gb: Vec<T> = m_bar.iter().zip(p.values()).map(|(&a, &b)| a * b).collect();
            for (d, t) in div.iter_mut().zip(diff4(grid, &gb, c)) {
                *d = *d + t;
            }
        }
    }
    if let Some(jb) = j_bar {
        for i in 0..n {
            jb[i] = jb[i] - div[i];
        }
    }
}

fn mul<T: Real>(a: &ScalarField<T>, b: &ScalarField<T>) -> ScalarField<T> {
    let v = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
    ScalarField::from_raw(a.grid().clone(), v)
}

/// `d(x + s(x)) + s(x)`: displacement of `ψ ∘ (Id + s)` where `ψ = Id + d`.
fn compose<T: Real>(d: &VectorField<T>, s: &VectorField<T>) -> VectorField<T> {
    let grid = d.grid();
    let dim = grid.dim();
    let mut comps = vec![vec![T::zero(); grid.len()]; dim];
    for i in 0..grid.len() {
        let si = s.at(i);
        let w = d.sample_at(node_plus(grid, i, si));
        for c in 0..dim {
            comps[c][i] = w[c] + si[c];
        }
    }
    VectorField::from_raw(grid.clone(), comps)
}

fn compose_reverse<T: Real>(
    d: &VectorField<T>,
    s: &VectorField<T>,
    out_bar: &VectorField<T>,
    d_bar: &mut VectorField<T>,
    s_bar: &mut VectorField<T>,
) {
    let grid = d.grid();
    let dim = grid.dim();
    for i in 0..grid.len() {
        let st = grid.stencil(node_plus(grid, i, s.at(i)));
        let ob = out_bar.at(i);
        let mut sb = [T::zero(); 2];
        for c in 0..dim {
            st.scatter(d_bar.component_mut(c), ob[c]);
            let g = st.grad(d.component(c));
            sb[c] = sb[c] + ob[c];
            sb[0] = sb[0] + ob[c] * g[0];
            sb[1] = sb[1] + ob[c] * g[1];
        }
        for c in 0..dim {
            let v = s_bar.component_mut(c);
            v[i] = v[i] + sb[c];
        }
    }
}

/// The state generated by a backward map `ψ = Id + d`:
/// `J = I0 ∘ ψ`, `p = (p0 ∘ ψ) · det Dψ`, and the velocity it induces.
struct Stage<T> {
    d: VectorField<T>,
    j: ScalarField<T>,
    p_pull: ScalarField<T>,
    det: ScalarField<T>,
    p: ScalarField<T>,
    g: VectorField<T>,
    u: VectorField<T>,
}

impl<T: Real> Stage<T> {
    fn new(i0: &ScalarField<T>, p0: &ScalarField<T>, kernel: &SobolevKernel<T>, d: VectorField<T>) -> Self {
        let j = pull(i0, &d);
        let p_pull = pull(p0, &d);
        let det = jacobian_det(&d);
        let p = mul(&p_pull, &det);
        let (g, u) = velocity(kernel, &j, &p);
        Stage { d, j, p_pull, det, p, g, u }
    }

    fn state(&self) -> ShootState<T> {
        ShootState {
            j: self.j.clone(),
            p: self.p.clone(),
            u: self.u.clone(),
        }
    }

    /// Adjoint of [`Stage::new`] given the adjoints of `J` and `p`; adds into `p0_bar` and `d_bar`.
    fn reverse(&self, i0: &ScalarField<T>, p0: &ScalarField<T>, j_bar: &[T], p_bar: &[T], p0_bar: &mut [T], d_bar: &mut VectorField<T>) {
        let pull_bar: Vec<T> = p_bar.iter().zip(self.det.values()).map(|(&a, &d)| a * d).collect();
        let det_bar: Vec<T> = p_bar.iter().zip(self.p_pull.values()).map(|(&a, &q)| a * q).collect();
        det_reverse(&self.d, &det_bar, d_bar);
        pull_reverse(p0, &self.d, &pull_bar, Some(p0_bar), d_bar);
        pull_reverse(i0, &self.d, j_bar, None, d_bar);
    }
}

struct StepTape<T> {
    start: Stage<T>,
    s_a: VectorField<T>,
    mid: Stage<T>,
    s_b: VectorField<T>,
}

struct Tape<T> {
    steps: Vec<StepTape<T>>,
    last: Stage<T>,
}

fn forward_tape<T: Real>(i0: &ScalarField<T>, p0: &ScalarField<T>, kernel: &SobolevKernel<T>, steps: usize) -> Result<Tape<T>> {
    if steps < 1 {
        return Err(GeoError::InvalidInput("need at least one time step".into()));
    }
    i0.grid().check_same(p0.grid())?;
    i0.grid().check_same(kernel.grid())?;
    if !i0.is_finite() || !p0.is_finite() {
        return Err(GeoError::InvalidInput("non-finite source image or momentum".into()));
    }
    let dt = T::one() / T::from_usize_lossy(steps);
    let mut stage = Stage::new(i0, p0, kernel, VectorField::zeros(i0.grid()));
    let mut tape = Vec::with_capacity(steps);
    for k in 0..steps {
        let s_a = backmap(&stage.u, dt * T::lit(0.5));
        let mid = Stage::new(i0, p0, kernel, compose(&stage.d, &s_a));
        let s_b = backmap(&mid.u, dt);
        let next = Stage::new(i0, p0, kernel, compose(&stage.d, &s_b));
        if !next.d.is_finite() || !next.u.is_finite() || !next.p.is_finite() {
            return Err(GeoError::NonFinite { step: k });
        }
        tape.push(StepTape { start: stage, s_a, mid, s_b });
        stage = next;
    }
    Ok(Tape { steps: tape, last: stage })
}

/// Integrates the geodesic system from `(I0, p0)` over `t ∈ [0, 1]`.
pub fn shoot_forward<T: Real>(
    i0: &ScalarField<T>,
    p0: &ScalarField<T>,
    kernel: &SobolevKernel<T>,
    steps: usize,
) -> Result<TimePath<ShootState<T>>> {
    let tape = forward_tape(i0, p0, kernel, steps)?;
    let mut out: Vec<ShootState<T>> = tape.steps.iter().map(|s| s.start.state()).collect();
    out.push(tape.last.state());
    TimePath::new(out)
}

fn check_target<T: Real>(i0: &ScalarField<T>, i1: &ScalarField<T>, beta: T) -> Result<()> {
    i0.grid().check_same(i1.grid())?;
    if !(beta >= T::zero()) || !beta.is_finite() {
        return Err(GeoError::InvalidInput(format!("beta must be non-negative, got {beta}")));
    }
    Ok(())
}

fn parts_of<T: Real>(tape: &Tape<T>, i1: &ScalarField<T>, beta: T) -> Result<Energy<T>> {
    let first = &tape.steps[0].start;
    let cv = i1.grid().cell_volume();
    // ⟨L u0, u0⟩ = ⟨m0, K m0⟩ with m0 = p0 ∇I0 and K m0 = −u0
    let mut kin = T::zero();
    for c in 0..i1.grid().dim() {
        let gc = first.g.component(c);
        let uc = first.u.component(c);
        for i in 0..gc.len() {
            kin = kin - first.p.values()[i] * gc[i] * uc[i];
        }
    }
    let kinetic = kin * cv * T::lit(0.5);
    let matching = beta * tape.last.j.sub(i1)?.norm_sq();
    Ok(Energy {
        kinetic,
        matching,
        total: kinetic + matching,
    })
}

pub fn shoot_energy_parts<T: Real>(
    i0: &ScalarField<T>,
    i1: &ScalarField<T>,
    p0: &ScalarField<T>,
    beta: T,
    kernel: &SobolevKernel<T>,
    steps: usize,
) -> Result<Energy<T>> {
    check_target(i0, i1, beta)?;
    let tape = forward_tape(i0, p0, kernel, steps)?;
    parts_of(&tape, i1, beta)
}

/// `½⟨L u_0, u_0⟩ + β ‖J_1 − I1‖²`.
pub fn shoot_energy<T: Real>(
    i0: &ScalarField<T>,
    i1: &ScalarField<T>,
    p0: &ScalarField<T>,
    beta: T,
    kernel: &SobolevKernel<T>,
    steps: usize,
) -> Result<T> {
    Ok(shoot_energy_parts(i0, i1, p0, beta, kernel, steps)?.total)
}

/// `L²` gradient of [`shoot_energy`] with respect to `p0`:
/// `dE[δp] = ⟨g, δp⟩` with the grid inner product.
pub fn shoot_gradient<T: Real>(
    i0: &ScalarField<T>,
    i1: &ScalarField<T>,
    p0: &ScalarField<T>,
    beta: T,
    kernel: &SobolevKernel<T>,
    steps: usize,
) -> Result<ScalarField<T>> {
    check_target(i0, i1, beta)?;
    let tape = forward_tape(i0, p0, kernel, steps)?;
    Ok(gradient_of(&tape, i0, p0, i1, beta, kernel))
}

fn gradient_of<T: Real>(tape: &Tape<T>, i0: &ScalarField<T>, p0: &ScalarField<T>, i1: &ScalarField<T>, beta: T, kernel: &SobolevKernel<T>) -> ScalarField<T> {
    let grid = i1.grid();
    let n = grid.len();
    let cv = grid.cell_volume();
    let c = T::lit(2.0) * beta * cv;
    let dt = T::one() / T::from_usize_lossy(tape.steps.len());
    let j_bar: Vec<T> = tape
        .last
        .j
        .values()
        .iter()
        .zip(i1.values())
        .map(|(&j, &t)| c * (j - t))
        .collect();
    let mut p0_bar = vec![T::zero(); n];
    let mut d_bar = VectorField::zeros(grid);
    tape.last.reverse(i0, p0, &j_bar, &vec![T::zero(); n], &mut p0_bar, &mut d_bar);

    for (k, st) in tape.steps.iter().enumerate().rev() {
        let mut d_start_bar = VectorField::zeros(grid);

        // full step from the start map with the midpoint velocity
        let mut s_bar = VectorField::zeros(grid);
        compose_reverse(&st.start.d, &st.s_b, &d_bar, &mut d_start_bar, &mut s_bar);
        let mut u_bar = VectorField::zeros(grid);
        backmap_reverse(&st.mid.u, dt, &s_bar, &mut u_bar);
        let mut j_mid_bar = vec![T::zero(); n];
        let mut p_mid_bar = vec![T::zero(); n];
        velocity_reverse(kernel, &st.mid.p, &st.mid.g, &u_bar, &mut p_mid_bar, Some(&mut j_mid_bar));
        let mut d_mid_bar = VectorField::zeros(grid);
        st.mid.reverse(i0, p0, &j_mid_bar, &p_mid_bar, &mut p0_bar, &mut d_mid_bar);

        // half step
        let mut s_bar = VectorField::zeros(grid);
        compose_reverse(&st.start.d, &st.s_a, &d_mid_bar, &mut d_start_bar, &mut s_bar);
        let mut u_bar = VectorField::zeros(grid);
        backmap_reverse(&st.start.u, dt * T::lit(0.5), &s_bar, &mut u_bar);

        let mut j_bar = vec![T::zero(); n];
        let mut p_bar = vec![T::zero(); n];
        velocity_reverse(kernel, &st.start.p, &st.start.g, &u_bar, &mut p_bar, (k > 0).then_some(&mut j_bar[..]));
        if k == 0 {
            // kinetic term: ∂/∂m0 of ½⟨m0, K m0⟩ is −cv·u0, and m0 = p0 ∇I0
            for c in 0..grid.dim() {
                for ((b, &u), &g) in p_bar.iter_mut().zip(st.start.u.component(c)).zip(st.start.g.component(c)) {
                    *b = *b - cv * u * g;
                }
            }
            // the start map is the identity: p = p0 exactly
            for (a, b) in p0_bar.iter_mut().zip(&p_bar) {
                *a = *a + *b;
            }
        } else {
            st.start.reverse(i0, p0, &j_bar, &p_bar, &mut p0_bar, &mut d_start_bar);
        }
        d_bar = d_start_bar;
    }
    let inv = T::one() / cv;
    ScalarField::from_raw(grid.clone(), p0_bar.into_iter().map(|v| v * inv).collect())
}

/// Kinetic energy `⟨L u_t, u_t⟩` and momentum mass `∫ p_t` at every stored time.
pub fn conservation_profile<T: Real>(states: &TimePath<ShootState<T>>, kernel: &SobolevKernel<T>) -> Result<Vec<(T, T)>> {
    states
        .iter()
        .map(|s| Ok((kernel.metric_norm_sq(&s.u)?, s.p.integral())))
        .collect()
}

/// Largest relative deviation of a sequence from its first entry.
pub fn relative_drift<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut it = values.into_iter();
    let Some(first) = it.next() else {
        return T::zero();
    };
    let scale = num_traits::Float::abs(first);
    let dev = it.fold(T::zero(), |m, v| m.max(num_traits::Float::abs(v - first)));
    if scale > T::zero() {
        dev / scale
    } else {
        dev
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Drift<T> {
    /// `max_t |⟨Lu_t,u_t⟩ − ⟨Lu_0,u_0⟩| / ⟨Lu_0,u_0⟩`.
    pub kinetic: T,
    /// `max_t |∫p_t − ∫p_0| / ∫|p_0|`. Normalised by the total variation because
    /// matching momenta typically have near-zero net mass.
    pub mass: T,
}

pub fn conservation_drift<T: Real>(states: &TimePath<ShootState<T>>, kernel: &SobolevKernel<T>) -> Result<Drift<T>> {
    let prof = conservation_profile(states, kernel)?;
    let kinetic = relative_drift(prof.iter().map(|p| p.0));
    let m0 = prof[0].1;
    let dev = prof.iter().fold(T::zero(), |m, p| m.max(num_traits::Float::abs(p.1 - m0)));
    let p0 = &states.first().p;
    let tv = p0.values().iter().fold(T::zero(), |acc, &v| acc + num_traits::Float::abs(v)) * p0.grid().cell_volume();
    let mass = if tv > T::zero() { dev / tv } else { dev };
    Ok(Drift { kinetic, mass })
}

/// Armijo descent on `p0` from `p0 ≡ 0`. The search direction is the
/// gradient smoothed by `K`.
pub fn register_shooting<T: Real>(
    i0: &ScalarField<T>,
    i1: &ScalarField<T>,
    beta: T,
    kernel: &SobolevKernel<T>,
    steps: usize,
    max_iters: usize,
    tol: f64,
) -> Result<ShootingResult<T>> {
    if !(beta > T::zero()) {
        return Err(GeoError::InvalidInput(format!("beta must be positive, got {beta}")));
    }
    check_target(i0, i1, beta)?;
    let opts = crate::lddmm::descent_options(max_iters, tol);
    let (p0, trace) = armijo_descent(
        ScalarField::zeros(i0.grid()),
        &opts,
        |p| shoot_energy_parts(i0, i1, p, beta, kernel, steps),
        |p| {
            let g = shoot_gradient(i0, i1, p, beta, kernel, steps)?;
            let d = kernel.apply_k_scalar(&g)?;
            let slope = g.inner(&d)?.to_f64_lossy();
            Ok((d, slope))
        },
        |p, d, eta| {
            let mut out = p.clone();
            for (o, &v) in out.values_mut().iter_mut().zip(d.values()) {
                *o = *o - T::lit(eta) * v;
            }
            out
        },
    )?;
    let states = shoot_forward(i0, &p0, kernel, steps)?;
    Ok(ShootingResult {
        p0,
        states,
        energy_trace: trace.energies,
        converged: trace.converged,
        iterations: trace.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn blob(g: &Grid<f64>, cx: f64, cy: f64, s: f64) -> ScalarField<f64> {
        ScalarField::from_fn(g, |[x, y]| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
    }

    fn random_field(g: &Grid<f64>, k: &SobolevKernel<f64>, amp: f64, seed: u64) -> ScalarField<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let raw = ScalarField::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = k.apply_k_scalar(&raw).unwrap();
        let m = s.max_abs();
        s.scale(amp / m)
    }

    /// Rescales `p` so that the induced initial velocity peaks at `cells` grid cells per unit time.
    fn with_speed(i0: &ScalarField<f64>, p: ScalarField<f64>, k: &SobolevKernel<f64>, cells: f64) -> ScalarField<f64> {
        let (_, u) = velocity(k, i0, &p);
        let s = u.max_abs_cells();
        p.scale(cells / s)
    }

    fn setup(n: usize) -> (Grid<f64>, ScalarField<f64>, ScalarField<f64>, SobolevKernel<f64>) {
        let g = Grid::unit_square(n).unwrap();
        let i0 = blob(&g, 0.45, 0.5, 0.18);
        let i1 = blob(&g, 0.55, 0.45, 0.18);
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        (g, i0, i1, k)
    }

    #[test]
    fn zero_momentum_is_stationary() {
        let (g, i0, _, k) = setup(8);
        let path = shoot_forward(&i0, &ScalarField::zeros(&g), &k, 4).unwrap();
        for s in path.iter() {
            assert_eq!(s.j, i0);
            assert_eq!(s.p.max_abs(), 0.0);
            assert_eq!(s.u.max_abs(), 0.0);
        }
    }

    #[test]
    fn stored_velocity_matches_state() {
        let (g, i0, i1, k) = setup(16);
        let p0 = with_speed(&i0, i1.sub(&i0).unwrap(), &k, 2.0);
        let n = 16;
        let h = 1.0 / n as f64;
        for s in shoot_forward(&i0, &p0, &k, 4).unwrap().iter() {
            let j = s.j.values();
            let d = |a: usize, b: usize| j[(a % n) * n + b % n];
            let mut m = vec![vec![0.0; n * n]; 2];
            for a in 0..n {
                for b in 0..n {
                    let gx = (d(a + n - 2, b) - d(a + 2, b) + 8.0 * (d(a + 1, b) - d(a + n - 1, b))) / (12.0 * h);
                    let gy = (d(a, b + n - 2) - d(a, b + 2) + 8.0 * (d(a, b + 1) - d(a, b + n - 1))) / (12.0 * h);
                    let p = s.p.values()[a * n + b];
                    m[0][a * n + b] = -p * gx;
                    m[1][a * n + b] = -p * gy;
                }
            }
            let expect = k.apply_k(&VectorField::new(g.clone(), m).unwrap()).unwrap();
            assert!(expect.sub(&s.u).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn energy_trivial_cases() {
        let (g, i0, i1, k) = setup(8);
        let z = ScalarField::zeros(&g);
        assert_eq!(shoot_energy(&i0, &i0, &z, 1.0, &k, 4).unwrap(), 0.0);
        let e = shoot_energy(&i0, &i1, &z, 2.0, &k, 4).unwrap();
        assert!((e - 2.0 * i1.sub(&i0).unwrap().norm_sq()).abs() < 1e-15);
        let g0 = shoot_gradient(&i0, &i0, &z, 1.0, &k, 4).unwrap();
        assert_eq!(g0.max_abs(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (g, i0, i1, k) = setup(8);
        let p0 = with_speed(&i0, random_field(&g, &k, 1.0, 1), &k, 1.5);
        let grad = shoot_gradient(&i0, &i1, &p0, 1.0, &k, 8).unwrap();
        for seed in 0..5 {
            let dir = with_speed(&i0, random_field(&g, &k, 1.0, 50 + seed), &k, 1.0);
            let pred = grad.inner(&dir).unwrap();
            let eps = 1e-6;
            let ep = shoot_energy(&i0, &i1, &p0.add(&dir.scale(eps)).unwrap(), 1.0, &k, 8).unwrap();
            let em = shoot_energy(&i0, &i1, &p0.sub(&dir.scale(eps)).unwrap(), 1.0, &k, 8).unwrap();
            let fd = (ep - em) / (2.0 * eps);
            assert!(((fd - pred) / fd).abs() < 1e-3, "seed {seed}: fd {fd} pred {pred}");
        }
    }

    #[test]
    fn gradient_in_one_dimension() {
        let g = Grid::<f64>::new_1d(32, 1.0 / 32.0).unwrap();
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        let i0 = ScalarField::from_fn(&g, |[x, _]| (-(x - 0.45).powi(2) / 0.02).exp());
        let i1 = ScalarField::from_fn(&g, |[x, _]| (-(x - 0.55).powi(2) / 0.02).exp());
        let p0 = with_speed(&i0, ScalarField::from_fn(&g, |[x, _]| (std::f64::consts::TAU * x).sin()), &k, 2.0);
        let dir = ScalarField::from_fn(&g, |[x, _]| (2.0 * std::f64::consts::TAU * x).cos());
        let grad = shoot_gradient(&i0, &i1, &p0, 1.0, &k, 6).unwrap();
        let eps = 1e-6;
        let ep = shoot_energy(&i0, &i1, &p0.add(&dir.scale(eps)).unwrap(), 1.0, &k, 6).unwrap();
        let em = shoot_energy(&i0, &i1, &p0.sub(&dir.scale(eps)).unwrap(), 1.0, &k, 6).unwrap();
        let fd = (ep - em) / (2.0 * eps);
        let pred = grad.inner(&dir).unwrap();
        assert!(((fd - pred) / fd).abs() < 1e-3, "fd {fd} pred {pred}");
    }

    #[test]
    fn gradient_respects_mirror_symmetry() {
        // Mirror axis halfway between two node rows (node j -> n - 1 - j). An axis
        // through a node row would put particles exactly on nodes, where the
        // interpolant's derivative is one-sided.
        let n = 16;
        let g = Grid::<f64>::unit_square(n).unwrap();
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        let c = 0.5 - 0.5 / n as f64;
        let i0 = blob(&g, 0.4, c, 0.15);
        let i1 = blob(&g, 0.6, c, 0.15);
        let p0 = ScalarField::from_fn(&g, |[x, y]| (std::f64::consts::TAU * x).sin() * (std::f64::consts::TAU * (y - c)).cos());
        let p0 = with_speed(&i0, p0, &k, 2.0);
        let grad = shoot_gradient(&i0, &i1, &p0, 1.0, &k, 4).unwrap();
        let v = grad.values();
        let scale = grad.max_abs();
        for a in 0..n {
            for b in 0..n {
                let mirrored = v[a * n + (n - 1 - b)];
                assert!((v[a * n + b] - mirrored).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn identical_images_keep_zero_momentum() {
        let (_, i0, _, k) = setup(8);
        let r = register_shooting(&i0, &i0, 1.0, &k, 4, 10, 1e-6).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.p0.max_abs(), 0.0);
    }

    #[test]
    fn conserves_kinetic_energy_and_mass() {
        let n = 32;
        let g = Grid::<f64>::unit_square(n).unwrap();
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        let i0 = blob(&g, 0.5, 0.5, 6.0 / n as f64);
        let i1 = blob(&g, 0.5 + 3.0 / n as f64, 0.5, 6.0 / n as f64);
        let p0 = with_speed(&i0, i1.sub(&i0).unwrap(), &k, 3.0);
        let drift = conservation_drift(&shoot_forward(&i0, &p0, &k, 32).unwrap(), &k).unwrap();
        assert!(drift.kinetic < 0.01, "{drift:?}");
        assert!(drift.mass < 1e-3, "{drift:?}");
    }
}
