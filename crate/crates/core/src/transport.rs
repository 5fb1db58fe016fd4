//! Flow integration and transport along characteristics.
//!
//! Every quantity is advanced by following particles: a node's trajectory is
//! integrated with RK4, sampling the velocity by interpolation and using the
//! average of the two bracketing time samples at the half step. Images are
//! pulled back along these trajectories and densities are pulled back with a
//! Jacobian weight, so neither transport has a CFL restriction.

use crate::fields::{check_path_grid, jacobian_det_of, DeformationMap, Grid, ScalarField, TimePath, VectorField};
use crate::{GeoError, Real, Result};

/// Forward maps `φ_{0,t_k}` and backward maps `φ_{t_k,0}` of a velocity path.
#[derive(Clone, Debug)]
pub struct FlowMaps<T> {
    pub forward: TimePath<DeformationMap<T>>,
    pub backward: TimePath<DeformationMap<T>>,
}

pub(crate) type Pos<T> = [T; 2];

/// Velocity at the middle of each interval (linear in time).
pub(crate) fn midpoints<T: Real>(u_path: &TimePath<VectorField<T>>) -> Vec<VectorField<T>> {
    let half = T::lit(0.5);
    u_path
        .samples()
        .windows(2)
        .map(|w| {
            let mut m = w[0].scale(half);
            m.axpy(half, &w[1]);
            m
        })
        .collect()
}

#[inline]
fn add_scaled<T: Real>(x: Pos<T>, c: T, v: Pos<T>) -> Pos<T> {
    [x[0] + c * v[0], x[1] + c * v[1]]
}

/// One RK4 step of `Ẋ = u(t, X)` over a signed duration `h`, with the velocity
/// `ua` at the start time, `um` at the midpoint and `ub` at the end time.
#[inline]
pub(crate) fn rk4_step<T: Real>(x: Pos<T>, ua: &VectorField<T>, um: &VectorField<T>, ub: &VectorField<T>, h: T) -> Pos<T> {
    let half = h * T::lit(0.5);
    let k1 = ua.sample_at(x);
    let k2 = um.sample_at(add_scaled(x, half, k1));
    let k3 = um.sample_at(add_scaled(x, half, k2));
    let k4 = ub.sample_at(add_scaled(x, h, k3));
    let s = h / T::lit(6.0);
    let two = T::lit(2.0);
    [
        x[0] + s * (k1[0] + two * k2[0] + two * k3[0] + k4[0]),
        x[1] + s * (k1[1] + two * k2[1] + two * k3[1] + k4[1]),
    ]
}

/// Accumulators for the adjoint of `rk4_step` with respect to the three velocity samples.
pub(crate) struct VelocityAdjoint<'a, T> {
    pub ua: &'a mut VectorField<T>,
    pub um: &'a mut VectorField<T>,
    pub ub: &'a mut VectorField<T>,
}

#[inline]
fn stage_reverse<T: Real>(v: &VectorField<T>, p: Pos<T>, kbar: Pos<T>, vbar: &mut VectorField<T>) -> Pos<T> {
    let st = v.grid().stencil(p);
    let dim = v.grid().dim();
    let mut pbar = [T::zero(); 2];
    for c in 0..dim {
        st.scatter(vbar.component_mut(c), kbar[c]);
        let g = st.grad(v.component(c));
        pbar[0] = pbar[0] + kbar[c] * g[0];
        pbar[1] = pbar[1] + kbar[c] * g[1];
    }
    pbar
}

/// Reverse-mode derivative of `rk4_step`: given the adjoint of the output
/// position, accumulates the velocity adjoints and returns the adjoint of the
/// input position.
pub(crate) fn rk4_step_reverse<T: Real>(
    x: Pos<T>,
    ua: &VectorField<T>,
    um: &VectorField<T>,
    ub: &VectorField<T>,
    h: T,
    out_bar: Pos<T>,
    acc: &mut VelocityAdjoint<'_, T>,
) -> Pos<T> {
    let half = h * T::lit(0.5);
    let p1 = x;
    let k1 = ua.sample_at(p1);
    let p2 = add_scaled(x, half, k1);
    let k2 = um.sample_at(p2);
    let p3 = add_scaled(x, half, k2);
    let k3 = um.sample_at(p3);
    let p4 = add_scaled(x, h, k3);

    let s = h / T::lit(6.0);
    let s2 = s * T::lit(2.0);
    let mut xbar = out_bar;
    let k4bar = [s * out_bar[0], s * out_bar[1]];
    let mut k3bar = [s2 * out_bar[0], s2 * out_bar[1]];
    let mut k2bar = [s2 * out_bar[0], s2 * out_bar[1]];
    let mut k1bar = [s * out_bar[0], s * out_bar[1]];

    let p4bar = stage_reverse(ub, p4, k4bar, acc.ub);
    xbar = add_scaled(xbar, T::one(), p4bar);
    k3bar = add_scaled(k3bar, h, p4bar);

    let p3bar = stage_reverse(um, p3, k3bar, acc.um);
    xbar = add_scaled(xbar, T::one(), p3bar);
    k2bar = add_scaled(k2bar, half, p3bar);

    let p2bar = stage_reverse(um, p2, k2bar, acc.um);
    xbar = add_scaled(xbar, T::one(), p2bar);
    k1bar = add_scaled(k1bar, half, p2bar);

    let p1bar = stage_reverse(ua, p1, k1bar, acc.ua);
    add_scaled(xbar, T::one(), p1bar)
}

fn nodes<T: Real>(grid: &Grid<T>) -> Vec<Pos<T>> {
    (0..grid.len()).map(|i| grid.node(i)).collect()
}

fn all_finite<T: Real>(ps: &[Pos<T>]) -> bool {
    ps.iter().all(|p| p[0].is_finite() && p[1].is_finite())
}

pub(crate) fn dt_of<T: Real>(steps: usize) -> T {
    T::one() / T::from_usize_lossy(steps)
}

/// Trajectories of the particles that sit on the nodes at time `t_k`, traced
/// back to `t_0`. Entry `j` holds the positions at time `t_j`, `j = 0..=k`.
pub(crate) fn backtrace<T: Real>(
    u_path: &TimePath<VectorField<T>>,
    mids: &[VectorField<T>],
    k: usize,
) -> Result<Vec<Vec<Pos<T>>>> {
    let grid = u_path.first().grid();
    let dt = dt_of::<T>(u_path.steps());
    let mut traj = vec![Vec::new(); k + 1];
    traj[k] = nodes(grid);
    for j in (0..k).rev() {
        let next: Vec<Pos<T>> = traj[j + 1]
            .iter()
            .map(|&x| rk4_step(x, &u_path[j + 1], &mids[j], &u_path[j], -dt))
            .collect();
        if !all_finite(&next) {
            return Err(GeoError::NonFinite { step: j });
        }
        traj[j] = next;
    }
    Ok(traj)
}

/// Positions at `t = 1` of the particles that sit on the nodes at time `t_k`.
fn forward_trace<T: Real>(u_path: &TimePath<VectorField<T>>, mids: &[VectorField<T>], k: usize) -> Result<Vec<Pos<T>>> {
    let grid = u_path.first().grid();
    let dt = dt_of::<T>(u_path.steps());
    let mut pos = nodes(grid);
    for j in k..u_path.steps() {
        for x in pos.iter_mut() {
            *x = rk4_step(*x, &u_path[j], &mids[j], &u_path[j + 1], dt);
        }
        if !all_finite(&pos) {
            return Err(GeoError::NonFinite { step: j });
        }
    }
    Ok(pos)
}

fn map_from_positions<T: Real>(grid: &Grid<T>, pos: &[Pos<T>]) -> DeformationMap<T> {
    let dim = grid.dim();
    let mut comps = vec![vec![T::zero(); grid.len()]; dim];
    for (i, p) in pos.iter().enumerate() {
        let x = grid.node(i);
        for a in 0..dim {
            comps[a][i] = p[a] - x[a];
        }
    }
    DeformationMap::from_displacement(VectorField::from_raw(grid.clone(), comps))
}

fn validate<T: Real>(u_path: &TimePath<VectorField<T>>) -> Result<()> {
    check_path_grid(u_path.first().grid(), u_path)?;
    if u_path.iter().any(|u| !u.is_finite()) {
        return Err(GeoError::InvalidInput("velocity path has non-finite values".into()));
    }
    Ok(())
}

/// Integrates `φ̇_t = u_t ∘ φ_t`, `φ_0 = Id`.
pub fn integrate_flow<T: Real>(u_path: &TimePath<VectorField<T>>) -> Result<FlowMaps<T>> {
    validate(u_path)?;
    let grid = u_path.first().grid().clone();
    let steps = u_path.steps();
    let dt = dt_of::<T>(steps);
    let mids = midpoints(u_path);

    let mut forward = Vec::with_capacity(steps + 1);
    let mut pos = nodes(&grid);
    forward.push(DeformationMap::identity(&grid));
    for j in 0..steps {
        for x in pos.iter_mut() {
            *x = rk4_step(*x, &u_path[j], &mids[j], &u_path[j + 1], dt);
        }
        if !all_finite(&pos) {
            return Err(GeoError::NonFinite { step: j });
        }
        forward.push(map_from_positions(&grid, &pos));
    }

    let mut backward = Vec::with_capacity(steps + 1);
    backward.push(DeformationMap::identity(&grid));
    for k in 1..=steps {
        let traj = backtrace(u_path, &mids, k)?;
        backward.push(map_from_positions(&grid, &traj[0]));
    }
    Ok(FlowMaps {
        forward: TimePath::new(forward)?,
        backward: TimePath::new(backward)?,
    })
}

/// `J_t = I0 ∘ φ_{t,0}`: the source image carried along the flow.
pub fn advect<T: Real>(i0: &ScalarField<T>, u_path: &TimePath<VectorField<T>>) -> Result<TimePath<ScalarField<T>>> {
    validate(u_path)?;
    i0.grid().check_same(u_path.first().grid())?;
    let mids = midpoints(u_path);
    let mut out = Vec::with_capacity(u_path.steps() + 1);
    out.push(i0.clone());
    for k in 1..=u_path.steps() {
        let traj = backtrace(u_path, &mids, k)?;
        out.push(pull_back(i0, &traj[0]));
    }
    TimePath::new(out)
}

/// `J_1 = I0 ∘ φ_{1,0}` only, along with the trajectories that produced it.
pub(crate) fn advect_final<T: Real>(
    i0: &ScalarField<T>,
    u_path: &TimePath<VectorField<T>>,
    mids: &[VectorField<T>],
) -> Result<(ScalarField<T>, Vec<Vec<Pos<T>>>)> {
    let traj = backtrace(u_path, mids, u_path.steps())?;
    Ok((pull_back(i0, &traj[0]), traj))
}

pub(crate) fn pull_back<T: Real>(f: &ScalarField<T>, pos: &[Pos<T>]) -> ScalarField<T> {
    let values = pos.iter().map(|&p| f.sample_at(p)).collect();
    ScalarField::from_raw(f.grid().clone(), values)
}

/// Backward continuity transport of a density given at `t = 1`:
/// `λ_t = (λ_1 ∘ ψ_t) · det Dψ_t`, where `ψ_t` carries time-`t` positions to `t = 1`.
pub fn continuity<T: Real>(lambda1: &ScalarField<T>, u_path: &TimePath<VectorField<T>>) -> Result<TimePath<ScalarField<T>>> {
    validate(u_path)?;
    let grid = lambda1.grid().clone();
    grid.check_same(u_path.first().grid())?;
    let steps = u_path.steps();
    let mids = midpoints(u_path);
    let mut out = vec![lambda1.clone(); steps + 1];
    for k in 0..steps {
        let pos = forward_trace(u_path, &mids, k)?;
        let map = map_from_positions(&grid, &pos);
        let det = jacobian_det_of(map.displacement());
        let values = pos
            .iter()
            .zip(det.values())
            .map(|(&p, &d)| lambda1.sample_at(p) * d)
            .collect();
        out[k] = ScalarField::from_raw(grid.clone(), values);
    }
    TimePath::new(out)
}

/// Backward continuity transport by particle deposit: the density at `t_k`
/// collects `λ_1` from every node, spread with the interpolation weights at the
/// position the node's particle occupied at `t_k`. This is the transpose of
/// the pullback used by [`advect`], and it conserves `Σ λ` exactly.
pub fn continuity_deposit<T: Real>(lambda1: &ScalarField<T>, u_path: &TimePath<VectorField<T>>) -> Result<TimePath<ScalarField<T>>> {
    validate(u_path)?;
    let grid = lambda1.grid().clone();
    grid.check_same(u_path.first().grid())?;
    let steps = u_path.steps();
    let mids = midpoints(u_path);
    let traj = backtrace(u_path, &mids, steps)?;
    let mut out = Vec::with_capacity(steps + 1);
    for pos in traj.iter() {
        let mut v = vec![T::zero(); grid.len()];
        for (&p, &l) in pos.iter().zip(lambda1.values()) {
            grid.stencil(p).scatter(&mut v, l);
        }
        out.push(ScalarField::from_raw(grid.clone(), v));
    }
    TimePath::new(out)
}
