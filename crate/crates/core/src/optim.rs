//! Gradient descent with backtracking Armijo line search.

use crate::{GeoError, Result};

/// Anything that reports a scalar objective value for the trace.
pub trait EnergyValue {
    fn total(&self) -> f64;
}

impl EnergyValue for f64 {
    fn total(&self) -> f64 {
        *self
    }
}

#[derive(Clone, Debug)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Stop once the relative energy decrease of an accepted step drops below this.
    pub tol: f64,
    pub initial_step: f64,
    /// Sufficient-decrease constant.
    pub armijo_c: f64,
    pub max_halvings: usize,
    /// Step-size multiplier applied after an accepted step.
    pub growth: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            initial_step: 1.0,
            armijo_c: 1e-4,
            max_halvings: 30,
            growth: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DescentTrace<E> {
    /// Energy at the start and after every accepted step.
    pub energies: Vec<E>,
    pub converged: bool,
    pub line_search_failed: bool,
    pub iterations: usize,
    pub final_step: f64,
}

/// Minimises an objective by steepest descent in a caller-chosen metric.
///
/// `gradient` returns a descent direction `g` together with the slope
/// `‖g‖²` in the metric the direction was computed in, so the directional
/// derivative along `−g` is `−slope`. `retract(x, g, η)` forms `x − η g`.
/// Trial points whose energy cannot be evaluated (non-finite transport) are
/// treated like energy increases.
pub fn armijo_descent<P, E, F, G, R>(
    x0: P,
    opts: &DescentOptions,
    mut energy: F,
    mut gradient: G,
    retract: R,
) -> Result<(P, DescentTrace<E>)>
where
    E: EnergyValue + Clone,
    F: FnMut(&P) -> Result<E>,
    G: FnMut(&P) -> Result<(P, f64)>,
    R: Fn(&P, &P, f64) -> P,
{
    let mut x = x0;
    let mut e = energy(&x)?;
    if !e.total().is_finite() {
        return Err(GeoError::NonFinite { step: 0 });
    }
    let mut trace = DescentTrace {
        energies: vec![e.clone()],
        converged: false,
        line_search_failed: false,
        iterations: 0,
        final_step: opts.initial_step,
    };
    let mut eta = opts.initial_step;
    for iter in 0..opts.max_iters {
        trace.iterations = iter;
        let (g, slope) = gradient(&x)?;
        if !slope.is_finite() {
            return Err(GeoError::NonFinite { step: iter });
        }
        if slope <= 0.0 || e.total() == 0.0 {
            trace.converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = retract(&x, &g, eta);
            match energy(&trial) {
                Ok(et) if et.total().is_finite() && et.total() <= e.total() - opts.armijo_c * eta * slope => {
                    accepted = Some((trial, et));
                    break;
                }
                Ok(_) | Err(GeoError::NonFinite { .. }) => eta *= 0.5,
                Err(err) => return Err(err),
            }
        }
        let Some((trial, et)) = accepted else {
            trace.line_search_failed = true;
            break;
        };
        let rel = (e.total() - et.total()) / e.total().abs().max(f64::MIN_POSITIVE);
        x = trial;
        e = et;
        trace.energies.push(e.clone());
        trace.iterations = iter + 1;
        trace.final_step = eta;
        eta *= opts.growth;
        if rel < opts.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}
