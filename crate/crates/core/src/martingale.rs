//! Generator-based martingale residuals: for a smooth f, the empirical mean
//! of f(X_t) - f(X_0) - sum_k [Tr(a grad2 f) + b . grad f] dt should vanish
//! up to O(dt) discretization bias plus Monte Carlo error, where
//! a = sigma sigma^T / 2.

use nalgebra::DMatrix;

use crate::dynamics::TeamDynamics;
use crate::error::{Error, Result};
use crate::simulate::SimulationBatch;
use crate::util::{all_finite, mean_se, symmetric_mean};

/// A twice continuously differentiable test function with analytic
/// derivatives.
pub trait TestFunction: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Row-major d x d Hessian.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// f(x) = c.
pub struct ConstantFn(pub f64);

impl TestFunction for ConstantFn {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// f(x) = x_i.
pub struct CoordinateFn(pub usize);

impl TestFunction for CoordinateFn {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.0.min(x.len() - 1)] = 1.0;
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// f(x) = x_i^2.
pub struct CoordinateSquaredFn(pub usize);

impl TestFunction for CoordinateSquaredFn {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0] * x[self.0]
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[self.0] = 2.0 * x[self.0];
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let d = x.len();
        out[self.0 * d + self.0] = 2.0;
    }
}

/// Residual statistics at one grid time.
#[derive(Clone, Debug)]
pub struct ResidualStat {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
}

/// Computes per-time residual statistics over the batch. The per-replication
/// value averages agents symmetrically; the standard error is across
/// replications.
pub fn martingale_residual(
    batch: &SimulationBatch,
    dynamics: &TeamDynamics,
    f: &dyn TestFunction,
) -> Result<Vec<ResidualStat>> {
    let d = dynamics.state_dim;
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();

    // residuals[k][rep]
    let mut residuals = vec![vec![0.0; batch.replications]; steps + 1];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut drift = vec![0.0; d];
    let mut sigma = DMatrix::zeros(d, d);
    let mut per_agent = vec![0.0; batch.agents];

    for rep in 0..batch.replications {
        for k in 0..=steps {
            for agent in 0..batch.agents {
                if k == 0 {
                    per_agent[agent] = 0.0;
                }
                let x0 = batch.state(rep, agent, 0);
                let xk = batch.state(rep, agent, k);
                let mut acc = f.value(xk) - f.value(x0);
                // integrated generator over j < k
                let mut gen_sum = 0.0;
                for j in 0..k {
                    let t = batch.grid.t(j);
                    let xj = batch.state(rep, agent, j);
                    let uj = batch.action(rep, agent, j);
                    dynamics.drift_into(t, xj, uj, None, &mut drift);
                    f.gradient(xj, &mut grad);
                    f.hessian(xj, &mut hess);
                    dynamics.sigma_into(t, xj, &mut sigma);
                    // a = sigma sigma^T / 2; generator = Tr(a H) + b . grad
                    let mut gen = 0.0;
                    for r in 0..d {
                        for c in 0..d {
                            let mut a_rc = 0.0;
                            for l in 0..d {
                                a_rc += sigma[(r, l)] * sigma[(c, l)];
                            }
                            gen += 0.5 * a_rc * hess[c * d + r];
                        }
                        gen += drift[r] * grad[r];
                    }
                    gen_sum += gen * dt;
                }
                acc -= gen_sum;
                per_agent[agent] = acc;
            }
            residuals[k][rep] = symmetric_mean(&per_agent);
        }
        if !all_finite(&residuals[steps]) {
            return Err(Error::NonFinite("martingale residual".into()));
        }
    }

    Ok((0..=steps)
        .map(|k| {
            let (mean, se) = mean_se(&residuals[k]);
            ResidualStat {
                t: batch.grid.t(k),
                mean,
                se,
            }
        })
        .collect())
}

/// Terminal residual only, computed incrementally (cheap path used by the
/// acceptance suite at large M).
pub fn terminal_residual_values(
    batch: &SimulationBatch,
    dynamics: &TeamDynamics,
    f: &dyn TestFunction,
) -> Result<Vec<f64>> {
    let d = dynamics.state_dim;
    let steps = batch.grid.steps;
    let dt = batch.grid.dt();
    let mut out = Vec::with_capacity(batch.replications);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut drift = vec![0.0; d];
    let mut sigma = DMatrix::zeros(d, d);
    let mut per_agent = vec![0.0; batch.agents];
    for rep in 0..batch.replications {
        for agent in 0..batch.agents {
            let x0 = batch.state(rep, agent, 0);
            let xt = batch.state(rep, agent, steps);
            let mut gen_sum = 0.0;
            for j in 0..steps {
                let t = batch.grid.t(j);
                let xj = batch.state(rep, agent, j);
                let uj = batch.action(rep, agent, j);
                dynamics.drift_into(t, xj, uj, None, &mut drift);
                f.gradient(xj, &mut grad);
                f.hessian(xj, &mut hess);
                dynamics.sigma_into(t, xj, &mut sigma);
                let mut gen = 0.0;
                for r in 0..d {
                    for c in 0..d {
                        let mut a_rc = 0.0;
                        for l in 0..d {
                            a_rc += sigma[(r, l)] * sigma[(c, l)];
                        }
                        gen += 0.5 * a_rc * hess[c * d + r];
                    }
                    gen += drift[r] * grad[r];
                }
                gen_sum += gen * dt;
            }
            per_agent[agent] = f.value(xt) - f.value(x0) - gen_sum;
        }
        let v = symmetric_mean(&per_agent);
        if !v.is_finite() {
            return Err(Error::NonFinite("martingale residual".into()));
        }
        out.push(v);
    }
    Ok(out)
}

/// Streaming variant of the terminal residual: simulates and folds without
/// materializing a batch, so very large replication counts stay cheap.
pub fn streamed_terminal_residuals(
    dynamics: &TeamDynamics,
    profile: &crate::profile::PolicyProfile,
    grid: crate::grid::TimeGrid,
    init: &crate::simulate::InitLaw,
    noise: &crate::simulate::WienerBatch,
    f: &dyn TestFunction,
) -> Result<Vec<f64>> {
    let d = dynamics.state_dim;
    let req = crate::simulate::SimRequest {
        dynamics,
        grid,
        policies: &profile.agents,
        init,
        noise,
        relabel: None,
        law: match dynamics.mode {
            crate::dynamics::Mode::Decoupled => crate::simulate::LawSource::None,
            _ => crate::simulate::LawSource::OwnEnsemble,
        },
    };
    let dt = grid.dt();
    crate::simulate::map_replications(&req, |_, paths| {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut drift = vec![0.0; d];
        let mut sigma = DMatrix::zeros(d, d);
        let mut per_agent = vec![0.0; paths.n];
        for agent in 0..paths.n {
            let x0 = paths.state(agent, 0);
            let xt = paths.state(agent, grid.steps);
            let mut gen_sum = 0.0;
            for j in 0..grid.steps {
                let t = grid.t(j);
                let xj = paths.state(agent, j);
                let uj = paths.action(agent, j);
                dynamics.drift_into(t, xj, uj, None, &mut drift);
                f.gradient(xj, &mut grad);
                f.hessian(xj, &mut hess);
                dynamics.sigma_into(t, xj, &mut sigma);
                let mut gen = 0.0;
                for r in 0..d {
                    for c in 0..d {
                        let mut a_rc = 0.0;
                        for l in 0..d {
                            a_rc += sigma[(r, l)] * sigma[(c, l)];
                        }
                        gen += 0.5 * a_rc * hess[c * d + r];
                    }
                    gen += drift[r] * grad[r];
                }
                gen_sum += gen * dt;
            }
            per_agent[agent] = f.value(xt) - f.value(x0) - gen_sum;
        }
        let v = symmetric_mean(&per_agent);
        if !v.is_finite() {
            return Err(Error::NonFinite("martingale residual".into()));
        }
        Ok(v)
    })
}
