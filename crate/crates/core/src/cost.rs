//! Exchangeable and mean-field stage costs plus Monte Carlo estimators of
//! the team cost functionals.
//!
//! Aggregation over agents always goes through sorted reductions, so
//! relabeling agents changes nothing at the bit level; aggregation over
//! replications is in replication order, so worker count changes nothing
//! either.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{stacked_means, Mode, TeamDynamics};
use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr};
use crate::grid::TimeGrid;
use crate::law::ProfileLaw;
use crate::policy::Policy;
use crate::profile::{permute_profile, Permutation, PolicyProfile};
use crate::rng::{StreamTag, Streams};
use crate::simulate::{
    derive_seed, map_replications, simulate_mckean_vlasov, LawSource, RepPaths, SimRequest,
    SimulationBatch, WienerBatch,
};
use crate::util::{ls_slope, mean_se, symmetric_mean, symmetric_sum};

/// Per-agent mean-field running cost c_hat(x, u, mu_x, mu_u).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HatCost {
    /// Expression over x, u, mean_x, mean_u.
    Expr { expr: Expr },
    /// sum_j qx[j] x_j^2 + ru[j] u_j^2 + couple_dev |x - mean_x|^2
    /// + couple_mean |mean_x|^2.
    QuadMean {
        qx: Vec<f64>,
        ru: Vec<f64>,
        couple_dev: f64,
        couple_mean: f64,
    },
    /// min(cap, inner); declares the uniform bound cap.
    Clipped { inner: Box<HatCost>, cap: f64 },
}

impl HatCost {
    pub fn eval(&self, x: &[f64], u: &[f64], mean_x: &[f64], mean_u: &[f64]) -> f64 {
        match self {
            HatCost::Expr { expr } => expr.eval(&EvalCtx {
                t: 0.0,
                x,
                u,
                mean_x: Some(mean_x),
                mean_u: Some(mean_u),
            }),
            HatCost::QuadMean {
                qx,
                ru,
                couple_dev,
                couple_mean,
            } => {
                let mut v = 0.0;
                for (j, q) in qx.iter().enumerate() {
                    v += q * x[j] * x[j];
                }
                for (j, r) in ru.iter().enumerate() {
                    v += r * u[j] * u[j];
                }
                if *couple_dev != 0.0 {
                    let mut dev = 0.0;
                    for (xi, mi) in x.iter().zip(mean_x) {
                        dev += (xi - mi) * (xi - mi);
                    }
                    v += couple_dev * dev;
                }
                if *couple_mean != 0.0 {
                    let mut ms = 0.0;
                    for mi in mean_x {
                        ms += mi * mi;
                    }
                    v += couple_mean * ms;
                }
                v
            }
            HatCost::Clipped { inner, cap } => inner.eval(x, u, mean_x, mean_u).min(*cap),
        }
    }

    /// Declared uniform bound, if any.
    pub fn bound(&self) -> Option<f64> {
        match self {
            HatCost::Clipped { cap, .. } => Some(*cap),
            _ => None,
        }
    }
}

/// Team stage cost over the joint (x^{1:N}, u^{1:N}).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum StageCost {
    /// (1/N) sum_i c_hat(x_i, u_i, emp_x, emp_u).
    MeanField {
        hat: HatCost,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
    /// sum_i x_i' Qs x_i + N xbar' Qm xbar + sum_i u_i' Rs u_i
    /// + N ubar' Rm ubar; the induced joint quadratic is block-permutation
    /// invariant by construction.
    LqgQuadratic {
        q_self: Vec<Vec<f64>>,
        q_mean: Vec<Vec<f64>>,
        r_self: Vec<Vec<f64>>,
        r_mean: Vec<Vec<f64>>,
    },
    /// Arbitrary expression over the concatenated agent variables
    /// (x[0..N*d), u[0..N*m)); permutation invariance is checked by a
    /// sampled self-test at construction.
    GeneralExchangeable {
        n_agents: usize,
        state_dim: usize,
        action_dim: usize,
        expr: Expr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
}

impl StageCost {
    pub fn mean_field(hat: HatCost) -> StageCost {
        let bound = hat.bound();
        StageCost::MeanField { hat, bound }
    }

    /// Validates shape and (for the general form) runs the sampled
    /// permutation-invariance self-test; for the LQG form checks the PSD/PD
    /// conditions of the induced joint quadratic.
    pub fn validate(&self, d: usize, m: usize, n: usize) -> Result<()> {
        match self {
            StageCost::MeanField { hat, .. } => match hat {
                HatCost::Expr { expr } => expr.validate(d, m, true),
                HatCost::QuadMean { qx, ru, .. } => {
                    if qx.len() != d || ru.len() != m {
                        return Err(Error::DimensionMismatch(
                            "quad-mean coefficient lengths".into(),
                        ));
                    }
                    Ok(())
                }
                HatCost::Clipped { inner, cap } => {
                    if !(cap.is_finite() && *cap >= 0.0) {
                        return Err(Error::InvalidArgument(format!("bad cap {cap}")));
                    }
                    StageCost::MeanField {
                        hat: (**inner).clone(),
                        bound: None,
                    }
                    .validate(d, m, n)
                }
            },
            StageCost::LqgQuadratic {
                q_self,
                q_mean,
                r_self,
                r_mean,
            } => {
                check_square(q_self, d, "q_self")?;
                check_square(q_mean, d, "q_mean")?;
                check_square(r_self, m, "r_self")?;
                check_square(r_mean, m, "r_mean")?;
                // The joint Q is similar to diag(Qs + Qm, Qs, .., Qs); PSD
                // iff both blocks are PSD. Likewise R must be PD.
                let tol = 1e-10;
                if min_sym_eig(q_self) < -tol || min_sym_eig(&mat_add(q_self, q_mean)) < -tol {
                    return Err(Error::InvalidArgument(
                        "exchangeable Q blocks are not positive semidefinite".into(),
                    ));
                }
                if min_sym_eig(r_self) <= tol || min_sym_eig(&mat_add(r_self, r_mean)) <= tol {
                    return Err(Error::NotPositiveDefinite(
                        "exchangeable R blocks are not positive definite".into(),
                    ));
                }
                Ok(())
            }
            StageCost::GeneralExchangeable {
                n_agents,
                state_dim,
                action_dim,
                expr,
                ..
            } => {
                if *n_agents != n || *state_dim != d || *action_dim != m {
                    return Err(Error::DimensionMismatch(
                        "general cost dimensions differ from the team".into(),
                    ));
                }
                expr.validate(n * d, n * m, false)?;
                self.permutation_self_test(64, 0xC057)
            }
        }
    }

    /// Sampled exchangeability check (Assumption-style): random joint points
    /// under random permutations must give equal values within 1e-9.
    pub fn permutation_self_test(&self, samples: usize, seed: u64) -> Result<()> {
        let StageCost::GeneralExchangeable {
            n_agents,
            state_dim,
            action_dim,
            ..
        } = self
        else {
            return Ok(());
        };
        let (n, d, m) = (*n_agents, *state_dim, *action_dim);
        let streams = Streams::derived(seed, "cost-self-test");
        for s in 0..samples {
            let mut x = vec![0.0; n * d];
            let mut u = vec![0.0; n * m];
            streams.fill_normals(StreamTag::Generic(0xA), s as u64, 0, 0, &mut x);
            streams.fill_normals(StreamTag::Generic(0xB), s as u64, 0, 0, &mut u);
            let base = self.evaluate(&x, &u, n)?;
            let tau = crate::profile::random_permutation(n, &streams, s as u64);
            let mut xp = vec![0.0; n * d];
            let mut up = vec![0.0; n * m];
            for i in 0..n {
                xp[i * d..(i + 1) * d].copy_from_slice(&x[tau.map[i] * d..(tau.map[i] + 1) * d]);
                up[i * m..(i + 1) * m].copy_from_slice(&u[tau.map[i] * m..(tau.map[i] + 1) * m]);
            }
            let perm = self.evaluate(&xp, &up, n)?;
            if (base - perm).abs() > 1e-9 * (1.0 + base.abs()) {
                return Err(Error::InvalidArgument(format!(
                    "cost is not exchangeable: {base} vs {perm} under {:?}",
                    tau.map
                )));
            }
        }
        Ok(())
    }

    pub fn bound(&self) -> Option<f64> {
        match self {
            StageCost::MeanField { bound, hat } => bound.or_else(|| hat.bound()),
            StageCost::GeneralExchangeable { bound, .. } => *bound,
            StageCost::LqgQuadratic { .. } => None,
        }
    }

    pub fn state_dim(&self, joint_dim_hint: usize) -> usize {
        match self {
            StageCost::LqgQuadratic { q_self, .. } => q_self.len(),
            StageCost::GeneralExchangeable { state_dim, .. } => *state_dim,
            StageCost::MeanField { .. } => joint_dim_hint,
        }
    }

    /// Evaluates the stage cost on flat agent-major arrays.
    pub fn evaluate(&self, states: &[f64], actions: &[f64], n: usize) -> Result<f64> {
        if n == 0 || states.len() % n != 0 || actions.len() % n != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} states / {} actions for {n} agents",
                states.len(),
                actions.len()
            )));
        }
        let d = states.len() / n;
        let m = actions.len() / n;
        let v = match self {
            StageCost::MeanField { hat, .. } => {
                let mut mean_x = vec![0.0; d];
                let mut mean_u = vec![0.0; m];
                stacked_means(states, n, d, &mut mean_x);
                stacked_means(actions, n, m, &mut mean_u);
                let per_agent: Vec<f64> = (0..n)
                    .map(|i| {
                        hat.eval(
                            &states[i * d..(i + 1) * d],
                            &actions[i * m..(i + 1) * m],
                            &mean_x,
                            &mean_u,
                        )
                    })
                    .collect();
                symmetric_mean(&per_agent)
            }
            StageCost::LqgQuadratic {
                q_self,
                q_mean,
                r_self,
                r_mean,
            } => {
                let mut per_agent = vec![0.0; n];
                for i in 0..n {
                    per_agent[i] = quad_form(q_self, &states[i * d..(i + 1) * d])
                        + quad_form(r_self, &actions[i * m..(i + 1) * m]);
                }
                let mut mean_x = vec![0.0; d];
                let mut mean_u = vec![0.0; m];
                stacked_means(states, n, d, &mut mean_x);
                stacked_means(actions, n, m, &mut mean_u);
                symmetric_sum(&per_agent)
                    + n as f64 * (quad_form(q_mean, &mean_x) + quad_form(r_mean, &mean_u))
            }
            StageCost::GeneralExchangeable { expr, .. } => expr.eval(&EvalCtx {
                t: 0.0,
                x: states,
                u: actions,
                mean_x: None,
                mean_u: None,
            }),
        };
        if !v.is_finite() {
            return Err(Error::NonFinite("stage cost".into()));
        }
        if v < -1e-12 {
            return Err(Error::NegativeCost(format!("stage cost evaluated to {v}")));
        }
        Ok(v)
    }
}

fn check_square(m: &[Vec<f64>], want: usize, name: &str) -> Result<()> {
    if m.len() != want || m.iter().any(|r| r.len() != want) {
        return Err(Error::DimensionMismatch(format!(
            "{name} must be {want} x {want}"
        )));
    }
    Ok(())
}

fn mat_add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect())
        .collect()
}

fn min_sym_eig(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[i][j] + m[j][i]));
    mat.symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(*v))
}

fn quad_form(m: &[Vec<f64>], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, row) in m.iter().enumerate() {
        let mut rv = 0.0;
        for (j, mij) in row.iter().enumerate() {
            rv += mij * v[j];
        }
        acc += v[i] * rv;
    }
    acc
}

/// A Monte Carlo cost estimate with its provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
    pub replications: usize,
    pub dt: f64,
    pub seed: u64,
}

impl CostEstimate {
    pub fn from_values(values: &[f64], dt: f64, seed: u64) -> CostEstimate {
        let (mean, se) = mean_se(values);
        CostEstimate {
            mean,
            se,
            replications: values.len(),
            dt,
            seed,
        }
    }

    pub fn csv_row(&self, n: usize) -> String {
        format!(
            "{n},{},{},{},{},{}",
            self.mean, self.se, self.replications, self.dt, self.seed
        )
    }
}

/// Time-integrated cost of one replication's paths (left-endpoint sum).
pub fn replication_cost(paths: &RepPaths, cost: &StageCost, grid: &TimeGrid) -> Result<f64> {
    let n = paths.n;
    let (d, m) = (paths.d, paths.m);
    let mut per_step = vec![0.0; grid.steps];
    let mut xbuf = vec![0.0; n * d];
    let mut ubuf = vec![0.0; n * m];
    for k in 0..grid.steps {
        for agent in 0..n {
            xbuf[agent * d..(agent + 1) * d].copy_from_slice(paths.state(agent, k));
            ubuf[agent * m..(agent + 1) * m].copy_from_slice(paths.action(agent, k));
        }
        per_step[k] = cost.evaluate(&xbuf, &ubuf, n)?;
    }
    Ok(grid.integrate(&per_step))
}

/// Per-replication time-integrated costs of a materialized batch.
pub fn jn_values(batch: &SimulationBatch, cost: &StageCost) -> Result<Vec<f64>> {
    let n = batch.agents;
    let (d, m) = (batch.state_dim, batch.action_dim);
    let grid = batch.grid;
    let mut out = Vec::with_capacity(batch.replications);
    let mut per_step = vec![0.0; grid.steps];
    let mut xbuf = vec![0.0; n * d];
    let mut ubuf = vec![0.0; n * m];
    for rep in 0..batch.replications {
        for k in 0..grid.steps {
            for agent in 0..n {
                xbuf[agent * d..(agent + 1) * d].copy_from_slice(batch.state(rep, agent, k));
                ubuf[agent * m..(agent + 1) * m].copy_from_slice(batch.action(rep, agent, k));
            }
            per_step[k] = cost.evaluate(&xbuf, &ubuf, n)?;
        }
        let v = grid.integrate(&per_step);
        if !v.is_finite() {
            return Err(Error::NonFinite("replication cost".into()));
        }
        out.push(v);
    }
    Ok(out)
}

/// Monte Carlo estimate of the expected team cost from a batch.
pub fn estimate_jn(batch: &SimulationBatch, cost: &StageCost) -> Result<CostEstimate> {
    let values = jn_values(batch, cost)?;
    Ok(CostEstimate::from_values(&values, batch.grid.dt(), batch.seed))
}

/// Streaming variant: simulates and integrates costs without materializing
/// the batch. Also returns the per-replication values.
pub fn estimate_jn_streamed(
    dynamics: &TeamDynamics,
    profile: &PolicyProfile,
    grid: TimeGrid,
    init: &crate::simulate::InitLaw,
    noise: &WienerBatch,
    cost: &StageCost,
    relabel: Option<&[usize]>,
) -> Result<(CostEstimate, Vec<f64>)> {
    let law = match dynamics.mode {
        Mode::Decoupled => LawSource::None,
        Mode::Coupled | Mode::MeanField => LawSource::OwnEnsemble,
    };
    let req = SimRequest {
        dynamics,
        grid,
        policies: &profile.agents,
        init,
        noise,
        relabel,
        law,
    };
    let values = map_replications(&req, |_, paths| replication_cost(paths, cost, &grid))?;
    Ok((
        CostEstimate::from_values(&values, grid.dt(), noise.seed),
        values,
    ))
}

/// Mixture estimate over a profile law. All atoms share the root seed
/// (common random numbers); atoms carrying a stream relabel simulate agent i
/// with substream relabel[i], which is how permutation-averaged mixtures
/// reproduce the unpermuted cost replication by replication.
#[derive(Clone, Debug)]
pub struct RandomizedCostEstimate {
    pub estimate: CostEstimate,
    pub per_atom: Vec<CostEstimate>,
}

pub fn estimate_randomized_cost(
    law: &ProfileLaw,
    dynamics: &TeamDynamics,
    cost: &StageCost,
    grid: TimeGrid,
    init: &crate::simulate::InitLaw,
    m_per_atom: usize,
    seed: u64,
) -> Result<RandomizedCostEstimate> {
    let n = law.agents();
    let noise = WienerBatch::new(seed, m_per_atom, n, grid.steps, dynamics.state_dim);
    let mut per_atom = Vec::with_capacity(law.atoms.len());
    let mut mixture_mean = 0.0;
    let mut var_prop = 0.0;
    for atom in &law.atoms {
        let (est, _) = estimate_jn_streamed(
            dynamics,
            &atom.profile,
            grid,
            init,
            &noise,
            cost,
            atom.stream_relabel.as_deref(),
        )?;
        mixture_mean += atom.weight * est.mean;
        var_prop += atom.weight * atom.weight * est.se * est.se;
        per_atom.push(est);
    }
    // across-atom spread contributes as if the atom were redrawn each
    // replication
    let mut across = 0.0;
    for (atom, est) in law.atoms.iter().zip(&per_atom) {
        across += atom.weight * (est.mean - mixture_mean) * (est.mean - mixture_mean);
    }
    let se = (var_prop + across / m_per_atom.max(1) as f64).sqrt();
    Ok(RandomizedCostEstimate {
        estimate: CostEstimate {
            mean: mixture_mean,
            se,
            replications: m_per_atom * law.atoms.len(),
            dt: grid.dt(),
            seed,
        },
        per_atom,
    })
}

/// J_N curve under a common policy applied i.i.d., with a mean-field
/// representative cross-check and a limsup proxy.
#[derive(Clone, Debug)]
pub struct JinfReport {
    pub per_n: Vec<(usize, CostEstimate)>,
    /// max of the last two estimates (limsup proxy; not an extrapolation).
    pub tail_max: f64,
    /// least-squares slope of ln J_N against ln N (NaN when J_N <= 0).
    pub fit_jn_exponent: f64,
    /// least-squares slope of ln |J_N - J_mv| against ln N.
    pub fit_gap_exponent: f64,
    pub mv: CostEstimate,
}

pub struct JinfConfig {
    pub n_schedule: Vec<usize>,
    pub replications: usize,
    pub mv_particles: usize,
    pub mv_replications: usize,
    pub seed: u64,
}

pub fn estimate_jinf(
    policy: &Policy,
    dynamics: &TeamDynamics,
    cost: &StageCost,
    grid: TimeGrid,
    init: &crate::simulate::InitLaw,
    cfg: &JinfConfig,
) -> Result<JinfReport> {
    let mut per_n = Vec::new();
    for &n in &cfg.n_schedule {
        let profile = PolicyProfile::symmetric(policy.clone(), n);
        let noise = WienerBatch::new(
            derive_seed(cfg.seed, &format!("jn-{n}")),
            cfg.replications,
            n,
            grid.steps,
            dynamics.state_dim,
        );
        let (est, _) = estimate_jn_streamed(dynamics, &profile, grid, init, &noise, cost, None)?;
        per_n.push((n, est));
    }

    let mv_dynamics = dynamics.clone().with_mode(Mode::MeanField)?;
    let mv_noise = WienerBatch::new(
        derive_seed(cfg.seed, "mv"),
        1,
        cfg.mv_particles,
        grid.steps,
        dynamics.state_dim,
    );
    let mut mv_values = Vec::with_capacity(cfg.mv_replications);
    for r in 0..cfg.mv_replications {
        let noise = WienerBatch::new(
            derive_seed(cfg.seed, &format!("mv-{r}")),
            1,
            cfg.mv_particles,
            grid.steps,
            dynamics.state_dim,
        );
        let batch = simulate_mckean_vlasov(&mv_dynamics, policy, grid, init, &noise)?;
        let vals = jn_values(&batch, cost)?;
        mv_values.push(vals[0]);
    }
    let mv = CostEstimate::from_values(&mv_values, grid.dt(), mv_noise.seed);

    let last = per_n.len();
    let tail_max = per_n[last.saturating_sub(2)..]
        .iter()
        .map(|(_, e)| e.mean)
        .fold(f64::NEG_INFINITY, f64::max);

    let ln_n: Vec<f64> = per_n.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let fit_jn_exponent = if per_n.iter().all(|(_, e)| e.mean > 0.0) {
        let ln_j: Vec<f64> = per_n.iter().map(|(_, e)| e.mean.ln()).collect();
        ls_slope(&ln_n, &ln_j)
    } else {
        f64::NAN
    };
    let gaps: Vec<f64> = per_n.iter().map(|(_, e)| (e.mean - mv.mean).abs()).collect();
    let fit_gap_exponent = if gaps.iter().all(|g| *g > 0.0) {
        let ln_g: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
        ls_slope(&ln_n, &ln_g)
    } else {
        f64::NAN
    };

    Ok(JinfReport {
        per_n,
        tail_max,
        fit_jn_exponent,
        fit_gap_exponent,
        mv,
    })
}

impl TeamDynamics {
    /// Same drift/diffusion with a different coupling mode.
    pub fn with_mode(mut self, mode: Mode) -> Result<TeamDynamics> {
        self.mode = mode;
        TeamDynamics::new(
            self.state_dim,
            self.action_dim,
            self.action_box.clone(),
            self.mode,
            self.drift.clone(),
            self.diffusion.clone(),
        )
    }
}

/// Bit-exact permutation-invariance check used by tests and the harness:
/// estimates the profile cost under tau with agent substreams relabeled by
/// tau and compares to the base estimate, per replication.
pub fn relabeled_estimates_match(
    dynamics: &TeamDynamics,
    profile: &PolicyProfile,
    cost: &StageCost,
    grid: TimeGrid,
    init: &crate::simulate::InitLaw,
    noise: &WienerBatch,
    tau: &Permutation,
) -> Result<bool> {
    let (_, base) = estimate_jn_streamed(dynamics, profile, grid, init, noise, cost, None)?;
    let permuted = permute_profile(profile, tau)?;
    let (_, relabeled) =
        estimate_jn_streamed(dynamics, &permuted, grid, init, noise, cost, Some(&tau.map))?;
    Ok(base
        .iter()
        .zip(&relabeled)
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::InitLaw;

    fn zero_policy(m: usize) -> Policy {
        Policy::linear(vec![vec![0.0]; m])
    }

    #[test]
    fn zero_cost_is_zero() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![0.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        assert_eq!(cost.evaluate(&[1.0, 2.0], &[0.5, 0.5], 2).unwrap(), 0.0);
    }

    #[test]
    fn lqg_identity_cost_counts_agents() {
        // Q = I, R = I per agent, x = 1 for every scalar agent, u = 0
        let cost = StageCost::LqgQuadratic {
            q_self: vec![vec![1.0]],
            q_mean: vec![vec![0.0]],
            r_self: vec![vec![1.0]],
            r_mean: vec![vec![0.0]],
        };
        for n in [1usize, 2, 5] {
            let x = vec![1.0; n];
            let u = vec![0.0; n];
            assert_eq!(cost.evaluate(&x, &u, n).unwrap(), n as f64);
        }
    }

    #[test]
    fn mean_deviation_cost_two_agent_hand_case() {
        // c_hat = (x - mean)^2; x = (0, 2) gives (1 + 1)/2 = 1
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![0.0],
            ru: vec![0.0],
            couple_dev: 1.0,
            couple_mean: 0.0,
        });
        let v = cost.evaluate(&[0.0, 2.0], &[0.0, 0.0], 2).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_cost_is_rejected() {
        let cost = StageCost::mean_field(HatCost::Expr {
            expr: Expr::parse("x - 10").unwrap(),
        });
        assert!(matches!(
            cost.evaluate(&[0.0], &[0.0], 1),
            Err(Error::NegativeCost(_))
        ));
    }

    #[test]
    fn general_exchangeable_self_test() {
        let good = StageCost::GeneralExchangeable {
            n_agents: 3,
            state_dim: 1,
            action_dim: 1,
            expr: Expr::parse("x[0]*x[1] + x[1]*x[2] + x[2]*x[0] + 9").unwrap(),
            bound: None,
        };
        good.validate(1, 1, 3).unwrap();
        let bad = StageCost::GeneralExchangeable {
            n_agents: 3,
            state_dim: 1,
            action_dim: 1,
            expr: Expr::parse("x[0] + 9").unwrap(),
            bound: None,
        };
        assert!(bad.validate(1, 1, 3).is_err());
    }

    #[test]
    fn lqg_block_validation() {
        // R = -I rejected
        let bad = StageCost::LqgQuadratic {
            q_self: vec![vec![1.0]],
            q_mean: vec![vec![0.0]],
            r_self: vec![vec![-1.0]],
            r_mean: vec![vec![0.0]],
        };
        assert!(matches!(
            bad.validate(1, 1, 2),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn constant_cost_integrates_to_horizon_exactly() {
        // c == 1 via couple_mean trick: use expr constant
        let cost = StageCost::mean_field(HatCost::Expr {
            expr: Expr::parse("1 + 0*mean_x").unwrap(),
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 49).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(1), 2);
        let init = InitLaw::Point { value: vec![1.0] };
        let noise = WienerBatch::new(5, 8, 2, 49, 1);
        let (est, values) =
            estimate_jn_streamed(&dynamics, &profile, grid, &init, &noise, &cost, None).unwrap();
        for v in values {
            assert_eq!(v, 1.0);
        }
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn driftless_quadratic_matches_fubini_oracle() {
        // E int_0^T X_t^2 dt = T^2 / 2 for X driftless standard BM from 0.
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 0.0, 1.0);
        let k = 100;
        let grid = TimeGrid::new(1.0, k).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(1), 1);
        let init = InitLaw::Point { value: vec![0.0] };
        let m = 40_000;
        let noise = WienerBatch::new(21, m, 1, k, 1);
        let (est, _) =
            estimate_jn_streamed(&dynamics, &profile, grid, &init, &noise, &cost, None).unwrap();
        // left-endpoint quadrature bias is dt*T/2 downward
        let oracle = 0.5;
        let bias_budget = grid.dt() * 1.0;
        assert!(
            (est.mean - oracle).abs() <= 3.0 * est.se + bias_budget,
            "mean {} se {} oracle {oracle}",
            est.mean,
            est.se
        );
    }

    #[test]
    fn single_atom_law_matches_estimate_jn_bit_exact() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.0],
            couple_dev: 0.5,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let profile = PolicyProfile::new(vec![
            Policy::linear(vec![vec![0.1]]),
            Policy::linear(vec![vec![-0.2]]),
        ]);
        let init = InitLaw::GaussianIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let seed = 77;
        let m = 500;
        let law = ProfileLaw::point_mass(profile.clone());
        let rc = estimate_randomized_cost(&law, &dynamics, &cost, grid, &init, m, seed).unwrap();
        let noise = WienerBatch::new(seed, m, 2, 20, 1);
        let (direct, _) =
            estimate_jn_streamed(&dynamics, &profile, grid, &init, &noise, &cost, None).unwrap();
        assert_eq!(rc.estimate.mean.to_bits(), direct.mean.to_bits());
    }

    #[test]
    fn duplicate_atoms_with_shared_seed_collapse() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let profile = PolicyProfile::symmetric(Policy::linear(vec![vec![0.0]]), 2);
        let init = InitLaw::Point { value: vec![1.0] };
        let law = ProfileLaw::from_atoms(vec![
            crate::law::LawAtom {
                weight: 0.5,
                profile: profile.clone(),
                stream_relabel: None,
            },
            crate::law::LawAtom {
                weight: 0.5,
                profile: profile.clone(),
                stream_relabel: None,
            },
        ])
        .unwrap();
        let rc = estimate_randomized_cost(&law, &dynamics, &cost, grid, &init, 200, 3).unwrap();
        let single = estimate_randomized_cost(
            &ProfileLaw::point_mass(profile),
            &dynamics,
            &cost,
            grid,
            &init,
            200,
            3,
        )
        .unwrap();
        assert_eq!(rc.estimate.mean.to_bits(), single.estimate.mean.to_bits());
    }


    #[test]
    fn two_atom_mixture_is_affine_in_weights() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.1],
            couple_dev: 0.3,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 15).unwrap();
        let init = InitLaw::GaussianIid {
            mean: vec![0.5],
            std: vec![0.5],
        };
        let p = PolicyProfile::new(vec![
            Policy::linear(vec![vec![0.2]]),
            Policy::linear(vec![vec![-0.6]]),
        ]);
        let q = PolicyProfile::new(vec![
            Policy::linear(vec![vec![-0.1]]),
            Policy::linear(vec![vec![0.4]]),
        ]);
        let seed = 17;
        let m = 300;
        let jp = estimate_randomized_cost(
            &ProfileLaw::point_mass(p.clone()),
            &dynamics,
            &cost,
            grid,
            &init,
            m,
            seed,
        )
        .unwrap()
        .estimate
        .mean;
        let jq = estimate_randomized_cost(
            &ProfileLaw::point_mass(q.clone()),
            &dynamics,
            &cost,
            grid,
            &init,
            m,
            seed,
        )
        .unwrap()
        .estimate
        .mean;
        for alpha in [0.1, 0.25, 0.5, 0.9] {
            let law = ProfileLaw::from_atoms(vec![
                crate::law::LawAtom {
                    weight: alpha,
                    profile: p.clone(),
                    stream_relabel: None,
                },
                crate::law::LawAtom {
                    weight: 1.0 - alpha,
                    profile: q.clone(),
                    stream_relabel: None,
                },
            ])
            .unwrap();
            let mix = estimate_randomized_cost(&law, &dynamics, &cost, grid, &init, m, seed)
                .unwrap()
                .estimate
                .mean;
            let affine = alpha * jp + (1.0 - alpha) * jq;
            assert!((mix - affine).abs() <= 1e-12, "{mix} vs {affine}");
        }
    }

    #[test]
    fn exchangeable_average_mixture_reproduces_base_estimate() {
        // permutation-averaged law with relabeled substreams: every atom
        // reproduces the base cost replication by replication
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.2],
            couple_dev: 0.4,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let init = InitLaw::GaussianIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let profile = PolicyProfile::new(vec![
            Policy::linear(vec![vec![0.3]]),
            Policy::linear(vec![vec![-0.5]]),
            Policy::linear(vec![vec![0.1]]),
        ]);
        let law = crate::law::exchangeable_average(&ProfileLaw::point_mass(profile.clone()))
            .unwrap();
        let seed = 23;
        let m = 200;
        let mixture =
            estimate_randomized_cost(&law, &dynamics, &cost, grid, &init, m, seed).unwrap();
        let single = estimate_randomized_cost(
            &ProfileLaw::point_mass(profile),
            &dynamics,
            &cost,
            grid,
            &init,
            m,
            seed,
        )
        .unwrap();
        for atom_est in &mixture.per_atom {
            assert_eq!(
                atom_est.mean.to_bits(),
                single.estimate.mean.to_bits(),
                "every permuted atom equals the original at matched relabeled noise"
            );
        }
        assert!((mixture.estimate.mean - single.estimate.mean).abs() <= 1e-12);
    }

    #[test]
    fn jinf_flat_when_cost_ignores_the_population() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let init = InitLaw::Point { value: vec![1.0] };
        let report = estimate_jinf(
            &Policy::linear(vec![vec![0.0]]),
            &dynamics,
            &cost,
            grid,
            &init,
            &JinfConfig {
                n_schedule: vec![2, 4, 8],
                replications: 4_000,
                mv_particles: 512,
                mv_replications: 4,
                seed: 3,
            },
        )
        .unwrap();
        let first = &report.per_n[0].1;
        for (_, est) in &report.per_n {
            let tol = 3.0 * (est.se * est.se + first.se * first.se).sqrt();
            assert!((est.mean - first.mean).abs() <= tol);
        }
        assert!((report.tail_max - first.mean).abs() <= 4.0 * first.se);
    }

    #[test]
    fn jinf_mean_square_cost_decays_like_one_over_n() {
        // c_hat = mean(mu_x)^2 with centered i.i.d. states: J_N ~ 1/N
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![0.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 1.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let init = InitLaw::GaussianIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let report = estimate_jinf(
            &Policy::linear(vec![vec![0.0]]),
            &dynamics,
            &cost,
            grid,
            &init,
            &JinfConfig {
                n_schedule: vec![2, 4, 8, 16, 32],
                replications: 20_000,
                mv_particles: 1024,
                mv_replications: 4,
                seed: 5,
            },
        )
        .unwrap();
        assert!(
            report.fit_jn_exponent > -1.4 && report.fit_jn_exponent < -0.6,
            "exponent {}",
            report.fit_jn_exponent
        );
    }

    #[test]
    fn jinf_mv_representative_agrees_with_largest_n() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.0],
            couple_dev: 0.5,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let init = InitLaw::GaussianIid {
            mean: vec![1.0],
            std: vec![0.5],
        };
        let report = estimate_jinf(
            &Policy::linear(vec![vec![0.0]]),
            &dynamics,
            &cost,
            grid,
            &init,
            &JinfConfig {
                n_schedule: vec![4, 16, 64],
                replications: 10_000,
                mv_particles: 2048,
                mv_replications: 8,
                seed: 7,
            },
        )
        .unwrap();
        let (n_max, last) = &report.per_n[report.per_n.len() - 1];
        let budget = 1.0 / (*n_max as f64).sqrt();
        let tol = 3.0 * (last.se * last.se + report.mv.se * report.mv.se).sqrt() + 0.5 * budget;
        assert!(
            (last.mean - report.mv.mean).abs() <= tol,
            "J_{n_max} = {} vs J_mv = {}",
            last.mean,
            report.mv.mean
        );
    }

    #[test]
    fn permutation_invariance_bit_exact_small() {
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.2],
            couple_dev: 0.7,
            couple_mean: 0.0,
        });
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(0.5, 12).unwrap();
        let profile = PolicyProfile::new(vec![
            Policy::linear(vec![vec![0.1]]),
            Policy::linear(vec![vec![-0.3]]),
            Policy::linear(vec![vec![0.25]]),
        ]);
        let init = InitLaw::GaussianIid {
            mean: vec![0.5],
            std: vec![0.3],
        };
        let noise = WienerBatch::new(11, 64, 3, 12, 1);
        for tau in Permutation::enumerate(3) {
            assert!(relabeled_estimates_match(
                &dynamics, &profile, &cost, grid, &init, &noise, &tau
            )
            .unwrap());
        }
    }
}
