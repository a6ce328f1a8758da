//! Desk-scale search for symmetric policies: common-random-number grid
//! search and simultaneous-perturbation descent over finite policy
//! parameterizations, plus the mean-field-vs-finite-N gap computation.
//!
//! Baselines found here are best-in-family under a declared budget, never
//! claimed global optima; gap reports are always relative to such a
//! baseline.

use serde::{Deserialize, Serialize};

use crate::cost::StageCost;
use crate::dynamics::{Mode, TeamDynamics};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::policy::Policy;
use crate::profile::PolicyProfile;
use crate::rng::{StreamTag, Streams};
use crate::simulate::{derive_seed, InitLaw, WienerBatch};
use crate::util::mean_se;

/// Finite-dimensional symmetric policy family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PolicyFamily {
    /// theta holds m x d gains for each time bin, flattened bin-major.
    LinearFeedback {
        state_dim: usize,
        action_dim: usize,
        #[serde(default)]
        t_edges: Vec<f64>,
        theta_lo: Vec<f64>,
        theta_hi: Vec<f64>,
    },
    /// theta holds the scalar-state lookup table, t-bin major.
    GridKernel {
        t_edges: Vec<f64>,
        x_edges: Vec<f64>,
        action_dim: usize,
        theta_lo: Vec<f64>,
        theta_hi: Vec<f64>,
    },
}

impl PolicyFamily {
    pub fn dim(&self) -> usize {
        match self {
            PolicyFamily::LinearFeedback {
                state_dim,
                action_dim,
                t_edges,
                ..
            } => (t_edges.len() + 1) * state_dim * action_dim,
            PolicyFamily::GridKernel {
                t_edges,
                x_edges,
                action_dim,
                ..
            } => (t_edges.len() + 1) * (x_edges.len() + 1) * action_dim,
        }
    }

    pub fn theta_box(&self) -> (&[f64], &[f64]) {
        match self {
            PolicyFamily::LinearFeedback {
                theta_lo, theta_hi, ..
            }
            | PolicyFamily::GridKernel {
                theta_lo, theta_hi, ..
            } => (theta_lo, theta_hi),
        }
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        let (lo, hi) = self.theta_box();
        for ((t, l), h) in theta.iter_mut().zip(lo).zip(hi) {
            *t = t.max(*l).min(*h);
        }
    }

    pub fn policy(&self, theta: &[f64]) -> Result<Policy> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries, family needs {}",
                theta.len(),
                self.dim()
            )));
        }
        match self {
            PolicyFamily::LinearFeedback {
                state_dim,
                action_dim,
                t_edges,
                ..
            } => {
                let (d, m) = (*state_dim, *action_dim);
                let bins = t_edges.len() + 1;
                let mut gains = Vec::with_capacity(bins);
                for b in 0..bins {
                    let mut k = vec![vec![0.0; d]; m];
                    for i in 0..m {
                        for j in 0..d {
                            k[i][j] = theta[b * m * d + i * d + j];
                        }
                    }
                    gains.push(k);
                }
                if t_edges.is_empty() {
                    Ok(Policy::linear(gains.pop().expect("one bin")))
                } else {
                    Policy::linear_binned(t_edges.clone(), gains)
                }
            }
            PolicyFamily::GridKernel {
                t_edges,
                x_edges,
                action_dim,
                ..
            } => {
                let tb = t_edges.len() + 1;
                let xb = x_edges.len() + 1;
                let m = *action_dim;
                let mut table = vec![vec![vec![0.0; m]; xb]; tb];
                for ti in 0..tb {
                    for xi in 0..xb {
                        for j in 0..m {
                            table[ti][xi][j] = theta[(ti * xb + xi) * m + j];
                        }
                    }
                }
                Ok(Policy::Grid {
                    t_bins: crate::policy::Bins {
                        edges: t_edges.clone(),
                    },
                    x_bins: crate::policy::Bins {
                        edges: x_edges.clone(),
                    },
                    table,
                })
            }
        }
    }
}

/// An objective evaluated by common random numbers: same seed, same noise.
pub trait Objective: Sync {
    /// Per-replication cost values of the symmetric policy.
    fn values(&self, policy: &Policy, seed: u64) -> Result<Vec<f64>>;

    fn estimate(&self, policy: &Policy, seed: u64) -> Result<(f64, f64)> {
        let v = self.values(policy, seed)?;
        Ok(mean_se(&v))
    }
}

/// Finite-N team objective under a symmetric profile.
pub struct TeamObjective<'a> {
    pub dynamics: &'a TeamDynamics,
    pub cost: &'a StageCost,
    pub grid: TimeGrid,
    pub init: &'a InitLaw,
    pub n_agents: usize,
    pub replications: usize,
}

impl Objective for TeamObjective<'_> {
    fn values(&self, policy: &Policy, seed: u64) -> Result<Vec<f64>> {
        let profile = PolicyProfile::symmetric(policy.clone(), self.n_agents);
        let noise = WienerBatch::new(
            seed,
            self.replications,
            self.n_agents,
            self.grid.steps,
            self.dynamics.state_dim,
        );
        let (_, values) = crate::cost::estimate_jn_streamed(
            self.dynamics,
            &profile,
            self.grid,
            self.init,
            &noise,
            self.cost,
            None,
        )?;
        Ok(values)
    }
}

/// Mean-field representative objective: the policy drives a particle
/// ensemble and the cost is read off the ensemble itself.
pub struct MeanFieldObjective<'a> {
    pub dynamics: &'a TeamDynamics,
    pub cost: &'a StageCost,
    pub grid: TimeGrid,
    pub init: &'a InitLaw,
    pub particles: usize,
    pub replications: usize,
}

impl Objective for MeanFieldObjective<'_> {
    fn values(&self, policy: &Policy, seed: u64) -> Result<Vec<f64>> {
        let mv_dyn = self.dynamics.clone().with_mode(Mode::MeanField)?;
        let mut out = Vec::with_capacity(self.replications);
        for r in 0..self.replications {
            let noise = WienerBatch::new(
                derive_seed(seed, &format!("mf-objective-{r}")),
                1,
                self.particles,
                self.grid.steps,
                self.dynamics.state_dim,
            );
            let batch = crate::simulate::simulate_mckean_vlasov(
                &mv_dyn, policy, self.grid, self.init, &noise,
            )?;
            out.push(crate::cost::jn_values(&batch, self.cost)?[0]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub theta: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub iterates: Vec<TracePoint>,
    pub best_index: usize,
    pub best_theta: Vec<f64>,
    pub best_mean: f64,
    pub best_se: f64,
    pub seed: u64,
}

impl OptimizationTrace {
    pub fn best_policy(&self, family: &PolicyFamily) -> Result<Policy> {
        family.policy(&self.best_theta)
    }
}

/// Evaluates every theta on identical noise; the argmin is reported with
/// ties broken by the lowest index.
pub fn grid_search(
    family: &PolicyFamily,
    thetas: &[Vec<f64>],
    objective: &dyn Objective,
    seed: u64,
) -> Result<OptimizationTrace> {
    if thetas.is_empty() {
        return Err(Error::EmptySample("empty theta grid".into()));
    }
    let mut iterates = Vec::with_capacity(thetas.len());
    let mut best_index = 0usize;
    for (i, theta) in thetas.iter().enumerate() {
        let policy = family.policy(theta)?;
        let (mean, se) = objective.estimate(&policy, seed)?;
        iterates.push(TracePoint {
            theta: theta.clone(),
            mean,
            se,
            step_size: 0.0,
        });
        if mean < iterates[best_index].mean {
            best_index = i;
        }
    }
    Ok(OptimizationTrace {
        best_theta: iterates[best_index].theta.clone(),
        best_mean: iterates[best_index].mean,
        best_se: iterates[best_index].se,
        best_index,
        iterates,
        seed,
    })
}

/// Gain schedule for the simultaneous-perturbation descent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpsaGains {
    pub a: f64,
    pub a_stability: f64,
    pub alpha: f64,
    pub c: f64,
    pub gamma: f64,
}

impl Default for SpsaGains {
    fn default() -> Self {
        SpsaGains {
            a: 0.2,
            a_stability: 10.0,
            alpha: 0.602,
            c: 0.1,
            gamma: 0.101,
        }
    }
}

/// Two-sided simultaneous-perturbation descent with common-random-number
/// pairing; iterates are projected onto the theta box. Aborts with a
/// divergence error when the estimate exceeds ten times the initial cost
/// for five consecutive iterations.
pub fn spsa_descent(
    family: &PolicyFamily,
    theta0: &[f64],
    objective: &dyn Objective,
    iterations: usize,
    gains: &SpsaGains,
    seed: u64,
) -> Result<OptimizationTrace> {
    let p = family.dim();
    let mut theta = theta0.to_vec();
    family.clamp(&mut theta);
    let streams = Streams::derived(seed, "spsa");
    let mut iterates = Vec::with_capacity(iterations + 1);
    let (j0, se0) = objective.estimate(&family.policy(&theta)?, seed)?;
    iterates.push(TracePoint {
        theta: theta.clone(),
        mean: j0,
        se: se0,
        step_size: 0.0,
    });
    let mut best_index = 0usize;
    let mut runaway = 0usize;

    for k in 0..iterations {
        let ak = gains.a / (k as f64 + 1.0 + gains.a_stability).powf(gains.alpha);
        let ck = gains.c / (k as f64 + 1.0).powf(gains.gamma);
        // Rademacher perturbation
        let delta: Vec<f64> = (0..p)
            .map(|i| {
                if streams.uniform(StreamTag::Perturb, k as u64, i as u64, 0, 0) < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect();
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        for i in 0..p {
            plus[i] += ck * delta[i];
            minus[i] -= ck * delta[i];
        }
        family.clamp(&mut plus);
        family.clamp(&mut minus);
        let eval_seed = derive_seed(seed, &format!("spsa-eval-{k}"));
        let (jp, _) = objective.estimate(&family.policy(&plus)?, eval_seed)?;
        let (jm, _) = objective.estimate(&family.policy(&minus)?, eval_seed)?;
        let diff = (jp - jm) / (2.0 * ck);
        for i in 0..p {
            theta[i] -= ak * diff / delta[i];
        }
        family.clamp(&mut theta);

        let (jk, sek) = objective.estimate(&family.policy(&theta)?, seed)?;
        iterates.push(TracePoint {
            theta: theta.clone(),
            mean: jk,
            se: sek,
            step_size: ak,
        });
        if jk < iterates[best_index].mean {
            best_index = iterates.len() - 1;
        }
        if jk > 10.0 * j0.abs().max(1e-12) {
            runaway += 1;
            if runaway >= 5 {
                return Err(Error::Divergence(format!(
                    "cost {jk} exceeded 10x initial {j0} for five consecutive iterations"
                )));
            }
        } else {
            runaway = 0;
        }
    }

    Ok(OptimizationTrace {
        best_theta: iterates[best_index].theta.clone(),
        best_mean: iterates[best_index].mean,
        best_se: iterates[best_index].se,
        best_index,
        iterates,
        seed,
    })
}

/// One point of the mean-field near-optimality curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapPoint {
    pub n: usize,
    pub gap: f64,
    pub se: f64,
    pub jn_mf_policy: f64,
    pub jn_baseline: f64,
}

/// gap(N) = J_N(mean-field policy applied i.i.d.) - J_N(per-N baseline),
/// evaluated on shared noise so the difference is paired per replication.
pub fn epsilon_gap(
    mf_policy: &Policy,
    baselines: &[(usize, Policy)],
    dynamics: &TeamDynamics,
    cost: &StageCost,
    grid: TimeGrid,
    init: &InitLaw,
    replications: usize,
    seed: u64,
) -> Result<Vec<GapPoint>> {
    let mut out = Vec::with_capacity(baselines.len());
    for (n, baseline) in baselines {
        let objective = TeamObjective {
            dynamics,
            cost,
            grid,
            init,
            n_agents: *n,
            replications,
        };
        let eval_seed = derive_seed(seed, &format!("gap-{n}"));
        let v_mf = objective.values(mf_policy, eval_seed)?;
        let v_base = objective.values(baseline, eval_seed)?;
        let diffs: Vec<f64> = v_mf.iter().zip(&v_base).map(|(a, b)| a - b).collect();
        let (gap, se) = mean_se(&diffs);
        let (jm, _) = mean_se(&v_mf);
        let (jb, _) = mean_se(&v_base);
        out.push(GapPoint {
            n: *n,
            gap,
            se,
            jn_mf_policy: jm,
            jn_baseline: jb,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::HatCost;
    use crate::lqg::{build_operators, solve_open_loop, LqgSpec};

    fn scalar_family(lo: f64, hi: f64) -> PolicyFamily {
        PolicyFamily::LinearFeedback {
            state_dim: 1,
            action_dim: 1,
            t_edges: vec![],
            theta_lo: vec![lo],
            theta_hi: vec![hi],
        }
    }

    fn stable_lqg() -> (LqgSpec, TimeGrid) {
        let spec = LqgSpec {
            a: vec![vec![-1.0]],
            b: vec![vec![1.0]],
            sigma: vec![vec![0.0]],
            n_agents: 1,
            cost: StageCost::LqgQuadratic {
                q_self: vec![vec![1.0]],
                q_mean: vec![vec![0.0]],
                r_self: vec![vec![1.0]],
                r_mean: vec![vec![0.0]],
            },
            init: InitLaw::Point { value: vec![1.0] },
        };
        (spec, TimeGrid::new(1.0, 50).unwrap())
    }

    #[test]
    fn single_point_grid_is_best() {
        let (spec, grid) = stable_lqg();
        let dynamics = spec.to_dynamics().unwrap();
        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 1,
        };
        let trace = grid_search(&family, &[vec![-0.5]], &objective, 1).unwrap();
        assert_eq!(trace.best_index, 0);
        assert_eq!(trace.best_theta, vec![-0.5]);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let (spec, grid) = stable_lqg();
        let dynamics = spec.to_dynamics().unwrap();
        // zero cost: every theta ties
        let zero_cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![0.0],
            ru: vec![0.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &zero_cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 4,
        };
        let thetas: Vec<Vec<f64>> = (0..5).map(|i| vec![-0.1 * i as f64]).collect();
        let trace = grid_search(&family, &thetas, &objective, 1).unwrap();
        assert_eq!(trace.best_index, 0);
    }

    #[test]
    fn grid_search_matches_oracle_within_two_percent() {
        let (spec, grid) = stable_lqg();
        let dynamics = spec.to_dynamics().unwrap();
        let dq = build_operators(&spec, grid).unwrap();
        let oracle = solve_open_loop(&dq, &[1.0]).unwrap();

        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 1,
        };
        let thetas: Vec<Vec<f64>> = (0..21).map(|i| vec![-2.0 + 0.1 * i as f64]).collect();
        let trace = grid_search(&family, &thetas, &objective, 3).unwrap();
        let rel = (trace.best_mean - oracle.total_cost) / oracle.total_cost;
        assert!(rel >= -1e-8, "family beat the oracle: {rel}");
        assert!(rel <= 0.02, "best {} oracle {}", trace.best_mean, oracle.total_cost);
    }

    #[test]
    fn crn_prefix_is_stable_under_more_replications() {
        let (spec, grid) = stable_lqg();
        let mut spec = spec;
        spec.sigma = vec![vec![0.5]];
        let dynamics = spec.to_dynamics().unwrap();
        let policy = Policy::linear(vec![vec![-0.4]]);
        let small = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 50,
        };
        let big = TeamObjective {
            replications: 100,
            ..small
        };
        let v_small = small.values(&policy, 42).unwrap();
        let v_big = big.values(&policy, 42).unwrap();
        for (a, b) in v_small.iter().zip(v_big.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn spsa_reaches_oracle_on_deterministic_quadratic() {
        let (spec, grid) = stable_lqg();
        let dynamics = spec.to_dynamics().unwrap();
        let dq = build_operators(&spec, grid).unwrap();
        let oracle = solve_open_loop(&dq, &[1.0]).unwrap();
        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 1,
        };
        let trace = spsa_descent(
            &family,
            &[-0.1],
            &objective,
            500,
            &SpsaGains::default(),
            7,
        )
        .unwrap();
        let rel = (trace.best_mean - oracle.total_cost) / oracle.total_cost;
        assert!(rel >= -1e-8);
        assert!(rel <= 0.02, "best {} oracle {}", trace.best_mean, oracle.total_cost);
        // best-so-far is what the trace reports as best
        let min_seen = trace
            .iterates
            .iter()
            .map(|p| p.mean)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_seen, trace.best_mean);
    }

    #[test]
    fn spsa_stays_near_optimum_when_started_there() {
        let (spec, grid) = stable_lqg();
        let dynamics = spec.to_dynamics().unwrap();
        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 1,
        };
        let coarse = grid_search(
            &family,
            &(0..41).map(|i| vec![-2.0 + 0.05 * i as f64]).collect::<Vec<_>>(),
            &objective,
            5,
        )
        .unwrap();
        let trace = spsa_descent(
            &family,
            &coarse.best_theta,
            &objective,
            100,
            &SpsaGains::default(),
            9,
        )
        .unwrap();
        // step sizes bound the drift from the optimum
        let step_sum: f64 = trace.iterates.iter().map(|p| p.step_size).sum();
        let drift = (trace.iterates.last().unwrap().theta[0] - coarse.best_theta[0]).abs();
        assert!(drift <= step_sum + 1e-12);
        assert!(trace.best_mean <= coarse.best_mean + 1e-9);
    }

    #[test]
    fn spsa_seed_stability() {
        let (mut spec, grid) = stable_lqg();
        spec.sigma = vec![vec![0.3]];
        let dynamics = spec.to_dynamics().unwrap();
        let family = scalar_family(-2.0, 0.0);
        let objective = TeamObjective {
            dynamics: &dynamics,
            cost: &spec.cost,
            grid,
            init: &spec.init,
            n_agents: 1,
            replications: 256,
        };
        let t1 = spsa_descent(&family, &[-0.2], &objective, 120, &SpsaGains::default(), 21)
            .unwrap();
        let t2 = spsa_descent(&family, &[-0.2], &objective, 120, &SpsaGains::default(), 22)
            .unwrap();
        let tol = 3.0 * (t1.best_se * t1.best_se + t2.best_se * t2.best_se).sqrt() + 0.01;
        assert!(
            (t1.best_mean - t2.best_mean).abs() <= tol,
            "{} vs {}",
            t1.best_mean,
            t2.best_mean
        );
    }

    #[test]
    fn gap_is_zero_when_baseline_equals_mf_policy() {
        let (mut spec, grid) = stable_lqg();
        spec.sigma = vec![vec![0.5]];
        let dynamics = spec.to_dynamics().unwrap();
        let policy = Policy::linear(vec![vec![-0.4]]);
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![0.5],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let gaps = epsilon_gap(
            &policy,
            &[(2, policy.clone()), (4, policy.clone())],
            &dynamics,
            &cost,
            grid,
            &spec.init,
            64,
            9,
        )
        .unwrap();
        for g in &gaps {
            assert_eq!(g.gap, 0.0);
            assert_eq!(g.se, 0.0);
        }
    }

    #[test]
    fn interaction_free_cost_has_gap_within_noise() {
        // no coupling: the mean-field optimum is already N-optimal in the
        // family, so gaps sit within 3 SE of zero
        let (mut spec, grid) = stable_lqg();
        spec.sigma = vec![vec![0.4]];
        let dynamics = spec.to_dynamics().unwrap();
        let cost = StageCost::mean_field(HatCost::QuadMean {
            qx: vec![1.0],
            ru: vec![1.0],
            couple_dev: 0.0,
            couple_mean: 0.0,
        });
        let family = scalar_family(-2.0, 0.0);
        let thetas: Vec<Vec<f64>> = (0..21).map(|i| vec![-2.0 + 0.1 * i as f64]).collect();

        let mf_objective = MeanFieldObjective {
            dynamics: &dynamics,
            cost: &cost,
            grid,
            init: &spec.init,
            particles: 512,
            replications: 4,
        };
        let mf_trace = grid_search(&family, &thetas, &mf_objective, 31).unwrap();
        let mf_policy = mf_trace.best_policy(&family).unwrap();

        let mut baselines = Vec::new();
        for n in [2usize, 4] {
            let obj = TeamObjective {
                dynamics: &dynamics,
                cost: &cost,
                grid,
                init: &spec.init,
                n_agents: n,
                replications: 512,
            };
            let tr = grid_search(&family, &thetas, &obj, 33).unwrap();
            baselines.push((n, tr.best_policy(&family).unwrap()));
        }
        let gaps = epsilon_gap(
            &mf_policy,
            &baselines,
            &dynamics,
            &cost,
            grid,
            &spec.init,
            2048,
            35,
        )
        .unwrap();
        for g in &gaps {
            assert!(g.gap >= -3.0 * g.se - 1e-12, "{g:?}");
            assert!(g.gap.abs() <= 3.0 * g.se + 1e-9, "{g:?}");
        }
    }
}
