//! Euler-Maruyama simulation of the three dynamics families.
//!
//! One stepping kernel drives everything: agents advance synchronously on a
//! uniform grid, drifts read the current empirical ensemble (coupled mode),
//! a frozen measure flow (reference simulations), or nothing (decoupled).
//! All randomness is addressed by (seed, replication, agent, step), so
//! results are byte-identical regardless of worker count, and relabeling
//! agent substreams relabels paths exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{stacked_means, Measures, Mode, TeamDynamics};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::policy::{ActCtx, Policy, Substream};
use crate::profile::PolicyProfile;
use crate::rng::{splitmix64, StreamTag, Streams};

/// Norm threshold beyond which a replication is aborted as blown up.
pub const BLOW_UP_LIMIT: f64 = 1e6;

/// Addressable Gaussian increments with variance dt for an M x N x K x d
/// block. Increments are generated on demand from the counter-based stream;
/// regenerating from the same (seed, dims) is bit-identical by construction.
#[derive(Clone, Copy, Debug)]
pub struct WienerBatch {
    pub seed: u64,
    pub replications: usize,
    pub agents: usize,
    pub steps: usize,
    pub dim: usize,
    streams: Streams,
}

impl WienerBatch {
    pub fn new(seed: u64, replications: usize, agents: usize, steps: usize, dim: usize) -> Self {
        WienerBatch {
            seed,
            replications,
            agents,
            steps,
            dim,
            streams: Streams::new(seed),
        }
    }

    pub fn streams(&self) -> &Streams {
        &self.streams
    }

    /// Writes the step-k increment for (replication, agent substream).
    #[inline]
    pub fn increment_into(&self, rep: usize, agent: usize, step: usize, sqrt_dt: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        self.streams
            .fill_normals(StreamTag::Wiener, rep as u64, agent as u64, step as u64, out);
        for v in out.iter_mut() {
            *v *= sqrt_dt;
        }
    }

    /// Materializes all increments, [rep][agent][step][dim] row-major.
    pub fn materialize(&self, sqrt_dt: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.replications * self.agents * self.steps * self.dim];
        let stride = self.agents * self.steps * self.dim;
        for rep in 0..self.replications {
            for agent in 0..self.agents {
                for step in 0..self.steps {
                    let off = rep * stride + agent * self.steps * self.dim + step * self.dim;
                    self.increment_into(rep, agent, step, sqrt_dt, &mut out[off..off + self.dim]);
                }
            }
        }
        out
    }
}

/// Derives an independent seed for a named sub-purpose of a run.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.as_bytes() {
        h = splitmix64(h ^ (*b as u64));
    }
    h
}

/// Initial-state law, i.i.d. across agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitLaw {
    Point { value: Vec<f64> },
    GaussianIid { mean: Vec<f64>, std: Vec<f64> },
}

impl InitLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitLaw::Point { value } => value.len(),
            InitLaw::GaussianIid { mean, .. } => mean.len(),
        }
    }

    pub fn sample_into(&self, streams: &Streams, rep: usize, agent: usize, out: &mut [f64]) {
        match self {
            InitLaw::Point { value } => out.copy_from_slice(value),
            InitLaw::GaussianIid { mean, std } => {
                streams.fill_normals(StreamTag::Init, rep as u64, agent as u64, 0, out);
                for (i, v) in out.iter_mut().enumerate() {
                    *v = mean[i] + std[i] * *v;
                }
            }
        }
    }
}

/// One replication's paths: `n` agents, agent-major storage.
#[derive(Clone, Debug)]
pub struct RepPaths {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub steps: usize,
    /// [agent][k][coord], k = 0..=steps
    pub states: Vec<f64>,
    /// [agent][k][coord], k = 0..steps
    pub actions: Vec<f64>,
}

impl RepPaths {
    fn new(n: usize, d: usize, m: usize, steps: usize) -> Self {
        RepPaths {
            n,
            d,
            m,
            steps,
            states: vec![0.0; n * (steps + 1) * d],
            actions: vec![0.0; n * steps * m],
        }
    }

    #[inline]
    pub fn state(&self, agent: usize, k: usize) -> &[f64] {
        let off = agent * (self.steps + 1) * self.d + k * self.d;
        &self.states[off..off + self.d]
    }

    #[inline]
    pub fn action(&self, agent: usize, k: usize) -> &[f64] {
        let off = agent * self.steps * self.m + k * self.m;
        &self.actions[off..off + self.m]
    }
}

/// Per-step empirical law source for the drift.
#[derive(Clone, Copy)]
pub enum LawSource<'a> {
    /// Decoupled: the drift receives no measure arguments.
    None,
    /// Coupled / self-consistent mean-field: the replication's own ensemble,
    /// frozen within the step.
    OwnEnsemble,
    /// Reference dynamics: a precomputed deterministic measure flow.
    Frozen(&'a MeasureFlow),
}

/// A deterministic flow of empirical measures (one particle cloud per step),
/// used as the law argument of the decoupled reference dynamics.
#[derive(Clone, Debug)]
pub struct MeasureFlow {
    pub steps: usize,
    pub d: usize,
    pub m: usize,
    pub particles: usize,
    /// [k][particle*d], k = 0..=steps
    pub x_points: Vec<Vec<f64>>,
    /// [k][particle*m], k = 0..steps
    pub u_points: Vec<Vec<f64>>,
    pub mean_x: Vec<Vec<f64>>,
    pub mean_u: Vec<Vec<f64>>,
}

impl MeasureFlow {
    /// Pools every (replication, agent) pair of a batch into one cloud per
    /// step.
    pub fn from_batch(batch: &SimulationBatch) -> MeasureFlow {
        let (m_reps, n, steps, d, m) = (
            batch.replications,
            batch.agents,
            batch.grid.steps,
            batch.state_dim,
            batch.action_dim,
        );
        let particles = m_reps * n;
        let mut x_points = vec![vec![0.0; particles * d]; steps + 1];
        let mut u_points = vec![vec![0.0; particles * m]; steps];
        for rep in 0..m_reps {
            for agent in 0..n {
                let p = rep * n + agent;
                for k in 0..=steps {
                    x_points[k][p * d..(p + 1) * d].copy_from_slice(batch.state(rep, agent, k));
                }
                for k in 0..steps {
                    u_points[k][p * m..(p + 1) * m].copy_from_slice(batch.action(rep, agent, k));
                }
            }
        }
        let mut mean_x = vec![vec![0.0; d]; steps + 1];
        let mut mean_u = vec![vec![0.0; m]; steps];
        for k in 0..=steps {
            stacked_means(&x_points[k], particles, d, &mut mean_x[k]);
        }
        for k in 0..steps {
            stacked_means(&u_points[k], particles, m, &mut mean_u[k]);
        }
        MeasureFlow {
            steps,
            d,
            m,
            particles,
            x_points,
            u_points,
            mean_x,
            mean_u,
        }
    }

    #[inline]
    pub fn measures_at(&self, k: usize) -> Measures<'_> {
        Measures {
            x_points: &self.x_points[k],
            u_points: &self.u_points[k],
            n: self.particles,
            mean_x: &self.mean_x[k],
            mean_u: &self.mean_u[k],
        }
    }

    /// Terminal particle cloud (for transport-distance comparisons).
    pub fn terminal_states(&self) -> &[f64] {
        &self.x_points[self.steps]
    }
}

/// Simulation request shared by the batch and streaming entry points.
#[derive(Clone, Copy)]
pub struct SimRequest<'a> {
    pub dynamics: &'a TeamDynamics,
    pub grid: TimeGrid,
    pub policies: &'a [Policy],
    pub init: &'a InitLaw,
    pub noise: &'a WienerBatch,
    /// Optional substream relabeling: agent i draws noise/init/action
    /// randomness from substream `relabel[i]`.
    pub relabel: Option<&'a [usize]>,
    pub law: LawSource<'a>,
}

impl<'a> SimRequest<'a> {
    fn check(&self) -> Result<()> {
        let d = self.dynamics.state_dim;
        let m = self.dynamics.action_dim;
        if self.noise.agents != self.policies.len() {
            return Err(Error::DimensionMismatch(format!(
                "noise carries {} agent substreams for {} policies",
                self.noise.agents,
                self.policies.len()
            )));
        }
        if self.noise.dim != d {
            return Err(Error::DimensionMismatch(format!(
                "noise dim {} vs state dim {d}",
                self.noise.dim
            )));
        }
        if self.noise.steps != self.grid.steps {
            return Err(Error::DimensionMismatch(format!(
                "noise has {} steps, grid has {}",
                self.noise.steps, self.grid.steps
            )));
        }
        if self.init.dim() != d {
            return Err(Error::DimensionMismatch(format!(
                "init law dim {} vs state dim {d}",
                self.init.dim()
            )));
        }
        if let Some(r) = self.relabel {
            if r.len() != self.policies.len() {
                return Err(Error::SizeMismatch("relabel length".into()));
            }
        }
        for p in self.policies {
            if p.action_dim() != m {
                return Err(Error::DimensionMismatch(format!(
                    "policy emits {} action coordinates, dynamics expects {m}",
                    p.action_dim()
                )));
            }
            p.validate(&self.dynamics.action_box)?;
        }
        if let (LawSource::Frozen(flow), true) = (&self.law, true) {
            if flow.steps != self.grid.steps || flow.d != d || flow.m != m {
                return Err(Error::DimensionMismatch("measure flow shape".into()));
            }
        }
        Ok(())
    }
}

/// Simulates one replication into `out`.
pub fn simulate_replication(req: &SimRequest, rep: usize, out: &mut RepPaths) -> Result<()> {
    let dyn_ = req.dynamics;
    let (d, m) = (dyn_.state_dim, dyn_.action_dim);
    let n = req.policies.len();
    let grid = req.grid;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let streams = req.noise.streams();

    debug_assert!(out.n == n && out.d == d && out.m == m && out.steps == grid.steps);

    let stream_id = |agent: usize| -> usize {
        match req.relabel {
            Some(r) => r[agent],
            None => agent,
        }
    };

    // step-local working buffers
    let mut cur_x = vec![0.0; n * d];
    let mut cur_u = vec![0.0; n * m];
    let mut x0 = vec![0.0; n * d];
    let mut w_cum = vec![0.0; n * d];
    let mut mean_x = vec![0.0; d.max(1)];
    let mut mean_u = vec![0.0; m.max(1)];
    let mut drift = vec![0.0; d];
    let mut dw = vec![0.0; d];

    for agent in 0..n {
        req.init
            .sample_into(streams, rep, stream_id(agent), &mut cur_x[agent * d..(agent + 1) * d]);
    }
    x0.copy_from_slice(&cur_x);
    for agent in 0..n {
        let off = agent * (grid.steps + 1) * d;
        out.states[off..off + d].copy_from_slice(&cur_x[agent * d..(agent + 1) * d]);
    }

    for k in 0..grid.steps {
        let t = grid.t(k);

        // actions first: the drift may read the empirical action measure
        for agent in 0..n {
            let sub = Substream {
                streams,
                rep: rep as u64,
                agent: stream_id(agent) as u64,
            };
            let ctx = ActCtx {
                t,
                step: k,
                x: &cur_x[agent * d..(agent + 1) * d],
                x0: &x0[agent * d..(agent + 1) * d],
                w_cum: &w_cum[agent * d..(agent + 1) * d],
            };
            let u_slice = &mut cur_u[agent * m..(agent + 1) * m];
            req.policies[agent].act_into(&ctx, &dyn_.action_box, &sub, u_slice)?;
            if !dyn_.action_box.contains(u_slice) {
                return Err(Error::ActionOutOfBox(format!(
                    "agent {agent} emitted {u_slice:?} at step {k}"
                )));
            }
            let a_off = agent * grid.steps * m + k * m;
            out.actions[a_off..a_off + m].copy_from_slice(u_slice);
        }

        let frozen_meas;
        let own_meas;
        let measures: Option<&Measures> = match req.law {
            LawSource::None => None,
            LawSource::Frozen(flow) => {
                frozen_meas = flow.measures_at(k);
                Some(&frozen_meas)
            }
            LawSource::OwnEnsemble => {
                stacked_means(&cur_x, n, d, &mut mean_x[..d]);
                stacked_means(&cur_u, n, m, &mut mean_u[..m]);
                own_meas = Measures {
                    x_points: &cur_x,
                    u_points: &cur_u,
                    n,
                    mean_x: &mean_x[..d],
                    mean_u: &mean_u[..m],
                };
                Some(&own_meas)
            }
        };

        for agent in 0..n {
            let x = &cur_x[agent * d..(agent + 1) * d];
            let u = &cur_u[agent * m..(agent + 1) * m];
            dyn_.drift_into(t, x, u, measures, &mut drift);
            req.noise
                .increment_into(rep, stream_id(agent), k, sqrt_dt, &mut dw);

            let s_off = agent * (grid.steps + 1) * d + (k + 1) * d;
            for j in 0..d {
                out.states[s_off + j] = x[j] + drift[j] * dt;
            }
            dyn_.sigma_apply_add(t, x, &dw, &mut out.states[s_off..s_off + d]);
            for j in 0..d {
                let v = out.states[s_off + j];
                if !v.is_finite() || v.abs() > BLOW_UP_LIMIT {
                    return Err(Error::NonFinite(format!(
                        "state blew up: agent {agent}, step {}, coord {j}, value {v}",
                        k + 1
                    )));
                }
                w_cum[agent * d + j] += dw[j];
            }
        }
        for agent in 0..n {
            let s_off = agent * (grid.steps + 1) * d + (k + 1) * d;
            cur_x[agent * d..(agent + 1) * d].copy_from_slice(&out.states[s_off..s_off + d]);
        }
    }
    Ok(())
}

/// Runs `f` over every replication in parallel; outputs are collected in
/// replication order so reductions are independent of the worker count.
pub fn map_replications<T, F>(req: &SimRequest, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &RepPaths) -> Result<T> + Sync,
{
    req.check()?;
    let n = req.policies.len();
    let (d, m) = (req.dynamics.state_dim, req.dynamics.action_dim);
    (0..req.noise.replications)
        .into_par_iter()
        .map(|rep| {
            let mut paths = RepPaths::new(n, d, m, req.grid.steps);
            simulate_replication(req, rep, &mut paths)?;
            f(rep, &paths)
        })
        .collect()
}

/// M replications of N agent paths with shared grid and metadata.
#[derive(Clone, Debug)]
pub struct SimulationBatch {
    pub grid: TimeGrid,
    pub replications: usize,
    pub agents: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
    pub dynamics_id: String,
    pub policy_id: String,
    /// [rep][agent][k][coord], k = 0..=steps
    pub states: Vec<f64>,
    /// [rep][agent][k][coord], k = 0..steps
    pub actions: Vec<f64>,
}

impl SimulationBatch {
    #[inline]
    pub fn state(&self, rep: usize, agent: usize, k: usize) -> &[f64] {
        let d = self.state_dim;
        let stride_agent = (self.grid.steps + 1) * d;
        let off = (rep * self.agents + agent) * stride_agent + k * d;
        &self.states[off..off + d]
    }

    #[inline]
    pub fn action(&self, rep: usize, agent: usize, k: usize) -> &[f64] {
        let m = self.action_dim;
        let stride_agent = self.grid.steps * m;
        let off = (rep * self.agents + agent) * stride_agent + k * m;
        &self.actions[off..off + m]
    }

    fn collect(req: &SimRequest, policy_id: &str) -> Result<SimulationBatch> {
        let reps = map_replications(req, |_, paths| Ok(paths.clone()))?;
        let n = req.policies.len();
        let (d, m) = (req.dynamics.state_dim, req.dynamics.action_dim);
        let k = req.grid.steps;
        let mut states = Vec::with_capacity(req.noise.replications * n * (k + 1) * d);
        let mut actions = Vec::with_capacity(req.noise.replications * n * k * m);
        for paths in &reps {
            states.extend_from_slice(&paths.states);
            actions.extend_from_slice(&paths.actions);
        }
        Ok(SimulationBatch {
            grid: req.grid,
            replications: req.noise.replications,
            agents: n,
            state_dim: d,
            action_dim: m,
            seed: req.noise.seed,
            dynamics_id: req.dynamics.id(),
            policy_id: policy_id.to_string(),
            states,
            actions,
        })
    }
}

/// Per-agent independent dynamics; actions come from each agent's own policy
/// on its own history only.
pub fn simulate_decoupled(
    dynamics: &TeamDynamics,
    profile: &PolicyProfile,
    grid: TimeGrid,
    init: &InitLaw,
    noise: &WienerBatch,
) -> Result<SimulationBatch> {
    if dynamics.mode != Mode::Decoupled {
        return Err(Error::InvalidArgument(format!(
            "simulate_decoupled needs decoupled dynamics, got {:?}",
            dynamics.mode
        )));
    }
    let req = SimRequest {
        dynamics,
        grid,
        policies: &profile.agents,
        init,
        noise,
        relabel: None,
        law: LawSource::None,
    };
    SimulationBatch::collect(&req, "profile")
}

/// Synchronous advance with the drift reading the replication's own
/// empirical state/action measures at each step.
pub fn simulate_coupled(
    dynamics: &TeamDynamics,
    profile: &PolicyProfile,
    grid: TimeGrid,
    init: &InitLaw,
    noise: &WienerBatch,
) -> Result<SimulationBatch> {
    if dynamics.mode != Mode::Coupled {
        return Err(Error::InvalidArgument(format!(
            "simulate_coupled needs coupled dynamics, got {:?}",
            dynamics.mode
        )));
    }
    let req = SimRequest {
        dynamics,
        grid,
        policies: &profile.agents,
        init,
        noise,
        relabel: None,
        law: LawSource::OwnEnsemble,
    };
    SimulationBatch::collect(&req, "profile")
}

/// McKean-Vlasov approximation: the state/action laws are replaced by a
/// P-particle ensemble under the same symmetric policy, frozen within each
/// step. `noise.agents` is the ensemble size.
pub fn simulate_mckean_vlasov(
    dynamics: &TeamDynamics,
    policy: &Policy,
    grid: TimeGrid,
    init: &InitLaw,
    noise: &WienerBatch,
) -> Result<SimulationBatch> {
    if dynamics.mode != Mode::MeanField {
        return Err(Error::InvalidArgument(format!(
            "simulate_mckean_vlasov needs mean-field dynamics, got {:?}",
            dynamics.mode
        )));
    }
    let policies = vec![policy.clone(); noise.agents];
    let req = SimRequest {
        dynamics,
        grid,
        policies: &policies,
        init,
        noise,
        relabel: None,
        law: LawSource::OwnEnsemble,
    };
    SimulationBatch::collect(&req, "mv-ensemble")
}

/// Reference simulation: agents are independent, the drift reads a frozen
/// deterministic measure flow instead of the ensemble.
pub fn simulate_frozen_flow(
    dynamics: &TeamDynamics,
    profile: &PolicyProfile,
    grid: TimeGrid,
    init: &InitLaw,
    noise: &WienerBatch,
    flow: &MeasureFlow,
) -> Result<SimulationBatch> {
    let req = SimRequest {
        dynamics,
        grid,
        policies: &profile.agents,
        init,
        noise,
        relabel: None,
        law: LawSource::Frozen(flow),
    };
    SimulationBatch::collect(&req, "frozen-flow")
}

// ---------------------------------------------------------------------------
// batch serialization
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 6] = b"XTEAM1";

impl SimulationBatch {
    /// Flat binary layout: magic "XTEAM1"; M, N, K, d, m as little-endian
    /// u32; payload row-major f64 (states then actions).
    pub fn write_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            6 + 20 + 8 * (self.states.len() + self.actions.len()),
        );
        out.extend_from_slice(MAGIC);
        for v in [
            self.replications as u32,
            self.agents as u32,
            self.grid.steps as u32,
            self.state_dim as u32,
            self.action_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.states {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.actions {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_binary(bytes: &[u8], grid: TimeGrid, seed: u64) -> Result<SimulationBatch> {
        if bytes.len() < 26 || &bytes[..6] != MAGIC {
            return Err(Error::ParseError("bad batch magic".into()));
        }
        let mut dims = [0u32; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            let off = 6 + 4 * i;
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        }
        let (m_reps, n, k, d, m) = (
            dims[0] as usize,
            dims[1] as usize,
            dims[2] as usize,
            dims[3] as usize,
            dims[4] as usize,
        );
        if k != grid.steps {
            return Err(Error::DimensionMismatch(format!(
                "batch has {k} steps, grid has {}",
                grid.steps
            )));
        }
        let n_states = m_reps * n * (k + 1) * d;
        let n_actions = m_reps * n * k * m;
        let want = 26 + 8 * (n_states + n_actions);
        if bytes.len() != want {
            return Err(Error::ParseError(format!(
                "batch payload is {} bytes, expected {want}",
                bytes.len()
            )));
        }
        let read_f64s = |start: usize, count: usize| -> Vec<f64> {
            (0..count)
                .map(|i| {
                    let off = start + 8 * i;
                    f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
                })
                .collect()
        };
        Ok(SimulationBatch {
            grid,
            replications: m_reps,
            agents: n,
            state_dim: d,
            action_dim: m,
            seed,
            dynamics_id: String::new(),
            policy_id: String::new(),
            states: read_f64s(26, n_states),
            actions: read_f64s(26 + 8 * n_states, n_actions),
        })
    }

    /// CSV for small runs: rep, agent, k, t, x..., u... (u empty at k = K).
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("rep,agent,k,t");
        for j in 0..self.state_dim {
            s.push_str(&format!(",x{j}"));
        }
        for j in 0..self.action_dim {
            s.push_str(&format!(",u{j}"));
        }
        s.push('\n');
        for rep in 0..self.replications {
            for agent in 0..self.agents {
                for k in 0..=self.grid.steps {
                    s.push_str(&format!("{rep},{agent},{k},{}", self.grid.t(k)));
                    for v in self.state(rep, agent, k) {
                        s.push_str(&format!(",{v}"));
                    }
                    if k < self.grid.steps {
                        for v in self.action(rep, agent, k) {
                            s.push_str(&format!(",{v}"));
                        }
                    } else {
                        for _ in 0..self.action_dim {
                            s.push(',');
                        }
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ActionBox;
    use crate::policy::Policy;
    use crate::profile::PolicyProfile;
    use crate::util::mean_se;

    fn zero_policy() -> Policy {
        Policy::linear(vec![vec![0.0]])
    }

    #[test]
    fn driftless_terminal_variance_matches_horizon() {
        // b = 0, sigma = 1: Var X_T = T, M = 1e5, within 3 SE of the
        // chi-square sampling distribution of the sample variance
        let dynamics = TeamDynamics::ou(1, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(), 1);
        let init = InitLaw::Point { value: vec![0.0] };
        let m = 100_000;
        let noise = WienerBatch::new(101, m, 1, 4, 1);
        let batch = simulate_decoupled(&dynamics, &profile, grid, &init, &noise).unwrap();
        let xs: Vec<f64> = (0..m).map(|r| batch.state(r, 0, 4)[0]).collect();
        let (mean, _) = mean_se(&xs);
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
        let se_var = 1.0 * (2.0 / (m as f64 - 1.0)).sqrt();
        assert!((var - 1.0).abs() <= 3.0 * se_var, "var {var} se {se_var}");
    }

    #[test]
    fn ou_terminal_moments_match_closed_form() {
        // dX = -X dt + dW, X_0 = 1: E X_T = e^-T, Var X_T = (1 - e^-2T)/2
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let k = 200;
        let grid = TimeGrid::new(1.0, k).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(), 1);
        let init = InitLaw::Point { value: vec![1.0] };
        let m = 40_000;
        let noise = WienerBatch::new(7, m, 1, k, 1);
        let batch = simulate_decoupled(&dynamics, &profile, grid, &init, &noise).unwrap();
        let xs: Vec<f64> = (0..m).map(|r| batch.state(r, 0, k)[0]).collect();
        let (mean, se) = mean_se(&xs);
        let want_mean = (-1.0f64).exp();
        let dt_budget = 2.0 * grid.dt();
        assert!(
            (mean - want_mean).abs() <= 3.0 * se + dt_budget,
            "mean {mean} want {want_mean}"
        );
        let var: f64 =
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
        let want_var = (1.0 - (-2.0f64).exp()) / 2.0;
        let se_var = want_var * (2.0 / (m as f64 - 1.0)).sqrt();
        assert!(
            (var - want_var).abs() <= 3.0 * se_var + dt_budget,
            "var {var} want {want_var}"
        );
    }

    #[test]
    fn label_swap_is_bit_exact() {
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let p0 = Policy::linear(vec![vec![0.0]]);
        let p1 = Policy::linear(vec![vec![0.0]]);
        let init = InitLaw::GaussianIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let noise = WienerBatch::new(3, 8, 2, 16, 1);
        let base = {
            let req = SimRequest {
                dynamics: &dynamics,
                grid,
                policies: &[p0.clone(), p1.clone()],
                init: &init,
                noise: &noise,
                relabel: None,
                law: LawSource::None,
            };
            map_replications(&req, |_, paths| Ok(paths.clone())).unwrap()
        };
        let swapped = {
            let req = SimRequest {
                dynamics: &dynamics,
                grid,
                policies: &[p1, p0],
                init: &init,
                noise: &noise,
                relabel: Some(&[1, 0]),
                law: LawSource::None,
            };
            map_replications(&req, |_, paths| Ok(paths.clone())).unwrap()
        };
        for (b, s) in base.iter().zip(&swapped) {
            for k in 0..=16 {
                assert_eq!(b.state(0, k)[0].to_bits(), s.state(1, k)[0].to_bits());
                assert_eq!(b.state(1, k)[0].to_bits(), s.state(0, k)[0].to_bits());
            }
        }
    }

    #[test]
    fn attraction_to_mean_with_identical_starts_is_constant() {
        // sigma = 0, identical X_0: the empirical mean equals each state, so
        // every path stays put
        let dynamics =
            TeamDynamics::mean_attraction(1, 1.0, 0.0, 0.0, false, crate::dynamics::Mode::Coupled)
                .unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(), 3);
        let init = InitLaw::Point { value: vec![0.7] };
        let noise = WienerBatch::new(5, 4, 3, 20, 1);
        let batch = simulate_coupled(&dynamics, &profile, grid, &init, &noise).unwrap();
        for rep in 0..4 {
            for agent in 0..3 {
                for k in 0..=20 {
                    assert_eq!(batch.state(rep, agent, k)[0], 0.7);
                }
            }
        }
    }

    #[test]
    fn singleton_coupled_equals_decoupled_bit_exact() {
        // at N = 1 the empirical measure is the agent's own Dirac, so a
        // mean-reverting coupled drift coincides with its decoupled twin
        let coupled = TeamDynamics::custom(
            crate::dynamics::Mode::Coupled,
            1,
            1,
            vec!["u + (mean_x - x) - 0.5*x"],
            vec![1.0],
            ActionBox::wide(1),
        )
        .unwrap();
        let decoupled = TeamDynamics::custom(
            crate::dynamics::Mode::Decoupled,
            1,
            1,
            vec!["u + (x - x) - 0.5*x"],
            vec![1.0],
            ActionBox::wide(1),
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let profile = PolicyProfile::symmetric(Policy::linear(vec![vec![-0.3]]), 1);
        let init = InitLaw::Point { value: vec![1.0] };
        let noise = WienerBatch::new(11, 16, 1, 25, 1);
        let a = simulate_coupled(&coupled, &profile, grid, &init, &noise).unwrap();
        let b = simulate_decoupled(&decoupled, &profile, grid, &init, &noise).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn coupling_free_coupled_drift_matches_decoupled_bit_exact() {
        let coupled = TeamDynamics::custom(
            crate::dynamics::Mode::Coupled,
            1,
            1,
            vec!["u - 0.5*x"],
            vec![1.0],
            ActionBox::wide(1),
        )
        .unwrap();
        let decoupled = coupled.clone().with_mode(crate::dynamics::Mode::Decoupled).unwrap();
        let grid = TimeGrid::new(1.0, 15).unwrap();
        let profile = PolicyProfile::symmetric(Policy::linear(vec![vec![-0.2]]), 3);
        let init = InitLaw::GaussianIid {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let noise = WienerBatch::new(13, 8, 3, 15, 1);
        let a = simulate_coupled(&coupled, &profile, grid, &init, &noise).unwrap();
        let b = simulate_decoupled(&decoupled, &profile, grid, &init, &noise).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn mckean_vlasov_linear_drift_matches_ode_oracle() {
        // b = a x + c mean(law_x), sigma = 0, deterministic start: every
        // particle follows the forward-Euler recursion of dm/dt = (a+c) m
        let dynamics = TeamDynamics::custom(
            crate::dynamics::Mode::MeanField,
            1,
            1,
            vec!["-0.5*x + 0.3*mean_x"],
            vec![0.0],
            ActionBox::wide(1),
        )
        .unwrap();
        let k = 50;
        let grid = TimeGrid::new(1.0, k).unwrap();
        let init = InitLaw::Point { value: vec![2.0] };
        let noise = WienerBatch::new(17, 1, 64, k, 1);
        let batch =
            simulate_mckean_vlasov(&dynamics, &zero_policy(), grid, &init, &noise).unwrap();
        // forward-Euler reference computed independently
        let mut m_ref = 2.0;
        for _ in 0..k {
            m_ref += (-0.5 + 0.3) * m_ref * grid.dt();
        }
        let got = batch.state(0, 0, k)[0];
        assert!((got - m_ref).abs() < 1e-12, "{got} vs {m_ref}");
        // and the Euler value is within O(dt) of the exact exponential
        let exact = 2.0 * (-0.2f64).exp();
        assert!((got - exact).abs() < 2.0 * grid.dt());
    }

    #[test]
    fn mckean_vlasov_ensemble_self_consistency() {
        // ensemble mean at T stabilizes as P grows
        let dynamics = TeamDynamics::custom(
            crate::dynamics::Mode::MeanField,
            1,
            1,
            vec!["-x + 0.5*tanh(mean_x)"],
            vec![0.5],
            ActionBox::wide(1),
        )
        .unwrap();
        let k = 40;
        let grid = TimeGrid::new(1.0, k).unwrap();
        let init = InitLaw::GaussianIid {
            mean: vec![1.0],
            std: vec![0.5],
        };
        let mean_at = |p: usize, seed: u64| -> (f64, f64) {
            let noise = WienerBatch::new(seed, 1, p, k, 1);
            let batch =
                simulate_mckean_vlasov(&dynamics, &zero_policy(), grid, &init, &noise).unwrap();
            let xs: Vec<f64> = (0..p).map(|i| batch.state(0, i, k)[0]).collect();
            mean_se(&xs)
        };
        let (m_small, _) = mean_at(1_000, 23);
        let (m_big, se_big) = mean_at(10_000, 29);
        assert!(
            (m_small - m_big).abs() <= 5.0 * se_big + 5.0 * se_big,
            "{m_small} vs {m_big} (se {se_big})"
        );
    }

    #[test]
    fn blow_up_is_loud() {
        let dynamics = TeamDynamics::custom(
            crate::dynamics::Mode::Decoupled,
            1,
            1,
            vec!["20*x"],
            vec![0.0],
            ActionBox::wide(1),
        )
        .unwrap();
        let grid = TimeGrid::new(10.0, 200).unwrap();
        let profile = PolicyProfile::symmetric(zero_policy(), 1);
        let init = InitLaw::Point { value: vec![10.0] };
        let noise = WienerBatch::new(1, 1, 1, 200, 1);
        let err = simulate_decoupled(&dynamics, &profile, grid, &init, &noise);
        assert!(matches!(err, Err(crate::error::Error::NonFinite(_))));
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let dynamics = TeamDynamics::ou(1, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let profile = PolicyProfile::symmetric(Policy::linear(vec![vec![-0.5]]), 2);
        let init = InitLaw::Point { value: vec![1.0] };
        let noise = WienerBatch::new(77, 3, 2, 10, 1);
        let batch = simulate_decoupled(&dynamics, &profile, grid, &init, &noise).unwrap();
        let bytes = batch.write_binary();
        assert_eq!(&bytes[..6], b"XTEAM1");
        let back = SimulationBatch::read_binary(&bytes, grid, batch.seed).unwrap();
        assert_eq!(batch.states, back.states);
        assert_eq!(batch.actions, back.actions);
        let csv = batch.to_csv();
        assert!(csv.starts_with("rep,agent,k,t,x0,u0"));
        assert_eq!(csv.lines().count(), 1 + 3 * 2 * 11);
    }

    #[test]
    fn wiener_batch_regenerates_identically() {
        let a = WienerBatch::new(9, 2, 2, 5, 2).materialize(0.1);
        let b = WienerBatch::new(9, 2, 2, 5, 2).materialize(0.1);
        assert_eq!(a, b);
        let c = WienerBatch::new(10, 2, 2, 5, 2).materialize(0.1);
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_box_action_aborts_simulation() {
        let dynamics = TeamDynamics::custom(
            crate::dynamics::Mode::Decoupled,
            1,
            1,
            vec!["u"],
            vec![1.0],
            ActionBox::new(vec![-0.1], vec![0.1]).unwrap(),
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let profile = PolicyProfile::symmetric(Policy::linear(vec![vec![1.0]]), 1);
        let init = InitLaw::Point { value: vec![5.0] };
        let noise = WienerBatch::new(2, 1, 1, 5, 1);
        assert!(matches!(
            simulate_decoupled(&dynamics, &profile, grid, &init, &noise),
            Err(crate::error::Error::ActionOutOfBox(_))
        ));
    }
}
