//! Exact ground truth for the convex linear-quadratic case: the discrete
//! unrolled dynamics give X = Phi x0 + Psi U + Psi_w dW, the expected cost
//! is an explicit quadratic in the control, and the optimal open-loop
//! control solves one linear system. The oracle uses the same Euler grid as
//! the simulator, so the two sides solve the identical discrete problem and
//! differ only by Monte Carlo error.
//!
//! Policies are evaluated here through their induced control operators on
//! (x0, noise) - the open-loop representation under which the expected cost
//! is a convex quadratic and policy mixtures are operator averages. State
//! feedback is converted to such an operator by unrolling its closed loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::StageCost;
use crate::dynamics::{DiffusionSpec, DriftSpec, TeamDynamics};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::policy::Policy;
use crate::simulate::InitLaw;

/// Linear team dynamics with exchangeable quadratic cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqgSpec {
    /// d x d drift matrix rows.
    pub a: Vec<Vec<f64>>,
    /// d x m input matrix rows.
    pub b: Vec<Vec<f64>>,
    /// d x d diffusion matrix rows (invertible).
    pub sigma: Vec<Vec<f64>>,
    pub n_agents: usize,
    /// Must be the exchangeable quadratic form.
    pub cost: StageCost,
    pub init: InitLaw,
}

impl LqgSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.a.len();
        if self.a.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        let m = self.b.first().map(|r| r.len()).unwrap_or(0);
        if self.b.len() != d || self.b.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("B must be d x m".into()));
        }
        if self.sigma.len() != d || self.sigma.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("sigma must be d x d".into()));
        }
        // sigma must be invertible, except for the declared deterministic
        // variant sigma = 0 used by the noise-free oracle checks
        let sig = DMatrix::from_fn(d, d, |i, j| self.sigma[i][j]);
        let all_zero = sig.iter().all(|v| *v == 0.0);
        if !all_zero && sig.clone().lu().try_inverse().is_none() {
            return Err(Error::SingularDiffusion("sigma is not invertible".into()));
        }
        if !matches!(self.cost, StageCost::LqgQuadratic { .. }) {
            return Err(Error::InvalidArgument(
                "lqg oracle needs the exchangeable quadratic cost form".into(),
            ));
        }
        self.cost.validate(d, m, self.n_agents)?;
        if self.init.dim() != d {
            return Err(Error::DimensionMismatch("init law dimension".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.len(), self.b[0].len())
    }

    /// The same model as simulator dynamics.
    pub fn to_dynamics(&self) -> Result<TeamDynamics> {
        let (d, m) = self.dims();
        TeamDynamics::new(
            d,
            m,
            crate::dynamics::ActionBox::wide(m),
            crate::dynamics::Mode::Decoupled,
            DriftSpec::Linear {
                a: self.a.clone(),
                b: self.b.clone(),
            },
            DiffusionSpec::ConstMatrix {
                rows: self.sigma.clone(),
            },
        )
    }

    /// Joint Nd x Nd state-cost matrix: delta_ij Qs + Qm / N.
    fn q_full(&self) -> DMatrix<f64> {
        let StageCost::LqgQuadratic { q_self, q_mean, .. } = &self.cost else {
            unreachable!("validated")
        };
        joint_blocks(q_self, q_mean, self.n_agents)
    }

    fn r_full(&self) -> DMatrix<f64> {
        let StageCost::LqgQuadratic { r_self, r_mean, .. } = &self.cost else {
            unreachable!("validated")
        };
        joint_blocks(r_self, r_mean, self.n_agents)
    }
}

fn joint_blocks(self_block: &[Vec<f64>], mean_block: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let d = self_block.len();
    let mut out = DMatrix::zeros(n * d, n * d);
    for bi in 0..n {
        for bj in 0..n {
            for i in 0..d {
                for j in 0..d {
                    let mut v = mean_block[i][j] / n as f64;
                    if bi == bj {
                        v += self_block[i][j];
                    }
                    out[(bi * d + i, bj * d + j)] = v;
                }
            }
        }
    }
    out
}

/// The unrolled quadratic: indices are time-major (step k outer, agent
/// inner, coordinate innermost). State rows cover k = 0..=K, control and
/// noise columns cover k = 0..K.
pub struct DiscretizedQuadratic {
    pub n_agents: usize,
    pub d: usize,
    pub m: usize,
    pub steps: usize,
    pub dt: f64,
    /// (K+1)Nd x Nd
    pub phi: DMatrix<f64>,
    /// (K+1)Nd x KNm
    pub psi: DMatrix<f64>,
    /// (K+1)Nd x KNd, response to the Wiener increments.
    pub psi_w: DMatrix<f64>,
    /// KNm x KNm, = Rbar + Psi' Qbar Psi (positive definite when R > 0).
    pub m1: DMatrix<f64>,
    /// KNm x Nd, = Psi' Qbar Phi.
    pub m2: DMatrix<f64>,
    /// Nd x Nd, = Phi' Qbar Phi.
    pub m3: DMatrix<f64>,
    /// Joint per-step cost matrices (without the dt weight).
    pub q_full: DMatrix<f64>,
    pub r_full: DMatrix<f64>,
}

impl DiscretizedQuadratic {
    /// Applies the left-endpoint Riemann weight: block row k of the state
    /// stack is multiplied by dt Q for k < K and by zero at k = K.
    fn apply_qbar(&self, x_stack: &DMatrix<f64>) -> DMatrix<f64> {
        let nd = self.n_agents * self.d;
        let mut out = DMatrix::zeros(x_stack.nrows(), x_stack.ncols());
        for k in 0..self.steps {
            let rows = k * nd..(k + 1) * nd;
            let block = x_stack.rows(rows.start, nd);
            let weighted = (&self.q_full * block) * self.dt;
            out.rows_mut(rows.start, nd).copy_from(&weighted);
        }
        out
    }

    fn apply_rbar(&self, u_stack: &DMatrix<f64>) -> DMatrix<f64> {
        let nm = self.n_agents * self.m;
        let mut out = DMatrix::zeros(u_stack.nrows(), u_stack.ncols());
        for k in 0..self.steps {
            let rows = k * nm..(k + 1) * nm;
            let block = u_stack.rows(rows.start, nm);
            let weighted = (&self.r_full * block) * self.dt;
            out.rows_mut(rows.start, nm).copy_from(&weighted);
        }
        out
    }
}

/// Unrolls x_{k+1} = (I + A dt) x_k + B dt u_k + sigma dW_k and assembles
/// the quadratic cost coefficients with left-endpoint Riemann weights.
pub fn build_operators(spec: &LqgSpec, grid: TimeGrid) -> Result<DiscretizedQuadratic> {
    spec.validate()?;
    let (d, m) = spec.dims();
    let n = spec.n_agents;
    let k_steps = grid.steps;
    let dt = grid.dt();

    let a = DMatrix::from_fn(d, d, |i, j| spec.a[i][j]);
    let b = DMatrix::from_fn(d, m, |i, j| spec.b[i][j]);
    let sigma = DMatrix::from_fn(d, d, |i, j| spec.sigma[i][j]);
    let f_step = DMatrix::identity(d, d) + &a * dt;
    let g_step = &b * dt;

    // powers of the one-step map
    let mut powers = Vec::with_capacity(k_steps + 1);
    powers.push(DMatrix::identity(d, d));
    for k in 0..k_steps {
        let next = &f_step * &powers[k];
        powers.push(next);
    }

    let nd = n * d;
    let nm = n * m;
    let mut phi = DMatrix::zeros((k_steps + 1) * nd, nd);
    let mut psi = DMatrix::zeros((k_steps + 1) * nd, k_steps * nm);
    let mut psi_w = DMatrix::zeros((k_steps + 1) * nd, k_steps * nd);

    for k in 0..=k_steps {
        for agent in 0..n {
            let row0 = k * nd + agent * d;
            phi.view_mut((row0, agent * d), (d, d)).copy_from(&powers[k]);
            for j in 0..k {
                let fg = &powers[k - 1 - j] * &g_step;
                psi.view_mut((row0, j * nm + agent * m), (d, m)).copy_from(&fg);
                let fs = &powers[k - 1 - j] * &sigma;
                psi_w
                    .view_mut((row0, j * nd + agent * d), (d, d))
                    .copy_from(&fs);
            }
        }
    }

    let q_full = spec.q_full();
    let r_full = spec.r_full();

    let mut dq = DiscretizedQuadratic {
        n_agents: n,
        d,
        m,
        steps: k_steps,
        dt,
        phi,
        psi,
        psi_w,
        m1: DMatrix::zeros(0, 0),
        m2: DMatrix::zeros(0, 0),
        m3: DMatrix::zeros(0, 0),
        q_full,
        r_full,
    };

    let q_psi = dq.apply_qbar(&dq.psi);
    let mut m1 = dq.psi.transpose() * &q_psi;
    for k in 0..k_steps {
        let r0 = k * nm;
        for i in 0..nm {
            for j in 0..nm {
                m1[(r0 + i, r0 + j)] += dq.r_full[(i, j)] * dt;
            }
        }
    }
    let q_phi = dq.apply_qbar(&dq.phi);
    let m2 = dq.psi.transpose() * &q_phi;
    let m3 = dq.phi.transpose() * &q_phi;
    dq.m1 = m1;
    dq.m2 = m2;
    dq.m3 = m3;
    Ok(dq)
}

/// An affine control law U = Gx x0 + Gw dW + u0 in the open-loop
/// representation. Policy mixtures average these operators componentwise.
#[derive(Clone, Debug)]
pub struct ControlOperator {
    /// KNm x Nd
    pub gx: DMatrix<f64>,
    /// KNm x KNd
    pub gw: DMatrix<f64>,
    /// KNm
    pub u0: DVector<f64>,
}

impl ControlOperator {
    pub fn zero(dq: &DiscretizedQuadratic) -> ControlOperator {
        ControlOperator {
            gx: DMatrix::zeros(dq.steps * dq.n_agents * dq.m, dq.n_agents * dq.d),
            gw: DMatrix::zeros(
                dq.steps * dq.n_agents * dq.m,
                dq.steps * dq.n_agents * dq.d,
            ),
            u0: DVector::zeros(dq.steps * dq.n_agents * dq.m),
        }
    }

    pub fn open_loop(dq: &DiscretizedQuadratic, u: &[f64]) -> ControlOperator {
        let mut op = ControlOperator::zero(dq);
        op.u0 = DVector::from_column_slice(u);
        op
    }

    /// Uniform average of operators.
    pub fn average(ops: &[ControlOperator]) -> ControlOperator {
        let w = 1.0 / ops.len() as f64;
        let mut out = ops[0].clone();
        out.gx *= w;
        out.gw *= w;
        out.u0 *= w;
        for op in &ops[1..] {
            out.gx += &op.gx * w;
            out.gw += &op.gw * w;
            out.u0 += &op.u0 * w;
        }
        out
    }
}

/// Unrolls per-agent linear state feedback into its control operator.
/// `gains[agent][k]` is the m x d gain applied at step k.
pub fn feedback_operator(
    dq: &DiscretizedQuadratic,
    spec: &LqgSpec,
    gains: &[Vec<DMatrix<f64>>],
) -> Result<ControlOperator> {
    let (d, m) = (dq.d, dq.m);
    let n = dq.n_agents;
    if gains.len() != n || gains.iter().any(|g| g.len() != dq.steps) {
        return Err(Error::SizeMismatch("one gain per agent per step".into()));
    }
    let a = DMatrix::from_fn(d, d, |i, j| spec.a[i][j]);
    let b = DMatrix::from_fn(d, m, |i, j| spec.b[i][j]);
    let sigma = DMatrix::from_fn(d, d, |i, j| spec.sigma[i][j]);
    let f_step = DMatrix::identity(d, d) + &a * dq.dt;
    let g_step = &b * dq.dt;

    let nm = n * m;
    let nd = n * d;
    let mut op = ControlOperator::zero(dq);

    for (agent, agent_gains) in gains.iter().enumerate() {
        // s_x: x_k response to x0; s_w[j]: x_k response to dW_j
        let mut s_x = DMatrix::identity(d, d);
        let mut s_w: Vec<DMatrix<f64>> = Vec::with_capacity(dq.steps);
        for k in 0..dq.steps {
            let gain = &agent_gains[k];
            if gain.nrows() != m || gain.ncols() != d {
                return Err(Error::DimensionMismatch("gain must be m x d".into()));
            }
            // u_k = K_k x_k
            let u_row0 = k * nm + agent * m;
            op.gx
                .view_mut((u_row0, agent * d), (m, d))
                .copy_from(&(gain * &s_x));
            for (j, sw) in s_w.iter().enumerate() {
                op.gw
                    .view_mut((u_row0, j * nd + agent * d), (m, d))
                    .copy_from(&(gain * sw));
            }
            // x_{k+1} = (F + G K_k) x_k + sigma dW_k
            let closed = &f_step + &g_step * gain;
            s_x = &closed * &s_x;
            for sw in s_w.iter_mut() {
                *sw = &closed * &*sw;
            }
            s_w.push(sigma.clone());
        }
    }
    Ok(op)
}

/// Initial-state mean vector and per-coordinate variance stacked over
/// agents.
fn init_moments(init: &InitLaw, n: usize, d: usize) -> (DVector<f64>, DVector<f64>) {
    let mut mean = DVector::zeros(n * d);
    let mut var = DVector::zeros(n * d);
    for agent in 0..n {
        match init {
            InitLaw::Point { value } => {
                for j in 0..d {
                    mean[agent * d + j] = value[j];
                }
            }
            InitLaw::GaussianIid { mean: mu, std } => {
                for j in 0..d {
                    mean[agent * d + j] = mu[j];
                    var[agent * d + j] = std[j] * std[j];
                }
            }
        }
    }
    (mean, var)
}

/// Exact expected cost of an affine control operator under the spec's
/// initial law and the Euler noise: pure linear algebra, no Monte Carlo.
pub fn operator_cost(dq: &DiscretizedQuadratic, init: &InitLaw, op: &ControlOperator) -> f64 {
    let (mu, var) = init_moments(init, dq.n_agents, dq.d);

    // state responses
    let h_x = &dq.phi + &dq.psi * &op.gx;
    let h_w = &dq.psi_w + &dq.psi * &op.gw;
    let x_0term = &dq.psi * &op.u0;

    // means
    let x_mean = &h_x * &mu + &x_0term;
    let u_mean = &op.gx * &mu + &op.u0;

    let qx_mean = dq.apply_qbar(&DMatrix::from_column_slice(x_mean.len(), 1, x_mean.as_slice()));
    let ru_mean = dq.apply_rbar(&DMatrix::from_column_slice(u_mean.len(), 1, u_mean.as_slice()));
    let mut total = x_mean.dot(&DVector::from_column_slice(qx_mean.as_slice()))
        + u_mean.dot(&DVector::from_column_slice(ru_mean.as_slice()));

    // initial-state covariance contribution: Tr(H' Qbar H diag(var))
    if var.iter().any(|v| *v > 0.0) {
        let qh = dq.apply_qbar(&h_x);
        let rg = dq.apply_rbar(&op.gx);
        for c in 0..h_x.ncols() {
            if var[c] == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for r in 0..h_x.nrows() {
                acc += h_x[(r, c)] * qh[(r, c)];
            }
            for r in 0..op.gx.nrows() {
                acc += op.gx[(r, c)] * rg[(r, c)];
            }
            total += var[c] * acc;
        }
    }

    // noise contribution: dt Tr(H_w' Qbar H_w) + dt Tr(Gw' Rbar Gw)
    let qhw = dq.apply_qbar(&h_w);
    let mut noise = 0.0;
    for (a, b) in h_w.iter().zip(qhw.iter()) {
        noise += a * b;
    }
    let rgw = dq.apply_rbar(&op.gw);
    for (a, b) in op.gw.iter().zip(rgw.iter()) {
        noise += a * b;
    }
    total + noise * dq.dt
}

/// Result of the open-loop solve for a fixed initial point.
#[derive(Clone, Debug)]
pub struct OpenLoopSolution {
    pub u_star: Vec<f64>,
    /// Deterministic part of the cost at x0.
    pub mean_cost: f64,
    /// Exact noise trace term (zero when sigma = 0).
    pub noise_cost: f64,
    pub total_cost: f64,
    pub residual: f64,
}

/// Minimizes the quadratic over open-loop controls for a fixed initial
/// state: M1 U* = -M2 x0, with the exact noise trace added.
pub fn solve_open_loop(dq: &DiscretizedQuadratic, x0: &[f64]) -> Result<OpenLoopSolution> {
    let nd = dq.n_agents * dq.d;
    if x0.len() != nd {
        return Err(Error::DimensionMismatch(format!(
            "x0 has {} entries, expected {nd}",
            x0.len()
        )));
    }
    let x0v = DVector::from_column_slice(x0);
    let rhs = -(&dq.m2 * &x0v);
    let chol = dq
        .m1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("M1 has a nonpositive direction".into()))?;
    let u = chol.solve(&rhs);
    let residual = (&dq.m1 * &u - &rhs).norm();
    let scale = rhs.norm().max(1e-300);
    if residual > 1e-8 * scale.max(1.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "open-loop solve residual {residual} too large"
        )));
    }
    let mean_cost = (u.transpose() * &dq.m1 * &u)[(0, 0)]
        + 2.0 * (u.transpose() * &dq.m2 * &x0v)[(0, 0)]
        + (x0v.transpose() * &dq.m3 * &x0v)[(0, 0)];
    // noise trace: dt Tr(Psi_w' Qbar Psi_w)
    let qpw = dq.apply_qbar(&dq.psi_w);
    let mut noise_cost = 0.0;
    for (a, b) in dq.psi_w.iter().zip(qpw.iter()) {
        noise_cost += a * b;
    }
    noise_cost *= dq.dt;
    Ok(OpenLoopSolution {
        u_star: u.as_slice().to_vec(),
        mean_cost,
        noise_cost,
        total_cost: mean_cost + noise_cost,
        residual,
    })
}

/// Convexity certificate: smallest eigenvalue of the symmetric part of M1,
/// with a violating direction when nonpositive.
#[derive(Clone, Debug)]
pub struct ConvexityCertificate {
    pub min_eigenvalue: f64,
    pub violating_direction: Option<Vec<f64>>,
}

pub fn verify_convexity(dq: &DiscretizedQuadratic) -> ConvexityCertificate {
    let sym = (&dq.m1 + dq.m1.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let mut min_idx = 0;
    for (i, v) in eig.eigenvalues.iter().enumerate() {
        if *v < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let min_eigenvalue = eig.eigenvalues[min_idx];
    let violating_direction = if min_eigenvalue <= 0.0 {
        Some(eig.eigenvectors.column(min_idx).iter().copied().collect())
    } else {
        None
    };
    ConvexityCertificate {
        min_eigenvalue,
        violating_direction,
    }
}

/// Inverts the Euler update along one agent's path:
/// dW_k = sigma^-1 (x_{k+1} - x_k - (A x_k + B u_k) dt).
pub fn recover_noise(
    states: &[f64],
    actions: &[f64],
    spec: &LqgSpec,
    grid: TimeGrid,
) -> Result<Vec<f64>> {
    let (d, m) = spec.dims();
    if states.len() != (grid.steps + 1) * d || actions.len() != grid.steps * m {
        return Err(Error::DimensionMismatch("path shape".into()));
    }
    let sigma = DMatrix::from_fn(d, d, |i, j| spec.sigma[i][j]);
    let sig_inv = sigma
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::SingularDiffusion("sigma is not invertible".into()))?;
    let dt = grid.dt();
    let mut out = vec![0.0; grid.steps * d];
    let mut resid = DVector::zeros(d);
    for k in 0..grid.steps {
        for i in 0..d {
            let mut drift = 0.0;
            for j in 0..d {
                drift += spec.a[i][j] * states[k * d + j];
            }
            for j in 0..m {
                drift += spec.b[i][j] * actions[k * m + j];
            }
            resid[i] = states[(k + 1) * d + i] - states[k * d + i] - drift * dt;
        }
        let dw = &sig_inv * &resid;
        out[k * d..(k + 1) * d].copy_from_slice(dw.as_slice());
    }
    Ok(out)
}

/// Builds per-step gain matrices for a symmetric or per-agent linear
/// feedback profile.
pub fn gains_from_policies(
    policies: &[Policy],
    dq: &DiscretizedQuadratic,
    grid: TimeGrid,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    policies
        .iter()
        .map(|p| match p {
            Policy::Linear {
                k,
                t_edges,
                extra_gains,
            } => Ok((0..dq.steps)
                .map(|step| {
                    let t = grid.t(step);
                    let gains = match t_edges {
                        None => k,
                        Some(edges) => {
                            let b = edges.iter().take_while(|e| t >= **e).count();
                            if b == 0 {
                                k
                            } else {
                                &extra_gains[b - 1]
                            }
                        }
                    };
                    DMatrix::from_fn(dq.m, dq.d, |i, j| gains[i][j])
                })
                .collect()),
            _ => Err(Error::InvalidArgument(
                "oracle feedback evaluation needs linear policies".into(),
            )),
        })
        .collect()
}
