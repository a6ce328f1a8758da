//! Team dynamics: drift/diffusion specifications for the three families
//! (decoupled, empirically coupled, mean-field) plus the named registry and
//! the custom expression form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{EvalCtx, Expr};
use crate::util::symmetric_sum;

/// Per-coordinate action bounds encoding the compact action space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch(format!(
                "action box lo has {} coordinates, hi has {}",
                lo.len(),
                hi.len()
            )));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l <= h) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate action box: lo {l} > hi {h}"
                )));
            }
        }
        Ok(ActionBox { lo, hi })
    }

    pub fn wide(m: usize) -> Self {
        ActionBox {
            lo: vec![-1e6; m],
            hi: vec![1e6; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.lo.len()
            && u.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn clamp_into(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.max(*l).min(*h);
        }
    }
}

/// Which arguments the drift receives beyond (t, x, u).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Decoupled,
    Coupled,
    MeanField,
}

/// Empirical measures over states and actions at one time step, carried as
/// the raw particle arrays plus their (permutation-invariant) means.
#[derive(Clone, Copy, Debug)]
pub struct Measures<'a> {
    /// Row-major particle states, `n` rows of `d` coordinates.
    pub x_points: &'a [f64],
    /// Row-major particle actions, `n` rows of `m` coordinates.
    pub u_points: &'a [f64],
    pub n: usize,
    pub mean_x: &'a [f64],
    pub mean_u: &'a [f64],
}

/// Computes per-coordinate means of `n` stacked points via sorted sums, so
/// the result is bit-identical under any relabeling of the particles.
pub fn stacked_means(points: &[f64], n: usize, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(points.len(), n * dim);
    debug_assert_eq!(out.len(), dim);
    let mut column = vec![0.0; n];
    for j in 0..dim {
        for i in 0..n {
            column[i] = points[i * dim + j];
        }
        out[j] = symmetric_sum(&column) / n as f64;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DriftSpec {
    /// b = -rate * x + input_gain * u (componentwise; requires m == d when
    /// input_gain != 0).
    Ou { rate: f64, input_gain: f64 },
    /// b = A x + B u.
    Linear { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// b = input_gain * u + kappa * g(mean_x - x), with g = tanh when
    /// `smooth` (keeps the drift uniformly bounded) and identity otherwise.
    MeanAttraction {
        kappa: f64,
        input_gain: f64,
        smooth: bool,
    },
    /// One expression per state coordinate over t, x, u, mean_x, mean_u.
    Custom { components: Vec<Expr> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DiffusionSpec {
    /// Constant diagonal sigma.
    ConstDiag { diag: Vec<f64> },
    /// Constant full d x d matrix.
    ConstMatrix { rows: Vec<Vec<f64>> },
    /// State/time-dependent diagonal, one expression per coordinate
    /// (expressions over t and x only).
    DiagExpr { components: Vec<Expr> },
}

/// Drift/diffusion pair with dimension and action-space metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeamDynamics {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_box: ActionBox,
    pub mode: Mode,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
}

impl TeamDynamics {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        action_box: ActionBox,
        mode: Mode,
        drift: DriftSpec,
        diffusion: DiffusionSpec,
    ) -> Result<Self> {
        if action_box.dim() != action_dim {
            return Err(Error::DimensionMismatch(format!(
                "action box has {} coordinates for action_dim {}",
                action_box.dim(),
                action_dim
            )));
        }
        let dyn_ = TeamDynamics {
            state_dim,
            action_dim,
            action_box,
            mode,
            drift,
            diffusion,
        };
        dyn_.validate()?;
        Ok(dyn_)
    }

    fn validate(&self) -> Result<()> {
        let (d, m) = (self.state_dim, self.action_dim);
        match &self.drift {
            DriftSpec::Ou { input_gain, .. } => {
                if *input_gain != 0.0 && m != d {
                    return Err(Error::DimensionMismatch(
                        "ou drift with input requires action_dim == state_dim".into(),
                    ));
                }
            }
            DriftSpec::Linear { a, b } => {
                if a.len() != d || a.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch("linear drift A must be d x d".into()));
                }
                if b.len() != d || b.iter().any(|r| r.len() != m) {
                    return Err(Error::DimensionMismatch("linear drift B must be d x m".into()));
                }
            }
            DriftSpec::MeanAttraction { input_gain, .. } => {
                if self.mode == Mode::Decoupled {
                    return Err(Error::InvalidArgument(
                        "mean-attraction drift needs coupled or mean-field mode".into(),
                    ));
                }
                if *input_gain != 0.0 && m != d {
                    return Err(Error::DimensionMismatch(
                        "mean-attraction with input requires action_dim == state_dim".into(),
                    ));
                }
            }
            DriftSpec::Custom { components } => {
                if components.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "custom drift has {} components for state_dim {}",
                        components.len(),
                        d
                    )));
                }
                let has_measures = self.mode != Mode::Decoupled;
                for c in components {
                    c.validate(d, m, has_measures)?;
                }
            }
        }
        match &self.diffusion {
            DiffusionSpec::ConstDiag { diag } => {
                if diag.len() != d {
                    return Err(Error::DimensionMismatch("diffusion diag must have d entries".into()));
                }
            }
            DiffusionSpec::ConstMatrix { rows } => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch("diffusion matrix must be d x d".into()));
                }
            }
            DiffusionSpec::DiagExpr { components } => {
                if components.len() != d {
                    return Err(Error::DimensionMismatch("diffusion diag must have d entries".into()));
                }
                for c in components {
                    c.validate(d, 0, false)?;
                }
            }
        }
        Ok(())
    }

    /// True when the drift actually reads the measure arguments.
    pub fn drift_uses_measures(&self) -> bool {
        match &self.drift {
            DriftSpec::Ou { .. } | DriftSpec::Linear { .. } => false,
            DriftSpec::MeanAttraction { kappa, .. } => *kappa != 0.0,
            DriftSpec::Custom { components } => components.iter().any(|c| c.uses_measures()),
        }
    }

    /// Evaluates the drift into `out`. `measures` must be `Some` for coupled
    /// and mean-field modes.
    #[inline]
    pub fn drift_into(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        measures: Option<&Measures>,
        out: &mut [f64],
    ) {
        match &self.drift {
            DriftSpec::Ou { rate, input_gain } => {
                for i in 0..self.state_dim {
                    let mut v = -rate * x[i];
                    if *input_gain != 0.0 {
                        v += input_gain * u[i];
                    }
                    out[i] = v;
                }
            }
            DriftSpec::Linear { a, b } => {
                for i in 0..self.state_dim {
                    let mut v = 0.0;
                    for (j, aij) in a[i].iter().enumerate() {
                        v += aij * x[j];
                    }
                    for (j, bij) in b[i].iter().enumerate() {
                        v += bij * u[j];
                    }
                    out[i] = v;
                }
            }
            DriftSpec::MeanAttraction {
                kappa,
                input_gain,
                smooth,
            } => {
                let meas = measures.expect("mean-attraction drift needs measures");
                for i in 0..self.state_dim {
                    let gap = meas.mean_x[i] - x[i];
                    let pull = if *smooth { gap.tanh() } else { gap };
                    let mut v = kappa * pull;
                    if *input_gain != 0.0 {
                        v += input_gain * u[i];
                    }
                    out[i] = v;
                }
            }
            DriftSpec::Custom { components } => {
                let (mean_x, mean_u) = match measures {
                    Some(m) => (Some(m.mean_x), Some(m.mean_u)),
                    None => (None, None),
                };
                let ctx = EvalCtx {
                    t,
                    x,
                    u,
                    mean_x,
                    mean_u,
                };
                for (i, c) in components.iter().enumerate() {
                    out[i] = c.eval(&ctx);
                }
            }
        }
    }

    /// Writes sigma(t, x) into a d x d matrix.
    pub fn sigma_into(&self, t: f64, x: &[f64], out: &mut DMatrix<f64>) {
        let d = self.state_dim;
        debug_assert_eq!(out.nrows(), d);
        match &self.diffusion {
            DiffusionSpec::ConstDiag { diag } => {
                out.fill(0.0);
                for i in 0..d {
                    out[(i, i)] = diag[i];
                }
            }
            DiffusionSpec::ConstMatrix { rows } => {
                for i in 0..d {
                    for j in 0..d {
                        out[(i, j)] = rows[i][j];
                    }
                }
            }
            DiffusionSpec::DiagExpr { components } => {
                out.fill(0.0);
                let ctx = EvalCtx {
                    t,
                    x,
                    u: &[],
                    mean_x: None,
                    mean_u: None,
                };
                for i in 0..d {
                    out[(i, i)] = components[i].eval(&ctx);
                }
            }
        }
    }

    /// Applies sigma(t, x) to `v`, adding the result into `out`.
    #[inline]
    pub fn sigma_apply_add(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.diffusion {
            DiffusionSpec::ConstDiag { diag } => {
                for i in 0..self.state_dim {
                    out[i] += diag[i] * v[i];
                }
            }
            DiffusionSpec::ConstMatrix { rows } => {
                for i in 0..self.state_dim {
                    let mut acc = 0.0;
                    for (j, s) in rows[i].iter().enumerate() {
                        acc += s * v[j];
                    }
                    out[i] += acc;
                }
            }
            DiffusionSpec::DiagExpr { components } => {
                let ctx = EvalCtx {
                    t,
                    x,
                    u: &[],
                    mean_x: None,
                    mean_u: None,
                };
                for i in 0..self.state_dim {
                    out[i] += components[i].eval(&ctx) * v[i];
                }
            }
        }
    }

    /// Solves sigma(t, x) w = v for w (needed by the reweighting machinery).
    pub fn sigma_solve(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.diffusion {
            DiffusionSpec::ConstDiag { diag } => {
                for i in 0..self.state_dim {
                    if diag[i].abs() < 1e-14 {
                        return Err(Error::SingularDiffusion(format!(
                            "diagonal entry {i} is {}",
                            diag[i]
                        )));
                    }
                    out[i] = v[i] / diag[i];
                }
                Ok(())
            }
            DiffusionSpec::DiagExpr { components } => {
                let ctx = EvalCtx {
                    t,
                    x,
                    u: &[],
                    mean_x: None,
                    mean_u: None,
                };
                for i in 0..self.state_dim {
                    let s = components[i].eval(&ctx);
                    if s.abs() < 1e-14 {
                        return Err(Error::SingularDiffusion(format!(
                            "diagonal entry {i} is {s} at t={t}"
                        )));
                    }
                    out[i] = v[i] / s;
                }
                Ok(())
            }
            DiffusionSpec::ConstMatrix { rows } => {
                let d = self.state_dim;
                let mat = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                let rhs = nalgebra::DVector::from_column_slice(v);
                let lu = mat.lu();
                match lu.solve(&rhs) {
                    Some(sol) => {
                        out.copy_from_slice(sol.as_slice());
                        Ok(())
                    }
                    None => Err(Error::SingularDiffusion("constant matrix is singular".into())),
                }
            }
        }
    }

    /// Stable name used in batch metadata.
    pub fn id(&self) -> String {
        match &self.drift {
            DriftSpec::Ou { .. } => "ou".into(),
            DriftSpec::Linear { .. } => "lqg-linear".into(),
            DriftSpec::MeanAttraction { .. } => "mf-attraction".into(),
            DriftSpec::Custom { .. } => "custom-expression".into(),
        }
    }
}

/// Named constructors mirroring the built-in registry.
impl TeamDynamics {
    pub fn ou(d: usize, rate: f64, sigma: f64) -> TeamDynamics {
        TeamDynamics::new(
            d,
            d,
            ActionBox::wide(d),
            Mode::Decoupled,
            DriftSpec::Ou {
                rate,
                input_gain: 0.0,
            },
            DiffusionSpec::ConstDiag {
                diag: vec![sigma; d],
            },
        )
        .expect("valid ou dynamics")
    }

    pub fn lqg_linear(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, sigma_diag: Vec<f64>) -> Result<TeamDynamics> {
        let d = a.len();
        let m = b.first().map(|r| r.len()).unwrap_or(0);
        TeamDynamics::new(
            d,
            m,
            ActionBox::wide(m),
            Mode::Decoupled,
            DriftSpec::Linear { a, b },
            DiffusionSpec::ConstDiag { diag: sigma_diag },
        )
    }

    pub fn mean_attraction(
        d: usize,
        kappa: f64,
        input_gain: f64,
        sigma: f64,
        smooth: bool,
        mode: Mode,
    ) -> Result<TeamDynamics> {
        TeamDynamics::new(
            d,
            d,
            ActionBox::wide(d),
            mode,
            DriftSpec::MeanAttraction {
                kappa,
                input_gain,
                smooth,
            },
            DiffusionSpec::ConstDiag {
                diag: vec![sigma; d],
            },
        )
    }

    pub fn custom(
        mode: Mode,
        d: usize,
        m: usize,
        components: Vec<&str>,
        sigma_diag: Vec<f64>,
        action_box: ActionBox,
    ) -> Result<TeamDynamics> {
        let parsed: Result<Vec<Expr>> = components.iter().map(|c| Expr::parse(c)).collect();
        TeamDynamics::new(
            d,
            m,
            action_box,
            mode,
            DriftSpec::Custom { components: parsed? },
            DiffusionSpec::ConstDiag { diag: sigma_diag },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ou_drift_matches_formula() {
        let dy = TeamDynamics::ou(2, 0.7, 1.0);
        let mut out = [0.0; 2];
        dy.drift_into(0.0, &[1.0, -2.0], &[0.0, 0.0], None, &mut out);
        assert_eq!(out, [-0.7, 1.4]);
    }

    #[test]
    fn mean_attraction_reads_empirical_mean() {
        let dy = TeamDynamics::mean_attraction(1, 2.0, 1.0, 1.0, false, Mode::Coupled).unwrap();
        let xs = [0.0, 2.0];
        let us = [0.0, 0.0];
        let mean_x = [1.0];
        let mean_u = [0.0];
        let meas = Measures {
            x_points: &xs,
            u_points: &us,
            n: 2,
            mean_x: &mean_x,
            mean_u: &mean_u,
        };
        let mut out = [0.0];
        dy.drift_into(0.0, &[0.0], &[0.5], Some(&meas), &mut out);
        assert_eq!(out[0], 0.5 + 2.0 * 1.0);
    }

    #[test]
    fn custom_drift_parses_and_validates() {
        let dy = TeamDynamics::custom(
            Mode::Coupled,
            1,
            1,
            vec!["u + tanh(mean_x - x)"],
            vec![1.0],
            ActionBox::wide(1),
        )
        .unwrap();
        assert!(dy.drift_uses_measures());
        // measure-dependent drift in decoupled mode is rejected
        assert!(TeamDynamics::custom(
            Mode::Decoupled,
            1,
            1,
            vec!["mean_x - x"],
            vec![1.0],
            ActionBox::wide(1),
        )
        .is_err());
    }

    #[test]
    fn sigma_solve_round_trips() {
        let dy = TeamDynamics::new(
            2,
            1,
            ActionBox::wide(1),
            Mode::Decoupled,
            DriftSpec::Ou {
                rate: 1.0,
                input_gain: 0.0,
            },
            DiffusionSpec::ConstMatrix {
                rows: vec![vec![2.0, 0.5], vec![0.0, 1.0]],
            },
        )
        .unwrap();
        let v = [1.0, 2.0];
        let mut w = [0.0; 2];
        dy.sigma_solve(0.0, &[0.0, 0.0], &v, &mut w).unwrap();
        let mut back = [0.0; 2];
        dy.sigma_apply_add(0.0, &[0.0, 0.0], &w, &mut back);
        assert!((back[0] - v[0]).abs() < 1e-12 && (back[1] - v[1]).abs() < 1e-12);
    }

    #[test]
    fn degenerate_action_box_rejected() {
        assert!(ActionBox::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn stacked_means_are_relabel_invariant() {
        let pts_a = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        let pts_b = [3.0, 30.0, 1.0, 10.0, 2.0, 20.0];
        let mut ma = [0.0; 2];
        let mut mb = [0.0; 2];
        stacked_means(&pts_a, 3, 2, &mut ma);
        stacked_means(&pts_b, 3, 2, &mut mb);
        assert_eq!(ma[0].to_bits(), mb[0].to_bits());
        assert_eq!(ma[1].to_bits(), mb[1].to_bits());
    }
}
