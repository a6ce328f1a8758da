//! Policy representations: deterministic Markov kernels (linear feedback,
//! lookup grid, open-loop schedule), randomized Markov kernels (categorical
//! grid, clipped Gaussian), and discrete-time wide-sense controls driven by
//! the agent's own initial state and noise history.
//!
//! The discrete wide-sense representation enforces the admissibility
//! conditions structurally: the step-k distribution is a function of
//! (X_0, W increments up to k) only, and each step carries the same dt of
//! time mass. We do not test statistical independence from future noise;
//! the representation simply cannot depend on it.

use serde::{Deserialize, Serialize};

use crate::dynamics::ActionBox;
use crate::error::{Error, Result};
use crate::rng::{StreamTag, Streams};

/// Everything a policy may depend on when choosing the step-k action.
#[derive(Clone, Copy, Debug)]
pub struct ActCtx<'a> {
    pub t: f64,
    pub step: usize,
    /// Current private state.
    pub x: &'a [f64],
    /// The agent's initial state.
    pub x0: &'a [f64],
    /// Cumulative own Wiener increments up to the current step.
    pub w_cum: &'a [f64],
}

/// Addressable randomness for one (replication, agent) pair.
#[derive(Clone, Copy, Debug)]
pub struct Substream<'a> {
    pub streams: &'a Streams,
    pub rep: u64,
    pub agent: u64,
}

impl<'a> Substream<'a> {
    #[inline]
    fn uniform(&self, step: usize) -> f64 {
        self.streams
            .uniform(StreamTag::Action, self.rep, self.agent, step as u64, 0)
    }

    #[inline]
    fn normals(&self, step: usize, out: &mut [f64]) {
        self.streams
            .fill_normals(StreamTag::Action, self.rep, self.agent, step as u64, out);
    }
}

/// Increasing bin edges; index = number of edges at or below the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub edges: Vec<f64>,
}

impl Bins {
    pub fn index(&self, v: f64) -> usize {
        self.edges.iter().take_while(|e| v >= **e).count()
    }

    pub fn count(&self) -> usize {
        self.edges.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Policy {
    /// u = K x with one gain matrix per time bin.
    Linear {
        #[serde(rename = "K")]
        k: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_edges: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        extra_gains: Vec<Vec<Vec<f64>>>,
    },
    /// Scalar-state lookup table: u = table[t_bin][x_bin].
    Grid {
        t_bins: Bins,
        x_bins: Bins,
        table: Vec<Vec<Vec<f64>>>,
    },
    /// Fixed per-step control schedule, indexed by the step counter.
    OpenLoop { controls: Vec<Vec<f64>> },
    /// Randomized Markov kernel: finite distribution over action atoms per
    /// (t_bin, x_bin) cell.
    CategoricalGrid {
        atoms: Vec<Vec<f64>>,
        t_bins: Bins,
        x_bins: Bins,
        table: Vec<Vec<Vec<f64>>>,
    },
    /// Randomized Markov kernel: Gaussian around K x with constant std,
    /// clipped to the action box.
    ClippedGaussian {
        #[serde(rename = "K")]
        k: Vec<Vec<f64>>,
        std: f64,
    },
    /// Discrete wide-sense control: softmax over action atoms with a linear
    /// score in (1, x0, w_cum, t).
    WideSense {
        atoms: Vec<Vec<f64>>,
        theta: Vec<Vec<f64>>,
    },
}

impl Policy {
    pub fn linear(k: Vec<Vec<f64>>) -> Policy {
        Policy::Linear {
            k,
            t_edges: None,
            extra_gains: Vec::new(),
        }
    }

    /// Linear feedback piecewise constant over time bins; `gains[b]` applies
    /// on the b-th bin of `t_edges`.
    pub fn linear_binned(t_edges: Vec<f64>, gains: Vec<Vec<Vec<f64>>>) -> Result<Policy> {
        if gains.len() != t_edges.len() + 1 {
            return Err(Error::SizeMismatch(format!(
                "{} gain matrices for {} time bins",
                gains.len(),
                t_edges.len() + 1
            )));
        }
        let mut gains = gains;
        let k = gains.remove(0);
        Ok(Policy::Linear {
            k,
            t_edges: Some(t_edges),
            extra_gains: gains,
        })
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Linear { k, .. } => k.len(),
            Policy::Grid { table, .. } => table[0][0].len(),
            Policy::OpenLoop { controls } => controls.first().map(|c| c.len()).unwrap_or(0),
            Policy::CategoricalGrid { atoms, .. } => atoms[0].len(),
            Policy::ClippedGaussian { k, .. } => k.len(),
            Policy::WideSense { atoms, .. } => atoms[0].len(),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(
            self,
            Policy::CategoricalGrid { .. } | Policy::ClippedGaussian { .. } | Policy::WideSense { .. }
        )
    }

    /// Deterministic kernels can be averaged pointwise; randomized ones keep
    /// their law structure instead.
    pub fn is_deterministic_kernel(&self) -> bool {
        matches!(
            self,
            Policy::Linear { .. } | Policy::Grid { .. } | Policy::OpenLoop { .. }
        )
    }

    /// Structural checks against an action box: probability tables normalize
    /// within 1e-12 and all fixed atoms/table entries are inside the box.
    pub fn validate(&self, action_box: &ActionBox) -> Result<()> {
        match self {
            Policy::Linear { .. } | Policy::ClippedGaussian { .. } => Ok(()),
            Policy::OpenLoop { controls } => {
                for c in controls {
                    if !action_box.contains(c) {
                        return Err(Error::ActionOutOfBox(format!("schedule entry {c:?}")));
                    }
                }
                Ok(())
            }
            Policy::Grid { table, .. } => {
                for row in table {
                    for cell in row {
                        if !action_box.contains(cell) {
                            return Err(Error::ActionOutOfBox(format!("grid entry {cell:?}")));
                        }
                    }
                }
                Ok(())
            }
            Policy::CategoricalGrid { atoms, table, .. } => {
                for a in atoms {
                    if !action_box.contains(a) {
                        return Err(Error::ActionOutOfBox(format!("atom {a:?}")));
                    }
                }
                for row in table {
                    for cell in row {
                        if cell.len() != atoms.len() {
                            return Err(Error::SizeMismatch(
                                "probability vector length differs from atom count".into(),
                            ));
                        }
                        let s: f64 = cell.iter().sum();
                        if (s - 1.0).abs() > 1e-12 || cell.iter().any(|p| *p < 0.0) {
                            return Err(Error::InvalidArgument(format!(
                                "probability vector sums to {s}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            Policy::WideSense { atoms, theta } => {
                for a in atoms {
                    if !action_box.contains(a) {
                        return Err(Error::ActionOutOfBox(format!("atom {a:?}")));
                    }
                }
                if theta.len() != atoms.len() {
                    return Err(Error::SizeMismatch(
                        "wide-sense theta rows must match atom count".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Evaluates the policy at the given context. Deterministic policies
    /// ignore the substream; randomized policies draw only from it.
    pub fn act_into(
        &self,
        ctx: &ActCtx,
        action_box: &ActionBox,
        sub: &Substream,
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            Policy::Linear {
                k,
                t_edges,
                extra_gains,
            } => {
                let gains = match t_edges {
                    None => k,
                    Some(edges) => {
                        let b = edges.iter().take_while(|e| ctx.t >= **e).count();
                        if b == 0 {
                            k
                        } else {
                            &extra_gains[b - 1]
                        }
                    }
                };
                apply_gain(gains, ctx.x, out);
                if !action_box.contains(out) {
                    return Err(Error::ActionOutOfBox(format!(
                        "linear feedback emitted {out:?} at t={}",
                        ctx.t
                    )));
                }
                Ok(())
            }
            Policy::Grid {
                t_bins,
                x_bins,
                table,
            } => {
                let ti = t_bins.index(ctx.t).min(table.len() - 1);
                let xi = x_bins.index(ctx.x[0]).min(table[ti].len() - 1);
                out.copy_from_slice(&table[ti][xi]);
                Ok(())
            }
            Policy::OpenLoop { controls } => {
                let c = controls.get(ctx.step).ok_or_else(|| {
                    Error::SizeMismatch(format!(
                        "open-loop schedule has {} entries, step {} requested",
                        controls.len(),
                        ctx.step
                    ))
                })?;
                out.copy_from_slice(c);
                Ok(())
            }
            Policy::CategoricalGrid {
                atoms,
                t_bins,
                x_bins,
                table,
            } => {
                let ti = t_bins.index(ctx.t).min(table.len() - 1);
                let xi = x_bins.index(ctx.x[0]).min(table[ti].len() - 1);
                let probs = &table[ti][xi];
                let idx = sample_categorical(probs, sub.uniform(ctx.step));
                out.copy_from_slice(&atoms[idx]);
                Ok(())
            }
            Policy::ClippedGaussian { k, std } => {
                apply_gain(k, ctx.x, out);
                let mut z = vec![0.0; out.len()];
                sub.normals(ctx.step, &mut z);
                for (o, zi) in out.iter_mut().zip(&z) {
                    *o += std * zi;
                }
                action_box.clamp_into(out);
                Ok(())
            }
            Policy::WideSense { atoms, theta } => {
                let mut best = f64::NEG_INFINITY;
                let mut scores = vec![0.0; atoms.len()];
                for (a, th) in theta.iter().enumerate() {
                    let mut s = th[0];
                    let mut j = 1;
                    for v in ctx.x0 {
                        s += th.get(j).copied().unwrap_or(0.0) * v;
                        j += 1;
                    }
                    for v in ctx.w_cum {
                        s += th.get(j).copied().unwrap_or(0.0) * v;
                        j += 1;
                    }
                    s += th.get(j).copied().unwrap_or(0.0) * ctx.t;
                    scores[a] = s;
                    best = best.max(s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - best).exp();
                    total += *s;
                }
                for s in scores.iter_mut() {
                    *s /= total;
                }
                let idx = sample_categorical(&scores, sub.uniform(ctx.step));
                out.copy_from_slice(&atoms[idx]);
                Ok(())
            }
        }
    }
}

#[inline]
fn apply_gain(k: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (i, row) in k.iter().enumerate() {
        let mut v = 0.0;
        for (j, kij) in row.iter().enumerate() {
            v += kij * x[j];
        }
        out[i] = v;
    }
}

#[inline]
fn sample_categorical(probs: &[f64], unit: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if unit <= acc {
            return i;
        }
    }
    probs.len() - 1
}
