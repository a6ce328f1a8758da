//! Sampled regularity diagnostics for a dynamics specification: empirical
//! Lipschitz ratios, affine-growth ratios, diffusion nondegeneracy, and (for
//! measure-coupled drifts) sensitivity in the 2-Wasserstein distance. These
//! are spot checks on a finite sample, not proofs.

use nalgebra::DMatrix;

use crate::dynamics::{stacked_means, Measures, Mode, TeamDynamics};
use crate::error::{Error, Result};
use crate::rng::{StreamTag, Streams};
use crate::wasserstein::wasserstein2;

#[derive(Clone, Debug)]
pub struct DiagnosticConfig {
    /// Number of sampled (t, x, y, u) tuples.
    pub samples: usize,
    /// Radius of the state ball the points are drawn from.
    pub radius: f64,
    pub seed: u64,
    /// Flag thresholds.
    pub lipschitz_cap: f64,
    pub growth_cap: f64,
    pub min_eig_floor: f64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            samples: 256,
            radius: 5.0,
            seed: 0xD1A6,
            lipschitz_cap: 1e3,
            growth_cap: 1e3,
            min_eig_floor: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    /// max |b(x,u) - b(y,u)| / |x - y| over the sample.
    pub drift_lipschitz: f64,
    /// max ||sigma(x) - sigma(y)||_F / |x - y| over the sample.
    pub sigma_lipschitz: f64,
    /// max (|b|^2 + ||sigma||_F^2) / (1 + |x|^2) over the sample.
    pub growth: f64,
    /// min eigenvalue of sigma sigma^T over the sample.
    pub min_eig_sigma_sq: f64,
    /// max |b(x,u,mu) - b(x,u,mu')| / W2(mu, mu') over sampled measure pairs
    /// (measure-coupled drifts only).
    pub measure_lipschitz: Option<f64>,
    pub flags: Vec<String>,
}

impl AssumptionReport {
    pub fn ok(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Samples points in the ball B_R and reports the ratio statistics.
pub fn check_assumptions(dynamics: &TeamDynamics, cfg: &DiagnosticConfig) -> Result<AssumptionReport> {
    if cfg.samples == 0 {
        return Err(Error::EmptySample("diagnostic sample is empty".into()));
    }
    let d = dynamics.state_dim;
    let m = dynamics.action_dim;
    let streams = Streams::derived(cfg.seed, "assumption-diagnostics");
    let coupled = dynamics.mode != Mode::Decoupled;

    let mut drift_lip: f64 = 0.0;
    let mut sigma_lip: f64 = 0.0;
    let mut growth: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut meas_lip: f64 = 0.0;

    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut u = vec![0.0; m];
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut sx = DMatrix::zeros(d, d);
    let mut sy = DMatrix::zeros(d, d);

    // fixed small particle clouds for the measure-sensitivity probe
    let cloud = 16usize;

    for s in 0..cfg.samples {
        let rep = s as u64;
        let t = streams.uniform(StreamTag::Generic(2), rep, 0, 0, 0);
        sample_ball(&streams, rep, 1, cfg.radius, &mut x);
        sample_ball(&streams, rep, 2, cfg.radius, &mut y);
        for (j, v) in u.iter_mut().enumerate() {
            let lo = dynamics.action_box.lo[j].max(-cfg.radius);
            let hi = dynamics.action_box.hi[j].min(cfg.radius);
            let un = streams.uniform(StreamTag::Generic(3), rep, j as u64, 0, 0);
            *v = lo + (hi - lo) * un;
        }

        let measures_storage;
        let measures = if coupled {
            measures_storage = FixedCloud::sample(&streams, rep, 10, cloud, d, m, cfg.radius);
            Some(measures_storage)
        } else {
            None
        };
        let meas_ref = measures.as_ref().map(|c| c.measures());

        dynamics.drift_into(t, &x, &u, meas_ref.as_ref(), &mut bx);
        dynamics.drift_into(t, &y, &u, meas_ref.as_ref(), &mut by);
        dynamics.sigma_into(t, &x, &mut sx);
        dynamics.sigma_into(t, &y, &mut sy);

        let dxy = norm_diff(&x, &y);
        if dxy > 1e-12 {
            drift_lip = drift_lip.max(norm_diff(&bx, &by) / dxy);
            let mut fs = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let dv = sx[(i, j)] - sy[(i, j)];
                    fs += dv * dv;
                }
            }
            sigma_lip = sigma_lip.max(fs.sqrt() / dxy);
        }

        let b2: f64 = bx.iter().map(|v| v * v).sum();
        let s2: f64 = sx.iter().map(|v| v * v).sum();
        let x2: f64 = x.iter().map(|v| v * v).sum();
        growth = growth.max((b2 + s2) / (1.0 + x2));

        let a = &sx * sx.transpose();
        let eig = a.symmetric_eigenvalues();
        min_eig = min_eig.min(eig.iter().fold(f64::INFINITY, |acc, v| acc.min(*v)));

        if coupled {
            // drift sensitivity to the measure argument
            let c1 = FixedCloud::sample(&streams, rep, 20, cloud, d, m, cfg.radius);
            let c2 = FixedCloud::sample(&streams, rep, 30, cloud, d, m, cfg.radius);
            let w2 = wasserstein2_cloud(&c1, &c2, d)?;
            if w2 > 1e-9 {
                let mut b1 = vec![0.0; d];
                let mut b2v = vec![0.0; d];
                dynamics.drift_into(t, &x, &u, Some(&c1.measures()), &mut b1);
                dynamics.drift_into(t, &x, &u, Some(&c2.measures()), &mut b2v);
                meas_lip = meas_lip.max(norm_diff(&b1, &b2v) / w2);
            }
        }
    }

    let mut flags = Vec::new();
    if min_eig < cfg.min_eig_floor {
        flags.push(format!(
            "nondegeneracy: min eigenvalue of sigma sigma^T is {min_eig:.3e} (floor {:.1e})",
            cfg.min_eig_floor
        ));
    }
    if drift_lip > cfg.lipschitz_cap || sigma_lip > cfg.lipschitz_cap {
        flags.push(format!(
            "lipschitz: sampled ratio {:.3e} exceeds cap {:.1e}",
            drift_lip.max(sigma_lip),
            cfg.lipschitz_cap
        ));
    }
    if growth > cfg.growth_cap {
        flags.push(format!(
            "growth: sampled ratio {growth:.3e} exceeds cap {:.1e}",
            cfg.growth_cap
        ));
    }
    if !drift_lip.is_finite() || !growth.is_finite() {
        flags.push("non-finite drift values in the sample".into());
    }

    Ok(AssumptionReport {
        drift_lipschitz: drift_lip,
        sigma_lipschitz: sigma_lip,
        growth,
        min_eig_sigma_sq: min_eig,
        measure_lipschitz: if coupled { Some(meas_lip) } else { None },
        flags,
    })
}

fn sample_ball(streams: &Streams, rep: u64, lane_base: u64, radius: f64, out: &mut [f64]) {
    streams.fill_normals(StreamTag::Generic(4), rep, lane_base, 0, out);
    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let r = radius
        * streams
            .uniform(StreamTag::Generic(5), rep, lane_base, 0, 0)
            .powf(1.0 / out.len() as f64);
    for v in out.iter_mut() {
        *v *= r / norm;
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct FixedCloud {
    x: Vec<f64>,
    u: Vec<f64>,
    n: usize,
    mean_x: Vec<f64>,
    mean_u: Vec<f64>,
}

impl FixedCloud {
    fn sample(streams: &Streams, rep: u64, lane_base: u64, n: usize, d: usize, m: usize, radius: f64) -> FixedCloud {
        let mut x = vec![0.0; n * d];
        let mut u = vec![0.0; n * m];
        for p in 0..n {
            sample_ball(
                streams,
                rep,
                lane_base + 100 + p as u64,
                radius,
                &mut x[p * d..(p + 1) * d],
            );
            for j in 0..m {
                u[p * m + j] = streams.uniform(
                    StreamTag::Generic(6),
                    rep,
                    lane_base + 100 + p as u64,
                    j as u64,
                    0,
                ) - 0.5;
            }
        }
        let mut mean_x = vec![0.0; d];
        let mut mean_u = vec![0.0; m];
        stacked_means(&x, n, d, &mut mean_x);
        stacked_means(&u, n, m, &mut mean_u);
        FixedCloud {
            x,
            u,
            n,
            mean_x,
            mean_u,
        }
    }

    fn measures(&self) -> Measures<'_> {
        Measures {
            x_points: &self.x,
            u_points: &self.u,
            n: self.n,
            mean_x: &self.mean_x,
            mean_u: &self.mean_u,
        }
    }
}

fn wasserstein2_cloud(a: &FixedCloud, b: &FixedCloud, d: usize) -> Result<f64> {
    let pa: Vec<Vec<f64>> = (0..a.n).map(|p| a.x[p * d..(p + 1) * d].to_vec()).collect();
    let pb: Vec<Vec<f64>> = (0..b.n).map(|p| b.x[p * d..(p + 1) * d].to_vec()).collect();
    wasserstein2(&pa, &pb)
}
