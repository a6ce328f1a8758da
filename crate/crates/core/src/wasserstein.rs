//! Exact 2-Wasserstein distance between uniform empirical measures.
//!
//! d = 1 uses the sorted quantile coupling (sizes may differ); d > 1 with
//! equal sizes up to 512 solves the assignment problem exactly.

use crate::error::{Error, Result};

const MAX_ASSIGNMENT: usize = 512;

/// W2 between two uniform empirical measures given as point lists.
pub fn wasserstein2(mu: &[Vec<f64>], nu: &[Vec<f64>]) -> Result<f64> {
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::EmptySample("wasserstein2 needs nonempty supports".into()));
    }
    let d = mu[0].len();
    if mu.iter().chain(nu).any(|p| p.len() != d) {
        return Err(Error::DimensionMismatch("mixed point dimensions".into()));
    }
    if d == 1 {
        let a: Vec<f64> = mu.iter().map(|p| p[0]).collect();
        let b: Vec<f64> = nu.iter().map(|p| p[0]).collect();
        Ok(wasserstein2_1d(&a, &b))
    } else {
        if mu.len() != nu.len() {
            return Err(Error::UnsupportedSize(format!(
                "d > 1 needs equal sizes, got {} and {}",
                mu.len(),
                nu.len()
            )));
        }
        if mu.len() > MAX_ASSIGNMENT {
            return Err(Error::UnsupportedSize(format!(
                "d > 1 exact assignment limited to {MAX_ASSIGNMENT} points, got {}",
                mu.len()
            )));
        }
        // canonical argument order so the distance is exactly symmetric
        let (a, b) = if lex_le(mu, nu) { (mu, nu) } else { (nu, mu) };
        let n = a.len();
        let mut cost = vec![vec![0.0; n]; n];
        for (i, row) in cost.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c = sq_dist(&a[i], &b[j]);
            }
        }
        let total = assignment_min_cost(&cost);
        Ok((total / n as f64).sqrt())
    }
}

fn lex_le(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    for (pa, pb) in a.iter().zip(b) {
        for (va, vb) in pa.iter().zip(pb) {
            match va.total_cmp(vb) {
                std::cmp::Ordering::Less => return true,
                std::cmp::Ordering::Greater => return false,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    true
}

/// Exact 1-D W2 via the quantile coupling; sizes may differ.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut mass_i = 1.0 / n as f64;
    let mut mass_j = 1.0 / m as f64;
    let mut total = 0.0;
    while i < n && j < m {
        let take = mass_i.min(mass_j);
        let diff = xs[i] - ys[j];
        total += take * diff * diff;
        mass_i -= take;
        mass_j -= take;
        if mass_i <= 1e-15 {
            i += 1;
            mass_i = 1.0 / n as f64;
        }
        if mass_j <= 1e-15 {
            j += 1;
            mass_j = 1.0 / m as f64;
        }
    }
    total.max(0.0).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect assignment (Hungarian algorithm with potentials).
pub fn assignment_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost[p[j] - 1][j - 1];
    }
    total
}
