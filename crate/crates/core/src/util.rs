//! Deterministic reductions and small statistics helpers.
//!
//! Two reduction disciplines are used throughout the crate:
//!
//! * across agents: sort the addends before summing, so any permutation of
//!   the agents produces bit-identical aggregates;
//! * across replications: accumulate in replication order with compensated
//!   summation, so results do not depend on the worker-thread count.

/// Neumaier compensated sum in slice order.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sum that is invariant under permutations of the input: the addends are
/// sorted by total order before sequential accumulation.
pub fn symmetric_sum(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    for x in v {
        sum += x;
    }
    sum
}

/// Permutation-invariant mean.
pub fn symmetric_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    symmetric_sum(xs) / xs.len() as f64
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = compensated_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for &x in xs {
        let d = x - mean;
        ss += d * d;
    }
    let var = ss / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of y against x.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}
