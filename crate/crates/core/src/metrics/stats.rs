use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// An estimate with its standard error and sample count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub value: f64,
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn new(value: f64, se: f64, n: usize) -> Self {
        Self { value, se, n }
    }

    /// |value| / se, or infinity when se is 0 and value is not.
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.value / self.se
        } else if self.value == 0.0 {
            0.0
        } else {
            f64::INFINITY * self.value.signum()
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean with its standard error.
pub fn mean_se(xs: &[f64]) -> Stat {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return Stat::new(m, 0.0, n);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Stat::new(m, (var / n as f64).sqrt(), n)
}

/// Resamples of the rows of `data` (rows of `width` values).
pub const BOOTSTRAP_RESAMPLES: usize = 50;

/// Bootstrap standard error of `stat` over rows, with a fixed resampling seed.
pub fn bootstrap_se<F>(data: &[f64], width: usize, seed: u64, stat: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = data.len() / width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut buf = vec![0.0; data.len()];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for r in 0..n {
            let src = rng.random_range(0..n);
            buf[r * width..(r + 1) * width].copy_from_slice(&data[src * width..(src + 1) * width]);
        }
        vals.push(stat(&buf)?);
    }
    let m = mean(&vals);
    Ok((vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt())
}

/// Least-squares slope of `ys` against 0, 1, 2, ...; the standard error
/// propagates the per-point standard errors `se`.
pub fn ols_slope(ys: &[f64], se: &[f64]) -> Stat {
    let n = ys.len();
    if n < 2 {
        return Stat::new(0.0, 0.0, n);
    }
    let xbar = (n - 1) as f64 / 2.0;
    let sxx: f64 = (0..n).map(|i| (i as f64 - xbar).powi(2)).sum();
    let ybar = mean(ys);
    let slope = (0..n).map(|i| (i as f64 - xbar) * (ys[i] - ybar)).sum::<f64>() / sxx;
    let var: f64 = (0..n).map(|i| (i as f64 - xbar).powi(2) * se[i].powi(2)).sum::<f64>() / (sxx * sxx);
    Stat::new(slope, var.sqrt(), n)
}

/// Exact one-sided Wilcoxon signed-rank test of H1: median(a - b) > 0.
///
/// Zero differences are dropped; ties share average ranks and the null
/// distribution is enumerated over the actual ranks. Returns 1 when every
/// difference is zero.
pub fn wilcoxon_greater(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    // doubled average ranks keep everything integral
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r2 = i + j + 2; // (i+1 + j+1)
        for r in &mut ranks2[i..=j] {
            *r = r2;
        }
        i = j + 1;
    }
    let observed: usize = d.iter().zip(&ranks2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total: usize = ranks2.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &ranks2 {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all: f64 = counts.iter().sum();
    Ok(counts[observed..].iter().sum::<f64>() / all)
}

/// Kozachenko-Leonenko (1-nearest-neighbour) differential entropy estimate in nats.
pub fn knn_entropy(points: &[f64], dim: usize) -> Result<f64> {
    let n = points.len() / dim;
    if n < 2 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!("entropy needs at least two {dim}-d points")));
    }
    // sort along the first axis so the neighbour search can stop early
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a * dim].total_cmp(&points[b * dim]));
    let p = |i: usize| &points[order[i] * dim..(order[i] + 1) * dim];
    let mut sum_log = 0.0;
    for i in 0..n {
        let pi = p(i);
        let mut best = f64::INFINITY;
        for dir in [-1isize, 1] {
            let mut j = i as isize + dir;
            while j >= 0 && (j as usize) < n {
                let pj = p(j as usize);
                let gap = (pj[0] - pi[0]).powi(2);
                if gap >= best {
                    break;
                }
                let d2: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b).powi(2)).sum();
                best = best.min(d2);
                j += dir;
            }
        }
        // duplicates carry no volume information; floor the distance
        sum_log += 0.5 * best.max(1e-300).ln();
    }
    let d = dim as f64;
    let log_unit_ball = 0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d + 1.0);
    Ok(digamma(n as f64) - digamma(1.0) + log_unit_ball + d * sum_log / n as f64)
}
