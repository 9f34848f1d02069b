use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::worlds::MixtureLaw;

/// Reference law a sample set is compared against.
#[derive(Clone, Debug)]
pub enum W2Target {
    /// Closed-form Gaussian W2 between empirical and reference moments.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    /// Root-mean-square of 1-D quantile W2 along selected coordinates.
    Sliced(Vec<SliceRef>),
}

/// 1-D Gaussian-mixture marginal along one coordinate, with a CDF table.
#[derive(Clone, Debug)]
pub struct SliceRef {
    pub coord: usize,
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

const CDF_POINTS: usize = 20001;

impl SliceRef {
    pub fn new(coord: usize, weights: &[f64], means: &[f64], var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::InvalidArgument("sliced reference needs positive variance".into()));
        }
        let sd = var.sqrt();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 9.0 * sd;
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 9.0 * sd;
        let total: f64 = weights.iter().sum();
        let grid: Vec<f64> = (0..CDF_POINTS).map(|i| lo + (hi - lo) * i as f64 / (CDF_POINTS - 1) as f64).collect();
        let cdf = grid
            .iter()
            .map(|&x| {
                weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| w * 0.5 * (1.0 + erf((x - m) / (sd * std::f64::consts::SQRT_2))))
                    .sum::<f64>()
                    / total
            })
            .collect();
        Ok(Self { coord, grid, cdf })
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let j = self.cdf.partition_point(|&c| c < u);
        if j == 0 {
            return self.grid[0];
        }
        if j >= self.cdf.len() {
            return *self.grid.last().expect("non-empty grid");
        }
        let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
        let f = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.grid[j - 1] + f * (self.grid[j] - self.grid[j - 1])
    }

    /// Squared 1-D W2 between the empirical law of `xs` and this reference.
    pub fn w2_sq(&self, xs: &mut [f64]) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| (x - self.quantile((i as f64 + 0.5) / n)).powi(2))
            .sum::<f64>()
            / n
    }
}

impl W2Target {
    /// Gaussian closed form for single-component laws, otherwise sliced along `axes`.
    pub fn from_law(law: &MixtureLaw, axes: &[usize]) -> Result<Self> {
        if law.components() == 1 {
            return Ok(W2Target::Gaussian {
                mean: law.mean(),
                cov: law.component_cov(),
            });
        }
        let dim = law.dim();
        let slices = axes
            .iter()
            .map(|&a| {
                let mut w = vec![0.0; dim];
                w[a] = 1.0;
                let (weights, means, var) = law.project(&w)?;
                SliceRef::new(a, &weights, &means, var)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(W2Target::Sliced(slices))
    }

    /// Restriction of a law to the coordinates `lo..lo + width`.
    pub fn marginal(law: &MixtureLaw, lo: usize, width: usize, axes: &[usize]) -> Result<Self> {
        let dim = law.dim();
        if law.components() == 1 {
            let mean = law.mean()[lo..lo + width].to_vec();
            let full = law.component_cov();
            let mut cov = vec![0.0; width * width];
            for r in 0..width {
                for c in 0..width {
                    cov[r * width + c] = full[(lo + r) * dim + lo + c];
                }
            }
            return Ok(W2Target::Gaussian { mean, cov });
        }
        let slices = axes
            .iter()
            .map(|&a| {
                let mut w = vec![0.0; dim];
                w[lo + a] = 1.0;
                let (weights, means, var) = law.project(&w)?;
                SliceRef::new(a, &weights, &means, var)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(W2Target::Sliced(slices))
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            W2Target::Gaussian { mean, .. } => Some(mean.len()),
            W2Target::Sliced(_) => None,
        }
    }

    /// W2 between the rows of `samples` (each `width` values) and the reference.
    pub fn w2(&self, samples: &[f64], width: usize) -> Result<f64> {
        let n = samples.len() / width;
        if n < 2 || samples.len() % width != 0 {
            return Err(Error::InvalidArgument(format!("W2 needs at least two {width}-d samples")));
        }
        match self {
            W2Target::Gaussian { mean, cov } => {
                if mean.len() != width {
                    return Err(Error::InvalidArgument(format!("samples of width {width} vs reference {}", mean.len())));
                }
                let (m, c) = empirical_moments(samples, width);
                gaussian_w2(&m, &c, mean, cov)
            }
            W2Target::Sliced(slices) => {
                let mut total = 0.0;
                let mut col = vec![0.0; n];
                for s in slices {
                    for (r, v) in col.iter_mut().enumerate() {
                        *v = samples[r * width + s.coord];
                    }
                    total += s.w2_sq(&mut col);
                }
                Ok((total / slices.len() as f64).sqrt())
            }
        }
    }
}

/// Mean and (biased, 1/n) covariance of rows.
pub fn empirical_moments(samples: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() / width;
    let mut m = vec![0.0; width];
    for row in samples.chunks_exact(width) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= n as f64);
    let mut c = vec![0.0; width * width];
    for row in samples.chunks_exact(width) {
        for i in 0..width {
            for j in 0..width {
                c[i * width + j] += (row[i] - m[i]) * (row[j] - m[j]);
            }
        }
    }
    c.iter_mut().for_each(|a| *a /= n as f64);
    (m, c)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// W2 between N(m1, c1) and N(m2, c2):
/// |m1 - m2|^2 + tr(c1 + c2 - 2 (c2^1/2 c1 c2^1/2)^1/2).
pub fn gaussian_w2(m1: &[f64], c1: &[f64], m2: &[f64], c2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.len() != d * d || c2.len() != d * d {
        return Err(Error::InvalidArgument("gaussian_w2: inconsistent dimensions".into()));
    }
    let a = DMatrix::from_row_slice(d, d, c1);
    let b = DMatrix::from_row_slice(d, d, c2);
    let bh = sqrt_psd(&b);
    let cross = sqrt_psd(&(&bh * &a * &bh));
    let mean_term: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y).powi(2)).sum();
    let trace = a.trace() + b.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace.max(0.0)).sqrt())
}
