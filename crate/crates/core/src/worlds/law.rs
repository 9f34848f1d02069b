//! Gaussian mixtures with a shared covariance of the form `S ⊗ I_d`.
//!
//! A block of `n` frames of dimension `d` is laid out frame-major. `S` is the
//! n x n covariance across frames; every frame coordinate axis shares it. This
//! covers the per-unit conditionals of both synthetic worlds and the joint law of
//! a whole sequence, and it makes every rectified-flow quantity closed form
//! after rotating into the eigenbasis of `S`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{pf_ode_solve_to, uniform_descending, OdeMethod};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MixtureLaw {
    frames: usize,
    frame_dim: usize,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Means rotated into the eigenbasis.
    rot_means: Vec<Vec<f64>>,
    eigvals: Vec<f64>,
    /// Q[j * n + p]: frame j, eigen-direction p.
    eigvecs: Vec<f64>,
}

/// Posterior statistics of x0 and eps given x_t.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub score: Vec<f64>,
    pub mean_x0: Vec<f64>,
    pub mean_eps: Vec<f64>,
}

impl Posterior {
    /// E[eps - x0 | x_t]
    pub fn velocity(&self) -> Vec<f64> {
        self.mean_eps.iter().zip(&self.mean_x0).map(|(e, x)| e - x).collect()
    }
}

impl MixtureLaw {
    /// `weights` need not be normalized. `frame_cov` is n x n row-major and symmetric PSD.
    pub fn new(frame_dim: usize, weights: Vec<f64>, means: Vec<Vec<f64>>, frame_cov: &[f64]) -> Result<Self> {
        let n2 = frame_cov.len();
        let frames = (n2 as f64).sqrt().round() as usize;
        if frames * frames != n2 || frames == 0 || frame_dim == 0 {
            return Err(Error::InvalidArgument(format!("bad frame covariance size {n2}")));
        }
        if weights.len() != means.len() || weights.is_empty() {
            return Err(Error::InvalidArgument("weights/means length mismatch".into()));
        }
        let dim = frames * frame_dim;
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument(format!("component means must have length {dim}")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be non-negative with positive sum".into()));
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(frames, frames, frame_cov));
        let eigvals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let mut eigvecs = vec![0.0; frames * frames];
        for j in 0..frames {
            for p in 0..frames {
                eigvecs[j * frames + p] = eig.eigenvectors[(j, p)];
            }
        }
        let mut law = Self {
            frames,
            frame_dim,
            log_weights: weights.iter().map(|w| (w / total).ln()).collect(),
            means,
            rot_means: Vec::new(),
            eigvals,
            eigvecs,
        };
        law.rot_means = law.means.iter().map(|m| law.rotate(m)).collect();
        Ok(law)
    }

    pub fn dim(&self) -> usize {
        self.frames * self.frame_dim
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (lw, m) in self.log_weights.iter().zip(&self.means) {
            let w = lw.exp();
            out.iter_mut().zip(m).for_each(|(o, v)| *o += w * v);
        }
        out
    }

    /// Dense covariance of one component (shared by all components).
    pub fn component_cov(&self) -> Vec<f64> {
        let (n, d) = (self.frames, self.frame_dim);
        let dim = n * d;
        let mut out = vec![0.0; dim * dim];
        for j in 0..n {
            for l in 0..n {
                let s: f64 = (0..n).map(|p| self.eigvecs[j * n + p] * self.eigvals[p] * self.eigvecs[l * n + p]).sum();
                for q in 0..d {
                    out[(j * d + q) * dim + l * d + q] = s;
                }
            }
        }
        out
    }

    fn rotate(&self, x: &[f64]) -> Vec<f64> {
        let (n, d) = (self.frames, self.frame_dim);
        let mut y = vec![0.0; n * d];
        for p in 0..n {
            for j in 0..n {
                let q = self.eigvecs[j * n + p];
                if q != 0.0 {
                    for c in 0..d {
                        y[p * d + c] += q * x[j * d + c];
                    }
                }
            }
        }
        y
    }

    fn unrotate(&self, y: &[f64]) -> Vec<f64> {
        let (n, d) = (self.frames, self.frame_dim);
        let mut x = vec![0.0; n * d];
        for j in 0..n {
            for p in 0..n {
                let q = self.eigvecs[j * n + p];
                if q != 0.0 {
                    for c in 0..d {
                        x[j * d + c] += q * y[p * d + c];
                    }
                }
            }
        }
        x
    }

    /// Per-eigendirection variance of x_t within one component: (1-t)^2 lambda + t^2.
    fn noised_var(&self, t: f64) -> Vec<f64> {
        self.eigvals.iter().map(|l| (1.0 - t).powi(2) * l + t * t).collect()
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                op: "mixture law",
                detail: format!("x has {} values, law has dimension {}", x.len(), self.dim()),
            });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Responsibilities and rotated residuals delta_k = x_t - (1-t) m_k.
    fn responsibilities(&self, xr: &[f64], t: f64, var: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.frame_dim;
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate noised covariance at t = {t}"
            )));
        }
        let mut logs = Vec::with_capacity(self.components());
        let mut deltas = Vec::with_capacity(self.components());
        for (lw, mr) in self.log_weights.iter().zip(&self.rot_means) {
            let delta: Vec<f64> = xr.iter().zip(mr).map(|(x, m)| x - (1.0 - t) * m).collect();
            let q: f64 = delta.iter().enumerate().map(|(i, v)| v * v / var[i / d]).sum();
            logs.push(lw - 0.5 * q);
            deltas.push(delta);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        Ok((r, deltas))
    }

    /// Score, E[x0 | x_t] and E[eps | x_t] in one pass.
    pub fn posterior(&self, x_t: &[f64], t: f64) -> Result<Posterior> {
        self.check_input(x_t, t)?;
        let d = self.frame_dim;
        let var = self.noised_var(t);
        let xr = self.rotate(x_t);
        let (resp, deltas) = self.responsibilities(&xr, t, &var)?;
        let dim = self.dim();
        let (mut score, mut x0, mut eps) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
        for ((r, delta), mr) in resp.iter().zip(&deltas).zip(&self.rot_means) {
            if *r == 0.0 {
                continue;
            }
            for i in 0..dim {
                let p = i / d;
                let w = delta[i] / var[p];
                score[i] -= r * w;
                x0[i] += r * (mr[i] + (1.0 - t) * self.eigvals[p] * w);
                eps[i] += r * t * w;
            }
        }
        Ok(Posterior {
            score: self.unrotate(&score),
            mean_x0: self.unrotate(&x0),
            mean_eps: self.unrotate(&eps),
        })
    }

    pub fn score(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.posterior(x_t, t)?.score)
    }

    pub fn velocity(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.posterior(x_t, t)?.velocity())
    }

    pub fn posterior_mean(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.posterior(x_t, t)?.mean_x0)
    }

    /// log p_t(x_t), the density of (1-t) x0 + t eps.
    pub fn log_density(&self, x_t: &[f64], t: f64) -> Result<f64> {
        self.check_input(x_t, t)?;
        let d = self.frame_dim;
        let var = self.noised_var(t);
        let xr = self.rotate(x_t);
        let mut logs = Vec::with_capacity(self.components());
        for (lw, mr) in self.log_weights.iter().zip(&self.rot_means) {
            let q: f64 = xr
                .iter()
                .zip(mr)
                .enumerate()
                .map(|(i, (x, m))| (x - (1.0 - t) * m).powi(2) / var[i / d])
                .sum();
            logs.push(lw - 0.5 * q);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_det: f64 = var.iter().map(|v| d as f64 * v.ln()).sum();
        Ok(lse - 0.5 * log_det - 0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Endpoint at t = 0 of the PF-ODE through (x_t, t).
    ///
    /// Closed form for a single component; otherwise Heun integration with
    /// `steps` uniform steps over [0, t].
    pub fn flow_map(&self, x_t: &[f64], t: f64, steps: usize) -> Result<Vec<f64>> {
        self.check_input(x_t, t)?;
        if t == 0.0 {
            return Ok(x_t.to_vec());
        }
        if self.components() == 1 {
            let d = self.frame_dim;
            let var = self.noised_var(t);
            let xr = self.rotate(x_t);
            let mr = &self.rot_means[0];
            let y: Vec<f64> = (0..self.dim())
                .map(|i| {
                    let p = i / d;
                    mr[i] + (self.eigvals[p] / var[p]).sqrt() * (xr[i] - (1.0 - t) * mr[i])
                })
                .collect();
            return Ok(self.unrotate(&y));
        }
        self.flow_between(x_t, t, 0.0, steps)
    }

    /// Transports x from time `t_from` down to `t_to` along the exact PF-ODE
    /// (closed form for a single component, Heun with `steps` steps otherwise).
    pub fn flow_between(&self, x: &[f64], t_from: f64, t_to: f64, steps: usize) -> Result<Vec<f64>> {
        self.check_input(x, t_from)?;
        if !(t_to < t_from) {
            return Ok(x.to_vec());
        }
        if self.components() == 1 {
            // Each eigen-direction moves as (1 - t) m + sigma_t / sigma_from (x - (1 - t_from) m).
            let d = self.frame_dim;
            let (from, to) = (self.noised_var(t_from), self.noised_var(t_to));
            let xr = self.rotate(x);
            let mr = &self.rot_means[0];
            let y: Vec<f64> = (0..self.dim())
                .map(|i| {
                    let p = i / d;
                    (1.0 - t_to) * mr[i] + (to[p] / from[p]).sqrt() * (xr[i] - (1.0 - t_from) * mr[i])
                })
                .collect();
            return Ok(self.unrotate(&y));
        }
        let steps = steps.max(1);
        // Integrate on s = t / t_from so the solver grid starts at 1.
        let scale = t_from;
        let grid = uniform_descending(steps, t_to / scale);
        let mut f = |y: &[f64], s: f64| -> Result<Vec<f64>> {
            let v = self.velocity(y, s * scale)?;
            Ok(v.into_iter().map(|v| v * scale).collect())
        };
        let traj = pf_ode_solve_to(&mut f, x, &grid, OdeMethod::Heun)?;
        Ok(traj.last().expect("non-empty trajectory").x.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, lw) in self.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        let z: Vec<f64> = (0..self.dim())
            .map(|i| self.eigvals[i / self.frame_dim].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let noise = self.unrotate(&z);
        self.means[k].iter().zip(&noise).map(|(m, e)| m + e).collect()
    }

    /// Law of the scalar projection w . x as (weights, means, variance).
    pub fn project(&self, w: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        if w.len() != self.dim() {
            return Err(Error::InvalidArgument("projection vector has wrong length".into()));
        }
        let means = self.means.iter().map(|m| m.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
        let wr = self.rotate(w);
        let var = wr
            .iter()
            .enumerate()
            .map(|(i, v)| v * v * self.eigvals[i / self.frame_dim])
            .sum();
        Ok((self.weights(), means, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_normal(d: usize) -> MixtureLaw {
        MixtureLaw::new(d, vec![1.0], vec![vec![0.0; d]], &[1.0]).unwrap()
    }

    #[test]
    fn standard_normal_velocity_closed_form() {
        let law = standard_normal(1);
        for &t in &[0.1, 0.3, 0.5, 0.77, 1.0] {
            let x = 0.8;
            let v = law.velocity(&[x], t).unwrap()[0];
            let expected = (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0) * x;
            assert!((v - expected).abs() < 1e-13, "t={t}: {v} vs {expected}");
        }
    }

    #[test]
    fn gaussian_score_matches_convolution_identity() {
        let (m, s0) = (0.7, 0.4);
        let law = MixtureLaw::new(1, vec![1.0], vec![vec![m]], &[s0 * s0]).unwrap();
        let (x, t) = (0.2, 0.35);
        let s = law.score(&[x], t).unwrap()[0];
        let expected = -(x - (1.0 - t) * m) / ((1.0 - t).powi(2) * s0 * s0 + t * t);
        assert!((s - expected).abs() < 1e-13);
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let cov = [0.5, 0.2, 0.2, 0.3];
        let law = MixtureLaw::new(
            2,
            vec![0.3, 0.7],
            vec![vec![1.0, 0.0, 0.5, 0.1], vec![-1.0, 0.2, -0.3, 0.0]],
            &cov,
        )
        .unwrap();
        let x = [0.3, -0.2, 0.1, 0.4];
        let t = 0.4;
        let s = law.score(&x, t).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (law.log_density(&xp, t).unwrap() - law.log_density(&xm, t).unwrap()) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-7 * (1.0 + s[i].abs()), "{i}: {fd} vs {}", s[i]);
        }
    }

    #[test]
    fn flow_map_closed_form_matches_integration() {
        let cov = [0.09, 0.05, 0.05, 0.1];
        let law = MixtureLaw::new(2, vec![1.0], vec![vec![0.3, -0.1, 0.2, 0.4]], &cov).unwrap();
        let x = [0.5, 1.2, -0.7, 0.1];
        let exact = law.flow_map(&x, 0.9, 0).unwrap();
        let numeric = law.flow_between(&x, 0.9, 0.0, 4096).unwrap();
        for (a, b) in exact.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_matches_moments() {
        let law = MixtureLaw::new(1, vec![1.0, 1.0], vec![vec![1.0], vec![-1.0]], &[0.04]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20000;
        let xs: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.04).abs() < 0.03, "{var}");
    }
}
