use super::law::{MixtureLaw, Posterior};
use super::{WorldKind, WorldSpec};
use crate::error::{Error, Result};

/// Heun steps used for mixture flow maps.
pub const MIXTURE_FLOW_STEPS: usize = 8192;

/// Closed-form conditional laws of a [`WorldSpec`].
///
/// The law of `n` frames starting at frame `f` given the prefix is a fixed
/// template (depending only on whether `f == 0`) translated by `a^{j+1} x_{f-1}`.
/// All oracle quantities are computed on the template and shifted back.
#[derive(Clone, Debug)]
pub struct AnalyticOracle {
    world: WorldSpec,
    unit_frames: usize,
    first_unit: MixtureLaw,
    later_unit: MixtureLaw,
}

impl AnalyticOracle {
    pub fn new(world: WorldSpec) -> Result<Self> {
        Self::for_units(world, 1)
    }

    /// Caches the templates for units of `unit_frames` frames.
    pub fn for_units(world: WorldSpec, unit_frames: usize) -> Result<Self> {
        world.validate()?;
        if unit_frames == 0 || unit_frames > world.seq_len {
            return Err(Error::InvalidArgument(format!("unit of {unit_frames} frames")));
        }
        Ok(Self {
            world,
            unit_frames,
            first_unit: template(&world, true, unit_frames)?,
            later_unit: template(&world, false, unit_frames)?,
        })
    }

    pub fn world(&self) -> &WorldSpec {
        &self.world
    }

    pub fn unit_frames(&self) -> usize {
        self.unit_frames
    }

    fn template_for(&self, first: bool, n: usize) -> Result<std::borrow::Cow<'_, MixtureLaw>> {
        use std::borrow::Cow;
        if n == self.unit_frames {
            Ok(Cow::Borrowed(if first { &self.first_unit } else { &self.later_unit }))
        } else {
            Ok(Cow::Owned(template(&self.world, first, n)?))
        }
    }

    /// Law of the frames after the prefix with the prefix-driven mean removed.
    pub fn residual_law(&self, first_frame: usize, n: usize) -> Result<MixtureLaw> {
        Ok(self.template_for(first_frame == 0, n)?.into_owned())
    }

    /// a^{j+1} x_prev for j < n, or zeros without a prefix.
    pub fn mean_shift(&self, prev: Option<&[f64]>, n: usize) -> Vec<f64> {
        let d = self.world.frame_dim;
        let a = self.world.transition();
        let mut out = vec![0.0; n * d];
        if let Some(prev) = prev {
            let mut pow = a;
            for j in 0..n {
                for c in 0..d {
                    out[j * d + c] = pow * prev[c];
                }
                pow *= a;
            }
        }
        out
    }

    fn split_prefix<'p>(&self, prefix: &'p [f64], x_len: usize) -> Result<(bool, Option<&'p [f64]>, usize)> {
        let d = self.world.frame_dim;
        if prefix.len() % d != 0 || x_len % d != 0 || x_len == 0 {
            return Err(Error::Shape {
                op: "oracle",
                detail: format!("prefix len {} / frame len {x_len} not multiples of d = {d}", prefix.len()),
            });
        }
        let first_frame = prefix.len() / d;
        let n = x_len / d;
        if first_frame + n > self.world.seq_len {
            return Err(Error::InvalidArgument(format!(
                "frames {first_frame}..{} exceed sequence length {}",
                first_frame + n,
                self.world.seq_len
            )));
        }
        let prev = (first_frame > 0).then(|| &prefix[prefix.len() - d..]);
        Ok((first_frame == 0, prev, n))
    }

    /// Law of the frames following `prefix` (flattened frames, possibly empty).
    pub fn cond_law(&self, prefix: &[f64], n: usize) -> Result<MixtureLaw> {
        let d = self.world.frame_dim;
        let (first, prev, n) = self.split_prefix(prefix, n * d)?;
        let tpl = self.template_for(first, n)?;
        let shift = self.mean_shift(prev, n);
        let means = tpl
            .means()
            .iter()
            .map(|m| m.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        MixtureLaw::new(d, tpl.weights(), means, &frame_cov(&self.world, first, n))
    }

    /// Joint law of a whole sequence.
    pub fn joint_law(&self) -> Result<MixtureLaw> {
        template(&self.world, true, self.world.seq_len)
    }

    /// Posterior statistics of the frames `x_t` that follow `prefix`.
    pub fn posterior(&self, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Posterior> {
        self.posterior_with_prev(self.split_prefix(prefix, x_t.len())?, x_t, t)
    }

    /// As [`AnalyticOracle::posterior`] with the unit index and previous frame given directly.
    pub fn posterior_at(&self, first_frame: usize, prev: &[f64], x_t: &[f64], t: f64) -> Result<Posterior> {
        let d = self.world.frame_dim;
        let n = x_t.len() / d;
        let prev = (first_frame > 0).then_some(prev);
        self.posterior_with_prev((first_frame == 0, prev, n), x_t, t)
    }

    fn posterior_with_prev(&self, (first, prev, n): (bool, Option<&[f64]>, usize), x_t: &[f64], t: f64) -> Result<Posterior> {
        let tpl = self.template_for(first, n)?;
        let shift = self.mean_shift(prev, n);
        let y: Vec<f64> = x_t.iter().zip(&shift).map(|(x, s)| x - (1.0 - t) * s).collect();
        let mut post = tpl.posterior(&y, t)?;
        post.mean_x0.iter_mut().zip(&shift).for_each(|(m, s)| *m += s);
        Ok(post)
    }

    pub fn flow_map(&self, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.flow_map_steps(prefix, x_t, t, MIXTURE_FLOW_STEPS)
    }

    pub fn flow_map_steps(&self, prefix: &[f64], x_t: &[f64], t: f64, steps: usize) -> Result<Vec<f64>> {
        let (first, prev, n) = self.split_prefix(prefix, x_t.len())?;
        self.flow_map_with_prev((first, prev, n), x_t, t, steps)
    }

    pub fn flow_map_at(&self, first_frame: usize, prev: &[f64], x_t: &[f64], t: f64, steps: usize) -> Result<Vec<f64>> {
        let n = x_t.len() / self.world.frame_dim;
        let prev = (first_frame > 0).then_some(prev);
        self.flow_map_with_prev((first_frame == 0, prev, n), x_t, t, steps)
    }

    fn flow_map_with_prev(&self, (first, prev, n): (bool, Option<&[f64]>, usize), x_t: &[f64], t: f64, steps: usize) -> Result<Vec<f64>> {
        let tpl = self.template_for(first, n)?;
        let shift = self.mean_shift(prev, n);
        let y: Vec<f64> = x_t.iter().zip(&shift).map(|(x, s)| x - (1.0 - t) * s).collect();
        let mut out = tpl.flow_map(&y, t, steps)?;
        out.iter_mut().zip(&shift).for_each(|(o, s)| *o += s);
        Ok(out)
    }
}

fn frame_cov(world: &WorldSpec, first: bool, n: usize) -> Vec<f64> {
    let (a, s, v0) = match world.kind {
        WorldKind::GaussianAr { a, s, s0 } => (a, s, if first { s0 * s0 } else { s * s }),
        WorldKind::BranchingGmm { a, s, .. } => (a, s, s * s),
    };
    let mut var = vec![v0; n];
    for j in 1..n {
        var[j] = a * a * var[j - 1] + s * s;
    }
    let mut cov = vec![0.0; n * n];
    for j in 0..n {
        for l in 0..n {
            let lo = j.min(l);
            cov[j * n + l] = a.powi((j as i32 - l as i32).abs()) * var[lo];
        }
    }
    cov
}

fn template(world: &WorldSpec, first: bool, n: usize) -> Result<MixtureLaw> {
    let d = world.frame_dim;
    let cov = frame_cov(world, first, n);
    match world.kind {
        WorldKind::GaussianAr { .. } => MixtureLaw::new(d, vec![1.0], vec![vec![0.0; n * d]], &cov),
        WorldKind::BranchingGmm { a, mu, .. } => {
            let count = 1usize << n;
            let mut means = Vec::with_capacity(count);
            for mask in 0..count {
                let mut m = vec![0.0; n * d];
                let mut acc = 0.0;
                for j in 0..n {
                    let b = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                    acc = a * acc + b * mu;
                    m[j * d] = acc;
                }
                means.push(m);
            }
            MixtureLaw::new(d, vec![1.0; count], means, &cov)
        }
    }
}

/// Exact conditional velocity; only defined in closed form for the Gaussian world.
pub fn oracle_cond_velocity(oracle: &AnalyticOracle, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    if let WorldKind::BranchingGmm { .. } = oracle.world.kind {
        return Err(Error::UnsupportedKind {
            kind: "branching_gmm",
            what: "closed-form velocity (use the posterior/score path)".into(),
        });
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} outside (0, 1]")));
    }
    Ok(oracle.posterior(prefix, x_t, t)?.velocity())
}

pub fn oracle_cond_score(oracle: &AnalyticOracle, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} outside (0, 1]")));
    }
    Ok(oracle.posterior(prefix, x_t, t)?.score)
}

pub fn oracle_flow_map(oracle: &AnalyticOracle, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    oracle.flow_map(prefix, x_t, t)
}

pub fn oracle_cond_expectation(oracle: &AnalyticOracle, prefix: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    if t == 0.0 {
        oracle.split_prefix(prefix, x_t.len())?;
        return Ok(x_t.to_vec());
    }
    Ok(oracle.posterior(prefix, x_t, t)?.mean_x0)
}
