use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::models::{CondBatch, VelocityNet};
use crate::tensor::{Graph, Var};

/// Flow-matching loss of `net` on a batch whose velocity target is `target`.
pub fn flow_matching_objective(net: &VelocityNet, g: &mut Graph, batch: &CondBatch, target: &[f64]) -> Result<Var> {
    let v = net.forward_batch(g, batch, true)?;
    crate::diffusion::flow_matching_loss(g, v, target)
}

/// G = x_t - t v on the tape, one time per row.
pub fn generator_var(g: &mut Graph, x_t: Var, v: Var, t: &[f64]) -> Result<Var> {
    let (rows, cols) = g.dims(v);
    if t.len() != rows {
        return Err(shape_err("generator", format!("{} times for {rows} rows", t.len())));
    }
    let neg_t: Vec<f64> = t.iter().flat_map(|&t| std::iter::repeat_n(-t, cols)).collect();
    let neg_t = g.constant(rows, cols, neg_t)?;
    let tv = g.mul(v, neg_t)?;
    g.add(x_t, tv)
}

/// Mean over rows of the squared norm between G_theta(x_t, ctx, t) and `target`.
///
/// Serves both the ODE-pair regression (target = stored endpoint) and the
/// consistency loss (target = stop-gradient EMA generator output).
pub fn regression_objective(net: &VelocityNet, g: &mut Graph, batch: &CondBatch, target: &[f64]) -> Result<Var> {
    let ud = net.config().unit_dim;
    if target.len() != batch.rows * ud {
        return Err(shape_err("regression objective", format!("{} targets for {} rows", target.len(), batch.rows)));
    }
    let x = g.constant(batch.rows, ud, batch.x_t.clone())?;
    let ctx = g.constant(batch.rows, batch.ctx_dim(), batch.ctx.clone())?;
    let v = net.forward(g, x, ctx, &batch.t, &batch.unit, true)?;
    let gen = generator_var(g, x, v, &batch.t)?;
    let tgt = g.constant(batch.rows, ud, target.to_vec())?;
    let se = g.squared_error(gen, tgt)?;
    let m = g.mean(se)?;
    g.scale(m, ud as f64)
}

/// How the DMD score difference is scaled per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmdNormalizer {
    /// Divide by the mean absolute real-fake gap of the sample.
    #[default]
    Gap,
    /// Classic x0-space form: (x0_fake - x0_real) divided by the mean absolute
    /// distance between the sample and the real denoiser's clean estimate.
    Denoiser,
    /// Raw score difference.
    None,
}

/// Per-sample descent direction s_fake - s_real from the two velocities at x_t.
///
/// Uses s_real - s_fake = -(1 - t) / t (v_real - v_fake). `x_sample` is the clean
/// generator output (only read by [`DmdNormalizer::Denoiser`]).
pub fn dmd_direction(
    v_real: &[f64],
    v_fake: &[f64],
    x_t: &[f64],
    x_sample: &[f64],
    t: &[f64],
    unit_dim: usize,
    normalizer: DmdNormalizer,
) -> Vec<f64> {
    let mut out = vec![0.0; v_real.len()];
    for (r, &t) in t.iter().enumerate() {
        let span = r * unit_dim..(r + 1) * unit_dim;
        // Denoiser uses the classic x0-space difference x0_fake - x0_real = t (v_real - v_fake).
        let w = match normalizer {
            DmdNormalizer::Denoiser => t,
            _ => (1.0 - t) / t,
        };
        let dir: Vec<f64> = v_real[span.clone()]
            .iter()
            .zip(&v_fake[span.clone()])
            .map(|(vr, vf)| w * (vr - vf))
            .collect();
        let scale = match normalizer {
            DmdNormalizer::None => 1.0,
            DmdNormalizer::Gap => dir.iter().map(|d| d.abs()).sum::<f64>() / unit_dim as f64,
            DmdNormalizer::Denoiser => {
                x_t[span.clone()]
                    .iter()
                    .zip(&v_real[span.clone()])
                    .zip(&x_sample[span.clone()])
                    .map(|((x, v), s)| (s - (x - t * v)).abs())
                    .sum::<f64>()
                    / unit_dim as f64
            }
        };
        if scale > 1e-12 {
            for (o, d) in out[span].iter_mut().zip(&dir) {
                *o = d / scale;
            }
        }
    }
    out
}

/// 1/2 * mean over rows of ||x - stopgrad(x - direction)||^2, whose gradient
/// with respect to x is direction / rows.
pub fn dmd_surrogate(g: &mut Graph, x: Var, direction: &[f64]) -> Result<Var> {
    let (rows, cols) = g.dims(x);
    if direction.len() != rows * cols {
        return Err(shape_err("dmd surrogate", format!("{} directions for [{rows}, {cols}]", direction.len())));
    }
    let target: Vec<f64> = g.value(x).iter().zip(direction).map(|(x, d)| x - d).collect();
    let target = g.constant(rows, cols, target)?;
    let se = g.squared_error(x, target)?;
    let m = g.mean(se)?;
    g.scale(m, 0.5 * cols as f64)
}
