//! The three-stage training pipeline and its cost accounting.

mod gradcheck;
mod objectives;
mod pairs;
mod stages;

pub use gradcheck::{loss_gradient_checks, GRADCHECK_STEP};
pub use objectives::{
    dmd_direction, dmd_surrogate, flow_matching_objective, generator_var, regression_objective, DmdNormalizer,
};
pub use pairs::{generate_ode_pairs, generate_seq_ode_pairs, OdePairRecord, OdePairStore, PAIR_MAGIC, PAIR_VERSION};
pub use stages::{
    stage1_train, stage1_train_bidir, stage2_bidir_ode, stage2_causal_cd, stage2_causal_dmd, stage2_causal_ode,
    stage3_asymmetric_dmd, DmdConfig, RealScore,
};

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::TimeGrid;
use crate::error::{Error, Result};
use crate::models::VelocityNet;
use crate::tensor::{clip_grad_norm, Graph, Optimizer, ParamSet, Var};

/// Cost and progress record of one stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub steps: usize,
    /// One per teacher call per unit row.
    pub teacher_evals: u64,
    /// Bytes of auxiliary data written (pair stores).
    pub aux_bytes: u64,
    pub wall_ms: u64,
    /// Loss at every optimizer step.
    pub loss_curve: Vec<f64>,
    /// Rows of supervision consumed by the student.
    #[serde(default)]
    pub supervision_events: u64,
}

impl StageReport {
    pub fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            ..Self::default()
        }
    }

    /// Sums counters of several reports, e.g. pair generation plus regression.
    pub fn combine(stage: &str, parts: &[&StageReport]) -> Self {
        let mut out = Self::new(stage);
        for p in parts {
            out.steps += p.steps;
            out.teacher_evals += p.teacher_evals;
            out.aux_bytes += p.aux_bytes;
            out.wall_ms += p.wall_ms;
            out.supervision_events += p.supervision_events;
            out.loss_curve.extend_from_slice(&p.loss_curve);
        }
        out
    }

    /// Mean loss over the first and last `frac` of the curve.
    pub fn loss_ends(&self, frac: f64) -> Option<(f64, f64)> {
        let n = self.loss_curve.len();
        if n == 0 {
            return None;
        }
        let m = ((n as f64 * frac).ceil() as usize).clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.loss_curve[..m]), mean(&self.loss_curve[n - m..])))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Cosine from `lr` down to 1% of `lr`.
    Cosine,
}

/// Budget and optimization settings shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub grid: TimeGrid,
    pub chunk: usize,
    #[serde(default)]
    pub lr_decay: LrDecay,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl StageConfig {
    pub fn new(steps: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            batch,
            lr,
            seed,
            grid: TimeGrid::default(),
            chunk: 1,
            lr_decay: LrDecay::Constant,
            clip: None,
        }
    }

    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_decay(mut self, decay: LrDecay) -> Self {
        self.lr_decay = decay;
        self
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let p = step as f64 / self.steps.max(1) as f64;
                let floor = 0.01;
                self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps > 0 && (self.batch == 0 || !(self.lr > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "stage budget needs batch > 0 and lr > 0 (batch {}, lr {})",
                self.batch, self.lr
            )));
        }
        Ok(())
    }
}

/// Loss above which a stage aborts.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Runs the timing / loss bookkeeping around optimizer steps.
pub(crate) struct Tracker {
    report: StageReport,
    start: Instant,
}

impl Tracker {
    pub fn new(stage: &str) -> Self {
        Self {
            report: StageReport::new(stage),
            start: Instant::now(),
        }
    }

    pub fn record(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                stage: self.report.stage.clone(),
                step,
                loss,
            });
        }
        self.report.loss_curve.push(loss);
        self.report.steps += 1;
        Ok(())
    }

    pub fn report_mut(&mut self) -> &mut StageReport {
        &mut self.report
    }

    pub fn finish(mut self) -> StageReport {
        self.report.wall_ms = self.start.elapsed().as_millis() as u64;
        self.report
    }
}

pub(crate) fn apply_step(params: &mut ParamSet, opt: &mut Optimizer, cfg: &StageConfig, step: usize) -> Result<()> {
    if let Some(c) = cfg.clip {
        clip_grad_norm(params, c);
    }
    opt.step(params, cfg.lr_at(step))
}

/// Grid index in 1..=K, uniform.
pub(crate) fn grid_index<R: Rng + ?Sized>(rng: &mut R, grid: &TimeGrid) -> usize {
    rng.random_range(1..=grid.k())
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub coords: usize,
    /// ||analytic - numeric|| / max(||numeric||, ||analytic||)
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub numeric_norm: f64,
}

/// Checks the gradient of a training loss with respect to every parameter of `net`.
///
/// `analytic` builds the loss as the stage does (stop-gradient targets included);
/// `numeric` must evaluate the same function with those targets frozen, so that a
/// stop-gradient shows up as a constant rather than as a moving target.
pub fn gradient_check<A, N>(net: &mut VelocityNet, analytic: A, numeric: N, h: f64) -> Result<GradCheck>
where
    A: Fn(&VelocityNet, &mut Graph) -> Result<Var>,
    N: Fn(&VelocityNet, &mut Graph) -> Result<Var>,
{
    net.params_mut().zero_grads();
    let mut g = Graph::new();
    let loss = analytic(net, &mut g)?;
    g.backward(loss, net.params_mut())?;
    let ids: Vec<_> = net.params().iter().map(|(id, _, _)| id).collect();
    let mut a = Vec::new();
    let mut fd = Vec::new();
    for id in ids {
        let grad = net.params().get(id).grad().map(<[f64]>::to_vec);
        let n = net.params().get(id).len();
        for j in 0..n {
            a.push(grad.as_ref().map_or(0.0, |g| g[j]));
            let x0 = net.params().get(id).values()[j];
            let mut eval = |x: f64| -> Result<f64> {
                net.params_mut().get_mut(id).values_mut()[j] = x;
                let mut g = Graph::new();
                let l = numeric(net, &mut g)?;
                g.scalar(l)
            };
            let up = eval(x0 + h)?;
            let down = eval(x0 - h)?;
            net.params_mut().get_mut(id).values_mut()[j] = x0;
            fd.push((up - down) / (2.0 * h));
        }
    }
    net.params_mut().zero_grads();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(&fd).map(|(x, y)| x - y).collect();
    let scale = norm(&fd).max(norm(&a));
    Ok(GradCheck {
        coords: a.len(),
        rel_err: if scale > 0.0 { norm(&diff) / scale } else { 0.0 },
        max_abs_err: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
        numeric_norm: norm(&fd),
    })
}
