use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::fields::causal_context;
use super::net::{CondBatch, VelocityField, VelocityNet};
use crate::diffusion::StepSchedule;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::worlds::{sequence_seed, SequenceBatch};

/// The most recent `k` clean units of a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    k: usize,
    unit_dim: usize,
    rows: usize,
    units: VecDeque<Vec<f64>>,
    index: usize,
}

impl ContextCache {
    pub fn new(k: usize, unit_dim: usize, rows: usize) -> Self {
        Self {
            k,
            unit_dim,
            rows,
            units: VecDeque::with_capacity(k + 1),
            index: 0,
        }
    }

    /// Appends the clean unit at the current index (`rows x unit_dim` values).
    pub fn push(&mut self, unit: &[f64]) -> Result<()> {
        if unit.len() != self.rows * self.unit_dim {
            return Err(shape_err(
                "context cache",
                format!("pushed {} values, expected {} x {}", unit.len(), self.rows, self.unit_dim),
            ));
        }
        self.units.push_back(unit.to_vec());
        if self.units.len() > self.k {
            self.units.pop_front();
        }
        self.index += 1;
        Ok(())
    }

    /// Index of the next unit to generate.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// rows x (k * unit_dim), oldest unit first, zero-padded on the left.
    pub fn encode(&self) -> Vec<f64> {
        self.encode_window(self.k)
    }

    fn encode_window(&self, k: usize) -> Vec<f64> {
        let ud = self.unit_dim;
        let mut out = vec![0.0; self.rows * k * ud];
        let held = self.units.len().min(k);
        let skip = self.units.len() - held;
        for (n, unit) in self.units.iter().skip(skip).enumerate() {
            let slot = k - held + n;
            for r in 0..self.rows {
                let o = r * k * ud + slot * ud;
                out[o..o + ud].copy_from_slice(&unit[r * ud..(r + 1) * ud]);
            }
        }
        out
    }
}

/// Concatenation of the last `k` clean units, zero-padded on the left.
pub fn encode_context(cache: &ContextCache, k: usize) -> Result<Tensor> {
    let values = cache.encode_window(k);
    let width = k * cache.unit_dim;
    if cache.rows == 1 {
        Tensor::new(vec![width], values)
    } else {
        Tensor::new(vec![cache.rows, width], values)
    }
}

/// How far gradients reach back through a differentiable rollout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradDepth {
    /// The final model call of every unit, with its context held constant.
    #[default]
    PerUnit,
    /// Only the final model call of the last unit.
    LastUnit,
    /// Every model call, including through the cached context.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub schedule: StepSchedule,
    /// Generate unit 0 with the four-step preset.
    pub asd_first_frame: bool,
    pub chunk: usize,
    pub units: usize,
    #[serde(default)]
    pub grad_depth: GradDepth,
}

impl RolloutConfig {
    pub fn new(schedule: StepSchedule, chunk: usize, units: usize) -> Self {
        Self {
            schedule,
            asd_first_frame: false,
            chunk,
            units,
            grad_depth: GradDepth::default(),
        }
    }

    pub fn with_asd(mut self, on: bool) -> Self {
        self.asd_first_frame = on;
        self
    }

    pub fn schedule_for(&self, unit: usize) -> StepSchedule {
        if unit == 0 && self.asd_first_frame {
            StepSchedule::four_step()
        } else {
            self.schedule.clone()
        }
    }

    pub fn validate(&self, unit_dim: usize) -> Result<()> {
        if self.units == 0 || self.chunk == 0 {
            return Err(Error::InvalidArgument("rollout needs at least one unit of one frame".into()));
        }
        if unit_dim % self.chunk != 0 {
            return Err(Error::InvalidArgument(format!("unit dim {unit_dim} not divisible by chunk {}", self.chunk)));
        }
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument("empty step schedule".into()));
        }
        Ok(())
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Few-step sampling of one unit for every row of `ctx`.
///
/// At each schedule time the clean estimate is x0 = x - t v; between steps it is
/// re-noised with fresh noise to the next schedule time.
pub fn sample_units<F, R>(model: &F, ctx: &[f64], unit: usize, schedule: &StepSchedule, noise: &[f64], rng: &mut R) -> Result<Vec<f64>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let ud = model.unit_dim();
    if noise.is_empty() || noise.len() % ud != 0 {
        return Err(shape_err("few_step_sample_unit", format!("noise of {} values for unit dim {ud}", noise.len())));
    }
    let times = schedule.times();
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty step schedule".into()));
    }
    let rows = noise.len() / ud;
    let mut x = noise.to_vec();
    let mut x0 = Vec::new();
    for (j, &t) in times.iter().enumerate() {
        let batch = CondBatch::uniform(x, ctx.to_vec(), rows, t, unit)?;
        let v = model.velocity(&batch)?;
        x0 = batch.x_t.iter().zip(&v).map(|(x, v)| x - t * v).collect();
        match times.get(j + 1) {
            Some(&next) => {
                let eps = normal_vec(rng, rows * ud);
                x = x0.iter().zip(&eps).map(|(a, e)| (1.0 - next) * a + next * e).collect();
            }
            None => break,
        }
    }
    Ok(x0)
}

/// Few-step sampling of unit `i` conditioned on the cache contents.
pub fn few_step_sample_unit<F, R>(model: &F, cache: &ContextCache, schedule: &StepSchedule, noise: &[f64], i: usize, rng: &mut R) -> Result<Vec<f64>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    sample_units(model, &cache.encode_window(model.context()), i, schedule, noise, rng)
}

/// Continues a rollout from whatever the cache already holds; returns the
/// generated units in order (each rows x unit_dim).
pub fn continue_rollout<F, R>(model: &F, cache: &mut ContextCache, config: &RolloutConfig, rng: &mut R) -> Result<Vec<Vec<f64>>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let ud = model.unit_dim();
    config.validate(ud)?;
    let mut out = Vec::new();
    for i in cache.index()..config.units {
        let noise = normal_vec(rng, cache.rows() * ud);
        let unit = few_step_sample_unit(model, cache, &config.schedule_for(i), &noise, i, rng)
            .map_err(|e| Error::InvalidArgument(format!("rollout failed at unit {i}: {e}")))?;
        cache.push(&unit)?;
        out.push(unit);
    }
    Ok(out)
}

/// Interleaves per-unit blocks (each rows x unit_dim) into rows x (units * unit_dim).
pub fn assemble_units(units: &[Vec<f64>], rows: usize, unit_dim: usize) -> Vec<f64> {
    let n = units.len();
    let mut out = vec![0.0; rows * n * unit_dim];
    for (i, u) in units.iter().enumerate() {
        for r in 0..rows {
            let o = r * n * unit_dim + i * unit_dim;
            out[o..o + unit_dim].copy_from_slice(&u[r * unit_dim..(r + 1) * unit_dim]);
        }
    }
    out
}

/// Generates `rows` sequences autoregressively from the model's own outputs.
pub fn self_rollout<F>(model: &F, rows: usize, seed: u64, config: &RolloutConfig) -> Result<SequenceBatch>
where
    F: VelocityField + ?Sized,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    self_rollout_with(model, rows, &mut rng, config).map(|mut b| {
        b.seeds = (0..rows as u64).map(|r| sequence_seed(seed, r)).collect();
        b
    })
}

pub fn self_rollout_with<F, R>(model: &F, rows: usize, rng: &mut R, config: &RolloutConfig) -> Result<SequenceBatch>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let ud = model.unit_dim();
    config.validate(ud)?;
    let mut cache = ContextCache::new(model.context(), ud, rows);
    let units = continue_rollout(model, &mut cache, config, rng)?;
    let frame_dim = ud / config.chunk;
    SequenceBatch::new(rows, config.units * config.chunk, frame_dim, assemble_units(&units, rows, ud))
}

/// Unit `i` of every sequence in `gt`, sampled with ground-truth context.
pub fn teacher_forced_sample<F, R>(model: &F, gt: &SequenceBatch, chunk: usize, schedule: &StepSchedule, i: usize, noise: &[f64], rng: &mut R) -> Result<Vec<f64>>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let ud = model.unit_dim();
    if chunk == 0 || gt.seq_len % chunk != 0 || chunk * gt.frame_dim != ud {
        return Err(shape_err("teacher_forced_sample", format!("chunk {chunk} x frame dim {} vs unit dim {ud}", gt.frame_dim)));
    }
    let units = gt.seq_len / chunk;
    if i >= units {
        return Err(Error::InvalidArgument(format!("unit index {i} out of range for {units} units")));
    }
    let ctx = gt_context(gt, ud, model.context(), i);
    sample_units(model, &ctx, i, schedule, noise, rng)
}

/// Causal context of unit `i` for every sequence of `gt`.
pub fn gt_context(gt: &SequenceBatch, unit_dim: usize, k: usize, i: usize) -> Vec<f64> {
    (0..gt.batch).flat_map(|b| causal_context(gt.sequence(b), unit_dim, k, i)).collect()
}

/// A rollout recorded on a graph for training.
#[derive(Debug)]
pub struct GraphRollout {
    /// Per unit, the differentiable clean output (None where gradients were cut).
    pub units: Vec<Option<Var>>,
    /// rows x seq_dim clean values.
    pub values: Vec<f64>,
}

/// Self-rollout of a network whose final calls are taped per [`GradDepth`].
pub fn rollout_graph<R>(net: &VelocityNet, g: &mut Graph, rows: usize, config: &RolloutConfig, rng: &mut R) -> Result<GraphRollout>
where
    R: Rng + ?Sized,
{
    let ud = net.config().unit_dim;
    let k = net.config().context;
    config.validate(ud)?;
    let mut cache = ContextCache::new(k, ud, rows);
    let mut vars: Vec<Option<Var>> = Vec::with_capacity(config.units);
    let mut blocks = Vec::with_capacity(config.units);
    for i in 0..config.units {
        let schedule = config.schedule_for(i);
        let times = schedule.times();
        let noise = normal_vec(rng, rows * ud);
        let taped = match config.grad_depth {
            GradDepth::PerUnit | GradDepth::Full => true,
            GradDepth::LastUnit => i + 1 == config.units,
        };
        let full = config.grad_depth == GradDepth::Full;
        let ctx_values = cache.encode();
        let ctx_var = if full {
            let mut parts = Vec::with_capacity(k);
            for slot in 0..k {
                let src = i as isize - k as isize + slot as isize;
                parts.push(match src {
                    s if s >= 0 => vars[s as usize].expect("full depth tapes every unit"),
                    _ => g.constant(rows, ud, vec![0.0; rows * ud])?,
                });
            }
            Some(g.concat(&parts)?)
        } else {
            None
        };
        let mut x = noise;
        let mut x_var: Option<Var> = None;
        let mut out_var = None;
        let mut x0 = Vec::new();
        for (j, &t) in times.iter().enumerate() {
            let last = j + 1 == times.len();
            if full || (taped && last) {
                let xv = match x_var {
                    Some(v) => v,
                    None => g.constant(rows, ud, x.clone())?,
                };
                let cv = match ctx_var {
                    Some(v) => v,
                    None => g.constant(rows, k * ud, ctx_values.clone())?,
                };
                let v = net.forward(g, xv, cv, &vec![t; rows], &vec![i; rows], true)?;
                let tv = g.scale(v, -t)?;
                let x0v = g.add(xv, tv)?;
                x0 = g.value(x0v).to_vec();
                out_var = Some(x0v);
                if let Some(&next) = times.get(j + 1) {
                    let eps = normal_vec(rng, rows * ud);
                    let scaled = g.scale(x0v, 1.0 - next)?;
                    let e = g.constant(rows, ud, eps.iter().map(|e| next * e).collect())?;
                    let xn = g.add(scaled, e)?;
                    x = g.value(xn).to_vec();
                    x_var = Some(xn);
                }
            } else {
                let batch = CondBatch::uniform(x, ctx_values.clone(), rows, t, i)?;
                let v = net.predict(&batch)?;
                x0 = batch.x_t.iter().zip(&v).map(|(x, v)| x - t * v).collect();
                if let Some(&next) = times.get(j + 1) {
                    let eps = normal_vec(rng, rows * ud);
                    x = x0.iter().zip(&eps).map(|(a, e)| (1.0 - next) * a + next * e).collect();
                } else {
                    x = Vec::new();
                }
            }
        }
        cache.push(&x0)?;
        vars.push(if taped { out_var } else { None });
        blocks.push(x0);
    }
    Ok(GraphRollout {
        units: vars,
        values: assemble_units(&blocks, rows, ud),
    })
}
