//! Oracle-backed quality metrics, solver order checks and cost roll-ups.

mod stats;
mod w2;

pub use stats::{bootstrap_se, knn_entropy, mean, mean_se, ols_slope, wilcoxon_greater, Stat, BOOTSTRAP_RESAMPLES};
pub use w2::{empirical_moments, gaussian_w2, SliceRef, W2Target};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{pf_ode_solve_to, uniform_descending, OdeMethod, StepSchedule};
use crate::distill::StageReport;
use crate::error::{Error, Result};
use crate::models::{gt_context, normal_vec, sample_units, self_rollout, RolloutConfig, VelocityField};
use crate::worlds::{sample_sequences, AnalyticOracle, SequenceBatch, UnitLayout, WorldKind, WorldSpec};

/// Fewest samples accepted by the W2 estimators.
pub const MIN_W2_SAMPLES: usize = 100;

/// Samples of one unit together with the frame preceding each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitSamples {
    pub unit: usize,
    /// n x unit_dim
    pub samples: Vec<f64>,
    /// n x frame_dim; zeros for unit 0.
    pub prev: Vec<f64>,
}

impl UnitSamples {
    /// Splits generated sequences into per-unit sample sets.
    pub fn from_sequences(seqs: &SequenceBatch, chunk: usize) -> Result<Vec<UnitSamples>> {
        if chunk == 0 || seqs.seq_len % chunk != 0 {
            return Err(Error::InvalidArgument(format!("chunk {chunk} does not divide {}", seqs.seq_len)));
        }
        let d = seqs.frame_dim;
        let ud = chunk * d;
        Ok((0..seqs.seq_len / chunk)
            .map(|i| {
                let mut samples = Vec::with_capacity(seqs.batch * ud);
                let mut prev = Vec::with_capacity(seqs.batch * d);
                for b in 0..seqs.batch {
                    let s = seqs.sequence(b);
                    samples.extend_from_slice(&s[i * ud..(i + 1) * ud]);
                    if i == 0 {
                        prev.extend(std::iter::repeat_n(0.0, d));
                    } else {
                        prev.extend_from_slice(&s[i * ud - d..i * ud]);
                    }
                }
                UnitSamples { unit: i, samples, prev }
            })
            .collect())
    }
}

/// Samples minus the prefix-driven mean a^{j+1} x_prev of every frame in the unit.
pub fn residuals(oracle: &AnalyticOracle, chunk: usize, us: &UnitSamples) -> Vec<f64> {
    let d = oracle.world().frame_dim;
    let ud = chunk * d;
    let mut out = Vec::with_capacity(us.samples.len());
    for (row, prev) in us.samples.chunks_exact(ud).zip(us.prev.chunks_exact(d)) {
        let shift = oracle.mean_shift((us.unit > 0).then_some(prev), chunk);
        out.extend(row.iter().zip(&shift).map(|(x, s)| x - s));
    }
    out
}

fn offset_axes(chunk: usize, d: usize) -> Vec<usize> {
    (0..chunk).map(|f| f * d).collect()
}

/// W2 between samples of the frames after a fixed `prefix` and their oracle law.
///
/// Gaussian worlds use the closed-form Gaussian W2 of the moments; mixture
/// worlds use 1-D quantile W2 along the offset axis of each frame.
pub fn conditional_w2(samples: &[f64], prefix: &[f64], oracle: &AnalyticOracle) -> Result<f64> {
    let d = oracle.world().frame_dim;
    let chunk = oracle.unit_frames();
    let ud = chunk * d;
    if prefix.len() % d != 0 {
        return Err(Error::InvalidArgument("prefix is not a whole number of frames".into()));
    }
    let n = samples.len() / ud;
    if n < MIN_W2_SAMPLES {
        return Err(Error::InvalidArgument(format!("conditional_w2 needs at least {MIN_W2_SAMPLES} samples, got {n}")));
    }
    let first_frame = prefix.len() / d;
    let prev = (first_frame > 0).then(|| &prefix[prefix.len() - d..]);
    let shift = oracle.mean_shift(prev, chunk);
    let res: Vec<f64> = samples
        .chunks_exact(ud)
        .flat_map(|row| row.iter().zip(&shift).map(|(x, s)| x - s).collect::<Vec<_>>())
        .collect();
    let law = oracle.residual_law(first_frame, chunk)?;
    W2Target::from_law(&law, &offset_axes(chunk, d))?.w2(&res, ud)
}

/// W2 of the pooled residuals of one unit against the prefix-free residual law,
/// with a bootstrap standard error.
pub fn unit_conditional_w2(oracle: &AnalyticOracle, chunk: usize, us: &UnitSamples) -> Result<Stat> {
    let d = oracle.world().frame_dim;
    let ud = chunk * d;
    let n = us.samples.len() / ud;
    if n < MIN_W2_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_W2_SAMPLES} samples, got {n}")));
    }
    let res = residuals(oracle, chunk, us);
    let target = W2Target::from_law(&oracle.residual_law(us.unit * chunk, chunk)?, &offset_axes(chunk, d))?;
    let value = target.w2(&res, ud)?;
    let se = bootstrap_se(&res, ud, 0x5eed ^ us.unit as u64, |s| target.w2(s, ud))?;
    Ok(Stat::new(value, se, n))
}

/// Signed offset-axis innovations x_f[0] - a x_{f-1}[0] of every frame of the unit.
pub fn innovations(world: &WorldSpec, chunk: usize, us: &UnitSamples) -> Vec<f64> {
    let d = world.frame_dim;
    let a = world.transition();
    let ud = chunk * d;
    let mut out = Vec::with_capacity(us.samples.len() / d);
    for (row, prev) in us.samples.chunks_exact(ud).zip(us.prev.chunks_exact(d)) {
        let mut p = if us.unit == 0 { 0.0 } else { prev[0] };
        for f in 0..chunk {
            out.push(row[f * d] - a * p);
            p = row[f * d];
        }
    }
    out
}

fn branch_offset(world: &WorldSpec, what: &str) -> Result<f64> {
    match world.kind {
        WorldKind::BranchingGmm { mu, .. } => Ok(mu),
        WorldKind::GaussianAr { .. } => Err(Error::UnsupportedKind {
            kind: "gaussian_ar",
            what: what.into(),
        }),
    }
}

/// Mode occupancy of one unit's samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub p_plus: f64,
    pub p_minus: f64,
    /// min(p_plus, p_minus) / 0.5
    pub score: f64,
    pub se: f64,
    pub n: usize,
}

/// Assigns each frame to the nearer of its two conditional modes a x_prev +- mu.
pub fn mode_coverage(world: &WorldSpec, chunk: usize, us: &UnitSamples) -> Result<ModeCoverage> {
    branch_offset(world, "mode coverage")?;
    let inn = innovations(world, chunk, us);
    let n = inn.len();
    if n == 0 {
        return Err(Error::InvalidArgument("mode coverage of an empty sample".into()));
    }
    let plus = inn.iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
    let minus = 1.0 - plus;
    let se = (plus * minus / n as f64).sqrt() / 0.5;
    Ok(ModeCoverage {
        p_plus: plus,
        p_minus: minus,
        score: plus.min(minus) / 0.5,
        se,
        n,
    })
}

/// Mean offset-axis distance to the nearer conditional mode.
pub fn mode_distance(world: &WorldSpec, chunk: usize, us: &UnitSamples) -> Result<f64> {
    let mu = branch_offset(world, "mode distance")?;
    let inn = innovations(world, chunk, us);
    Ok(inn.iter().map(|v| (v.abs() - mu).abs()).sum::<f64>() / inn.len() as f64)
}

/// One named per-unit metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: String,
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    pub n: Vec<usize>,
}

impl MetricSeries {
    fn new(metric: &str, stats: &[Stat]) -> Self {
        Self {
            metric: metric.to_string(),
            values: stats.iter().map(|s| s.value).collect(),
            se: stats.iter().map(|s| s.se).collect(),
            n: stats.iter().map(|s| s.n).collect(),
        }
    }

    pub fn mean(&self) -> Stat {
        let k = self.values.len() as f64;
        Stat::new(
            mean(&self.values),
            self.se.iter().map(|s| s * s).sum::<f64>().sqrt() / k,
            self.n.iter().sum(),
        )
    }

    /// Least-squares slope over the units that have a history (index >= 1).
    /// The first unit has no prefix to drift from, and its law generally differs
    /// from the later ones, so it would only add a level shift.
    pub fn slope(&self) -> Stat {
        if self.values.len() >= 3 {
            ols_slope(&self.values[1..], &self.se[1..])
        } else {
            ols_slope(&self.values, &self.se)
        }
    }
}

/// Per-unit quality metrics plus mean / slope summaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub series: Vec<MetricSeries>,
    pub summary: BTreeMap<String, Stat>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.metric == metric)
    }

    pub fn summary(&self, key: &str) -> Option<Stat> {
        self.summary.get(key).copied()
    }

    fn push(&mut self, series: MetricSeries) {
        self.summary.insert(format!("mean_{}", series.metric), series.mean());
        self.summary.insert(format!("slope_{}", series.metric), series.slope());
        self.series.push(series);
    }

    /// `frame,metric,value,se`, one row per unit index and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,metric,value,se\n");
        for s in &self.series {
            for (i, (v, e)) in s.values.iter().zip(&s.se).enumerate() {
                let _ = writeln!(out, "{i},{},{v},{e}", s.metric);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.series.iter().all(|s| s.values.iter().chain(&s.se).all(|v| v.is_finite()))
            && self.summary.values().all(|s| s.value.is_finite() && s.se.is_finite())
    }
}

fn entropy_stat(res: &[f64], width: usize) -> Result<Stat> {
    let n = res.len() / width;
    let value = knn_entropy(res, width)?;
    // batch-means standard error over 10 disjoint blocks
    let blocks = 10;
    let per = n / blocks;
    let se = if per >= 2 {
        let vals = (0..blocks)
            .map(|b| knn_entropy(&res[b * per * width..(b + 1) * per * width], width))
            .collect::<Result<Vec<_>>>()?;
        mean_se(&vals).se * (per as f64 / n as f64).sqrt() * (blocks as f64).sqrt()
    } else {
        0.0
    };
    Ok(Stat::new(value, se, n))
}

/// Evaluates per-unit sample sets against the world's oracle laws.
///
/// Series: `w2_conditional` (pooled residual W2), `w2_marginal` (against the
/// unit's marginal law), `sample_entropy_estimate` (entropy of the residuals),
/// and for branching worlds `mode_coverage_fraction`.
pub fn evaluate_units(world: &WorldSpec, chunk: usize, units: &[UnitSamples]) -> Result<MetricReport> {
    let oracle = AnalyticOracle::for_units(*world, chunk)?;
    let layout = UnitLayout::new(world, chunk)?;
    let d = world.frame_dim;
    let ud = layout.unit_dim();
    let joint = oracle.joint_law()?;
    let mut cond = Vec::new();
    let mut marg = Vec::new();
    let mut ent = Vec::new();
    let mut cov = Vec::new();
    for us in units {
        cond.push(unit_conditional_w2(&oracle, chunk, us)?);
        let target = W2Target::marginal(&joint, us.unit * ud, ud, &offset_axes(chunk, d))?;
        let value = target.w2(&us.samples, ud)?;
        let se = bootstrap_se(&us.samples, ud, 0x3a7 ^ us.unit as u64, |s| target.w2(s, ud))?;
        marg.push(Stat::new(value, se, us.samples.len() / ud));
        ent.push(entropy_stat(&residuals(&oracle, chunk, us), ud)?);
        if matches!(world.kind, WorldKind::BranchingGmm { .. }) {
            let c = mode_coverage(world, chunk, us)?;
            cov.push(Stat::new(c.score, c.se, c.n));
        }
    }
    let mut report = MetricReport::default();
    report.push(MetricSeries::new("w2_conditional", &cond));
    report.push(MetricSeries::new("w2_marginal", &marg));
    if !cov.is_empty() {
        report.push(MetricSeries::new("mode_coverage_fraction", &cov));
    }
    report.push(MetricSeries::new("sample_entropy_estimate", &ent));
    Ok(report)
}

pub fn evaluate_sequences(world: &WorldSpec, chunk: usize, seqs: &SequenceBatch) -> Result<MetricReport> {
    evaluate_units(world, chunk, &UnitSamples::from_sequences(seqs, chunk)?)
}

/// Self-rollout quality per unit: each unit is judged against the oracle law
/// given the model's own generated prefix.
pub fn exposure_bias_curve<F>(model: &F, world: &WorldSpec, config: &RolloutConfig, num_rollouts: usize, seed: u64) -> Result<MetricReport>
where
    F: VelocityField + ?Sized,
{
    if num_rollouts < MIN_W2_SAMPLES {
        return Err(Error::InvalidArgument(format!("exposure_bias_curve needs at least {MIN_W2_SAMPLES} rollouts")));
    }
    let seqs = self_rollout(model, num_rollouts, seed, config)?;
    evaluate_sequences(world, config.chunk, &seqs)
}

/// Per-unit samples drawn with ground-truth prefixes.
pub fn teacher_forced_units<F>(model: &F, world: &WorldSpec, chunk: usize, schedule: &StepSchedule, n: usize, seed: u64) -> Result<Vec<UnitSamples>>
where
    F: VelocityField + ?Sized,
{
    let layout = UnitLayout::new(world, chunk)?;
    let (ud, d) = (layout.unit_dim(), world.frame_dim);
    let gt = sample_sequences(world, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f);
    let mut out = Vec::with_capacity(layout.units());
    for i in 0..layout.units() {
        let ctx = gt_context(&gt, ud, model.context(), i);
        let noise = normal_vec(&mut rng, n * ud);
        let samples = sample_units(model, &ctx, i, schedule, &noise, &mut rng)?;
        let prev = (0..n)
            .flat_map(|b| if i == 0 { vec![0.0; d] } else { gt.sequence(b)[i * ud - d..i * ud].to_vec() })
            .collect();
        out.push(UnitSamples { unit: i, samples, prev });
    }
    Ok(out)
}

pub fn teacher_forced_curve<F>(model: &F, world: &WorldSpec, chunk: usize, schedule: &StepSchedule, n: usize, seed: u64) -> Result<MetricReport>
where
    F: VelocityField + ?Sized,
{
    evaluate_units(world, chunk, &teacher_forced_units(model, world, chunk, schedule, n, seed)?)
}

/// Endpoint errors at several step counts and the fitted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub method: OdeMethod,
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    /// Mean of log2(error_K / error_2K).
    pub p_hat: f64,
}

pub const ORDER_STEPS: [usize; 4] = [12, 24, 48, 96];

/// Integrates `v` from `x1` at t = 1 down to `t_end` at each step count and
/// compares with `exact`.
pub fn solver_order_check_with<F>(v: &mut F, x1: &[f64], exact: &[f64], t_end: f64, method: OdeMethod) -> Result<OrderCheck>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let mut errors = Vec::new();
    for &k in &ORDER_STEPS {
        let traj = pf_ode_solve_to(v, x1, &uniform_descending(k, t_end), method)?;
        let end = &traj.last().expect("non-empty trajectory").x;
        errors.push(end.iter().zip(exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
    }
    let ratios: Vec<f64> = errors
        .windows(2)
        .map(|w| if w[0] == w[1] { 0.0 } else { (w[0] / w[1]).log2() })
        .collect();
    Ok(OrderCheck {
        method,
        steps: ORDER_STEPS.to_vec(),
        errors,
        p_hat: mean(&ratios),
    })
}

/// End time of the order check. Integrating all the way to t = 0 hides the
/// Heun order: for the standard normal the velocity is odd about t = 1/2 and the
/// leading error terms cancel, giving an apparent order of 3.
pub const ORDER_T_END: f64 = 0.25;

/// Measured order of Euler and Heun on the first-unit law of a Gaussian world,
/// whose PF-ODE solution is x(t) = sqrt((1 - t)^2 lambda + t^2) x(1) per eigen-direction.
pub fn solver_order_check(world: &WorldSpec) -> Result<Vec<OrderCheck>> {
    let oracle = AnalyticOracle::new(*world)?;
    let law = oracle.residual_law(0, 1)?;
    if law.components() != 1 {
        return Err(Error::UnsupportedKind {
            kind: "branching_gmm",
            what: "solver order check needs a Gaussian conditional".into(),
        });
    }
    let d = world.frame_dim;
    let x1: Vec<f64> = (0..d).map(|c| 1.0 - 0.25 * c as f64).collect();
    let exact = law.flow_between(&x1, 1.0, ORDER_T_END, 1)?;
    [OdeMethod::Euler, OdeMethod::Heun]
        .into_iter()
        .map(|m| solver_order_check_with(&mut |x: &[f64], t| law.velocity(x, t), &x1, &exact, ORDER_T_END, m))
        .collect()
}

/// Teacher-cost comparison of an ODE-distillation pipeline against a CD pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySummary {
    pub ode_teacher_evals: u64,
    pub cd_teacher_evals: u64,
    pub eval_ratio: f64,
    pub ode_aux_bytes: u64,
    pub cd_aux_bytes: u64,
    pub supervision_events: u64,
}

/// Sums each pipeline's reports and compares teacher calls and storage.
/// Both pipelines must have consumed the same number of supervision events.
pub fn efficiency_rollup(ode: &[&StageReport], cd: &[&StageReport]) -> Result<EfficiencySummary> {
    let sum = |rs: &[&StageReport]| StageReport::combine("rollup", rs);
    let (o, c) = (sum(ode), sum(cd));
    if o.supervision_events != c.supervision_events {
        return Err(Error::InvalidArgument(format!(
            "mismatched budgets: ODE pipeline consumed {} supervision events, CD pipeline {} (diff {})",
            o.supervision_events,
            c.supervision_events,
            o.supervision_events as i64 - c.supervision_events as i64
        )));
    }
    Ok(EfficiencySummary {
        ode_teacher_evals: o.teacher_evals,
        cd_teacher_evals: c.teacher_evals,
        eval_ratio: if c.teacher_evals == 0 {
            f64::INFINITY
        } else {
            o.teacher_evals as f64 / c.teacher_evals as f64
        },
        ode_aux_bytes: o.aux_bytes,
        cd_aux_bytes: c.aux_bytes,
        supervision_events: o.supervision_events,
    })
}
