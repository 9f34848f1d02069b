use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objectives::{dmd_direction, dmd_surrogate, flow_matching_objective, generator_var, regression_objective, DmdNormalizer};
use super::pairs::{generate_seq_ode_pairs, OdePairStore};
use super::{apply_step, grid_index, StageConfig, StageReport, Tracker};
use crate::error::{Error, Result};
use crate::models::{
    bidir_context, causal_context, normal_vec, rollout_graph, self_rollout_with, BidirField, CondBatch, Counted,
    NetMode, RolloutConfig, SequenceField, VelocityField, VelocityNet,
};
use crate::tensor::{EmaParamSet, Graph, Optimizer};
use crate::worlds::{sample_sequences_with, SequenceBatch, UnitLayout, WorldSpec};

/// Teacher-forced rows: a ground-truth batch, one random unit per sequence,
/// that unit's clean value and its causal context.
struct TfRows {
    units: Vec<usize>,
    x0: Vec<f64>,
    ctx: Vec<f64>,
}

fn tf_rows<R: Rng>(world: &WorldSpec, layout: &UnitLayout, k: usize, rows: usize, rng: &mut R) -> Result<TfRows> {
    let gt = sample_sequences_with(world, rows, rng)?;
    let units: Vec<usize> = (0..rows).map(|_| rng.random_range(0..layout.units())).collect();
    Ok(rows_from(&gt, layout, k, units))
}

fn rows_from(seqs: &SequenceBatch, layout: &UnitLayout, k: usize, units: Vec<usize>) -> TfRows {
    let ud = layout.unit_dim();
    let mut x0 = Vec::with_capacity(units.len() * ud);
    let mut ctx = Vec::with_capacity(units.len() * k * ud);
    for (b, &i) in units.iter().enumerate() {
        let seq = seqs.sequence(b);
        x0.extend_from_slice(&seq[i * ud..(i + 1) * ud]);
        ctx.extend(causal_context(seq, ud, k, i));
    }
    TfRows { units, x0, ctx }
}

fn diffuse_rows(x0: &[f64], eps: &[f64], t: &[f64], ud: usize) -> Vec<f64> {
    x0.iter()
        .zip(eps)
        .enumerate()
        .map(|(j, (x, e))| {
            let t = t[j / ud];
            (1.0 - t) * x + t * e
        })
        .collect()
}

fn check_mode(net: &VelocityNet, mode: NetMode, role: &str) -> Result<()> {
    if net.config().mode != mode {
        return Err(Error::InvalidArgument(format!("{role} must be a {mode:?} network")));
    }
    Ok(())
}

fn check_layout(net: &VelocityNet, layout: &UnitLayout, role: &str) -> Result<()> {
    if net.config().unit_dim != layout.unit_dim() || net.config().units < layout.units() {
        return Err(Error::InvalidArgument(format!(
            "{role}: network unit dim {} / {} units does not fit the world layout ({} / {})",
            net.config().unit_dim,
            net.config().units,
            layout.unit_dim(),
            layout.units()
        )));
    }
    Ok(())
}

/// One optimizer step of flow matching on (x0, ctx, unit) rows.
fn flow_matching_step<R: Rng>(
    net: &mut VelocityNet,
    opt: &mut Optimizer,
    cfg: &StageConfig,
    step: usize,
    x0: &[f64],
    ctx: Vec<f64>,
    units: Vec<usize>,
    rng: &mut R,
) -> Result<f64> {
    let ud = net.config().unit_dim;
    let rows = units.len();
    let t: Vec<f64> = (0..rows).map(|_| cfg.grid.time(grid_index(rng, &cfg.grid))).collect();
    let eps = normal_vec(rng, rows * ud);
    let x_t = diffuse_rows(x0, &eps, &t, ud);
    let target: Vec<f64> = eps.iter().zip(x0).map(|(e, x)| e - x).collect();
    let batch = CondBatch::new(x_t, ctx, t, units)?;
    let mut g = Graph::new();
    let loss = flow_matching_objective(net, &mut g, &batch, &target)?;
    let value = g.scalar(loss)?;
    g.backward(loss, net.params_mut())?;
    apply_step(net.params_mut(), opt, cfg, step)?;
    Ok(value)
}

/// Stage 1: teacher-forced flow matching of a causal network.
///
/// Each step draws fresh sequences, one unit per sequence, and a time from the
/// grid points t_1..t_K.
pub fn stage1_train(teacher: &mut VelocityNet, world: &WorldSpec, cfg: &StageConfig) -> Result<StageReport> {
    cfg.validate()?;
    check_mode(teacher, NetMode::Causal, "stage-1 teacher")?;
    let layout = UnitLayout::new(world, cfg.chunk)?;
    check_layout(teacher, &layout, "stage1")?;
    let k = teacher.config().context;
    let mut tracker = Tracker::new("stage1");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(teacher.params());
    for step in 0..cfg.steps {
        let rows = tf_rows(world, &layout, k, cfg.batch, &mut rng)?;
        let loss = flow_matching_step(teacher, &mut opt, cfg, step, &rows.x0, rows.ctx, rows.units, &mut rng)?;
        tracker.record(step, loss)?;
        tracker.report_mut().supervision_events += cfg.batch as u64;
    }
    Ok(tracker.finish())
}

/// Stage 1 for a bidirectional network: whole sequences are noised to a shared
/// time and each row denoises one unit seeing its noisy neighbours.
pub fn stage1_train_bidir(net: &mut VelocityNet, world: &WorldSpec, cfg: &StageConfig) -> Result<StageReport> {
    cfg.validate()?;
    check_mode(net, NetMode::Bidirectional, "bidirectional teacher")?;
    let layout = UnitLayout::new(world, cfg.chunk)?;
    check_layout(net, &layout, "stage1_bidir")?;
    let mut tracker = Tracker::new("stage1_bidir");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(net.params());
    for step in 0..cfg.steps {
        let gt = sample_sequences_with(world, cfg.batch, &mut rng)?;
        let value = bidir_fake_step(net, &mut opt, cfg, step, &gt, &layout, &mut rng)?;
        tracker.record(step, value)?;
        tracker.report_mut().supervision_events += cfg.batch as u64;
    }
    Ok(tracker.finish())
}

/// Stage 2, causal ODE distillation: regress G_theta(x_t, prefix, t) onto the
/// stored endpoints, sampling records uniformly.
pub fn stage2_causal_ode(student: &mut VelocityNet, pairs: &OdePairStore, cfg: &StageConfig) -> Result<StageReport> {
    cfg.validate()?;
    check_mode(student, NetMode::Causal, "student")?;
    if cfg.steps > 0 && pairs.is_empty() {
        return Err(Error::InvalidArgument("stage2_causal_ode: empty pair store".into()));
    }
    if pairs.unit_dim != student.config().unit_dim || pairs.context != student.config().context {
        return Err(Error::InvalidArgument(format!(
            "pair store layout (unit dim {}, context {}) does not match the student ({}, {})",
            pairs.unit_dim,
            pairs.context,
            student.config().unit_dim,
            student.config().context
        )));
    }
    let mut tracker = Tracker::new("stage2_causal_ode");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(student.params());
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..pairs.len())).collect();
        let (batch, target) = pairs.batch(&idx)?;
        let mut g = Graph::new();
        let loss = regression_objective(student, &mut g, &batch, &target)?;
        let value = g.scalar(loss)?;
        g.backward(loss, student.params_mut())?;
        apply_step(student.params_mut(), &mut opt, cfg, step)?;
        tracker.record(step, value)?;
        tracker.report_mut().supervision_events += cfg.batch as u64;
    }
    Ok(tracker.finish())
}

/// Stage 2, causal consistency distillation.
///
/// Per row: a grid time t_j, x_t from ground truth, one Euler step of the teacher
/// to t_{j-1} under the ground-truth prefix, and the target
/// stopgrad G_ema(x_hat, t_{j-1}); the loss is the squared norm (w = 1).
pub fn stage2_causal_cd<F>(
    student: &mut VelocityNet,
    teacher: &F,
    ema: &mut EmaParamSet,
    world: &WorldSpec,
    cfg: &StageConfig,
) -> Result<StageReport>
where
    F: VelocityField + ?Sized,
{
    cfg.validate()?;
    check_mode(student, NetMode::Causal, "student")?;
    let layout = UnitLayout::new(world, cfg.chunk)?;
    check_layout(student, &layout, "stage2_causal_cd")?;
    let (ud, k) = (layout.unit_dim(), student.config().context);
    if teacher.unit_dim() != ud || teacher.context() != k {
        return Err(Error::InvalidArgument(format!(
            "teacher (unit dim {}, context {}) and student ({ud}, {k}) disagree",
            teacher.unit_dim(),
            teacher.context()
        )));
    }
    let teacher = Counted::new(teacher);
    let mut target_net = student.with_params(ema.shadow())?;
    let mut tracker = Tracker::new("stage2_causal_cd");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(student.params());
    let grid = cfg.grid;
    for step in 0..cfg.steps {
        let rows = tf_rows(world, &layout, k, cfg.batch, &mut rng)?;
        let js: Vec<usize> = (0..cfg.batch).map(|_| grid_index(&mut rng, &grid)).collect();
        let t: Vec<f64> = js.iter().map(|&j| grid.time(j)).collect();
        let s: Vec<f64> = js.iter().map(|&j| grid.time(j - 1)).collect();
        let eps = normal_vec(&mut rng, cfg.batch * ud);
        let x_t = diffuse_rows(&rows.x0, &eps, &t, ud);
        let batch = CondBatch::new(x_t, rows.ctx, t, rows.units)?;
        let v = teacher.velocity(&batch)?;
        let x_hat: Vec<f64> = batch
            .x_t
            .iter()
            .zip(&v)
            .enumerate()
            .map(|(j, (x, v))| x - (batch.t[j / ud] - s[j / ud]) * v)
            .collect();
        target_net.params_mut().copy_values_from(ema.shadow())?;
        let prev = CondBatch::new(x_hat, batch.ctx.clone(), s.clone(), batch.unit.clone())?;
        let v_ema = target_net.predict(&prev)?;
        let target: Vec<f64> = prev
            .x_t
            .iter()
            .zip(&v_ema)
            .enumerate()
            .map(|(j, (x, v))| x - s[j / ud] * v)
            .collect();
        let mut g = Graph::new();
        let loss = regression_objective(student, &mut g, &batch, &target)?;
        let value = g.scalar(loss)?;
        g.backward(loss, student.params_mut())?;
        apply_step(student.params_mut(), &mut opt, cfg, step)?;
        ema.update(student.params())?;
        tracker.record(step, value)?;
        tracker.report_mut().supervision_events += cfg.batch as u64;
    }
    tracker.report_mut().teacher_evals = teacher.evals();
    Ok(tracker.finish())
}

/// Settings specific to the DMD stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmdConfig {
    pub fake_lr: f64,
    /// Fake-score updates per generator update.
    pub fake_ratio: usize,
    pub normalizer: DmdNormalizer,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            fake_lr: 1e-3,
            fake_ratio: 5,
            normalizer: DmdNormalizer::Gap,
        }
    }
}

fn one_step_outputs(student: &VelocityNet, noise: &[f64], ctx: &[f64], units: &[usize]) -> Result<Vec<f64>> {
    let rows = units.len();
    let v = student.predict(&CondBatch::new(noise.to_vec(), ctx.to_vec(), vec![1.0; rows], units.to_vec())?)?;
    Ok(noise.iter().zip(&v).map(|(x, v)| x - v).collect())
}

/// Stage 2, causal DMD under teacher forcing.
///
/// Alternates `fake_ratio` flow-matching updates of the fake score on current
/// one-step student samples with one generator update whose per-sample direction
/// is the (normalized) fake-minus-real score difference at a re-noised sample.
pub fn stage2_causal_dmd<F>(
    student: &mut VelocityNet,
    real: &F,
    fake: &mut VelocityNet,
    world: &WorldSpec,
    cfg: &StageConfig,
    dmd: &DmdConfig,
) -> Result<StageReport>
where
    F: VelocityField + ?Sized,
{
    cfg.validate()?;
    check_mode(student, NetMode::Causal, "student")?;
    check_mode(fake, NetMode::Causal, "fake score")?;
    let layout = UnitLayout::new(world, cfg.chunk)?;
    check_layout(student, &layout, "stage2_causal_dmd")?;
    check_layout(fake, &layout, "stage2_causal_dmd fake")?;
    let (ud, k) = (layout.unit_dim(), student.config().context);
    if real.unit_dim() != ud || real.context() != k || fake.config().context != k {
        return Err(Error::InvalidArgument("real/fake/student context layouts disagree".into()));
    }
    let real = Counted::new(real);
    let mut tracker = Tracker::new("stage2_causal_dmd");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(student.params());
    let mut fake_opt = Optimizer::adam(fake.params());
    let fake_cfg = StageConfig { lr: dmd.fake_lr, ..cfg.clone() };
    let mut fake_steps = 0;
    for step in 0..cfg.steps {
        for _ in 0..dmd.fake_ratio {
            let rows = tf_rows(world, &layout, k, cfg.batch, &mut rng)?;
            let noise = normal_vec(&mut rng, cfg.batch * ud);
            let samples = one_step_outputs(student, &noise, &rows.ctx, &rows.units)?;
            let loss = flow_matching_step(fake, &mut fake_opt, &fake_cfg, step, &samples, rows.ctx, rows.units, &mut rng)?;
            if !loss.is_finite() || loss > super::DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    stage: "stage2_causal_dmd (fake score)".into(),
                    step: fake_steps,
                    loss,
                });
            }
            fake_steps += 1;
        }
        let rows = tf_rows(world, &layout, k, cfg.batch, &mut rng)?;
        let noise = normal_vec(&mut rng, cfg.batch * ud);
        let mut g = Graph::new();
        let x1 = g.constant(cfg.batch, ud, noise)?;
        let ctx = g.constant(cfg.batch, k * ud, rows.ctx.clone())?;
        let ones = vec![1.0; cfg.batch];
        let v = student.forward(&mut g, x1, ctx, &ones, &rows.units, true)?;
        let x_var = generator_var(&mut g, x1, v, &ones)?;
        let x = g.value(x_var).to_vec();
        let t: Vec<f64> = (0..cfg.batch).map(|_| cfg.grid.time(grid_index(&mut rng, &cfg.grid))).collect();
        let eps = normal_vec(&mut rng, cfg.batch * ud);
        let x_t = diffuse_rows(&x, &eps, &t, ud);
        let probe = CondBatch::new(x_t, rows.ctx, t, rows.units)?;
        let v_real = real.velocity(&probe)?;
        let v_fake = fake.predict(&probe)?;
        let dir = dmd_direction(&v_real, &v_fake, &probe.x_t, &x, &probe.t, ud, dmd.normalizer);
        let loss = dmd_surrogate(&mut g, x_var, &dir)?;
        let value = g.scalar(loss)?;
        g.backward(loss, student.params_mut())?;
        apply_step(student.params_mut(), &mut opt, cfg, step)?;
        tracker.record(step, value)?;
        tracker.report_mut().supervision_events += cfg.batch as u64;
    }
    tracker.report_mut().teacher_evals = real.evals();
    Ok(tracker.finish())
}

/// Stage 2 with a bidirectional teacher: pairs come from whole-sequence ODE
/// trajectories and the causal student regresses each unit's endpoint given the
/// trajectory's clean prefix. The report covers pair generation plus training.
pub fn stage2_bidir_ode<S>(
    student: &mut VelocityNet,
    bidir_teacher: &S,
    world: &WorldSpec,
    num_pairs: usize,
    cfg: &StageConfig,
) -> Result<(StageReport, OdePairStore)>
where
    S: SequenceField + ?Sized,
{
    let k = student.config().context;
    let (store, gen) = generate_seq_ode_pairs(
        bidir_teacher,
        world,
        cfg.chunk,
        k,
        num_pairs,
        cfg.grid,
        "bidirectional",
        cfg.seed ^ 0x5eed_0de,
    )?;
    let train = stage2_causal_ode(student, &store, cfg)?;
    Ok((StageReport::combine("stage2_bidir_ode", &[&gen, &train]), store))
}

/// The real score used by Stage 3.
pub enum RealScore<'a> {
    /// Per-unit conditional score given the generated clean prefix; pairs with a causal fake score.
    Conditional(&'a dyn VelocityField),
    /// Score of the whole noised sequence; pairs with a bidirectional fake score.
    Joint(&'a dyn SequenceField),
}

/// Stage 3: DMD on the student's own rollouts.
///
/// Samples come from few-step self-rollout (gradients per `config.grad_depth`).
/// With [`RealScore::Conditional`] each generated unit is re-noised alone and
/// scored given its generated prefix; with [`RealScore::Joint`] the whole
/// sequence is re-noised and scored by sequence-level real and fake fields.
pub fn stage3_asymmetric_dmd(
    student: &mut VelocityNet,
    real: RealScore<'_>,
    fake: &mut VelocityNet,
    world: &WorldSpec,
    rollout: &RolloutConfig,
    cfg: &StageConfig,
    dmd: &DmdConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    check_mode(student, NetMode::Causal, "student")?;
    let layout = UnitLayout::new(world, rollout.chunk)?;
    check_layout(student, &layout, "stage3")?;
    check_layout(fake, &layout, "stage3 fake")?;
    if rollout.units != layout.units() {
        return Err(Error::InvalidArgument(format!("rollout of {} units for a {}-unit world", rollout.units, layout.units())));
    }
    let (ud, n) = (layout.unit_dim(), layout.seq_dim());
    let fk = fake.config().context;
    match real {
        RealScore::Conditional(f) => {
            check_mode(fake, NetMode::Causal, "conditional stage-3 fake score")?;
            if f.unit_dim() != ud || f.context() != fk {
                return Err(Error::InvalidArgument("real score and fake score context layouts disagree".into()));
            }
        }
        RealScore::Joint(f) => {
            check_mode(fake, NetMode::Bidirectional, "joint stage-3 fake score")?;
            if f.seq_dim() != n {
                return Err(Error::InvalidArgument("joint real score has the wrong sequence size".into()));
            }
        }
    }
    let mut tracker = Tracker::new("stage3");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::adam(student.params());
    let mut fake_opt = Optimizer::adam(fake.params());
    let fake_cfg = StageConfig { lr: dmd.fake_lr, ..cfg.clone() };
    let mut real_evals = 0u64;
    let rows = cfg.batch;
    for step in 0..cfg.steps {
        for _ in 0..dmd.fake_ratio {
            let seqs = self_rollout_with(&*student, rows, &mut rng, rollout)
                .map_err(|e| Error::InvalidArgument(format!("stage3 rollout at step {step}: {e}")))?;
            let loss = match real {
                RealScore::Conditional(_) => {
                    let units: Vec<usize> = (0..rows).map(|_| rng.random_range(0..layout.units())).collect();
                    let r = rows_from(&seqs, &layout, fk, units);
                    flow_matching_step(fake, &mut fake_opt, &fake_cfg, step, &r.x0, r.ctx, r.units, &mut rng)?
                }
                RealScore::Joint(_) => bidir_fake_step(fake, &mut fake_opt, &fake_cfg, step, &seqs, &layout, &mut rng)?,
            };
            if !loss.is_finite() || loss > super::DIVERGENCE_LOSS {
                return Err(Error::Diverged {
                    stage: "stage3 (fake score)".into(),
                    step,
                    loss,
                });
            }
        }
        let mut g = Graph::new();
        let roll = rollout_graph(student, &mut g, rows, rollout, &mut rng)?;
        let mut total = None;
        match real {
            RealScore::Conditional(real) => {
                for (i, var) in roll.units.iter().enumerate() {
                    let Some(var) = *var else { continue };
                    let x: Vec<f64> = (0..rows).flat_map(|b| roll.values[b * n + i * ud..b * n + (i + 1) * ud].to_vec()).collect();
                    let ctx: Vec<f64> = (0..rows).flat_map(|b| causal_context(&roll.values[b * n..(b + 1) * n], ud, fk, i)).collect();
                    let t: Vec<f64> = (0..rows).map(|_| cfg.grid.time(grid_index(&mut rng, &cfg.grid))).collect();
                    let eps = normal_vec(&mut rng, rows * ud);
                    let probe = CondBatch::new(diffuse_rows(&x, &eps, &t, ud), ctx, t, vec![i; rows])?;
                    let v_real = real.velocity(&probe)?;
                    real_evals += rows as u64;
                    let v_fake = fake.predict(&probe)?;
                    let dir = dmd_direction(&v_real, &v_fake, &probe.x_t, &x, &probe.t, ud, dmd.normalizer);
                    let l = dmd_surrogate(&mut g, var, &dir)?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
            }
            RealScore::Joint(real) => {
                let field = BidirField::new(fake, layout.units())?;
                let mut dirs = vec![Vec::with_capacity(rows * ud); layout.units()];
                for b in 0..rows {
                    let seq = &roll.values[b * n..(b + 1) * n];
                    let t = cfg.grid.time(grid_index(&mut rng, &cfg.grid));
                    let eps = normal_vec(&mut rng, n);
                    let x_t = diffuse_rows(seq, &eps, &vec![t; n], n);
                    let v_real = real.velocity_seq(&x_t, t)?;
                    real_evals += 1;
                    let v_fake = field.velocity_seq(&x_t, t)?;
                    let dir = dmd_direction(&v_real, &v_fake, &x_t, seq, &vec![t; layout.units()], ud, dmd.normalizer);
                    for (i, d) in dirs.iter_mut().enumerate() {
                        d.extend_from_slice(&dir[i * ud..(i + 1) * ud]);
                    }
                }
                for (i, var) in roll.units.iter().enumerate() {
                    let Some(var) = *var else { continue };
                    let l = dmd_surrogate(&mut g, var, &dirs[i])?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
            }
        }
        let loss = total.ok_or_else(|| Error::InvalidArgument("rollout produced no differentiable unit".into()))?;
        let value = g.scalar(loss)?;
        g.backward(loss, student.params_mut())?;
        apply_step(student.params_mut(), &mut opt, cfg, step)?;
        tracker.record(step, value)?;
        tracker.report_mut().supervision_events += (rows * layout.units()) as u64;
    }
    tracker.report_mut().teacher_evals = real_evals;
    Ok(tracker.finish())
}

/// One flow-matching step of a bidirectional network on whole sequences noised
/// to a shared per-row time.
fn bidir_fake_step<R: Rng>(
    fake: &mut VelocityNet,
    opt: &mut Optimizer,
    cfg: &StageConfig,
    step: usize,
    seqs: &SequenceBatch,
    layout: &UnitLayout,
    rng: &mut R,
) -> Result<f64> {
    let (ud, n, k) = (layout.unit_dim(), layout.seq_dim(), fake.config().context);
    let rows = seqs.batch;
    let mut x_t = Vec::with_capacity(rows * ud);
    let mut ctx = Vec::with_capacity(rows * 2 * k * ud);
    let mut target = Vec::with_capacity(rows * ud);
    let mut t = Vec::with_capacity(rows);
    let mut units = Vec::with_capacity(rows);
    for b in 0..rows {
        let tb = cfg.grid.time(grid_index(rng, &cfg.grid));
        let eps = normal_vec(rng, n);
        let seq = seqs.sequence(b);
        let noisy = diffuse_rows(seq, &eps, &vec![tb; n], n);
        let i = rng.random_range(0..layout.units());
        x_t.extend_from_slice(&noisy[i * ud..(i + 1) * ud]);
        ctx.extend(bidir_context(&noisy, ud, k, i));
        target.extend((i * ud..(i + 1) * ud).map(|j| eps[j] - seq[j]));
        t.push(tb);
        units.push(i);
    }
    let batch = CondBatch::new(x_t, ctx, t, units)?;
    let mut g = Graph::new();
    let loss = flow_matching_objective(fake, &mut g, &batch, &target)?;
    let value = g.scalar(loss)?;
    g.backward(loss, fake.params_mut())?;
    apply_step(fake.params_mut(), opt, cfg, step)?;
    Ok(value)
}
