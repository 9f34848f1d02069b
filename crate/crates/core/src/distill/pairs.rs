use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{StageReport, Tracker};
use crate::diffusion::{pf_ode_solve, OdeMethod, TimeGrid};
use crate::error::{Error, Result};
use crate::models::{causal_context, normal_vec, CondBatch, Counted, CountedSeq, SequenceField, VelocityField};
use crate::tensor::checkpoint::{ByteReader, ByteWriter};
use crate::worlds::{sample_sequences_with, UnitLayout, WorldSpec};

pub const PAIR_MAGIC: &[u8; 8] = b"ARDPAIRS";
pub const PAIR_VERSION: u32 = 1;

/// Trajectories solved together.
const SOLVE_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct OdePairRecord {
    pub ctx: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub x0: Vec<f64>,
    pub unit: usize,
}

/// Offline (x_t, x_0) pairs from teacher PF-ODE trajectories.
///
/// On disk: magic, version (u32), K, unit dim, context units, record count
/// (u64 each), teacher id (u64 length + UTF-8), then `count` fixed-width records
/// of little-endian f64: ctx (k * unit_dim), t, x_t (unit_dim), x_0 (unit_dim), unit index.
#[derive(Clone, Debug, PartialEq)]
pub struct OdePairStore {
    pub grid_k: usize,
    pub unit_dim: usize,
    pub context: usize,
    pub teacher_id: String,
    data: Vec<f64>,
    count: usize,
}

impl OdePairStore {
    pub fn new(grid_k: usize, unit_dim: usize, context: usize, teacher_id: &str) -> Self {
        Self {
            grid_k,
            unit_dim,
            context,
            teacher_id: teacher_id.to_string(),
            data: Vec::new(),
            count: 0,
        }
    }

    /// f64 slots per record.
    pub fn record_len(&self) -> usize {
        self.context * self.unit_dim + 2 * self.unit_dim + 2
    }

    pub fn record_bytes(&self) -> usize {
        8 * self.record_len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Bytes taken by the records.
    pub fn size_bytes(&self) -> u64 {
        (self.count * self.record_bytes()) as u64
    }

    pub fn push(&mut self, ctx: &[f64], t: f64, x_t: &[f64], x0: &[f64], unit: usize) -> Result<()> {
        let ud = self.unit_dim;
        if ctx.len() != self.context * ud || x_t.len() != ud || x0.len() != ud {
            return Err(Error::Shape {
                op: "pair store",
                detail: format!("record ctx {} x_t {} x0 {} for unit dim {ud}", ctx.len(), x_t.len(), x0.len()),
            });
        }
        self.data.extend_from_slice(ctx);
        self.data.push(t);
        self.data.extend_from_slice(x_t);
        self.data.extend_from_slice(x0);
        self.data.push(unit as f64);
        self.count += 1;
        Ok(())
    }

    pub fn get(&self, i: usize) -> OdePairRecord {
        let n = self.record_len();
        let r = &self.data[i * n..(i + 1) * n];
        let c = self.context * self.unit_dim;
        let ud = self.unit_dim;
        OdePairRecord {
            ctx: r[..c].to_vec(),
            t: r[c],
            x_t: r[c + 1..c + 1 + ud].to_vec(),
            x0: r[c + 1 + ud..c + 1 + 2 * ud].to_vec(),
            unit: r[n - 1] as usize,
        }
    }

    /// Gathers records into a training batch and its endpoint targets.
    pub fn batch(&self, idx: &[usize]) -> Result<(CondBatch, Vec<f64>)> {
        let mut x = Vec::new();
        let mut ctx = Vec::new();
        let mut t = Vec::new();
        let mut unit = Vec::new();
        let mut x0 = Vec::new();
        for &i in idx {
            let r = self.get(i);
            x.extend(r.x_t);
            ctx.extend(r.ctx);
            t.push(r.t);
            unit.push(r.unit);
            x0.extend(r.x0);
        }
        Ok((CondBatch::new(x, ctx, t, unit)?, x0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter(Vec::with_capacity(64 + self.data.len() * 8));
        w.0.extend_from_slice(PAIR_MAGIC);
        w.u32(PAIR_VERSION);
        w.u64(self.grid_k as u64);
        w.u64(self.unit_dim as u64);
        w.u64(self.context as u64);
        w.u64(self.count as u64);
        w.str(&self.teacher_id);
        w.f64s(&self.data);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        if r.take(8)? != PAIR_MAGIC {
            return Err(Error::Format("not a pair store (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != PAIR_VERSION {
            return Err(Error::Format(format!("unsupported pair store version {version}")));
        }
        let grid_k = r.u64()? as usize;
        let unit_dim = r.u64()? as usize;
        let context = r.u64()? as usize;
        let count = r.u64()? as usize;
        let teacher_id = r.str()?;
        let mut store = Self::new(grid_k, unit_dim, context, &teacher_id);
        store.data = r.f64s(count * store.record_len())?;
        store.count = count;
        if !r.finished() {
            return Err(Error::Format("trailing bytes after pair records".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Teacher-forced PF-ODE pairs from a causal teacher.
///
/// Each trajectory draws a ground-truth sequence, a unit, and noise, solves the
/// teacher's ODE over the full grid with Euler steps, and stores all K
/// (x_{t_j}, x_0) pairs; `ceil(num_pairs / K)` trajectories are solved.
pub fn generate_ode_pairs<F>(
    teacher: &F,
    world: &WorldSpec,
    chunk: usize,
    num_pairs: usize,
    grid: TimeGrid,
    teacher_id: &str,
    seed: u64,
) -> Result<(OdePairStore, StageReport)>
where
    F: VelocityField + ?Sized,
{
    let layout = UnitLayout::new(world, chunk)?;
    let ud = layout.unit_dim();
    if teacher.unit_dim() != ud {
        return Err(Error::InvalidArgument(format!("teacher unit dim {} vs world unit dim {ud}", teacher.unit_dim())));
    }
    let k = teacher.context();
    let counted = Counted::new(teacher);
    let mut tracker = Tracker::new("ode_pairs");
    let mut store = OdePairStore::new(grid.k(), ud, k, teacher_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = num_pairs.div_ceil(grid.k());
    let times = grid.descending();
    let mut done = 0;
    while done < trajectories {
        let rows = SOLVE_BATCH.min(trajectories - done);
        let gt = sample_sequences_with(world, rows, &mut rng)?;
        let units: Vec<usize> = (0..rows).map(|_| rng.random_range(0..layout.units())).collect();
        let ctx: Vec<f64> = (0..rows).flat_map(|b| causal_context(gt.sequence(b), ud, k, units[b])).collect();
        let eps = normal_vec(&mut rng, rows * ud);
        let mut v_fn = |x: &[f64], t: f64| counted.velocity(&CondBatch::new(x.to_vec(), ctx.clone(), vec![t; rows], units.clone())?);
        let traj = pf_ode_solve(&mut v_fn, &eps, &times, OdeMethod::Euler)?;
        let x0 = &traj.last().expect("solve returns states").x;
        for b in 0..rows {
            for state in &traj[..traj.len() - 1] {
                store.push(
                    &ctx[b * k * ud..(b + 1) * k * ud],
                    state.t,
                    &state.x[b * ud..(b + 1) * ud],
                    &x0[b * ud..(b + 1) * ud],
                    units[b],
                )?;
            }
        }
        done += rows;
    }
    let report = tracker.report_mut();
    report.teacher_evals = counted.evals();
    report.aux_bytes = store.to_bytes().len() as u64;
    Ok((store, tracker.finish()))
}

/// Pairs from whole-sequence PF-ODE trajectories of a sequence-level teacher.
///
/// All units are denoised jointly; every unit of every grid state becomes a
/// record whose context is the trajectory's own clean prefix. `ceil(num_pairs /
/// (K * units))` trajectories are solved, each costing K teacher calls.
pub fn generate_seq_ode_pairs<S>(
    teacher: &S,
    world: &WorldSpec,
    chunk: usize,
    context: usize,
    num_pairs: usize,
    grid: TimeGrid,
    teacher_id: &str,
    seed: u64,
) -> Result<(OdePairStore, StageReport)>
where
    S: SequenceField + ?Sized,
{
    let layout = UnitLayout::new(world, chunk)?;
    let ud = layout.unit_dim();
    let n = layout.seq_dim();
    if teacher.seq_dim() != n {
        return Err(Error::InvalidArgument(format!("teacher sequence dim {} vs world {n}", teacher.seq_dim())));
    }
    let counted = CountedSeq::new(teacher);
    let mut tracker = Tracker::new("seq_ode_pairs");
    let mut store = OdePairStore::new(grid.k(), ud, context, teacher_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_traj = grid.k() * layout.units();
    let trajectories = num_pairs.div_ceil(per_traj);
    let times = grid.descending();
    let mut done = 0;
    while done < trajectories {
        let rows = SOLVE_BATCH.min(trajectories - done);
        let eps = normal_vec(&mut rng, rows * n);
        let mut v_fn = |x: &[f64], t: f64| counted.velocity_seq(x, t);
        let traj = pf_ode_solve(&mut v_fn, &eps, &times, OdeMethod::Euler)?;
        let x0 = &traj.last().expect("solve returns states").x;
        for b in 0..rows {
            let seq0 = &x0[b * n..(b + 1) * n];
            for i in 0..layout.units() {
                let ctx = causal_context(seq0, ud, context, i);
                let span = b * n + i * ud..b * n + (i + 1) * ud;
                for state in &traj[..traj.len() - 1] {
                    store.push(&ctx, state.t, &state.x[span.clone()], &x0[span.clone()], i)?;
                }
            }
        }
        done += rows;
    }
    let report = tracker.report_mut();
    report.teacher_evals = counted.evals();
    report.aux_bytes = store.to_bytes().len() as u64;
    Ok((store, tracker.finish()))
}
