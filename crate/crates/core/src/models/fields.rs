use super::net::{CondBatch, NetMode, VelocityField, VelocityNet};
use crate::error::{shape_err, Error, Result};
use crate::worlds::{AnalyticOracle, MixtureLaw, UnitLayout};

/// Clean causal context of unit `i` taken from a flat sequence: units `i-k..i`,
/// zero-padded on the left.
pub fn causal_context(seq: &[f64], unit_dim: usize, k: usize, i: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * unit_dim];
    for slot in 0..k {
        let src = i as isize - k as isize + slot as isize;
        if src >= 0 {
            let s = src as usize * unit_dim;
            out[slot * unit_dim..(slot + 1) * unit_dim].copy_from_slice(&seq[s..s + unit_dim]);
        }
    }
    out
}

/// Bidirectional context of unit `i`: `k` units before then `k` units after,
/// zero-padded past either end.
pub fn bidir_context(seq: &[f64], unit_dim: usize, k: usize, i: usize) -> Vec<f64> {
    let units = seq.len() / unit_dim;
    let mut out = causal_context(seq, unit_dim, k, i);
    out.resize(2 * k * unit_dim, 0.0);
    for slot in 0..k {
        let src = i + 1 + slot;
        if src < units {
            let o = (k + slot) * unit_dim;
            out[o..o + unit_dim].copy_from_slice(&seq[src * unit_dim..(src + 1) * unit_dim]);
        }
    }
    out
}

/// Exact conditional velocity of a world, read through the causal context layout.
///
/// The previous frame is the trailing frame of the context; unit 0 ignores it.
#[derive(Clone, Debug)]
pub struct OracleField {
    oracle: AnalyticOracle,
    layout: UnitLayout,
    context: usize,
}

impl OracleField {
    pub fn new(oracle: AnalyticOracle, chunk: usize, context: usize) -> Result<Self> {
        let layout = UnitLayout::new(oracle.world(), chunk)?;
        if context == 0 {
            return Err(Error::InvalidArgument("oracle field needs a context of at least one unit".into()));
        }
        let oracle = if oracle.unit_frames() == chunk {
            oracle
        } else {
            AnalyticOracle::for_units(*oracle.world(), chunk)?
        };
        Ok(Self { oracle, layout, context })
    }

    pub fn oracle(&self) -> &AnalyticOracle {
        &self.oracle
    }

    pub fn layout(&self) -> &UnitLayout {
        &self.layout
    }

    fn rows<'b>(&self, batch: &'b CondBatch) -> Result<impl Iterator<Item = (usize, &'b [f64], &'b [f64])> + 'b> {
        let ud = self.layout.unit_dim();
        let cd = self.context * ud;
        if batch.unit_dim() != ud || batch.ctx_dim() != cd {
            return Err(shape_err(
                "oracle field",
                format!("unit dim {} ctx dim {} (want {ud}, {cd})", batch.unit_dim(), batch.ctx_dim()),
            ));
        }
        let d = self.layout.frame_dim;
        Ok((0..batch.rows).map(move |r| {
            let ctx = &batch.ctx[r * cd..(r + 1) * cd];
            (r, &batch.x_t[r * ud..(r + 1) * ud], &ctx[cd - d..])
        }))
    }

    /// Posterior mean of the clean unit.
    pub fn expectation(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.x_t.len());
        for (r, x, prev) in self.rows(batch)? {
            let first = batch.unit[r] * self.layout.chunk;
            out.extend(self.oracle.posterior_at(first, prev, x, batch.t[r])?.mean_x0);
        }
        Ok(out)
    }

    /// PF-ODE endpoint of every row, integrated with `steps` Heun steps for mixtures.
    pub fn flow_map(&self, batch: &CondBatch, steps: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.x_t.len());
        for (r, x, prev) in self.rows(batch)? {
            let first = batch.unit[r] * self.layout.chunk;
            out.extend(self.oracle.flow_map_at(first, prev, x, batch.t[r], steps)?);
        }
        Ok(out)
    }
}

impl VelocityField for OracleField {
    fn unit_dim(&self) -> usize {
        self.layout.unit_dim()
    }
    fn context(&self) -> usize {
        self.context
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.x_t.len());
        for (r, x, prev) in self.rows(batch)? {
            let first = batch.unit[r] * self.layout.chunk;
            out.extend(self.oracle.posterior_at(first, prev, x, batch.t[r])?.velocity());
        }
        Ok(out)
    }
}

/// A field whose one-jump generator reproduces the exact flow map:
/// v = (x_t - Phi(x_t, t)) / t.
#[derive(Clone, Debug)]
pub struct FlowMapField {
    field: OracleField,
    steps: usize,
}

impl FlowMapField {
    pub fn new(field: OracleField, steps: usize) -> Self {
        Self { field, steps }
    }
}

impl VelocityField for FlowMapField {
    fn unit_dim(&self) -> usize {
        self.field.unit_dim()
    }
    fn context(&self) -> usize {
        self.field.context
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        let x0 = self.field.flow_map(batch, self.steps)?;
        let ud = self.unit_dim();
        Ok(batch
            .x_t
            .iter()
            .zip(&x0)
            .enumerate()
            .map(|(j, (x, m))| {
                let t = batch.t[j / ud];
                if t == 0.0 {
                    0.0
                } else {
                    (x - m) / t
                }
            })
            .collect())
    }
}

/// Velocity of whole sequences whose units share one noise level.
pub trait SequenceField {
    fn seq_dim(&self) -> usize;
    /// `x_t` holds rows x seq_dim values.
    fn velocity_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<S: SequenceField + ?Sized> SequenceField for &S {
    fn seq_dim(&self) -> usize {
        (**self).seq_dim()
    }
    fn velocity_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).velocity_seq(x_t, t)
    }
}

/// Exact joint velocity of the whole-sequence law.
#[derive(Clone, Debug)]
pub struct JointOracle {
    law: MixtureLaw,
}

impl JointOracle {
    pub fn new(oracle: &AnalyticOracle) -> Result<Self> {
        Ok(Self { law: oracle.joint_law()? })
    }

    pub fn law(&self) -> &MixtureLaw {
        &self.law
    }

    pub fn score_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let n = self.law.dim();
        let mut out = Vec::with_capacity(x_t.len());
        for row in x_t.chunks_exact(n) {
            out.extend(self.law.score(row, t)?);
        }
        Ok(out)
    }
}

impl SequenceField for JointOracle {
    fn seq_dim(&self) -> usize {
        self.law.dim()
    }
    fn velocity_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        let n = self.law.dim();
        if x_t.len() % n != 0 {
            return Err(shape_err("joint oracle", format!("{} values for sequences of {n}", x_t.len())));
        }
        let mut out = Vec::with_capacity(x_t.len());
        for row in x_t.chunks_exact(n) {
            out.extend(self.law.velocity(row, t)?);
        }
        Ok(out)
    }
}

/// A bidirectional network applied to every unit of a sequence at once.
#[derive(Clone, Debug)]
pub struct BidirField<'a> {
    pub net: &'a VelocityNet,
    pub units: usize,
}

impl<'a> BidirField<'a> {
    pub fn new(net: &'a VelocityNet, units: usize) -> Result<Self> {
        if net.config().mode != NetMode::Bidirectional {
            return Err(Error::InvalidArgument("BidirField needs a bidirectional network".into()));
        }
        if units > net.config().units {
            return Err(Error::InvalidArgument(format!("{units} units exceed the embedding table")));
        }
        Ok(Self { net, units })
    }

    /// One [`CondBatch`] row per (sequence, unit).
    pub fn unit_batch(&self, x_t: &[f64], t: f64) -> Result<CondBatch> {
        let ud = self.net.config().unit_dim;
        let k = self.net.config().context;
        let n = ud * self.units;
        if x_t.len() % n != 0 || x_t.is_empty() {
            return Err(shape_err("bidirectional field", format!("{} values for sequences of {n}", x_t.len())));
        }
        let rows = x_t.len() / n * self.units;
        let mut ctx = Vec::with_capacity(rows * 2 * k * ud);
        let mut unit = Vec::with_capacity(rows);
        for seq in x_t.chunks_exact(n) {
            for i in 0..self.units {
                ctx.extend(bidir_context(seq, ud, k, i));
                unit.push(i);
            }
        }
        CondBatch::new(x_t.to_vec(), ctx, vec![t; rows], unit)
    }
}

impl SequenceField for BidirField<'_> {
    fn seq_dim(&self) -> usize {
        self.net.config().unit_dim * self.units
    }
    fn velocity_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.predict(&self.unit_batch(x_t, t)?)
    }
}

/// Counts sequence evaluations (one per row per call).
#[derive(Debug)]
pub struct CountedSeq<F> {
    inner: F,
    evals: std::cell::Cell<u64>,
}

impl<F: SequenceField> CountedSeq<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            evals: std::cell::Cell::new(0),
        }
    }

    pub fn evals(&self) -> u64 {
        self.evals.get()
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: SequenceField> SequenceField for CountedSeq<F> {
    fn seq_dim(&self) -> usize {
        self.inner.seq_dim()
    }
    fn velocity_seq(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.evals.set(self.evals.get() + (x_t.len() / self.inner.seq_dim().max(1)) as u64);
        self.inner.velocity_seq(x_t, t)
    }
}

/// Score from a velocity under x_t = (1 - t) x0 + t eps: s = -(x + (1 - t) v) / t.
pub fn score_from_velocity(x_t: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, v)| -(x + (1.0 - t) * v) / t).collect()
}
