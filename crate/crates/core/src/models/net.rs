use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, shape_err, Error, Result};
use crate::tensor::{gemm, Checkpoint, Graph, ParamId, ParamSet, Tensor, Var};

/// Which units a network may look at besides the one being denoised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    /// The `k` previous clean units.
    Causal,
    /// The `k` previous and `k` following units at the same noise level.
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub unit_dim: usize,
    /// Number of unit positions (size of the index embedding table).
    pub units: usize,
    /// Context window `k` in units.
    pub context: usize,
    pub mode: NetMode,
    pub width: usize,
    pub depth: usize,
    pub time_freqs: usize,
    pub unit_embed: usize,
}

impl NetConfig {
    /// Defaults: 4 hidden layers of 256, k = 4, 8 time frequencies, 8-dim unit embedding.
    pub fn new(unit_dim: usize, units: usize, mode: NetMode) -> Self {
        Self {
            unit_dim,
            units,
            context: 4,
            mode,
            width: 256,
            depth: 4,
            time_freqs: 8,
            unit_embed: 8,
        }
    }

    pub fn with_size(mut self, width: usize, depth: usize) -> Self {
        self.width = width;
        self.depth = depth;
        self
    }

    pub fn with_context(mut self, k: usize) -> Self {
        self.context = k;
        self
    }

    /// Length of the context slot of one input row.
    pub fn ctx_dim(&self) -> usize {
        match self.mode {
            NetMode::Causal => self.context * self.unit_dim,
            NetMode::Bidirectional => 2 * self.context * self.unit_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.unit_dim + self.ctx_dim() + 2 * self.time_freqs + self.unit_embed
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("net config: {what}")));
        if self.unit_dim == 0 || self.units == 0 {
            return bad("unit_dim and units must be positive");
        }
        if self.context == 0 {
            return bad("context window must be at least 1");
        }
        if self.width == 0 || self.depth == 0 {
            return bad("width and depth must be positive");
        }
        if self.time_freqs == 0 || self.unit_embed == 0 {
            return bad("embedding sizes must be positive");
        }
        Ok(())
    }
}

/// Rows of conditioned unit inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CondBatch {
    pub rows: usize,
    /// rows x unit_dim
    pub x_t: Vec<f64>,
    /// rows x ctx_dim
    pub ctx: Vec<f64>,
    pub t: Vec<f64>,
    pub unit: Vec<usize>,
}

impl CondBatch {
    pub fn new(x_t: Vec<f64>, ctx: Vec<f64>, t: Vec<f64>, unit: Vec<usize>) -> Result<Self> {
        let rows = t.len();
        if rows == 0 || unit.len() != rows || x_t.len() % rows != 0 || ctx.len() % rows != 0 {
            return Err(shape_err(
                "cond batch",
                format!("{} x values, {} ctx values, {} times, {} unit ids", x_t.len(), ctx.len(), rows, unit.len()),
            ));
        }
        Ok(Self { rows, x_t, ctx, t, unit })
    }

    /// All rows share one time and unit index.
    pub fn uniform(x_t: Vec<f64>, ctx: Vec<f64>, rows: usize, t: f64, unit: usize) -> Result<Self> {
        Self::new(x_t, ctx, vec![t; rows], vec![unit; rows])
    }

    pub fn unit_dim(&self) -> usize {
        self.x_t.len() / self.rows
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx.len() / self.rows
    }
}

/// Anything that maps a [`CondBatch`] to per-row velocities.
pub trait VelocityField {
    fn unit_dim(&self) -> usize;
    /// Context layout expected in [`CondBatch::ctx`].
    fn context(&self) -> usize;
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>>;
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn unit_dim(&self) -> usize {
        (**self).unit_dim()
    }
    fn context(&self) -> usize {
        (**self).context()
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        (**self).velocity(batch)
    }
}

/// Counts evaluated rows; one row is one model call for one unit.
#[derive(Debug)]
pub struct Counted<F> {
    inner: F,
    evals: std::cell::Cell<u64>,
}

impl<F: VelocityField> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            evals: std::cell::Cell::new(0),
        }
    }

    pub fn evals(&self) -> u64 {
        self.evals.get()
    }

    pub fn reset(&self) {
        self.evals.set(0);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<F: VelocityField> VelocityField for Counted<F> {
    fn unit_dim(&self) -> usize {
        self.inner.unit_dim()
    }
    fn context(&self) -> usize {
        self.inner.context()
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        self.evals.set(self.evals.get() + batch.rows as u64);
        self.inner.velocity(batch)
    }
}

fn time_features(t: f64, freqs: usize, out: &mut [f64]) {
    for m in 0..freqs {
        // geometric frequencies from 1 to 32 rad per unit time
        let f = if freqs == 1 { 1.0 } else { 32f64.powf(m as f64 / (freqs - 1) as f64) };
        out[2 * m] = (f * t).sin();
        out[2 * m + 1] = (f * t).cos();
    }
}

fn silu(x: f64) -> f64 {
    if x >= 0.0 {
        x / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        x * e / (1.0 + e)
    }
}

/// MLP velocity network over `[x_t | context | time features | unit embedding]`.
///
/// The final layer starts at zero so a fresh network predicts v = 0.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    config: NetConfig,
    params: ParamSet,
    unit_table: ParamId,
    layers: Vec<(ParamId, ParamId)>,
}

impl VelocityNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let table: Vec<f64> = (0..config.units * config.unit_embed)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.insert("unit_embed", Tensor::matrix(config.units, config.unit_embed, table)?)?;
        let mut fan_in = config.input_dim();
        for l in 0..=config.depth {
            let last = l == config.depth;
            let fan_out = if last { config.unit_dim } else { config.width };
            let std = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| if last { 0.0 } else { std * rng.sample::<f64, _>(StandardNormal) })
                .collect();
            params.insert(format!("w{l}"), Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(format!("b{l}"), Tensor::new(vec![fan_out], vec![0.0; fan_out])?)?;
            fan_in = fan_out;
        }
        Self::from_params(config, params)
    }

    fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        let unit_table = params.id("unit_embed")?;
        let layers = (0..=config.depth)
            .map(|l| Ok((params.id(&format!("w{l}"))?, params.id(&format!("b{l}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let net = Self {
            config,
            params,
            unit_table,
            layers,
        };
        net.check_layout()?;
        Ok(net)
    }

    fn check_layout(&self) -> Result<()> {
        let c = &self.config;
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            let got = self.params.get(id).shape();
            if got != shape {
                return Err(shape_err("velocity net", format!("{} has shape {got:?}, expected {shape:?}", self.params.name(id))));
            }
            Ok(())
        };
        expect(self.unit_table, &[c.units, c.unit_embed])?;
        let mut fan_in = c.input_dim();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let fan_out = if l == c.depth { c.unit_dim } else { c.width };
            expect(w, &[fan_in, fan_out])?;
            expect(b, &[fan_out])?;
            fan_in = fan_out;
        }
        Ok(())
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copy of this network with parameters taken from `params` (e.g. an EMA shadow).
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        self.params.check_same_layout(params)?;
        let mut out = self.clone();
        out.params.copy_values_from(params)?;
        Ok(out)
    }

    fn check_batch(&self, rows: usize, x_len: usize, ctx_len: usize, t: &[f64], unit: &[usize]) -> Result<()> {
        let c = &self.config;
        if x_len != rows * c.unit_dim || ctx_len != rows * c.ctx_dim() || t.len() != rows || unit.len() != rows {
            return Err(shape_err(
                "predict_velocity",
                format!(
                    "{rows} rows: x {x_len} (want {}), ctx {ctx_len} (want {}), t {}, unit {}",
                    rows * c.unit_dim,
                    rows * c.ctx_dim(),
                    t.len(),
                    unit.len()
                ),
            ));
        }
        if let Some(&t) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("predict_velocity: t = {t} outside [0, 1]")));
        }
        if let Some(&u) = unit.iter().find(|&&u| u >= c.units) {
            return Err(Error::InvalidArgument(format!("unit index {u} >= {}", c.units)));
        }
        Ok(())
    }

    fn time_block(&self, t: &[f64]) -> Vec<f64> {
        let f = self.config.time_freqs;
        let mut out = vec![0.0; t.len() * 2 * f];
        for (row, &t) in out.chunks_exact_mut(2 * f).zip(t) {
            time_features(t, f, row);
        }
        out
    }

    /// Velocity prediction without recording a tape.
    pub fn predict(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        let c = &self.config;
        let rows = batch.rows;
        self.check_batch(rows, batch.x_t.len(), batch.ctx.len(), &batch.t, &batch.unit)?;
        let in_dim = c.input_dim();
        let (ud, cd, td) = (c.unit_dim, c.ctx_dim(), 2 * c.time_freqs);
        let table = self.params.get(self.unit_table).values();
        let mut h = vec![0.0; rows * in_dim];
        for r in 0..rows {
            let row = &mut h[r * in_dim..(r + 1) * in_dim];
            row[..ud].copy_from_slice(&batch.x_t[r * ud..(r + 1) * ud]);
            row[ud..ud + cd].copy_from_slice(&batch.ctx[r * cd..(r + 1) * cd]);
            time_features(batch.t[r], c.time_freqs, &mut row[ud + cd..ud + cd + td]);
            let u = batch.unit[r];
            row[ud + cd + td..].copy_from_slice(&table[u * c.unit_embed..(u + 1) * c.unit_embed]);
        }
        let mut fan_in = in_dim;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let w = self.params.get(w).values();
            let b = self.params.get(b).values();
            let fan_out = b.len();
            let mut out = vec![0.0; rows * fan_out];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(b);
            }
            gemm(rows, fan_in, fan_out, &h, fan_in as isize, 1, w, fan_out as isize, 1, 1.0, &mut out);
            if l < c.depth {
                out.iter_mut().for_each(|v| *v = silu(*v));
            }
            h = out;
            fan_in = fan_out;
        }
        if let Err(e) = check_finite("predict_velocity", &h) {
            let bad = h.iter().position(|v| !v.is_finite()).unwrap_or(0) / c.unit_dim;
            return Err(Error::NonFinite {
                op: format!("{e}; row {bad} at t = {}, unit {}", batch.t[bad], batch.unit[bad]),
            });
        }
        Ok(h)
    }

    /// Records the forward pass on `g`. With `trainable` false the parameters
    /// enter as constants, so gradients only flow into `x_t` / `ctx`.
    pub fn forward(&self, g: &mut Graph, x_t: Var, ctx: Var, t: &[f64], unit: &[usize], trainable: bool) -> Result<Var> {
        let c = &self.config;
        let rows = g.dims(x_t).0;
        let (xr, xc) = g.dims(x_t);
        let (cr, cc) = g.dims(ctx);
        if cr != rows {
            return Err(shape_err("predict_velocity", format!("x rows {xr} vs ctx rows {cr}")));
        }
        self.check_batch(rows, xr * xc, cr * cc, t, unit)?;
        let leaf = |g: &mut Graph, id: ParamId| {
            if trainable {
                g.param(&self.params, id)
            } else {
                g.frozen(&self.params, id)
            }
        };
        let time = g.constant(rows, 2 * c.time_freqs, self.time_block(t))?;
        let mut onehot = vec![0.0; rows * c.units];
        for (r, &u) in unit.iter().enumerate() {
            onehot[r * c.units + u] = 1.0;
        }
        let onehot = g.constant(rows, c.units, onehot)?;
        let table = leaf(g, self.unit_table)?;
        let emb = g.matmul(onehot, table)?;
        let mut h = g.concat(&[x_t, ctx, time, emb])?;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let w = leaf(g, w)?;
            let b = leaf(g, b)?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l < c.depth {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Convenience wrapper of [`VelocityNet::forward`] over a [`CondBatch`] held as constants.
    pub fn forward_batch(&self, g: &mut Graph, batch: &CondBatch, trainable: bool) -> Result<Var> {
        let x = g.constant(batch.rows, self.config.unit_dim, batch.x_t.clone())?;
        let ctx = self.ctx_var(g, batch.rows, &batch.ctx)?;
        self.forward(g, x, ctx, &batch.t, &batch.unit, trainable)
    }

    pub(crate) fn ctx_var(&self, g: &mut Graph, rows: usize, ctx: &[f64]) -> Result<Var> {
        g.constant(rows, self.config.ctx_dim(), ctx.to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta.insert("kind".into(), "velocity_net".into());
        ck.meta.insert("net_config".into(), serde_json::to_string(&self.config)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .meta
            .get("net_config")
            .ok_or_else(|| Error::Format("checkpoint has no net_config entry".into()))?;
        let config: NetConfig = serde_json::from_str(cfg)?;
        config.validate()?;
        let mut params = ParamSet::new();
        for (_, name, t) in ck.params.iter() {
            params.insert(name, t.clone())?;
        }
        Self::from_params(config, params)
    }
}

impl VelocityField for VelocityNet {
    fn unit_dim(&self) -> usize {
        self.config.unit_dim
    }
    fn context(&self) -> usize {
        self.config.context
    }
    fn velocity(&self, batch: &CondBatch) -> Result<Vec<f64>> {
        self.predict(batch)
    }
}

/// predict_velocity for a single row.
pub fn predict_velocity(model: &VelocityNet, x_t: &[f64], context: &[f64], t: f64, i: usize) -> Result<Vec<f64>> {
    model.predict(&CondBatch::uniform(x_t.to_vec(), context.to_vec(), 1, t, i)?)
}
