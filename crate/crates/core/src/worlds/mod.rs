//! Synthetic sequential worlds with exact conditional laws.

mod law;
mod oracle;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use law::{MixtureLaw, Posterior};
pub use oracle::{
    oracle_cond_expectation, oracle_cond_score, oracle_cond_velocity, oracle_flow_map, AnalyticOracle,
    MIXTURE_FLOW_STEPS,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldKind {
    /// x_0 ~ N(0, s0^2 I); x_i = a x_{i-1} + s z_i.
    GaussianAr { a: f64, s: f64, s0: f64 },
    /// x_i = a x_{i-1} + b_i mu e_0 + s z_i with b_i = +-1 equally likely and x_{-1} = 0.
    BranchingGmm { a: f64, mu: f64, s: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub frame_dim: usize,
    pub seq_len: usize,
}

impl WorldSpec {
    pub fn gaussian_ar_default() -> Self {
        Self {
            kind: WorldKind::GaussianAr { a: 0.9, s: 0.3, s0: 1.0 },
            frame_dim: 2,
            seq_len: 8,
        }
    }

    pub fn branching_gmm_default() -> Self {
        Self {
            kind: WorldKind::BranchingGmm { a: 0.8, mu: 1.0, s: 0.15 },
            frame_dim: 2,
            seq_len: 8,
        }
    }

    /// Standard-normal single frame (N = 1, s0 = 1).
    pub fn standard_normal(frame_dim: usize) -> Self {
        Self {
            kind: WorldKind::GaussianAr { a: 0.0, s: 1.0, s0: 1.0 },
            frame_dim,
            seq_len: 1,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            WorldKind::GaussianAr { .. } => "gaussian_ar",
            WorldKind::BranchingGmm { .. } => "branching_gmm",
        }
    }

    pub fn transition(&self) -> f64 {
        match self.kind {
            WorldKind::GaussianAr { a, .. } | WorldKind::BranchingGmm { a, .. } => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument("frame_dim and seq_len must be positive".into()));
        }
        let bad = |what: String| Err(Error::InvalidArgument(what));
        match self.kind {
            WorldKind::GaussianAr { a, s, s0 } => {
                if !(a.abs() < 1.0) {
                    return bad(format!("transition |a| must be < 1, got {a}"));
                }
                if !(s >= 0.0 && s0 >= 0.0) {
                    return bad(format!("std devs must be non-negative, got s={s}, s0={s0}"));
                }
            }
            WorldKind::BranchingGmm { a, mu, s } => {
                if !(a.abs() < 1.0) {
                    return bad(format!("transition |a| must be < 1, got {a}"));
                }
                if !(mu > 0.0 && s > 0.0) {
                    return bad(format!("mu and s must be positive, got mu={mu}, s={s}"));
                }
            }
        }
        Ok(())
    }

    /// Stationary per-coordinate std of the Gaussian AR chain, s / sqrt(1 - a^2).
    pub fn stationary_std(&self) -> Option<f64> {
        match self.kind {
            WorldKind::GaussianAr { a, s, .. } => Some(s / (1.0 - a * a).sqrt()),
            WorldKind::BranchingGmm { .. } => None,
        }
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let d = self.frame_dim;
        let mut prev = vec![0.0; d];
        for i in 0..self.seq_len {
            let frame = &mut out[i * d..(i + 1) * d];
            match self.kind {
                WorldKind::GaussianAr { a, s, s0 } => {
                    let (scale, std) = if i == 0 { (0.0, s0) } else { (a, s) };
                    for c in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        frame[c] = scale * prev[c] + std * z;
                    }
                }
                WorldKind::BranchingGmm { a, mu, s } => {
                    let b = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    for c in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        let offset = if c == 0 { b * mu } else { 0.0 };
                        frame[c] = a * prev[c] + offset + s * z;
                    }
                }
            }
            prev.copy_from_slice(frame);
        }
    }
}

/// How frames group into autoregressive units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitLayout {
    pub frame_dim: usize,
    pub seq_len: usize,
    pub chunk: usize,
}

impl UnitLayout {
    pub fn new(world: &WorldSpec, chunk: usize) -> Result<Self> {
        if chunk == 0 || world.seq_len % chunk != 0 {
            return Err(Error::InvalidArgument(format!(
                "chunk size {chunk} must divide sequence length {}",
                world.seq_len
            )));
        }
        Ok(Self {
            frame_dim: world.frame_dim,
            seq_len: world.seq_len,
            chunk,
        })
    }

    pub fn units(&self) -> usize {
        self.seq_len / self.chunk
    }

    pub fn unit_dim(&self) -> usize {
        self.chunk * self.frame_dim
    }

    pub fn seq_dim(&self) -> usize {
        self.seq_len * self.frame_dim
    }
}

/// Seed of sequence `index` within a batch drawn with `seed`.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub frame_dim: usize,
    /// B x N x d, row-major.
    pub frames: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SequenceBatch {
    pub fn new(batch: usize, seq_len: usize, frame_dim: usize, frames: Vec<f64>) -> Result<Self> {
        if frames.len() != batch * seq_len * frame_dim {
            return Err(Error::Shape {
                op: "sequence batch",
                detail: format!("{} values for {batch} x {seq_len} x {frame_dim}", frames.len()),
            });
        }
        crate::error::check_finite("sequence batch", &frames)?;
        Ok(Self {
            batch,
            seq_len,
            frame_dim,
            frames,
            seeds: Vec::new(),
        })
    }

    pub fn sequence(&self, b: usize) -> &[f64] {
        let n = self.seq_len * self.frame_dim;
        &self.frames[b * n..(b + 1) * n]
    }

    pub fn frame(&self, b: usize, i: usize) -> &[f64] {
        let d = self.frame_dim;
        &self.sequence(b)[i * d..(i + 1) * d]
    }

    /// `seq_id,frame_idx,dim_0..dim_{d-1}` with one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq_id,frame_idx");
        for c in 0..self.frame_dim {
            let _ = write!(out, ",dim_{c}");
        }
        out.push('\n');
        for b in 0..self.batch {
            for i in 0..self.seq_len {
                let _ = write!(out, "{b},{i}");
                for v in self.frame(b, i) {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "seq_id" || cols[1] != "frame_idx" {
            return Err(Error::Format(format!("unexpected CSV header `{header}`")));
        }
        let d = cols.len() - 2;
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != d + 2 {
                return Err(Error::Format(format!("line {}: expected {} fields", ln + 2, d + 2)));
            }
            let parse_err = |e: &dyn std::fmt::Display| Error::Format(format!("line {}: {e}", ln + 2));
            let b = f[0].parse().map_err(|e| parse_err(&e))?;
            let i = f[1].parse().map_err(|e| parse_err(&e))?;
            let v = f[2..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| parse_err(&e)))
                .collect::<Result<Vec<_>>>()?;
            rows.push((b, i, v));
        }
        let batch = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let seq_len = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != batch * seq_len {
            return Err(Error::Format("CSV does not describe a full batch".into()));
        }
        let mut frames = vec![f64::NAN; batch * seq_len * d];
        for (b, i, v) in rows {
            frames[(b * seq_len + i) * d..(b * seq_len + i + 1) * d].copy_from_slice(&v);
        }
        Self::new(batch, seq_len, d, frames)
    }
}

/// Draws `batch` i.i.d. sequences; sequence b uses seed `sequence_seed(seed, b)`.
pub fn sample_sequences(spec: &WorldSpec, batch: usize, seed: u64) -> Result<SequenceBatch> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let n = spec.seq_len * spec.frame_dim;
    let mut frames = vec![0.0; batch * n];
    let mut seeds = Vec::with_capacity(batch);
    for b in 0..batch {
        let s = sequence_seed(seed, b as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        spec.sample_one(&mut rng, &mut frames[b * n..(b + 1) * n]);
        seeds.push(s);
    }
    let mut out = SequenceBatch::new(batch, spec.seq_len, spec.frame_dim, frames)?;
    out.seeds = seeds;
    Ok(out)
}

/// Draws sequences from a running generator (training loops).
pub fn sample_sequences_with<R: Rng>(spec: &WorldSpec, batch: usize, rng: &mut R) -> Result<SequenceBatch> {
    sample_sequences(spec, batch, rng.random())
}
