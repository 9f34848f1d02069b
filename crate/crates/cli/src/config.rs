//! Experiment configuration: flat `key = value` text with optional `[stageN]` sections.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use ardistill::diffusion::{StepSchedule, TimeGrid};
use ardistill::distill::{DmdConfig, DmdNormalizer, StageConfig};
use ardistill::models::{GradDepth, RolloutConfig};
use ardistill::worlds::{WorldKind, WorldSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{key}`; valid keys: {}", valid_keys().join(", "))]
    UnknownKey { key: String },
    #[error("key `{key}` expects {expected}, got `{value}`")]
    Type { key: String, expected: &'static str, value: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Stage-2 initialization variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Variant {
    CausalCd,
    CausalOde,
    CausalDmd,
    BidirOde,
    None,
}

impl Stage2Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::CausalCd => "causal_cd",
            Self::CausalOde => "causal_ode",
            Self::CausalDmd => "causal_dmd",
            Self::BidirOde => "bidir_ode",
            Self::None => "none",
        }
    }
}

/// Source of teacher velocities in Stage 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSource {
    /// The Stage-1 networks.
    Trained,
    /// The closed-form conditional (or joint) oracle.
    Oracle,
}

/// Real score of Stage 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage3Real {
    /// Per-unit oracle score given the generated prefix; causal fake score.
    Conditional,
    /// Oracle score of the whole sequence; bidirectional fake score.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

/// Every experiment setting. See [`ExperimentConfig::default`] for the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// gaussian_ar | branching_gmm
    pub world: String,
    pub frame_dim: usize,
    pub seq_len: usize,
    /// World parameters; unset values take the world's defaults.
    pub a: Option<f64>,
    pub s: Option<f64>,
    pub s0: Option<f64>,
    pub mu: Option<f64>,
    /// Frames per autoregressive unit.
    pub chunk: usize,
    /// one_step | two_step | four_step
    pub schedule: String,
    /// Four-step first unit.
    pub asd: bool,
    pub stage2: Stage2Variant,
    pub teacher: TeacherSource,
    pub real3: Stage3Real,
    pub seeds: Vec<u64>,
    /// Not part of the hash.
    pub out: PathBuf,
    pub grid_k: usize,
    pub ema_beta: f64,
    pub grad_depth: GradDepth,
    pub width: usize,
    pub depth: usize,
    pub context: usize,
    pub stage1: StageBudget,
    pub stage2_budget: StageBudget,
    pub stage3: StageBudget,
    /// Pair records for the ODE variants; 0 derives it from `pair_reuse`.
    pub num_pairs: usize,
    /// Stage-2 supervision events served by each stored trajectory (1 = fresh pairs).
    pub pair_reuse: usize,
    pub fake_lr: f64,
    pub fake_ratio: usize,
    pub normalizer: DmdNormalizer,
    pub eval_rollouts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: "gaussian_ar".into(),
            frame_dim: 2,
            seq_len: 8,
            a: None,
            s: None,
            s0: None,
            mu: None,
            chunk: 1,
            schedule: "two_step".into(),
            asd: true,
            stage2: Stage2Variant::CausalCd,
            teacher: TeacherSource::Trained,
            real3: Stage3Real::Conditional,
            seeds: vec![0],
            out: PathBuf::from("runs/default"),
            grid_k: 48,
            ema_beta: 0.99,
            grad_depth: GradDepth::PerUnit,
            width: 64,
            depth: 3,
            context: 1,
            stage1: StageBudget { steps: 20_000, batch: 64, lr: 1e-3 },
            stage2_budget: StageBudget { steps: 5_000, batch: 64, lr: 3e-4 },
            stage3: StageBudget { steps: 1_000, batch: 64, lr: 1e-4 },
            num_pairs: 0,
            pair_reuse: 12,
            fake_lr: 1e-3,
            fake_ratio: 5,
            normalizer: DmdNormalizer::Gap,
            eval_rollouts: 1000,
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("world", "gaussian_ar | branching_gmm (default gaussian_ar)"),
    ("frame_dim", "frame dimension (2)"),
    ("seq_len", "frames per sequence (8)"),
    ("a", "AR transition (0.9 gaussian_ar, 0.8 branching_gmm)"),
    ("s", "innovation std (0.3 / 0.15)"),
    ("s0", "first-frame std, gaussian_ar (1.0)"),
    ("mu", "branch offset, branching_gmm (1.0)"),
    ("chunk", "frames per unit (1)"),
    ("schedule", "one_step | two_step | four_step (two_step)"),
    ("asd", "four-step first unit (true)"),
    ("stage2", "causal_cd | causal_ode | causal_dmd | bidir_ode | none (causal_cd)"),
    ("teacher", "trained | oracle (trained)"),
    ("real3", "conditional | joint (conditional)"),
    ("seed", "single seed (0)"),
    ("seeds", "comma-separated seeds (0)"),
    ("out", "output directory (runs/default)"),
    ("grid_k", "time grid size K (48)"),
    ("ema_beta", "CD target EMA decay (0.99)"),
    ("grad_depth", "per_unit | last_unit | full (per_unit)"),
    ("width", "hidden width (64)"),
    ("depth", "hidden layers (3)"),
    ("context", "context units k (1)"),
    ("batch", "batch of every stage (64)"),
    ("steps1", "stage-1 steps (20000)"),
    ("batch1", "stage-1 batch (64)"),
    ("lr1", "stage-1 learning rate (1e-3)"),
    ("steps2", "stage-2 steps (5000)"),
    ("batch2", "stage-2 batch (64)"),
    ("lr2", "stage-2 learning rate (3e-4)"),
    ("steps3", "stage-3 steps (1000)"),
    ("batch3", "stage-3 batch (64)"),
    ("lr3", "stage-3 learning rate (1e-4)"),
    ("num_pairs", "ODE pair records, 0 = derived from pair_reuse (0)"),
    ("pair_reuse", "supervision events per stored trajectory, 1 = fresh (12)"),
    ("fake_lr", "fake-score learning rate (1e-3)"),
    ("fake_ratio", "fake-score updates per generator update (5)"),
    ("normalizer", "gap | denoiser | none (gap)"),
    ("eval_rollouts", "rollouts for evaluation (1000)"),
];

/// Section-local names: `[stage2] steps = 5000` is `steps2 = 5000`.
const SECTION_KEYS: &[&str] = &["steps", "batch", "lr"];

pub fn valid_keys() -> Vec<String> {
    let mut keys: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
    for n in 1..=3 {
        keys.extend(SECTION_KEYS.iter().map(|k| format!("stage{n}.{k}")));
    }
    keys
}

/// `key  description (default)` lines for help output.
pub fn key_docs() -> String {
    let mut out = String::new();
    for (k, d) in KEYS {
        let _ = writeln!(out, "  {k:<14} {d}");
    }
    out
}

fn type_err(key: &str, expected: &'static str, value: &str) -> ConfigError {
    ConfigError::Type {
        key: key.into(),
        expected,
        value: value.into(),
    }
}

fn uint(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| type_err(key, "an unsigned integer", v))
}

fn float(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| type_err(key, "a finite number", v))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(type_err(key, "a boolean", v)),
    }
}

fn choice<T: for<'de> Deserialize<'de>>(key: &str, v: &str, expected: &'static str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(v.to_string())).map_err(|_| type_err(key, expected, v))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let key = match key.split_once('.') {
            Some((sec, k)) if SECTION_KEYS.contains(&k) && matches!(sec, "stage1" | "stage2" | "stage3") => {
                format!("{k}{}", &sec[5..])
            }
            _ => key.to_string(),
        };
        let k = key.as_str();
        match k {
            "world" => {
                if !matches!(v, "gaussian_ar" | "branching_gmm") {
                    return Err(type_err(k, "gaussian_ar or branching_gmm", v));
                }
                self.world = v.into();
            }
            "frame_dim" => self.frame_dim = uint(k, v)?,
            "seq_len" => self.seq_len = uint(k, v)?,
            "a" => self.a = Some(float(k, v)?),
            "s" => self.s = Some(float(k, v)?),
            "s0" => self.s0 = Some(float(k, v)?),
            "mu" => self.mu = Some(float(k, v)?),
            "chunk" => self.chunk = uint(k, v)?,
            "schedule" => {
                let name = match v {
                    "1" | "one_step" => "one_step",
                    "2" | "two_step" => "two_step",
                    "4" | "four_step" => "four_step",
                    _ => return Err(type_err(k, "one_step, two_step or four_step", v)),
                };
                self.schedule = name.into();
            }
            "asd" => self.asd = boolean(k, v)?,
            "stage2" => self.stage2 = choice(k, v, "causal_cd, causal_ode, causal_dmd, bidir_ode or none")?,
            "teacher" => self.teacher = choice(k, v, "trained or oracle")?,
            "real3" => self.real3 = choice(k, v, "conditional or joint")?,
            "seed" => self.seeds = vec![v.parse().map_err(|_| type_err(k, "an unsigned integer", v))?],
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| s.trim().parse::<u64>().map_err(|_| type_err(k, "comma-separated unsigned integers", v)))
                    .collect::<Result<_, _>>()?;
            }
            "out" => self.out = PathBuf::from(v),
            "grid_k" => self.grid_k = uint(k, v)?,
            "ema_beta" => self.ema_beta = float(k, v)?,
            "grad_depth" => self.grad_depth = choice(k, v, "per_unit, last_unit or full")?,
            "width" => self.width = uint(k, v)?,
            "depth" => self.depth = uint(k, v)?,
            "context" => self.context = uint(k, v)?,
            "batch" => {
                let b = uint(k, v)?;
                self.stage1.batch = b;
                self.stage2_budget.batch = b;
                self.stage3.batch = b;
            }
            "steps1" => self.stage1.steps = uint(k, v)?,
            "batch1" => self.stage1.batch = uint(k, v)?,
            "lr1" => self.stage1.lr = float(k, v)?,
            "steps2" => self.stage2_budget.steps = uint(k, v)?,
            "batch2" => self.stage2_budget.batch = uint(k, v)?,
            "lr2" => self.stage2_budget.lr = float(k, v)?,
            "steps3" => self.stage3.steps = uint(k, v)?,
            "batch3" => self.stage3.batch = uint(k, v)?,
            "lr3" => self.stage3.lr = float(k, v)?,
            "num_pairs" => self.num_pairs = uint(k, v)?,
            "pair_reuse" => self.pair_reuse = uint(k, v)?,
            "fake_lr" => self.fake_lr = float(k, v)?,
            "fake_ratio" => self.fake_ratio = uint(k, v)?,
            "normalizer" => self.normalizer = choice(k, v, "gap, denoiser or none")?,
            "eval_rollouts" => self.eval_rollouts = uint(k, v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.clone() }),
        }
        Ok(())
    }

    /// Applies a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("unterminated section header `{line}`"),
                })?;
                let name = name.trim();
                if !matches!(name, "stage1" | "stage2" | "stage3") {
                    return Err(ConfigError::Syntax {
                        line: n + 1,
                        msg: format!("unknown section `{name}` (expected stage1, stage2 or stage3)"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            match &section {
                Some(sec) if SECTION_KEYS.contains(&k) => self.set(&format!("{sec}.{k}"), v)?,
                _ => self.set(k, v)?,
            }
        }
        Ok(())
    }

    pub fn world_spec(&self) -> WorldSpec {
        let kind = if self.world == "branching_gmm" {
            WorldKind::BranchingGmm {
                a: self.a.unwrap_or(0.8),
                mu: self.mu.unwrap_or(1.0),
                s: self.s.unwrap_or(0.15),
            }
        } else {
            WorldKind::GaussianAr {
                a: self.a.unwrap_or(0.9),
                s: self.s.unwrap_or(0.3),
                s0: self.s0.unwrap_or(1.0),
            }
        };
        WorldSpec {
            kind,
            frame_dim: self.frame_dim,
            seq_len: self.seq_len,
        }
    }

    pub fn units(&self) -> usize {
        self.seq_len / self.chunk.max(1)
    }

    pub fn rollout(&self) -> RolloutConfig {
        let schedule = StepSchedule::by_name(&self.schedule).expect("validated schedule name");
        let mut r = RolloutConfig::new(schedule, self.chunk, self.units()).with_asd(self.asd);
        r.grad_depth = self.grad_depth;
        r
    }

    fn stage_config(&self, b: &StageBudget, seed: u64) -> StageConfig {
        let mut c = StageConfig::new(b.steps, b.batch, b.lr, seed).with_grid(TimeGrid::new(self.grid_k).expect("validated K"));
        c.chunk = self.chunk;
        c
    }

    pub fn stage1_config(&self, seed: u64) -> StageConfig {
        self.stage_config(&self.stage1, seed.wrapping_mul(3).wrapping_add(1))
    }

    pub fn stage2_config(&self, seed: u64) -> StageConfig {
        self.stage_config(&self.stage2_budget, seed.wrapping_mul(3).wrapping_add(2))
    }

    pub fn stage3_config(&self, seed: u64) -> StageConfig {
        self.stage_config(&self.stage3, seed.wrapping_mul(3).wrapping_add(3))
    }

    pub fn dmd(&self) -> DmdConfig {
        DmdConfig {
            fake_lr: self.fake_lr,
            fake_ratio: self.fake_ratio,
            normalizer: self.normalizer,
        }
    }

    /// Pair records the ODE variants generate: explicit, or one K-record
    /// trajectory per `pair_reuse` Stage-2 supervision events.
    pub fn pair_records(&self) -> usize {
        if self.num_pairs > 0 {
            return self.num_pairs;
        }
        let per_traj = self.grid_k * if self.stage2 == Stage2Variant::BidirOde { self.units() } else { 1 };
        (self.stage2_budget.steps * self.stage2_budget.batch).div_ceil(self.pair_reuse.max(1)) * per_traj
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.world_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.chunk == 0 || self.seq_len % self.chunk != 0 {
            return bad(format!("chunk {} must divide seq_len {}", self.chunk, self.seq_len));
        }
        if self.grid_k == 0 {
            return bad("grid_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta must lie in [0, 1), got {}", self.ema_beta));
        }
        if self.width == 0 || self.depth == 0 || self.context == 0 {
            return bad("width, depth and context must be positive".into());
        }
        if self.pair_reuse == 0 {
            return bad("pair_reuse must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        for (n, b) in [(1, &self.stage1), (2, &self.stage2_budget), (3, &self.stage3)] {
            if b.steps > 0 && (b.batch == 0 || !(b.lr > 0.0)) {
                return bad(format!("stage {n} needs batch > 0 and lr > 0"));
            }
        }
        if self.eval_rollouts < ardistill::metrics::MIN_W2_SAMPLES {
            return bad(format!("eval_rollouts must be at least {}", ardistill::metrics::MIN_W2_SAMPLES));
        }
        Ok(())
    }

    /// Sorted `key = value` lines of every semantic setting (the output directory excluded).
    pub fn canonical(&self) -> String {
        let w = self.world_spec();
        let mut lines = vec![
            format!("world = {}", self.world),
            format!("world_params = {}", serde_json::to_string(&w.kind).expect("serializable")),
            format!("frame_dim = {}", self.frame_dim),
            format!("seq_len = {}", self.seq_len),
            format!("chunk = {}", self.chunk),
            format!("schedule = {}", self.schedule),
            format!("asd = {}", self.asd),
            format!("stage2 = {}", self.stage2.name()),
            format!("teacher = {}", json_name(&self.teacher)),
            format!("real3 = {}", json_name(&self.real3)),
            format!("seeds = {}", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
            format!("grid_k = {}", self.grid_k),
            format!("ema_beta = {:?}", self.ema_beta),
            format!("grad_depth = {}", json_name(&self.grad_depth)),
            format!("width = {}", self.width),
            format!("depth = {}", self.depth),
            format!("context = {}", self.context),
            format!("num_pairs = {}", self.pair_records()),
            format!("pair_reuse = {}", self.pair_reuse),
            format!("fake_lr = {:?}", self.fake_lr),
            format!("fake_ratio = {}", self.fake_ratio),
            format!("normalizer = {}", json_name(&self.normalizer)),
            format!("eval_rollouts = {}", self.eval_rollouts),
        ];
        for (n, b) in [(1, &self.stage1), (2, &self.stage2_budget), (3, &self.stage3)] {
            lines.push(format!("steps{n} = {}", b.steps));
            lines.push(format!("batch{n} = {}", b.batch));
            lines.push(format!("lr{n} = {:?}", b.lr));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// SHA-256 of [`ExperimentConfig::canonical`], hex.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.canonical().as_bytes()))
    }
}

fn json_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Defaults, then the file at `path` (if any), then `overrides` (`key=value`).
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        cfg.apply_text(&text)?;
    }
    for o in overrides {
        for item in o.split_whitespace() {
            let (k, v) = item.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                msg: format!("override `{item}` is not key=value"),
            })?;
            cfg.set(k.trim(), v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
