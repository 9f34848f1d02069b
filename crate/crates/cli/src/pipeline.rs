//! Stage execution, checkpoint/report persistence and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ardistill::distill::{
    generate_ode_pairs, stage1_train, stage1_train_bidir, stage2_bidir_ode, stage2_causal_cd, stage2_causal_dmd,
    stage2_causal_ode, stage3_asymmetric_dmd, RealScore, StageReport,
};
use ardistill::metrics::{exposure_bias_curve, MetricReport};
use ardistill::models::{BidirField, JointOracle, NetConfig, NetMode, OracleField, SequenceField, VelocityField, VelocityNet};
use ardistill::tensor::{Checkpoint, EmaParamSet};
use ardistill::worlds::{sample_sequences, AnalyticOracle};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Stage2Variant, Stage3Real, TeacherSource};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Missing(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: ardistill::Error,
    },
    /// A pipeline run that stopped at a stage; the manifest has the details.
    #[error("run failed at {stage}: {diagnostic}")]
    Failed { stage: String, diagnostic: String },
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// 1 for validation problems, 2 for failures while running a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Missing(_) => 1,
            Self::Stage { .. } | Self::Failed { .. } | Self::Io { .. } | Self::Json(_) => 2,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

fn stage_err(stage: &str) -> impl FnOnce(ardistill::Error) -> HarnessError + '_ {
    move |source| HarnessError::Stage {
        stage: stage.to_string(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> HarnessResult<()> {
    std::fs::write(path, bytes).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> HarnessResult<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> HarnessResult<()> {
    std::fs::create_dir_all(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Files one stage left behind, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageArtifact {
    pub stage: String,
    pub checkpoint: Option<String>,
    pub report: String,
    /// Extra files such as pair stores or a bidirectional teacher.
    #[serde(default)]
    pub extra: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { stage: String, diagnostic: String },
}

/// One seed's run, paths relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: String,
    pub stages: Vec<StageArtifact>,
    pub metrics_csv: Option<String>,
    pub metrics_json: Option<String>,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub config_file: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    /// Seed-averaged metrics when there is more than one seed.
    pub metrics_csv: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn failed(&self) -> Option<&RunStatus> {
        self.runs.iter().map(|r| &r.status).find(|s| matches!(s, RunStatus::Failed { .. }))
    }

    pub fn root(&self) -> &Path {
        &self.config.out
    }

    pub fn load(dir: impl AsRef<Path>) -> HarnessResult<Self> {
        let path = dir.as_ref().join("manifest.json");
        let mut m: RunManifest = serde_json::from_str(&read(&path)?)?;
        m.config.out = dir.as_ref().to_path_buf();
        Ok(m)
    }

    /// Every file the manifest points at, relative to its directory.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec!["manifest.json".to_string(), self.config_file.clone()];
        out.extend(self.metrics_csv.clone());
        for r in &self.runs {
            let join = |f: &str| if r.dir == "." { f.to_string() } else { format!("{}/{f}", r.dir) };
            for s in &r.stages {
                out.extend(s.checkpoint.iter().map(|c| join(c)));
                out.push(join(&s.report));
                out.extend(s.extra.iter().map(|e| join(e)));
            }
            out.extend(r.metrics_csv.iter().map(|c| join(c)));
            out.extend(r.metrics_json.iter().map(|c| join(c)));
        }
        out
    }
}

fn version() -> String {
    format!("ardistill-{}", env!("CARGO_PKG_VERSION"))
}

/// Directory of one seed inside the output directory.
pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> (PathBuf, String) {
    if cfg.seeds.len() <= 1 {
        (cfg.out.clone(), ".".into())
    } else {
        let rel = format!("seed-{seed}");
        (cfg.out.join(&rel), rel)
    }
}

fn net_config(cfg: &ExperimentConfig, mode: NetMode) -> NetConfig {
    let ud = cfg.chunk * cfg.frame_dim;
    NetConfig::new(ud, cfg.units(), mode).with_size(cfg.width, cfg.depth).with_context(cfg.context)
}

fn save_net(net: &VelocityNet, cfg: &ExperimentConfig, path: &Path) -> HarnessResult<()> {
    let mut ck = net.to_checkpoint().map_err(stage_err("checkpoint"))?;
    ck.meta.insert("config_hash".into(), cfg.hash());
    ck.save(path).map_err(stage_err("checkpoint"))
}

fn load_net(path: &Path) -> HarnessResult<VelocityNet> {
    if !path.exists() {
        return Err(HarnessError::Missing(format!("missing checkpoint {}; run the previous stage first", path.display())));
    }
    let ck = Checkpoint::load(path).map_err(stage_err("checkpoint"))?;
    VelocityNet::from_checkpoint(&ck).map_err(stage_err("checkpoint"))
}

fn save_report(report: &StageReport, cfg: &ExperimentConfig, path: &Path) -> HarnessResult<()> {
    let mut v = serde_json::to_value(report)?;
    v["config_hash"] = serde_json::Value::String(cfg.hash());
    write(path, serde_json::to_string_pretty(&v)?)
}

fn oracle(cfg: &ExperimentConfig) -> HarnessResult<AnalyticOracle> {
    AnalyticOracle::for_units(cfg.world_spec(), cfg.chunk).map_err(stage_err("oracle"))
}

fn oracle_field(cfg: &ExperimentConfig) -> HarnessResult<OracleField> {
    OracleField::new(oracle(cfg)?, cfg.chunk, cfg.context).map_err(stage_err("oracle"))
}

fn needs_bidir(cfg: &ExperimentConfig) -> bool {
    (cfg.stage2 == Stage2Variant::BidirOde && cfg.teacher == TeacherSource::Trained) || cfg.real3 == Stage3Real::Joint
}

/// Stage 1: trains the causal teacher (and the bidirectional one when a later
/// stage needs it).
pub fn run_stage1(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> HarnessResult<StageArtifact> {
    create_dir(dir)?;
    let world = cfg.world_spec();
    let mut teacher = VelocityNet::new(net_config(cfg, NetMode::Causal), seed).map_err(stage_err("stage1"))?;
    let mut report = stage1_train(&mut teacher, &world, &cfg.stage1_config(seed)).map_err(stage_err("stage1"))?;
    save_net(&teacher, cfg, &dir.join("stage1.ckpt"))?;
    let mut extra = Vec::new();
    if needs_bidir(cfg) {
        let mut bidir = VelocityNet::new(net_config(cfg, NetMode::Bidirectional), seed ^ 0xb1d1).map_err(stage_err("stage1"))?;
        let r = stage1_train_bidir(&mut bidir, &world, &cfg.stage1_config(seed ^ 0xb1d1)).map_err(stage_err("stage1"))?;
        report = StageReport::combine("stage1", &[&report, &r]);
        save_net(&bidir, cfg, &dir.join("stage1_bidir.ckpt"))?;
        extra.push("stage1_bidir.ckpt".into());
    }
    save_report(&report, cfg, &dir.join("stage1.report.json"))?;
    Ok(StageArtifact {
        stage: "stage1".into(),
        checkpoint: Some("stage1.ckpt".into()),
        report: "stage1.report.json".into(),
        extra,
    })
}

/// Stage 2: initializes the few-step student with the configured variant.
pub fn run_stage2(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> HarnessResult<StageArtifact> {
    let world = cfg.world_spec();
    let teacher_net = load_net(&dir.join("stage1.ckpt"))?;
    let field = oracle_field(cfg)?;
    let teacher: &dyn VelocityField = match cfg.teacher {
        TeacherSource::Trained => &teacher_net,
        TeacherSource::Oracle => &field,
    };
    let sc = cfg.stage2_config(seed);
    let name = format!("stage2_{}", cfg.stage2.name());
    let err = stage_err(&name);
    let mut student = teacher_net.clone();
    let mut extra = Vec::new();
    let report = match cfg.stage2 {
        Stage2Variant::CausalCd => {
            let mut ema = EmaParamSet::new(cfg.ema_beta, student.params()).map_err(stage_err(&name))?;
            stage2_causal_cd(&mut student, teacher, &mut ema, &world, &sc).map_err(err)?
        }
        Stage2Variant::CausalOde => {
            let id = match cfg.teacher {
                TeacherSource::Trained => "stage1.ckpt",
                TeacherSource::Oracle => "oracle",
            };
            let (store, gen) = generate_ode_pairs(teacher, &world, cfg.chunk, cfg.pair_records(), sc.grid, id, sc.seed ^ 0x9a1)
                .map_err(stage_err(&name))?;
            store.save(dir.join("pairs.bin")).map_err(stage_err(&name))?;
            extra.push("pairs.bin".into());
            let train = stage2_causal_ode(&mut student, &store, &sc).map_err(err)?;
            StageReport::combine(&name, &[&gen, &train])
        }
        Stage2Variant::CausalDmd => {
            let mut fake = teacher_net.clone();
            stage2_causal_dmd(&mut student, teacher, &mut fake, &world, &sc, &cfg.dmd()).map_err(err)?
        }
        Stage2Variant::BidirOde => {
            let joint;
            let bidir_net;
            let bidir_field;
            let seq: &dyn SequenceField = match cfg.teacher {
                TeacherSource::Oracle => {
                    joint = JointOracle::new(&oracle(cfg)?).map_err(stage_err(&name))?;
                    &joint
                }
                TeacherSource::Trained => {
                    bidir_net = load_net(&dir.join("stage1_bidir.ckpt"))?;
                    bidir_field = BidirField::new(&bidir_net, cfg.units()).map_err(stage_err(&name))?;
                    &bidir_field
                }
            };
            let (mut r, store) = stage2_bidir_ode(&mut student, seq, &world, cfg.pair_records(), &sc).map_err(err)?;
            store.save(dir.join("pairs.bin")).map_err(stage_err(&name))?;
            extra.push("pairs.bin".into());
            r.stage = name.clone();
            r
        }
        Stage2Variant::None => StageReport::new(&name),
    };
    save_net(&student, cfg, &dir.join("stage2.ckpt"))?;
    save_report(&report, cfg, &dir.join("stage2.report.json"))?;
    Ok(StageArtifact {
        stage: "stage2".into(),
        checkpoint: Some("stage2.ckpt".into()),
        report: "stage2.report.json".into(),
        extra,
    })
}

/// Stage 3: asymmetric DMD on self-rollouts with the oracle as real score.
/// The fake score restarts from the Stage-1 teacher.
pub fn run_stage3(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> HarnessResult<StageArtifact> {
    let world = cfg.world_spec();
    let mut student = load_net(&dir.join("stage2.ckpt"))?;
    let sc = cfg.stage3_config(seed);
    let rollout = cfg.rollout();
    let report = match cfg.real3 {
        Stage3Real::Conditional => {
            let mut fake = load_net(&dir.join("stage1.ckpt"))?;
            let real = oracle_field(cfg)?;
            stage3_asymmetric_dmd(&mut student, RealScore::Conditional(&real), &mut fake, &world, &rollout, &sc, &cfg.dmd())
        }
        Stage3Real::Joint => {
            let mut fake = load_net(&dir.join("stage1_bidir.ckpt"))?;
            let real = JointOracle::new(&oracle(cfg)?).map_err(stage_err("stage3"))?;
            stage3_asymmetric_dmd(&mut student, RealScore::Joint(&real), &mut fake, &world, &rollout, &sc, &cfg.dmd())
        }
    }
    .map_err(stage_err("stage3"))?;
    save_net(&student, cfg, &dir.join("stage3.ckpt"))?;
    save_report(&report, cfg, &dir.join("stage3.report.json"))?;
    Ok(StageArtifact {
        stage: "stage3".into(),
        checkpoint: Some("stage3.ckpt".into()),
        report: "stage3.report.json".into(),
        extra: Vec::new(),
    })
}

/// Latest student checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    ["stage3.ckpt", "stage2.ckpt", "stage1.ckpt"].iter().map(|f| dir.join(f)).find(|p| p.exists())
}

/// Self-rollout metrics of the latest checkpoint; writes metrics.csv and metrics.json.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> HarnessResult<MetricReport> {
    let path = latest_checkpoint(dir).ok_or_else(|| HarnessError::Missing(format!("no checkpoint in {}", dir.display())))?;
    let student = load_net(&path)?;
    let report = exposure_bias_curve(&student, &cfg.world_spec(), &cfg.rollout(), cfg.eval_rollouts, seed ^ 0xe7a1)
        .map_err(stage_err("eval"))?;
    write(&dir.join("metrics.csv"), report.to_csv())?;
    write(&dir.join("metrics.json"), report.to_json().map_err(stage_err("eval"))?)?;
    Ok(report)
}

/// Ground-truth sequences for inspection, written as CSV.
pub fn run_gen_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> HarnessResult<PathBuf> {
    create_dir(dir)?;
    let seqs = sample_sequences(&cfg.world_spec(), cfg.eval_rollouts, seed).map_err(stage_err("gen-data"))?;
    let path = dir.join("data.csv");
    write(&path, seqs.to_csv())?;
    Ok(path)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> HarnessResult<SeedRun> {
    let (dir, rel) = seed_dir(cfg, seed);
    create_dir(&dir)?;
    let mut run = SeedRun {
        seed,
        dir: rel,
        stages: Vec::new(),
        metrics_csv: None,
        metrics_json: None,
        status: RunStatus::Completed,
    };
    type StageFn = fn(&ExperimentConfig, u64, &Path) -> HarnessResult<StageArtifact>;
    let stages: [(&str, StageFn); 3] = [("stage1", run_stage1), ("stage2", run_stage2), ("stage3", run_stage3)];
    for (name, f) in stages {
        match f(cfg, seed, &dir) {
            Ok(a) => run.stages.push(a),
            Err(e @ (HarnessError::Stage { .. } | HarnessError::Missing(_))) => {
                run.status = RunStatus::Failed {
                    stage: name.into(),
                    diagnostic: e.to_string(),
                };
                return Ok(run);
            }
            Err(e) => return Err(e),
        }
    }
    match run_eval(cfg, seed, &dir) {
        Ok(_) => {
            run.metrics_csv = Some("metrics.csv".into());
            run.metrics_json = Some("metrics.json".into());
        }
        Err(e @ HarnessError::Stage { .. }) => {
            run.status = RunStatus::Failed {
                stage: "eval".into(),
                diagnostic: e.to_string(),
            }
        }
        Err(e) => return Err(e),
    }
    Ok(run)
}

/// Averages per-seed metric reports: values are seed means and standard
/// errors are across seeds.
pub fn average_reports(reports: &[MetricReport]) -> MetricReport {
    let mut out = reports[0].clone();
    let n = reports.len() as f64;
    for (si, series) in out.series.iter_mut().enumerate() {
        for i in 0..series.values.len() {
            let vals: Vec<f64> = reports.iter().map(|r| r.series[si].values[i]).collect();
            let m = vals.iter().sum::<f64>() / n;
            series.values[i] = m;
            series.se[i] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        }
    }
    for (key, stat) in out.summary.iter_mut() {
        let vals: Vec<f64> = reports.iter().map(|r| r.summary[key].value).collect();
        let m = vals.iter().sum::<f64>() / n;
        stat.value = m;
        stat.se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    }
    out
}

/// Stage 1 -> Stage 2 -> Stage 3 -> evaluation for every seed, with a manifest
/// in the output directory. Stage failures are recorded in the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig) -> HarnessResult<RunManifest> {
    cfg.validate()?;
    let started = now();
    create_dir(&cfg.out)?;
    write(&cfg.out.join("config.txt"), cfg.canonical())?;
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        version: version(),
        config: cfg.clone(),
        config_file: "config.txt".into(),
        seeds: cfg.seeds.clone(),
        runs: Vec::new(),
        metrics_csv: None,
        started_unix: started,
        finished_unix: started,
    };
    for &seed in &cfg.seeds {
        manifest.runs.push(run_seed(cfg, seed)?);
    }
    if cfg.seeds.len() > 1 && manifest.failed().is_none() {
        let reports = manifest
            .runs
            .iter()
            .map(|r| Ok(serde_json::from_str(&read(&cfg.out.join(&r.dir).join("metrics.json"))?)?))
            .collect::<HarnessResult<Vec<MetricReport>>>()?;
        write(&cfg.out.join("metrics.csv"), average_reports(&reports).to_csv())?;
        manifest.metrics_csv = Some("metrics.csv".into());
    }
    manifest.finished_unix = now();
    write(&cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
