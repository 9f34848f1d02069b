//! Side-by-side tables of finished runs.

use std::fmt::Write as _;

use ardistill::distill::StageReport;
use ardistill::metrics::{MetricReport, Stat};
use serde::{Deserialize, Serialize};

use crate::pipeline::{HarnessError, HarnessResult, RunManifest};

/// One run's seed-aggregated numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub variant: String,
    pub config_hash: String,
    pub seeds: usize,
    pub w2: Stat,
    pub slope: Stat,
    pub coverage: Option<Stat>,
    /// Stage-2 teacher calls per seed (pair generation included).
    pub stage2_teacher_evals: f64,
    pub stage2_aux_bytes: f64,
    pub stage2_supervision_events: f64,
    /// Teacher calls relative to the first run.
    pub eval_ratio: f64,
    /// Whether this run and the first consumed the same supervision events.
    pub matched_budget: bool,
    pub delta_w2: f64,
    pub flag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

const SHARED: &[&str] = &["world", "frame_dim", "seq_len", "chunk", "schedule", "asd"];

fn shared_fields(m: &RunManifest) -> Vec<(String, String)> {
    let c = &m.config;
    let w = serde_json::to_string(&c.world_spec().kind).unwrap_or_default();
    vec![
        ("world".into(), w),
        ("frame_dim".into(), c.frame_dim.to_string()),
        ("seq_len".into(), c.seq_len.to_string()),
        ("chunk".into(), c.chunk.to_string()),
        ("schedule".into(), c.schedule.clone()),
        ("asd".into(), c.asd.to_string()),
    ]
}

fn across_seeds(vals: &[Stat]) -> Stat {
    let n = vals.len();
    let m = vals.iter().map(|s| s.value).sum::<f64>() / n as f64;
    let se = if n >= 2 {
        (vals.iter().map(|s| (s.value - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        vals[0].se
    };
    Stat::new(m, se, n)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> HarnessResult<T> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-run metrics (mean +- SE over seeds), exposure slopes and Stage-2 cost,
/// with deltas and cost ratios against the first manifest.
pub fn compare_runs(manifests: &[RunManifest]) -> HarnessResult<Comparison> {
    if manifests.len() < 2 {
        return Err(HarnessError::Missing("compare needs at least two runs".into()));
    }
    let base = shared_fields(&manifests[0]);
    for m in &manifests[1..] {
        let diff: Vec<String> = shared_fields(m)
            .iter()
            .zip(&base)
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} vs {}", a.0, b.1, a.1))
            .collect();
        if !diff.is_empty() {
            return Err(HarnessError::Missing(format!(
                "runs are not comparable (fields {} must match): {}",
                SHARED.join(", "),
                diff.join("; ")
            )));
        }
    }
    let mut rows = Vec::new();
    for m in manifests {
        if let Some(status) = m.failed() {
            return Err(HarnessError::Missing(format!("run {} did not complete: {status:?}", m.root().display())));
        }
        let mut w2 = Vec::new();
        let mut slope = Vec::new();
        let mut cov = Vec::new();
        let (mut evals, mut bytes, mut events) = (0.0, 0.0, 0.0);
        for r in &m.runs {
            let dir = m.root().join(&r.dir);
            let rep: MetricReport = load_json(&dir.join(r.metrics_json.as_deref().unwrap_or("metrics.json")))?;
            let get = |k: &str| rep.summary(k).ok_or_else(|| HarnessError::Missing(format!("metric {k} missing in {}", dir.display())));
            w2.push(get("mean_w2_conditional")?);
            slope.push(get("slope_w2_conditional")?);
            if let Some(c) = rep.summary("mean_mode_coverage_fraction") {
                cov.push(c);
            }
            let s2: StageReport = load_json(&dir.join("stage2.report.json"))?;
            evals += s2.teacher_evals as f64;
            bytes += s2.aux_bytes as f64;
            events += s2.supervision_events as f64;
        }
        let n = m.runs.len() as f64;
        rows.push(ComparisonRow {
            label: m.root().display().to_string(),
            variant: m.config.stage2.name().into(),
            config_hash: m.config_hash[..12.min(m.config_hash.len())].to_string(),
            seeds: m.runs.len(),
            w2: across_seeds(&w2),
            slope: across_seeds(&slope),
            coverage: (!cov.is_empty()).then(|| across_seeds(&cov)),
            stage2_teacher_evals: evals / n,
            stage2_aux_bytes: bytes / n,
            stage2_supervision_events: events / n,
            eval_ratio: 1.0,
            matched_budget: true,
            delta_w2: 0.0,
            flag: String::new(),
        });
    }
    let (b_evals, b_events, b_w2) = (rows[0].stage2_teacher_evals, rows[0].stage2_supervision_events, rows[0].w2.value);
    for r in &mut rows {
        r.eval_ratio = if b_evals > 0.0 {
            r.stage2_teacher_evals / b_evals
        } else if r.stage2_teacher_evals == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        r.matched_budget = r.stage2_supervision_events == b_events;
        r.delta_w2 = r.w2.value - b_w2;
    }
    let distinct = rows.iter().map(|r| r.config_hash.clone()).collect::<std::collections::BTreeSet<_>>().len() > 1;
    if distinct && rows.iter().all(|r| r.coverage.is_some()) {
        let worst = rows
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.coverage.unwrap().value.total_cmp(&b.1.coverage.unwrap().value))
            .map(|(i, _)| i)
            .expect("non-empty");
        rows[worst].flag = "worst_coverage".into();
    }
    Ok(Comparison { rows })
}

fn opt(s: &Option<Stat>) -> (String, String) {
    s.map_or((String::new(), String::new()), |s| (s.value.to_string(), s.se.to_string()))
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "run,variant,config_hash,seeds,w2,w2_se,delta_w2,slope,slope_se,coverage,coverage_se,stage2_teacher_evals,eval_ratio,matched_budget,stage2_aux_bytes,flag\n",
        );
        for r in &self.rows {
            let (c, cse) = opt(&r.coverage);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{c},{cse},{},{},{},{},{}",
                r.label,
                r.variant,
                r.config_hash,
                r.seeds,
                r.w2.value,
                r.w2.se,
                r.delta_w2,
                r.slope.value,
                r.slope.se,
                r.stage2_teacher_evals,
                r.eval_ratio,
                r.matched_budget,
                r.stage2_aux_bytes,
                r.flag
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>5} {:>20} {:>10} {:>22} {:>18} {:>12} {:>8} {:>12}  {}\n",
            "variant", "seeds", "w2 (+-se)", "delta", "slope (+-se)", "coverage", "teacher", "ratio", "aux bytes", "flag"
        );
        for r in &self.rows {
            let cov = r.coverage.map_or("-".to_string(), |c| format!("{:.3} +- {:.3}", c.value, c.se));
            let _ = writeln!(
                out,
                "{:<12} {:>5} {:>20} {:>+10.4} {:>22} {:>18} {:>12.0} {:>8.2} {:>12.0}  {}",
                r.variant,
                r.seeds,
                format!("{:.4} +- {:.4}", r.w2.value, r.w2.se),
                r.delta_w2,
                format!("{:+.5} +- {:.5}", r.slope.value, r.slope.se),
                cov,
                r.stage2_teacher_evals,
                r.eval_ratio,
                r.stage2_aux_bytes,
                r.flag
            );
        }
        out
    }
}
