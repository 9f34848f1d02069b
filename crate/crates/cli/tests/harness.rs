use std::path::Path;

use ardistill_harness::*;

fn tiny(out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = [
        "steps1=30", "steps2=10", "steps3=2", "batch=8", "width=16", "depth=2", "eval_rollouts=120", "grid_k=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    sets.push(format!("out={}", out.display()));
    parse_config(None, &sets).unwrap()
}

#[test]
fn empty_file_gives_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cfg");
    std::fs::write(&path, "").unwrap();
    let cfg = parse_config(Some(&path), &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!((cfg.stage1.steps, cfg.stage2_budget.steps, cfg.stage3.steps), (20_000, 5_000, 1_000));
    assert_eq!(cfg.stage2, Stage2Variant::CausalCd);
    assert_eq!((cfg.grid_k, cfg.ema_beta), (48, 0.99));
}

#[test]
fn overrides_touch_only_their_fields() {
    let cfg = parse_config(None, &["stage2=causal_ode".into()]).unwrap();
    assert_eq!(cfg.stage2, Stage2Variant::CausalOde);
    assert_eq!(ExperimentConfig { stage2: Stage2Variant::CausalCd, ..cfg.clone() }, ExperimentConfig::default());
    let cfg = parse_config(None, &["steps2=5000 batch=64".into()]).unwrap();
    assert_eq!((cfg.stage2_budget.steps, cfg.stage2_budget.batch, cfg.stage1.batch), (5000, 64, 64));
}

#[test]
fn sections_match_flat_keys() {
    let mut a = ExperimentConfig::default();
    a.apply_text("# budgets\nworld = branching_gmm\n[stage2]\nsteps = 300   # short\nlr = 0.01\n[stage3]\nbatch = 16\n").unwrap();
    let mut b = ExperimentConfig::default();
    for (k, v) in [("world", "branching_gmm"), ("steps2", "300"), ("lr2", "0.01"), ("batch3", "16")] {
        b.set(k, v).unwrap();
    }
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn unknown_keys_and_bad_types_are_reported() {
    let err = parse_config(None, &["stepz=4".into()]).unwrap_err().to_string();
    assert!(err.contains("stepz") && err.contains("steps2") && err.contains("grid_k"), "{err}");
    let err = parse_config(None, &["steps1=many".into()]).unwrap_err().to_string();
    assert!(err.contains("unsigned integer"), "{err}");
    let err = parse_config(None, &["stage2=magic".into()]).unwrap_err().to_string();
    assert!(err.contains("causal_cd"), "{err}");
    assert!(parse_config(None, &["chunk=3".into()]).is_err());
    let mut c = ExperimentConfig::default();
    assert!(c.apply_text("[stage9]\nsteps = 1\n").is_err());
}

#[test]
fn hash_tracks_semantic_fields_only() {
    let base = ExperimentConfig::default();
    let mut moved = base.clone();
    moved.out = "elsewhere".into();
    assert_eq!(base.hash(), moved.hash());
    let mut spaced = ExperimentConfig::default();
    spaced.apply_text("   steps1   =   20000   # same as default\n\n").unwrap();
    assert_eq!(base.hash(), spaced.hash());
    for (k, v) in [("steps1", "19999"), ("ema_beta", "0.98"), ("world", "branching_gmm"), ("seed", "1"), ("a", "0.9")] {
        let mut c = base.clone();
        c.set(k, v).unwrap();
        if k == "a" {
            // explicitly setting the default value is not a semantic change
            assert_eq!(c.hash(), base.hash());
        } else {
            assert_ne!(c.hash(), base.hash(), "{k}");
        }
    }
}

#[test]
fn zero_budgets_produce_untrained_checkpoints_and_empty_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["steps1=0", "steps2=0", "steps3=0"]);
    let m = run_pipeline(&cfg).unwrap();
    assert!(m.failed().is_none());
    for s in ["stage1", "stage2", "stage3"] {
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{s}.report.json"))).unwrap()).unwrap();
        assert_eq!(r["steps"], 0);
        assert_eq!(r["teacher_evals"], 0);
        assert_eq!(r["config_hash"], cfg.hash());
    }
}

#[test]
fn pipeline_is_deterministic_and_every_file_is_in_the_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_pipeline(&tiny(a.path(), &[])).unwrap();
    run_pipeline(&tiny(b.path(), &[])).unwrap();
    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
    let listed: std::collections::BTreeSet<String> = ma.files().into_iter().collect();
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        assert!(listed.contains(&name), "orphan {name}");
    }
    for f in &listed {
        assert!(a.path().join(f).exists(), "missing {f}");
    }
}

#[test]
fn stage_subcommands_resume_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["stage2=causal_ode"]);
    assert!(matches!(run_stage2(&cfg, 0, dir.path()), Err(e) if e.exit_code() == 1));
    run_stage1(&cfg, 0, dir.path()).unwrap();
    let art = run_stage2(&cfg, 0, dir.path()).unwrap();
    assert_eq!(art.extra, vec!["pairs.bin".to_string()]);
    run_stage3(&cfg, 0, dir.path()).unwrap();
    run_eval(&cfg, 0, dir.path()).unwrap();

    let whole = tempfile::tempdir().unwrap();
    run_pipeline(&tiny(whole.path(), &["stage2=causal_ode"])).unwrap();
    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(whole.path()), csv(dir.path()));
}

#[test]
fn multi_seed_runs_and_comparisons() {
    let root = tempfile::tempdir().unwrap();
    let cd = root.path().join("cd");
    let ode = root.path().join("ode");
    let dmd = root.path().join("dmd");
    for (dir, variant) in [(&cd, "causal_cd"), (&ode, "causal_ode"), (&dmd, "causal_dmd")] {
        let cfg = tiny(dir, &["world=branching_gmm", "seeds=0,1", "pair_reuse=1", &format!("stage2={variant}")]);
        let m = run_pipeline(&cfg).unwrap();
        assert_eq!(m.runs.len(), 2);
        assert!(dir.join("seed-1").join("metrics.csv").exists());
        assert!(dir.join("metrics.csv").exists());
    }
    let load = |d: &Path| RunManifest::load(d).unwrap();
    let self_cmp = compare_runs(&[load(&cd), load(&cd)]).unwrap();
    assert!(self_cmp.rows.iter().all(|r| r.delta_w2 == 0.0 && r.eval_ratio == 1.0 && r.flag.is_empty()));

    let cmp = compare_runs(&[load(&cd), load(&ode), load(&dmd)]).unwrap();
    assert_eq!(cmp.rows[1].stage2_aux_bytes > 0.0, true);
    assert_eq!(cmp.rows[0].stage2_aux_bytes, 0.0);
    assert!(cmp.rows[1].eval_ratio >= 4.0, "ratio {}", cmp.rows[1].eval_ratio);
    assert!(cmp.rows.iter().filter(|r| r.flag == "worst_coverage").count() == 1);
    assert_eq!(cmp.to_csv().lines().count(), 4);
    assert!(cmp.to_text().contains("causal_ode"));

    let other = root.path().join("other");
    run_pipeline(&tiny(&other, &["world=branching_gmm", "schedule=one_step", "steps1=0", "steps2=0", "steps3=0"])).unwrap();
    let err = compare_runs(&[load(&cd), load(&other)]).unwrap_err().to_string();
    assert!(err.contains("schedule"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ardistill");
    let dir = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(bin).args(["stage1", "--set", "bogus=1", "--quiet"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let out = dir.path().join("run");
    let status = std::process::Command::new(bin)
        .args(["pipeline", "--quiet", "--seed", "3", "--out"])
        .arg(&out)
        .args(["--set", "steps1=0 steps2=0 steps3=0 eval_rollouts=100 width=8 depth=1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("manifest.json").exists());
    // a learning rate this large blows up Stage 1
    let status = std::process::Command::new(bin)
        .args(["pipeline", "--quiet", "--out"])
        .arg(dir.path().join("bad"))
        .args(["--set", "steps1=200 lr1=1000 batch=8 steps2=0 steps3=0 eval_rollouts=100 width=8 depth=1"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let m = RunManifest::load(dir.path().join("bad")).unwrap();
    assert!(matches!(m.failed(), Some(RunStatus::Failed { stage, .. }) if stage == "stage1"));
}
