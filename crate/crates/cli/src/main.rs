use std::path::PathBuf;
use std::process::ExitCode;

use ardistill_harness::*;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ardistill", version, about = "Autoregressive diffusion distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value lines, optional [stage1] / [stage2] / [stage3] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set stage2=causal_cd (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Single seed (replaces the configured seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample ground-truth sequences to DIR/data.csv.
    GenData(Common),
    /// Train the Stage-1 teacher.
    Stage1(Common),
    /// Stage-2 initialization from DIR/stage1.ckpt.
    Stage2(Common),
    /// Stage-3 asymmetric DMD from DIR/stage2.ckpt.
    Stage3(Common),
    /// Exposure-bias metrics of the latest checkpoint.
    Eval(Common),
    /// Compare finished runs.
    Compare {
        /// Run directories holding manifest.json.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Stage 1, 2, 3 and evaluation for every seed.
    Pipeline(Common),
    /// List configuration keys and defaults.
    Keys,
}

fn load(c: &Common) -> HarnessResult<ExperimentConfig> {
    let mut sets = c.set.clone();
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(o) = &c.out {
        sets.push(format!("out={}", o.display()));
    }
    Ok(parse_config(c.config.as_deref(), &sets)?)
}

fn single(c: &Common, f: impl Fn(&ExperimentConfig, u64, &std::path::Path) -> HarnessResult<String>) -> HarnessResult<()> {
    let cfg = load(c)?;
    let seed = cfg.seeds[0];
    let (dir, _) = seed_dir(&ExperimentConfig { seeds: vec![seed], ..cfg.clone() }, seed);
    std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
    let msg = f(&cfg, seed, &dir)?;
    if !c.quiet {
        println!("{msg} (config {})", &cfg.hash()[..12]);
    }
    Ok(())
}

fn run(cli: Cli) -> HarnessResult<()> {
    match cli.command {
        Command::GenData(c) => single(&c, |cfg, s, d| Ok(format!("wrote {}", run_gen_data(cfg, s, d)?.display()))),
        Command::Stage1(c) => single(&c, |cfg, s, d| Ok(format!("wrote {}", run_stage1(cfg, s, d)?.report))),
        Command::Stage2(c) => single(&c, |cfg, s, d| Ok(format!("wrote {}", run_stage2(cfg, s, d)?.report))),
        Command::Stage3(c) => single(&c, |cfg, s, d| Ok(format!("wrote {}", run_stage3(cfg, s, d)?.report))),
        Command::Eval(c) => single(&c, |cfg, s, d| {
            let r = run_eval(cfg, s, d)?;
            let w2 = r.summary("mean_w2_conditional").map_or(f64::NAN, |s| s.value);
            Ok(format!("mean conditional W2 {w2:.4}; wrote metrics.csv"))
        }),
        Command::Pipeline(c) => {
            let cfg = load(&c)?;
            let manifest = run_pipeline(&cfg)?;
            if let Some(RunStatus::Failed { stage, diagnostic }) = manifest.failed() {
                return Err(HarnessError::Failed {
                    stage: stage.clone(),
                    diagnostic: diagnostic.clone(),
                });
            }
            if !c.quiet {
                println!("run complete: {} (config {})", cfg.out.join("manifest.json").display(), &manifest.config_hash[..12]);
            }
            Ok(())
        }
        Command::Compare { runs, out, quiet } => {
            let manifests = runs.iter().map(RunManifest::load).collect::<HarnessResult<Vec<_>>>()?;
            let cmp = compare_runs(&manifests)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
            for (name, body) in [("compare.csv", cmp.to_csv()), ("compare.txt", cmp.to_text())] {
                let p = dir.join(name);
                std::fs::write(&p, body).map_err(|source| HarnessError::Io { path: p, source })?;
            }
            if !quiet {
                print!("{}", cmp.to_text());
            }
            Ok(())
        }
        Command::Keys => {
            print!("{}", key_docs());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
