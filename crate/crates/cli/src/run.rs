//! Shared command state: resolved configuration, execution mode and the
//! artifact lists that end up in the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context as _, Result};
use nas_core::config::Config;
use nas_core::par::{self, Execution};
use nas_core::reporting::{Artifact, RunManifest};

use crate::{commands, rerun, Cli, Command};

pub struct Ctx {
    pub cfg: Config,
    pub exec: Execution,
    pub threads: usize,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Ctx {
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of(role, &absolute(path))?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> Result<()> {
        self.outputs.push(Artifact::of(role, &absolute(path))?);
        Ok(())
    }
}

pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::BuildCorpus(_) => "build-corpus",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::TrainFcn(_) => "train-fcn",
        Command::Reconstruct(_) => "reconstruct",
        Command::Search(_) => "search",
        Command::Eval(_) => "eval",
        Command::Correlate(_) => "correlate",
        Command::AblateRates(_) => "ablate-rates",
        Command::AblateEpochs(_) => "ablate-epochs",
        Command::Report(_) => "report",
        Command::Rerun(_) => "rerun",
    }
}

/// Where a command's manifest goes: inside its output directory, or next
/// to its output file. Commands without file outputs get none.
fn manifest_path(cmd: &Command) -> Option<PathBuf> {
    let beside = |p: &Path| {
        let mut s = p.as_os_str().to_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    };
    match cmd {
        Command::BuildCorpus(a) => Some(beside(&a.out)),
        Command::Pretrain(a) => Some(beside(&a.out)),
        Command::Finetune(a) => Some(beside(&a.out)),
        Command::TrainFcn(a) => Some(beside(&a.out)),
        Command::Reconstruct(a) => Some(beside(&a.out)),
        Command::Search(a) => Some(a.out.join("search.manifest.json")),
        Command::Eval(a) => a.out.as_deref().map(beside),
        Command::Correlate(a) => a.out.as_deref().map(beside),
        Command::AblateRates(a) => a.out.as_deref().map(beside),
        Command::AblateEpochs(a) => a.out.as_deref().map(beside),
        Command::Report(a) => Some(a.run_dir.join("report.manifest.json")),
        Command::Rerun(_) => None,
    }
}

/// Applies command-line seed overrides to every seeded section.
fn apply_seed(cfg: &mut Config, seed: u64) {
    cfg.ga.seed = seed;
    cfg.gpt.seed = seed;
    cfg.fcn.seed = seed;
    cfg.corpus.seed = seed;
    cfg.evaluator.external.seed = seed;
}

/// Runs one parsed command. `config` replaces file and environment
/// resolution (used when replaying a manifest).
pub fn execute(
    cli: Cli,
    args: Vec<String>,
    env: Vec<(String, String)>,
    config: Option<Config>,
) -> Result<()> {
    if let Command::Rerun(a) = &cli.command {
        return rerun::rerun(a);
    }
    let mut cfg = match config {
        Some(c) => c,
        None => Config::resolve(cli.config.as_deref(), env).context("loading configuration")?,
    };
    if let Some(s) = cli.seed {
        apply_seed(&mut cfg, s);
    }
    cfg.validate()?;
    let sequential = cli.threads == Some(1);
    let mut ctx = Ctx {
        cfg,
        exec: if sequential { Execution::Sequential } else { Execution::Parallel },
        threads: if sequential { 1 } else { par::current_threads() },
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(p) = &cli.config {
        ctx.input("config", p)?;
    }
    let started = unix_now();
    let name = command_name(&cli.command);
    log::info!("{name}: {} thread(s)", ctx.threads);
    match &cli.command {
        Command::BuildCorpus(a) => commands::build_corpus(&mut ctx, a)?,
        Command::Pretrain(a) => commands::pretrain(&mut ctx, a)?,
        Command::Finetune(a) => commands::finetune(&mut ctx, a)?,
        Command::TrainFcn(a) => commands::train_fcn(&mut ctx, a)?,
        Command::Reconstruct(a) => commands::reconstruct(&mut ctx, a)?,
        Command::Search(a) => commands::search(&mut ctx, a)?,
        Command::Eval(a) => commands::eval(&mut ctx, a)?,
        Command::Correlate(a) => commands::correlate(&mut ctx, a)?,
        Command::AblateRates(a) => commands::ablate_rates(&mut ctx, a)?,
        Command::AblateEpochs(a) => commands::ablate_epochs(&mut ctx, a)?,
        Command::Report(a) => commands::report(&mut ctx, a)?,
        Command::Rerun(_) => unreachable!("handled above"),
    }
    if let Some(path) = manifest_path(&cli.command) {
        let c = &ctx.cfg;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: name.to_string(),
            args,
            cwd: std::env::current_dir().unwrap_or_default(),
            config: c.to_toml()?,
            seeds: vec![c.ga.seed, c.gpt.seed, c.fcn.seed, c.corpus.seed],
            threads: ctx.threads,
            inputs: ctx.inputs,
            outputs: ctx.outputs,
            started_unix: started,
            finished_unix: unix_now(),
        };
        manifest.write(&path)?;
        log::info!("manifest written to {}", path.display());
    }
    Ok(())
}
