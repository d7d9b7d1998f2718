//! Replays a recorded command on one thread into a fresh directory and
//! compares every output against the recorded hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::Parser;
use nas_core::checkpoint::file_hash;
use nas_core::config::Config;
use nas_core::reporting::RunManifest;

use crate::run::{absolute, execute};
use crate::{Cli, Command, Mismatch, RerunArgs, UsageError};

const OUTPUT_FLAGS: [&str; 3] = ["--out", "--trace", "--run-dir"];

/// Rewrites output locations into `dir` and forces a single thread.
/// Returns the new arguments and (recorded, replayed) location pairs.
fn rewrite_args(args: &[String], cwd: &Path, dir: &Path) -> (Vec<String>, Vec<(PathBuf, PathBuf)>) {
    let mut out = Vec::with_capacity(args.len() + 2);
    let mut moved = Vec::new();
    let mut relocate = |v: &str| {
        let old = cwd.join(v);
        let name = old.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        let new = dir.join(name);
        moved.push((old, new.clone()));
        new.to_string_lossy().into_owned()
    };
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--threads" {
            it.next();
            continue;
        }
        if a.starts_with("--threads=") {
            continue;
        }
        if let Some((flag, v)) = a.split_once('=').filter(|(f, _)| OUTPUT_FLAGS.contains(f)) {
            out.push(format!("{flag}={}", relocate(v)));
            continue;
        }
        out.push(a.clone());
        if OUTPUT_FLAGS.contains(&a.as_str()) {
            if let Some(v) = it.next() {
                out.push(relocate(v));
            }
        }
    }
    out.push("--threads".into());
    out.push("1".into());
    (out, moved)
}

fn relocated(path: &Path, moved: &[(PathBuf, PathBuf)]) -> Option<PathBuf> {
    moved.iter().find_map(|(old, new)| {
        path.strip_prefix(old).ok().map(|rest| {
            if rest.as_os_str().is_empty() {
                new.clone()
            } else {
                new.join(rest)
            }
        })
    })
}

pub fn rerun(a: &RerunArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(|c| c.path.display().to_string()).collect();
        return Err(nas_core::Error::Report(format!(
            "inputs changed since the recorded run: {}",
            list.join(", ")
        ))
        .into());
    }
    let dir = absolute(&match &a.out {
        Some(d) => d.clone(),
        None => a.manifest.parent().unwrap_or(Path::new(".")).join("rerun"),
    });
    std::fs::create_dir_all(&dir).map_err(|e| nas_core::Error::io(&dir, e))?;
    let (args, moved) = rewrite_args(&m.args, &m.cwd, &dir);
    let cli = Cli::try_parse_from(std::iter::once("nasgen".to_string()).chain(args.iter().cloned()))
        .map_err(|e| UsageError(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        bail!(UsageError("a rerun manifest cannot be replayed".into()));
    }
    // commands that write into an existing directory need its inputs there
    for input in &m.inputs {
        if let Some(dest) = relocated(&input.path, &moved) {
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent).map_err(|e| nas_core::Error::io(parent, e))?;
            }
            std::fs::copy(&input.path, &dest).map_err(|e| nas_core::Error::io(&dest, e))?;
        }
    }
    let config = Config::from_toml(&m.config).context("recorded configuration")?;
    if !m.cwd.as_os_str().is_empty() {
        std::env::set_current_dir(&m.cwd).map_err(|e| nas_core::Error::io(&m.cwd, e))?;
    }
    log::info!("replaying {} {:?}", m.command, args);
    execute(cli, args, Vec::new(), Some(config))?;

    let mut differing = Vec::new();
    for o in &m.outputs {
        let new = relocated(&o.path, &moved).unwrap_or_else(|| o.path.clone());
        let same = file_hash(&new).map(|h| h == o.sha256).unwrap_or(false);
        outln!("{}  {}  {}", if same { "identical" } else { "DIFFERS  " }, o.role, new.display());
        if !same {
            differing.push(new.display().to_string());
        }
    }
    if !differing.is_empty() {
        bail!(Mismatch(format!("{} output(s) differ: {}", differing.len(), differing.join(", "))));
    }
    outln!("all {} outputs identical", m.outputs.len());
    Ok(())
}
