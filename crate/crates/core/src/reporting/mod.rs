//! Ablation drivers, learning diagnostics, search summaries and run
//! manifests.

mod learning;
mod manifest;

pub use learning::{teacher_kl, teacher_next_tokens};
pub use manifest::{Artifact, RunManifest, MANIFEST_FILE};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::corpus::GenerationOptions;
use crate::error::{Error, Result};
use crate::evaluation::{correlation_report, CorrelationRow, Evaluator};
use crate::evolution::{init_population, GenerationLog, SearchResult};
use crate::library::BlockLibrary;
use crate::par::{self, Execution};
use crate::reconstruct::{reconstruct, Guide};
use crate::rng;

pub const RESULT_FILE: &str = "result.json";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const BEST_ARCH_FILE: &str = "best_arch.json";
pub const FITNESS_TSV: &str = "fitness.tsv";
pub const PLOT_SCRIPT: &str = "plot_fitness.py";
pub const SUMMARY_FILE: &str = "summary.txt";

pub const ABLATION_RATES: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Seeded random architectures used as ablation inputs.
pub fn ablation_architectures(count: usize, opts: &GenerationOptions, seed: u64) -> Result<Vec<Architecture>> {
    let mut r = rng::substream(seed, &[0xab0]);
    init_population(count, &BlockLibrary::standard(), opts, &mut r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub rate: f64,
    pub mean: f64,
    /// Architectures whose fitness rose / stayed / fell relative to rate 0.
    pub plus: usize,
    pub equal: usize,
    pub minus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateAblation {
    pub seed: u64,
    pub rows: Vec<RateRow>,
    /// Fitness per (rate, architecture).
    pub fitness: Vec<Vec<f64>>,
}

/// Reconstructs every architecture once per rate and scores the results.
/// Comparisons are against the unmodified architectures.
pub fn ablate_rates(
    archs: &[Architecture],
    guide: &Guide<'_>,
    evaluator: &dyn Evaluator,
    rates: &[f64],
    seed: u64,
    exec: Execution,
) -> Result<RateAblation> {
    if archs.is_empty() {
        return Err(Error::config("rate ablation needs at least one architecture"));
    }
    let base: Vec<f64> = par::map(exec, archs, |a| evaluator.evaluate_or_flag(a, &[]).fitness);
    let mut rows = Vec::with_capacity(rates.len());
    let mut fitness = Vec::with_capacity(rates.len());
    for &rate in rates {
        let idx: Vec<usize> = (0..archs.len()).collect();
        let scores = par::try_map_range(exec, idx.len(), |i| -> Result<f64> {
            let mut r = rng::substream(seed, &[0xab1, i as u64, rate.to_bits()]);
            let (a, trace) = reconstruct(&archs[i], guide, rate, &mut r)?;
            Ok(evaluator.evaluate_or_flag(&a, &trace.eliminated).fitness)
        })?;
        let (mut plus, mut equal, mut minus) = (0, 0, 0);
        for (s, b) in scores.iter().zip(&base) {
            match s.partial_cmp(b) {
                Some(std::cmp::Ordering::Greater) => plus += 1,
                Some(std::cmp::Ordering::Less) => minus += 1,
                _ => equal += 1,
            }
        }
        rows.push(RateRow {
            rate,
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            plus,
            equal,
            minus,
        });
        fitness.push(scores);
    }
    Ok(RateAblation { seed, rows, fitness })
}

pub fn format_rate_table(rows: &[RateRow]) -> String {
    let mut s = String::from("rate\tmean\t+/=/-\n");
    for r in rows {
        let _ = writeln!(s, "{:.1}\t{:.4}\t{}/{}/{}", r.rate, r.mean, r.plus, r.equal, r.minus);
    }
    s
}

/// Correlation between two evaluation modes over the same architectures.
pub fn ablate_epochs(
    archs: &[Architecture],
    modes: &[(&str, &dyn Evaluator)],
    pairs: &[(usize, usize)],
    exec: Execution,
) -> Result<Vec<CorrelationRow>> {
    correlation_report(modes, pairs, archs, exec)
}

pub fn format_correlation_table(rows: &[CorrelationRow]) -> String {
    let mut s = String::from("pair\tPCC\tp-value\tn\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.2e}\t{}", r.label, r.pcc, r.p_value, r.n);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub generations: usize,
    pub best_so_far: Vec<f64>,
    pub best_fitness: f64,
    pub param_count: u64,
    pub evaluator_calls: usize,
    pub cache_hits: usize,
    pub budget: usize,
    pub text: String,
}

fn report_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Report(format!("{}: {e}", path.display()))
}

/// Reads a search run directory, writes the plot data and script, and
/// returns the summary.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let path = run_dir.join(RESULT_FILE);
    if !path.is_file() {
        return Err(Error::Report(format!("{} has no {RESULT_FILE}", run_dir.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| report_err(&path, e))?;
    let result: SearchResult = serde_json::from_str(&text).map_err(|e| report_err(&path, e))?;
    if result.history.is_empty() {
        return Err(report_err(&path, "empty generation history"));
    }
    let logged_calls: usize = result.history.iter().map(|h| h.evaluations).sum();
    if logged_calls != result.evaluator_calls {
        return Err(report_err(&path, "evaluator-call total disagrees with the generation log"));
    }
    let gen_path = run_dir.join(GENERATIONS_FILE);
    if gen_path.is_file() {
        let lines = std::fs::read_to_string(&gen_path).map_err(|e| report_err(&gen_path, e))?;
        let logs: Vec<GenerationLog> = lines
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| report_err(&gen_path, e))?;
        if logs.iter().map(|h| h.evaluations).sum::<usize>() != result.evaluator_calls {
            return Err(report_err(&gen_path, "evaluator-call total disagrees with the result"));
        }
    }

    let mut tsv = String::from("generation\tbest\tbest_so_far\tmean\tevaluations\tcache_hits\trate\n");
    for h in &result.history {
        let _ = writeln!(
            tsv,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.4}",
            h.generation, h.best, h.best_so_far, h.mean, h.evaluations, h.cache_hits, h.rate
        );
    }
    let tsv_path = run_dir.join(FITNESS_TSV);
    std::fs::write(&tsv_path, tsv).map_err(|e| Error::io(&tsv_path, e))?;
    let script_path = run_dir.join(PLOT_SCRIPT);
    std::fs::write(&script_path, PLOT_SOURCE).map_err(|e| Error::io(&script_path, e))?;

    let best = &result.best;
    let best_so_far = result.best_so_far();
    let mut s = String::new();
    let _ = writeln!(s, "seed {}  guided {}", result.seed, result.guided);
    let _ = writeln!(s, "best fitness per generation (best so far):");
    for h in &result.history {
        let _ = writeln!(s, "  {:>3}  {:.4}  ({:.4})", h.generation, h.best, h.best_so_far);
    }
    let _ = writeln!(s, "final best fitness {:.4} (individual {})", best.score(), best.id);
    let _ = writeln!(s, "parameters ~{}", best.arch.param_count());
    let _ = writeln!(
        s,
        "budget: {} evaluator calls, {} cache hits, limit {}",
        result.evaluator_calls,
        result.cache_hits,
        result.config.budget()
    );
    let _ = writeln!(s, "final architecture:\n{}", best.arch.pretty());
    let summary_path = run_dir.join(SUMMARY_FILE);
    std::fs::write(&summary_path, &s).map_err(|e| Error::io(&summary_path, e))?;

    Ok(Summary {
        generations: result.history.len() - 1,
        best_so_far,
        best_fitness: best.score(),
        param_count: best.arch.param_count(),
        evaluator_calls: result.evaluator_calls,
        cache_hits: result.cache_hits,
        budget: result.config.budget(),
        text: s,
    })
}

const PLOT_SOURCE: &str = r#"#!/usr/bin/env python3
# Plots fitness.tsv from a search run directory.
import csv
import sys

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "fitness.tsv"
rows = list(csv.DictReader(open(path), delimiter="\t"))
gen = [int(r["generation"]) for r in rows]
for col in ("best", "best_so_far", "mean"):
    plt.plot(gen, [float(r[col]) for r in rows], label=col)
plt.xlabel("generation")
plt.ylabel("fitness")
plt.legend()
plt.savefig(path.rsplit(".", 1)[0] + ".png", dpi=120)
"#;
