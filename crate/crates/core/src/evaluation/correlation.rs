use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::Evaluator;
use crate::arch::Architecture;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub label: String,
    pub pcc: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation and its two-sided p-value under the t distribution
/// with n − 2 degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Report("vectors differ in length".into()));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Report("correlation needs at least 3 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Report("zero-variance fitness vector".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if (1.0 - r.abs()) < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Report(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

/// Correlates fitness vectors of `archs` under pairs of named evaluators.
/// Failed evaluations abort the report.
pub fn correlation_report(
    evaluators: &[(&str, &dyn Evaluator)],
    pairs: &[(usize, usize)],
    archs: &[Architecture],
    exec: Execution,
) -> Result<Vec<CorrelationRow>> {
    if archs.len() < 3 {
        return Err(Error::Report("correlation needs at least 3 architectures".into()));
    }
    let mut vectors = Vec::with_capacity(evaluators.len());
    for (_, ev) in evaluators {
        let v = par::try_map_range(exec, archs.len(), |i| {
            ev.evaluate(&archs[i], &[]).map(|r| r.fitness)
        })?;
        vectors.push(v);
    }
    pairs
        .iter()
        .map(|&(a, b)| {
            let (Some(x), Some(y)) = (vectors.get(a), vectors.get(b)) else {
                return Err(Error::Report(format!("no evaluator for pair ({a}, {b})")));
            };
            let (pcc, p_value) = pearson(x, y)?;
            Ok(CorrelationRow {
                label: format!("{}-{}", evaluators[a].0, evaluators[b].0),
                pcc,
                p_value,
                n: archs.len(),
            })
        })
        .collect()
}
