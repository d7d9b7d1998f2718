use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalMode, Evaluator, FitnessRecord, MarkovTeacher, Provenance};
use crate::arch::Architecture;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateMode {
    /// Adds deterministic pseudo-noise keyed by the architecture hash.
    Cheap,
    Full,
}

impl std::str::FromStr for SurrogateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cheap" => Ok(SurrogateMode::Cheap),
            "full" => Ok(SurrogateMode::Full),
            _ => Err(format!("unknown surrogate mode {s:?} (cheap|full)")),
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `clamp(logistic(a·base + b) − penalty·|depth − target|/target)` where
/// `base` is the mean log transition probability over adjacent blocks (0 for
/// a single block). Cheap mode adds N(0, amplitude²) noise seeded by the
/// canonical hash before clamping.
pub fn surrogate_fitness(
    teacher: &MarkovTeacher,
    arch: &Architecture,
    mode: SurrogateMode,
) -> Result<f64, EvalError> {
    let kinds = arch.kinds();
    let idx: Vec<usize> = kinds
        .iter()
        .map(|k| teacher.index_of(*k).ok_or(EvalError::UnknownKind(*k)))
        .collect::<Result<_, _>>()?;
    let base = if idx.len() < 2 {
        0.0
    } else {
        idx.windows(2)
            .map(|w| teacher.transition()[w[0]][w[1]].ln())
            .sum::<f64>()
            / (idx.len() - 1) as f64
    };
    let p = teacher.params();
    let depth_term = p.depth_penalty * (idx.len() as f64 - p.target_depth).abs() / p.target_depth;
    let mut f = logistic(p.scale * base + p.shift) - depth_term;
    if mode == SurrogateMode::Cheap {
        let seed = rng::seed_from_bytes(arch.canonical_hash().as_bytes());
        let z: f64 = StandardNormal.sample(&mut rng::seeded(seed));
        f += p.noise_amplitude * z;
    }
    // a zero transition probability gives -inf and logistic → 0
    Ok(if f.is_nan() { 0.0 } else { f.clamp(0.0, 1.0) })
}

#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    pub teacher: MarkovTeacher,
    pub mode: SurrogateMode,
}

impl SurrogateEvaluator {
    pub fn new(teacher: MarkovTeacher, mode: SurrogateMode) -> Self {
        SurrogateEvaluator { teacher, mode }
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, arch: &Architecture, _predicted: &[usize]) -> Result<FitnessRecord, EvalError> {
        let fitness = surrogate_fitness(&self.teacher, arch, self.mode)?;
        Ok(FitnessRecord {
            fitness,
            param_count: arch.param_count(),
            provenance: Provenance::Surrogate,
            mode: self.mode(),
            wall_ms: 0,
            error: None,
            cache_key: arch.canonical_hash(),
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Surrogate
    }

    fn mode(&self) -> EvalMode {
        match self.mode {
            SurrogateMode::Cheap => EvalMode::Cheap,
            SurrogateMode::Full => EvalMode::Full,
        }
    }
}
