//! Fitness evaluation: the teacher surrogate, tabular lookup, the external
//! trainer client, and correlation statistics between evaluation modes.

mod correlation;
pub mod external;
mod surrogate;
mod tabular;
mod teacher;

pub use correlation::{correlation_report, pearson, CorrelationRow};
pub use external::{ExternalConfig, ExternalEvaluator, TrainableScope};
pub use surrogate::{surrogate_fitness, SurrogateEvaluator, SurrogateMode};
pub use tabular::{TableEntry, TabularEvaluator};
pub use teacher::{MarkovTeacher, SurrogateParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Architecture, BlockKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("block kind {0} is not in the teacher's alphabet")]
    UnknownKind(BlockKind),
    #[error("architecture {0} is not in the table")]
    NotInTable(String),
    #[error("worker failure: {0}")]
    Worker(String),
    #[error("worker did not answer within {0} s")]
    Timeout(u64),
    #[error("malformed worker message: {0}")]
    Malformed(String),
    #[error("worker reported {code}: {message}")]
    Remote { code: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Surrogate,
    Tabular,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalMode {
    Cheap,
    Full,
    Lookup,
    Training { epochs: u32, scope: TrainableScope },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub fitness: f64,
    pub param_count: u64,
    pub provenance: Provenance,
    pub mode: EvalMode,
    pub wall_ms: u64,
    /// Set when the evaluation failed; fitness is then 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub cache_key: String,
}

impl FitnessRecord {
    pub fn failed(arch: &Architecture, provenance: Provenance, mode: EvalMode, err: &EvalError) -> Self {
        FitnessRecord {
            fitness: 0.0,
            param_count: arch.param_count(),
            provenance,
            mode,
            wall_ms: 0,
            error: Some(err.to_string()),
            cache_key: arch.canonical_hash(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

/// A fitness oracle. `predicted` lists the block indices produced by
/// reconstruction, which external trainers may restrict training to.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, arch: &Architecture, predicted: &[usize]) -> Result<FitnessRecord, EvalError>;

    fn provenance(&self) -> Provenance;

    fn mode(&self) -> EvalMode;

    /// Like [`Evaluator::evaluate`] but converts failures into an
    /// error-flagged record with fitness 0.
    fn evaluate_or_flag(&self, arch: &Architecture, predicted: &[usize]) -> FitnessRecord {
        match self.evaluate(arch, predicted) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("evaluation failed: {e}");
                FitnessRecord::failed(arch, self.provenance(), self.mode(), &e)
            }
        }
    }
}
