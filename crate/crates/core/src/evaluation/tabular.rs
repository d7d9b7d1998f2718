use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalMode, Evaluator, FitnessRecord, Provenance};
use crate::arch::Architecture;
use crate::error::{Error, Result};

/// One line of a tabular fitness file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub key_hash: String,
    pub accuracy: f64,
    pub params: u64,
}

/// Fitness lookup keyed by canonical architecture hash.
#[derive(Debug, Clone, Default)]
pub struct TabularEvaluator {
    table: HashMap<String, TableEntry>,
}

impl TabularEvaluator {
    pub fn from_entries(entries: impl IntoIterator<Item = TableEntry>) -> Result<Self> {
        let mut table = HashMap::new();
        for e in entries {
            if !(0.0..=1.0).contains(&e.accuracy) {
                return Err(Error::config(format!(
                    "table accuracy {} for {} outside [0, 1]",
                    e.accuracy, e.key_hash
                )));
            }
            table.insert(e.key_hash.clone(), e);
        }
        Ok(TabularEvaluator { table })
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TableEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        TabularEvaluator::from_entries(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        TabularEvaluator::read(std::io::BufReader::new(f))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Evaluator for TabularEvaluator {
    fn evaluate(&self, arch: &Architecture, _predicted: &[usize]) -> Result<FitnessRecord, EvalError> {
        let key = arch.canonical_hash();
        let e = self
            .table
            .get(&key)
            .ok_or_else(|| EvalError::NotInTable(key.clone()))?;
        Ok(FitnessRecord {
            fitness: e.accuracy,
            param_count: e.params,
            provenance: Provenance::Tabular,
            mode: EvalMode::Lookup,
            wall_ms: 0,
            error: None,
            cache_key: key,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Tabular
    }

    fn mode(&self) -> EvalMode {
        EvalMode::Lookup
    }
}
