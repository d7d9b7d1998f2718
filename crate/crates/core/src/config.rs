//! Run configuration: one TOML document with `[ga]`, `[gpt]`, `[fcn]`,
//! `[evaluator]` and `[corpus]` sections. Missing keys take their defaults;
//! unknown keys are rejected.
//!
//! Environment overrides use the prefix `NASGEN_` followed by the section
//! and key joined with a double underscore, e.g. `NASGEN_GA__POPULATION=40`
//! or `NASGEN_EVALUATOR__SURROGATE__SCALE=1.5`. Values are parsed as TOML
//! literals, falling back to plain strings.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::Canonicalization;
use crate::corpus::GenerationOptions;
use crate::error::{Error, Result};
use crate::evaluation::{ExternalConfig, MarkovTeacher, SurrogateMode, SurrogateParams};
use crate::evolution::GaConfig;
use crate::fcn::FcnConfig;
use crate::gpt::GptConfig;

pub const ENV_PREFIX: &str = "NASGEN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Surrogate,
    Tabular,
    External,
}

impl FromStr for EvaluatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surrogate" => Ok(EvaluatorKind::Surrogate),
            "tabular" => Ok(EvaluatorKind::Tabular),
            "external" => Ok(EvaluatorKind::External),
            _ => Err(Error::config(format!("unknown evaluator {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    pub mode: SurrogateMode,
    pub surrogate: SurrogateParams,
    /// JSON teacher file; the built-in library teacher when absent.
    pub teacher: Option<PathBuf>,
    /// Tabular evaluator file.
    pub table: Option<PathBuf>,
    pub external: ExternalConfig,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            kind: EvaluatorKind::Surrogate,
            mode: SurrogateMode::Full,
            surrogate: SurrogateParams::default(),
            teacher: None,
            table: None,
            external: ExternalConfig::default(),
        }
    }
}

impl EvaluatorConfig {
    /// The configured teacher with the configured surrogate constants.
    pub fn teacher(&self) -> Result<MarkovTeacher> {
        let t = match &self.teacher {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<MarkovTeacher>(&s)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => MarkovTeacher::default_library(),
        };
        Ok(t.with_params(self.surrogate.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Architectures in a generated teacher corpus.
    pub teacher_archs: usize,
    /// Architectures in a generated fine-tuning corpus.
    pub finetune_count: usize,
    /// Seed for generated corpora.
    pub seed: u64,
    pub min_accuracy: f64,
    pub stride: usize,
    pub canonicalization: Canonicalization,
    pub generation: GenerationOptions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            teacher_archs: 1000,
            finetune_count: 500,
            seed: 0,
            min_accuracy: 0.9,
            stride: 1,
            canonicalization: Canonicalization::Full,
            generation: GenerationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ga: GaConfig,
    pub gpt: GptConfig,
    pub fcn: FcnConfig,
    pub evaluator: EvaluatorConfig,
    pub corpus: CorpusConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Reads `path` (or starts from defaults), then applies overrides from
    /// the given environment pairs.
    pub fn resolve(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut doc: toml::Table = toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (k, v) in overrides {
            apply_override(&mut doc, &k[ENV_PREFIX.len()..], &v)?;
        }
        let c: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        self.gpt.validate()?;
        self.fcn.validate()?;
        self.corpus.generation.validate()?;
        if self.corpus.stride == 0 {
            return Err(Error::config("corpus.stride must be positive"));
        }
        if self.fcn.context_len != self.gpt.context_len {
            return Err(Error::config("fcn.context_len must equal gpt.context_len"));
        }
        Ok(())
    }
}

fn apply_override(doc: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override {ENV_PREFIX}{key}")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut table = doc;
    for p in &path[..path.len() - 1] {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {p} is not a section")))?;
    }
    table.insert(path[path.len() - 1].clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[ga]\npopulaton = 3\n").is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let env = vec![
            ("NASGEN_GA__POPULATION".to_string(), "12".to_string()),
            ("NASGEN_EVALUATOR__MODE".to_string(), "cheap".to_string()),
            ("NASGEN_EVALUATOR__SURROGATE__SCALE".to_string(), "1.5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = Config::resolve(None, env).unwrap();
        assert_eq!(c.ga.population, 12);
        assert_eq!(c.evaluator.mode, SurrogateMode::Cheap);
        assert_eq!(c.evaluator.surrogate.scale, 1.5);
    }
}
