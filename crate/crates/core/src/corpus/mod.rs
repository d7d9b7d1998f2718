//! Architecture corpora: ingestion, generation, file I/O and windowing into
//! next-layer training pairs.

mod generate;
mod io;
pub mod nasbench;
mod pairs;

pub use generate::{
    build_finetune_corpus, generate_teacher_corpus, random_architecture, GenerationOptions,
};
pub use io::{parse_corpus, read_corpus, write_corpus};
pub use nasbench::{load_nasbench, parse_nasbench};
pub use pairs::{
    build_vocabulary, encode_corpus, make_training_pairs, sequence_pairs, TrainingPair,
};

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Nasbench,
    FinetuneLibrary,
    Synthetic,
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nasbench" => Ok(Source::Nasbench),
            "finetune" | "finetune_library" => Ok(Source::FinetuneLibrary),
            "teacher" | "synthetic" => Ok(Source::Synthetic),
            _ => Err(format!("unknown corpus source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(flatten)]
    pub arch: Architecture,
}
