use serde::{Deserialize, Serialize};

use super::CorpusRecord;
use crate::arch::{encode_architecture, Canonicalization, TokenSequence, Vocabulary, PAD};
use crate::error::{Error, Result};

/// A left-padded context window and the token that follows it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingPair {
    pub context: Vec<u32>,
    pub target: u32,
}

pub fn build_vocabulary(records: &[CorpusRecord], mode: Canonicalization) -> Result<Vocabulary> {
    Ok(Vocabulary::from_architectures(records.iter().map(|r| &r.arch), mode)?)
}

pub fn encode_corpus(records: &[CorpusRecord], vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| Ok(encode_architecture(&r.arch, vocab)?))
        .collect()
}

/// Pairs for target positions `0, stride, 2·stride, …` of one sequence.
pub fn sequence_pairs(tokens: &[u32], k: usize, stride: usize) -> Vec<TrainingPair> {
    (0..tokens.len())
        .step_by(stride.max(1))
        .map(|t| {
            let start = t.saturating_sub(k);
            let mut context = vec![PAD; k - (t - start)];
            context.extend_from_slice(&tokens[start..t]);
            TrainingPair {
                context,
                target: tokens[t],
            }
        })
        .collect()
}

/// Windows every record's token sequence into training pairs.
pub fn make_training_pairs(
    records: &[CorpusRecord],
    vocab: &Vocabulary,
    k: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>> {
    if k == 0 || stride == 0 {
        return Err(Error::config("window size and stride must be positive"));
    }
    let mut out = Vec::new();
    for seq in encode_corpus(records, vocab)? {
        out.extend(sequence_pairs(&seq.tokens, k, stride));
    }
    Ok(out)
}
