//! Structure prediction: eliminate blocks with a decaying probability and
//! refill each hole with the block the models predict for it.
//!
//! Eliminated positions are refilled left to right. The context for
//! position `i` is the layer tokens of blocks `0..i` of the partially rebuilt
//! architecture (last `k`, left-padded); layers whose key is not in the
//! vocabulary are skipped. The sequence model proposes one layer token, the
//! selector lifts it to a block kind, and the kind is instantiated at `i`
//! with the eliminated block's width. Downstream blocks are re-instantiated
//! wherever their input shape changed.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::{Architecture, Block, BlockKind, Vocabulary, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::fcn::FcnModel;
use crate::gpt::{pad_context, sample_from_logits, Gpt};
use crate::library::{instantiate_or_fallback, rechain, Repair};
use crate::rng::Rng;

/// Linearly decaying elimination rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EliminationSchedule {
    pub rate_ori: f64,
    pub iter_max: usize,
}

impl EliminationSchedule {
    pub fn new(rate_ori: f64, iter_max: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate_ori) {
            return Err(Error::config(format!("initial elimination rate {rate_ori} outside [0, 1]")));
        }
        if iter_max == 0 {
            return Err(Error::config("iter_max must be at least 1"));
        }
        Ok(EliminationSchedule { rate_ori, iter_max })
    }

    /// `rate_ori − (t / iter_max)·rate_ori`.
    pub fn rate(&self, t: usize) -> Result<f64> {
        if t > self.iter_max {
            return Err(Error::config(format!(
                "iteration {t} beyond schedule end {}",
                self.iter_max
            )));
        }
        Ok(self.rate_ori - (t as f64 / self.iter_max as f64) * self.rate_ori)
    }
}

/// What a Bernoulli draw selects for elimination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EliminationUnit {
    /// One draw per block.
    #[default]
    Block,
    /// One draw per layer; a block goes if any of its layers is drawn.
    Layer,
}

impl std::str::FromStr for EliminationUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(EliminationUnit::Block),
            "layer" => Ok(EliminationUnit::Layer),
            _ => Err(Error::config(format!("unknown elimination unit {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructionTrace {
    /// Strictly increasing.
    pub eliminated: Vec<usize>,
    /// Predicted layer token per eliminated index.
    pub tokens: Vec<u32>,
    /// Selected kind per eliminated index.
    pub kinds: Vec<BlockKind>,
    /// Shape repairs, by block index.
    pub repairs: Vec<Repair>,
}

impl ReconstructionTrace {
    pub fn is_empty(&self) -> bool {
        self.eliminated.is_empty()
    }
}

/// The trained model pair plus prediction settings.
#[derive(Clone, Copy)]
pub struct Guide<'a> {
    pub gpt: &'a Gpt<f32>,
    pub fcn: &'a FcnModel,
    pub vocab: &'a Vocabulary,
    pub temperature: f64,
    pub unit: EliminationUnit,
}

impl<'a> Guide<'a> {
    pub fn new(gpt: &'a Gpt<f32>, fcn: &'a FcnModel, vocab: &'a Vocabulary) -> Result<Self> {
        if gpt.vocab_size() != vocab.size() || fcn.vocab_size() != vocab.size() {
            return Err(Error::config(format!(
                "vocabulary mismatch: gpt {}, fcn {}, vocabulary {}",
                gpt.vocab_size(),
                fcn.vocab_size(),
                vocab.size()
            )));
        }
        Ok(Guide {
            gpt,
            fcn,
            vocab,
            temperature: 1.0,
            unit: EliminationUnit::Block,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_unit(mut self, unit: EliminationUnit) -> Self {
        self.unit = unit;
        self
    }

    fn context_tokens(&self, blocks: &[Block]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for layer in blocks.iter().flat_map(|b| &b.layers) {
            if let Some(t) = self.vocab.token_of_layer(layer)? {
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Next layer token, restricted to non-special tokens.
    fn predict_layer(&self, context: &[u32], rng: &mut Rng) -> Result<u32> {
        let mut logits: Vec<f64> = self
            .gpt
            .next_logits(context)?
            .iter()
            .map(|v| *v as f64)
            .collect();
        for l in logits.iter_mut().take(SPECIAL_TOKENS as usize) {
            *l = f64::NEG_INFINITY;
        }
        if logits.len() <= SPECIAL_TOKENS as usize {
            return Err(Error::config("vocabulary has no layer tokens"));
        }
        sample_from_logits(&logits, self.temperature, rng)
    }
}

/// Draws the eliminated block indices. Always consumes one draw per unit so
/// the stream position does not depend on the rate.
pub fn draw_eliminations(arch: &Architecture, rate: f64, unit: EliminationUnit, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, b) in arch.blocks.iter().enumerate() {
        let draws = match unit {
            EliminationUnit::Block => 1,
            EliminationUnit::Layer => b.layers.len(),
        };
        let mut hit = false;
        for _ in 0..draws {
            hit |= rng.random::<f64>() < rate;
        }
        if hit {
            out.push(i);
        }
    }
    out
}

/// Eliminates and refills blocks of `arch` at `rate`.
pub fn reconstruct(
    arch: &Architecture,
    guide: &Guide<'_>,
    rate: f64,
    rng: &mut Rng,
) -> Result<(Architecture, ReconstructionTrace)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("elimination rate {rate} outside [0, 1]")));
    }
    let eliminated = draw_eliminations(arch, rate, guide.unit, rng);
    if eliminated.is_empty() {
        return Ok((arch.clone(), ReconstructionTrace::default()));
    }
    let k = guide.gpt.config().context_len;
    let mut blocks = arch.blocks.clone();
    let mut repairs: BTreeMap<usize, Repair> = BTreeMap::new();
    let mut trace = ReconstructionTrace {
        eliminated: eliminated.clone(),
        ..Default::default()
    };
    for &i in &eliminated {
        let all = guide.context_tokens(&blocks[..i])?;
        let context = pad_context(&all, k);
        let token = guide.predict_layer(&context, rng)?;
        let kind = guide.fcn.select(&context, token)?;
        let input = if i == 0 { arch.input_shape } else { blocks[i - 1].out_size() };
        let (block, fell_back) = instantiate_or_fallback(kind, input, arch.blocks[i].width);
        repairs.remove(&i);
        if fell_back {
            repairs.insert(i, Repair::Fallback { index: i, requested: kind });
        }
        blocks[i] = block;
        trace.tokens.push(token);
        trace.kinds.push(kind);
        let (rebuilt, fixes) = rechain(blocks, arch.input_shape, arch.num_classes)?;
        for f in fixes {
            repairs.insert(f.index(), f);
        }
        blocks = rebuilt.blocks;
    }
    trace.repairs = repairs.into_values().collect();
    let out = Architecture::new(blocks, arch.input_shape, arch.num_classes)?;
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_errors() {
        let s = EliminationSchedule::new(0.4, 20).unwrap();
        assert_eq!(s.rate(0).unwrap(), 0.4);
        assert_eq!(s.rate(20).unwrap(), 0.0);
        assert!((s.rate(10).unwrap() - 0.2).abs() < 1e-15);
        assert!(s.rate(21).is_err());
        assert!(EliminationSchedule::new(1.5, 20).is_err());
        assert!(EliminationSchedule::new(0.4, 0).is_err());
    }
}
