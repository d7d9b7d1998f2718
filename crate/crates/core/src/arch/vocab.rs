use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    canonical_key, ArchError, Architecture, Block, CanonicalKey, Canonicalization,
    LayerDescriptor, Shape,
};
use crate::library::BlockLibrary;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIAL_TOKENS: u32 = 4;

/// Bijection between canonical layer keys and token ids.
///
/// Ids below [`SPECIAL_TOKENS`] are reserved; layer tokens are assigned in
/// first-seen order starting at [`SPECIAL_TOKENS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    canonicalization: Canonicalization,
    keys: Vec<CanonicalKey>,
    index: HashMap<CanonicalKey, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    canonicalization: Canonicalization,
    keys: Vec<CanonicalKey>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        let mut v = Vocabulary::new(r.canonicalization);
        for k in r.keys {
            v.insert(k);
        }
        v
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            canonicalization: v.canonicalization,
            keys: v.keys,
        }
    }
}

impl Vocabulary {
    pub fn new(canonicalization: Canonicalization) -> Self {
        Vocabulary {
            canonicalization,
            keys: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Builds a vocabulary over every layer of `archs`, in first-seen order.
    pub fn from_architectures<'a>(
        archs: impl IntoIterator<Item = &'a Architecture>,
        canonicalization: Canonicalization,
    ) -> Result<Self, ArchError> {
        let mut v = Vocabulary::new(canonicalization);
        for a in archs {
            v.observe(a)?;
        }
        Ok(v)
    }

    pub fn canonicalization(&self) -> Canonicalization {
        self.canonicalization
    }

    /// Total token count including the reserved ones.
    pub fn size(&self) -> usize {
        SPECIAL_TOKENS as usize + self.keys.len()
    }

    pub fn layer_token_count(&self) -> usize {
        self.keys.len()
    }

    pub fn is_special(token: u32) -> bool {
        token < SPECIAL_TOKENS
    }

    /// Adds `key` if new and returns its token.
    pub fn insert(&mut self, key: CanonicalKey) -> u32 {
        if let Some(&t) = self.index.get(&key) {
            return t;
        }
        let t = SPECIAL_TOKENS + self.keys.len() as u32;
        self.index.insert(key.clone(), t);
        self.keys.push(key);
        t
    }

    pub fn observe(&mut self, arch: &Architecture) -> Result<(), ArchError> {
        for k in arch.canonical_keys(self.canonicalization)? {
            self.insert(k);
        }
        Ok(())
    }

    pub fn token(&self, key: &CanonicalKey) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn token_of_layer(&self, layer: &LayerDescriptor) -> Result<Option<u32>, ArchError> {
        Ok(self.token(&canonical_key(layer, self.canonicalization)?))
    }

    pub fn key(&self, token: u32) -> Option<&CanonicalKey> {
        token
            .checked_sub(SPECIAL_TOKENS)
            .and_then(|i| self.keys.get(i as usize))
    }

    pub fn keys(&self) -> &[CanonicalKey] {
        &self.keys
    }

    /// Hex SHA-256 over the mode and the ordered key list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}\n", self.canonicalization));
        for k in &self.keys {
            h.update(k.to_string());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Token ids of an architecture's layers plus the index of each block's first
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub boundaries: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), ArchError> {
        if self.boundaries.first() != Some(&0) {
            return Err(ArchError::Encoding("first boundary must be 0".into()));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1])
            || *self.boundaries.last().unwrap() >= self.tokens.len()
        {
            return Err(ArchError::Encoding(
                "boundaries must be strictly increasing and inside the sequence".into(),
            ));
        }
        for (index, &token) in self.tokens.iter().enumerate() {
            if vocab.key(token).is_none() {
                return Err(ArchError::UnknownToken { index, token });
            }
        }
        Ok(())
    }
}

/// Encodes every block layer (the classifier head is not tokenized).
pub fn encode_architecture(
    arch: &Architecture,
    vocab: &Vocabulary,
) -> Result<TokenSequence, ArchError> {
    if arch.blocks.is_empty() {
        return Err(ArchError::Encoding("architecture has no blocks".into()));
    }
    let mut tokens = Vec::with_capacity(arch.layer_count());
    let mut boundaries = Vec::with_capacity(arch.depth());
    for block in &arch.blocks {
        boundaries.push(tokens.len());
        for layer in &block.layers {
            let key = canonical_key(layer, vocab.canonicalization())?;
            let t = vocab.token(&key).ok_or_else(|| ArchError::UnknownLayer {
                index: tokens.len(),
                key: key.to_string(),
            })?;
            tokens.push(t);
        }
    }
    Ok(TokenSequence { tokens, boundaries })
}

/// Inverse of [`encode_architecture`]. Layer ids are renumbered and sizes are
/// re-derived by chaining from `input_shape`; block kinds are recovered by
/// matching against the standard block library (unmatched blocks become
/// `Cell`).
pub fn decode_architecture(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    input_shape: Shape,
    num_classes: u32,
) -> Result<Architecture, ArchError> {
    if seq.tokens.is_empty() {
        return Err(ArchError::Encoding("empty token sequence".into()));
    }
    seq.validate(vocab)?;
    let library = BlockLibrary::standard();
    let mode = vocab.canonicalization();
    let mut current = input_shape;
    let mut blocks = Vec::with_capacity(seq.boundaries.len());
    for (b, &start) in seq.boundaries.iter().enumerate() {
        let end = seq.boundaries.get(b + 1).copied().unwrap_or(seq.tokens.len());
        let mut layers = Vec::with_capacity(end - start);
        for index in start..end {
            let key = vocab
                .key(seq.tokens[index])
                .expect("validated token sequence");
            if key.in_size.channels != current.channels
                || key
                    .in_size
                    .spatial
                    .is_some_and(|(h, w)| (h, w) != (current.height, current.width))
            {
                return Err(ArchError::Shape {
                    index,
                    reason: format!("expects input {} but receives {}", key.in_size, current),
                });
            }
            let layer = LayerDescriptor::derived(index, current, key.out_size.channels, key.op())
                .map_err(|e| match e {
                    ArchError::Shape { reason, .. } => ArchError::Shape { index, reason },
                    other => other,
                })?;
            if let Some((h, w)) = key.out_size.spatial {
                if (h, w) != (layer.out_size.height, layer.out_size.width) {
                    return Err(ArchError::Shape {
                        index,
                        reason: format!(
                            "token declares output {} but geometry gives {}",
                            key.out_size, layer.out_size
                        ),
                    });
                }
            }
            current = layer.out_size;
            layers.push(layer);
        }
        let kind = library.recognize(&layers, mode);
        blocks.push(Block {
            kind,
            width: current.channels,
            layers,
        });
    }
    Architecture::new(blocks, input_shape, num_classes)
}
