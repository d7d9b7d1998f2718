//! Architecture data model and its token encoding.

mod architecture;
mod block;
mod key;
mod layer;
mod shape;
mod vocab;

pub use architecture::{Architecture, DepthBounds};
pub use block::{Block, BlockKind};
pub use key::{canonical_key, CanonicalKey, Canonicalization, KeyDetail, SizeKey};
pub use layer::{
    Category, LayerDescriptor, LayerOp, PoolType, RawLayer, Shape, Window, OTHER_LAYER_NAMES,
};
pub use shape::{infer_out_size, window_output_len};
pub use vocab::{
    decode_architecture, encode_architecture, TokenSequence, Vocabulary, BOS, EOS, PAD, SEP,
    SPECIAL_TOKENS,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("malformed layer or architecture: {0}")]
    Encoding(String),
    #[error("layer {index} has no token in the frozen vocabulary ({key})")]
    UnknownLayer { index: usize, key: String },
    #[error("token {token} at position {index} is not a layer token")]
    UnknownToken { index: usize, token: u32 },
    #[error("shape error at layer {index}: {reason}")]
    Shape { index: usize, reason: String },
    #[error("block kind {kind} cannot be instantiated on input {shape}: {reason}")]
    NotInstantiable {
        kind: BlockKind,
        shape: Shape,
        reason: String,
    },
}
