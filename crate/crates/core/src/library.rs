//! The block library: fifteen block kinds, each a fixed layer template
//! parameterized by the input shape and an output width.
//!
//! Every template instantiates for any positive width on inputs with
//! height and width of at least [`MIN_SPATIAL`]. Downsampling kinds halve
//! the spatial size only while it is at least [`DOWNSAMPLE_MIN`], so chains
//! that start at or above [`MIN_SPATIAL`] never fall below it.

use num_integer::gcd;
use serde::{Deserialize, Serialize};

use crate::arch::{
    canonical_key, ArchError, Architecture, Block, BlockKind, Canonicalization, LayerDescriptor,
    PoolType, Shape, Window,
};

pub const MIN_SPATIAL: u32 = 4;
pub const DOWNSAMPLE_MIN: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibraryEntry {
    pub kind: BlockKind,
    /// Architecture family the block was extracted from.
    pub source: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLibrary {
    entries: Vec<LibraryEntry>,
}

fn source_of(kind: BlockKind) -> &'static str {
    match kind {
        BlockKind::ConvNormActivation | BlockKind::SqueezeExcitation => "EfficientNet",
        BlockKind::Inception | BlockKind::Avgpool => "GoogleNet",
        BlockKind::ResBottleneckBlock | BlockKind::Stem => "RegNet",
        BlockKind::Bottleneck | BlockKind::Basicblock => "ResNet",
        BlockKind::BottleneckResNeXt => "ResNeXt",
        BlockKind::InvertedResidual => "ShuffleNet",
        BlockKind::BottleneckWideResNet => "WideResNet",
        _ => "other",
    }
}

impl Default for BlockLibrary {
    fn default() -> Self {
        Self::standard()
    }
}

impl BlockLibrary {
    pub fn standard() -> Self {
        BlockLibrary {
            entries: BlockKind::LIBRARY
                .iter()
                .map(|&kind| LibraryEntry {
                    kind,
                    source: source_of(kind),
                })
                .collect(),
        }
    }

    /// The standard library with entries listed in `order`, which must be a
    /// permutation of the fifteen library kinds.
    pub fn with_order(order: &[BlockKind]) -> Result<Self, ArchError> {
        let mut sorted = order.to_vec();
        sorted.sort();
        let mut expected = BlockKind::LIBRARY.to_vec();
        expected.sort();
        if sorted != expected {
            return Err(ArchError::Encoding(
                "library order must be a permutation of the library kinds".into(),
            ));
        }
        Ok(BlockLibrary {
            entries: order
                .iter()
                .map(|&kind| LibraryEntry {
                    kind,
                    source: source_of(kind),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.entries.iter().map(|e| e.kind).collect()
    }

    pub fn kind_at(&self, index: usize) -> Option<BlockKind> {
        self.entries.get(index).map(|e| e.kind)
    }

    pub fn index_of(&self, kind: BlockKind) -> Option<usize> {
        self.entries.iter().position(|e| e.kind == kind)
    }

    pub fn contains(&self, kind: BlockKind) -> bool {
        self.index_of(kind).is_some()
    }

    pub fn instantiate(
        &self,
        kind: BlockKind,
        input: Shape,
        width: u32,
    ) -> Result<Block, ArchError> {
        if !self.contains(kind) {
            return Err(ArchError::NotInstantiable {
                kind,
                shape: input,
                reason: "not a library kind".into(),
            });
        }
        instantiate(kind, input, width)
    }

    /// Finds the library kind whose instantiation reproduces `layers`
    /// exactly (under `mode`), or `Cell` if none does.
    pub fn recognize(&self, layers: &[LayerDescriptor], mode: Canonicalization) -> BlockKind {
        let Some(first) = layers.first() else {
            return BlockKind::Cell;
        };
        let width = layers[layers.len() - 1].out_size.channels;
        let keys: Option<Vec<_>> = layers.iter().map(|l| canonical_key(l, mode).ok()).collect();
        let Some(keys) = keys else {
            return BlockKind::Cell;
        };
        for e in &self.entries {
            let Ok(block) = instantiate(e.kind, first.in_size, width) else {
                continue;
            };
            if block.layers.len() != keys.len() {
                continue;
            }
            let same = block
                .layers
                .iter()
                .zip(&keys)
                .all(|(l, k)| canonical_key(l, mode).ok().as_ref() == Some(k));
            if same {
                return e.kind;
            }
        }
        BlockKind::Cell
    }
}

/// Kinds whose output channel count always equals their input channel count.
pub fn preserves_channels(kind: BlockKind) -> bool {
    matches!(
        kind,
        BlockKind::Avgpool | BlockKind::Maxpool | BlockKind::BatchNormal | BlockKind::Relu
    )
}

struct Builder {
    layers: Vec<LayerDescriptor>,
    shape: Shape,
}

impl Builder {
    fn new(shape: Shape) -> Self {
        Builder {
            layers: Vec::new(),
            shape,
        }
    }

    fn push(&mut self, l: Result<LayerDescriptor, ArchError>) -> Result<&mut Self, ArchError> {
        let l = l?;
        self.shape = l.out_size;
        self.layers.push(l);
        Ok(self)
    }

    fn conv(
        &mut self,
        out: u32,
        k: u32,
        stride: u32,
        groups: u32,
        bias: bool,
    ) -> Result<&mut Self, ArchError> {
        let id = self.layers.len();
        let w = Window::square(k, stride, k / 2).with_bias(bias);
        let shape = self.shape;
        self.push(LayerDescriptor::conv(id, shape, out, w, groups))
    }

    fn pool(&mut self, t: PoolType) -> Result<&mut Self, ArchError> {
        let id = self.layers.len();
        let shape = self.shape;
        let w = if downsamples(shape) {
            Window::square(2, 2, 0)
        } else {
            Window::square(1, 1, 0)
        };
        self.push(LayerDescriptor::pool(id, shape, t, w))
    }

    fn other(&mut self, name: &str) -> Result<&mut Self, ArchError> {
        let id = self.layers.len();
        let shape = self.shape;
        self.push(LayerDescriptor::other(id, shape, name))
    }
}

fn downsamples(s: Shape) -> bool {
    s.height >= DOWNSAMPLE_MIN && s.width >= DOWNSAMPLE_MIN
}

/// Instantiates a library kind on `input`. For channel-preserving kinds the
/// requested width is ignored and the block's width equals the input
/// channel count.
pub fn instantiate(kind: BlockKind, input: Shape, width: u32) -> Result<Block, ArchError> {
    let not = |reason: &str| ArchError::NotInstantiable {
        kind,
        shape: input,
        reason: reason.to_string(),
    };
    if kind == BlockKind::Cell {
        return Err(not("cells are not library kinds"));
    }
    if (width == 0 && !preserves_channels(kind)) || input.channels == 0 {
        return Err(not("width and channels must be positive"));
    }
    if input.height < MIN_SPATIAL || input.width < MIN_SPATIAL {
        return Err(not("spatial size below the library minimum"));
    }
    let c = input.channels;
    let w = width;
    let s = if downsamples(input) { 2 } else { 1 };
    let mut b = Builder::new(input);
    match kind {
        BlockKind::ConvNormActivation => {
            b.conv(w, 3, 1, 1, false)?.other("batchnorm")?.other("relu")?;
        }
        BlockKind::SqueezeExcitation => {
            let r = (w / 4).max(1);
            b.conv(r, 1, 1, 1, true)?
                .other("relu")?
                .conv(w, 1, 1, 1, true)?
                .other("sigmoid")?;
        }
        BlockKind::Inception => {
            b.conv(w, 1, 1, 1, false)?
                .conv(w, 3, 1, 1, false)?
                .conv(w, 5, 1, 1, false)?;
        }
        BlockKind::Avgpool => {
            b.pool(PoolType::Avg)?;
        }
        BlockKind::ResBottleneckBlock => {
            let g = gcd(w, 8);
            b.conv(w, 1, 1, 1, false)?
                .conv(w, 3, 1, g, false)?
                .conv(w, 1, 1, 1, false)?
                .other("batchnorm")?;
        }
        BlockKind::Stem => {
            b.conv(w, 3, s, 1, true)?.other("relu")?;
        }
        BlockKind::Bottleneck => {
            let m = (w / 4).max(1);
            b.conv(m, 1, 1, 1, false)?
                .conv(m, 3, 1, 1, false)?
                .conv(w, 1, 1, 1, false)?;
        }
        BlockKind::Basicblock => {
            b.conv(w, 3, 1, 1, false)?
                .other("relu")?
                .conv(w, 3, 1, 1, false)?;
        }
        BlockKind::BottleneckResNeXt => {
            let m = (w / 2).max(1);
            let g = gcd(m, 4);
            b.conv(m, 1, 1, 1, false)?
                .conv(m, 3, 1, g, false)?
                .conv(w, 1, 1, 1, false)?
                .other("relu")?;
        }
        BlockKind::InvertedResidual => {
            let e = 2 * c;
            b.conv(e, 1, 1, 1, false)?
                .other("relu")?
                .conv(e, 3, 1, e, false)?
                .conv(w, 1, 1, 1, false)?;
        }
        BlockKind::BottleneckWideResNet => {
            b.other("batchnorm")?
                .other("relu")?
                .conv(w, 3, 1, 1, false)?;
        }
        BlockKind::Maxpool => {
            b.pool(PoolType::Max)?;
        }
        BlockKind::BatchNormal => {
            b.other("batchnorm")?;
        }
        BlockKind::Relu => {
            b.other("relu")?;
        }
        BlockKind::Conv => {
            b.conv(w, 3, 1, 1, false)?;
        }
        BlockKind::Cell => unreachable!(),
    }
    let width = b.shape.channels;
    Ok(Block {
        kind,
        width,
        layers: b.layers,
    })
}

/// Shape-preserving 3x3 convolution used when a kind cannot be instantiated.
pub fn fallback_block(input: Shape) -> Block {
    let layer = LayerDescriptor::conv(0, input, input.channels, Window::square(3, 1, 1), 1)
        .expect("same-padded 3x3 convolution fits any positive input");
    Block {
        kind: BlockKind::Conv,
        width: input.channels,
        layers: vec![layer],
    }
}

/// Instantiates `kind`, or the fallback block when that is impossible.
/// The flag reports whether the fallback was used.
pub fn instantiate_or_fallback(kind: BlockKind, input: Shape, width: u32) -> (Block, bool) {
    match instantiate(kind, input, width) {
        Ok(b) => (b, false),
        Err(_) => (fallback_block(input), true),
    }
}

/// A change made to restore shape chaining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Repair {
    /// Block re-instantiated on a new input shape, keeping kind and width.
    Reshaped { index: usize, kind: BlockKind },
    /// Requested kind could not be instantiated; the fallback block was used.
    Fallback { index: usize, requested: BlockKind },
}

impl Repair {
    pub fn index(&self) -> usize {
        match self {
            Repair::Reshaped { index, .. } | Repair::Fallback { index, .. } => *index,
        }
    }
}

/// Builds an architecture from (kind, width) pairs, falling back where a kind
/// cannot be instantiated.
pub fn assemble(
    spec: &[(BlockKind, u32)],
    input: Shape,
    num_classes: u32,
) -> Result<(Architecture, Vec<Repair>), ArchError> {
    let mut blocks = Vec::with_capacity(spec.len());
    let mut repairs = Vec::new();
    let mut current = input;
    for (index, &(kind, width)) in spec.iter().enumerate() {
        let (block, fell_back) = instantiate_or_fallback(kind, current, width);
        if fell_back {
            repairs.push(Repair::Fallback {
                index,
                requested: kind,
            });
        }
        current = block.out_size();
        blocks.push(block);
    }
    Ok((Architecture::new(blocks, input, num_classes)?, repairs))
}

/// Restores chaining after blocks were replaced, inserted or removed: every
/// block whose input no longer matches is re-instantiated with its kind and
/// width (or replaced by the fallback block).
pub fn rechain(
    blocks: Vec<Block>,
    input: Shape,
    num_classes: u32,
) -> Result<(Architecture, Vec<Repair>), ArchError> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut repairs = Vec::new();
    let mut current = input;
    for (index, block) in blocks.into_iter().enumerate() {
        let block = if block.in_size() == current {
            block
        } else if block.kind == BlockKind::Cell {
            repairs.push(Repair::Fallback {
                index,
                requested: block.kind,
            });
            fallback_block(current)
        } else {
            match instantiate(block.kind, current, block.width) {
                Ok(b) => {
                    repairs.push(Repair::Reshaped {
                        index,
                        kind: block.kind,
                    });
                    b
                }
                Err(_) => {
                    repairs.push(Repair::Fallback {
                        index,
                        requested: block.kind,
                    });
                    fallback_block(current)
                }
            }
        };
        current = block.out_size();
        out.push(block);
    }
    Ok((Architecture::new(out, input, num_classes)?, repairs))
}
