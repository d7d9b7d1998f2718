use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    canonical_key, ArchError, Block, BlockKind, CanonicalKey, Canonicalization, LayerDescriptor,
    LayerOp, Shape,
};

/// Inclusive bounds on the number of blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for DepthBounds {
    fn default() -> Self {
        DepthBounds { min: 10, max: 20 }
    }
}

impl DepthBounds {
    pub fn contains(&self, depth: usize) -> bool {
        (self.min..=self.max).contains(&depth)
    }
}

/// A chain of blocks followed by a fully connected classifier.
///
/// Layer ids are renumbered on construction so that they run 0.. over the
/// blocks in order; the head takes the next id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr", into = "ArchitectureRepr")]
pub struct Architecture {
    pub blocks: Vec<Block>,
    pub head: LayerDescriptor,
    pub input_shape: Shape,
    pub num_classes: u32,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureRepr {
    input_shape: Shape,
    num_classes: u32,
    blocks: Vec<Block>,
}

impl TryFrom<ArchitectureRepr> for Architecture {
    type Error = ArchError;

    fn try_from(r: ArchitectureRepr) -> Result<Self, ArchError> {
        Architecture::new(r.blocks, r.input_shape, r.num_classes)
    }
}

impl From<Architecture> for ArchitectureRepr {
    fn from(a: Architecture) -> Self {
        ArchitectureRepr {
            input_shape: a.input_shape,
            num_classes: a.num_classes,
            blocks: a.blocks,
        }
    }
}

impl Architecture {
    /// Assembles and validates an architecture. Depth bounds are not checked
    /// here; see [`Architecture::check_depth`].
    pub fn new(
        mut blocks: Vec<Block>,
        input_shape: Shape,
        num_classes: u32,
    ) -> Result<Self, ArchError> {
        if blocks.is_empty() {
            return Err(ArchError::Encoding("architecture has no blocks".into()));
        }
        if num_classes == 0 || !input_shape.is_positive() {
            return Err(ArchError::Encoding(
                "input shape and class count must be positive".into(),
            ));
        }
        let mut id = 0;
        for b in &mut blocks {
            for l in &mut b.layers {
                l.id = id;
                id += 1;
            }
        }
        let mut expected = input_shape;
        for b in &blocks {
            b.validate()?;
            if b.in_size() != expected {
                return Err(ArchError::Shape {
                    index: b.layers[0].id,
                    reason: format!(
                        "block expects input {} but receives {}",
                        b.in_size(),
                        expected
                    ),
                });
            }
            expected = b.out_size();
        }
        let features = u32::try_from(expected.numel())
            .map_err(|_| ArchError::Encoding("flattened feature count overflows".into()))?;
        let head = LayerDescriptor::fc(id, features, num_classes);
        Ok(Architecture {
            blocks,
            head,
            input_shape,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers.len()).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerDescriptor> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }

    pub fn output_shape(&self) -> Shape {
        self.blocks
            .last()
            .map(|b| b.out_size())
            .unwrap_or(self.input_shape)
    }

    pub fn check_depth(&self, bounds: DepthBounds) -> Result<(), ArchError> {
        if bounds.contains(self.depth()) {
            Ok(())
        } else {
            Err(ArchError::Encoding(format!(
                "depth {} outside [{}, {}]",
                self.depth(),
                bounds.min,
                bounds.max
            )))
        }
    }

    /// Re-runs full validation, including the head.
    pub fn validate(&self) -> Result<(), ArchError> {
        let rebuilt = Architecture::new(self.blocks.clone(), self.input_shape, self.num_classes)?;
        if rebuilt != *self {
            return Err(ArchError::Encoding(
                "layer ids or head inconsistent with blocks".into(),
            ));
        }
        Ok(())
    }

    pub fn canonical_keys(&self, mode: Canonicalization) -> Result<Vec<CanonicalKey>, ArchError> {
        self.layers().map(|l| canonical_key(l, mode)).collect()
    }

    /// Hex SHA-256 over the full canonical key sequence and class count.
    /// Used as the fitness cache key and the tabular lookup key.
    pub fn canonical_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("in={};classes={}\n", self.input_shape, self.num_classes));
        for l in self.layers() {
            // layers inside a validated architecture always canonicalize
            let k = canonical_key(l, Canonicalization::Full).expect("validated layer");
            h.update(k.to_string());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Rough trainable-parameter count of the materialized network.
    pub fn param_count(&self) -> u64 {
        self.layers()
            .chain(std::iter::once(&self.head))
            .map(|l| match &l.op {
                LayerOp::Conv { window, groups } => {
                    let cin = (l.in_size.channels / groups) as u64;
                    let k = window.kernel.0 as u64 * window.kernel.1 as u64;
                    let cout = l.out_size.channels as u64;
                    cin * k * cout + if window.bias_used { cout } else { 0 }
                }
                LayerOp::Fc => {
                    l.in_size.channels as u64 * l.out_size.channels as u64
                        + l.out_size.channels as u64
                }
                LayerOp::Other { name, .. } if name == "batchnorm" => {
                    2 * l.in_size.channels as u64
                }
                _ => 0,
            })
            .sum()
    }

    /// Indented multi-line description for reports.
    pub fn pretty(&self) -> String {
        let mut s = format!(
            "input {} -> {} classes, {} blocks, {} layers\n",
            self.input_shape,
            self.num_classes,
            self.depth(),
            self.layer_count()
        );
        for (i, b) in self.blocks.iter().enumerate() {
            s.push_str(&format!(
                "  [{i:2}] {:<22} width {:<4} {} -> {}\n",
                b.kind.name(),
                b.width,
                b.in_size(),
                b.out_size()
            ));
        }
        s.push_str(&format!(
            "  head fc {} -> {}\n",
            self.head.in_size.channels, self.num_classes
        ));
        s
    }
}
