use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArchError, Category, LayerDescriptor, Shape};

/// Block vocabulary. The first fifteen variants are the block library;
/// `Cell` marks flattened benchmark cells that do not come from the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    ConvNormActivation,
    SqueezeExcitation,
    Inception,
    Avgpool,
    ResBottleneckBlock,
    Stem,
    Bottleneck,
    Basicblock,
    BottleneckResNeXt,
    InvertedResidual,
    BottleneckWideResNet,
    Maxpool,
    BatchNormal,
    Relu,
    Conv,
    Cell,
}

impl BlockKind {
    pub const LIBRARY: [BlockKind; 15] = [
        BlockKind::ConvNormActivation,
        BlockKind::SqueezeExcitation,
        BlockKind::Inception,
        BlockKind::Avgpool,
        BlockKind::ResBottleneckBlock,
        BlockKind::Stem,
        BlockKind::Bottleneck,
        BlockKind::Basicblock,
        BlockKind::BottleneckResNeXt,
        BlockKind::InvertedResidual,
        BlockKind::BottleneckWideResNet,
        BlockKind::Maxpool,
        BlockKind::BatchNormal,
        BlockKind::Relu,
        BlockKind::Conv,
    ];

    /// Position in the standard library order, `None` for `Cell`.
    pub fn library_index(self) -> Option<usize> {
        BlockKind::LIBRARY.iter().position(|k| *k == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::ConvNormActivation => "ConvNormActivation",
            BlockKind::SqueezeExcitation => "SqueezeExcitation",
            BlockKind::Inception => "Inception",
            BlockKind::Avgpool => "Avgpool",
            BlockKind::ResBottleneckBlock => "ResBottleneckBlock",
            BlockKind::Stem => "Stem",
            BlockKind::Bottleneck => "Bottleneck",
            BlockKind::Basicblock => "Basicblock",
            BlockKind::BottleneckResNeXt => "BottleneckResNeXt",
            BlockKind::InvertedResidual => "InvertedResidual",
            BlockKind::BottleneckWideResNet => "BottleneckWideResNet",
            BlockKind::Maxpool => "Maxpool",
            BlockKind::BatchNormal => "BatchNormal",
            BlockKind::Relu => "Relu",
            BlockKind::Conv => "Conv",
            BlockKind::Cell => "Cell",
        }
    }

    /// Layer-category template. `None` for `Cell`, whose layers may be any
    /// sequence of convolutions and poolings.
    pub fn template(self) -> Option<&'static [Category]> {
        use Category::*;
        Some(match self {
            BlockKind::ConvNormActivation => &[Conv, Other, Other],
            BlockKind::SqueezeExcitation => &[Conv, Other, Conv, Other],
            BlockKind::Inception => &[Conv, Conv, Conv],
            BlockKind::Avgpool | BlockKind::Maxpool => &[Pool],
            BlockKind::ResBottleneckBlock => &[Conv, Conv, Conv, Other],
            BlockKind::Stem => &[Conv, Other],
            BlockKind::Bottleneck => &[Conv, Conv, Conv],
            BlockKind::Basicblock => &[Conv, Other, Conv],
            BlockKind::BottleneckResNeXt => &[Conv, Conv, Conv, Other],
            BlockKind::InvertedResidual => &[Conv, Other, Conv, Conv],
            BlockKind::BottleneckWideResNet => &[Other, Other, Conv],
            BlockKind::BatchNormal | BlockKind::Relu => &[Other],
            BlockKind::Conv => &[Conv],
            BlockKind::Cell => return None,
        })
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BlockKind::LIBRARY
            .iter()
            .chain(std::iter::once(&BlockKind::Cell))
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| format!("unknown block kind {s:?}"))
    }
}

/// A typed group of consecutive layers. `width` is the block's output
/// channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    #[serde(rename = "width")]
    pub width: u32,
    pub layers: Vec<LayerDescriptor>,
}

impl Block {
    pub fn in_size(&self) -> Shape {
        self.layers[0].in_size
    }

    pub fn out_size(&self) -> Shape {
        self.layers[self.layers.len() - 1].out_size
    }

    /// Checks layer chaining, per-layer invariants and the kind's template.
    pub fn validate(&self) -> Result<(), ArchError> {
        let Some(first) = self.layers.first() else {
            return Err(ArchError::Encoding(format!("empty {} block", self.kind)));
        };
        for w in self.layers.windows(2) {
            if w[0].out_size != w[1].in_size {
                return Err(ArchError::Shape {
                    index: w[1].id,
                    reason: format!(
                        "expects input {} but previous layer produces {}",
                        w[1].in_size, w[0].out_size
                    ),
                });
            }
        }
        for l in &self.layers {
            l.validate()?;
        }
        let cats: Vec<Category> = self.layers.iter().map(|l| l.category()).collect();
        match self.kind.template() {
            Some(t) if t != cats.as_slice() => {
                return Err(ArchError::Encoding(format!(
                    "{} block at layer {} has categories {:?}, template is {:?}",
                    self.kind, first.id, cats, t
                )))
            }
            None if cats
                .iter()
                .any(|c| !matches!(c, Category::Conv | Category::Pool)) =>
            {
                return Err(ArchError::Encoding(format!(
                    "cell block at layer {} may only hold conv/pool layers",
                    first.id
                )))
            }
            _ => {}
        }
        if self.width != self.out_size().channels {
            return Err(ArchError::Encoding(format!(
                "{} block at layer {}: width {} differs from output channels {}",
                self.kind,
                first.id,
                self.width,
                self.out_size().channels
            )));
        }
        Ok(())
    }
}
