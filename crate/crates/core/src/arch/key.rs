use std::fmt;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use super::{ArchError, Category, LayerDescriptor, LayerOp, PoolType, Shape};

/// Which size information participates in a canonical key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Canonicalization {
    #[default]
    Full,
    ChannelsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SizeKey {
    pub channels: u32,
    pub spatial: Option<(u32, u32)>,
}

impl SizeKey {
    fn of(shape: Shape, mode: Canonicalization) -> Self {
        SizeKey {
            channels: shape.channels,
            spatial: match mode {
                Canonicalization::Full => Some((shape.height, shape.width)),
                Canonicalization::ChannelsOnly => None,
            },
        }
    }
}

impl fmt::Display for SizeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.spatial {
            Some((h, w)) => write!(f, "{}x{}x{}", self.channels, h, w),
            None => write!(f, "{}", self.channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyDetail {
    Conv {
        kernel: (u32, u32),
        stride: (u32, u32),
        padding: [u32; 4],
        dilation: u32,
        groups: u32,
        bias_used: bool,
    },
    Pool {
        pool_type: PoolType,
        kernel: (u32, u32),
        stride: (u32, u32),
        padding: [u32; 4],
        dilation: u32,
        bias_used: bool,
    },
    Fc,
    Other {
        name: String,
        value: Vec<OrderedFloat<f64>>,
    },
}

/// Position-independent identity of a layer structure: every
/// category-relevant field except `id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalKey {
    pub in_size: SizeKey,
    pub out_size: SizeKey,
    pub detail: KeyDetail,
}

impl CanonicalKey {
    pub fn category(&self) -> Category {
        match self.detail {
            KeyDetail::Conv { .. } => Category::Conv,
            KeyDetail::Pool { .. } => Category::Pool,
            KeyDetail::Fc => Category::Fc,
            KeyDetail::Other { .. } => Category::Other,
        }
    }

    /// Rebuilds the layer op this key describes.
    pub fn op(&self) -> LayerOp {
        use super::Window;
        match &self.detail {
            KeyDetail::Conv {
                kernel,
                stride,
                padding,
                dilation,
                groups,
                bias_used,
            } => LayerOp::Conv {
                window: Window {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    dilation: *dilation,
                    bias_used: *bias_used,
                },
                groups: *groups,
            },
            KeyDetail::Pool {
                pool_type,
                kernel,
                stride,
                padding,
                dilation,
                bias_used,
            } => LayerOp::Pool {
                pool_type: *pool_type,
                window: Window {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    dilation: *dilation,
                    bias_used: *bias_used,
                },
            },
            KeyDetail::Fc => LayerOp::Fc,
            KeyDetail::Other { name, value } => LayerOp::Other {
                name: name.clone(),
                value: value.iter().map(|v| v.0).collect(),
            },
        }
    }
}

/// Stable text form; used for hashing and human-readable dumps.
impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.detail {
            KeyDetail::Conv {
                kernel,
                stride,
                padding,
                dilation,
                groups,
                bias_used,
            } => write!(
                f,
                "conv|{}|{}|k{}x{}|s{}x{}|p{},{},{},{}|d{}|g{}|b{}",
                self.in_size,
                self.out_size,
                kernel.0,
                kernel.1,
                stride.0,
                stride.1,
                padding[0],
                padding[1],
                padding[2],
                padding[3],
                dilation,
                groups,
                *bias_used as u8
            ),
            KeyDetail::Pool {
                pool_type,
                kernel,
                stride,
                padding,
                dilation,
                bias_used,
            } => write!(
                f,
                "pool|{:?}|{}|{}|k{}x{}|s{}x{}|p{},{},{},{}|d{}|b{}",
                pool_type,
                self.in_size,
                self.out_size,
                kernel.0,
                kernel.1,
                stride.0,
                stride.1,
                padding[0],
                padding[1],
                padding[2],
                padding[3],
                dilation,
                *bias_used as u8
            ),
            KeyDetail::Fc => write!(f, "fc|{}|{}", self.in_size, self.out_size),
            KeyDetail::Other { name, value } => {
                write!(f, "other|{}|{}|{}|", name, self.in_size, self.out_size)?;
                for (i, v) in value.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{:e}", v.0)?;
                }
                Ok(())
            }
        }
    }
}

/// Canonical key of a layer under `mode`; fails if the layer violates its
/// category invariants.
pub fn canonical_key(
    layer: &LayerDescriptor,
    mode: Canonicalization,
) -> Result<CanonicalKey, ArchError> {
    layer.validate()?;
    let detail = match &layer.op {
        LayerOp::Conv { window, groups } => KeyDetail::Conv {
            kernel: window.kernel,
            stride: window.stride,
            padding: window.padding,
            dilation: window.dilation,
            groups: *groups,
            bias_used: window.bias_used,
        },
        LayerOp::Pool { pool_type, window } => KeyDetail::Pool {
            pool_type: *pool_type,
            kernel: window.kernel,
            stride: window.stride,
            padding: window.padding,
            dilation: window.dilation,
            bias_used: window.bias_used,
        },
        LayerOp::Fc => KeyDetail::Fc,
        LayerOp::Other { name, value } => KeyDetail::Other {
            name: name.clone(),
            // -0.0 and 0.0 must not produce distinct keys
            value: value
                .iter()
                .map(|v| OrderedFloat(if *v == 0.0 { 0.0 } else { *v }))
                .collect(),
        },
    };
    Ok(CanonicalKey {
        in_size: SizeKey::of(layer.in_size, mode),
        out_size: SizeKey::of(layer.out_size, mode),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Window;

    fn conv(id: usize, groups: u32) -> LayerDescriptor {
        LayerDescriptor::conv(id, Shape::new(4, 32, 32), 16, Window::square(3, 1, 1), groups)
            .unwrap()
    }

    #[test]
    fn id_is_excluded() {
        let a = canonical_key(&conv(0, 1), Canonicalization::Full).unwrap();
        let b = canonical_key(&conv(17, 1), Canonicalization::Full).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), b.to_string());
    }

    #[test]
    fn groups_distinguish() {
        let a = canonical_key(&conv(0, 1), Canonicalization::Full).unwrap();
        let b = canonical_key(&conv(0, 2), Canonicalization::Full).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pool_type_distinguishes() {
        let mk = |t| {
            LayerDescriptor::pool(0, Shape::new(16, 32, 32), t, Window::square(2, 2, 0)).unwrap()
        };
        let a = canonical_key(&mk(PoolType::Max), Canonicalization::Full).unwrap();
        let b = canonical_key(&mk(PoolType::Avg), Canonicalization::Full).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn channels_only_drops_spatial() {
        let a = LayerDescriptor::other(0, Shape::new(8, 32, 32), "relu").unwrap();
        let b = LayerDescriptor::other(0, Shape::new(8, 4, 4), "relu").unwrap();
        let full = |l| canonical_key(l, Canonicalization::Full).unwrap();
        let chan = |l| canonical_key(l, Canonicalization::ChannelsOnly).unwrap();
        assert_ne!(full(&a), full(&b));
        assert_eq!(chan(&a), chan(&b));
    }

    #[test]
    fn malformed_layer_is_encoding_error() {
        let mut l = conv(0, 1);
        l.op = LayerOp::Conv {
            window: Window::square(3, 1, 1),
            groups: 3,
        };
        assert!(matches!(
            canonical_key(&l, Canonicalization::Full),
            Err(ArchError::Encoding(_))
        ));
    }

    #[test]
    fn key_rebuilds_op() {
        let l = conv(3, 2);
        let k = canonical_key(&l, Canonicalization::Full).unwrap();
        assert_eq!(k.op(), l.op);
    }
}
