use std::fmt;

use serde::{Deserialize, Serialize};

use super::ArchError;

/// Names accepted for `Other` layers. Every registered layer preserves its
/// input shape.
pub const OTHER_LAYER_NAMES: &[&str] = &["relu", "batchnorm", "sigmoid"];

/// (channels, height, width)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct Shape {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

impl Shape {
    pub const fn new(channels: u32, height: u32, width: u32) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> u64 {
        self.channels as u64 * self.height as u64 * self.width as u64
    }

    pub fn with_channels(self, channels: u32) -> Self {
        Self { channels, ..self }
    }

    pub fn is_positive(&self) -> bool {
        self.channels > 0 && self.height > 0 && self.width > 0
    }
}

impl From<[u32; 3]> for Shape {
    fn from(v: [u32; 3]) -> Self {
        Shape::new(v[0], v[1], v[2])
    }
}

impl From<Shape> for [u32; 3] {
    fn from(s: Shape) -> Self {
        [s.channels, s.height, s.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Conv,
    Pool,
    Fc,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PoolType {
    Max,
    Avg,
}

/// Sliding-window geometry shared by convolution and pooling layers.
/// Padding is (top, bottom, left, right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: (u32, u32),
    pub stride: (u32, u32),
    pub padding: [u32; 4],
    pub dilation: u32,
    pub bias_used: bool,
}

impl Window {
    pub fn square(kernel: u32, stride: u32, pad: u32) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: [pad; 4],
            dilation: 1,
            bias_used: false,
        }
    }

    pub fn with_bias(mut self, bias_used: bool) -> Self {
        self.bias_used = bias_used;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    /// Output channel count (the filter count) is carried by `out_size`.
    Conv { window: Window, groups: u32 },
    Pool { pool_type: PoolType, window: Window },
    Fc,
    Other { name: String, value: Vec<f64> },
}

/// One network layer. Field presence per category is enforced by [`LayerOp`];
/// the flat [`RawLayer`] form is what gets serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerDescriptor {
    pub id: usize,
    pub in_size: Shape,
    pub out_size: Shape,
    pub op: LayerOp,
}

impl LayerDescriptor {
    pub fn category(&self) -> Category {
        match self.op {
            LayerOp::Conv { .. } => Category::Conv,
            LayerOp::Pool { .. } => Category::Pool,
            LayerOp::Fc => Category::Fc,
            LayerOp::Other { .. } => Category::Other,
        }
    }

    pub fn window(&self) -> Option<&Window> {
        match &self.op {
            LayerOp::Conv { window, .. } | LayerOp::Pool { window, .. } => Some(window),
            _ => None,
        }
    }

    pub fn other_name(&self) -> Option<&str> {
        match &self.op {
            LayerOp::Other { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Builds a layer whose `out_size` is derived from `in_size` and the op.
    /// For convolutions and FC layers `out_channels` is the declared filter
    /// count; other categories ignore it.
    pub fn derived(
        id: usize,
        in_size: Shape,
        out_channels: u32,
        op: LayerOp,
    ) -> Result<Self, ArchError> {
        let mut layer = LayerDescriptor {
            id,
            in_size,
            out_size: in_size.with_channels(out_channels),
            op,
        };
        if layer.category() == Category::Fc {
            layer.out_size = Shape::new(out_channels, 1, 1);
        }
        layer.out_size = super::infer_out_size(&layer)?;
        Ok(layer)
    }

    pub fn conv(
        id: usize,
        in_size: Shape,
        out_channels: u32,
        window: Window,
        groups: u32,
    ) -> Result<Self, ArchError> {
        Self::derived(id, in_size, out_channels, LayerOp::Conv { window, groups })
    }

    pub fn pool(
        id: usize,
        in_size: Shape,
        pool_type: PoolType,
        window: Window,
    ) -> Result<Self, ArchError> {
        Self::derived(
            id,
            in_size,
            in_size.channels,
            LayerOp::Pool { pool_type, window },
        )
    }

    pub fn other(id: usize, in_size: Shape, name: &str) -> Result<Self, ArchError> {
        let value = match name {
            "batchnorm" => vec![1e-5, 0.1],
            _ => Vec::new(),
        };
        Self::derived(
            id,
            in_size,
            in_size.channels,
            LayerOp::Other {
                name: name.to_string(),
                value,
            },
        )
    }

    pub fn fc(id: usize, in_features: u32, out_features: u32) -> Self {
        LayerDescriptor {
            id,
            in_size: Shape::new(in_features, 1, 1),
            out_size: Shape::new(out_features, 1, 1),
            op: LayerOp::Fc,
        }
    }

    /// Checks the per-category invariants and out-size consistency.
    pub fn validate(&self) -> Result<(), ArchError> {
        let index = self.id;
        if !self.in_size.is_positive() || !self.out_size.is_positive() {
            return Err(ArchError::Shape {
                index,
                reason: "sizes must be positive".into(),
            });
        }
        match &self.op {
            LayerOp::Conv { window, groups } => {
                check_window(index, window)?;
                if *groups == 0
                    || self.in_size.channels % groups != 0
                    || self.out_size.channels % groups != 0
                {
                    return Err(ArchError::Encoding(format!(
                        "layer {index}: groups {groups} must divide in channels {} and out channels {}",
                        self.in_size.channels, self.out_size.channels
                    )));
                }
            }
            LayerOp::Pool { window, .. } => {
                check_window(index, window)?;
                if window.padding.iter().any(|&p| p != 0) {
                    return Err(ArchError::Encoding(format!(
                        "layer {index}: pooling padding must be zero"
                    )));
                }
            }
            LayerOp::Fc => {}
            LayerOp::Other { name, value } => {
                if !OTHER_LAYER_NAMES.contains(&name.as_str()) {
                    return Err(ArchError::Encoding(format!(
                        "layer {index}: unregistered layer name {name:?}"
                    )));
                }
                if value.iter().any(|v| !v.is_finite()) {
                    return Err(ArchError::Encoding(format!(
                        "layer {index}: non-finite value"
                    )));
                }
            }
        }
        let expected = super::infer_out_size(self)?;
        if expected != self.out_size {
            return Err(ArchError::Shape {
                index,
                reason: format!(
                    "declared out_size {} but geometry gives {}",
                    self.out_size, expected
                ),
            });
        }
        Ok(())
    }
}

fn check_window(index: usize, w: &Window) -> Result<(), ArchError> {
    if w.kernel.0 == 0 || w.kernel.1 == 0 || w.stride.0 == 0 || w.stride.1 == 0 || w.dilation == 0
    {
        return Err(ArchError::Encoding(format!(
            "layer {index}: kernel, stride and dilation must be positive"
        )));
    }
    Ok(())
}

/// Flat serialized form. Which optional fields may be present depends on the
/// category; a mismatch is rejected when converting to [`LayerDescriptor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLayer {
    pub category: Category,
    pub id: usize,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub pool_type: Option<PoolType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub in_size: Shape,
    pub out_size: Shape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[u32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_used: Option<bool>,
}

impl TryFrom<RawLayer> for LayerDescriptor {
    type Error = ArchError;

    fn try_from(raw: RawLayer) -> Result<Self, ArchError> {
        let id = raw.id;
        let presence = |field: &str, present: bool, allowed: bool| {
            if present != allowed {
                Err(ArchError::Encoding(format!(
                    "layer {id} ({:?}): field `{field}` {}",
                    raw.category,
                    if allowed { "missing" } else { "not allowed" }
                )))
            } else {
                Ok(())
            }
        };
        let windowed = matches!(raw.category, Category::Conv | Category::Pool);
        presence("type", raw.pool_type.is_some(), raw.category == Category::Pool)?;
        presence("name", raw.name.is_some(), raw.category == Category::Other)?;
        presence("value", raw.value.is_some(), raw.category == Category::Other)?;
        presence("groups", raw.groups.is_some(), raw.category == Category::Conv)?;
        presence("kernel", raw.kernel.is_some(), windowed)?;
        presence("stride", raw.stride.is_some(), windowed)?;
        presence("padding", raw.padding.is_some(), windowed)?;
        presence("dilation", raw.dilation.is_some(), windowed)?;
        presence("bias_used", raw.bias_used.is_some(), windowed)?;

        let window = || {
            let k = raw.kernel.unwrap_or_default();
            let s = raw.stride.unwrap_or_default();
            Window {
                kernel: (k[0], k[1]),
                stride: (s[0], s[1]),
                padding: raw.padding.unwrap_or_default(),
                dilation: raw.dilation.unwrap_or_default(),
                bias_used: raw.bias_used.unwrap_or_default(),
            }
        };
        let op = match raw.category {
            Category::Conv => LayerOp::Conv {
                window: window(),
                groups: raw.groups.unwrap_or_default(),
            },
            Category::Pool => LayerOp::Pool {
                pool_type: raw.pool_type.unwrap_or(PoolType::Max),
                window: window(),
            },
            Category::Fc => LayerOp::Fc,
            Category::Other => LayerOp::Other {
                name: raw.name.clone().unwrap_or_default(),
                value: raw.value.clone().unwrap_or_default(),
            },
        };
        let layer = LayerDescriptor {
            id,
            in_size: raw.in_size,
            out_size: raw.out_size,
            op,
        };
        layer.validate()?;
        Ok(layer)
    }
}

impl From<LayerDescriptor> for RawLayer {
    fn from(l: LayerDescriptor) -> Self {
        let mut raw = RawLayer {
            category: l.category(),
            id: l.id,
            pool_type: None,
            name: None,
            in_size: l.in_size,
            out_size: l.out_size,
            kernel: None,
            stride: None,
            padding: None,
            dilation: None,
            groups: None,
            value: None,
            bias_used: None,
        };
        let set_window = |raw: &mut RawLayer, w: &Window| {
            raw.kernel = Some([w.kernel.0, w.kernel.1]);
            raw.stride = Some([w.stride.0, w.stride.1]);
            raw.padding = Some(w.padding);
            raw.dilation = Some(w.dilation);
            raw.bias_used = Some(w.bias_used);
        };
        match l.op {
            LayerOp::Conv { window, groups } => {
                set_window(&mut raw, &window);
                raw.groups = Some(groups);
            }
            LayerOp::Pool { pool_type, window } => {
                set_window(&mut raw, &window);
                raw.pool_type = Some(pool_type);
            }
            LayerOp::Fc => {}
            LayerOp::Other { name, value } => {
                raw.name = Some(name);
                raw.value = Some(value);
            }
        }
        raw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_json() -> serde_json::Value {
        serde_json::json!({
            "category": "conv", "id": 0, "in_size": [3, 32, 32], "out_size": [16, 32, 32],
            "kernel": [3, 3], "stride": [1, 1], "padding": [1, 1, 1, 1], "dilation": 1,
            "groups": 1, "bias_used": false
        })
    }

    #[test]
    fn raw_round_trip() {
        let layer: LayerDescriptor = serde_json::from_value(conv_json()).unwrap();
        assert_eq!(layer.out_size, Shape::new(16, 32, 32));
        let back = serde_json::to_value(&layer).unwrap();
        assert_eq!(back, conv_json());
    }

    #[test]
    fn presence_mismatch_is_rejected() {
        let mut v = conv_json();
        v["type"] = serde_json::json!("MAX");
        assert!(serde_json::from_value::<LayerDescriptor>(v).is_err());

        let pool = serde_json::json!({
            "category": "pool", "id": 1, "type": "MAX", "in_size": [16, 32, 32],
            "out_size": [16, 16, 16], "kernel": [2, 2], "stride": [2, 2],
            "padding": [0, 0, 0, 0], "dilation": 1, "groups": 1, "bias_used": false
        });
        let err = RawLayer::deserialize(pool.clone())
            .map(LayerDescriptor::try_from)
            .unwrap()
            .unwrap_err();
        assert!(matches!(err, ArchError::Encoding(_)), "{err}");

        let mut fc = serde_json::json!({
            "category": "fc", "id": 2, "in_size": [10, 1, 1], "out_size": [5, 1, 1]
        });
        assert!(serde_json::from_value::<LayerDescriptor>(fc.clone()).is_ok());
        fc["kernel"] = serde_json::json!([1, 1]);
        assert!(serde_json::from_value::<LayerDescriptor>(fc).is_err());
    }

    #[test]
    fn pool_padding_must_be_zero() {
        let mut w = Window::square(2, 2, 0);
        w.padding = [1, 0, 0, 0];
        let layer = LayerDescriptor {
            id: 0,
            in_size: Shape::new(4, 8, 8),
            out_size: Shape::new(4, 5, 4),
            op: LayerOp::Pool {
                pool_type: PoolType::Avg,
                window: w,
            },
        };
        assert!(matches!(layer.validate(), Err(ArchError::Encoding(_))));
    }

    #[test]
    fn groups_must_divide_channels() {
        let err = LayerDescriptor::conv(0, Shape::new(6, 8, 8), 8, Window::square(3, 1, 1), 4)
            .and_then(|l| l.validate().map(|_| l))
            .unwrap_err();
        assert!(matches!(err, ArchError::Encoding(_)));
    }

    #[test]
    fn declared_out_size_checked() {
        let mut l =
            LayerDescriptor::conv(0, Shape::new(3, 32, 32), 16, Window::square(3, 1, 1), 1).unwrap();
        l.out_size = Shape::new(16, 30, 30);
        assert!(matches!(l.validate(), Err(ArchError::Shape { .. })));
    }
}
