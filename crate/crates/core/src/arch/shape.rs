use super::{ArchError, LayerDescriptor, LayerOp, Shape};

/// Output length of a dilated sliding window along one axis, or `None` when
/// no window position fits.
pub fn window_output_len(
    input: u32,
    kernel: u32,
    stride: u32,
    pad_before: u32,
    pad_after: u32,
    dilation: u32,
) -> Option<u32> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let span = dilation as u64 * (kernel as u64 - 1) + 1;
    let padded = input as u64 + pad_before as u64 + pad_after as u64;
    if padded < span {
        return None;
    }
    Some(((padded - span) / stride as u64 + 1) as u32)
}

/// Output size implied by a layer's input size and geometry.
///
/// Convolutions take their channel count from the declared `out_size`
/// (the filter count), pooling and `Other` layers preserve channels, and FC
/// layers return their declared output.
pub fn infer_out_size(layer: &LayerDescriptor) -> Result<Shape, ArchError> {
    let index = layer.id;
    let spatial = |w: &super::Window| -> Result<(u32, u32), ArchError> {
        let [top, bottom, left, right] = w.padding;
        let h = window_output_len(
            layer.in_size.height,
            w.kernel.0,
            w.stride.0,
            top,
            bottom,
            w.dilation,
        );
        let wd = window_output_len(
            layer.in_size.width,
            w.kernel.1,
            w.stride.1,
            left,
            right,
            w.dilation,
        );
        match (h, wd) {
            (Some(h), Some(wd)) if h > 0 && wd > 0 => Ok((h, wd)),
            _ => Err(ArchError::Shape {
                index,
                reason: format!(
                    "window k={:?} s={:?} p={:?} d={} does not fit input {}",
                    w.kernel, w.stride, w.padding, w.dilation, layer.in_size
                ),
            }),
        }
    };
    let shape = match &layer.op {
        LayerOp::Conv { window, .. } => {
            let (h, w) = spatial(window)?;
            Shape::new(layer.out_size.channels, h, w)
        }
        LayerOp::Pool { window, .. } => {
            let (h, w) = spatial(window)?;
            Shape::new(layer.in_size.channels, h, w)
        }
        LayerOp::Fc => layer.out_size,
        LayerOp::Other { .. } => layer.in_size,
    };
    if !shape.is_positive() {
        return Err(ArchError::Shape {
            index,
            reason: format!("non-positive output size {shape}"),
        });
    }
    Ok(shape)
}
