//! Layer descriptions and the shape algebra that validates a layer stack.

use crate::error::{Error, Result};

/// Explicit per-side zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Resolves "same"-style padding for a stride-1 kernel into explicit
    /// sides. Even kernels put the extra row/column at the bottom/right.
    pub fn same(kernel: (usize, usize)) -> Self {
        let (kh, kw) = kernel;
        Padding {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl Conv2dSpec {
    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_extent(input: usize, pad_total: usize, kernel: usize, stride: usize) -> Option<usize> {
        let padded = input + pad_total;
        if stride == 0 || kernel == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = self.padding;
        let oh = Self::out_extent(h, p.top + p.bottom, self.kernel.0, self.stride.0)?;
        let ow = Self::out_extent(w, p.left + p.right, self.kernel.1, self.stride.1)?;
        Some((oh, ow))
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Consecutive-frame subtraction over the channel (frame) axis.
    FrameDiff,
    Conv2d(Conv2dSpec),
    Relu,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        LayerSpec::Conv2d(Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: Padding::uniform(pad),
        })
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Dense { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FrameDiff => "frame_diff",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    /// `[weight dims, bias dims]` for parameterized layers.
    pub fn param_dims(&self) -> Option<[Vec<usize>; 2]> {
        match self {
            LayerSpec::Conv2d(c) => Some([c.weight_dims().to_vec(), vec![c.out_channels]]),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some([vec![*out_features, *in_features], vec![*out_features]]),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used by the uniform initializer.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv2d(c) => {
                let k = c.kernel.0 * c.kernel.1;
                Some((c.in_channels * k, c.out_channels * k))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((*in_features, *out_features)),
            _ => None,
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(self) -> usize {
        match self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(f) => f,
        }
    }

    pub fn dims(self) -> Vec<usize> {
        match self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(f) => vec![f],
        }
    }
}

pub const NUM_CLASSES: usize = 2;

/// Validates a layer stack against a per-sample input `[frames, height, width]`
/// and returns the activation shape entering each layer followed by the output
/// shape (`specs.len() + 1` entries).
pub fn infer_shapes(input: [usize; 3], specs: &[LayerSpec]) -> Result<Vec<ActShape>> {
    let [f, h, w] = input;
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArchitecture(format!(
            "input extents {input:?} must be positive"
        )));
    }
    if specs.is_empty() {
        return Err(Error::InvalidArchitecture("empty layer stack".into()));
    }
    let mut shapes = Vec::with_capacity(specs.len() + 1);
    let mut cur = ActShape::Spatial { c: f, h, w };
    shapes.push(cur);
    for (i, spec) in specs.iter().enumerate() {
        let shape_err = |msg: String| Error::Shape { layer: i, msg };
        cur = match (spec, cur) {
            (LayerSpec::FrameDiff, ActShape::Spatial { c, h, w }) => {
                if i != 0 {
                    return Err(Error::InvalidArchitecture(format!(
                        "frame_diff must be the first layer, found at {i}"
                    )));
                }
                if c < 2 {
                    return Err(Error::InvalidArchitecture(format!(
                        "frame_diff needs at least 2 frames, got {c}"
                    )));
                }
                ActShape::Spatial { c: c - 1, h, w }
            }
            (LayerSpec::FrameDiff, ActShape::Flat(_)) => {
                return Err(Error::InvalidArchitecture(format!(
                    "frame_diff must be the first layer, found at {i}"
                )))
            }
            (LayerSpec::Conv2d(conv), ActShape::Spatial { c, h, w }) => {
                if conv.in_channels != c {
                    return Err(shape_err(format!(
                        "conv2d expects {} input channels, got {c}",
                        conv.in_channels
                    )));
                }
                if conv.out_channels == 0 || conv.stride.0 == 0 || conv.stride.1 == 0 {
                    return Err(shape_err("conv2d channels and strides must be positive".into()));
                }
                let (oh, ow) = conv.out_hw(h, w).ok_or_else(|| {
                    shape_err(format!(
                        "kernel {:?} does not fit padded input {h}x{w}",
                        conv.kernel
                    ))
                })?;
                ActShape::Spatial {
                    c: conv.out_channels,
                    h: oh,
                    w: ow,
                }
            }
            (LayerSpec::Conv2d(_), ActShape::Flat(_)) => {
                return Err(shape_err("conv2d after flatten".into()))
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::Flatten, s) => ActShape::Flat(s.numel()),
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                ActShape::Flat(n),
            ) => {
                if *in_features != n {
                    return Err(shape_err(format!(
                        "dense expects {in_features} input features, got {n}"
                    )));
                }
                if *out_features == 0 {
                    return Err(shape_err("dense needs at least one output".into()));
                }
                ActShape::Flat(*out_features)
            }
            (LayerSpec::Dense { .. }, ActShape::Spatial { .. }) => {
                return Err(shape_err("dense layer needs a flatten before it".into()))
            }
        };
        shapes.push(cur);
    }
    if cur != ActShape::Flat(NUM_CLASSES) {
        return Err(Error::InvalidArchitecture(format!(
            "network must end in {NUM_CLASSES} logits, ends in {cur:?}"
        )));
    }
    Ok(shapes)
}

/// Dimensions of every parameter tensor, weight then bias per parameterized layer.
pub fn param_dims(specs: &[LayerSpec]) -> Vec<Vec<usize>> {
    specs
        .iter()
        .filter_map(LayerSpec::param_dims)
        .flatten()
        .collect()
}
