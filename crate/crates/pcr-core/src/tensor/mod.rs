//! Dense rank-4 tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit floating point so that finite-difference gradient
//! verification stays meaningful at desk scale. Tensors are laid out
//! row-major in `(batch, channel, height, width)` order.

mod graph;
pub mod io;
pub mod ops;

pub use graph::{Graph, NodeId};
pub use ops::{BatchNormState, BnMode};

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor in `(N, C, H, W)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial plane size `H * W`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Flat offset of element `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array of `f64` with an optional gradient buffer of the same
/// extents. The gradient is populated by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
            grad: None,
        }
    }

    /// Builds a tensor from raw data, validating length and finiteness.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                dim: "data length",
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite("tensor", format!("value {v}")));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.shape.index(n, c, h, w);
        &mut self.data[i]
    }

    /// The single stored value, when the tensor holds exactly one element.
    pub fn scalar(&self) -> Option<f64> {
        if self.data.len() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Geometry of a (de)convolution: kernel extents, stride, dilation, padding
/// and channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("conv spec", "stride must be >= 1"));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("conv spec", "dilation must be >= 1"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::invalid("conv spec", "kernel extents must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv spec", "channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Span covered by the dilated kernel along one axis.
    pub fn effective_kernel_h(&self) -> usize {
        self.dilation * (self.kernel_h - 1) + 1
    }

    pub fn effective_kernel_w(&self) -> usize {
        self.dilation * (self.kernel_w - 1) + 1
    }

    /// Output extents of a forward convolution over an `h x w` input.
    pub fn conv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |input: usize, eff: usize| -> Result<usize> {
            let padded = input + 2 * self.padding;
            if padded < eff {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "input extent {input} with padding {} is smaller than the \
                         dilated kernel span {eff}",
                        self.padding
                    ),
                ));
            }
            Ok((padded - eff) / self.stride + 1)
        };
        Ok((
            out(h, self.effective_kernel_h())?,
            out(w, self.effective_kernel_w())?,
        ))
    }

    /// Output extents of a transposed convolution over an `h x w` input.
    pub fn deconv_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |input: usize, eff: usize| -> Result<usize> {
            let grown = (input - 1) * self.stride + eff;
            if grown < 2 * self.padding {
                return Err(Error::invalid(
                    "deconv2d",
                    format!("padding {} swallows the whole output", self.padding),
                ));
            }
            Ok(grown - 2 * self.padding)
        };
        if h == 0 || w == 0 {
            return Err(Error::EmptyInput { op: "deconv2d" });
        }
        Ok((
            out(h, self.effective_kernel_h())?,
            out(w, self.effective_kernel_w())?,
        ))
    }
}
