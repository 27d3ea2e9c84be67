//! Context-aware module: three branches fused by channel-wise gating.
//!
//! A CAM combines a squeeze-and-excitation gate over the spatial-context
//! branch with a residual path:
//!
//! ```text
//! out = relu( se(hdc(x)) (.) hdc(x) + res(x) )
//! ```
//!
//! where `hdc` runs four parallel 3x3 convolutions at dilation rates 1-4
//! (each with a quarter of the output channels), concatenates them, and
//! fuses with a stride-2 deconvolution (spatial doubling) or a stride-1
//! convolution; `se` pools the fused features globally, bottlenecks them to
//! a quarter of the channels, and squashes through a sigmoid; `res` is a 1x1
//! convolution over the block input, upsampled first when the block doubles
//! resolution. Batch norm follows every convolution, and `(.)` is
//! channel-wise multiplication.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tensor::{BatchNormState, BnMode, ConvSpec, Graph, NodeId, Shape, Tensor};

/// Structural hyperparameters of one CAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CamConfig {
    /// Position of this CAM inside its decoder (used for naming).
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1 keeps the spatial extent, 2 doubles it (deconv in the HDC branch,
    /// nearest-neighbor upsampling in the residual branch).
    pub stride: usize,
    /// Whether the first SE convolution is followed by batch norm.
    pub se_batch_norm: bool,
}

impl CamConfig {
    pub fn new(index: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        CamConfig {
            index,
            in_channels,
            out_channels,
            stride,
            se_batch_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.out_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "cam {}: out_channels {} must be a positive multiple of 4",
                self.index, self.out_channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config(format!(
                "cam {}: in_channels must be > 0",
                self.index
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!(
                "cam {}: stride {} outside {{1, 2}}",
                self.index, self.stride
            )));
        }
        Ok(())
    }
}

/// A convolution's weights plus bias, registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvParams {
    /// Registers weights for a forward convolution, `(out, in, kh, kw)`.
    pub fn conv(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let wshape = Shape::new(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w);
        ConvParams {
            weight: store.register_normal(format!("{name}.w"), wshape, init_std, rng),
            bias: store.register(format!("{name}.b"), Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))),
            spec,
        }
    }

    /// Registers weights for a transposed convolution, `(in, out, kh, kw)`.
    pub fn deconv(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let wshape = Shape::new(spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
        ConvParams {
            weight: store.register_normal(format!("{name}.w"), wshape, init_std, rng),
            bias: store.register(format!("{name}.b"), Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))),
            spec,
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, bound.node(self.weight), bound.node(self.bias), &self.spec)
    }

    pub fn forward_deconv(&self, g: &mut Graph, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        g.deconv2d(x, bound.node(self.weight), bound.node(self.bias), &self.spec)
    }
}

/// Batch-norm affine parameters plus the running statistics they carry
/// between steps.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState,
    pub name: String,
}

impl BnParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BnParams {
            gamma: store.register(format!("{name}.gamma"), Tensor::filled(Shape::new(1, channels, 1, 1), 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(Shape::new(1, channels, 1, 1))),
            state: BatchNormState::new(channels),
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, bound: &BoundParams, x: NodeId, mode: BnMode) -> Result<NodeId> {
        g.batch_norm(x, bound.node(self.gamma), bound.node(self.beta), &mut self.state, mode)
    }
}

/// One dilated 3x3 branch of the HDC pyramid.
#[derive(Debug, Clone)]
pub struct HdcBranch {
    pub conv: ConvParams,
    pub bn: BnParams,
}

/// Fusion layer after the concatenated pyramid: deconv for stride 2, plain
/// conv for stride 1.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub conv: ConvParams,
    pub bn: BnParams,
    pub transposed: bool,
}

/// All learnable state of one CAM.
#[derive(Debug, Clone)]
pub struct CamParams {
    pub config: CamConfig,
    pub se_reduce: ConvParams,
    pub se_reduce_bn: Option<BnParams>,
    pub se_expand: ConvParams,
    pub hdc_branches: Vec<HdcBranch>,
    pub hdc_fuse: FuseParams,
    pub res_conv: ConvParams,
    pub res_bn: BnParams,
}

impl CamParams {
    pub const HDC_DILATIONS: [usize; 4] = [1, 2, 3, 4];

    pub fn new(
        config: CamConfig,
        store: &mut ParamStore,
        prefix: &str,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c_in = config.in_channels;
        let c_out = config.out_channels;
        let c_quarter = c_out / 4;

        let mut hdc_branches = Vec::with_capacity(4);
        for d in Self::HDC_DILATIONS {
            // "Same" padding equal to the dilation keeps the four branches
            // spatially aligned for concatenation.
            let spec = ConvSpec::new(c_in, c_quarter, 3, 1, d, d);
            let name = format!("{prefix}.hdc{d}");
            hdc_branches.push(HdcBranch {
                conv: ConvParams::conv(store, &name, spec, init_std, rng),
                bn: BnParams::new(store, &format!("{name}.bn"), c_quarter),
            });
        }

        let (fuse_conv, transposed) = if config.stride == 2 {
            let spec = ConvSpec::new(c_out, c_out, 4, 2, 1, 1);
            (ConvParams::deconv(store, &format!("{prefix}.fuse"), spec, init_std, rng), true)
        } else {
            let spec = ConvSpec::new(c_out, c_out, 3, 1, 1, 1);
            (ConvParams::conv(store, &format!("{prefix}.fuse"), spec, init_std, rng), false)
        };
        let hdc_fuse = FuseParams {
            conv: fuse_conv,
            bn: BnParams::new(store, &format!("{prefix}.fuse.bn"), c_out),
            transposed,
        };

        let se_reduce = ConvParams::conv(
            store,
            &format!("{prefix}.se_reduce"),
            ConvSpec::new(c_out, c_quarter, 1, 1, 1, 0),
            init_std,
            rng,
        );
        let se_reduce_bn = if config.se_batch_norm {
            Some(BnParams::new(store, &format!("{prefix}.se_reduce.bn"), c_quarter))
        } else {
            None
        };
        let se_expand = ConvParams::conv(
            store,
            &format!("{prefix}.se_expand"),
            ConvSpec::new(c_quarter, c_out, 1, 1, 1, 0),
            init_std,
            rng,
        );

        let res_conv = ConvParams::conv(
            store,
            &format!("{prefix}.res"),
            ConvSpec::new(c_in, c_out, 1, 1, 1, 0),
            init_std,
            rng,
        );
        let res_bn = BnParams::new(store, &format!("{prefix}.res.bn"), c_out);

        Ok(CamParams {
            config,
            se_reduce,
            se_reduce_bn,
            se_expand,
            hdc_branches,
            hdc_fuse,
            res_conv,
            res_bn,
        })
    }

    /// Squeeze-and-excitation gate over the fused HDC features: global pool,
    /// 1x1 bottleneck to a quarter of the channels, ReLU, 1x1 expansion,
    /// sigmoid. Output values lie strictly in (0, 1).
    pub fn se_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        hdc: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        if g.value(hdc).shape().c != self.config.out_channels {
            return Err(Error::ShapeMismatch {
                op: "se_forward",
                dim: "channels",
                expected: self.config.out_channels,
                got: g.value(hdc).shape().c,
            });
        }
        let pooled = g.global_avg_pool(hdc)?;
        let mut x = self.se_reduce.forward(g, bound, pooled)?;
        if let Some(bn) = self.se_reduce_bn.as_mut() {
            x = bn.forward(g, bound, x, mode)?;
        }
        let x = g.relu(x);
        let x = self.se_expand.forward(g, bound, x)?;
        Ok(g.sigmoid(x))
    }

    /// Hybrid-dilated-convolution branch: four parallel dilated convolutions
    /// (quarter channels each, BN + ReLU), concatenated and fused by a
    /// stride-2 deconvolution or a stride-1 convolution, then batch norm.
    pub fn hdc_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(self.hdc_branches.len());
        for branch in &mut self.hdc_branches {
            let c = branch.conv.forward(g, bound, x)?;
            let c = branch.bn.forward(g, bound, c, mode)?;
            parts.push(g.relu(c));
        }
        let cat = g.concat_channels(&parts)?;
        let fused = if self.hdc_fuse.transposed {
            self.hdc_fuse.conv.forward_deconv(g, bound, cat)?
        } else {
            self.hdc_fuse.conv.forward(g, bound, cat)?
        };
        self.hdc_fuse.bn.forward(g, bound, fused, mode)
    }

    /// Residual branch: optional 2x nearest upsampling (stride-2 blocks
    /// only), 1x1 convolution, batch norm.
    pub fn res_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let x = if self.config.stride == 2 {
            g.upsample2x_nearest(x)
        } else {
            x
        };
        let x = self.res_conv.forward(g, bound, x)?;
        self.res_bn.forward(g, bound, x, mode)
    }

    /// Full block: `relu( se (.) hdc + res )`.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let hdc = self.hdc_forward(g, bound, x, mode)?;
        let gate = self.se_forward(g, bound, hdc, mode)?;
        let gated = g.channel_scale(hdc, gate)?;
        let res = self.res_forward(g, bound, x, mode)?;
        let fused = g.add(gated, res)?;
        Ok(g.relu(fused))
    }

    /// Visits every batch-norm state in a fixed order, for checkpointing.
    pub fn visit_bn_states<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut BatchNormState)) {
        for branch in &mut self.hdc_branches {
            f(&branch.bn.name, &mut branch.bn.state);
        }
        f(&self.hdc_fuse.bn.name, &mut self.hdc_fuse.bn.state);
        if let Some(bn) = self.se_reduce_bn.as_mut() {
            f(&bn.name, &mut bn.state);
        }
        f(&self.res_bn.name, &mut self.res_bn.state);
    }
}
