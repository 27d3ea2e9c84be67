//! The full network: toy encoder, parallel CAM decoders, progressive
//! feature summation, per-level prediction heads, and training.
//!
//! Level `l` predicts from the element-wise sum of the final CAM features of
//! levels `1..=l`, so every later decoder learns residual features on top of
//! the earlier ones and the heatmaps are refined progressively. Inference
//! reads the last level alone.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cam::{BnParams, CamConfig, CamParams, ConvParams};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{BnMode, ConvSpec, Graph, NodeId, Shape, Tensor};

/// Structural hyperparameters of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcrConfig {
    /// CAMs per decoder (K).
    pub cams_per_decoder: usize,
    /// Parallel decoder levels (L).
    pub levels: usize,
    /// Output channels of each CAM in a decoder, length K.
    pub channels: Vec<usize>,
    /// Joint count (17 for the COCO skeleton).
    pub joints: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Channels of the input raster (1 for the toy grayscale corpus).
    pub image_channels: usize,
    /// Whether the auxiliary head after the penultimate CAM of the last
    /// level is attached.
    pub aux_enabled: bool,
    /// Width of each stride-2 encoder stage.
    pub encoder_channels: Vec<usize>,
}

impl PcrConfig {
    /// Output stride between input and heatmaps.
    pub const HEATMAP_STRIDE: usize = 4;

    /// Full-scale defaults: K=3 decoders of 256-wide CAMs over a 256x192
    /// input with 17 joints.
    pub fn default_full() -> Self {
        PcrConfig {
            cams_per_decoder: 3,
            levels: 1,
            channels: vec![256, 256, 256],
            joints: 17,
            input_h: 256,
            input_w: 192,
            image_channels: 1,
            aux_enabled: true,
            encoder_channels: vec![8, 16, 32],
        }
    }

    /// The small configuration the gradient suite runs on.
    pub fn micro() -> Self {
        PcrConfig {
            cams_per_decoder: 1,
            levels: 1,
            channels: vec![8],
            joints: 4,
            input_h: 64,
            input_w: 48,
            image_channels: 1,
            aux_enabled: false,
            encoder_channels: vec![4, 8, 16],
        }
    }

    /// Desk-scale training configuration used by the synthetic corpus.
    pub fn toy() -> Self {
        PcrConfig {
            cams_per_decoder: 3,
            levels: 2,
            channels: vec![16, 16, 16],
            joints: 4,
            input_h: 64,
            input_w: 48,
            image_channels: 1,
            aux_enabled: true,
            encoder_channels: vec![8, 16, 32],
        }
    }

    pub fn heatmap_h(&self) -> usize {
        self.input_h / Self::HEATMAP_STRIDE
    }

    pub fn heatmap_w(&self) -> usize {
        self.input_w / Self::HEATMAP_STRIDE
    }

    /// Stride of the k-th CAM (0-based): the final CAM doubles resolution,
    /// earlier ones keep it, so the encoder's stride-8 features land exactly
    /// on the stride-4 heatmap grid.
    pub fn cam_stride(&self, k: usize) -> usize {
        if k + 1 == self.cams_per_decoder {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cams_per_decoder == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        if self.channels.len() != self.cams_per_decoder {
            return Err(Error::Config(format!(
                "channel plan length {} must equal K = {}",
                self.channels.len(),
                self.cams_per_decoder
            )));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(format!(
                "every CAM width must be a positive multiple of 4, got {c}"
            )));
        }
        if self.joints == 0 {
            return Err(Error::Config("joint count must be >= 1".into()));
        }
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be >= 1".into()));
        }
        // Every encoder stage halves the extent; stride-2 CAMs double it.
        // The product must land on the heatmap stride.
        let enc_stride = 1usize << self.encoder_channels.len();
        let up: usize = (0..self.cams_per_decoder)
            .map(|k| self.cam_stride(k))
            .product();
        if enc_stride % up != 0 || enc_stride / up != Self::HEATMAP_STRIDE {
            return Err(Error::Config(format!(
                "encoder stride {enc_stride} with decoder upsampling {up} does not \
                 produce heatmaps at stride {}",
                Self::HEATMAP_STRIDE
            )));
        }
        let total = 1usize << self.encoder_channels.len();
        if self.input_h % total != 0 || self.input_w % total != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by the encoder stride {total}",
                self.input_h, self.input_w
            )));
        }
        if self.aux_enabled && self.cams_per_decoder < 2 {
            return Err(Error::Config(
                "the auxiliary head reads the penultimate CAM and needs K >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// One stride-2 stage of the toy encoder: 3x3 conv, BN, ReLU.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub conv: ConvParams,
    pub bn: BnParams,
}

/// Per-level 1x1 prediction heads; independent parameters per level.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub conv: ConvParams,
}

/// Everything produced by one forward pass.
pub struct PcrOutputs {
    /// Heatmap predictions per level; the last entry is the inference
    /// output.
    pub levels: Vec<NodeId>,
    /// Auxiliary prediction from the penultimate CAM of the last level.
    pub aux: Option<NodeId>,
    /// Raw CAM outputs, indexed `[level][k]`.
    pub cam_outputs: Vec<Vec<NodeId>>,
    /// Graph leaves of the parameters used by this pass.
    pub bound: BoundParams,
}

/// The model: parameter store plus layer structure.
pub struct PcrModel {
    pub config: PcrConfig,
    pub(crate) store: ParamStore,
    encoder: Vec<EncoderStage>,
    decoders: Vec<Vec<CamParams>>,
    heads: Vec<PredictionHead>,
    aux_head: Option<ConvParams>,
}

impl PcrModel {
    /// Default initialization: kernel weights from a zero-mean normal with
    /// std 0.001, biases zero, batch-norm affine at identity.
    pub const DEFAULT_INIT_STD: f64 = 1e-3;

    pub fn new(config: PcrConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, Self::DEFAULT_INIT_STD)
    }

    pub fn with_init_std(config: PcrConfig, seed: u64, init_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut encoder = Vec::new();
        let mut c_prev = config.image_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let name = format!("enc{i}");
            let spec = ConvSpec::new(c_prev, c, 3, 2, 1, 1);
            encoder.push(EncoderStage {
                conv: ConvParams::conv(&mut store, &name, spec, init_std, &mut rng),
                bn: BnParams::new(&mut store, &format!("{name}.bn"), c),
            });
            c_prev = c;
        }
        let encoder_out = c_prev;

        let mut decoders = Vec::new();
        for l in 0..config.levels {
            let mut cams = Vec::new();
            let mut c_in = encoder_out;
            for k in 0..config.cams_per_decoder {
                let cam_cfg = CamConfig::new(k, c_in, config.channels[k], config.cam_stride(k));
                let prefix = format!("dec{l}.cam{k}");
                cams.push(CamParams::new(cam_cfg, &mut store, &prefix, init_std, &mut rng)?);
                c_in = config.channels[k];
            }
            decoders.push(cams);
        }

        let last_c = *config.channels.last().expect("validated non-empty");
        let mut heads = Vec::new();
        for l in 0..config.levels {
            let spec = ConvSpec::new(last_c, config.joints, 1, 1, 1, 0);
            heads.push(PredictionHead {
                conv: ConvParams::conv(&mut store, &format!("head{l}"), spec, init_std, &mut rng),
            });
        }

        let aux_head = if config.aux_enabled {
            let penultimate_c = config.channels[config.cams_per_decoder - 2];
            let spec = ConvSpec::new(penultimate_c, config.joints, 1, 1, 1, 0);
            Some(ConvParams::conv(&mut store, "aux_head", spec, init_std, &mut rng))
        } else {
            None
        };

        Ok(PcrModel {
            config,
            store,
            encoder,
            decoders,
            heads,
            aux_head,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Runs one decoder level over the shared encoded features, returning
    /// every intermediate CAM output (the last entry is the level's final
    /// features).
    pub fn decoder_forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundParams,
        features: NodeId,
        level: usize,
        mode: BnMode,
    ) -> Result<Vec<NodeId>> {
        let mut outputs = Vec::with_capacity(self.config.cams_per_decoder);
        let mut x = features;
        for cam in &mut self.decoders[level] {
            x = cam.forward(g, bound, x, mode)?;
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Full forward pass over an image batch.
    pub fn forward(&mut self, g: &mut Graph, images: Tensor, mode: BnMode) -> Result<PcrOutputs> {
        let shape = images.shape();
        if shape.c != self.config.image_channels
            || shape.h != self.config.input_h
            || shape.w != self.config.input_w
        {
            return Err(Error::ShapeMismatch {
                op: "pcr_forward",
                dim: "input extents",
                expected: Shape::new(shape.n, self.config.image_channels, self.config.input_h, self.config.input_w)
                    .len(),
                got: shape.len(),
            });
        }
        let bound = self.store.bind(g);
        let mut x = g.leaf(images);
        for stage in &mut self.encoder {
            let c = stage.conv.forward(g, &bound, x)?;
            let c = stage.bn.forward(g, &bound, c, mode)?;
            x = g.relu(c);
        }
        let features = x;

        let mut cam_outputs = Vec::with_capacity(self.config.levels);
        let mut levels = Vec::with_capacity(self.config.levels);
        let mut fused: Option<NodeId> = None;
        for l in 0..self.config.levels {
            let outs = self.decoder_forward(g, &bound, features, l, mode)?;
            let f_lk = *outs.last().expect("K >= 1");
            cam_outputs.push(outs);
            fused = Some(match fused {
                None => f_lk,
                Some(prev) => g.add(prev, f_lk)?,
            });
            let h_l = self.heads[l].conv.forward(g, &bound, fused.expect("set above"))?;
            levels.push(h_l);
        }

        let aux = match &self.aux_head {
            Some(head) => {
                let k = self.config.cams_per_decoder;
                let penultimate = cam_outputs[self.config.levels - 1][k - 2];
                // When the final CAM doubles resolution the auxiliary path
                // must upsample to match the heatmap grid.
                let feat = if self.config.cam_stride(k - 1) == 2 {
                    g.upsample2x_nearest(penultimate)
                } else {
                    penultimate
                };
                Some(head.forward(g, &bound, feat)?)
            }
            None => None,
        };

        Ok(PcrOutputs {
            levels,
            aux,
            cam_outputs,
            bound,
        })
    }

    /// Inference: heatmaps of the final level with frozen statistics.
    pub fn infer(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, images.clone(), BnMode::Infer)?;
        Ok(g.value(*out.levels.last().expect("L >= 1")).clone())
    }

    /// Visits every batch-norm state in construction order.
    pub fn visit_bn_states<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut crate::tensor::BatchNormState)) {
        for stage in &mut self.encoder {
            f(&stage.bn.name, &mut stage.bn.state);
        }
        for cams in &mut self.decoders {
            for cam in cams {
                cam.visit_bn_states(f);
            }
        }
    }

    /// Mutable access to a decoder CAM, for tests that force branch
    /// parameters.
    pub fn cam_mut(&mut self, level: usize, k: usize) -> &mut CamParams {
        &mut self.decoders[level][k]
    }

    /// The 1x1 prediction convolution of one level.
    pub fn head_conv(&self, level: usize) -> &ConvParams {
        &self.heads[level].conv
    }
}

/// Per-level and auxiliary loss weights; all default to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub levels: Vec<f64>,
    pub aux: f64,
}

impl LossWeights {
    pub fn unit(levels: usize) -> Self {
        LossWeights {
            levels: vec![1.0; levels],
            aux: 1.0,
        }
    }
}

/// Batched training target: heatmaps `(N, J, Hh, Wh)` plus one weight per
/// `(instance, joint)` pair.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub target_maps: Tensor,
    pub target_weights: Vec<f64>,
}

/// Sum of weighted per-level heatmap losses plus the auxiliary term.
pub fn multi_task_loss(
    g: &mut Graph,
    outputs: &PcrOutputs,
    target_maps: &Tensor,
    target_weights: &[f64],
    weights: &LossWeights,
) -> Result<NodeId> {
    if weights.levels.len() != outputs.levels.len() {
        return Err(Error::invalid(
            "multi_task_loss",
            format!(
                "{} level weights for {} levels",
                weights.levels.len(),
                outputs.levels.len()
            ),
        ));
    }
    let mut total: Option<NodeId> = None;
    for (&h_l, &w_l) in outputs.levels.iter().zip(&weights.levels) {
        let term = g.weighted_mse(h_l, target_maps, target_weights)?;
        let term = if w_l == 1.0 { term } else { g.scale(term, w_l) };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    if let Some(aux) = outputs.aux {
        let term = g.weighted_mse(aux, target_maps, target_weights)?;
        let term = if weights.aux == 1.0 {
            term
        } else {
            g.scale(term, weights.aux)
        };
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("multi_task_loss", "no outputs"))
}

/// Losses observed during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub level_losses: Vec<f64>,
    pub aux_loss: Option<f64>,
}

impl StepStats {
    pub fn csv_header(levels: usize, aux: bool) -> String {
        let mut s = String::from("step,loss");
        for l in 1..=levels {
            let _ = write!(s, ",level_{l}");
        }
        if aux {
            s.push_str(",aux");
        }
        s
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut s = format!("{step},{:.12}", self.loss);
        for l in &self.level_losses {
            let _ = write!(s, ",{l:.12}");
        }
        if let Some(a) = self.aux_loss {
            let _ = write!(s, ",{a:.12}");
        }
        s
    }
}

/// One full-batch gradient-descent update. Deterministic given the model
/// state and batch; aborts with diagnostics if the loss goes non-finite.
pub fn train_step(model: &mut PcrModel, batch: &Batch, lr: f64, weights: &LossWeights) -> Result<StepStats> {
    if lr < 0.0 {
        return Err(Error::invalid("train_step", "learning rate must be >= 0"));
    }
    let mut g = Graph::new();
    let outputs = model.forward(&mut g, batch.images.clone(), BnMode::Train)?;
    let loss_id = multi_task_loss(&mut g, &outputs, &batch.target_maps, &batch.target_weights, weights)?;
    let loss = g.value(loss_id).scalar().expect("loss is scalar");
    if !loss.is_finite() {
        return Err(Error::non_finite(
            "train_step",
            format!("loss {loss} (levels: {:?})", outputs
                .levels
                .iter()
                .map(|&id| crate::tensor::ops::weighted_mse(g.value(id), &batch.target_maps, &batch.target_weights))
                .collect::<Vec<_>>()),
        ));
    }

    let level_losses: Vec<f64> = outputs
        .levels
        .iter()
        .map(|&id| crate::tensor::ops::weighted_mse(g.value(id), &batch.target_maps, &batch.target_weights))
        .collect::<Result<_>>()?;
    let aux_loss = match outputs.aux {
        Some(id) => Some(crate::tensor::ops::weighted_mse(
            g.value(id),
            &batch.target_maps,
            &batch.target_weights,
        )?),
        None => None,
    };

    g.backward(loss_id)?;
    model.store.apply_sgd(&g, &outputs.bound, lr)?;

    Ok(StepStats {
        loss,
        level_losses,
        aux_loss,
    })
}
