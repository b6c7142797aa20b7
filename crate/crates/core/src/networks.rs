//! Trainable heads: the squeeze module, the student network and the
//! post-hoc encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{BlockSet, FeaturePyramid};
use crate::nn::{
    Act, ActLayer, BatchNorm, Conv2d, GlobalAvgPool, GroupNorm, Layer, Linear, Module, Param, ResBlock, Sequential,
};
use crate::tensor::Tensor;

/// Normalization between MLP layers. `Layer` is per-sample; `Batch` couples
/// the samples of a training batch and uses running statistics at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpNorm {
    #[default]
    Layer,
    Batch,
}

/// `[Linear -> norm -> ReLU] x (layers - 1) -> Linear`.
fn mlp<R: Rng + ?Sized>(
    input: usize,
    hidden: usize,
    output: usize,
    layers: usize,
    norm: MlpNorm,
    rng: &mut R,
) -> Sequential {
    let mut s = Sequential::new();
    let mut fan_in = input;
    for _ in 1..layers {
        s = s.push(Linear::new(fan_in, hidden, rng));
        s = match norm {
            MlpNorm::Layer => s.push(GroupNorm::layer_norm(hidden)),
            MlpNorm::Batch => s.push(BatchNorm::new(hidden)),
        };
        s = s.push(ActLayer::new(Act::Relu));
        fan_in = hidden;
    }
    s.push(Linear::with_gain(fan_in, output, 1.0, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqueezeSpec {
    /// Output dimension `M`; also the width of every MLP layer.
    pub dim: usize,
    pub mlp_layers: usize,
    pub norm: MlpNorm,
}

impl Default for SqueezeSpec {
    fn default() -> Self {
        Self {
            dim: 256,
            mlp_layers: 3,
            norm: MlpNorm::Layer,
        }
    }
}

/// Per-block linear maps to `dim`, summed, then an MLP.
pub struct SqueezeHead {
    spec: SqueezeSpec,
    block_set: BlockSet,
    channels: Vec<usize>,
    proj: Vec<Linear>,
    mlp: Sequential,
}

impl SqueezeHead {
    /// `channels[i]` is the width of the `i`-th selected block.
    pub fn new<R: Rng + ?Sized>(
        spec: &SqueezeSpec,
        block_set: &BlockSet,
        channels: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() != block_set.len() {
            return Err(invalid(
                "squeeze head",
                "one channel count per selected block is required",
            ));
        }
        if spec.dim == 0 || spec.mlp_layers == 0 {
            return Err(invalid("squeeze head", "dim and mlp_layers must be positive"));
        }
        let proj = channels.iter().map(|&c| Linear::new(c, spec.dim, rng)).collect();
        Ok(Self {
            spec: spec.clone(),
            block_set: block_set.clone(),
            channels: channels.to_vec(),
            proj,
            mlp: mlp(spec.dim, spec.dim, spec.dim, spec.mlp_layers, spec.norm, rng),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.proj[0].out_features()
    }

    pub fn spec(&self) -> &SqueezeSpec {
        &self.spec
    }

    pub fn block_set(&self) -> &BlockSet {
        &self.block_set
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    fn check(&self, p: &FeaturePyramid) -> Result<()> {
        if p.block_set != self.block_set || p.channels() != self.channels {
            return Err(Error::Shape(format!(
                "squeeze head built for blocks {} with channels {:?}, got blocks {} with channels {:?}",
                self.block_set,
                self.channels,
                p.block_set,
                p.channels()
            )));
        }
        Ok(())
    }

    fn fuse(parts: Vec<Tensor>) -> Tensor {
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one block");
        for t in it {
            acc.add_assign(&t);
        }
        acc
    }

    /// Teacher representation `N x M`.
    pub fn infer(&self, p: &FeaturePyramid) -> Result<Tensor> {
        self.check(p)?;
        let parts = self.proj.iter().zip(&p.pooled).map(|(l, x)| l.infer(x)).collect();
        Ok(self.mlp.infer(&Self::fuse(parts)))
    }

    pub fn forward(&mut self, p: &FeaturePyramid) -> Result<Tensor> {
        self.check(p)?;
        let parts = self.proj.iter_mut().zip(&p.pooled).map(|(l, x)| l.forward(x)).collect();
        Ok(self.mlp.forward(&Self::fuse(parts)))
    }

    /// Accumulates parameter gradients. The pyramid is detached, so no
    /// input gradient is returned.
    pub fn backward(&mut self, grad: &Tensor) {
        let g = self.mlp.backward(grad);
        for l in &mut self.proj {
            l.backward(&g);
        }
    }
}

impl Module for SqueezeHead {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.proj.iter().flat_map(|l| l.params()).collect();
        p.extend(self.mlp.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.proj.iter_mut().flat_map(|l| l.params_mut()).collect();
        p.extend(self.mlp.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSpec {
    pub image_size: usize,
    pub image_channels: usize,
    pub stem_channels: usize,
    /// One residual stage per entry; every stage after the first halves the resolution.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm_groups: usize,
    pub projector_layers: usize,
    pub projector_hidden: usize,
    pub projector_norm: MlpNorm,
    /// Projection dimension `M`.
    pub out_dim: usize,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            norm_groups: 4,
            projector_layers: 5,
            projector_hidden: 256,
            projector_norm: MlpNorm::Layer,
            out_dim: 256,
        }
    }
}

impl StudentSpec {
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.blocks_per_stage == 0 {
            return Err(invalid("student spec", "at least one stage with one block is required"));
        }
        let widths = std::iter::once(&self.stem_channels).chain(&self.stage_channels);
        for &c in widths {
            if c == 0 || c % self.norm_groups.max(1) != 0 {
                return Err(invalid(
                    "student spec",
                    format!(
                        "channel count {c} is not a positive multiple of norm_groups {}",
                        self.norm_groups
                    ),
                ));
            }
        }
        let down = 2usize << (self.stage_channels.len() - 1);
        if self.image_size < down || !self.image_size.is_multiple_of(down) {
            return Err(invalid(
                "student spec",
                format!(
                    "image_size {} is not divisible by the total stride {down}",
                    self.image_size
                ),
            ));
        }
        if self.projector_layers == 0 || self.out_dim == 0 || self.projector_hidden == 0 {
            return Err(invalid("student spec", "projector sizes must be positive"));
        }
        Ok(())
    }
}

/// Residual backbone with global pooling followed by an MLP projector.
pub struct StudentNet {
    spec: StudentSpec,
    backbone: Sequential,
    projector: Sequential,
}

impl StudentNet {
    pub fn new<R: Rng + ?Sized>(spec: &StudentSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let g = spec.norm_groups;
        let mut backbone = Sequential::new()
            .push(Conv2d::new(spec.image_channels, spec.stem_channels, 3, 2, rng))
            .push(GroupNorm::new(g, spec.stem_channels))
            .push(ActLayer::new(Act::Relu));
        let mut prev = spec.stem_channels;
        for (s, &c) in spec.stage_channels.iter().enumerate() {
            for b in 0..spec.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                backbone = backbone.push(ResBlock::new(prev, c, stride, g, rng));
                prev = c;
            }
        }
        backbone = backbone.push(GlobalAvgPool::new());
        let projector = mlp(
            prev,
            spec.projector_hidden,
            spec.out_dim,
            spec.projector_layers,
            spec.projector_norm,
            rng,
        );
        Ok(Self {
            spec: spec.clone(),
            backbone,
            projector,
        })
    }

    pub fn spec(&self) -> &StudentSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = [self.spec.image_channels, self.spec.image_size, self.spec.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Shape(format!("student expects N x {want:?} images, got {s:?}")));
        }
        Ok(())
    }

    /// Pooled backbone features `N x F`.
    pub fn backbone_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.backbone.infer(x))
    }

    /// `(N x F backbone features, N x M projection)`.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.backbone_features(x)?;
        let z = self.projector.infer(&f);
        Ok((f, z))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let f = self.backbone.forward(x);
        let z = self.projector.forward(&f);
        Ok((f, z))
    }

    /// Backpropagates a projection gradient through projector and backbone.
    pub fn backward(&mut self, grad_proj: &Tensor) {
        let g = self.projector.backward(grad_proj);
        self.backbone.backward(&g);
    }
}

impl Module for StudentNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.projector.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.projector.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub image_size: usize,
    pub image_channels: usize,
    pub block_channels: Vec<usize>,
    pub norm_groups: usize,
    pub w_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            block_channels: vec![16, 32, 64],
            norm_groups: 4,
            w_dim: 64,
        }
    }
}

/// Strided convolutions and a linear read-out to a latent estimate.
pub struct PostHocEncoder {
    spec: EncoderSpec,
    net: Sequential,
}

impl PostHocEncoder {
    pub fn new<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        let l = spec.block_channels.len();
        if l == 0 || !spec.image_size.is_multiple_of(1 << l) || spec.w_dim == 0 {
            return Err(invalid("encoder spec", "image size must be divisible by 2^blocks"));
        }
        let mut net = Sequential::new();
        let mut prev = spec.image_channels;
        for &c in &spec.block_channels {
            let g = if c % spec.norm_groups.max(1) == 0 {
                spec.norm_groups.max(1)
            } else {
                1
            };
            net = net
                .push(Conv2d::new(prev, c, 3, 2, rng))
                .push(GroupNorm::new(g, c))
                .push(ActLayer::new(Act::LeakyRelu));
            prev = c;
        }
        let r = spec.image_size >> l;
        net = net.push(Linear::with_gain(prev * r * r, spec.w_dim, 1.0, rng));
        Ok(Self {
            spec: spec.clone(),
            net,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = [self.spec.image_channels, self.spec.image_size, self.spec.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Shape(format!("encoder expects N x {want:?} images, got {s:?}")));
        }
        Ok(())
    }

    /// Latent estimate `N x d_w`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.infer(x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.forward(x))
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        self.net.backward(grad)
    }
}

impl Module for PostHocEncoder {
    fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }
}
