use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{norm_layer, Norm};
use crate::error::{invalid, Result};
use crate::nn::{Act, ActLayer, Conv2d, Layer, Linear, Module, Param, Reshape, Sequential, Upsample2x};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub w_dim: usize,
    pub mapper_layers: usize,
    /// Channels of the 4x4 map the first block starts from.
    pub base_channels: usize,
    /// Output channels of each block; block `i` (1-based) renders at `4 * 2^i`.
    pub block_channels: Vec<usize>,
    pub image_channels: usize,
    pub norm: Norm,
    pub activation: Act,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            w_dim: 64,
            mapper_layers: 2,
            base_channels: 64,
            block_channels: vec![64, 32, 16],
            image_channels: 3,
            norm: Norm::Group { groups: 4 },
            activation: Act::LeakyRelu,
        }
    }
}

impl GeneratorSpec {
    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn resolution(&self) -> usize {
        4 << self.num_blocks()
    }

    pub fn block_resolution(&self, block: usize) -> usize {
        4 << block
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks() < 2 {
            return Err(invalid("generator spec", "at least two blocks are required"));
        }
        if self.block_channels.contains(&0)
            || self.base_channels == 0
            || self.latent_dim == 0
            || self.w_dim == 0
            || self.image_channels == 0
        {
            return Err(invalid("generator spec", "dimensions and channels must be positive"));
        }
        if self.mapper_layers == 0 {
            return Err(invalid("generator spec", "mapper needs at least one layer"));
        }
        Ok(())
    }

    /// Errors unless the generator renders images of `size` pixels.
    pub fn check_resolution(&self, size: usize) -> Result<()> {
        if self.resolution() != size {
            return Err(invalid(
                "generator spec",
                format!(
                    "{} blocks render {}px images but the dataset is {}px",
                    self.num_blocks(),
                    self.resolution(),
                    size
                ),
            ));
        }
        Ok(())
    }
}

/// Block-decomposed generator: `z -> mapper -> w -> g1 -> .. -> gL -> head`.
/// Each block ends in its activation; that output is the tap point.
pub struct Generator {
    spec: GeneratorSpec,
    mapper: Sequential,
    blocks: Vec<Sequential>,
    head: Sequential,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut mapper = Sequential::new();
        for i in 0..spec.mapper_layers {
            let fan_in = if i == 0 { spec.latent_dim } else { spec.w_dim };
            mapper = mapper.push(Linear::with_gain(fan_in, spec.w_dim, 1.0, rng));
            if i + 1 < spec.mapper_layers {
                mapper = mapper.push(ActLayer::new(spec.activation));
            }
        }

        let mut blocks = Vec::with_capacity(spec.num_blocks());
        let mut prev = spec.base_channels;
        for (i, &c) in spec.block_channels.iter().enumerate() {
            let mut b = Sequential::new();
            if i == 0 {
                b = b
                    .push(Linear::new(spec.w_dim, spec.base_channels * 16, rng))
                    .push(Reshape::new(&[spec.base_channels, 4, 4]))
                    .push(ActLayer::new(spec.activation));
            }
            b = b.push(Upsample2x::new()).push(Conv2d::new(prev, c, 3, 1, rng));
            if let Some(n) = norm_layer(spec.norm, c) {
                b = b.push(n);
            }
            blocks.push(b.push(ActLayer::new(spec.activation)));
            prev = c;
        }
        let head = Sequential::new()
            .push(Conv2d::new(prev, spec.image_channels, 3, 1, rng))
            .push(ActLayer::new(Act::Tanh));
        Ok(Self {
            spec: spec.clone(),
            mapper,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn map_latent(&self, z: &Tensor) -> Tensor {
        self.mapper.infer(z)
    }

    /// Runs block `index` (0-based) on the previous block's output (or `w`).
    pub fn block_forward(&self, index: usize, h: &Tensor) -> Tensor {
        self.blocks[index].infer(h)
    }

    pub fn head_forward(&self, h: &Tensor) -> Tensor {
        self.head.infer(h)
    }

    /// Image for mapped latents `w`.
    pub fn synthesize(&self, w: &Tensor) -> Tensor {
        self.synthesize_with_blocks(w).1
    }

    /// Per-block outputs and the final image.
    pub fn synthesize_with_blocks(&self, w: &Tensor) -> (Vec<Tensor>, Tensor) {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = w.clone();
        for b in &self.blocks {
            h = b.infer(&h);
            outs.push(h.clone());
        }
        let img = self.head.infer(&h);
        (outs, img)
    }

    /// Training forward from prior samples `z` through the mapper.
    pub fn forward_train(&mut self, z: &Tensor) -> Tensor {
        let w = self.mapper.forward(z);
        self.forward_train_from_w(&w)
    }

    /// Training forward from mapped latents.
    pub fn forward_train_from_w(&mut self, w: &Tensor) -> Tensor {
        let mut h = w.clone();
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        self.head.forward(&h)
    }

    /// Backpropagates an image gradient to `w`.
    pub fn backward_to_w(&mut self, grad_image: &Tensor) -> Tensor {
        let mut g = self.head.backward(grad_image);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        g
    }

    /// Backpropagates an image gradient to `z` (after [`Generator::forward_train`]).
    pub fn backward(&mut self, grad_image: &Tensor) -> Tensor {
        let gw = self.backward_to_w(grad_image);
        self.mapper.backward(&gw)
    }

    /// Zeroes the image head's convolution weights, leaving only its bias.
    pub fn zero_head(&mut self) {
        for p in self.head.params_mut().into_iter().take(1) {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Identity weights and zero biases for every mapper layer. Only exact
    /// when no nonlinearity sits between mapper layers.
    pub fn set_identity_mapper(&mut self) -> Result<()> {
        if self.spec.latent_dim != self.spec.w_dim {
            return Err(invalid("generator spec", "identity mapper needs latent_dim == w_dim"));
        }
        if self.spec.mapper_layers > 1 && self.spec.activation != Act::Identity {
            return Err(invalid(
                "generator spec",
                "identity mapper needs a single layer or identity activations",
            ));
        }
        let d = self.spec.w_dim;
        for (i, p) in self.mapper.params_mut().into_iter().enumerate() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
            if i % 2 == 0 {
                for j in 0..d {
                    p.value[j * d + j] = 1.0;
                }
            }
        }
        Ok(())
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.mapper.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.mapper.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}
