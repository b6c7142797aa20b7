use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{norm_layer, Norm};
use crate::error::{invalid, Result};
use crate::nn::{Act, ActLayer, Conv2d, Layer, Linear, MinibatchStd, Module, Param, Sequential};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub image_size: usize,
    pub image_channels: usize,
    /// Output channels of each stride-2 block; block `i` outputs `size / 2^i`.
    pub block_channels: Vec<usize>,
    pub norm: Norm,
    pub activation: Act,
    /// Feed the head a batch-diversity channel; guards against generator collapse.
    pub minibatch_std: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            block_channels: vec![32, 64, 128],
            norm: Norm::None,
            activation: Act::LeakyRelu,
            minibatch_std: true,
        }
    }
}

impl DiscriminatorSpec {
    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks() < 2 {
            return Err(invalid("discriminator spec", "at least two blocks are required"));
        }
        if self.block_channels.contains(&0) || self.image_channels == 0 {
            return Err(invalid("discriminator spec", "channels must be positive"));
        }
        if !self.image_size.is_multiple_of(1 << self.num_blocks()) {
            return Err(invalid(
                "discriminator spec",
                format!(
                    "image_size {} is not divisible by 2^{}",
                    self.image_size,
                    self.num_blocks()
                ),
            ));
        }
        Ok(())
    }

    pub fn final_resolution(&self) -> usize {
        self.image_size >> self.num_blocks()
    }
}

/// `x -> d1 -> .. -> dL -> linear realness logit`.
pub struct Discriminator {
    spec: DiscriminatorSpec,
    blocks: Vec<Sequential>,
    mbstd: Option<MinibatchStd>,
    head: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.num_blocks());
        let mut prev = spec.image_channels;
        for &c in &spec.block_channels {
            let mut b = Sequential::new().push(Conv2d::new(prev, c, 3, 2, rng));
            if let Some(n) = norm_layer(spec.norm, c) {
                b = b.push(n);
            }
            blocks.push(b.push(ActLayer::new(spec.activation)));
            prev = c;
        }
        let r = spec.final_resolution();
        let extra = usize::from(spec.minibatch_std);
        let head = Linear::with_gain((prev + extra) * r * r, 1, 1.0, rng);
        Ok(Self {
            spec: spec.clone(),
            blocks,
            mbstd: spec.minibatch_std.then(MinibatchStd::new),
            head,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4
            || s[1] != self.spec.image_channels
            || s[2] != self.spec.image_size
            || s[3] != self.spec.image_size
        {
            return Err(crate::error::Error::Shape(format!(
                "discriminator expects N x {} x {} x {}, got {:?}",
                self.spec.image_channels, self.spec.image_size, self.spec.image_size, s
            )));
        }
        Ok(())
    }

    /// Per-block outputs and the `N x 1` realness logits.
    pub fn features_and_logits(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_input(x)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.infer(&h);
            outs.push(h.clone());
        }
        if let Some(m) = &self.mbstd {
            h = m.infer(&h);
        }
        let logits = self.head.infer(&h);
        Ok((outs, logits))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.features_and_logits(x)?.1)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_input(x)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h);
            outs.push(h.clone());
        }
        if let Some(m) = &mut self.mbstd {
            h = m.forward(&h);
        }
        let logits = self.head.forward(&h);
        Ok((outs, logits))
    }

    /// Backpropagates a logit gradient and/or gradients injected at block
    /// outputs. `block_grads` is indexed by block (0-based).
    pub fn backward(&mut self, grad_logits: Option<&Tensor>, block_grads: &[Option<Tensor>]) -> Tensor {
        let mut g: Option<Tensor> = grad_logits.map(|gl| {
            let gh = self.head.backward(gl);
            match &mut self.mbstd {
                Some(m) => m.backward(&gh),
                None => gh,
            }
        });
        for i in (0..self.blocks.len()).rev() {
            if let Some(Some(extra)) = block_grads.get(i) {
                match &mut g {
                    Some(acc) => acc.add_assign(extra),
                    None => g = Some(extra.clone()),
                }
            }
            if let Some(gi) = g.take() {
                g = Some(self.blocks[i].backward(&gi));
            }
        }
        g.expect("discriminator backward needs at least one gradient")
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.blocks.iter().flat_map(|b| b.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }
}
