//! Small block-decomposed GAN used as the frozen teacher.

mod discriminator;
mod generator;
mod train;

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec};
pub use train::{
    adversarial_train_step, discriminator_accuracy, pretrain_gan, GanOptState, GanStepLosses, GanTrainConfig,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nn::{GroupNorm, Module};

/// Feature normalization inside convolutional blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Norm {
    None,
    Group { groups: usize },
}

/// Falls back to a single group when `groups` does not divide `channels`.
pub(crate) fn norm_layer(norm: Norm, channels: usize) -> Option<GroupNorm> {
    match norm {
        Norm::None => None,
        Norm::Group { groups } => {
            let g = if groups >= 1 && channels.is_multiple_of(groups) {
                groups
            } else {
                1
            };
            Some(GroupNorm::new(g, channels))
        }
    }
}

/// Where block features are read: after each block's final activation.
pub const TAP_POINT: &str = "post-activation";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSpec {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl GanSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.generator.check_resolution(self.discriminator.image_size)?;
        if self.generator.image_channels != self.discriminator.image_channels {
            return Err(crate::error::invalid(
                "gan spec",
                "generator and discriminator disagree on image channels",
            ));
        }
        Ok(())
    }
}

pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Generator> {
    Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Discriminator> {
    Discriminator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xD15C))
}

/// A generator/discriminator pair with its training metadata.
pub struct GanCheckpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub meta: CheckpointMeta,
}

const GAN_KIND: &str = "gan";

impl GanCheckpoint {
    /// Writes `<path>` (weights) and `<path>.json` (metadata).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let spec = GanSpec {
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
        };
        self.meta.kind = GAN_KIND.into();
        self.meta.spec = serde_json::to_value(&spec)?;
        self.meta.notes.insert("tap_point".into(), TAP_POINT.into());
        let modules: [&dyn Module; 2] = [&self.generator, &self.discriminator];
        self.meta = write_checkpoint(path, &modules, self.meta.clone())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, flat) = read_checkpoint(path, GAN_KIND)?;
        let spec: GanSpec = serde_json::from_value(meta.spec.clone()).map_err(|e| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("unreadable spec: {e}"),
        })?;
        let mut generator = build_generator(&spec.generator, 0)?;
        let mut discriminator = build_discriminator(&spec.discriminator, 0)?;
        let ng = generator.num_params();
        if flat.len() != ng + discriminator.num_params() {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: "weight count does not match the stored spec".into(),
            });
        }
        generator.load_flat_weights(&flat[..ng]);
        discriminator.load_flat_weights(&flat[ng..]);
        Ok(Self {
            generator,
            discriminator,
            meta,
        })
    }

    /// Loads and checks the stored spec against `expected`.
    pub fn load_expecting(path: &Path, expected: &GanSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        let found = GanSpec {
            generator: ck.generator.spec().clone(),
            discriminator: ck.discriminator.spec().clone(),
        };
        if &found != expected {
            return Err(Error::SpecMismatch(format!(
                "expected {}, found {}",
                serde_json::to_string(expected)?,
                serde_json::to_string(&found)?
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn small() -> GanSpec {
        GanSpec {
            generator: GeneratorSpec {
                latent_dim: 8,
                w_dim: 8,
                base_channels: 8,
                block_channels: vec![8, 6, 4],
                ..Default::default()
            },
            discriminator: DiscriminatorSpec {
                block_channels: vec![4, 6, 8],
                ..Default::default()
            },
        }
    }

    fn latents(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn generator_block_shapes() {
        let spec = small();
        let g = build_generator(&spec.generator, 1).unwrap();
        let w = g.map_latent(&latents(2, 8, 0));
        let (blocks, img) = g.synthesize_with_blocks(&w);
        let shapes: Vec<_> = blocks.iter().map(|b| b.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 8, 8, 8], vec![2, 6, 16, 16], vec![2, 4, 32, 32]]);
        assert_eq!(img.shape(), &[2, 3, 32, 32]);
        assert!(img.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn sequential_blocks_equal_full_forward() {
        let g = build_generator(&small().generator, 2).unwrap();
        let w = g.map_latent(&latents(3, 8, 1));
        let mut h = w.clone();
        for i in 0..g.num_blocks() {
            h = g.block_forward(i, &h);
        }
        assert_eq!(g.head_forward(&h), g.synthesize(&w));
        assert_eq!(g.synthesize(&w), g.synthesize(&w));
    }

    #[test]
    fn zero_head_gives_constant_image() {
        let mut g = build_generator(&small().generator, 3).unwrap();
        g.zero_head();
        let img = g.synthesize(&g.map_latent(&latents(2, 8, 2)));
        let first = img.data()[0];
        assert!(img.data().iter().all(|&v| v == first));
    }

    #[test]
    fn identity_mapper_passes_latents_through() {
        let mut spec = small().generator;
        assert!(build_generator(&spec, 4).unwrap().set_identity_mapper().is_err());
        spec.mapper_layers = 1;
        let mut g = build_generator(&spec, 4).unwrap();
        g.set_identity_mapper().unwrap();
        let z = latents(5, 8, 3);
        let w = g.map_latent(&z);
        for (a, b) in w.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(g.map_latent(&Tensor::zeros(&[2, 8])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mapper_is_row_wise() {
        let g = build_generator(&small().generator, 5).unwrap();
        let z = latents(4, 8, 4);
        let perm = [2, 0, 3, 1];
        assert_eq!(
            g.map_latent(&z.select_batch(&perm)),
            g.map_latent(&z).select_batch(&perm)
        );
    }

    #[test]
    fn discriminator_shapes() {
        let d = build_discriminator(&small().discriminator, 0).unwrap();
        let x = Tensor::randn(&[2, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        let (blocks, logits) = d.features_and_logits(&x).unwrap();
        let res: Vec<_> = blocks.iter().map(|b| b.shape()[2]).collect();
        assert_eq!(res, vec![16, 8, 4]);
        assert_eq!(logits.shape(), &[2, 1]);
        assert_eq!(d.logits(&x).unwrap(), logits);
        assert!(d.logits(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let mut spec = small();
        spec.generator.block_channels.push(4);
        assert!(spec.validate().is_err());
        assert!(spec.generator.check_resolution(32).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gan.bin");
        let spec = small();
        let mut ck = GanCheckpoint {
            generator: build_generator(&spec.generator, 7).unwrap(),
            discriminator: build_discriminator(&spec.discriminator, 7).unwrap(),
            meta: CheckpointMeta {
                training_steps: 12,
                seed: 7,
                ..Default::default()
            },
        };
        ck.save(&path).unwrap();
        let back = GanCheckpoint::load_expecting(&path, &spec).unwrap();
        let w = ck.generator.map_latent(&latents(2, 8, 9));
        assert_eq!(back.generator.synthesize(&w), ck.generator.synthesize(&w));
        assert_eq!(back.meta.training_steps, 12);
        assert_eq!(back.meta.notes["tap_point"], TAP_POINT);

        let mut other = spec.clone();
        other.generator.block_channels = vec![8, 6, 5];
        assert!(matches!(
            GanCheckpoint::load_expecting(&path, &other),
            Err(Error::SpecMismatch(_))
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            GanCheckpoint::load(&path),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }
}
