use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_discriminator, build_generator, Discriminator, GanCheckpoint, GanSpec, Generator};
use crate::checkpoint::CheckpointMeta;
use crate::data::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::nn::{zero_grads, Adam, Module};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            // Unequal rates keep the discriminator ahead; equal rates collapse the generator.
            lr_g: 2e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
        }
    }
}

/// Optimizer state and latent sampler for alternating updates.
pub struct GanOptState {
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub lr_g: f32,
    pub lr_d: f32,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl GanOptState {
    pub fn new(cfg: &GanTrainConfig, seed: u64) -> Self {
        Self {
            adam_g: Adam::new(cfg.beta1, cfg.beta2),
            adam_d: Adam::new(cfg.beta1, cfg.beta2),
            lr_g: cfg.lr_g,
            lr_d: cfg.lr_d,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Fraction of the step's real and fake images the discriminator classified correctly.
    pub d_accuracy: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `E[softplus(-l_real)] + E[softplus(l_fake)]`, i.e. `-log D(x) - log(1 - D(G(z)))`.
pub fn d_loss_from_logits(real: &[f32], fake: &[f32]) -> f64 {
    let r: f64 = real.iter().map(|&l| softplus(-l as f64)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|&l| softplus(l as f64)).sum::<f64>() / fake.len() as f64;
    r + f
}

/// Non-saturating generator loss `E[-log D(G(z))]`.
pub fn g_loss_from_logits(fake: &[f32]) -> f64 {
    fake.iter().map(|&l| softplus(-l as f64)).sum::<f64>() / fake.len() as f64
}

fn sample_z(g: &Generator, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, g.spec().latent_dim], 1.0, rng)
}

/// One discriminator update followed by one generator update.
pub fn adversarial_train_step(
    g: &mut Generator,
    d: &mut Discriminator,
    real: &Tensor,
    state: &mut GanOptState,
) -> Result<GanStepLosses> {
    let n = real.batch();
    if n == 0 {
        return Err(invalid("gan batch", "real batch is empty"));
    }
    let step = state.step;

    let z = sample_z(g, n, &mut state.rng);
    let fake = g.synthesize(&g.map_latent(&z));
    zero_grads(d);
    // Separate passes keep real and fake apart in the minibatch statistic.
    let inv = 1.0 / n as f64;
    let mut logits = Vec::with_capacity(2 * n);
    for (batch, is_real) in [(real, true), (&fake, false)] {
        let (_, l) = d.forward_train(batch)?;
        let dl: Vec<f32> = l
            .data()
            .iter()
            .map(|&v| {
                let s = sigmoid(v as f64);
                (if is_real { s - 1.0 } else { s } * inv) as f32
            })
            .collect();
        logits.extend_from_slice(l.data());
        if l.is_finite() {
            d.backward(Some(&Tensor::from_vec(&[n, 1], dl)), &[]);
        }
    }
    let (lr_, lf_) = logits.split_at(n);
    let d_loss = d_loss_from_logits(lr_, lf_);
    let correct = lr_.iter().filter(|&&l| l > 0.0).count() + lf_.iter().filter(|&&l| l < 0.0).count();
    let d_accuracy = correct as f64 / (2 * n) as f64;
    if !d_loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            components: format!("d_loss={d_loss}"),
        });
    }
    state.adam_d.step(d.params_mut(), state.lr_d);

    let z = sample_z(g, n, &mut state.rng);
    zero_grads(g);
    d.set_trainable(false);
    let fake = g.forward_train(&z);
    let (_, logits) = d.forward_train(&fake)?;
    let g_loss = g_loss_from_logits(logits.data());
    if !g_loss.is_finite() {
        d.set_trainable(true);
        return Err(Error::NonFinite {
            step,
            components: format!("d_loss={d_loss}, g_loss={g_loss}"),
        });
    }
    let dl: Vec<f32> = logits
        .data()
        .iter()
        .map(|&l| ((sigmoid(l as f64) - 1.0) * inv) as f32)
        .collect();
    let dimg = d.backward(Some(&Tensor::from_vec(&[n, 1], dl)), &[]);
    d.set_trainable(true);
    g.backward(&dimg);
    state.adam_g.step(g.params_mut(), state.lr_g);

    state.step += 1;
    Ok(GanStepLosses {
        d_loss,
        g_loss,
        d_accuracy,
    })
}

/// Accuracy of `d` on `real` and as many fresh generator samples.
pub fn discriminator_accuracy(g: &Generator, d: &Discriminator, real: &Tensor, seed: u64) -> Result<f64> {
    let n = real.batch();
    let z = sample_z(g, n, &mut ChaCha8Rng::seed_from_u64(seed));
    let fake = g.synthesize(&g.map_latent(&z));
    let lr_ = d.logits(real)?;
    let lf_ = d.logits(&fake)?;
    let correct = lr_.data().iter().filter(|&&l| l > 0.0).count() + lf_.data().iter().filter(|&&l| l < 0.0).count();
    Ok(correct as f64 / (2 * n) as f64)
}

/// Trains a fresh GAN on `data` and returns it as a checkpoint.
pub fn pretrain_gan(
    spec: &GanSpec,
    cfg: &GanTrainConfig,
    data: &ImageBatch,
    seed: u64,
    mut on_step: impl FnMut(usize, &GanStepLosses),
) -> Result<GanCheckpoint> {
    spec.validate()?;
    if data.height() != spec.discriminator.image_size {
        return Err(invalid(
            "gan spec",
            format!(
                "dataset is {}px, GAN renders {}px",
                data.height(),
                spec.discriminator.image_size
            ),
        ));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(invalid("gan batch_size", "must be in 1..=dataset size"));
    }
    let mut g = build_generator(&spec.generator, seed)?;
    let mut d = build_discriminator(&spec.discriminator, seed)?;
    let mut state = GanOptState::new(cfg, seed.wrapping_add(1));
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut last = None;
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let real = data.pixels.select_batch(&order[cursor..cursor + cfg.batch_size]);
        cursor += cfg.batch_size;
        let losses = adversarial_train_step(&mut g, &mut d, &real, &mut state)?;
        on_step(step, &losses);
        last = Some(losses);
    }

    let eval_n = data.len().min(256);
    let eval_idx: Vec<usize> = (0..eval_n).collect();
    let acc = discriminator_accuracy(&g, &d, &data.pixels.select_batch(&eval_idx), seed.wrapping_add(3))?;
    let mut meta = CheckpointMeta {
        training_steps: cfg.steps,
        seed,
        ..Default::default()
    };
    meta.metrics.insert("d_accuracy".into(), acc);
    if let Some(l) = last {
        meta.metrics.insert("d_loss".into(), l.d_loss);
        meta.metrics.insert("g_loss".into(), l.g_loss);
    }
    meta.notes.insert("train_config".into(), serde_json::to_string(cfg)?);
    Ok(GanCheckpoint {
        generator: g,
        discriminator: d,
        meta,
    })
}
