//! Post-hoc encoder baseline: learn `E` with `G(E(x)) ~ x` against a frozen
//! generator, using pixel L1, a discriminator-feature perceptual term and
//! latent regression on synthetic pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batch::{mix_seed, RealSampler};
use super::distill::{Method, TrainConfig};
use super::run::StepLog;
use super::schedule::cosine_lr;
use crate::checkpoint::{load_into, read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::data::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::features::pool;
use crate::gan::{Discriminator, Generator};
use crate::networks::{EncoderSpec, PostHocEncoder};
use crate::nn::{zero_grads, Adam, Module};
use crate::tensor::Tensor;

pub const ENCODER_KIND: &str = "encoder";

/// Differentiable image synthesis from a latent.
pub trait Synthesizer {
    fn synthesize_train(&mut self, w: &Tensor) -> Tensor;
    /// Gradient with respect to the `w` of the last `synthesize_train`.
    fn backward_to_w(&mut self, grad_image: &Tensor) -> Tensor;
}

/// Differentiable per-layer image features for a perceptual distance.
pub trait Perceptual {
    fn features(&self, x: &Tensor) -> Vec<Tensor>;
    fn features_train(&mut self, x: &Tensor) -> Vec<Tensor>;
    /// Image gradient given one gradient per feature map of the last `features_train`.
    fn backward(&mut self, grads: Vec<Tensor>) -> Tensor;
}

impl Synthesizer for Generator {
    fn synthesize_train(&mut self, w: &Tensor) -> Tensor {
        self.forward_train_from_w(w)
    }

    fn backward_to_w(&mut self, grad_image: &Tensor) -> Tensor {
        Generator::backward_to_w(self, grad_image)
    }
}

impl Perceptual for Discriminator {
    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        self.features_and_logits(x).expect("image shape checked by caller").0
    }

    fn features_train(&mut self, x: &Tensor) -> Vec<Tensor> {
        self.forward_train(x).expect("image shape checked by caller").0
    }

    fn backward(&mut self, grads: Vec<Tensor>) -> Tensor {
        let grads: Vec<Option<Tensor>> = grads.into_iter().map(Some).collect();
        Discriminator::backward(self, None, &grads)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EncoderLoss {
    pub pixel: f64,
    pub perceptual: f64,
    pub latent: f64,
    pub total: f64,
}

/// `L1(G(w_hat), x) + perc(G(w_hat), x) + lambda * mse(w_hat, w)`, where
/// the latent term is dropped when `w_true` is `None` and the perceptual
/// term is the mean squared distance of spatially pooled features.
/// Returns the loss and its gradient with respect to `w_hat`.
pub fn encoder_objective<S: Synthesizer + ?Sized, P: Perceptual + ?Sized>(
    synth: &mut S,
    perceptual: Option<&mut P>,
    w_hat: &Tensor,
    w_true: Option<&Tensor>,
    target: &Tensor,
    lambda: f64,
) -> Result<(EncoderLoss, Tensor)> {
    let recon = synth.synthesize_train(w_hat);
    if recon.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let mut loss = EncoderLoss::default();

    let n_px = recon.len() as f64;
    let mut g_img = Tensor::zeros(recon.shape());
    for ((g, &r), &t) in g_img.data_mut().iter_mut().zip(recon.data()).zip(target.data()) {
        let d = r as f64 - t as f64;
        loss.pixel += d.abs();
        *g = if d == 0.0 { 0.0 } else { (d.signum() / n_px) as f32 };
    }
    loss.pixel /= n_px;

    if let Some(p) = perceptual {
        let want: Vec<Tensor> = p.features(target).iter().map(pool).collect();
        let maps = p.features_train(&recon);
        let count: usize = want.iter().map(|t| t.len()).sum();
        let mut grads = Vec::with_capacity(maps.len());
        for (m, wt) in maps.iter().zip(&want) {
            let got = pool(m);
            let mut gp = Tensor::zeros(got.shape());
            for ((g, &a), &b) in gp.data_mut().iter_mut().zip(got.data()).zip(wt.data()) {
                let d = a as f64 - b as f64;
                loss.perceptual += d * d;
                *g = (2.0 * d / count as f64) as f32;
            }
            grads.push(crate::features::pool_backward(&gp, m.shape()));
        }
        loss.perceptual /= count as f64;
        g_img.add_assign(&p.backward(grads));
    }

    let mut g_w = synth.backward_to_w(&g_img);
    if let Some(w) = w_true {
        if w.shape() != w_hat.shape() {
            return Err(Error::Shape(format!(
                "latent {:?} vs estimate {:?}",
                w.shape(),
                w_hat.shape()
            )));
        }
        let n = w.len() as f64;
        let mut gl = Tensor::zeros(w.shape());
        for ((g, &a), &b) in gl.data_mut().iter_mut().zip(w_hat.data()).zip(w.data()) {
            let d = a as f64 - b as f64;
            loss.latent += d * d;
            *g = (2.0 * lambda * d / n) as f32;
        }
        loss.latent /= n;
        g_w.add_assign(&gl);
    }
    loss.total = loss.pixel + loss.perceptual + lambda * loss.latent;
    Ok((loss, g_w))
}

/// Frozen copy of a module built by `make` and loaded with `src`'s weights.
fn frozen_copy<M: Module>(src: &M, make: impl FnOnce() -> Result<M>) -> Result<M> {
    let mut m = make()?;
    m.load_flat_weights(&src.flat_weights());
    m.set_trainable(false);
    Ok(m)
}

pub struct EncoderOutcome {
    pub encoder: PostHocEncoder,
    pub logs: Vec<StepLog>,
}

/// Trains the post-hoc encoder baseline. The log reuses [`StepLog`]:
/// `rd` holds the latent term, `squeeze` the synthetic objective, `span`
/// the real reconstruction objective.
pub fn train_posthoc_encoder(
    cfg: &TrainConfig,
    g: &Generator,
    d: &Discriminator,
    real_train: ImageBatch,
    mut on_step: impl FnMut(&StepLog),
) -> Result<EncoderOutcome> {
    let dc = &cfg.distill;
    if dc.method != Method::Encoder {
        return Err(invalid("method", "train_posthoc_encoder runs only the encoder method"));
    }
    if dc.batch_size < 1 || dc.encoder_lambda < 0.0 || dc.encoder_lr.is_nan() || dc.encoder_lr < 0.0 {
        return Err(invalid(
            "encoder",
            "batch_size >= 1, encoder_lambda >= 0 and encoder_lr >= 0 required",
        ));
    }
    d.check_input(&Tensor::zeros(&[
        1,
        g.spec().image_channels,
        g.spec().resolution(),
        g.spec().resolution(),
    ]))?;
    let mut spec = dc.encoder.clone();
    spec.w_dim = g.spec().w_dim;
    spec.image_size = g.spec().resolution();
    spec.image_channels = g.spec().image_channels;
    let mut gen = frozen_copy(g, || Generator::new(g.spec(), &mut ChaCha8Rng::seed_from_u64(0)))?;
    let mut disc = frozen_copy(d, || Discriminator::new(d.spec(), &mut ChaCha8Rng::seed_from_u64(0)))?;
    let mut encoder = PostHocEncoder::new(&spec, &mut ChaCha8Rng::seed_from_u64(mix_seed(dc.seed, 30, 0)))?;
    let mut opt = Adam::new(0.9, 0.999);
    let mut sampler = RealSampler::new(real_train, mix_seed(dc.seed, 31, 0));
    let total = dc.total_steps(sampler.len());
    let n = dc.batch_size;
    let mut logs = Vec::with_capacity(total);

    for step in 0..total {
        let lr = cosine_lr(step, total, dc.encoder_lr);
        zero_grads(&mut encoder);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(dc.seed, 32, step as u64));
        let z = Tensor::randn(&[n, g.spec().latent_dim], 1.0, &mut rng);
        let w = g.map_latent(&z);
        let x = g.synthesize(&w);
        let w_hat = encoder.forward(&x)?;
        let (syn, gw) = encoder_objective(&mut gen, Some(&mut disc), &w_hat, Some(&w), &x, dc.encoder_lambda)?;
        encoder.backward(&gw);
        let mut real = EncoderLoss::default();
        if dc.encoder_real {
            let xr = sampler.next_batch(n.min(sampler.len()))?.pixels;
            let wr = encoder.forward(&xr)?;
            let (l, gw) = encoder_objective(&mut gen, Some(&mut disc), &wr, None, &xr, 0.0)?;
            encoder.backward(&gw);
            real = l;
        }
        let log = StepLog {
            step,
            lr,
            rd: syn.latent,
            squeeze: syn.total,
            span: real.total,
            total: syn.total + real.total,
            student_std_min: f64::NAN,
            ..Default::default()
        };
        if !log.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                components: format!("synthetic={syn:?} real={real:?}"),
            });
        }
        opt.step(encoder.params_mut(), lr as f32);
        on_step(&log);
        logs.push(log);
    }
    Ok(EncoderOutcome { encoder, logs })
}

pub fn save_encoder(
    path: &std::path::Path,
    encoder: &PostHocEncoder,
    mut meta: CheckpointMeta,
) -> Result<CheckpointMeta> {
    meta.kind = ENCODER_KIND.into();
    meta.spec = serde_json::to_value(encoder.spec())?;
    write_checkpoint(path, &[encoder], meta)
}

pub fn load_encoder(path: &std::path::Path) -> Result<(CheckpointMeta, PostHocEncoder)> {
    let (meta, flat) = read_checkpoint(path, ENCODER_KIND)?;
    let spec: EncoderSpec = serde_json::from_value(meta.spec.clone()).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("architecture: {e}"),
    })?;
    let mut enc = PostHocEncoder::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_into(path, &flat, &mut [&mut enc])?;
    Ok((meta, enc))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x = A w` flattened into a 1x2x2 image.
    struct LinearSynth {
        a: Vec<[f32; 2]>,
        last: Option<Tensor>,
    }

    impl LinearSynth {
        fn new() -> Self {
            Self {
                a: vec![[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1], [0.2, 0.9]],
                last: None,
            }
        }
    }

    impl Synthesizer for LinearSynth {
        fn synthesize_train(&mut self, w: &Tensor) -> Tensor {
            self.last = Some(w.clone());
            let n = w.batch();
            let mut out = Tensor::zeros(&[n, 1, 2, 2]);
            for i in 0..n {
                let wi = w.sample(i).to_vec();
                for (o, row) in out.sample_mut(i).iter_mut().zip(&self.a) {
                    *o = row[0] * wi[0] + row[1] * wi[1];
                }
            }
            out
        }

        fn backward_to_w(&mut self, g: &Tensor) -> Tensor {
            let n = g.batch();
            let mut out = Tensor::zeros(&[n, 2]);
            for i in 0..n {
                let gi = g.sample(i).to_vec();
                let o = out.sample_mut(i);
                for (gv, row) in gi.iter().zip(&self.a) {
                    o[0] += gv * row[0];
                    o[1] += gv * row[1];
                }
            }
            out
        }
    }

    fn none() -> Option<&'static mut Discriminator> {
        None
    }

    #[test]
    fn exact_inverse_costs_nothing() {
        let mut s = LinearSynth::new();
        let w = Tensor::from_vec(&[3, 2], vec![0.1, -0.4, 1.2, 0.3, -0.8, 0.6]);
        let x = s.synthesize_train(&w);
        let (l, g) = encoder_objective(&mut s, none(), &w, Some(&w), &x, 1.0).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut s = LinearSynth::new();
        let w_true = Tensor::from_vec(&[2, 2], vec![0.3, -0.2, -0.5, 0.9]);
        let x = s.synthesize_train(&w_true);
        let w_hat = Tensor::from_vec(&[2, 2], vec![0.1, 0.25, -0.9, 0.4]);
        for lambda in [0.0, 0.7] {
            let (_, g) = encoder_objective(&mut s, none(), &w_hat, Some(&w_true), &x, lambda).unwrap();
            let h = 1e-3f32;
            for k in 0..w_hat.len() {
                let mut p = w_hat.clone();
                p.data_mut()[k] += h;
                let mut m = w_hat.clone();
                m.data_mut()[k] -= h;
                let lp = encoder_objective(&mut s, none(), &p, Some(&w_true), &x, lambda)
                    .unwrap()
                    .0
                    .total;
                let lm = encoder_objective(&mut s, none(), &m, Some(&w_true), &x, lambda)
                    .unwrap()
                    .0
                    .total;
                let num = (lp - lm) / (2.0 * h as f64);
                assert!(
                    (num - g.data()[k] as f64).abs() < 1e-4,
                    "k={k} numeric {num} analytic {}",
                    g.data()[k]
                );
            }
        }
    }
}
