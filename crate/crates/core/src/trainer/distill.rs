use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{mix_seed, mixed_batch, MixedBatch, RealSampler};
use super::run::{RunDir, StepLog};
use super::schedule::{cosine_lr, scaled_lr};
use crate::data::{AugmentationPolicy, ImageBatch};
use crate::error::{invalid, Error, Result};
use crate::features::{generator_features, latent_representation, BlockSet, FeaturePyramid};
use crate::gan::Generator;
use crate::losses::{paired_loss_grad, rd_grad, rd_loss_with, total_loss, LossBreakdown, LossWeights, RdReduction};
use crate::networks::{EncoderSpec, SqueezeHead, SqueezeSpec, StudentNet, StudentSpec};
use crate::nn::{zero_grads, Module, Param, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Squeeze on synthetic images plus two-view span on real images.
    Sqsp,
    /// Squeeze module teacher on augmented synthetic images.
    Squeeze,
    /// Student regresses pooled generator features of un-augmented images.
    Vanilla,
    /// As `Vanilla`, with augmented student inputs.
    VanillaAug,
    /// Student regresses the mapped latent.
    Latent,
    /// Squeeze module applied to the mapped latent.
    LatentSqueeze,
    /// Post-hoc encoder trained to invert the generator.
    Encoder,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sqsp,
        Method::Squeeze,
        Method::Vanilla,
        Method::VanillaAug,
        Method::Latent,
        Method::LatentSqueeze,
        Method::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sqsp => "sqsp",
            Method::Squeeze => "squeeze",
            Method::Vanilla => "vanilla",
            Method::VanillaAug => "vanilla_aug",
            Method::Latent => "latent",
            Method::LatentSqueeze => "latent_squeeze",
            Method::Encoder => "encoder",
        }
    }

    pub fn uses_squeeze_head(self) -> bool {
        matches!(self, Method::Sqsp | Method::Squeeze | Method::LatentSqueeze)
    }

    pub fn uses_real_data(self) -> bool {
        matches!(self, Method::Sqsp | Method::Encoder)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == norm).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            invalid("method", format!("`{s}` is not one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    /// One epoch is one pass over the real training split.
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub block_set: String,
    pub augmentation: String,
    pub student: StudentSpec,
    pub squeeze: SqueezeSpec,
    pub encoder: EncoderSpec,
    /// Weight of the latent regression term of the encoder objective.
    pub encoder_lambda: f64,
    pub encoder_lr: f64,
    /// Adds reconstruction-only terms on real images to encoder training.
    pub encoder_real: bool,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Run seed; set from the experiment-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Sqsp,
            epochs: 800,
            steps: None,
            batch_size: 512,
            base_lr: 0.03,
            weight_decay: 5e-4,
            momentum: 0.9,
            block_set: "all".into(),
            augmentation: "moco-v2-no-blur".into(),
            student: StudentSpec::default(),
            squeeze: SqueezeSpec::default(),
            encoder: EncoderSpec::default(),
            encoder_lambda: 1.0,
            encoder_lr: 1e-3,
            encoder_real: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, weights: &LossWeights) -> Result<()> {
        weights.validate()?;
        if self.batch_size < 2 {
            return Err(invalid("batch_size", "must be at least 2"));
        }
        if self.epochs == 0 && self.steps.is_none() {
            return Err(invalid("epochs", "must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(invalid(
                "optimizer",
                "base_lr and weight_decay must be >= 0, momentum in [0, 1)",
            ));
        }
        if self.method == Method::Sqsp {
            let syn = (weights.alpha * self.batch_size as f64).floor() as usize;
            let real = self.batch_size - syn;
            if (syn == 1) || (real == 1) {
                return Err(invalid(
                    "batch_size",
                    format!(
                        "alpha = {} splits {} into {syn} synthetic + {real} real; each nonempty part needs >= 2",
                        weights.alpha, self.batch_size
                    ),
                ));
            }
            if weights.alpha == 0.5 && !self.batch_size.is_multiple_of(2) {
                return Err(invalid("batch_size", "must be even when alpha = 0.5"));
            }
        }
        self.student.validate()?;
        Ok(())
    }

    /// Total optimizer steps for an epoch size of `train_len` images.
    pub fn total_steps(&self, train_len: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * train_len.div_ceil(self.batch_size).max(1))
    }

    /// Augmentation applied to student inputs for this method.
    pub fn student_policy(&self) -> Result<AugmentationPolicy> {
        let size = self.student.image_size;
        if self.method == Method::Vanilla {
            return Ok(AugmentationPolicy::identity(size));
        }
        AugmentationPolicy::by_name(&self.augmentation, size)
    }
}

/// Where the teacher signal for squeeze-style methods comes from.
#[derive(Clone, Copy, Debug)]
pub enum TeacherSource<'a> {
    GeneratorFeatures(&'a BlockSet),
    Latent,
}

impl TeacherSource<'_> {
    fn pyramid(&self, g: &Generator, w: &Tensor) -> Result<FeaturePyramid> {
        match self {
            TeacherSource::GeneratorFeatures(bs) => generator_features(g, w, bs),
            TeacherSource::Latent => Ok(FeaturePyramid::from_blocks(
                BlockSet::all(1),
                vec![latent_representation(w)],
            )),
        }
    }
}

fn min_row_std(z: &Array2<f64>) -> f64 {
    if z.ncols() < 2 {
        return f64::NAN;
    }
    z.axis_iter(Axis(0))
        .map(|r| {
            let m = r.mean().unwrap_or(0.0);
            (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (r.len() as f64 - 1.0)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn describe(b: &LossBreakdown) -> String {
    format!(
        "rd={} var_s={} var_t={} cov_s={} cov_t={} total={}",
        b.rd, b.var_s, b.var_t, b.cov_s, b.cov_t, b.total
    )
}

fn combined_params<'a>(student: &'a mut StudentNet, squeeze: Option<&'a mut SqueezeHead>) -> Vec<&'a mut Param> {
    let mut p = student.params_mut();
    if let Some(s) = squeeze {
        p.extend(s.params_mut());
    }
    p
}

/// One squeeze-and-span update. The synthetic part of `batch` is scored
/// with the squeeze objective against `T(teacher(w))`, the real part with
/// the two-view span objective, and both are mixed with `alpha`. A batch
/// without real images is a plain squeeze step.
#[allow(clippy::too_many_arguments)]
pub fn sqsp_step(
    g: &Generator,
    teacher: TeacherSource<'_>,
    squeeze: &mut SqueezeHead,
    student: &mut StudentNet,
    batch: &MixedBatch,
    weights: &LossWeights,
    reduction: RdReduction,
    opt: &mut Sgd,
    lr: f64,
    step: usize,
) -> Result<StepLog> {
    let n_syn = batch.num_synthetic();
    let n_real = batch.num_real();
    let alpha = match (n_syn, n_real) {
        (_, 0) => 1.0,
        (0, _) => 0.0,
        _ => weights.alpha,
    };
    zero_grads(student);
    zero_grads(squeeze);

    let mut inputs = Vec::with_capacity(3);
    if n_syn > 0 {
        inputs.push(&batch.synthetic);
    }
    if let Some((a, b)) = &batch.real_views {
        inputs.push(a);
        inputs.push(b);
    }
    let x = Tensor::concat_batch(&inputs);
    let (_, proj) = student.forward(&x)?;
    let parts = proj.split_batch(&[n_syn, n_real, n_real]);

    let mut log = StepLog {
        step,
        lr,
        ..Default::default()
    };
    let mut grads: Vec<Tensor> = Vec::with_capacity(3);
    let mut l_sq = 0.0;
    let mut l_sp = 0.0;
    let mut last = LossBreakdown::default();
    let mut teacher_grad = None;

    if n_syn > 0 {
        let pyramid = teacher.pyramid(g, &batch.w)?;
        let zg = squeeze.forward(&pyramid)?.to_columns_f64();
        let zs = parts[0].to_columns_f64();
        let (b, gs, gg) = paired_loss_grad(&zs, &zg, weights, reduction)?;
        log.set_components(&b);
        log.student_std_min = min_row_std(&zs);
        l_sq = b.total;
        last = b;
        grads.push(Tensor::from_columns_f64(&(gs * alpha)));
        teacher_grad = Some(Tensor::from_columns_f64(&(gg * alpha)));
    }
    if n_real > 0 {
        let zr = parts[1].to_columns_f64();
        let zr2 = parts[2].to_columns_f64();
        let (b, g1, g2) = paired_loss_grad(&zr, &zr2, weights, reduction)?;
        if n_syn == 0 {
            log.set_components(&b);
            log.student_std_min = min_row_std(&zr);
        }
        l_sp = b.total;
        last = b;
        grads.push(Tensor::from_columns_f64(&(g1 * (1.0 - alpha))));
        grads.push(Tensor::from_columns_f64(&(g2 * (1.0 - alpha))));
    }
    log.squeeze = l_sq;
    log.span = l_sp;
    log.total = total_loss(l_sq, l_sp, alpha);
    if !log.total.is_finite() || !last.is_finite() {
        return Err(Error::NonFinite {
            step,
            components: describe(&last),
        });
    }

    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    student.backward(&Tensor::concat_batch(&grad_refs));
    if let Some(tg) = teacher_grad {
        squeeze.backward(&tg);
    }
    opt.step(combined_params(student, Some(squeeze)), lr as f32);
    Ok(log)
}

/// Regression onto a fixed teacher: `lambda * rd(S(x), teacher)`.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_step(
    student: &mut StudentNet,
    inputs: &Tensor,
    teacher: &Tensor,
    weights: &LossWeights,
    reduction: RdReduction,
    opt: &mut Sgd,
    lr: f64,
    step: usize,
) -> Result<StepLog> {
    zero_grads(student);
    let (_, proj) = student.forward(inputs)?;
    let zs = proj.to_columns_f64();
    let zt = teacher.to_columns_f64();
    let rd = rd_loss_with(&zs, &zt, reduction)?;
    let total = weights.lambda * rd;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step,
            components: format!("rd={rd}"),
        });
    }
    let (gs, _) = rd_grad(&zs, &zt, reduction)?;
    student.backward(&Tensor::from_columns_f64(&(gs * weights.lambda)));
    opt.step(student.params_mut(), lr as f32);
    Ok(StepLog {
        step,
        lr,
        rd,
        squeeze: total,
        total,
        student_std_min: min_row_std(&zs),
        ..Default::default()
    })
}

/// Hyperparameters shared by every distillation method.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub distill: DistillConfig,
    pub weights: LossWeights,
    pub rd_reduction: RdReduction,
}

impl TrainConfig {
    pub fn new(distill: DistillConfig, weights: LossWeights) -> Self {
        Self {
            distill,
            weights,
            rd_reduction: RdReduction::ElementMean,
        }
    }
}

/// Runs one distillation method against a frozen generator.
pub struct Distiller<'g> {
    cfg: TrainConfig,
    generator: &'g Generator,
    block_set: BlockSet,
    policy: AugmentationPolicy,
    pub student: StudentNet,
    pub squeeze: Option<SqueezeHead>,
    sampler: RealSampler,
    opt: Sgd,
    lr0: f64,
    step: usize,
    total_steps: usize,
    /// Student projection width actually used (fixed teachers force it).
    pub out_dim: usize,
}

impl<'g> Distiller<'g> {
    pub fn new(cfg: &TrainConfig, generator: &'g Generator, real_train: ImageBatch) -> Result<Self> {
        let d = &cfg.distill;
        d.validate(&cfg.weights)?;
        if d.method == Method::Encoder {
            return Err(invalid(
                "method",
                "the encoder baseline is trained by train_posthoc_encoder",
            ));
        }
        generator.spec().check_resolution(d.student.image_size)?;
        let block_set = BlockSet::parse(&d.block_set, generator.num_blocks(), |i| {
            generator.spec().block_resolution(i)
        })?;
        let channels: Vec<usize> = block_set
            .indices()
            .iter()
            .map(|&i| generator.spec().block_channels[i - 1])
            .collect();

        let mut student_spec = d.student.clone();
        match d.method {
            Method::Vanilla | Method::VanillaAug => student_spec.out_dim = channels.iter().sum(),
            Method::Latent => student_spec.out_dim = generator.spec().w_dim,
            _ => {
                if d.squeeze.dim != student_spec.out_dim {
                    return Err(invalid(
                        "student spec",
                        format!(
                            "projection dim {} differs from squeeze dim {}",
                            student_spec.out_dim, d.squeeze.dim
                        ),
                    ));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(d.seed, 10, 0));
        let student = StudentNet::new(&student_spec, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(d.seed, 11, 0));
        let squeeze = match d.method {
            Method::Sqsp | Method::Squeeze => Some(SqueezeHead::new(&d.squeeze, &block_set, &channels, &mut rng)?),
            Method::LatentSqueeze => Some(SqueezeHead::new(
                &d.squeeze,
                &BlockSet::all(1),
                &[generator.spec().w_dim],
                &mut rng,
            )?),
            _ => None,
        };
        let total_steps = d.total_steps(real_train.len());
        if d.method.uses_real_data() {
            let need = d.batch_size - (cfg.weights.alpha * d.batch_size as f64).floor() as usize;
            if need > real_train.len() {
                return Err(invalid("batch_size", "real sub-batch exceeds the training split"));
            }
        }
        Ok(Self {
            policy: d.student_policy()?,
            lr0: scaled_lr(d.base_lr, d.batch_size),
            opt: Sgd::new(d.momentum as f32, d.weight_decay as f32),
            sampler: RealSampler::new(real_train, mix_seed(d.seed, 12, 0)),
            out_dim: student_spec.out_dim,
            cfg: cfg.clone(),
            generator,
            block_set,
            student,
            squeeze,
            step: 0,
            total_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn block_set(&self) -> &BlockSet {
        &self.block_set
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.lr0)
    }

    /// One optimizer step of the configured method.
    pub fn step(&mut self) -> Result<StepLog> {
        let d = &self.cfg.distill;
        let n = d.batch_size;
        let lr = self.current_lr();
        let seed = mix_seed(d.seed, 20, self.step as u64);
        let g = self.generator;
        let log = match d.method {
            Method::Sqsp | Method::Squeeze | Method::LatentSqueeze => {
                let alpha = if d.method == Method::Sqsp {
                    self.cfg.weights.alpha
                } else {
                    1.0
                };
                let real = (d.method == Method::Sqsp).then_some(&mut self.sampler);
                let batch = mixed_batch(real, Some(g), &self.policy, alpha, n, seed)?;
                let teacher = if d.method == Method::LatentSqueeze {
                    TeacherSource::Latent
                } else {
                    TeacherSource::GeneratorFeatures(&self.block_set)
                };
                let squeeze = self.squeeze.as_mut().expect("squeeze methods own a head");
                sqsp_step(
                    g,
                    teacher,
                    squeeze,
                    &mut self.student,
                    &batch,
                    &self.cfg.weights,
                    self.cfg.rd_reduction,
                    &mut self.opt,
                    lr,
                    self.step,
                )?
            }
            Method::Vanilla | Method::VanillaAug | Method::Latent => {
                let batch = mixed_batch(None, Some(g), &self.policy, 1.0, n, seed)?;
                let teacher = if d.method == Method::Latent {
                    latent_representation(&batch.w)
                } else {
                    generator_features(g, &batch.w, &self.block_set)?.concat
                };
                vanilla_step(
                    &mut self.student,
                    &batch.synthetic,
                    &teacher,
                    &self.cfg.weights,
                    self.cfg.rd_reduction,
                    &mut self.opt,
                    lr,
                    self.step,
                )?
            }
            Method::Encoder => unreachable!("rejected in Distiller::new"),
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs every remaining step, streaming logs and checkpoints to `run`.
    pub fn run(&mut self, mut run: Option<&mut RunDir>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.total_steps - self.step);
        let every = self.cfg.distill.checkpoint_every;
        while self.step < self.total_steps {
            let log = self.step()?;
            if let Some(r) = run.as_deref_mut() {
                r.log_step(&log)?;
                if every > 0 && self.step.is_multiple_of(every) && self.step < self.total_steps {
                    r.save_student(&format!("step-{:06}", self.step), self, self.step)?;
                }
            }
            on_step(&log);
            logs.push(log);
        }
        if let Some(r) = run {
            r.save_student("final", self, self.step)?;
        }
        Ok(logs)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }
}

/// Result of a full distillation run.
pub struct TrainOutcome {
    pub student: StudentNet,
    pub squeeze: Option<SqueezeHead>,
    pub logs: Vec<StepLog>,
    pub generator_checksum_before: String,
    pub generator_checksum_after: String,
}

/// Trains a student with the configured method.
pub fn train(
    cfg: &TrainConfig,
    g: &Generator,
    real_train: ImageBatch,
    run: Option<&mut RunDir>,
) -> Result<TrainOutcome> {
    let before = g.checksum();
    let mut d = Distiller::new(cfg, g, real_train)?;
    let logs = d.run(run, |_| {})?;
    Ok(TrainOutcome {
        student: d.student,
        squeeze: d.squeeze,
        logs,
        generator_checksum_before: before,
        generator_checksum_after: g.checksum(),
    })
}
