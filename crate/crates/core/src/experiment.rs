//! End-to-end pipeline pieces shared by the command line and the
//! acceptance suite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{dataset_by_name, load_or_generate, ImageBatch, Split};
use crate::error::{invalid, Result};
use crate::eval::{
    discriminator_embeddings, encoder_embeddings, linear_probe, mmd2, student_embeddings, Domain, EmbeddingSet,
    MetricReport, ProbeResult, Source,
};
use crate::gan::{pretrain_gan, GanCheckpoint, GanStepLosses};
use crate::networks::{PostHocEncoder, StudentNet};
use crate::trainer::{mix_seed, sample_synthetic, train, train_posthoc_encoder, Method, RunDir, StepLog};

/// Data-split seeds; the shapes source fixes train = 1 and val = 2.
const TRAIN_SEED: u64 = 1;
const VAL_SEED: u64 = 2;

/// Train and validation splits, from `cache_dir` when given.
pub fn load_splits(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<(ImageBatch, ImageBatch)> {
    let d = &cfg.data;
    match (cache_dir, d.dataset.as_str()) {
        (Some(dir), "shapes") => Ok((
            load_or_generate(dir, &d.shapes, d.train_size, TRAIN_SEED)?,
            load_or_generate(dir, &d.shapes, d.val_size, VAL_SEED)?,
        )),
        _ => {
            let src = dataset_by_name(&d.dataset, &d.shapes)?;
            Ok((src.load(Split::Train, d.train_size)?, src.load(Split::Val, d.val_size)?))
        }
    }
}

pub fn pretrain(
    cfg: &ExperimentConfig,
    train: &ImageBatch,
    on_step: impl FnMut(usize, &GanStepLosses),
) -> Result<GanCheckpoint> {
    let mut ck = pretrain_gan(&cfg.gan.spec, &cfg.gan.train, train, cfg.seed, on_step)?;
    ck.meta.notes.insert("config_hash".into(), cfg.hash());
    Ok(ck)
}

/// A trained representation model.
pub enum Trained {
    Student {
        student: StudentNet,
        logs: Vec<StepLog>,
        method: Method,
    },
    Encoder {
        encoder: PostHocEncoder,
        logs: Vec<StepLog>,
    },
}

impl Trained {
    pub fn logs(&self) -> &[StepLog] {
        match self {
            Trained::Student { logs, .. } | Trained::Encoder { logs, .. } => logs,
        }
    }

    /// Embeddings used for probing and MMD: student backbone features or
    /// encoder latent estimates.
    pub fn embed(&self, images: &ImageBatch, domain: Domain) -> Result<EmbeddingSet> {
        match self {
            Trained::Student { student, .. } => student_embeddings(student, images, Source::Backbone, domain),
            Trained::Encoder { encoder, .. } => encoder_embeddings(encoder, images, domain),
        }
    }
}

/// Runs the configured distillation method against a pretrained GAN.
pub fn distill(
    cfg: &ExperimentConfig,
    gan: &GanCheckpoint,
    train_set: ImageBatch,
    run: Option<&mut RunDir>,
) -> Result<Trained> {
    let tc = cfg.train_config();
    if tc.distill.method == Method::Encoder {
        let out = train_posthoc_encoder(&tc, &gan.generator, &gan.discriminator, train_set, |_| {})?;
        if let Some(r) = run {
            for l in &out.logs {
                r.log_step(l)?;
            }
            let meta = crate::checkpoint::CheckpointMeta {
                training_steps: out.logs.len(),
                seed: cfg.seed,
                ..Default::default()
            };
            crate::trainer::save_encoder(&r.checkpoint_path("final"), &out.encoder, meta)?;
        }
        return Ok(Trained::Encoder {
            encoder: out.encoder,
            logs: out.logs,
        });
    }
    let out = train(&tc, &gan.generator, train_set, run)?;
    if out.generator_checksum_before != out.generator_checksum_after {
        return Err(invalid("generator", "weights changed during distillation"));
    }
    Ok(Trained::Student {
        student: out.student,
        logs: out.logs,
        method: tc.distill.method,
    })
}

/// Headline numbers of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub probe: ProbeResult,
    /// Squared MMD between synthetic and real validation embeddings.
    pub mmd2: f64,
    /// Smallest per-dimension std of the student projection at the last step.
    pub final_student_std_min: f64,
}

/// Probe on the train/val splits plus the synthetic-vs-real MMD.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &Trained,
    gan: &GanCheckpoint,
    train_set: &ImageBatch,
    val_set: &ImageBatch,
) -> Result<EvalSummary> {
    let tr = model.embed(train_set, Domain::Real)?;
    let va = model.embed(val_set, Domain::Real)?;
    let mut probe_cfg = cfg.eval.probe.clone();
    probe_cfg.seed = mix_seed(cfg.seed, 40, probe_cfg.seed);
    let probe = linear_probe(&tr, &va, cfg.data.shapes.num_classes, &probe_cfg)?;
    let mmd = synthetic_real_mmd(cfg, model, gan, val_set)?;
    Ok(EvalSummary {
        probe,
        mmd2: mmd,
        final_student_std_min: model.logs().last().map_or(f64::NAN, |l| l.student_std_min),
    })
}

/// `mmd2` between embeddings of fresh generator samples and of real
/// validation images, `eval.mmd_samples` per side.
pub fn synthetic_real_mmd(
    cfg: &ExperimentConfig,
    model: &Trained,
    gan: &GanCheckpoint,
    val_set: &ImageBatch,
) -> Result<f64> {
    let n = cfg.eval.mmd_samples.min(val_set.len());
    let (_, syn) = sample_synthetic(&gan.generator, n, mix_seed(cfg.seed, 41, 0));
    let s = model.embed(&ImageBatch::new(syn, None), Domain::Synthetic)?;
    let idx: Vec<usize> = (0..n).collect();
    let r = model.embed(&val_set.select(&idx), Domain::Real)?;
    mmd2(&s.features, &r.features)
}

/// Linear probe on concatenated discriminator features.
pub fn probe_discriminator(
    cfg: &ExperimentConfig,
    gan: &GanCheckpoint,
    train_set: &ImageBatch,
    val_set: &ImageBatch,
) -> Result<ProbeResult> {
    let tr = discriminator_embeddings(&gan.discriminator, train_set, Domain::Real)?;
    let va = discriminator_embeddings(&gan.discriminator, val_set, Domain::Real)?;
    linear_probe(&tr, &va, cfg.data.shapes.num_classes, &cfg.eval.probe)
}

pub fn summary_report(cfg: &ExperimentConfig, s: &EvalSummary, train_len: usize, val_len: usize) -> MetricReport {
    let mut r = MetricReport::new("evaluation", &cfg.hash());
    r.values.insert("probe_top1".into(), s.probe.accuracy);
    r.values.insert("probe_train_top1".into(), s.probe.train_accuracy);
    r.values.insert("mmd2_synthetic_real".into(), s.mmd2);
    r.values.insert("final_student_std_min".into(), s.final_student_std_min);
    r.sample_sizes.insert("probe_train".into(), train_len);
    r.sample_sizes.insert("probe_val".into(), val_len);
    r.sample_sizes
        .insert("mmd_per_side".into(), cfg.eval.mmd_samples.min(val_len));
    r.protocol.insert(
        "probe".into(),
        serde_json::to_string(&s.probe.config).unwrap_or_default(),
    );
    r.protocol.insert(
        "mmd_features".into(),
        "student backbone (encoder: latent estimate)".into(),
    );
    r.protocol.insert("mmd_kernel".into(), "(x.y/d + 1)^3, unbiased".into());
    r
}
