use sqsp_core::config::{profile, ExperimentConfig};
use sqsp_core::data::make_shapes_dataset;
use sqsp_core::experiment;
use sqsp_core::gan::{build_generator, GanCheckpoint};
use sqsp_core::nn::Module;
use sqsp_core::trainer::*;

fn tiny(method: Method) -> ExperimentConfig {
    let mut cfg = profile("tiny").unwrap();
    cfg.distill.method = method;
    cfg
}

fn tiny_gan(cfg: &ExperimentConfig) -> GanCheckpoint {
    let generator = build_generator(&cfg.gan.spec.generator, 5).unwrap();
    let discriminator = sqsp_core::gan::build_discriminator(&cfg.gan.spec.discriminator, 5).unwrap();
    GanCheckpoint {
        generator,
        discriminator,
        meta: Default::default(),
    }
}

fn data(cfg: &ExperimentConfig) -> sqsp_core::data::ImageBatch {
    make_shapes_dataset(&cfg.data.shapes, cfg.data.train_size, 1).unwrap()
}

#[test]
fn sqsp_with_alpha_one_is_squeeze_only() {
    let mut a = tiny(Method::Sqsp);
    a.loss.alpha = 1.0;
    let b = tiny(Method::Squeeze);
    let gan = tiny_gan(&a);
    let ra = train(&a.train_config(), &gan.generator, data(&a), None).unwrap();
    let rb = train(&b.train_config(), &gan.generator, data(&b), None).unwrap();
    assert_eq!(ra.logs, rb.logs);
    assert_eq!(ra.student.checksum(), rb.student.checksum());
}

#[test]
fn generator_stays_frozen_for_every_method() {
    for m in Method::ALL.into_iter().filter(|&m| m != Method::Encoder) {
        let cfg = tiny(m);
        let gan = tiny_gan(&cfg);
        let before = gan.generator.checksum();
        let out = train(&cfg.train_config(), &gan.generator, data(&cfg), None).unwrap();
        assert_eq!(out.generator_checksum_before, before, "{m}");
        assert_eq!(out.generator_checksum_after, before, "{m}");
        assert_eq!(out.logs.len(), 3, "{m}");
        assert!(out.logs.iter().all(|l| l.total.is_finite()), "{m}");
    }
}

#[test]
fn encoder_baseline_trains_and_embeds() {
    let cfg = tiny(Method::Encoder);
    let gan = tiny_gan(&cfg);
    let set = data(&cfg);
    let model = experiment::distill(&cfg, &gan, set.clone(), None).unwrap();
    assert_eq!(model.logs().len(), 3);
    let emb = model.embed(&set, sqsp_core::eval::Domain::Real).unwrap();
    assert_eq!(emb.dim(), cfg.gan.spec.generator.w_dim);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = tiny(Method::Sqsp);
    let gan = tiny_gan(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let mut run = RunDir::create(&dir.path().join(name), &cfg).unwrap();
        experiment::distill(&cfg, &gan, data(&cfg), Some(&mut run)).unwrap();
        csvs.push(std::fs::read(dir.path().join(name).join("metrics.csv")).unwrap());
    }
    assert!(!csvs[0].is_empty());
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn different_seeds_diverge() {
    let cfg = tiny(Method::Sqsp);
    let mut other = cfg.clone();
    other.seed = 9;
    let gan = tiny_gan(&cfg);
    let a = train(&cfg.train_config(), &gan.generator, data(&cfg), None).unwrap();
    let b = train(&other.train_config(), &gan.generator, data(&cfg), None).unwrap();
    assert_ne!(a.student.checksum(), b.student.checksum());
}

#[test]
fn final_checkpoint_round_trips() {
    let cfg = tiny(Method::Sqsp);
    let gan = tiny_gan(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunDir::create(dir.path(), &cfg).unwrap();
    let out = train(&cfg.train_config(), &gan.generator, data(&cfg), Some(&mut run)).unwrap();
    let loaded = load_student(&run.checkpoint_path("final")).unwrap();
    assert_eq!(loaded.student.checksum(), out.student.checksum());
    assert_eq!(loaded.architecture.method, Method::Sqsp);
    assert_eq!(loaded.meta.training_steps, 3);
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), out.logs);
}

#[test]
fn schedule_plumbing() {
    assert_eq!(scaled_lr(0.03, 512), 0.06);
    assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
    assert_eq!(cosine_lr(100, 100, 0.1), 0.0);
}

#[test]
fn odd_batch_is_rejected_at_half_alpha() {
    let mut cfg = tiny(Method::Sqsp);
    cfg.distill.batch_size = 7;
    let gan = tiny_gan(&cfg);
    assert!(train(&cfg.train_config(), &gan.generator, data(&cfg), None).is_err());
}
