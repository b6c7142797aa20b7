use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sqsp_core::config::{data_root, parse_config, ExperimentConfig};
use sqsp_core::data::ImageBatch;
use sqsp_core::eval::{
    discriminator_embeddings, encoder_embeddings, export_embeddings, generator_embeddings, linear_probe,
    pairwise_cka_matrix, student_embeddings, Domain, EmbeddingSet, MetricReport, Source,
};
use sqsp_core::experiment::{self, Trained};
use sqsp_core::features::generator_features;
use sqsp_core::gan::GanCheckpoint;
use sqsp_core::tensor::Tensor;
use sqsp_core::trainer::{load_encoder, load_student, mix_seed, read_metrics, sample_synthetic, Method, RunDir};
use sqsp_core::Error;

mod plot;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sqsp",
    version,
    about = "Distill frozen GAN generator features into a student encoder"
)]
struct Cli {
    /// Experiment seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record the run as deterministic. Runs are single-threaded and seeded either way.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML or JSON experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile the config is layered over.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Dotted-key override, e.g. `--set loss.mu=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the GAN whose generator becomes the frozen teacher.
    PretrainGan {
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a student from a pretrained GAN into a run directory.
    Distill {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        out: PathBuf,
        /// Skip the probe and MMD evaluation after training.
        #[arg(long)]
        no_eval: bool,
    },
    /// Linear probe on frozen features; prints a JSON report.
    Probe {
        /// Student or encoder checkpoint, a run directory, or a GAN checkpoint (probes h_d).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature source for student checkpoints: backbone or projection.
        #[arg(long, default_value = "backbone")]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Write embeddings of one split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "backbone")]
        source: Source,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Generator used for the synthetic split when the checkpoint is not a GAN.
        #[arg(long)]
        gan: Option<PathBuf>,
        /// Rows for the synthetic split.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Plot(Plot),
}

#[derive(Subcommand)]
enum Analyze {
    /// Squared MMD between synthetic and real embeddings of a trained model.
    Mmd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise linear CKA between the blocks of one GAN network.
    Cka {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long, value_enum, default_value = "generator")]
        network: NetworkArg,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Plot {
    /// Loss curves from a run's metrics.csv.
    Loss {
        #[arg(long)]
        metrics: PathBuf,
        /// Columns to draw; defaults to total, squeeze and span.
        #[arg(long)]
        column: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Heatmap of a CKA report written by `analyze cka`.
    Cka {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid of generator samples.
    Samples {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Generator,
    Discriminator,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Invalid { .. }
        | Error::UnknownDataset(_)
        | Error::SpecMismatch(_)
        | Error::CropTooSmall { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

impl Cli {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if self.deterministic {
            o.push("deterministic=true".into());
        }
        o
    }

    fn experiment(&self) -> Result<ExperimentConfig, Error> {
        parse_config(self.config.as_deref(), self.profile.as_deref(), &self.overrides())
    }

    /// Config for commands reading a checkpoint: the snapshot of the run the
    /// checkpoint belongs to, unless `--config` or `--profile` is given.
    fn experiment_for(&self, checkpoint: &Path) -> Result<ExperimentConfig, Error> {
        if self.config.is_none() && self.profile.is_none() {
            if let Some(snap) = run_snapshot(checkpoint) {
                return parse_config(Some(&snap), None, &self.overrides());
            }
        }
        self.experiment()
    }
}

/// `config.json` of the run directory holding `checkpoint`, if any.
fn run_snapshot(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .take(3)
        .map(|d| d.join("config.json"))
        .find(|p| p.is_file())
}

/// A run directory stands for its final checkpoint.
fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        for cand in [path.join("checkpoints").join("final.bin"), path.join("gan.bin")] {
            if cand.is_file() {
                return cand;
            }
        }
    }
    path.to_path_buf()
}

fn checkpoint_kind(path: &Path) -> Result<String, Error> {
    let text = std::fs::read_to_string(sqsp_core::checkpoint::sidecar_path(path))?;
    let meta: sqsp_core::checkpoint::CheckpointMeta = serde_json::from_str(&text)?;
    Ok(meta.kind)
}

enum Loaded {
    Gan(Box<GanCheckpoint>),
    Model(Trained),
}

fn load_any(path: &Path) -> Result<Loaded, Error> {
    let path = checkpoint_file(path);
    match checkpoint_kind(&path)?.as_str() {
        "student" => {
            let s = load_student(&path)?;
            Ok(Loaded::Model(Trained::Student {
                student: s.student,
                logs: Vec::new(),
                method: s.architecture.method,
            }))
        }
        "encoder" => Ok(Loaded::Model(Trained::Encoder {
            encoder: load_encoder(&path)?.1,
            logs: Vec::new(),
        })),
        _ => Ok(Loaded::Gan(Box::new(GanCheckpoint::load(&path)?))),
    }
}

fn splits(cfg: &ExperimentConfig) -> Result<(ImageBatch, ImageBatch), Error> {
    let dir = data_root().join("shapes");
    experiment::load_splits(cfg, Some(&dir))
}

fn embed(model: &Loaded, images: &ImageBatch, source: Source, domain: Domain) -> Result<EmbeddingSet, Error> {
    match (model, source) {
        (Loaded::Model(Trained::Student { student, .. }), Source::Backbone | Source::Projection) => {
            student_embeddings(student, images, source, domain)
        }
        (Loaded::Model(Trained::Encoder { encoder, .. }), Source::Latent) => {
            encoder_embeddings(encoder, images, domain)
        }
        (Loaded::Gan(g), Source::Discriminator) => discriminator_embeddings(&g.discriminator, images, domain),
        _ => Err(Error::Invalid {
            what: "source",
            reason: format!("`{}` is not available from this checkpoint for images", source.name()),
        }),
    }
}

/// Default feature source of a checkpoint.
fn default_source(model: &Loaded, requested: Source) -> Source {
    match model {
        Loaded::Gan(_) => Source::Discriminator,
        Loaded::Model(Trained::Encoder { .. }) => Source::Latent,
        Loaded::Model(Trained::Student { .. }) => requested,
    }
}

fn emit(report: &MetricReport, out: Option<&Path>) -> Result<(), Error> {
    if let Some(p) = out {
        report.write(p)?;
    }
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::PretrainGan { out } => {
            let cfg = cli.experiment()?;
            let (train, _) = splits(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let mut log = csv::Writer::from_path(out.join("gan_metrics.csv"))?;
            log.write_record(["step", "d_loss", "g_loss", "d_accuracy"])?;
            let mut log_err = None;
            let mut ck = experiment::pretrain(&cfg, &train, |step, l| {
                let row = [
                    step.to_string(),
                    l.d_loss.to_string(),
                    l.g_loss.to_string(),
                    l.d_accuracy.to_string(),
                ];
                if let Err(e) = log.write_record(&row).and_then(|_| Ok(log.flush()?)) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e.into());
            }
            ck.save(&out.join("gan.bin"))?;
            eprintln!("saved {}", out.join("gan.bin").display());
        }
        Command::Distill {
            gan,
            method,
            out,
            no_eval,
        } => {
            let mut cfg = cli.experiment()?;
            if let Some(m) = method {
                cfg.distill.method = *m;
                cfg.validate()?;
            }
            let gan = GanCheckpoint::load_expecting(&checkpoint_file(gan), &cfg.gan.spec)?;
            let (train, val) = splits(&cfg)?;
            let mut run_dir = RunDir::create(out, &cfg)?;
            let model = experiment::distill(&cfg, &gan, train.clone(), Some(&mut run_dir))?;
            if !no_eval {
                let summary = experiment::evaluate(&cfg, &model, &gan, &train, &val)?;
                let report = experiment::summary_report(&cfg, &summary, train.len(), val.len());
                emit(&report, Some(&out.join("report.json")))?;
            }
        }
        Command::Probe {
            checkpoint,
            source,
            out,
        } => {
            let cfg = cli.experiment_for(checkpoint)?;
            let model = load_any(checkpoint)?;
            let source = default_source(&model, *source);
            let (train, val) = splits(&cfg)?;
            let tr = embed(&model, &train, source, Domain::Real)?;
            let va = embed(&model, &val, source, Domain::Real)?;
            let mut pc = cfg.eval.probe.clone();
            pc.seed = mix_seed(cfg.seed, 40, pc.seed);
            let res = linear_probe(&tr, &va, cfg.data.shapes.num_classes, &pc)?;
            let mut report = MetricReport::new("linear_probe", &cfg.hash());
            report.values.insert("top1".into(), res.accuracy);
            report.values.insert("train_top1".into(), res.train_accuracy);
            report.sample_sizes.insert("train".into(), tr.len());
            report.sample_sizes.insert("val".into(), va.len());
            report.protocol.insert("source".into(), source.name().into());
            report
                .protocol
                .insert("probe".into(), serde_json::to_string(&res.config)?);
            emit(&report, out.as_deref())?;
        }
        Command::Analyze(Analyze::Mmd { checkpoint, gan, out }) => {
            let cfg = cli.experiment_for(checkpoint)?;
            let Loaded::Model(model) = load_any(checkpoint)? else {
                return Err(Error::Invalid {
                    what: "checkpoint",
                    reason: "expected a student or encoder checkpoint".into(),
                });
            };
            let gan = GanCheckpoint::load(&checkpoint_file(gan))?;
            let (_, val) = splits(&cfg)?;
            let v = experiment::synthetic_real_mmd(&cfg, &model, &gan, &val)?;
            let mut report = MetricReport::new("mmd2", &cfg.hash());
            report.values.insert("mmd2_synthetic_real".into(), v);
            report
                .sample_sizes
                .insert("per_side".into(), cfg.eval.mmd_samples.min(val.len()));
            report
                .protocol
                .insert("kernel".into(), "(x.y/d + 1)^3, unbiased".into());
            emit(&report, out.as_deref())?;
        }
        Command::Analyze(Analyze::Cka {
            gan,
            network,
            samples,
            out,
        }) => {
            let path = checkpoint_file(gan);
            let cfg = cli.experiment_for(&path)?;
            let ck = GanCheckpoint::load(&path)?;
            let layers = match network {
                NetworkArg::Generator => {
                    let (w, _) = sample_synthetic(&ck.generator, *samples, mix_seed(cfg.seed, 42, 0));
                    let all = sqsp_core::features::BlockSet::all(ck.generator.num_blocks());
                    let pyr = generator_features(&ck.generator, &w, &all)?;
                    pyr.per_block.iter().map(Tensor::to_rows_f64).collect::<Vec<_>>()
                }
                NetworkArg::Discriminator => {
                    let (_, val) = splits(&cfg)?;
                    let n = (*samples).min(val.len());
                    let x = val.pixels.select_batch(&(0..n).collect::<Vec<_>>());
                    let (feats, _) = ck.discriminator.features_and_logits(&x)?;
                    feats
                        .iter()
                        .map(|f| sqsp_core::features::pool(f).to_rows_f64())
                        .collect()
                }
            };
            let m = pairwise_cka_matrix(&layers)?;
            let mut report = MetricReport::new("cka", &cfg.hash());
            for ((i, j), v) in m.indexed_iter() {
                report.values.insert(format!("cka[{i},{j}]"), *v);
            }
            report.sample_sizes.insert("samples".into(), layers[0].nrows());
            report.protocol.insert(
                "network".into(),
                match network {
                    NetworkArg::Generator => "generator",
                    NetworkArg::Discriminator => "discriminator",
                }
                .into(),
            );
            report
                .protocol
                .insert("features".into(), "spatially pooled block outputs".into());
            emit(&report, out.as_deref())?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            source,
            split,
            gan,
            samples,
            out,
        } => {
            let cfg = cli.experiment_for(checkpoint)?;
            let model = load_any(checkpoint)?;
            let set = match split {
                SplitArg::Train | SplitArg::Val => {
                    let source = default_source(&model, *source);
                    let (train, val) = splits(&cfg)?;
                    let images = if matches!(split, SplitArg::Train) { train } else { val };
                    embed(&model, &images, source, Domain::Real)?
                }
                SplitArg::Synthetic => {
                    let loaded;
                    let g = match (&model, gan) {
                        (Loaded::Gan(g), _) => g.as_ref(),
                        (_, Some(p)) => {
                            loaded = GanCheckpoint::load(&checkpoint_file(p))?;
                            &loaded
                        }
                        (_, None) => {
                            return Err(Error::Invalid {
                                what: "export",
                                reason: "the synthetic split needs --gan".into(),
                            })
                        }
                    };
                    let (w, x) = sample_synthetic(&g.generator, *samples, mix_seed(cfg.seed, 43, 0));
                    match (&model, *source) {
                        (Loaded::Gan(_), Source::Generator | Source::Latent) => {
                            generator_embeddings(&g.generator, &w, *source)?
                        }
                        _ => {
                            let source = default_source(&model, *source);
                            embed(&model, &ImageBatch::new(x, None), source, Domain::Synthetic)?
                        }
                    }
                }
            };
            export_embeddings(out, &set)?;
            eprintln!("wrote {} rows of {} to {}", set.len(), set.source.name(), out.display());
        }
        Command::Plot(Plot::Loss { metrics, column, out }) => {
            let logs = read_metrics(metrics)?;
            let cols = if column.is_empty() {
                vec!["total".to_string(), "squeeze".into(), "span".into()]
            } else {
                column.clone()
            };
            plot::loss_curves(&logs, &cols, out)?;
        }
        Command::Plot(Plot::Cka { report, out }) => {
            let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(report)?)?;
            plot::cka_heatmap(&r, out)?;
        }
        Command::Plot(Plot::Samples { gan, count, out }) => {
            let path = checkpoint_file(gan);
            let cfg = cli.experiment_for(&path)?;
            let ck = GanCheckpoint::load(&path)?;
            let (_, x) = sample_synthetic(&ck.generator, *count, mix_seed(cfg.seed, 44, 0));
            plot::image_grid(&x, out)?;
        }
    }
    Ok(())
}
