//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 4 7` runs a subset. The desk-profile GAN is
//! cached under the target tmp dir, keyed by its config; delete it to retrain.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{array, s, Array2};
use sqsp_core::config::{profile, ExperimentConfig};
use sqsp_core::data::ImageBatch;
use sqsp_core::eval::{cka, mmd2, student_embeddings, Domain, Source};
use sqsp_core::experiment::{self, EvalSummary, Trained};
use sqsp_core::gan::GanCheckpoint;
use sqsp_core::losses::*;
use sqsp_core::tensor::digest_hex;
use sqsp_core::trainer::{cosine_lr, scaled_lr, Method, RunDir};

const SEEDS: [u64; 3] = [0, 1, 2];
const CHANCE: f64 = 0.25;
const RUN_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let a = random_matrix(8, 16, 1.0, seed);
        let b = random_matrix(8, 16, 1.0, 1000 + seed);
        let (ra, rb) = (rows(&a), rows(&b));
        let pairs = [
            (variance_loss(&a, w.epsilon).unwrap(), oracle_var(&ra, w.epsilon)),
            (covariance_loss(&a).unwrap(), oracle_cov(&ra)),
            (rd_loss(&a, &b).unwrap(), oracle_rd(&ra, &rb)),
            (
                squeeze_loss(&a, &b, &w).unwrap().total,
                oracle_paired(&ra, &rb, w.lambda, w.mu, w.nu, w.epsilon),
            ),
            (
                span_loss(&a, &b, &w).unwrap().total,
                oracle_paired(&ra, &rb, w.lambda, w.mu, w.nu, w.epsilon),
            ),
        ];
        for (x, y) in pairs {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        worst <= 1e-10,
        format!("max abs error {worst:.2e} over 50 8x16 pairs (tol 1e-10)"),
    )
}

fn criterion_2() -> Outcome {
    let w = LossWeights::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let a = random_matrix(4, 6, 0.5, seed);
        let b = random_matrix(4, 6, 0.5, 100 + seed);
        let (ra, rb) = (rows(&a), rows(&b));
        let paired =
            |x: &Array2<f64>, y: &Array2<f64>| oracle_paired(&rows(x), &rows(y), w.lambda, w.mu, w.nu, w.epsilon);
        let mut check = |z: &Array2<f64>, g: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64| {
            worst = worst.max(max_rel_err(g, &numeric_grad(z, h, f)));
        };
        check(&a, &variance_grad(&a, w.epsilon).unwrap(), &|x| {
            oracle_var(&rows(x), w.epsilon)
        });
        check(&a, &covariance_grad(&a).unwrap(), &|x| oracle_cov(&rows(x)));
        let (ga, gb) = rd_grad(&a, &b, RdReduction::ElementMean).unwrap();
        check(&a, &ga, &|x| oracle_rd(&rows(x), &rb));
        check(&b, &gb, &|x| oracle_rd(&ra, &rows(x)));
        let (_, ga, gb) = squeeze_loss_grad(&a, &b, &w).unwrap();
        check(&a, &ga, &|x| paired(x, &b));
        check(&b, &gb, &|x| paired(&a, x));
        let (_, ga, gb) = span_loss_grad(&a, &b, &w).unwrap();
        check(&a, &ga, &|x| paired(x, &b));
        check(&b, &gb, &|x| paired(&a, x));
    }
    outcome(
        worst <= 1e-5,
        format!("max relative error {worst:.2e} on 4x6 inputs, h = 1e-5 (tol 1e-5)"),
    )
}

fn criterion_3() -> Outcome {
    let v = variance_loss(&Array2::from_elem((3, 5), 0.7), 1e-4).unwrap();
    let c = covariance_loss(&array![[1.0, -1.0], [1.0, -1.0]]).unwrap();
    let t = total_loss(2.0, 4.0, 0.5);
    let pass = (v - 0.99).abs() <= 1e-12 && (c - 4.0).abs() <= 1e-12 && t == 3.0;
    outcome(pass, format!("variance {v}, covariance {c}, total {t}"))
}

fn criterion_8() -> Outcome {
    let lr = scaled_lr(0.03, 512);
    let (start, end) = (cosine_lr(0, 300, 0.06), cosine_lr(300, 300, 0.06));
    outcome(
        lr == 0.06 && start == 0.06 && end == 0.0,
        format!("scaled_lr(0.03, 512) = {lr}, cosine endpoints {start} -> {end}"),
    )
}

fn criterion_9() -> Outcome {
    let x = random_matrix(64, 6, 1.0, 1);
    let y = &x.slice(s![.., ..4]) + &random_matrix(64, 4, 0.7, 2);
    let self_err = (cka(&x, &x).unwrap() - 1.0).abs();
    let base = cka(&x, &y).unwrap();
    let q = {
        let m = nalgebra::DMatrix::from_fn(6, 6, |i, j| random_matrix(6, 6, 1.0, 3)[[i, j]]);
        let q = m.qr().q();
        Array2::from_shape_fn((6, 6), |(i, j)| q[(i, j)])
    };
    let inv_err = (cka(&x.dot(&q), &y).unwrap() - base)
        .abs()
        .max((cka(&x.mapv(|v| 13.0 * v), &y).unwrap() - base).abs());
    let n = 500;
    let z = random_matrix(2 * n, 8, 1.0, 4);
    let null = mmd2(&z.slice(s![..n, ..]).to_owned(), &z.slice(s![n.., ..]).to_owned()).unwrap();
    let two_point = mmd2(&array![[1.0], [0.0]], &array![[2.0], [-1.0]]).unwrap();
    let pass = self_err <= 1e-6 && inv_err <= 1e-6 && null.abs() < 3.0 / (n as f64).sqrt() && two_point == -14.5;
    outcome(
        pass,
        format!(
            "|cka(X,X)-1| {self_err:.1e}, invariance {inv_err:.1e}, null mmd2 {null:.4} (bound {:.4}), two-point {two_point}",
            3.0 / (n as f64).sqrt()
        ),
    )
}

/// Desk-scale experiment state shared by the training criteria.
struct Desk {
    cfg: ExperimentConfig,
    gan: GanCheckpoint,
    train: ImageBatch,
    val: ImageBatch,
    runs: BTreeMap<(String, u64), RunResult>,
}

#[derive(Clone)]
struct RunResult {
    summary: EvalSummary,
    /// Smallest per-dimension std of the student projection over the validation split.
    proj_std_min: f64,
    elapsed: Duration,
}

fn tmp_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

impl Desk {
    fn new() -> Self {
        let cfg = profile("desk").unwrap();
        let dir = tmp_dir();
        let (train, val) = experiment::load_splits(&cfg, Some(&dir.join("shapes"))).unwrap();
        let key = serde_json::to_string(&(&cfg.gan, &cfg.data, cfg.seed, env!("CARGO_PKG_VERSION"))).unwrap();
        let path = dir.join(format!("gan-{}.bin", &digest_hex(key.as_bytes())[..16]));
        let gan = match GanCheckpoint::load_expecting(&path, &cfg.gan.spec) {
            Ok(g) => {
                eprintln!("using cached GAN {}", path.display());
                g
            }
            Err(_) => {
                let t = Instant::now();
                let mut g = experiment::pretrain(&cfg, &train, |step, l| {
                    if step % 500 == 0 {
                        eprintln!("gan step {step}: d_loss {:.3} g_loss {:.3}", l.d_loss, l.g_loss);
                    }
                })
                .unwrap();
                g.save(&path).unwrap();
                eprintln!("GAN pretrained in {:.0?}", t.elapsed());
                g
            }
        };
        Self {
            cfg,
            gan,
            train,
            val,
            runs: BTreeMap::new(),
        }
    }

    fn run(&mut self, label: &str, seed: u64, edit: impl Fn(&mut ExperimentConfig)) -> RunResult {
        if let Some(r) = self.runs.get(&(label.to_string(), seed)) {
            return r.clone();
        }
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        edit(&mut cfg);
        cfg.validate().unwrap();
        let t = Instant::now();
        let model = experiment::distill(&cfg, &self.gan, self.train.clone(), None).unwrap();
        let elapsed = t.elapsed();
        let summary = experiment::evaluate(&cfg, &model, &self.gan, &self.train, &self.val).unwrap();
        let proj_std_min = match &model {
            Trained::Student { student, .. } => {
                let p = student_embeddings(student, &self.val, Source::Projection, Domain::Real).unwrap();
                p.features
                    .std_axis(ndarray::Axis(0), 1.0)
                    .fold(f64::INFINITY, |a, &b| a.min(b))
            }
            Trained::Encoder { .. } => f64::NAN,
        };
        eprintln!(
            "  {label} seed {seed}: probe {:.4}, mmd2 {:.5}, proj std min {proj_std_min:.4}, {elapsed:.0?}",
            summary.probe.accuracy, summary.mmd2
        );
        let r = RunResult {
            summary,
            proj_std_min,
            elapsed,
        };
        self.runs.insert((label.to_string(), seed), r.clone());
        r
    }

    fn squeeze(&mut self, seed: u64) -> RunResult {
        self.run("squeeze", seed, |c| c.distill.method = Method::Squeeze)
    }

    fn method(&mut self, m: Method, seed: u64) -> RunResult {
        self.run(m.name(), seed, move |c| c.distill.method = m)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

fn criterion_4(desk: &mut Desk) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let collapsed = desk.run("squeeze-no-reg", seed, |c| {
            c.distill.method = Method::Squeeze;
            c.loss.mu = 0.0;
            c.loss.nu = 0.0;
        });
        let healthy = desk.squeeze(seed);
        let ok_collapse = (collapsed.summary.probe.accuracy - CHANCE).abs() <= 0.05 && collapsed.proj_std_min < 0.01;
        let ok_healthy = healthy.summary.probe.accuracy >= CHANCE + 0.20;
        let ok_time = collapsed.elapsed.max(healthy.elapsed) <= RUN_BUDGET;
        pass &= ok_collapse && ok_healthy && ok_time;
        parts.push(format!(
            "seed {seed}: mu=nu=0 top1 {:.3} std_min {:.2e} | (25,25,1) top1 {:.3}",
            collapsed.summary.probe.accuracy, collapsed.proj_std_min, healthy.summary.probe.accuracy
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_5(desk: &mut Desk) -> Outcome {
    let sqsp: Vec<f64> = SEEDS
        .iter()
        .map(|&s| desk.method(Method::Sqsp, s).summary.probe.accuracy)
        .collect();
    let sq: Vec<f64> = SEEDS.iter().map(|&s| desk.squeeze(s).summary.probe.accuracy).collect();
    outcome(
        mean(&sqsp) >= mean(&sq),
        format!(
            "mean top1 sqsp {:.4} vs squeeze {:.4} (per seed {} vs {})",
            mean(&sqsp),
            mean(&sq),
            fmt(&sqsp),
            fmt(&sq)
        ),
    )
}

fn criterion_6(desk: &mut Desk) -> Outcome {
    let sqsp: Vec<f64> = SEEDS
        .iter()
        .map(|&s| desk.method(Method::Sqsp, s).summary.mmd2)
        .collect();
    let sq: Vec<f64> = SEEDS.iter().map(|&s| desk.squeeze(s).summary.mmd2).collect();
    outcome(
        mean(&sqsp) < mean(&sq),
        format!(
            "mean mmd2 sqsp {:.5} vs squeeze {:.5} (per seed {} vs {})",
            mean(&sqsp),
            mean(&sq),
            fmt(&sqsp),
            fmt(&sq)
        ),
    )
}

fn criterion_7(desk: &mut Desk) -> Outcome {
    let aug: Vec<f64> = SEEDS
        .iter()
        .map(|&s| desk.method(Method::VanillaAug, s).summary.probe.accuracy)
        .collect();
    let plain: Vec<f64> = SEEDS
        .iter()
        .map(|&s| desk.method(Method::Vanilla, s).summary.probe.accuracy)
        .collect();
    outcome(
        mean(&aug) > mean(&plain),
        format!(
            "mean top1 vanilla+aug {:.4} vs vanilla {:.4} (per seed {} vs {})",
            mean(&aug),
            mean(&plain),
            fmt(&aug),
            fmt(&plain)
        ),
    )
}

fn criterion_10(desk: &mut Desk) -> Outcome {
    let mut cfg = desk.cfg.clone();
    cfg.distill.steps = Some(20);
    cfg.deterministic = true;
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let mut run = RunDir::create(&root, &cfg).unwrap();
        experiment::distill(&cfg, &desk.gan, desk.train.clone(), Some(&mut run)).unwrap();
        files.push(std::fs::read(root.join("metrics.csv")).unwrap());
    }
    let same = files[0] == files[1] && !files[0].is_empty();
    outcome(
        same,
        format!(
            "two 20-step sqsp runs, metrics.csv {} bytes, identical: {same}",
            files[0].len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let names = [
        (1, "loss-oracle equivalence"),
        (2, "gradient checks"),
        (3, "closed-form spot values"),
        (4, "collapse ablation"),
        (5, "span ordering"),
        (6, "domain-gap trend"),
        (7, "augmentation effect"),
        (8, "lr plumbing"),
        (9, "metric sanity"),
        (10, "reproducibility"),
    ];
    let mut desk: Option<Desk> = None;
    let mut failed = 0;
    for (n, name) in names {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => {
                let d = desk.get_or_insert_with(Desk::new);
                match n {
                    4 => criterion_4(d),
                    5 => criterion_5(d),
                    6 => criterion_6(d),
                    7 => criterion_7(d),
                    _ => criterion_10(d),
                }
            }
        };
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
