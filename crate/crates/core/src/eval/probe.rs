use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingSet;
use crate::error::{invalid, Error, Result};
use crate::trainer::cosine_lr;

/// Fixed linear-probe protocol: softmax regression on frozen features,
/// optionally standardized with train-split statistics, minibatch SGD with a
/// cosine schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Centre and scale every feature by its train-split mean and std.
    pub standardize: bool,
    pub seed: u64,
}

const STD_FLOOR: f64 = 1e-6;

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Top-1 on the evaluation split, in `[0, 1]`.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub num_classes: usize,
    pub config: ProbeConfig,
}

fn labels_of<'a>(set: &'a EmbeddingSet, what: &'static str) -> Result<&'a [usize]> {
    set.labels
        .as_deref()
        .ok_or_else(|| invalid("linear probe", format!("{what} embeddings carry no labels")))
}

fn logits(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn accuracy(x: &Array2<f64>, labels: &[usize], w: &Array2<f64>, b: &Array1<f64>) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let z = logits(x, w, b);
    let hits = z
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            // First maximum wins ties.
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a softmax classifier on `train` and reports top-1 on `val`.
/// `num_classes` is the dataset class count; every class must appear in `train`.
pub fn linear_probe(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let ytr = labels_of(train, "train")?;
    let yva = labels_of(val, "validation")?;
    let (n, f) = train.features.dim();
    if val.features.ncols() != f {
        return Err(Error::Shape(format!(
            "probe feature dims {} vs {}",
            f,
            val.features.ncols()
        )));
    }
    if num_classes < 2 || cfg.batch_size == 0 {
        return Err(invalid("linear probe", "needs >= 2 classes and a positive batch size"));
    }
    let mut seen = vec![false; num_classes];
    for &y in ytr.iter().chain(yva) {
        if y >= num_classes {
            return Err(invalid(
                "linear probe",
                format!("label {y} out of range for {num_classes} classes"),
            ));
        }
    }
    for &y in ytr {
        seen[y] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::MissingClass(k));
    }
    if !train.features.iter().chain(val.features.iter()).all(|v| v.is_finite()) {
        return Err(invalid("linear probe", "features must be finite"));
    }

    let (xtr, xva) = if cfg.standardize {
        let mean = train.features.mean_axis(Axis(0)).expect("non-empty train split");
        // Constant features stay (near) zero instead of being blown up.
        let scale = train.features.std_axis(Axis(0), 0.0).mapv(|s| 1.0 / (s + STD_FLOOR));
        let z = |x: &Array2<f64>| (x - &mean) * &scale;
        (z(&train.features), z(&val.features))
    } else {
        (train.features.clone(), val.features.clone())
    };

    let mut w = Array2::<f64>::zeros((f, num_classes));
    let mut b = Array1::<f64>::zeros(num_classes);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total, cfg.lr);
            step += 1;
            let xb = xtr.select(Axis(0), chunk);
            let mut p = logits(&xb, &w, &b);
            // Softmax minus one-hot, averaged over the batch.
            for (mut row, &i) in p.axis_iter_mut(Axis(0)).zip(chunk) {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
                row[ytr[i]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let gw = xb.t().dot(&p) + &w * cfg.weight_decay;
            let gb = p.sum_axis(Axis(0));
            vw = &vw * cfg.momentum + &gw;
            vb = &vb * cfg.momentum + &gb;
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
        }
    }
    Ok(ProbeResult {
        accuracy: accuracy(&xva, yva, &w, &b),
        train_accuracy: accuracy(&xtr, ytr, &w, &b),
        num_classes,
        config: cfg.clone(),
    })
}
