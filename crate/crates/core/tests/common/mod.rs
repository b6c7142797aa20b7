//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]
// Oracles index explicitly to mirror the formulas.
#![allow(clippy::needless_range_loop)]

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(z: &Array2<f64>) -> Rows {
    z.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn random_matrix(m: usize, n: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((m, n), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    })
}

pub fn oracle_rd(s: &Rows, t: &Rows) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..s.len() {
        for k in 0..s[i].len() {
            let d = s[i][k] - t[i][k];
            acc += d * d;
            count += 1;
        }
    }
    acc / count as f64
}

fn oracle_mean(r: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in r {
        acc += v;
    }
    acc / r.len() as f64
}

pub fn oracle_var(z: &Rows, eps: f64) -> f64 {
    let mut acc = 0.0;
    for r in z {
        let m = oracle_mean(r);
        let mut v = 0.0;
        for x in r {
            v += (x - m) * (x - m);
        }
        v /= (r.len() - 1) as f64;
        let h = 1.0 - (v + eps).sqrt();
        if h > 0.0 {
            acc += h;
        }
    }
    acc / z.len() as f64
}

pub fn oracle_cov_matrix(z: &Rows) -> Rows {
    let m = z.len();
    let n = z[0].len();
    let means: Vec<f64> = z.iter().map(|r| oracle_mean(r)).collect();
    let mut c = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += (z[i][k] - means[i]) * (z[j][k] - means[j]);
            }
            c[i][j] = acc / (n - 1) as f64;
        }
    }
    c
}

pub fn oracle_cov(z: &Rows) -> f64 {
    let c = oracle_cov_matrix(z);
    let mut acc = 0.0;
    for i in 0..c.len() {
        for j in 0..c.len() {
            if i != j {
                acc += c[i][j] * c[i][j];
            }
        }
    }
    acc / z.len() as f64
}

/// Weighted two-argument composite used by both squeeze and span.
pub fn oracle_paired(a: &Rows, b: &Rows, lambda: f64, mu: f64, nu: f64, eps: f64) -> f64 {
    lambda * oracle_rd(a, b) + mu * (oracle_var(a, eps) + oracle_var(b, eps)) + nu * (oracle_cov(a) + oracle_cov(b))
}

/// Central finite differences of `f` at every entry of `z`.
pub fn numeric_grad(z: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(z.dim());
    for idx in 0..z.len() {
        let (i, k) = (idx / z.ncols(), idx % z.ncols());
        let mut zp = z.clone();
        zp[[i, k]] += h;
        let mut zm = z.clone();
        zm[[i, k]] -= h;
        g[[i, k]] = (f(&zp) - f(&zm)) / (2.0 * h);
    }
    g
}

/// Largest relative error between two gradients. Entries where both values
/// are below `1e-7` in magnitude are compared absolutely and must agree to `1e-10`.
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let e = if scale > 1e-7 {
            (a - n).abs() / scale
        } else if (a - n).abs() <= 1e-10 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(e);
    }
    worst
}
