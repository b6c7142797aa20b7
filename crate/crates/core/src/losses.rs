//! Distillation and variance-covariance losses with analytic gradients.
//!
//! Representations are `M x N` matrices: rows are dimensions, columns are
//! samples. Everything here runs in `f64`.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            mu: 25.0,
            nu: 1.0,
            alpha: 0.5,
            epsilon: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("nu", self.nu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(
                    "loss weights",
                    format!("{name} must be a finite value >= 0, got {v}"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(
                "loss weights",
                format!("alpha must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(
                "loss weights",
                format!("epsilon must be > 0, got {}", self.epsilon),
            ));
        }
        Ok(())
    }
}

/// How the squared distance of the distillation term is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RdReduction {
    /// Mean over all `M * N` squared differences.
    #[default]
    ElementMean,
    /// Mean over samples of the squared Euclidean distance.
    SampleNorm,
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "representation shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.ncols() == 0 || a.nrows() == 0 {
        return Err(invalid("representation batch", "needs at least one row and one column"));
    }
    Ok(())
}

fn check_stats(z: &Array2<f64>) -> Result<()> {
    if z.ncols() < 2 {
        return Err(invalid(
            "representation batch",
            format!("needs N >= 2 samples, got {}", z.ncols()),
        ));
    }
    if z.nrows() == 0 {
        return Err(invalid("representation batch", "needs M >= 1 dimensions"));
    }
    Ok(())
}

fn rd_scale(z: &Array2<f64>, reduction: RdReduction) -> f64 {
    match reduction {
        RdReduction::ElementMean => 1.0 / z.len() as f64,
        RdReduction::SampleNorm => 1.0 / z.ncols() as f64,
    }
}

/// Squared-distance distillation loss under the given reduction.
pub fn rd_loss_with(zs: &Array2<f64>, zt: &Array2<f64>, reduction: RdReduction) -> Result<f64> {
    check_pair(zs, zt)?;
    let sq: f64 = zs.iter().zip(zt).map(|(s, t)| (s - t) * (s - t)).sum();
    Ok(sq * rd_scale(zs, reduction))
}

/// Mean squared difference between student and teacher representations.
pub fn rd_loss(zs: &Array2<f64>, zt: &Array2<f64>) -> Result<f64> {
    rd_loss_with(zs, zt, RdReduction::ElementMean)
}

/// Distillation onto a fixed teacher; same form as [`rd_loss`].
pub fn vanilla_distill_loss(zs: &Array2<f64>, zt: &Array2<f64>) -> Result<f64> {
    rd_loss(zs, zt)
}

/// Gradients of [`rd_loss_with`] with respect to both arguments.
pub fn rd_grad(zs: &Array2<f64>, zt: &Array2<f64>, reduction: RdReduction) -> Result<(Array2<f64>, Array2<f64>)> {
    check_pair(zs, zt)?;
    let ds = (zs - zt) * (2.0 * rd_scale(zs, reduction));
    let dt = -&ds;
    Ok((ds, dt))
}

/// Row means and unbiased row variances.
fn row_moments(z: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = z.ncols() as f64;
    z.axis_iter(Axis(0))
        .map(|row| {
            let m = row.sum() / n;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
            (m, v)
        })
        .unzip()
}

/// Hinge on the per-dimension standard deviation:
/// `mean_j max(0, 1 - sqrt(Var(z^j) + eps))`.
pub fn variance_loss(z: &Array2<f64>, eps: f64) -> Result<f64> {
    check_stats(z)?;
    let (_, var) = row_moments(z);
    let m = z.nrows() as f64;
    Ok(var.iter().map(|v| (1.0 - (v + eps).sqrt()).max(0.0)).sum::<f64>() / m)
}

pub fn variance_grad(z: &Array2<f64>, eps: f64) -> Result<Array2<f64>> {
    check_stats(z)?;
    let (mean, var) = row_moments(z);
    let (m, n) = (z.nrows() as f64, z.ncols() as f64);
    let mut g = Array2::zeros(z.dim());
    for (j, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let std = (var[j] + eps).sqrt();
        if 1.0 - std > 0.0 {
            let c = -1.0 / (m * (n - 1.0) * std);
            for (k, v) in row.iter_mut().enumerate() {
                *v = c * (z[[j, k]] - mean[j]);
            }
        }
    }
    Ok(g)
}

fn centered(z: &Array2<f64>) -> Array2<f64> {
    let mean = z.mean_axis(Axis(1)).expect("nonempty");
    z - &mean.insert_axis(Axis(1))
}

/// Unbiased covariance across samples, `M x M`.
pub fn covariance_matrix(z: &Array2<f64>) -> Result<Array2<f64>> {
    check_stats(z)?;
    let zc = centered(z);
    Ok(zc.dot(&zc.t()) / (z.ncols() as f64 - 1.0))
}

/// Sum of squared off-diagonal covariances divided by `M`.
pub fn covariance_loss(z: &Array2<f64>) -> Result<f64> {
    let c = covariance_matrix(z)?;
    let m = z.nrows();
    let total: f64 = c.iter().map(|v| v * v).sum();
    let diag: f64 = (0..m).map(|i| c[[i, i]] * c[[i, i]]).sum();
    Ok((total - diag) / m as f64)
}

/// `4 / (M (N - 1)) * offdiag(C) Zc`. Rows of `Zc` have zero mean, so the
/// product already lies in the centered subspace.
pub fn covariance_grad(z: &Array2<f64>) -> Result<Array2<f64>> {
    check_stats(z)?;
    let zc = centered(z);
    let n1 = z.ncols() as f64 - 1.0;
    let mut c = zc.dot(&zc.t()) / n1;
    c.diag_mut().fill(0.0);
    Ok(c.dot(&zc) * (4.0 / (z.nrows() as f64 * n1)))
}

/// Component values of a paired objective. `_s` terms belong to the first
/// argument, `_t` terms to the second.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rd: f64,
    pub var_s: f64,
    pub var_t: f64,
    pub cov_s: f64,
    pub cov_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rd, self.var_s, self.var_t, self.cov_s, self.cov_t, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `lambda * rd + mu * (var_a + var_b) + nu * (cov_a + cov_b)`; the value
/// shared by the squeeze and span objectives.
pub fn paired_loss(a: &Array2<f64>, b: &Array2<f64>, w: &LossWeights, reduction: RdReduction) -> Result<LossBreakdown> {
    check_pair(a, b)?;
    check_stats(a)?;
    let rd = rd_loss_with(a, b, reduction)?;
    let var_s = variance_loss(a, w.epsilon)?;
    let var_t = variance_loss(b, w.epsilon)?;
    let cov_s = covariance_loss(a)?;
    let cov_t = covariance_loss(b)?;
    Ok(LossBreakdown {
        rd,
        var_s,
        var_t,
        cov_s,
        cov_t,
        total: w.lambda * rd + w.mu * (var_s + var_t) + w.nu * (cov_s + cov_t),
    })
}

/// Squeeze or span loss plus gradients with respect to both arguments.
pub fn paired_loss_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    w: &LossWeights,
    reduction: RdReduction,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    let parts = paired_loss(a, b, w, reduction)?;
    let (rd_a, rd_b) = rd_grad(a, b, reduction)?;
    let mut ga = rd_a * w.lambda;
    let mut gb = rd_b * w.lambda;
    if w.mu != 0.0 {
        ga.scaled_add(w.mu, &variance_grad(a, w.epsilon)?);
        gb.scaled_add(w.mu, &variance_grad(b, w.epsilon)?);
    }
    if w.nu != 0.0 {
        ga.scaled_add(w.nu, &covariance_grad(a)?);
        gb.scaled_add(w.nu, &covariance_grad(b)?);
    }
    Ok((parts, ga, gb))
}

/// Squeeze objective between student `zs` and squeezed teacher `zg`.
pub fn squeeze_loss(zs: &Array2<f64>, zg: &Array2<f64>, w: &LossWeights) -> Result<LossBreakdown> {
    paired_loss(zs, zg, w, RdReduction::ElementMean)
}

/// Two-view objective on real images.
pub fn span_loss(zr: &Array2<f64>, zr2: &Array2<f64>, w: &LossWeights) -> Result<LossBreakdown> {
    paired_loss(zr, zr2, w, RdReduction::ElementMean)
}

pub fn squeeze_loss_grad(
    zs: &Array2<f64>,
    zg: &Array2<f64>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    paired_loss_grad(zs, zg, w, RdReduction::ElementMean)
}

pub fn span_loss_grad(
    zr: &Array2<f64>,
    zr2: &Array2<f64>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    paired_loss_grad(zr, zr2, w, RdReduction::ElementMean)
}

/// `alpha * l_squeeze + (1 - alpha) * l_span`.
pub fn total_loss(l_squeeze: f64, l_span: f64, alpha: f64) -> f64 {
    alpha * l_squeeze + (1.0 - alpha) * l_span
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rd_examples() {
        let z = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(rd_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(rd_loss(&(&z + 1.0), &z).unwrap(), 1.0);
        assert_eq!(rd_loss_with(&(&z + 1.0), &z, RdReduction::SampleNorm).unwrap(), 2.0);
        assert!(rd_loss(&z, &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn variance_examples() {
        let z = array![[1.0, -1.0]];
        assert_eq!(variance_loss(&z, 1e-4).unwrap(), 0.0);
        let c = Array2::from_elem((3, 5), 0.3);
        assert!((variance_loss(&c, 1e-4).unwrap() - 0.99).abs() <= 1e-12);
        assert!(variance_loss(&array![[1.0], [2.0]], 1e-4).is_err());
    }

    #[test]
    fn covariance_examples() {
        let z = array![[1.0, -1.0], [1.0, -1.0]];
        assert_eq!(covariance_matrix(&z).unwrap(), array![[2.0, 2.0], [2.0, 2.0]]);
        assert_eq!(covariance_loss(&z).unwrap(), 4.0);
        assert_eq!(covariance_loss(&array![[1.0, 2.0, 5.0]]).unwrap(), 0.0);
    }

    #[test]
    fn covariance_gradient_rows_are_centered() {
        let z = array![[0.3, -1.2, 2.0, 0.1], [1.0, 0.5, -0.4, 2.2], [0.0, 0.7, 0.9, -1.1]];
        let g = covariance_grad(&z).unwrap();
        for row in g.axis_iter(Axis(0)) {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(2.0, 4.0, 1.0), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
