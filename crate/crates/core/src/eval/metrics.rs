use ndarray::{Array2, Axis};

use crate::error::{invalid, Error, Result};

fn poly_kernel(g: &Array2<f64>, d: f64) -> Array2<f64> {
    g.mapv(|v| (v / d + 1.0).powi(3))
}

/// Unbiased squared MMD with the cubic polynomial kernel
/// `k(x, y) = (x.y / d + 1)^3`. Rows are samples. Can be slightly
/// negative.
pub fn mmd2(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(invalid("mmd2", "each sample needs at least 2 rows"));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "mmd2 feature dims {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let d = x.ncols() as f64;
    let kxx = poly_kernel(&x.dot(&x.t()), d);
    let kyy = poly_kernel(&y.dot(&y.t()), d);
    let kxy = poly_kernel(&x.dot(&y.t()), d);
    let off_diag = |k: &Array2<f64>| k.sum() - k.diag().sum();
    let (mf, nf) = (m as f64, n as f64);
    Ok(off_diag(&kxx) / (mf * (mf - 1.0)) + off_diag(&kyy) / (nf * (nf - 1.0)) - 2.0 * kxy.sum() / (mf * nf))
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    x - &mean
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Linear CKA between two representations of the same `N` samples.
pub fn cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "cka sample counts {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(invalid("cka", "needs at least 2 samples"));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let xx = frob2(&xc.t().dot(&xc)).sqrt();
    let yy = frob2(&yc.t().dot(&yc)).sqrt();
    if xx == 0.0 {
        return Err(Error::ZeroVariance("cka first argument"));
    }
    if yy == 0.0 {
        return Err(Error::ZeroVariance("cka second argument"));
    }
    Ok(frob2(&yc.t().dot(&xc)) / (xx * yy))
}

/// Symmetric matrix of pairwise CKA values with a unit diagonal.
pub fn pairwise_cka_matrix(layers: &[Array2<f64>]) -> Result<Array2<f64>> {
    if layers.len() < 2 {
        return Err(invalid("pairwise cka", "needs at least 2 layers"));
    }
    let l = layers.len();
    let mut out = Array2::eye(l);
    for i in 0..l {
        for j in i + 1..l {
            let v = cka(&layers[i], &layers[j])?;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}
