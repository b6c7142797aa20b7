//! PNG output. No text rendering: axes are drawn, values go in the reports.

use std::path::Path;

use image::{Rgb, RgbImage};
use sqsp_core::eval::MetricReport;
use sqsp_core::tensor::Tensor;
use sqsp_core::trainer::StepLog;
use sqsp_core::Error;

const W: u32 = 800;
const H: u32 = 480;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn save(img: &RgbImage, out: &Path) -> Result<(), Error> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(out).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn column(log: &StepLog, name: &str) -> Option<f64> {
    Some(match name {
        "lr" => log.lr,
        "rd" => log.rd,
        "var_s" => log.var_s,
        "var_t" => log.var_t,
        "cov_s" => log.cov_s,
        "cov_t" => log.cov_t,
        "squeeze" => log.squeeze,
        "span" => log.span,
        "total" => log.total,
        "student_std_min" => log.student_std_min,
        _ => return None,
    })
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// One polyline per column, each scaled to its own min/max so that
/// components of very different magnitude stay readable.
pub fn loss_curves(logs: &[StepLog], columns: &[String], out: &Path) -> Result<(), Error> {
    if logs.len() < 2 {
        return Err(Error::Invalid {
            what: "metrics",
            reason: "need at least two logged steps".into(),
        });
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (left, bottom) = (MARGIN as f64, (H - MARGIN) as f64);
    let (width, height) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (left, bottom), (left + width, bottom), black);
    line(&mut img, (left, bottom), (left, bottom - height), black);

    let max_step = logs.last().map_or(1, |l| l.step).max(1) as f64;
    for (k, name) in columns.iter().enumerate() {
        let ys = logs
            .iter()
            .map(|l| column(l, name))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Invalid {
                what: "column",
                reason: format!("`{name}` is not a metrics column"),
            })?;
        let finite = ys.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pt = |i: usize| {
            let x = left + width * logs[i].step as f64 / max_step;
            let y = bottom - height * (ys[i] - lo) / span;
            (x, y)
        };
        for i in 1..logs.len() {
            if ys[i - 1].is_finite() && ys[i].is_finite() {
                line(&mut img, pt(i - 1), pt(i), color);
            }
        }
    }
    save(&img, out)
}

/// Square matrix from `cka[i,j]` keys.
fn cka_matrix(r: &MetricReport) -> Result<Vec<Vec<f64>>, Error> {
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (k, v) in &r.values {
        let inner = k.strip_prefix("cka[").and_then(|s| s.strip_suffix(']'));
        let ij = inner
            .and_then(|s| s.split_once(','))
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
        if let Some((i, j)) = ij {
            cells.push((i, j, *v));
        }
    }
    let n = cells.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
    if n == 0 || cells.len() != n * n {
        return Err(Error::Invalid {
            what: "report",
            reason: "not a complete CKA matrix".into(),
        });
    }
    let mut m = vec![vec![0.0; n]; n];
    for (i, j, v) in cells {
        m[i][j] = v;
    }
    Ok(m)
}

/// Blue (0) to yellow (1) cells.
pub fn cka_heatmap(r: &MetricReport, out: &Path) -> Result<(), Error> {
    let m = cka_matrix(r)?;
    let cell = (400 / m.len() as u32).max(8);
    let side = cell * m.len() as u32;
    let img = RgbImage::from_fn(side, side, |x, y| {
        let v = m[(y / cell) as usize][(x / cell) as usize].clamp(0.0, 1.0);
        Rgb([(255.0 * v) as u8, (200.0 * v + 30.0) as u8, (255.0 * (1.0 - v)) as u8])
    });
    save(&img, out)
}

/// Images in `[-1, 1]` tiled on a square-ish grid.
pub fn image_grid(x: &Tensor, out: &Path) -> Result<(), Error> {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if n == 0 || c != 3 {
        return Err(Error::Shape(format!("expected N x 3 x H x W images, got {shape:?}")));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let mut img = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..n {
        let s = x.sample(i);
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for xx in 0..w {
                let px = |ch: usize| ((s[(ch * h + y) * w + xx].clamp(-1.0, 1.0) + 1.0) * 127.5) as u8;
                img.put_pixel((ox + xx) as u32, (oy + y) as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    save(&img, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cka_matrix_roundtrip() {
        let mut r = MetricReport::new("cka", "h");
        for i in 0..3 {
            for j in 0..3 {
                r.values.insert(format!("cka[{i},{j}]"), (i * 3 + j) as f64);
            }
        }
        let m = cka_matrix(&r).unwrap();
        assert_eq!(m[2][1], 7.0);
        r.values.remove("cka[2,2]");
        assert!(cka_matrix(&r).is_err());
    }

    #[test]
    fn grid_rejects_gray_images() {
        let t = Tensor::zeros(&[2, 1, 4, 4]);
        assert!(image_grid(&t, Path::new("unused.png")).is_err());
    }
}
