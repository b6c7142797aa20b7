//! Procedural labeled image data and the augmentation family used for
//! distillation and two-view training.

mod augment;
mod cache;
pub mod color;

pub use augment::{
    apply_transform, augment_batch, sample_transform, two_view, AugmentationPolicy, ColorJitter, CropBox, JitterParams,
    Transform, MIN_CROP_PIXELS,
};
pub use cache::load_or_generate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Images in `[-1, 1]`, laid out `N x C x H x W`, with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Option<Vec<usize>>) -> Self {
        if let Some(l) = &labels {
            assert_eq!(l.len(), pixels.batch(), "label count must match batch size");
        }
        Self { pixels, labels }
    }

    pub fn len(&self) -> usize {
        self.pixels.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            pixels: self.pixels.select_batch(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Shape drawn for each class, cycled when there are more classes than shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    Ellipse,
    Flower,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::Ellipse,
        ShapeKind::Flower,
    ];

    /// Inside test in shape-local coordinates (unit radius, y pointing down).
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Triangle => v <= 0.6 && v >= -1.0 + 1.8 * u.abs(),
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + (v / 0.45) * (v / 0.45) <= 1.0,
            ShapeKind::Flower => {
                let r = (u * u + v * v).sqrt();
                let theta = v.atan2(u);
                r <= 0.6 + 0.4 * (5.0 * theta).cos()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Foreground hue interval per class, in turns. Empty means every class
    /// draws from the full hue circle, so colour carries no class signal.
    pub hue_ranges: Vec<(f32, f32)>,
    /// Position and scale noise amplitude as a fraction of the image size.
    pub jitter: f32,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 4,
            hue_ranges: Vec::new(),
            jitter: 0.15,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(invalid("shapes spec", "image_size must be at least 8"));
        }
        if self.num_classes < 2 || self.num_classes > ShapeKind::ALL.len() {
            return Err(invalid(
                "shapes spec",
                format!("num_classes must be in 2..={}", ShapeKind::ALL.len()),
            ));
        }
        if !self.hue_ranges.is_empty() && self.hue_ranges.len() != self.num_classes {
            return Err(invalid(
                "shapes spec",
                "hue_ranges must be empty or have one interval per class",
            ));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(invalid("shapes spec", "jitter must be in [0, 0.5)"));
        }
        Ok(())
    }

    fn hue_range(&self, class: usize) -> (f32, f32) {
        self.hue_ranges.get(class).copied().unwrap_or((0.0, 1.0))
    }
}

/// Renders `n` class-balanced shape images. Labels cycle `0, 1, .., K-1`.
pub fn make_shapes_dataset(spec: &ShapesSpec, n: usize, seed: u64) -> Result<ImageBatch> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
    let mut pixels = Tensor::zeros(&[n, 3, s, s]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        labels.push(class);
        render_shape(spec, class, &mut rng, pixels.sample_mut(i));
    }
    Ok(ImageBatch::new(pixels, Some(labels)))
}

fn render_shape(spec: &ShapesSpec, class: usize, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let s = spec.image_size;
    let sf = s as f32;
    let kind = ShapeKind::ALL[class % ShapeKind::ALL.len()];
    let j = spec.jitter;
    let cx = sf * (0.5 + j * rng.random_range(-1.0f32..=1.0));
    let cy = sf * (0.5 + j * rng.random_range(-1.0f32..=1.0));
    let radius = sf * 0.3 * (1.0 + j * rng.random_range(-1.0f32..=1.0));
    let angle = rng.random_range(-0.3f32..=0.3);
    let (sin, cos) = angle.sin_cos();

    let (h0, h1) = spec.hue_range(class);
    let fg_hue = (h0 + (h1 - h0) * rng.random::<f32>()).rem_euclid(1.0);
    let fg = color::hsv_to_rgb(fg_hue, rng.random_range(0.5f32..=1.0), rng.random_range(0.65f32..=1.0));
    let bg = color::hsv_to_rgb(
        rng.random::<f32>(),
        rng.random_range(0.0f32..=0.5),
        rng.random_range(0.0f32..=0.35),
    );

    // 2x2 supersampling for anti-aliased edges
    const OFFSETS: [f32; 2] = [0.25, 0.75];
    for y in 0..s {
        for x in 0..s {
            let mut cover = 0.0f32;
            for oy in OFFSETS {
                for ox in OFFSETS {
                    let dx = (x as f32 + ox - cx) / radius;
                    let dy = (y as f32 + oy - cy) / radius;
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    if kind.contains(u, v) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * 0.02;
                let v = bg[c] + cover * (fg[c] - bg[c]) + noise;
                out[(c * s + y) * s + x] = (v.clamp(0.0, 1.0)) * 2.0 - 1.0;
            }
        }
    }
}

/// Split selector for named datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A named source of labeled real images. `shapes` is built in; other
/// loaders plug in by implementing this trait.
pub trait DatasetSource {
    fn name(&self) -> &str;
    fn load(&self, split: Split, n: usize) -> Result<ImageBatch>;
}

pub struct ShapesSource {
    pub spec: ShapesSpec,
}

impl DatasetSource for ShapesSource {
    fn name(&self) -> &str {
        "shapes"
    }

    fn load(&self, split: Split, n: usize) -> Result<ImageBatch> {
        let seed = match split {
            Split::Train => 1,
            Split::Val => 2,
        };
        make_shapes_dataset(&self.spec, n, seed)
    }
}

pub fn dataset_by_name(name: &str, spec: &ShapesSpec) -> Result<Box<dyn DatasetSource>> {
    match name {
        "shapes" => Ok(Box::new(ShapesSource { spec: spec.clone() })),
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset() {
        let b = make_shapes_dataset(&ShapesSpec::default(), 0, 1).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.labels.as_deref(), Some(&[][..]));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ShapesSpec::default();
        let a = make_shapes_dataset(&spec, 300, 7).unwrap();
        let b = make_shapes_dataset(&spec, 300, 7).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        let c = make_shapes_dataset(&spec, 300, 8).unwrap();
        assert_ne!(a.pixels.data(), c.pixels.data());
    }

    #[test]
    fn balanced_classes() {
        let spec = ShapesSpec {
            num_classes: 3,
            ..Default::default()
        };
        let b = make_shapes_dataset(&spec, 300, 7).unwrap();
        let labels = b.labels.unwrap();
        for k in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 100);
        }
        let b = make_shapes_dataset(&ShapesSpec::default(), 301, 7).unwrap();
        let labels = b.labels.unwrap();
        let counts: Vec<usize> = (0..4).map(|k| labels.iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn pixels_bounded() {
        let b = make_shapes_dataset(&ShapesSpec::default(), 20, 3).unwrap();
        assert!(b.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_invalid_spec() {
        let bad = ShapesSpec {
            image_size: 4,
            ..Default::default()
        };
        assert!(make_shapes_dataset(&bad, 1, 0).is_err());
        let bad = ShapesSpec {
            num_classes: 1,
            ..Default::default()
        };
        assert!(make_shapes_dataset(&bad, 1, 0).is_err());
    }

    #[test]
    fn unknown_dataset_name() {
        assert!(matches!(
            dataset_by_name("cifar10", &ShapesSpec::default()),
            Err(Error::UnknownDataset(_))
        ));
    }
}
