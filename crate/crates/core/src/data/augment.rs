use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::color::{hsv_to_rgb, luma, rgb_to_hsv};
use super::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Crops resolving to fewer pixels than this along either side are rejected.
pub const MIN_CROP_PIXELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    fn is_zero(&self) -> bool {
        *self == Self::NONE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Area fraction interval for the random resized crop.
    pub crop_scale: (f32, f32),
    pub flip_prob: f32,
    pub color_jitter: ColorJitter,
    /// Probability that colour jitter is applied at all.
    pub jitter_prob: f32,
    pub grayscale_prob: f32,
    pub blur: bool,
    pub output_size: usize,
}

impl AugmentationPolicy {
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            color_jitter: ColorJitter::NONE,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur: false,
            output_size,
        }
    }

    /// Random resized crop (0.2-1.0), flip 0.5, jitter (0.4, 0.4, 0.4, 0.1)
    /// with p = 0.8, grayscale 0.2, no blur.
    pub fn moco_v2_no_blur(output_size: usize) -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            color_jitter: ColorJitter {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
            },
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur: false,
            output_size,
        }
    }

    pub fn moco_v2(output_size: usize) -> Self {
        Self {
            blur: true,
            ..Self::moco_v2_no_blur(output_size)
        }
    }

    pub fn by_name(name: &str, output_size: usize) -> Result<Self> {
        match name {
            "identity" | "none" => Ok(Self::identity(output_size)),
            "moco-v2-no-blur" => Ok(Self::moco_v2_no_blur(output_size)),
            "moco-v2" => Ok(Self::moco_v2(output_size)),
            other => Err(invalid(
                "augmentation policy",
                format!("unknown policy `{other}` (expected identity, moco-v2, moco-v2-no-blur)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid(
                "augmentation policy",
                "crop_scale must satisfy 0 < lo <= hi <= 1",
            ));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid("augmentation policy", format!("{name} must be in [0, 1]")));
            }
        }
        let j = self.color_jitter;
        if j.brightness < 0.0 || j.contrast < 0.0 || j.saturation < 0.0 || !(0.0..=0.5).contains(&j.hue) {
            return Err(invalid(
                "augmentation policy",
                "jitter strengths must be non-negative, hue <= 0.5",
            ));
        }
        if self.output_size == 0 {
            return Err(invalid("augmentation policy", "output_size must be positive"));
        }
        Ok(())
    }
}

/// Crop window in fractions of the input height and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    /// Application order of the four adjustments (0 = brightness .. 3 = hue).
    pub order: [usize; 4],
}

/// A concrete draw from an [`AugmentationPolicy`].
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub crop: Option<CropBox>,
    pub flip: bool,
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
    pub output_size: usize,
}

impl Transform {
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop: None,
            flip: false,
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            output_size,
        }
    }

    fn touches_color(&self) -> bool {
        self.jitter.is_some() || self.grayscale || self.blur_sigma.is_some()
    }
}

pub fn sample_transform(policy: &AugmentationPolicy, seed: u64) -> Transform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(policy, &mut rng)
}

fn sample_with<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> Transform {
    let crop = if policy.crop_scale == (1.0, 1.0) {
        None
    } else {
        Some(sample_crop(policy.crop_scale, rng))
    };
    let flip = rng.random::<f32>() < policy.flip_prob;
    let jitter = if !policy.color_jitter.is_zero() && rng.random::<f32>() < policy.jitter_prob {
        let j = policy.color_jitter;
        let mut factor = |s: f32| {
            if s > 0.0 {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
            } else {
                1.0
            }
        };
        let brightness = factor(j.brightness);
        let contrast = factor(j.contrast);
        let saturation = factor(j.saturation);
        let hue = if j.hue > 0.0 {
            rng.random_range(-j.hue..=j.hue)
        } else {
            0.0
        };
        let mut order = [0, 1, 2, 3];
        order.shuffle(rng);
        Some(JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        })
    } else {
        None
    };
    let grayscale = rng.random::<f32>() < policy.grayscale_prob;
    let blur_sigma = (policy.blur && rng.random::<f32>() < 0.5).then(|| rng.random_range(0.1f32..=2.0));
    Transform {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        output_size: policy.output_size,
    }
}

/// Random resized crop on a unit square: area fraction from `scale`, log-uniform
/// aspect ratio in [3/4, 4/3], ten attempts before falling back to the full frame.
fn sample_crop<R: Rng + ?Sized>((lo, hi): (f32, f32), rng: &mut R) -> CropBox {
    let (lr0, lr1) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let area = rng.random_range(lo..=hi);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w <= 1.0 && h <= 1.0 {
            let x = rng.random_range(0.0..=1.0 - w);
            let y = rng.random_range(0.0..=1.0 - h);
            return CropBox { x, y, w, h };
        }
    }
    CropBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    }
}

/// Applies one transform to every image in the batch.
pub fn apply_transform(t: &Transform, batch: &ImageBatch) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(invalid("batch", "apply_transform needs a nonempty batch"));
    }
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let o = t.output_size;
    let mut out = Tensor::zeros(&[batch.len(), c, o, o]);
    for i in 0..batch.len() {
        let img = transform_image(t, batch.pixels.sample(i), c, h, w)?;
        out.sample_mut(i).copy_from_slice(&img);
    }
    Ok(ImageBatch::new(out, batch.labels.clone()))
}

/// Draws an independent transform per image from `rng`.
pub fn augment_batch<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    batch: &ImageBatch,
    rng: &mut R,
) -> Result<ImageBatch> {
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let o = policy.output_size;
    let mut out = Tensor::zeros(&[batch.len(), c, o, o]);
    for i in 0..batch.len() {
        let t = sample_with(policy, rng);
        let img = transform_image(&t, batch.pixels.sample(i), c, h, w)?;
        out.sample_mut(i).copy_from_slice(&img);
    }
    Ok(ImageBatch::new(out, batch.labels.clone()))
}

/// Two independently augmented views of the same images; labels are shared.
pub fn two_view(policy: &AugmentationPolicy, batch: &ImageBatch, seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    if batch.is_empty() {
        return Err(invalid("batch", "two_view needs a nonempty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let o = policy.output_size;
    let mut v1 = Tensor::zeros(&[batch.len(), c, o, o]);
    let mut v2 = Tensor::zeros(&[batch.len(), c, o, o]);
    for i in 0..batch.len() {
        let t1 = sample_with(policy, &mut rng);
        let t2 = sample_with(policy, &mut rng);
        let src = batch.pixels.sample(i);
        v1.sample_mut(i).copy_from_slice(&transform_image(&t1, src, c, h, w)?);
        v2.sample_mut(i).copy_from_slice(&transform_image(&t2, src, c, h, w)?);
    }
    Ok((
        ImageBatch::new(v1, batch.labels.clone()),
        ImageBatch::new(v2, batch.labels.clone()),
    ))
}

fn transform_image(t: &Transform, src: &[f32], c: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    let o = t.output_size;
    if o == 0 {
        return Err(invalid("transform", "output_size must be positive"));
    }
    let mut img = match t.crop {
        None if h == o && w == o => src.to_vec(),
        crop => {
            let b = crop.unwrap_or(CropBox {
                x: 0.0,
                y: 0.0,
                w: 1.0,
                h: 1.0,
            });
            let ch = (b.h * h as f32).round() as usize;
            let cw = (b.w * w as f32).round() as usize;
            if ch < MIN_CROP_PIXELS || cw < MIN_CROP_PIXELS {
                return Err(Error::CropTooSmall {
                    crop: ch.min(cw),
                    min: MIN_CROP_PIXELS,
                    size: h.min(w),
                });
            }
            resample(src, c, h, w, b, o)
        }
    };
    if t.flip {
        for ch in 0..c {
            for y in 0..o {
                img[(ch * o + y) * o..(ch * o + y + 1) * o].reverse();
            }
        }
    }
    if c == 3 && t.touches_color() {
        img.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
        if let Some(j) = &t.jitter {
            for op in j.order {
                match op {
                    0 => adjust_brightness(&mut img, j.brightness),
                    1 => adjust_contrast(&mut img, o, j.contrast),
                    2 => adjust_saturation(&mut img, o, j.saturation),
                    _ => adjust_hue(&mut img, o, j.hue),
                }
            }
        }
        if t.grayscale {
            to_grayscale(&mut img, o);
        }
        if let Some(sigma) = t.blur_sigma {
            gaussian_blur(&mut img, c, o, sigma);
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0) * 2.0 - 1.0);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(img)
}

/// Bilinear resampling of the crop window onto an `o x o` grid.
fn resample(src: &[f32], c: usize, h: usize, w: usize, b: CropBox, o: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * o * o];
    let (y0, x0) = (b.y * h as f32, b.x * w as f32);
    let (sy, sx) = (b.h * h as f32 / o as f32, b.w * w as f32 / o as f32);
    for oy in 0..o {
        let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let iy = (fy.floor() as usize).min(h - 1);
        let iy1 = (iy + 1).min(h - 1);
        let ty = fy - iy as f32;
        for ox in 0..o {
            let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let ix = (fx.floor() as usize).min(w - 1);
            let ix1 = (ix + 1).min(w - 1);
            let tx = fx - ix as f32;
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[iy * w + ix] * (1.0 - tx) + p[iy * w + ix1] * tx;
                let bot = p[iy1 * w + ix] * (1.0 - tx) + p[iy1 * w + ix1] * tx;
                out[(ch * o + oy) * o + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn pixel(img: &[f32], hw: usize, i: usize) -> [f32; 3] {
    [img[i], img[hw + i], img[2 * hw + i]]
}

fn set_pixel(img: &mut [f32], hw: usize, i: usize, p: [f32; 3]) {
    img[i] = p[0];
    img[hw + i] = p[1];
    img[2 * hw + i] = p[2];
}

fn adjust_brightness(img: &mut [f32], factor: f32) {
    img.iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
}

fn adjust_contrast(img: &mut [f32], o: usize, factor: f32) {
    let hw = o * o;
    let mean = (0..hw).map(|i| luma(pixel(img, hw, i))).sum::<f32>() / hw as f32;
    img.iter_mut()
        .for_each(|v| *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0));
}

fn adjust_saturation(img: &mut [f32], o: usize, factor: f32) {
    let hw = o * o;
    for i in 0..hw {
        let p = pixel(img, hw, i);
        let g = luma(p);
        set_pixel(img, hw, i, p.map(|v| (g + factor * (v - g)).clamp(0.0, 1.0)));
    }
}

fn adjust_hue(img: &mut [f32], o: usize, shift: f32) {
    let hw = o * o;
    for i in 0..hw {
        let (h, s, v) = rgb_to_hsv(pixel(img, hw, i));
        set_pixel(img, hw, i, hsv_to_rgb(h + shift, s, v));
    }
}

fn to_grayscale(img: &mut [f32], o: usize) {
    let hw = o * o;
    for i in 0..hw {
        let g = luma(pixel(img, hw, i));
        set_pixel(img, hw, i, [g, g, g]);
    }
}

fn gaussian_blur(img: &mut [f32], c: usize, o: usize, sigma: f32) {
    let radius = (2.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize| v.clamp(0, o as isize - 1) as usize;
    let mut tmp = vec![0.0f32; o * o];
    for ch in 0..c {
        let plane = &mut img[ch * o * o..(ch + 1) * o * o];
        for y in 0..o {
            for x in 0..o {
                tmp[y * o + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * plane[y * o + clampi(x as isize + k as isize - radius)])
                    .sum();
            }
        }
        for y in 0..o {
            for x in 0..o {
                plane[y * o + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wgt)| wgt * tmp[clampi(y as isize + k as isize - radius) * o + x])
                    .sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_shapes_dataset, ShapesSpec};

    fn shapes(n: usize) -> ImageBatch {
        make_shapes_dataset(&ShapesSpec::default(), n, 11).unwrap()
    }

    #[test]
    fn identity_policy_gives_identity_transform() {
        let p = AugmentationPolicy::identity(32);
        for seed in 0..20 {
            assert_eq!(sample_transform(&p, seed), Transform::identity(32));
        }
    }

    #[test]
    fn identity_transform_is_bitwise_identity() {
        let b = shapes(5);
        let out = apply_transform(&Transform::identity(32), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn same_seed_same_crop() {
        let p = AugmentationPolicy::moco_v2_no_blur(32);
        let a = sample_transform(&p, 42);
        let b = sample_transform(&p, 42);
        assert_eq!(a, b);
        assert!(a.crop.is_some());
    }

    #[test]
    fn flip_prob_one_always_flips() {
        let p = AugmentationPolicy {
            flip_prob: 1.0,
            ..AugmentationPolicy::identity(32)
        };
        assert!((0..50).all(|s| sample_transform(&p, s).flip));
    }

    #[test]
    fn flip_is_an_involution() {
        let b = shapes(3);
        let t = Transform {
            flip: true,
            ..Transform::identity(32)
        };
        let once = apply_transform(&t, &b).unwrap();
        assert_ne!(once, b);
        assert_eq!(apply_transform(&t, &once).unwrap(), b);
    }

    #[test]
    fn brightness_on_constant_image_matches_scalar_formula() {
        for &(c, factor) in &[(0.2f32, 1.3f32), (-0.5, 0.7), (0.9, 1.4), (-1.0, 1.2)] {
            let img = ImageBatch::new(Tensor::full(&[1, 3, 8, 8], c), None);
            let t = Transform {
                jitter: Some(JitterParams {
                    brightness: factor,
                    contrast: 1.0,
                    saturation: 1.0,
                    hue: 0.0,
                    order: [0, 1, 2, 3],
                }),
                ..Transform::identity(8)
            };
            let out = apply_transform(&t, &img).unwrap();
            let expect = (((c + 1.0) / 2.0 * factor).clamp(0.0, 1.0)) * 2.0 - 1.0;
            for v in out.pixels.data() {
                assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
            }
        }
    }

    #[test]
    fn output_size_and_range() {
        let b = shapes(4);
        let p = AugmentationPolicy::moco_v2(24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_batch(&p, &b, &mut rng).unwrap();
        assert_eq!(out.pixels.shape(), &[4, 3, 24, 24]);
        assert!(out.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(out.labels, b.labels);
    }

    #[test]
    fn tiny_input_is_rejected() {
        let b = ImageBatch::new(Tensor::zeros(&[1, 3, 6, 6]), None);
        let t = Transform {
            crop: Some(CropBox {
                x: 0.0,
                y: 0.0,
                w: 0.4,
                h: 0.4,
            }),
            ..Transform::identity(6)
        };
        assert!(matches!(apply_transform(&t, &b), Err(Error::CropTooSmall { .. })));
    }

    #[test]
    fn two_views_share_labels_and_differ() {
        let b = shapes(100);
        let p = AugmentationPolicy::moco_v2_no_blur(32);
        let (v1, v2) = two_view(&p, &b, 5).unwrap();
        assert_eq!(v1.labels, v2.labels);
        assert_eq!(v1.labels, b.labels);
        let differing = (0..100).filter(|&i| v1.pixels.sample(i) != v2.pixels.sample(i)).count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn identity_two_view_returns_input() {
        let b = shapes(6);
        let (v1, v2) = two_view(&AugmentationPolicy::identity(32), &b, 9).unwrap();
        assert_eq!(v1, b);
        assert_eq!(v2, b);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::moco_v2_no_blur(32).validate().is_ok());
        let bad = AugmentationPolicy {
            flip_prob: 1.5,
            ..AugmentationPolicy::identity(32)
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationPolicy {
            crop_scale: (0.0, 1.0),
            ..AugmentationPolicy::identity(32)
        };
        assert!(bad.validate().is_err());
    }
}
