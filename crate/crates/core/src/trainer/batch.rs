use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_batch, two_view, AugmentationPolicy, ImageBatch};
use crate::error::{invalid, Result};
use crate::gan::Generator;
use crate::tensor::Tensor;

/// SplitMix64 finalizer; derives independent sub-seeds from a run seed.
pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Epoch-shuffled minibatches over a fixed image set.
pub struct RealSampler {
    data: ImageBatch,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl RealSampler {
    pub fn new(data: ImageBatch, seed: u64) -> Self {
        let order = (0..data.len()).collect();
        let cursor = data.len();
        Self {
            data,
            order,
            cursor,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Next `n` images; reshuffles whenever the remaining epoch is too short.
    pub fn next_batch(&mut self, n: usize) -> Result<ImageBatch> {
        if n > self.data.len() {
            return Err(invalid(
                "real batch",
                format!("{n} images requested from a set of {}", self.data.len()),
            ));
        }
        if self.cursor + n > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = &self.order[self.cursor..self.cursor + n];
        self.cursor += n;
        Ok(self.data.select(idx))
    }
}

/// One training minibatch: an augmented synthetic part carrying its latents
/// and a two-view real part.
pub struct MixedBatch {
    pub w: Tensor,
    /// Un-augmented generator output.
    pub synthetic_clean: Tensor,
    pub synthetic: Tensor,
    pub real_views: Option<(Tensor, Tensor)>,
}

impl MixedBatch {
    pub fn num_synthetic(&self) -> usize {
        self.w.batch()
    }

    pub fn num_real(&self) -> usize {
        self.real_views.as_ref().map_or(0, |(a, _)| a.batch())
    }
}

/// Synthetic count `floor(alpha * n)`; the rest are real.
pub fn split_sizes(alpha: f64, n: usize) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("alpha", format!("must lie in [0, 1], got {alpha}")));
    }
    let syn = (alpha * n as f64).floor() as usize;
    Ok((syn, n - syn))
}

/// Latents and (clamped) images from the frozen generator.
pub fn sample_synthetic(g: &Generator, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n, g.spec().latent_dim], 1.0, &mut rng);
    let w = g.map_latent(&z);
    let img = g.synthesize(&w).map(|v| v.clamp(-1.0, 1.0));
    (w, img)
}

/// Builds the `floor(alpha * n)` synthetic + remaining real minibatch.
/// Synthetic images get one view from `policy`, real images two.
pub fn mixed_batch(
    real: Option<&mut RealSampler>,
    g: Option<&Generator>,
    policy: &AugmentationPolicy,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Result<MixedBatch> {
    if n < 2 {
        return Err(invalid("batch size", "mixed batches need N >= 2"));
    }
    let (n_syn, n_real) = split_sizes(alpha, n)?;
    let (w, clean, synthetic) = if n_syn > 0 {
        let g = g.ok_or_else(|| invalid("mixed batch", "synthetic samples need a generator"))?;
        let (w, clean) = sample_synthetic(g, n_syn, mix_seed(seed, 1, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2, 0));
        let aug = augment_batch(policy, &ImageBatch::new(clean.clone(), None), &mut rng)?.pixels;
        (w, clean, aug)
    } else {
        let size = policy.output_size;
        let empty = Tensor::zeros(&[0, 3, size, size]);
        (
            Tensor::zeros(&[0, g.map_or(0, |g| g.spec().w_dim)]),
            empty.clone(),
            empty,
        )
    };
    let real_views = if n_real > 0 {
        let sampler = real.ok_or_else(|| invalid("mixed batch", "real samples need a real dataset"))?;
        let batch = sampler.next_batch(n_real)?;
        let (a, b) = two_view(policy, &batch, mix_seed(seed, 3, 0))?;
        Some((a.pixels, b.pixels))
    } else {
        None
    };
    Ok(MixedBatch {
        w,
        synthetic_clean: clean,
        synthetic,
        real_views,
    })
}
