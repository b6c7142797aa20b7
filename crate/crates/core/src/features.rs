//! Representation taps: pooled multi-block generator and discriminator
//! features, and the mapped latent.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gan::{Discriminator, Generator};
use crate::tensor::Tensor;

/// Spatial mean `N x C x H x W -> N x C`. Lower-rank inputs pass through as `N x F`.
pub fn pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    if s.len() < 4 {
        let n = x.batch();
        return x.clone().reshape(&[n, x.sample_len()]);
    }
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * c);
    for chunk in x.data().chunks_exact(hw) {
        let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
        out.push((sum / hw as f64) as f32);
    }
    Tensor::from_vec(&[n, c], out)
}

/// Gradient of [`pool`]: spreads each `N x C` entry evenly over its map.
pub fn pool_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    if in_shape.len() < 4 {
        return grad.clone().reshape(in_shape);
    }
    let hw: usize = in_shape[2..].iter().product();
    let inv = 1.0 / hw as f32;
    let mut out = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(in_shape, out)
}

/// Nonempty, sorted set of 1-based block indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct BlockSet(Vec<usize>);

impl BlockSet {
    pub fn all(num_blocks: usize) -> Self {
        Self((1..=num_blocks).collect())
    }

    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(invalid("block set", "must select at least one block"));
        }
        if indices[0] == 0 {
            return Err(invalid("block set", "block indices start at 1"));
        }
        Ok(Self(indices))
    }

    /// Parses `"all"`, a comma list of indices (`"1,3"`), or an inclusive
    /// resolution range (`"b16-b32"`, `"b8"`). `resolution(i)` gives the
    /// spatial size of block `i`.
    pub fn parse(text: &str, num_blocks: usize, resolution: impl Fn(usize) -> usize) -> Result<Self> {
        let t = text.trim();
        let set = if t.eq_ignore_ascii_case("all") {
            Self::all(num_blocks)
        } else if t.starts_with('b') {
            let (lo, hi) = t.split_once('-').unwrap_or((t, t));
            let parse_res = |s: &str| -> Result<usize> {
                s.trim()
                    .trim_start_matches('b')
                    .parse()
                    .map_err(|_| invalid("block set", format!("bad resolution `{s}`")))
            };
            let (lo, hi) = (parse_res(lo)?, parse_res(hi)?);
            let picked: Vec<usize> = (1..=num_blocks)
                .filter(|&i| (lo..=hi).contains(&resolution(i)))
                .collect();
            if picked.is_empty() {
                return Err(invalid("block set", format!("no block renders within `{t}`")));
            }
            Self(picked)
        } else {
            let idx = t
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| invalid("block set", format!("bad index `{s}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Self::new(idx)?
        };
        set.check(num_blocks)?;
        Ok(set)
    }

    pub fn check(&self, num_blocks: usize) -> Result<()> {
        match self.0.last() {
            Some(&m) if m <= num_blocks => Ok(()),
            _ => Err(invalid(
                "block set",
                format!("{self} exceeds the network's {num_blocks} blocks"),
            )),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0.binary_search(&block).is_ok()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("block sets are nonempty")
    }
}

impl TryFrom<Vec<usize>> for BlockSet {
    type Error = crate::error::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BlockSet> for Vec<usize> {
    fn from(b: BlockSet) -> Self {
        b.0
    }
}

impl fmt::Display for BlockSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub block_set: BlockSet,
    pub per_block: Vec<Tensor>,
    pub pooled: Vec<Tensor>,
    /// `N x sum(C_i)`, pooled vectors in block order.
    pub concat: Tensor,
}

impl FeaturePyramid {
    pub fn from_blocks(block_set: BlockSet, per_block: Vec<Tensor>) -> Self {
        assert_eq!(block_set.len(), per_block.len());
        let pooled: Vec<Tensor> = per_block.iter().map(pool).collect();
        let concat = concat_features(&pooled);
        Self {
            block_set,
            per_block,
            pooled,
            concat,
        }
    }

    pub fn batch(&self) -> usize {
        self.concat.batch()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.pooled.iter().map(|p| p.sample_len()).collect()
    }
}

/// Row-wise concatenation of `N x C_i` matrices.
pub fn concat_features(parts: &[Tensor]) -> Tensor {
    let n = parts.first().map_or(0, |p| p.batch());
    let width: usize = parts.iter().map(|p| p.sample_len()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Tensor::from_vec(&[n, width], data)
}

/// Pooled outputs of the selected generator blocks for mapped latents `w`.
/// Only blocks up to the highest selected one are evaluated.
pub fn generator_features(g: &Generator, w: &Tensor, block_set: &BlockSet) -> Result<FeaturePyramid> {
    block_set.check(g.num_blocks())?;
    let mut per_block = Vec::with_capacity(block_set.len());
    let mut h = w.clone();
    for i in 1..=block_set.max() {
        h = g.block_forward(i - 1, &h);
        if block_set.contains(i) {
            per_block.push(h.clone());
        }
    }
    Ok(FeaturePyramid::from_blocks(block_set.clone(), per_block))
}

/// Pooled outputs of the selected discriminator blocks for images `x`.
pub fn discriminator_features(d: &Discriminator, x: &Tensor, block_set: &BlockSet) -> Result<FeaturePyramid> {
    block_set.check(d.num_blocks())?;
    let (blocks, _) = d.features_and_logits(x)?;
    let per_block = blocks
        .into_iter()
        .enumerate()
        .filter(|(i, _)| block_set.contains(i + 1))
        .map(|(_, t)| t)
        .collect();
    Ok(FeaturePyramid::from_blocks(block_set.clone(), per_block))
}

/// The mapped latent used directly as a representation.
pub fn latent_representation(w: &Tensor) -> Tensor {
    w.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{build_discriminator, build_generator, DiscriminatorSpec, GeneratorSpec};
    use crate::nn::Module;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_examples() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1., 3., 5., 7.]);
        assert_eq!(pool(&x).data(), &[4.0]);
        let c = Tensor::full(&[2, 3, 4, 4], 0.7);
        assert!(pool(&c).data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let one = Tensor::from_vec(&[2, 2, 1, 1], vec![1., 2., 3., 4.]);
        assert_eq!(pool(&one).data(), one.data());
    }

    #[test]
    fn block_set_parsing() {
        let res = |i: usize| 4 << i;
        assert_eq!(BlockSet::parse("all", 3, res).unwrap().indices(), &[1, 2, 3]);
        assert_eq!(BlockSet::parse("3,1", 3, res).unwrap().indices(), &[1, 3]);
        assert_eq!(BlockSet::parse("b16-b32", 3, res).unwrap().indices(), &[2, 3]);
        assert_eq!(BlockSet::parse("b4-b8", 3, res).unwrap().indices(), &[1]);
        assert!(BlockSet::parse("", 3, res).is_err());
        assert!(BlockSet::parse("4", 3, res).is_err());
        assert!(BlockSet::parse("b64", 3, res).is_err());
        assert!(BlockSet::new(vec![]).is_err());
    }

    fn generator() -> Generator {
        let spec = GeneratorSpec {
            base_channels: 16,
            ..Default::default()
        };
        build_generator(&spec, 0).unwrap()
    }

    #[test]
    fn generator_pyramid_contract() {
        let g = generator();
        let before = g.checksum();
        let z = Tensor::randn(&[3, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let w = g.map_latent(&z);
        let all = generator_features(&g, &w, &BlockSet::all(3)).unwrap();
        assert_eq!(all.concat.shape(), &[3, 112]);
        assert_eq!(all.channels(), vec![64, 32, 16]);
        for (p, b) in all.pooled.iter().zip(&all.per_block) {
            assert_eq!(&pool(b), p);
        }
        let low = generator_features(&g, &w, &BlockSet::new(vec![1, 2]).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(low.concat.sample(i), &all.concat.sample(i)[..96]);
        }
        assert_eq!(g.checksum(), before);
    }

    #[test]
    fn discriminator_pyramid_contract() {
        let d = build_discriminator(&DiscriminatorSpec::default(), 0).unwrap();
        let x = Tensor::randn(&[2, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let p = discriminator_features(&d, &x, &BlockSet::all(3)).unwrap();
        assert_eq!(p.concat.shape(), &[2, 32 + 64 + 128]);
        assert_eq!(p, discriminator_features(&d, &x, &BlockSet::all(3)).unwrap());
        assert!(discriminator_features(&d, &x, &BlockSet::new(vec![4]).unwrap()).is_err());
    }

    #[test]
    fn latent_representation_is_identity() {
        let w = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]);
        assert_eq!(latent_representation(&w), w);
    }
}
