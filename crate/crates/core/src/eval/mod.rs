//! Representation measurements: linear probe, squared MMD, linear CKA and
//! embedding export.

mod metrics;
mod probe;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use metrics::{cka, mmd2, pairwise_cka_matrix};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};

use crate::data::ImageBatch;
use crate::error::{invalid, Error, Result};
use crate::features::{concat_features, latent_representation, pool, BlockSet};
use crate::gan::{Discriminator, Generator};
use crate::networks::{PostHocEncoder, StudentNet};
use crate::tensor::Tensor;

/// Images are pushed through models in chunks of this size.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Synthetic,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Real => "real",
            Domain::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Domain::Real),
            "synthetic" => Ok(Domain::Synthetic),
            _ => Err(invalid("domain", format!("`{s}` is not real or synthetic"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Student features before the projector.
    Backbone,
    /// Student projector output.
    Projection,
    /// Concatenated pooled discriminator block features.
    Discriminator,
    /// Concatenated pooled generator block features.
    Generator,
    /// Mapped latent, or the encoder's estimate of it.
    Latent,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Backbone => "backbone",
            Source::Projection => "projection",
            Source::Discriminator => "h_d",
            Source::Generator => "h_g",
            Source::Latent => "w",
        }
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Source::Backbone,
            Source::Projection,
            Source::Discriminator,
            Source::Generator,
            Source::Latent,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| {
            invalid(
                "source",
                format!("`{s}` is not one of backbone, projection, h_d, h_g, w"),
            )
        })
    }
}

/// Frozen-model features, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub source: Source,
}

impl EmbeddingSet {
    pub fn new(features: Array2<f64>, labels: Option<Vec<usize>>, domain: Domain, source: Source) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.nrows()
                )));
            }
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(invalid("embeddings", "features must be finite"));
        }
        Ok(Self {
            features,
            labels,
            domain,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn chunked(images: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Array2<f64>> {
    let n = images.batch();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        parts.push(f(&images.select_batch(&idx))?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_batch(&refs).to_rows_f64())
}

/// Student backbone or projection features of `images`.
pub fn student_embeddings(
    student: &StudentNet,
    images: &ImageBatch,
    source: Source,
    domain: Domain,
) -> Result<EmbeddingSet> {
    let feats = match source {
        Source::Backbone => chunked(&images.pixels, |x| student.backbone_features(x))?,
        Source::Projection => chunked(&images.pixels, |x| Ok(student.infer(x)?.1))?,
        other => {
            return Err(invalid(
                "source",
                format!("a student has no `{}` features", other.name()),
            ))
        }
    };
    EmbeddingSet::new(feats, images.labels.clone(), domain, source)
}

/// Concatenated pooled discriminator features of `images`.
pub fn discriminator_embeddings(d: &Discriminator, images: &ImageBatch, domain: Domain) -> Result<EmbeddingSet> {
    let feats = chunked(&images.pixels, |x| {
        let (blocks, _) = d.features_and_logits(x)?;
        let pooled: Vec<Tensor> = blocks.iter().map(pool).collect();
        Ok(concat_features(&pooled))
    })?;
    EmbeddingSet::new(feats, images.labels.clone(), domain, Source::Discriminator)
}

/// Post-hoc encoder latent estimates of `images`.
pub fn encoder_embeddings(e: &PostHocEncoder, images: &ImageBatch, domain: Domain) -> Result<EmbeddingSet> {
    let feats = chunked(&images.pixels, |x| e.infer(x))?;
    EmbeddingSet::new(feats, images.labels.clone(), domain, Source::Latent)
}

/// Generator-side features of latents `w`: pooled block features or `w` itself.
pub fn generator_embeddings(g: &Generator, w: &Tensor, source: Source) -> Result<EmbeddingSet> {
    let feats = match source {
        Source::Generator => chunked(w, |wc| {
            Ok(crate::features::generator_features(g, wc, &BlockSet::all(g.num_blocks()))?.concat)
        })?,
        Source::Latent => latent_representation(w).to_rows_f64(),
        other => {
            return Err(invalid(
                "source",
                format!("latents have no `{}` features", other.name()),
            ))
        }
    };
    EmbeddingSet::new(feats, None, Domain::Synthetic, source)
}

/// Writes `dim_0..dim_{F-1},label,domain` rows; a missing label is left empty.
pub fn export_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..set.dim()).map(|i| format!("dim_{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header)?;
    let domain = set.domain.to_string();
    for (i, row) in set.features.outer_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(set.labels.as_ref().map_or(String::new(), |l| l[i].to_string()));
        rec.push(domain.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_embeddings`].
pub fn read_embeddings(path: &Path, source: Source) -> Result<EmbeddingSet> {
    let mut r = csv::Reader::from_path(path)?;
    let ncols = r.headers()?.len();
    if ncols < 2 {
        return Err(invalid("embeddings file", "missing label/domain columns"));
    }
    let dim = ncols - 2;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut domain = None;
    for rec in r.records() {
        let rec = rec?;
        for v in rec.iter().take(dim) {
            data.push(
                v.parse::<f64>()
                    .map_err(|e| invalid("embeddings file", e.to_string()))?,
            );
        }
        let label = &rec[dim];
        labels.push(if label.is_empty() {
            None
        } else {
            Some(
                label
                    .parse::<usize>()
                    .map_err(|e| invalid("embeddings file", e.to_string()))?,
            )
        });
        let d: Domain = rec[dim + 1].parse()?;
        if domain.is_some_and(|x| x != d) {
            return Err(invalid("embeddings file", "mixed domains"));
        }
        domain = Some(d);
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, dim), data).map_err(|e| Error::Shape(e.to_string()))?;
    let labels = labels.into_iter().collect::<Option<Vec<_>>>();
    EmbeddingSet::new(features, labels, domain.unwrap_or(Domain::Real), source)
}

/// One measurement, serialized as JSON next to the run it describes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: BTreeMap<String, f64>,
    /// SHA-256 of the configuration that produced the measured model.
    pub config_hash: String,
    pub sample_sizes: BTreeMap<String, usize>,
    /// Protocol choices the measurement depends on (feature source, kernel, ...).
    pub protocol: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(metric: &str, config_hash: &str) -> Self {
        Self {
            metric: metric.into(),
            config_hash: config_hash.into(),
            ..Default::default()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
