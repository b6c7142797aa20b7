use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distill::{Distiller, Method};
use crate::checkpoint::{load_into, read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::features::BlockSet;
use crate::losses::LossBreakdown;
use crate::networks::{SqueezeHead, SqueezeSpec, StudentNet, StudentSpec};
use crate::nn::Module;

pub const STUDENT_KIND: &str = "student";

/// One row of `metrics.csv`. For mixed batches the component columns
/// describe the synthetic (squeeze) branch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub rd: f64,
    pub var_s: f64,
    pub var_t: f64,
    pub cov_s: f64,
    pub cov_t: f64,
    pub squeeze: f64,
    pub span: f64,
    pub total: f64,
    /// Smallest per-dimension std of the student projection in the batch.
    pub student_std_min: f64,
}

impl StepLog {
    pub fn set_components(&mut self, b: &LossBreakdown) {
        self.rd = b.rd;
        self.var_s = b.var_s;
        self.var_t = b.var_t;
        self.cov_s = b.cov_s;
        self.cov_t = b.cov_t;
    }
}

/// Everything needed to rebuild a student (and its squeeze head) from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentArchitecture {
    pub method: Method,
    pub student: StudentSpec,
    pub squeeze: Option<SqueezeArchitecture>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SqueezeArchitecture {
    pub spec: SqueezeSpec,
    pub block_set: BlockSet,
    pub channels: Vec<usize>,
}

impl StudentArchitecture {
    pub fn of(method: Method, student: &StudentNet, squeeze: Option<&SqueezeHead>) -> Self {
        Self {
            method,
            student: student.spec().clone(),
            squeeze: squeeze.map(|s| SqueezeArchitecture {
                spec: s.spec().clone(),
                block_set: s.block_set().clone(),
                channels: s.channels().to_vec(),
            }),
        }
    }
}

pub fn save_student(
    path: &Path,
    method: Method,
    student: &StudentNet,
    squeeze: Option<&SqueezeHead>,
    mut meta: CheckpointMeta,
) -> Result<CheckpointMeta> {
    meta.kind = STUDENT_KIND.into();
    meta.spec = serde_json::to_value(StudentArchitecture::of(method, student, squeeze))?;
    let mut modules: Vec<&dyn Module> = vec![student];
    if let Some(s) = squeeze {
        modules.push(s);
    }
    write_checkpoint(path, &modules, meta)
}

pub struct LoadedStudent {
    pub meta: CheckpointMeta,
    pub architecture: StudentArchitecture,
    pub student: StudentNet,
    pub squeeze: Option<SqueezeHead>,
}

pub fn load_student(path: &Path) -> Result<LoadedStudent> {
    let (meta, flat) = read_checkpoint(path, STUDENT_KIND)?;
    let architecture: StudentArchitecture =
        serde_json::from_value(meta.spec.clone()).map_err(|e| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("architecture: {e}"),
        })?;
    // Weights are overwritten, so the init RNG is irrelevant.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut student = StudentNet::new(&architecture.student, &mut rng)?;
    let mut squeeze = match &architecture.squeeze {
        Some(a) => Some(SqueezeHead::new(&a.spec, &a.block_set, &a.channels, &mut rng)?),
        None => None,
    };
    {
        let mut modules: Vec<&mut dyn Module> = vec![&mut student];
        if let Some(s) = squeeze.as_mut() {
            modules.push(s);
        }
        load_into(path, &flat, &mut modules)?;
    }
    Ok(LoadedStudent {
        meta,
        architecture,
        student,
        squeeze,
    })
}

/// Output directory of one run: `config.json`, `metrics.csv` and
/// `checkpoints/<tag>.bin` with sidecars.
pub struct RunDir {
    root: PathBuf,
    metrics: csv::Writer<File>,
}

impl RunDir {
    /// Creates the directory and snapshots `config`.
    pub fn create(root: &Path, config: &impl Serialize) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join("config.json"), serde_json::to_string_pretty(config)?)?;
        let metrics = csv::Writer::from_path(root.join("metrics.csv"))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{tag}.bin"))
    }

    pub fn log_step(&mut self, log: &StepLog) -> Result<()> {
        self.metrics.serialize(log)?;
        self.metrics.flush()?;
        Ok(())
    }

    pub fn save_student(&mut self, tag: &str, d: &Distiller<'_>, steps: usize) -> Result<PathBuf> {
        let path = self.checkpoint_path(tag);
        let meta = CheckpointMeta {
            training_steps: steps,
            seed: d.config().distill.seed,
            ..Default::default()
        };
        save_student(&path, d.config().distill.method, &d.student, d.squeeze.as_ref(), meta)?;
        Ok(path)
    }
}

/// Reads a `metrics.csv` back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
