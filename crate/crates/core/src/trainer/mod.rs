//! Distillation training loops.

mod batch;
mod distill;
mod encoder;
mod run;
mod schedule;

pub use batch::{mix_seed, mixed_batch, sample_synthetic, split_sizes, MixedBatch, RealSampler};
pub use distill::{
    sqsp_step, train, vanilla_step, DistillConfig, Distiller, Method, TeacherSource, TrainConfig, TrainOutcome,
};
pub use encoder::{
    encoder_objective, load_encoder, save_encoder, train_posthoc_encoder, EncoderLoss, EncoderOutcome, Perceptual,
    Synthesizer, ENCODER_KIND,
};
pub use run::{
    load_student, read_metrics, save_student, LoadedStudent, RunDir, SqueezeArchitecture, StepLog, StudentArchitecture,
    STUDENT_KIND,
};
pub use schedule::{cosine_lr, scaled_lr};
