//! Teacher fine-tuning, generator warm-up and the alternating
//! maximization/minimization distillation loop.

mod checkpoint;
mod cilda;
mod config;
mod supervised;

pub use checkpoint::{Checkpoint, Entry, Manifest, RngSnapshot, FORMAT_VERSION, MAGIC};
pub use cilda::{init_generator, init_student, train_cilda, EpochMetrics, StudentStep, TrainState};
pub use config::{DevMetric, Mode, Schedule, SupervisedConfig, TrainConfig, WarmupConfig};
pub use supervised::{evaluate_mlm, mlm_loss, train_teacher, warmup_generator_mlm, SupervisedEpoch, SupervisedRun};

/// Seed derivation indices, one per independently initialized component.
pub(crate) const ROLE_TEACHER: u64 = 1;
pub(crate) const ROLE_STUDENT: u64 = 2;
pub(crate) const ROLE_GENERATOR: u64 = 3;
pub(crate) const ROLE_HEADS: u64 = 4;
pub(crate) const ROLE_WARMUP: u64 = 5;

impl SupervisedRun {
    pub fn checkpoint(&self, config: serde_json::Value) -> crate::Result<Checkpoint> {
        let mut ck = Checkpoint::new("teacher", config);
        ck.push_model("teacher", &self.model);
        ck.manifest.history = serde_json::to_value(&self.history)?;
        ck.manifest.counters.insert("best_dev".into(), self.best_dev.into());
        Ok(ck)
    }
}

impl Checkpoint {
    /// The model a checkpoint of this kind is about: the teacher, the best
    /// student, or the student of a training state.
    pub fn primary_model(&self) -> crate::Result<crate::nn::EncoderModel> {
        match self.manifest.kind.as_str() {
            "teacher" => self.model("teacher"),
            "student" => self.model("student"),
            "train_state" => self.model("best_student"),
            other => Err(crate::Error::Manifest(format!("no primary model in a `{other}` checkpoint"))),
        }
    }
}
