//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use cilda_core::augment::MaskPolicy;
use cilda_core::data::{Schema, SyntheticTaskSpec};
use cilda_core::nn::EncoderConfig;
use cilda_core::training::{Mode, SupervisedConfig, TrainConfig, WarmupConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Name used in reports.
    pub task: String,
    pub schema: Schema,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub ood: Option<PathBuf>,
    pub max_len: usize,
    /// Train the student on a seeded subsample of this many examples.
    pub student_subsample: Option<usize>,
    /// Generate the task in memory instead of reading TSV files.
    pub synthetic: Option<SyntheticTaskSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: "task".into(),
            schema: Schema::Single,
            train: None,
            dev: None,
            ood: None,
            max_len: 40,
            student_subsample: None,
            synthetic: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Reuse a trained teacher instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub training: SupervisedConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            checkpoint: None,
            training: SupervisedConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self { layers: 2, d_model: 32, heads: 2, d_ff: 64, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub warmup: WarmupConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { layers: 1, d_model: 32, heads: 2, d_ff: 64, dropout: 0.1, warmup: WarmupConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; copied into every sub-config.
    pub seed: u64,
    pub mode: Option<Mode>,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

/// A parsed config plus facts about what the file itself contained.
pub struct LoadedConfig {
    pub run: RunConfig,
    pub has_generator_section: bool,
}

#[derive(Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

fn invalid(field: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("invalid config field `{field}`: {reason}"))
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let raw: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let has_generator_section = raw.contains_key("generator");
        let mut run: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        // A config echo repeats seed and mode under [train]; anything else
        // there would be silently overridden.
        if let Some(train) = raw.get("train").and_then(|t| t.as_table()) {
            if train.contains_key("seed") && run.train.seed != run.seed {
                return Err(invalid("train.seed", "set the seed at the top level"));
            }
            if train.contains_key("mode") && run.train.mode != run.mode() {
                return Err(invalid("train.mode", "set the mode at the top level"));
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut run.data.train, &mut run.data.dev, &mut run.data.ood, &mut run.teacher.checkpoint, &mut run.out_dir] {
            rebase(base, p);
        }
        if let Some(seed) = overrides.seed {
            run.seed = seed;
        }
        if let Some(mode) = overrides.mode {
            run.mode = Some(mode);
        }
        if let Some(out) = &overrides.out {
            run.out_dir = Some(out.clone());
        }
        run.resolve_seeds();
        Ok(LoadedConfig { run, has_generator_section })
    }

    fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.train.mode = self.mode();
        self.teacher.training.seed = self.seed;
        self.generator.warmup.seed = self.seed;
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Cilda)
    }

    pub fn validate_for_training(&self) -> Result<(), CliError> {
        if self.out_dir.is_none() {
            return Err(invalid("out_dir", "missing (set it or pass --out)"));
        }
        if self.data.synthetic.is_none() {
            if self.data.train.is_none() {
                return Err(invalid("data.train", "missing path to the training TSV"));
            }
            if self.data.dev.is_none() {
                return Err(invalid("data.dev", "missing path to the dev TSV"));
            }
        }
        if self.data.max_len < 3 {
            return Err(invalid("data.max_len", "must be at least 3"));
        }
        self.train.validate()?;
        self.teacher.training.validate()?;
        self.generator.warmup.mask.validate()?;
        Ok(())
    }

    pub fn teacher_model(&self, vocab: usize, classes: usize) -> EncoderConfig {
        let t = &self.teacher;
        let mut c = EncoderConfig::classifier(t.layers, t.d_model, t.heads, t.d_ff, vocab, self.data.max_len, classes);
        c.dropout = t.dropout;
        c
    }

    pub fn student_model(&self, vocab: usize, classes: usize) -> EncoderConfig {
        let s = &self.student;
        let mut c = EncoderConfig::classifier(s.layers, s.d_model, s.heads, s.d_ff, vocab, self.data.max_len, classes);
        c.dropout = s.dropout;
        c
    }

    pub fn generator_model(&self, vocab: usize) -> EncoderConfig {
        let g = &self.generator;
        let mut c = EncoderConfig::masked_lm(g.layers, g.d_model, g.heads, g.d_ff, vocab, self.data.max_len);
        c.dropout = g.dropout;
        c
    }

    pub fn mask(&self) -> &MaskPolicy {
        &self.train.mask
    }

    /// The exact text written as the run's config echo.
    pub fn echo(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
