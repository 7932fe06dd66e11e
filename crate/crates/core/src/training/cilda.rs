use std::collections::BTreeMap;
use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngSnapshot};
use super::config::{Schedule, TrainConfig};
use super::{ROLE_GENERATOR, ROLE_HEADS, ROLE_STUDENT};
use crate::augment::{generate_adversarial, mask_tokens, sample_adversarial_ids};
use crate::data::{Batch, EncodedDataset};
use crate::error::{Error, Result};
use crate::evalkit::{divergence_from_logits, evaluate, predict_logits};
use crate::losses::{generator_objective, student_objective_cached, ProjectionHead};
use crate::nn::{clip_global_norm, AdamState, EncoderConfig, EncoderModel, HeadKind, ParamSet};
use crate::numerics::{Graph, Tensor};
use crate::rng::{derive_seed, stream, Stream};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    #[serde(rename = "L_CE")]
    pub l_ce: f64,
    #[serde(rename = "L_KD_orig")]
    pub l_kd_orig: f64,
    #[serde(rename = "L_KD_aug")]
    pub l_kd_aug: Option<f64>,
    #[serde(rename = "L_CRD")]
    pub l_crd: Option<f64>,
    #[serde(rename = "L_G")]
    pub l_g: Option<f64>,
    pub dev_metric: f64,
    pub divergence: f64,
}

/// Loss components of one student update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentStep {
    pub total: f64,
    pub ce: f64,
    pub kd_orig: f64,
    pub kd_aug: Option<f64>,
    pub crd: Option<f64>,
}

/// Everything a CILDA run mutates, plus the frozen teacher.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// As given; [`TrainConfig::resolved`] is applied on use.
    pub config: TrainConfig,
    pub teacher: EncoderModel,
    pub teacher_sha256: String,
    pub student: EncoderModel,
    pub student_opt: AdamState,
    pub generator: Option<EncoderModel>,
    pub generator_opt: Option<AdamState>,
    pub heads: ProjectionHead,
    pub heads_opt: AdamState,
    pub best_student: EncoderModel,
    pub best_dev: Option<f64>,
    pub epochs_since_best: usize,
    /// Completed epochs.
    pub epoch: u64,
    pub rounds: u64,
    pub student_steps: u64,
    pub generator_steps: u64,
    /// Student updates left in the current block round.
    pub round_remaining: usize,
    pub gen_pass: u64,
    pub gen_cursor: usize,
    pub stopped: bool,
    pub masking: ChaCha8Rng,
    pub gumbel: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
}

pub fn init_student(config: EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::init(config, derive_seed(seed, ROLE_STUDENT))
}

pub fn init_generator(config: EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::init(config, derive_seed(seed, ROLE_GENERATOR))
}

fn cls_width(c: &EncoderConfig) -> usize {
    c.num_layers * c.d_model
}

fn negate(grads: &mut [Tensor]) {
    for g in grads {
        for v in g.data_mut() {
            *v = -*v;
        }
    }
}

fn finite(phase: &'static str, step: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { phase, step: step as usize })
    }
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * c);
    for &i in indices {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![indices.len(), c], data)
}

impl TrainState {
    pub fn new(
        config: TrainConfig,
        teacher: EncoderModel,
        student: EncoderModel,
        generator: Option<EncoderModel>,
    ) -> Result<Self> {
        config.validate()?;
        let (tc, sc) = (&teacher.config, &student.config);
        match (tc.num_classes(), sc.num_classes()) {
            (Some(a), Some(b)) if a == b => {}
            (Some(_), Some(_)) => return Err(Error::config("student.head", "teacher and student class counts differ")),
            _ => return Err(Error::HeadMismatch("teacher and student need classifier heads")),
        }
        if tc.vocab_size != sc.vocab_size {
            return Err(Error::config("student.vocab_size", "teacher and student vocabularies differ"));
        }
        let resolved = config.resolved();
        let generator = if resolved.mode.uses_generator() {
            let g = generator.ok_or_else(|| Error::config("generator", format!("mode {} needs a generator", config.mode)))?;
            if g.config.head != HeadKind::MaskedLm {
                return Err(Error::HeadMismatch("generator needs a masked-LM head"));
            }
            if g.config.vocab_size != sc.vocab_size {
                return Err(Error::config("generator.vocab_size", "generator vocabulary differs from the student's"));
            }
            Some(g)
        } else {
            None
        };
        let heads = ProjectionHead::init(
            cls_width(tc),
            cls_width(sc),
            config.projection_dim,
            derive_seed(config.seed, ROLE_HEADS),
        )?;
        let seed = config.seed;
        Ok(Self {
            teacher_sha256: teacher.params.sha256(),
            student_opt: AdamState::new(&student.params),
            generator_opt: generator.as_ref().map(|g| AdamState::new(&g.params)),
            heads_opt: AdamState::new(&heads.params),
            best_student: student.clone(),
            config,
            teacher,
            student,
            generator,
            heads,
            best_dev: None,
            epochs_since_best: 0,
            epoch: 0,
            rounds: 0,
            student_steps: 0,
            generator_steps: 0,
            round_remaining: 0,
            gen_pass: 0,
            gen_cursor: 0,
            stopped: false,
            masking: stream(seed, Stream::Masking),
            gumbel: stream(seed, Stream::Gumbel),
            dropout: stream(seed, Stream::Dropout),
            history: Vec::new(),
        })
    }

    /// `n_g` ascent updates of the generator on `L_G`. Teacher, student and
    /// projection heads are constants. Returns the objective before each
    /// update.
    pub fn maximization_round(&mut self, batches: &mut dyn Iterator<Item = Batch>, n_g: usize) -> Result<Vec<f64>> {
        let cfg = self.config.resolved();
        let tau = cfg.gumbel_tau(self.epoch);
        let mut values = Vec::with_capacity(n_g);
        if n_g == 0 {
            return Ok(values);
        }
        let (Some(generator), Some(opt)) = (self.generator.as_mut(), self.generator_opt.as_mut()) else {
            return Err(Error::config("generator", "maximization needs a generator"));
        };
        for batch in batches.take(n_g) {
            let masked = mask_tokens(&batch, &cfg.mask, &mut self.masking);
            let g = Graph::new();
            let mut grads = {
                let gen = generator.bind(&g, true);
                let aug = generate_adversarial(&gen, &masked, tau, &mut self.gumbel)?;
                let teacher = self.teacher.bind(&g, false);
                let student = self.student.bind(&g, false);
                let heads = self.heads.bind(&g, false);
                let loss = generator_objective(&teacher, &student, &heads, &aug.hard, aug.carrier, &cfg.weights)?;
                let value = finite("maximization", self.generator_steps, loss.total.item()?)?;
                log::debug!("generator step {}: L_G {value:.5}", self.generator_steps);
                values.push(value);
                g.backward(loss.total)?;
                gen.grads(&g)
            };
            negate(&mut grads);
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut generator.params, &grads, cfg.lr_g)?;
            self.generator_steps += 1;
        }
        Ok(values)
    }

    /// Up to `n_s` descent updates of the student and projection heads, each
    /// on a fresh `X'` from the frozen generator. `teacher_cache` holds the
    /// teacher's logits for the dataset the batches index into.
    pub fn minimization_round(
        &mut self,
        batches: &mut dyn Iterator<Item = Batch>,
        n_s: usize,
        teacher_cache: Option<&Tensor>,
    ) -> Result<Vec<StudentStep>> {
        let cfg = self.config.resolved();
        let w = &cfg.weights;
        let tau = cfg.gumbel_tau(self.epoch);
        let with_aug = w.uses_augmentation() && self.generator.is_some();
        let train_heads = with_aug && w.lambda3 > 0.0;
        let mut steps = Vec::with_capacity(n_s);
        for batch in batches.take(n_s) {
            let aug = if with_aug {
                let masked = mask_tokens(&batch, &cfg.mask, &mut self.masking);
                let gen = self.generator.as_ref().expect("checked above");
                Some(sample_adversarial_ids(gen, &masked, tau, &mut self.gumbel)?)
            } else {
                None
            };
            let cached = teacher_cache.map(|t| gather_rows(t, &batch.indices)).transpose()?;
            let g = Graph::new();
            let (step, mut grads, n_student) = {
                let teacher = self.teacher.bind(&g, false);
                let student = self.student.bind(&g, true);
                let heads = self.heads.bind(&g, train_heads);
                let loss = student_objective_cached(
                    &teacher,
                    &student,
                    &heads,
                    &batch,
                    cached.as_ref(),
                    aug.as_ref(),
                    w,
                    Some(&mut self.dropout),
                )?;
                let total = finite("minimization", self.student_steps, loss.total.item()?)?;
                let step = StudentStep {
                    total,
                    ce: loss.ce.item()?,
                    kd_orig: loss.kd_orig.item()?,
                    kd_aug: loss.kd_aug.map(|v| v.item()).transpose()?,
                    crd: loss.crd.map(|v| v.item()).transpose()?,
                };
                log::debug!("student step {}: loss {total:.5}", self.student_steps);
                g.backward(loss.total)?;
                let mut grads = student.grads(&g);
                let n = grads.len();
                if train_heads {
                    grads.extend(heads.grads(&g));
                }
                (step, grads, n)
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            let head_grads = grads.split_off(n_student);
            self.student_opt.step(&mut self.student.params, &grads, cfg.lr_s)?;
            if train_heads {
                self.heads_opt.step(&mut self.heads.params, &head_grads, cfg.lr_s)?;
            }
            self.student_steps += 1;
            steps.push(step);
        }
        Ok(steps)
    }

    /// Writes a student-only checkpoint with the best dev parameters.
    pub fn student_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("student", serde_json::to_value(&self.config)?);
        ck.push_model("student", &self.best_student);
        ck.manifest.history = serde_json::to_value(&self.history)?;
        if let Some(best) = self.best_dev {
            ck.manifest.counters.insert("best_dev".into(), best.into());
        }
        Ok(ck)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("train_state", serde_json::to_value(&self.config)?);
        let m = &mut ck.manifest;
        m.history = serde_json::to_value(&self.history)?;
        for (name, rng) in [("masking", &self.masking), ("gumbel", &self.gumbel), ("dropout", &self.dropout)] {
            m.rng.insert(name.into(), RngSnapshot::capture(rng));
        }
        let counters: [(&str, serde_json::Value); 15] = [
            ("epoch", self.epoch.into()),
            ("rounds", self.rounds.into()),
            ("student_steps", self.student_steps.into()),
            ("generator_steps", self.generator_steps.into()),
            ("round_remaining", self.round_remaining.into()),
            ("gen_pass", self.gen_pass.into()),
            ("gen_cursor", self.gen_cursor.into()),
            ("epochs_since_best", self.epochs_since_best.into()),
            ("stopped", self.stopped.into()),
            ("best_dev", self.best_dev.into()),
            ("teacher_sha256", self.teacher_sha256.clone().into()),
            ("student_opt", serde_json::to_value(&self.student_opt)?),
            ("heads_opt", serde_json::to_value(&self.heads_opt)?),
            ("generator_opt", serde_json::to_value(&self.generator_opt)?),
            (
                "heads",
                serde_json::json!({
                    "teacher_in": self.heads.teacher_in,
                    "student_in": self.heads.student_in,
                    "u": self.heads.u,
                }),
            ),
        ];
        m.counters = counters.into_iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>();
        ck.push_model("teacher", &self.teacher);
        ck.push_model("student", &self.student);
        ck.push_model("best_student", &self.best_student);
        push_moments(&mut ck, "student_opt", &self.student.params, &self.student_opt);
        if let (Some(g), Some(opt)) = (&self.generator, &self.generator_opt) {
            ck.push_model("generator", g);
            push_moments(&mut ck, "generator_opt", &g.params, opt);
        }
        ck.push_params("heads", &self.heads.params);
        push_moments(&mut ck, "heads_opt", &self.heads.params, &self.heads_opt);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.manifest;
        if m.kind != "train_state" {
            return Err(Error::Manifest(format!("expected a train_state checkpoint, found `{}`", m.kind)));
        }
        let counter = |name: &str| -> Result<&serde_json::Value> {
            m.counters.get(name).ok_or_else(|| Error::Manifest(format!("missing counter `{name}`")))
        };
        fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
            Ok(serde_json::from_value(v.clone())?)
        }
        let rng = |name: &str| -> Result<ChaCha8Rng> {
            m.rng.get(name).ok_or_else(|| Error::Manifest(format!("missing rng `{name}`")))?.restore()
        };
        let config: TrainConfig = parse(&m.config)?;
        let teacher = ck.model("teacher")?;
        let student = ck.model("student")?;
        let generator = if ck.has_model("generator") { Some(ck.model("generator")?) } else { None };
        let head_dims = counter("heads")?;
        let dim = |k: &str| -> Result<usize> { parse(&head_dims[k]) };
        let heads = ProjectionHead {
            teacher_in: dim("teacher_in")?,
            student_in: dim("student_in")?,
            u: dim("u")?,
            params: ck.params("heads", ["teacher.w", "teacher.b", "student.w", "student.b"])?,
        };
        let mut student_opt: AdamState = parse(counter("student_opt")?)?;
        load_moments(ck, "student_opt", &student.params, &mut student_opt)?;
        let mut heads_opt: AdamState = parse(counter("heads_opt")?)?;
        load_moments(ck, "heads_opt", &heads.params, &mut heads_opt)?;
        let mut generator_opt: Option<AdamState> = parse(counter("generator_opt")?)?;
        if let (Some(g), Some(opt)) = (&generator, generator_opt.as_mut()) {
            load_moments(ck, "generator_opt", &g.params, opt)?;
        }
        Ok(Self {
            teacher_sha256: parse(counter("teacher_sha256")?)?,
            best_student: ck.model("best_student")?,
            best_dev: parse(counter("best_dev")?)?,
            epochs_since_best: parse(counter("epochs_since_best")?)?,
            epoch: parse(counter("epoch")?)?,
            rounds: parse(counter("rounds")?)?,
            student_steps: parse(counter("student_steps")?)?,
            generator_steps: parse(counter("generator_steps")?)?,
            round_remaining: parse(counter("round_remaining")?)?,
            gen_pass: parse(counter("gen_pass")?)?,
            gen_cursor: parse(counter("gen_cursor")?)?,
            stopped: parse(counter("stopped")?)?,
            masking: rng("masking")?,
            gumbel: rng("gumbel")?,
            dropout: rng("dropout")?,
            history: parse(&m.history)?,
            config,
            teacher,
            student,
            student_opt,
            generator,
            generator_opt,
            heads,
            heads_opt,
        })
    }
}

fn push_moments(ck: &mut Checkpoint, prefix: &str, params: &ParamSet, opt: &AdamState) {
    for ((name, _), (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
        ck.push(format!("{prefix}.m.{name}"), m.clone());
        ck.push(format!("{prefix}.v.{name}"), v.clone());
    }
}

fn load_moments(ck: &Checkpoint, prefix: &str, params: &ParamSet, opt: &mut AdamState) -> Result<()> {
    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    opt.m = ck.params(&format!("{prefix}.m"), names.iter().copied())?.tensors().cloned().collect();
    opt.v = ck.params(&format!("{prefix}.v"), names.iter().copied())?.tensors().cloned().collect();
    Ok(())
}

/// The generator's own pass over the training set, resumable from
/// `(pass, cursor)`.
struct GeneratorBatches<'a> {
    data: &'a EncodedDataset,
    k: usize,
    seed: u64,
    pass: u64,
    cursor: usize,
    current: Vec<Batch>,
}

impl<'a> GeneratorBatches<'a> {
    fn new(data: &'a EncodedDataset, k: usize, seed: u64, pass: u64, cursor: usize) -> Self {
        let mut s = Self { data, k, seed, pass, cursor, current: Vec::new() };
        s.refill();
        s
    }

    fn refill(&mut self) {
        let mut rng = crate::rng::substream(self.seed, Stream::GeneratorShuffle, self.pass);
        self.current = self.data.shuffled_batches(self.k, &mut rng);
    }
}

impl Iterator for GeneratorBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.current.is_empty() {
            return None;
        }
        if self.cursor >= self.current.len() {
            self.pass += 1;
            self.cursor = 0;
            self.refill();
        }
        self.cursor += 1;
        Some(self.current[self.cursor - 1].clone())
    }
}

#[derive(Default)]
struct Accum {
    ce: f64,
    kd_orig: f64,
    kd_aug: f64,
    crd: f64,
    n_s: usize,
    n_aug: usize,
    l_g: f64,
    n_g: usize,
}

impl Accum {
    fn student(&mut self, steps: &[StudentStep]) {
        for s in steps {
            self.ce += s.ce;
            self.kd_orig += s.kd_orig;
            self.n_s += 1;
            if let (Some(k), Some(c)) = (s.kd_aug, s.crd) {
                self.kd_aug += k;
                self.crd += c;
                self.n_aug += 1;
            }
        }
    }

    fn generator(&mut self, values: &[f64]) {
        self.l_g += values.iter().sum::<f64>();
        self.n_g += values.len();
    }
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Runs epochs until `config.epochs` or early stopping, writing one JSON
/// line per epoch to `metrics`. Resumes from the state's counters.
pub fn train_cilda(
    state: &mut TrainState,
    train: &EncodedDataset,
    dev: &EncodedDataset,
    mut metrics: Option<&mut dyn Write>,
) -> Result<()> {
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data("training and dev sets must be nonempty".into()));
    }
    let cfg = state.config.resolved();
    cfg.validate()?;
    let teacher_train = predict_logits(&state.teacher, train)?;
    let teacher_dev = predict_logits(&state.teacher, dev)?;
    while state.epoch < cfg.epochs as u64 && !state.stopped {
        let epoch = state.epoch;
        let batches = train.batches(cfg.batch_size, cfg.seed, epoch);
        let mut acc = Accum::default();
        match cfg.schedule {
            Schedule::Block => {
                let mut it = batches.into_iter().peekable();
                while it.peek().is_some() {
                    if state.round_remaining == 0 {
                        if cfg.n_g > 0 {
                            let mut gen_batches =
                                GeneratorBatches::new(train, cfg.batch_size, cfg.seed, state.gen_pass, state.gen_cursor);
                            let values = state.maximization_round(&mut gen_batches, cfg.n_g)?;
                            acc.generator(&values);
                            state.gen_pass = gen_batches.pass;
                            state.gen_cursor = gen_batches.cursor;
                        }
                        state.round_remaining = cfg.n_s;
                        state.rounds += 1;
                    }
                    let n = state.round_remaining;
                    let steps = state.minimization_round(&mut it.by_ref(), n, Some(&teacher_train))?;
                    state.round_remaining -= steps.len();
                    acc.student(&steps);
                }
            }
            Schedule::PerBatch => {
                for batch in batches {
                    let values = state.maximization_round(&mut std::iter::repeat_n(batch.clone(), cfg.n_g), cfg.n_g)?;
                    acc.generator(&values);
                    let steps = state.minimization_round(&mut std::iter::repeat_n(batch, cfg.n_s), cfg.n_s, Some(&teacher_train))?;
                    acc.student(&steps);
                    state.rounds += 1;
                }
            }
        }

        if state.teacher.params.sha256() != state.teacher_sha256 {
            return Err(Error::Data("teacher parameters changed during training".into()));
        }
        let report = evaluate(&state.student, dev)?;
        let dev_metric = cfg.dev_metric.pick(&report);
        let divergence =
            divergence_from_logits(&teacher_dev, &predict_logits(&state.student, dev)?, cfg.weights.tau1)?.mean;
        let record = EpochMetrics {
            epoch,
            l_ce: acc.ce / acc.n_s.max(1) as f64,
            l_kd_orig: acc.kd_orig / acc.n_s.max(1) as f64,
            l_kd_aug: mean(acc.kd_aug, acc.n_aug),
            l_crd: mean(acc.crd, acc.n_aug),
            l_g: mean(acc.l_g, acc.n_g),
            dev_metric,
            divergence,
        };
        log::info!(
            "{} epoch {epoch}: CE {:.4} KD {:.4} dev {dev_metric:.4} divergence {divergence:.4}",
            cfg.mode,
            record.l_ce,
            record.l_kd_orig
        );
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        state.history.push(record);

        if state.best_dev.is_none_or(|b| dev_metric > b) {
            state.best_dev = Some(dev_metric);
            state.best_student = state.student.clone();
            state.epochs_since_best = 0;
        } else {
            state.epochs_since_best += 1;
        }
        state.epoch += 1;
        if state.epochs_since_best >= cfg.patience {
            state.stopped = true;
        }
    }
    Ok(())
}
