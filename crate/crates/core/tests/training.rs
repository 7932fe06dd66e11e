mod common;

use cilda_core::data::EncodedDataset;
use cilda_core::nn::EncoderConfig;
use cilda_core::training::{
    evaluate_mlm, init_generator, init_student, train_cilda, train_teacher, warmup_generator_mlm, Checkpoint, Mode,
    Schedule, SupervisedConfig, TrainConfig, TrainState, WarmupConfig,
};
use cilda_core::Error;

use common::{tiny_task, trio, TINY_MAX_LEN};

fn tiny_data() -> (EncodedDataset, EncodedDataset) {
    let task = tiny_task(3);
    (
        task.train.encode(&task.vocab, TINY_MAX_LEN).unwrap(),
        task.dev.encode(&task.vocab, TINY_MAX_LEN).unwrap(),
    )
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig { mode, seed: 5, epochs: 2, n_g: 2, n_s: 3, batch_size: 16, projection_dim: 8, ..Default::default() }
}

fn state(config: TrainConfig) -> TrainState {
    let t = trio(16, 2);
    let student = init_student(t.student.config.clone(), config.seed).unwrap();
    TrainState::new(config, t.teacher, student, Some(t.generator)).unwrap()
}

fn bytes(m: &cilda_core::nn::EncoderModel) -> Vec<u8> {
    m.params.to_le_bytes()
}

#[test]
fn zero_patience_runs_one_epoch() {
    let (train, dev) = tiny_data();
    let cfg = EncoderConfig::classifier(1, 16, 2, 32, 12, TINY_MAX_LEN, 2);
    let run = train_teacher(&SupervisedConfig { epochs: 5, patience: 0, ..Default::default() }, cfg, &train, &dev).unwrap();
    assert_eq!(run.history.len(), 1);
}

#[test]
fn teacher_keeps_best_epoch() {
    let (train, dev) = tiny_data();
    let cfg = EncoderConfig::classifier(1, 16, 2, 32, 12, TINY_MAX_LEN, 2);
    let run = train_teacher(&SupervisedConfig { epochs: 3, patience: 3, ..Default::default() }, cfg, &train, &dev).unwrap();
    let best = run.history.iter().map(|e| e.dev_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(run.best_dev, best);
    assert_eq!(cilda_core::evalkit::evaluate(&run.model, &dev).unwrap().accuracy, best);
}

#[test]
fn warmup_with_zero_steps_changes_nothing() {
    let (train, _) = tiny_data();
    let mut g = trio(16, 1).generator;
    let before = bytes(&g);
    let losses = warmup_generator_mlm(&mut g, &WarmupConfig { steps: 0, ..Default::default() }, &train).unwrap();
    assert!(losses.is_empty());
    assert_eq!(bytes(&g), before);
}

#[test]
fn warmup_lowers_masked_lm_loss() {
    let (train, dev) = tiny_data();
    let cfg = EncoderConfig::masked_lm(1, 16, 2, 32, 12, TINY_MAX_LEN);
    let mut g = init_generator(cfg, 0).unwrap();
    let policy = cilda_core::augment::MaskPolicy::default();
    let before = evaluate_mlm(&g, &dev, &policy, 9).unwrap();
    let cfg = WarmupConfig { steps: 80, lr: 3e-3, batch_size: 16, ..Default::default() };
    warmup_generator_mlm(&mut g, &cfg, &train).unwrap();
    let after = evaluate_mlm(&g, &dev, &policy, 9).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn maximization_updates_only_the_generator() {
    let (train, _) = tiny_data();
    let mut s = state(tiny_config(Mode::Cilda));
    let (teacher, student, heads) = (bytes(&s.teacher), bytes(&s.student), s.heads.params.to_le_bytes());
    let generator = bytes(s.generator.as_ref().unwrap());
    let batches = train.batches(16, 0, 0);
    s.maximization_round(&mut batches.into_iter(), 3).unwrap();
    assert_eq!(bytes(&s.teacher), teacher);
    assert_eq!(bytes(&s.student), student);
    assert_eq!(s.heads.params.to_le_bytes(), heads);
    assert_ne!(bytes(s.generator.as_ref().unwrap()), generator);
    assert_eq!(s.generator_steps, 3);
}

#[test]
fn minimization_leaves_generator_and_teacher() {
    let (train, _) = tiny_data();
    let mut s = state(tiny_config(Mode::Cilda));
    let (teacher, student, heads) = (bytes(&s.teacher), bytes(&s.student), s.heads.params.to_le_bytes());
    let generator = bytes(s.generator.as_ref().unwrap());
    let batches = train.batches(16, 0, 0);
    let steps = s.minimization_round(&mut batches.into_iter(), 2, None).unwrap();
    assert_eq!(steps.len(), 2);
    assert!(steps.iter().all(|st| st.kd_aug.is_some() && st.crd.is_some()));
    assert_eq!(bytes(&s.teacher), teacher);
    assert_eq!(bytes(s.generator.as_ref().unwrap()), generator);
    assert_ne!(bytes(&s.student), student);
    assert_ne!(s.heads.params.to_le_bytes(), heads);
}

#[test]
fn mate_trains_student_without_heads() {
    let (train, _) = tiny_data();
    let mut s = state(tiny_config(Mode::Mate));
    let heads = s.heads.params.to_le_bytes();
    s.minimization_round(&mut train.batches(16, 0, 0).into_iter(), 2, None).unwrap();
    assert_eq!(s.heads.params.to_le_bytes(), heads);
}

#[test]
fn zero_generator_steps_leave_generator() {
    let (train, dev) = tiny_data();
    let mut s = state(TrainConfig { n_g: 0, epochs: 1, ..tiny_config(Mode::Cilda) });
    let generator = bytes(s.generator.as_ref().unwrap());
    train_cilda(&mut s, &train, &dev, None).unwrap();
    assert_eq!(bytes(s.generator.as_ref().unwrap()), generator);
    assert_eq!(s.generator_steps, 0);
}

#[test]
fn generator_modes_require_a_generator() {
    let t = trio(16, 0);
    let err = TrainState::new(tiny_config(Mode::Cilda), t.teacher.clone(), t.student.clone(), None).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig { .. }));
    let s = TrainState::new(tiny_config(Mode::VanillaKd), t.teacher, t.student, Some(t.generator)).unwrap();
    assert!(s.generator.is_none());
}

#[test]
fn runs_are_reproducible() {
    let (train, dev) = tiny_data();
    let run = || {
        let mut s = state(tiny_config(Mode::Cilda));
        let mut metrics = Vec::new();
        train_cilda(&mut s, &train, &dev, Some(&mut metrics)).unwrap();
        (metrics, s.to_checkpoint().unwrap().to_bytes().unwrap())
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    assert_eq!(String::from_utf8(m1).unwrap().lines().count(), 2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (train, dev) = tiny_data();
    for schedule in [Schedule::Block, Schedule::PerBatch] {
        let full_cfg = TrainConfig { schedule, epochs: 3, n_s: 5, ..tiny_config(Mode::Cilda) };
        let mut full = state(full_cfg.clone());
        train_cilda(&mut full, &train, &dev, None).unwrap();

        let mut first = state(TrainConfig { epochs: 1, ..full_cfg.clone() });
        train_cilda(&mut first, &train, &dev, None).unwrap();
        let bytes_on_disk = first.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut resumed = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes_on_disk).unwrap()).unwrap();
        resumed.config.epochs = 3;
        train_cilda(&mut resumed, &train, &dev, None).unwrap();

        assert_eq!(bytes(&resumed.student), bytes(&full.student), "{schedule:?}");
        assert_eq!(bytes(resumed.generator.as_ref().unwrap()), bytes(full.generator.as_ref().unwrap()));
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.to_checkpoint().unwrap().to_bytes().unwrap(), full.to_checkpoint().unwrap().to_bytes().unwrap());
    }
}

#[test]
fn changed_teacher_is_detected() {
    let (train, dev) = tiny_data();
    let mut s = state(TrainConfig { epochs: 1, ..tiny_config(Mode::VanillaKd) });
    s.teacher.params.tensors_mut().next().unwrap().data_mut()[0] += 1.0;
    assert!(train_cilda(&mut s, &train, &dev, None).is_err());
}

#[test]
fn checkpoint_rejects_wrong_kind() {
    let s = state(tiny_config(Mode::Cilda));
    let ck = s.student_checkpoint().unwrap();
    assert_eq!(ck.manifest.kind, "student");
    assert!(TrainState::from_checkpoint(&ck).is_err());
}
