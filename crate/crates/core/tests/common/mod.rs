#![allow(dead_code)]

use cilda_core::data::{gen_synthetic, Batch, SyntheticTask, SyntheticTaskSpec};
use cilda_core::losses::ProjectionHead;
use cilda_core::nn::{EncoderConfig, EncoderModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_MAX_LEN: usize = 16;

/// Small count-comparison task for fast tests.
pub fn tiny_task(seed: u64) -> SyntheticTask {
    gen_synthetic(&SyntheticTaskSpec {
        vocab_size: 12,
        seq_len: 6,
        max_count: 2,
        ood_min_count: 1,
        ood_max_count: 3,
        train_size: 64,
        dev_size: 32,
        test_size: 16,
        ood_size: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn tiny_batch(rows: usize, seed: u64) -> Batch {
    let task = tiny_task(seed);
    let enc = task.train.encode(&task.vocab, TINY_MAX_LEN).unwrap();
    enc.batch(&(0..rows).collect::<Vec<_>>())
}

/// Adds uniform noise in `[-scale, scale]` to every parameter so that
/// gradients are far from the near-zero regime of a fresh init.
pub fn jitter(model: &mut EncoderModel, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub fn jitter_heads(heads: &mut ProjectionHead, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in heads.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

pub struct Trio {
    pub teacher: EncoderModel,
    pub student: EncoderModel,
    pub generator: EncoderModel,
    pub heads: ProjectionHead,
}

/// Teacher (2 layers), student (1 layer) and generator (1 layer), all at
/// width `d`, with jittered weights and no dropout.
pub fn trio(d: usize, seed: u64) -> Trio {
    let v = 12;
    let mut tc = EncoderConfig::classifier(2, d, 2, 2 * d, v, TINY_MAX_LEN, 2);
    let mut sc = EncoderConfig::classifier(1, d, 2, 2 * d, v, TINY_MAX_LEN, 2);
    let mut gc = EncoderConfig::masked_lm(1, d, 2, 2 * d, v, TINY_MAX_LEN);
    tc.dropout = 0.0;
    sc.dropout = 0.0;
    gc.dropout = 0.0;
    let mut teacher = EncoderModel::init(tc, seed).unwrap();
    let mut student = EncoderModel::init(sc, seed + 1).unwrap();
    let mut generator = EncoderModel::init(gc, seed + 2).unwrap();
    jitter(&mut teacher, 0.3, seed + 10);
    jitter(&mut student, 0.3, seed + 11);
    jitter(&mut generator, 0.3, seed + 12);
    let mut heads = ProjectionHead::init(2 * d, d, 8, seed + 3).unwrap();
    jitter_heads(&mut heads, 0.3, seed + 13);
    Trio { teacher, student, generator, heads }
}
