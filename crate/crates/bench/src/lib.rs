//! Shared inputs for the kernel benchmarks.

use cilda_core::data::{gen_synthetic, Batch, SyntheticTaskSpec};
use cilda_core::nn::{EncoderConfig, EncoderModel};
use cilda_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Unit-norm rows, as fed to the contrastive loss.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = random_matrix(rows, cols, seed);
    for r in 0..rows {
        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// The desk-scale student and one batch of the default synthetic task.
pub fn student_and_batch(batch_size: usize) -> (EncoderModel, Batch) {
    let task = gen_synthetic(&SyntheticTaskSpec { train_size: batch_size.max(2), ..Default::default() }).unwrap();
    let data = task.train.encode(&task.vocab, 40).unwrap();
    let cfg = EncoderConfig::classifier(2, 32, 2, 64, task.vocab.len(), 40, 2);
    let model = EncoderModel::init(cfg, 0).unwrap();
    let batch = data.batch(&(0..batch_size).collect::<Vec<_>>());
    (model, batch)
}
