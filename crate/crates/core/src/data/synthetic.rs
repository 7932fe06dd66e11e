//! Deterministic count-comparison task.
//!
//! Each sequence is filler tokens with two marker tokens injected at random
//! positions; the label is 1 iff the first marker occurs more often than the
//! second. The out-of-domain split doubles the sequence length and shifts the
//! marker-count range upward.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Example, Split};
use super::vocab::{Vocab, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Total vocabulary size including reserved ids.
    pub vocab_size: usize,
    pub seq_len: usize,
    pub marker_a: String,
    pub marker_b: String,
    /// In-domain marker counts are drawn from `0..=max_count`.
    pub max_count: usize,
    /// Out-of-domain marker counts are drawn from `ood_min_count..=ood_max_count`
    /// in sequences of length `2 * seq_len`.
    pub ood_min_count: usize,
    pub ood_max_count: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            marker_a: "A".into(),
            marker_b: "B".into(),
            max_count: 5,
            ood_min_count: 2,
            ood_max_count: 10,
            train_size: 4000,
            dev_size: 1000,
            test_size: 1000,
            ood_size: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        let min_vocab = RESERVED_TOKENS.len() + 3;
        if self.vocab_size < min_vocab {
            return Err(Error::config(
                "vocab_size",
                format!("needs at least {min_vocab} (reserved ids, two markers, one filler)"),
            ));
        }
        if self.seq_len < 4 {
            return Err(Error::config("seq_len", "must be at least 4"));
        }
        if self.marker_a == self.marker_b || self.marker_a.is_empty() || self.marker_b.is_empty() {
            return Err(Error::config("marker_a", "markers must be distinct non-empty tokens"));
        }
        if self.max_count < 1 || 2 * self.max_count > self.seq_len {
            return Err(Error::config("max_count", "need 1 <= 2*max_count <= seq_len"));
        }
        if self.ood_min_count > self.ood_max_count
            || self.ood_max_count < 1
            || 2 * self.ood_max_count > 2 * self.seq_len
        {
            return Err(Error::config("ood_max_count", "need min <= max and 2*max <= 2*seq_len"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let fillers = self.vocab_size - RESERVED_TOKENS.len() - 2;
        let names = [self.marker_a.clone(), self.marker_b.clone()]
            .into_iter()
            .chain((0..fillers).map(|i| format!("w{i}")));
        Vocab::from_tokens(names)
    }
}

/// Counts marker occurrences; the recount oracle for labels.
pub fn count_markers(tokens: &[String], a: &str, b: &str) -> (usize, usize) {
    tokens.iter().fold((0, 0), |(ca, cb), t| {
        (ca + usize::from(t == a), cb + usize::from(t == b))
    })
}

struct SplitShape {
    len: usize,
    min_count: usize,
    max_count: usize,
}

fn sample_split(
    spec: &SyntheticTaskSpec,
    shape: &SplitShape,
    size: usize,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let fillers: Vec<String> =
        (0..spec.vocab_size - RESERVED_TOKENS.len() - 2).map(|i| format!("w{i}")).collect();
    if shape.min_count == shape.max_count {
        return Err(Error::config("max_count", "count range admits only ties"));
    }
    let mut examples = Vec::with_capacity(size);
    for i in 0..size {
        let want = i % 2;
        let (ca, cb) = loop {
            let ca = rng.random_range(shape.min_count..=shape.max_count);
            let cb = rng.random_range(shape.min_count..=shape.max_count);
            if ca != cb {
                break (ca, cb);
            }
        };
        let (ca, cb) = if usize::from(ca > cb) == want { (ca, cb) } else { (cb, ca) };
        let mut tokens: Vec<String> =
            (0..shape.len).map(|_| fillers[rng.random_range(0..fillers.len())].clone()).collect();
        let positions = index::sample(rng, shape.len, ca + cb);
        for (j, pos) in positions.iter().enumerate() {
            tokens[pos] = if j < ca { spec.marker_a.clone() } else { spec.marker_b.clone() };
        }
        examples.push(Example { text_a: tokens, text_b: None, label: Some(want) });
    }
    Dataset::new(examples, 2, split)
}

/// Generates every split of the task. Identical specs give identical output.
pub fn gen_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let in_domain = SplitShape { len: spec.seq_len, min_count: 0, max_count: spec.max_count };
    let shifted = SplitShape {
        len: 2 * spec.seq_len,
        min_count: spec.ood_min_count,
        max_count: spec.ood_max_count,
    };
    let split = |i: u64, shape: &SplitShape, size: usize, tag: Split| {
        sample_split(spec, shape, size, tag, &mut substream(spec.seed, Stream::Synthetic, i))
    };
    Ok(SyntheticTask {
        vocab: spec.vocab(),
        train: split(0, &in_domain, spec.train_size, Split::Train)?,
        dev: split(1, &in_domain, spec.dev_size, Split::Dev)?,
        test: split(2, &in_domain, spec.test_size, Split::Test)?,
        ood: split(3, &shifted, spec.ood_size, Split::Ood)?,
    })
}
