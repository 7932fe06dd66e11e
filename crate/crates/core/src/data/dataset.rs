use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: Vec<String>,
    pub text_b: Option<Vec<String>>,
    pub label: Option<usize>,
}

impl Example {
    pub fn single(text: &str, label: Option<usize>) -> Self {
        Self { text_a: split(text), text_b: None, label }
    }

    pub fn pair(a: &str, b: &str, label: Option<usize>) -> Self {
        Self { text_a: split(a), text_b: Some(split(b)), label }
    }

    /// Encoded length before padding.
    pub fn encoded_len(&self) -> usize {
        2 + self.text_a.len() + self.text_b.as_ref().map_or(0, |b| b.len() + 1)
    }

    /// `[CLS] a [SEP] (b [SEP])?` padded with PAD to `max_len`.
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
        let n = self.encoded_len();
        if n > max_len {
            return Err(Error::Data(format!("example needs {n} positions, max_len is {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(self.text_a.iter().map(|t| vocab.id(t)));
        ids.push(SEP);
        if let Some(b) = &self.text_b {
            ids.extend(b.iter().map(|t| vocab.id(t)));
            ids.push(SEP);
        }
        ids.resize(max_len, PAD);
        Ok(ids)
    }
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Inverse of [`Example::encode`] for in-vocabulary tokens.
pub fn decode(ids: &[usize], vocab: &Vocab) -> (Vec<String>, Option<Vec<String>>) {
    let body: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD && i != CLS).collect();
    let mut segments = body.split(|&i| i == SEP).map(|seg| {
        seg.iter().map(|&i| vocab.token(i).unwrap_or("[UNK]").to_owned()).collect::<Vec<_>>()
    });
    let a = segments.next().unwrap_or_default();
    let b = segments.next().filter(|_| body.iter().filter(|&&i| i == SEP).count() >= 2);
    (a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Ood,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Ood => "ood",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, split: Split) -> Result<Self> {
        for ex in &examples {
            if let Some(label) = ex.label {
                if label >= num_classes {
                    return Err(Error::LabelOutOfRange { label, num_classes });
                }
            }
        }
        Ok(Self { examples, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_encoded_len(&self) -> usize {
        self.examples.iter().map(Example::encoded_len).max().unwrap_or(2)
    }

    /// First `n` examples of a seeded permutation.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut substream(seed, Stream::Subsample, 0));
        order.truncate(n);
        order.sort_unstable();
        Self {
            examples: order.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Result<EncodedDataset> {
        let rows = self
            .examples
            .iter()
            .map(|e| e.encode(vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedDataset {
            rows,
            labels: self.examples.iter().map(|e| e.label).collect(),
            num_classes: self.num_classes,
            max_len,
        })
    }
}

/// Token ids of every example, padded to a common `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDataset {
    pub rows: Vec<Vec<usize>>,
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    pub max_len: usize,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Batch of the given example indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let rows: Vec<&[usize]> = indices.iter().map(|&i| self.rows[i].as_slice()).collect();
        let labels: Option<Vec<usize>> = indices.iter().map(|&i| self.labels[i]).collect();
        let mut b = Batch::from_rows(&rows, labels);
        b.indices = indices.to_vec();
        b
    }

    /// One epoch of batches of size `k` in seeded Fisher–Yates order; the
    /// final short batch is kept.
    pub fn batches(&self, k: usize, shuffle_seed: u64, epoch: u64) -> Vec<Batch> {
        self.shuffled_batches(k, &mut substream(shuffle_seed, Stream::DataShuffle, epoch))
    }

    /// One pass in an order drawn from `rng`.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(k.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Batches of size `k` in dataset order.
    pub fn sequential_batches(&self, k: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(k.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// A `[rows, seq_len]` block of token ids.
///
/// Trailing columns that are PAD in every row are trimmed, which leaves all
/// model outputs unchanged because PAD keys are masked out of attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub seq_len: usize,
    pub labels: Option<Vec<usize>>,
    /// Source positions in the originating dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_rows(rows: &[&[usize]], labels: Option<Vec<usize>>) -> Self {
        let seq_len = rows
            .iter()
            .map(|r| r.iter().rposition(|&t| t != PAD).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            let take = seq_len.min(r.len());
            ids.extend_from_slice(&r[..take]);
            ids.extend(std::iter::repeat(PAD).take(seq_len - take));
        }
        Self { ids, rows: rows.len(), seq_len, labels, indices: (0..rows.len()).collect() }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    /// True where the token is not PAD.
    pub fn attention(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    /// Same batch with ids replaced; `ids` must have identical layout.
    pub fn with_ids(&self, ids: Vec<usize>) -> Self {
        debug_assert_eq!(ids.len(), self.ids.len());
        Self { ids, ..self.clone() }
    }

    /// Rows `range` as a new batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        let slices: Vec<&[usize]> = rows.iter().map(|&r| self.row(r)).collect();
        let labels = self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect());
        let mut b = Self::from_rows(&slices, labels);
        b.indices = rows.iter().map(|&r| self.indices[r]).collect();
        b
    }
}
