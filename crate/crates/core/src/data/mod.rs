//! Vocabulary, corpora, synthetic tasks and batching.

mod dataset;
mod synthetic;
mod tsv;
mod vocab;

pub use dataset::{decode, Batch, Dataset, EncodedDataset, Example, Split};
pub use synthetic::{count_markers, gen_synthetic, SyntheticTask, SyntheticTaskSpec};
pub use tsv::{load_tsv, parse_tsv, to_tsv, write_tsv, Schema};
pub use vocab::{build_vocab, Vocab, CLS, MASK, PAD, RESERVED_TOKENS, SEP, SPECIAL_IDS, UNK};
