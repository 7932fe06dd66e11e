//! Tab-separated corpus files.
//!
//! Header `label<TAB>text` for single-sentence tasks and
//! `label<TAB>text_a<TAB>text_b` for sentence pairs. CRLF and LF line endings
//! are both accepted.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Example, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Single,
    Pair,
}

impl Schema {
    fn header(self) -> &'static [&'static str] {
        match self {
            Schema::Single => &["label", "text"],
            Schema::Pair => &["label", "text_a", "text_b"],
        }
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Schema::Single),
            "pair" => Ok(Schema::Pair),
            other => Err(Error::config("schema", format!("unknown schema `{other}`"))),
        }
    }
}

pub fn load_tsv(path: &Path, schema: Schema, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_tsv(&text, path, schema, split)
}

/// Parses TSV text; `path` is only used in error messages.
pub fn parse_tsv(text: &str, path: &Path, schema: Schema, split: Split) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse { path: path.to_owned(), line, reason };
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let expected = schema.header();
    match lines.next() {
        Some((_, header)) if header.split('\t').eq(expected.iter().copied()) => {}
        Some((n, header)) => {
            return Err(err(n, format!("expected header {:?}, found {header:?}", expected.join("\t"))))
        }
        None => return Err(err(1, "missing header".into())),
    }
    let mut examples = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected.len() {
            return Err(err(n, format!("expected {} columns, found {}", expected.len(), cols.len())));
        }
        let label: usize = cols[0]
            .trim()
            .parse()
            .map_err(|_| err(n, format!("label {:?} is not a non-negative integer", cols[0])))?;
        let ex = match schema {
            Schema::Single => Example::single(cols[1], Some(label)),
            Schema::Pair => Example::pair(cols[1], cols[2], Some(label)),
        };
        examples.push(ex);
    }
    let num_classes = examples.iter().filter_map(|e| e.label).max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(examples, num_classes, split)
}

pub fn to_tsv(dataset: &Dataset, schema: Schema) -> String {
    let mut out = schema.header().join("\t");
    out.push('\n');
    for ex in &dataset.examples {
        let label = ex.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(out, "{label}\t{}", ex.text_a.join(" "));
        if schema == Schema::Pair {
            let b = ex.text_b.as_deref().unwrap_or_default();
            let _ = write!(out, "\t{}", b.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn write_tsv(dataset: &Dataset, schema: Schema, path: &Path) -> Result<()> {
    std::fs::write(path, to_tsv(dataset, schema))?;
    Ok(())
}
