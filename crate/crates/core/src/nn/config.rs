use serde::{Deserialize, Serialize};

use crate::data::RESERVED_TOKENS;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    Classifier { num_classes: usize },
    MaskedLm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub head: HeadKind,
}

impl EncoderConfig {
    pub fn classifier(
        num_layers: usize,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_len: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            num_layers,
            d_model,
            num_heads,
            d_ff,
            vocab_size,
            max_len,
            dropout: 0.1,
            head: HeadKind::Classifier { num_classes },
        }
    }

    pub fn masked_lm(
        num_layers: usize,
        d_model: usize,
        num_heads: usize,
        d_ff: usize,
        vocab_size: usize,
        max_len: usize,
    ) -> Self {
        Self {
            num_layers,
            d_model,
            num_heads,
            d_ff,
            vocab_size,
            max_len,
            dropout: 0.1,
            head: HeadKind::MaskedLm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.num_heads),
            ));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {} reserved ids", RESERVED_TOKENS.len()),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if let HeadKind::Classifier { num_classes } = self.head {
            if num_classes < 2 {
                return Err(Error::config("num_classes", "must be at least 2"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.head {
            HeadKind::Classifier { num_classes } => Some(num_classes),
            HeadKind::MaskedLm => None,
        }
    }

    /// Every parameter as `(name, shape)` in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
            ("emb_ln.gain".to_string(), vec![d]),
            ("emb_ln.bias".to_string(), vec![d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{proj}.w")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.b")), vec![d]));
            }
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            out.push((p("ffn.in.w"), vec![d, f]));
            out.push((p("ffn.in.b"), vec![f]));
            out.push((p("ffn.out.w"), vec![f, d]));
            out.push((p("ffn.out.b"), vec![d]));
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
        }
        match self.head {
            HeadKind::Classifier { num_classes } => {
                out.push(("head.w".to_string(), vec![d, num_classes]));
                out.push(("head.b".to_string(), vec![num_classes]));
            }
            // The decoder matrix is tied to tok_emb.
            HeadKind::MaskedLm => out.push(("lm.bias".to_string(), vec![self.vocab_size])),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_names_the_field() {
        let mut c = EncoderConfig::classifier(2, 30, 4, 64, 64, 32, 2);
        match c.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "num_heads"),
            other => panic!("{other:?}"),
        }
        c.num_heads = 3;
        assert!(c.validate().is_ok());
        c.vocab_size = 4;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig { field, .. }) if field == "vocab_size"));
    }
}
