use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::config::{EncoderConfig, HeadKind};
use super::params::ParamSet;
use crate::data::{Batch, CLS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{stream, Stream};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Additive attention bias for PAD keys; `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

/// Post-layernorm transformer encoder with a classification or masked-LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Per-block CLS states and the final hidden sequence of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerStack<'g> {
    /// One `[batch, d_model]` tensor per encoder block, first block first.
    pub cls: Vec<Var<'g>>,
    /// `[batch, seq_len, d_model]`.
    pub hidden: Var<'g>,
}

pub(crate) fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl EncoderModel {
    /// Weights ~ N(0, 0.02²) truncated at two standard deviations, biases 0,
    /// layernorm gains 1. Bit-identical for identical `(config, seed)`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".w") || name.ends_with("_emb") {
                (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect()
            } else {
                vec![0.0; n]
            };
            params.push(name, Tensor::new(shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind<'m, 'g>(&'m self, graph: &'g Graph, trainable: bool) -> Bound<'m, 'g> {
        let vars = self.params.tensors().map(|t| graph.leaf(t.clone(), trainable)).collect();
        Bound { model: self, vars }
    }

    /// Binds the model to caller-made variables, one per parameter in order.
    pub fn bind_vars<'m, 'g>(&'m self, vars: Vec<Var<'g>>) -> Result<Bound<'m, 'g>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape("bind_vars", format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        for ((name, t), v) in self.params.iter().zip(&vars) {
            if v.shape() != t.shape() {
                return Err(Error::shape("bind_vars", format!("`{name}` is {:?}, var is {:?}", t.shape(), v.shape())));
            }
        }
        Ok(Bound { model: self, vars })
    }

    /// Eval-mode class logits for a batch.
    pub fn predict_logits(&self, tokens: &Batch) -> Result<Tensor> {
        let g = Graph::new();
        let (logits, _) = self.bind(&g, false).classify(tokens, None, None)?;
        Ok(logits.value())
    }
}

/// An [`EncoderModel`] whose parameters live on a graph.
pub struct Bound<'m, 'g> {
    model: &'m EncoderModel,
    vars: Vec<Var<'g>>,
}

impl<'m, 'g> Bound<'m, 'g> {
    pub fn config(&self) -> &EncoderConfig {
        &self.model.config
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn param(&self, name: &str) -> Var<'g> {
        let i = self.model.params.index_of(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        self.vars[i]
    }

    /// Gradients in parameter order, zeros for unreached parameters.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|v| graph.grad_or_zeros(*v)).collect()
    }

    fn validate(&self, tokens: &Batch) -> Result<()> {
        let cfg = &self.model.config;
        if tokens.seq_len > cfg.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                tokens.seq_len, cfg.max_len
            )));
        }
        for r in 0..tokens.rows {
            let row = tokens.row(r);
            if let Some((pos, &id)) = row.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
                return Err(Error::TokenOutOfRange { row: r, pos, id, vocab: cfg.vocab_size });
            }
            if row.first() != Some(&CLS) {
                return Err(Error::Data(format!("row {r} does not start with CLS")));
            }
        }
        Ok(())
    }

    /// Runs every encoder block and collects the CLS state after each.
    ///
    /// With `carrier = Some(x)`, token embeddings are `x · tok_emb` where `x`
    /// is a `[batch, seq_len, vocab]` distribution (one-hot or relaxed) and
    /// `tokens` still supplies the attention mask. Dropout is applied only
    /// when `dropout_rng` is given.
    pub fn encode(
        &self,
        tokens: &Batch,
        carrier: Option<Var<'g>>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<LayerStack<'g>> {
        self.validate(tokens)?;
        let cfg = &self.model.config;
        let (b, l, d, h) = (tokens.rows, tokens.seq_len, cfg.d_model, cfg.num_heads);
        let dh = cfg.head_dim();
        let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };
        let mut apply_dropout = |x: Var<'g>| -> Result<Var<'g>> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if p_drop > 0.0 => x.dropout(p_drop, rng),
                _ => Ok(x),
            }
        };

        let tok = self.param("tok_emb");
        let embedded = match carrier {
            None => tok.gather(&tokens.ids, &[b, l])?,
            Some(c) => {
                if c.shape() != [b, l, cfg.vocab_size] {
                    return Err(Error::shape(
                        "encode",
                        format!("carrier {:?} for batch [{b}, {l}]", c.shape()),
                    ));
                }
                c.reshape(&[b * l, cfg.vocab_size])?.matmul(tok)?.reshape(&[b, l, d])?
            }
        };
        let pos = self.param("pos_emb").slice(0, 0, l)?;
        let mut x = embedded
            .add(pos)?
            .layer_norm(self.param("emb_ln.gain"), self.param("emb_ln.bias"), LN_EPS)?;
        x = apply_dropout(x)?;

        let graph = x.graph();
        let attention = tokens.attention();
        let mut mask = Vec::with_capacity(b * h * l * l);
        for r in 0..b {
            let keys: Vec<f64> = attention[r * l..(r + 1) * l]
                .iter()
                .map(|&keep| if keep { 0.0 } else { MASKED_SCORE })
                .collect();
            for _ in 0..h * l {
                mask.extend_from_slice(&keys);
            }
        }
        let mask = graph.constant(Tensor::new(vec![b * h, l, l], mask)?);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut cls = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let p = |s: &str| self.param(&format!("layers.{layer}.{s}"));
            let heads = |name: &str| -> Result<Var<'g>> {
                x.matmul(p(&format!("attn.{name}.w")))?
                    .add(p(&format!("attn.{name}.b")))?
                    .reshape(&[b, l, h, dh])?
                    .transpose(1, 2)?
                    .reshape(&[b * h, l, dh])
            };
            let (q, k, v) = (heads("q")?, heads("k")?, heads("v")?);
            let probs = q.matmul(k.transpose(1, 2)?)?.scale(scale).add(mask)?.softmax(2)?;
            let ctx = probs
                .matmul(v)?
                .reshape(&[b, h, l, dh])?
                .transpose(1, 2)?
                .reshape(&[b, l, d])?;
            let attn = apply_dropout(ctx.matmul(p("attn.o.w"))?.add(p("attn.o.b"))?)?;
            x = x.add(attn)?.layer_norm(p("ln1.gain"), p("ln1.bias"), LN_EPS)?;

            let ff = x
                .matmul(p("ffn.in.w"))?
                .add(p("ffn.in.b"))?
                .gelu()
                .matmul(p("ffn.out.w"))?
                .add(p("ffn.out.b"))?;
            let ff = apply_dropout(ff)?;
            x = x.add(ff)?.layer_norm(p("ln2.gain"), p("ln2.bias"), LN_EPS)?;
            cls.push(x.slice(1, 0, 1)?.reshape(&[b, d])?);
        }
        Ok(LayerStack { cls, hidden: x })
    }

    /// `[batch, num_classes]` logits from the final CLS state.
    pub fn classify(
        &self,
        tokens: &Batch,
        carrier: Option<Var<'g>>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var<'g>, LayerStack<'g>)> {
        if !matches!(self.model.config.head, HeadKind::Classifier { .. }) {
            return Err(Error::HeadMismatch("classify needs a classifier head"));
        }
        let stack = self.encode(tokens, carrier, dropout_rng)?;
        let last = *stack.cls.last().expect("num_layers > 0");
        let logits = last.matmul(self.param("head.w"))?.add(self.param("head.b"))?;
        Ok((logits, stack))
    }

    /// `[batch, seq_len, vocab]` logits through the tied embedding decoder.
    pub fn lm_logits(
        &self,
        tokens: &Batch,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<'g>> {
        if self.model.config.head != HeadKind::MaskedLm {
            return Err(Error::HeadMismatch("lm_logits needs a masked-LM head"));
        }
        let stack = self.encode(tokens, None, dropout_rng)?;
        let decoder = self.param("tok_emb").transpose(0, 1)?;
        stack.hidden.matmul(decoder)?.add(self.param("lm.bias"))
    }
}
