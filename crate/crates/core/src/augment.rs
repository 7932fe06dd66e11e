//! Masked adversarial augmentation: Bernoulli token masking, then
//! straight-through Gumbel-Softmax decoding of the masked positions by a
//! masked-LM generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, CLS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::nn::{Bound, EncoderModel};
use crate::numerics::{Graph, Tensor, Var};

/// Logit offset that removes a token from the sampling support.
const EXCLUDED_LOGIT: f64 = -1e9;
const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub p: f64,
    pub mask_token_id: usize,
    pub protected_ids: Vec<usize>,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { p: 0.3, mask_token_id: MASK, protected_ids: vec![PAD, CLS, SEP] }
    }
}

impl MaskPolicy {
    pub fn with_p(p: f64) -> Result<Self> {
        let policy = Self { p, ..Self::default() };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("mask.p", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn is_protected(&self, id: usize) -> bool {
        self.protected_ids.contains(&id)
    }
}

/// `X` and its masked copy.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub original: Batch,
    pub masked: Batch,
    /// Row-major over `[rows, seq_len]`.
    pub mask_positions: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().filter(|&&m| m).count()
    }
}

/// Masks every non-protected position independently with probability `p`.
/// One uniform draw is consumed per non-protected position, in row-major
/// order.
pub fn mask_tokens<R: Rng + ?Sized>(batch: &Batch, policy: &MaskPolicy, rng: &mut R) -> MaskedBatch {
    let mut ids = batch.ids.clone();
    let mut mask_positions = vec![false; ids.len()];
    for (id, flag) in ids.iter_mut().zip(mask_positions.iter_mut()) {
        if policy.is_protected(*id) {
            continue;
        }
        if rng.random::<f64>() < policy.p {
            *id = policy.mask_token_id;
            *flag = true;
        }
    }
    MaskedBatch { original: batch.clone(), masked: batch.with_ids(ids), mask_positions }
}

/// Standard Gumbel noise `-ln(-ln U)` with `U` clamped away from 0 and 1.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Straight-through Gumbel-Softmax over the rows of `[n, vocab]` logits.
#[derive(Clone, Debug)]
pub struct GumbelSample<'g> {
    /// `softmax((logits + g) / tau)`, differentiable.
    pub soft: Var<'g>,
    /// One-hot at the row argmax of `logits + g`.
    pub hard: Tensor,
    pub argmax: Vec<usize>,
    /// Equals `hard` in value; its gradient is that of `soft`.
    pub st: Var<'g>,
}

pub fn gumbel_softmax_st<'g, R: Rng + ?Sized>(
    logits: Var<'g>,
    tau_g: f64,
    rng: &mut R,
) -> Result<GumbelSample<'g>> {
    let noise = gumbel_noise(&logits.shape(), rng);
    gumbel_softmax_st_with_noise(logits, tau_g, &noise, None)
}

/// [`gumbel_softmax_st`] with explicit noise.
///
/// With `anchor = Some(a)` the stop-gradient copy of `soft` is replaced by
/// the fixed tensor `a`, so that `st = hard + soft - a`. Evaluated at the
/// point where `a` was taken this is the ordinary estimator, and nearby it
/// moves like `soft`, which lets finite differences see the surrogate.
pub fn gumbel_softmax_st_with_noise<'g>(
    logits: Var<'g>,
    tau_g: f64,
    noise: &Tensor,
    anchor: Option<&Tensor>,
) -> Result<GumbelSample<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || noise.shape() != shape.as_slice() {
        return Err(Error::shape("gumbel_softmax_st", format!("logits {shape:?}, noise {:?}", noise.shape())));
    }
    if !(tau_g > 0.0) {
        return Err(Error::config("gumbel_tau", "must be positive"));
    }
    let g = logits.graph();
    let perturbed = logits.add(g.constant(noise.clone()))?;
    let soft = perturbed.scale(1.0 / tau_g).softmax(1)?;
    let values = perturbed.value();
    let v = shape[1];
    let mut hard = Tensor::zeros(&shape);
    let mut argmax = Vec::with_capacity(shape[0]);
    for r in 0..shape[0] {
        let row = values.row(r);
        let mut best = 0;
        for j in 1..v {
            if row[j] > row[best] {
                best = j;
            }
        }
        hard.data_mut()[r * v + best] = 1.0;
        argmax.push(best);
    }
    let stop = match anchor {
        Some(a) => g.constant(a.clone()),
        None => soft.detach(),
    };
    let st = soft.sub(stop)?.add(g.constant(hard.clone()))?;
    Ok(GumbelSample { soft, hard, argmax, st })
}

/// `X'` with its differentiable carrier.
#[derive(Clone, Debug)]
pub struct AugmentedBatch<'g> {
    /// Hard token ids of `X'`; labels are dropped.
    pub hard: Batch,
    /// `[rows, seq_len, vocab]`, exactly one-hot in value everywhere; at
    /// masked positions its gradient flows to the generator logits.
    pub carrier: Var<'g>,
    /// Relaxed distribution at every position, `[rows * seq_len, vocab]`.
    pub soft: Tensor,
    pub mask_positions: Vec<bool>,
}

fn support_mask(vocab: usize) -> Vec<f64> {
    let mut m = vec![0.0; vocab];
    for id in [PAD, CLS, SEP, MASK] {
        if id < vocab {
            m[id] = EXCLUDED_LOGIT;
        }
    }
    m
}

/// Decodes the masked positions of `masked` with the generator. Unmasked
/// positions keep their original token and an exact one-hot carrier.
pub fn generate_adversarial<'g, R: Rng + ?Sized>(
    generator: &Bound<'_, 'g>,
    masked: &MaskedBatch,
    tau_g: f64,
    rng: &mut R,
) -> Result<AugmentedBatch<'g>> {
    let v = generator.config().vocab_size;
    let noise = gumbel_noise(&[masked.masked.ids.len(), v], rng);
    generate_adversarial_with_noise(generator, masked, tau_g, &noise, None)
}

/// [`generate_adversarial`] with explicit noise and an optional anchor for the
/// stop-gradient copy (see [`gumbel_softmax_st_with_noise`]).
pub fn generate_adversarial_with_noise<'g>(
    generator: &Bound<'_, 'g>,
    masked: &MaskedBatch,
    tau_g: f64,
    noise: &Tensor,
    anchor: Option<&Tensor>,
) -> Result<AugmentedBatch<'g>> {
    let v = generator.config().vocab_size;
    let (b, l) = (masked.masked.rows, masked.masked.seq_len);
    let n = b * l;
    let g = generator.vars()[0].graph();
    let logits = generator.lm_logits(&masked.masked, None)?.reshape(&[n, v])?;
    let logits = logits.add(g.constant(Tensor::vector(support_mask(v))))?;
    let sample = gumbel_softmax_st_with_noise(logits, tau_g, noise, anchor)?;

    let mut ids = masked.original.ids.clone();
    let mut base = Tensor::zeros(&[n, v]);
    let mut gate = Tensor::zeros(&[n, v]);
    for (pos, &is_masked) in masked.mask_positions.iter().enumerate() {
        if is_masked {
            ids[pos] = sample.argmax[pos];
            gate.data_mut()[pos * v..(pos + 1) * v].fill(1.0);
        }
        base.data_mut()[pos * v + ids[pos]] = 1.0;
    }
    let stop = match anchor {
        Some(a) => g.constant(a.clone()),
        None => sample.soft.detach(),
    };
    let carrier = sample
        .soft
        .sub(stop)?
        .mul(g.constant(gate))?
        .add(g.constant(base))?
        .reshape(&[b, l, v])?;
    let mut hard = masked.original.with_ids(ids);
    hard.labels = None;
    Ok(AugmentedBatch { hard, carrier, soft: sample.soft.value(), mask_positions: masked.mask_positions.clone() })
}

/// Hard `X'` ids from a frozen generator, with the original labels kept for
/// bookkeeping.
pub fn sample_adversarial_ids<R: Rng + ?Sized>(
    generator: &EncoderModel,
    masked: &MaskedBatch,
    tau_g: f64,
    rng: &mut R,
) -> Result<Batch> {
    let g = Graph::new();
    let aug = generate_adversarial(&generator.bind(&g, false), masked, tau_g, rng)?;
    let mut hard = aug.hard;
    hard.labels = masked.original.labels.clone();
    Ok(hard)
}
