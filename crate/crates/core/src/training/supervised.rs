use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::{SupervisedConfig, WarmupConfig};
use super::{ROLE_TEACHER, ROLE_WARMUP};
use crate::augment::{mask_tokens, MaskPolicy, MaskedBatch};
use crate::data::{Batch, EncodedDataset};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::losses::cross_entropy;
use crate::nn::{clip_global_norm, AdamState, Bound, EncoderConfig, EncoderModel};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{derive_seed, stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpoch {
    pub epoch: u64,
    pub loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct SupervisedRun {
    /// Parameters from the best dev epoch.
    pub model: EncoderModel,
    pub best_dev: f64,
    pub history: Vec<SupervisedEpoch>,
}

fn finite(phase: &'static str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { phase, step })
    }
}

/// One CE update with dropout; returns the loss.
fn ce_step(
    model: &mut EncoderModel,
    adam: &mut AdamState,
    batch: &Batch,
    lr: f64,
    clip: f64,
    rng: &mut dyn RngCore,
    step: usize,
) -> Result<f64> {
    let labels = batch.labels.as_deref().ok_or_else(|| Error::Data("teacher training needs labels".into()))?;
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let (logits, _) = bound.classify(batch, None, Some(rng))?;
    let loss = cross_entropy(logits, labels)?;
    let value = finite("teacher", step, loss.item()?)?;
    g.backward(loss)?;
    let mut grads = bound.grads(&g);
    clip_global_norm(&mut grads, clip);
    adam.step(&mut model.params, &grads, lr)?;
    Ok(value)
}

/// Cross-entropy training with early stopping on dev accuracy.
pub fn train_teacher(
    config: &SupervisedConfig,
    model_config: EncoderConfig,
    train: &EncodedDataset,
    dev: &EncodedDataset,
) -> Result<SupervisedRun> {
    config.validate()?;
    let seed = derive_seed(config.seed, ROLE_TEACHER);
    let mut model = EncoderModel::init(model_config, seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut dropout = stream(seed, Stream::Dropout);
    let mut best: Option<(f64, EncoderModel)> = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs as u64 {
        let mut total = 0.0;
        let batches = train.batches(config.batch_size, config.seed, epoch);
        for batch in &batches {
            total += ce_step(&mut model, &mut adam, batch, config.lr, config.clip_norm, &mut dropout, step)?;
            step += 1;
        }
        let dev_accuracy = evaluate(&model, dev)?.accuracy;
        let loss = total / batches.len().max(1) as f64;
        log::info!("teacher epoch {epoch}: loss {loss:.4} dev accuracy {dev_accuracy:.4}");
        history.push(SupervisedEpoch { epoch, loss, dev_accuracy });
        if best.as_ref().is_none_or(|(b, _)| dev_accuracy > *b) {
            best = Some((dev_accuracy, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    let (best_dev, model) = best.expect("at least one epoch");
    Ok(SupervisedRun { model, best_dev, history })
}

/// Mean cross-entropy of the generator's predictions at masked positions, or
/// `None` when nothing is masked.
pub fn mlm_loss<'g>(
    generator: &Bound<'_, 'g>,
    masked: &MaskedBatch,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Option<Var<'g>>> {
    let n = masked.num_masked();
    if n == 0 {
        return Ok(None);
    }
    let v = generator.config().vocab_size;
    let rows = masked.masked.ids.len();
    let logits = generator.lm_logits(&masked.masked, dropout)?.reshape(&[rows, v])?;
    let mut target = Tensor::zeros(&[rows, v]);
    for (pos, &flag) in masked.mask_positions.iter().enumerate() {
        if flag {
            target.data_mut()[pos * v + masked.original.ids[pos]] = 1.0;
        }
    }
    let target = logits.graph().constant(target);
    Ok(Some(logits.log_softmax(1)?.mul(target)?.sum().scale(-1.0 / n as f64)))
}

/// Masked-LM training of the generator; returns the per-step losses (NaN for
/// steps whose batch drew no mask). Zero steps leave it untouched.
pub fn warmup_generator_mlm(
    generator: &mut EncoderModel,
    config: &WarmupConfig,
    data: &EncodedDataset,
) -> Result<Vec<f64>> {
    config.mask.validate()?;
    if config.steps == 0 || data.is_empty() {
        return Ok(Vec::new());
    }
    let seed = derive_seed(config.seed, ROLE_WARMUP);
    let mut masking = stream(seed, Stream::Masking);
    let mut dropout = stream(seed, Stream::Dropout);
    let mut adam = AdamState::new(&generator.params);
    let mut losses = Vec::with_capacity(config.steps);
    let mut pass = 0;
    let mut queue = Vec::new().into_iter();
    while losses.len() < config.steps {
        let batch = match queue.next() {
            Some(b) => b,
            None => {
                queue = data.batches(config.batch_size, seed, pass).into_iter();
                pass += 1;
                continue;
            }
        };
        let masked = mask_tokens(&batch, &config.mask, &mut masking);
        let g = Graph::new();
        let bound = generator.bind(&g, true);
        let Some(loss) = mlm_loss(&bound, &masked, Some(&mut dropout))? else {
            losses.push(f64::NAN);
            continue;
        };
        let value = finite("generator warm-up", losses.len(), loss.item()?)?;
        g.backward(loss)?;
        let mut grads = bound.grads(&g);
        clip_global_norm(&mut grads, config.clip_norm);
        adam.step(&mut generator.params, &grads, config.lr)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Masked-LM loss on `data` with a fixed masking seed, averaged over masked
/// positions.
pub fn evaluate_mlm(generator: &EncoderModel, data: &EncodedDataset, policy: &MaskPolicy, seed: u64) -> Result<f64> {
    let mut masking = stream(seed, Stream::Masking);
    let (mut total, mut count) = (0.0, 0usize);
    for batch in data.sequential_batches(64) {
        let masked = mask_tokens(&batch, policy, &mut masking);
        let g = Graph::new();
        if let Some(loss) = mlm_loss(&generator.bind(&g, false), &masked, None)? {
            let n = masked.num_masked();
            total += loss.item()? * n as f64;
            count += n;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
