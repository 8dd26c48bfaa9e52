//! The training loop: encode, permute, shuffle, batch, step.

use rand::seq::SliceRandom;
use rand::RngCore;

use trajforge_core::rng;
use trajforge_core::{TokenSequence, TrajectoryDataset, Vocabulary};

use crate::config::{PermuteMode, TrainConfig, TrainMode};
use crate::error::{LmError, Result};
use crate::lora::LoraAdapter;
use crate::model::ModelParams;
use crate::optim::{clip_factor, Adam};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Token-weighted mean training loss (nats/token) of every epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Encodes every trajectory, failing on the first one that does not fit.
pub fn encode_dataset(ds: &TrajectoryDataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    ds.trajectories
        .iter()
        .map(|t| {
            let seq = vocab.encode(t).map_err(|source| LmError::Encode { id: t.id.clone(), source })?;
            if seq.len() > max_len {
                return Err(LmError::SequenceTooLong { id: Some(t.id.clone()), len: seq.len(), max: max_len });
            }
            Ok(seq)
        })
        .collect()
}

pub fn train(
    model: &mut ModelParams<f32>,
    adapter: Option<&mut LoraAdapter<f32>>,
    dataset: &TrajectoryDataset,
    vocab: &Vocabulary,
    tc: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(model, adapter, dataset, vocab, tc, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, loss)` after every epoch.
pub fn train_with(
    model: &mut ModelParams<f32>,
    mut adapter: Option<&mut LoraAdapter<f32>>,
    dataset: &TrajectoryDataset,
    vocab: &Vocabulary,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainHistory> {
    tc.validate()?;
    model.config.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(LmError::InvalidConfig(format!(
            "model vocabulary is {} but the dataset needs {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    if tc.mode == TrainMode::LoraOnly && adapter.is_none() {
        return Err(LmError::MissingAdapter);
    }
    let base = encode_dataset(dataset, vocab, model.config.max_seq_len)?;
    let mut history = TrainHistory::default();
    if tc.epochs == 0 || base.is_empty() {
        return Ok(history);
    }

    let mut order_rng = rng::stream(tc.seed, "train", 0);
    let mut perm_rng = rng::stream(tc.seed, "permute", 0);
    let mut drop_rng = rng::stream(tc.seed, "dropout", 0);
    let dropout = model.config.dropout > 0.0 || adapter.as_ref().is_some_and(|a| a.config.dropout > 0.0);
    let permute_all = |rng: &mut dyn RngCore| -> Result<Vec<TokenSequence>> {
        base.iter()
            .zip(&dataset.trajectories)
            .map(|(s, t)| vocab.permute(s, rng).map_err(|source| LmError::Encode { id: t.id.clone(), source }))
            .collect()
    };
    let once = match tc.permute {
        PermuteMode::Once => Some(permute_all(&mut perm_rng)?),
        _ => None,
    };
    let mut opt = Adam::new(tc.learning_rate, tc.beta1, tc.beta2, tc.eps);
    let mut order: Vec<usize> = (0..base.len()).collect();

    for epoch in 0..tc.epochs {
        opt.lr = tc.lr_at(epoch);
        let fresh;
        let seqs: &[TokenSequence] = match tc.permute {
            PermuteMode::PerEpoch => {
                fresh = permute_all(&mut perm_rng)?;
                &fresh
            }
            PermuteMode::Once => once.as_deref().unwrap(),
            PermuteMode::Off => &base,
        };
        order.shuffle(&mut order_rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let n_tok: usize = batch.iter().map(|s| s.len() - 1).sum();
            let rng: Option<&mut dyn RngCore> = if dropout { Some(&mut drop_rng) } else { None };
            let (loss, grads) = model.loss_and_grad_with(adapter.as_deref(), &batch, tc.mode, rng)?;
            let scale = clip_factor(grads.global_norm(), tc.grad_clip);
            let mut params = Vec::new();
            if grads.model.is_some() {
                params.extend(model.named_mut().into_iter().map(|(_, t)| t));
            }
            if let Some(a) = adapter.as_deref_mut() {
                params.extend(a.named_mut().into_iter().map(|(_, t)| t));
            }
            let g: Vec<_> = grads.named().into_iter().map(|(_, t)| t).collect();
            opt.step(params, g, scale);
            total += loss * n_tok as f64;
            tokens += n_tok;
        }
        let epoch_loss = total / tokens as f64;
        history.epoch_loss.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
    }
    history.steps = opt.steps();
    Ok(history)
}
