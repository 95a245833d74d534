use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, top_k};
use super::optim::{learning_rate, SgdMomentum};
use super::params::SamParams;
use super::SamError;
use crate::corpus::Corpus;
use crate::sampler::{derive_seed, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean loss over the epoch's examples, each measured before its update.
    pub loss: f64,
    /// Fraction of subset entries whose top class is a target node.
    pub subset_top1: f64,
    /// Same, for the whole-set entry only.
    pub set_top1: f64,
    pub examples: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: SamParams,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no training examples")]
    Empty,
    #[error("video `{0}` has no features in the corpus")]
    MissingFeatures(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize, last_good: Box<SamParams> },
    #[error(transparent)]
    Model(#[from] SamError),
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

/// Minibatch momentum SGD over `examples` for `epochs` passes. The visiting
/// order is reshuffled each epoch from the configured seed. One metrics line
/// per epoch is written to `metrics` as JSON.
pub fn train(
    mut params: SamParams,
    corpus: &Corpus,
    examples: &[TrainingExample],
    epochs: usize,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty);
    }
    let features: Vec<Vec<&[f64]>> = examples
        .iter()
        .map(|ex| {
            ex.video_ids
                .iter()
                .map(|id| match corpus.get(id) {
                    Some(r) if !r.features.is_empty() => Ok(r.features.as_slice()),
                    _ => Err(TrainError::MissingFeatures(id.clone())),
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;

    let mut opt = SgdMomentum::new(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let batch = params.config.batch_size;
    for epoch in 0..epochs {
        let last_good = params.clone();
        let diverged = |p: SamParams| TrainError::Diverged { epoch, last_good: Box::new(p) };
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(params.config.seed, epoch as u64)));
        let (mut loss_sum, mut hits, mut entries, mut set_hits) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(batch) {
            let mut grads = params.zeros_like();
            for &i in chunk {
                let (l, out) = match backward(&params, &features[i], &examples[i].subsets, &mut grads) {
                    Err(SamError::NonFinite { .. }) => return Err(diverged(last_good)),
                    r => r?,
                };
                loss_sum += l;
                for s in &out.subsets {
                    let best = &params.vocabulary[top_k(&s.logits, 1)[0]];
                    let hit = examples[i].target(s.mask).is_some_and(|t| t.nodes.contains(best));
                    hits += hit as usize;
                    entries += 1;
                    if s.mask == out.full().mask {
                        set_hits += hit as usize;
                    }
                }
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.step(&mut params, &grads, epoch);
            if !params.is_finite() {
                return Err(diverged(last_good));
            }
        }
        let m = EpochMetrics {
            epoch,
            learning_rate: learning_rate(&params.config, epoch),
            loss: loss_sum / examples.len() as f64,
            subset_top1: hits as f64 / entries as f64,
            set_top1: set_hits as f64 / examples.len() as f64,
            examples: examples.len(),
        };
        if !m.loss.is_finite() {
            return Err(diverged(last_good));
        }
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut **w, &m).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        history.push(m);
    }
    Ok(TrainOutcome { params, metrics: history })
}
