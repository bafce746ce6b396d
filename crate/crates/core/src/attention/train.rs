use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HanConfig, HanParams};
use crate::data::Sample;
use crate::diffcore::{AdamConfig, AdamState, Graph, Tensor};
use crate::error::{ensure, Result};
use crate::metrics;

/// Independent random streams derived from one run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const BRANCH_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Walks a dataset in reshuffled epochs of fixed-size mini-batches.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

impl Batcher {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::SHUFFLE);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Batcher {
            order,
            pos: 0,
            batch: batch.max(1),
            rng,
            epoch: 0,
        }
    }

    /// Next batch, and whether it finished the current epoch.
    pub fn next_batch(&mut self) -> (Vec<usize>, bool) {
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        let done = self.pos == self.order.len();
        if done {
            self.pos = 0;
            self.epoch += 1;
            self.order.shuffle(&mut self.rng);
        }
        (out, done)
    }
}

pub(crate) fn dropout_mask<R: Rng>(rng: &mut R, shape: &[usize], rate: f64) -> Option<Tensor> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.gen::<f64>() >= rate {
            *v = keep;
        }
    }
    Some(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HanTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer updates.
    pub steps: usize,
    pub seed: u64,
    /// Threads for validation passes; 1 keeps everything on the caller's thread.
    pub workers: usize,
}

impl Default for HanTrainConfig {
    fn default() -> Self {
        HanTrainConfig {
            lr: 3e-4,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            workers: 1,
        }
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    /// Mean training loss over the batches since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_rank_correlation: Option<f64>,
}

/// Mean rank correlation of predicted maps against each sample's annotator maps
/// (falling back to its reference map).
pub fn validation_rank_correlation(han: &HanParams, val: &[Sample], workers: usize) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let score = |s: &Sample| -> Result<f64> {
        let pred = han.predict(&s.features, &s.tokens)?;
        let annots = s.evaluation_maps()?;
        metrics::mean_rank_correlation(pred.values(), &annots)
    };
    let scores: Vec<f64> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| crate::Error::Config(e.to_string()))?;
        pool.install(|| val.par_iter().map(score).collect::<Result<Vec<_>>>())?
    } else {
        val.iter().map(score).collect::<Result<Vec<_>>>()?
    };
    Ok(Some(scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Adam mini-batch training of the attention network on mean per-sample MSE.
pub fn train_han(
    train: &[Sample],
    val: &[Sample],
    config: HanConfig,
    tc: &HanTrainConfig,
) -> Result<(HanParams, Vec<TrainRecord>)> {
    ensure!(!train.is_empty(), "attention training needs at least one sample");
    ensure!(tc.batch_size > 0, "batch size must be positive");
    let refs = train
        .iter()
        .map(|s| {
            s.reference
                .as_deref()
                .ok_or_else(|| crate::Error::contract(format!("sample {} has no reference map", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut init_rng = stream_rng(tc.seed, streams::INIT);
    let mut han = HanParams::init(config, &mut init_rng)?;
    let mut adam = AdamState::new(
        &han.store,
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
    );
    let mut batcher = Batcher::new(train.len(), tc.batch_size, tc.seed);
    let mut drop_rng = stream_rng(tc.seed, streams::DROPOUT);
    let mask_shape = [han.config.joint_dim, han.config.cells()];

    let mut log = Vec::new();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for step in 1..=tc.steps {
        let (batch, epoch_done) = batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        let mut batch_loss = 0.0;
        for &i in &batch {
            let s = &train[i];
            let mask = dropout_mask(&mut drop_rng, &mask_shape, han.config.dropout);
            let mut g = Graph::new(&han.store);
            let l = han.loss(&mut g, &s.features, &s.tokens, refs[i], mask.as_ref())?;
            let l = g.scale(l, scale);
            batch_loss += g.value(l).data()[0];
            let grads = g.backward(l)?;
            han.store.accumulate(&grads);
        }
        adam.step(&mut han.store)?;
        loss_sum += batch_loss;
        batches += 1;
        if epoch_done || step == tc.steps {
            let val_rank_correlation = validation_rank_correlation(&han, val, tc.workers).unwrap_or(None);
            let rec = TrainRecord {
                step: step as u64,
                epoch: batcher.epoch,
                loss: loss_sum / batches as f64,
                lr: tc.lr,
                seed: tc.seed,
                val_rank_correlation,
            };
            log::debug!("train-han {}", serde_json::to_string(&rec)?);
            log.push(rec);
            loss_sum = 0.0;
            batches = 0;
        }
    }
    Ok((han, log))
}
