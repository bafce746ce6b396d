use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{answer, VqaConfig, VqaMode, VqaParams};
use crate::attention::train::{dropout_mask, stream_rng, streams, Batcher};
use crate::data::Sample;
use crate::diffcore::{AdamConfig, AdamState, Graph};
use crate::error::{ensure, Error, Result};
use crate::metrics::{self, Summary};

/// Which per-sample map the supervision branch is trained towards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    /// Maps generated by a trained attention network.
    #[default]
    Hlat,
    /// The dataset's own reference maps.
    Reference,
}

impl MapSource {
    pub fn map<'a>(self, s: &'a Sample) -> Option<&'a [f64]> {
        match self {
            MapSource::Hlat => s.hlat.as_deref(),
            MapSource::Reference => s.reference.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub workers: usize,
    pub map_source: MapSource,
}

impl Default for VqaTrainConfig {
    fn default() -> Self {
        VqaTrainConfig {
            lr: 3e-4,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            workers: 1,
            map_source: MapSource::Hlat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaTrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub cls_loss: f64,
    /// `λ ·` supervision loss; 0 when the branch is not evaluated.
    pub weighted_att_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer_id: usize,
    pub answer: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub accuracy: f64,
    /// Absent when the correlation is undefined or the sample has no maps.
    pub rank_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaEvaluation {
    pub accuracy: Summary,
    pub rank_correlation: Option<Summary>,
    pub predictions: Vec<Prediction>,
    pub per_sample: Vec<SampleScore>,
}

fn score_sample(vqa: &VqaParams, s: &Sample, answers: &[String]) -> Result<(Prediction, SampleScore)> {
    let dist = vqa.predict(&s.features, &s.tokens)?;
    let k = answer(&dist);
    let name = answers.get(k).cloned().unwrap_or_else(|| k.to_string());
    let accuracy = if !s.votes.is_empty() {
        metrics::consensus_accuracy(&name, &s.votes)?
    } else {
        let truth = s
            .answer
            .ok_or_else(|| Error::contract(format!("sample {} has neither votes nor an answer", s.id)))?;
        f64::from(u8::from(truth == k))
    };
    let rank_correlation = match s.evaluation_maps() {
        Ok(maps) => {
            let att = vqa.attention_map(&s.features, &s.tokens)?;
            match metrics::mean_rank_correlation(att.values(), &maps) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            }
        }
        Err(_) => None,
    };
    Ok((
        Prediction {
            id: s.id.clone(),
            answer_id: k,
            answer: name,
            probability: dist[k],
        },
        SampleScore {
            id: s.id.clone(),
            accuracy,
            rank_correlation,
        },
    ))
}

/// Consensus accuracy and attention rank correlation over `samples`.
pub fn evaluate_vqa(vqa: &VqaParams, samples: &[Sample], answers: &[String], workers: usize) -> Result<VqaEvaluation> {
    ensure!(!samples.is_empty(), "nothing to evaluate");
    let scored: Vec<(Prediction, SampleScore)> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| samples.par_iter().map(|s| score_sample(vqa, s, answers)).collect::<Result<_>>())?
    } else {
        samples.iter().map(|s| score_sample(vqa, s, answers)).collect::<Result<_>>()?
    };
    let (predictions, per_sample): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let acc: Vec<f64> = per_sample.iter().map(|s| s.accuracy).collect();
    let ranks: Vec<f64> = per_sample.iter().filter_map(|s| s.rank_correlation).collect();
    Ok(VqaEvaluation {
        accuracy: metrics::summarize(&acc)?,
        rank_correlation: if ranks.is_empty() { None } else { Some(metrics::summarize(&ranks)?) },
        predictions,
        per_sample,
    })
}

/// Adam mini-batch training on the total loss.
pub fn train_vqa(
    train: &[Sample],
    val: &[Sample],
    answers: &[String],
    config: VqaConfig,
    tc: &VqaTrainConfig,
) -> Result<(VqaParams, Vec<VqaTrainRecord>)> {
    ensure!(!train.is_empty(), "answerer training needs at least one sample");
    ensure!(tc.batch_size > 0, "batch size must be positive");
    let truths = train
        .iter()
        .map(|s| s.answer.ok_or_else(|| Error::contract(format!("sample {} has no answer label", s.id))))
        .collect::<Result<Vec<_>>>()?;
    if config.mode == VqaMode::Supervised {
        if let Some(s) = train.iter().find(|s| tc.map_source.map(s).is_none()) {
            return Err(Error::contract(format!(
                "supervised training needs {:?} maps, sample {} has none",
                tc.map_source, s.id
            )));
        }
    }

    let mut init_rng = stream_rng(tc.seed, streams::INIT);
    let mut branch_rng = stream_rng(tc.seed, streams::BRANCH_INIT);
    let mut vqa = VqaParams::init(config, &mut init_rng, &mut branch_rng)?;
    let mut adam = AdamState::new(
        &vqa.store,
        AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        },
    );
    let mut batcher = Batcher::new(train.len(), tc.batch_size, tc.seed);
    let mut drop_rng = stream_rng(tc.seed, streams::DROPOUT);
    let mask_shape = [vqa.config.joint_dim, vqa.config.cells()];
    let lambda = vqa.config.lambda;

    let mut log = Vec::new();
    let (mut cls_sum, mut att_sum, mut batches) = (0.0, 0.0, 0usize);
    for step in 1..=tc.steps {
        let (batch, epoch_done) = batcher.next_batch();
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let s = &train[i];
            let mask = dropout_mask(&mut drop_rng, &mask_shape, vqa.config.dropout);
            let mut g = Graph::new(&vqa.store);
            let parts = vqa.total_loss(&mut g, &s.features, &s.tokens, truths[i], tc.map_source.map(s), mask.as_ref())?;
            cls_sum += g.value(parts.cls).data()[0] * scale;
            if let Some(a) = parts.att {
                att_sum += lambda * g.value(a).data()[0] * scale;
            }
            let l = g.scale(parts.total, scale);
            let grads = g.backward(l)?;
            vqa.store.accumulate(&grads);
        }
        adam.step(&mut vqa.store)?;
        batches += 1;
        if epoch_done || step == tc.steps {
            let val_accuracy = if val.is_empty() {
                None
            } else {
                evaluate_vqa(&vqa, val, answers, tc.workers).ok().map(|e| e.accuracy.mean)
            };
            let n = batches as f64;
            let rec = VqaTrainRecord {
                step: step as u64,
                epoch: batcher.epoch,
                cls_loss: cls_sum / n,
                weighted_att_loss: att_sum / n,
                total_loss: (cls_sum + att_sum) / n,
                lr: tc.lr,
                seed: tc.seed,
                val_accuracy,
            };
            log::debug!("train-vqa {}", serde_json::to_string(&rec)?);
            log.push(rec);
            cls_sum = 0.0;
            att_sum = 0.0;
            batches = 0;
        }
    }
    Ok((vqa, log))
}
