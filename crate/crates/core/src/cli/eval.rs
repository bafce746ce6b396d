use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::metrics::{self, RankFormula, Summary};

/// What a model (or a file of outputs) produced for one sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleOutput {
    pub map: Option<Vec<f64>>,
    /// Predicted answer id and its name.
    pub answer: Option<(usize, String)>,
}

/// Maps a predicted attention map is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Against {
    /// Annotator maps, or the reference map when a sample has none.
    #[default]
    Annotators,
    Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub mean: f64,
    pub sem: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSample {
    pub id: String,
    pub rank_correlation: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank_formula: RankFormula,
    pub against: Against,
    pub metrics: Vec<MetricEntry>,
    /// Samples whose rank correlation is undefined (a constant map).
    pub undefined_correlations: usize,
    #[serde(skip)]
    pub per_sample: Vec<PerSample>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn per_sample_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_sample {
            w.serialize(row).map_err(|e| Error::contract(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Accuracy of one predicted answer: consensus over votes when present,
/// otherwise exact match with the labeled answer.
pub fn answer_accuracy(s: &Sample, id: usize, name: &str) -> Result<f64> {
    if !s.votes.is_empty() {
        return metrics::consensus_accuracy(name, &s.votes);
    }
    let truth = s
        .answer
        .ok_or_else(|| Error::contract(format!("sample {} has neither votes nor an answer", s.id)))?;
    Ok(f64::from(u8::from(truth == id)))
}

fn score_one(s: &Sample, out: &SampleOutput, formula: RankFormula, against: Against) -> Result<(PerSample, bool)> {
    let mut undefined = false;
    let rank_correlation = match &out.map {
        None => None,
        Some(map) => {
            ensure!(
                map.len() == s.features.cells(),
                "map for {} has {} cells, grid has {}",
                s.id,
                map.len(),
                s.features.cells()
            );
            let refs = match against {
                Against::Annotators => s.evaluation_maps()?,
                Against::Reference => vec![s
                    .reference
                    .clone()
                    .ok_or_else(|| Error::contract(format!("sample {} has no reference map", s.id)))?],
            };
            match metrics::mean_rank_correlation_with(map, &refs, formula) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => {
                    undefined = true;
                    None
                }
                Err(e) => return Err(e),
            }
        }
    };
    let accuracy = match &out.answer {
        None => None,
        Some((id, name)) => Some(answer_accuracy(s, *id, name)?),
    };
    Ok((
        PerSample {
            id: s.id.clone(),
            rank_correlation,
            accuracy,
        },
        undefined,
    ))
}

fn entry(metric: &str, values: &[f64]) -> Result<MetricEntry> {
    let Summary { mean, sem, count } = metrics::summarize(values)?;
    Ok(MetricEntry {
        metric: metric.to_string(),
        mean,
        sem,
        count,
    })
}

/// Score per-sample outputs against each sample's references and votes.
pub fn score(samples: &[Sample], outputs: &[SampleOutput], formula: RankFormula, against: Against) -> Result<EvalReport> {
    ensure!(
        samples.len() == outputs.len(),
        "{} samples but {} outputs",
        samples.len(),
        outputs.len()
    );
    ensure!(!samples.is_empty(), "nothing to evaluate");
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut undefined = 0;
    for (s, out) in samples.iter().zip(outputs) {
        let (row, u) = score_one(s, out, formula, against)?;
        undefined += usize::from(u);
        per_sample.push(row);
    }
    let ranks: Vec<f64> = per_sample.iter().filter_map(|r| r.rank_correlation).collect();
    let accs: Vec<f64> = per_sample.iter().filter_map(|r| r.accuracy).collect();
    let mut metrics = Vec::new();
    if !ranks.is_empty() {
        metrics.push(entry("rank_correlation", &ranks)?);
    }
    if !accs.is_empty() {
        metrics.push(entry("accuracy", &accs)?);
    }
    ensure!(
        !metrics.is_empty() || undefined > 0,
        "outputs contain neither maps nor answers"
    );
    Ok(EvalReport {
        rank_formula: formula,
        against,
        metrics,
        undefined_correlations: undefined,
        per_sample,
    })
}

/// Apply `f` to every sample, on a dedicated pool when `workers > 1`. Order is preserved.
pub fn map_samples<T, F>(samples: &[Sample], workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Sample) -> Result<T> + Sync,
{
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| samples.par_iter().map(&f).collect())
    } else {
        samples.iter().map(f).collect()
    }
}
