use serde::{Deserialize, Serialize};

use crate::answerer::{evaluate_vqa, train_vqa, VqaConfig, VqaMode, VqaTrainConfig};
use crate::answerer::VqaParams;
use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::metrics;

/// One trained answerer in the supervision comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub seed: u64,
    pub mode: VqaMode,
    pub accuracy: f64,
    /// Mean over validation samples of the attention rank correlation.
    pub rank_correlation: Option<f64>,
    /// Same, against each sample's single reference map.
    #[serde(default)]
    pub reference_correlation: Option<f64>,
    pub cls_loss: f64,
    pub weighted_att_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mode: VqaMode,
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
    pub mean_rank_correlation: Option<f64>,
    #[serde(default)]
    pub mean_reference_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub rows: Vec<AbRow>,
    pub unsupervised: ArmSummary,
    pub supervised: ArmSummary,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn arm(rows: &[AbRow], mode: VqaMode) -> ArmSummary {
    let rows: Vec<&AbRow> = rows.iter().filter(|r| r.mode == mode).collect();
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    ArmSummary {
        mode,
        mean_accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
        median_accuracy: median(acc),
        mean_rank_correlation: mean(rows.iter().filter_map(|r| r.rank_correlation)),
        mean_reference_correlation: mean(rows.iter().filter_map(|r| r.reference_correlation)),
    }
}

/// Mean rank correlation of the answerer's attention with each sample's
/// reference map; samples without one, or with an undefined score, are skipped.
pub fn reference_correlation(vqa: &VqaParams, samples: &[Sample]) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for s in samples {
        let Some(reference) = &s.reference else { continue };
        let att = vqa.attention_map(&s.features, &s.tokens)?;
        match metrics::spearman(att.values(), reference) {
            Ok(r) => scores.push(r),
            Err(Error::UndefinedCorrelation(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(mean(scores.into_iter()))
}

/// Train the answerer with and without attention supervision for each seed,
/// with every other setting shared, and score both on `val`.
pub fn supervision_ab(
    train: &[Sample],
    val: &[Sample],
    answers: &[String],
    base: &VqaConfig,
    tc: &VqaTrainConfig,
    seeds: &[u64],
) -> Result<AbReport> {
    ensure!(!seeds.is_empty(), "need at least one seed");
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in [VqaMode::Unsupervised, VqaMode::Supervised] {
            let config = VqaConfig { mode, ..base.clone() };
            let tc = VqaTrainConfig { seed, ..tc.clone() };
            let (vqa, log) = train_vqa(train, val, answers, config, &tc)?;
            let eval = evaluate_vqa(&vqa, val, answers, tc.workers)?;
            let last = log.last();
            let row = AbRow {
                seed,
                mode,
                accuracy: eval.accuracy.mean,
                rank_correlation: eval.rank_correlation.map(|s| s.mean),
                reference_correlation: reference_correlation(&vqa, val)?,
                cls_loss: last.map_or(f64::NAN, |r| r.cls_loss),
                weighted_att_loss: last.map_or(f64::NAN, |r| r.weighted_att_loss),
            };
            log::info!(
                "seed {seed} {}: accuracy {:.4} rank correlation {:?}",
                mode.as_str(),
                row.accuracy,
                row.rank_correlation
            );
            rows.push(row);
        }
    }
    Ok(AbReport {
        unsupervised: arm(&rows, VqaMode::Unsupervised),
        supervised: arm(&rows, VqaMode::Supervised),
        rows,
    })
}

impl AbReport {
    /// Markdown comparison table, one line per seed plus summary lines.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from(
            "| seed | acc (unsup) | acc (sup) | rank corr (unsup) | rank corr (sup) | ref corr (unsup) | ref corr (sup) |\n|---|---|---|---|---|---|---|\n",
        );
        let seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        for seed in seeds {
            let get = |mode| self.rows.iter().find(|r| r.seed == seed && r.mode == mode);
            let (u, s) = (get(VqaMode::Unsupervised), get(VqaMode::Supervised));
            out += &format!(
                "| {seed} | {} | {} | {} | {} | {} | {} |\n",
                fmt(u.map(|r| r.accuracy)),
                fmt(s.map(|r| r.accuracy)),
                fmt(u.and_then(|r| r.rank_correlation)),
                fmt(s.and_then(|r| r.rank_correlation)),
                fmt(u.and_then(|r| r.reference_correlation)),
                fmt(s.and_then(|r| r.reference_correlation)),
            );
        }
        let (u, s) = (&self.unsupervised, &self.supervised);
        out += &format!(
            "| mean | {:.4} | {:.4} | {} | {} | {} | {} |\n",
            u.mean_accuracy,
            s.mean_accuracy,
            fmt(u.mean_rank_correlation),
            fmt(s.mean_rank_correlation),
            fmt(u.mean_reference_correlation),
            fmt(s.mean_reference_correlation)
        );
        out += &format!("| median | {:.4} | {:.4} | | | | |\n", u.median_accuracy, s.median_accuracy);
        out
    }
}
