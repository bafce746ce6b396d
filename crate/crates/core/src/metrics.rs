//! Attention-map rank correlation and consensus answer accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Which denominator the rank-correlation formula uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankFormula {
    /// Spearman's coefficient, `1 − 6Σd²/(n(n²−1))`, or Pearson on ranks under ties.
    #[default]
    Standard,
    /// `1 − 6Σd²/(l² − l)` with `l = √n`. Not bounded to [−1, 1].
    LiteralGrid,
}

/// Fractional ranks, 1 for the smallest value; tied values share the mean of their positions.
pub fn rank_vector(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share their mean
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn has_ties(ranks: &[f64]) -> bool {
    ranks.iter().any(|r| r.fract() != 0.0) || {
        let mut seen = vec![false; ranks.len() + 1];
        ranks.iter().any(|&r| std::mem::replace(&mut seen[r as usize], true))
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the maps is constant".into(),
        ));
    }
    // sqrt(fl(v·v)) == v in binary floating point, so identical rankings give exactly 1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(pred: &[f64], reference: &[f64]) -> Result<f64> {
    spearman_with(pred, reference, RankFormula::Standard)
}

pub fn spearman_with(pred: &[f64], reference: &[f64], formula: RankFormula) -> Result<f64> {
    ensure!(
        pred.len() == reference.len(),
        "maps differ in length: {} vs {}",
        pred.len(),
        reference.len()
    );
    ensure!(pred.len() >= 2, "rank correlation needs at least 2 cells");
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(pred) || constant(reference) {
        return Err(Error::UndefinedCorrelation(
            "one of the maps is constant".into(),
        ));
    }
    let rp = rank_vector(pred);
    let rr = rank_vector(reference);
    let n = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&rr).map(|(a, b)| (a - b) * (a - b)).sum();
    match formula {
        RankFormula::Standard => {
            if has_ties(&rp) || has_ties(&rr) {
                pearson(&rp, &rr)
            } else {
                Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
            }
        }
        RankFormula::LiteralGrid => {
            let l = n.sqrt();
            ensure!(l.fract() == 0.0, "literal grid formula needs a square map, got {n} cells");
            Ok(1.0 - 6.0 * d2 / (l * l - l))
        }
    }
}

/// Mean of per-annotator rank correlations.
pub fn mean_rank_correlation(pred: &[f64], annotators: &[Vec<f64>]) -> Result<f64> {
    mean_rank_correlation_with(pred, annotators, RankFormula::Standard)
}

pub fn mean_rank_correlation_with(pred: &[f64], annotators: &[Vec<f64>], formula: RankFormula) -> Result<f64> {
    ensure!(!annotators.is_empty(), "no annotator maps");
    let mut total = 0.0;
    for a in annotators {
        total += spearman_with(pred, a, formula)?;
    }
    Ok(total / annotators.len() as f64)
}

/// Exact match after lowercasing and trimming.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// `min(#matching votes / 3, 1)`.
pub fn consensus_accuracy(pred: &str, votes: &[String]) -> Result<f64> {
    ensure!(!votes.is_empty(), "no answer votes");
    let p = normalize_answer(pred);
    let count = votes.iter().filter(|v| normalize_answer(v) == p).count();
    Ok((count as f64 / 3.0).min(1.0))
}

/// Mean with standard error of the mean (sample standard deviation / √n).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    ensure!(!values.is_empty(), "cannot summarize an empty set");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        mean,
        sem,
        count: values.len(),
    })
}
