use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffcore::softmax_slice;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub dropped: Vec<String>,
}

impl CleanReport {
    pub fn count(&self) -> usize {
        self.dropped.len()
    }
}

/// Drop samples whose reference map is identically zero.
pub fn clean(mut ds: Dataset) -> (Dataset, CleanReport) {
    let mut report = CleanReport::default();
    ds.samples.retain(|s| match &s.reference {
        Some(m) if m.iter().all(|&v| v == 0.0) => {
            report.dropped.push(s.id.clone());
            false
        }
        _ => true,
    });
    ds.sync_manifest();
    (ds, report)
}

/// Replace every reference and annotator map by its softmax.
///
/// Fails if the manifest already records normalization.
pub fn normalize_refs(mut ds: Dataset) -> Result<Dataset> {
    if ds.manifest.refs_normalized {
        return Err(Error::contract(
            "reference maps are already softmax-normalized",
        ));
    }
    let t = ds.manifest.softmax_temperature;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::contract(format!("invalid softmax temperature {t}")));
    }
    let norm = |m: &mut Vec<f64>| {
        let scaled: Vec<f64> = m.iter().map(|v| v / t).collect();
        *m = softmax_slice(&scaled);
    };
    for s in &mut ds.samples {
        if let Some(m) = &mut s.reference {
            norm(m);
        }
        s.annotators.iter_mut().for_each(norm);
    }
    ds.manifest.refs_normalized = true;
    Ok(ds)
}

/// Ingestion pipeline: `clean`, then `normalize_refs` unless already done.
pub fn prepare(ds: Dataset) -> Result<(Dataset, CleanReport)> {
    let (ds, report) = clean(ds);
    let ds = if ds.manifest.refs_normalized {
        ds
    } else {
        normalize_refs(ds)?
    };
    Ok((ds, report))
}
