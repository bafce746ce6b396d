use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::attention::{is_simplex, HanParams, SIMPLEX_TOLERANCE};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlatProvenance {
    /// Content hash of the attention-network checkpoint that produced the maps.
    pub checkpoint_id: String,
    pub count: usize,
}

/// Run a trained attention network over every sample and attach its map as `hlat`.
pub fn generate_hlat(ds: &mut Dataset, han: &HanParams, checkpoint_id: &str, workers: usize) -> Result<HlatProvenance> {
    let d = ds.manifest.dims;
    ensure!(
        han.config.channels == d.channels && han.config.side == d.side,
        "network expects {}x{}² grids, dataset has {}x{}²",
        han.config.channels,
        han.config.side,
        d.channels,
        d.side
    );
    ensure!(
        han.config.vocab >= d.vocab,
        "network vocabulary {} smaller than dataset vocabulary {}",
        han.config.vocab,
        d.vocab
    );
    let run = |s: &crate::data::Sample| han.predict(&s.features, &s.tokens).map(|m| m.into_values());
    let maps: Vec<Vec<f64>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| crate::Error::Config(e.to_string()))?;
        pool.install(|| ds.samples.par_iter().map(run).collect::<Result<_>>())?
    } else {
        ds.samples.iter().map(run).collect::<Result<_>>()?
    };
    for (s, m) in ds.samples.iter_mut().zip(maps) {
        ensure!(is_simplex(&m, SIMPLEX_TOLERANCE), "map for {} is off the simplex", s.id);
        s.hlat = Some(m);
    }
    let prov = HlatProvenance {
        checkpoint_id: checkpoint_id.to_string(),
        count: ds.samples.len(),
    };
    ds.manifest.provenance.hlat = Some(prov.clone());
    ds.sync_manifest();
    Ok(prov)
}
