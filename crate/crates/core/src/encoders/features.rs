use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::formats;
use crate::diffcore::Tensor;
use crate::error::{ensure, Result};

/// Visual features: `channels × side²`, one column per spatial cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    side: usize,
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(channels > 0 && side > 0, "feature grid dims must be positive");
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "feature grid contains non-finite values"
        );
        let values = Tensor::matrix(channels, side * side, data)?;
        Ok(FeatureGrid { side, values })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        FeatureGrid {
            side,
            values: Tensor::zeros(&[channels, side * side]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Feature vector of one cell (a column of the matrix).
    pub fn cell(&self, j: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.values.get2(c, j)).collect()
    }

    fn set(&mut self, channel: usize, cell: usize, v: f64) {
        let n = self.cells();
        self.values.data_mut()[channel * n + cell] = v;
    }
}

pub fn load_features(path: &Path) -> Result<FeatureGrid> {
    formats::read_feature_grid(path)
}

pub fn write_features(path: &Path, grid: &FeatureGrid) -> Result<()> {
    formats::write_feature_grid(path, grid)
}

/// Class and type prototypes for the planted task.
///
/// The first `type_channels` channels carry the object type, the rest carry the
/// answer class. Each prototype has roughly unit magnitude per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub channels: usize,
    pub type_channels: usize,
    pub types: Vec<Vec<f64>>,
    pub classes: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn generate(seed: u64, channels: usize, num_types: usize, num_classes: usize) -> Result<Self> {
        ensure!(channels >= 2, "planted task needs at least 2 feature channels");
        ensure!(num_types >= 1 && num_classes >= 2, "need ≥1 object type and ≥2 classes");
        let type_channels = (channels / 4).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |lo: usize, hi: usize| -> Vec<f64> {
            let mut v = vec![0.0; channels];
            let raw: Vec<f64> = (lo..hi).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = ((hi - lo) as f64).sqrt() / norm;
            for (k, x) in (lo..hi).zip(raw) {
                v[k] = x * scale;
            }
            v
        };
        let types = (0..num_types).map(|_| draw(0, type_channels)).collect();
        let classes = (0..num_classes).map(|_| draw(type_channels, channels)).collect();
        Ok(Prototypes {
            channels,
            type_channels,
            types,
            classes,
        })
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSynthSpec {
    pub channels: usize,
    pub side: usize,
    /// Standard deviation of the Gaussian noise added to every non-signal cell.
    pub noise: f64,
    /// Objects per grid, signal object included.
    pub objects: usize,
    /// Spatial spread, in cells, of each object's type signal onto object-free
    /// cells (weight `exp(−d²/(2·spill²))`); 0 keeps objects confined to their cell.
    #[serde(default)]
    pub spill: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub cell: usize,
    pub kind: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedGrid {
    pub grid: FeatureGrid,
    pub signal: PlantedObject,
    pub distractors: Vec<PlantedObject>,
}

/// Synthesize a grid whose signal cell holds `types[kind] + classes[class]` exactly.
///
/// Distractor objects get distinct other types and random classes; every cell
/// except the signal cell receives zero-mean Gaussian noise.
pub fn synth_features(
    seed: u64,
    spec: &GridSynthSpec,
    protos: &Prototypes,
    kind: usize,
    class: usize,
) -> Result<PlantedGrid> {
    let cells = spec.side * spec.side;
    ensure!(spec.channels == protos.channels, "spec has {} channels, prototypes {}", spec.channels, protos.channels);
    ensure!(kind < protos.num_types(), "object type {kind} out of range");
    ensure!(class < protos.num_classes(), "class {class} out of range");
    ensure!(spec.objects >= 1, "at least one object per grid");
    ensure!(spec.objects <= cells, "{} objects do not fit in {cells} cells", spec.objects);
    ensure!(
        spec.objects <= protos.num_types(),
        "{} objects need as many distinct types, only {} exist",
        spec.objects,
        protos.num_types()
    );
    ensure!(spec.noise >= 0.0 && spec.noise.is_finite(), "noise must be a finite non-negative number");
    ensure!(spec.spill >= 0.0 && spec.spill.is_finite(), "spill must be a finite non-negative number");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..cells).collect();
    positions.shuffle(&mut rng);
    let mut other_kinds: Vec<usize> = (0..protos.num_types()).filter(|&k| k != kind).collect();
    other_kinds.shuffle(&mut rng);

    let signal = PlantedObject {
        cell: positions[0],
        kind,
        class,
    };
    let distractors: Vec<PlantedObject> = (1..spec.objects)
        .map(|i| PlantedObject {
            cell: positions[i],
            kind: other_kinds[i - 1],
            class: rng.gen_range(0..protos.num_classes()),
        })
        .collect();

    let mut grid = FeatureGrid::zeros(spec.channels, spec.side);
    for obj in std::iter::once(&signal).chain(&distractors) {
        for c in 0..spec.channels {
            grid.set(c, obj.cell, protos.types[obj.kind][c] + protos.classes[obj.class][c]);
        }
    }
    if spec.spill > 0.0 {
        let occupied: Vec<usize> = std::iter::once(signal.cell).chain(distractors.iter().map(|d| d.cell)).collect();
        let side = spec.side;
        for j in (0..cells).filter(|j| !occupied.contains(j)) {
            for obj in std::iter::once(&signal).chain(&distractors) {
                let dr = (j / side) as f64 - (obj.cell / side) as f64;
                let dc = (j % side) as f64 - (obj.cell % side) as f64;
                let w = (-(dr * dr + dc * dc) / (2.0 * spec.spill * spec.spill)).exp();
                for c in 0..protos.type_channels {
                    let v = grid.values.get2(c, j) + w * protos.types[obj.kind][c];
                    grid.set(c, j, v);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("valid noise");
        for j in 0..cells {
            if j == signal.cell {
                continue;
            }
            for c in 0..spec.channels {
                let v = grid.values.get2(c, j) + normal.sample(&mut rng);
                grid.set(c, j, v);
            }
        }
    }
    Ok(PlantedGrid {
        grid,
        signal,
        distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> GridSynthSpec {
        GridSynthSpec {
            channels: 32,
            side: 4,
            noise,
            objects: 3,
            spill: 0.0,
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let p = Prototypes::generate(1, 32, 4, 8).unwrap();
        let a = synth_features(9, &spec(0.3), &p, 2, 5).unwrap();
        let b = synth_features(9, &spec(0.3), &p, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_features(10, &spec(0.3), &p, 2, 5).unwrap();
        assert_ne!(a.grid, c.grid);
    }

    #[test]
    fn signal_cell_carries_class_prototype() {
        let p = Prototypes::generate(2, 32, 4, 8).unwrap();
        let planted = synth_features(3, &spec(0.5), &p, 1, 6).unwrap();
        let cell = planted.grid.cell(planted.signal.cell);
        for c in 0..32 {
            let expect = p.types[1][c] + p.classes[6][c];
            assert!((cell[c] - expect).abs() <= 1e-12);
        }
        // class block alone matches the class prototype
        for c in p.type_channels..32 {
            assert!((cell[c] - p.classes[6][c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn distractors_use_other_types() {
        let p = Prototypes::generate(2, 32, 4, 8).unwrap();
        let planted = synth_features(4, &spec(0.0), &p, 3, 0).unwrap();
        assert_eq!(planted.distractors.len(), 2);
        for d in &planted.distractors {
            assert_ne!(d.kind, 3);
            assert_ne!(d.cell, planted.signal.cell);
        }
    }

    #[test]
    fn rejects_inconsistent_spec() {
        let p = Prototypes::generate(2, 32, 2, 8).unwrap();
        assert!(synth_features(0, &spec(0.0), &p, 0, 0).is_err());
        assert!(synth_features(0, &GridSynthSpec { objects: 1, ..spec(0.0) }, &p, 5, 0).is_err());
    }
}
