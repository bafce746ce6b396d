use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, Dims, Provenance, Sample, Split, SplitCounts, MANIFEST_VERSION};
use crate::encoders::{synth_features, FeatureGrid, GridSynthSpec, Prototypes, UNK};
use crate::error::{ensure, Result};

/// Sizes and difficulty knobs of the planted task.
///
/// Each grid holds `objects` objects of distinct types. The question names one
/// type; the answer is the class of that object. The reference attention map
/// peaks on the named object's cell and falls off with grid distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub channels: usize,
    pub side: usize,
    pub num_types: usize,
    pub answers: usize,
    pub objects: usize,
    pub noise: f64,
    /// Spread of each object's type signal onto neighbouring cells; 0 disables it.
    pub spill: f64,
    /// Spatial spread of the reference map in cells; 0 gives a one-hot map.
    pub map_sigma: f64,
    /// Peak value of the raw reference map.
    pub map_amplitude: f64,
    pub annotators: usize,
    /// Per-cell Gaussian jitter of annotator maps relative to the reference.
    pub annotator_noise: f64,
    pub filler_words: usize,
    pub min_question_len: usize,
    pub max_question_len: usize,
    pub votes: usize,
    /// Probability that a vote names a random answer instead of the true one.
    pub vote_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train: 448,
            val: 64,
            channels: 32,
            side: 4,
            num_types: 4,
            answers: 8,
            objects: 3,
            noise: 0.3,
            spill: 0.0,
            map_sigma: 1.0,
            map_amplitude: 4.0,
            annotators: 3,
            annotator_noise: 0.2,
            filler_words: 8,
            min_question_len: 3,
            max_question_len: 6,
            votes: 10,
            vote_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn vocab_size(&self) -> usize {
        1 + self.num_types + self.filler_words
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.train + self.val > 0, "synthetic dataset needs at least one sample");
        ensure!(self.channels >= 2 && self.side >= 1, "grid dims too small");
        ensure!(self.answers >= 2, "need at least two answer classes");
        ensure!(self.objects >= 1 && self.objects <= self.num_types, "objects must be in 1..=num_types");
        ensure!(self.objects <= self.side * self.side, "more objects than cells");
        ensure!(
            self.min_question_len >= 1 && self.min_question_len <= self.max_question_len,
            "question length range is empty"
        );
        ensure!(
            self.filler_words > 0 || self.max_question_len == 1,
            "questions longer than one token need filler words"
        );
        ensure!(self.noise >= 0.0 && self.annotator_noise >= 0.0 && self.spill >= 0.0, "noise levels must be non-negative");
        ensure!(self.map_sigma >= 0.0 && self.map_amplitude > 0.0, "invalid map shape");
        ensure!((0.0..=1.0).contains(&self.vote_noise), "vote_noise must be a probability");
        Ok(())
    }
}

/// Raw planted map: `amplitude · exp(−d²/(2σ²))` around `signal`.
pub fn planted_map(side: usize, signal: usize, sigma: f64, amplitude: f64) -> Vec<f64> {
    let (sr, sc) = ((signal / side) as f64, (signal % side) as f64);
    (0..side * side)
        .map(|j| {
            if sigma == 0.0 {
                return if j == signal { amplitude } else { 0.0 };
            }
            let (r, c) = ((j / side) as f64, (j % side) as f64);
            let d2 = (r - sr).powi(2) + (c - sc).powi(2);
            amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Generate the planted dataset in memory; reference maps are raw (not yet normalized).
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let protos = Prototypes::generate(seed, spec.channels, spec.num_types, spec.answers)?;
    let grid_spec = GridSynthSpec {
        channels: spec.channels,
        side: spec.side,
        noise: spec.noise,
        objects: spec.objects,
        spill: spec.spill,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let jitter = Normal::new(0.0, spec.annotator_noise.max(f64::MIN_POSITIVE)).expect("valid jitter");
    let answers: Vec<String> = (0..spec.answers).map(|k| format!("answer_{k}")).collect();
    let fillers: Vec<usize> = (0..spec.filler_words).map(|i| 1 + spec.num_types + i).collect();

    let mut samples = Vec::with_capacity(spec.train + spec.val);
    let splits = std::iter::repeat(Split::Train)
        .take(spec.train)
        .chain(std::iter::repeat(Split::Val).take(spec.val));
    for (i, split) in splits.enumerate() {
        let kind = rng.gen_range(0..spec.num_types);
        let class = rng.gen_range(0..spec.answers);
        let planted = synth_features(rng.gen(), &grid_spec, &protos, kind, class)?;

        let len = rng.gen_range(spec.min_question_len..=spec.max_question_len);
        let mut tokens: Vec<usize> = (1..len).map(|_| *fillers.choose(&mut rng).unwrap()).collect();
        let at = rng.gen_range(0..=tokens.len());
        tokens.insert(at, 1 + kind);

        let reference = planted_map(spec.side, planted.signal.cell, spec.map_sigma, spec.map_amplitude);
        let annotators = (0..spec.annotators)
            .map(|_| {
                reference
                    .iter()
                    .map(|&v| {
                        if spec.annotator_noise > 0.0 {
                            v + jitter.sample(&mut rng)
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();
        let votes = (0..spec.votes)
            .map(|_| {
                let k = if rng.gen::<f64>() < spec.vote_noise {
                    rng.gen_range(0..spec.answers)
                } else {
                    class
                };
                answers[k].clone()
            })
            .collect();
        samples.push(Sample {
            id: format!("{}-{i:05}", split.as_str()),
            split,
            features: planted.grid,
            tokens,
            answer: Some(class),
            votes,
            answer_type: Some("other".into()),
            reference: Some(reference),
            annotators,
            hlat: None,
        });
    }

    let mut vocab = vec!["<unk>".to_string()];
    vocab.extend((0..spec.num_types).map(|t| format!("type{t}")));
    vocab.extend((0..spec.filler_words).map(|f| format!("word{f}")));
    debug_assert_eq!(vocab[UNK], "<unk>");

    let mut ds = Dataset {
        manifest: DatasetManifest {
            format_version: MANIFEST_VERSION,
            dims: Dims {
                channels: spec.channels,
                side: spec.side,
                vocab: spec.vocab_size(),
                answers: spec.answers,
            },
            counts: SplitCounts::default(),
            refs_normalized: false,
            softmax_temperature: 1.0,
            answers,
            provenance: Provenance {
                synthetic_seed: Some(seed),
                generator: Some(spec.clone()),
                prototypes: Some(protos),
                hlat: None,
            },
            samples: Vec::new(),
        },
        vocab,
        samples,
    };
    ds.sync_manifest();
    Ok(ds)
}

/// Generate and write the planted dataset to `dir`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<Dataset> {
    let mut ds = generate(spec, seed)?;
    ds.save(dir)?;
    Ok(ds)
}

/// Oracle reader: find the cell whose type block best matches the asked type,
/// then return the class prototype that best matches that cell.
pub fn bayes_reader(protos: &Prototypes, grid: &FeatureGrid, tokens: &[usize]) -> Option<usize> {
    let kind = tokens.iter().find(|&&t| t >= 1 && t <= protos.num_types())? - 1;
    let dot = |a: &[f64], b: &[f64], lo: usize, hi: usize| -> f64 { (lo..hi).map(|c| a[c] * b[c]).sum() };
    let tc = protos.type_channels;
    let m = protos.channels;
    let cell = (0..grid.cells())
        .map(|j| (j, grid.cell(j)))
        .max_by(|a, b| {
            dot(&a.1, &protos.types[kind], 0, tc).total_cmp(&dot(&b.1, &protos.types[kind], 0, tc))
        })?
        .1;
    let distance = |k: usize| -> f64 {
        let p = &protos.classes[k];
        (tc..m).map(|c| (cell[c] - p[c]).powi(2)).sum()
    };
    (0..protos.num_classes()).min_by(|&a, &b| distance(a).total_cmp(&distance(b)))
}
