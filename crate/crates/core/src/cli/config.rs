use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answerer::{MapSource, VqaConfig, VqaMode, VqaTrainConfig};
use crate::attention::{HanConfig, HanTrainConfig};
use crate::data::{Dims, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::RankFormula;

/// Everything a run can be configured with. A TOML file fills these first,
/// then command-line flags override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthSpec,
    pub han: HanSection,
    pub vqa: VqaSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            synth: SynthSpec::default(),
            han: HanSection::default(),
            vqa: VqaSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HanSection {
    pub embed_dim: usize,
    pub question_dim: usize,
    pub max_question_len: usize,
    pub joint_dim: usize,
    pub refine_hidden: usize,
    pub glimpses: usize,
    pub recurrent_refine: bool,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for HanSection {
    fn default() -> Self {
        let c = HanConfig::default();
        HanSection {
            embed_dim: c.embed_dim,
            question_dim: c.question_dim,
            max_question_len: c.max_question_len,
            joint_dim: c.joint_dim,
            refine_hidden: c.refine_hidden,
            glimpses: c.glimpses,
            recurrent_refine: c.recurrent_refine,
            dropout: c.dropout,
            lr: 3e-3,
            batch_size: 64,
            steps: 600,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaSection {
    pub embed_dim: usize,
    pub question_dim: usize,
    pub max_question_len: usize,
    pub joint_dim: usize,
    pub glimpses: usize,
    pub rank: usize,
    pub branch_hidden: usize,
    pub supervised: bool,
    pub lambda: f64,
    pub literal_cls: bool,
    pub map_source: MapSource,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for VqaSection {
    fn default() -> Self {
        let c = VqaConfig::default();
        VqaSection {
            embed_dim: c.embed_dim,
            question_dim: c.question_dim,
            max_question_len: c.max_question_len,
            joint_dim: c.joint_dim,
            glimpses: c.glimpses,
            rank: c.rank,
            branch_hidden: c.branch_hidden,
            supervised: false,
            lambda: c.lambda,
            literal_cls: c.literal_cls,
            map_source: MapSource::Hlat,
            dropout: c.dropout,
            lr: 3e-3,
            batch_size: 64,
            steps: 600,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rank_formula: RankFormula,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, overlaid by `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        let h = &self.han;
        if [h.embed_dim, h.question_dim, h.max_question_len, h.joint_dim, h.refine_hidden, h.glimpses, h.batch_size]
            .contains(&0)
        {
            return bad("han dims and batch size must be positive");
        }
        let v = &self.vqa;
        if [v.embed_dim, v.question_dim, v.max_question_len, v.joint_dim, v.glimpses, v.rank, v.branch_hidden, v.batch_size]
            .contains(&0)
        {
            return bad("vqa dims and batch size must be positive");
        }
        if !(v.lambda >= 0.0 && v.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(h.lr > 0.0 && v.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        self.synth.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn han_config(&self, dims: &Dims) -> HanConfig {
        let h = &self.han;
        HanConfig {
            vocab: dims.vocab,
            embed_dim: h.embed_dim,
            question_dim: h.question_dim,
            max_question_len: h.max_question_len,
            channels: dims.channels,
            side: dims.side,
            joint_dim: h.joint_dim,
            refine_hidden: h.refine_hidden,
            glimpses: h.glimpses,
            recurrent_refine: h.recurrent_refine,
            dropout: h.dropout,
        }
    }

    pub fn han_train(&self) -> HanTrainConfig {
        HanTrainConfig {
            lr: self.han.lr,
            batch_size: self.han.batch_size,
            steps: self.han.steps,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn vqa_config(&self, dims: &Dims) -> VqaConfig {
        let v = &self.vqa;
        VqaConfig {
            vocab: dims.vocab,
            embed_dim: v.embed_dim,
            question_dim: v.question_dim,
            max_question_len: v.max_question_len,
            channels: dims.channels,
            side: dims.side,
            joint_dim: v.joint_dim,
            glimpses: v.glimpses,
            rank: v.rank,
            answers: dims.answers,
            branch_hidden: v.branch_hidden,
            mode: if v.supervised {
                VqaMode::Supervised
            } else {
                VqaMode::Unsupervised
            },
            lambda: v.lambda,
            literal_cls: v.literal_cls,
            dropout: v.dropout,
        }
    }

    pub fn vqa_train(&self) -> VqaTrainConfig {
        VqaTrainConfig {
            lr: self.vqa.lr,
            batch_size: self.vqa.batch_size,
            steps: self.vqa.steps,
            seed: self.seed,
            workers: self.workers,
            map_source: self.vqa.map_source,
        }
    }
}

/// Overwrite `slot` when a flag was given.
pub(crate) fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
