//! Low-rank bilinear answerer, with an optional attention-supervision branch.
//!
//! The attention stage is the same fusion and glimpse stack as the attention network.
//! Glimpse scores are softmax-normalized once, inside [`attend_pool`]; the supervision
//! branch sees the raw scores.

mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mse_loss, refine, AttentionMap, AttentionStage, GlimpseStack, RefineHead};
use crate::diffcore::{
    load_checkpoint, save_checkpoint, softmax, CheckpointHeader, Graph, ParamId,
    ParameterStore, Tensor, Var,
};
use crate::encoders::{FeatureGrid, QuestionEncoder};
use crate::error::{ensure, Error, Result};

pub use train::{
    evaluate_vqa, train_vqa, MapSource, Prediction, SampleScore, VqaEvaluation, VqaTrainConfig,
    VqaTrainRecord,
};

/// Floor applied to a probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VqaMode {
    #[default]
    Unsupervised,
    Supervised,
}

impl VqaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VqaMode::Unsupervised => "unsupervised",
            VqaMode::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(VqaMode::Unsupervised),
            "supervised" => Ok(VqaMode::Supervised),
            other => Err(Error::Config(format!("unknown answerer mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub question_dim: usize,
    pub max_question_len: usize,
    pub channels: usize,
    pub side: usize,
    pub joint_dim: usize,
    pub glimpses: usize,
    /// Rank of the classifier's bilinear fusion.
    pub rank: usize,
    pub answers: usize,
    /// Hidden size of the supervision branch's recurrent cell.
    pub branch_hidden: usize,
    pub mode: VqaMode,
    pub lambda: f64,
    /// Average −log p over all candidates instead of the labeled answer.
    pub literal_cls: bool,
    pub dropout: f64,
}

impl Default for VqaConfig {
    fn default() -> Self {
        VqaConfig {
            vocab: 32,
            embed_dim: 16,
            question_dim: 16,
            max_question_len: 16,
            channels: 32,
            side: 4,
            joint_dim: 24,
            glimpses: 1,
            rank: 24,
            answers: 8,
            branch_hidden: 16,
            mode: VqaMode::Unsupervised,
            lambda: 1.0,
            literal_cls: false,
            dropout: 0.0,
        }
    }
}

impl VqaConfig {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Length of the attentive feature.
    pub fn pooled_dim(&self) -> usize {
        self.channels * self.glimpses
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("embed_dim", self.embed_dim),
            ("question_dim", self.question_dim),
            ("max_question_len", self.max_question_len),
            ("channels", self.channels),
            ("side", self.side),
            ("joint_dim", self.joint_dim),
            ("glimpses", self.glimpses),
            ("rank", self.rank),
            ("answers", self.answers),
            ("branch_hidden", self.branch_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be a finite non-negative number", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VqaParams {
    pub config: VqaConfig,
    pub store: ParameterStore,
    pub question: QuestionEncoder,
    pub stage: AttentionStage,
    /// `P`, `K × r`.
    pub classifier: ParamId,
    /// `U′`, `r × n`.
    pub question_proj: ParamId,
    /// `V′`, `r × s`.
    pub feature_proj: ParamId,
    /// Present only in supervised mode.
    pub branch: Option<RefineHead>,
}

/// Graph nodes of one forward pass.
pub struct VqaForward {
    pub glimpses: Var,
    pub pooled: Var,
    pub logits: Var,
    pub dist: Var,
}

/// Loss nodes; `att` is the unweighted supervision loss, absent when not computed.
pub struct LossParts {
    pub cls: Var,
    pub att: Option<Var>,
    pub total: Var,
}

impl VqaParams {
    /// Main parameters draw from `rng`; the supervision branch from `branch_rng`, so
    /// both modes share identical main weights under one seed.
    pub fn init<R: Rng, B: Rng>(config: VqaConfig, rng: &mut R, branch_rng: &mut B) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let question = QuestionEncoder::register(
            &mut store,
            "vqa.question",
            config.vocab,
            config.embed_dim,
            config.question_dim,
            config.max_question_len,
            rng,
        )?;
        let stage = AttentionStage::register(
            &mut store,
            "vqa.attention",
            config.question_dim,
            config.channels,
            config.joint_dim,
            config.glimpses,
            rng,
        )?;
        let classifier = store.insert_glorot("vqa.classifier", config.answers, config.rank, rng)?;
        let question_proj = store.insert_glorot("vqa.question_proj", config.rank, config.question_dim, rng)?;
        let feature_proj = store.insert_glorot("vqa.feature_proj", config.rank, config.pooled_dim(), rng)?;
        let branch = match config.mode {
            VqaMode::Supervised => Some(RefineHead::register(
                &mut store,
                "vqa.branch",
                config.cells(),
                config.branch_hidden,
                branch_rng,
            )?),
            VqaMode::Unsupervised => None,
        };
        Ok(VqaParams {
            config,
            store,
            question,
            stage,
            classifier,
            question_proj,
            feature_proj,
            branch,
        })
    }

    pub fn from_store(config: VqaConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let question = QuestionEncoder::bind(
            &store,
            "vqa.question",
            config.vocab,
            config.embed_dim,
            config.question_dim,
            config.max_question_len,
        )?;
        let stage = AttentionStage::bind(
            &store,
            "vqa.attention",
            config.question_dim,
            config.channels,
            config.joint_dim,
            config.glimpses,
        )?;
        let get = |name: &str, shape: [usize; 2]| -> Result<ParamId> {
            let id = store.id(name)?;
            ensure!(
                store.value(id).shape() == shape,
                "{name} has shape {:?}, expected {shape:?}",
                store.value(id).shape()
            );
            Ok(id)
        };
        let classifier = get("vqa.classifier", [config.answers, config.rank])?;
        let question_proj = get("vqa.question_proj", [config.rank, config.question_dim])?;
        let feature_proj = get("vqa.feature_proj", [config.rank, config.pooled_dim()])?;
        let branch = match config.mode {
            VqaMode::Supervised => Some(RefineHead::bind(&store, "vqa.branch", config.cells(), config.branch_hidden)?),
            VqaMode::Unsupervised => None,
        };
        Ok(VqaParams {
            config,
            store,
            question,
            stage,
            classifier,
            question_proj,
            feature_proj,
            branch,
        })
    }

    pub fn check_input(&self, features: &FeatureGrid) -> Result<()> {
        ensure!(
            features.channels() == self.config.channels && features.side() == self.config.side,
            "feature grid is {}x{}², model expects {}x{}²",
            features.channels(),
            features.side(),
            self.config.channels,
            self.config.side
        );
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        features: &FeatureGrid,
        tokens: &[usize],
        mask: Option<&Tensor>,
    ) -> Result<VqaForward> {
        self.check_input(features)?;
        let q = self.question.encode(g, tokens)?;
        let f = g.constant(features.tensor().clone());
        let x = self.stage.fuse(g, q, f, mask)?;
        let glimpses = self.stage.glimpses(g, x)?;
        let pooled = attend_pool(g, features, glimpses)?;
        let logits = self.classify(g, q, pooled)?;
        let dist = g.softmax(logits);
        Ok(VqaForward {
            glimpses,
            pooled,
            logits,
            dist,
        })
    }

    /// `P (tanh(U′q) ∘ tanh(V′F̂))`, before the softmax.
    pub fn classify(&self, g: &mut Graph, question: Var, pooled: Var) -> Result<Var> {
        let up = g.param(self.question_proj);
        let vp = g.param(self.feature_proj);
        let p = g.param(self.classifier);
        let a = g.matmul(up, question)?;
        let a = g.tanh(a);
        let b = g.matmul(vp, pooled)?;
        let b = g.tanh(b);
        let joint = g.mul(a, b)?;
        g.matmul(p, joint)
    }

    /// Classification loss plus `λ ·` supervision loss when supervised and `λ > 0`.
    ///
    /// With `λ = 0` the branch is never evaluated, so the loss and its gradients
    /// equal the unsupervised model's exactly.
    pub fn total_loss(
        &self,
        g: &mut Graph,
        features: &FeatureGrid,
        tokens: &[usize],
        truth: usize,
        map: Option<&[f64]>,
        mask: Option<&Tensor>,
    ) -> Result<LossParts> {
        let fwd = self.forward(g, features, tokens, mask)?;
        let cls = cls_loss(g, fwd.logits, truth, self.config.literal_cls)?;
        let head = match (self.config.mode, &self.branch) {
            (VqaMode::Supervised, Some(head)) => head,
            (VqaMode::Supervised, None) => return Err(Error::contract("supervised model has no branch parameters")),
            (VqaMode::Unsupervised, _) => {
                return Ok(LossParts {
                    cls,
                    att: None,
                    total: cls,
                })
            }
        };
        let map = map.ok_or_else(|| Error::contract("supervised training needs an attention map for every sample"))?;
        if self.config.lambda == 0.0 {
            return Ok(LossParts {
                cls,
                att: None,
                total: cls,
            });
        }
        let att = att_sup_loss(g, fwd.glimpses, map, head)?;
        let weighted = g.scale(att, self.config.lambda);
        let total = g.add(cls, weighted)?;
        Ok(LossParts {
            cls,
            att: Some(att),
            total,
        })
    }

    pub fn predict(&self, features: &FeatureGrid, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, features, tokens, None)?;
        Ok(g.value(fwd.dist).data().to_vec())
    }

    pub fn glimpse_stack(&self, features: &FeatureGrid, tokens: &[usize]) -> Result<GlimpseStack> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, features, tokens, None)?;
        GlimpseStack::new(g.value(fwd.glimpses).clone())
    }

    /// The model's own attention: the mean over glimpses of each softmax-normalized glimpse.
    pub fn attention_map(&self, features: &FeatureGrid, tokens: &[usize]) -> Result<AttentionMap> {
        attention_of(&self.glimpse_stack(features, tokens)?)
    }

    pub fn header(&self, seed: u64, step: u64) -> Result<CheckpointHeader> {
        let mut h = CheckpointHeader::new("vqa", serde_json::to_value(&self.config)?, seed, step);
        h.mode = Some(self.config.mode.as_str().to_string());
        Ok(h)
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        save_checkpoint(path, &self.store, &self.header(seed, step)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (store, header) = load_checkpoint(path)?;
        if header.model != "vqa" {
            return Err(Error::format(path, 20, format!("checkpoint holds a {:?} model, not vqa", header.model)));
        }
        let config: VqaConfig = serde_json::from_value(header.hyperparameters.clone())?;
        if header.mode.as_deref() != Some(config.mode.as_str()) {
            return Err(Error::format(path, 20, "checkpoint mode tag disagrees with its hyperparameters"));
        }
        Ok((Self::from_store(config, store)?, header))
    }
}

/// Softmax each glimpse over cells, pool the cell features with those weights, and
/// concatenate the `G` pooled vectors (glimpse-major).
pub fn attend_pool(g: &mut Graph, features: &FeatureGrid, stack: Var) -> Result<Var> {
    let shape = g.shape(stack).to_vec();
    ensure!(
        shape.len() == 2 && shape[1] == features.cells(),
        "glimpse stack has shape {shape:?}, grid has {} cells",
        features.cells()
    );
    let weights = g.softmax(stack);
    let ft = g.constant(features.tensor().transpose());
    let pooled = g.matmul(weights, ft)?;
    g.reshape(pooled, &[shape[0] * features.channels()])
}

/// Plain-value form of [`attend_pool`].
pub fn attend_pool_values(features: &FeatureGrid, stack: &GlimpseStack) -> Result<Vec<f64>> {
    let store = ParameterStore::new();
    let mut g = Graph::new(&store);
    let s = g.constant(stack.tensor().clone());
    let v = attend_pool(&mut g, features, s)?;
    Ok(g.value(v).data().to_vec())
}

/// Cross-entropy of `softmax(logits)` against `truth`, or with `literal` the mean
/// of `−log p` over every candidate.
pub fn cls_loss(g: &mut Graph, logits: Var, truth: usize, literal: bool) -> Result<Var> {
    let k = g.shape(logits).iter().product::<usize>();
    ensure!(truth < k, "answer index {truth} outside {k} candidates");
    let logp = g.log_softmax(logits)?;
    if literal {
        let m = g.mean(logp);
        Ok(g.scale(m, -1.0))
    } else {
        let p = g.pick(logp, truth)?;
        Ok(g.scale(p, -1.0))
    }
}

/// `−log dist[truth]` on a plain distribution, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(dist: &[f64], truth: usize) -> Result<f64> {
    ensure!(truth < dist.len(), "answer index {truth} outside {} candidates", dist.len());
    Ok(-dist[truth].max(PROB_FLOOR).ln())
}

/// Index of the largest probability; the lowest index wins ties.
pub fn answer(dist: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = k;
        }
    }
    best
}

/// MSE between the supervision branch's refined map and `reference`.
pub fn att_sup_loss(g: &mut Graph, stack: Var, reference: &[f64], head: &RefineHead) -> Result<Var> {
    let cells = g.shape(stack).get(1).copied().unwrap_or(0);
    ensure!(
        reference.len() == cells,
        "reference map has {} cells, glimpses have {cells}",
        reference.len()
    );
    let out = refine(g, stack, head)?;
    let r = g.constant(Tensor::vector(reference.to_vec()));
    mse_loss(g, out, r)
}

/// Mean of the softmax-normalized glimpse maps.
pub fn attention_of(stack: &GlimpseStack) -> Result<AttentionMap> {
    let w = softmax(stack.tensor());
    let n = stack.glimpses() as f64;
    let mean: Vec<f64> = (0..stack.cells())
        .map(|j| (0..stack.glimpses()).map(|gi| w.get2(gi, j)).sum::<f64>() / n)
        .collect();
    let total: f64 = mean.iter().sum();
    AttentionMap::new(mean.iter().map(|v| v / total).collect())
}
