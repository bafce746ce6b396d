//! Human attention network: bilinear fusion of question and grid, multi-glimpse
//! scoring, recurrent refinement into one attention map, and the MSE objective.

pub(crate) mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    load_checkpoint, save_checkpoint, softmax_slice, CheckpointHeader, Graph, ParamId,
    ParameterStore, Tensor, Var,
};
use crate::encoders::{FeatureGrid, GruCell, QuestionEncoder};
use crate::error::{ensure, Error, Result};

pub use train::{train_han, validation_rank_correlation, HanTrainConfig, TrainRecord};

/// Tolerance on the unit sum of an attention map.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A probability distribution over grid cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionMap(Vec<f64>);

impl AttentionMap {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), "empty attention map");
        ensure!(
            values.iter().all(|&v| v.is_finite() && v >= 0.0),
            "attention map has negative or non-finite entries"
        );
        let total: f64 = values.iter().sum();
        ensure!(
            (total - 1.0).abs() <= SIMPLEX_TOLERANCE,
            "attention map sums to {total}, not 1"
        );
        Ok(AttentionMap(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self.0.iter().zip(other).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

pub fn is_simplex(values: &[f64], tol: f64) -> bool {
    values.iter().all(|&v| v >= 0.0 && v.is_finite())
        && (values.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// `G` pre-normalization glimpse score maps, stored as a `G × cells` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseStack(Tensor);

impl GlimpseStack {
    pub fn new(scores: Tensor) -> Result<Self> {
        ensure!(scores.rank() == 2, "glimpse stack must be a matrix");
        ensure!(scores.is_finite(), "glimpse scores must be finite");
        Ok(GlimpseStack(scores))
    }

    pub fn from_maps(maps: &[Vec<f64>]) -> Result<Self> {
        ensure!(!maps.is_empty(), "glimpse stack needs at least one map");
        let n = maps[0].len();
        ensure!(maps.iter().all(|m| m.len() == n), "glimpse maps differ in length");
        Self::new(Tensor::matrix(maps.len(), n, maps.concat())?)
    }

    pub fn glimpses(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn map(&self, g: usize) -> &[f64] {
        self.0.row(g)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Fusion plus glimpse generation, shared by the attention network and the answerer.
///
/// `X = tanh(U q + b_u)·1ᵀ ∘ tanh(V F + b_v·1ᵀ)`, then `α = K X + b_k·1ᵀ` with one
/// kernel row per glimpse.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStage {
    pub question_dim: usize,
    pub channels: usize,
    pub joint_dim: usize,
    pub glimpses: usize,
    pub u: ParamId,
    pub u_bias: ParamId,
    pub v: ParamId,
    pub v_bias: ParamId,
    pub kernels: ParamId,
    pub kernel_bias: ParamId,
}

impl AttentionStage {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        question_dim: usize,
        channels: usize,
        joint_dim: usize,
        glimpses: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(glimpses >= 1, "at least one glimpse is required");
        Ok(AttentionStage {
            question_dim,
            channels,
            joint_dim,
            glimpses,
            u: store.insert_glorot(format!("{prefix}.u"), joint_dim, question_dim, rng)?,
            u_bias: store.insert_zeros(format!("{prefix}.u_bias"), &[joint_dim])?,
            v: store.insert_glorot(format!("{prefix}.v"), joint_dim, channels, rng)?,
            v_bias: store.insert_zeros(format!("{prefix}.v_bias"), &[joint_dim])?,
            kernels: store.insert_glorot(format!("{prefix}.kernels"), glimpses, joint_dim, rng)?,
            kernel_bias: store.insert_zeros(format!("{prefix}.kernel_bias"), &[glimpses])?,
        })
    }

    pub fn bind(
        store: &ParameterStore,
        prefix: &str,
        question_dim: usize,
        channels: usize,
        joint_dim: usize,
        glimpses: usize,
    ) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store.id(&format!("{prefix}.{name}"))?;
            ensure!(
                store.value(id).shape() == shape,
                "{prefix}.{name} has shape {:?}, expected {shape:?}",
                store.value(id).shape()
            );
            Ok(id)
        };
        Ok(AttentionStage {
            question_dim,
            channels,
            joint_dim,
            glimpses,
            u: get("u", &[joint_dim, question_dim])?,
            u_bias: get("u_bias", &[joint_dim])?,
            v: get("v", &[joint_dim, channels])?,
            v_bias: get("v_bias", &[joint_dim])?,
            kernels: get("kernels", &[glimpses, joint_dim])?,
            kernel_bias: get("kernel_bias", &[glimpses])?,
        })
    }

    /// Fused grid `X` (`joint_dim × cells`), optionally multiplied by a dropout mask.
    pub fn fuse(&self, g: &mut Graph, question: Var, features: Var, mask: Option<&Tensor>) -> Result<Var> {
        ensure!(
            g.shape(question) == [self.question_dim],
            "question vector has shape {:?}, expected [{}]",
            g.shape(question),
            self.question_dim
        );
        ensure!(
            g.shape(features).len() == 2 && g.shape(features)[0] == self.channels,
            "feature grid has shape {:?}, expected {} channels",
            g.shape(features),
            self.channels
        );
        let u = g.param(self.u);
        let ub = g.param(self.u_bias);
        let v = g.param(self.v);
        let vb = g.param(self.v_bias);
        let uq = g.matmul(u, question)?;
        let uq = g.add(uq, ub)?;
        let uq = g.tanh(uq);
        let vf = g.matmul(v, features)?;
        let vf = g.add_column(vf, vb)?;
        let vf = g.tanh(vf);
        let x = g.mul_column(vf, uq)?;
        match mask {
            Some(m) => {
                let m = g.constant(m.clone());
                g.mul(x, m)
            }
            None => Ok(x),
        }
    }

    /// Size-1 convolution over cells: one linear score per glimpse and cell.
    pub fn glimpses(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        ensure!(
            g.shape(fused).len() == 2 && g.shape(fused)[0] == self.joint_dim,
            "fused grid has shape {:?}, expected {} rows",
            g.shape(fused),
            self.joint_dim
        );
        let k = g.param(self.kernels);
        let kb = g.param(self.kernel_bias);
        let a = g.matmul(k, fused)?;
        g.add_column(a, kb)
    }
}

/// Recurrent refinement head: encode glimpse maps in order, affine map to cells, softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineHead {
    pub cell: GruCell,
    pub w: ParamId,
    pub b: ParamId,
}

impl RefineHead {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        cells: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cell = GruCell::register(store, &format!("{prefix}.gru"), cells, hidden, rng)?;
        let w = store.insert_glorot(format!("{prefix}.w"), cells, hidden, rng)?;
        let b = store.insert_zeros(format!("{prefix}.b"), &[cells])?;
        Ok(RefineHead { cell, w, b })
    }

    pub fn bind(store: &ParameterStore, prefix: &str, cells: usize, hidden: usize) -> Result<Self> {
        let cell = GruCell::bind(store, &format!("{prefix}.gru"), cells, hidden)?;
        let w = store.id(&format!("{prefix}.w"))?;
        let b = store.id(&format!("{prefix}.b"))?;
        ensure!(
            store.value(w).shape() == [cells, hidden] && store.value(b).shape() == [cells],
            "{prefix} affine map has the wrong shape"
        );
        Ok(RefineHead { cell, w, b })
    }
}

/// `softmax(W · h_G + b)` where `h_G` is the last state after feeding glimpses 1..G.
pub fn refine(g: &mut Graph, stack: Var, head: &RefineHead) -> Result<Var> {
    let shape = g.shape(stack).to_vec();
    ensure!(shape.len() == 2 && shape[0] >= 1, "glimpse stack has shape {shape:?}");
    let maps = (0..shape[0])
        .map(|i| g.row(stack, i))
        .collect::<Result<Vec<_>>>()?;
    let h = head.cell.encode(g, &maps)?;
    let w = g.param(head.w);
    let b = g.param(head.b);
    let logits = g.matmul(w, h)?;
    let logits = g.add(logits, b)?;
    Ok(g.softmax(logits))
}

/// Softmax of the elementwise mean of the glimpse maps.
pub fn mean_refine(g: &mut Graph, stack: Var) -> Result<Var> {
    let shape = g.shape(stack).to_vec();
    ensure!(shape.len() == 2 && shape[0] >= 1, "glimpse stack has shape {shape:?}");
    let avg = g.constant(Tensor::full(&[1, shape[0]], 1.0 / shape[0] as f64));
    let mean = g.matmul(avg, stack)?;
    let mean = g.reshape(mean, &[shape[1]])?;
    Ok(g.softmax(mean))
}

/// Mean over cells of squared differences.
pub fn mse_loss(g: &mut Graph, pred: Var, reference: Var) -> Result<Var> {
    let d = g.sub(pred, reference)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Plain-value form of [`mse_loss`].
pub fn mse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    ensure!(
        pred.len() == reference.len() && !pred.is_empty(),
        "map lengths differ: {} vs {}",
        pred.len(),
        reference.len()
    );
    Ok(pred.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Plain-value forms of [`refine`] and [`mean_refine`] for a given stack.
pub fn refine_stack(store: &ParameterStore, head: &RefineHead, stack: &GlimpseStack) -> Result<AttentionMap> {
    let mut g = Graph::new(store);
    let s = g.constant(stack.tensor().clone());
    let m = refine(&mut g, s, head)?;
    AttentionMap::new(g.value(m).data().to_vec())
}

pub fn mean_refine_stack(stack: &GlimpseStack) -> Result<AttentionMap> {
    let n = stack.glimpses() as f64;
    let mean: Vec<f64> = (0..stack.cells())
        .map(|j| (0..stack.glimpses()).map(|gi| stack.map(gi)[j]).sum::<f64>() / n)
        .collect();
    AttentionMap::new(softmax_slice(&mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HanConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub question_dim: usize,
    pub max_question_len: usize,
    pub channels: usize,
    pub side: usize,
    pub joint_dim: usize,
    pub refine_hidden: usize,
    pub glimpses: usize,
    /// `false` swaps the recurrent refinement for the glimpse mean.
    pub recurrent_refine: bool,
    /// Inverted-dropout rate after fusion during training; 0 disables it.
    pub dropout: f64,
}

impl Default for HanConfig {
    fn default() -> Self {
        HanConfig {
            vocab: 32,
            embed_dim: 16,
            question_dim: 16,
            max_question_len: 16,
            channels: 32,
            side: 4,
            joint_dim: 24,
            refine_hidden: 16,
            glimpses: 3,
            recurrent_refine: true,
            dropout: 0.0,
        }
    }
}

impl HanConfig {
    pub fn cells(&self) -> usize {
        self.side * self.side
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
            ("refine_hidden", self.refine_hidden),
            ("glimpses", self.glimpses),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Trained or freshly initialized attention network.
#[derive(Clone, Debug)]
pub struct HanParams {
    pub config: HanConfig,
    pub store: ParameterStore,
    pub question: QuestionEncoder,
    pub stage: AttentionStage,
    pub head: Option<RefineHead>,
}

/// Output of one forward pass.
pub struct HanForward {
    pub glimpses: Var,
    pub map: Var,
}

impl HanParams {
    pub fn init<R: Rng>(config: HanConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let question = QuestionEncoder::register(
            &mut store,
            "han.question",
            config.vocab,
            config.embed_dim,
            config.question_dim,
            config.max_question_len,
            rng,
        )?;
        let stage = AttentionStage::register(
            &mut store,
            "han.attention",
            config.question_dim,
            config.channels,
            config.joint_dim,
            config.glimpses,
            rng,
        )?;
        let head = if config.recurrent_refine {
            Some(RefineHead::register(
                &mut store,
                "han.refine",
                config.cells(),
                config.refine_hidden,
                rng,
            )?)
        } else {
            None
        };
        Ok(HanParams {
            config,
            store,
            question,
            stage,
            head,
        })
    }

    pub fn from_store(config: HanConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let question = QuestionEncoder::bind(
            &store,
            "han.question",
            config.vocab,
            config.embed_dim,
            config.question_dim,
            config.max_question_len,
        )?;
        let stage = AttentionStage::bind(
            &store,
            "han.attention",
            config.question_dim,
            config.channels,
            config.joint_dim,
            config.glimpses,
        )?;
        let head = if config.recurrent_refine {
            Some(RefineHead::bind(&store, "han.refine", config.cells(), config.refine_hidden)?)
        } else {
            None
        };
        Ok(HanParams {
            config,
            store,
            question,
            stage,
            head,
        })
    }

    pub fn check_input(&self, features: &FeatureGrid) -> Result<()> {
        ensure!(
            features.channels() == self.config.channels && features.side() == self.config.side,
            "feature grid is {}x{}², network expects {}x{}²",
            features.channels(),
            features.side(),
            self.config.channels,
            self.config.side
        );
        Ok(())
    }

    /// Record the full forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        features: &FeatureGrid,
        tokens: &[usize],
        mask: Option<&Tensor>,
    ) -> Result<HanForward> {
        self.check_input(features)?;
        let q = self.question.encode(g, tokens)?;
        let f = g.constant(features.tensor().clone());
        let x = self.stage.fuse(g, q, f, mask)?;
        let glimpses = self.stage.glimpses(g, x)?;
        let map = match &self.head {
            Some(head) => refine(g, glimpses, head)?,
            None => mean_refine(g, glimpses)?,
        };
        Ok(HanForward { glimpses, map })
    }

    /// MSE between the predicted map and `reference`, recorded on `g`.
    pub fn loss(
        &self,
        g: &mut Graph,
        features: &FeatureGrid,
        tokens: &[usize],
        reference: &[f64],
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        ensure!(
            reference.len() == self.config.cells(),
            "reference map has {} cells, grid has {}",
            reference.len(),
            self.config.cells()
        );
        let out = self.forward(g, features, tokens, mask)?;
        let r = g.constant(Tensor::vector(reference.to_vec()));
        mse_loss(g, out.map, r)
    }

    pub fn predict(&self, features: &FeatureGrid, tokens: &[usize]) -> Result<AttentionMap> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, features, tokens, None)?;
        AttentionMap::new(g.value(out.map).data().to_vec())
    }

    pub fn glimpse_stack(&self, features: &FeatureGrid, tokens: &[usize]) -> Result<GlimpseStack> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, features, tokens, None)?;
        GlimpseStack::new(g.value(out.glimpses).clone())
    }

    pub fn header(&self, seed: u64, step: u64) -> Result<CheckpointHeader> {
        Ok(CheckpointHeader::new(
            "han",
            serde_json::to_value(&self.config)?,
            seed,
            step,
        ))
    }

    pub fn save(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        save_checkpoint(path, &self.store, &self.header(seed, step)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (store, header) = load_checkpoint(path)?;
        if header.model != "han" {
            return Err(Error::format(path, 20, format!("checkpoint holds a {:?} model, not han", header.model)));
        }
        let config: HanConfig = serde_json::from_value(header.hyperparameters.clone())?;
        Ok((Self::from_store(config, store)?, header))
    }
}
