//! Finite-difference sweep over every trainable model at small dims.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::answerer::{VqaConfig, VqaMode, VqaParams};
use crate::attention::{HanConfig, HanParams};
use crate::data::{generate, prepare, Split, SynthSpec};
use crate::diffcore::gradcheck::{analytic_gradients, compare_gradients, GradCheckReport, DEFAULT_STEP};
use crate::diffcore::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};

/// Dimensions of the sweep: feature channels, grid side, question state,
/// joint space, glimpses, refinement hidden size and answer count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyDims {
    pub channels: usize,
    pub side: usize,
    pub question_dim: usize,
    pub joint_dim: usize,
    pub glimpses: usize,
    pub hidden: usize,
    pub answers: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            channels: 32,
            side: 4,
            question_dim: 16,
            joint_dim: 24,
            glimpses: 3,
            hidden: 16,
            answers: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Perturb one analytic gradient before comparing; the sweep must then fail.
    pub corrupt: bool,
}

fn check<F>(label: &str, store: &mut ParameterStore, loss: F, corrupt: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut analytic = analytic_gradients(store, &loss)?;
    if corrupt {
        let id = store
            .ids()
            .find(|&id| analytic.get(id).is_some())
            .ok_or_else(|| Error::contract("no parameter received a gradient"))?;
        let t = analytic.get_mut(id).expect("gradient present");
        t.data_mut()[0] = 2.0 * t.data()[0] + 1e-2;
    }
    compare_gradients(label, store, &analytic, loss, DEFAULT_STEP)
}

/// Run the sweep for the attention network (with and without recurrent
/// refinement) and the answerer in both modes. One report per model.
pub fn gradient_suite(dims: ToyDims, opts: SuiteOptions) -> Result<Vec<GradCheckReport>> {
    let spec = SynthSpec {
        train: 1,
        val: 0,
        channels: dims.channels,
        side: dims.side,
        answers: dims.answers,
        ..SynthSpec::default()
    };
    let (ds, _) = prepare(generate(&spec, opts.seed)?)?;
    let sample = ds.split(Split::Train).remove(0);
    let reference = sample.reference.clone().expect("planted sample has a reference");
    let truth = sample.answer.expect("planted sample has an answer");
    let rng = |k: u64| ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(31).wrapping_add(k));

    let mut reports = Vec::new();
    for (label, recurrent) in [("han", true), ("han-mean-refine", false)] {
        let config = HanConfig {
            vocab: ds.manifest.dims.vocab,
            embed_dim: 8,
            question_dim: dims.question_dim,
            max_question_len: spec.max_question_len,
            channels: dims.channels,
            side: dims.side,
            joint_dim: dims.joint_dim,
            refine_hidden: dims.hidden,
            glimpses: dims.glimpses,
            recurrent_refine: recurrent,
            dropout: 0.0,
        };
        let mut han = HanParams::init(config, &mut rng(1))?;
        let net = han.clone();
        reports.push(check(
            label,
            &mut han.store,
            |g| net.loss(g, &sample.features, &sample.tokens, &reference, None),
            opts.corrupt,
        )?);
    }
    for (label, mode) in [("vqa-unsupervised", VqaMode::Unsupervised), ("vqa-supervised", VqaMode::Supervised)] {
        let config = VqaConfig {
            vocab: ds.manifest.dims.vocab,
            embed_dim: 8,
            question_dim: dims.question_dim,
            max_question_len: spec.max_question_len,
            channels: dims.channels,
            side: dims.side,
            joint_dim: dims.joint_dim,
            glimpses: dims.glimpses,
            rank: dims.hidden,
            answers: dims.answers,
            branch_hidden: dims.hidden,
            mode,
            lambda: 1.0,
            literal_cls: false,
            dropout: 0.0,
        };
        let mut vqa = VqaParams::init(config, &mut rng(2), &mut rng(3))?;
        let net = vqa.clone();
        let map = (mode == VqaMode::Supervised).then_some(reference.as_slice());
        reports.push(check(
            label,
            &mut vqa.store,
            |g| Ok(net.total_loss(g, &sample.features, &sample.tokens, truth, map, None)?.total),
            opts.corrupt,
        )?);
    }
    Ok(reports)
}
