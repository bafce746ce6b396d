//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 2 4`.

use std::path::Path;
use std::time::{Duration, Instant};

use hlat_core::answerer::{evaluate_vqa, train_vqa, MapSource, VqaConfig, VqaMode, VqaTrainConfig};
use hlat_core::attention::{
    mean_refine_stack, refine_stack, train_han, validation_rank_correlation, GlimpseStack, HanConfig, HanParams,
    HanTrainConfig, RefineHead,
};
use hlat_core::cli::{gradient_suite, score, supervision_ab, Against, SampleOutput, SuiteOptions, ToyDims};
use hlat_core::data::formats::{read_attention_map, read_feature_grid, write_attention_map, write_feature_grid};
use hlat_core::data::{clean, gen_synthetic, generate, generate_hlat, normalize_refs, prepare, Dataset, Split, SynthSpec};
use hlat_core::diffcore::{ParameterStore, Tensor};
use hlat_core::encoders::FeatureGrid;
use hlat_core::metrics::{consensus_accuracy, spearman, RankFormula};
use hlat_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = Result<Outcome, String>;

fn outcome(pass: bool, detail: impl Into<String>) -> Check {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn e<T>(r: hlat_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(r); scale * z }).collect()
}

fn is_simplex(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

fn randomize(store: &mut ParameterStore, r: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let n = store.value(id).len();
        store.set(id, Tensor::new(shape, randn(r, n, scale)).unwrap()).unwrap();
    }
}

// 1. Every parameter of the attention network and the supervised answerer
//    matches central finite differences at small dims.
fn gradient_suite_criterion() -> Check {
    let t = Instant::now();
    let reports = e(gradient_suite(ToyDims::default(), SuiteOptions::default()))?;
    let elapsed = t.elapsed();
    let mut pass = elapsed < Duration::from_secs(120);
    let mut parts = Vec::new();
    for r in &reports {
        pass &= r.passed();
        parts.push(format!("{} max rel err {:.2e}", r.label, r.max_rel_error()));
    }
    let required = ["han", "vqa-supervised"];
    pass &= required.iter().all(|l| reports.iter().any(|r| r.label == *l));
    outcome(pass, format!("{}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

/// Rank each value by counting: 1 + #smaller + (#equal others)/2.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &a)| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let eq = x.iter().enumerate().filter(|&(j, &b)| j != i && b == a).count() as f64;
            1.0 + less + eq / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

// 2. Metric oracles.
fn metric_oracles() -> Check {
    let mut r = rng(2024);
    let (mut max_err, mut tied, mut undefined, mut mismatched) = (0.0f64, 0, 0, 0);
    for i in 0..1000 {
        let n = r.gen_range(2..=64);
        let draw = |r: &mut ChaCha8Rng| -> Vec<f64> {
            if i % 2 == 0 {
                randn(r, n, 1.0)
            } else {
                let levels = r.gen_range(2..6);
                (0..n).map(|_| r.gen_range(0..levels) as f64 * 0.25).collect()
            }
        };
        let (a, b) = (draw(&mut r), draw(&mut r));
        let oracle = oracle_pearson(&oracle_ranks(&a), &oracle_ranks(&b));
        match (spearman(&a, &b), oracle) {
            (Ok(got), Some(want)) => {
                max_err = max_err.max((got - want).abs());
                tied += usize::from(i % 2 == 1);
            }
            (Err(Error::UndefinedCorrelation(_)), None) => undefined += 1,
            _ => mismatched += 1,
        }
    }
    let worked = spearman(&[0.1, 0.4, 0.3, 0.2], &[0.2, 0.3, 0.4, 0.1]).map_err(|e| e.to_string())?;
    let mut consensus_ok = true;
    for c in 0..=10usize {
        let votes: Vec<String> = (0..10).map(|k| if k < c { "two" } else { "three" }.to_string()).collect();
        consensus_ok &= consensus_accuracy("two", &votes).map_err(|e| e.to_string())? == (c as f64 / 3.0).min(1.0);
    }
    outcome(
        max_err <= 1e-12 && mismatched == 0 && worked == 0.6 && consensus_ok,
        format!(
            "1000 pairs ({tied} tied, {undefined} undefined on both sides), max |err| {max_err:.1e}, \
             {mismatched} mismatches; worked example {worked}; consensus c=0..10 {}",
            if consensus_ok { "exact" } else { "WRONG" }
        ),
    )
}

// 3. Simplex invariants over random forward passes.
fn simplex_invariants() -> Check {
    const N: usize = 10_000;
    let mut r = rng(3);
    let cells = 16;
    let mut bad = [0usize; 4];

    let mut store = ParameterStore::new();
    let head = e(RefineHead::register(&mut store, "r", cells, 8, &mut r))?;
    for i in 0..N {
        if i % 100 == 0 {
            randomize(&mut store, &mut r, 1.5);
        }
        let glimpses = r.gen_range(1..=4);
        let scale = [0.1, 1.0, 10.0, 60.0][i % 4];
        let maps: Vec<Vec<f64>> = (0..glimpses).map(|_| randn(&mut r, cells, scale)).collect();
        let stack = e(GlimpseStack::from_maps(&maps))?;
        bad[0] += usize::from(!is_simplex(e(refine_stack(&store, &head, &stack))?.values()));
        bad[1] += usize::from(!is_simplex(e(mean_refine_stack(&stack))?.values()));
    }

    let config = HanConfig::default();
    let mut han = e(HanParams::init(config.clone(), &mut r))?;
    for i in 0..N {
        if i % 500 == 0 {
            randomize(&mut han.store, &mut r, 1.0);
        }
        let f = e(FeatureGrid::new(32, 4, randn(&mut r, 32 * 16, 3.0)))?;
        let len = r.gen_range(1..=config.max_question_len);
        let tokens: Vec<usize> = (0..len).map(|_| r.gen_range(0..config.vocab)).collect();
        bad[2] += usize::from(!is_simplex(e(han.predict(&f, &tokens))?.values()));
    }

    let spec = SynthSpec {
        train: 100,
        val: 0,
        ..SynthSpec::default()
    };
    let base = e(generate(&spec, 3))?;
    for _ in 0..N / 100 {
        let mut ds = base.clone();
        for s in &mut ds.samples {
            let scale = [0.01, 1.0, 50.0, 700.0][r.gen_range(0..4)];
            s.reference = Some(randn(&mut r, cells, scale));
        }
        let ds = e(normalize_refs(ds))?;
        for s in &ds.samples {
            bad[3] += usize::from(!is_simplex(s.reference.as_ref().unwrap()));
        }
    }
    outcome(
        bad.iter().all(|&b| b == 0),
        format!(
            "{N} passes each; off-simplex: refine {}, mean_refine {}, predict {}, normalize_refs {}",
            bad[0], bad[1], bad[2], bad[3]
        ),
    )
}

fn small_planted(train: usize, val: usize, seed: u64) -> Result<Dataset, String> {
    let spec = SynthSpec {
        train,
        val,
        ..SynthSpec::default()
    };
    Ok(e(prepare(e(generate(&spec, seed))?))?.0)
}

// 4. Supervised training with λ = 0 reproduces unsupervised training exactly.
fn reduction_identity() -> Check {
    let ds = small_planted(64, 16, 4)?;
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let tc = VqaTrainConfig {
        lr: 3e-3,
        batch_size: 16,
        steps: 200,
        seed: 11,
        workers: 1,
        map_source: MapSource::Reference,
    };
    let base = VqaConfig {
        vocab: ds.manifest.dims.vocab,
        glimpses: 2,
        ..VqaConfig::default()
    };
    let (u, log_u) = e(train_vqa(&train, &val, &ds.manifest.answers, base.clone(), &tc))?;
    let zero = VqaConfig {
        mode: VqaMode::Supervised,
        lambda: 0.0,
        ..base
    };
    let (z, log_z) = e(train_vqa(&train, &val, &ds.manifest.answers, zero, &tc))?;
    let mut differing = 0;
    for (name, value) in u.store.iter() {
        let other = z.store.value(e(z.store.id(name))?);
        let same = value.shape() == other.shape()
            && value.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        differing += usize::from(!same);
    }
    let same_preds = val.iter().all(|s| u.predict(&s.features, &s.tokens).unwrap() == z.predict(&s.features, &s.tokens).unwrap());
    let steps = log_u.last().map_or(0, |r| r.step);
    outcome(
        differing == 0 && log_u == log_z && same_preds && steps == 200,
        format!(
            "{steps} steps; {differing} of {} shared tensors differ; logs {}; predictions {}",
            u.store.len(),
            if log_u == log_z { "identical" } else { "differ" },
            if same_preds { "identical" } else { "differ" }
        ),
    )
}

// 5. The attention network memorizes one planted sample.
fn memorization() -> Check {
    let ds = small_planted(1, 0, 5)?;
    let one = ds.split(Split::Train);
    let config = HanConfig {
        vocab: ds.manifest.dims.vocab,
        ..HanConfig::default()
    };
    let tc = HanTrainConfig {
        lr: 1e-2,
        batch_size: 1,
        steps: 500,
        seed: 0,
        workers: 1,
    };
    let (han, _) = e(train_han(&one, &[], config, &tc))?;
    let pred = e(han.predict(&one[0].features, &one[0].tokens))?;
    let tv = pred.total_variation(one[0].reference.as_ref().unwrap());
    outcome(tv < 0.05, format!("total variation {tv:.2e} after 500 steps"))
}

// 6. Recurrent refinement beats the glimpse-mean ablation.
fn refinement_ablation() -> Check {
    let t = Instant::now();
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let ds = small_planted(448, 64, seed)?;
        let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
        let mut score = [0.0; 2];
        for (k, recurrent) in [true, false].into_iter().enumerate() {
            let config = HanConfig {
                vocab: ds.manifest.dims.vocab,
                recurrent_refine: recurrent,
                ..HanConfig::default()
            };
            let tc = HanTrainConfig {
                lr: 3e-3,
                batch_size: 64,
                steps: 300,
                seed,
                workers: 1,
            };
            let (han, _) = e(train_han(&train, &val, config, &tc))?;
            score[k] = e(validation_rank_correlation(&han, &val, 1))?.ok_or("no validation score")?;
        }
        pass &= score[0] > score[1];
        rows.push(format!("seed {seed}: {:.3} vs {:.3}", score[0], score[1]));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!("recurrent vs mean: {}; {:.0}s", rows.join(", "), elapsed.as_secs_f64()),
    )
}

// 7. Attention supervision with generated maps helps.
fn supervision_helps() -> Check {
    let t = Instant::now();
    let spec = SynthSpec {
        train: 256,
        val: 128,
        noise: 0.5,
        spill: 1.0,
        ..SynthSpec::default()
    };
    let (mut ds, _) = e(prepare(e(generate(&spec, 100))?))?;
    let han_config = HanConfig {
        vocab: ds.manifest.dims.vocab,
        ..HanConfig::default()
    };
    let han_tc = HanTrainConfig {
        lr: 3e-3,
        batch_size: 64,
        steps: 600,
        seed: 0,
        workers: 1,
    };
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let (han, _) = e(train_han(&train, &val, han_config, &han_tc))?;
    let han_val = e(validation_rank_correlation(&han, &val, 1))?.unwrap_or(f64::NAN);
    e(generate_hlat(&mut ds, &han, "acceptance", 1))?;

    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let base = VqaConfig {
        vocab: ds.manifest.dims.vocab,
        glimpses: 1,
        lambda: 1.0,
        ..VqaConfig::default()
    };
    let tc = VqaTrainConfig {
        lr: 3e-3,
        batch_size: 64,
        steps: 600,
        seed: 0,
        workers: 1,
        map_source: MapSource::Hlat,
    };
    let report = e(supervision_ab(&train, &val, &ds.manifest.answers, &base, &tc, &[0, 1, 2, 3, 4]))?;
    let (u, s) = (&report.unsupervised, &report.supervised);
    let (ru, rs) = (u.mean_rank_correlation.unwrap_or(f64::NAN), s.mean_rank_correlation.unwrap_or(f64::NAN));
    let (pu, ps) = (
        u.mean_reference_correlation.unwrap_or(f64::NAN),
        s.mean_reference_correlation.unwrap_or(f64::NAN),
    );
    let attention_better = rs > ru && ps > pu;
    let accuracy_ok = s.mean_accuracy >= u.mean_accuracy - 0.005 && s.median_accuracy > u.median_accuracy;
    let elapsed = t.elapsed();
    outcome(
        attention_better && accuracy_ok && elapsed < Duration::from_secs(900),
        format!(
            "attention network val corr {han_val:.3}; rank corr vs annotators {rs:.4} (sup) vs {ru:.4} (unsup), \
             vs planted reference {ps:.4} vs {pu:.4}; \
             accuracy mean {:.4} vs {:.4}, median {:.4} vs {:.4}; {:.0}s",
            s.mean_accuracy,
            u.mean_accuracy,
            s.median_accuracy,
            u.median_accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

// 8. Hygiene: exact zero-map removal, idempotence, single normalization.
fn hygiene() -> Check {
    let mut r = rng(8);
    let mut ds = e(generate(
        &SynthSpec {
            train: 200,
            val: 50,
            ..SynthSpec::default()
        },
        8,
    ))?;
    let mut expected = Vec::new();
    for s in &mut ds.samples {
        if r.gen_bool(0.1) {
            s.reference = Some(vec![0.0; 16]);
            expected.push(s.id.clone());
        } else if r.gen_bool(0.05) {
            let mut m = vec![0.0; 16];
            m[r.gen_range(0..16)] = 1e-12;
            s.reference = Some(m);
        }
    }
    let (cleaned, report) = clean(ds);
    let exact = report.dropped == expected;
    let (again, second) = clean(cleaned.clone());
    let idempotent = second.count() == 0 && again == cleaned;

    let norm = e(normalize_refs(cleaned))?;
    let twice_rejected = matches!(normalize_refs(norm.clone()), Err(Error::Contract(_)));
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut saved = norm.clone();
    e(saved.save(tmp.path()))?;
    let loaded = e(Dataset::load(tmp.path()))?;
    let flag_kept = loaded.manifest.refs_normalized && normalize_refs(loaded.clone()).is_err();
    let prepared_unchanged = e(prepare(loaded))?.0.samples == norm.samples;
    outcome(
        exact && idempotent && twice_rejected && flag_kept && prepared_unchanged,
        format!(
            "dropped {} of {} planted zero maps (exact: {exact}); idempotent: {idempotent}; \
             second normalize rejected: {twice_rejected}; flag survives disk: {flag_kept}; \
             prepare skips normalized data: {prepared_unchanged}",
            report.count(),
            expected.len()
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// 9. Fixed seeds give byte-identical artifacts; binary formats round-trip exactly.
fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s);
    let spec = SynthSpec {
        train: 48,
        val: 16,
        ..SynthSpec::default()
    };
    e(gen_synthetic(&spec, 9, &p("a")))?;
    e(gen_synthetic(&spec, 9, &p("b")))?;
    let datasets = dir_bytes(&p("a")) == dir_bytes(&p("b"));

    let (ds, _) = e(prepare(e(Dataset::load(&p("a")))?))?;
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let han_config = HanConfig {
        vocab: ds.manifest.dims.vocab,
        ..HanConfig::default()
    };
    let han_tc = HanTrainConfig {
        lr: 3e-3,
        batch_size: 16,
        steps: 30,
        seed: 1,
        workers: 1,
    };
    for (name, workers) in [("h1", 1), ("h2", 3)] {
        let tc = HanTrainConfig { workers, ..han_tc.clone() };
        let (han, _) = e(train_han(&train, &val, han_config.clone(), &tc))?;
        e(han.save(&p(name), 1, 30))?;
    }
    let han_ckpt = std::fs::read(p("h1")).unwrap() == std::fs::read(p("h2")).unwrap();

    let vqa_config = VqaConfig {
        vocab: ds.manifest.dims.vocab,
        mode: VqaMode::Supervised,
        ..VqaConfig::default()
    };
    let vqa_tc = VqaTrainConfig {
        lr: 3e-3,
        batch_size: 16,
        steps: 30,
        seed: 2,
        workers: 1,
        map_source: MapSource::Reference,
    };
    let mut reports = Vec::new();
    for (name, workers) in [("v1", 1), ("v2", 3)] {
        let tc = VqaTrainConfig { workers, ..vqa_tc.clone() };
        let (vqa, _) = e(train_vqa(&train, &val, &ds.manifest.answers, vqa_config.clone(), &tc))?;
        e(vqa.save(&p(name), 2, 30))?;
        let eval = e(evaluate_vqa(&vqa, &val, &ds.manifest.answers, workers))?;
        let outputs: Vec<SampleOutput> = val
            .iter()
            .zip(&eval.predictions)
            .map(|(s, pr)| SampleOutput {
                map: Some(vqa.attention_map(&s.features, &s.tokens).unwrap().into_values()),
                answer: Some((pr.answer_id, pr.answer.clone())),
            })
            .collect();
        let report = e(score(&val, &outputs, RankFormula::Standard, Against::Annotators))?;
        reports.push((
            serde_json::to_vec(&eval).unwrap(),
            serde_json::to_vec(&report).unwrap(),
            e(report.per_sample_csv())?,
        ));
    }
    let vqa_ckpt = std::fs::read(p("v1")).unwrap() == std::fs::read(p("v2")).unwrap();
    let eval_reports = reports[0] == reports[1];

    let mut r = rng(9);
    let mut values = randn(&mut r, 3 * 25, 1e3);
    values[..6].copy_from_slice(&[0.0, -0.0, f64::MIN_POSITIVE, 5e-324, f64::MAX, -1e-300]);
    let grid = e(FeatureGrid::new(3, 5, values.clone()))?;
    e(write_feature_grid(&p("g.feat"), &grid))?;
    let back = e(read_feature_grid(&p("g.feat")))?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let grid_ok = back.channels() == 3 && back.side() == 5 && bits(back.tensor().data()) == bits(&values);
    let map: Vec<f64> = randn(&mut r, 25, 1.0).iter().map(|x| x.abs()).collect();
    e(write_attention_map(&p("m.map"), 5, &map))?;
    let (side, map_back) = e(read_attention_map(&p("m.map")))?;
    let map_ok = side == 5 && bits(&map_back) == bits(&map);
    let reloaded = e(Dataset::load(&p("a")))? == e(generate(&spec, 9))?;

    outcome(
        datasets && han_ckpt && vqa_ckpt && eval_reports && grid_ok && map_ok && reloaded,
        format!(
            "datasets {datasets}, attention checkpoints {han_ckpt}, answerer checkpoints {vqa_ckpt}, \
             eval reports {eval_reports} (1 vs 3 workers); feature round trip {grid_ok}, \
             map round trip {map_ok}, dataset reload {reloaded}"
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "gradient suite", gradient_suite_criterion),
        (2, "metric oracles", metric_oracles),
        (3, "simplex invariants", simplex_invariants),
        (4, "reduction identity", reduction_identity),
        (5, "attention memorization", memorization),
        (6, "recurrent refinement helps", refinement_ablation),
        (7, "supervision helps", supervision_helps),
        (8, "hygiene rules", hygiene),
        (9, "determinism and formats", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(msg) => (false, format!("error: {msg}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {n} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
