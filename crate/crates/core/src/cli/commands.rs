use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use super::config::{set, RunConfig};
use super::eval::{map_samples, score, SampleOutput};
use super::gradsuite::{gradient_suite, SuiteOptions, ToyDims};
use super::heatmap::{map_to_csv, map_to_pgm, side_by_side};
use super::*;
use crate::answerer::{answer, evaluate_vqa, train_vqa, Prediction, VqaParams};
use crate::attention::{train_han, validation_rank_correlation, HanParams};
use crate::data::formats::read_attention_map;
use crate::data::{gen_synthetic, generate_hlat, prepare, Dataset, Sample};
use crate::diffcore::checkpoint_id;
use crate::error::{ensure, Error};

pub(super) fn dispatch(command: Command, config: RunConfig) -> Result<u8> {
    match command {
        Command::GenData(a) => gen_data(a, config),
        Command::TrainHan(a) => train_han_cmd(a, config),
        Command::GenerateHlat(a) => generate_hlat_cmd(a, config),
        Command::TrainVqa(a) => train_vqa_cmd(a, config),
        Command::Ab(a) => ab_cmd(a, config),
        Command::Eval(a) => eval_cmd(a, config),
        Command::ExportHeatmaps(a) => export_cmd(a, config),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text += &serde_json::to_string(item)?;
        text.push('\n');
    }
    write_file(path, text)
}

fn print_json<T: Serialize + ?Sized>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.toml"), config.to_toml()?)
}

fn load_prepared(dir: &Path) -> Result<Dataset> {
    let (ds, report) = prepare(Dataset::load(dir)?)?;
    if report.count() > 0 {
        log::warn!("dropped {} samples with all-zero reference maps: {:?}", report.count(), report.dropped);
    }
    Ok(ds)
}

fn selected(ds: &Dataset, split: SplitArg) -> Vec<Sample> {
    ds.samples.iter().filter(|s| split.includes(s.split)).cloned().collect()
}

fn apply_common(config: &mut RunConfig, common: &CommonArgs) {
    set(&mut config.seed, common.seed);
    set(&mut config.workers, common.workers);
}

fn gen_data(a: GenDataArgs, mut config: RunConfig) -> Result<u8> {
    apply_common(&mut config, &a.common);
    let s = &mut config.synth;
    set(&mut s.train, a.train);
    set(&mut s.val, a.val);
    set(&mut s.noise, a.noise);
    set(&mut s.spill, a.spill);
    set(&mut s.side, a.side);
    set(&mut s.channels, a.channels);
    config.validate()?;
    let ds = gen_synthetic(&config.synth, config.seed, &a.out)?;
    echo_config(&a.out, &config)?;
    log::info!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    print_json(&serde_json::json!({
        "dataset": a.out,
        "seed": config.seed,
        "train": ds.manifest.counts.train,
        "val": ds.manifest.counts.val,
    }))?;
    Ok(0)
}

fn apply_optim(lr: &mut f64, batch: &mut usize, steps: &mut usize, o: &OptimArgs) {
    set(lr, o.lr);
    set(batch, o.batch_size);
    set(steps, o.steps);
}

fn train_han_cmd(a: TrainHanArgs, mut config: RunConfig) -> Result<u8> {
    apply_common(&mut config, &a.common);
    let h = &mut config.han;
    set(&mut h.glimpses, a.glimpses);
    set(&mut h.dropout, a.dropout);
    if a.no_refine_recurrent {
        h.recurrent_refine = false;
    }
    apply_optim(&mut h.lr, &mut h.batch_size, &mut h.steps, &a.optim);
    config.validate()?;

    let ds = load_prepared(&a.data)?;
    let (train, val) = (ds.split(crate::data::Split::Train), ds.split(crate::data::Split::Val));
    ensure!(!train.is_empty(), "dataset has no training samples");
    let han_config = config.han_config(&ds.manifest.dims);
    log::info!(
        "training attention network: {} train / {} val samples, {} steps",
        train.len(),
        val.len(),
        config.han.steps
    );
    let (han, log) = train_han(&train, &val, han_config, &config.han_train())?;

    let ckpt = a.out.join("han.ckpt");
    let step = log.last().map_or(0, |r| r.step);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    han.save(&ckpt, config.seed, step)?;
    write_jsonl(&a.out.join("train_log.jsonl"), &log)?;
    let val_rc = validation_rank_correlation(&han, &val, config.workers)?;
    let metrics = serde_json::json!({
        "checkpoint": ckpt,
        "checkpoint_id": checkpoint_id(&ckpt)?,
        "steps": step,
        "glimpses": config.han.glimpses,
        "recurrent_refine": config.han.recurrent_refine,
        "final_train_loss": log.last().map(|r| r.loss),
        "val_rank_correlation": val_rc,
    });
    write_json(&a.out.join("metrics.json"), &metrics)?;
    echo_config(&a.out, &config)?;
    print_json(&metrics)?;
    Ok(0)
}

fn generate_hlat_cmd(a: GenerateHlatArgs, mut config: RunConfig) -> Result<u8> {
    set(&mut config.workers, a.workers);
    config.validate()?;
    let mut ds = load_prepared(&a.data)?;
    let (han, _) = HanParams::load(&a.checkpoint)?;
    let id = checkpoint_id(&a.checkpoint)?;
    let prov = generate_hlat(&mut ds, &han, &id, config.workers)?;
    let out = a.out.as_deref().unwrap_or(&a.data);
    ds.save(out)?;
    log::info!("wrote {} maps to {}", prov.count, out.join("hlat").display());
    print_json(&prov)?;
    Ok(0)
}

fn apply_vqa(config: &mut RunConfig, m: &VqaModelArgs) {
    let v = &mut config.vqa;
    if m.supervised {
        v.supervised = true;
    }
    if m.literal_cls {
        v.literal_cls = true;
    }
    set(&mut v.lambda, m.lambda);
    set(&mut v.glimpses, m.glimpses);
    set(&mut v.dropout, m.dropout);
    set(&mut v.map_source, m.map_source.map(Into::into));
    apply_optim(&mut v.lr, &mut v.batch_size, &mut v.steps, &m.optim);
}

fn train_vqa_cmd(a: TrainVqaArgs, mut config: RunConfig) -> Result<u8> {
    apply_common(&mut config, &a.common);
    apply_vqa(&mut config, &a.model);
    config.validate()?;

    let ds = load_prepared(&a.data)?;
    let (train, val) = (ds.split(crate::data::Split::Train), ds.split(crate::data::Split::Val));
    ensure!(!train.is_empty(), "dataset has no training samples");
    let vqa_config = config.vqa_config(&ds.manifest.dims);
    log::info!(
        "training {} answerer: {} train / {} val samples, {} steps",
        vqa_config.mode.as_str(),
        train.len(),
        val.len(),
        config.vqa.steps
    );
    let (vqa, log) = train_vqa(&train, &val, &ds.manifest.answers, vqa_config, &config.vqa_train())?;

    let ckpt = a.out.join("vqa.ckpt");
    let step = log.last().map_or(0, |r| r.step);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    vqa.save(&ckpt, config.seed, step)?;
    write_jsonl(&a.out.join("train_log.jsonl"), &log)?;
    let mut metrics = serde_json::json!({
        "checkpoint": ckpt,
        "checkpoint_id": checkpoint_id(&ckpt)?,
        "mode": vqa.config.mode,
        "lambda": vqa.config.lambda,
        "glimpses": vqa.config.glimpses,
        "steps": step,
        "final_cls_loss": log.last().map(|r| r.cls_loss),
        "final_weighted_att_loss": log.last().map(|r| r.weighted_att_loss),
    });
    if !val.is_empty() {
        let eval = evaluate_vqa(&vqa, &val, &ds.manifest.answers, config.workers)?;
        write_jsonl(&a.out.join("predictions.jsonl"), &eval.predictions)?;
        metrics["val_accuracy"] = serde_json::to_value(&eval.accuracy)?;
        metrics["val_rank_correlation"] = serde_json::to_value(&eval.rank_correlation)?;
    }
    write_json(&a.out.join("metrics.json"), &metrics)?;
    echo_config(&a.out, &config)?;
    print_json(&metrics)?;
    Ok(0)
}

fn ab_cmd(a: AbArgs, mut config: RunConfig) -> Result<u8> {
    set(&mut config.workers, a.workers);
    apply_vqa(&mut config, &a.model);
    config.validate()?;
    let ds = load_prepared(&a.data)?;
    let (train, val) = (ds.split(crate::data::Split::Train), ds.split(crate::data::Split::Val));
    ensure!(!train.is_empty() && !val.is_empty(), "comparison needs both train and val samples");
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = supervision_ab(
        &train,
        &val,
        &ds.manifest.answers,
        &config.vqa_config(&ds.manifest.dims),
        &config.vqa_train(),
        &seeds,
    )?;
    write_jsonl(&a.out.join("ab.jsonl"), &report.rows)?;
    write_json(&a.out.join("ab.json"), &report)?;
    let table = report.table();
    write_file(&a.out.join("ab.md"), &table)?;
    echo_config(&a.out, &config)?;
    print!("{table}");
    Ok(0)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: SplitArg,
    source: String,
    #[serde(flatten)]
    report: &'a EvalReport,
}

impl Serialize for SplitArg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

fn eval_cmd(a: EvalArgs, mut config: RunConfig) -> Result<u8> {
    set(&mut config.workers, a.workers);
    config.validate()?;
    let ds = load_prepared(&a.data)?;
    let samples = selected(&ds, a.split);
    ensure!(!samples.is_empty(), "split {:?} is empty", a.split);
    let workers = config.workers;

    let (outputs, source) = if let Some(path) = &a.han {
        let (han, _) = HanParams::load(path)?;
        let outs = map_samples(&samples, workers, |s| {
            Ok(SampleOutput {
                map: Some(han.predict(&s.features, &s.tokens)?.into_values()),
                answer: None,
            })
        })?;
        (outs, format!("han:{}", path.display()))
    } else if let Some(path) = &a.vqa {
        let (vqa, _) = VqaParams::load(path)?;
        let outs = map_samples(&samples, workers, |s| {
            let k = answer(&vqa.predict(&s.features, &s.tokens)?);
            Ok(SampleOutput {
                map: Some(vqa.attention_map(&s.features, &s.tokens)?.into_values()),
                answer: Some((k, ds.answer_name(k).to_string())),
            })
        })?;
        (outs, format!("vqa:{}", path.display()))
    } else {
        ensure!(
            a.maps.is_some() || a.predictions.is_some(),
            "give one of --han, --vqa, --maps or --predictions"
        );
        let mut outs = vec![SampleOutput::default(); samples.len()];
        let mut source = Vec::new();
        if let Some(dir) = &a.maps {
            for (s, out) in samples.iter().zip(&mut outs) {
                out.map = Some(read_attention_map(&dir.join(format!("{}.map", s.id)))?.1);
            }
            source.push(format!("maps:{}", dir.display()));
        }
        if let Some(path) = &a.predictions {
            let preds = read_predictions(path)?;
            for (s, out) in samples.iter().zip(&mut outs) {
                let p = preds
                    .get(&s.id)
                    .ok_or_else(|| Error::contract(format!("no prediction for sample {}", s.id)))?;
                out.answer = Some((p.answer_id, p.answer.clone()));
            }
            source.push(format!("predictions:{}", path.display()));
        }
        (outs, source.join(","))
    };

    let report = score(&samples, &outputs, a.rank_formula(&config), a.against)?;
    let output = EvalOutput {
        split: a.split,
        source,
        report: &report,
    };
    if let Some(path) = &a.out {
        write_json(path, &output)?;
    }
    if let Some(path) = &a.csv {
        write_file(path, report.per_sample_csv()?)?;
    }
    print_json(&output)?;
    Ok(0)
}

fn read_predictions(path: &Path) -> Result<HashMap<String, Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let p: Prediction =
                serde_json::from_str(line).map_err(|e| Error::format(path, offset, e.to_string()))?;
            out.insert(p.id.clone(), p);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

#[derive(Serialize)]
struct ExportIndex {
    id: String,
    question: String,
    answer: Option<String>,
    panels: Vec<String>,
    predictions: std::collections::BTreeMap<String, String>,
}

fn export_cmd(a: ExportArgs, config: RunConfig) -> Result<u8> {
    config.validate()?;
    let ds = load_prepared(&a.data)?;
    let samples: Vec<Sample> = if a.ids.is_empty() {
        selected(&ds, a.split).into_iter().take(a.limit).collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                ds.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("no sample with id {id}")))
            })
            .collect::<Result<_>>()?
    };
    let han = a.han.as_deref().map(HanParams::load).transpose()?.map(|(h, _)| h);
    let vqas: Vec<(String, VqaParams)> = a
        .vqa
        .iter()
        .map(|(label, path)| Ok((label.clone(), VqaParams::load(path)?.0)))
        .collect::<Result<_>>()?;

    let mut index = Vec::new();
    for s in &samples {
        let mut panels: Vec<(String, Vec<f64>)> = Vec::new();
        if let Some(r) = &s.reference {
            panels.push(("reference".into(), r.clone()));
        }
        if let Some(h) = &s.hlat {
            panels.push(("hlat".into(), h.clone()));
        }
        if let Some(han) = &han {
            panels.push(("han".into(), han.predict(&s.features, &s.tokens)?.into_values()));
        }
        let mut predictions = std::collections::BTreeMap::new();
        for (label, vqa) in &vqas {
            panels.push((label.clone(), vqa.attention_map(&s.features, &s.tokens)?.into_values()));
            let k = answer(&vqa.predict(&s.features, &s.tokens)?);
            predictions.insert(label.clone(), ds.answer_name(k).to_string());
        }
        let dir = a.out.join(&s.id);
        for (label, map) in &panels {
            write_file(&dir.join(format!("{label}.csv")), map_to_csv(map)?)?;
            write_file(&dir.join(format!("{label}.pgm")), map_to_pgm(map, a.scale)?)?;
        }
        if panels.len() > 1 {
            let maps: Vec<&[f64]> = panels.iter().map(|(_, m)| m.as_slice()).collect();
            write_file(&dir.join("compare.pgm"), side_by_side(&maps, a.scale)?)?;
        }
        let word = |t: usize| ds.vocab.get(t).map_or("<unk>", String::as_str);
        index.push(ExportIndex {
            id: s.id.clone(),
            question: s.tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" "),
            answer: s.answer.map(|k| ds.answer_name(k).to_string()),
            panels: panels.into_iter().map(|(l, _)| l).collect(),
            predictions,
        });
    }
    write_jsonl(&a.out.join("index.jsonl"), &index)?;
    log::info!("exported {} samples to {}", index.len(), a.out.display());
    print_json(&serde_json::json!({ "out": a.out, "samples": index.len() }))?;
    Ok(0)
}

#[derive(Serialize)]
struct GradcheckSummary {
    label: String,
    passed: bool,
    max_rel_error: f64,
    failing_params: Vec<String>,
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<u8> {
    let reports = gradient_suite(
        ToyDims::default(),
        SuiteOptions {
            seed: a.seed,
            corrupt: a.corrupt,
        },
    )?;
    let mut code = 0u8;
    let mut summary = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        for p in &r.params {
            log::debug!("{} {}: max rel error {:.3e} over {} entries", r.label, p.name, p.max_rel_error, p.entries);
        }
        if !r.passed() {
            code |= 1 << i;
        }
        summary.push(GradcheckSummary {
            label: r.label.clone(),
            passed: r.passed(),
            max_rel_error: r.max_rel_error(),
            failing_params: r.failures().iter().map(|p| p.name.clone()).collect(),
        });
    }
    if let Some(path) = &a.out {
        write_json(path, &reports)?;
    }
    print_json(&summary)?;
    Ok(if code == 0 { 0 } else { EXIT_GRADCHECK | code })
}
