use super::*;
use crate::diffcore::softmax_slice;
use crate::metrics::spearman;

fn small_spec() -> SynthSpec {
    SynthSpec {
        train: 12,
        val: 4,
        ..SynthSpec::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let saved = gen_synthetic(&small_spec(), 3, tmp.path()).unwrap();
    let loaded = Dataset::load(tmp.path()).unwrap();
    assert_eq!(saved, loaded);
    assert_eq!(loaded.manifest.counts, SplitCounts { train: 12, val: 4 });
    assert_eq!(loaded.split(Split::Val).len(), 4);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&small_spec(), 11, a.path()).unwrap();
    gen_synthetic(&small_spec(), 11, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    gen_synthetic(&small_spec(), 12, c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn clean_drops_exactly_the_zero_maps() {
    let mut ds = generate(&small_spec(), 5).unwrap();
    ds.samples[2].reference = Some(vec![0.0; 16]);
    ds.samples[7].reference = Some(vec![0.0; 16]);
    let ids: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();

    let (cleaned, report) = clean(ds);
    assert_eq!(report.dropped, vec![ids[2].clone(), ids[7].clone()]);
    assert_eq!(cleaned.samples.len(), 14);
    assert_eq!(cleaned.manifest.counts.train + cleaned.manifest.counts.val, 14);

    let (again, report) = clean(cleaned.clone());
    assert_eq!(report.count(), 0);
    assert_eq!(again, cleaned);
}

#[test]
fn clean_keeps_maps_with_any_nonzero_cell() {
    let mut ds = generate(&small_spec(), 5).unwrap();
    let mut m = vec![0.0; 16];
    m[15] = 1e-300;
    ds.samples[0].reference = Some(m);
    let (cleaned, report) = clean(ds);
    assert_eq!(report.count(), 0);
    assert_eq!(cleaned.samples.len(), 16);
}

#[test]
fn normalize_matches_softmax_and_runs_once() {
    let ds = generate(&small_spec(), 6).unwrap();
    let raw = ds.samples[1].reference.clone().unwrap();
    let raw_annot = ds.samples[1].annotators[0].clone();
    let norm = normalize_refs(ds).unwrap();
    assert!(norm.manifest.refs_normalized);
    let got = norm.samples[1].reference.as_ref().unwrap();
    for (g, e) in got.iter().zip(softmax_slice(&raw)) {
        assert!((g - e).abs() < 1e-15);
    }
    assert_eq!(norm.samples[1].annotators[0], softmax_slice(&raw_annot));
    assert!(matches!(normalize_refs(norm.clone()), Err(Error::Contract(_))));

    // prepare respects the flag instead of normalizing a second time
    let (prepared, _) = prepare(norm.clone()).unwrap();
    assert_eq!(prepared.samples, norm.samples);
}

#[test]
fn uniform_map_stays_uniform() {
    let mut ds = generate(&small_spec(), 6).unwrap();
    ds.samples[0].reference = Some(vec![3.0; 16]);
    let norm = normalize_refs(ds).unwrap();
    for &v in norm.samples[0].reference.as_ref().unwrap() {
        assert!((v - 1.0 / 16.0).abs() < 1e-15);
    }
}

#[test]
fn normalization_flag_survives_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut ds, _) = prepare(generate(&small_spec(), 2).unwrap()).unwrap();
    ds.save(tmp.path()).unwrap();
    let loaded = Dataset::load(tmp.path()).unwrap();
    assert!(loaded.manifest.refs_normalized);
    assert!(normalize_refs(loaded).is_err());
}

#[test]
fn oracle_reader_is_perfect_without_noise() {
    let spec = SynthSpec {
        noise: 0.0,
        train: 64,
        val: 0,
        ..SynthSpec::default()
    };
    let ds = generate(&spec, 4).unwrap();
    let protos = ds.manifest.provenance.prototypes.clone().unwrap();
    for s in &ds.samples {
        assert_eq!(bayes_reader(&protos, &s.features, &s.tokens), s.answer);
    }
}

#[test]
fn planted_map_peaks_on_signal_cell() {
    let m = planted_map(4, 5, 1.0, 4.0);
    assert_eq!(m[5], 4.0);
    assert!(m.iter().all(|&v| v <= 4.0 && v > 0.0));
    assert!((m[4] - 4.0 * (-0.5f64).exp()).abs() < 1e-15);
    assert_eq!(spearman(&m, &m).unwrap(), 1.0);

    let one_hot = planted_map(4, 5, 0.0, 1.0);
    assert_eq!(one_hot.iter().sum::<f64>(), 1.0);
    assert_eq!(one_hot[5], 1.0);
}

#[test]
fn questions_name_one_type() {
    let spec = small_spec();
    let ds = generate(&spec, 9).unwrap();
    for s in &ds.samples {
        let named: Vec<_> = s.tokens.iter().filter(|&&t| (1..=spec.num_types).contains(&t)).collect();
        assert_eq!(named.len(), 1);
        assert!(s.tokens.len() >= spec.min_question_len && s.tokens.len() <= spec.max_question_len);
        assert_eq!(s.votes.len(), spec.votes);
        assert_eq!(s.annotators.len(), spec.annotators);
    }
    assert_eq!(ds.vocab.len(), spec.vocab_size());
}

#[test]
fn contradicting_manifest_fails_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = gen_synthetic(&small_spec(), 1, tmp.path()).unwrap();
    ds.manifest.dims.channels = 16;
    ds.save_manifest(tmp.path()).unwrap();
    assert!(matches!(Dataset::load(tmp.path()), Err(Error::Format { .. })));

    ds.manifest.dims.channels = 32;
    ds.manifest.counts.train += 1;
    ds.save_manifest(tmp.path()).unwrap();
    assert!(matches!(Dataset::load(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn missing_question_record_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    gen_synthetic(&small_spec(), 1, tmp.path()).unwrap();
    let q = tmp.path().join("questions.jsonl");
    let text = std::fs::read_to_string(&q).unwrap();
    let rest: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&q, rest.join("\n")).unwrap();
    let err = Dataset::load(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("no question record"), "{err}");
}

#[test]
fn top_answers_by_frequency_then_name() {
    let answers = ["yes", "no", "Yes ", "two", "no", "yes", "blue", "two"];
    assert_eq!(top_answers(answers, 3), vec!["yes", "no", "two"]);
    assert_eq!(top_answers(answers, 10).len(), 4);
}

#[test]
fn invalid_spec_rejected() {
    let bad = SynthSpec {
        objects: 5,
        ..SynthSpec::default()
    };
    assert!(generate(&bad, 0).is_err());
    let bad = SynthSpec {
        vote_noise: 1.5,
        ..SynthSpec::default()
    };
    assert!(generate(&bad, 0).is_err());
}

#[test]
fn hlat_generation_covers_every_sample() {
    use crate::attention::{HanConfig, HanParams};
    use rand::SeedableRng;
    let (mut ds, _) = prepare(generate(&small_spec(), 8).unwrap()).unwrap();
    let config = HanConfig {
        vocab: ds.manifest.dims.vocab,
        ..HanConfig::default()
    };
    let han = HanParams::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
    let prov = generate_hlat(&mut ds, &han, "abcd", 1).unwrap();
    assert_eq!(prov.count, 16);
    assert_eq!(ds.manifest.provenance.hlat.as_ref(), Some(&prov));
    for s in &ds.samples {
        let m = s.hlat.as_ref().unwrap();
        assert_eq!(m, han.predict(&s.features, &s.tokens).unwrap().values());
    }

    let mut par = ds.clone();
    generate_hlat(&mut par, &han, "abcd", 3).unwrap();
    assert_eq!(par, ds);

    let tmp = tempfile::tempdir().unwrap();
    ds.save(tmp.path()).unwrap();
    assert_eq!(Dataset::load(tmp.path()).unwrap(), ds);

    let wrong = HanParams::init(
        HanConfig {
            side: 3,
            vocab: ds.manifest.dims.vocab,
            ..HanConfig::default()
        },
        &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(generate_hlat(&mut ds, &wrong, "x", 1).is_err());
}
