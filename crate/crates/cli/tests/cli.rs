use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use speechaug::audio::{save_wav, AudioBuffer, WavEncoding};
use speechaug::manifest::{Manifest, ManifestRecord, Origin};
use speechaug::ports::UnitSequence;

fn speechaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechaug"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tone(len: usize, freq: f64) -> AudioBuffer {
    let samples = (0..len)
        .map(|i| (0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32)
        .collect();
    AudioBuffer::new(samples, 16000).unwrap()
}

fn write_wavs(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let b = tone(1600 + 37 * i, 150.0 + 11.0 * i as f64);
        save_wav(&b, dir.join(format!("u{i:03}.wav")), WavEncoding::Float32).unwrap();
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn noise_dir(root: &Path) -> PathBuf {
    let dir = root.join("noise");
    fs::create_dir_all(&dir).unwrap();
    save_wav(&tone(8000, 930.0), dir.join("hum.wav"), WavEncoding::Float32).unwrap();
    save_wav(&tone(3000, 2300.0), dir.join("whine.wav"), WavEncoding::Pcm16).unwrap();
    dir
}

#[test]
fn zero_probability_chain_copies_inputs_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_wavs(&input, 5);
    let config = tmp.path().join("off.toml");
    fs::write(
        &config,
        "[[effect]]\nkind = \"speed\"\nprobability = 0.0\nrange = [0.95, 1.05]\n\n\
         [[effect]]\nkind = \"lowpass\"\nprobability = 0.0\nrange = [300.0, 1000.0]\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = speechaug(&["augment", "--in", p(&input), "--out", p(&out), "--config", p(&config), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let before = tree(&input);
    let after = tree(&out);
    for (name, bytes) in &before {
        assert_eq!(after.get(name), Some(bytes), "{}", name.display());
    }
    let traces = fs::read_to_string(out.join("traces.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 5);
}

#[test]
fn augmentation_is_repeatable_and_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_wavs(&input, 100);
    let noise = noise_dir(tmp.path());
    let run = |name: &str, workers: &str| {
        let out = tmp.path().join(name);
        let o = speechaug(&[
            "augment", "--in", p(&input), "--out", p(&out), "--noise-dir", p(&noise),
            "--seed", "11", "--workers", workers,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
        tree(&out)
    };
    let one = run("one", "1");
    let again = run("again", "1");
    let eight = run("eight", "8");
    assert_eq!(one.len(), 101);
    assert!(one == again, "two identical invocations differ");
    assert!(one == eight, "8 workers differ from 1 worker");
}

#[test]
fn noise_chain_without_noise_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_wavs(&input, 2);
    let out = tmp.path().join("out");
    let o = speechaug(&["augment", "--in", p(&input), "--out", p(&out), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--noise-dir"));
    assert!(!out.exists(), "nothing may be written before the config is accepted");
}

#[test]
fn missing_seed_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speechaug(&["augment", "--in", p(tmp.path()), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn broken_input_gives_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_wavs(&input, 3);
    fs::write(input.join("bad.wav"), b"RIFF????").unwrap();
    let out = tmp.path().join("out");
    let noise = noise_dir(tmp.path());
    let o = speechaug(&["augment", "--in", p(&input), "--out", p(&out), "--noise-dir", p(&noise), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let report = fs::read_to_string(out.join("failures.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1);
    assert!(report.contains("\"bad\""));
    assert_eq!(fs::read_to_string(out.join("traces.jsonl")).unwrap().lines().count(), 3);
}

fn stats_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("stats.json")).unwrap()).unwrap()
}

#[test]
fn empty_corpus_gives_empty_output() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("empty.txt");
    fs::write(&corpus, "").unwrap();
    let out = tmp.path().join("text");
    let o = speechaug(&["textaug", "--in", p(&corpus), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("pairs.tsv")).unwrap(), "");
    let stats = stats_json(&out);
    assert_eq!(stats["input"], 0);
    assert_eq!(stats["accepted"], 0);
    assert_eq!(stats["translation_failures"], 0);
}

#[test]
fn textaug_counts_every_sentence() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.txt");
    fs::write(
        &corpus,
        "good morning everyone\n\
         see https://example.com for details\n\
         \n\
         (laughs) that was great\n\
         we will go to the station now\n\
         yes yes yes yes\n",
    )
    .unwrap();
    let out = tmp.path().join("text");
    let o = speechaug(&["textaug", "--in", p(&corpus), "--out", p(&out), "--translator", "reverse"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats = stats_json(&out);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, stats);
    assert_eq!(stats["cleaning"]["url"], 1);
    assert_eq!(stats["cleaning"]["bracketed"], 1);
    assert_eq!(stats["cleaning"]["empty"], 1);
    assert_eq!(stats["filtering"]["repetition"], 1);
    let sum = |v: &serde_json::Value| v.as_object().unwrap().values().map(|x| x.as_u64().unwrap()).sum::<u64>();
    let rejected = sum(&stats["cleaning"]) + sum(&stats["filtering"]);
    assert_eq!(stats["accepted"].as_u64().unwrap() + rejected, stats["input"].as_u64().unwrap());
    let pairs = fs::read_to_string(out.join("pairs.tsv")).unwrap();
    assert_eq!(pairs.lines().count(), 2);
    assert!(pairs.lines().next().unwrap().ends_with("\teveryone morning good\tgood morning everyone"));
}

#[test]
fn take_n_needs_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c.txt");
    fs::write(&corpus, "a b\nc d\n").unwrap();
    let o = speechaug(&["textaug", "--in", p(&corpus), "--out", p(tmp.path()), "--take-n", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unreadable_corpus_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = speechaug(&["textaug", "--in", p(&tmp.path().join("nope.txt")), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn build_with_mocks_writes_one_record_per_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.tsv");
    let lines: String = (0..10)
        .map(|i| format!("en-{i:08}\thola mundo numero {i}\thello world number {i}\n"))
        .collect();
    fs::write(&pairs, lines).unwrap();
    let noise = noise_dir(tmp.path());
    let out = tmp.path().join("corpus");
    let o = speechaug(&[
        "build", "--pairs", p(&pairs), "--out", p(&out), "--units", "50", "--seed", "9",
        "--noise-dir", p(&noise),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = Manifest::load(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.records.len(), 10);
    let body = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 11, "header plus one line per record");
    assert_eq!(fs::read_dir(out.join("audio")).unwrap().count(), 10);
    for r in &manifest.records {
        assert_eq!(r.origin, Origin::TextAug);
        assert!(r.target_units.units().iter().all(|&u| u < 50));
    }

    let stats = speechaug(&["stats", "--manifest", p(&out.join("manifest.jsonl"))]);
    assert!(stats.status.success());
    let v: serde_json::Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(v["records"], 10);
}

#[test]
fn build_requires_vocabulary_size() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.tsv");
    fs::write(&pairs, "a\tb c\td e\n").unwrap();
    let o = speechaug(&["build", "--pairs", p(&pairs), "--out", p(tmp.path()), "--seed", "1", "--no-effects"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_pairs_report_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.tsv");
    fs::write(&pairs, "a\tb\tc\nonly-two\tfields\n").unwrap();
    let o = speechaug(&[
        "build", "--pairs", p(&pairs), "--out", p(&tmp.path().join("o")), "--units", "8",
        "--seed", "1", "--no-effects",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

fn records(origin: Origin, n: usize) -> Manifest {
    Manifest {
        records: (0..n)
            .map(|i| ManifestRecord {
                id: format!("{origin}-{i}"),
                source_audio: format!("audio/{origin}-{i}.wav"),
                duration_s: 1.5,
                target_units: UnitSequence::reduced(vec![3, 1, 4]).unwrap(),
                origin,
                lang_pair: ("es".into(), "en".into()),
            })
            .collect(),
    }
}

#[test]
fn sample_splits_by_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let real = tmp.path().join("real.jsonl");
    let synth = tmp.path().join("synth.jsonl");
    records(Origin::Real, 30).save(&real).unwrap();
    records(Origin::TextAug, 300).save(&synth).unwrap();
    let o = speechaug(&[
        "sample", "--manifest", p(&real), "--manifest", p(&synth), "--weights",
        "real=0.5,text_aug=0.5", "-n", "100000", "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let ids: Vec<&str> = text.lines().collect();
    assert_eq!(ids.len(), 100_000);
    let real_share = ids.iter().filter(|id| id.starts_with("real-")).count() as f64 / 1e5;
    assert!((0.48..=0.52).contains(&real_share), "{real_share}");

    let again = speechaug(&[
        "sample", "--manifest", p(&real), "--manifest", p(&synth), "-n", "100000", "--seed", "4",
    ]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn sample_from_missing_origin_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let real = tmp.path().join("real.jsonl");
    records(Origin::Real, 3).save(&real).unwrap();
    let o = speechaug(&["sample", "--manifest", p(&real), "-n", "5", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = speechaug(&["sample", "--manifest", p(&real), "--weights", "real=1,text_aug=0", "-n", "5", "--seed", "1"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 5);
}

#[test]
fn stats_on_empty_manifest_are_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.jsonl");
    Manifest::default().save(&path).unwrap();
    let o = speechaug(&["stats", "--manifest", p(&path)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["records"], 0);
    assert_eq!(v["total_seconds"], 0.0);
    assert_eq!(v["total_hours"], 0.0);
}

#[test]
fn malformed_manifest_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.jsonl");
    records(Origin::Real, 2).save(&path).unwrap();
    let mut body = fs::read_to_string(&path).unwrap();
    body.push_str("{not json}\n");
    fs::write(&path, body).unwrap();
    let o = speechaug(&["stats", "--manifest", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn real_manifest_sources_can_be_augmented() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("real");
    let mut m = records(Origin::Real, 4);
    fs::create_dir_all(dir.join("audio")).unwrap();
    for r in &mut m.records {
        save_wav(&tone(4000, 300.0), dir.join(&r.source_audio), WavEncoding::Float32).unwrap();
        r.duration_s = 0.25;
    }
    m.save(dir.join("manifest.jsonl")).unwrap();
    let noise = noise_dir(tmp.path());
    let out = tmp.path().join("aug");
    let o = speechaug(&[
        "augment-manifest", "--manifest", p(&dir.join("manifest.jsonl")), "--out", p(&out),
        "--noise-dir", p(&noise), "--seed", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let aug = Manifest::load(out.join("manifest.jsonl")).unwrap();
    assert_eq!(aug.records.len(), 4);
    for (a, b) in aug.records.iter().zip(&m.records) {
        assert_eq!(a.target_units, b.target_units);
        assert!(out.join(&a.source_audio).exists());
    }
}
