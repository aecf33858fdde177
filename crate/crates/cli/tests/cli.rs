use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipsid::checkpoint::{Checkpoint, Model};
use clipsid::dataset::{write_dataset, Term, Vocabulary, VocabularyKind};
use clipsid::linear_head::inputs_for;
use clipsid::metrics::evaluate_per_generator;
use clipsid::planted::{planted_linear, PlantedSpec};
use clipsid::Split;
use ndarray::Array2;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipsid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn planted(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let ds = planted_linear(&PlantedSpec {
        name: name.into(),
        seed,
        generators: vec!["GenA".into(), "GenB".into()],
        ..PlantedSpec::default()
    });
    write_dataset(&ds, dir, name).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run_metadata.json" && e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = planted(tmp.path(), "a", 1);
    let out = tmp.path().join("run");
    ok(&["train", "--dataset", s(&data), "--out", s(&out)]);
    assert!(out.join("checkpoint.json").exists());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,penalty\n"));
    assert!(log.lines().count() >= 2);
    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["config"]["head"]["k"], 8);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 4, "manifest plus hidden, joint and projection tensors");
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(out.join("run_metadata.json").exists());
}

#[test]
fn identical_runs_give_identical_outputs() {
    let tmp = TempDir::new().unwrap();
    let data = planted(tmp.path(), "a", 2);
    let out = tmp.path().join("run");
    let ev = tmp.path().join("eval");
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ok(&["train", "--dataset", s(&data), "--out", s(&out), "--seed", "9"]);
        ok(&["eval", "--checkpoint", s(&out), "--dataset", s(&data), "--out", s(&ev)]);
        snapshots.push((dir_bytes(&out), dir_bytes(&ev)));
    }
    assert_eq!(snapshots[0], snapshots[1]);
    assert_eq!(snapshots[0].0.len(), 5, "checkpoint, two tensors, log, manifest");
}

#[test]
fn combined_training_pools_train_splits() {
    let tmp = TempDir::new().unwrap();
    let a = planted(tmp.path(), "a", 3);
    let b = planted(tmp.path(), "b", 4);
    let out = tmp.path().join("run");
    ok(&["train", "--dataset", s(&a), "--dataset", s(&b), "--out", s(&out)]);
    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["train_records"], 800);
    assert_eq!(manifest["train_dataset"], "combined");
}

#[test]
fn eval_matches_library_metrics_and_supports_cross_dataset() {
    let tmp = TempDir::new().unwrap();
    let a = planted(tmp.path(), "a", 5);
    let b = planted(tmp.path(), "b", 6);
    let run_dir = tmp.path().join("run");
    let ev = tmp.path().join("eval");
    ok(&["train", "--dataset", s(&a), "--out", s(&run_dir)]);
    ok(&["eval", "--checkpoint", s(&run_dir), "--dataset", s(&a), "--dataset", s(&b), "--out", s(&ev)]);

    let summary = read_json(&ev.join("eval_summary.json"));
    let results = summary["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[1]["test_dataset"], "b");
    assert_eq!(summary["train_dataset"], "a");

    let ck = Checkpoint::load(&run_dir).unwrap();
    let Model::Head(model) = ck.model else { panic!("head expected") };
    for (path, file) in [(&a, "eval_a.csv"), (&b, "eval_b.csv")] {
        let ds = clipsid::load_dataset(path).unwrap();
        let view = ds.select(Split::Test, None).unwrap();
        let scores = model.predict_proba(&inputs_for(model.mode, &view)).unwrap();
        let records: Vec<_> = view.records().collect();
        let want = evaluate_per_generator(&scores, &records, 0.5, None).unwrap();
        let got = fs::read_to_string(ev.join(file)).unwrap();
        assert_eq!(got, want.to_csv());
        assert_eq!(got.lines().count(), 1 + 2 + 1, "header, one row per generator, mAP");
    }
}

#[test]
fn eval_rejects_incompatible_dimensions() {
    let tmp = TempDir::new().unwrap();
    let a = planted(tmp.path(), "a", 7);
    let narrow = write_dataset(
        &planted_linear(&PlantedSpec {
            name: "narrow".into(),
            d: 32,
            ..PlantedSpec::default()
        }),
        tmp.path(),
        "narrow",
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    ok(&["train", "--dataset", s(&a), "--out", s(&run_dir)]);
    let out = run(&["eval", "--checkpoint", s(&run_dir), "--dataset", s(&narrow), "--out", s(&tmp.path().join("e"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("expected 64, found 32"), "{err}");
}

fn three_term_vocab(dir: &Path, p: usize) -> PathBuf {
    let mut emb = Array2::zeros((3, p));
    emb[[0, 0]] = 1.0;
    emb[[1, 1]] = 1.0;
    emb[[2, 0]] = -0.6;
    emb[[2, 2]] = 0.8;
    let terms = ["grainy", "smooth", "glossy"]
        .iter()
        .map(|t| Term {
            name: t.to_string(),
            category: "texture".into(),
        })
        .collect();
    let path = dir.join("three.sidt");
    Vocabulary::new("three", VocabularyKind::Plain, terms, emb)
        .unwrap()
        .save(&path)
        .unwrap();
    path
}

#[test]
fn interpret_with_identity_projection() {
    let tmp = TempDir::new().unwrap();
    let mut ds = planted_linear(&PlantedSpec {
        name: "square".into(),
        d: 8,
        p: 8,
        ..PlantedSpec::default()
    });
    ds.projection = Some(Array2::eye(8));
    ds.joint = ds.hidden.clone();
    let data = write_dataset(&ds, tmp.path(), "square").unwrap();
    let vocab = three_term_vocab(tmp.path(), 8);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--dataset", s(&data), "--out", s(&run_dir), "--k", "3"]);
    let mut outputs = Vec::new();
    for name in ["i1", "i2"] {
        let out = tmp.path().join(name);
        ok(&["interpret", "--checkpoint", s(&run_dir), "--dataset", s(&data), "--vocab", s(&vocab), "--out", s(&out)]);
        outputs.push(out);
    }
    let ranking = fs::read_to_string(outputs[0].join("terms_three.csv")).unwrap();
    assert_eq!(ranking, fs::read_to_string(outputs[1].join("terms_three.csv")).unwrap());
    assert_eq!(ranking.lines().count(), 1 + 3 * 3);

    // delta-mu summed over dimensions is the class gap in mean logit
    let delta: f64 = fs::read_to_string(outputs[0].join("delta_mu.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    let Model::Head(model) = Checkpoint::load(&run_dir).unwrap().model else { panic!() };
    let stored = clipsid::load_dataset(&data).unwrap();
    let view = stored.select(Split::Test, None).unwrap();
    let logits = model.forward(&view.hidden()).unwrap().logits;
    let labels = view.labels();
    let mean = |want: f64| {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
        idx.iter().map(|&i| logits[i]).sum::<f64>() / idx.len() as f64
    };
    assert!((delta - (mean(1.0) - mean(0.0))).abs() < 1e-9);
}

#[test]
fn interpret_names_the_missing_projection_field() {
    let tmp = TempDir::new().unwrap();
    let mut ds = planted_linear(&PlantedSpec {
        name: "bare".into(),
        ..PlantedSpec::default()
    });
    ds.projection = None;
    let data = write_dataset(&ds, tmp.path(), "bare").unwrap();
    let vocab = three_term_vocab(tmp.path(), 16);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--dataset", s(&data), "--out", s(&run_dir)]);
    let out = run(&["interpret", "--checkpoint", s(&run_dir), "--dataset", s(&data), "--vocab", s(&vocab), "--out", s(&tmp.path().join("i"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("projection_file"), "{err}");
}

#[test]
fn concept_pipeline_from_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["planted", "--kind", "concept", "--out", s(&data), "--name", "pc"]);
    let cfg = tmp.path().join("exp.toml");
    fs::write(
        &cfg,
        "[run]\ndatasets = [\"data/pc.json\"]\nvocab = [\"data/concepts.sidt\"]\nmodel_kind = \"concept\"\nout = \"crun\"\n\n[concept]\nmax_epochs = 400\n",
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg)]);
    let run_dir = tmp.path().join("crun");
    let meta = read_json(&run_dir.join("checkpoint.json"));
    assert_eq!(meta["model_kind"], "concept");
    assert!(meta["final_epoch"].as_u64().unwrap() <= 400);

    let out = tmp.path().join("report");
    ok(&[
        "interpret",
        "--checkpoint",
        s(&run_dir),
        "--dataset",
        s(&data.join("pc.json")),
        "--vocab",
        s(&data.join("concepts.sidt")),
        "--out",
        s(&out),
    ]);
    let report = fs::read_to_string(out.join("concept_report.csv")).unwrap();
    let aucs: Vec<f64> = report
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(aucs.len(), 12);
    assert!(aucs.windows(2).all(|w| w[0] >= w[1]), "{aucs:?}");
    assert!(out.join("concept_plot.csv").exists());
}

#[test]
fn flags_override_config() {
    let tmp = TempDir::new().unwrap();
    let data = planted(tmp.path(), "a", 8);
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, "[run]\nout = \"from-config\"\n[head]\nk = 4\nlambda = 0.5\n").unwrap();
    let out = tmp.path().join("from-flag");
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&out), "--k", "2"]);
    let manifest = read_json(&out.join("run_manifest.json"));
    assert_eq!(manifest["config"]["head"]["k"], 2);
    assert_eq!(manifest["config"]["head"]["lambda"], 0.5);
    assert!(!tmp.path().join("from-config").exists());
}

#[test]
fn k_sweep_writes_four_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let data = planted(tmp.path(), "a", 9);
    let out = tmp.path().join("sweep");
    ok(&["train", "--dataset", s(&data), "--out", s(&out), "--k-sweep"]);
    for k in [2, 4, 8, 16] {
        assert!(out.join(format!("k{k}")).join("checkpoint.json").exists());
    }
    let maps: Vec<f64> = fs::read_to_string(out.join("k_sweep.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let spread = maps.iter().copied().fold(f64::MIN, f64::max) - maps.iter().copied().fold(f64::MAX, f64::min);
    assert!(spread <= 0.03, "{maps:?}");
}

#[test]
fn zeroshot_selects_the_aligned_prompt() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["planted", "--out", s(&data)]);
    let out = tmp.path().join("zs");
    ok(&["zeroshot", "--dataset", s(&data.join("planted.json")), "--vocab", s(&data.join("prompts.sidt")), "--out", s(&out)]);
    let summary = read_json(&out.join("zeroshot_summary.json"));
    assert_eq!(summary["prompt"], "aligned");
    assert!(summary["results"][0]["map"].as_f64().unwrap() > 0.99);
    let selection = fs::read_to_string(out.join("prompt_selection.csv")).unwrap();
    assert_eq!(selection.lines().count(), 1 + 5);
}

#[test]
fn build_vocab_and_validate() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&["planted", "--out", s(&data)]);
    let vocab = tmp.path().join("v").join("antonyms.sidt");
    ok(&["build-vocab", "--vocab", s(&data.join("antonym_poles.sidt")), "--out", s(&vocab)]);
    let report = ok(&["validate-data", "--dataset", s(&data.join("planted.json")), "--vocab", s(&vocab)]);
    assert!(report.contains("168 vocabulary terms"), "{report}");
    let loaded = clipsid::load_vocabulary(&vocab, Some(16)).unwrap();
    assert_eq!(loaded.kind, VocabularyKind::AntonymDirection);
}

#[test]
fn missing_input_fails_with_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["train", "--dataset", "/nonexistent/x.json", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn shipped_prompt_texts_parse() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/zero_shot_prompts.json");
    let sidecar = clipsid::dataset::read_sidecar(&path).unwrap();
    let clipsid::dataset::Sidecar::PromptPairs { pairs } = sidecar else { panic!("wrong kind") };
    assert_eq!(pairs.len(), 10);
    assert_eq!(pairs[0].real, "A real photograph");
    assert_eq!(pairs[0].synthetic, "An AI-generated image");
}
