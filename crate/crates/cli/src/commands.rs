use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{bail, ensure, Context, Result};
use clipsid::checkpoint::{vocabulary_fingerprint, Checkpoint, Model, ModelKind};
use clipsid::concept::{self, train_concept, ConceptModel};
use clipsid::dataset::{read_sidecar, sidecar_path, write_dataset, DatasetView, Sidecar};
use clipsid::interpret::{concept_report, contribution_report, model_directions, rank_vocabulary, top_activating_samples};
use clipsid::linear_head::{self, inputs_for, HeadMode, LinearHeadModel};
use clipsid::metrics::{evaluate_per_generator, optimal_balanced_threshold, EvalReport};
use clipsid::planted::{self, PlantedConceptSpec, PlantedSpec};
use clipsid::zeroshot::{
    build_antonym_vocabulary, load_antonym_entries, load_prompt_pairs, save_antonym_entries, save_prompt_pairs,
    select_best_prompt, zero_shot_scores,
};
use clipsid::{load_dataset, load_vocabulary, EmbeddingDataset, Split, Vocabulary};
use ndarray::Axis;
use serde::Serialize;
use serde_json::json;

use crate::config::{Experiment, Overrides};
use crate::manifest::{dataset_files, hash_inputs, text_embedding_files, write_json, write_metadata, write_text};
use crate::{BuildVocabArgs, EvalArgs, InterpretArgs, PlantedArgs, PlantedKind, TrainArgs, ValidateArgs, ZeroshotArgs};

const K_SWEEP: [usize; 4] = [2, 4, 8, 16];
const THRESHOLD: f64 = 0.5;

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// One dataset as is, several pooled under the name `combined`.
fn training_dataset(paths: &[PathBuf]) -> Result<EmbeddingDataset> {
    let mut parts = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts.remove(0));
    }
    Ok(EmbeddingDataset::combine("combined", &parts)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// File-name-safe form of a dataset name, unique within `taken`.
fn file_stem(name: &str, taken: &mut Vec<String>) -> String {
    let base: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let mut stem = base.clone();
    let mut n = 2;
    while taken.contains(&stem) {
        stem = format!("{base}_{n}");
        n += 1;
    }
    taken.push(stem.clone());
    stem
}

fn input_hashes(datasets: &[PathBuf], text_files: &[PathBuf], checkpoint: Option<&Path>) -> Result<serde_json::Value> {
    let mut files = Vec::new();
    for d in datasets {
        files.extend(dataset_files(d)?);
    }
    for t in text_files {
        files.extend(text_embedding_files(t));
    }
    if let Some(dir) = checkpoint {
        let ck = Checkpoint::load(dir)?;
        files.push(dir.join(clipsid::checkpoint::CHECKPOINT_FILE));
        files.extend(ck.meta.tensors.values().map(|f| dir.join(f)));
    }
    Ok(serde_json::to_value(hash_inputs(&files)?)?)
}

fn head_report(model: &LinearHeadModel, ds: &EmbeddingDataset, split: Split) -> Result<EvalReport> {
    let view = ds.select(split, None)?;
    let scores = model.predict_proba(&inputs_for(model.mode, &view))?;
    let records: Vec<_> = view.records().collect();
    Ok(evaluate_per_generator(&scores, &records, THRESHOLD, None)?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let started = SystemTime::now();
    let exp = Experiment::resolve(
        a.config.as_deref(),
        Overrides {
            datasets: a.dataset,
            out: a.out,
            seed: a.seed,
            model_kind: a.model_kind.map(Into::into),
            k: a.k,
            lambda: a.lambda,
            vocab: a.vocab,
        },
    )?;
    let ds = training_dataset(&exp.datasets)?;
    let n_train = ds.select(Split::Train, None)?.len();
    create_dir(&exp.out)?;

    match exp.model_kind {
        ModelKind::Concept => {
            let vocab = load_vocabulary(&exp.vocab[0], Some(ds.p))
                .with_context(|| format!("loading vocabulary {}", exp.vocab[0].display()))?;
            let (model, log) = train_concept(&ds, &vocab, &exp.concept)?;
            Checkpoint::from_concept(model, &exp.concept, &log, &ds.name, &vocab).save(&exp.out)?;
            write_text(&exp.out.join("train_log.csv"), &log.to_csv())?;
            println!(
                "trained concept model on {} ({n_train} train records): best epoch {}, val loss {:.6}",
                ds.name, log.best_epoch, log.best_val_loss
            );
        }
        _ if a.k_sweep => {
            ensure!(
                exp.model_kind == ModelKind::OrthogonalHead,
                "--k-sweep needs --model-kind orthogonal-head"
            );
            let mut csv = String::from("k,mAP\n");
            let mut maps = Vec::new();
            for k in K_SWEEP {
                let cfg = linear_head::TrainConfig { k, ..exp.head.clone() };
                let (model, log) = linear_head::train(&ds, &cfg)?;
                let report = head_report(&model, &ds, Split::Test)?;
                let dir = exp.out.join(format!("k{k}"));
                Checkpoint::from_head(model, &cfg, &log, &ds.name).save(&dir)?;
                write_text(&dir.join("train_log.csv"), &log.to_csv())?;
                csv.push_str(&format!("{k},{:.6}\n", report.map));
                maps.push(report.map);
            }
            let spread = maps.iter().copied().fold(f64::MIN, f64::max) - maps.iter().copied().fold(f64::MAX, f64::min);
            write_text(&exp.out.join("k_sweep.csv"), &csv)?;
            println!("k sweep on {}: test mAP {maps:.4?}, spread {spread:.4}", ds.name);
        }
        _ => {
            let (model, log) = linear_head::train(&ds, &exp.head)?;
            let kind = model.mode;
            Checkpoint::from_head(model, &exp.head, &log, &ds.name).save(&exp.out)?;
            write_text(&exp.out.join("train_log.csv"), &log.to_csv())?;
            println!(
                "trained {} on {} ({n_train} train records): best epoch {}, val loss {:.6}",
                match kind {
                    HeadMode::OrthogonalHead => "orthogonal_head",
                    HeadMode::LinearProbe => "linear_probe",
                },
                ds.name,
                log.best_epoch,
                log.best_val_loss
            );
        }
    }

    let vocab_files = if exp.model_kind == ModelKind::Concept { exp.vocab.clone() } else { Vec::new() };
    write_json(
        &exp.out.join("run_manifest.json"),
        &json!({
            "command": "train",
            "config": exp,
            "train_dataset": ds.name,
            "train_records": n_train,
            "inputs": input_hashes(&exp.datasets, &vocab_files, None)?,
        }),
    )?;
    write_metadata(&exp.out, "train", started)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// The concept vocabulary for a checkpoint, checked against the one it
/// was trained with.
fn concept_vocabulary(ck: &Checkpoint, path: Option<&Path>, p: usize) -> Result<Vocabulary> {
    let path = path.context("concept checkpoints need --vocab")?;
    let vocab = load_vocabulary(path, Some(p)).with_context(|| format!("loading vocabulary {}", path.display()))?;
    if let Some(meta) = &ck.meta.concept {
        let found = vocabulary_fingerprint(&vocab);
        if found != meta.vocabulary_hash {
            bail!(
                "vocabulary {} (fingerprint {found}) differs from the training vocabulary {:?} (fingerprint {})",
                path.display(),
                meta.vocabulary,
                meta.vocabulary_hash
            );
        }
    }
    Ok(vocab)
}

fn predict(model: &Model, view: &DatasetView<'_>, vocab: Option<&Vocabulary>) -> Result<Vec<f64>> {
    Ok(match model {
        Model::Head(m) => m.predict_proba(&inputs_for(m.mode, view))?,
        Model::Concept(m) => concept::predict_proba(m, &view.joint(), vocab.expect("checked by caller"))?,
    })
}

#[derive(Serialize)]
struct EvalEntry {
    test_dataset: String,
    report_file: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let started = SystemTime::now();
    let ck = load_checkpoint(&a.checkpoint)?;
    let split: Split = a.split.into();
    let gens = (!a.generator.is_empty()).then_some(a.generator.as_slice());
    create_dir(&a.out)?;
    let mut taken = Vec::new();
    let mut results = Vec::new();
    for path in &a.dataset {
        let ds = load(path)?;
        let vocab = match ck.model {
            Model::Concept(_) => Some(concept_vocabulary(&ck, a.vocab.as_deref(), ds.p)?),
            Model::Head(_) => None,
        };
        let view = ds.select(split, gens)?;
        ensure!(!view.is_empty(), "dataset {} has no {split} records", ds.name);
        let scores = predict(&ck.model, &view, vocab.as_ref()).with_context(|| format!("scoring {}", ds.name))?;
        let records: Vec<_> = view.records().collect();
        let report = evaluate_per_generator(&scores, &records, THRESHOLD, gens)?;
        let file = format!("eval_{}.csv", file_stem(&ds.name, &mut taken));
        write_text(&a.out.join(&file), &report.to_csv())?;
        println!("{} -> {} ({split}): mAP {:.4}", ck.meta.train_dataset, ds.name, report.map);
        results.push(EvalEntry {
            test_dataset: ds.name.clone(),
            report_file: file,
            report,
        });
    }
    write_json(
        &a.out.join("eval_summary.json"),
        &json!({
            "train_dataset": ck.meta.train_dataset,
            "model_kind": ck.meta.model_kind,
            "split": split,
            "results": results,
        }),
    )?;
    let vocab_files: Vec<PathBuf> = a.vocab.iter().cloned().collect();
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "eval",
            "checkpoint": a.checkpoint,
            "split": split,
            "generators": a.generator,
            "inputs": input_hashes(&a.dataset, &vocab_files, Some(&a.checkpoint))?,
        }),
    )?;
    write_metadata(&a.out, "eval", started)
}

fn samples_csv(activations: &ndarray::Array2<f64>, ids: &[String], count: usize) -> Result<String> {
    let count = count.min(ids.len());
    let mut out = String::from("direction,end,rank,id\n");
    for j in 0..activations.ncols() {
        let (hi, lo) = top_activating_samples(activations, ids, j, count)?;
        for (end, list) in [("top", hi), ("bottom", lo)] {
            for (r, id) in list.iter().enumerate() {
                out.push_str(&format!("{j},{end},{},{}\n", r + 1, csv_escape(id)));
            }
        }
    }
    Ok(out)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn interpret(a: InterpretArgs) -> Result<()> {
    let started = SystemTime::now();
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = load(&a.dataset)?;
    let split: Split = a.split.into();
    let view = ds.select(split, None)?;
    ensure!(!view.is_empty(), "dataset {} has no {split} records", ds.name);
    let labels = view.labels();
    create_dir(&a.out)?;
    let mut written = Vec::new();

    match &ck.model {
        Model::Head(m) if m.mode == HeadMode::OrthogonalHead => {
            let x = view.hidden();
            let report = contribution_report(m, &x, &labels)?;
            write_text(&a.out.join("delta_mu.csv"), &report.delta_mu_csv())?;
            written.push("delta_mu.csv".to_string());
            let act = m.forward(&x)?.activations;
            write_text(&a.out.join("samples.csv"), &samples_csv(&act, &view.ids(), a.samples)?)?;
            written.push("samples.csv".to_string());
            if !a.vocab.is_empty() {
                let dirs = model_directions(m, &ds)?;
                written.extend(rank_all(&dirs, &a.vocab, ds.p, a.top, &a.out)?);
            }
        }
        Model::Head(m) => {
            // a probe has one direction, already in the joint space
            let dirs = m.w2.clone().insert_axis(Axis(1));
            let scores = view.joint().dot(&m.w2).insert_axis(Axis(1));
            write_text(&a.out.join("samples.csv"), &samples_csv(&scores, &view.ids(), a.samples)?)?;
            written.push("samples.csv".to_string());
            written.extend(rank_all(&dirs, &a.vocab, ds.p, a.top, &a.out)?);
        }
        Model::Concept(m) => {
            ensure!(a.vocab.len() <= 1, "concept checkpoints take a single --vocab");
            let vocab = concept_vocabulary(&ck, a.vocab.first().map(PathBuf::as_path), ds.p)?;
            let report = concept_report(m, &view.joint(), &labels, &vocab)?;
            write_text(&a.out.join("concept_report.csv"), &report.to_csv(a.concepts))?;
            write_text(&a.out.join("concept_plot.csv"), &report.plot_csv(a.concepts))?;
            written.extend(["concept_report.csv".to_string(), "concept_plot.csv".to_string()]);
            print_concepts(m, &report.concepts[..a.concepts.min(report.concepts.len()).min(5)]);
        }
    }
    println!("wrote {} to {}", written.join(", "), a.out.display());
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "interpret",
            "checkpoint": a.checkpoint,
            "split": split,
            "top": a.top,
            "samples": a.samples,
            "concepts": a.concepts,
            "inputs": input_hashes(std::slice::from_ref(&a.dataset), &a.vocab, Some(&a.checkpoint))?,
        }),
    )?;
    write_metadata(&a.out, "interpret", started)
}

fn print_concepts(model: &ConceptModel, top: &[clipsid::interpret::ConceptStats]) {
    for c in top {
        println!("  {:<24} weight {:+.4}  AUC {:.4}", c.term, model.wc[c.index], c.auc);
    }
}

fn rank_all(
    dirs: &ndarray::Array2<f64>,
    vocabs: &[PathBuf],
    p: usize,
    top: usize,
    out: &Path,
) -> Result<Vec<String>> {
    let mut taken = Vec::new();
    let mut files = Vec::new();
    for path in vocabs {
        let vocab = load_vocabulary(path, Some(p)).with_context(|| format!("loading vocabulary {}", path.display()))?;
        let ranking = rank_vocabulary(dirs, &vocab, top)?;
        let file = format!("terms_{}.csv", file_stem(&vocab.name, &mut taken));
        write_text(&out.join(&file), &ranking.to_csv())?;
        files.push(file);
    }
    Ok(files)
}

pub fn zeroshot(a: ZeroshotArgs) -> Result<()> {
    let started = SystemTime::now();
    let train_path = a.train_dataset.clone().unwrap_or_else(|| a.dataset[0].clone());
    let train_ds = load(&train_path)?;
    let pairs = load_prompt_pairs(&a.vocab, Some(train_ds.p))
        .with_context(|| format!("loading prompt pairs {}", a.vocab.display()))?;
    let train_view = train_ds.select(Split::Train, None)?;
    ensure!(!train_view.is_empty(), "dataset {} has no train records", train_ds.name);
    create_dir(&a.out)?;

    let (best, best_map) = select_best_prompt(&pairs, &train_view)?;
    let train_images = train_view.joint();
    let train_records: Vec<_> = train_view.records().collect();
    let mut selection = String::from("prompt,train_mAP,selected\n");
    for pair in &pairs {
        let s = zero_shot_scores(&train_images, pair)?;
        let map = evaluate_per_generator(&s, &train_records, THRESHOLD, None)?.map;
        selection.push_str(&format!(
            "{},{map:.6},{}\n",
            csv_escape(&pair.name),
            u8::from(pair.name == best.name)
        ));
    }
    write_text(&a.out.join("prompt_selection.csv"), &selection)?;
    let train_scores = zero_shot_scores(&train_images, best)?;
    let (threshold, train_bacc) = optimal_balanced_threshold(&train_scores, &train_view.labels())?;
    println!(
        "selected prompt {:?} (train mAP {best_map:.4}), balanced-accuracy threshold {threshold:.6}",
        best.name
    );

    let mut taken = Vec::new();
    let mut results = Vec::new();
    for path in &a.dataset {
        let ds = load(path)?;
        ensure!(ds.p == train_ds.p, "dataset {} has p={}, prompts have p={}", ds.name, ds.p, train_ds.p);
        let view = ds.select(Split::Test, None)?;
        ensure!(!view.is_empty(), "dataset {} has no test records", ds.name);
        let scores = zero_shot_scores(&view.joint(), best)?;
        let records: Vec<_> = view.records().collect();
        let report = evaluate_per_generator(&scores, &records, threshold, None)?;
        let file = format!("zeroshot_{}.csv", file_stem(&ds.name, &mut taken));
        write_text(&a.out.join(&file), &report.to_csv())?;
        println!("{}: test mAP {:.4}", ds.name, report.map);
        results.push(EvalEntry {
            test_dataset: ds.name.clone(),
            report_file: file,
            report,
        });
    }
    write_json(
        &a.out.join("zeroshot_summary.json"),
        &json!({
            "prompt": best.name,
            "selection_dataset": train_ds.name,
            "train_map": best_map,
            "threshold": threshold,
            "train_balanced_accuracy": train_bacc,
            "results": results,
        }),
    )?;
    let mut datasets = a.dataset.clone();
    if !datasets.contains(&train_path) {
        datasets.push(train_path);
    }
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "zeroshot",
            "inputs": input_hashes(&datasets, std::slice::from_ref(&a.vocab), None)?,
        }),
    )?;
    write_metadata(&a.out, "zeroshot", started)
}

pub fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let entries =
        load_antonym_entries(&a.vocab, None).with_context(|| format!("loading antonym poles {}", a.vocab.display()))?;
    let name = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .context("--out needs a file name")?;
    let vocab = build_antonym_vocabulary(&name, &entries)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    vocab.save(&a.out)?;
    println!(
        "wrote {} antonym directions (p={}) to {} and {}",
        vocab.len(),
        vocab.p(),
        a.out.display(),
        sidecar_path(&a.out).display()
    );
    Ok(())
}

pub fn validate_data(a: ValidateArgs) -> Result<()> {
    ensure!(
        !a.dataset.is_empty() || !a.vocab.is_empty(),
        "nothing to validate: pass --dataset or --vocab"
    );
    for path in &a.dataset {
        let ds = load(path)?;
        let count = |s| ds.records.iter().filter(|r| r.split == s).count();
        println!(
            "ok {}: dataset {:?}, {} records (train {}, val {}, test {}), d={}, p={}, generators {:?}, projection {}",
            path.display(),
            ds.name,
            ds.len(),
            count(Split::Train),
            count(Split::Val),
            count(Split::Test),
            ds.d,
            ds.p,
            ds.generators(),
            if ds.projection.is_some() { "present" } else { "absent" }
        );
    }
    for path in &a.vocab {
        let sidecar = read_sidecar(&sidecar_path(path)).with_context(|| format!("reading sidecar of {}", path.display()))?;
        let summary = match sidecar {
            Sidecar::Plain { .. } | Sidecar::AntonymDirection { .. } => {
                let v = load_vocabulary(path, None)?;
                format!("{} vocabulary terms, p={}", v.len(), v.p())
            }
            Sidecar::AntonymPoles { .. } => {
                let entries = load_antonym_entries(path, None)?;
                build_antonym_vocabulary("check", &entries)?;
                format!("{} antonym pole pairs", entries.len())
            }
            Sidecar::PromptPairs { .. } => {
                let pairs = load_prompt_pairs(path, None)?;
                format!("{} prompt pairs", pairs.len())
            }
        };
        println!("ok {}: {summary}", path.display());
    }
    Ok(())
}

pub fn planted(a: PlantedArgs) -> Result<()> {
    create_dir(&a.out)?;
    match a.kind {
        PlantedKind::Linear => {
            let mut spec = PlantedSpec {
                name: a.name.clone(),
                shuffle_labels: a.shuffle_labels,
                ..PlantedSpec::default()
            };
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            if !a.generator.is_empty() {
                spec.generators = a.generator.clone();
            }
            let ds = planted::planted_linear(&spec);
            let manifest = write_dataset(&ds, &a.out, &a.name)?;
            let (pairs, texts) = planted::planted_prompts(spec.p, 4, spec.seed);
            save_prompt_pairs(a.out.join("prompts.sidt"), &pairs, &texts)?;
            save_antonym_entries(
                a.out.join("antonym_poles.sidt"),
                &planted::antonym_fixture(168, spec.p, spec.seed),
            )?;
            println!(
                "wrote {} ({} records), prompts.sidt and antonym_poles.sidt to {}",
                manifest.display(),
                ds.len(),
                a.out.display()
            );
        }
        PlantedKind::Concept => {
            ensure!(
                !a.shuffle_labels && a.generator.is_empty(),
                "--shuffle-labels and --generator apply to --kind linear only"
            );
            let mut spec = PlantedConceptSpec::default();
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let (mut ds, vocab) = planted::planted_concepts(&spec);
            ds.name = a.name.clone();
            let manifest = write_dataset(&ds, &a.out, &a.name)?;
            vocab.save(a.out.join("concepts.sidt"))?;
            println!(
                "wrote {} ({} records) and concepts.sidt ({} concepts, informative: {}) to {}",
                manifest.display(),
                ds.len(),
                vocab.len(),
                vocab.terms[spec.informative].name,
                a.out.display()
            );
        }
    }
    Ok(())
}
