//! Experiment configuration: a sectioned TOML file merged with command-line
//! flags (flags win).
//!
//! ```toml
//! [run]
//! datasets = ["data/a.json", "data/b.json"]
//! out = "runs/combined"
//! seed = 123
//! model_kind = "orthogonal_head"
//! vocab = ["vocab/concepts.sidt"]
//!
//! [head]
//! k = 8
//! lambda = 0.33
//!
//! [concept]
//! beta = 1e-4
//! ```
//!
//! Relative paths inside a config file resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clipsid::checkpoint::ModelKind;
use clipsid::concept::ConceptTrainConfig;
use clipsid::linear_head::{HeadMode, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    datasets: Vec<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    model_kind: Option<ModelKind>,
    vocab: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    run: RunSection,
    head: TrainConfig,
    concept: ConceptTrainConfig,
}

/// Flag values that override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub datasets: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model_kind: Option<ModelKind>,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub vocab: Vec<PathBuf>,
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub datasets: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub vocab: Vec<PathBuf>,
    pub head: TrainConfig,
    pub concept: ConceptTrainConfig,
}

fn rebase(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn resolve(config: Option<&Path>, flags: Overrides) -> Result<Self> {
        let file = match config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let mut cfg: ConfigFile =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.run.datasets = cfg.run.datasets.into_iter().map(|p| rebase(base, p)).collect();
                cfg.run.vocab = cfg.run.vocab.into_iter().map(|p| rebase(base, p)).collect();
                cfg.run.out = cfg.run.out.map(|p| rebase(base, p));
                cfg
            }
            None => ConfigFile::default(),
        };
        let ConfigFile {
            run,
            mut head,
            mut concept,
        } = file;

        let datasets = if flags.datasets.is_empty() { run.datasets } else { flags.datasets };
        let vocab = if flags.vocab.is_empty() { run.vocab } else { flags.vocab };
        let out = flags.out.or(run.out).context("no output directory: pass --out or set run.out")?;
        let model_kind = flags.model_kind.or(run.model_kind).unwrap_or(ModelKind::OrthogonalHead);
        // a single seed drives every random stream
        let seed = flags.seed.or(run.seed).unwrap_or(head.seed);
        head.seed = seed;
        concept.seed = seed;
        if let Some(k) = flags.k {
            head.k = k;
        }
        if let Some(lambda) = flags.lambda {
            head.lambda = lambda;
        }
        head.mode = match model_kind {
            ModelKind::LinearProbe => HeadMode::LinearProbe,
            _ => HeadMode::OrthogonalHead,
        };

        let exp = Experiment {
            datasets,
            out,
            seed,
            model_kind,
            vocab,
            head,
            concept,
        };
        exp.validate()?;
        Ok(exp)
    }

    fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            bail!("no dataset: pass --dataset or set run.datasets");
        }
        for p in self.datasets.iter().chain(&self.vocab) {
            if !p.exists() {
                bail!("input not found: {}", p.display());
            }
        }
        match self.model_kind {
            ModelKind::Concept => {
                if self.vocab.len() != 1 {
                    bail!("the concept model needs exactly one --vocab, got {}", self.vocab.len());
                }
                self.concept.validate()?;
            }
            _ => self.head.validate()?,
        }
        Ok(())
    }
}
