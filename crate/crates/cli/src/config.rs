//! Pipeline configuration: one TOML document, one section per stage.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! `--set section.key=value` overrides (applied in the order given).

use std::path::{Path, PathBuf};

use biembed_core::curation::CurationConfig;
use biembed_core::encoder::EncoderConfig;
use biembed_core::synth::SynthConfig;
use biembed_core::training::{DatasetManifest, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Training text for the first language.
    pub corpus_a: Option<PathBuf>,
    /// Training text for the second language.
    pub corpus_b: Option<PathBuf>,
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            corpus_a: None,
            corpus_b: None,
            vocab_size: 4096,
        }
    }
}

/// Masked-LM pretraining: training hyperparameters plus corpora.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage1Section {
    /// Defaults to `tokenizer.corpus_a`.
    pub corpus_a: Option<PathBuf>,
    /// Defaults to `tokenizer.corpus_b`.
    pub corpus_b: Option<PathBuf>,
    pub held_out_frac: f64,
    /// Seed of the parameter initializer.
    pub init_seed: u64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            corpus_a: None,
            corpus_b: None,
            held_out_frac: 0.01,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Contrastive stages: training hyperparameters plus dataset manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TaskStageSection {
    pub datasets: Vec<DatasetManifest>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CurationSection {
    /// Raw pair records (JSONL with `q`, `p`).
    pub input: Option<PathBuf>,
    /// Run the consistency filter with the newest model in the run directory.
    pub use_model: bool,
    #[serde(flatten)]
    pub params: CurationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalTaskManifest {
    Sts {
        name: String,
        path: PathBuf,
        /// Gold scores are divided by this before correlation (no effect on
        /// the metrics, kept for symmetry with training manifests).
        #[serde(default)]
        score_max: Option<f64>,
    },
    Retrieval {
        name: String,
        corpus: PathBuf,
        queries: PathBuf,
        qrels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tasks: Vec<EvalTaskManifest>,
    /// Cutoff for nDCG and recall.
    pub k: usize,
    /// Label used in reports.
    pub model_name: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: Vec::new(),
            k: 10,
            model_name: "biembed".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerSection,
    pub model: EncoderConfig,
    pub stage1: Stage1Section,
    pub stage2: TaskStageSection,
    pub stage3: TaskStageSection,
    pub curation: CurationSection,
    pub eval: EvalSection,
    pub synth: SynthConfig,
}

const SECTIONS: [&str; 8] = [
    "tokenizer", "model", "stage1", "stage2", "stage3", "curation", "eval", "synth",
];

fn config_err(path: impl std::fmt::Display, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

/// Deserializes with the failing field path in the message.
fn typed<T: DeserializeOwned>(section: &str, value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let at = if inner == "." || inner.is_empty() {
            section.to_string()
        } else if inner.starts_with('[') {
            format!("{section}{inner}")
        } else {
            format!("{section}.{inner}")
        };
        config_err(at, e.into_inner())
    })
}

/// Splits CLI-level keys from the `TrainConfig` keys of a stage section;
/// `flatten` cannot be combined with unknown-field rejection.
fn take(table: &mut Table, key: &str) -> Option<Value> {
    table.remove(key)
}

fn parse_stage1(mut t: Table) -> Result<Stage1Section, CliError> {
    let d = Stage1Section::default();
    let path = |v: Option<Value>, k: &str| -> Result<Option<PathBuf>, CliError> {
        v.map(|v| typed::<PathBuf>(&format!("stage1.{k}"), v)).transpose()
    };
    let corpus_a = path(take(&mut t, "corpus_a"), "corpus_a")?;
    let corpus_b = path(take(&mut t, "corpus_b"), "corpus_b")?;
    let held_out_frac = match take(&mut t, "held_out_frac") {
        Some(v) => typed("stage1.held_out_frac", v)?,
        None => d.held_out_frac,
    };
    let init_seed = match take(&mut t, "init_seed") {
        Some(v) => typed("stage1.init_seed", v)?,
        None => d.init_seed,
    };
    Ok(Stage1Section {
        corpus_a,
        corpus_b,
        held_out_frac,
        init_seed,
        train: typed("stage1", Value::Table(t))?,
    })
}

fn parse_task_stage(name: &str, mut t: Table) -> Result<TaskStageSection, CliError> {
    let datasets = match take(&mut t, "datasets") {
        Some(v) => typed(&format!("{name}.datasets"), v)?,
        None => Vec::new(),
    };
    Ok(TaskStageSection {
        datasets,
        train: typed(name, Value::Table(t))?,
    })
}

fn parse_curation(mut t: Table) -> Result<CurationSection, CliError> {
    let input = take(&mut t, "input")
        .map(|v| typed::<PathBuf>("curation.input", v))
        .transpose()?;
    let use_model = match take(&mut t, "use_model") {
        Some(v) => typed("curation.use_model", v)?,
        None => false,
    };
    Ok(CurationSection {
        input,
        use_model,
        params: typed("curation", Value::Table(t))?,
    })
}

fn section<T: DeserializeOwned + Default>(root: &mut Table, name: &str) -> Result<T, CliError> {
    match root.remove(name) {
        Some(v) => typed(name, v),
        None => Ok(T::default()),
    }
}

fn section_table(root: &mut Table, name: &str) -> Result<Table, CliError> {
    match root.remove(name) {
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(config_err(name, "expected a table")),
        None => Ok(Table::new()),
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` onto the document, creating tables as needed.
pub fn apply_override(root: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(spec, "override must look like section.key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "empty path segment"));
    }
    let mut table = root;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(config_err(parts[..=i].join("."), "is not a table")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Builds the config from an already-merged document.
    pub fn from_table(mut root: Table) -> Result<Self, CliError> {
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(config_err(
                k,
                format!("unknown section (expected one of {})", SECTIONS.join(", ")),
            ));
        }
        let stage1 = parse_stage1(section_table(&mut root, "stage1")?)?;
        let stage2 = parse_task_stage("stage2", section_table(&mut root, "stage2")?)?;
        let stage3 = parse_task_stage("stage3", section_table(&mut root, "stage3")?)?;
        let cfg = PipelineConfig {
            tokenizer: section(&mut root, "tokenizer")?,
            model: section(&mut root, "model")?,
            stage1,
            stage2,
            stage3,
            curation: parse_curation(section_table(&mut root, "curation")?)?,
            eval: section(&mut root, "eval")?,
            synth: section(&mut root, "synth")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any), applies overrides, resolves relative paths
    /// against the config file's directory and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| config_err(p.display(), e.to_string().trim_end()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg = Self::from_table(root)?;
        let base = match path.and_then(|p| p.parent()) {
            Some(dir) if !dir.as_os_str().is_empty() => dir.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let wrap = |section: &str, r: biembed_core::Result<()>| {
            r.map_err(|e| config_err(section, e.to_string().trim_start_matches("configuration error: ")))
        };
        if self.tokenizer.vocab_size < 261 {
            return Err(config_err(
                "tokenizer.vocab_size",
                format!("must be at least 261 (specials plus bytes), got {}", self.tokenizer.vocab_size),
            ));
        }
        wrap("model", self.model.validate())?;
        if self.model.vocab_size < self.tokenizer.vocab_size {
            return Err(config_err(
                "model.vocab_size",
                format!(
                    "{} is smaller than tokenizer.vocab_size {}",
                    self.model.vocab_size, self.tokenizer.vocab_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.stage1.held_out_frac) {
            return Err(config_err("stage1.held_out_frac", "must lie in [0, 1)"));
        }
        wrap("stage1", self.stage1.train.validate())?;
        wrap("stage2", self.stage2.train.validate())?;
        wrap("stage3", self.stage3.train.validate())?;
        wrap("curation", self.curation.params.validate())?;
        if self.eval.k == 0 {
            return Err(config_err("eval.k", "must be positive"));
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.tokenizer.corpus_a,
            &mut self.tokenizer.corpus_b,
            &mut self.stage1.corpus_a,
            &mut self.stage1.corpus_b,
            &mut self.curation.input,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for d in self.stage2.datasets.iter_mut().chain(self.stage3.datasets.iter_mut()) {
            let mut p = PathBuf::from(&d.path);
            fix(&mut p);
            d.path = p.to_string_lossy().into_owned();
        }
        for t in &mut self.eval.tasks {
            match t {
                EvalTaskManifest::Sts { path, .. } => fix(path),
                EvalTaskManifest::Retrieval {
                    corpus,
                    queries,
                    qrels,
                    ..
                } => {
                    fix(corpus);
                    fix(queries);
                    fix(qrels);
                }
            }
        }
    }

    /// The fully resolved config as TOML; loading it back yields `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
