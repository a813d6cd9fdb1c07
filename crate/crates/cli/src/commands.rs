//! Subcommands. Each one writes into its own directory under the run
//! directory, together with the resolved config it ran with.

use std::path::{Path, PathBuf};

use biembed_core::curation::{read_jsonl, run_pipeline, write_jsonl, PairRecord};
use biembed_core::encoder::{
    load_checkpoint, save_checkpoint, EncoderEmbedder, EncoderModel, ScalarWidth, TextEmbedder,
};
use biembed_core::eval::{render_table, run_retrieval_eval, run_sts_eval, MetricReport, RetrievalTask, StsTask};
use biembed_core::synth::write_bundle;
use biembed_core::tokenizer::{train_bpe, BpeModel};
use biembed_core::training::{
    stage1_pretrain, stage2_pair_train, stage3_multitask, MetricsLog, MlmCorpus, TaskDataset,
    TrainConfig,
};
use biembed_core::training::{DatasetManifest, TaskKind};

use crate::config::{EvalTaskManifest, PipelineConfig};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TokenizerTrain,
    Curate,
    Pretrain,
    TrainPairs,
    TrainMultitask,
    Eval,
    SynthData,
}

impl Command {
    /// Name of the command and of its output directory.
    pub fn name(self) -> &'static str {
        match self {
            Command::TokenizerTrain => "tokenizer-train",
            Command::Curate => "curate",
            Command::Pretrain => "pretrain",
            Command::TrainPairs => "train-pairs",
            Command::TrainMultitask => "train-multitask",
            Command::Eval => "eval",
            Command::SynthData => "synth-data",
        }
    }
}

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TOKENIZER_FILE: &str = "tokenizer.bpe";
pub const EVAL_REPORT: &str = "report.json";

/// Training stages whose output model later commands pick up, newest first.
const MODEL_STAGES: [Command; 3] = [Command::TrainMultitask, Command::TrainPairs, Command::Pretrain];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    /// Replace an existing stage directory instead of refusing.
    pub force: bool,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        RunDir {
            root: root.into(),
            force,
        }
    }

    pub fn stage_path(&self, cmd: Command) -> PathBuf {
        self.root.join(cmd.name())
    }

    /// Creates the output directory of `cmd`; an existing non-empty one is
    /// an error unless `force` is set.
    fn create_stage(&self, cmd: Command) -> Result<PathBuf, CliError> {
        let dir = self.stage_path(cmd);
        let occupied = std::fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied {
            if !self.force {
                return Err(CliError::Io(format!(
                    "{} already exists; rerun with --force to replace it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn tokenizer(&self) -> Result<BpeModel, CliError> {
        let path = self.stage_path(Command::TokenizerTrain).join(TOKENIZER_FILE);
        if !path.exists() {
            return Err(CliError::Io(format!(
                "{} not found; run tokenizer-train first",
                path.display()
            )));
        }
        Ok(BpeModel::load(&path)?)
    }

    /// Checkpoint of the newest finished stage among `stages`.
    fn latest_model(&self, stages: &[Command]) -> Result<Option<(Command, EncoderModel)>, CliError> {
        for &s in stages {
            let path = self.stage_path(s).join(MODEL_FILE);
            if path.exists() {
                return Ok(Some((s, load_checkpoint(&path)?)));
            }
        }
        Ok(None)
    }

    fn require_model(&self, stages: &[Command], for_cmd: Command) -> Result<EncoderModel, CliError> {
        match self.latest_model(stages)? {
            Some((from, model)) => {
                log::info!("{}: starting from the {} model", for_cmd.name(), from.name());
                Ok(model)
            }
            None => Err(CliError::Io(format!(
                "{}: no model found in {} (expected one of: {})",
                for_cmd.name(),
                self.root.display(),
                stages.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(format!("{key}: required by this command")))
}

fn width(cfg: &TrainConfig) -> ScalarWidth {
    if cfg.precision == 32 {
        ScalarWidth::F32
    } else {
        ScalarWidth::F64
    }
}

fn load_datasets(manifests: &[DatasetManifest], section: &str) -> Result<Vec<TaskDataset>, CliError> {
    if manifests.is_empty() {
        return Err(CliError::Config(format!("{section}.datasets: at least one dataset is required")));
    }
    Ok(manifests
        .iter()
        .map(|m| m.load(Path::new("")))
        .collect::<biembed_core::Result<_>>()?)
}

/// Runs one subcommand; returns the directory it wrote.
pub fn run_command(cmd: Command, cfg: &PipelineConfig, run: &RunDir) -> Result<PathBuf, CliError> {
    // Inputs are checked before the output directory is touched.
    let dir = match cmd {
        Command::TokenizerTrain => {
            let a = read_text(required(&cfg.tokenizer.corpus_a, "tokenizer.corpus_a")?)?;
            let b = read_text(required(&cfg.tokenizer.corpus_b, "tokenizer.corpus_b")?)?;
            let tok = train_bpe(&a, &b, cfg.tokenizer.vocab_size)?;
            let dir = run.create_stage(cmd)?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            tok.save(&dir.join(TOKENIZER_FILE))?;
            log::info!("tokenizer: {} ids", tok.vocab_size());
            dir
        }
        Command::Pretrain => {
            let s1 = &cfg.stage1;
            let a_path = s1.corpus_a.as_ref().or(cfg.tokenizer.corpus_a.as_ref());
            let b_path = s1.corpus_b.as_ref().or(cfg.tokenizer.corpus_b.as_ref());
            let a_path = required(&a_path.cloned(), "stage1.corpus_a")?.to_path_buf();
            let b_path = required(&b_path.cloned(), "stage1.corpus_b")?.to_path_buf();
            let tok = run.tokenizer()?;
            let max_tokens = s1.train.max_len - 2;
            let corpus = |path: &Path, name: &str, salt: u64| -> Result<MlmCorpus, CliError> {
                let text = read_text(path)?;
                Ok(MlmCorpus::from_text(
                    name,
                    &tok,
                    &text,
                    max_tokens,
                    s1.held_out_frac,
                    s1.train.seed ^ salt,
                )?)
            };
            let ca = corpus(&a_path, "lang_a", 1)?;
            let cb = corpus(&b_path, "lang_b", 2)?;
            let mut model = EncoderModel::new(cfg.model.clone(), s1.init_seed)?;
            let dir = run.create_stage(cmd)?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            let mut log = MetricsLog::to_file(&dir.join(METRICS_FILE))?;
            let ckpt = (s1.train.checkpoint_every > 0).then_some(dir.as_path());
            let report = stage1_pretrain(&mut model, &tok, [&ca, &cb], &s1.train, &mut log, ckpt)?;
            if let Some((_, lang, last)) = report.validation.last() {
                log::info!("pretrain: final held-out {lang:?} loss {:.4} accuracy {:.4}", last.loss, last.accuracy);
            }
            save_checkpoint(&model, &dir.join(MODEL_FILE), width(&s1.train))?;
            dir
        }
        Command::TrainPairs | Command::TrainMultitask => {
            let (section, stage, from): (&str, _, &[Command]) = if cmd == Command::TrainPairs {
                ("stage2", &cfg.stage2, &MODEL_STAGES[2..])
            } else {
                ("stage3", &cfg.stage3, &MODEL_STAGES[1..])
            };
            let datasets = load_datasets(&stage.datasets, section)?;
            if cmd == Command::TrainPairs {
                if let Some(d) = datasets.iter().find(|d| d.kind() != TaskKind::Pair) {
                    return Err(CliError::Config(format!(
                        "{section}.datasets: {} is not a pair dataset",
                        d.name
                    )));
                }
            }
            let tok = run.tokenizer()?;
            let mut model = run.require_model(from, cmd)?;
            let dir = run.create_stage(cmd)?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            let mut log = MetricsLog::to_file(&dir.join(METRICS_FILE))?;
            let ckpt = (stage.train.checkpoint_every > 0).then_some(dir.as_path());
            let summary = if cmd == Command::TrainPairs {
                stage2_pair_train(&mut model, &tok, &datasets, &stage.train, &mut log, ckpt)?
            } else {
                stage3_multitask(&mut model, &tok, &datasets, &stage.train, &mut log, ckpt)?
            };
            log::info!("{}: {} steps, {} skipped", cmd.name(), summary.steps, summary.skipped);
            save_checkpoint(&model, &dir.join(MODEL_FILE), width(&stage.train))?;
            dir
        }
        Command::Eval => {
            if cfg.eval.tasks.is_empty() {
                return Err(CliError::Config("eval.tasks: no tasks configured".into()));
            }
            let tasks = load_eval_tasks(&cfg.eval.tasks)?;
            let tok = run.tokenizer()?;
            let model = run.require_model(&MODEL_STAGES, cmd)?;
            let embedder = EncoderEmbedder::new(&model, &tok);
            let reports = evaluate(&embedder, &tasks, cfg.eval.k, &cfg.eval.model_name)?;
            let dir = run.create_stage(cmd)?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
            write_text(&dir.join(EVAL_REPORT), &json)?;
            let table = render_table(&reports);
            write_text(&dir.join("table.txt"), &table)?;
            println!("{table}");
            dir
        }
        Command::Curate => {
            let input = required(&cfg.curation.input, "curation.input")?;
            let records: Vec<PairRecord> = read_jsonl(input)?;
            let n = records.len();
            let loaded = if cfg.curation.use_model {
                let tok = run.tokenizer()?;
                Some((tok, run.require_model(&MODEL_STAGES, cmd)?))
            } else {
                None
            };
            let embedder = loaded.as_ref().map(|(t, m)| EncoderEmbedder::new(m, t));
            let out = run_pipeline(
                records,
                embedder.as_ref().map(|e| e as &dyn TextEmbedder),
                &cfg.curation.params,
            )?;
            let dir = run.create_stage(cmd)?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            write_jsonl(&dir.join("kept.jsonl"), &out.kept)?;
            write_jsonl(&dir.join("dropped.jsonl"), &out.dropped)?;
            log::info!("curate: kept {} of {n}", out.kept.len());
            dir
        }
        Command::SynthData => {
            let dir = run.create_stage(cmd)?;
            write_bundle(&dir, &cfg.synth)?;
            let toy = toy_pipeline(&dir, cfg);
            write_text(&dir.join("pipeline.toml"), &toy.to_toml())?;
            write_text(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml())?;
            dir
        }
    };
    Ok(dir)
}

pub enum EvalTask {
    Sts(StsTask),
    Retrieval(RetrievalTask),
}

pub fn load_eval_tasks(manifests: &[EvalTaskManifest]) -> Result<Vec<EvalTask>, CliError> {
    let mut out = Vec::new();
    for m in manifests {
        let exists = |p: &Path| -> Result<(), CliError> {
            if p.is_file() {
                Ok(())
            } else {
                Err(CliError::Io(format!("{}: task file not found", p.display())))
            }
        };
        out.push(match m {
            EvalTaskManifest::Sts { name, path, score_max } => {
                exists(path)?;
                let mut task = StsTask::load(name, path)?;
                if let Some(c) = score_max {
                    task.gold.iter_mut().for_each(|g| *g /= c);
                }
                EvalTask::Sts(task)
            }
            EvalTaskManifest::Retrieval {
                name,
                corpus,
                queries,
                qrels,
            } => {
                for p in [corpus, queries, qrels] {
                    exists(p)?;
                }
                EvalTask::Retrieval(RetrievalTask::load(name, corpus, queries, qrels)?)
            }
        });
    }
    Ok(out)
}

pub fn evaluate(
    embedder: &dyn TextEmbedder,
    tasks: &[EvalTask],
    k: usize,
    model_name: &str,
) -> Result<Vec<MetricReport>, CliError> {
    tasks
        .iter()
        .map(|t| {
            let r = match t {
                EvalTask::Sts(t) => run_sts_eval(embedder, t, model_name)?,
                EvalTask::Retrieval(t) => run_retrieval_eval(embedder, t, k, model_name)?,
            };
            if r.excluded_queries > 0 {
                log::warn!("{}: {} queries without relevant documents excluded", r.task, r.excluded_queries);
            }
            Ok(r)
        })
        .collect()
}

/// A small end-to-end config over the synthetic bundle in `dir`.
pub fn toy_pipeline(dir: &Path, base: &PipelineConfig) -> PipelineConfig {
    let dir = std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf());
    let f = |name: &str| dir.join(name);
    let s = |name: &str| f(name).to_string_lossy().into_owned();
    let mut cfg = PipelineConfig::default();
    cfg.synth = base.synth.clone();
    cfg.tokenizer.corpus_a = Some(f("corpus_a.txt"));
    cfg.tokenizer.corpus_b = Some(f("corpus_b.txt"));
    cfg.tokenizer.vocab_size = 512;
    cfg.model.vocab_size = 512;
    cfg.model.trained_max_len = 48;
    let train = TrainConfig {
        lr: 1e-3,
        warmup_steps: 20,
        total_steps: 200,
        batch_size: 16,
        max_len: 48,
        seed: base.synth.seed,
        ..TrainConfig::default()
    };
    cfg.stage1.train = train.clone();
    cfg.stage1.init_seed = base.synth.seed;
    let manifest = |name: &str, kind, file: &str, score_max| DatasetManifest {
        name: name.into(),
        kind,
        path: s(file),
        weight: 1.0,
        score_max,
    };
    cfg.stage2.train = train.clone();
    cfg.stage2.datasets = vec![manifest("pairs", TaskKind::Pair, "pairs.jsonl", None)];
    cfg.stage3.train = train;
    cfg.stage3.datasets = vec![
        manifest("pairs", TaskKind::Pair, "pairs.jsonl", None),
        manifest("retrieval", TaskKind::Retrieval, "retrieval.jsonl", None),
        manifest("sts", TaskKind::Sts, "sts_train.jsonl", Some(5.0)),
    ];
    cfg.curation.input = Some(f("raw_pairs.jsonl"));
    cfg.eval.tasks = vec![
        EvalTaskManifest::Sts {
            name: "synth-sts".into(),
            path: f("sts_eval.jsonl"),
            score_max: Some(5.0),
        },
        EvalTaskManifest::Retrieval {
            name: "synth-retrieval".into(),
            corpus: f("eval_corpus.jsonl"),
            queries: f("eval_queries.jsonl"),
            qrels: f("eval_qrels.jsonl"),
        },
    ];
    cfg
}
