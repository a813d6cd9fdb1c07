use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{sample_task, EpochSampler, MlmCorpus, TaskDataset, TaskKind, TaskRecords};
use super::masking::whole_word_mask;
use super::{MetricRecord, MetricsLog, StsLoss, TrainConfig, Trainer};
use crate::encoder::{frame_ids, texts_to_batch, Batch, Bound, EncoderModel};
use crate::error::{Error, Result};
use crate::losses::{
    bidirectional_info_nce, mse_sts_loss, pearson_sts_loss, triplet_info_nce, PairBatch,
    StsBatch, TripletBatch,
};
use crate::tensor::{Tape, Var};
use crate::tokenizer::{BpeModel, TokenizedText, MASK};

const MASK_STREAM: u64 = 0x6d61_736b;
const TASK_STREAM: u64 = 0x7461_736b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lang {
    A,
    B,
}

impl Lang {
    pub fn of_step(step: usize) -> Lang {
        if step % 2 == 0 {
            Lang::A
        } else {
            Lang::B
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmEval {
    pub loss: f64,
    pub accuracy: f64,
    pub masked_tokens: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Stage1Report {
    /// Language of the batch used at every step.
    pub schedule: Vec<Lang>,
    pub losses: Vec<f64>,
    /// `(step, language, held-out evaluation)`, starting before training.
    pub validation: Vec<(usize, Lang, MlmEval)>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps: usize,
    pub skipped: usize,
    pub losses: Vec<Option<f64>>,
    pub datasets: Vec<String>,
    pub loss_kinds: Vec<String>,
}

/// Masked batch: framed inputs, flat `[batch * seq]` positions and labels.
struct MlmBatch {
    batch: Batch,
    positions: Vec<usize>,
    labels: Vec<usize>,
}

fn random_range(tokenizer: &BpeModel) -> std::ops::Range<u32> {
    MASK + 1..tokenizer.vocab_size() as u32
}

fn mask_batch(
    examples: &[&TokenizedText],
    rate: f64,
    tokenizer: &BpeModel,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<MlmBatch>> {
    if examples.iter().all(|e| e.word_spans.is_empty()) {
        return Err(Error::EmptyInput("MLM batch has no words".into()));
    }
    let masked: Vec<_> = examples
        .iter()
        .map(|e| {
            let cut = TokenizedText {
                ids: e.ids[..e.ids.len().min(max_len - 2)].to_vec(),
                word_spans: e
                    .word_spans
                    .iter()
                    .filter(|(_, end)| *end <= max_len - 2)
                    .copied()
                    .collect(),
            };
            whole_word_mask(&cut, rate, random_range(tokenizer), rng)
        })
        .collect();
    if masked.iter().all(|m| m.positions.is_empty()) {
        return Ok(None);
    }
    let seqs: Vec<Vec<u32>> = masked.iter().map(|m| frame_ids(&m.input, max_len)).collect();
    let batch = Batch::from_sequences(&seqs)?;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (b, m) in masked.iter().enumerate() {
        for &p in &m.positions {
            positions.push(b * batch.seq + 1 + p);
            labels.push(m.labels[p].expect("label at masked position") as usize);
        }
    }
    Ok(Some(MlmBatch {
        batch,
        positions,
        labels,
    }))
}

fn mlm_loss<'t>(model: &EncoderModel, bound: &Bound<'t>, mb: &MlmBatch) -> Result<Var<'t>> {
    let hidden = model.forward_hidden(bound, &mb.batch)?;
    let logits = model.mlm_logits(bound, hidden, &mb.positions)?;
    Ok(logits.log_softmax().take_along_rows(&mb.labels)?.mean().neg())
}

/// Held-out masked-token loss and accuracy with a fixed masking seed.
pub fn mlm_evaluate(
    model: &EncoderModel,
    tokenizer: &BpeModel,
    examples: &[TokenizedText],
    mask_rate: f64,
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<MlmEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_STREAM);
    let (mut total, mut correct, mut count) = (0.0, 0usize, 0usize);
    let usable: Vec<&TokenizedText> = examples.iter().filter(|e| !e.word_spans.is_empty()).collect();
    for group in usable.chunks(batch_size.max(1)) {
        let Some(mb) = mask_batch(group, mask_rate, tokenizer, max_len, &mut rng)? else {
            continue;
        };
        let tape = Tape::new();
        let bound = model.bind(&tape, false, None);
        let hidden = model.forward_hidden(&bound, &mb.batch)?;
        let logits = model.mlm_logits(&bound, hidden, &mb.positions)?;
        let logp = logits.log_softmax().value();
        let v = model.config.vocab_size;
        for (row, &label) in logp.data().chunks(v).zip(&mb.labels) {
            total -= row[label];
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0;
            correct += usize::from(argmax == label);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no masked tokens in evaluation set".into()));
    }
    Ok(MlmEval {
        loss: total / count as f64,
        accuracy: correct as f64 / count as f64,
        masked_tokens: count,
    })
}

fn check_vocab(model: &EncoderModel, tokenizer: &BpeModel) -> Result<()> {
    if tokenizer.vocab_size() > model.config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} ids but the model only {}",
            tokenizer.vocab_size(),
            model.config.vocab_size
        )));
    }
    Ok(())
}

/// Masked-LM pretraining over two corpora with strictly alternating
/// single-language batches (A at even steps, B at odd steps).
pub fn stage1_pretrain(
    model: &mut EncoderModel,
    tokenizer: &BpeModel,
    corpora: [&MlmCorpus; 2],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<Stage1Report> {
    check_vocab(model, tokenizer)?;
    for c in corpora {
        if c.train.is_empty() {
            return Err(Error::EmptyInput(format!("{}: no training text", c.name)));
        }
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut samplers = [0, 1].map(|i| EpochSampler::new(corpora[i].train.len(), cfg.seed + i as u64));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MASK_STREAM);
    let mut report = Stage1Report::default();

    let validate = |trainer: &Trainer<'_>, report: &mut Stage1Report, log: &mut MetricsLog| -> Result<()> {
        for lang in [Lang::A, Lang::B] {
            let corpus = corpora[lang.index()];
            if corpus.held_out.is_empty() {
                continue;
            }
            let ev = mlm_evaluate(
                trainer.model,
                tokenizer,
                &corpus.held_out,
                cfg.mask_rate,
                cfg.max_len,
                cfg.batch_size,
                cfg.seed,
            )?;
            log.push(MetricRecord {
                step: trainer.step,
                dataset: format!("{}/held_out", corpus.name),
                loss_kind: "mlm_validation".into(),
                loss: Some(ev.loss),
                accuracy: Some(ev.accuracy),
            })?;
            report.validation.push((trainer.step, lang, ev));
        }
        Ok(())
    };

    validate(&trainer, &mut report, log)?;
    while trainer.step < cfg.total_steps {
        let lang = Lang::of_step(trainer.step);
        if let Some(&prev) = report.schedule.last() {
            assert_ne!(prev, lang, "language alternation broken at step {}", trainer.step);
        }
        report.schedule.push(lang);
        let corpus = corpora[lang.index()];
        let picked: Vec<&TokenizedText> = samplers[lang.index()]
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &corpus.train[i])
            .collect();
        let mb = mask_batch(&picked, cfg.mask_rate, tokenizer, cfg.max_len, &mut mask_rng)?;
        let loss = match mb {
            Some(mb) => trainer.update(|m, bound| mlm_loss(m, bound, &mb).map(Some))?,
            None => None,
        };
        log.push(MetricRecord {
            step: trainer.step,
            dataset: corpus.name.clone(),
            loss_kind: if loss.is_some() { "mlm" } else { "skipped" }.into(),
            loss,
            accuracy: None,
        })?;
        report.losses.push(loss.unwrap_or(f64::NAN));
        trainer.step += 1;
        trainer.maybe_checkpoint(checkpoint_dir)?;
        if cfg.eval_every > 0 && trainer.step % cfg.eval_every == 0 && trainer.step < cfg.total_steps {
            validate(&trainer, &mut report, log)?;
        }
    }
    validate(&trainer, &mut report, log)?;
    log.flush()?;
    Ok(report)
}

fn embed_texts_on<'t>(
    model: &EncoderModel,
    bound: &Bound<'t>,
    tokenizer: &BpeModel,
    texts: &[&str],
    max_len: usize,
) -> Result<Var<'t>> {
    let batch = texts_to_batch(tokenizer, texts, max_len)?;
    model.embed_batch(bound, &batch)
}

/// Loss of one batch of `dataset`; `Ok(None)` marks a degenerate STS batch.
fn task_loss<'t>(
    model: &EncoderModel,
    bound: &Bound<'t>,
    tokenizer: &BpeModel,
    dataset: &TaskDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<Var<'t>>> {
    let emb = |texts: &[&str]| embed_texts_on(model, bound, tokenizer, texts, cfg.max_len);
    match &dataset.records {
        TaskRecords::Pair(rows) => {
            let qs: Vec<&str> = idx.iter().map(|&i| rows[i].q.as_str()).collect();
            let ps: Vec<&str> = idx.iter().map(|&i| rows[i].p.as_str()).collect();
            let batch = PairBatch::new(emb(&qs)?, emb(&ps)?)?.with_similarity(cfg.similarity);
            Ok(Some(bidirectional_info_nce(&batch, cfg.tau)?))
        }
        TaskRecords::Retrieval(rows) => {
            let m = idx
                .iter()
                .map(|&i| rows[i].negs.len())
                .min()
                .unwrap_or(1)
                .min(cfg.negatives_per_query);
            let qs: Vec<&str> = idx.iter().map(|&i| rows[i].q.as_str()).collect();
            let ps: Vec<&str> = idx.iter().map(|&i| rows[i].p.as_str()).collect();
            let ns: Vec<&str> = idx
                .iter()
                .flat_map(|&i| rows[i].negs[..m].iter().map(String::as_str))
                .collect();
            let d = model.config.hidden_dim;
            let negs = emb(&ns)?.reshape(&[idx.len(), m, d])?;
            let batch = TripletBatch::new(emb(&qs)?, emb(&ps)?, negs)?.with_similarity(cfg.similarity);
            Ok(Some(triplet_info_nce(&batch, cfg.tau)?))
        }
        TaskRecords::Sts(rows) => {
            let qs: Vec<&str> = idx.iter().map(|&i| rows[i].q.as_str()).collect();
            let ps: Vec<&str> = idx.iter().map(|&i| rows[i].p.as_str()).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| rows[i].score).collect();
            let batch = match StsBatch::new(emb(&qs)?, emb(&ps)?, scores) {
                Ok(b) => b.with_similarity(cfg.similarity),
                Err(Error::Degenerate(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let loss = match cfg.sts_loss {
                StsLoss::Mse => mse_sts_loss(&batch),
                _ => pearson_sts_loss(&batch),
            };
            match loss {
                Ok(l) => Ok(Some(l)),
                Err(Error::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        }
    }
}

fn loss_kind(kind: TaskKind, cfg: &TrainConfig) -> &'static str {
    match kind {
        TaskKind::Pair => "bidirectional_info_nce",
        TaskKind::Retrieval => "triplet_info_nce",
        TaskKind::Sts => match cfg.sts_loss {
            StsLoss::Mse => "mse",
            _ => "pearson",
        },
    }
}

fn multitask_loop(
    model: &mut EncoderModel,
    tokenizer: &BpeModel,
    datasets: &[TaskDataset],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainSummary> {
    check_vocab(model, tokenizer)?;
    if datasets.is_empty() {
        return Err(Error::Config("no training datasets".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut task_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TASK_STREAM);
    let mut samplers: Vec<EpochSampler> = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| EpochSampler::new(d.len(), cfg.seed + i as u64))
        .collect();
    let mut summary = TrainSummary::default();
    while trainer.step < cfg.total_steps {
        let which = sample_task(datasets, &mut task_rng)?;
        let dataset = &datasets[which];
        let idx = samplers[which].next_batch(cfg.batch_size);
        let kind = loss_kind(dataset.kind(), cfg);
        let loss = if idx.len() < 2 {
            log::warn!("{}: batch of {} skipped", dataset.name, idx.len());
            None
        } else {
            trainer.update(|m, bound| task_loss(m, bound, tokenizer, dataset, &idx, cfg))?
        };
        if loss.is_none() {
            summary.skipped += 1;
        }
        log.push(MetricRecord {
            step: trainer.step,
            dataset: dataset.name.clone(),
            loss_kind: if loss.is_some() { kind } else { "skipped" }.into(),
            loss,
            accuracy: None,
        })?;
        summary.losses.push(loss);
        summary.datasets.push(dataset.name.clone());
        summary.loss_kinds.push(kind.into());
        trainer.step += 1;
        trainer.maybe_checkpoint(checkpoint_dir)?;
    }
    summary.steps = trainer.step;
    log.flush()?;
    Ok(summary)
}

/// Contrastive training on pair datasets with the bidirectional loss.
pub fn stage2_pair_train(
    model: &mut EncoderModel,
    tokenizer: &BpeModel,
    datasets: &[TaskDataset],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainSummary> {
    if let Some(d) = datasets.iter().find(|d| d.kind() != TaskKind::Pair) {
        return Err(Error::Config(format!(
            "{}: pair training only accepts pair datasets",
            d.name
        )));
    }
    multitask_loop(model, tokenizer, datasets, cfg, log, checkpoint_dir)
}

/// One sampled task per step, one loss per step. With `sts_loss = none`,
/// STS datasets are left out.
pub fn stage3_multitask(
    model: &mut EncoderModel,
    tokenizer: &BpeModel,
    datasets: &[TaskDataset],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainSummary> {
    let kept: Vec<TaskDataset> = datasets
        .iter()
        .filter(|d| cfg.sts_loss != StsLoss::None || d.kind() != TaskKind::Sts)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::Config("no datasets left for multi-task training".into()));
    }
    multitask_loop(model, tokenizer, &kept, cfg, log, checkpoint_dir)
}
