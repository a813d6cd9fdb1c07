//! Masked-LM pretraining, contrastive pair training and multi-task training.

mod data;
mod masking;
mod optim;
mod stages;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{Bound, EncoderModel};
use crate::error::{Error, Result};
use crate::losses::Similarity;
use crate::tensor::{Tape, Var};

pub use data::{
    chunk_words, sample_task, sample_weighted, DatasetManifest, EpochSampler, MlmCorpus,
    PairExample, RetrievalExample, StsExample, TaskDataset, TaskKind, TaskRecords,
};
pub use masking::{whole_word_mask, Corruption, MaskedSequence};
pub use optim::{clip_grad_norm, grad_norm, learning_rate, AdamW};
pub use stages::{
    mlm_evaluate, stage1_pretrain, stage2_pair_train, stage3_multitask, Lang, MlmEval,
    Stage1Report, TrainSummary,
};

/// Loss applied to STS batches in multi-task training. `None` drops STS
/// datasets entirely.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StsLoss {
    #[default]
    Pearson,
    Mse,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub mask_rate: f64,
    pub seed: u64,
    /// 64 keeps parameters in f64; 32 rounds them to f32 after every update.
    pub precision: u32,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Frame length (including `[CLS]`/`[SEP]`) of training sequences.
    pub max_len: usize,
    pub negatives_per_query: usize,
    pub sts_loss: StsLoss,
    pub similarity: Similarity,
    /// Held-out MLM evaluation interval in steps; 0 evaluates only at the
    /// start and the end.
    pub eval_every: usize,
    /// Checkpoint interval in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 32,
            tau: 0.05,
            mask_rate: 0.3,
            seed: 0,
            precision: 64,
            grad_clip: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            max_len: 128,
            negatives_per_query: 1,
            sts_loss: StsLoss::Pearson,
            similarity: Similarity::Cosine,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return fail(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate));
        }
        if self.precision != 32 && self.precision != 64 {
            return fail(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return fail("batch_size and total_steps must be positive".into());
        }
        if self.max_len < 3 {
            return fail(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.negatives_per_query == 0 {
            return fail("negatives_per_query must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// One line of the metrics log. `loss` is null for skipped steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub dataset: String,
    pub loss_kind: String,
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// In-memory metrics, optionally mirrored to a JSONL file as they arrive.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            records: Vec::new(),
            file: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some((path, w)) = self.file.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = self.file.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Optimizer state plus the step counter shared by all stages.
pub struct Trainer<'m> {
    pub model: &'m mut EncoderModel,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
    /// Global gradient norm after clipping, per update.
    pub clipped_norms: Vec<f64>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut EncoderModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        if cfg.precision == 32 {
            model.params.values_mut().for_each(|p| p.round_to_f32());
        }
        Ok(Trainer {
            model,
            cfg,
            opt,
            step: 0,
            clipped_norms: Vec::new(),
        })
    }

    /// Builds a loss on a fresh tape, backpropagates it and applies one
    /// optimizer update. `build` returning `None` skips the update. A
    /// non-finite loss aborts.
    pub fn update<F>(&mut self, build: F) -> Result<Option<f64>>
    where
        F: for<'t> FnOnce(&EncoderModel, &Bound<'t>) -> Result<Option<Var<'t>>>,
    {
        let tape = Tape::new();
        let dropout_seed = self.cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(self.step as u64 + 1));
        let bound = self.model.bind(&tape, true, Some(dropout_seed));
        let Some(loss) = build(self.model, &bound)? else {
            return Ok(None);
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NumericalAbort {
                step: self.step,
                detail: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        self.model.zero_grads();
        self.model.accumulate_grads(&bound, &grads);
        drop(grads);
        drop(bound);

        let before = clip_grad_norm(self.model, self.cfg.grad_clip);
        if !before.is_finite() {
            return Err(Error::NumericalAbort {
                step: self.step,
                detail: format!("gradient norm is {before}"),
            });
        }
        let after = grad_norm(self.model);
        debug_assert!(after <= self.cfg.grad_clip * (1.0 + 1e-9));
        self.clipped_norms.push(after);

        let lr = learning_rate(
            self.cfg.lr,
            self.step,
            self.cfg.warmup_steps,
            self.cfg.total_steps,
        );
        self.opt.step(self.model, lr);
        self.model.zero_grads();
        if self.cfg.precision == 32 {
            self.model.params.values_mut().for_each(|p| p.round_to_f32());
        }
        if !self.model.all_finite() {
            return Err(Error::NumericalAbort {
                step: self.step,
                detail: "non-finite parameter after update".into(),
            });
        }
        Ok(Some(value))
    }

    /// Writes `step-NNNNNN.ckpt` into `dir` when the interval is due.
    pub fn maybe_checkpoint(&self, dir: Option<&Path>) -> Result<()> {
        let (Some(dir), every) = (dir, self.cfg.checkpoint_every) else {
            return Ok(());
        };
        if every > 0 && self.step % every == 0 {
            let width = if self.cfg.precision == 32 {
                crate::encoder::ScalarWidth::F32
            } else {
                crate::encoder::ScalarWidth::F64
            };
            crate::encoder::save_checkpoint(
                self.model,
                &dir.join(format!("step-{:06}.ckpt", self.step)),
                width,
            )?;
        }
        Ok(())
    }
}
