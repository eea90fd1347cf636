//! AdamW training with two learning-rate groups, a polynomial decay schedule,
//! fixed-order gradient accumulation and per-epoch checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Progress};
use crate::decoder::infer_mask;
use crate::error::{Error, Result};
use crate::metrics::{EvalAccumulator, Report};
use crate::model::{is_encoder_param, Example, Model};
use crate::synthdata::Sample;
use crate::tensor::{Grads, Graph, ParamKind};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const NAN_DUMP_FILE: &str = "nonfinite_grad_norms.json";

/// `base * (1 - step / total)^power`, zero from `step >= total` on.
pub fn poly_lr(base: f64, step: u64, total: u64, power: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// Adam first/second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam update. Weight decay applies to
    /// [`ParamKind::Weight`] parameters only.
    pub fn update(&mut self, model: &mut Model, grads: &Grads, lr_encoder: f64, lr_other: f64) {
        let c = &model.config;
        let (b1, b2, eps, wd) = (c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay);
        self.t += 1;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, p) in model.store.iter_mut() {
            let lr = if is_encoder_param(&p.name) {
                lr_encoder
            } else {
                lr_other
            };
            let decay = if p.kind == ParamKind::Weight {
                lr * wd
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let g = grads.get(id);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= decay * *w + lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scalar losses of one sample, plus its prediction quality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLosses {
    pub l_fg: f64,
    pub l_bg: f64,
    pub l_re: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        epoch: usize,
        lr_encoder: f64,
        lr_other: f64,
        l_total: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        l_fg: f64,
        l_bg: f64,
        l_re: f64,
        l_total: f64,
        train_miou: f64,
    },
}

/// Per-epoch means of the training losses and the mIoU of the predictions
/// made during the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: u64,
    pub l_fg: f64,
    pub l_bg: f64,
    pub l_re: f64,
    pub l_total: f64,
    pub train_miou: f64,
    /// Batch-mean total loss of every optimizer step in the epoch.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where the log and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (for interrupted runs).
    pub stop_after: Option<usize>,
    /// Also keep `checkpoint-epoch{k}` for every epoch.
    pub keep_all_checkpoints: bool,
    /// Emit one log line per optimizer step as well as per epoch.
    pub log_steps: bool,
}

/// Model, optimizer state and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model);
        Self {
            model,
            adam,
            progress: Progress::default(),
        }
    }

    /// Continue from a checkpoint directory written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, adam, progress) = load_checkpoint(dir)?;
        let adam = adam.ok_or_else(|| {
            Error::Checkpoint(format!("{} holds no optimizer state", dir.display()))
        })?;
        Ok(Self {
            model,
            adam,
            progress,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.model, Some(&self.adam), &self.progress)
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.model.config.batch_size) as u64
    }

    /// Learning rates `(encoder, other)` at optimizer step `step`.
    pub fn learning_rates(&self, step: u64, total: u64) -> (f64, f64) {
        let c = &self.model.config;
        (
            poly_lr(c.lr_encoder, step, total, c.poly_power),
            poly_lr(c.lr_other, step, total, c.poly_power),
        )
    }

    /// Train until `config.epochs` epochs are complete (or `stop_after`).
    pub fn train(&mut self, corpus: &[Sample], opts: &TrainOptions) -> Result<Vec<EpochSummary>> {
        if corpus.is_empty() {
            return Err(Error::Usage("training corpus is empty".into()));
        }
        let epochs = self.model.config.epochs;
        let last = opts.stop_after.map_or(epochs, |s| s.min(epochs));
        let examples: Vec<Example> = corpus.iter().map(Example::from_sample).collect();
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir)?;
        }
        let mut history = Vec::new();
        while self.progress.epoch < last {
            let summary = self.run_epoch(corpus, &examples, opts)?;
            self.progress.epoch += 1;
            if let Some(dir) = &opts.out_dir {
                append_log(
                    dir,
                    &[LogRecord::Epoch {
                        epoch: summary.epoch,
                        step: summary.step,
                        l_fg: summary.l_fg,
                        l_bg: summary.l_bg,
                        l_re: summary.l_re,
                        l_total: summary.l_total,
                        train_miou: summary.train_miou,
                    }],
                )?;
                self.save(&dir.join(CHECKPOINT_DIR))?;
                if opts.keep_all_checkpoints {
                    self.save(&dir.join(format!("checkpoint-epoch{}", self.progress.epoch)))?;
                }
            }
            history.push(summary);
        }
        Ok(history)
    }

    fn run_epoch(
        &mut self,
        corpus: &[Sample],
        examples: &[Example],
        opts: &TrainOptions,
    ) -> Result<EpochSummary> {
        let n = corpus.len();
        let epoch = self.progress.epoch;
        let total = self.steps_per_epoch(n) * self.model.config.epochs as u64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut sums = SampleLosses::default();
        let mut acc = EvalAccumulator::new();
        let mut step_losses = Vec::new();
        let mut step_records = Vec::new();
        for batch in order.chunks(self.model.config.batch_size) {
            let mut grads = Grads::zeros_like(&self.model.store);
            let mut batch_total = 0.0;
            for &i in batch {
                let (losses, pred) =
                    sample_step(&self.model, &examples[i], &corpus[i], &mut grads)?;
                if !losses.l_total.is_finite() {
                    return Err(self.nonfinite(
                        opts,
                        &grads,
                        format!("loss {} on sample {}", losses.l_total, corpus[i].id),
                    ));
                }
                acc.add(&pred, &corpus[i].gt_mask, corpus[i].category)?;
                sums.l_fg += losses.l_fg;
                sums.l_bg += losses.l_bg;
                sums.l_re += losses.l_re;
                sums.l_ce += losses.l_ce;
                sums.l_total += losses.l_total;
                batch_total += losses.l_total;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(self.nonfinite(opts, &grads, "non-finite gradient".into()));
            }
            let step = self.progress.step;
            let (lr_enc, lr_other) = self.learning_rates(step, total);
            self.adam.update(&mut self.model, &grads, lr_enc, lr_other);
            self.progress.step += 1;
            let mean_total = batch_total / batch.len() as f64;
            step_losses.push(mean_total);
            if opts.log_steps {
                step_records.push(LogRecord::Step {
                    step,
                    epoch,
                    lr_encoder: lr_enc,
                    lr_other,
                    l_total: mean_total,
                });
            }
        }
        if let (Some(dir), false) = (&opts.out_dir, step_records.is_empty()) {
            append_log(dir, &step_records)?;
        }
        let nf = n as f64;
        Ok(EpochSummary {
            epoch,
            step: self.progress.step,
            l_fg: sums.l_fg / nf,
            l_bg: sums.l_bg / nf,
            l_re: sums.l_re / nf,
            l_total: sums.l_total / nf,
            train_miou: acc.finalize()?.miou,
            step_losses,
        })
    }

    fn nonfinite(&self, opts: &TrainOptions, grads: &Grads, detail: String) -> Error {
        if let Some(dir) = &opts.out_dir {
            let norms: serde_json::Map<String, serde_json::Value> = self
                .model
                .store
                .iter()
                .map(|(id, p)| (p.name.clone(), serde_json::json!(grads.norm(id))))
                .collect();
            let body = serde_json::to_string_pretty(&norms).unwrap_or_default();
            let _ = fs::write(dir.join(NAN_DUMP_FILE), body);
        }
        Error::NonFinite {
            step: self.progress.step,
            detail,
        }
    }
}

/// Forward and backward one sample, adding its parameter gradients into
/// `grads`. Returns the losses and the prediction made by the forward pass.
pub fn sample_step(
    model: &Model,
    ex: &Example,
    sample: &Sample,
    grads: &mut Grads,
) -> Result<(SampleLosses, crate::image::Mask)> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, ex)?;
    let l = model.losses(&mut g, &fwd, &sample.gt_mask)?;
    let value = |v| g.value(v).item();
    let losses = SampleLosses {
        l_fg: value(l.fg),
        l_bg: l.bg.map_or(0.0, value),
        l_re: value(l.re),
        l_ce: value(l.ce),
        l_total: value(l.total),
    };
    let pred = infer_mask(g.value(fwd.logits.fg), g.value(fwd.logits.bg))?;
    if losses.l_total.is_finite() {
        g.backward(l.total)?;
        g.accumulate_param_grads(grads);
    }
    Ok((losses, pred))
}

fn append_log(dir: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(LOG_FILE))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_log(dir: &Path) -> Result<Vec<LogRecord>> {
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&path, e.to_string())))
        .collect()
}

/// Predict every sample and accumulate the metrics. Returns the report and
/// the predicted masks in corpus order.
pub fn evaluate(model: &Model, corpus: &[Sample]) -> Result<(Report, Vec<crate::image::Mask>)> {
    let mut acc = EvalAccumulator::new();
    let mut masks = Vec::with_capacity(corpus.len());
    for s in corpus {
        let pred = model.predict(&Example::from_sample(s))?;
        acc.add(&pred.mask, &s.gt_mask, s.category)?;
        masks.push(pred.mask);
    }
    Ok((acc.finalize()?, masks))
}
