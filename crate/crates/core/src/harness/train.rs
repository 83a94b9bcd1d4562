//! Pretraining and adaptation loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::{batch_loss, training_batch, Batch};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::optim::{optimizer_step, OptimizerState};
use super::vocab::Vocab;
use crate::adapters::{partition_parameters, Mode, Partition};
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Upper bound on `logit_scale`: a temperature of 0.01.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_091;

pub const CHECKPOINT_FILE: &str = "checkpoint.umgm";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_image_tag: f64,
    pub loss_image_caption: f64,
    pub loss_region_tag: f64,
    pub loss_region_caption: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub temperature: f64,
}

impl StepMetrics {
    fn new(step: usize, r: &LossReport, lr: f64, temperature: f64) -> Self {
        StepMetrics {
            step,
            loss_image_tag: r.image_tag,
            loss_image_caption: r.image_caption,
            loss_region_tag: r.region_tag,
            loss_region_caption: r.region_caption,
            loss_total: r.total,
            lr,
            temperature,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// The model an adapt run starts from: base weights, full token grid, optional adapters.
pub fn prepare_adapt_model(config: &RunConfig, base: &Model<f32>) -> Result<Model<f32>> {
    if base.adapters().is_some() {
        return Err(Error::Contract("base model already carries adapters".into()));
    }
    let mut model = base.clone();
    model.config.cluster_after = None;
    if config.use_adapters {
        model.attach_adapters(config.adapter.clone(), config.seed ^ 0xada9)?;
    }
    Ok(model)
}

fn initial_model(config: &RunConfig, base: Option<Model<f32>>) -> Result<Model<f32>> {
    match config.mode {
        Mode::Pretrain => match base {
            Some(_) => Err(Error::Contract("pretrain starts from random weights; no base model".into())),
            None => Model::new(config.model_encoder(), config.seed),
        },
        Mode::Adapt => {
            let base = match (base, &config.base_checkpoint) {
                (Some(b), _) => b,
                (None, Some(path)) => load_checkpoint::<f32>(path, None)?.0,
                (None, None) => return Err(Error::Config("adapt mode needs a base checkpoint".into())),
            };
            prepare_adapt_model(config, &base)
        }
    }
}

fn clamp_logit_scale<T: Scalar>(model: &mut Model<T>) {
    let id = model.logit_scale_id();
    let v = &mut model.params.get_mut(id).value.data_mut()[0];
    *v = T::from_f64(v.as_f64().clamp(0.0, MAX_LOGIT_SCALE));
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut Model<f32>,
    partition: &Partition,
    optimizer: &mut OptimizerState<f32>,
    config: &RunConfig,
    vocab: &Vocab,
    batch: &Batch,
    lr: f64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |id, _| partition.is_trainable(id));
    let loss = batch_loss(model, &mut tape, &bound, vocab, batch, &config.loss)?;
    if !loss.report.total.is_finite() {
        return Err(Error::Numeric {
            op: "train",
            detail: format!("non-finite loss {:?}", loss.report),
        });
    }
    let mut grads = tape.backward(loss.total)?;
    let updates: Vec<(crate::params::ParamId, Tensor<f32>)> = partition
        .trainable
        .iter()
        .filter_map(|&id| grads.take(bound.var(id)).map(|g| (id, g)))
        .collect();
    optimizer_step(&mut model.params, &updates, optimizer, &config.optimizer, lr)?;
    clamp_logit_scale(model);
    Ok(loss.report)
}

struct Output {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
}

impl Output {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Output { dir: None, metrics: None });
        };
        std::fs::create_dir_all(dir)?;
        let f = File::create(dir.join(METRICS_FILE))?;
        Ok(Output {
            dir: Some(dir.to_path_buf()),
            metrics: Some(BufWriter::new(f)),
        })
    }

    fn log(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, model: &Model<f32>, opt: &OptimizerState<f32>) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            w.flush()?;
        }
        if let Some(dir) = &self.dir {
            save_checkpoint(model, opt, &dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }
}

/// Runs `config.steps` optimizer steps.
///
/// Pretrain mode starts from random weights; adapt mode from `base` or
/// `config.base_checkpoint`. With an output directory, metrics stream to
/// `metrics.jsonl` and `checkpoint.umgm` is rewritten every
/// `checkpoint_every` steps and at the end. A non-finite loss or gradient
/// stops the run; the checkpoint then holds the last good weights.
pub fn train(config: &RunConfig, base: Option<Model<f32>>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = initial_model(config, base)?;
    let partition = partition_parameters(&model, config.mode);
    let vocab = Vocab::new();
    if vocab.len() > model.config.text_vocab {
        return Err(Error::Config(format!("vocabulary of {} exceeds text_vocab", vocab.len())));
    }
    let mut optimizer = OptimizerState::default();
    let mut out = Output::open(config.out_dir.as_deref())?;
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let lr = config.schedule.lr_at(config.optimizer.lr, step, config.steps);
        let temperature = (-model.params.get(model.logit_scale_id()).value.data()[0].as_f64()).exp();
        let batch = training_batch(config.seed, step, config.batch, &config.data)?;
        let report = match train_step(&mut model, &partition, &mut optimizer, config, &vocab, &batch, lr) {
            Ok(r) => r,
            Err(e @ Error::Numeric { .. }) => {
                out.checkpoint(&model, &optimizer)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let m = StepMetrics::new(step + 1, &report, lr, temperature);
        out.log(&m)?;
        metrics.push(m);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.steps {
            out.checkpoint(&model, &optimizer)?;
        }
    }
    out.checkpoint(&model, &optimizer)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        metrics,
    })
}

/// Loss of `model` on `batch` without updating anything.
pub fn evaluate_loss(model: &Model<f32>, config: &RunConfig, batch: &Batch) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_, _| false);
    Ok(batch_loss(model, &mut tape, &bound, &Vocab::new(), batch, &config.loss)?.report)
}
