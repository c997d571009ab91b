//! Training loop and evaluation over cached samples.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mask_head::select_and_upsample;
use crate::metrics::{aggregate, EvalAccumulator, MetricsReport};
use crate::model::AuTR;
use crate::objective::training_loss;
use crate::optim::{AdamW, AdamWParams};
use crate::types::BinaryMask;

const FROZEN_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestVal {
    pub step: usize,
    pub m_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub best_val: Option<BestVal>,
    /// Wall time; left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

pub struct Trainer {
    pub model: AuTR,
    opt: AdamW,
    cfg: RunConfig,
    classes: Vec<String>,
    exec: Execution,
}

fn adamw_params(cfg: &RunConfig) -> AdamWParams {
    AdamWParams {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    }
}

impl Trainer {
    /// A fresh model initialized from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = AuTR::new(&cfg.model, cfg.seed, DType::F32, &Device::Cpu)?;
        Self::with_model(model, cfg)
    }

    pub fn with_model(model: AuTR, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.trainable(), adamw_params(cfg))?;
        Ok(Self {
            model,
            opt,
            cfg: cfg.clone(),
            classes: Vec::new(),
            exec: Execution::from_env(),
        })
    }

    /// Rebuild model and optimizer state. `cfg` overrides the stored
    /// optimizer settings (used for finetuning); the model shape always
    /// comes from the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<&RunConfig>) -> Result<Self> {
        let mut run = cfg.cloned().unwrap_or_else(|| ck.config.clone());
        run.model = ck.config.model.clone();
        let model = restore_model(ck)?;
        let mut t = Self::with_model(model, &run)?;
        if cfg.is_none() && !ck.optimizer.is_empty() {
            t.opt.load_state(&ck.optimizer, ck.step)?;
        }
        t.classes = ck.classes.clone();
        Ok(t)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.opt.steps_taken()
    }

    /// Batch for the current step, a pure function of `(seed, step)` so a
    /// resumed run draws the same batches.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.opt.steps_taken() as u64 + 1);
        let k = self.cfg.optim.batch_size.min(n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Loss of a batch, averaged over its samples, without updating.
    pub fn batch_loss(&self, batch: &[&EncodedSample]) -> Result<Tensor> {
        let losses: Vec<Tensor> = self
            .exec
            .map(batch, |s| {
                let pred = self.model.forward_encoded(&s.pyramid, &s.audio)?;
                Ok(training_loss(&pred, &s.gt, &self.cfg.loss)?.0)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let total = losses.iter().skip(1).try_fold(losses[0].clone(), |acc, l| acc + l)?;
        Ok((total / batch.len() as f64)?)
    }

    /// One optimizer step on a batch drawn from `data`; returns the loss.
    pub fn step(&mut self, data: &[EncodedSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let batch: Vec<&EncodedSample> = self.batch_indices(data.len()).into_iter().map(|i| &data[i]).collect();
        let loss = self.batch_loss(&batch)?;
        let value: f64 = loss.to_dtype(DType::F64)?.to_scalar()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.opt.steps_taken(),
                loss: value,
            });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        Ok(value)
    }

    /// Train for `steps` more steps. With `val`, evaluate every
    /// `eval_every` steps and keep the best weights seen.
    pub fn fit(
        &mut self,
        data: &[EncodedSample],
        steps: usize,
        val: Option<(&[EncodedSample], usize)>,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<(TrainReport, Option<BTreeMap<String, Tensor>>)> {
        let start = Instant::now();
        let mut classes: Vec<String> = data.iter().map(|s| s.class.clone()).collect();
        classes.extend(self.classes.drain(..));
        classes.sort();
        classes.dedup();
        self.classes = classes;
        let mut losses = Vec::with_capacity(steps);
        let mut best: Option<BestVal> = None;
        let mut best_weights = None;
        for i in 0..steps {
            let loss = self.step(data)?;
            let step = self.opt.steps_taken();
            on_step(step, loss);
            losses.push(loss);
            if let Some((v, every)) = val {
                if every > 0 && (step % every == 0 || i + 1 == steps) && !v.is_empty() {
                    let m = aggregate(&evaluate(&self.model, v, &self.cfg, self.exec)?)?;
                    if best.as_ref().is_none_or(|b| m.m_j > b.m_j) {
                        best = Some(BestVal { step, m_j: m.m_j });
                        best_weights = Some(self.model.weights()?);
                    }
                }
            }
        }
        Ok((
            TrainReport {
                steps: losses.len(),
                losses,
                best_val: best,
                seconds: start.elapsed().as_secs_f64(),
            },
            best_weights,
        ))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        model_checkpoint(&self.model, &self.cfg, self.opt.steps_taken(), &self.classes, Some(&self.opt))
    }
}

pub fn model_checkpoint(
    model: &AuTR,
    cfg: &RunConfig,
    step: usize,
    classes: &[String],
    opt: Option<&AdamW>,
) -> Result<Checkpoint> {
    let mut weights = model.weights()?;
    for (k, v) in model.frozen() {
        weights.insert(k, v.as_tensor().copy()?);
    }
    Ok(Checkpoint {
        config: cfg.clone(),
        seed: cfg.seed,
        step,
        classes: classes.to_vec(),
        weights,
        optimizer: opt.map(AdamW::state).unwrap_or_default(),
    })
}

/// Model with the checkpoint's trainable weights; stored backbone weights
/// must match the model's frozen backbones.
pub fn restore_model(ck: &Checkpoint) -> Result<AuTR> {
    let model = AuTR::new(&ck.config.model, ck.seed, DType::F32, &Device::Cpu)?;
    let trainable: BTreeMap<String, Tensor> = ck
        .weights
        .iter()
        .filter(|(k, _)| !k.starts_with(FROZEN_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    model.load_weights(&trainable)?;
    for (name, var) in model.frozen() {
        if let Some(stored) = ck.weights.get(&name) {
            let diff: f32 = (stored.to_dtype(DType::F32)? - var.as_tensor().to_dtype(DType::F32)?)?
                .abs()?
                .max_all()?
                .to_scalar()?;
            if diff != 0.0 {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    msg: format!("frozen weight {name} differs from the built-in backbone"),
                });
            }
        }
    }
    Ok(model)
}

/// Winning-query masks at ground-truth resolution.
pub fn predict(model: &AuTR, s: &EncodedSample, threshold: f64) -> Result<Vec<BinaryMask>> {
    let pred = model.forward_encoded(&s.pyramid, &s.audio)?;
    let (h, w) = (s.gt[0].height(), s.gt[0].width());
    Ok(select_and_upsample(&pred, h, w, threshold)?.0)
}

pub fn evaluate(model: &AuTR, data: &[EncodedSample], cfg: &RunConfig, exec: Execution) -> Result<EvalAccumulator> {
    let scored = exec.map(data, |s| -> Result<EvalAccumulator> {
        let masks = predict(model, s, cfg.data.threshold)?;
        let mut acc = EvalAccumulator::new();
        acc.add_clip(&s.class, &masks, &s.gt, cfg.data.beta2)?;
        Ok(acc)
    });
    let mut acc = EvalAccumulator::new();
    for a in scored {
        acc.merge(a?);
    }
    Ok(acc)
}

pub fn evaluate_report(model: &AuTR, data: &[EncodedSample], cfg: &RunConfig, exec: Execution) -> Result<MetricsReport> {
    aggregate(&evaluate(model, data, cfg, exec)?)
}
