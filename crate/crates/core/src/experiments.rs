//! Experiment protocols: zero-shot transfer, data-efficient finetuning,
//! open-set class splits and the two-object audio-selectivity check.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{silent_masks, EncodedSample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{iou, render_table, MetricsReport};
use crate::model::AuTR;
use crate::synthesis::DatasetManifest;
use crate::train::{evaluate_report, predict, Trainer};

/// Partition classes into `n_seen` seen and the rest unseen; every sample
/// of a class lands on one side.
pub fn make_openset_split(manifest: &DatasetManifest, n_seen: usize, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut classes = manifest.classes();
    if n_seen == 0 || n_seen >= classes.len() {
        return Err(Error::TooFewClasses {
            n_seen,
            available: classes.len(),
        });
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let seen: BTreeSet<String> = classes[..n_seen].iter().cloned().collect();
    let pick = |keep: bool| manifest.filter_classes(|c| seen.contains(c) == keep);
    Ok((pick(true), pick(false)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub evaluable_samples: usize,
    pub skipped_samples: usize,
    pub metrics: Option<MetricsReport>,
}

impl ZeroShotReport {
    pub fn to_table(&self) -> String {
        match &self.metrics {
            Some(m) => m.to_table(),
            None => format!(
                "no evaluable samples: none of the {} samples belong to a trained class\n",
                self.skipped_samples
            ),
        }
    }
}

/// Evaluate on the samples whose class the model was trained on.
pub fn run_zero_shot(
    model: &AuTR,
    trained_classes: &[String],
    eval: &[EncodedSample],
    cfg: &RunConfig,
    exec: Execution,
) -> Result<ZeroShotReport> {
    let known: BTreeSet<&str> = trained_classes.iter().map(String::as_str).collect();
    let keep: Vec<EncodedSample> = eval
        .iter()
        .filter(|s| known.is_empty() || known.contains(s.class.as_str()))
        .cloned()
        .collect();
    let metrics = if keep.is_empty() {
        None
    } else {
        Some(evaluate_report(model, &keep, cfg, exec)?)
    };
    Ok(ZeroShotReport {
        evaluable_samples: keep.len(),
        skipped_samples: eval.len() - keep.len(),
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    WithPretraining,
    WithoutPretraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arm: Arm,
    pub fraction: f64,
    pub train_samples: usize,
    pub m_j: f64,
    pub m_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn get(&self, arm: Arm, fraction: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.arm == arm && r.fraction == fraction)
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![vec![
            "fraction".to_string(),
            "n".to_string(),
            "pretrained M_J".to_string(),
            "pretrained M_F".to_string(),
            "scratch M_J".to_string(),
            "scratch M_F".to_string(),
        ]];
        let mut fractions: Vec<f64> = self.rows.iter().map(|r| r.fraction).collect();
        fractions.dedup();
        for f in fractions {
            let cell = |arm, pick: fn(&SweepRow) -> f64| {
                self.get(arm, f).map(|r| format!("{:.4}", pick(r))).unwrap_or_else(|| "-".into())
            };
            let n = self.get(Arm::WithPretraining, f).map(|r| r.train_samples).unwrap_or(0);
            rows.push(vec![
                format!("{:.0}%", f * 100.0),
                n.to_string(),
                cell(Arm::WithPretraining, |r| r.m_j),
                cell(Arm::WithPretraining, |r| r.m_f),
                cell(Arm::WithoutPretraining, |r| r.m_j),
                cell(Arm::WithoutPretraining, |r| r.m_f),
            ]);
        }
        render_table(&rows)
    }
}

/// For each fraction: take a stratified subsample of `train` (`pick`
/// returns the chosen samples), finetune both a copy of the pretrained
/// checkpoint and a freshly initialized model for `cfg.data.finetune_steps`
/// steps, and evaluate on `test`. Fraction 0 is direct evaluation.
pub fn run_finetune_sweep(
    pretrained: &Checkpoint,
    train: &[EncodedSample],
    pick: impl Fn(f64) -> Vec<usize>,
    test: &[EncodedSample],
    fractions: &[f64],
    cfg: &RunConfig,
    exec: Execution,
) -> Result<SweepTable> {
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Config(format!("fraction {f} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for &fraction in fractions {
        let subset: Vec<EncodedSample> = if fraction == 0.0 {
            Vec::new()
        } else {
            pick(fraction).into_iter().map(|i| train[i].clone()).collect()
        };
        for arm in [Arm::WithPretraining, Arm::WithoutPretraining] {
            let mut run = cfg.clone();
            run.model = pretrained.config.model.clone();
            let mut trainer = match arm {
                Arm::WithPretraining => Trainer::from_checkpoint(pretrained, Some(&run))?,
                Arm::WithoutPretraining => Trainer::new(&run)?,
            }
            .with_execution(exec);
            if !subset.is_empty() {
                trainer.fit(&subset, cfg.data.finetune_steps, None, |_, _| {})?;
            }
            let m = evaluate_report(&trainer.model, test, &run, exec)?;
            rows.push(SweepRow {
                arm,
                fraction,
                train_samples: subset.len(),
                m_j: m.m_j,
                m_f: m.m_f,
            });
        }
    }
    Ok(SweepTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub evaluated: usize,
    pub sounding_wins: usize,
    pub fraction: f64,
    pub mean_iou_sounding: f64,
    pub mean_iou_silent: f64,
}

/// Over samples whose image holds another, silent object: how often the
/// prediction overlaps the sounding object more than the silent one.
pub fn audio_selectivity(model: &AuTR, samples: &[EncodedSample], threshold: f64, exec: Execution) -> Result<SelectivityReport> {
    let silent = silent_masks(samples);
    let idx: Vec<usize> = (0..samples.len()).filter(|&i| silent[i].is_some()).collect();
    let scores = exec.map(&idx, |&i| -> Result<(f64, f64)> {
        let s = &samples[i];
        let pred = predict(model, s, threshold)?;
        let quiet = silent[i].expect("filtered");
        let n = pred.len() as f64;
        let mut a = 0.0;
        let mut b = 0.0;
        for t in 0..pred.len() {
            a += iou(&pred[t], &s.gt[t])?;
            b += iou(&pred[t], &quiet[t])?;
        }
        Ok((a / n, b / n))
    });
    let scores: Vec<(f64, f64)> = scores.into_iter().collect::<Result<_>>()?;
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let wins = scores.iter().filter(|(a, b)| a > b).count();
    Ok(SelectivityReport {
        evaluated: n,
        sounding_wins: wins,
        fraction: wins as f64 / n as f64,
        mean_iou_sounding: scores.iter().map(|s| s.0).sum::<f64>() / n as f64,
        mean_iou_silent: scores.iter().map(|s| s.1).sum::<f64>() / n as f64,
    })
}
