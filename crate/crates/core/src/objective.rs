//! Query matching and the training objective: dice + focal segmentation
//! terms on the best-matching query, plus a sounding classification term.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::resize_bilinear;
use crate::mask_head::MaskLogits;
use crate::types::{resize_mask, BinaryMask};

/// Resolution at which segmentation terms are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossResolution {
    /// Logits are bilinearly upsampled to the ground-truth size.
    Mask,
    /// The ground truth is resampled to the logit grid and binarized at 0.5.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_sound: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub resolution: LossResolution,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 1.0,
            lambda_focal: 2.0,
            lambda_sound: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1e-6,
            resolution: LossResolution::Mask,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_dice, self.lambda_focal, self.lambda_sound];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config("loss.dice_eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("loss.focal_alpha must lie in [0, 1] and focal_gamma >= 0".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            lambda_dice: self.lambda_dice * c,
            lambda_focal: self.lambda_focal * c,
            lambda_sound: self.lambda_sound * c,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryCost {
    pub dice: f64,
    pub focal: f64,
    pub sound: f64,
}

impl QueryCost {
    pub fn total(&self, cfg: &CostConfig) -> f64 {
        cfg.lambda_dice * self.dice + cfg.lambda_focal * self.focal + cfg.lambda_sound * self.sound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub winner_index: usize,
    pub per_query_costs: Vec<QueryCost>,
    pub total_cost: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a {0, 1} (or soft) label.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

pub fn sound_cost(score: f64, label: bool) -> f64 {
    bce_with_logits(score, if label { 1.0 } else { 0.0 })
}

/// Dice cost of one frame of logits against a target in {0, 1}.
pub fn dice_frame(logits: &[f64], target: &[f64], eps: f64) -> f64 {
    let (mut spy, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target) {
        let p = sigmoid(z);
        spy += p * y;
        sp += p;
        sy += y;
    }
    1.0 - (2.0 * spy + eps) / (sp + sy + eps)
}

/// Gradient of [`dice_frame`] with respect to the logits.
pub fn dice_frame_grad(logits: &[f64], target: &[f64], eps: f64) -> Vec<f64> {
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let spy: f64 = p.iter().zip(target).map(|(p, y)| p * y).sum();
    let sp: f64 = p.iter().sum();
    let sy: f64 = target.iter().sum();
    let num = 2.0 * spy + eps;
    let den = sp + sy + eps;
    p.iter()
        .zip(target)
        .map(|(&p, &y)| -(2.0 * y * den - num) / (den * den) * p * (1.0 - p))
        .collect()
}

fn focal_terms(z: f64, y: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let q = p + y - 2.0 * p * y; // 1 − p_t
    let dq = (1.0 - 2.0 * y) * p * (1.0 - p);
    let a = alpha * y + (1.0 - alpha) * (1.0 - y);
    let b = bce_with_logits(z, y);
    let qg = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let dqg = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * dq };
    (a * qg * b, a * (dqg * b + qg * (p - y)))
}

/// Mean focal loss over pixels.
pub fn focal_mean(logits: &[f64], target: &[f64], gamma: f64, alpha: f64) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| focal_terms(z, y, gamma, alpha).0)
        .sum::<f64>()
        / n
}

/// Gradient of [`focal_mean`] with respect to the logits.
pub fn focal_mean_grad(logits: &[f64], target: &[f64], gamma: f64, alpha: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| focal_terms(z, y, gamma, alpha).1 / n)
        .collect()
}

// Tensor forms used for training. All operate elementwise with the
// numerically stable softplus, so saturated logits keep finite gradients.

fn softplus_t(z: &Tensor) -> candle_core::Result<Tensor> {
    z.relu()? + ((z.abs()?.neg()?.exp()? + 1.0)?.log()?)
}

pub fn sigmoid_t(z: &Tensor) -> candle_core::Result<Tensor> {
    softplus_t(&z.neg()?)?.neg()?.exp()
}

/// Per-query dice `[N]` for logits `[N, T, P]` against a target `[T, P]`,
/// averaged over frames.
pub fn dice_per_query(logits: &Tensor, target: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let p = sigmoid_t(logits)?;
    let y = target.unsqueeze(0)?;
    let spy = p.broadcast_mul(&y)?.sum(2)?;
    let sp = p.sum(2)?;
    let sy = y.sum(2)?;
    let ratio = ((spy * 2.0)? + eps)?.div(&(sp.broadcast_add(&sy)? + eps)?)?;
    (ratio.neg()? + 1.0)?.mean(1)
}

/// Per-query mean focal loss `[N]` for logits `[N, T, P]`.
pub fn focal_per_query(logits: &Tensor, target: &Tensor, gamma: f64, alpha: f64) -> candle_core::Result<Tensor> {
    let y = target.unsqueeze(0)?;
    let p = sigmoid_t(logits)?;
    let py = p.broadcast_mul(&y)?;
    let q = ((p.broadcast_add(&y)? - (py * 2.0)?)?).relu()?;
    let bce = (softplus_t(logits)? - logits.broadcast_mul(&y)?)?;
    let a = ((y.clone() * (2.0 * alpha - 1.0))? + (1.0 - alpha))?;
    let mut f = bce.broadcast_mul(&a)?;
    if gamma == 2.0 {
        f = (f * q.sqr()?)?;
    } else if gamma == 1.0 {
        f = (f * q)?;
    } else if gamma != 0.0 {
        f = (f * q.powf(gamma)?)?;
    }
    f.flatten_from(1)?.mean(1)
}

/// Mean sounding BCE over queries.
pub fn sound_bce_t(scores: &Tensor, labels: &Tensor) -> candle_core::Result<Tensor> {
    (softplus_t(scores)? - scores.mul(labels)?)?.mean_all()
}

/// Logits `[N, T, P]` and target `[T, P]` at the configured resolution.
pub fn seg_inputs(pred: &MaskLogits, gt: &[BinaryMask], resolution: LossResolution) -> Result<(Tensor, Tensor)> {
    let (n, t, h, w) = pred.logits.dims4()?;
    if gt.len() != t {
        return Err(Error::shape(format!("{} ground-truth frames for {t} predicted frames", gt.len())));
    }
    let (gh, gw) = (gt[0].height(), gt[0].width());
    if gt.iter().any(|m| m.height() != gh || m.width() != gw) {
        return Err(Error::shape("ground-truth frames differ in size"));
    }
    let (logits, masks, ph, pw) = match resolution {
        LossResolution::Mask if (gh, gw) != (h, w) => {
            (resize_bilinear(&pred.logits, gh, gw)?, gt.to_vec(), gh, gw)
        }
        _ => (
            pred.logits.clone(),
            gt.iter().map(|m| resize_mask(m, h, w, 0.5)).collect(),
            h,
            w,
        ),
    };
    let data: Vec<f64> = masks.iter().flat_map(|m| m.as_f64()).collect();
    let target = Tensor::from_vec(data, (t, ph * pw), pred.logits.device())?.to_dtype(pred.logits.dtype())?;
    Ok((logits.reshape((n, t, ph * pw))?, target))
}

fn per_query(pred: &MaskLogits, gt: &[BinaryMask], cfg: &CostConfig) -> Result<(Tensor, Tensor)> {
    let (logits, target) = seg_inputs(pred, gt, cfg.resolution)?;
    let dice = dice_per_query(&logits, &target, cfg.dice_eps)?;
    let focal = focal_per_query(&logits, &target, cfg.focal_gamma, cfg.focal_alpha)?;
    Ok((dice, focal))
}

fn to_f64s(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec1()?)
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

fn assemble(dice: Vec<f64>, focal: Vec<f64>, scores: Vec<f64>, cfg: &CostConfig) -> MatchResult {
    let per_query_costs: Vec<QueryCost> = dice
        .into_iter()
        .zip(focal)
        .zip(scores)
        .map(|((dice, focal), s)| QueryCost {
            dice,
            focal,
            sound: sound_cost(s, true),
        })
        .collect();
    let totals: Vec<f64> = per_query_costs.iter().map(|c| c.total(cfg)).collect();
    let winner_index = argmin_first(&totals);
    MatchResult {
        winner_index,
        total_cost: totals[winner_index],
        per_query_costs,
    }
}

/// The query whose weighted cost against the ground truth is lowest; the
/// sounding term uses label 1 for every candidate. Ties go to the lowest
/// index.
pub fn match_query(pred: &MaskLogits, gt: &[BinaryMask], cfg: &CostConfig) -> Result<MatchResult> {
    let (dice, focal) = per_query(pred, gt, cfg)?;
    Ok(assemble(
        to_f64s(&dice)?,
        to_f64s(&focal)?,
        to_f64s(&pred.sounding_scores)?,
        cfg,
    ))
}

/// Weighted segmentation cost of the matched query plus the mean sounding
/// BCE over all queries (1 for the match, 0 elsewhere).
pub fn training_loss(pred: &MaskLogits, gt: &[BinaryMask], cfg: &CostConfig) -> Result<(Tensor, MatchResult)> {
    let (dice, focal) = per_query(pred, gt, cfg)?;
    let m = assemble(
        to_f64s(&dice)?,
        to_f64s(&focal)?,
        to_f64s(&pred.sounding_scores)?,
        cfg,
    );
    let i = m.winner_index;
    let n = pred.n_queries();
    let seg = ((dice.get(i)? * cfg.lambda_dice)? + (focal.get(i)? * cfg.lambda_focal)?)?;
    let mut labels = vec![0.0; n];
    labels[i] = 1.0;
    let labels = Tensor::from_vec(labels, n, pred.sounding_scores.device())?.to_dtype(pred.sounding_scores.dtype())?;
    let sound = sound_bce_t(&pred.sounding_scores, &labels)?;
    let loss = (seg + (sound * cfg.lambda_sound)?)?;
    Ok((loss, m))
}

/// Dice cost for a single-query prediction `[T, H, W]`.
pub fn dice_cost(logits: &Tensor, gt: &[BinaryMask], cfg: &CostConfig) -> Result<f64> {
    let (l, t) = seg_inputs(&single(logits)?, gt, cfg.resolution)?;
    Ok(to_f64s(&dice_per_query(&l, &t, cfg.dice_eps)?)?[0])
}

/// Focal cost for a single-query prediction `[T, H, W]`.
pub fn focal_cost(logits: &Tensor, gt: &[BinaryMask], cfg: &CostConfig) -> Result<f64> {
    let (l, t) = seg_inputs(&single(logits)?, gt, cfg.resolution)?;
    Ok(to_f64s(&focal_per_query(&l, &t, cfg.focal_gamma, cfg.focal_alpha)?)?[0])
}

fn single(logits: &Tensor) -> Result<MaskLogits> {
    Ok(MaskLogits {
        logits: logits.unsqueeze(0)?,
        sounding_scores: Tensor::zeros(1, logits.dtype(), logits.device())?,
    })
}
