//! Supervised set-prediction loss: focal classification plus dice and
//! binary cross-entropy on matched masks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::matching::{class_column, Matching};
use super::LabelSet;
use crate::error::{shape_err, Result};
use crate::model::{PredictionSet, NO_OBJECT};
use crate::synthdata::ClassId;

pub const DICE_EPS: f64 = 1e-8;
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegHyper {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_mask: f64,
    pub no_object_weight: f64,
}

impl Default for SegHyper {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            gamma: 2.0,
            lambda_mask: 5.0,
            no_object_weight: 1.0,
        }
    }
}

/// Individual loss terms. `total = focal + lambda_mask * (dice_loss + mask_ce)
/// + lambda_d * adaptive_distill`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice_loss: f64,
    pub mask_ce: f64,
    pub adaptive_distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&mut self, lambda_mask: f64, lambda_d: f64) {
        self.total = self.focal + lambda_mask * (self.dice_loss + self.mask_ce) + lambda_d * self.adaptive_distill;
    }

    pub fn is_finite(&self) -> bool {
        [self.focal, self.dice_loss, self.mask_ce, self.adaptive_distill, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Supervised loss and its gradients w.r.t. class probabilities and masks.
#[derive(Debug, Clone)]
pub struct SegLoss {
    pub breakdown: LossBreakdown,
    pub d_probs: Array2<f64>,
    pub d_masks: Array2<f64>,
}

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_CLAMP).ln()
}

/// Derivative of `clamped_ln`; zero below the clamp.
fn clamped_ln_grad(v: f64) -> f64 {
    if v > LOG_CLAMP {
        1.0 / v
    } else {
        0.0
    }
}

/// Soft dice coefficient against a target mask given as 0/1 values.
pub fn dice(soft: &[f64], target: &[f64]) -> Result<f64> {
    if soft.len() != target.len() {
        return Err(shape_err(target.len(), soft.len()));
    }
    let inter: f64 = soft.iter().zip(target).map(|(a, b)| a * b).sum();
    let denom = soft.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_EPS;
    Ok((2.0 * inter + DICE_EPS) / denom)
}

fn dice_grad(soft: &[f64], target: &[f64]) -> Vec<f64> {
    let inter: f64 = soft.iter().zip(target).map(|(a, b)| a * b).sum();
    let denom = soft.iter().sum::<f64>() + target.iter().sum::<f64>() + DICE_EPS;
    let num = 2.0 * inter + DICE_EPS;
    target.iter().map(|&t| (2.0 * t * denom - num) / (denom * denom)).collect()
}

/// `-alpha (1 - p(c))^gamma ln p(c)` for one distribution.
pub fn focal_term(probs: &[f64], class: usize, alpha: f64, gamma: f64) -> f64 {
    let pc = probs[class];
    -alpha * (1.0 - pc).max(0.0).powf(gamma) * clamped_ln(pc)
}

/// Derivative of the focal term w.r.t. `p(c)`.
fn focal_grad(pc: f64, alpha: f64, gamma: f64) -> f64 {
    let one_minus = (1.0 - pc).max(0.0);
    let modulating = one_minus.powf(gamma);
    let modulating_grad = if gamma == 0.0 { 0.0 } else { -gamma * one_minus.powf(gamma - 1.0) };
    -alpha * (modulating_grad * clamped_ln(pc) + modulating * clamped_ln_grad(pc))
}

/// `(1 - dice, mean binary cross-entropy)` of a soft mask against a target.
pub fn mask_term(soft: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    let dice_loss = 1.0 - dice(soft, target)?;
    let ce = soft
        .iter()
        .zip(target)
        .map(|(&m, &t)| -(t * clamped_ln(m) + (1.0 - t) * clamped_ln(1.0 - m)))
        .sum::<f64>()
        / soft.len() as f64;
    Ok((dice_loss, ce))
}

fn mask_ce_grad(soft: &[f64], target: &[f64]) -> Vec<f64> {
    let n = soft.len() as f64;
    soft.iter()
        .zip(target)
        .map(|(&m, &t)| -(t * clamped_ln_grad(m) - (1.0 - t) * clamped_ln_grad(1.0 - m)) / n)
        .collect()
}

/// Supervised loss over a fixed matching. Matched predictions get the
/// focal term for their annotation's class and the weighted mask terms;
/// unmatched ones get `no_object_weight` times the focal term for "no object".
pub fn seg_loss(
    preds: &PredictionSet,
    labels: &LabelSet,
    matching: &Matching,
    classes: &[ClassId],
    hyper: &SegHyper,
) -> Result<SegLoss> {
    let terms = TermWeights {
        focal: 1.0,
        dice: hyper.lambda_mask,
        mask_ce: hyper.lambda_mask,
    };
    seg_loss_weighted(preds, labels, matching, classes, hyper, terms)
}

/// Per-term multipliers applied to the gradients of [`seg_loss_weighted`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub focal: f64,
    pub dice: f64,
    pub mask_ce: f64,
}

impl TermWeights {
    pub fn scalar(&self, b: &LossBreakdown) -> f64 {
        self.focal * b.focal + self.dice * b.dice_loss + self.mask_ce * b.mask_ce
    }
}

/// Like [`seg_loss`], but the returned gradients belong to
/// `terms.scalar(&breakdown)` instead of the standard total.
pub fn seg_loss_weighted(
    preds: &PredictionSet,
    labels: &LabelSet,
    matching: &Matching,
    classes: &[ClassId],
    hyper: &SegHyper,
    terms: TermWeights,
) -> Result<SegLoss> {
    let n = preds.num_queries();
    if matching.sigma.len() != labels.len() {
        return Err(shape_err(labels.len(), matching.sigma.len()));
    }
    let mut d_probs = Array2::zeros(preds.class_probs.raw_dim());
    let mut d_masks = Array2::zeros(preds.masks.raw_dim());
    let mut out = LossBreakdown::default();
    let owner = matching.inverse(n);
    for i in 0..n {
        let probs = preds.class_probs.row(i);
        let probs = probs.as_slice().expect("contiguous");
        match owner[i] {
            Some(j) => {
                let entry = &labels.entries[j];
                let k = class_column(classes, entry.class_id)?;
                out.focal += focal_term(probs, k, hyper.alpha, hyper.gamma);
                d_probs[[i, k]] += terms.focal * focal_grad(probs[k], hyper.alpha, hyper.gamma);

                let soft = preds.masks.row(i);
                let soft = soft.as_slice().expect("contiguous");
                let target = entry.mask.as_f64();
                if soft.len() != target.len() {
                    return Err(shape_err(target.len(), soft.len()));
                }
                let (dl, ce) = mask_term(soft, &target)?;
                out.dice_loss += dl;
                out.mask_ce += ce;
                let gd = dice_grad(soft, &target);
                let gc = mask_ce_grad(soft, &target);
                for (px, (a, b)) in gd.iter().zip(&gc).enumerate() {
                    d_masks[[i, px]] += -terms.dice * a + terms.mask_ce * b;
                }
            }
            None => {
                let w = hyper.no_object_weight;
                out.focal += w * focal_term(probs, NO_OBJECT, hyper.alpha, hyper.gamma);
                d_probs[[i, NO_OBJECT]] += terms.focal * w * focal_grad(probs[NO_OBJECT], hyper.alpha, hyper.gamma);
            }
        }
    }
    out.recompute_total(hyper.lambda_mask, 0.0);
    Ok(SegLoss {
        breakdown: out,
        d_probs,
        d_masks,
    })
}
