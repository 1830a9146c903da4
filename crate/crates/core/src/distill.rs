//! Old-model regularisation: unbiased probabilities, standard and adaptive
//! distillation, and mask-based pseudo-labels.
//!
//! The current classifier extends the old one by appending rows, so old
//! outputs `0..K_old+1` line up with the first columns of the current
//! probabilities and every later column belongs to a class new at this step.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mask::BinaryMask;
use crate::model::{PredictionSet, NO_OBJECT};
use crate::objective::{LabelEntry, LabelOrigin, LabelSet, LOG_CLAMP};
use crate::synthdata::{ClassId, GtSegment};

/// Frozen outputs of the previous-step model on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct OldModelOutput {
    pub height: usize,
    pub width: usize,
    /// N x (K_old + 1), column 0 is "no object".
    pub class_probs: Array2<f64>,
    /// N x (H * W).
    pub masks: Array2<f64>,
}

impl From<PredictionSet> for OldModelOutput {
    fn from(p: PredictionSet) -> Self {
        Self {
            height: p.height,
            width: p.width,
            class_probs: p.class_probs,
            masks: p.masks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    None,
    /// Uniform 1/N weights over outputs.
    Kd,
    /// Outputs weighted by `(1 - p_old(no object))^2`, normalised.
    Ad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub class_id: ClassId,
    pub mask: BinaryMask,
    pub query: usize,
    /// Largest per-pixel confidence of the source output.
    pub confidence: f64,
}

/// Folds the probability of `new_indices` into "no object".
pub fn unbiased_prob(p: &[f64], new_indices: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() - new_indices.len());
    let mut folded = 0.0;
    for (k, &v) in p.iter().enumerate() {
        if new_indices.contains(&k) {
            folded += v;
        } else {
            out.push(v);
        }
    }
    out[NO_OBJECT] += folded;
    out
}

pub fn adaptive_weight(old_probs: &[f64]) -> f64 {
    let w = 1.0 - old_probs[NO_OBJECT];
    w * w
}

/// Distillation value and its gradient w.r.t. the current class probabilities.
#[derive(Debug, Clone)]
pub struct DistillLoss {
    pub value: f64,
    pub d_probs: Array2<f64>,
    /// Per-output weights actually applied (sum to 1 unless degenerate).
    pub weights: Vec<f64>,
}

/// `-sum_k p_old(k) ln(p~(k) / p_old(k))` for one output, terms with
/// negligible old mass skipped.
fn output_kl(current: &[f64], old: &[f64]) -> f64 {
    let unbiased = unbiased_tail(current, old.len());
    old.iter()
        .zip(&unbiased)
        .filter(|(&po, _)| po >= LOG_CLAMP)
        .map(|(&po, &pt)| -po * (pt.max(LOG_CLAMP).ln() - po.ln()))
        .sum()
}

fn unbiased_tail(current: &[f64], old_len: usize) -> Vec<f64> {
    let new: Vec<usize> = (old_len..current.len()).collect();
    unbiased_prob(current, &new)
}

fn check_shapes(current: &Array2<f64>, old: &Array2<f64>) -> Result<()> {
    if current.nrows() != old.nrows() || current.ncols() < old.ncols() {
        return Err(shape_err(
            format!("{} outputs with at least {} classes", old.nrows(), old.ncols()),
            format!("{:?}", current.dim()),
        ));
    }
    Ok(())
}

fn weighted_distill(current: &Array2<f64>, old: &Array2<f64>, weights: Vec<f64>) -> DistillLoss {
    let k_old = old.ncols();
    let mut d_probs = Array2::zeros(current.raw_dim());
    let mut value = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let cur = current.row(i);
        let cur = cur.as_slice().expect("contiguous");
        let po = old.row(i);
        let po = po.as_slice().expect("contiguous");
        value += w * output_kl(cur, po);
        let unbiased = unbiased_tail(cur, k_old);
        for k in 0..k_old {
            if po[k] < LOG_CLAMP || unbiased[k] <= LOG_CLAMP {
                continue;
            }
            let g = -w * po[k] / unbiased[k];
            if k == NO_OBJECT {
                d_probs[[i, NO_OBJECT]] += g;
                for j in k_old..cur.len() {
                    d_probs[[i, j]] += g;
                }
            } else {
                d_probs[[i, k]] += g;
            }
        }
    }
    DistillLoss {
        value,
        d_probs,
        weights,
    }
}

/// Standard distillation: mean over all outputs.
pub fn kd_loss(current: &Array2<f64>, old: &Array2<f64>) -> Result<DistillLoss> {
    check_shapes(current, old)?;
    let n = current.nrows();
    Ok(weighted_distill(current, old, vec![1.0 / n as f64; n]))
}

/// Adaptive distillation. When every old output is pure "no object" the
/// weights are all zero and the loss is defined as 0.
pub fn ad_loss(current: &Array2<f64>, old: &Array2<f64>) -> Result<DistillLoss> {
    check_shapes(current, old)?;
    let raw: Vec<f64> = old
        .rows()
        .into_iter()
        .map(|r| adaptive_weight(r.as_slice().expect("contiguous")))
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(weighted_distill(current, old, weights))
}

pub fn distill_loss(mode: DistillMode, current: &Array2<f64>, old: &Array2<f64>) -> Result<Option<DistillLoss>> {
    match mode {
        DistillMode::None => Ok(None),
        DistillMode::Kd => kd_loss(current, old).map(Some),
        DistillMode::Ad => ad_loss(current, old).map(Some),
    }
}

/// Mask-based pseudo-labels from the old model.
///
/// A pixel joins output `i`'s pseudo-mask when `i` has the highest
/// confidence `q_i = p_max_i * m_i` there (smallest index on ties), the
/// pixel is in `i`'s binarised mask and no ground-truth segment covers it.
/// Outputs keeping fewer than half of their binarised pixels, or none, are
/// discarded. `old_classes[k - 1]` is the id of old classifier row `k`.
pub fn generate_pseudo_labels(old: &OldModelOutput, gt: &[GtSegment], old_classes: &[ClassId]) -> Result<Vec<PseudoLabel>> {
    let (n, k1) = old.class_probs.dim();
    let pixels = old.height * old.width;
    if old.masks.dim() != (n, pixels) {
        return Err(shape_err(format!("{n}x{pixels}"), format!("{:?}", old.masks.dim())));
    }
    if k1 != old_classes.len() + 1 {
        return Err(shape_err(old_classes.len() + 1, k1));
    }
    let mut gt_all = BinaryMask::zeros(old.height, old.width);
    for seg in gt {
        gt_all.union_with(&seg.mask)?;
    }

    let best: Vec<(usize, f64)> = old
        .class_probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut b = (1usize, f64::NEG_INFINITY);
            for k in 1..k1 {
                if row[k] > b.1 {
                    b = (k, row[k]);
                }
            }
            b
        })
        .collect();

    let mut binary: Vec<usize> = vec![0; n];
    let mut pseudo: Vec<BinaryMask> = (0..n).map(|_| BinaryMask::zeros(old.height, old.width)).collect();
    let mut peak = vec![0.0f64; n];
    for px in 0..pixels {
        let mut winner = (0usize, f64::NEG_INFINITY);
        for (i, &(_, pmax)) in best.iter().enumerate() {
            let m = old.masks[[i, px]];
            let q = pmax * m;
            peak[i] = peak[i].max(q);
            if m > 0.5 {
                binary[i] += 1;
            }
            if q > winner.1 {
                winner = (i, q);
            }
        }
        let i = winner.0;
        if !gt_all.bits()[px] && old.masks[[i, px]] > 0.5 {
            pseudo[i].set_index(px, true);
        }
    }

    Ok(pseudo
        .into_iter()
        .enumerate()
        .filter_map(|(i, mask)| {
            let area = mask.area();
            (area >= 1 && 2 * area >= binary[i]).then(|| PseudoLabel {
                class_id: old_classes[best[i].0 - 1],
                mask,
                query: i,
                confidence: peak[i],
            })
        })
        .collect())
}

/// Ground truth followed by pseudo-labels; overlap is an integrity error.
pub fn merge_labels(gt: &[GtSegment], pseudo: &[PseudoLabel]) -> Result<LabelSet> {
    let mut set = LabelSet::from_ground_truth(gt)?;
    set.entries.extend(pseudo.iter().map(|p| LabelEntry {
        class_id: p.class_id,
        mask: p.mask.clone(),
        origin: LabelOrigin::Pseudo,
    }));
    set.validate()?;
    Ok(set)
}
