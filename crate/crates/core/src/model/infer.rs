//! Turning a prediction set into semantic and panoptic outputs.

use super::forward::PredictionSet;
use super::params::NO_OBJECT;
use crate::mask::BinaryMask;
use crate::synthdata::{ClassId, GtSegment, LabelMap};

/// Best non-"no object" class of each query: (classifier index, probability).
pub fn query_classes(preds: &PredictionSet) -> Vec<(usize, f64)> {
    preds
        .class_probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (NO_OBJECT + 1, f64::NEG_INFINITY);
            for (k, &v) in row.iter().enumerate().skip(NO_OBJECT + 1) {
                if v > best.1 {
                    best = (k, v);
                }
            }
            best
        })
        .collect()
}

/// Pixel label = argmax over seen classes of `sum_i p_i(k) m_i[h, w]`.
/// `classes[k - 1]` is the id scored by classifier row `k`.
pub fn infer_semantic(preds: &PredictionSet, classes: &[ClassId]) -> LabelMap {
    let scores = preds.masks.t().dot(&preds.class_probs);
    let labels = scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (k, &v) in row.iter().enumerate().skip(NO_OBJECT + 1) {
                if v > best.1 {
                    best = (k, v);
                }
            }
            classes.get(best.0.wrapping_sub(1)).copied().unwrap_or(0)
        })
        .collect();
    LabelMap {
        height: preds.height,
        width: preds.width,
        labels,
    }
}

/// Each pixel goes to the query maximising `max_k p_i(k) * m_i[h, w]`
/// (k over seen classes); low-confidence or tiny segments are dropped.
pub fn infer_panoptic(preds: &PredictionSet, classes: &[ClassId], min_confidence: f64, min_area: usize) -> Vec<GtSegment> {
    let best = query_classes(preds);
    let n = preds.num_queries();
    let mut owned: Vec<BinaryMask> = (0..n).map(|_| BinaryMask::zeros(preds.height, preds.width)).collect();
    for px in 0..preds.pixels() {
        let mut winner = (0usize, f64::NEG_INFINITY);
        for (i, &(_, score)) in best.iter().enumerate() {
            let v = score * preds.masks[[i, px]];
            if v > winner.1 {
                winner = (i, v);
            }
        }
        owned[winner.0].set_index(px, true);
    }
    owned
        .into_iter()
        .zip(best)
        .filter(|(mask, (_, score))| *score >= min_confidence && mask.area() >= min_area.max(1))
        .filter_map(|(mask, (k, _))| {
            classes.get(k - 1).map(|&class_id| GtSegment { class_id, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MaskActivation;
    use ndarray::{array, Array2};

    fn preds(class_probs: Array2<f64>, masks: Array2<f64>, h: usize, w: usize) -> PredictionSet {
        PredictionSet {
            height: h,
            width: w,
            activation: MaskActivation::Softmax,
            mask_logits: masks.clone(),
            class_probs,
            masks,
        }
    }

    #[test]
    fn single_query_labels_everything() {
        let p = preds(array![[0.0, 1.0, 0.0]], Array2::ones((1, 4)), 2, 2);
        let map = infer_semantic(&p, &[7, 9]);
        assert_eq!(map.labels, vec![7; 4]);
    }

    #[test]
    fn disjoint_saturated_masks_give_their_union() {
        let p = preds(
            array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            array![[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]],
            2,
            2,
        );
        assert_eq!(infer_semantic(&p, &[3, 4]).labels, vec![3, 3, 4, 4]);
        let segs = infer_panoptic(&p, &[3, 4], 0.5, 1);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].mask, BinaryMask::from_rows(&[[1u8, 1], [0, 0]]));
        assert_eq!(segs[1].class_id, 4);
    }

    #[test]
    fn no_object_queries_yield_nothing() {
        let p = preds(
            array![[0.9, 0.05, 0.05], [0.8, 0.1, 0.1]],
            array![[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]],
            2,
            2,
        );
        assert!(infer_panoptic(&p, &[1, 2], 0.5, 1).is_empty());
    }

    #[test]
    fn min_area_filters_small_segments() {
        let p = preds(
            array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            array![[1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            2,
            2,
        );
        let segs = infer_panoptic(&p, &[1, 2], 0.5, 2);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].class_id, 1);
    }
}
