//! Panoptic quality, mean IoU and continual aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask::{check_disjoint, BinaryMask};
use crate::protocol::TaskSpec;
use crate::synthdata::{ClassId, GtSegment, LabelMap};

pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let union = a.union_area(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_area(b)? as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassPq {
    fn denominator(&self) -> f64 {
        self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64
    }

    /// `None` when the class never occurred on either side.
    pub fn pq(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0.0).then(|| self.iou_sum / d)
    }

    /// Mean IoU of true positives; `None` without true positives.
    pub fn sq(&self) -> Option<f64> {
        (self.tp > 0).then(|| self.iou_sum / self.tp as f64)
    }

    pub fn rq(&self) -> Option<f64> {
        let d = self.denominator();
        (d > 0.0).then(|| self.tp as f64 / d)
    }
}

/// Per-class panoptic counts. Merging is field-wise addition.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub classes: BTreeMap<ClassId, ClassPq>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (&c, s) in &other.classes {
            let e = self.classes.entry(c).or_default();
            e.tp += s.tp;
            e.fp += s.fp;
            e.fn_ += s.fn_;
            e.iou_sum += s.iou_sum;
        }
    }

    pub fn get(&self, class_id: ClassId) -> ClassPq {
        self.classes.get(&class_id).copied().unwrap_or_default()
    }
}

/// Adds one image's segments to `stats`. A prediction and a ground-truth
/// segment match when they share a class and their IoU exceeds 0.5; with
/// disjoint segments on both sides such a match is unique.
pub fn accumulate_pq(pred: &[GtSegment], gt: &[GtSegment], stats: &mut PqStats) -> Result<()> {
    check_disjoint(pred.iter().map(|s| &s.mask), "predicted segments")?;
    check_disjoint(gt.iter().map(|s| &s.mask), "ground-truth segments")?;
    let mut gt_matched = vec![false; gt.len()];
    for p in pred {
        let mut hit = None;
        for (j, g) in gt.iter().enumerate() {
            if g.class_id != p.class_id || gt_matched[j] {
                continue;
            }
            let v = iou(&p.mask, &g.mask)?;
            if v > 0.5 {
                hit = Some((j, v));
                break;
            }
        }
        let entry = stats.classes.entry(p.class_id).or_default();
        match hit {
            Some((j, v)) => {
                gt_matched[j] = true;
                entry.tp += 1;
                entry.iou_sum += v;
            }
            None => entry.fp += 1,
        }
    }
    for (g, matched) in gt.iter().zip(gt_matched) {
        if !matched {
            stats.classes.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    Ok(())
}

/// Per-class intersection and union pixel counts over an evaluation set.
/// Pixels unlabeled in the ground truth (id 0) are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub classes: BTreeMap<ClassId, (u64, u64)>,
}

impl IouStats {
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, classes: &BTreeSet<ClassId>) -> Result<()> {
        if pred.labels.len() != gt.labels.len() {
            return Err(shape_err(gt.labels.len(), pred.labels.len()));
        }
        for &c in classes {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
                if b == 0 {
                    continue;
                }
                let (pa, pb) = (a == c, b == c);
                inter += (pa && pb) as u64;
                union += (pa || pb) as u64;
            }
            let e = self.classes.entry(c).or_default();
            e.0 += inter;
            e.1 += union;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouStats) {
        for (&c, &(i, u)) in &other.classes {
            let e = self.classes.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
    }

    /// `None` when the class is absent from both prediction and ground truth.
    pub fn iou(&self, class_id: ClassId) -> Option<f64> {
        self.classes
            .get(&class_id)
            .and_then(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
    }
}

/// Per-class IoU of one label-map pair and the mean over defined classes.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap, classes: &BTreeSet<ClassId>) -> Result<(BTreeMap<ClassId, Option<f64>>, Option<f64>)> {
    let mut stats = IouStats::default();
    stats.accumulate(pred, gt, classes)?;
    let per: BTreeMap<ClassId, Option<f64>> = classes.iter().map(|&c| (c, stats.iou(c))).collect();
    Ok((per.clone(), mean_defined(per.values().copied())))
}

pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
}

/// Evaluation of one step over every class seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub classes: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Pq,
    Sq,
    Rq,
    Iou,
}

impl StepReport {
    pub fn from_stats(step: usize, seen: &[ClassId], pq: &PqStats, iou: &IouStats) -> Self {
        let classes = seen
            .iter()
            .map(|&c| {
                let s = pq.get(c);
                ClassMetrics {
                    class_id: c,
                    pq: s.pq(),
                    sq: s.sq(),
                    rq: s.rq(),
                    iou: iou.iou(c),
                }
            })
            .collect();
        Self { step, classes }
    }

    pub fn value(&self, class_id: ClassId, metric: Metric) -> Option<f64> {
        let m = self.classes.iter().find(|m| m.class_id == class_id)?;
        match metric {
            Metric::Pq => m.pq,
            Metric::Sq => m.sq,
            Metric::Rq => m.rq,
            Metric::Iou => m.iou,
        }
    }

    /// Mean of `metric` over `group`, skipping undefined classes.
    pub fn group_mean(&self, group: &[ClassId], metric: Metric) -> Option<f64> {
        mean_defined(group.iter().map(|&c| self.value(c, metric)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub base: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub avg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinualSummary {
    pub pq: GroupSummary,
    pub sq: GroupSummary,
    pub rq: GroupSummary,
    pub miou: GroupSummary,
}

fn summarize(reports: &[StepReport], tasks: &[TaskSpec], metric: Metric) -> GroupSummary {
    let last = reports.last().expect("checked non-empty");
    let final_task = &tasks[reports.len() - 1];
    let base = &tasks[0].new_classes;
    let new = &final_task.seen_classes[base.len()..];
    GroupSummary {
        base: last.group_mean(base, metric),
        new: if new.is_empty() { None } else { last.group_mean(new, metric) },
        all: last.group_mean(&final_task.seen_classes, metric),
        avg: mean_defined(
            reports
                .iter()
                .zip(tasks)
                .map(|(r, t)| r.group_mean(&t.seen_classes, metric)),
        ),
    }
}

/// Final base/new/all values and the per-step running average.
pub fn aggregate_continual(reports: &[StepReport], tasks: &[TaskSpec]) -> Result<ContinualSummary> {
    if reports.is_empty() || reports.len() != tasks.len() {
        return Err(Error::Integrity(format!(
            "{} step reports for {} tasks",
            reports.len(),
            tasks.len()
        )));
    }
    for (idx, r) in reports.iter().enumerate() {
        if r.step != idx {
            return Err(Error::Integrity(format!("missing report for step {idx}")));
        }
    }
    Ok(ContinualSummary {
        pq: summarize(reports, tasks, Metric::Pq),
        sq: summarize(reports, tasks, Metric::Sq),
        rq: summarize(reports, tasks, Metric::Rq),
        miou: summarize(reports, tasks, Metric::Iou),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(class_id: ClassId, rows: &[[u8; 4]]) -> GtSegment {
        GtSegment {
            class_id,
            mask: BinaryMask::from_rows(rows),
        }
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_rows(&[[1u8, 1, 1, 0]]);
        let b = BinaryMask::from_rows(&[[0u8, 1, 1, 1]]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.5);
        let c = BinaryMask::from_rows(&[[0u8, 0, 0, 1]]);
        let d = BinaryMask::from_rows(&[[1u8, 0, 0, 0]]);
        assert_eq!(iou(&c, &d).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::zeros(2, 2)).is_err());
    }

    #[test]
    fn single_true_positive() {
        let gt = [seg(1, &[[1, 1, 1, 1], [1, 0, 0, 0]])];
        let pred = [seg(1, &[[1, 1, 1, 1], [0, 0, 0, 0]])];
        let mut s = PqStats::default();
        accumulate_pq(&pred, &gt, &mut s).unwrap();
        let c = s.get(1);
        assert!((c.pq().unwrap() - 0.8).abs() < 1e-12);
        assert!((c.sq().unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(c.rq(), Some(1.0));
    }

    #[test]
    fn class_mismatch_is_fp_and_fn() {
        let gt = [seg(1, &[[1, 1, 0, 0]])];
        let pred = [seg(2, &[[1, 1, 0, 0]])];
        let mut s = PqStats::default();
        accumulate_pq(&pred, &gt, &mut s).unwrap();
        assert_eq!(s.get(1).pq(), Some(0.0));
        assert_eq!(s.get(2).pq(), Some(0.0));
        assert_eq!(s.get(1).fn_, 1);
        assert_eq!(s.get(2).fp, 1);
    }

    #[test]
    fn one_gt_two_preds() {
        let gt = [seg(1, &[[1, 1, 1, 1], [1, 1, 1, 1], [1, 1, 0, 0]])];
        let a = seg(1, &[[1, 1, 1, 1], [1, 1, 0, 0], [0, 0, 0, 0]]);
        let b = seg(1, &[[0, 0, 0, 0], [0, 0, 1, 1], [1, 0, 0, 0]]);
        assert!((iou(&a.mask, &gt[0].mask).unwrap() - 0.6).abs() < 1e-12);
        assert!((iou(&b.mask, &gt[0].mask).unwrap() - 0.3).abs() < 1e-12);
        let mut s = PqStats::default();
        accumulate_pq(&[a, b], &gt, &mut s).unwrap();
        let c = s.get(1);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
        assert!((c.pq().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn overlapping_predictions_rejected() {
        let a = seg(1, &[[1, 1, 0, 0]]);
        let b = seg(2, &[[0, 1, 1, 0]]);
        assert!(accumulate_pq(&[a, b], &[], &mut PqStats::default()).is_err());
    }

    #[test]
    fn mean_iou_examples() {
        let gt = LabelMap {
            height: 4,
            width: 4,
            labels: vec![1, 1, 1, 1, 1, 1, 2, 2, 0, 2, 2, 2, 0, 0, 0, 0],
        };
        let pred = LabelMap {
            height: 4,
            width: 4,
            labels: vec![1, 1, 1, 2, 1, 0, 2, 2, 0, 2, 2, 1, 1, 2, 0, 0],
        };
        let classes = BTreeSet::from([1, 2, 3]);
        let (per, mean) = mean_iou(&pred, &gt, &classes).unwrap();
        // class 1: pred {0,1,2,4,11}, gt {0..=5}: inter 4, union 7
        // class 2: pred {3,6,7,9,10}, gt {6,7,9,10,11}: inter 4, union 6
        // pixels 12 and 13 are unlabeled and do not count
        assert!((per[&1].unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((per[&2].unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(per[&3], None);
        assert!((mean.unwrap() - (4.0 / 7.0 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        let (_, perfect) = mean_iou(&gt, &gt, &classes).unwrap();
        assert_eq!(perfect, Some(1.0));
        let wrong = LabelMap {
            labels: vec![3; 16],
            ..gt.clone()
        };
        assert_eq!(mean_iou(&wrong, &gt, &BTreeSet::from([1, 2, 3])).unwrap().1, Some(0.0));
    }

    fn report(step: usize, values: &[(ClassId, f64)]) -> StepReport {
        StepReport {
            step,
            classes: values
                .iter()
                .map(|&(c, v)| ClassMetrics {
                    class_id: c,
                    pq: Some(v),
                    sq: Some(v),
                    rq: Some(1.0),
                    iou: Some(v),
                })
                .collect(),
        }
    }

    fn tasks() -> Vec<TaskSpec> {
        vec![
            TaskSpec {
                step: 0,
                new_classes: vec![1, 2],
                seen_classes: vec![1, 2],
            },
            TaskSpec {
                step: 1,
                new_classes: vec![3],
                seen_classes: vec![1, 2, 3],
            },
        ]
    }

    #[test]
    fn two_step_aggregation() {
        let reports = vec![report(0, &[(1, 0.8), (2, 0.6)]), report(1, &[(1, 0.4), (2, 0.2), (3, 0.9)])];
        let s = aggregate_continual(&reports, &tasks()).unwrap();
        assert!((s.pq.base.unwrap() - 0.3).abs() < 1e-12);
        assert!((s.pq.new.unwrap() - 0.9).abs() < 1e-12);
        assert!((s.pq.all.unwrap() - 0.5).abs() < 1e-12);
        assert!((s.pq.avg.unwrap() - (0.7 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_step_aggregation() {
        let t = &tasks()[..1];
        let s = aggregate_continual(&[report(0, &[(1, 0.8), (2, 0.6)])], t).unwrap();
        assert_eq!(s.pq.base, s.pq.all);
        assert_eq!(s.pq.new, None);
        assert_eq!(s.pq.avg, s.pq.all);
    }

    #[test]
    fn class_order_does_not_matter() {
        let a = vec![report(0, &[(1, 0.8), (2, 0.6)]), report(1, &[(1, 0.4), (2, 0.2), (3, 0.9)])];
        let b = vec![report(0, &[(2, 0.6), (1, 0.8)]), report(1, &[(3, 0.9), (2, 0.2), (1, 0.4)])];
        let mut t = tasks();
        t[0].new_classes = vec![2, 1];
        let sa = aggregate_continual(&a, &tasks()).unwrap();
        let sb = aggregate_continual(&b, &t).unwrap();
        assert!((sa.pq.base.unwrap() - sb.pq.base.unwrap()).abs() < 1e-15);
        assert!((sa.pq.all.unwrap() - sb.pq.all.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn missing_step_is_an_error() {
        assert!(aggregate_continual(&[report(0, &[(1, 0.8)])], &tasks()).is_err());
        assert!(aggregate_continual(&[report(0, &[]), report(2, &[])], &tasks()).is_err());
    }
}
