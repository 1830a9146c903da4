use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{accumulate_pq, iou, PqStats};
use crate::objective::{assignment_cost, solve_assignment};
use crate::synthdata::{mix_seed, ClassId, GtSegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Match,
    Pq,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleFailure {
    pub trial: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub kind: OracleKind,
    pub trials: usize,
    pub failures: Vec<OracleFailure>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Minimum cost and lexicographically smallest optimal assignment by
/// exhaustive search. Rows are annotations, columns predictions.
pub fn brute_force_assignment(cost: &Array2<f64>) -> (f64, Vec<usize>) {
    fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if row == cost.nrows() {
            let total = assignment_cost(cost, cur);
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                *best = Some((total, cur.clone()));
            }
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(cost, row + 1, used, cur, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost.ncols()], &mut Vec::new(), &mut best);
    best.unwrap_or((0.0, Vec::new()))
}

fn match_trial(seed: u64) -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = rng.gen_range(1..=7usize);
    let rows = rng.gen_range(0..=cols);
    // coarse values make ties common
    let coarse = rng.gen_bool(0.3);
    let cost = Array2::from_shape_simple_fn((rows, cols), || {
        if coarse {
            -(rng.gen_range(0..4) as f64) / 4.0
        } else {
            -rng.gen::<f64>()
        }
    });
    let got = solve_assignment(&cost)?;
    let (best, want) = brute_force_assignment(&cost);
    let got_cost = assignment_cost(&cost, &got);
    if got_cost != best {
        return Ok(Some(format!("{rows}x{cols}: cost {got_cost} vs optimum {best}")));
    }
    if got != want {
        return Ok(Some(format!("{rows}x{cols}: assignment {got:?} vs {want:?}")));
    }
    Ok(None)
}

/// Segments from an id map; id 0 is void. Each id gets a random class.
fn segments_from_ids(ids: &[usize], side: usize, classes: &BTreeMap<usize, ClassId>) -> Vec<GtSegment> {
    let mut out = Vec::new();
    for (&id, &class_id) in classes {
        let bits: Vec<bool> = ids.iter().map(|&v| v == id).collect();
        if bits.iter().any(|&b| b) {
            out.push(GtSegment {
                class_id,
                mask: BinaryMask::from_bits(side, side, bits).expect("square"),
            });
        }
    }
    out
}

/// Reference PQ counts by exhaustive search over one-to-one matchings of
/// same-class pairs with IoU above one half, keeping the largest matching.
pub fn brute_force_pq(pred: &[GtSegment], gt: &[GtSegment]) -> Result<PqStats> {
    fn go(
        pred: &[GtSegment],
        gt: &[GtSegment],
        ious: &[Vec<f64>],
        i: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<Vec<Option<usize>>>,
    ) {
        if i == pred.len() {
            let count = |m: &Vec<Option<usize>>| m.iter().filter(|x| x.is_some()).count();
            if best.as_ref().is_none_or(|b| count(cur) > count(b)) {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(None);
        go(pred, gt, ious, i + 1, used, cur, best);
        cur.pop();
        for j in 0..gt.len() {
            if !used[j] && pred[i].class_id == gt[j].class_id && ious[i][j] > 0.5 {
                used[j] = true;
                cur.push(Some(j));
                go(pred, gt, ious, i + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let ious = pred
        .iter()
        .map(|p| gt.iter().map(|g| iou(&p.mask, &g.mask)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut best = None;
    go(pred, gt, &ious, 0, &mut vec![false; gt.len()], &mut Vec::new(), &mut best);
    let best = best.unwrap_or_default();
    let mut stats = PqStats::default();
    let mut matched_gt = vec![false; gt.len()];
    for (i, m) in best.iter().enumerate() {
        let e = stats.classes.entry(pred[i].class_id).or_default();
        match m {
            Some(j) => {
                e.tp += 1;
                e.iou_sum += ious[i][*j];
                matched_gt[*j] = true;
            }
            None => e.fp += 1,
        }
    }
    for (j, g) in gt.iter().enumerate() {
        if !matched_gt[j] {
            stats.classes.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    Ok(stats)
}

fn random_segments(rng: &mut ChaCha8Rng, side: usize, base: Option<&[usize]>) -> (Vec<usize>, BTreeMap<usize, ClassId>) {
    let count = rng.gen_range(1..=5usize);
    let ids: Vec<usize> = match base {
        // a perturbed copy keeps many IoUs near the threshold
        Some(b) => b
            .iter()
            .map(|&v| if rng.gen_bool(0.2) { rng.gen_range(0..=count) } else { v.min(count) })
            .collect(),
        None => {
            let mut ids = vec![0; side * side];
            for id in 1..=count {
                let (h, w) = (rng.gen_range(1..=side / 2 + 1), rng.gen_range(1..=side / 2 + 1));
                let (y, x) = (rng.gen_range(0..=side - h), rng.gen_range(0..=side - w));
                for yy in y..y + h {
                    for xx in x..x + w {
                        ids[yy * side + xx] = id;
                    }
                }
            }
            ids
        }
    };
    let classes = (1..=count).map(|id| (id, rng.gen_range(1..=3))).collect();
    (ids, classes)
}

fn pq_trial(seed: u64) -> Result<Option<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 6;
    let (gt_ids, gt_classes) = random_segments(&mut rng, side, None);
    let (pred_ids, mut pred_classes) = random_segments(&mut rng, side, Some(&gt_ids));
    for (id, c) in pred_classes.iter_mut() {
        if let Some(&g) = gt_classes.get(id) {
            if rng.gen_bool(0.7) {
                *c = g;
            }
        }
    }
    let gt = segments_from_ids(&gt_ids, side, &gt_classes);
    let pred = segments_from_ids(&pred_ids, side, &pred_classes);
    let mut got = PqStats::default();
    accumulate_pq(&pred, &gt, &mut got)?;
    let want = brute_force_pq(&pred, &gt)?;
    let classes: std::collections::BTreeSet<ClassId> = got.classes.keys().chain(want.classes.keys()).copied().collect();
    for c in classes {
        let (a, b) = (got.get(c), want.get(c));
        if (a.tp, a.fp, a.fn_) != (b.tp, b.fp, b.fn_) {
            return Ok(Some(format!(
                "class {c}: tp/fp/fn {:?} vs {:?}",
                (a.tp, a.fp, a.fn_),
                (b.tp, b.fp, b.fn_)
            )));
        }
        if (a.iou_sum - b.iou_sum).abs() > 1e-12 {
            return Ok(Some(format!("class {c}: iou sum {} vs {}", a.iou_sum, b.iou_sum)));
        }
        if let (Some(pq), Some(sq), Some(rq)) = (a.pq(), a.sq(), a.rq()) {
            if (pq - sq * rq).abs() > 1e-12 {
                return Ok(Some(format!("class {c}: pq {pq} != sq {sq} * rq {rq}")));
            }
        }
    }
    Ok(None)
}

/// Compares the production matcher or PQ accumulator against exhaustive
/// search on `trials` random instances.
pub fn run_oracle(kind: OracleKind, trials: usize, seed: u64) -> Result<OracleReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let mut failures = Vec::new();
    for trial in 0..trials {
        let s = mix_seed(seed.wrapping_add(trial as u64));
        let outcome = match kind {
            OracleKind::Match => match_trial(s)?,
            OracleKind::Pq => pq_trial(s)?,
        };
        if let Some(detail) = outcome {
            failures.push(OracleFailure { trial, seed: s, detail });
        }
    }
    Ok(OracleReport { kind, trials, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn brute_force_small_instance() {
        let cost = array![[-0.9, -0.1], [-0.8, -0.2]];
        let (best, a) = brute_force_assignment(&cost);
        assert_eq!(a, vec![0, 1]);
        assert!((best + 1.1).abs() < 1e-12);
    }

    #[test]
    fn brute_force_pq_hand_case() {
        let a = BinaryMask::from_rows(&[[1u8, 1, 0, 0]]);
        let b = BinaryMask::from_rows(&[[1u8, 1, 1, 0]]);
        let gt = vec![GtSegment { class_id: 1, mask: b }];
        let pred = vec![GtSegment { class_id: 1, mask: a }];
        let s = brute_force_pq(&pred, &gt).unwrap();
        assert_eq!(s.get(1).tp, 1);
        assert!((s.get(1).iou_sum - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn oracles_pass() {
        assert!(run_oracle(OracleKind::Match, 100, 3).unwrap().passed());
        assert!(run_oracle(OracleKind::Pq, 100, 3).unwrap().passed());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_oracle(OracleKind::Match, 0, 1).is_err());
    }
}
