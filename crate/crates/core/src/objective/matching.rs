//! Optimal one-to-one assignment of annotations to predictions.

use ndarray::Array2;

use super::loss::dice;
use super::LabelSet;
use crate::error::{Error, Result};
use crate::model::PredictionSet;
use crate::synthdata::ClassId;

/// `sigma[j]` is the prediction matched to annotation `j`; every other
/// prediction targets "no object".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub sigma: Vec<usize>,
}

impl Matching {
    /// Annotation matched to each prediction, if any.
    pub fn inverse(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; predictions];
        for (j, &i) in self.sigma.iter().enumerate() {
            inv[i] = Some(j);
        }
        inv
    }
}

/// Total cost of `assignment` (row -> column), summed in row order.
pub fn assignment_cost(cost: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
}

/// Kuhn-Munkres with potentials on a rows x cols matrix, rows <= cols.
/// Columns left over act as zero-cost padding.
fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost[[r0 - 1, col - 1]] - u[r0] - v[col];
                if reduced < min_v[col] {
                    min_v[col] = reduced;
                    way[col] = col0;
                }
                if min_v[col] < delta {
                    delta = min_v[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_v[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=m {
        if owner[col] != 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

/// Minimum-cost assignment of every row to a distinct column.
///
/// Among assignments with equal total cost the lexicographically smallest
/// (row 0's column first) is returned.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (rows, cols) = cost.dim();
    if rows > cols {
        return Err(Error::Capacity {
            annotations: rows,
            predictions: cols,
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            layer: "matching cost".into(),
        });
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    let mut current = hungarian(cost);
    let mut best = assignment_cost(cost, &current);
    for r in 0..rows {
        let fixed = &current[..r];
        let free_cols: Vec<usize> = (0..cols).filter(|c| !fixed.contains(c)).collect();
        for &c in free_cols.iter().take_while(|&&c| c < current[r]) {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let rest = Array2::from_shape_fn((rows - r - 1, rest_cols.len()), |(i, k)| cost[[r + 1 + i, rest_cols[k]]]);
            let tail: Vec<usize> = hungarian(&rest).into_iter().map(|k| rest_cols[k]).collect();
            let mut candidate = current[..r].to_vec();
            candidate.push(c);
            candidate.extend(tail);
            let total = assignment_cost(cost, &candidate);
            if total <= best {
                best = total;
                current = candidate;
                break;
            }
        }
    }
    Ok(current)
}

/// Matching cost `-p_i(c_j) * dice(m_i, m_j)`, predictions x annotations.
pub fn cost_matrix(preds: &PredictionSet, labels: &LabelSet, classes: &[ClassId]) -> Result<Array2<f64>> {
    let n = preds.num_queries();
    let mut cost = Array2::zeros((n, labels.len()));
    for (j, entry) in labels.entries.iter().enumerate() {
        let k = class_column(classes, entry.class_id)?;
        let target = entry.mask.as_f64();
        for i in 0..n {
            let soft = preds.masks.row(i);
            cost[[i, j]] = -preds.class_probs[[i, k]] * dice(soft.as_slice().expect("contiguous"), &target)?;
        }
    }
    Ok(cost)
}

pub(crate) fn class_column(classes: &[ClassId], class_id: ClassId) -> Result<usize> {
    classes
        .iter()
        .position(|&c| c == class_id)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Integrity(format!("class {class_id} not known to the classifier")))
}

/// Hungarian matching between predictions and the annotation set.
pub fn match_predictions(preds: &PredictionSet, labels: &LabelSet, classes: &[ClassId]) -> Result<Matching> {
    if labels.len() > preds.num_queries() {
        return Err(Error::Capacity {
            annotations: labels.len(),
            predictions: preds.num_queries(),
        });
    }
    let cost = cost_matrix(preds, labels, classes)?;
    let sigma = solve_assignment(&cost.t().to_owned())?;
    Ok(Matching { sigma })
}
