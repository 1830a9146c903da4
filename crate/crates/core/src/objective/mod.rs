//! Bipartite matching and the supervised segmentation loss.

mod loss;
mod matching;

use serde::{Deserialize, Serialize};

pub use loss::{
    dice, focal_term, mask_term, seg_loss, seg_loss_weighted, LossBreakdown, SegHyper, SegLoss, TermWeights, DICE_EPS, LOG_CLAMP,
};
pub use matching::{assignment_cost, cost_matrix, match_predictions, solve_assignment, Matching};

use crate::error::{Error, Result};
use crate::mask::{check_disjoint, BinaryMask};
use crate::synthdata::{ClassId, GtSegment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub class_id: ClassId,
    pub mask: BinaryMask,
    pub origin: LabelOrigin,
}

/// Matching target: ground-truth segments plus pseudo-labels, pairwise disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub entries: Vec<LabelEntry>,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, origin: LabelOrigin) -> usize {
        self.entries.iter().filter(|e| e.origin == origin).count()
    }

    pub fn from_ground_truth(segments: &[GtSegment]) -> Result<Self> {
        let set = Self {
            entries: segments
                .iter()
                .map(|s| LabelEntry {
                    class_id: s.class_id,
                    mask: s.mask.clone(),
                    origin: LabelOrigin::GroundTruth,
                })
                .collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.class_id == 0) {
            return Err(Error::Integrity(format!("label of class {} uses the reserved id", e.class_id)));
        }
        check_disjoint(self.entries.iter().map(|e| &e.mask), "label set")
    }
}
