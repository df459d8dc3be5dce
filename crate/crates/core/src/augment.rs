//! Training-set augmentation: nine enriched apex positions around the
//! annotated apex, each paired with the onset frame under seven rotations.

use alloc::vec::Vec;

use crate::dataset::AnnotationRecord;
use crate::image::Plane;

/// Fractions (in tenths) of the onset-to-apex span.
const RISING_TENTHS: [usize; 4] = [6, 7, 8, 9];
/// Fractions (in tenths) of the apex-to-offset span.
const FALLING_TENTHS: [usize; 5] = [1, 2, 3, 4, 5];

pub const ROTATION_ANGLES_DEG: [f64; 7] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AugmentError {
    #[error("frame indices out of order: onset {onset} apex {apex} offset {offset}")]
    InvalidOrdering { onset: usize, apex: usize, offset: usize },
    #[error("frame index {index} outside a sequence of {len} frames")]
    FrameIndexOutOfRange { index: usize, len: usize },
}

/// Frame positions and rotation angles for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPlan {
    pub apex_positions: Vec<usize>,
    pub rotation_angles_deg: Vec<f64>,
}

impl AugmentationPlan {
    pub fn for_record(record: &AnnotationRecord) -> Result<Self, AugmentError> {
        Ok(Self {
            apex_positions: enrich_apex_positions(record.onset_idx, record.apex_idx, record.offset_idx)?,
            rotation_angles_deg: rotation_angles(),
        })
    }

    pub fn len(&self) -> usize {
        self.apex_positions.len() * self.rotation_angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `start + span * tenths / 10`, rounded half up, in exact integer arithmetic.
fn position(start: usize, span: usize, tenths: usize) -> usize {
    (10 * start + span * tenths + 5) / 10
}

/// The annotated apex plus the enriched apex positions, sorted and deduplicated.
pub fn enrich_apex_positions(onset: usize, apex: usize, offset: usize) -> Result<Vec<usize>, AugmentError> {
    if !(onset <= apex && apex <= offset) {
        return Err(AugmentError::InvalidOrdering { onset, apex, offset });
    }
    let mut positions: Vec<usize> = RISING_TENTHS
        .iter()
        .map(|&t| position(onset, apex - onset, t))
        .chain(core::iter::once(apex))
        .chain(FALLING_TENTHS.iter().map(|&t| position(apex, offset - apex, t)))
        .collect();
    positions.sort_unstable();
    positions.dedup();
    Ok(positions)
}

/// -15 to 15 degrees in steps of 5.
pub fn rotation_angles() -> Vec<f64> {
    ROTATION_ANGLES_DEG.to_vec()
}

/// One onset/apex pair ready for flow estimation. Both frames carry the same
/// rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub apex_idx: usize,
    pub angle_deg: f64,
    pub onset: Plane,
    pub apex: Plane,
}

/// Expands a clip into `|apex positions| x 7` rotated onset/apex pairs.
/// `frames[i]` is frame `i` of the clip.
pub fn augment_sample(record: &AnnotationRecord, frames: &[Plane]) -> Result<Vec<AugmentedPair>, AugmentError> {
    let plan = AugmentationPlan::for_record(record)?;
    let len = frames.len();
    if record.offset_idx >= len {
        return Err(AugmentError::FrameIndexOutOfRange {
            index: record.offset_idx,
            len,
        });
    }
    let onset = &frames[record.onset_idx];
    let mut pairs = Vec::with_capacity(plan.len());
    for &apex_idx in &plan.apex_positions {
        let apex = &frames[apex_idx];
        for &angle_deg in &plan.rotation_angles_deg {
            pairs.push(AugmentedPair {
                apex_idx,
                angle_deg,
                onset: onset.rotate(angle_deg),
                apex: apex.rotate(angle_deg),
            });
        }
    }
    Ok(pairs)
}
