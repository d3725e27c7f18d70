//! Segmentation and occupancy metrics, plus the ablation harness.
//!
//! Three views of quality: point-level mean IoU over semantic classes,
//! occupancy IoU that ignores semantics ("is this voxel filled"), and dense
//! semantic mean IoU over voxel grids where the reserved empty id stays out
//! of the mean but still produces false positives for semantic classes.

pub mod ablation;

use thiserror::Error;

use crate::data::VoxelLabelGrid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions against {truths} ground-truth entries")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("label {label} out of range for {classes} classes (entry {position})")]
    LabelOutOfRange { position: usize, label: usize, classes: usize },
    #[error("grid extents differ: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
}

/// Prediction-by-truth count matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>, // [pred * classes + truth]
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    /// Counts every (pred, truth) pair except those whose true label is in
    /// `drop_true`.
    pub fn tally(
        predictions: &[usize],
        truths: &[usize],
        classes: usize,
        drop_true: &[usize],
    ) -> Result<Self, EvalError> {
        if predictions.len() != truths.len() {
            return Err(EvalError::LengthMismatch {
                predictions: predictions.len(),
                truths: truths.len(),
            });
        }
        let mut m = ConfusionMatrix::new(classes);
        for (i, (&p, &t)) in predictions.iter().zip(truths).enumerate() {
            if drop_true.contains(&t) {
                continue;
            }
            if p >= classes {
                return Err(EvalError::LabelOutOfRange { position: i, label: p, classes });
            }
            if t >= classes {
                return Err(EvalError::LabelOutOfRange { position: i, label: t, classes });
            }
            m.counts[p * classes + t] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, pred: usize, truth: usize) -> usize {
        self.counts[pred * self.classes + truth]
    }

    pub fn record(&mut self, pred: usize, truth: usize) {
        self.counts[pred * self.classes + truth] += 1;
    }

    /// Entries tallied in total.
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Intersection-over-union of one class, `None` when the class appears
    /// in neither predictions nor truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fp: usize = (0..self.classes)
            .filter(|&t| t != class)
            .map(|t| self.count(class, t))
            .sum();
        let fn_: usize = (0..self.classes)
            .filter(|&p| p != class)
            .map(|p| self.count(p, class))
            .sum();
        let union = tp + fp + fn_;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }
}

/// Per-class IoUs (`None` for classes absent on both sides) and their mean
/// over the evaluated classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

impl MiouReport {
    fn from_confusion(m: &ConfusionMatrix, exclude_from_mean: &[usize]) -> Self {
        let per_class: Vec<Option<f64>> = (0..m.classes()).map(|c| m.iou(c)).collect();
        let included: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| !exclude_from_mean.contains(c))
            .filter_map(|(_, iou)| *iou)
            .collect();
        let mean = if included.is_empty() {
            None
        } else {
            Some(included.iter().sum::<f64>() / included.len() as f64)
        };
        MiouReport { per_class, mean }
    }

    /// The mean, defaulting to zero when no class was evaluable.
    pub fn mean_or_zero(&self) -> f64 {
        self.mean.unwrap_or(0.0)
    }
}

/// Mean IoU over `classes` ids. Entries whose true label is in `ignore` are
/// dropped, and ignored classes stay out of the mean; so do classes absent
/// from both labelings.
pub fn miou(
    predictions: &[usize],
    truths: &[usize],
    classes: usize,
    ignore: &[usize],
) -> Result<MiouReport, EvalError> {
    let m = ConfusionMatrix::tally(predictions, truths, classes, ignore)?;
    Ok(MiouReport::from_confusion(&m, ignore))
}

/// Occupancy IoU: both grids binarized to "not the empty id", then plain
/// set IoU. Two all-empty grids count as a perfect match.
pub fn sc_iou(pred: &VoxelLabelGrid, truth: &VoxelLabelGrid, empty: u8) -> Result<f64, EvalError> {
    if pred.extents() != truth.extents() {
        return Err(EvalError::ExtentMismatch(pred.extents(), truth.extents()));
    }
    let mut intersection = 0usize;
    let mut union = 0usize;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let po = p != empty;
        let to = t != empty;
        if po && to {
            intersection += 1;
        }
        if po || to {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

/// Dense semantic mean IoU: every voxel is tallied (so predicting a class on
/// an empty voxel costs that class a false positive), but the empty id is
/// excluded from the mean.
pub fn ssc_miou(
    pred: &VoxelLabelGrid,
    truth: &VoxelLabelGrid,
    empty: u8,
) -> Result<MiouReport, EvalError> {
    if pred.extents() != truth.extents() {
        return Err(EvalError::ExtentMismatch(pred.extents(), truth.extents()));
    }
    let classes = usize::from(empty) + 1;
    let m = ConfusionMatrix::tally(
        &pred.labels_usize(),
        &truth.labels_usize(),
        classes,
        &[],
    )?;
    Ok(MiouReport::from_confusion(&m, &[usize::from(empty)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_labelings_score_one() {
        let labels = [0usize, 1, 2, 1, 0, 2];
        let report = miou(&labels, &labels, 3, &[]).unwrap();
        assert_eq!(report.mean, Some(1.0));
        assert!(report.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn disjoint_two_class_labelings_score_zero() {
        let pred = [0usize, 0, 0];
        let truth = [1usize, 1, 1];
        let report = miou(&pred, &truth, 2, &[]).unwrap();
        assert_eq!(report.mean, Some(0.0));
    }

    #[test]
    fn hand_counted_case_matches() {
        let pred = [0usize, 0, 1, 1];
        let truth = [0usize, 1, 1, 1];
        let report = miou(&pred, &truth, 2, &[]).unwrap();
        assert_eq!(report.per_class[0], Some(0.5));
        assert!((report.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.mean.unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_stay_out_of_the_mean() {
        let pred = [0usize, 0];
        let truth = [0usize, 0];
        let report = miou(&pred, &truth, 5, &[]).unwrap();
        assert_eq!(report.mean, Some(1.0));
        assert_eq!(report.per_class[3], None);
    }

    #[test]
    fn ignored_true_labels_are_dropped_entirely() {
        // Entry 2 has ignored truth 9 and would otherwise charge class 0
        // with a false positive.
        let pred = [0usize, 1, 0];
        let truth = [0usize, 1, 9];
        let report = miou(&pred, &truth, 10, &[9]).unwrap();
        assert_eq!(report.mean, Some(1.0));
        // Predicting the ignored class still hurts: the truth class gains a
        // false negative.
        let pred2 = [9usize, 1];
        let truth2 = [0usize, 1];
        let report2 = miou(&pred2, &truth2, 10, &[9]).unwrap();
        assert_eq!(report2.per_class[0], Some(0.0));
    }

    #[test]
    fn mismatched_lengths_and_labels_are_rejected() {
        assert!(matches!(
            miou(&[0], &[0, 1], 2, &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            miou(&[5], &[0], 2, &[]),
            Err(EvalError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn miou_matches_a_brute_force_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let n = rng.gen_range(1..200);
            let classes = rng.gen_range(2..6);
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let report = miou(&pred, &truth, classes, &[]).unwrap();
            let mut sum = 0.0;
            let mut counted = 0;
            for c in 0..classes {
                let pset: Vec<usize> = (0..n).filter(|&i| pred[i] == c).collect();
                let tset: Vec<usize> = (0..n).filter(|&i| truth[i] == c).collect();
                let inter = pset.iter().filter(|i| tset.contains(i)).count();
                let union = pset.len() + tset.len() - inter;
                if union == 0 {
                    assert_eq!(report.per_class[c], None);
                } else {
                    let iou = inter as f64 / union as f64;
                    assert_eq!(report.per_class[c], Some(iou));
                    sum += iou;
                    counted += 1;
                }
            }
            assert_eq!(report.mean, Some(sum / counted as f64));
        }
    }

    #[test]
    fn confusion_totals_count_evaluated_entries() {
        let pred = [0usize, 1, 2, 0];
        let truth = [0usize, 1, 9, 1];
        let m = ConfusionMatrix::tally(&pred, &truth, 10, &[9]).unwrap();
        assert_eq!(m.total(), 3);
        assert_eq!(m.count(0, 1), 1);
    }

    fn grid_from(labels: &[u8], h: usize, w: usize, d: usize) -> VoxelLabelGrid {
        VoxelLabelGrid::from_labels(h, w, d, labels.to_vec()).unwrap()
    }

    #[test]
    fn occupancy_iou_on_identical_grids_is_one() {
        let g = grid_from(&[0, 6, 2, 6], 2, 2, 1);
        assert_eq!(sc_iou(&g, &g, 6).unwrap(), 1.0);
    }

    #[test]
    fn predicting_nothing_when_occupied_scores_zero() {
        let pred = grid_from(&[6, 6, 6, 6], 2, 2, 1);
        let truth = grid_from(&[0, 6, 2, 6], 2, 2, 1);
        assert_eq!(sc_iou(&pred, &truth, 6).unwrap(), 0.0);
        // Two all-empty grids agree perfectly.
        assert_eq!(sc_iou(&pred, &pred, 6).unwrap(), 1.0);
    }

    #[test]
    fn occupancy_iou_matches_a_set_oracle_and_ignores_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let labels = |rng: &mut ChaCha8Rng| -> Vec<u8> {
                (0..24).map(|_| rng.gen_range(0..7) as u8).collect()
            };
            let pv = labels(&mut rng);
            let tv = labels(&mut rng);
            let pred = grid_from(&pv, 2, 3, 4);
            let truth = grid_from(&tv, 2, 3, 4);
            let got = sc_iou(&pred, &truth, 6).unwrap();
            let pocc: Vec<usize> = (0..24).filter(|&i| pv[i] != 6).collect();
            let tocc: Vec<usize> = (0..24).filter(|&i| tv[i] != 6).collect();
            let inter = pocc.iter().filter(|i| tocc.contains(i)).count();
            let union = pocc.len() + tocc.len() - inter;
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert_eq!(got, want);

            // Shuffle semantic ids (keeping emptiness): score unchanged.
            let relabel = |v: &[u8]| -> Vec<u8> {
                v.iter().map(|&c| if c == 6 { 6 } else { (c + 3) % 6 }).collect()
            };
            let shuffled = grid_from(&relabel(&pv), 2, 3, 4);
            assert_eq!(sc_iou(&shuffled, &truth, 6).unwrap(), got);
        }
    }

    #[test]
    fn dense_semantic_miou_counts_empty_confusions_but_not_its_iou() {
        // Truth: one voxel of class 1, three empty. Prediction claims class 1
        // on two voxels: one true positive, one false positive on empty.
        let pred = grid_from(&[1, 1, 6, 6], 2, 2, 1);
        let truth = grid_from(&[1, 6, 6, 6], 2, 2, 1);
        let report = ssc_miou(&pred, &truth, 6).unwrap();
        assert_eq!(report.per_class[1], Some(0.5));
        assert_eq!(report.mean, Some(0.5));
        // The empty class has its own (unused) slot.
        assert!((report.per_class[6].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dense_semantic_miou_mirrors_the_flat_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pv: Vec<u8> = (0..60).map(|_| rng.gen_range(0..7) as u8).collect();
        let tv: Vec<u8> = (0..60).map(|_| rng.gen_range(0..7) as u8).collect();
        let pred = grid_from(&pv, 3, 4, 5);
        let truth = grid_from(&tv, 3, 4, 5);
        let dense = ssc_miou(&pred, &truth, 6).unwrap();
        // Same confusion by hand: tally everything, average classes 0..6.
        let m = ConfusionMatrix::tally(
            &pv.iter().map(|&c| c as usize).collect::<Vec<_>>(),
            &tv.iter().map(|&c| c as usize).collect::<Vec<_>>(),
            7,
            &[],
        )
        .unwrap();
        let ious: Vec<f64> = (0..6).filter_map(|c| m.iou(c)).collect();
        let want = ious.iter().sum::<f64>() / ious.len() as f64;
        assert_eq!(dense.mean, Some(want));
        assert!(matches!(
            ssc_miou(&pred, &grid_from(&tv[..24], 2, 3, 4), 6),
            Err(EvalError::ExtentMismatch(..))
        ));
    }
}
