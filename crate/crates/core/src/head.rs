//! Semantic decoding: the shared MLP head, the two losses, loss routing over
//! point/voxel predictions, and sparse-to-dense label transfer.
//!
//! Class layout: ids `0..classes` are semantic (ground is 0); id `classes`
//! is the reserved "not occupied" label used by dense grids. The head emits
//! one logit column per id including the reserved one, so a single set of
//! parameters serves both point and voxel predictions.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::{LabeledPointSet, VoxelLabelGrid};
use crate::geometry::GridSpec;
use crate::numeric::{NumericError, Tensor};
use crate::scalar::{real, Real};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("loss is undefined: {0}")]
    Undefined(&'static str),
    #[error("label {label} at entry {position} out of range for {classes} classes")]
    LabelOutOfRange { position: usize, label: usize, classes: usize },
    #[error("{labels} labels for {rows} prediction rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("loss routing needs {0}, which was not provided")]
    MissingInput(&'static str),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Two affine maps around one smooth activation, applied along the last
/// axis: `[*, C] -> [*, K]` with `w1: [C, hidden]`, `w2: [hidden, K]`.
pub fn mlp_head<S: Real>(
    features: &Tensor<S>,
    w1: &Tensor<S>,
    b1: &Tensor<S>,
    w2: &Tensor<S>,
    b2: &Tensor<S>,
) -> Result<Tensor<S>, HeadError> {
    let c = *features
        .shape()
        .last()
        .ok_or(NumericError::BadAxis { op: "mlp_head", axis: 0, rank: 0 })?;
    let rows = features.numel() / c.max(1);
    let flat = features.reshape(&[rows, c])?;
    let hidden = flat.matmul(w1)?.add_row(b1)?.gelu();
    let logits = hidden.matmul(w2)?.add_row(b2)?;
    let k = logits.shape()[1];
    let mut out_shape = features.shape().to_vec();
    *out_shape.last_mut().expect("non-empty shape") = k;
    Ok(logits.reshape(&out_shape)?)
}

fn check_labels<S: Real>(
    logits: &Tensor<S>,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<(usize, usize), HeadError> {
    if logits.rank() != 2 {
        return Err(NumericError::BadShape {
            op: "per-entry loss",
            expected: "a rank-2 [rows, classes] matrix",
            got: logits.shape().to_vec(),
        }
        .into());
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(HeadError::LabelCount { labels: labels.len(), rows: n });
    }
    for (i, &y) in labels.iter().enumerate() {
        if Some(y) != ignore && y >= k {
            return Err(HeadError::LabelOutOfRange { position: i, label: y, classes: k });
        }
    }
    Ok((n, k))
}

/// Mean negative log-softmax of the true class over non-ignored entries.
pub fn cross_entropy<S: Real>(
    logits: &Tensor<S>,
    labels: &[usize],
    ignore: Option<usize>,
) -> Result<Tensor<S>, HeadError> {
    let (n, k) = check_labels(logits, labels, ignore)?;
    let kept: Vec<usize> = (0..n).filter(|&i| Some(labels[i]) != ignore).collect();
    if kept.is_empty() {
        return Err(HeadError::Undefined("every entry is ignored"));
    }
    let x = logits.data();
    // Per-kept-row softmax probabilities, cached for the backward pass.
    let mut probs = vec![S::zero(); kept.len() * k];
    let mut total = S::zero();
    for (ki, &i) in kept.iter().enumerate() {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
        let mut z = S::zero();
        for &v in row {
            z += (v - m).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            probs[ki * k + j] = (v - m).exp() / z;
        }
        total += m + z.ln() - row[labels[i]];
    }
    let count: S = real(kept.len() as f64);
    let loss = total / count;
    let labels_kept: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
    Ok(Tensor::from_node(
        Vec::new(),
        vec![loss],
        vec![logits.clone()],
        Box::new(move |g: &[S]| {
            let scale = g[0] / count;
            let mut dx = vec![S::zero(); n * k];
            for (ki, &i) in kept.iter().enumerate() {
                for j in 0..k {
                    let indicator = if j == labels_kept[ki] { S::one() } else { S::zero() };
                    dx[i * k + j] = scale * (probs[ki * k + j] - indicator);
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Decreasing-error weights of the piecewise-linear IoU surrogate for one
/// class: differences of the Jaccard loss along the sorted prefix chain.
fn iou_surrogate_weights(gt_sorted: &[bool]) -> Vec<f64> {
    let total: usize = gt_sorted.iter().filter(|&&b| b).count();
    let mut weights = Vec::with_capacity(gt_sorted.len());
    let mut hits = 0usize;
    let mut misses = 0usize;
    let mut prev = 0.0;
    for &is_gt in gt_sorted {
        if is_gt {
            hits += 1;
        } else {
            misses += 1;
        }
        let jaccard = 1.0 - (total - hits) as f64 / (total + misses) as f64;
        weights.push(jaccard - prev);
        prev = jaccard;
    }
    weights
}

fn present_classes(labels: &[usize], k: usize, subset: Option<&[usize]>) -> Vec<usize> {
    let mut present: BTreeSet<usize> = labels.iter().copied().collect();
    if let Some(keep) = subset {
        let keep: BTreeSet<usize> = keep.iter().copied().collect();
        present.retain(|c| keep.contains(c));
    }
    present.into_iter().filter(|&c| c < k).collect()
}

/// Sorts errors descending with index order breaking ties, so the weight
/// assignment is deterministic. The IEEE total order keeps the sort defined
/// even for non-finite errors; a diverged model then yields a non-finite
/// loss for the caller to detect instead of a panic here.
fn sorted_error_order<S: Real>(errors: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| {
        errors[b].to_f64_lossy().total_cmp(&errors[a].to_f64_lossy()).then(a.cmp(&b))
    });
    order
}

/// Direct IoU surrogate over class probabilities: for every class present in
/// the labels (optionally filtered by `subset`), the class's prediction
/// errors are sorted and weighted by the surrogate's discrete derivative;
/// the result is averaged over those classes. Rows of `probabilities` are
/// expected to sum to 1 (softmax output); gradients flow into them.
pub fn lovasz_softmax<S: Real>(
    probabilities: &Tensor<S>,
    labels: &[usize],
    subset: Option<&[usize]>,
) -> Result<Tensor<S>, HeadError> {
    let (n, k) = check_labels(probabilities, labels, None)?;
    if n == 0 {
        return Err(HeadError::Undefined("no labeled entries"));
    }
    let present = present_classes(labels, k, subset);
    if present.is_empty() {
        return Err(HeadError::Undefined("no present class to score"));
    }
    let p = probabilities.data();
    let mut total = 0.0f64;
    // (class, weight-per-row aligned with the original row order, sign).
    let mut grads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(present.len());
    for &c in &present {
        let errors: Vec<S> = (0..n)
            .map(|i| {
                let pc = p[i * k + c];
                if labels[i] == c {
                    S::one() - pc
                } else {
                    pc
                }
            })
            .collect();
        let order = sorted_error_order(&errors);
        let gt_sorted: Vec<bool> = order.iter().map(|&i| labels[i] == c).collect();
        let weights = iou_surrogate_weights(&gt_sorted);
        let mut class_loss = 0.0;
        let mut per_row = vec![0.0f64; n];
        for (rank, &i) in order.iter().enumerate() {
            class_loss += errors[i].to_f64_lossy() * weights[rank];
            per_row[i] = weights[rank];
        }
        total += class_loss;
        grads.push((c, per_row));
    }
    let count = present.len() as f64;
    let loss: S = real(total / count);
    let labels_owned = labels.to_vec();
    Ok(Tensor::from_node(
        Vec::new(),
        vec![loss],
        vec![probabilities.clone()],
        Box::new(move |g: &[S]| {
            let mut dp = vec![S::zero(); n * k];
            for (c, per_row) in &grads {
                for (i, &w) in per_row.iter().enumerate() {
                    // d error / d p = -1 for the class's own rows, +1 else.
                    let signed = if labels_owned[i] == *c { -w } else { w };
                    dp[i * k + c] += g[0] * real::<S>(signed / count);
                }
            }
            vec![Some(dp)]
        }),
    ))
}

/// Slow reference for the IoU surrogate: recomputes the Jaccard loss of every
/// sorted prefix from set membership alone, instead of the incremental
/// weights. Returns `None` when the loss is undefined (no scorable class).
pub fn lovasz_reference(
    probabilities: &[f64],
    classes: usize,
    labels: &[usize],
    subset: Option<&[usize]>,
) -> Option<f64> {
    let n = labels.len();
    assert_eq!(probabilities.len(), n * classes, "probability matrix shape");
    let present = present_classes(labels, classes, subset);
    if present.is_empty() {
        return None;
    }
    let jaccard_loss = |members: &BTreeSet<usize>, errors: &BTreeSet<usize>| -> f64 {
        let intersection = members.difference(errors).count();
        let union = members.union(errors).count();
        1.0 - intersection as f64 / union as f64
    };
    let mut total = 0.0;
    for &c in &present {
        let members: BTreeSet<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let pc = probabilities[i * classes + c];
                if labels[i] == c {
                    1.0 - pc
                } else {
                    pc
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
        let mut prefix = BTreeSet::new();
        let mut prev = 0.0;
        for &i in &order {
            prefix.insert(i);
            let delta = jaccard_loss(&members, &prefix);
            total += errors[i] * (delta - prev);
            prev = delta;
        }
    }
    Some(total / present.len() as f64)
}

/// Majority-vote transfer of sparse labeled points onto the voxel grid.
/// Voxels without any point get the reserved id `classes`; vote ties go to
/// the lowest class id; points outside the volume or with out-of-range
/// labels are dropped.
pub fn pseudo_voxel_labels(
    points: &LabeledPointSet,
    spec: &GridSpec,
    classes: usize,
) -> VoxelLabelGrid {
    let grid = VoxelLabelGrid::filled(spec.h, spec.w, spec.d, classes as u8);
    let mut votes: std::collections::HashMap<usize, Vec<u32>> = std::collections::HashMap::new();
    for p in &points.points {
        if usize::from(p.class) >= classes {
            continue;
        }
        let Some([h, w, d]) = spec.voxel_of(p.pos) else {
            continue;
        };
        let counts = votes.entry(grid.index(h, w, d)).or_insert_with(|| vec![0; classes]);
        counts[p.class as usize] += 1;
    }
    let mut flat: Vec<(usize, u8)> = votes
        .into_iter()
        .map(|(idx, counts)| {
            let mut best = 0usize;
            for c in 1..classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            (idx, best as u8)
        })
        .collect();
    flat.sort_unstable_by_key(|&(idx, _)| idx);
    let (h, w, d) = (spec.h, spec.w, spec.d);
    let mut labels = grid.labels().to_vec();
    for (idx, class) in flat {
        labels[idx] = class;
    }
    VoxelLabelGrid::from_labels(h, w, d, labels).expect("extents unchanged")
}

/// Which prediction feeds a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossInput {
    Point,
    Voxel,
}

impl LossInput {
    pub fn name(self) -> &'static str {
        match self {
            LossInput::Point => "point",
            LossInput::Voxel => "voxel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "point" => Some(LossInput::Point),
            "voxel" => Some(LossInput::Voxel),
            _ => None,
        }
    }
}

/// Assignment of predictions to loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossRouting {
    pub ce_input: LossInput,
    pub lovasz_input: LossInput,
}

impl Default for LossRouting {
    /// Dense cross-entropy plus sparse IoU surrogate.
    fn default() -> Self {
        LossRouting { ce_input: LossInput::Voxel, lovasz_input: LossInput::Point }
    }
}

/// The available predictions and labels for one training step. Voxel logits
/// may be `[H, W, D, K]` or already flattened; labels are flat in the same
/// storage order.
pub struct LossBundle<'a, S: Real> {
    pub point_logits: Option<&'a Tensor<S>>,
    pub voxel_logits: Option<&'a Tensor<S>>,
    pub point_labels: Option<&'a [usize]>,
    pub voxel_labels: Option<&'a [usize]>,
}

impl<'a, S: Real> LossBundle<'a, S> {
    fn pick(&self, input: LossInput) -> Result<(Tensor<S>, &'a [usize]), HeadError> {
        let (logits, labels, what) = match input {
            LossInput::Point => (self.point_logits, self.point_labels, "point logits and labels"),
            LossInput::Voxel => (self.voxel_logits, self.voxel_labels, "voxel logits and labels"),
        };
        let (logits, labels) = match (logits, labels) {
            (Some(lg), Some(lb)) => (lg, lb),
            _ => return Err(HeadError::MissingInput(what)),
        };
        let k = *logits
            .shape()
            .last()
            .ok_or(NumericError::BadAxis { op: "composite_loss", axis: 0, rank: 0 })?;
        let rows = logits.numel() / k.max(1);
        Ok((logits.reshape(&[rows, k])?, labels))
    }
}

/// Unit-weight sum of cross-entropy and the IoU surrogate, each reading the
/// prediction selected by `routing`.
pub fn composite_loss<S: Real>(
    bundle: &LossBundle<'_, S>,
    routing: LossRouting,
) -> Result<Tensor<S>, HeadError> {
    let (ce_logits, ce_labels) = bundle.pick(routing.ce_input)?;
    let (lv_logits, lv_labels) = bundle.pick(routing.lovasz_input)?;
    let ce = cross_entropy(&ce_logits, ce_labels, None)?;
    let probs = lv_logits.softmax(1)?;
    let lv = lovasz_softmax(&probs, lv_labels, None)?;
    Ok(ce.add(&lv)?)
}
