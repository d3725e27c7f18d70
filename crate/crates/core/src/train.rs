//! Full-batch gradient training of the encoder on one synthetic scene, and
//! the evaluation summary shared by tests, sweeps, and the command-line
//! tools.
//!
//! Training is deliberately small-scale: one scene, every lidar point and
//! every voxel in each step, plain SGD with momentum. The encoder state owns
//! all parameters (including the prediction head), so the optimizer walks
//! `state.params` directly and a checkpoint written afterwards captures the
//! fitted model in full.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::{render_cameras, sample_lidar, DataError, SyntheticScene, VoxelLabelGrid};
use crate::encoder::{EncoderError, EncoderState};
use crate::eval::{miou, sc_iou, ssc_miou, EvalError};
use crate::geometry::CameraRig;
use crate::head::{
    composite_loss, mlp_head, pseudo_voxel_labels, HeadError, LossBundle, LossRouting,
};
use crate::numeric::{backward, grads_by_name, NumericError, Tensor};
use crate::scalar::Real;
use crate::tpv::TpvError;

/// Failures of the training or evaluation pipeline.
#[derive(Debug, Error)]
pub enum TrainError {
    /// The loss left the reals; the caller should abort the run.
    #[error("loss became non-finite ({value}) at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Tpv(#[from] TpvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which planes contribute to predictions.
///
/// `TopOnly` keeps the encoder unchanged but reads features from the top
/// plane alone, making every prediction independent of height; it is the
/// flattened baseline the full tri-plane model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Full,
    TopOnly,
}

impl Representation {
    pub fn name(self) -> &'static str {
        match self {
            Representation::Full => "full",
            Representation::TopOnly => "top-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Representation::Full),
            "top-only" | "top_only" => Some(Representation::TopOnly),
            _ => None,
        }
    }
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Steps whose rate ramps linearly from `base / warmup_steps` to `base`.
    pub warmup_steps: usize,
    /// Cosine-anneal the rate towards zero after warmup.
    pub cosine_decay: bool,
    pub routing: LossRouting,
    pub representation: Representation,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 300,
            // Stable in f32 with momentum 0.9 on the default scene sizes;
            // 0.1 can overflow activations once the loss surface sharpens.
            learning_rate: 0.03,
            momentum: 0.9,
            warmup_steps: 20,
            cosine_decay: true,
            routing: LossRouting::default(),
            representation: Representation::Full,
        }
    }
}

/// The learning rate used at `step` (counted from zero).
pub fn learning_rate(options: &TrainOptions, step: usize) -> f64 {
    let base = options.learning_rate;
    if step < options.warmup_steps {
        return base * (step + 1) as f64 / options.warmup_steps as f64;
    }
    if !options.cosine_decay {
        return base;
    }
    let span = options.steps.saturating_sub(options.warmup_steps).max(1);
    let progress = (step - options.warmup_steps) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One scene prepared for training: rendered views, labeled surface samples,
/// and the sparse voxel labeling derived from those samples.
#[derive(Debug, Clone)]
pub struct TrainData<S: Real> {
    pub rig: CameraRig,
    pub images: Vec<Tensor<S>>,
    pub points: Vec<[f64; 3]>,
    pub point_labels: Vec<usize>,
    pub voxel_labels: VoxelLabelGrid,
}

/// Renders `scene` through `rig`, casts `ray_count` labeled surface rays, and
/// votes those hits into a voxel labeling. The voxel labels are deliberately
/// derived from the surface samples rather than the exact scene volume, so
/// training only ever sees measurements a real sensor could have produced.
pub fn scene_training_data<S: Real>(
    scene: &SyntheticScene,
    rig: &CameraRig,
    ray_count: usize,
    seed: u64,
) -> TrainData<S> {
    let images = render_cameras(scene, rig);
    let lidar = sample_lidar(scene, ray_count, seed);
    let voxel_labels = pseudo_voxel_labels(&lidar, &scene.spec, scene.classes);
    TrainData {
        rig: rig.clone(),
        images,
        points: lidar.positions(),
        point_labels: lidar.labels_usize(),
        voxel_labels,
    }
}

/// Logits for every lidar point (`[N, K]`) and every voxel (`[H, W, D, K]`).
pub struct Prediction<S: Real> {
    pub point_logits: Tensor<S>,
    pub voxel_logits: Tensor<S>,
}

/// Runs the encoder and both heads on `data`, keeping the graph alive so the
/// result is differentiable with respect to `state.params`.
pub fn predict<S: Real>(
    state: &EncoderState<S>,
    data: &TrainData<S>,
    representation: Representation,
) -> Result<Prediction<S>, TrainError> {
    let planes = state.encode(&data.rig, &data.images)?;
    let planes = match representation {
        Representation::Full => planes,
        Representation::TopOnly => planes.bev_mode(),
    };
    let point_features = planes.query_points(&data.points)?;
    let voxel_features = planes.voxel_features()?;
    let p = &state.params;
    let (w1, b1) = (p.get("head.w1")?, p.get("head.b1")?);
    let (w2, b2) = (p.get("head.w2")?, p.get("head.b2")?);
    Ok(Prediction {
        point_logits: mlp_head(&point_features, w1, b1, w2, b2)?,
        voxel_logits: mlp_head(&voxel_features, w1, b1, w2, b2)?,
    })
}

/// Per-step losses of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// [`train_with`] without step observation.
pub fn train<S: Real>(
    state: &mut EncoderState<S>,
    data: &TrainData<S>,
    options: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    train_with(state, data, options, |_, _| {})
}

/// Fits `state` to `data` by full-batch SGD with momentum, calling
/// `on_step(step, loss)` after each update. Velocity accumulates in `f64`
/// regardless of the working precision. A non-finite loss aborts the run.
pub fn train_with<S: Real, F: FnMut(usize, f64)>(
    state: &mut EncoderState<S>,
    data: &TrainData<S>,
    options: &TrainOptions,
    mut on_step: F,
) -> Result<TrainReport, TrainError> {
    let voxel_label_ids = data.voxel_labels.labels_usize();
    let mut velocity: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut losses = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let prediction = predict(state, data, options.representation)?;
        let bundle = LossBundle {
            point_logits: Some(&prediction.point_logits),
            voxel_logits: Some(&prediction.voxel_logits),
            point_labels: Some(&data.point_labels),
            voxel_labels: Some(&voxel_label_ids),
        };
        let loss = composite_loss(&bundle, options.routing)?;
        let value = loss.item()?.to_f64_lossy();
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, value });
        }
        losses.push(value);

        let grads = backward(&loss)?;
        let named = grads_by_name(&grads, &state.params);
        let rate = learning_rate(options, step);
        for (name, grad) in &named {
            let current = state.params.get(name)?;
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; current.numel()]);
            let updated: Vec<S> = current
                .data()
                .iter()
                .zip(grad.data())
                .zip(v.iter_mut())
                .map(|((&p, &g), v)| {
                    *v = options.momentum * *v + g.to_f64_lossy();
                    S::from_f64_lossy(p.to_f64_lossy() - rate * *v)
                })
                .collect();
            let shape = current.shape().to_vec();
            state.params.set(name, Tensor::from_vec(shape, updated)?)?;
        }
        on_step(step, value);
    }
    Ok(TrainReport { losses })
}

/// Index of the largest entry in each length-`k` row of `logits`, ties going
/// to the earlier class.
pub fn argmax_rows<S: Real>(logits: &Tensor<S>) -> Result<Vec<usize>, NumericError> {
    let k = *logits.shape().last().ok_or(NumericError::BadAxis {
        op: "argmax_rows",
        axis: 0,
        rank: 0,
    })?;
    if k == 0 {
        return Err(NumericError::BadShape {
            op: "argmax_rows",
            expected: "a non-empty class axis",
            got: logits.shape().to_vec(),
        });
    }
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Voxel class grid decoded from `[H, W, D, K]` logits.
pub fn predicted_voxels<S: Real>(
    voxel_logits: &Tensor<S>,
) -> Result<VoxelLabelGrid, TrainError> {
    let shape = voxel_logits.shape();
    if shape.len() != 4 {
        return Err(NumericError::BadShape {
            op: "predicted_voxels",
            expected: "rank-4 [h, w, d, classes] logits",
            got: shape.to_vec(),
        }
        .into());
    }
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let ids = argmax_rows(voxel_logits)?;
    let labels = ids.iter().map(|&c| c as u8).collect();
    Ok(VoxelLabelGrid::from_labels(h, w, d, labels)?)
}

/// Quality of one state on one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    /// Mean IoU over semantic classes at the lidar points; the empty id is
    /// never a true point label and stays out of the mean.
    pub point_miou: f64,
    /// Binary occupied-versus-empty IoU of the predicted voxel grid.
    pub sc_iou: f64,
    /// Mean semantic IoU of the voxel grid, empty id excluded from the mean.
    pub ssc_miou: f64,
}

/// Scores `state` against `truth`, the exact dense labeling of the scene
/// (normally [`SyntheticScene::voxelize`], not the sparse training labels).
pub fn evaluate<S: Real>(
    state: &EncoderState<S>,
    data: &TrainData<S>,
    truth: &VoxelLabelGrid,
    representation: Representation,
) -> Result<EvalSummary, TrainError> {
    let prediction = predict(state, data, representation)?;
    let classes = state.config().classes;
    let empty = classes as u8;

    let point_pred = argmax_rows(&prediction.point_logits)?;
    let point_report = miou(&point_pred, &data.point_labels, classes + 1, &[classes])?;
    let voxel_pred = predicted_voxels(&prediction.voxel_logits)?;
    Ok(EvalSummary {
        point_miou: point_report.mean_or_zero(),
        sc_iou: sc_iou(&voxel_pred, truth, empty)?,
        ssc_miou: ssc_miou(&voxel_pred, truth, empty)?.mean_or_zero(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_rig, generate_scene, Difficulty};
    use crate::encoder::EncoderConfig;
    use crate::geometry::GridSpec;
    use crate::head::LossInput;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            grid: GridSpec::new(8, 8, 2, 0.5).unwrap(),
            channels: 8,
            classes: 3,
            image_blocks: 1,
            plane_blocks: 0,
            heads: 2,
            points: 2,
            neighbor_same: 2,
            neighbor_cross: 2,
            stem_channels: 4,
            head_hidden: 16,
            ..EncoderConfig::default()
        }
    }

    fn tiny_data(config: &EncoderConfig, seed: u64) -> (SyntheticScene, TrainData<f64>) {
        let scene = generate_scene(&config.grid, config.classes, seed, Difficulty::Scatter);
        let rig = default_rig(&config.grid, 24, 18);
        let data = scene_training_data(&scene, &rig, 300, seed ^ 1);
        (scene, data)
    }

    #[test]
    fn warmup_ramps_linearly_to_the_base_rate() {
        let options = TrainOptions {
            steps: 10,
            learning_rate: 0.4,
            warmup_steps: 4,
            cosine_decay: false,
            ..TrainOptions::default()
        };
        assert!((learning_rate(&options, 0) - 0.1).abs() < 1e-12);
        assert!((learning_rate(&options, 1) - 0.2).abs() < 1e-12);
        assert!((learning_rate(&options, 3) - 0.4).abs() < 1e-12);
        assert!((learning_rate(&options, 9) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn cosine_decay_starts_at_base_and_shrinks_monotonically() {
        let options = TrainOptions {
            steps: 12,
            learning_rate: 0.4,
            warmup_steps: 4,
            cosine_decay: true,
            ..TrainOptions::default()
        };
        assert!((learning_rate(&options, 4) - 0.4).abs() < 1e-12);
        let rates: Vec<f64> = (4..12).map(|s| learning_rate(&options, s)).collect();
        for pair in rates.windows(2) {
            assert!(pair[1] < pair[0], "rates not decreasing: {rates:?}");
        }
        let expected = 0.4 * 0.5 * (1.0 + (std::f64::consts::PI * 7.0 / 8.0).cos());
        assert!((learning_rate(&options, 11) - expected).abs() < 1e-12);
    }

    #[test]
    fn representation_names_round_trip() {
        for repr in [Representation::Full, Representation::TopOnly] {
            assert_eq!(Representation::parse(repr.name()), Some(repr));
        }
        assert_eq!(Representation::parse("top_only"), Some(Representation::TopOnly));
        assert_eq!(Representation::parse("sideways"), None);
    }

    #[test]
    fn scene_training_data_is_shaped_by_scene_and_rig() {
        let config = tiny_config();
        let (_, data) = tiny_data(&config, 5);
        assert_eq!(data.images.len(), data.rig.cameras.len());
        assert_eq!(data.images[0].shape(), &[18, 24, 3]);
        assert_eq!(data.points.len(), data.point_labels.len());
        assert!(!data.points.is_empty());
        assert!(data.voxel_labels.matches(&config.grid));
        assert!(data.point_labels.iter().all(|&c| c < config.classes));
    }

    #[test]
    fn argmax_prefers_the_earlier_class_on_ties() {
        let logits =
            Tensor::<f64>::from_vec(vec![2, 3], vec![0.0, 1.0, 1.0, 5.0, -1.0, 5.0]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![1, 0]);
    }

    #[test]
    fn a_few_steps_of_training_reduce_the_loss() {
        let config = tiny_config();
        let (_, data) = tiny_data(&config, 11);
        let mut state = config.init_state::<f64>(11).unwrap();
        let options = TrainOptions {
            steps: 8,
            learning_rate: 0.05,
            warmup_steps: 2,
            ..TrainOptions::default()
        };
        let mut seen = Vec::new();
        let report = train_with(&mut state, &data, &options, |step, loss| {
            seen.push((step, loss));
        })
        .unwrap();
        assert_eq!(report.losses.len(), 8);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        assert!(
            report.final_loss() < report.losses[0],
            "loss did not decrease: {:?}",
            report.losses
        );
        let collected: Vec<f64> = seen.iter().map(|(_, l)| *l).collect();
        assert_eq!(collected, report.losses);
        assert_eq!(seen.last().unwrap().0, 7);
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let config = tiny_config();
        let (_, data) = tiny_data(&config, 3);
        let options = TrainOptions { steps: 3, learning_rate: 0.05, ..TrainOptions::default() };
        let run = |seed| {
            let mut state = config.init_state::<f64>(seed).unwrap();
            train(&mut state, &data, &options).unwrap().losses
        };
        assert_eq!(run(21), run(21));
        assert_ne!(run(21), run(22));
    }

    #[test]
    fn a_diverging_run_aborts_with_the_offending_step() {
        let config = tiny_config();
        let (_, data) = tiny_data(&config, 9);
        let mut state = config.init_state::<f32>(9).unwrap();
        let data32 = TrainData {
            rig: data.rig.clone(),
            images: data
                .images
                .iter()
                .map(|t| {
                    let vals: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
                    Tensor::from_vec(t.shape().to_vec(), vals).unwrap()
                })
                .collect(),
            points: data.points.clone(),
            point_labels: data.point_labels.clone(),
            voxel_labels: data.voxel_labels.clone(),
        };
        let options = TrainOptions {
            steps: 40,
            learning_rate: 1e30,
            warmup_steps: 0,
            cosine_decay: false,
            ..TrainOptions::default()
        };
        match train(&mut state, &data32, &options) {
            Err(TrainError::NonFiniteLoss { step, value }) => {
                assert!(step > 0, "initial loss should still be finite");
                assert!(!value.is_finite());
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn top_only_predictions_ignore_height() {
        let config = tiny_config();
        let (scene, mut data) = tiny_data(&config, 13);
        let state = config.init_state::<f64>(13).unwrap();
        data.points = vec![[0.7, -0.4, -0.45], [0.7, -0.4, -0.05]];
        data.point_labels = vec![0, 0];
        data.voxel_labels = scene.voxelize();

        let flat = predict(&state, &data, Representation::TopOnly).unwrap();
        let rows = flat.point_logits.data();
        let k = flat.point_logits.shape()[1];
        assert_eq!(rows[..k], rows[k..], "top-only logits vary with height");

        let full = predict(&state, &data, Representation::Full).unwrap();
        let rows = full.point_logits.data();
        assert_ne!(rows[..k], rows[k..], "full logits collapse height");
    }

    #[test]
    fn evaluate_reports_metrics_in_range() {
        let config = tiny_config();
        let (scene, data) = tiny_data(&config, 17);
        let state = config.init_state::<f64>(17).unwrap();
        let truth = scene.voxelize();
        let summary = evaluate(&state, &data, &truth, Representation::Full).unwrap();
        for value in [summary.point_miou, summary.sc_iou, summary.ssc_miou] {
            assert!((0.0..=1.0).contains(&value), "metric out of range: {summary:?}");
        }
    }

    #[test]
    fn routing_variants_all_train() {
        let config = tiny_config();
        let (_, data) = tiny_data(&config, 19);
        for routing in [
            LossRouting { ce_input: LossInput::Voxel, lovasz_input: LossInput::Voxel },
            LossRouting { ce_input: LossInput::Point, lovasz_input: LossInput::Point },
        ] {
            let mut state = config.init_state::<f64>(19).unwrap();
            let options = TrainOptions {
                steps: 2,
                learning_rate: 0.02,
                routing,
                ..TrainOptions::default()
            };
            let report = train(&mut state, &data, &options).unwrap();
            assert!(report.losses.iter().all(|l| l.is_finite()));
        }
    }
}
