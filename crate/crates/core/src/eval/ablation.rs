//! Sequential configuration sweeps and their report tables.
//!
//! A sweep holds everything fixed — scene, sensor data, parameter
//! initialization, schedule — and varies only the prediction representation
//! and the loss routing, so metric differences between rows are attributable
//! to those two choices alone.

use crate::data::{default_rig, generate_scene, Difficulty};
use crate::encoder::EncoderConfig;
use crate::head::LossRouting;
use crate::scalar::Real;
use crate::train::{
    evaluate, scene_training_data, train, Representation, TrainError, TrainOptions,
};

/// Metrics of one trained configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub point_miou: f64,
    pub sc_iou: f64,
    pub ssc_miou: f64,
    pub final_loss: f64,
}

/// Rows in sweep order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

const HEADERS: [&str; 5] = ["config", "point_miou", "sc_iou", "ssc_miou", "final_loss"];

impl AblationReport {
    fn cells(row: &AblationRow) -> [String; 5] {
        [
            row.name.clone(),
            format!("{:.4}", row.point_miou),
            format!("{:.4}", row.sc_iou),
            format!("{:.4}", row.ssc_miou),
            format!("{:.4}", row.final_loss),
        ]
    }

    /// Human-readable table with space-aligned columns.
    pub fn aligned_text(&self) -> String {
        let rows: Vec<[String; 5]> = self.rows.iter().map(Self::cells).collect();
        let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let emit = |out: &mut String, cells: &[String]| {
            let line: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        };
        emit(&mut out, &HEADERS.map(str::to_string));
        for row in &rows {
            emit(&mut out, row);
        }
        out
    }

    /// Machine-readable comma-separated form with a header line.
    pub fn delimited(&self) -> String {
        let mut out = HEADERS.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&Self::cells(row).join(","));
            out.push('\n');
        }
        out
    }
}

/// One row's worth of choices: a label plus the two knobs under study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub representation: Representation,
    pub routing: LossRouting,
}

impl AblationVariant {
    pub fn new(name: &str, representation: Representation, routing: LossRouting) -> Self {
        AblationVariant { name: name.to_string(), representation, routing }
    }
}

/// The shared context every variant trains under.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub config: EncoderConfig,
    pub options: TrainOptions,
    /// Seeds the scene, the sensor sweep, and the parameter init alike.
    pub seed: u64,
    pub difficulty: Difficulty,
    pub ray_count: usize,
    pub image_width: usize,
    pub image_height: usize,
}

/// Trains every variant from the same scene, data, and initial parameters,
/// scoring each against the exact dense labeling. Variants run one after
/// another; the report keeps their order.
pub fn run_ablation<S: Real>(
    run: &AblationRun,
    variants: &[AblationVariant],
) -> Result<AblationReport, TrainError> {
    let scene = generate_scene(&run.config.grid, run.config.classes, run.seed, run.difficulty);
    let rig = default_rig(&run.config.grid, run.image_width, run.image_height);
    let data = scene_training_data::<S>(&scene, &rig, run.ray_count, run.seed ^ 0x5eed);
    let truth = scene.voxelize();

    let mut report = AblationReport::default();
    for variant in variants {
        let mut state = run.config.init_state::<S>(run.seed)?;
        let options = TrainOptions {
            representation: variant.representation,
            routing: variant.routing,
            ..run.options.clone()
        };
        let trained = train(&mut state, &data, &options)?;
        let summary = evaluate(&state, &data, &truth, variant.representation)?;
        report.rows.push(AblationRow {
            name: variant.name.clone(),
            point_miou: summary.point_miou,
            sc_iou: summary.sc_iou,
            ssc_miou: summary.ssc_miou,
            final_loss: trained.final_loss(),
        });
    }
    Ok(report)
}
