//! The four commands: scene generation, training, evaluation, and export.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};

use tpv_core::data::{
    class_color, default_rig, generate_scene, render_cameras, sample_lidar, LabeledPointSet,
    SyntheticScene, VoxelLabelGrid,
};
use tpv_core::encoder::EncoderState;
use tpv_core::eval::{miou, sc_iou, ssc_miou, MiouReport};
use tpv_core::geometry::CameraRig;
use tpv_core::head::{mlp_head, pseudo_voxel_labels};
use tpv_core::numeric::Tensor;
use tpv_core::train::{
    argmax_rows, predict, predicted_voxels, train_with, Representation, TrainData, TrainError,
};

use crate::config::RunConfig;
use crate::CliError;

/// Derives the ray-casting stream from the run seed so scene layout and
/// sensor noise stay decoupled.
const LIDAR_SEED_TWEAK: u64 = 0x6c1d;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(e.to_string())
}

/// Training failures keep their exit-code class: a loss leaving the reals is
/// a numeric error, everything else stems from the artifacts fed in.
fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::numeric(e.to_string()),
        other => CliError::data(other.to_string()),
    }
}

/// Creates `dir` if needed and insists it is empty, so a run can never mix
/// its artifacts with an earlier one's.
fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(data_err)?;
        if entries.next().is_some() {
            return Err(CliError::data(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(data_err)?;
    }
    Ok(())
}

fn save_png(image: &Tensor<f32>, path: &Path) -> Result<(), CliError> {
    let shape = image.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut png = RgbImage::new(cols as u32, rows as u32);
    let data = image.data();
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * 3;
            let channel = |k: usize| (data[base + k].clamp(0.0, 1.0) * 255.0).round() as u8;
            png.put_pixel(c as u32, r as u32, Rgb([channel(0), channel(1), channel(2)]));
        }
    }
    png.save(path).map_err(data_err)
}

/// Writes scene description, camera rig, rendered views, labeled surface
/// points, the exact dense labeling, and the run configuration into `out`.
pub fn cmd_gen(run: &RunConfig, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    prepare_dir(out)?;
    let spec = run.encoder.grid;
    let scene = generate_scene(&spec, run.encoder.classes, run.seed, run.difficulty);
    let rig = default_rig(&spec, run.image_width, run.image_height);
    let points = sample_lidar(&scene, run.rays, run.seed ^ LIDAR_SEED_TWEAK);
    let truth = scene.voxelize();
    let images: Vec<Tensor<f32>> = render_cameras(&scene, &rig);

    fs::write(out.join("config.txt"), run.to_text()).map_err(data_err)?;
    scene.save(&out.join("scene.txt")).map_err(data_err)?;
    rig.save(&out.join("rig.txt")).map_err(data_err)?;
    points.save(&out.join("points.txt")).map_err(data_err)?;
    truth.save(&out.join("truth.occ")).map_err(data_err)?;
    for (index, image) in images.iter().enumerate() {
        save_png(image, &out.join(format!("cam{index}.png")))?;
    }
    println!(
        "wrote scene with {} boxes, {} cameras, {} labeled points to {} in {:.2?}",
        scene.boxes.len(),
        rig.cameras.len(),
        points.len(),
        out.display(),
        started.elapsed()
    );
    Ok(())
}

/// Everything a directory written by `gen` holds, reassembled for training
/// or scoring. Camera views are re-rendered from the scene description, so
/// the model consumes full-precision pixels rather than the 8-bit previews.
pub struct DataDir {
    pub scene: SyntheticScene,
    pub data: TrainData<f32>,
    pub truth: VoxelLabelGrid,
}

pub fn load_data_dir(dir: &Path) -> Result<DataDir, CliError> {
    let scene = SyntheticScene::load(&dir.join("scene.txt")).map_err(data_err)?;
    let rig = CameraRig::load(&dir.join("rig.txt")).map_err(data_err)?;
    let points = LabeledPointSet::load(&dir.join("points.txt")).map_err(data_err)?;
    let truth = VoxelLabelGrid::load(&dir.join("truth.occ")).map_err(data_err)?;
    if !truth.matches(&scene.spec) {
        return Err(CliError::data(format!(
            "dense grid extents {:?} do not match the scene grid",
            truth.extents()
        )));
    }
    let images = render_cameras(&scene, &rig);
    let voxel_labels = pseudo_voxel_labels(&points, &scene.spec, scene.classes);
    let data = TrainData {
        rig,
        images,
        points: points.positions(),
        point_labels: points.labels_usize(),
        voxel_labels,
    };
    Ok(DataDir { scene, data, truth })
}

fn check_scene_matches(
    scene: &SyntheticScene,
    grid: tpv_core::geometry::GridSpec,
    classes: usize,
) -> Result<(), CliError> {
    if scene.spec != grid {
        return Err(CliError::data(format!(
            "scene grid {}x{}x{} (cell {}) does not match the configured grid {}x{}x{} (cell {})",
            scene.spec.h, scene.spec.w, scene.spec.d, scene.spec.cell,
            grid.h, grid.w, grid.d, grid.cell,
        )));
    }
    if scene.classes != classes {
        return Err(CliError::data(format!(
            "scene has {} classes, configuration expects {}",
            scene.classes, classes
        )));
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = OsString::from(out.as_os_str());
    name.push(".run.txt");
    PathBuf::from(name)
}

/// Fits a fresh model to the directory's scene and writes the checkpoint,
/// plus a `<checkpoint>.run.txt` sidecar recording the exact configuration.
pub fn cmd_train(run: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    if out.exists() {
        return Err(CliError::data(format!(
            "checkpoint {} already exists",
            out.display()
        )));
    }
    let bundle = load_data_dir(data_dir)?;
    check_scene_matches(&bundle.scene, run.encoder.grid, run.encoder.classes)?;
    let mut state = run
        .encoder
        .init_state::<f32>(run.seed)
        .map_err(|e| CliError::config(e.to_string()))?;
    let started = Instant::now();
    let report = train_with(&mut state, &bundle.data, &run.train, |step, loss| {
        println!("step {step} loss {loss:.6}");
    })
    .map_err(train_err)?;
    state.save(out).map_err(data_err)?;
    fs::write(sidecar_path(out), run.to_text()).map_err(data_err)?;
    println!(
        "trained {} steps in {:.2?}; loss {:.6} -> {:.6}; checkpoint {}",
        report.losses.len(),
        started.elapsed(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.final_loss(),
        out.display()
    );
    Ok(())
}

/// Which metric family `eval` reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    Points,
    Occupancy,
}

fn print_per_class(report: &MiouReport, empty: usize) {
    for (class, iou) in report.per_class.iter().enumerate() {
        let label = if class == empty { "empty".to_string() } else { format!("class {class}") };
        match iou {
            Some(iou) => println!("{label} iou {iou:.4}"),
            None => println!("{label} iou n/a"),
        }
    }
}

/// Scores a checkpoint on a generated directory and prints `name value`
/// metric lines.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    task: EvalTask,
    representation: Representation,
) -> Result<(), CliError> {
    let state = EncoderState::<f32>::load(checkpoint).map_err(data_err)?;
    let bundle = load_data_dir(data_dir)?;
    let config = state.config().clone();
    check_scene_matches(&bundle.scene, config.grid, config.classes)?;
    let prediction = predict(&state, &bundle.data, representation).map_err(train_err)?;
    match task {
        EvalTask::Points => {
            let predicted = argmax_rows(&prediction.point_logits).map_err(data_err)?;
            let report = miou(
                &predicted,
                &bundle.data.point_labels,
                config.classes + 1,
                &[config.classes],
            )
            .map_err(data_err)?;
            print_per_class(&report, config.classes);
            println!("point_miou {:.4}", report.mean_or_zero());
        }
        EvalTask::Occupancy => {
            let grid = predicted_voxels(&prediction.voxel_logits).map_err(train_err)?;
            let empty = config.classes as u8;
            let sc = sc_iou(&grid, &bundle.truth, empty).map_err(data_err)?;
            let report = ssc_miou(&grid, &bundle.truth, empty).map_err(data_err)?;
            print_per_class(&report, config.classes);
            println!("sc_iou {sc:.4}");
            println!("ssc_miou {:.4}", report.mean_or_zero());
        }
    }
    Ok(())
}

fn class_pixel(class: u8, empty: u8) -> Rgb<u8> {
    if class == empty {
        return Rgb([10, 10, 10]);
    }
    let [r, g, b] = class_color(class);
    Rgb([
        (r.clamp(0.0, 1.0) * 255.0).round() as u8,
        (g.clamp(0.0, 1.0) * 255.0).round() as u8,
        (b.clamp(0.0, 1.0) * 255.0).round() as u8,
    ])
}

/// One overhead image per depth layer plus a mid-grid slice along each
/// horizontal axis, colored by class.
fn write_slices(grid: &VoxelLabelGrid, empty: u8, out: &Path) -> Result<usize, CliError> {
    let [h, w, d] = grid.extents();
    let mut written = 0;
    for z in 0..d {
        let mut png = RgbImage::new(w as u32, h as u32);
        for r in 0..h {
            for c in 0..w {
                png.put_pixel(c as u32, r as u32, class_pixel(grid.get(r, c, z), empty));
            }
        }
        png.save(out.join(format!("top_z{z:02}.png"))).map_err(data_err)?;
        written += 1;
    }
    // Vertical slices are drawn with height increasing upwards.
    let mut side = RgbImage::new(h as u32, d as u32);
    for z in 0..d {
        for r in 0..h {
            side.put_pixel(r as u32, (d - 1 - z) as u32, class_pixel(grid.get(r, w / 2, z), empty));
        }
    }
    side.save(out.join("side_mid.png")).map_err(data_err)?;
    let mut front = RgbImage::new(w as u32, d as u32);
    for z in 0..d {
        for c in 0..w {
            front.put_pixel(c as u32, (d - 1 - z) as u32, class_pixel(grid.get(h / 2, c, z), empty));
        }
    }
    front.save(out.join("front_mid.png")).map_err(data_err)?;
    Ok(written + 2)
}

/// Encodes the directory's scene, optionally rescales the planes, and writes
/// the decoded occupancy grid with inspection slices.
pub fn cmd_export(
    checkpoint: &Path,
    data_dir: &Path,
    factor: f64,
    out: &Path,
) -> Result<(), CliError> {
    prepare_dir(out)?;
    let state = EncoderState::<f32>::load(checkpoint).map_err(data_err)?;
    let bundle = load_data_dir(data_dir)?;
    let config = state.config().clone();
    check_scene_matches(&bundle.scene, config.grid, config.classes)?;

    let planes = state
        .encode(&bundle.data.rig, &bundle.data.images)
        .map_err(data_err)?;
    let planes = if factor == 1.0 {
        planes
    } else {
        planes
            .resize_by(factor)
            .map_err(|e| CliError::config(format!("factor {factor}: {e}")))?
    };
    let features = planes.voxel_features().map_err(data_err)?;
    let p = &state.params;
    let logits = mlp_head(
        &features,
        p.get("head.w1").map_err(data_err)?,
        p.get("head.b1").map_err(data_err)?,
        p.get("head.w2").map_err(data_err)?,
        p.get("head.b2").map_err(data_err)?,
    )
    .map_err(data_err)?;
    let grid = predicted_voxels(&logits).map_err(train_err)?;
    grid.save(&out.join("grid.occ")).map_err(data_err)?;
    let slices = write_slices(&grid, config.classes as u8, out)?;

    let [h, w, d] = grid.extents();
    let mut manifest = state.config().to_text();
    manifest.push_str(&format!(
        "factor {factor}\nexport_grid {h} {w} {d}\ncheckpoint {}\ndata {}\n",
        checkpoint.display(),
        data_dir.display()
    ));
    fs::write(out.join("config.txt"), manifest).map_err(data_err)?;
    println!(
        "exported {h}x{w}x{d} occupancy grid and {slices} slice images to {}",
        out.display()
    );
    Ok(())
}
