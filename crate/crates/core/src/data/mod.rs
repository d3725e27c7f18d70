//! Synthetic scenes, their sensor captures, and the on-disk formats.
//!
//! A scene is a set of axis-aligned semantic boxes over a ground plane.
//! From it we derive three kinds of training artifacts: flat-shaded camera
//! images, labeled surface points from ray casting, and a dense voxel label
//! grid. Everything is seeded and bitwise deterministic.

mod lidar;
mod render;
mod scene;

pub use lidar::sample_lidar;
pub use render::{class_color, render_cameras, BACKGROUND_COLOR};
pub use scene::{
    default_rig, generate_scene, Box3, Difficulty, SyntheticScene, DEFAULT_CLASSES,
    SENSOR_HEIGHT_CELLS,
};

use std::io::{Read as _, Write as _};
use std::path::Path;

use thiserror::Error;

use crate::geometry::GridSpec;

/// Magic prefix of the voxel label grid format.
pub const VOXEL_GRID_MAGIC: &[u8; 7] = b"TPVOCC1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("point set: {0}")]
    PointFormat(String),
    #[error("voxel grid: {0}")]
    GridFormat(String),
    #[error("scene: {0}")]
    SceneFormat(String),
    #[error("label {label} out of range for {classes} classes (entry {position})")]
    LabelOutOfRange { position: usize, label: usize, classes: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One labeled 3D point (meters, world frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub pos: [f64; 3],
    pub class: u8,
}

/// A sparse set of labeled points, e.g. LiDAR returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointSet {
    pub points: Vec<LabeledPoint>,
}

impl LabeledPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.pos).collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.class as usize).collect()
    }

    /// Text format: a `count N` line, a fixed `fields x y z class` line, then
    /// one point per line. `#` starts a comment; floats use the shortest
    /// round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("count {}\n", self.points.len()));
        out.push_str("fields x y z class\n");
        for p in &self.points {
            out.push_str(&format!("{} {} {} {}\n", p.pos[0], p.pos[1], p.pos[2], p.class));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let count: usize = match lines.next().and_then(|l| l.strip_prefix("count ")) {
            Some(n) => n
                .trim()
                .parse()
                .map_err(|_| DataError::PointFormat(format!("bad count {n:?}")))?,
            None => return Err(DataError::PointFormat("missing count header".to_string())),
        };
        match lines.next() {
            Some("fields x y z class") => {}
            other => return Err(DataError::PointFormat(format!("bad fields header {other:?}"))),
        }
        let mut points = Vec::with_capacity(count);
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 4 {
                return Err(DataError::PointFormat(format!("expected 4 values, got {line:?}")));
            }
            let parse = |s: &str| -> Result<f64, DataError> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| DataError::PointFormat(format!("bad number {s:?}")))?;
                if !v.is_finite() {
                    return Err(DataError::PointFormat(format!("non-finite value {s:?}")));
                }
                Ok(v)
            };
            let class: u8 = tok[3]
                .parse()
                .map_err(|_| DataError::PointFormat(format!("bad class {:?}", tok[3])))?;
            points.push(LabeledPoint {
                pos: [parse(tok[0])?, parse(tok[1])?, parse(tok[2])?],
                class,
            });
        }
        if points.len() != count {
            return Err(DataError::PointFormat(format!(
                "count header says {count}, found {} points",
                points.len()
            )));
        }
        Ok(LabeledPointSet { points })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Dense per-voxel class ids over an `[H, W, D]` grid, h-major, w-mid,
/// d-minor; includes the dedicated "empty" class.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelLabelGrid {
    h: usize,
    w: usize,
    d: usize,
    labels: Vec<u8>,
}

impl VoxelLabelGrid {
    pub fn filled(h: usize, w: usize, d: usize, class: u8) -> Self {
        VoxelLabelGrid { h, w, d, labels: vec![class; h * w * d] }
    }

    pub fn from_labels(h: usize, w: usize, d: usize, labels: Vec<u8>) -> Result<Self, DataError> {
        if labels.len() != h * w * d {
            return Err(DataError::GridFormat(format!(
                "{}x{}x{} grid needs {} labels, got {}",
                h,
                w,
                d,
                h * w * d,
                labels.len()
            )));
        }
        Ok(VoxelLabelGrid { h, w, d, labels })
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn matches(&self, spec: &GridSpec) -> bool {
        self.extents() == [spec.h, spec.w, spec.d]
    }

    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.w + w) * self.d + d
    }

    pub fn get(&self, h: usize, w: usize, d: usize) -> u8 {
        self.labels[self.index(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, class: u8) {
        let i = self.index(h, w, d);
        self.labels[i] = class;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&c| c as usize).collect()
    }

    /// Binary format: `TPVOCC1`, three little-endian u32 extents, then
    /// `H*W*D` class bytes in storage order.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(VOXEL_GRID_MAGIC)?;
        for e in self.extents() {
            let e = u32::try_from(e)
                .map_err(|_| DataError::GridFormat(format!("extent {e} exceeds u32")))?;
            out.write_all(&e.to_le_bytes())?;
        }
        out.write_all(&self.labels)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic)?;
        if &magic != VOXEL_GRID_MAGIC {
            return Err(DataError::GridFormat(format!("bad magic {magic:?}")));
        }
        let mut ext = [0usize; 3];
        for e in &mut ext {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *e = u32::from_le_bytes(b) as usize;
        }
        let n = ext[0]
            .checked_mul(ext[1])
            .and_then(|v| v.checked_mul(ext[2]))
            .ok_or_else(|| DataError::GridFormat("extent overflow".to_string()))?;
        let mut labels = vec![0u8; n];
        input.read_exact(&mut labels)?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(DataError::GridFormat("trailing bytes".to_string()));
        }
        Self::from_labels(ext[0], ext[1], ext[2], labels)
    }

    /// Per-class voxel counts, sized to hold the largest id present.
    pub fn class_counts(&self) -> Vec<usize> {
        let top = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0usize; top + 1];
        for &c in &self.labels {
            counts[c as usize] += 1;
        }
        counts
    }
}
