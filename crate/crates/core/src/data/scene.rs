//! Seeded synthetic scenes: axis-aligned semantic boxes over a ground plane.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataError, VoxelLabelGrid};
use crate::geometry::{Camera, CameraRig, GridSpec};

/// Scene layout family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    /// Ground plane only.
    Empty,
    /// Boxes scattered at varying positions and heights.
    Scatter,
    /// Vertical two-box stacks sharing a footprint but not a class, so that
    /// flattening away height merges distinct labels.
    Stacked,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Empty => "empty",
            Difficulty::Scatter => "scatter",
            Difficulty::Stacked => "stacked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "empty" => Some(Difficulty::Empty),
            "scatter" => Some(Difficulty::Scatter),
            "stacked" => Some(Difficulty::Stacked),
            _ => None,
        }
    }
}

/// A solid axis-aligned box, stored both as an inclusive cell range per axis
/// and as the world-space corners they induce (faces on cell boundaries).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub class: u8,
    pub cells: [[usize; 2]; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn from_cells(spec: &GridSpec, cells: [[usize; 2]; 3], class: u8) -> Self {
        let lo = |axis: usize| spec.axis_world(axis, cells[axis][0] as f64 - 0.5);
        let hi = |axis: usize| spec.axis_world(axis, cells[axis][1] as f64 + 0.5);
        Box3 {
            class,
            cells,
            min: [lo(0), lo(1), lo(2)],
            max: [hi(0), hi(1), hi(2)],
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] < self.max[a])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }

    /// Entry distance of the ray `origin + t * dir` (slab test), if it hits
    /// with `t > eps`.
    pub fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3], eps: f64) -> Option<f64> {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] >= self.max[a] {
                    return None;
                }
                continue;
            }
            let t0 = (self.min[a] - origin[a]) / dir[a];
            let t1 = (self.max[a] - origin[a]) / dir[a];
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(lo);
            t_exit = t_exit.min(hi);
        }
        if t_enter <= t_exit && t_exit > eps {
            Some(t_enter.max(eps))
        } else {
            None
        }
    }
}

/// A ground plane plus semantic boxes inside a grid volume. `classes` counts
/// the semantic ids (ground is 0, boxes use 1..classes); id `classes` is the
/// reserved "not occupied" label of dense grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: GridSpec,
    pub classes: usize,
    pub ground_class: u8,
    pub boxes: Vec<Box3>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Ground surface height: the center of the bottom voxel layer.
    pub fn ground_z(&self) -> f64 {
        self.spec.axis_world(2, 0.0)
    }

    pub fn empty_class(&self) -> u8 {
        self.classes as u8
    }

    /// World half-extents of the volume footprint in x and y.
    pub fn half_extent(&self) -> [f64; 2] {
        [
            self.spec.h as f64 * self.spec.cell / 2.0,
            self.spec.w as f64 * self.spec.cell / 2.0,
        ]
    }

    /// Exact dense labeling: box cells get the box class, the bottom layer
    /// gets the ground class, everything else the reserved empty id.
    pub fn voxelize(&self) -> VoxelLabelGrid {
        let mut grid = VoxelLabelGrid::filled(self.spec.h, self.spec.w, self.spec.d, self.empty_class());
        for ww in 0..self.spec.w {
            for hh in 0..self.spec.h {
                grid.set(hh, ww, 0, self.ground_class);
            }
        }
        for b in &self.boxes {
            for hh in b.cells[0][0]..=b.cells[0][1] {
                for ww in b.cells[1][0]..=b.cells[1][1] {
                    for dd in b.cells[2][0]..=b.cells[2][1] {
                        grid.set(hh, ww, dd, b.class);
                    }
                }
            }
        }
        grid
    }

    /// First surface hit by a ray: boxes and the in-volume part of the ground
    /// plane. Returns (distance, class).
    pub fn ray_cast(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, u8)> {
        const EPS: f64 = 1e-9;
        let mut best: Option<(f64, u8)> = None;
        for b in &self.boxes {
            if let Some(t) = b.ray_hit(origin, dir, EPS) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, b.class));
                }
            }
        }
        if dir[2].abs() > 1e-12 {
            let t = (self.ground_z() - origin[2]) / dir[2];
            if t > EPS && best.map_or(true, |(bt, _)| t < bt) {
                let x = origin[0] + t * dir[0];
                let y = origin[1] + t * dir[1];
                let [hx, hy] = self.half_extent();
                if x.abs() <= hx && y.abs() <= hy {
                    best = Some((t, self.ground_class));
                }
            }
        }
        best
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!(
            "grid {} {} {} {}\n",
            self.spec.h, self.spec.w, self.spec.d, self.spec.cell
        ));
        out.push_str(&format!("classes {}\n", self.classes));
        out.push_str(&format!("ground {}\n", self.ground_class));
        out.push_str(&format!("boxes {}\n", self.boxes.len()));
        for b in &self.boxes {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                b.class,
                b.cells[0][0], b.cells[0][1],
                b.cells[1][0], b.cells[1][1],
                b.cells[2][0], b.cells[2][1],
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let bad = |msg: String| DataError::SceneFormat(msg);
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let mut field = |name: &str| -> Result<Vec<String>, DataError> {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing {name} line")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(name) {
                return Err(bad(format!("expected {name} line, got {line:?}")));
            }
            Ok(it.map(str::to_string).collect())
        };
        let parse_one = |vals: &[String], name: &str| -> Result<String, DataError> {
            if vals.len() != 1 {
                return Err(bad(format!("{name} takes one value, got {vals:?}")));
            }
            Ok(vals[0].clone())
        };

        let seed: u64 = parse_one(&field("seed")?, "seed")?
            .parse()
            .map_err(|_| bad("bad seed".into()))?;
        let grid = field("grid")?;
        if grid.len() != 4 {
            return Err(bad(format!("grid takes 4 values, got {grid:?}")));
        }
        let cells: Vec<usize> = grid[..3]
            .iter()
            .map(|s| s.parse().map_err(|_| bad(format!("bad extent {s:?}"))))
            .collect::<Result<_, _>>()?;
        let cell: f64 = grid[3].parse().map_err(|_| bad("bad cell size".into()))?;
        let spec = GridSpec::new(cells[0], cells[1], cells[2], cell)
            .map_err(|e| bad(e.to_string()))?;
        let classes: usize = parse_one(&field("classes")?, "classes")?
            .parse()
            .map_err(|_| bad("bad class count".into()))?;
        let ground_class: u8 = parse_one(&field("ground")?, "ground")?
            .parse()
            .map_err(|_| bad("bad ground class".into()))?;
        let n_boxes: usize = parse_one(&field("boxes")?, "boxes")?
            .parse()
            .map_err(|_| bad("bad box count".into()))?;
        let mut boxes = Vec::with_capacity(n_boxes);
        for line in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 7 {
                return Err(bad(format!("box line needs 7 values, got {line:?}")));
            }
            let class: u8 = tok[0].parse().map_err(|_| bad(format!("bad box class {:?}", tok[0])))?;
            let mut cells = [[0usize; 2]; 3];
            for a in 0..3 {
                for s in 0..2 {
                    cells[a][s] = tok[1 + a * 2 + s]
                        .parse()
                        .map_err(|_| bad(format!("bad cell index {:?}", tok[1 + a * 2 + s])))?;
                }
                if cells[a][0] > cells[a][1] || cells[a][1] >= spec.cells(a) {
                    return Err(bad(format!("box cells out of range: {line:?}")));
                }
            }
            boxes.push(Box3::from_cells(&spec, cells, class));
        }
        if boxes.len() != n_boxes {
            return Err(bad(format!("expected {n_boxes} boxes, found {}", boxes.len())));
        }
        let scene = SyntheticScene { spec, classes, ground_class, boxes, seed };
        for b in &scene.boxes {
            if usize::from(b.class) >= classes {
                return Err(bad(format!("box class {} out of range", b.class)));
            }
        }
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Default number of semantic classes (ground + five box classes).
pub const DEFAULT_CLASSES: usize = 6;

/// Deterministic scene construction. Boxes are snapped to voxel boundaries,
/// sit above the ground layer, keep a clear disc around the ego position, and
/// never share a footprint (except intentional vertical stacks).
pub fn generate_scene(spec: &GridSpec, classes: usize, seed: u64, difficulty: Difficulty) -> SyntheticScene {
    assert!(classes >= 2, "need ground plus at least one box class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9_e5ee);
    let mut scene = SyntheticScene {
        spec: *spec,
        classes,
        ground_class: 0,
        boxes: Vec::new(),
        seed,
    };
    if difficulty == Difficulty::Empty || spec.d < 2 {
        return scene;
    }

    let half_min = scene.half_extent()[0].min(scene.half_extent()[1]);
    let clear_radius = (0.4 * half_min).min(2.5);
    let max_span = 4.min(spec.h.min(spec.w));
    let mut footprints: Vec<[[usize; 2]; 2]> = Vec::new();

    let overlaps = |fp: &[[usize; 2]; 2], existing: &[[[usize; 2]; 2]]| {
        existing.iter().any(|e| {
            // One-cell margin between footprints.
            fp[0][0] <= e[0][1] + 1
                && e[0][0] <= fp[0][1] + 1
                && fp[1][0] <= e[1][1] + 1
                && e[1][0] <= fp[1][1] + 1
        })
    };

    let stacks = match difficulty {
        Difficulty::Empty => 0,
        Difficulty::Scatter => rng.gen_range(4..=6),
        Difficulty::Stacked => rng.gen_range(4..=5),
    };
    for _ in 0..stacks {
        let mut placed = None;
        for _attempt in 0..100 {
            let sh = rng.gen_range(2..=max_span);
            let sw = rng.gen_range(2..=max_span);
            if sh > spec.h || sw > spec.w {
                continue;
            }
            let h0 = rng.gen_range(0..=spec.h - sh);
            let w0 = rng.gen_range(0..=spec.w - sw);
            let fp = [[h0, h0 + sh - 1], [w0, w0 + sw - 1]];
            let cx = spec.axis_world(0, (fp[0][0] + fp[0][1]) as f64 / 2.0);
            let cy = spec.axis_world(1, (fp[1][0] + fp[1][1]) as f64 / 2.0);
            if (cx * cx + cy * cy).sqrt() < clear_radius {
                continue;
            }
            if overlaps(&fp, &footprints) {
                continue;
            }
            placed = Some(fp);
            break;
        }
        let Some(fp) = placed else { continue };
        footprints.push(fp);
        let pick_class = |rng: &mut ChaCha8Rng| rng.gen_range(1..classes) as u8;
        match difficulty {
            Difficulty::Scatter => {
                let max_sz = spec.d - 1;
                let sz = rng.gen_range(1..=max_sz.min(2));
                let d0 = rng.gen_range(1..=spec.d - sz);
                let cells = [fp[0], fp[1], [d0, d0 + sz - 1]];
                scene.boxes.push(Box3::from_cells(spec, cells, pick_class(&mut rng)));
            }
            Difficulty::Stacked => {
                // Split the column above the ground layer into two boxes of
                // different classes; with fewer than three layers available
                // the stack degenerates to a single box.
                let lower = pick_class(&mut rng);
                if spec.d < 3 {
                    scene.boxes.push(Box3::from_cells(spec, [fp[0], fp[1], [1, spec.d - 1]], lower));
                    continue;
                }
                let split = rng.gen_range(1..spec.d - 1); // top cell of the lower box
                let mut upper = pick_class(&mut rng);
                if upper == lower {
                    upper = if usize::from(upper) + 1 < classes { upper + 1 } else { 1 };
                }
                scene.boxes.push(Box3::from_cells(spec, [fp[0], fp[1], [1, split]], lower));
                scene.boxes.push(Box3::from_cells(spec, [fp[0], fp[1], [split + 1, spec.d - 1]], upper));
            }
            Difficulty::Empty => unreachable!(),
        }
    }
    scene
}

/// Height of the ego sensors above the world origin, in cells.
pub const SENSOR_HEIGHT_CELLS: f64 = 0.5;

/// Six cameras at the ego position, yawed 60 degrees apart and pitched
/// slightly down; horizontal coverage overlaps so all azimuths are seen.
pub fn default_rig(spec: &GridSpec, width: usize, height: usize) -> CameraRig {
    let position = [0.0, 0.0, SENSOR_HEIGHT_CELLS * spec.cell];
    let pitch = -15f64.to_radians();
    let focal = width as f64 * 0.65;
    let cameras = (0..6)
        .map(|k| {
            let yaw = (k as f64) * 60f64.to_radians();
            Camera::looking(position, yaw, pitch, focal, width, height)
                .expect("rig construction is valid")
        })
        .collect();
    CameraRig::new(cameras).expect("rig construction is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(50, 50, 4, 0.5).unwrap()
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_scene(&spec(), DEFAULT_CLASSES, 7, Difficulty::Scatter);
        let b = generate_scene(&spec(), DEFAULT_CLASSES, 7, Difficulty::Scatter);
        assert_eq!(a, b);
        let c = generate_scene(&spec(), DEFAULT_CLASSES, 8, Difficulty::Scatter);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_difficulty_is_ground_only() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 3, Difficulty::Empty);
        assert!(scene.boxes.is_empty());
        let grid = scene.voxelize();
        for h in 0..50 {
            for w in 0..50 {
                assert_eq!(grid.get(h, w, 0), 0);
                for d in 1..4 {
                    assert_eq!(grid.get(h, w, d), scene.empty_class());
                }
            }
        }
    }

    #[test]
    fn voxelization_matches_point_in_box_membership() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 42, Difficulty::Scatter);
        assert!(!scene.boxes.is_empty());
        let grid = scene.voxelize();
        for h in 0..50 {
            for w in 0..50 {
                for d in 0..4 {
                    let center = scene.spec.voxel_center([h, w, d]);
                    let from_boxes = scene.boxes.iter().find(|b| b.contains(center)).map(|b| b.class);
                    let want = from_boxes.unwrap_or(if d == 0 { 0 } else { scene.empty_class() });
                    assert_eq!(grid.get(h, w, d), want, "voxel ({h},{w},{d})");
                }
            }
        }
    }

    #[test]
    fn boxes_respect_the_clear_disc_and_float_above_ground() {
        for seed in 0..5 {
            for difficulty in [Difficulty::Scatter, Difficulty::Stacked] {
                let scene = generate_scene(&spec(), DEFAULT_CLASSES, seed, difficulty);
                for b in &scene.boxes {
                    let c = b.center();
                    assert!((c[0] * c[0] + c[1] * c[1]).sqrt() >= 2.0, "box too close: {c:?}");
                    assert!(b.cells[2][0] >= 1, "box touches the ground layer");
                    assert!((1..scene.classes).contains(&usize::from(b.class)));
                }
            }
        }
    }

    #[test]
    fn stacks_pair_distinct_classes_on_one_footprint() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 11, Difficulty::Stacked);
        assert!(scene.boxes.len() >= 2);
        assert_eq!(scene.boxes.len() % 2, 0);
        for pair in scene.boxes.chunks(2) {
            assert_eq!(pair[0].cells[0], pair[1].cells[0]);
            assert_eq!(pair[0].cells[1], pair[1].cells[1]);
            assert_ne!(pair[0].class, pair[1].class);
            assert_eq!(pair[1].cells[2][0], pair[0].cells[2][1] + 1);
        }
    }

    #[test]
    fn ray_cast_prefers_the_nearest_surface() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 0, Difficulty::Empty);
        // Straight down from the ego: ground at z = -1, origin at 0.25.
        let hit = scene.ray_cast([0.0, 0.0, 0.25], [0.0, 0.0, -1.0]).unwrap();
        assert!((hit.0 - 1.25).abs() < 1e-12);
        assert_eq!(hit.1, 0);
        // Upward rays escape.
        assert!(scene.ray_cast([0.0, 0.0, 0.25], [0.0, 0.0, 1.0]).is_none());
        // A box in front intercepts before the ground does.
        let mut scene = scene;
        scene.boxes.push(Box3::from_cells(&scene.spec, [[30, 33], [24, 26], [1, 2]], 4));
        let dir = [1.0, 0.0, -0.05];
        let hit = scene.ray_cast([0.0, 0.0, 0.25], dir).unwrap();
        assert_eq!(hit.1, 4);
    }

    #[test]
    fn scene_text_round_trips() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 1234, Difficulty::Stacked);
        let back = SyntheticScene::from_text(&scene.to_text()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn scene_text_rejects_malformed_input() {
        let scene = generate_scene(&spec(), DEFAULT_CLASSES, 1, Difficulty::Scatter);
        let text = scene.to_text();
        assert!(SyntheticScene::from_text(&text.replace("grid", "grd")).is_err());
        assert!(SyntheticScene::from_text(&format!("{text}0 0 1 0 1 0 1\n")).is_err());
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(SyntheticScene::from_text(&truncated).is_err());
        // Box cells beyond the grid.
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let n = lines.len();
        lines[n - 1] = "1 48 55 0 1 1 1".to_string();
        assert!(SyntheticScene::from_text(&lines.join("\n")).is_err());
    }

    #[test]
    fn default_rig_covers_all_azimuths() {
        let rig = default_rig(&spec(), 80, 60);
        assert_eq!(rig.len(), 6);
        // Points on a ring at ground level: each must be seen by some camera.
        for k in 0..36 {
            let a = (k as f64) * 10f64.to_radians();
            let p = [5.0 * a.cos(), 5.0 * a.sin(), -1.0];
            let seen = rig.cameras.iter().any(|c| c.project(p).is_some());
            assert!(seen, "azimuth {k}0 degrees not covered");
        }
    }

    #[test]
    fn every_box_center_is_visible_from_some_camera() {
        let rig = default_rig(&spec(), 80, 60);
        for seed in 0..8 {
            for difficulty in [Difficulty::Scatter, Difficulty::Stacked] {
                let scene = generate_scene(&spec(), DEFAULT_CLASSES, seed, difficulty);
                for b in &scene.boxes {
                    let visible = rig.cameras.iter().any(|c| c.project(b.center()).is_some());
                    assert!(visible, "box at {:?} invisible (seed {seed})", b.center());
                }
            }
        }
    }
}
