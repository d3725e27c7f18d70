//! Grid geometry: the ego-centered volume, its three view planes, and the
//! reference-point constructions used by the attention encoder.
//!
//! Conventions. World axes are x forward, y left, z up. The volume has
//! `h * w * d` cells of side `cell` meters, with the x axis counted by `h`,
//! y by `w`, and z by `d`. Integer plane coordinates fall on cell centers,
//! and cell `i` of an axis with `n` cells sits at world `(i - n/2) * cell`.

mod camera;

pub use camera::{Camera, CameraHits, CameraRig, PixelRef, MIN_DEPTH};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("grid extents and cell size must be positive, got {h}x{w}x{d} cell {cell}")]
    InvalidGrid { h: usize, w: usize, d: usize, cell: f64 },
    #[error("{0} reference points requested but the orthogonal axis has {1} cells")]
    RefCountExceedsCells(usize, usize),
    #[error("neighborhood radius must be at least one cell, got {0}")]
    RadiusTooSmall(f64),
    #[error("reference point count must be positive")]
    EmptyRefs,
    #[error("camera {index}: {reason}")]
    BadCamera { index: usize, reason: String },
    #[error("rig file: {0}")]
    RigFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cell counts and cell size of the ego-centered volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub cell: f64,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, d: usize, cell: f64) -> Result<Self, GeometryError> {
        if h == 0 || w == 0 || d == 0 || !(cell > 0.0) {
            return Err(GeometryError::InvalidGrid { h, w, d, cell });
        }
        Ok(GridSpec { h, w, d, cell })
    }

    pub fn voxel_count(&self) -> usize {
        self.h * self.w * self.d
    }

    /// Cell count along a world axis (0 = x, 1 = y, 2 = z).
    pub fn cells(&self, axis: usize) -> usize {
        match axis {
            0 => self.h,
            1 => self.w,
            _ => self.d,
        }
    }

    /// World value of a (possibly fractional) cell coordinate on an axis.
    pub fn axis_world(&self, axis: usize, coord: f64) -> f64 {
        (coord - self.cells(axis) as f64 / 2.0) * self.cell
    }

    /// Continuous cell coordinate of a world value on an axis.
    pub fn axis_coord(&self, axis: usize, world: f64) -> f64 {
        world / self.cell + self.cells(axis) as f64 / 2.0
    }

    /// Containing cell index per axis, or None when outside the volume.
    pub fn voxel_of(&self, point: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let c = (self.axis_coord(axis, point[axis]) + 0.5).floor();
            if c < 0.0 || c >= self.cells(axis) as f64 {
                return None;
            }
            idx[axis] = c as usize;
        }
        Some(idx)
    }

    /// World position of a voxel center (equals integer plane coordinates).
    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            self.axis_world(0, idx[0] as f64),
            self.axis_world(1, idx[1] as f64),
            self.axis_world(2, idx[2] as f64),
        ]
    }
}

/// The three orthogonal feature planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Indexed (h, w); collapses z.
    Top,
    /// Indexed (d, h); collapses y.
    Side,
    /// Indexed (w, d); collapses x.
    Front,
}

pub const VIEWS: [View; 3] = [View::Top, View::Side, View::Front];

impl View {
    /// World axes of the two plane indices, in index order.
    pub fn plane_axes(self) -> (usize, usize) {
        match self {
            View::Top => (0, 1),   // (h, w) -> (x, y)
            View::Side => (2, 0),  // (d, h) -> (z, x)
            View::Front => (1, 2), // (w, d) -> (y, z)
        }
    }

    /// World axis the plane collapses.
    pub fn ortho_axis(self) -> usize {
        match self {
            View::Top => 2,
            View::Side => 1,
            View::Front => 0,
        }
    }

    /// Plane extents (rows, cols) under a grid spec.
    pub fn extent(self, spec: &GridSpec) -> (usize, usize) {
        let (a, b) = self.plane_axes();
        (spec.cells(a), spec.cells(b))
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Top => "top",
            View::Side => "side",
            View::Front => "front",
        }
    }
}

/// World values of a plane coordinate's two axes.
pub fn plane_to_world(spec: &GridSpec, view: View, coord: [f64; 2]) -> [f64; 2] {
    let (a, b) = view.plane_axes();
    [spec.axis_world(a, coord[0]), spec.axis_world(b, coord[1])]
}

/// Continuous plane coordinate of a world point (orthogonal axis dropped).
pub fn world_to_plane(spec: &GridSpec, view: View, point: [f64; 3]) -> [f64; 2] {
    let (a, b) = view.plane_axes();
    [spec.axis_coord(a, point[a]), spec.axis_coord(b, point[b])]
}

/// Full 3D world point of a plane coordinate with the collapsed axis set to
/// cell coordinate `ortho_coord`.
pub fn pillar_point(spec: &GridSpec, view: View, coord: [f64; 2], ortho_coord: f64) -> [f64; 3] {
    let (a, b) = view.plane_axes();
    let o = view.ortho_axis();
    let mut p = [0.0f64; 3];
    p[a] = spec.axis_world(a, coord[0]);
    p[b] = spec.axis_world(b, coord[1]);
    p[o] = spec.axis_world(o, ortho_coord);
    p
}

/// Cell coordinates of `n` uniform samples along an axis of `cells` cells:
/// centers of `n` equal segments, excluding the volume boundary planes.
fn uniform_axis_coords(cells: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) * cells as f64 / n as f64).collect()
}

/// Image cross-attention reference points for one plane query: `n_ref` world
/// points along the pillar through `coord`, at uniform depths spanning the
/// collapsed axis. Shared by every query of the same plane coordinate.
pub fn ica_reference_points(
    spec: &GridSpec,
    view: View,
    coord: [f64; 2],
    n_ref: usize,
) -> Result<Vec<[f64; 3]>, GeometryError> {
    if n_ref == 0 {
        return Err(GeometryError::EmptyRefs);
    }
    let cells = spec.cells(view.ortho_axis());
    if n_ref > cells {
        return Err(GeometryError::RefCountExceedsCells(n_ref, cells));
    }
    Ok(uniform_axis_coords(cells, n_ref)
        .into_iter()
        .map(|t| pillar_point(spec, view, coord, t))
        .collect())
}

/// Reference points for cross-view hybrid attention, grouped per target
/// plane. The groups live on three distinct planes and are therefore
/// pairwise disjoint as (plane, coordinate) pairs.
#[derive(Debug, Clone)]
pub struct CvhaRefs {
    /// Random in-plane neighborhood of the query, on the query's own plane.
    pub same: Vec<[f64; 2]>,
    /// Pillar projections onto the two other planes.
    pub cross: [(View, Vec<[f64; 2]>); 2],
}

/// Builds CVHA reference points for the query at integer `coord` on `view`.
/// Same-plane points are drawn uniformly from a disc of `radius_cells` cells
/// (at least one cell) using `rng`; cross-plane points project the query's
/// pillar, sampled at `cross_count` uniform positions of the collapsed axis,
/// onto each other plane.
pub fn cvha_reference_points<R: Rng>(
    spec: &GridSpec,
    view: View,
    coord: [usize; 2],
    same_count: usize,
    cross_count: usize,
    radius_cells: f64,
    rng: &mut R,
) -> Result<CvhaRefs, GeometryError> {
    if radius_cells < 1.0 {
        return Err(GeometryError::RadiusTooSmall(radius_cells));
    }
    if same_count == 0 || cross_count == 0 {
        return Err(GeometryError::EmptyRefs);
    }
    let mut same = Vec::with_capacity(same_count);
    for _ in 0..same_count {
        let r = radius_cells * rng.gen::<f64>().sqrt();
        let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
        same.push([coord[0] as f64 + r * theta.cos(), coord[1] as f64 + r * theta.sin()]);
    }

    // Cell coordinates of the query along every world axis; the collapsed
    // axis takes each uniform sample in turn.
    let (a, b) = view.plane_axes();
    let o = view.ortho_axis();
    let taus = uniform_axis_coords(spec.cells(o), cross_count);
    let others: Vec<View> = VIEWS.iter().copied().filter(|v| *v != view).collect();
    let mut cross_groups = Vec::with_capacity(2);
    for other in others {
        let (oa, ob) = other.plane_axes();
        let pts = taus
            .iter()
            .map(|&tau| {
                let mut axes = [0.0f64; 3];
                axes[a] = coord[0] as f64;
                axes[b] = coord[1] as f64;
                axes[o] = tau;
                [axes[oa], axes[ob]]
            })
            .collect();
        cross_groups.push((other, pts));
    }
    let [g0, g1]: [(View, Vec<[f64; 2]>); 2] =
        cross_groups.try_into().expect("exactly two other planes");
    Ok(CvhaRefs { same, cross: [g0, g1] })
}
