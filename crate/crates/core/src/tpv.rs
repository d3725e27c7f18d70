//! The tri-plane feature representation.
//!
//! Three axis-aligned planes summarize the volume: top `[H, W, C]`, side
//! `[D, H, C]`, front `[W, D, C]`. A 3D point's feature is the sum of one
//! bilinear read per plane; a dense voxel grid is the same sum restricted to
//! cell centers, where the reads reduce to lookups. Plane storage costs
//! `C * (HW + DH + WD)` values against `C * H * W * D` for a voxel grid.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{world_to_plane, GeometryError, GridSpec, View, VIEWS};
use crate::numeric::{bilinear_sample, load_tensor, save_tensor, NumericError, Tensor};
use crate::scalar::{real, Real};

/// Cap on voxel-grid materialization, in bytes of feature storage.
pub const DEFAULT_VOXEL_BUDGET_BYTES: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum TpvError {
    #[error("{view} plane has shape {got:?}, expected {want:?}")]
    PlaneShape { view: &'static str, got: Vec<usize>, want: Vec<usize> },
    #[error("planes disagree on channel count: {0:?}")]
    ChannelMismatch(Vec<usize>),
    #[error("voxel grid needs {required} bytes, budget is {budget}")]
    BudgetExceeded { required: usize, budget: usize },
    #[error("resize factor must be positive and finite, got {0}")]
    BadFactor(f64),
    #[error("target extents {target:?} do not scale {current:?} uniformly")]
    NonUniformResize { current: [usize; 3], target: [usize; 3] },
    #[error("plane snapshot: {0}")]
    SnapshotFormat(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three feature planes over a common grid spec and channel width.
pub struct TpvPlanes<S: Real> {
    spec: GridSpec,
    top: Tensor<S>,
    side: Tensor<S>,
    front: Tensor<S>,
}

impl<S: Real> Clone for TpvPlanes<S> {
    fn clone(&self) -> Self {
        TpvPlanes {
            spec: self.spec,
            top: self.top.clone(),
            side: self.side.clone(),
            front: self.front.clone(),
        }
    }
}

fn plane_shape(spec: &GridSpec, view: View, channels: usize) -> Vec<usize> {
    let (rows, cols) = view.extent(spec);
    vec![rows, cols, channels]
}

impl<S: Real> TpvPlanes<S> {
    pub fn new(spec: GridSpec, top: Tensor<S>, side: Tensor<S>, front: Tensor<S>) -> Result<Self, TpvError> {
        let channels: Vec<usize> = [&top, &side, &front]
            .iter()
            .map(|t| t.shape().last().copied().unwrap_or(0))
            .collect();
        if channels[0] != channels[1] || channels[1] != channels[2] || channels[0] == 0 {
            return Err(TpvError::ChannelMismatch(channels));
        }
        let c = channels[0];
        for (view, tensor) in [(View::Top, &top), (View::Side, &side), (View::Front, &front)] {
            let want = plane_shape(&spec, view, c);
            if tensor.shape() != want.as_slice() {
                return Err(TpvError::PlaneShape {
                    view: view.name(),
                    got: tensor.shape().to_vec(),
                    want,
                });
            }
        }
        Ok(TpvPlanes { spec, top, side, front })
    }

    pub fn zeros(spec: GridSpec, channels: usize) -> Result<Self, TpvError> {
        Ok(TpvPlanes {
            spec,
            top: Tensor::zeros(&plane_shape(&spec, View::Top, channels)),
            side: Tensor::zeros(&plane_shape(&spec, View::Side, channels)),
            front: Tensor::zeros(&plane_shape(&spec, View::Front, channels)),
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        *self.top.shape().last().expect("planes are rank 3")
    }

    pub fn plane(&self, view: View) -> &Tensor<S> {
        match view {
            View::Top => &self.top,
            View::Side => &self.side,
            View::Front => &self.front,
        }
    }

    /// Features of arbitrary 3D world points: per point, the sum of one
    /// bilinear read per plane (top + side + front, in that order).
    /// Differentiable through the plane values; an empty point list yields
    /// an empty `[0, C]` result.
    pub fn query_points(&self, points: &[[f64; 3]]) -> Result<Tensor<S>, TpvError> {
        let mut parts = Vec::with_capacity(3);
        for view in VIEWS {
            let mut coords = Vec::with_capacity(points.len() * 2);
            for &p in points {
                let pc = world_to_plane(&self.spec, view, p);
                coords.push(real::<S>(pc[0]));
                coords.push(real::<S>(pc[1]));
            }
            let coords_t = Tensor::from_vec(vec![points.len(), 2], coords)?;
            parts.push(bilinear_sample(self.plane(view), &coords_t)?);
        }
        let mut it = parts.into_iter();
        let first = it.next().expect("three views");
        let mut acc = first;
        for p in it {
            acc = acc.add(&p)?;
        }
        Ok(acc)
    }

    /// Dense `[H, W, D, C]` voxel features under the default budget.
    pub fn voxel_features(&self) -> Result<Tensor<S>, TpvError> {
        self.voxel_features_with_budget(DEFAULT_VOXEL_BUDGET_BYTES)
    }

    /// Dense voxel features: `V[h, w, d] = top[h, w] + side[d, h] + front[w, d]`,
    /// exactly the point query at every voxel center. Refuses to materialize
    /// grids whose storage would exceed `budget` bytes.
    pub fn voxel_features_with_budget(&self, budget: usize) -> Result<Tensor<S>, TpvError> {
        let GridSpec { h, w, d, .. } = self.spec;
        let c = self.channels();
        let required = h * w * d * c * std::mem::size_of::<S>();
        if required > budget {
            return Err(TpvError::BudgetExceeded { required, budget });
        }
        let voxels = h * w * d;
        let mut idx_top = Vec::with_capacity(voxels);
        let mut idx_side = Vec::with_capacity(voxels);
        let mut idx_front = Vec::with_capacity(voxels);
        for hh in 0..h {
            for ww in 0..w {
                for dd in 0..d {
                    idx_top.push(hh * w + ww);
                    idx_side.push(dd * h + hh);
                    idx_front.push(ww * d + dd);
                }
            }
        }
        // Same summation order as query_points (top + side + front) so the
        // two paths agree bitwise at voxel centers.
        let t = self.top.reshape(&[h * w, c])?.gather_rows(&idx_top)?;
        let s = self.side.reshape(&[d * h, c])?.gather_rows(&idx_side)?;
        let f = self.front.reshape(&[w * d, c])?.gather_rows(&idx_front)?;
        Ok(t.add(&s)?.add(&f)?.reshape(&[h, w, d, c])?)
    }

    /// Single-plane ablation view: the same top plane with zeroed side and
    /// front planes, so features depend only on (x, y). Used by the ablation
    /// harness as the matched-budget baseline.
    pub fn bev_mode(&self) -> TpvPlanes<S> {
        TpvPlanes {
            spec: self.spec,
            top: self.top.clone(),
            side: Tensor::zeros(self.side.shape()),
            front: Tensor::zeros(self.front.shape()),
        }
    }

    /// Bilinear resampling onto a grid scaled by `factor` per axis, with the
    /// cell size rescaled so world coverage is unchanged. Rounded extents
    /// must keep the scaling uniform across axes.
    pub fn resize_by(&self, factor: f64) -> Result<TpvPlanes<S>, TpvError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(TpvError::BadFactor(factor));
        }
        let target = [
            (self.spec.h as f64 * factor).round() as usize,
            (self.spec.w as f64 * factor).round() as usize,
            (self.spec.d as f64 * factor).round() as usize,
        ];
        self.resize_to(target)
    }

    /// Bilinear resampling onto the given `[h, w, d]` extents; the per-axis
    /// ratios must agree (single scalar cell size).
    pub fn resize_to(&self, target: [usize; 3]) -> Result<TpvPlanes<S>, TpvError> {
        let current = [self.spec.h, self.spec.w, self.spec.d];
        if target.iter().any(|&e| e == 0) {
            return Err(TpvError::NonUniformResize { current, target });
        }
        let ratios: Vec<f64> = target.iter().zip(current).map(|(&t, c)| t as f64 / c as f64).collect();
        if (ratios[0] - ratios[1]).abs() > 1e-9 || (ratios[0] - ratios[2]).abs() > 1e-9 {
            return Err(TpvError::NonUniformResize { current, target });
        }
        let new_spec = GridSpec::new(target[0], target[1], target[2], self.spec.cell / ratios[0])?;
        let c = self.channels();
        let resample = |view: View| -> Result<Tensor<S>, TpvError> {
            let (rows, cols) = view.extent(&new_spec);
            let (a, b) = view.plane_axes();
            let mut coords = Vec::with_capacity(rows * cols * 2);
            for i in 0..rows {
                for j in 0..cols {
                    // New cell center -> world -> old plane coordinate.
                    let wa = new_spec.axis_world(a, i as f64);
                    let wb = new_spec.axis_world(b, j as f64);
                    coords.push(real::<S>(self.spec.axis_coord(a, wa)));
                    coords.push(real::<S>(self.spec.axis_coord(b, wb)));
                }
            }
            let coords_t = Tensor::from_vec(vec![rows * cols, 2], coords)?;
            Ok(bilinear_sample(self.plane(view), &coords_t)?.reshape(&[rows, cols, c])?)
        };
        Ok(TpvPlanes {
            spec: new_spec,
            top: resample(View::Top)?,
            side: resample(View::Side)?,
            front: resample(View::Front)?,
        })
    }

    /// Writes the three plane tensors plus a grid-spec sidecar into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), TpvError> {
        std::fs::create_dir_all(dir)?;
        for view in VIEWS {
            save_tensor(&dir.join(format!("{}.tpvt", view.name())), self.plane(view))?;
        }
        let spec = format!(
            "h {}\nw {}\nd {}\ncell {}\n",
            self.spec.h, self.spec.w, self.spec.d, self.spec.cell
        );
        std::fs::write(dir.join("grid.txt"), spec)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, TpvError> {
        let text = std::fs::read_to_string(dir.join("grid.txt"))?;
        let mut h = None;
        let mut w = None;
        let mut d = None;
        let mut cell = None;
        for line in text.lines() {
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some("h"), Some(v)) => h = v.parse::<usize>().ok(),
                (Some("w"), Some(v)) => w = v.parse::<usize>().ok(),
                (Some("d"), Some(v)) => d = v.parse::<usize>().ok(),
                (Some("cell"), Some(v)) => cell = v.parse::<f64>().ok(),
                (None, _) => {}
                _ => return Err(TpvError::SnapshotFormat(format!("unrecognized line {line:?}"))),
            }
        }
        let (h, w, d, cell) = match (h, w, d, cell) {
            (Some(h), Some(w), Some(d), Some(cell)) => (h, w, d, cell),
            _ => return Err(TpvError::SnapshotFormat("missing grid fields".to_string())),
        };
        let spec = GridSpec::new(h, w, d, cell)?;
        let top = load_tensor(&dir.join("top.tpvt"))?;
        let side = load_tensor(&dir.join("side.tpvt"))?;
        let front = load_tensor(&dir.join("front.tpvt"))?;
        TpvPlanes::new(spec, top, side, front)
    }
}

/// Storage accounting for the plane representation versus a dense grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryAccounting {
    /// Values held by the three planes: `C * (HW + DH + WD)`.
    pub plane_values: usize,
    /// Values a dense voxel grid would hold: `C * H * W * D`.
    pub voxel_values: usize,
}

impl MemoryAccounting {
    pub fn ratio(&self) -> f64 {
        self.voxel_values as f64 / self.plane_values as f64
    }
}

pub fn memory_accounting(spec: &GridSpec, channels: usize) -> MemoryAccounting {
    let GridSpec { h, w, d, .. } = *spec;
    MemoryAccounting {
        plane_values: channels * (h * w + d * h + w * d),
        voxel_values: channels * h * w * d,
    }
}

/// Convenience: plane tensors filled from one value stream.
pub fn planes_from_fn<S: Real>(
    spec: GridSpec,
    channels: usize,
    mut f: impl FnMut() -> f64,
) -> Result<TpvPlanes<S>, TpvError> {
    let mut make = |view: View| {
        let shape = plane_shape(&spec, view, channels);
        let n: usize = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| real(f())).collect();
        Tensor::from_vec(shape, data)
    };
    let top = make(View::Top)?;
    let side = make(View::Side)?;
    let front = make(View::Front)?;
    TpvPlanes::new(spec, top, side, front)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GridSpec {
        GridSpec::new(4, 5, 3, 0.5).unwrap()
    }

    #[test]
    fn construction_validates_plane_shapes() {
        let spec = small_spec();
        let bad = TpvPlanes::<f32>::new(
            spec,
            Tensor::zeros(&[4, 5, 2]),
            Tensor::zeros(&[3, 4, 2]),
            Tensor::zeros(&[5, 2, 2]), // wrong: should be [5, 3, 2]
        );
        assert!(matches!(bad, Err(TpvError::PlaneShape { view: "front", .. })));
        let mixed = TpvPlanes::<f32>::new(
            spec,
            Tensor::zeros(&[4, 5, 2]),
            Tensor::zeros(&[3, 4, 3]),
            Tensor::zeros(&[5, 3, 2]),
        );
        assert!(matches!(mixed, Err(TpvError::ChannelMismatch(_))));
    }

    #[test]
    fn zero_planes_return_zero_features_everywhere() {
        let planes = TpvPlanes::<f32>::zeros(small_spec(), 4).unwrap();
        let out = planes.query_points(&[[0.0, 0.0, 0.0], [100.0, -3.0, 9.0]]).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_planes_sum_their_constants() {
        let spec = small_spec();
        let planes = TpvPlanes::<f64>::new(
            spec,
            Tensor::full(&[4, 5, 1], 1.0),
            Tensor::full(&[3, 4, 1], 10.0),
            Tensor::full(&[5, 3, 1], 100.0),
        )
        .unwrap();
        // Clamping makes even far-out points read the constants. The corner
        // weights sum to 1 only up to rounding, hence the tolerance.
        let out = planes
            .query_points(&[[0.0, 0.0, 0.0], [0.3, -0.2, 0.1], [99.0, 99.0, 99.0]])
            .unwrap();
        for &v in out.data() {
            assert!((v - 111.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn empty_point_lists_give_empty_output() {
        let planes = TpvPlanes::<f32>::zeros(small_spec(), 3).unwrap();
        let out = planes.query_points(&[]).unwrap();
        assert_eq!(out.shape(), &[0, 3]);
    }

    #[test]
    fn all_ones_planes_broadcast_to_three() {
        let spec = GridSpec::new(2, 2, 2, 1.0).unwrap();
        let planes = TpvPlanes::<f32>::new(
            spec,
            Tensor::ones(&[2, 2, 1]),
            Tensor::ones(&[2, 2, 1]),
            Tensor::ones(&[2, 2, 1]),
        )
        .unwrap();
        let v = planes.voxel_features().unwrap();
        assert_eq!(v.shape(), &[2, 2, 2, 1]);
        assert!(v.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn voxel_features_match_point_queries_at_centers_bitwise() {
        let spec = GridSpec::new(5, 4, 3, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 6, || rng.gen_range(-2.0..2.0)).unwrap();
        let dense = planes.voxel_features().unwrap();
        let mut centers = Vec::new();
        for h in 0..5 {
            for w in 0..4 {
                for d in 0..3 {
                    centers.push(spec.voxel_center([h, w, d]));
                }
            }
        }
        let queried = planes.query_points(&centers).unwrap();
        assert_eq!(dense.numel(), queried.numel());
        for (a, b) in dense.data().iter().zip(queried.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn accounting_matches_the_closed_forms() {
        let spec = GridSpec::new(200, 200, 16, 0.5).unwrap();
        let acc = memory_accounting(&spec, 128);
        assert_eq!(acc.plane_values, 5_939_200);
        assert_eq!(acc.voxel_values, 81_920_000);
        assert!((acc.ratio() - 13.79).abs() < 0.01);
    }

    #[test]
    fn oversized_voxel_grids_hit_the_budget() {
        let spec = GridSpec::new(200, 200, 16, 0.5).unwrap();
        let planes = TpvPlanes::<f32>::zeros(spec, 128).unwrap();
        match planes.voxel_features() {
            Err(TpvError::BudgetExceeded { required, budget }) => {
                assert_eq!(required, 81_920_000 * 4);
                assert_eq!(budget, DEFAULT_VOXEL_BUDGET_BYTES);
            }
            other => panic!("expected budget error, got {:?}", other.map(|t| t.shape().to_vec())),
        }
        // A generous budget admits the same grid.
        assert!(planes.voxel_features_with_budget(usize::MAX).is_ok());
    }

    #[test]
    fn resize_factor_one_is_identity() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 3, || rng.gen_range(-1.0..1.0)).unwrap();
        let same = planes.resize_by(1.0).unwrap();
        for view in VIEWS {
            assert_eq!(same.plane(view).data(), planes.plane(view).data());
        }
        assert_eq!(same.spec(), planes.spec());
    }

    #[test]
    fn doubling_reproduces_original_voxel_centers() {
        let spec = GridSpec::new(6, 6, 4, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 5, || rng.gen_range(-3.0..3.0)).unwrap();
        let fine = planes.resize_by(2.0).unwrap();
        assert_eq!(fine.spec().h, 12);
        assert_eq!(fine.spec().cell, 0.25);
        let mut centers = Vec::new();
        for h in 0..6 {
            for w in 0..6 {
                for d in 0..4 {
                    centers.push(spec.voxel_center([h, w, d]));
                }
            }
        }
        let before = planes.query_points(&centers).unwrap();
        let after = fine.query_points(&centers).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn eight_fold_resize_matches_the_expected_extents() {
        let spec = GridSpec::new(50, 50, 4, 0.5).unwrap();
        let planes = TpvPlanes::<f32>::zeros(spec, 2).unwrap();
        let big = planes.resize_by(8.0).unwrap();
        assert_eq!((big.spec().h, big.spec().w, big.spec().d), (400, 400, 32));
        assert_eq!(big.spec().cell, 0.5 / 8.0);
    }

    #[test]
    fn non_uniform_targets_are_rejected() {
        let planes = TpvPlanes::<f32>::zeros(GridSpec::new(10, 10, 4, 0.5).unwrap(), 2).unwrap();
        assert!(matches!(
            planes.resize_to([20, 20, 9]),
            Err(TpvError::NonUniformResize { .. })
        ));
        assert!(matches!(planes.resize_by(0.0), Err(TpvError::BadFactor(_))));
        assert!(matches!(planes.resize_by(f64::NAN), Err(TpvError::BadFactor(_))));
    }

    #[test]
    fn bev_mode_ignores_height() {
        let spec = GridSpec::new(6, 6, 4, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 4, || rng.gen_range(-1.0..1.0)).unwrap();
        let bev = planes.bev_mode();
        let lo = bev.query_points(&[[0.3, -0.7, -0.9]]).unwrap();
        let hi = bev.query_points(&[[0.3, -0.7, 0.8]]).unwrap();
        assert_eq!(lo.data(), hi.data());
        // The full representation does separate the two heights.
        let lo3 = planes.query_points(&[[0.3, -0.7, -0.9]]).unwrap();
        let hi3 = planes.query_points(&[[0.3, -0.7, 0.8]]).unwrap();
        assert_ne!(lo3.data(), hi3.data());
    }

    #[test]
    fn concurrent_queries_see_the_same_features() {
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 4, || rng.gen_range(-1.0..1.0)).unwrap();
        let points = [[0.1, 0.2, -0.3], [0.5, -0.5, 0.0]];
        let baseline = planes.query_points(&points).unwrap();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| scope.spawn(|| planes.query_points(&points).unwrap()))
                .collect();
            for h in handles {
                let got = h.join().unwrap();
                assert_eq!(got.data(), baseline.data());
            }
        });
    }

    #[test]
    fn plane_snapshots_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let planes: TpvPlanes<f32> = planes_from_fn(spec, 2, || rng.gen_range(-1.0..1.0)).unwrap();
        planes.save_dir(dir.path()).unwrap();
        let back = TpvPlanes::<f32>::load_dir(dir.path()).unwrap();
        assert_eq!(back.spec(), planes.spec());
        for view in VIEWS {
            assert_eq!(back.plane(view).data(), planes.plane(view).data());
        }
    }
}
