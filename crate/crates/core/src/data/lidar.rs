//! Seeded ray-cast point sampling from the ego position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::scene::SENSOR_HEIGHT_CELLS;
use crate::data::{LabeledPoint, LabeledPointSet, SyntheticScene};

/// Hits are pushed this far along the ray past the surface, so every point
/// lands unambiguously inside the solid (or just under the ground plane)
/// while staying within 1e-5 of the surface.
const SURFACE_NUDGE: f64 = 1e-5;

/// Casts `ray_count` seeded rays from the ego sensor and returns the labeled
/// first-surface hits that fall inside the volume; misses are dropped. Two
/// thirds of the rays sweep a fixed elevation band; with boxes present, the
/// remaining third aims at random box interiors so every object collects
/// returns even when it subtends a small solid angle.
pub fn sample_lidar(scene: &SyntheticScene, ray_count: usize, seed: u64) -> LabeledPointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11da_9c3a);
    let origin = [0.0, 0.0, SENSOR_HEIGHT_CELLS * scene.spec.cell];
    let mut points = Vec::new();
    for i in 0..ray_count {
        let aimed = !scene.boxes.is_empty() && i % 3 == 2;
        let dir = if aimed {
            let b = &scene.boxes[rng.gen_range(0..scene.boxes.len())];
            let target = [
                rng.gen_range(b.min[0]..b.max[0]),
                rng.gen_range(b.min[1]..b.max[1]),
                rng.gen_range(b.min[2]..b.max[2]),
            ];
            let d = [
                target[0] - origin[0],
                target[1] - origin[1],
                target[2] - origin[2],
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / n, d[1] / n, d[2] / n]
        } else {
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let elevation = rng.gen_range(-40f64.to_radians()..12f64.to_radians());
            [
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            ]
        };
        let Some((t, class)) = scene.ray_cast(origin, dir) else {
            continue;
        };
        let tp = t + SURFACE_NUDGE;
        let p = [
            origin[0] + tp * dir[0],
            origin[1] + tp * dir[1],
            origin[2] + tp * dir[2],
        ];
        if scene.spec.voxel_of(p).is_none() {
            continue;
        }
        points.push(LabeledPoint { pos: p, class });
    }
    LabeledPointSet { points }
}
