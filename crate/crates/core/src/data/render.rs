//! Flat-shaded class-colored rendering of synthetic scenes.

use crate::data::SyntheticScene;
use crate::geometry::CameraRig;
use crate::numeric::Tensor;
use crate::scalar::{real, Real};

/// Color of rays that escape the scene.
pub const BACKGROUND_COLOR: [f64; 3] = [0.65, 0.8, 0.95];

const PALETTE: [[f64; 3]; 6] = [
    [0.45, 0.45, 0.45], // ground
    [0.9, 0.15, 0.15],
    [0.15, 0.8, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.2],
    [0.85, 0.25, 0.85],
];

/// Deterministic color for a class id; fixed palette for the common ids,
/// hash-derived hues beyond it.
pub fn class_color(class: u8) -> [f64; 3] {
    if (class as usize) < PALETTE.len() {
        return PALETTE[class as usize];
    }
    // SplitMix-style scramble for stable but distinct colors.
    let mut x = (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut next = || {
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 27;
        (x >> 40) as f64 / (1u64 << 24) as f64
    };
    [
        0.25 + 0.7 * next(),
        0.25 + 0.7 * next(),
        0.25 + 0.7 * next(),
    ]
}

/// One `[height, width, 3]` image per rig camera, values in [0, 1]. Each
/// pixel casts a ray through its center and takes the class color of the
/// first surface hit, or the background color.
pub fn render_cameras<S: Real>(scene: &SyntheticScene, rig: &CameraRig) -> Vec<Tensor<S>> {
    rig.cameras
        .iter()
        .map(|cam| {
            let origin = cam.center();
            let mut data = Vec::with_capacity(cam.height * cam.width * 3);
            for iv in 0..cam.height {
                for iu in 0..cam.width {
                    let dir = cam.pixel_ray(iu as f64 + 0.5, iv as f64 + 0.5);
                    let color = match scene.ray_cast(origin, dir) {
                        Some((_, class)) => class_color(class),
                        None => BACKGROUND_COLOR,
                    };
                    data.extend(color.map(real::<S>));
                }
            }
            Tensor::from_vec(vec![cam.height, cam.width, 3], data)
                .expect("image shape matches buffer")
        })
        .collect()
}
