//! Pinhole cameras: projection, validity, and the rig file format.

use std::fs;
use std::path::Path;

use super::GeometryError;

/// Points closer than this along the optical axis are treated as invalid.
pub const MIN_DEPTH: f64 = 1e-6;

/// Tolerance for the rotation orthonormality check.
const ORTHO_TOL: f64 = 1e-5;

/// A pinhole camera: upper-triangular intrinsics, a rigid world-to-camera
/// transform, and the image extents in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

/// A continuous pixel position in a specific camera, with its depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRef {
    pub camera: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { intrinsics, extrinsics, width, height };
        cam.validate(0)?;
        Ok(cam)
    }

    /// Camera looking along `yaw` (about +z, from +x toward +y) and `pitch`
    /// (positive up), positioned at `position`, in a z-up world. The camera
    /// frame is x right, y down, z forward.
    pub fn looking(
        position: [f64; 3],
        yaw: f64,
        pitch: f64,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let f = [
            pitch.cos() * yaw.cos(),
            pitch.cos() * yaw.sin(),
            pitch.sin(),
        ];
        let up = [0.0, 0.0, 1.0];
        let right = normalize(cross(f, up));
        let down = cross(f, right);
        let rot = [right, down, f];
        let t = [-dot(right, position), -dot(down, position), -dot(f, position)];
        let extrinsics = [
            [rot[0][0], rot[0][1], rot[0][2], t[0]],
            [rot[1][0], rot[1][1], rot[1][2], t[1]],
            [rot[2][0], rot[2][1], rot[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let intrinsics = [
            [focal, 0.0, width as f64 / 2.0],
            [0.0, focal, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Camera::new(intrinsics, extrinsics, width, height)
    }

    fn validate(&self, index: usize) -> Result<(), GeometryError> {
        let bad = |reason: String| GeometryError::BadCamera { index, reason };
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0) || !(k[1][1] > 0.0) {
            return Err(bad(format!("focal lengths must be positive, got {} and {}", k[0][0], k[1][1])));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || (k[2][2] - 1.0).abs() > 1e-12 {
            return Err(bad("intrinsics must be upper-triangular with unit scale".to_string()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("image extents must be positive".to_string()));
        }
        let e = &self.extrinsics;
        if e[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(bad("extrinsics must end with the row [0, 0, 0, 1]".to_string()));
        }
        // Rows of the rotation block must be orthonormal.
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for kk in 0..3 {
                    acc += e[i][kk] * e[j][kk];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((acc - want).abs());
            }
        }
        if max_dev > ORTHO_TOL {
            return Err(bad(format!("rotation is not orthonormal (deviation {max_dev:.2e})")));
        }
        Ok(())
    }

    /// World-to-camera transform of a point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0f64; 3];
        for (i, row) in e.iter().take(3).enumerate() {
            out[i] = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3];
        }
        out
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let e = &self.extrinsics;
        let t = [e[0][3], e[1][3], e[2][3]];
        // center = -R^T t
        [
            -(e[0][0] * t[0] + e[1][0] * t[1] + e[2][0] * t[2]),
            -(e[0][1] * t[0] + e[1][1] * t[1] + e[2][1] * t[2]),
            -(e[0][2] * t[0] + e[1][2] * t[1] + e[2][2] * t[2]),
        ]
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> [f64; 3] {
        let e = &self.extrinsics;
        [e[2][0], e[2][1], e[2][2]]
    }

    /// Projects a world point; `None` when the depth is at most [`MIN_DEPTH`]
    /// or the pixel leaves the half-open bounds `[0, width) x [0, height)`.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        let depth = c[2];
        if depth <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let u = k[0][0] * (c[0] / depth) + k[0][1] * (c[1] / depth) + k[0][2];
        let v = k[1][1] * (c[1] / depth) + k[1][2];
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((u, v, depth))
    }

    /// Ray direction in world coordinates through a continuous pixel position.
    pub fn pixel_ray(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        // Invert the upper-triangular intrinsics for direction (x, y, 1).
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        let d_cam = [x, y, 1.0];
        let e = &self.extrinsics;
        normalize([
            e[0][0] * d_cam[0] + e[1][0] * d_cam[1] + e[2][0] * d_cam[2],
            e[0][1] * d_cam[0] + e[1][1] * d_cam[1] + e[2][1] * d_cam[2],
            e[0][2] * d_cam[0] + e[1][2] * d_cam[1] + e[2][2] * d_cam[2],
        ])
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// A set of cameras observing the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

/// Projection of a shared reference-point list into every rig camera:
/// `hits[camera][ref]` is the pixel when that reference point is visible.
#[derive(Debug, Clone)]
pub struct CameraHits {
    pub hits: Vec<Vec<Option<PixelRef>>>,
}

impl CameraHits {
    /// Cameras that see at least one reference point.
    pub fn valid_cameras(&self) -> Vec<usize> {
        self.hits
            .iter()
            .enumerate()
            .filter(|(_, refs)| refs.iter().any(Option::is_some))
            .map(|(i, _)| i)
            .collect()
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        for (i, cam) in cameras.iter().enumerate() {
            cam.validate(i)?;
        }
        Ok(CameraRig { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Projects reference points into every camera.
    pub fn project_points(&self, points: &[[f64; 3]]) -> CameraHits {
        let hits = self
            .cameras
            .iter()
            .enumerate()
            .map(|(camera, cam)| {
                points
                    .iter()
                    .map(|&p| cam.project(p).map(|(u, v, depth)| PixelRef { camera, u, v, depth }))
                    .collect()
            })
            .collect();
        CameraHits { hits }
    }

    /// Serializes the rig as a text document: a `cameras N` header, then per
    /// camera three lines holding 9 intrinsic values (row-major), 16
    /// extrinsic values (row-major), and the two image extents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("cameras {}\n", self.cameras.len()));
        for cam in &self.cameras {
            let k: Vec<String> = cam.intrinsics.iter().flatten().map(|v| format!("{v}")).collect();
            out.push_str(&k.join(" "));
            out.push('\n');
            let e: Vec<String> = cam.extrinsics.iter().flatten().map(|v| format!("{v}")).collect();
            out.push_str(&e.join(" "));
            out.push('\n');
            out.push_str(&format!("{} {}\n", cam.width, cam.height));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GeometryError> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let header = tokens.next().ok_or_else(|| GeometryError::RigFormat("empty document".to_string()))?;
        if header != "cameras" {
            return Err(GeometryError::RigFormat(format!("expected 'cameras', got {header:?}")));
        }
        let count: usize = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| GeometryError::RigFormat("bad camera count".to_string()))?;
        let next_f64 = |what: &str, tokens: &mut dyn Iterator<Item = &str>| -> Result<f64, GeometryError> {
            tokens
                .next()
                .ok_or_else(|| GeometryError::RigFormat(format!("unexpected end of document reading {what}")))?
                .parse()
                .map_err(|e| GeometryError::RigFormat(format!("bad {what}: {e}")))
        };
        let mut cameras = Vec::with_capacity(count);
        for _ in 0..count {
            let mut k = [[0.0f64; 3]; 3];
            for row in k.iter_mut() {
                for v in row.iter_mut() {
                    *v = next_f64("intrinsic", &mut tokens)?;
                }
            }
            let mut e = [[0.0f64; 4]; 4];
            for row in e.iter_mut() {
                for v in row.iter_mut() {
                    *v = next_f64("extrinsic", &mut tokens)?;
                }
            }
            let width = next_f64("width", &mut tokens)? as usize;
            let height = next_f64("height", &mut tokens)? as usize;
            cameras.push(Camera { intrinsics: k, extrinsics: e, width, height });
        }
        if tokens.next().is_some() {
            return Err(GeometryError::RigFormat("trailing tokens after the last camera".to_string()));
        }
        CameraRig::new(cameras)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
