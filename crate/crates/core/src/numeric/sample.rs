//! Sampling ops: bilinear plane reads, attention pooling, and patch
//! extraction for the convolutional stem.

use crate::scalar::{real, Real};

use super::tensor::{NumericError, Tensor};

/// Per-axis interpolation setup. Integer coordinates fall on cell centers;
/// coordinates outside `[0, extent-1]` clamp to the border cell. At an exact
/// cell boundary the derivative uses the right-limit sub-cell, so the
/// coordinate gradient vanishes at the top border and beyond either edge.
#[derive(Clone, Copy)]
struct AxisLerp {
    i0: usize,
    i1: usize,
    frac: f64,
    dmask: f64,
}

fn axis_lerp(coord: f64, extent: usize) -> AxisLerp {
    if extent == 1 {
        return AxisLerp { i0: 0, i1: 0, frac: 0.0, dmask: 0.0 };
    }
    let hi = (extent - 1) as f64;
    let clamped = coord.clamp(0.0, hi);
    let mut cell = clamped.floor() as usize;
    if cell > extent - 2 {
        cell = extent - 2;
    }
    AxisLerp {
        i0: cell,
        i1: cell + 1,
        frac: clamped - cell as f64,
        dmask: if (0.0..hi).contains(&coord) { 1.0 } else { 0.0 },
    }
}

/// Bilinear read of `plane [A, B, C]` at continuous `coords [N, 2]` rows
/// `(u, v)`; returns `[N, C]`. Differentiable in both the plane values and
/// the coordinates.
pub fn bilinear_sample<S: Real>(plane: &Tensor<S>, coords: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
    if plane.rank() != 3 {
        return Err(NumericError::BadShape {
            op: "bilinear_sample",
            expected: "plane of shape [A, B, C]",
            got: plane.shape().to_vec(),
        });
    }
    if coords.rank() != 2 || coords.shape()[1] != 2 {
        return Err(NumericError::BadShape {
            op: "bilinear_sample",
            expected: "coords of shape [N, 2]",
            got: coords.shape().to_vec(),
        });
    }
    let (a_ext, b_ext, ch) = (plane.shape()[0], plane.shape()[1], plane.shape()[2]);
    let n = coords.shape()[0];
    let p = plane.data();
    let cs = coords.data();
    let mut out = vec![S::zero(); n * ch];
    for row in 0..n {
        let u = cs[row * 2].to_f64_lossy();
        let v = cs[row * 2 + 1].to_f64_lossy();
        let au = axis_lerp(u, a_ext);
        let av = axis_lerp(v, b_ext);
        let w00: S = real((1.0 - au.frac) * (1.0 - av.frac));
        let w01: S = real((1.0 - au.frac) * av.frac);
        let w10: S = real(au.frac * (1.0 - av.frac));
        let w11: S = real(au.frac * av.frac);
        let base00 = (au.i0 * b_ext + av.i0) * ch;
        let base01 = (au.i0 * b_ext + av.i1) * ch;
        let base10 = (au.i1 * b_ext + av.i0) * ch;
        let base11 = (au.i1 * b_ext + av.i1) * ch;
        let orow = &mut out[row * ch..(row + 1) * ch];
        for c in 0..ch {
            orow[c] = w00 * p[base00 + c] + w01 * p[base01 + c] + w10 * p[base10 + c] + w11 * p[base11 + c];
        }
    }
    let plane_data = plane.data_arc();
    let coords_data = coords.data_arc();
    let need_plane = plane.tracks_grad();
    let need_coords = coords.tracks_grad();
    let plane_len = plane.numel();
    Ok(Tensor::from_node(
        vec![n, ch],
        out,
        vec![plane.clone(), coords.clone()],
        Box::new(move |g: &[S]| {
            let mut dplane = if need_plane { Some(vec![S::zero(); plane_len]) } else { None };
            let mut dcoords = if need_coords { Some(vec![S::zero(); n * 2]) } else { None };
            for row in 0..n {
                let u = coords_data[row * 2].to_f64_lossy();
                let v = coords_data[row * 2 + 1].to_f64_lossy();
                let au = axis_lerp(u, a_ext);
                let av = axis_lerp(v, b_ext);
                let base00 = (au.i0 * b_ext + av.i0) * ch;
                let base01 = (au.i0 * b_ext + av.i1) * ch;
                let base10 = (au.i1 * b_ext + av.i0) * ch;
                let base11 = (au.i1 * b_ext + av.i1) * ch;
                let grow = &g[row * ch..(row + 1) * ch];
                if let Some(dp) = dplane.as_mut() {
                    let w00: S = real((1.0 - au.frac) * (1.0 - av.frac));
                    let w01: S = real((1.0 - au.frac) * av.frac);
                    let w10: S = real(au.frac * (1.0 - av.frac));
                    let w11: S = real(au.frac * av.frac);
                    for c in 0..ch {
                        let gv = grow[c];
                        dp[base00 + c] += w00 * gv;
                        dp[base01 + c] += w01 * gv;
                        dp[base10 + c] += w10 * gv;
                        dp[base11 + c] += w11 * gv;
                    }
                }
                if let Some(dc) = dcoords.as_mut() {
                    let fu: S = real(au.frac);
                    let fv: S = real(av.frac);
                    let one = S::one();
                    let mut du = S::zero();
                    let mut dv = S::zero();
                    for c in 0..ch {
                        let gv = grow[c];
                        du += gv
                            * ((one - fv) * (plane_data[base10 + c] - plane_data[base00 + c])
                                + fv * (plane_data[base11 + c] - plane_data[base01 + c]));
                        dv += gv
                            * ((one - fu) * (plane_data[base01 + c] - plane_data[base00 + c])
                                + fu * (plane_data[base11 + c] - plane_data[base10 + c]));
                    }
                    dc[row * 2] = du * real(au.dmask);
                    dc[row * 2 + 1] = dv * real(av.dmask);
                }
            }
            vec![dplane, dcoords]
        }),
    ))
}

/// Bilinear read at fixed `(u, v)` positions given as plain values.
pub fn bilinear_sample_at<S: Real>(plane: &Tensor<S>, coords: &[(f64, f64)]) -> Result<Tensor<S>, NumericError> {
    let mut data = Vec::with_capacity(coords.len() * 2);
    for &(u, v) in coords {
        data.push(real::<S>(u));
        data.push(real::<S>(v));
    }
    let coords_t = Tensor::from_vec(vec![coords.len(), 2], data)?;
    bilinear_sample(plane, &coords_t)
}

impl<S: Real> Tensor<S> {
    /// Attention pooling: `self [Q, P, C]` weighted by `[Q, P]`, summed over
    /// the middle axis into `[Q, C]`.
    pub fn weighted_sum(&self, weights: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        if self.rank() != 3 {
            return Err(NumericError::BadShape {
                op: "weighted_sum",
                expected: "values of shape [Q, P, C]",
                got: self.shape().to_vec(),
            });
        }
        let (q, p, c) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if weights.shape() != [q, p] {
            return Err(NumericError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let vx = self.data();
        let wx = weights.data();
        let mut out = vec![S::zero(); q * c];
        for qi in 0..q {
            for pi in 0..p {
                let w = wx[qi * p + pi];
                if w == S::zero() {
                    continue;
                }
                let vrow = &vx[(qi * p + pi) * c..(qi * p + pi + 1) * c];
                let orow = &mut out[qi * c..(qi + 1) * c];
                for ci in 0..c {
                    orow[ci] += w * vrow[ci];
                }
            }
        }
        let v_data = self.data_arc();
        let w_data = weights.data_arc();
        Ok(Tensor::from_node(
            vec![q, c],
            out,
            vec![self.clone(), weights.clone()],
            Box::new(move |g: &[S]| {
                let mut dv = vec![S::zero(); q * p * c];
                let mut dw = vec![S::zero(); q * p];
                for qi in 0..q {
                    let grow = &g[qi * c..(qi + 1) * c];
                    for pi in 0..p {
                        let w = w_data[qi * p + pi];
                        let vrow = &v_data[(qi * p + pi) * c..(qi * p + pi + 1) * c];
                        let drow = &mut dv[(qi * p + pi) * c..(qi * p + pi + 1) * c];
                        let mut acc = S::zero();
                        for ci in 0..c {
                            drow[ci] = w * grow[ci];
                            acc += vrow[ci] * grow[ci];
                        }
                        dw[qi * p + pi] = acc;
                    }
                }
                vec![Some(dv), Some(dw)]
            }),
        ))
    }

    /// Patch extraction for strided convolution: `self [H, W, Cin]` becomes
    /// `[Ho*Wo, k*k*Cin]` with zero padding `pad` on every side. Also returns
    /// the output spatial extents `[Ho, Wo]`.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<(Tensor<S>, [usize; 2]), NumericError> {
        if self.rank() != 3 {
            return Err(NumericError::BadShape {
                op: "im2col",
                expected: "input of shape [H, W, C]",
                got: self.shape().to_vec(),
            });
        }
        if kernel == 0 || stride == 0 || self.shape()[0] + 2 * pad < kernel || self.shape()[1] + 2 * pad < kernel {
            return Err(NumericError::BadShape {
                op: "im2col",
                expected: "kernel fitting the padded input",
                got: vec![kernel, stride, pad],
            });
        }
        let (h, w, cin) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = kernel * kernel * cin;
        let x = self.data();
        let mut out = vec![S::zero(); ho * wo * cols];
        for r in 0..ho {
            for c in 0..wo {
                let orow = &mut out[(r * wo + c) * cols..(r * wo + c + 1) * cols];
                for dr in 0..kernel {
                    let sr = (r * stride + dr) as isize - pad as isize;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    for dc in 0..kernel {
                        let sc = (c * stride + dc) as isize - pad as isize;
                        if sc < 0 || sc >= w as isize {
                            continue;
                        }
                        let src = (sr as usize * w + sc as usize) * cin;
                        let dst = (dr * kernel + dc) * cin;
                        orow[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
        let full = self.numel();
        let t = Tensor::from_node(
            vec![ho * wo, cols],
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); full];
                for r in 0..ho {
                    for c in 0..wo {
                        let grow = &g[(r * wo + c) * cols..(r * wo + c + 1) * cols];
                        for dr in 0..kernel {
                            let sr = (r * stride + dr) as isize - pad as isize;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            for dc in 0..kernel {
                                let sc = (c * stride + dc) as isize - pad as isize;
                                if sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                let dst = (sr as usize * w + sc as usize) * cin;
                                let src = (dr * kernel + dc) * cin;
                                for ci in 0..cin {
                                    dx[dst + ci] += grow[src + ci];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Ok((t, [ho, wo]))
    }
}
