//! Elementwise, linear-algebra, normalization, and indexing ops.
//!
//! Every op validates shapes up front, computes its forward value, and (when
//! an input tracks gradients) registers a backward closure mapping the output
//! gradient to per-input gradients.

use std::sync::Arc;

use crate::scalar::{real, Real};

use super::tensor::{strides_of, NumericError, Tensor};

fn check_same_shape<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<(), NumericError> {
    if a.shape() != b.shape() {
        return Err(NumericError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<S: Real> Tensor<S> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        check_same_shape("add", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g: &[S]| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        check_same_shape("sub", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g: &[S]| {
                vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]
            }),
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        check_same_shape("mul", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a * b).collect();
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g: &[S]| {
                let da = g.iter().zip(b_data.iter()).map(|(&gv, &b)| gv * b).collect();
                let db = g.iter().zip(a_data.iter()).map(|(&gv, &a)| gv * a).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Multiplication by a compile-time-known constant.
    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let c: S = real(factor);
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[S]| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == S::zero() {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        Ok(Tensor::from_node(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g: &[S]| {
                // dA = g . B^T, dB = A^T . g
                let mut da = vec![S::zero(); m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = S::zero();
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &b_data[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                let mut db = vec![S::zero(); k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a_data[i * k + kk];
                        if av == S::zero() {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] += av * grow[j];
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Adds a `[n]` row vector to every row of a `[rows, n]` matrix.
    pub fn add_row(&self, row: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
        if self.rank() != 2 || row.rank() != 1 || self.shape()[1] != row.shape()[0] {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let (rows, n) = (self.shape()[0], self.shape()[1]);
        let r = row.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b).collect::<Vec<_>>())
            .collect();
        Ok(Tensor::from_node(
            vec![rows, n],
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g: &[S]| {
                let mut drow = vec![S::zero(); n];
                for chunk in g.chunks(n) {
                    for (d, &gv) in drow.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
                vec![Some(g.to_vec()), Some(drow)]
            }),
        ))
    }

    /// Smooth GELU nonlinearity (tanh form).
    pub fn gelu(&self) -> Tensor<S> {
        let a: S = real((2.0 / std::f64::consts::PI).sqrt());
        let b: S = real(0.044715);
        let half: S = real(0.5);
        let one = S::one();
        let three: S = real(3.0);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let t = (a * (x + b * x * x * x)).tanh();
                half * x * (one + t)
            })
            .collect();
        let x_data = self.data_arc();
        Tensor::from_node(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let dx = g
                    .iter()
                    .zip(x_data.iter())
                    .map(|(&gv, &x)| {
                        let u = a * (x + b * x * x * x);
                        let t = u.tanh();
                        let du = a * (one + three * b * x * x);
                        let d = half * (one + t) + half * x * (one - t * t) * du;
                        gv * d
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax along `axis`: exponentials normalized to sum to one per lane,
    /// computed with the usual max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>, NumericError> {
        if axis >= self.rank() {
            return Err(NumericError::BadAxis { op: "softmax", axis, rank: self.rank() });
        }
        let shape = self.shape().to_vec();
        let strides = strides_of(&shape);
        let lane_len = shape[axis];
        let lane_stride = strides[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane_len * inner + i;
                let mut m = S::neg_infinity();
                for l in 0..lane_len {
                    m = m.max(x[base + l * lane_stride]);
                }
                let mut denom = S::zero();
                for l in 0..lane_len {
                    let e = (x[base + l * lane_stride] - m).exp();
                    out[base + l * lane_stride] = e;
                    denom += e;
                }
                for l in 0..lane_len {
                    out[base + l * lane_stride] = out[base + l * lane_stride] / denom;
                }
            }
        }
        let p = Arc::new(out);
        let p_back = Arc::clone(&p);
        Ok(Tensor::from_node_shared(
            shape,
            p,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane_len * inner + i;
                        let mut dot = S::zero();
                        for l in 0..lane_len {
                            let idx = base + l * lane_stride;
                            dot += g[idx] * p_back[idx];
                        }
                        for l in 0..lane_len {
                            let idx = base + l * lane_stride;
                            dx[idx] = p_back[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    /// The normalized extent must be at least 2.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>, NumericError> {
        if self.rank() == 0 {
            return Err(NumericError::BadShape {
                op: "layer_norm",
                expected: "rank >= 1",
                got: self.shape().to_vec(),
            });
        }
        let c = *self.shape().last().expect("rank checked above");
        if c < 2 {
            return Err(NumericError::DegenerateChannel { extent: c });
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(NumericError::ShapeMismatch {
                op: "layer_norm",
                lhs: gamma.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let rows = self.numel() / c;
        let epsv: S = real(eps);
        let cf: S = real(c as f64);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            let lane = &x[r * c..(r + 1) * c];
            let mean = lane.iter().copied().sum::<S>() / cf;
            let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
            let inv = (var + epsv).sqrt().recip();
            for (k, &v) in lane.iter().enumerate() {
                out[r * c + k] = (v - mean) * inv * gm[k] + bt[k];
            }
        }
        let x_data = self.data_arc();
        let gm_data = gamma.data_arc();
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); x_data.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for r in 0..rows {
                    let lane = &x_data[r * c..(r + 1) * c];
                    let glane = &g[r * c..(r + 1) * c];
                    let mean = lane.iter().copied().sum::<S>() / cf;
                    let var = lane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
                    let inv = (var + epsv).sqrt().recip();
                    let mut sum_gg = S::zero();
                    let mut sum_ggx = S::zero();
                    for k in 0..c {
                        let xhat = (lane[k] - mean) * inv;
                        let gg = glane[k] * gm_data[k];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[k] += glane[k] * xhat;
                        dbeta[k] += glane[k];
                    }
                    let mg = sum_gg / cf;
                    let mgx = sum_ggx / cf;
                    for k in 0..c {
                        let xhat = (lane[k] - mean) * inv;
                        let gg = glane[k] * gm_data[k];
                        dx[r * c + k] = inv * (gg - mg - xhat * mgx);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total = self.data().iter().copied().sum::<S>();
        let n = self.numel();
        Tensor::from_node(
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g: &[S]| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&self) -> Tensor<S> {
        let n = self.numel();
        let nf: S = real(n as f64);
        let total = self.data().iter().copied().sum::<S>() / nf;
        Tensor::from_node(
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g: &[S]| vec![Some(vec![g[0] / nf; n])]),
        )
    }

    /// Same data, different shape (sizes must agree). Storage is shared.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>, NumericError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(NumericError::BadShape {
                op: "reshape",
                expected: "shape with the same element count",
                got: shape.to_vec(),
            });
        }
        Ok(Tensor::from_node_shared(
            shape.to_vec(),
            self.data_arc(),
            vec![self.clone()],
            Box::new(|g: &[S]| vec![Some(g.to_vec())]),
        ))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>, NumericError> {
        if axis >= self.rank() {
            return Err(NumericError::BadAxis { op: "narrow", axis, rank: self.rank() });
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(NumericError::IndexOutOfRange { op: "narrow", index: start + len, limit: extent });
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let full_len = x.len();
        Ok(Tensor::from_node(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); full_len];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Rows of a `[n, ...]` tensor selected by index, with repetition allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<S>, NumericError> {
        if self.rank() == 0 {
            return Err(NumericError::BadShape {
                op: "gather_rows",
                expected: "rank >= 1",
                got: self.shape().to_vec(),
            });
        }
        let n = self.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(NumericError::IndexOutOfRange { op: "gather_rows", index: bad, limit: n });
        }
        let row = self.numel() / n.max(1);
        let x = self.data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        let idx: Vec<usize> = index.to_vec();
        let full = self.numel();
        Ok(Tensor::from_node(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = vec![S::zero(); full];
                for (m, &i) in idx.iter().enumerate() {
                    let src = &g[m * row..(m + 1) * row];
                    let dst = &mut dx[i * row..(i + 1) * row];
                    for (d, &gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Scatter-add of `[m, ...]` rows into `n_rows` output rows.
    pub fn scatter_add_rows(&self, index: &[usize], n_rows: usize) -> Result<Tensor<S>, NumericError> {
        if self.rank() == 0 {
            return Err(NumericError::BadShape {
                op: "scatter_add_rows",
                expected: "rank >= 1",
                got: self.shape().to_vec(),
            });
        }
        let m = self.shape()[0];
        if index.len() != m {
            return Err(NumericError::BadShape {
                op: "scatter_add_rows",
                expected: "one index per row",
                got: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(NumericError::IndexOutOfRange { op: "scatter_add_rows", index: bad, limit: n_rows });
        }
        let row = self.numel() / m.max(1);
        let x = self.data();
        let mut out = vec![S::zero(); n_rows * row];
        for (src_row, &i) in index.iter().enumerate() {
            let src = &x[src_row * row..(src_row + 1) * row];
            let dst = &mut out[i * row..(i + 1) * row];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = n_rows;
        let idx: Vec<usize> = index.to_vec();
        Ok(Tensor::from_node(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = Vec::with_capacity(idx.len() * row);
                for &i in &idx {
                    dx.extend_from_slice(&g[i * row..(i + 1) * row]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-row scaling by constants (one factor per leading-axis row).
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor<S>, NumericError> {
        if self.rank() == 0 || self.shape()[0] != factors.len() {
            return Err(NumericError::BadShape {
                op: "scale_rows",
                expected: "one factor per row",
                got: self.shape().to_vec(),
            });
        }
        let m = self.shape()[0];
        let row = self.numel() / m.max(1);
        let f: Vec<S> = factors.iter().map(|&v| real(v)).collect();
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for (r, &fv) in f.iter().enumerate() {
            out.extend(x[r * row..(r + 1) * row].iter().map(|&v| v * fv));
        }
        Ok(Tensor::from_node(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g: &[S]| {
                let mut dx = Vec::with_capacity(g.len());
                for (r, &fv) in f.iter().enumerate() {
                    dx.extend(g[r * row..(r + 1) * row].iter().map(|&v| v * fv));
                }
                vec![Some(dx)]
            }),
        ))
    }
}
