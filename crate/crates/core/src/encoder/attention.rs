//! Deformable attention: learned per-query offsets around fixed anchor
//! coordinates, bilinear reads of one or more value planes, and attention
//! pooling whose softmax spans every sampled point of a head.

use crate::numeric::{bilinear_sample, NumericError, ParamSet, Tensor};
use crate::scalar::{real, Real};

/// Additive pre-softmax bias that removes a sampling point from its head's
/// attention pool; `exp` underflows to exactly zero at this magnitude, so a
/// masked point carries no weight and no gradient.
pub const MASK_BIAS: f64 = -1e9;

/// One value source of a deformable-attention call.
pub struct ValueSegment<S: Real> {
    /// Per head, the value plane already multiplied by that head's value
    /// projection: `[A, B, channels / heads]`. See [`fold_values`].
    pub values: Vec<Tensor<S>>,
    /// Constant anchor coordinates on the value plane, shape
    /// `[n_queries * n_refs * points, 2]`, laid out query-major, then ref,
    /// with each ref's coordinate repeated once per sampling point.
    pub anchors: Tensor<S>,
    /// Reference points each query contributes to this segment.
    pub n_refs: usize,
}

/// Parameters of one deformable-attention instance over `total_refs`
/// reference points (summed across segments).
pub struct DeformParams<S: Real> {
    /// `[channels, heads * total_refs * points * 2]`
    pub offsets_w: Tensor<S>,
    /// `[heads * total_refs * points * 2]`
    pub offsets_b: Tensor<S>,
    /// `[channels, heads * total_refs * points]`
    pub weights_w: Tensor<S>,
    /// `[heads * total_refs * points]`
    pub weights_b: Tensor<S>,
    /// Per head `[channels, channels / heads]`
    pub value_w: Vec<Tensor<S>>,
    /// Per head `[channels / heads, channels]`
    pub output_w: Vec<Tensor<S>>,
    /// `[channels]`
    pub output_b: Tensor<S>,
}

impl<S: Real> DeformParams<S> {
    /// Parameter names such a bundle occupies under `prefix`.
    pub fn names(prefix: &str, heads: usize) -> Vec<String> {
        let mut names = vec![
            format!("{prefix}.offsets.w"),
            format!("{prefix}.offsets.b"),
            format!("{prefix}.weights.w"),
            format!("{prefix}.weights.b"),
        ];
        for h in 0..heads {
            names.push(format!("{prefix}.value{h}.w"));
            names.push(format!("{prefix}.output{h}.w"));
        }
        names.push(format!("{prefix}.output.b"));
        names
    }

    /// Collects the bundle registered under `prefix`.
    pub fn from_params(params: &ParamSet<S>, prefix: &str, heads: usize) -> Result<Self, NumericError> {
        let mut value_w = Vec::with_capacity(heads);
        let mut output_w = Vec::with_capacity(heads);
        for h in 0..heads {
            value_w.push(params.get(&format!("{prefix}.value{h}.w"))?.clone());
            output_w.push(params.get(&format!("{prefix}.output{h}.w"))?.clone());
        }
        Ok(DeformParams {
            offsets_w: params.get(&format!("{prefix}.offsets.w"))?.clone(),
            offsets_b: params.get(&format!("{prefix}.offsets.b"))?.clone(),
            weights_w: params.get(&format!("{prefix}.weights.w"))?.clone(),
            weights_b: params.get(&format!("{prefix}.weights.b"))?.clone(),
            value_w,
            output_w,
            output_b: params.get(&format!("{prefix}.output.b"))?.clone(),
        })
    }
}

/// Multiplies a value plane `[A, B, C]` by each head's value projection,
/// producing one `[A, B, C/heads]` plane per head. Callers fold once per
/// source plane and reuse the result across every query batch that reads it.
pub fn fold_values<S: Real>(source: &Tensor<S>, value_w: &[Tensor<S>]) -> Result<Vec<Tensor<S>>, NumericError> {
    if source.rank() != 3 {
        return Err(NumericError::BadShape {
            op: "fold_values",
            expected: "value source of shape [A, B, C]",
            got: source.shape().to_vec(),
        });
    }
    let (a, b, c) = (source.shape()[0], source.shape()[1], source.shape()[2]);
    let flat = source.reshape(&[a * b, c])?;
    value_w
        .iter()
        .map(|w| flat.matmul(w)?.reshape(&[a, b, w.shape()[1]]))
        .collect()
}

/// Builds the constant anchor tensor of one segment from per-(query, ref)
/// coordinates, repeating each coordinate once per sampling point.
pub fn anchor_tensor<S: Real>(coords: &[[f64; 2]], points: usize) -> Result<Tensor<S>, NumericError> {
    let mut data = Vec::with_capacity(coords.len() * points * 2);
    for c in coords {
        for _ in 0..points {
            data.push(real::<S>(c[0]));
            data.push(real::<S>(c[1]));
        }
    }
    Tensor::from_vec(vec![coords.len() * points, 2], data)
}

fn bad_shape(expected: &'static str, got: &[usize]) -> NumericError {
    NumericError::BadShape { op: "deform_attention", expected, got: got.to_vec() }
}

/// Deformable attention over one or more value segments.
///
/// Per head, each (ref, point) pair owns a learned 2D offset applied to its
/// anchor; the value plane is read bilinearly at the shifted coordinates and
/// the reads are pooled with softmax weights normalized over **all** sampled
/// points of that head, across segments. Head outputs pass through per-head
/// output projections and are summed, plus a shared output bias.
///
/// `valid`, when given, flags usable (query, ref) pairs in query-major
/// order; an unusable ref contributes nothing to the pool (its weight
/// underflows to zero), which renormalizes the softmax over the remaining
/// points. Rows whose refs are all masked degenerate to the output bias.
///
/// With zero offset and weight projections the result is the output
/// projection of the plain mean of the features read at the anchors.
pub fn deform_attention<S: Real>(
    queries: &Tensor<S>,
    segments: &[ValueSegment<S>],
    valid: Option<&[bool]>,
    p: &DeformParams<S>,
    heads: usize,
    points: usize,
) -> Result<Tensor<S>, NumericError> {
    if queries.rank() != 2 {
        return Err(bad_shape("queries of shape [N, C]", queries.shape()));
    }
    let nq = queries.shape()[0];
    let c = queries.shape()[1];
    if heads == 0 || points == 0 || c % heads != 0 {
        return Err(bad_shape("channels divisible by a positive head count", &[c, heads, points]));
    }
    if segments.is_empty() {
        return Err(bad_shape("at least one value segment", &[]));
    }
    let ch = c / heads;
    let total: usize = segments.iter().map(|s| s.n_refs).sum();
    for seg in segments {
        if seg.n_refs == 0 {
            return Err(bad_shape("segments with at least one ref", &[seg.n_refs]));
        }
        if seg.values.len() != heads {
            return Err(bad_shape("one folded value plane per head", &[seg.values.len(), heads]));
        }
        for v in &seg.values {
            if v.rank() != 3 || v.shape()[2] != ch {
                return Err(bad_shape("folded values of shape [A, B, C/heads]", v.shape()));
            }
        }
        if seg.anchors.shape() != [nq * seg.n_refs * points, 2] {
            return Err(bad_shape("anchors of shape [N * n_refs * points, 2]", seg.anchors.shape()));
        }
    }
    if p.offsets_w.shape() != [c, heads * total * points * 2] {
        return Err(bad_shape("offset projection [C, heads * refs * points * 2]", p.offsets_w.shape()));
    }
    if p.weights_w.shape() != [c, heads * total * points] {
        return Err(bad_shape("weight projection [C, heads * refs * points]", p.weights_w.shape()));
    }
    if let Some(valid) = valid {
        if valid.len() != nq * total {
            return Err(bad_shape("one validity flag per (query, ref)", &[valid.len(), nq, total]));
        }
    }

    let offs = queries
        .matmul(&p.offsets_w)?
        .add_row(&p.offsets_b)?
        .reshape(&[nq, heads, total, points * 2])?;
    let mut logits = queries.matmul(&p.weights_w)?.add_row(&p.weights_b)?;
    if let Some(valid) = valid {
        let mut bias = vec![S::zero(); nq * heads * total * points];
        for q in 0..nq {
            for t in 0..total {
                if valid[q * total + t] {
                    continue;
                }
                for h in 0..heads {
                    let row = ((q * heads + h) * total + t) * points;
                    for slot in &mut bias[row..row + points] {
                        *slot = real::<S>(MASK_BIAS);
                    }
                }
            }
        }
        logits = logits.add(&Tensor::from_vec(vec![nq, heads * total * points], bias)?)?;
    }
    let weights = logits
        .reshape(&[nq, heads, total * points])?
        .softmax(2)?
        .reshape(&[nq, heads, total, points])?;
    // Rows with every ref masked would renormalize over the uniformly
    // biased logits; zero their pooled output so they degrade to the bias.
    let live_rows: Option<Vec<f64>> = valid.map(|valid| {
        (0..nq)
            .map(|q| if valid[q * total..(q + 1) * total].iter().any(|v| *v) { 1.0 } else { 0.0 })
            .collect()
    });

    let mut out: Option<Tensor<S>> = None;
    for h in 0..heads {
        let mut pooled: Option<Tensor<S>> = None;
        let mut start = 0;
        for seg in segments {
            let n = seg.n_refs;
            let off = offs
                .narrow(1, h, 1)?
                .narrow(2, start, n)?
                .reshape(&[nq * n * points, 2])?;
            let coords = seg.anchors.add(&off)?;
            let sampled = bilinear_sample(&seg.values[h], &coords)?.reshape(&[nq, n * points, ch])?;
            let w = weights
                .narrow(1, h, 1)?
                .narrow(2, start, n)?
                .reshape(&[nq, n * points])?;
            let part = sampled.weighted_sum(&w)?;
            pooled = Some(match pooled {
                Some(acc) => acc.add(&part)?,
                None => part,
            });
            start += n;
        }
        let head_out = pooled.expect("segments checked non-empty").matmul(&p.output_w[h])?;
        out = Some(match out {
            Some(acc) => acc.add(&head_out)?,
            None => head_out,
        });
    }
    let mut out = out.expect("heads checked positive");
    if let Some(live) = live_rows {
        if live.iter().any(|f| *f == 0.0) {
            out = out.scale_rows(&live)?;
        }
    }
    out.add_row(&p.output_b)
}
