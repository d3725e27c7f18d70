//! Tri-plane encoder: three learnable query planes refined by a stack of
//! attention blocks that mix the planes with each other and with
//! multi-camera image features, producing the plane triple served to the
//! prediction heads.
//!
//! Every block is a pre-norm residual unit. A leading run of blocks applies
//! plane attention, image attention, and a feed-forward layer; the trailing
//! blocks drop the image attention and only mix the planes. With all output
//! projections zeroed the whole stack is an exact identity over the
//! queries, which anchors the residual wiring tests.

mod attention;
mod backbone;

pub use attention::{anchor_tensor, deform_attention, fold_values, DeformParams, ValueSegment, MASK_BIAS};
pub use backbone::{extract_image_features, stem_param_names, FeatureScale, ImageFeatures};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::DEFAULT_CLASSES;
use crate::geometry::{cvha_reference_points, ica_reference_points, CameraRig, GeometryError, GridSpec, View, VIEWS};
use crate::numeric::{read_tensor_embedded, write_tensor, NumericError, ParamSet, Tensor};
use crate::scalar::{real, Real};
use crate::tpv::{TpvError, TpvPlanes};

/// Epsilon of every layer normalization in the encoder.
pub const NORM_EPS: f64 = 1e-5;

/// Leading bytes of a serialized parameter state.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TPVCKPT1";

const PARAM_SEED_SALT: u64 = 0x9bb7_02e1;
const ANCHOR_SEED_SALT: u64 = 0x51c3_47d9;

/// Failures of encoder construction, execution, or serialization.
#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("expected {expected} camera images, got {got}")]
    CameraCount { expected: usize, got: usize },
    #[error("camera image {index} has shape {got:?}, expected [{rows}, {cols}, 3]")]
    ImageShape { index: usize, got: Vec<usize>, rows: usize, cols: usize },
    #[error("checkpoint data is malformed: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tpv(#[from] TpvError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyper-parameters of the encoder and its prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub grid: GridSpec,
    /// Plane feature channels; must be divisible by `heads`.
    pub channels: usize,
    /// Semantic classes; the head emits one extra logit column for empty
    /// space, so logits have `classes + 1` columns.
    pub classes: usize,
    /// Leading blocks that attend into the camera features (at least one).
    pub image_blocks: usize,
    /// Trailing blocks that only mix the planes.
    pub plane_blocks: usize,
    pub heads: usize,
    /// Offset sampling points per (head, reference point).
    pub points: usize,
    /// Pillar reference points of image attention per view; `None` derives
    /// `min(4, cells)` for the top plane and `min(8, cells)` for the side
    /// and front planes, where `cells` counts the collapsed axis.
    pub refs_top: Option<usize>,
    pub refs_side: Option<usize>,
    pub refs_front: Option<usize>,
    /// Same-plane reference points of plane attention.
    pub neighbor_same: usize,
    /// Reference points plane attention sends to each of the other planes.
    pub neighbor_cross: usize,
    /// Radius, in cells, of the same-plane sampling disc (at least 1).
    pub neighbor_radius: f64,
    /// Channel width after the first stem convolution.
    pub stem_channels: usize,
    /// Image feature resolutions: 1 (quarter) or 2 (quarter and eighth).
    pub feature_scales: usize,
    /// Hidden width of the prediction head.
    pub head_hidden: usize,
    /// Disables every layer normalization when false (used by tests that
    /// assert exact passthrough).
    pub norm_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            grid: GridSpec::new(50, 50, 4, 0.5).expect("static grid is valid"),
            channels: 32,
            classes: DEFAULT_CLASSES,
            image_blocks: 2,
            plane_blocks: 1,
            heads: 2,
            points: 4,
            refs_top: None,
            refs_side: None,
            refs_front: None,
            neighbor_same: 4,
            neighbor_cross: 4,
            neighbor_radius: 2.0,
            stem_channels: 16,
            feature_scales: 1,
            head_hidden: 64,
            norm_enabled: true,
        }
    }
}

fn view_index(view: View) -> usize {
    match view {
        View::Top => 0,
        View::Side => 1,
        View::Front => 2,
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::Config(msg));
        if self.channels < 2 || self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!(
                "channels ({}) must be at least 2 and divisible by heads ({})",
                self.channels, self.heads
            ));
        }
        if self.points == 0 {
            return fail("points must be positive".into());
        }
        if self.image_blocks == 0 {
            return fail("at least one image block is required".into());
        }
        if self.neighbor_same == 0 || self.neighbor_cross == 0 {
            return fail("plane attention needs positive reference counts".into());
        }
        if !(self.neighbor_radius >= 1.0) {
            return fail(format!("neighbor radius {} must be at least 1", self.neighbor_radius));
        }
        if self.stem_channels == 0 || self.head_hidden == 0 {
            return fail("stem and head widths must be positive".into());
        }
        if self.feature_scales != 1 && self.feature_scales != 2 {
            return fail(format!("feature_scales must be 1 or 2, got {}", self.feature_scales));
        }
        if self.classes == 0 {
            return fail("at least one semantic class is required".into());
        }
        for view in VIEWS {
            let cells = self.grid.cells(view.ortho_axis());
            let refs = self.pillar_refs(view);
            if refs == 0 || refs > cells {
                return fail(format!(
                    "{} plane needs between 1 and {cells} pillar refs, got {refs}",
                    view.name()
                ));
            }
        }
        Ok(())
    }

    /// Pillar reference points of image attention for a view.
    pub fn pillar_refs(&self, view: View) -> usize {
        let cells = self.grid.cells(view.ortho_axis());
        let (explicit, default) = match view {
            View::Top => (self.refs_top, 4),
            View::Side => (self.refs_side, 8),
            View::Front => (self.refs_front, 8),
        };
        explicit.unwrap_or_else(|| default.min(cells))
    }

    /// Total attention blocks.
    pub fn blocks(&self) -> usize {
        self.image_blocks + self.plane_blocks
    }

    /// Logit columns the head emits: the semantic classes plus empty space.
    pub fn logit_classes(&self) -> usize {
        self.classes + 1
    }

    fn plane_extent(&self, view: View) -> (usize, usize) {
        view.extent(&self.grid)
    }

    /// Flat `key value` serialization, one setting per line.
    pub fn to_text(&self) -> String {
        let g = &self.grid;
        let refs = |o: Option<usize>| o.unwrap_or(0);
        format!(
            "grid {} {} {} {}\nchannels {}\nclasses {}\nimage_blocks {}\nplane_blocks {}\nheads {}\npoints {}\nrefs_top {}\nrefs_side {}\nrefs_front {}\nneighbor_same {}\nneighbor_cross {}\nneighbor_radius {}\nstem_channels {}\nfeature_scales {}\nhead_hidden {}\nnorm {}\n",
            g.h, g.w, g.d, g.cell,
            self.channels,
            self.classes,
            self.image_blocks,
            self.plane_blocks,
            self.heads,
            self.points,
            refs(self.refs_top),
            refs(self.refs_side),
            refs(self.refs_front),
            self.neighbor_same,
            self.neighbor_cross,
            self.neighbor_radius,
            self.stem_channels,
            self.feature_scales,
            self.head_hidden,
            if self.norm_enabled { 1 } else { 0 },
        )
    }

    /// Parses the serialization produced by [`EncoderConfig::to_text`].
    /// Every key is required, unknown or duplicate keys are rejected, and
    /// the result is validated.
    pub fn from_text(text: &str) -> Result<Self, EncoderError> {
        let bad = |msg: String| EncoderError::Config(msg);
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| bad(format!("setting line without a value: {line:?}")))?;
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(bad(format!("duplicate setting {key:?}")));
            }
        }
        let mut take = |key: &str| {
            map.remove(key).ok_or_else(|| bad(format!("missing setting {key:?}")))
        };
        let parse_usize = |key: &str, v: String| {
            v.parse::<usize>().map_err(|_| bad(format!("setting {key:?} is not a count: {v:?}")))
        };
        let grid_line = take("grid")?;
        let grid_tokens: Vec<&str> = grid_line.split_whitespace().collect();
        if grid_tokens.len() != 4 {
            return Err(bad(format!("grid expects 4 values, got {grid_line:?}")));
        }
        let ge = |_| bad(format!("grid has malformed values: {grid_line:?}"));
        let grid = GridSpec::new(
            grid_tokens[0].parse().map_err(ge)?,
            grid_tokens[1].parse().map_err(ge)?,
            grid_tokens[2].parse().map_err(ge)?,
            grid_tokens[3]
                .parse::<f64>()
                .map_err(|_| bad(format!("grid has malformed values: {grid_line:?}")))?,
        )?;
        let channels = parse_usize("channels", take("channels")?)?;
        let classes = parse_usize("classes", take("classes")?)?;
        let image_blocks = parse_usize("image_blocks", take("image_blocks")?)?;
        let plane_blocks = parse_usize("plane_blocks", take("plane_blocks")?)?;
        let heads = parse_usize("heads", take("heads")?)?;
        let points = parse_usize("points", take("points")?)?;
        let opt = |n: usize| if n == 0 { None } else { Some(n) };
        let refs_top = opt(parse_usize("refs_top", take("refs_top")?)?);
        let refs_side = opt(parse_usize("refs_side", take("refs_side")?)?);
        let refs_front = opt(parse_usize("refs_front", take("refs_front")?)?);
        let neighbor_same = parse_usize("neighbor_same", take("neighbor_same")?)?;
        let neighbor_cross = parse_usize("neighbor_cross", take("neighbor_cross")?)?;
        let radius_text = take("neighbor_radius")?;
        let neighbor_radius = radius_text
            .parse::<f64>()
            .map_err(|_| bad(format!("neighbor_radius is not a number: {radius_text:?}")))?;
        let stem_channels = parse_usize("stem_channels", take("stem_channels")?)?;
        let feature_scales = parse_usize("feature_scales", take("feature_scales")?)?;
        let head_hidden = parse_usize("head_hidden", take("head_hidden")?)?;
        let norm_text = take("norm")?;
        let norm_enabled = match norm_text.as_str() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("norm expects 0 or 1, got {other:?}"))),
        };
        if let Some(extra) = map.keys().next() {
            return Err(bad(format!("unknown setting {extra:?}")));
        }
        let config = EncoderConfig {
            grid,
            channels,
            classes,
            image_blocks,
            plane_blocks,
            heads,
            points,
            refs_top,
            refs_side,
            refs_front,
            neighbor_same,
            neighbor_cross,
            neighbor_radius,
            stem_channels,
            feature_scales,
            head_hidden,
            norm_enabled,
        };
        config.validate()?;
        Ok(config)
    }

    /// Builds a fresh parameter state. Parameter values depend only on
    /// `(config, seed)`; offset and weight projections and the positional
    /// embeddings start at zero, everything else draws small uniform values.
    pub fn init_state<S: Real>(&self, seed: u64) -> Result<EncoderState<S>, EncoderError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PARAM_SEED_SALT);
        let mut params = ParamSet::new();
        let c = self.channels;
        let query_bound = (c as f64).sqrt().recip();
        for view in VIEWS {
            let (a, b) = self.plane_extent(view);
            params.insert(&format!("query.{}", view.name()), uniform(&mut rng, &[a, b, c], query_bound))?;
        }
        for view in VIEWS {
            let (a, b) = self.plane_extent(view);
            params.insert(&format!("pos.{}", view.name()), Tensor::zeros(&[a, b, c]))?;
        }
        self.register_stem_params(&mut params, &mut rng)?;
        for block in 0..self.blocks() {
            self.register_block_params(&mut params, &mut rng, block)?;
        }
        register_norm(&mut params, "final_norm", c)?;
        params.insert("head.w1", uniform(&mut rng, &[c, self.head_hidden], query_bound))?;
        params.insert("head.b1", Tensor::zeros(&[self.head_hidden]))?;
        params.insert(
            "head.w2",
            uniform(&mut rng, &[self.head_hidden, self.logit_classes()], (self.head_hidden as f64).sqrt().recip()),
        )?;
        params.insert("head.b2", Tensor::zeros(&[self.logit_classes()]))?;
        let plane_anchor_sets = build_plane_anchors(self, seed)?;
        Ok(EncoderState { config: self.clone(), seed, params, plane_anchor_sets })
    }

    pub(crate) fn register_stem_params<S: Real, R: Rng>(
        &self,
        params: &mut ParamSet<S>,
        rng: &mut R,
    ) -> Result<(), NumericError> {
        let widths: Vec<(usize, usize)> = if self.feature_scales == 2 {
            vec![(3, self.stem_channels), (self.stem_channels, self.channels), (self.channels, self.channels)]
        } else {
            vec![(3, self.stem_channels), (self.stem_channels, self.channels)]
        };
        for (i, (cin, cout)) in widths.iter().enumerate() {
            let fan_in = 9 * cin;
            params.insert(
                &format!("stem.conv{}.w", i + 1),
                uniform(rng, &[fan_in, *cout], (fan_in as f64).sqrt().recip()),
            )?;
            params.insert(&format!("stem.conv{}.b", i + 1), Tensor::zeros(&[*cout]))?;
        }
        Ok(())
    }

    fn register_deform<S: Real, R: Rng>(
        &self,
        params: &mut ParamSet<S>,
        rng: &mut R,
        prefix: &str,
        total_refs: usize,
    ) -> Result<(), NumericError> {
        let c = self.channels;
        let ch = c / self.heads;
        let cols_off = self.heads * total_refs * self.points * 2;
        let cols_wt = self.heads * total_refs * self.points;
        params.insert(&format!("{prefix}.offsets.w"), Tensor::zeros(&[c, cols_off]))?;
        params.insert(&format!("{prefix}.offsets.b"), Tensor::zeros(&[cols_off]))?;
        params.insert(&format!("{prefix}.weights.w"), Tensor::zeros(&[c, cols_wt]))?;
        params.insert(&format!("{prefix}.weights.b"), Tensor::zeros(&[cols_wt]))?;
        let bound = (c as f64).sqrt().recip();
        let bound_out = (ch as f64).sqrt().recip();
        for head in 0..self.heads {
            params.insert(&format!("{prefix}.value{head}.w"), uniform(rng, &[c, ch], bound))?;
            params.insert(&format!("{prefix}.output{head}.w"), uniform(rng, &[ch, c], bound_out))?;
        }
        params.insert(&format!("{prefix}.output.b"), Tensor::zeros(&[c]))?;
        Ok(())
    }

    fn register_block_params<S: Real, R: Rng>(
        &self,
        params: &mut ParamSet<S>,
        rng: &mut R,
        block: usize,
    ) -> Result<(), NumericError> {
        let c = self.channels;
        let p = format!("block{block}");
        register_norm(params, &format!("{p}.norm_plane"), c)?;
        let plane_total = self.neighbor_same + 2 * self.neighbor_cross;
        self.register_deform(params, rng, &format!("{p}.planeattn"), plane_total)?;
        if block < self.image_blocks {
            register_norm(params, &format!("{p}.norm_image"), c)?;
            for view in VIEWS {
                let total = self.feature_scales * self.pillar_refs(view);
                self.register_deform(params, rng, &format!("{p}.imgattn.{}", view.name()), total)?;
            }
        }
        register_norm(params, &format!("{p}.norm_ffn"), c)?;
        let hidden = 2 * c;
        params.insert(&format!("{p}.ffn.w1"), uniform(rng, &[c, hidden], (c as f64).sqrt().recip()))?;
        params.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]))?;
        params.insert(&format!("{p}.ffn.w2"), uniform(rng, &[hidden, c], (hidden as f64).sqrt().recip()))?;
        params.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[c]))?;
        Ok(())
    }
}

fn uniform<S: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| real::<S>(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data length")
}

fn register_norm<S: Real>(params: &mut ParamSet<S>, prefix: &str, c: usize) -> Result<(), NumericError> {
    params.insert(&format!("{prefix}.g"), Tensor::ones(&[c]))?;
    params.insert(&format!("{prefix}.b"), Tensor::zeros(&[c]))
}

/// Cached anchors of one plane-attention call: the querying plane reads a
/// random neighborhood on its own plane plus the two other planes along
/// each query's pillar. Segments are ordered own plane first.
struct PlaneAnchors<S: Real> {
    segments: Vec<(View, usize, Tensor<S>)>,
}

impl<S: Real> Clone for PlaneAnchors<S> {
    fn clone(&self) -> Self {
        PlaneAnchors { segments: self.segments.clone() }
    }
}

fn build_plane_anchors<S: Real>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<Vec<[PlaneAnchors<S>; 3]>, EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ANCHOR_SEED_SALT);
    let mut all = Vec::with_capacity(config.blocks());
    for _block in 0..config.blocks() {
        let mut per_view = Vec::with_capacity(3);
        for view in VIEWS {
            let (a, b) = config.plane_extent(view);
            let mut own: Vec<[f64; 2]> = Vec::with_capacity(a * b * config.neighbor_same);
            let mut cross: [(Option<View>, Vec<[f64; 2]>); 2] = [(None, Vec::new()), (None, Vec::new())];
            for qa in 0..a {
                for qb in 0..b {
                    let refs = cvha_reference_points(
                        &config.grid,
                        view,
                        [qa, qb],
                        config.neighbor_same,
                        config.neighbor_cross,
                        config.neighbor_radius,
                        &mut rng,
                    )?;
                    own.extend_from_slice(&refs.same);
                    for (slot, (target, coords)) in cross.iter_mut().zip(refs.cross) {
                        slot.0 = Some(target);
                        slot.1.extend_from_slice(&coords);
                    }
                }
            }
            let mut segments = vec![(view, config.neighbor_same, anchor_tensor(&own, config.points)?)];
            for (target, coords) in cross {
                segments.push((
                    target.expect("plane has queries"),
                    config.neighbor_cross,
                    anchor_tensor(&coords, config.points)?,
                ));
            }
            per_view.push(PlaneAnchors { segments });
        }
        let per_view: [PlaneAnchors<S>; 3] = match per_view.try_into() {
            Ok(v) => v,
            Err(_) => unreachable!("three views"),
        };
        all.push(per_view);
    }
    Ok(all)
}

/// Parameters plus cached sampling anchors of a configured encoder.
pub struct EncoderState<S: Real> {
    config: EncoderConfig,
    seed: u64,
    pub params: ParamSet<S>,
    plane_anchor_sets: Vec<[PlaneAnchors<S>; 3]>,
}

impl<S: Real> Clone for EncoderState<S> {
    fn clone(&self) -> Self {
        EncoderState {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.clone(),
            plane_anchor_sets: self.plane_anchor_sets.clone(),
        }
    }
}

/// Pillar projections of one plane into one camera, cached per encode call:
/// the queries the camera sees, per-scale anchor tensors over those
/// queries, and the validity of each (query, ref) pair across scales.
struct CameraPillars<S: Real> {
    visible: Vec<usize>,
    anchors: Vec<Tensor<S>>,
    valid: Vec<bool>,
}

fn build_pillar_tables<S: Real>(
    config: &EncoderConfig,
    rig: &CameraRig,
    feats: &ImageFeatures<S>,
) -> Result<Vec<Vec<CameraPillars<S>>>, EncoderError> {
    let mut tables = Vec::with_capacity(3);
    for view in VIEWS {
        let (a, b) = config.plane_extent(view);
        let n_ref = config.pillar_refs(view);
        let q_count = a * b;
        let mut world = Vec::with_capacity(q_count * n_ref);
        for qa in 0..a {
            for qb in 0..b {
                world.extend(ica_reference_points(&config.grid, view, [qa as f64, qb as f64], n_ref)?);
            }
        }
        let hits = rig.project_points(&world);
        let scales = feats.scales.len();
        let total = scales * n_ref;
        let mut per_camera = Vec::with_capacity(rig.len());
        for cam_hits in &hits.hits {
            let visible: Vec<usize> = (0..q_count)
                .filter(|q| cam_hits[q * n_ref..(q + 1) * n_ref].iter().any(Option::is_some))
                .collect();
            if visible.is_empty() {
                per_camera.push(CameraPillars { visible, anchors: Vec::new(), valid: Vec::new() });
                continue;
            }
            let mut valid = vec![false; visible.len() * total];
            let mut anchors = Vec::with_capacity(scales);
            for (s, scale) in feats.scales.iter().enumerate() {
                let mut coords = Vec::with_capacity(visible.len() * n_ref);
                for (vi, &q) in visible.iter().enumerate() {
                    for r in 0..n_ref {
                        match &cam_hits[q * n_ref + r] {
                            Some(px) => {
                                coords.push(scale.feature_coord(px.u, px.v));
                                valid[vi * total + s * n_ref + r] = true;
                            }
                            None => coords.push([0.0, 0.0]),
                        }
                    }
                }
                anchors.push(anchor_tensor(&coords, config.points)?);
            }
            per_camera.push(CameraPillars { visible, anchors, valid });
        }
        tables.push(per_camera);
    }
    Ok(tables)
}

fn maybe_norm<S: Real>(
    config: &EncoderConfig,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    prefix: &str,
) -> Result<Tensor<S>, NumericError> {
    if !config.norm_enabled {
        return Ok(x.clone());
    }
    x.layer_norm(params.get(&format!("{prefix}.g"))?, params.get(&format!("{prefix}.b"))?, NORM_EPS)
}

impl<S: Real> EncoderState<S> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Seed the parameters and sampling anchors were derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The same anchors and configuration with a replacement parameter set
    /// (shapes must match the registered parameters).
    pub fn with_params(&self, params: ParamSet<S>) -> EncoderState<S> {
        EncoderState {
            config: self.config.clone(),
            seed: self.seed,
            params,
            plane_anchor_sets: self.plane_anchor_sets.clone(),
        }
    }

    /// Initial plane states: queries plus positional embeddings, `[A, B, C]`
    /// per view. `encode` refines exactly these planes.
    pub fn initial_planes(&self) -> Result<[Tensor<S>; 3], EncoderError> {
        let mut planes = Vec::with_capacity(3);
        for view in VIEWS {
            let q = self.params.get(&format!("query.{}", view.name()))?;
            let pos = self.params.get(&format!("pos.{}", view.name()))?;
            planes.push(q.add(pos)?);
        }
        match planes.try_into() {
            Ok(p) => Ok(p),
            Err(_) => unreachable!("three views"),
        }
    }

    /// Zeroes every attention output projection (matrix and bias) and every
    /// feed-forward output layer, making each residual block an exact
    /// identity. Offset and weight projections already start at zero.
    pub fn zero_output_projections(&mut self) -> Result<(), NumericError> {
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.contains(".output") || n.ends_with(".ffn.w2") || n.ends_with(".ffn.b2"))
            .map(String::from)
            .collect();
        for name in names {
            let shape = self.params.get(&name)?.shape().to_vec();
            self.params.set(&name, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    /// Replaces the zero-initialized offset projections with small random
    /// values so every sampling coordinate sits at a generic position.
    /// Useful before finite-difference probes, which straddle interpolation
    /// cell boundaries when samples rest exactly on cell centers.
    pub fn perturb_offsets(&mut self, seed: u64, bound: f64) -> Result<(), NumericError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.ends_with(".offsets.w") || n.ends_with(".offsets.b"))
            .map(String::from)
            .collect();
        for name in names {
            let shape = self.params.get(&name)?.shape().to_vec();
            self.params.set(&name, uniform(&mut rng, &shape, bound))?;
        }
        Ok(())
    }

    /// Runs the block stack over the initial planes and returns the refined
    /// plane triple. `images[j]` must match camera `j` of the rig; the
    /// computation is deterministic for fixed inputs and state.
    pub fn encode(&self, rig: &CameraRig, images: &[Tensor<S>]) -> Result<TpvPlanes<S>, EncoderError> {
        let cfg = &self.config;
        let extents: Vec<(usize, usize)> = rig.cameras.iter().map(|c| (c.height, c.width)).collect();
        let feats = extract_image_features(cfg, &self.params, images, &extents)?;
        let pillar_tables = build_pillar_tables(cfg, rig, &feats)?;
        let c = cfg.channels;
        let mut x: Vec<Tensor<S>> = Vec::with_capacity(3);
        for (i, view) in VIEWS.iter().enumerate() {
            let (a, b) = cfg.plane_extent(*view);
            let planes = self.initial_planes()?;
            let _ = i;
            x.push(planes[view_index(*view)].reshape(&[a * b, c])?);
        }
        for block in 0..cfg.blocks() {
            self.plane_attention_update(block, &mut x)?;
            if block < cfg.image_blocks {
                self.image_attention_update(block, &mut x, &feats, &pillar_tables)?;
            }
            self.ffn_update(block, &mut x)?;
        }
        let mut planes = Vec::with_capacity(3);
        for (i, view) in VIEWS.iter().enumerate() {
            let (a, b) = cfg.plane_extent(*view);
            let y = maybe_norm(cfg, &self.params, &x[i], "final_norm")?;
            planes.push(y.reshape(&[a, b, c])?);
        }
        let [top, side, front]: [Tensor<S>; 3] = match planes.try_into() {
            Ok(p) => p,
            Err(_) => unreachable!("three views"),
        };
        Ok(TpvPlanes::new(cfg.grid, top, side, front)?)
    }

    /// One parallel plane-attention update: all three planes read the
    /// pre-update planes, then the residuals are applied together.
    fn plane_attention_update(&self, block: usize, x: &mut [Tensor<S>]) -> Result<(), EncoderError> {
        let cfg = &self.config;
        let prefix = format!("block{block}");
        let normed: Vec<Tensor<S>> = x
            .iter()
            .map(|t| maybe_norm(cfg, &self.params, t, &format!("{prefix}.norm_plane")))
            .collect::<Result<_, _>>()?;
        let dp = DeformParams::from_params(&self.params, &format!("{prefix}.planeattn"), cfg.heads)?;
        let mut folded = Vec::with_capacity(3);
        for (i, view) in VIEWS.iter().enumerate() {
            let (a, b) = cfg.plane_extent(*view);
            folded.push(fold_values(&normed[i].reshape(&[a, b, cfg.channels])?, &dp.value_w)?);
        }
        let mut updates = Vec::with_capacity(3);
        for (i, _view) in VIEWS.iter().enumerate() {
            let anchors = &self.plane_anchor_sets[block][i];
            let segments: Vec<ValueSegment<S>> = anchors
                .segments
                .iter()
                .map(|(target, n_refs, t)| ValueSegment {
                    values: folded[view_index(*target)].clone(),
                    anchors: t.clone(),
                    n_refs: *n_refs,
                })
                .collect();
            updates.push(deform_attention(&normed[i], &segments, None, &dp, cfg.heads, cfg.points)?);
        }
        for (t, u) in x.iter_mut().zip(updates) {
            *t = t.add(&u)?;
        }
        Ok(())
    }

    /// One image-attention update: per view, every camera that sees a query
    /// contributes a deformable read of its features, and contributions are
    /// averaged per query. Queries no camera sees pass through unchanged.
    fn image_attention_update(
        &self,
        block: usize,
        x: &mut [Tensor<S>],
        feats: &ImageFeatures<S>,
        pillar_tables: &[Vec<CameraPillars<S>>],
    ) -> Result<(), EncoderError> {
        let cfg = &self.config;
        let prefix = format!("block{block}");
        for (i, view) in VIEWS.iter().enumerate() {
            let n_ref = cfg.pillar_refs(*view);
            let normed = maybe_norm(cfg, &self.params, &x[i], &format!("{prefix}.norm_image"))?;
            let dp = DeformParams::from_params(
                &self.params,
                &format!("{prefix}.imgattn.{}", view.name()),
                cfg.heads,
            )?;
            let q_count = x[i].shape()[0];
            let mut acc: Option<Tensor<S>> = None;
            let mut counts = vec![0.0f64; q_count];
            for (cam, pillars) in pillar_tables[i].iter().enumerate() {
                if pillars.visible.is_empty() {
                    continue;
                }
                let rows = normed.gather_rows(&pillars.visible)?;
                let mut segments = Vec::with_capacity(feats.scales.len());
                for (s, scale) in feats.scales.iter().enumerate() {
                    segments.push(ValueSegment {
                        values: fold_values(&scale.per_camera[cam], &dp.value_w)?,
                        anchors: pillars.anchors[s].clone(),
                        n_refs: n_ref,
                    });
                }
                let upd = deform_attention(&rows, &segments, Some(&pillars.valid), &dp, cfg.heads, cfg.points)?;
                let scattered = upd.scatter_add_rows(&pillars.visible, q_count)?;
                acc = Some(match acc {
                    Some(t) => t.add(&scattered)?,
                    None => scattered,
                });
                for &q in &pillars.visible {
                    counts[q] += 1.0;
                }
            }
            if let Some(acc) = acc {
                let factors: Vec<f64> =
                    counts.iter().map(|&n| if n > 0.0 { 1.0 / n } else { 0.0 }).collect();
                x[i] = x[i].add(&acc.scale_rows(&factors)?)?;
            }
        }
        Ok(())
    }

    fn ffn_update(&self, block: usize, x: &mut [Tensor<S>]) -> Result<(), EncoderError> {
        let cfg = &self.config;
        let prefix = format!("block{block}");
        let w1 = self.params.get(&format!("{prefix}.ffn.w1"))?;
        let b1 = self.params.get(&format!("{prefix}.ffn.b1"))?;
        let w2 = self.params.get(&format!("{prefix}.ffn.w2"))?;
        let b2 = self.params.get(&format!("{prefix}.ffn.b2"))?;
        for t in x.iter_mut() {
            let normed = maybe_norm(cfg, &self.params, t, &format!("{prefix}.norm_ffn"))?;
            let u = normed.matmul(w1)?.add_row(b1)?.gelu().matmul(w2)?.add_row(b2)?;
            *t = t.add(&u)?;
        }
        Ok(())
    }

    /// Serializes the state: magic, seed, configuration text, then every
    /// parameter as `(name, tensor)` in name order. Values are stored in
    /// 32-bit floats, so a 32-bit state round-trips exactly.
    pub fn write_to<W: IoWrite>(&self, w: &mut W) -> Result<(), EncoderError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        let cfg = self.config.to_text();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, tensor)?;
        }
        Ok(())
    }

    /// Reads a state serialized by [`EncoderState::write_to`], rebuilding
    /// the sampling anchors from the stored seed and requiring the stored
    /// parameters to exactly cover the configuration's parameter set.
    pub fn read_from<R: IoRead>(r: &mut R) -> Result<Self, EncoderError> {
        let bad = |msg: &str| EncoderError::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("missing header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("wrong leading magic"));
        }
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes)?;
        let seed = u64::from_le_bytes(seed_bytes);
        let mut len_bytes = [0u8; 4];
        r.read_exact(&mut len_bytes)?;
        let cfg_len = u32::from_le_bytes(len_bytes) as usize;
        if cfg_len > 1 << 16 {
            return Err(bad("configuration block is implausibly large"));
        }
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| bad("configuration is not UTF-8"))?;
        let config = EncoderConfig::from_text(&cfg_text)?;
        let mut state = config.init_state::<S>(seed)?;
        r.read_exact(&mut len_bytes)?;
        let count = u32::from_le_bytes(len_bytes) as usize;
        if count != state.params.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            r.read_exact(&mut len_bytes)?;
            let name_len = u32::from_le_bytes(len_bytes) as usize;
            if name_len > 1 << 12 {
                return Err(bad("parameter name is implausibly long"));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes).map_err(|_| bad("parameter name is not UTF-8"))?;
            let tensor = read_tensor_embedded::<S, _>(r)?;
            if !seen.insert(name.clone()) {
                return Err(bad("duplicate parameter entry"));
            }
            state.params.set(&name, tensor)?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes after the parameter table"));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::data::default_rig;
    use crate::numeric::{backward, grads_by_name, grad_check, GradCheckSettings};

    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            grid: GridSpec::new(6, 6, 2, 0.5).unwrap(),
            channels: 8,
            image_blocks: 1,
            plane_blocks: 1,
            heads: 2,
            points: 2,
            neighbor_same: 2,
            neighbor_cross: 2,
            stem_channels: 4,
            head_hidden: 8,
            ..EncoderConfig::default()
        }
    }

    fn random_images(rig: &CameraRig, seed: u64) -> Vec<Tensor<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        rig.cameras
            .iter()
            .map(|c| {
                let n = c.height * c.width * 3;
                let data: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
                Tensor::from_vec(vec![c.height, c.width, 3], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_configuration_validates_and_derives_pillar_refs() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pillar_refs(View::Top), 4);
        assert_eq!(cfg.pillar_refs(View::Side), 8);
        assert_eq!(cfg.pillar_refs(View::Front), 8);
        assert_eq!(cfg.blocks(), 3);
        assert_eq!(cfg.logit_classes(), 7);
        // A shallow volume caps the derived counts at the collapsed extent.
        let mut flat = cfg.clone();
        flat.grid = GridSpec::new(10, 6, 2, 0.5).unwrap();
        assert_eq!(flat.pillar_refs(View::Top), 2);
        assert_eq!(flat.pillar_refs(View::Side), 6);
        assert_eq!(flat.pillar_refs(View::Front), 8);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut c = EncoderConfig::default();
        c.channels = 30;
        c.heads = 4;
        assert!(c.validate().is_err(), "indivisible channels");
        let mut c = EncoderConfig::default();
        c.image_blocks = 0;
        assert!(c.validate().is_err(), "no image blocks");
        let mut c = EncoderConfig::default();
        c.feature_scales = 3;
        assert!(c.validate().is_err(), "unsupported scale count");
        let mut c = EncoderConfig::default();
        c.refs_top = Some(10);
        assert!(c.validate().is_err(), "more pillar refs than cells");
        let mut c = EncoderConfig::default();
        c.neighbor_radius = 0.5;
        assert!(c.validate().is_err(), "sub-cell disc radius");
    }

    #[test]
    fn config_text_round_trips_including_overrides() {
        let mut cfg = tiny_config();
        cfg.refs_side = Some(3);
        cfg.norm_enabled = false;
        cfg.neighbor_radius = 1.5;
        cfg.feature_scales = 2;
        let text = cfg.to_text();
        let back = EncoderConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(EncoderConfig::from_text("channels 32\n").is_err(), "missing keys");
        let extra = format!("{text}mystery 3\n");
        assert!(EncoderConfig::from_text(&extra).is_err(), "unknown key");
    }

    #[test]
    fn states_are_reproducible_per_seed_and_differ_across_seeds() {
        let cfg = tiny_config();
        let a = cfg.init_state::<f64>(7).unwrap();
        let b = cfg.init_state::<f64>(7).unwrap();
        let c = cfg.init_state::<f64>(8).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (name, t) in a.params.iter() {
            assert_eq!(t.data(), b.params.get(name).unwrap().data(), "{name}");
        }
        let qa = a.params.get("query.top").unwrap().data();
        let qc = c.params.get("query.top").unwrap().data();
        assert_ne!(qa, qc);
    }

    #[test]
    fn initialization_zeroes_offsets_weights_and_positional_embeddings() {
        let cfg = tiny_config();
        let state = cfg.init_state::<f64>(3).unwrap();
        for (name, t) in state.params.iter() {
            let zero_initialized = name.contains(".offsets.")
                || name.contains(".weights.")
                || name.starts_with("pos.");
            if zero_initialized {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name} should start at zero");
            }
        }
        assert_eq!(state.params.get("query.top").unwrap().shape(), &[6, 6, 8]);
        assert_eq!(state.params.get("query.side").unwrap().shape(), &[2, 6, 8]);
        assert_eq!(state.params.get("query.front").unwrap().shape(), &[6, 2, 8]);
    }

    #[test]
    fn zeroed_output_projections_make_encode_an_exact_identity() {
        let mut cfg = tiny_config();
        cfg.norm_enabled = false;
        let mut state = cfg.init_state::<f64>(11).unwrap();
        state.zero_output_projections().unwrap();
        let rig = default_rig(&cfg.grid, 16, 12);
        let images = random_images(&rig, 1);
        let out = state.encode(&rig, &images).unwrap();
        let initial = state.initial_planes().unwrap();
        for (view, want) in VIEWS.iter().zip(initial.iter()) {
            let got = out.plane(*view);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{} plane drifted", view.name());
            }
        }
    }

    #[test]
    fn encode_is_deterministic_for_fixed_inputs() {
        let cfg = tiny_config();
        let state = cfg.init_state::<f64>(21).unwrap();
        let rig = default_rig(&cfg.grid, 16, 12);
        let images = random_images(&rig, 2);
        let a = state.encode(&rig, &images).unwrap();
        let b = state.encode(&rig, &images).unwrap();
        for view in VIEWS {
            for (x, y) in a.plane(view).data().iter().zip(b.plane(view).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn a_deeper_stack_preserves_plane_shapes_on_an_anisotropic_grid() {
        let mut cfg = tiny_config();
        cfg.grid = GridSpec::new(12, 10, 4, 0.5).unwrap();
        cfg.image_blocks = 3;
        cfg.plane_blocks = 2;
        let state = cfg.init_state::<f64>(5).unwrap();
        let rig = default_rig(&cfg.grid, 12, 8);
        let images = random_images(&rig, 3);
        let out = state.encode(&rig, &images).unwrap();
        assert_eq!(out.plane(View::Top).shape(), &[12, 10, 8]);
        assert_eq!(out.plane(View::Side).shape(), &[4, 12, 8]);
        assert_eq!(out.plane(View::Front).shape(), &[10, 4, 8]);
    }

    #[test]
    fn camera_order_does_not_change_the_encoding() {
        let cfg = tiny_config();
        let state = cfg.init_state::<f64>(13).unwrap();
        let rig = default_rig(&cfg.grid, 16, 12);
        let images = random_images(&rig, 4);
        let forward = state.encode(&rig, &images).unwrap();
        let mut cameras = rig.cameras.clone();
        cameras.reverse();
        let reversed_rig = CameraRig::new(cameras).unwrap();
        let mut reversed_images = images.clone();
        reversed_images.reverse();
        let backwardly = state.encode(&reversed_rig, &reversed_images).unwrap();
        for view in VIEWS {
            for (a, b) in forward.plane(view).data().iter().zip(backwardly.plane(view).data()) {
                assert!((a - b).abs() < 1e-5, "{} plane differs: {a} vs {b}", view.name());
            }
        }
    }

    #[test]
    fn cameras_that_see_nothing_match_having_no_cameras_at_all() {
        let mut cfg = tiny_config();
        cfg.norm_enabled = true;
        let state = cfg.init_state::<f64>(17).unwrap();
        let empty_rig = CameraRig::new(Vec::new()).unwrap();
        let without = state.encode(&empty_rig, &[]).unwrap();
        // A camera far above the volume, looking away from it.
        let away = crate::geometry::Camera::looking([0.0, 0.0, 500.0], 0.0, 0.5, 10.0, 16, 12).unwrap();
        let rig = CameraRig::new(vec![away]).unwrap();
        let images = random_images(&rig, 5);
        let with = state.encode(&rig, &images).unwrap();
        for view in VIEWS {
            for (a, b) in with.plane(view).data().iter().zip(without.plane(view).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn constant_rows_stay_constant_without_cameras() {
        // With every query of a plane equal and no image terms, plane
        // attention and the feed-forward treat all queries of a plane the
        // same, so rows must stay uniform through the whole stack.
        let mut cfg = tiny_config();
        cfg.norm_enabled = false;
        let mut state = cfg.init_state::<f64>(19).unwrap();
        for view in VIEWS {
            let (a, b) = view.extent(&cfg.grid);
            let mut row = vec![0.0; cfg.channels];
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = 0.1 * (k as f64 + 1.0) * (view_index(view) as f64 + 1.0);
            }
            let data: Vec<f64> = row.iter().copied().cycle().take(a * b * cfg.channels).collect();
            state
                .params
                .set(&format!("query.{}", view.name()), Tensor::from_vec(vec![a, b, cfg.channels], data).unwrap())
                .unwrap();
        }
        let rig = CameraRig::new(Vec::new()).unwrap();
        let out = state.encode(&rig, &[]).unwrap();
        for view in VIEWS {
            let plane = out.plane(view);
            let c = cfg.channels;
            let first = &plane.data()[..c];
            for row in plane.data().chunks(c) {
                for (a, b) in row.iter().zip(first) {
                    assert!((a - b).abs() < 1e-12, "{} rows diverged", view.name());
                }
            }
        }
    }

    #[test]
    fn every_parameter_reachable_by_encode_receives_gradient() {
        let cfg = tiny_config();
        let mut state = cfg.init_state::<f64>(23).unwrap();
        // At exact zero-init the query stream reaches image attention only
        // through the zero offset/weight projections, leaving its norm
        // parameters without gradient; probe a generic state instead.
        state.perturb_offsets(24, 0.2).unwrap();
        let rig = default_rig(&cfg.grid, 16, 12);
        let images = random_images(&rig, 6);
        let planes = state.encode(&rig, &images).unwrap();
        // Pull the three planes and the head into one scalar so gradient
        // reachability covers the full parameter set.
        let voxels = planes.voxel_features().unwrap();
        let logits = crate::head::mlp_head(
            &voxels,
            state.params.get("head.w1").unwrap(),
            state.params.get("head.b1").unwrap(),
            state.params.get("head.w2").unwrap(),
            state.params.get("head.b2").unwrap(),
        )
        .unwrap();
        let loss = logits.mul(&logits).unwrap().mean();
        let grads = backward(&loss).unwrap();
        let by_name = grads_by_name(&grads, &state.params);
        for (name, grad) in &by_name {
            let nonzero = grad.data().iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }
        assert_eq!(by_name.len(), state.params.len());
    }

    #[test]
    fn encode_gradients_match_finite_differences_on_a_tiny_stack() {
        let mut cfg = tiny_config();
        cfg.grid = GridSpec::new(4, 4, 2, 0.5).unwrap();
        cfg.neighbor_same = 1;
        cfg.neighbor_cross = 1;
        cfg.points = 1;
        let mut state = cfg.init_state::<f64>(29).unwrap();
        state.perturb_offsets(31, 0.25).unwrap();
        let rig = default_rig(&cfg.grid, 8, 8);
        let rig = CameraRig::new(rig.cameras[..2].to_vec()).unwrap();
        let images = random_images(&rig, 7);
        let report = grad_check(
            |ps| {
                let probe = state.with_params(ps.clone());
                let planes = probe.encode(&rig, &images).map_err(crate::Error::from)?;
                let mut acc: Option<Tensor<f64>> = None;
                for view in VIEWS {
                    let p = planes.plane(view);
                    let sq = p.mul(p)?.mean();
                    acc = Some(match acc {
                        Some(t) => t.add(&sq)?,
                        None => sq,
                    });
                }
                Ok(acc.expect("three views"))
            },
            &state.params,
            &GradCheckSettings { tolerance: 1e-3, max_coords_per_param: 6, seed: 5, ..Default::default() },
        )
        .unwrap();
        assert!(
            report.fraction_within_tolerance() >= 0.99,
            "worst: {:?}",
            report.worst()
        );
    }

    #[test]
    fn checkpoints_round_trip_bitwise_and_reject_corruption() {
        let cfg = tiny_config();
        let state = cfg.init_state::<f32>(37).unwrap();
        let mut bytes = Vec::new();
        state.write_to(&mut bytes).unwrap();
        let restored = EncoderState::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(restored.config(), state.config());
        assert_eq!(restored.seed(), state.seed());
        for (name, t) in state.params.iter() {
            let r = restored.params.get(name).unwrap();
            let same = t.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name} changed across the round trip");
        }
        // Restored states encode identically.
        let rig = default_rig(&cfg.grid, 16, 12);
        let images: Vec<Tensor<f32>> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            rig.cameras
                .iter()
                .map(|c| {
                    let n = c.height * c.width * 3;
                    let data: Vec<f32> = (0..n).map(|_| r.gen_range(0.0..1.0f32)).collect();
                    Tensor::from_vec(vec![c.height, c.width, 3], data).unwrap()
                })
                .collect()
        };
        let a = state.encode(&rig, &images).unwrap();
        let b = restored.encode(&rig, &images).unwrap();
        for view in VIEWS {
            for (x, y) in a.plane(view).data().iter().zip(b.plane(view).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Corrupt magic.
        let mut wrong = bytes.clone();
        wrong[0] ^= 0xff;
        assert!(EncoderState::<f32>::read_from(&mut wrong.as_slice()).is_err());
        // Truncation.
        let cut = &bytes[..bytes.len() - 7];
        assert!(EncoderState::<f32>::read_from(&mut &cut[..]).is_err());
        // Trailing junk.
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(EncoderState::<f32>::read_from(&mut extended.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_files_round_trip_through_disk() {
        let cfg = tiny_config();
        let state = cfg.init_state::<f32>(41).unwrap();
        let dir = std::env::temp_dir().join(format!("enc-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("state.ckpt");
        state.save(&path).unwrap();
        let restored = EncoderState::<f32>::load(&path).unwrap();
        for (name, t) in state.params.iter() {
            assert_eq!(t.data(), restored.params.get(name).unwrap().data(), "{name}");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
