//! Convolutional stem that turns camera images into the value planes read
//! by image attention, together with the affine map from pixel coordinates
//! to feature-plane coordinates.

use crate::numeric::{NumericError, ParamSet, Tensor};
use crate::scalar::Real;

use super::{EncoderConfig, EncoderError};

/// Camera features at one resolution, for every camera of the rig.
pub struct FeatureScale<S: Real> {
    /// Per camera `[rows, cols, channels]`.
    pub per_camera: Vec<Tensor<S>>,
    /// Continuous pixel `(u, v)` maps to feature coordinates
    /// `(v * map_scale + map_offset, u * map_scale + map_offset)`.
    pub map_scale: f64,
    pub map_offset: f64,
}

impl<S: Real> FeatureScale<S> {
    /// Feature-plane coordinates (row, col) of a continuous pixel position.
    pub fn feature_coord(&self, u: f64, v: f64) -> [f64; 2] {
        [v * self.map_scale + self.map_offset, u * self.map_scale + self.map_offset]
    }
}

/// Multi-resolution image features; `scales[0]` is the finest.
pub struct ImageFeatures<S: Real> {
    pub scales: Vec<FeatureScale<S>>,
}

/// A 3x3 stride-2 convolution with one-pixel zero padding, as a matmul over
/// extracted patches. Halves each spatial extent (rounding up).
fn conv_s2<S: Real>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericError> {
    let (cols, [ho, wo]) = x.im2col(3, 2, 1)?;
    cols.matmul(w)?.add_row(b)?.reshape(&[ho, wo, w.shape()[1]])
}

/// Names of the stem parameters for a given scale count.
pub fn stem_param_names(scales: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=(1 + scales) {
        names.push(format!("stem.conv{i}.w"));
        names.push(format!("stem.conv{i}.b"));
    }
    names
}

/// Runs the stem over every camera image.
///
/// Layer 1 halves the image and expands 3 color channels to the stem width;
/// layer 2 halves again and reaches the encoder channel count, giving the
/// finest scale at 1/4 resolution. With two scales enabled, layer 3 halves
/// once more at the same channel count.
///
/// Images must be `[height, width, 3]` matching their camera's extents, with
/// every camera sharing the same extents.
pub fn extract_image_features<S: Real>(
    config: &EncoderConfig,
    params: &ParamSet<S>,
    images: &[Tensor<S>],
    extents: &[(usize, usize)],
) -> Result<ImageFeatures<S>, EncoderError> {
    if images.len() != extents.len() {
        return Err(EncoderError::CameraCount { expected: extents.len(), got: images.len() });
    }
    for (i, (img, &(h, w))) in images.iter().zip(extents).enumerate() {
        if img.shape() != [h, w, 3] {
            return Err(EncoderError::ImageShape { index: i, got: img.shape().to_vec(), rows: h, cols: w });
        }
        if (h, w) != extents[0] {
            return Err(EncoderError::ImageShape { index: i, got: img.shape().to_vec(), rows: extents[0].0, cols: extents[0].1 });
        }
    }
    let w1 = params.get("stem.conv1.w")?;
    let b1 = params.get("stem.conv1.b")?;
    let w2 = params.get("stem.conv2.w")?;
    let b2 = params.get("stem.conv2.b")?;
    let mut fine = Vec::with_capacity(images.len());
    for img in images {
        let x = conv_s2(img, w1, b1)?.gelu();
        fine.push(conv_s2(&x, w2, b2)?);
    }
    let mut scales = vec![FeatureScale { per_camera: fine, map_scale: 0.25, map_offset: -0.125 }];
    if config.feature_scales == 2 {
        let w3 = params.get("stem.conv3.w")?;
        let b3 = params.get("stem.conv3.b")?;
        let coarse = scales[0]
            .per_camera
            .iter()
            .map(|f| conv_s2(&f.gelu(), w3, b3))
            .collect::<Result<Vec<_>, _>>()?;
        scales.push(FeatureScale { per_camera: coarse, map_scale: 0.125, map_offset: -0.0625 });
    }
    Ok(ImageFeatures { scales })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::encoder::EncoderConfig;
    use crate::numeric::{grad_check, GradCheckSettings, ParamSet, Tensor};

    use super::*;

    fn stem_params(config: &EncoderConfig, seed: u64) -> ParamSet<f64> {
        let mut params = ParamSet::new();
        config.register_stem_params(&mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        params
    }

    fn small_config() -> EncoderConfig {
        let mut c = EncoderConfig::default();
        c.channels = 8;
        c.stem_channels = 4;
        c
    }

    #[test]
    fn the_fine_scale_quarters_the_image_and_reaches_the_channel_count() {
        let config = small_config();
        let params = stem_params(&config, 1);
        let img = Tensor::<f64>::ones(&[24, 20, 3]);
        let feats = extract_image_features(&config, &params, &[img], &[(24, 20)]).unwrap();
        assert_eq!(feats.scales.len(), 1);
        assert_eq!(feats.scales[0].per_camera[0].shape(), &[6, 5, 8]);
    }

    #[test]
    fn enabling_a_second_scale_halves_the_fine_extents_again() {
        let mut config = small_config();
        config.feature_scales = 2;
        let params = stem_params(&config, 2);
        let img = Tensor::<f64>::ones(&[32, 16, 3]);
        let feats = extract_image_features(&config, &params, &[img], &[(32, 16)]).unwrap();
        assert_eq!(feats.scales.len(), 2);
        assert_eq!(feats.scales[0].per_camera[0].shape(), &[8, 4, 8]);
        assert_eq!(feats.scales[1].per_camera[0].shape(), &[4, 2, 8]);
    }

    #[test]
    fn zero_images_with_a_zeroed_final_layer_yield_zero_features() {
        let config = small_config();
        let mut params = stem_params(&config, 3);
        params.set("stem.conv2.w", Tensor::zeros(&[9 * 4, 8])).unwrap();
        params.set("stem.conv2.b", Tensor::zeros(&[8])).unwrap();
        let img = Tensor::<f64>::zeros(&[16, 16, 3]);
        let feats = extract_image_features(&config, &params, &[img], &[(16, 16)]).unwrap();
        assert!(feats.scales[0].per_camera[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pixel_centers_of_aligned_patches_map_to_integer_feature_coordinates() {
        // The fine scale reduces by 4; the feature cell (r, c) is centered
        // on the input pixel with index (4r, 4c), whose continuous position
        // is (4r + 0.5, 4c + 0.5).
        let scale = FeatureScale::<f64> { per_camera: Vec::new(), map_scale: 0.25, map_offset: -0.125 };
        assert_eq!(scale.feature_coord(0.5, 0.5), [0.0, 0.0]);
        assert_eq!(scale.feature_coord(8.5, 4.5), [1.0, 2.0]);
        let coarse = FeatureScale::<f64> { per_camera: Vec::new(), map_scale: 0.125, map_offset: -0.0625 };
        assert_eq!(coarse.feature_coord(16.5, 8.5), [1.0, 2.0]);
    }

    #[test]
    fn mismatched_image_extents_are_rejected() {
        let config = small_config();
        let params = stem_params(&config, 4);
        let img = Tensor::<f64>::ones(&[16, 16, 3]);
        let err = extract_image_features(&config, &params, &[img], &[(16, 20)]);
        assert!(err.is_err());
    }

    #[test]
    fn stem_gradients_match_finite_differences() {
        let config = small_config();
        let mut params = stem_params(&config, 5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let img: Vec<f64> = (0..8 * 8 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        params.insert("img", Tensor::from_vec(vec![8, 8, 3], img).unwrap()).unwrap();
        let report = grad_check(
            |ps| {
                let feats = extract_image_features(&config, ps, &[ps.get("img")?.clone()], &[(8, 8)])
                    .map_err(crate::Error::from)?;
                let f = &feats.scales[0].per_camera[0];
                Ok(f.mul(f)?.mean())
            },
            &params,
            &GradCheckSettings { tolerance: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(report.is_pass(), "worst: {:?}", report.worst());
    }
}
