//! Spatial perceptual distance over a pluggable multi-scale feature
//! extractor, and the multiplicative MSE × PD error map used for scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TrustMAEModel};
use crate::substrate::ops;
use crate::substrate::{SubstrateError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum PerceptualError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid extractor: {0}")]
    InvalidExtractor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which signal produced an error map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMapSource {
    Mse,
    Pd,
    MsePd,
    Ssim,
}

/// Nonnegative per-pixel anomaly energies.
#[derive(Clone, Debug)]
pub struct ErrorMap {
    pub values: Tensor,
    pub source: ErrorMapSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    RandomConvPyramid,
    TrainedEncoder,
}

enum Backend {
    /// Frozen random 3×3 stride-2 conv stack, LeakyReLU(0.2) between levels.
    RandomConv { kernels: Vec<Tensor> },
    /// Intermediate activations of a trained encoder.
    TrainedEncoder(Box<TrustMAEModel>),
}

/// Multi-scale feature extractor with per-layer channel weights γ_l.
pub struct FeaturePyramidExtractor {
    backend: Backend,
    pub channel_weights: Vec<Tensor>,
    pub normalize_channels: bool,
}

/// Default channel widths per pyramid level.
fn level_channels(level: usize) -> usize {
    (8 << level).min(64)
}

/// Build the default frozen random pyramid (seed 7, depth 3 in the default
/// configuration).
pub fn build_extractor(
    kind: ExtractorKind,
    seed: u64,
    depth: usize,
    input_channels: usize,
) -> Result<FeaturePyramidExtractor, PerceptualError> {
    if depth == 0 {
        return Err(PerceptualError::InvalidExtractor("depth must be >= 1".into()));
    }
    match kind {
        ExtractorKind::RandomConvPyramid => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut kernels = Vec::with_capacity(depth);
            let mut weights = Vec::with_capacity(depth);
            let mut c_in = input_channels;
            for level in 0..depth {
                let c_out = level_channels(level);
                let fan_in = c_in * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                kernels.push(Tensor::rand_uniform(&[c_out, c_in, 3, 3], -bound, bound, &mut rng));
                weights.push(Tensor::full(&[c_out], 1.0 / c_out as f64));
                c_in = c_out;
            }
            Ok(FeaturePyramidExtractor {
                backend: Backend::RandomConv { kernels },
                channel_weights: weights,
                normalize_channels: true,
            })
        }
        ExtractorKind::TrainedEncoder => Err(PerceptualError::InvalidExtractor(
            "trained-encoder extractor needs a model; use from_trained_encoder".into(),
        )),
    }
}

impl FeaturePyramidExtractor {
    /// Reuse a trained model's encoder activations as the feature pyramid.
    pub fn from_trained_encoder(model: TrustMAEModel) -> Self {
        let weights = model
            .config
            .encoder_widths()
            .iter()
            .map(|&c| Tensor::full(&[c], 1.0 / c as f64))
            .collect();
        Self {
            backend: Backend::TrainedEncoder(Box::new(model)),
            channel_weights: weights,
            normalize_channels: true,
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_weights.len()
    }

    /// Feature maps φ_l(x), coarsest last, for a (C,H,W) image.
    pub fn levels(&self, image: &Tensor) -> Result<Vec<Tensor>, PerceptualError> {
        let (c, h, w) = match *image.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(PerceptualError::ShapeMismatch {
                    left: image.shape().to_vec(),
                    right: vec![0, 0, 0],
                })
            }
        };
        match &self.backend {
            Backend::RandomConv { kernels } => {
                let mut tape = Tape::new();
                let mut x = tape.leaf(image.clone().reshape(&[1, c, h, w])?);
                let mut out = Vec::with_capacity(kernels.len());
                for kernel in kernels {
                    let k = tape.leaf(kernel.clone());
                    let y = ops::conv2d(&mut tape, x, k, 2, 1)?;
                    let y = ops::leaky_relu(&mut tape, y, 0.2);
                    let v = tape.value(y).clone();
                    let s = v.shape().to_vec();
                    out.push(v.reshape(&[s[1], s[2], s[3]])?);
                    x = y;
                }
                Ok(out)
            }
            Backend::TrainedEncoder(model) => {
                let x = image.clone().reshape(&[1, c, h, w])?;
                let levels = model.encode_pyramid(&x)?;
                levels
                    .into_iter()
                    .map(|l| {
                        let s = l.shape().to_vec();
                        l.reshape(&[s[1], s[2], s[3]]).map_err(PerceptualError::from)
                    })
                    .collect()
            }
        }
    }
}

/// Unit-normalize each spatial feature vector (in place representation).
fn normalize_feature_map(f: &Tensor) -> Tensor {
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = f.data().to_vec();
    let hw = h * w;
    for pos in 0..hw {
        let mut norm = 0.0;
        for ch in 0..c {
            let v = out[ch * hw + pos];
            norm += v * v;
        }
        let norm = (norm + 1e-10).sqrt();
        for ch in 0..c {
            out[ch * hw + pos] /= norm;
        }
    }
    Tensor::new(f.shape(), out).expect("shape preserved")
}

/// Per-pixel channel-mean squared error of two (C,H,W) images.
pub fn mse_map(x: &Tensor, x_hat: &Tensor) -> Result<ErrorMap, PerceptualError> {
    if x.shape() != x_hat.shape() {
        return Err(PerceptualError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(PerceptualError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![0, 0, 0],
            })
        }
    };
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for pos in 0..hw {
            let d = x.data()[ch * hw + pos] - x_hat.data()[ch * hw + pos];
            out[pos] += d * d / c as f64;
        }
    }
    Ok(ErrorMap {
        values: Tensor::new(&[h, w], out)?,
        source: ErrorMapSource::Mse,
    })
}

/// PD(x, x̂): squared feature differences, channel-aggregated with γ_l, each
/// level bilinearly upsampled to the image size and summed.
pub fn perceptual_distance_map(
    x: &Tensor,
    x_hat: &Tensor,
    extractor: &FeaturePyramidExtractor,
) -> Result<ErrorMap, PerceptualError> {
    if x.shape() != x_hat.shape() {
        return Err(PerceptualError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let fx = extractor.levels(x)?;
    let fy = extractor.levels(x_hat)?;
    let mut total = vec![0.0; h * w];
    for (level, (a, b)) in fx.iter().zip(&fy).enumerate() {
        let (a, b) = if extractor.normalize_channels {
            (normalize_feature_map(a), normalize_feature_map(b))
        } else {
            (a.clone(), b.clone())
        };
        let gamma = &extractor.channel_weights[level];
        let (c, lh, lw) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let hw = lh * lw;
        let mut level_map = vec![0.0; hw];
        for ch in 0..c {
            let g = gamma.data()[ch];
            for pos in 0..hw {
                let d = a.data()[ch * hw + pos] - b.data()[ch * hw + pos];
                level_map[pos] += g * d * d;
            }
        }
        let level_map = Tensor::new(&[1, lh, lw], level_map)?;
        let up = ops::bilinear_resize(&level_map, h, w)?;
        for (t, &v) in total.iter_mut().zip(up.data()) {
            *t += v;
        }
    }
    Ok(ErrorMap {
        values: Tensor::new(&[h, w], total)?,
        source: ErrorMapSource::Pd,
    })
}

/// Elementwise product of the MSE map and the perceptual distance map.
pub fn combined_error_map(
    x: &Tensor,
    x_hat: &Tensor,
    extractor: &FeaturePyramidExtractor,
) -> Result<ErrorMap, PerceptualError> {
    let mse = mse_map(x, x_hat)?;
    let pd = perceptual_distance_map(x, x_hat, extractor)?;
    let values = mse.values.zip(&pd.values, |a, b| a * b)?;
    Ok(ErrorMap {
        values,
        source: ErrorMapSource::MsePd,
    })
}

/// Write a 16-bit grayscale PNG of the map, min-max normalized per image;
/// returns the (min, max) bounds for the sidecar record.
pub fn write_error_map_png(
    map: &ErrorMap,
    path: &std::path::Path,
) -> Result<(f64, f64), PerceptualError> {
    let (h, w) = match *map.values.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(PerceptualError::ShapeMismatch {
                left: map.values.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    let lo = map.values.min();
    let hi = map.values.max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (i, pixel) in img.pixels_mut().enumerate() {
        let v = (map.values.data()[i] - lo) / span;
        *pixel = image::Luma([(v * 65535.0).round().clamp(0.0, 65535.0) as u16]);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| PerceptualError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    img.save(path).map_err(|e| PerceptualError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extractor() -> FeaturePyramidExtractor {
        build_extractor(ExtractorKind::RandomConvPyramid, 7, 3, 1).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn same_seed_same_features() {
        let a = extractor();
        let b = extractor();
        let x = image(1);
        let fa = a.levels(&x).unwrap();
        let fb = b.levels(&x).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn depth_levels_halve_spatially() {
        let e = extractor();
        let levels = e.levels(&image(2)).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(&levels[0].shape()[1..], &[8, 8]);
        assert_eq!(&levels[1].shape()[1..], &[4, 4]);
        assert_eq!(&levels[2].shape()[1..], &[2, 2]);
    }

    #[test]
    fn zero_depth_is_rejected() {
        assert!(build_extractor(ExtractorKind::RandomConvPyramid, 7, 0, 1).is_err());
    }

    #[test]
    fn pd_of_identical_images_is_zero_and_symmetric() {
        let e = extractor();
        let x = image(3);
        let y = image(4);
        let same = perceptual_distance_map(&x, &x, &e).unwrap();
        assert!(same.values.data().iter().all(|&v| v.abs() < 1e-12));
        let ab = perceptual_distance_map(&x, &y, &e).unwrap();
        let ba = perceptual_distance_map(&y, &x, &e).unwrap();
        for (a, b) in ab.values.data().iter().zip(ba.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ab.values.data().iter().all(|&v| v >= 0.0));
        assert_eq!(ab.values.shape(), &[16, 16]);
    }

    #[test]
    fn scaling_gamma_scales_the_map_linearly() {
        let mut e = extractor();
        let x = image(5);
        let y = image(6);
        let base = perceptual_distance_map(&x, &y, &e).unwrap();
        for g in &mut e.channel_weights {
            *g = g.map(|v| 3.0 * v);
        }
        let scaled = perceptual_distance_map(&x, &y, &e).unwrap();
        for (a, b) in base.values.data().iter().zip(scaled.values.data()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_map_annihilates_where_either_factor_is_zero() {
        let e = extractor();
        let x = image(8);
        let combined = combined_error_map(&x, &x, &e).unwrap();
        assert!(combined.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(combined.source, ErrorMapSource::MsePd);
    }

    #[test]
    fn heatmap_png_round_trips_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps/heat.png");
        let map = ErrorMap {
            values: Tensor::from_fn(&[4, 4], |i| i as f64 * 0.1),
            source: ErrorMapSource::Mse,
        };
        let (lo, hi) = write_error_map_png(&map, &path).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 1.5).abs() < 1e-12);
        let loaded = image::open(&path).unwrap().to_luma16();
        assert_eq!(loaded.dimensions(), (4, 4));
        assert_eq!(loaded.get_pixel(0, 0).0[0], 0);
        assert_eq!(loaded.get_pixel(3, 3).0[0], 65535);
    }
}
