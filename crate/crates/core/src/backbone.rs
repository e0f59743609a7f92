//! Weight-shared toy encoder standing in for a large vision backbone.
//!
//! Each image is cut into non-overlapping square patches, every patch is
//! embedded linearly, and a single 1×1 mixing layer with relu produces the
//! `grid × grid × C` feature map. Drone and satellite images go through the
//! same [`Backbone`] value, so both views read and update one parameter set.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::init::{fan_in_uniform, Parametrized};
use crate::tensor::mft::{self, MftError};
use crate::tensor::{
    conv1x1, conv1x1_backward, pointwise, pointwise_backward, Parameter, Result, Scalar, Tensor, TensorError, Unary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Drone,
    Satellite,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Drone => View::Satellite,
            View::Satellite => View::Drone,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Drone => "drone",
            View::Satellite => "satellite",
        }
    }
}

/// An RGB image in `[0, 1]` with its view domain and scene label.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    /// `H × W × 3`.
    pub pixels: Tensor<f32>,
    pub view: View,
    pub class_id: u32,
    pub coords: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Side of the square input image in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 4,
            channels: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 || self.image_size == 0 {
            return Err(TensorError::InvalidArgument {
                op: "backbone",
                reason: "image size, patch and channels must be positive".into(),
            });
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(TensorError::InvalidArgument {
                op: "backbone",
                reason: format!(
                    "image size {} is not divisible by patch {}",
                    self.image_size, self.patch
                ),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.grid(), self.grid(), self.channels]
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub embed_w: Parameter<T>,
    pub embed_b: Parameter<T>,
    pub mix_w: Parameter<T>,
    pub mix_b: Parameter<T>,
}

/// Forward values kept for [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    patches: Tensor<T>,
    embedded: Tensor<T>,
    mixed: Tensor<T>,
    output: Tensor<T>,
}

/// Rearranges `H × W × 3` pixels into `grid × grid × (p·p·3)` patch vectors,
/// each ordered by (row in patch, column in patch, colour).
pub fn patchify<T: Scalar>(pixels: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (h, w, c) = pixels.dims3("patchify")?;
    if c != 3 || patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::InvalidArgument {
            op: "patchify",
            reason: format!("image {h}x{w}x{c} does not tile into {patch}-pixel RGB patches"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let d = pixels.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                out.extend_from_slice(&d[row * 3..(row + patch) * 3]);
            }
        }
    }
    Tensor::new(vec![gh, gw, patch * patch * 3], out)
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, pd) = (config.channels, config.patch_dim());
        Ok(Self {
            config,
            embed_w: Parameter::new("backbone.embed.weight", fan_in_uniform(rng, &[c, pd], pd)),
            embed_b: Parameter::new("backbone.embed.bias", Tensor::zeros(&[c])),
            mix_w: Parameter::new("backbone.mix.weight", fan_in_uniform(rng, &[c, c], c)),
            mix_b: Parameter::new("backbone.mix.bias", Tensor::zeros(&[c])),
        })
    }

    fn check_image(&self, pixels: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        if pixels.shape() != [s, s, 3] {
            return Err(TensorError::InvalidArgument {
                op: "encode",
                reason: format!("image shape {:?} does not match configured {s}x{s}x3", pixels.shape()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, pixels: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        self.check_image(pixels)?;
        let patches = patchify(pixels, self.config.patch)?;
        let embedded = conv1x1(&patches, &self.embed_w.value, &self.embed_b.value)?;
        let mixed = conv1x1(&embedded, &self.mix_w.value, &self.mix_b.value)?;
        let output = pointwise(&mixed, Unary::Relu);
        Ok((
            output.clone(),
            BackboneCache {
                patches,
                embedded,
                mixed,
                output,
            },
        ))
    }

    /// The feature map of one image.
    pub fn encode(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(pixels)?.0)
    }

    /// Accumulates parameter gradients. The image itself gets no gradient.
    pub fn backward(&mut self, cache: &BackboneCache<T>, grad_out: &Tensor<T>) -> Result<()> {
        let g_mixed = pointwise_backward(&cache.mixed, &cache.output, Unary::Relu, grad_out)?;
        let gm = conv1x1_backward(&cache.embedded, &self.mix_w.value, &g_mixed)?;
        self.mix_w.accumulate(&gm.weight)?;
        self.mix_b.accumulate(&gm.bias)?;
        let ge = conv1x1_backward(&cache.patches, &self.embed_w.value, &gm.input)?;
        self.embed_w.accumulate(&ge.weight)?;
        self.embed_b.accumulate(&ge.bias)?;
        Ok(())
    }
}

impl<T: Scalar> Parametrized<T> for Backbone<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.embed_w, &self.embed_b, &self.mix_w, &self.mix_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.embed_w, &mut self.embed_b, &mut self.mix_w, &mut self.mix_b]
    }
}

/// Errors from [`import_features`].
#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error(transparent)]
    Format(#[from] MftError),
    #[error("feature map shape {actual:?} does not match configured {expected:?}")]
    Shape { expected: [usize; 3], actual: Vec<usize> },
}

/// Loads an externally produced `H × W × C` feature map and checks it against
/// the configured grid and channel count.
pub fn import_features(
    path: impl AsRef<Path>,
    config: &BackboneConfig,
) -> std::result::Result<Tensor<f32>, ImportError> {
    let t = mft::read_feature_map::<f32>(path)?;
    let expected = config.output_shape();
    if t.shape() != expected {
        return Err(ImportError::Shape {
            expected,
            actual: t.shape().to_vec(),
        });
    }
    Ok(t)
}

pub fn export_features(path: impl AsRef<Path>, map: &Tensor<f32>) -> std::result::Result<(), MftError> {
    mft::write(path, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> Backbone<f64> {
        let cfg = BackboneConfig {
            image_size: 8,
            patch: 4,
            channels: 5,
        };
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn patchify_orders_rows_then_colour() {
        let px = Tensor::from_fn(&[4, 4, 3], |i| i as f64);
        let p = patchify(&px, 2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 12]);
        // First patch: pixels (0,0),(0,1),(1,0),(1,1).
        assert_eq!(&p.data()[..12], &[0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]);
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_map() {
        let b = small();
        let out = b.encode(&Tensor::zeros(&[8, 8, 3])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let b = small();
        let img = Tensor::from_fn(&[8, 8, 3], |i| ((i * 7) % 11) as f64 / 11.0);
        assert_eq!(b.encode(&img).unwrap(), b.encode(&img).unwrap());
    }

    #[test]
    fn rejects_non_divisible_config_and_wrong_image() {
        let cfg = BackboneConfig {
            image_size: 10,
            patch: 4,
            channels: 2,
        };
        assert!(Backbone::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(small().encode(&Tensor::zeros(&[12, 12, 3])).is_err());
    }
}
