//! The full retrieval network: shared encoder, fusion module and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig, ViewImage};
use crate::heads::{Descriptor, HeadCache, Mcb, McbConfig, McbOutput, Mode};
use crate::init::Parametrized;
use crate::mfaf::{Branch, BranchSet, Mfaf, MfafCache, MfafConfig};
use crate::tensor::{Parameter, Result, Scalar, Tensor};

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mfaf: MfafConfig,
    pub mcb: McbConfig,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub mfaf: Mfaf<T>,
    pub mcb: Mcb<T>,
}

/// Forward values of a batch.
#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    backbone: Vec<BackboneCache<T>>,
    mfaf: Vec<MfafCache<T>>,
    heads: BTreeMap<Branch, HeadCache<T>>,
}

impl<T: Scalar> ModelCache<T> {
    pub fn mfaf(&self, k: usize) -> &MfafCache<T> {
        &self.mfaf[k]
    }

    pub fn heads(&self) -> &BTreeMap<Branch, HeadCache<T>> {
        &self.heads
    }
}

impl<T: Scalar> Model<T> {
    /// Initialises every parameter from one seeded stream, in the order
    /// backbone, fusion module, heads.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone, &mut rng)?;
        let c = config.backbone.channels;
        let mfaf = Mfaf::new(c, config.mfaf.clone(), &mut rng)?;
        let mcb = Mcb::new(c, config.mcb, &mut rng)?;
        Ok(Self { backbone, mfaf, mcb })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config,
            mfaf: self.mfaf.config.clone(),
            mcb: self.mcb.config,
        }
    }

    pub fn active_branches(&self) -> Vec<Branch> {
        self.mfaf.config.branches()
    }

    pub fn descriptor_len(&self) -> usize {
        self.active_branches().len() * self.mcb.config.embed_dim
    }

    /// Runs a batch of images. Train mode standardises with batch statistics
    /// and needs at least two images.
    pub fn forward(&self, batch: &[&Tensor<T>], mode: Mode) -> Result<(McbOutput<T>, ModelCache<T>)> {
        let mut backbone = Vec::with_capacity(batch.len());
        let mut mfaf = Vec::with_capacity(batch.len());
        let mut sets = Vec::with_capacity(batch.len());
        for px in batch {
            let (map, bc) = self.backbone.forward(px)?;
            let (set, mc) = self.mfaf.forward(&map)?;
            backbone.push(bc);
            mfaf.push(mc);
            sets.push(set);
        }
        let mut out = self.mcb.forward(&sets, mode)?;
        let heads = std::mem::take(&mut out.caches);
        Ok((out, ModelCache { backbone, mfaf, heads }))
    }

    /// Accumulates gradients into every parameter reached by the forward pass.
    pub fn backward(
        &mut self,
        cache: &ModelCache<T>,
        grad_embeddings: &[BTreeMap<Branch, Tensor<T>>],
        grad_logits: &[BTreeMap<Branch, Tensor<T>>],
    ) -> Result<()> {
        let g_sets: Vec<BranchSet<T>> = self.mcb.backward(&cache.heads, grad_embeddings, grad_logits)?;
        for (k, g) in g_sets.iter().enumerate() {
            let g_map = self.mfaf.backward(&cache.mfaf[k], g)?;
            self.backbone.backward(&cache.backbone[k], &g_map)?;
        }
        Ok(())
    }

    /// Test-mode descriptor values for raw pixels.
    pub fn describe(&self, pixels: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward(&[pixels], Mode::Test)?.0.concatenated(0))
    }

    pub fn buffers(&self) -> Vec<&Parameter<T>> {
        self.mcb.buffers()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.mcb.buffers_mut()
    }

    /// Refreshes the running statistics of the active heads from a training batch.
    pub fn update_running_stats(&mut self, cache: &ModelCache<T>) {
        self.mcb.update_running_stats(&cache.heads);
    }
}

impl Model<f32> {
    pub fn descriptor(&self, image: &ViewImage) -> Result<Descriptor<f32>> {
        Ok(Descriptor {
            values: self.describe(&image.pixels)?,
            view: image.view,
            class_id: image.class_id,
            coords: image.coords,
        })
    }
}

impl<T: Scalar> Parametrized<T> for Model<T> {
    fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.backbone.params();
        v.extend(self.mfaf.params());
        v.extend(self.mcb.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.mfaf.params_mut());
        v.extend(self.mcb.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::<f32>::new(&ModelConfig::default(), 1).unwrap();
        let mut names: Vec<&str> = m
            .params()
            .iter()
            .chain(m.buffers().iter())
            .map(|p| p.name.as_str())
            .collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn descriptor_length_follows_active_branches() {
        let mut cfg = ModelConfig::default();
        let img = Tensor::from_fn(&[32, 32, 3], |i| (i % 7) as f32 / 7.0);
        let m = Model::<f32>::new(&cfg, 2).unwrap();
        assert_eq!(m.describe(&img).unwrap().len(), 96);
        cfg.mfaf.hf_branch = false;
        let m = Model::<f32>::new(&cfg, 2).unwrap();
        assert_eq!(m.describe(&img).unwrap().len(), 64);
        assert_eq!(m.descriptor_len(), 64);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::new(&ModelConfig::default(), 9).unwrap();
        let b = Model::<f32>::new(&ModelConfig::default(), 9).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
    }
}
